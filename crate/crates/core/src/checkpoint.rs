//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | field |
//! |---|---|
//! | 8 | magic `P2PCKPT\0` |
//! | 4 | version |
//! | 8 × 8 | frame, feature, latent, hidden widths; posterior, prior, generator depths; conditioned flag |
//! | 8 | parameter scalar count |
//! | 8 × n | parameters in registration order, `f64` |
//! | 8 | checksum: first 8 bytes of SHA-256 over everything above |

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{Architecture, P2PModel};

pub const MAGIC: &[u8; 8] = b"P2PCKPT\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 8 + 4 + 8 * 8 + 8;

fn checksum(bytes: &[u8]) -> [u8; 8] {
    let digest = Sha256::digest(bytes);
    digest[..8].try_into().expect("sha256 is 32 bytes")
}

pub fn to_bytes(model: &P2PModel) -> Vec<u8> {
    let a = &model.arch;
    let n = model.params.numel();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * n + 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        a.frame_dim,
        a.feat_dim,
        a.latent_dim,
        a.hidden,
        a.posterior_layers,
        a.prior_layers,
        a.generator_layers,
        a.conditioned as usize,
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for (_, t) in model.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let sum = checksum(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                what: "checkpoint",
                offset: self.pos,
                reason: format!("truncated while reading {field}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

/// Parses a checkpoint, verifying magic, version and checksum.
pub fn from_bytes(bytes: &[u8]) -> Result<P2PModel> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 0,
            reason: "bad magic".into(),
        });
    }
    let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 8,
            reason: format!("unsupported version {version}"),
        });
    }
    let mut dims = [0usize; 8];
    for (i, d) in dims.iter_mut().enumerate() {
        let at = r.pos;
        let v = r.u64(&format!("header field {i}"))?;
        *d = usize::try_from(v).map_err(|_| Error::Format {
            what: "checkpoint",
            offset: at,
            reason: format!("header field {i} out of range"),
        })?;
    }
    if dims[7] > 1 {
        return Err(Error::Format {
            what: "checkpoint",
            offset: 12 + 7 * 8,
            reason: format!("conditioned flag {} is not 0 or 1", dims[7]),
        });
    }
    let arch = Architecture {
        frame_dim: dims[0],
        feat_dim: dims[1],
        latent_dim: dims[2],
        hidden: dims[3],
        posterior_layers: dims[4],
        prior_layers: dims[5],
        generator_layers: dims[6],
        conditioned: dims[7] == 1,
    };
    arch.validate()?;
    let count_at = r.pos;
    let count = r.u64("parameter count")? as usize;
    if count != arch.param_count() {
        return Err(Error::Format {
            what: "checkpoint",
            offset: count_at,
            reason: format!(
                "header declares {count} parameters, architecture needs {}",
                arch.param_count()
            ),
        });
    }
    let payload_at = r.pos;
    let payload = r.take(count.saturating_mul(8), "parameters")?;
    let body_end = r.pos;
    let stored = r.take(8, "checksum")?;
    if r.pos != bytes.len() {
        return Err(Error::Format {
            what: "checkpoint",
            offset: r.pos,
            reason: "trailing bytes after checksum".into(),
        });
    }
    if stored != checksum(&bytes[..body_end]) {
        return Err(Error::Format {
            what: "checkpoint",
            offset: body_end,
            reason: "checksum mismatch".into(),
        });
    }

    // Parameter shapes are fixed by the architecture; values are overwritten.
    let mut model = P2PModel::new(arch, &mut ChaCha8Rng::seed_from_u64(0))?;
    let mut values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    for (_, t) in model.params.iter_mut() {
        for v in t.data_mut() {
            *v = values.next().expect("count checked");
        }
    }
    debug_assert_eq!(payload_at + 8 * count, body_end);
    Ok(model)
}

pub fn save(model: &P2PModel, path: &Path) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, to_bytes(model))?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<P2PModel> {
    from_bytes(&std::fs::read(path)?)
}

/// Loads a checkpoint and rejects it unless it matches `expected`.
pub fn load_expecting(path: &Path, expected: &Architecture) -> Result<P2PModel> {
    let model = load(path)?;
    if &model.arch != expected {
        return Err(Error::Architecture(format!(
            "checkpoint has {:?}, expected {:?}",
            model.arch, expected
        )));
    }
    Ok(model)
}
