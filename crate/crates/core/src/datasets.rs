//! Synthetic sequence generators and the on-disk sequence format.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A list of sequences sharing a frame width. Lengths may differ.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceSet {
    pub dim: usize,
    pub sequences: Vec<Vec<Vec<f64>>>,
}

impl SequenceSet {
    pub fn new(dim: usize, sequences: Vec<Vec<Vec<f64>>>) -> Result<Self> {
        for (i, s) in sequences.iter().enumerate() {
            if let Some(f) = s.iter().find(|f| f.len() != dim) {
                return Err(Error::invalid(format!(
                    "sequence {i} has a frame of width {}, expected {dim}",
                    f.len()
                )));
            }
        }
        Ok(Self { dim, sequences })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn min_len(&self) -> usize {
        self.sequences.iter().map(Vec::len).min().unwrap_or(0)
    }

    /// Every sequence truncated to its first `len` frames.
    pub fn truncated(&self, len: usize) -> Result<Self> {
        if self.min_len() < len {
            return Err(Error::invalid(format!(
                "cannot take {len} frames from sequences as short as {}",
                self.min_len()
            )));
        }
        Ok(Self {
            dim: self.dim,
            sequences: self.sequences.iter().map(|s| s[..len].to_vec()).collect(),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BouncingPointConfig {
    /// 1 or 2 points; frames are `2·n_points` wide.
    pub n_points: usize,
    /// Per-step speed range as a fraction of the box width.
    pub speed_min: f64,
    pub speed_max: f64,
    /// Multiplies every sampled speed; 0 freezes the points.
    pub speed_scale: f64,
}

impl Default for BouncingPointConfig {
    fn default() -> Self {
        Self {
            n_points: 1,
            speed_min: 0.05,
            speed_max: 0.15,
            speed_scale: 1.0,
        }
    }
}

impl BouncingPointConfig {
    pub fn dim(&self) -> usize {
        2 * self.n_points
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_points) {
            return Err(Error::invalid(format!(
                "n_points must be 1 or 2, got {}",
                self.n_points
            )));
        }
        if !(0.0 <= self.speed_min && self.speed_min <= self.speed_max && self.speed_max * self.speed_scale < 1.0)
            || self.speed_scale < 0.0
        {
            return Err(Error::invalid(format!(
                "need 0 ≤ speed_min ≤ speed_max and a scaled speed below 1, got {self:?}"
            )));
        }
        Ok(())
    }

    fn velocity(&self, rng: &mut impl Rng) -> [f64; 2] {
        let speed = self.speed_scale * rng.random_range(self.speed_min..=self.speed_max);
        let angle = rng.random_range(0.0..std::f64::consts::TAU);
        [speed * angle.cos(), speed * angle.sin()]
    }

    /// One sequence of `len` frames.
    pub fn generate(&self, len: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let mut pos: Vec<[f64; 2]> = (0..self.n_points).map(|_| [rng.random(), rng.random()]).collect();
        let mut vel: Vec<[f64; 2]> = (0..self.n_points).map(|_| self.velocity(rng)).collect();
        let mut out = Vec::with_capacity(len);
        for t in 0..len {
            if t > 0 {
                for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
                    let mut hit = [0.0f64; 2];
                    for k in 0..2 {
                        p[k] += v[k];
                        if p[k] < 0.0 {
                            p[k] = -p[k];
                            hit[k] = 1.0;
                        } else if p[k] > 1.0 {
                            p[k] = 2.0 - p[k];
                            hit[k] = -1.0;
                        }
                    }
                    if hit != [0.0, 0.0] {
                        // New velocity, pointing away from every wall touched.
                        *v = self.velocity(rng);
                        for k in 0..2 {
                            if hit[k] != 0.0 {
                                v[k] = hit[k] * v[k].abs();
                            }
                        }
                    }
                }
            }
            out.push(pos.iter().flat_map(|p| *p).collect());
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToySkeletonConfig {
    /// Number of joints including the root; frames are `2·joints` wide.
    pub joints: usize,
    /// Upper bound of the per-sequence swing amplitude (radians).
    pub max_amplitude: f64,
    /// Upper bound of the per-sequence swing frequency (cycles per frame).
    pub max_frequency: f64,
    /// Standard deviation of the per-step joint-angle random walk.
    pub noise: f64,
}

impl Default for ToySkeletonConfig {
    fn default() -> Self {
        Self {
            joints: 5,
            max_amplitude: 0.8,
            max_frequency: 0.1,
            noise: 0.02,
        }
    }
}

impl ToySkeletonConfig {
    pub fn dim(&self) -> usize {
        2 * self.joints
    }

    pub fn validate(&self) -> Result<()> {
        if self.joints < 2 {
            return Err(Error::invalid(format!(
                "a chain needs at least 2 joints, got {}",
                self.joints
            )));
        }
        if [self.max_amplitude, self.max_frequency, self.noise]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::invalid(format!("negative or non-finite dynamics: {self:?}")));
        }
        Ok(())
    }

    /// One planar chain rooted at the origin. Coordinates are divided by the
    /// total chain length, so they lie in `[−1, 1]`.
    pub fn generate(&self, len: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
        let bones = self.joints - 1;
        let lengths: Vec<f64> = (0..bones).map(|_| rng.random_range(0.5..1.5)).collect();
        let total: f64 = lengths.iter().sum();
        let rest: Vec<f64> = (0..bones).map(|_| rng.random_range(-1.0..1.0)).collect();
        let amp: Vec<f64> = (0..bones).map(|_| self.max_amplitude * rng.random::<f64>()).collect();
        let phase: Vec<f64> = (0..bones)
            .map(|_| rng.random_range(0.0..std::f64::consts::TAU))
            .collect();
        let freq = self.max_frequency * rng.random::<f64>();
        let mut drift = vec![0.0; bones];
        let normal = rand_distr::Normal::new(0.0, self.noise.max(f64::MIN_POSITIVE)).expect("finite σ");
        (0..len)
            .map(|t| {
                if t > 0 && self.noise > 0.0 {
                    drift.iter_mut().for_each(|d| *d += rng.sample(normal));
                }
                let mut frame = vec![0.0, 0.0];
                let (mut x, mut y, mut heading) = (0.0, 0.0, 0.0);
                for j in 0..bones {
                    heading += rest[j] + amp[j] * (std::f64::consts::TAU * freq * t as f64 + phase[j]).sin() + drift[j];
                    x += lengths[j] * heading.cos();
                    y += lengths[j] * heading.sin();
                    frame.push(x / total);
                    frame.push(y / total);
                }
                frame
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DatasetKind {
    Bouncing(BouncingPointConfig),
    Skeleton(ToySkeletonConfig),
}

impl Default for DatasetKind {
    fn default() -> Self {
        DatasetKind::Bouncing(BouncingPointConfig::default())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn tag(self) -> u64 {
        match self {
            Split::Train => 1,
            Split::Test => 2,
        }
    }
}

/// A seeded dataset with disjoint train and test streams.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    #[serde(flatten)]
    pub kind: DatasetKind,
    /// Frames per stored sequence.
    pub len: usize,
    pub train_count: usize,
    pub test_count: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn dim(&self) -> usize {
        match &self.kind {
            DatasetKind::Bouncing(c) => c.dim(),
            DatasetKind::Skeleton(c) => c.dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            DatasetKind::Bouncing(c) => c.validate()?,
            DatasetKind::Skeleton(c) => c.validate()?,
        }
        if self.len < 2 {
            return Err(Error::invalid(format!(
                "dataset sequences need ≥ 2 frames, got {}",
                self.len
            )));
        }
        if self.train_count >= 1 << 40 || self.test_count >= 1 << 40 {
            return Err(Error::invalid("split too large"));
        }
        Ok(())
    }

    /// RNG stream id of sequence `index` in `split`; train and test ids never
    /// collide.
    pub fn stream(split: Split, index: usize) -> u64 {
        (split.tag() << 40) | index as u64
    }

    pub fn sequence(&self, split: Split, index: usize) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(Self::stream(split, index));
        match &self.kind {
            DatasetKind::Bouncing(c) => c.generate(self.len, &mut rng),
            DatasetKind::Skeleton(c) => c.generate(self.len, &mut rng),
        }
    }

    pub fn generate(&self, split: Split) -> Result<SequenceSet> {
        self.validate()?;
        let count = match split {
            Split::Train => self.train_count,
            Split::Test => self.test_count,
        };
        SequenceSet::new(self.dim(), (0..count).map(|i| self.sequence(split, i)).collect())
    }
}

pub const SEQ_MAGIC: &[u8; 8] = b"P2PSEQ\0\0";
pub const SEQ_VERSION: u32 = 1;

/// Header: magic, `u32` version, `u64` D, `u64` count, `u64` length per
/// sequence; then every frame as little-endian `f64`.
pub fn encode_sequences(set: &SequenceSet) -> Vec<u8> {
    let frames: usize = set.sequences.iter().map(Vec::len).sum();
    let mut out = Vec::with_capacity(28 + 8 * set.len() + 8 * frames * set.dim);
    out.extend_from_slice(SEQ_MAGIC);
    out.extend_from_slice(&SEQ_VERSION.to_le_bytes());
    out.extend_from_slice(&(set.dim as u64).to_le_bytes());
    out.extend_from_slice(&(set.len() as u64).to_le_bytes());
    for s in &set.sequences {
        out.extend_from_slice(&(s.len() as u64).to_le_bytes());
    }
    for v in set.sequences.iter().flatten().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        what: "sequence file",
        offset,
        reason: reason.into(),
    }
}

pub fn decode_sequences(bytes: &[u8]) -> Result<SequenceSet> {
    let mut pos = 0usize;
    let mut take = |n: usize, field: &str| -> Result<(usize, &[u8])> {
        if bytes.len() - pos < n {
            return Err(format_err(pos, format!("truncated while reading {field}")));
        }
        let at = pos;
        pos += n;
        Ok((at, &bytes[at..at + n]))
    };
    let u64_at = |b: &[u8]| u64::from_le_bytes(b.try_into().expect("8 bytes"));

    if take(8, "magic")?.1 != SEQ_MAGIC {
        return Err(format_err(0, "bad magic"));
    }
    let version = u32::from_le_bytes(take(4, "version")?.1.try_into().expect("4 bytes"));
    if version != SEQ_VERSION {
        return Err(format_err(8, format!("unsupported version {version}")));
    }
    let dim = u64_at(take(8, "frame width")?.1) as usize;
    let (count_at, raw) = take(8, "sequence count")?;
    let count = u64_at(raw) as usize;
    if count > bytes.len() / 8 {
        return Err(format_err(
            count_at,
            format!("sequence count {count} exceeds the file size"),
        ));
    }
    let mut lengths = Vec::with_capacity(count);
    for i in 0..count {
        lengths.push(u64_at(take(8, &format!("length of sequence {i}"))?.1) as usize);
    }
    let mut sequences = Vec::with_capacity(count);
    for (i, &len) in lengths.iter().enumerate() {
        let n = len
            .checked_mul(dim)
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| format_err(count_at, "payload size overflows"))?;
        let (_, raw) = take(n, &format!("frames of sequence {i}"))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        sequences.push(if dim == 0 {
            vec![Vec::new(); len]
        } else {
            values.chunks(dim).map(<[f64]>::to_vec).collect()
        });
    }
    if pos != bytes.len() {
        return Err(format_err(pos, "trailing bytes after payload"));
    }
    Ok(SequenceSet { dim, sequences })
}

pub fn write_sequences(path: &Path, set: &SequenceSet) -> Result<()> {
    std::fs::write(path, encode_sequences(set))?;
    Ok(())
}

pub fn read_sequences(path: &Path) -> Result<SequenceSet> {
    decode_sequences(&std::fs::read(path)?)
}
