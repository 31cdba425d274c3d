//! Frame metrics and the sampling/reconstruction aggregates.
//!
//! Sequences are `Vec<frame>`; a batch of samples is `&[sequence]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::SequenceSet;
use crate::error::{Error, Result};
use crate::model::{FrameBatch, P2PModel};
use crate::tensor::Tensor;

pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// PSNR reported for identical frames.
pub const PSNR_CLAMP_DB: f64 = 100.0;
pub const DEFAULT_SAMPLES: usize = 100;
pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Ssim,
    Psnr,
    Mse,
}

impl MetricKind {
    pub fn name(self) -> &'static str {
        match self {
            MetricKind::Ssim => "ssim",
            MetricKind::Psnr => "psnr",
            MetricKind::Mse => "mse",
        }
    }

    pub fn higher_is_better(self) -> bool {
        !matches!(self, MetricKind::Mse)
    }

    /// Frame-level score.
    pub fn score(self, a: &[f64], b: &[f64]) -> Result<f64> {
        match self {
            MetricKind::Ssim => ssim(a, b),
            MetricKind::Psnr => psnr(a, b),
            MetricKind::Mse => mse(a, b),
        }
    }
}

impl std::str::FromStr for MetricKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [MetricKind::Ssim, MetricKind::Psnr, MetricKind::Mse]
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown metric `{s}` (expected ssim|psnr|mse)")))
    }
}

fn check_pair(op: &'static str, a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Shape {
            op,
            expected: vec![a.len()],
            got: vec![b.len()],
        });
    }
    Ok(())
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Population variance. Shifting by the first value makes identical inputs
/// give exactly 0.
pub fn population_variance(v: &[f64]) -> f64 {
    let Some(&k) = v.first() else { return 0.0 };
    let n = v.len() as f64;
    let (s, ss) = v.iter().fold((0.0, 0.0), |(s, ss), x| {
        let d = x - k;
        (s + d, ss + d * d)
    });
    (ss / n - (s / n) * (s / n)).max(0.0)
}

/// Global-window SSIM over the whole frame, dynamic range 1.
pub fn ssim(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (ma, mb) = (mean(a), mean(b));
    let n = a.len() as f64;
    let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
        cov += (x - ma) * (y - mb);
    }
    let (va, vb, cov) = (va / n, vb / n, cov / n);
    if a == b {
        return Ok(1.0);
    }
    Ok(((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
}

pub fn mse(a: &[f64], b: &[f64]) -> Result<f64> {
    check_pair("mse", a, b)?;
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64)
}

/// `10·log10(1 / mse)`, capped at [`PSNR_CLAMP_DB`].
pub fn psnr(a: &[f64], b: &[f64]) -> Result<f64> {
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CLAMP_DB);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CLAMP_DB))
}

fn check_samples(samples: &[Vec<Vec<f64>>], gt: Option<&[Vec<f64>]>) -> Result<usize> {
    let first = samples.first().ok_or_else(|| Error::invalid("no samples"))?;
    let len = first.len();
    if len == 0 {
        return Err(Error::invalid("empty sample sequence"));
    }
    if samples.iter().any(|s| s.len() != len) {
        return Err(Error::invalid("samples differ in length"));
    }
    if let Some(gt) = gt {
        if gt.len() != len {
            return Err(Error::invalid(format!(
                "ground truth has {} frames, samples have {len}",
                gt.len()
            )));
        }
    }
    Ok(len)
}

/// Mean over frames of the frame score against `gt`.
pub fn sequence_score(sample: &[Vec<f64>], gt: &[Vec<f64>], kind: MetricKind) -> Result<f64> {
    if sample.len() != gt.len() || sample.is_empty() {
        return Err(Error::invalid("sequence length mismatch"));
    }
    let scores: Result<Vec<f64>> = sample.iter().zip(gt).map(|(a, b)| kind.score(a, b)).collect();
    Ok(mean(&scores?))
}

/// Mean score of every sample's last frame against `target_end`.
pub fn s_cpc(samples: &[Vec<Vec<f64>>], target_end: &[f64], kind: MetricKind) -> Result<f64> {
    check_samples(samples, None)?;
    let scores: Result<Vec<f64>> = samples
        .iter()
        .map(|s| kind.score(s.last().expect("non-empty"), target_end))
        .collect();
    Ok(mean(&scores?))
}

/// Best per-sample sequence score.
pub fn s_best(samples: &[Vec<Vec<f64>>], gt: &[Vec<f64>], kind: MetricKind) -> Result<f64> {
    check_samples(samples, Some(gt))?;
    let scores: Result<Vec<f64>> = samples.iter().map(|s| sequence_score(s, gt, kind)).collect();
    let scores = scores?;
    Ok(if kind.higher_is_better() {
        scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    } else {
        scores.iter().copied().fold(f64::INFINITY, f64::min)
    })
}

/// Across-sample diversity. SSIM/PSNR: variance of per-sample mean scores.
/// MSE: mean over coordinates of the variance of `x̂ − x`.
pub fn s_div(samples: &[Vec<Vec<f64>>], gt: &[Vec<f64>], kind: MetricKind) -> Result<f64> {
    check_samples(samples, Some(gt))?;
    if samples.len() < 2 {
        return Err(Error::invalid("diversity needs at least 2 samples"));
    }
    match kind {
        MetricKind::Mse => {
            let per_t = s_div_per_timestep(samples, gt, kind)?;
            Ok(mean(&per_t))
        }
        _ => {
            let scores: Result<Vec<f64>> = samples.iter().map(|s| sequence_score(s, gt, kind)).collect();
            Ok(population_variance(&scores?))
        }
    }
}

/// Diversity at each timestep, same conventions as [`s_div`].
pub fn s_div_per_timestep(samples: &[Vec<Vec<f64>>], gt: &[Vec<f64>], kind: MetricKind) -> Result<Vec<f64>> {
    let len = check_samples(samples, Some(gt))?;
    if samples.len() < 2 {
        return Err(Error::invalid("diversity needs at least 2 samples"));
    }
    (0..len)
        .map(|t| match kind {
            MetricKind::Mse => {
                let dim = gt[t].len();
                let mut total = 0.0;
                for d in 0..dim {
                    let diffs: Vec<f64> = samples.iter().map(|s| s[t][d] - gt[t][d]).collect();
                    total += population_variance(&diffs);
                }
                Ok(total / dim as f64)
            }
            _ => {
                let scores: Result<Vec<f64>> = samples.iter().map(|s| kind.score(&s[t], &gt[t])).collect();
                Ok(population_variance(&scores?))
            }
        })
        .collect()
}

/// Per-timestep mean score over samples.
pub fn quality_per_timestep(samples: &[Vec<Vec<f64>>], gt: &[Vec<f64>], kind: MetricKind) -> Result<Vec<f64>> {
    let len = check_samples(samples, Some(gt))?;
    (0..len)
        .map(|t| {
            let scores: Result<Vec<f64>> = samples.iter().map(|s| kind.score(&s[t], &gt[t])).collect();
            Ok(mean(&scores?))
        })
        .collect()
}

/// `(mean, 1.96·s/√n)` with the sample standard deviation.
pub fn confidence_interval(values: &[f64]) -> Result<(f64, f64)> {
    if values.len() < 2 {
        return Err(Error::invalid(format!(
            "a confidence interval needs at least 2 values, got {}",
            values.len()
        )));
    }
    let n = values.len() as f64;
    let m = mean(values);
    let var = population_variance(values) * n / (n - 1.0);
    Ok((m, 1.96 * var.sqrt() / n.sqrt()))
}

fn split_batch(steps: Vec<Tensor>, batch: usize, dim: usize) -> Vec<Vec<Vec<f64>>> {
    (0..batch)
        .map(|b| {
            steps
                .iter()
                .map(|t| t.data()[b * dim..(b + 1) * dim].to_vec())
                .collect()
        })
        .collect()
}

fn repeat_rows(frame: &[f64], n: usize) -> Result<Tensor> {
    Tensor::matrix(n, frame.len(), frame.repeat(n))
}

/// `n` prior samples from `gt[0]` toward `gt[len − 1]`, each `len` frames.
pub fn prior_samples(
    model: &P2PModel,
    start: &[f64],
    end: &[f64],
    len: usize,
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let steps = model.sample_batch(&repeat_rows(start, n)?, &repeat_rows(end, n)?, len, rng)?;
    Ok(split_batch(steps, n, model.arch.frame_dim))
}

/// `n` posterior reconstructions of `gt`.
pub fn posterior_samples(
    model: &P2PModel,
    gt: &[Vec<f64>],
    n: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<Vec<f64>>>> {
    if n == 0 {
        return Err(Error::invalid("need at least one sample"));
    }
    let batch = FrameBatch::from_sequences(&vec![gt.to_vec(); n])?;
    let steps = model.reconstruct_batch(&batch, rng)?;
    Ok(split_batch(steps, n, model.arch.frame_dim))
}

/// S-Best over `n` posterior reconstructions.
pub fn r_best(model: &P2PModel, gt: &[Vec<f64>], n: usize, rng: &mut impl Rng, kind: MetricKind) -> Result<f64> {
    s_best(&posterior_samples(model, gt, n, rng)?, gt, kind)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub ci95: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Result<Self> {
        let (mean, ci95) = confidence_interval(values)?;
        Ok(Self { mean, ci95 })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub kind: MetricKind,
    pub n_samples: usize,
    pub n_test_sequences: usize,
    pub len: usize,
    pub seed: u64,
    pub s_best: Stat,
    /// Absent when `n_samples < 2`.
    pub s_div: Option<Stat>,
    pub s_cpc: Stat,
    pub r_best: Stat,
}

impl MetricsReport {
    pub const CSV_HEADER: &'static str = "schema_version,kind,n_samples,n_test_sequences,len,seed,\
s_best,s_best_ci95,s_div,s_div_ci95,s_cpc,s_cpc_ci95,r_best,r_best_ci95";

    pub fn csv_row(&self) -> String {
        let (div, div_ci) = match self.s_div {
            Some(s) => (s.mean.to_string(), s.ci95.to_string()),
            None => (String::new(), String::new()),
        };
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.schema_version,
            self.kind.name(),
            self.n_samples,
            self.n_test_sequences,
            self.len,
            self.seed,
            self.s_best.mean,
            self.s_best.ci95,
            div,
            div_ci,
            self.s_cpc.mean,
            self.s_cpc.ci95,
            self.r_best.mean,
            self.r_best.ci95
        )
    }
}

/// Per-sequence values behind a [`MetricsReport`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SequenceMetrics {
    pub s_best: f64,
    pub s_div: Option<f64>,
    pub s_cpc: f64,
    pub r_best: f64,
}

/// Seeded rng for test sequence `index`, independent of evaluation order.
pub fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Evaluates every test sequence, truncated to `len` frames.
pub fn evaluate_sequences(
    model: &P2PModel,
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<Vec<SequenceMetrics>> {
    if test.dim != model.arch.frame_dim {
        return Err(Error::Architecture(format!(
            "dataset frames are {} wide, model expects {}",
            test.dim, model.arch.frame_dim
        )));
    }
    let test = test.truncated(len)?;
    test.sequences
        .par_iter()
        .enumerate()
        .map(|(i, gt)| {
            let mut rng = sequence_rng(seed, i);
            let samples = prior_samples(model, &gt[0], &gt[len - 1], len, n_samples, &mut rng)?;
            let recon = posterior_samples(model, gt, n_samples, &mut rng)?;
            Ok(SequenceMetrics {
                s_best: s_best(&samples, gt, kind)?,
                s_div: if n_samples >= 2 {
                    Some(s_div(&samples, gt, kind)?)
                } else {
                    None
                },
                s_cpc: s_cpc(&samples, &gt[len - 1], kind)?,
                r_best: s_best(&recon, gt, kind)?,
            })
        })
        .collect()
}

pub fn evaluate(
    model: &P2PModel,
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<MetricsReport> {
    let per = evaluate_sequences(model, test, len, n_samples, kind, seed)?;
    let col = |f: fn(&SequenceMetrics) -> f64| per.iter().map(f).collect::<Vec<_>>();
    let s_div = if n_samples >= 2 {
        Some(Stat::of(
            &per.iter().map(|m| m.s_div.expect("n ≥ 2")).collect::<Vec<_>>(),
        )?)
    } else {
        None
    };
    Ok(MetricsReport {
        schema_version: REPORT_SCHEMA_VERSION,
        kind,
        n_samples,
        n_test_sequences: per.len(),
        len,
        seed,
        s_best: Stat::of(&col(|m| m.s_best))?,
        s_div,
        s_cpc: Stat::of(&col(|m| m.s_cpc))?,
        r_best: Stat::of(&col(|m| m.r_best))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn primitives_on_identical_frames() {
        let a = [0.1, 0.5, 0.9, 0.3];
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CLAMP_DB);
    }

    #[test]
    fn hand_values() {
        let a = [0.2, 0.4, 0.6];
        let b = [0.3, 0.5, 0.7];
        assert!((mse(&a, &b).unwrap() - 0.01).abs() < 1e-15);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        let zeros = [0.0; 16];
        let ones = [1.0; 16];
        let c1 = SSIM_K1 * SSIM_K1;
        let s = ssim(&zeros, &ones).unwrap();
        assert!((s - c1 / (1.0 + c1)).abs() < 1e-15);
        assert!(s < 0.05);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        assert!(mse(&a, &[0.0]).is_err());
        assert!(ssim(&[], &[]).is_err());
    }

    #[test]
    fn confidence_interval_hand_case() {
        let v: Vec<f64> = (0..100).map(|i| (i % 2) as f64).collect();
        let (m, hw) = confidence_interval(&v).unwrap();
        assert_eq!(m, 0.5);
        let s = (25.0f64 / 99.0).sqrt();
        assert!((hw - 1.96 * s / 10.0).abs() < 1e-15);
        assert!((hw - 0.0985).abs() < 1e-4);
        assert_eq!(confidence_interval(&[3.0; 10]).unwrap(), (3.0, 0.0));
        assert!(confidence_interval(&[1.0]).is_err());
    }

    #[test]
    fn diversity_two_scores() {
        assert!((population_variance(&[0.4, 0.6]) - 0.01).abs() < 1e-15);
        assert_eq!(population_variance(&[0.1; 100]), 0.0);
    }

    fn seq(vals: &[[f64; 2]]) -> Vec<Vec<f64>> {
        vals.iter().map(|v| v.to_vec()).collect()
    }

    #[test]
    fn aggregates() {
        let gt = seq(&[[0.1, 0.2], [0.3, 0.4], [0.5, 0.6]]);
        let junk = seq(&[[0.9, 0.9], [0.0, 0.0], [0.7, 0.1]]);
        let samples = vec![junk.clone(), gt.clone()];
        assert_eq!(s_best(&samples, &gt, MetricKind::Ssim).unwrap(), 1.0);
        assert_eq!(s_best(&samples, &gt, MetricKind::Mse).unwrap(), 0.0);
        assert_eq!(s_cpc(std::slice::from_ref(&gt), &gt[2], MetricKind::Mse).unwrap(), 0.0);
        let single = s_best(std::slice::from_ref(&junk), &gt, MetricKind::Psnr).unwrap();
        assert_eq!(single, sequence_score(&junk, &gt, MetricKind::Psnr).unwrap());
        assert_eq!(s_div(&[gt.clone(), gt.clone()], &gt, MetricKind::Mse).unwrap(), 0.0);
        assert!(s_div(std::slice::from_ref(&gt), &gt, MetricKind::Mse).is_err());
        assert!(s_best(&samples, &gt[..2], MetricKind::Mse).is_err());
        let per_t = s_div_per_timestep(&samples, &gt, MetricKind::Mse).unwrap();
        assert_eq!(per_t.len(), 3);
        let div = s_div(&samples, &gt, MetricKind::Mse).unwrap();
        assert!((div - per_t.iter().sum::<f64>() / 3.0).abs() < 1e-15);
    }
}
