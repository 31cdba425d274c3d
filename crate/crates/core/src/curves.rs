//! Plot data for length generalization, per-timestep diversity and quality,
//! and the end-frame weight sweep.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datasets::SequenceSet;
use crate::error::{Error, Result};
use crate::metrics::{self, MetricKind, Stat};
use crate::model::{LatentPath, P2PModel};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Analysis {
    CpcVsLength,
    DivThroughTime,
    QualityThroughTime,
    CpcWeightSweep,
}

impl std::str::FromStr for Analysis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "cpc_vs_length" => Analysis::CpcVsLength,
            "div_through_time" => Analysis::DivThroughTime,
            "quality_through_time" => Analysis::QualityThroughTime,
            "cpc_weight_sweep" => Analysis::CpcWeightSweep,
            _ => return Err(Error::invalid(format!("unknown analysis `{s}`"))),
        })
    }
}

/// Checks that a grid is non-empty and strictly increasing.
pub fn check_grid<T: PartialOrd + std::fmt::Debug>(grid: &[T]) -> Result<()> {
    if grid.is_empty() || grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid(format!(
            "grid must be non-empty and strictly increasing: {grid:?}"
        )));
    }
    Ok(())
}

/// A CSV table of plot data.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct CurveTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
    /// Optional leading label column (e.g. variant names).
    pub labels: Option<Vec<String>>,
}

impl CurveTable {
    pub fn to_csv(&self) -> String {
        let mut out = self.header.join(",");
        out.push('\n');
        for (i, row) in self.rows.iter().enumerate() {
            let mut cells: Vec<String> = Vec::with_capacity(row.len() + 1);
            if let Some(l) = &self.labels {
                cells.push(l[i].clone());
            }
            cells.extend(row.iter().map(f64::to_string));
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let offset = usize::from(self.labels.is_some());
        let idx = self.header.iter().position(|h| h == name)?.checked_sub(offset)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }
}

fn variant_header(x: &str, names: &[&str]) -> Vec<String> {
    let mut h = vec![x.to_string()];
    for n in names {
        h.push(n.to_string());
        h.push(format!("{n}_ci95"));
    }
    h
}

/// S-CPC at each generation length, one column pair per model.
pub fn cpc_vs_length(
    models: &[(&str, &P2PModel)],
    test: &SequenceSet,
    lengths: &[usize],
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<CurveTable> {
    check_grid(lengths)?;
    let names: Vec<&str> = models.iter().map(|m| m.0).collect();
    let mut rows = Vec::with_capacity(lengths.len());
    for &len in lengths {
        let mut row = vec![len as f64];
        for (_, model) in models {
            let per = metrics::evaluate_sequences(model, test, len, n_samples, kind, seed)?;
            let s = Stat::of(&per.iter().map(|m| m.s_cpc).collect::<Vec<_>>())?;
            row.extend([s.mean, s.ci95]);
        }
        rows.push(row);
    }
    Ok(CurveTable {
        header: variant_header("len", &names),
        rows,
        labels: None,
    })
}

/// Per-timestep values averaged over test sequences; `f` maps one
/// sequence's samples and ground truth to a length-`len` profile.
fn through_time(
    models: &[(&str, &P2PModel)],
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    seed: u64,
    f: impl Fn(&[Vec<Vec<f64>>], &[Vec<f64>]) -> Result<Vec<f64>> + Sync,
) -> Result<CurveTable> {
    let test = test.truncated(len)?;
    let names: Vec<&str> = models.iter().map(|m| m.0).collect();
    let mut columns: Vec<Vec<Stat>> = Vec::new();
    for (_, model) in models {
        let profiles: Vec<Vec<f64>> = test
            .sequences
            .par_iter()
            .enumerate()
            .map(|(i, gt)| {
                let mut rng = metrics::sequence_rng(seed, i);
                let samples = metrics::prior_samples(model, &gt[0], &gt[len - 1], len, n_samples, &mut rng)?;
                f(&samples, gt)
            })
            .collect::<Result<_>>()?;
        columns.push(
            (0..len)
                .map(|t| Stat::of(&profiles.iter().map(|p| p[t]).collect::<Vec<_>>()))
                .collect::<Result<_>>()?,
        );
    }
    let rows = (0..len)
        .map(|t| {
            let mut row = vec![(t + 1) as f64];
            for c in &columns {
                row.extend([c[t].mean, c[t].ci95]);
            }
            row
        })
        .collect();
    Ok(CurveTable {
        header: variant_header("t", &names),
        rows,
        labels: None,
    })
}

/// Per-timestep S-Div, one row per timestep `t = 1..=len`.
pub fn div_through_time(
    models: &[(&str, &P2PModel)],
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<CurveTable> {
    through_time(models, test, len, n_samples, seed, |s, gt| {
        metrics::s_div_per_timestep(s, gt, kind)
    })
}

/// Per-timestep mean sample score against ground truth.
pub fn quality_through_time(
    models: &[(&str, &P2PModel)],
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<CurveTable> {
    through_time(models, test, len, n_samples, seed, |s, gt| {
        metrics::quality_per_timestep(s, gt, kind)
    })
}

/// One trained variant of the weight sweep.
pub struct SweepEntry<'a> {
    pub path: LatentPath,
    pub weight: f64,
    pub model: &'a P2PModel,
}

/// S-Best per (placement, weight): one row per placement, one column pair
/// per weight.
pub fn cpc_weight_sweep(
    entries: &[SweepEntry<'_>],
    test: &SequenceSet,
    len: usize,
    n_samples: usize,
    kind: MetricKind,
    seed: u64,
) -> Result<CurveTable> {
    let mut weights: Vec<f64> = entries.iter().map(|e| e.weight).collect();
    weights.sort_by(f64::total_cmp);
    weights.dedup();
    let mut header = vec!["placement".to_string()];
    for w in &weights {
        header.push(format!("w{w}"));
        header.push(format!("w{w}_ci95"));
    }
    let mut labels = Vec::new();
    let mut rows = Vec::new();
    for (path, label) in [(LatentPath::Prior, "prior"), (LatentPath::Posterior, "posterior")] {
        let mut row = Vec::new();
        for w in &weights {
            let Some(e) = entries.iter().find(|e| e.path == path && e.weight == *w) else {
                row.extend([f64::NAN, f64::NAN]);
                continue;
            };
            let per = metrics::evaluate_sequences(e.model, test, len, n_samples, kind, seed)?;
            let s = Stat::of(&per.iter().map(|m| m.s_best).collect::<Vec<_>>())?;
            row.extend([s.mean, s.ci95]);
        }
        if row.iter().any(|v| !v.is_nan()) {
            labels.push(label.to_string());
            rows.push(row);
        }
    }
    Ok(CurveTable {
        header,
        rows,
        labels: Some(labels),
    })
}
