//! Optimization loop, run configuration and telemetry.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::checkpoint;
use crate::datasets::{DatasetSpec, SequenceSet, Split};
use crate::error::{Error, Result};
use crate::model::{Architecture, CpcRollout, FrameBatch, LatentPath, P2PModel, SkipMask, UnrollNoise};
use crate::nn::ParamStore;
use crate::objective::{self, Ablation, LossBreakdown, ObjectiveConfig};

pub const DEFAULT_LR: f64 = 0.002;
pub const TELEMETRY_HEADER: &str = "step,recon,kl,align,cpc,total";
pub const CHECKPOINT_FILE: &str = "checkpoint.p2p";
pub const TELEMETRY_FILE: &str = "telemetry.csv";

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified if any gradient is
/// non-finite.
pub fn adam_step(params: &mut ParamStore, grads: &[Vec<f64>], state: &mut AdamState) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return Err(Error::invalid(format!(
            "{} gradients and {} moment slots for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        )));
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.numel() {
            return Err(Error::Shape {
                op: "adam_step",
                expected: t.shape().to_vec(),
                got: vec![g.len()],
            });
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    state.step += 1;
    let k = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(k);
    let c2 = 1.0 - state.beta2.powi(k);
    for (i, (_, t)) in params.iter_mut().enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in t.data_mut().iter_mut().enumerate() {
            let g = grads[i][j];
            m[j] = state.beta1 * m[j] + (1.0 - state.beta1) * g;
            v[j] = state.beta2 * v[j] + (1.0 - state.beta2) * g * g;
            *w -= state.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Rescales `grads` so their global L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm && norm.is_finite() {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
    norm
}

/// Uniform integer in `[min, max]`.
pub fn sample_training_length(range: (usize, usize), rng: &mut impl Rng) -> Result<usize> {
    let (lo, hi) = range;
    if lo < 2 || lo > hi {
        return Err(Error::invalid(format!("bad length range [{lo}, {hi}]")));
    }
    Ok(rng.random_range(lo..=hi))
}

/// Hidden widths and depths; the frame width comes from the dataset and the
/// conditioning flag from the ablation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchitectureConfig {
    pub feat_dim: usize,
    pub latent_dim: usize,
    pub hidden: usize,
    pub posterior_layers: usize,
    pub prior_layers: usize,
    pub generator_layers: usize,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let d = Architecture::desk(2);
        Self {
            feat_dim: d.feat_dim,
            latent_dim: d.latent_dim,
            hidden: d.hidden,
            posterior_layers: d.posterior_layers,
            prior_layers: d.prior_layers,
            generator_layers: d.generator_layers,
        }
    }
}

/// Optional overrides of the ablation's default weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ObjectiveOverrides {
    pub beta: Option<f64>,
    pub alpha_cpc: Option<f64>,
    pub alpha_align: Option<f64>,
    pub p_skip: Option<f64>,
    pub cpc_path: Option<LatentPath>,
    pub cpc_rollout: Option<CpcRollout>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_clip")]
    pub clip_norm: f64,
    #[serde(default = "default_len_min")]
    pub len_min: usize,
    #[serde(default = "default_len_max")]
    pub len_max: usize,
    pub ablation: Ablation,
    /// Steps between checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: usize,
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub architecture: ArchitectureConfig,
    #[serde(default)]
    pub objective: ObjectiveOverrides,
}

fn default_batch() -> usize {
    16
}
fn default_lr() -> f64 {
    DEFAULT_LR
}
fn default_clip() -> f64 {
    5.0
}
fn default_len_min() -> usize {
    10
}
fn default_len_max() -> usize {
    14
}

impl RunConfig {
    /// Desk defaults for `ablation` on `dataset`.
    pub fn desk(dataset: DatasetSpec, ablation: Ablation, steps: usize, seed: u64) -> Self {
        Self {
            seed,
            steps,
            batch_size: default_batch(),
            lr: DEFAULT_LR,
            clip_norm: default_clip(),
            len_min: default_len_min(),
            len_max: default_len_max(),
            ablation,
            checkpoint_every: 0,
            dataset,
            architecture: ArchitectureConfig::default(),
            objective: ObjectiveOverrides::default(),
        }
    }

    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            reason: e.message().to_string(),
        })?;
        cfg.validate().map_err(|e| Error::Config {
            path: path.to_path_buf(),
            line: 0,
            reason: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, path)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// SHA-256 of the canonical TOML form, hex.
    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn architecture(&self) -> Architecture {
        let a = &self.architecture;
        Architecture {
            frame_dim: self.dataset.dim(),
            feat_dim: a.feat_dim,
            latent_dim: a.latent_dim,
            hidden: a.hidden,
            posterior_layers: a.posterior_layers,
            prior_layers: a.prior_layers,
            generator_layers: a.generator_layers,
            conditioned: self.ablation.flags().0,
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        let mut o = ObjectiveConfig::for_ablation(self.ablation);
        let ov = &self.objective;
        if let Some(v) = ov.beta {
            o.beta = v;
        }
        if let Some(v) = ov.alpha_cpc {
            o.alpha_cpc = v;
        }
        if let Some(v) = ov.alpha_align {
            o.alpha_align = v;
        }
        if let Some(v) = ov.p_skip {
            o.p_skip = v;
        }
        if let Some(v) = ov.cpc_path {
            o.cpc_path = v;
        }
        if let Some(v) = ov.cpc_rollout {
            o.cpc_rollout = v;
        }
        o
    }

    pub fn validate(&self) -> Result<()> {
        if self.len_min < 2 || self.len_min > self.len_max {
            return Err(Error::invalid(format!(
                "length range [{}, {}] needs 2 ≤ min ≤ max",
                self.len_min, self.len_max
            )));
        }
        if self.len_max > self.dataset.len {
            return Err(Error::invalid(format!(
                "len_max {} exceeds the stored sequence length {}",
                self.len_max, self.dataset.len
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 || self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(Error::invalid("lr and clip_norm must be positive"));
        }
        if self.dataset.train_count == 0 {
            return Err(Error::invalid("training split is empty"));
        }
        self.dataset.validate()?;
        self.architecture().validate()?;
        self.objective().validate()
    }
}

/// In-memory training state.
pub struct Trainer {
    pub cfg: RunConfig,
    pub objective: ObjectiveConfig,
    model: P2PModel,
    adam: AdamState,
    rng: ChaCha8Rng,
    data: SequenceSet,
    step: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let mut init = ChaCha8Rng::seed_from_u64(cfg.seed);
        init.set_stream(1);
        let model = P2PModel::new(cfg.architecture(), &mut init)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        let data = cfg.dataset.generate(Split::Train)?;
        Ok(Self {
            objective: cfg.objective(),
            adam: AdamState::new(&model.params, cfg.lr),
            model,
            rng,
            data,
            step: 0,
            cfg,
        })
    }

    pub fn model(&self) -> &P2PModel {
        &self.model
    }

    pub fn into_model(self) -> P2PModel {
        self.model
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    fn batch(&mut self) -> Result<(FrameBatch, SkipMask, UnrollNoise)> {
        let len = sample_training_length((self.cfg.len_min, self.cfg.len_max), &mut self.rng)?;
        let mut seqs = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let s = &self.data.sequences[self.rng.random_range(0..self.data.len())];
            let start = self.rng.random_range(0..=s.len() - len);
            seqs.push(s[start..start + len].to_vec());
        }
        let frames = FrameBatch::from_sequences(&seqs)?;
        let rows: Vec<Vec<bool>> = (0..self.cfg.batch_size)
            .map(|_| objective::skip_mask_sample(len, self.objective.p_skip, &mut self.rng))
            .collect::<Result<_>>()?;
        let mask = SkipMask::from_rows(&rows)?;
        let noise = UnrollNoise::draw(len, self.cfg.batch_size, self.model.arch.latent_dim, &mut self.rng);
        Ok((frames, mask, noise))
    }

    /// One optimization step. On error the parameters are left untouched.
    pub fn step(&mut self) -> Result<LossBreakdown> {
        let (frames, mask, noise) = self.batch()?;
        let mut tape = Tape::new();
        let p = self.model.bind(&mut tape);
        let record = self
            .model
            .train_unroll(&mut tape, &p, &frames, &mask, &noise, self.objective.unroll_options())?;
        let terms = objective::full_objective(&mut tape, &record, &self.objective)?;
        let values = terms.values(&tape)?;
        tape.backward(terms.total)?;
        let mut grads = self.model.params.gradients(&tape, &p);
        clip_global_norm(&mut grads, self.cfg.clip_norm);
        adam_step(&mut self.model.params, &grads, &mut self.adam)?;
        self.step += 1;
        Ok(values)
    }
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub first: Option<LossBreakdown>,
    pub last: Option<LossBreakdown>,
    pub checkpoint: PathBuf,
    pub telemetry: PathBuf,
}

pub fn telemetry_row(step: usize, l: &LossBreakdown) -> String {
    format!("{step},{},{},{},{},{}", l.recon, l.kl, l.align, l.cpc, l.total)
}

/// Runs the configured number of steps, writing telemetry and checkpoints
/// into `out_dir`. A failing step leaves the last good parameters on disk.
pub fn train(cfg: &RunConfig, out_dir: &Path) -> Result<TrainSummary> {
    std::fs::create_dir_all(out_dir)?;
    let checkpoint_path = out_dir.join(CHECKPOINT_FILE);
    let telemetry_path = out_dir.join(TELEMETRY_FILE);
    let mut trainer = Trainer::new(cfg.clone())?;
    let mut log = BufWriter::new(File::create(&telemetry_path)?);
    writeln!(log, "{TELEMETRY_HEADER}")?;
    let (mut first, mut last) = (None, None);
    for step in 1..=cfg.steps {
        let values = match trainer.step() {
            Ok(v) => v,
            Err(e) => {
                log.flush()?;
                checkpoint::save(trainer.model(), &checkpoint_path)?;
                return Err(Error::TrainingAborted {
                    step,
                    reason: e.to_string(),
                });
            }
        };
        writeln!(log, "{}", telemetry_row(step, &values))?;
        first.get_or_insert(values);
        last = Some(values);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            log.flush()?;
            checkpoint::save(trainer.model(), &checkpoint_path)?;
        }
    }
    log.flush()?;
    checkpoint::save(trainer.model(), &checkpoint_path)?;
    Ok(TrainSummary {
        steps: cfg.steps,
        first,
        last,
        checkpoint: checkpoint_path,
        telemetry: telemetry_path,
    })
}
