//! The point-to-point model: a shared frame encoder and decoder around
//! three recurrent cores.
//!
//! * posterior `q_φ`: (encoding of the current frame, end-frame descriptor, time counter) → Gaussian over `z_t`
//! * prior `p_ψ`: (encoding of the previous frame, descriptor, counter) → Gaussian over `z_t`
//! * generator `p_θ`: (encoding of the previous frame, `z_t`, counter) → `g_t`, decoded into `x̂_t`
//!
//! Frame 1 is the given start frame. Prediction runs for `t = 2..=T`, with
//! all recurrent states starting at zero before `t = 2`.

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binding, GaussianHead, InitScheme, LinearLayer, LstmStack, LstmState, ParamStore, ResidualMlp};
use crate::tensor::Tensor;

/// Layer widths and depths. Part of the checkpoint header.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    /// Frame width `D`.
    pub frame_dim: usize,
    /// Encoder feature width `|h_t|`.
    pub feat_dim: usize,
    /// Latent width `|z_t|`.
    pub latent_dim: usize,
    /// Hidden width of the MLPs and LSTMs.
    pub hidden: usize,
    pub posterior_layers: usize,
    pub prior_layers: usize,
    pub generator_layers: usize,
    /// Whether the cores see the end-frame descriptor and time counter.
    /// When false both inputs are fed as zeros.
    pub conditioned: bool,
}

impl Architecture {
    /// Desk-scale widths: `|h_t| = 64`, `|z_t| = 8`, hidden 128, one-layer
    /// posterior and prior, two-layer generator.
    pub fn desk(frame_dim: usize) -> Self {
        Self {
            frame_dim,
            feat_dim: 64,
            latent_dim: 8,
            hidden: 128,
            posterior_layers: 1,
            prior_layers: 1,
            generator_layers: 2,
            conditioned: true,
        }
    }

    /// Input width of the posterior and prior cores: `(h, h_T, τ)`.
    pub fn inference_input(&self) -> usize {
        2 * self.feat_dim + 1
    }

    /// Input width of the generator core: `(h_{t-1}, z_t, τ)`.
    pub fn generator_input(&self) -> usize {
        self.feat_dim + self.latent_dim + 1
    }

    /// Exact scalar parameter count of a model with these dimensions.
    pub fn param_count(&self) -> usize {
        let (d, dh, z, h) = (self.frame_dim, self.feat_dim, self.latent_dim, self.hidden);
        ResidualMlp::param_count(d, h, dh)
            + ResidualMlp::param_count(dh, h, d)
            + LstmStack::param_count(self.inference_input(), h, self.posterior_layers)
            + GaussianHead::param_count(h, z)
            + LstmStack::param_count(self.inference_input(), h, self.prior_layers)
            + GaussianHead::param_count(h, z)
            + LstmStack::param_count(self.generator_input(), h, self.generator_layers)
            + LinearLayer::param_count(h, dh)
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.frame_dim,
            self.feat_dim,
            self.latent_dim,
            self.hidden,
            self.posterior_layers,
            self.prior_layers,
            self.generator_layers,
        ];
        if dims.contains(&0) {
            return Err(Error::invalid(format!("architecture has a zero dimension: {self:?}")));
        }
        Ok(())
    }
}

/// `τ_t = t / T` for `1 ≤ t ≤ T`.
pub fn time_counter(t: usize, len: usize) -> Result<f64> {
    if t == 0 || t > len {
        return Err(Error::invalid(format!("time step {t} outside 1..={len}")));
    }
    Ok(t as f64 / len as f64)
}

/// Conditioning shared by every step of one rollout.
#[derive(Clone, Copy, Debug)]
pub struct GenerationCondition {
    /// `h_T = Enc(x_T)`, `[batch × feat_dim]`; zeros for unconditioned models.
    pub descriptor: Var,
    /// Sequence length `T`.
    pub len: usize,
    /// Whether the time counter is fed (false feeds zeros).
    pub timed: bool,
}

#[derive(Clone, Debug)]
pub struct RecurrentState {
    pub posterior: Vec<LstmState>,
    pub prior: Vec<LstmState>,
    pub generator: Vec<LstmState>,
    /// Encoding of the last frame the cores consumed.
    pub h_prev: Var,
}

impl RecurrentState {
    /// All `(h, c)` handles, in posterior/prior/generator order, then `h_prev`.
    pub fn vars(&self) -> Vec<Var> {
        self.posterior
            .iter()
            .chain(&self.prior)
            .chain(&self.generator)
            .flat_map(|s| [s.h, s.c])
            .chain([self.h_prev])
            .collect()
    }
}

/// Which latent drives the end-frame consistency term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentPath {
    #[default]
    Prior,
    Posterior,
}

/// How the prior-driven end-frame is rolled out during training.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CpcRollout {
    /// Prior and generator advance on ground-truth frames up to `T − 1`;
    /// only `z_T` is drawn from the prior.
    #[default]
    TeacherForced,
    /// Prior and generator run on their own generated frames from `x_1`.
    FreeRunning,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct UnrollOptions {
    /// `None` skips the end-frame branch entirely.
    pub cpc: Option<LatentPath>,
    pub cpc_rollout: CpcRollout,
}

/// Per-step Gaussian noise for one training unroll, drawn up front so that
/// the rollout is a pure function of `(params, frames, mask, noise)`.
#[derive(Clone, Debug)]
pub struct UnrollNoise {
    /// Indexed by `t − 1`; entry 0 is unused. Each is `[batch × latent]`.
    pub posterior: Vec<Tensor>,
    /// Noise for the prior-sampled `z_T` of the end-frame branch.
    pub cpc: Tensor,
    /// Prior noise per step for the free-running end-frame branch.
    pub free_running: Vec<Tensor>,
}

impl UnrollNoise {
    pub fn draw(len: usize, batch: usize, latent: usize, rng: &mut impl Rng) -> Self {
        let shape = [batch, latent];
        let mut posterior = vec![Tensor::zeros(shape)];
        posterior.extend((1..len).map(|_| nn::standard_normal(&shape, rng)));
        let cpc = nn::standard_normal(&shape, rng);
        let mut free_running = vec![Tensor::zeros(shape)];
        free_running.extend((1..len).map(|_| nn::standard_normal(&shape, rng)));
        Self {
            posterior,
            cpc,
            free_running,
        }
    }
}

/// A batch of equal-length sequences, stored time-major:
/// `data[(t·batch + b)·dim + d]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBatch {
    pub len: usize,
    pub batch: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FrameBatch {
    /// Builds a batch from per-sequence frame lists.
    pub fn from_sequences(seqs: &[Vec<Vec<f64>>]) -> Result<Self> {
        let batch = seqs.len();
        let first = seqs.first().ok_or_else(|| Error::invalid("empty frame batch"))?;
        let len = first.len();
        let dim = first.first().map_or(0, Vec::len);
        let mut data = vec![0.0; len * batch * dim];
        for (b, seq) in seqs.iter().enumerate() {
            if seq.len() != len {
                return Err(Error::invalid("sequences in a batch must share a length"));
            }
            for (t, frame) in seq.iter().enumerate() {
                if frame.len() != dim {
                    return Err(Error::Shape {
                        op: "frame_batch",
                        expected: vec![dim],
                        got: vec![frame.len()],
                    });
                }
                let off = (t * batch + b) * dim;
                data[off..off + dim].copy_from_slice(frame);
            }
        }
        Ok(Self { len, batch, dim, data })
    }

    /// Frames at 1-based step `t`, `[batch × dim]`.
    pub fn frame(&self, t: usize) -> Tensor {
        let n = self.batch * self.dim;
        Tensor::matrix(self.batch, self.dim, self.data[(t - 1) * n..t * n].to_vec()).expect("frame slice")
    }

    /// Every frame stacked, `[(len·batch) × dim]`.
    pub fn stacked(&self) -> Tensor {
        Tensor::matrix(self.len * self.batch, self.dim, self.data.clone()).expect("stacked frames")
    }

    /// Sequence `b` as a list of frames.
    pub fn sequence(&self, b: usize) -> Vec<Vec<f64>> {
        (0..self.len)
            .map(|t| {
                let off = (t * self.batch + b) * self.dim;
                self.data[off..off + self.dim].to_vec()
            })
            .collect()
    }
}

/// Per-sequence keep flags `M_t`, time-major.
#[derive(Clone, Debug, PartialEq)]
pub struct SkipMask {
    pub len: usize,
    pub batch: usize,
    keep: Vec<bool>,
}

impl SkipMask {
    pub fn all_kept(len: usize, batch: usize) -> Self {
        Self {
            len,
            batch,
            keep: vec![true; len * batch],
        }
    }

    /// From one keep list per sequence.
    pub fn from_rows(rows: &[Vec<bool>]) -> Result<Self> {
        let batch = rows.len();
        let len = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != len) {
            return Err(Error::invalid("mask rows differ in length"));
        }
        let mut keep = vec![true; len * batch];
        for (b, row) in rows.iter().enumerate() {
            for (t, &k) in row.iter().enumerate() {
                keep[t * batch + b] = k;
            }
        }
        Ok(Self { len, batch, keep })
    }

    /// `M_t` for sequence `b` at 1-based step `t`.
    pub fn kept(&self, t: usize, b: usize) -> bool {
        self.keep[(t - 1) * self.batch + b]
    }

    pub fn all_kept_at(&self, t: usize) -> bool {
        (0..self.batch).all(|b| self.kept(t, b))
    }

    /// 0/1 weights over the batch at step `t`.
    pub fn weights_at(&self, t: usize) -> Tensor {
        Tensor::vector(
            (0..self.batch)
                .map(|b| if self.kept(t, b) { 1.0 } else { 0.0 })
                .collect(),
        )
    }
}

/// Everything one predicted step `t ≥ 2` produced.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub t: usize,
    pub tau: f64,
    pub mu_q: Var,
    pub logvar_q: Var,
    pub mu_p: Var,
    pub logvar_p: Var,
    pub z: Var,
    /// `h_t = Enc(x_t)` of the ground-truth frame.
    pub h: Var,
    pub g: Var,
    pub x_hat: Var,
    pub target: Var,
    /// `M_t` over the batch as 0/1 weights.
    pub keep: Tensor,
}

/// The decoded end-frame used by the consistency term, tagged with the
/// latent that produced it.
#[derive(Clone, Copy, Debug)]
pub struct CpcBranch {
    pub x_hat_end: Var,
    pub target_end: Var,
    pub path: LatentPath,
}

#[derive(Clone, Debug)]
pub struct RolloutRecord {
    pub len: usize,
    pub batch: usize,
    /// Steps `t = 2..=T`, in order.
    pub steps: Vec<StepRecord>,
    pub cpc: Option<CpcBranch>,
    pub final_state: RecurrentState,
}

/// Output of one generator step.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorOutput {
    pub g: Var,
    pub x_hat: Var,
}

#[derive(Debug)]
pub struct P2PModel {
    pub arch: Architecture,
    pub params: ParamStore,
    encoder: ResidualMlp,
    decoder: ResidualMlp,
    posterior: LstmStack,
    posterior_head: GaussianHead,
    prior: LstmStack,
    prior_head: GaussianHead,
    generator: LstmStack,
    generator_out: LinearLayer,
    descriptor_reads: AtomicU64,
}

impl Clone for P2PModel {
    fn clone(&self) -> Self {
        Self {
            arch: self.arch,
            params: self.params.clone(),
            encoder: self.encoder.clone(),
            decoder: self.decoder.clone(),
            posterior: self.posterior.clone(),
            posterior_head: self.posterior_head.clone(),
            prior: self.prior.clone(),
            prior_head: self.prior_head.clone(),
            generator: self.generator.clone(),
            generator_out: self.generator_out.clone(),
            descriptor_reads: AtomicU64::new(self.descriptor_reads()),
        }
    }
}

impl P2PModel {
    /// Builds a freshly initialized model. Registration order (and so the
    /// checkpoint layout) is encoder, decoder, posterior, prior, generator.
    pub fn new(arch: Architecture, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamStore::new();
        let (d, dh, z, h) = (arch.frame_dim, arch.feat_dim, arch.latent_dim, arch.hidden);
        let encoder = ResidualMlp::encoder(&mut params, d, h, dh, rng);
        let decoder = ResidualMlp::decoder(&mut params, dh, h, d, rng);
        let posterior = LstmStack::new(
            &mut params,
            "posterior",
            arch.inference_input(),
            h,
            arch.posterior_layers,
            rng,
        );
        let posterior_head = GaussianHead::new(&mut params, "posterior.head", h, z, rng);
        let prior = LstmStack::new(&mut params, "prior", arch.inference_input(), h, arch.prior_layers, rng);
        let prior_head = GaussianHead::new(&mut params, "prior.head", h, z, rng);
        let generator = LstmStack::new(
            &mut params,
            "generator",
            arch.generator_input(),
            h,
            arch.generator_layers,
            rng,
        );
        let generator_out = LinearLayer::new(&mut params, "generator.out", h, dh, InitScheme::default(), rng);
        Ok(Self {
            arch,
            params,
            encoder,
            decoder,
            posterior,
            posterior_head,
            prior,
            prior_head,
            generator,
            generator_out,
            descriptor_reads: AtomicU64::new(0),
        })
    }

    /// Names of the parameters that belong only to the posterior `q_φ`.
    pub fn posterior_param_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("posterior"))
            .map(|(n, _)| n.to_string())
            .collect()
    }

    /// How many times the end-frame descriptor has been computed.
    pub fn descriptor_reads(&self) -> u64 {
        self.descriptor_reads.load(Ordering::Relaxed)
    }

    pub fn bind(&self, tape: &mut Tape) -> Binding {
        self.params.bind(tape)
    }

    /// `Enc(x)` for `x: [batch × frame_dim]`.
    pub fn encode(&self, tape: &mut Tape, p: &Binding, x: Var) -> Result<Var> {
        self.encoder.forward(tape, p, x)
    }

    pub fn decode(&self, tape: &mut Tape, p: &Binding, g: Var) -> Result<Var> {
        self.decoder.forward(tape, p, g)
    }

    /// `h_T = Enc(x_T)`.
    pub fn global_descriptor(&self, tape: &mut Tape, p: &Binding, x_end: Var) -> Result<Var> {
        self.descriptor_reads.fetch_add(1, Ordering::Relaxed);
        self.encode(tape, p, x_end)
    }

    /// Builds the rollout condition for a batch with end frames `x_end`.
    /// Unconditioned models get a zero descriptor and never encode `x_end`.
    pub fn condition(&self, tape: &mut Tape, p: &Binding, x_end: Var, len: usize) -> Result<GenerationCondition> {
        if len < 2 {
            return Err(Error::invalid(format!("sequence length {len} < 2")));
        }
        let batch = tape.shape(x_end)[0];
        let descriptor = if self.arch.conditioned {
            self.global_descriptor(tape, p, x_end)?
        } else {
            tape.constant(Tensor::zeros([batch, self.arch.feat_dim]))
        };
        Ok(GenerationCondition {
            descriptor,
            len,
            timed: self.arch.conditioned,
        })
    }

    fn tau_column(&self, tape: &mut Tape, batch: usize, cond: &GenerationCondition, t: usize) -> Result<Var> {
        let tau = if cond.timed { time_counter(t, cond.len)? } else { 0.0 };
        Ok(tape.constant(Tensor::full([batch, 1], tau)))
    }

    pub fn zero_state(&self, tape: &mut Tape, h_start: Var) -> RecurrentState {
        let batch = tape.shape(h_start)[0];
        RecurrentState {
            posterior: self.posterior.zero_state(tape, batch),
            prior: self.prior.zero_state(tape, batch),
            generator: self.generator.zero_state(tape, batch),
            h_prev: h_start,
        }
    }

    /// `μ_φ, logvar_φ = LSTM_φ(h_t, h_T, τ_t)`.
    pub fn posterior_step(
        &self,
        tape: &mut Tape,
        p: &Binding,
        state: &[LstmState],
        h_t: Var,
        cond: &GenerationCondition,
        t: usize,
    ) -> Result<(Var, Var, Vec<LstmState>)> {
        let batch = tape.shape(h_t)[0];
        let tau = self.tau_column(tape, batch, cond, t)?;
        let input = tape.concat(&[h_t, cond.descriptor, tau], 1)?;
        let (out, next) = self.posterior.step(tape, p, input, state)?;
        let (mu, logvar) = self.posterior_head.forward(tape, p, out)?;
        Ok((mu, logvar, next))
    }

    /// `μ_ψ, logvar_ψ = LSTM_ψ(h_{t−1}, h_T, τ_t)`.
    pub fn prior_step(
        &self,
        tape: &mut Tape,
        p: &Binding,
        state: &[LstmState],
        h_prev: Var,
        cond: &GenerationCondition,
        t: usize,
    ) -> Result<(Var, Var, Vec<LstmState>)> {
        let batch = tape.shape(h_prev)[0];
        let tau = self.tau_column(tape, batch, cond, t)?;
        let input = tape.concat(&[h_prev, cond.descriptor, tau], 1)?;
        let (out, next) = self.prior.step(tape, p, input, state)?;
        let (mu, logvar) = self.prior_head.forward(tape, p, out)?;
        Ok((mu, logvar, next))
    }

    /// `g_t = LSTM_θ(h_{t−1}, z_t, τ_t)`, `x̂_t = Dec(g_t)`.
    #[allow(clippy::too_many_arguments)]
    pub fn generator_step(
        &self,
        tape: &mut Tape,
        p: &Binding,
        state: &[LstmState],
        h_prev: Var,
        z: Var,
        cond: &GenerationCondition,
        t: usize,
    ) -> Result<(GeneratorOutput, Vec<LstmState>)> {
        let batch = tape.shape(h_prev)[0];
        let tau = self.tau_column(tape, batch, cond, t)?;
        let input = tape.concat(&[h_prev, z, tau], 1)?;
        let (out, next) = self.generator.step(tape, p, input, state)?;
        let g = self.generator_out.forward(tape, p, out)?;
        let g = tape.tanh(g)?;
        let x_hat = self.decode(tape, p, g)?;
        Ok((GeneratorOutput { g, x_hat }, next))
    }

    /// Teacher-forced training unroll. At a skipped step (`M_t = 0`) none of
    /// the recurrent states advance and the skipped frame is never consumed
    /// as a previous frame; the step still appears in the record with a zero
    /// keep weight.
    pub fn train_unroll(
        &self,
        tape: &mut Tape,
        p: &Binding,
        frames: &FrameBatch,
        mask: &SkipMask,
        noise: &UnrollNoise,
        opts: UnrollOptions,
    ) -> Result<RolloutRecord> {
        let (len, batch) = (frames.len, frames.batch);
        if len < 2 {
            return Err(Error::invalid(format!("sequence length {len} < 2")));
        }
        if frames.dim != self.arch.frame_dim {
            return Err(Error::Shape {
                op: "train_unroll",
                expected: vec![self.arch.frame_dim],
                got: vec![frames.dim],
            });
        }
        if mask.len != len || mask.batch != batch {
            return Err(Error::invalid(format!(
                "mask is {}×{}, frames are {len}×{batch}",
                mask.len, mask.batch
            )));
        }
        if noise.posterior.len() != len {
            return Err(Error::invalid("noise length does not match the sequence"));
        }

        let x_all = tape.constant(frames.stacked());
        let h_all = self.encode(tape, p, x_all)?;
        let rows = |t: usize| (t - 1) * batch..t * batch;
        let x_end = tape.constant(frames.frame(len));
        let cond = self.condition(tape, p, x_end, len)?;

        let h_first = tape.slice(h_all, 0, rows(1))?;
        let mut state = self.zero_state(tape, h_first);
        let mut steps = Vec::with_capacity(len - 1);
        let mut cpc = None;

        for t in 2..=len {
            let h_t = tape.slice(h_all, 0, rows(t))?;
            let target = tape.slice(x_all, 0, rows(t))?;
            let (mu_q, logvar_q, post) = self.posterior_step(tape, p, &state.posterior, h_t, &cond, t)?;
            let (mu_p, logvar_p, prior) = self.prior_step(tape, p, &state.prior, state.h_prev, &cond, t)?;
            let z = nn::reparam_with_noise(tape, mu_q, logvar_q, noise.posterior[t - 1].clone())?;
            let (out, gen) = self.generator_step(tape, p, &state.generator, state.h_prev, z, &cond, t)?;

            if t == len {
                cpc = match opts.cpc {
                    None => None,
                    Some(LatentPath::Posterior) => Some(CpcBranch {
                        x_hat_end: out.x_hat,
                        target_end: target,
                        path: LatentPath::Posterior,
                    }),
                    Some(LatentPath::Prior) => {
                        let x_hat_end = match opts.cpc_rollout {
                            CpcRollout::TeacherForced => {
                                // The generator state carries posterior
                                // samples from earlier steps; cut it so the
                                // term reaches q_φ through nothing.
                                let detached: Vec<LstmState> = state
                                    .generator
                                    .iter()
                                    .map(|s| LstmState {
                                        h: tape.detach(s.h),
                                        c: tape.detach(s.c),
                                    })
                                    .collect();
                                let z_end = nn::reparam_with_noise(tape, mu_p, logvar_p, noise.cpc.clone())?;
                                let (end, _) =
                                    self.generator_step(tape, p, &detached, state.h_prev, z_end, &cond, t)?;
                                end.x_hat
                            }
                            CpcRollout::FreeRunning => {
                                self.free_running_end(tape, p, frames, &cond, &noise.free_running)?
                            }
                        };
                        Some(CpcBranch {
                            x_hat_end,
                            target_end: target,
                            path: LatentPath::Prior,
                        })
                    }
                };
            }

            let keep = mask.weights_at(t);
            let next = RecurrentState {
                posterior: post,
                prior,
                generator: gen,
                h_prev: h_t,
            };
            state = if mask.all_kept_at(t) {
                next
            } else {
                select_state(tape, &keep, &next, &state)?
            };
            steps.push(StepRecord {
                t,
                tau: if cond.timed { time_counter(t, len)? } else { 0.0 },
                mu_q,
                logvar_q,
                mu_p,
                logvar_p,
                z,
                h: h_t,
                g: out.g,
                x_hat: out.x_hat,
                target,
                keep,
            });
        }

        Ok(RolloutRecord {
            len,
            batch,
            steps,
            cpc,
            final_state: state,
        })
    }

    /// Prior-driven rollout on generated frames; returns `x̂_T`.
    fn free_running_end(
        &self,
        tape: &mut Tape,
        p: &Binding,
        frames: &FrameBatch,
        cond: &GenerationCondition,
        noise: &[Tensor],
    ) -> Result<Var> {
        let x1 = tape.constant(frames.frame(1));
        let mut h_prev = self.encode(tape, p, x1)?;
        let mut prior = self.prior.zero_state(tape, frames.batch);
        let mut gen = self.generator.zero_state(tape, frames.batch);
        let mut last = x1;
        for t in 2..=frames.len {
            let (mu, logvar, np) = self.prior_step(tape, p, &prior, h_prev, cond, t)?;
            let z = nn::reparam_with_noise(tape, mu, logvar, noise[t - 1].clone())?;
            let (out, ng) = self.generator_step(tape, p, &gen, h_prev, z, cond, t)?;
            prior = np;
            gen = ng;
            last = out.x_hat;
            if t < frames.len {
                h_prev = self.encode(tape, p, last)?;
            }
        }
        Ok(last)
    }

    /// Draws `batch` sequences of length `len` from the prior. Row `b` starts
    /// at `start[b]` (copied verbatim) and targets `end[b]`. Returns one
    /// `[batch × D]` tensor per step.
    pub fn sample_batch(&self, start: &Tensor, end: &Tensor, len: usize, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        self.check_frames(start, end)?;
        if len < 2 {
            return Err(Error::invalid(format!("sequence length {len} < 2")));
        }
        let batch = start.shape()[0];
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape);
        let x_end = tape.constant(end.clone());
        let cond = self.condition(&mut tape, &p, x_end, len)?;
        let x1 = tape.constant(start.clone());
        let mut h_prev = self.encode(&mut tape, &p, x1)?;
        let mut prior = self.prior.zero_state(&mut tape, batch);
        let mut gen = self.generator.zero_state(&mut tape, batch);
        let mut out = vec![start.clone()];
        for t in 2..=len {
            let (mu, logvar, np) = self.prior_step(&mut tape, &p, &prior, h_prev, &cond, t)?;
            let z = nn::reparam_sample(&mut tape, mu, logvar, rng)?;
            let (o, ng) = self.generator_step(&mut tape, &p, &gen, h_prev, z, &cond, t)?;
            prior = np;
            gen = ng;
            out.push(tape.value(o.x_hat).clone());
            if t < len {
                h_prev = self.encode(&mut tape, &p, o.x_hat)?;
            }
        }
        Ok(out)
    }

    /// Posterior-driven reconstructions of `frames` (teacher-forced,
    /// `z_t ~ q_φ`), with frame 1 copied. One `[batch × D]` tensor per step.
    pub fn reconstruct_batch(&self, frames: &FrameBatch, rng: &mut impl Rng) -> Result<Vec<Tensor>> {
        let mut tape = Tape::no_grad();
        let p = self.bind(&mut tape);
        let noise = UnrollNoise::draw(frames.len, frames.batch, self.arch.latent_dim, rng);
        let mask = SkipMask::all_kept(frames.len, frames.batch);
        let record = self.train_unroll(&mut tape, &p, frames, &mask, &noise, UnrollOptions::default())?;
        let mut out = vec![frames.frame(1)];
        out.extend(record.steps.iter().map(|s| tape.value(s.x_hat).clone()));
        Ok(out)
    }

    /// One sequence `x̂_1..x̂_T` from `x_start` toward `x_end`.
    pub fn sample_sequence(
        &self,
        x_start: &[f64],
        x_end: &[f64],
        len: usize,
        rng: &mut impl Rng,
    ) -> Result<Vec<Vec<f64>>> {
        let d = self.arch.frame_dim;
        let start = Tensor::matrix(1, x_start.len(), x_start.to_vec())?;
        let end = Tensor::matrix(1, x_end.len(), x_end.to_vec())?;
        if x_start.len() != d || x_end.len() != d {
            return Err(Error::Shape {
                op: "sample_sequence",
                expected: vec![d],
                got: vec![x_start.len(), x_end.len()],
            });
        }
        Ok(self
            .sample_batch(&start, &end, len, rng)?
            .into_iter()
            .map(Tensor::into_data)
            .collect())
    }

    /// Chains clips through successive control points. Clip `i` runs from
    /// `points[i]` to `points[i + 1]` over `lengths[i]` frames; each interior
    /// control point is emitted once, verbatim, as the start of the next clip.
    pub fn stitch_generate(&self, points: &[Vec<f64>], lengths: &[usize], rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        if points.len() < 2 || lengths.len() + 1 != points.len() {
            return Err(Error::invalid(format!(
                "{} control points need {} clip lengths, got {}",
                points.len(),
                points.len().saturating_sub(1),
                lengths.len()
            )));
        }
        let mut merged: Vec<Vec<f64>> = Vec::new();
        for (i, &len) in lengths.iter().enumerate() {
            let clip = self.sample_sequence(&points[i], &points[i + 1], len, rng)?;
            if merged.is_empty() {
                merged.extend(clip);
            } else {
                merged.pop();
                merged.extend(clip);
            }
        }
        Ok(merged)
    }

    /// Frame indices (0-based) at which [`Self::stitch_generate`] places each
    /// control point.
    pub fn stitch_boundaries(lengths: &[usize]) -> Vec<usize> {
        let mut idx = vec![0];
        for &l in lengths {
            let last = *idx.last().expect("non-empty");
            idx.push(last + l - 1);
        }
        idx
    }

    /// A sequence that starts and ends at `x`.
    pub fn loop_generate(&self, x: &[f64], len: usize, rng: &mut impl Rng) -> Result<Vec<Vec<f64>>> {
        if len < 3 {
            return Err(Error::invalid(format!("loop length {len} < 3")));
        }
        self.sample_sequence(x, x, len, rng)
    }

    fn check_frames(&self, start: &Tensor, end: &Tensor) -> Result<()> {
        let d = self.arch.frame_dim;
        let (bs, ds) = start.dims2("sample")?;
        let (be, de) = end.dims2("sample")?;
        if ds != d || de != d || bs != be {
            return Err(Error::Shape {
                op: "sample",
                expected: vec![bs, d],
                got: vec![be, de],
            });
        }
        Ok(())
    }
}

/// Row-wise `keep ? new : old` over every recurrent state.
fn select_state(tape: &mut Tape, keep: &Tensor, new: &RecurrentState, old: &RecurrentState) -> Result<RecurrentState> {
    let on = tape.constant(keep.clone());
    let off = tape.constant(Tensor::vector(keep.data().iter().map(|k| 1.0 - k).collect()));
    let mut pick = |a: Var, b: Var| -> Result<Var> {
        let a = tape.scale_rows(a, on)?;
        let b = tape.scale_rows(b, off)?;
        tape.add(a, b)
    };
    let mut layers = |n: &[LstmState], o: &[LstmState]| -> Result<Vec<LstmState>> {
        n.iter()
            .zip(o)
            .map(|(n, o)| {
                Ok(LstmState {
                    h: pick(n.h, o.h)?,
                    c: pick(n.c, o.c)?,
                })
            })
            .collect()
    };
    let posterior = layers(&new.posterior, &old.posterior)?;
    let prior = layers(&new.prior, &old.prior)?;
    let generator = layers(&new.generator, &old.generator)?;
    let h_prev = pick(new.h_prev, old.h_prev)?;
    Ok(RecurrentState {
        posterior,
        prior,
        generator,
        h_prev,
    })
}
