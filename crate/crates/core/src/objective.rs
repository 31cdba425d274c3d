//! Loss terms and their composition.
//!
//! All terms are minimized. The reconstruction likelihood is a unit-variance
//! Gaussian with constants dropped, i.e. per-frame mean squared error, and
//! the end-frame consistency term uses the same convention.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::model::{
    CpcBranch, CpcRollout, FrameBatch, GenerationCondition, LatentPath, P2PModel, RolloutRecord, UnrollNoise,
    UnrollOptions,
};
use crate::nn::{self, Binding};
use crate::tensor::Tensor;

/// Desk defaults for the objective weights.
pub const DEFAULT_BETA: f64 = 1e-4;
pub const DEFAULT_ALPHA_CPC: f64 = 100.0;
pub const DEFAULT_ALPHA_ALIGN: f64 = 0.5;
pub const DEFAULT_P_SKIP: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Learned-prior sequence VAE without end-frame conditioning.
    Baseline,
    /// + conditioning and the consistency term on the prior.
    C,
    /// + latent alignment.
    Ca,
    /// + skip-frame training.
    Full,
}

impl Ablation {
    pub const ALL: [Ablation; 4] = [Ablation::Baseline, Ablation::C, Ablation::Ca, Ablation::Full];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Baseline => "baseline",
            Ablation::C => "c",
            Ablation::Ca => "ca",
            Ablation::Full => "full",
        }
    }

    /// `(condition_on_end, use_cpc, use_align, use_skip)`.
    pub fn flags(self) -> (bool, bool, bool, bool) {
        match self {
            Ablation::Baseline => (false, false, false, false),
            Ablation::C => (true, true, false, false),
            Ablation::Ca => (true, true, true, false),
            Ablation::Full => (true, true, true, true),
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown ablation `{s}` (expected baseline|c|ca|full)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub beta: f64,
    pub alpha_cpc: f64,
    pub alpha_align: f64,
    pub p_skip: f64,
    pub use_cpc: bool,
    pub use_align: bool,
    pub use_skip: bool,
    pub condition_on_end: bool,
    /// Which latent drives the consistency term. `Posterior` is only used to
    /// compare against the prior placement.
    #[serde(default)]
    pub cpc_path: LatentPath,
    #[serde(default)]
    pub cpc_rollout: CpcRollout,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self::for_ablation(Ablation::Full)
    }
}

impl ObjectiveConfig {
    /// Desk weights with the flag pattern of `ablation`; disabled terms get
    /// weight 0.
    pub fn for_ablation(ablation: Ablation) -> Self {
        let (condition_on_end, use_cpc, use_align, use_skip) = ablation.flags();
        Self {
            beta: DEFAULT_BETA,
            alpha_cpc: if use_cpc { DEFAULT_ALPHA_CPC } else { 0.0 },
            alpha_align: if use_align { DEFAULT_ALPHA_ALIGN } else { 0.0 },
            p_skip: if use_skip { DEFAULT_P_SKIP } else { 0.0 },
            use_cpc,
            use_align,
            use_skip,
            condition_on_end,
            cpc_path: LatentPath::Prior,
            cpc_rollout: CpcRollout::TeacherForced,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("beta", self.beta),
            ("alpha_cpc", self.alpha_cpc),
            ("alpha_align", self.alpha_align),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be finite and ≥ 0, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&self.p_skip) {
            return Err(Error::invalid(format!(
                "p_skip must lie in [0, 1), got {}",
                self.p_skip
            )));
        }
        for (name, flag, w) in [
            ("cpc", self.use_cpc, self.alpha_cpc),
            ("align", self.use_align, self.alpha_align),
            ("skip", self.use_skip, self.p_skip),
        ] {
            if flag != (w > 0.0) {
                return Err(Error::invalid(format!(
                    "use_{name} = {flag} disagrees with its weight {w}"
                )));
            }
        }
        if self.use_cpc && !self.condition_on_end {
            return Err(Error::invalid("the consistency term needs condition_on_end"));
        }
        Ok(())
    }

    pub fn unroll_options(&self) -> UnrollOptions {
        UnrollOptions {
            cpc: self.use_cpc.then_some(self.cpc_path),
            cpc_rollout: self.cpc_rollout,
        }
    }
}

/// Scalar values of every term.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl: f64,
    pub align: f64,
    pub cpc: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `recon + β·kl + α_align·align + α_cpc·cpc`.
    pub fn recompose(&self, cfg: &ObjectiveConfig) -> f64 {
        self.recon + cfg.beta * self.kl + cfg.alpha_align * self.align + cfg.alpha_cpc * self.cpc
    }

    pub fn is_finite(&self) -> bool {
        [self.recon, self.kl, self.align, self.cpc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Tape handles of every term; `total` is the one to differentiate.
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub recon: Var,
    pub kl: Var,
    pub align: Var,
    pub cpc: Var,
    pub total: Var,
}

impl LossTerms {
    pub fn values(&self, tape: &Tape) -> Result<LossBreakdown> {
        Ok(LossBreakdown {
            recon: tape.item(self.recon)?,
            kl: tape.item(self.kl)?,
            align: tape.item(self.align)?,
            cpc: tape.item(self.cpc)?,
            total: tape.item(self.total)?,
        })
    }
}

fn same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(Error::Shape {
            op,
            expected: tape.shape(a).to_vec(),
            got: tape.shape(b).to_vec(),
        });
    }
    Ok(())
}

/// Per-frame mean squared error, `[batch]`.
pub fn reconstruction_per_sample(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    same_shape(tape, "reconstruction_loss", x_hat, x)?;
    let diff = tape.sub(x_hat, x)?;
    let sq = tape.square(diff)?;
    tape.mean(sq, Some(1))
}

/// Mean squared error over the feature dimension, averaged over the batch.
pub fn reconstruction_loss(tape: &mut Tape, x_hat: Var, x: Var) -> Result<Var> {
    let per = reconstruction_per_sample(tape, x_hat, x)?;
    tape.mean(per, None)
}

/// Closed-form `KL(N(μ_q, e^{lv_q}) ‖ N(μ_p, e^{lv_p}))` summed over latent
/// dimensions, `[batch]`.
pub fn kl_per_sample(tape: &mut Tape, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
    for v in [logvar_q, mu_p, logvar_p] {
        same_shape(tape, "kl_gaussians", mu_q, v)?;
    }
    let diff = tape.sub(mu_q, mu_p)?;
    let diff2 = tape.square(diff)?;
    let var_q = tape.exp(logvar_q)?;
    let num = tape.add(var_q, diff2)?;
    let neg_lv_p = tape.neg(logvar_p)?;
    let inv_var_p = tape.exp(neg_lv_p)?;
    let ratio = tape.mul(num, inv_var_p)?;
    let log_ratio = tape.sub(logvar_p, logvar_q)?;
    let inner = tape.add(log_ratio, ratio)?;
    let inner = tape.add_scalar(inner, -1.0)?;
    let summed = tape.sum(inner, Some(1))?;
    tape.scale(summed, 0.5)
}

/// [`kl_per_sample`] averaged over the batch.
pub fn kl_gaussians(tape: &mut Tape, mu_q: Var, logvar_q: Var, mu_p: Var, logvar_p: Var) -> Result<Var> {
    let per = kl_per_sample(tape, mu_q, logvar_q, mu_p, logvar_p)?;
    tape.mean(per, None)
}

/// `‖h − g‖₂` per row, `[batch]`.
pub fn alignment_per_sample(tape: &mut Tape, h: Var, g: Var) -> Result<Var> {
    same_shape(tape, "alignment_loss", h, g)?;
    let diff = tape.sub(h, g)?;
    let sq = tape.square(diff)?;
    let ss = tape.sum(sq, Some(1))?;
    tape.sqrt(ss)
}

pub fn alignment_loss(tape: &mut Tape, h: Var, g: Var) -> Result<Var> {
    let per = alignment_per_sample(tape, h, g)?;
    tape.mean(per, None)
}

/// End-frame consistency: MSE between the decoded end-frame and the target.
/// The branch must come from the latent path the caller expects.
pub fn cpc_loss(tape: &mut Tape, branch: &CpcBranch, expected: LatentPath) -> Result<Var> {
    if branch.path != expected {
        return Err(Error::invalid(format!(
            "end-frame term expected a {expected:?}-driven frame, got {:?}",
            branch.path
        )));
    }
    reconstruction_loss(tape, branch.x_hat_end, branch.target_end)
}

/// `M_1..M_T` with interior steps kept with probability `1 − p_skip` and
/// both control points always kept.
pub fn skip_mask_sample(len: usize, p_skip: f64, rng: &mut impl Rng) -> Result<Vec<bool>> {
    if len < 2 {
        return Err(Error::invalid(format!("sequence length {len} < 2")));
    }
    if !(0.0..1.0).contains(&p_skip) {
        return Err(Error::invalid(format!("p_skip must lie in [0, 1), got {p_skip}")));
    }
    Ok((1..=len)
        .map(|t| t == 1 || t == len || rng.random::<f64>() >= p_skip)
        .collect())
}

/// Full objective over one rollout:
/// `Σ_t M_t [recon_t + β·kl_t + α_align·align_t] / Σ_t M_t + α_cpc·cpc`,
/// the masked sum taken per sequence and averaged over the batch.
pub fn full_objective(tape: &mut Tape, record: &RolloutRecord, cfg: &ObjectiveConfig) -> Result<LossTerms> {
    cfg.validate()?;
    let batch = record.batch;
    if record.steps.is_empty() {
        return Err(Error::invalid("rollout has no predicted steps"));
    }
    let mut kept = vec![0.0; batch];
    for s in &record.steps {
        kept.iter_mut().zip(s.keep.data()).for_each(|(n, k)| *n += k);
    }
    if kept.contains(&0.0) {
        return Err(Error::invalid("a sequence has every step masked"));
    }

    let mut recon = None;
    let mut kl = None;
    let mut align = None;
    let acc = |tape: &mut Tape, slot: &mut Option<Var>, per: Var, w: Var| -> Result<()> {
        let weighted = tape.mul(per, w)?;
        let s = tape.sum(weighted, None)?;
        *slot = Some(match slot.take() {
            Some(prev) => tape.add(prev, s)?,
            None => s,
        });
        Ok(())
    };
    for s in &record.steps {
        let w: Vec<f64> = s
            .keep
            .data()
            .iter()
            .zip(&kept)
            .map(|(k, n)| k / (n * batch as f64))
            .collect();
        let w = tape.constant(Tensor::vector(w));
        let r = reconstruction_per_sample(tape, s.x_hat, s.target)?;
        acc(tape, &mut recon, r, w)?;
        let k = kl_per_sample(tape, s.mu_q, s.logvar_q, s.mu_p, s.logvar_p)?;
        acc(tape, &mut kl, k, w)?;
        let a = alignment_per_sample(tape, s.h, s.g)?;
        acc(tape, &mut align, a, w)?;
    }
    let (recon, kl, align) = (recon.expect("steps"), kl.expect("steps"), align.expect("steps"));

    let cpc = match (&record.cpc, cfg.use_cpc) {
        (Some(branch), true) => cpc_loss(tape, branch, cfg.cpc_path)?,
        (None, true) => {
            return Err(Error::invalid(
                "objective wants a consistency term but the rollout has none",
            ))
        }
        (_, false) => tape.constant(Tensor::scalar(0.0)),
    };

    let total = compose(tape, recon, kl, align, cpc, cfg)?;
    let terms = LossTerms {
        recon,
        kl,
        align,
        cpc,
        total,
    };
    if !tape.item(total)?.is_finite() {
        return Err(Error::NonFinite { op: "full_objective" });
    }
    Ok(terms)
}

fn compose(tape: &mut Tape, recon: Var, kl: Var, align: Var, cpc: Var, cfg: &ObjectiveConfig) -> Result<Var> {
    let kl_w = tape.scale(kl, cfg.beta)?;
    let align_w = tape.scale(align, cfg.alpha_align)?;
    let cpc_w = tape.scale(cpc, cfg.alpha_cpc)?;
    let t = tape.add(recon, kl_w)?;
    let t = tape.add(t, align_w)?;
    tape.add(t, cpc_w)
}

/// The unconditioned learned-prior sequence bound, written directly: every
/// step kept, zero descriptor and counter, posterior latents, loss
/// `mean_t [MSE_t + β·KL_t]`.
pub fn baseline_objective(
    model: &P2PModel,
    tape: &mut Tape,
    p: &Binding,
    frames: &FrameBatch,
    noise: &UnrollNoise,
    beta: f64,
) -> Result<Var> {
    let (len, batch) = (frames.len, frames.batch);
    let cond = GenerationCondition {
        descriptor: tape.constant(Tensor::zeros([batch, model.arch.feat_dim])),
        len,
        timed: false,
    };
    let x1 = tape.constant(frames.frame(1));
    let mut h_prev = model.encode(tape, p, x1)?;
    let mut state = model.zero_state(tape, h_prev);
    let mut total: Option<Var> = None;
    for t in 2..=len {
        let x = tape.constant(frames.frame(t));
        let h = model.encode(tape, p, x)?;
        let (mu_q, lv_q, post) = model.posterior_step(tape, p, &state.posterior, h, &cond, t)?;
        let (mu_p, lv_p, prior) = model.prior_step(tape, p, &state.prior, h_prev, &cond, t)?;
        let z = nn::reparam_with_noise(tape, mu_q, lv_q, noise.posterior[t - 1].clone())?;
        let (out, gen) = model.generator_step(tape, p, &state.generator, h_prev, z, &cond, t)?;
        let r = reconstruction_loss(tape, out.x_hat, x)?;
        let k = kl_gaussians(tape, mu_q, lv_q, mu_p, lv_p)?;
        let k = tape.scale(k, beta)?;
        let step = tape.add(r, k)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, step)?,
            None => step,
        });
        state.posterior = post;
        state.prior = prior;
        state.generator = gen;
        h_prev = h;
    }
    tape.scale(total.expect("len ≥ 2"), 1.0 / (len - 1) as f64)
}
