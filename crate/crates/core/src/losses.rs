//! Training objectives for the inner autoencoder, all defined on latents.
//!
//! The generator objective is a weighted sum of latent reconstruction,
//! least-squares adversarial and feature-matching terms against the latent
//! discriminator, a KL regularizer on the inner posterior, and an optional
//! structure-specific task term supplied by the active variant.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};

/// Stabilizes the feature-matching denominator early in training, when the
/// discriminator's fake-side feature maps can be near zero.
pub const FM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    pub rec: f64,
    pub adv: f64,
    pub fm: f64,
    pub kl: f64,
    pub task: f64,
}

impl LossWeights {
    /// Defaults shared by every variant; `task` is set per variant.
    pub fn base() -> Self {
        Self { rec: 1.0, adv: 0.5, fm: 1.0, kl: 1e-4, task: 0.0 }
    }

    pub fn with_task(task: f64) -> Self {
        Self { task, ..Self::base() }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rec", self.rec),
            ("adv", self.adv),
            ("fm", self.fm),
            ("kl", self.kl),
            ("task", self.task),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Config(format!("loss weight {name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

/// Unweighted per-term values plus the weighted total, logged once per step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossReport {
    pub rec: f64,
    pub adv: f64,
    pub fm: f64,
    pub kl: f64,
    pub task: f64,
    pub total: f64,
}

fn require_same_shape(tape: &Tape, a: Var, b: Var, what: &str) -> Result<()> {
    let (sa, sb) = (tape.value(a).shape().to_vec(), tape.value(b).shape().to_vec());
    if sa != sb {
        return Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")));
    }
    Ok(())
}

/// Per-item Euclidean norm of (z - zhat) over the flattened item tensor,
/// averaged over the batch.
pub fn latent_recon_loss(tape: &mut Tape, z: Var, zhat: Var) -> Result<Var> {
    require_same_shape(tape, z, zhat, "latent_recon_loss")?;
    let diff = tape.sub(z, zhat);
    let norms = tape.l2_per_item(diff);
    Ok(tape.mean_all(norms))
}

/// Least-squares discriminator objective: (1 - D(real))^2 + D(fake)^2,
/// batch-averaged. Scores are one value per item.
pub fn disc_adv_loss(tape: &mut Tape, score_real: Var, score_fake: Var) -> Result<Var> {
    require_same_shape(tape, score_real, score_fake, "disc_adv_loss")?;
    let neg_real = tape.neg(score_real);
    let one_minus_real = tape.add_scalar(neg_real, 1.0);
    let real_term = tape.square(one_minus_real);
    let fake_term = tape.square(score_fake);
    let real_mean = tape.mean_all(real_term);
    let fake_mean = tape.mean_all(fake_term);
    Ok(tape.add(real_mean, fake_mean))
}

/// Least-squares generator objective: (1 - D(fake))^2, batch-averaged.
pub fn gen_adv_loss(tape: &mut Tape, score_fake: Var) -> Var {
    let neg = tape.neg(score_fake);
    let one_minus = tape.add_scalar(neg, 1.0);
    let sq = tape.square(one_minus);
    tape.mean_all(sq)
}

/// Sum over discriminator layers of ||D_i(real) - D_i(fake)||_1 divided by
/// ||D_i(fake)||_1 (plus FM_EPS). Summed, not averaged, over layers; the
/// layer count is recorded in run manifests so the convention is auditable.
pub fn feature_matching_loss(tape: &mut Tape, feats_real: &[Var], feats_fake: &[Var]) -> Result<Var> {
    if feats_real.len() != feats_fake.len() {
        return Err(Error::Shape(format!(
            "feature_matching_loss: {} real vs {} fake layers",
            feats_real.len(),
            feats_fake.len()
        )));
    }
    if feats_real.is_empty() {
        return Err(Error::Shape("feature_matching_loss: no feature maps".into()));
    }
    let mut total: Option<Var> = None;
    for (layer, (&r, &f)) in feats_real.iter().zip(feats_fake).enumerate() {
        require_same_shape(tape, r, f, &format!("feature_matching_loss layer {layer}"))?;
        let diff = tape.sub(r, f);
        let abs_diff = tape.abs(diff);
        let num = tape.sum_all(abs_diff);
        let abs_f = tape.abs(f);
        let den_sum = tape.sum_all(abs_f);
        let den = tape.add_scalar(den_sum, FM_EPS);
        let ratio = tape.div(num, den);
        total = Some(match total {
            Some(t) => tape.add(t, ratio),
            None => ratio,
        });
    }
    Ok(total.unwrap())
}

/// Closed-form KL to the standard normal: 0.5 * (mu^2 + e^logvar - 1 -
/// logvar), averaged over batch and elements so the weight is
/// resolution-independent.
pub fn kl_loss(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Var> {
    require_same_shape(tape, mean, logvar, "kl_loss")?;
    let mu_sq = tape.square(mean);
    let var = tape.exp(logvar);
    let sum = tape.add(mu_sq, var);
    let shifted = tape.add_scalar(sum, -1.0);
    let inner = tape.sub(shifted, logvar);
    let m = tape.mean_all(inner);
    Ok(tape.scale(m, 0.5))
}

pub struct GenLossTerms {
    pub rec: Var,
    pub adv: Var,
    pub fm: Var,
    pub kl: Var,
    pub task: Option<Var>,
}

/// Weighted total plus a per-term report. Any non-finite term aborts with
/// its name so a diverging run points at the responsible objective.
pub fn total_generator_loss(
    tape: &mut Tape,
    terms: &GenLossTerms,
    weights: &LossWeights,
) -> Result<(Var, LossReport)> {
    weights.validate()?;
    let task_value = terms.task.map(|t| tape.scalar(t)).unwrap_or(0.0);
    let named = [
        ("rec", tape.scalar(terms.rec)),
        ("adv", tape.scalar(terms.adv)),
        ("fm", tape.scalar(terms.fm)),
        ("kl", tape.scalar(terms.kl)),
        ("task", task_value),
    ];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("loss term {name} = {v}")));
        }
    }
    let mut parts = vec![
        (weights.rec, terms.rec),
        (weights.adv, terms.adv),
        (weights.fm, terms.fm),
        (weights.kl, terms.kl),
    ];
    if let Some(task) = terms.task {
        parts.push((weights.task, task));
    }
    let total = tape.linear_combination(&parts);
    let report = LossReport {
        rec: named[0].1,
        adv: named[1].1,
        fm: named[2].1,
        kl: named[3].1,
        task: task_value,
        total: tape.scalar(total),
    };
    Ok((total, report))
}
