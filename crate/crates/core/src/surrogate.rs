//! Surrogate candidate distribution over rollout states.
//!
//! A deterministic sampler has no per-step likelihood, so the policy-ratio
//! machinery of group-relative training needs a stand-in. At a fixed
//! rollout step, the candidate trajectories of one group provide `G`
//! states; a Gaussian kernel around the anchor trajectory's state turns
//! them into a categorical distribution ("which candidate does the anchor
//! currently resemble"):
//!
//! ```text
//! p_i  proportional to  exp(-1/2 * d^2(x_anchor, x_i))
//! ```
//!
//! The squared distance is region-normalized: on-mask and off-mask parts
//! are averaged separately and divided by the squared bandwidths
//! `tau_edit^2` / `tau_base^2`, so that a large edit region cannot drown
//! out background deviations (or vice versa):
//!
//! ```text
//! d^2(x, y) = ||M (x-y)||^2 / ((|M| + eps) tau_edit^2)
//!           + ||(1-M)(x-y)||^2 / ((|M^c| + eps) tau_base^2)
//! ```
//!
//! Equivalently `d^2 = (x-y)^T SigmaInv (x-y)` with the diagonal kernel
//! precision returned by [`kernel_covariance_inverse_diag`]. A plain
//! Euclidean variant is kept as a baseline.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{check_same_grid, EditMask, Latent};

/// Small additive guard in the per-region denominators; keeps degenerate
/// masks legal.
pub const METRIC_EPS: f64 = 1e-8;

/// Kernel bandwidths for the two regions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidths {
    tau_edit: f64,
    tau_base: f64,
}

impl Bandwidths {
    pub fn new(tau_edit: f64, tau_base: f64) -> Result<Self> {
        if !tau_edit.is_finite() || tau_edit <= 0.0 {
            return Err(Error::invalid("tau_edit", "must be finite and positive"));
        }
        if !tau_base.is_finite() || tau_base <= 0.0 {
            return Err(Error::invalid("tau_base", "must be finite and positive"));
        }
        Ok(Bandwidths { tau_edit, tau_base })
    }

    pub fn tau_edit(&self) -> f64 {
        self.tau_edit
    }

    pub fn tau_base(&self) -> f64 {
        self.tau_base
    }
}

/// Ties bandwidths to the perturbation amplitudes: `tau = c * alpha`,
/// floored at `tau_min` so a tiny background amplitude keeps a usable
/// kernel width.
pub fn calibrate_bandwidths(
    alpha_edit: f64,
    alpha_base: f64,
    c: f64,
    tau_min: f64,
) -> Result<Bandwidths> {
    if !c.is_finite() || c <= 0.0 {
        return Err(Error::invalid("c", "must be finite and positive"));
    }
    if !tau_min.is_finite() || tau_min <= 0.0 {
        return Err(Error::invalid("tau_min", "must be finite and positive"));
    }
    if !(0.0..=1.0).contains(&alpha_edit) || !(0.0..=1.0).contains(&alpha_base) {
        return Err(Error::invalid("alpha", "amplitudes must lie in [0, 1]"));
    }
    let tau_edit = (c * alpha_edit).max(tau_min);
    let tau_base = (c * alpha_base).max(tau_min);
    Bandwidths::new(tau_edit, tau_base)
}

/// Region-normalized squared distance between two latents.
pub fn masked_distance(x: &Latent, y: &Latent, mask: &EditMask, bw: &Bandwidths) -> Result<f64> {
    check_same_grid(x, mask, "masked_distance")?;
    check_same_grid(y, mask, "masked_distance")?;
    let mut on_sq = 0.0;
    let mut off_sq = 0.0;
    for d in 0..x.dim() {
        let diff = x.data()[d] - y.data()[d];
        if mask.is_on(d) {
            on_sq += diff * diff;
        } else {
            off_sq += diff * diff;
        }
    }
    let on_term = on_sq / ((mask.on_count() as f64 + METRIC_EPS) * bw.tau_edit * bw.tau_edit);
    let off_term = off_sq / ((mask.off_count() as f64 + METRIC_EPS) * bw.tau_base * bw.tau_base);
    Ok(on_term + off_term)
}

/// Diagonal of the inverse kernel covariance: `1 / ((|M| + eps) tau_edit^2)`
/// on masked elements and `1 / ((|M^c| + eps) tau_base^2)` elsewhere, so
/// that `d^2(x, y) = (x-y)^T Diag (x-y)` reproduces [`masked_distance`].
pub fn kernel_covariance_inverse_diag(mask: &EditMask, bw: &Bandwidths) -> Array1<f64> {
    let on = 1.0 / ((mask.on_count() as f64 + METRIC_EPS) * bw.tau_edit * bw.tau_edit);
    let off = 1.0 / ((mask.off_count() as f64 + METRIC_EPS) * bw.tau_base * bw.tau_base);
    Array1::from_iter((0..mask.dim()).map(|d| if mask.is_on(d) { on } else { off }))
}

/// Softmax of `-1/2 d^2(query, candidate_i)` over the candidates: the
/// responsibility of each candidate for the query point.
pub fn responsibilities(
    query: &Latent,
    candidates: &[&Latent],
    mask: &EditMask,
    bw: &Bandwidths,
) -> Result<Vec<f64>> {
    let (probs, _) = soft_assign(query, candidates, mask, bw)?;
    Ok(probs)
}

fn soft_assign(
    query: &Latent,
    candidates: &[&Latent],
    mask: &EditMask,
    bw: &Bandwidths,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("candidates"));
    }
    let logits: Vec<f64> = candidates
        .iter()
        .map(|c| masked_distance(query, c, mask, bw).map(|d| -0.5 * d))
        .collect::<Result<_>>()?;
    Ok(stable_softmax(&logits))
}

/// Log-space softmax with max subtraction; returns `(probs, log_probs)`.
fn stable_softmax(logits: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|z| z - max).collect();
    let log_norm = shifted.iter().map(|z| z.exp()).sum::<f64>().ln();
    let log_probs: Vec<f64> = shifted.iter().map(|z| z - log_norm).collect();
    let probs: Vec<f64> = log_probs.iter().map(|lp| lp.exp()).collect();
    (probs, log_probs)
}

/// The surrogate policy at one rollout step: a categorical distribution
/// over the group's candidates, evaluated at the anchor trajectory's state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateDistribution {
    probs: Vec<f64>,
    log_probs: Vec<f64>,
    /// Which candidate the anchor trajectory belongs to.
    anchor_index: usize,
    /// Rollout state index this distribution was computed at.
    step_index: usize,
}

impl CandidateDistribution {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn log_probs(&self) -> &[f64] {
        &self.log_probs
    }

    pub fn anchor_index(&self) -> usize {
        self.anchor_index
    }

    pub fn step_index(&self) -> usize {
        self.step_index
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Probability assigned to the anchor's own candidate.
    pub fn anchor_prob(&self) -> f64 {
        self.probs[self.anchor_index]
    }

    pub fn anchor_log_prob(&self) -> f64 {
        self.log_probs[self.anchor_index]
    }
}

/// Builds the surrogate policy at one step with the region-normalized
/// kernel.
///
/// `candidate_states` are the group's candidate trajectory states at this
/// step; `anchor_state` is the state of the trajectory being scored
/// (candidate `anchor_index` under the sampling parameters, possibly a
/// different point under updated parameters).
pub fn candidate_policy(
    candidate_states: &[&Latent],
    anchor_state: &Latent,
    mask: &EditMask,
    bw: &Bandwidths,
    anchor_index: usize,
    step_index: usize,
) -> Result<CandidateDistribution> {
    if anchor_index >= candidate_states.len() {
        return Err(Error::invalid(
            "anchor_index",
            format!(
                "{anchor_index} out of range for {} candidates",
                candidate_states.len()
            ),
        ));
    }
    let (probs, log_probs) = soft_assign(anchor_state, candidate_states, mask, bw)?;
    Ok(CandidateDistribution {
        probs,
        log_probs,
        anchor_index,
        step_index,
    })
}

/// Euclidean baseline variant: `d^2 = ||x - y||^2` with no region
/// normalization.
pub fn candidate_policy_euclidean(
    candidate_states: &[&Latent],
    anchor_state: &Latent,
    anchor_index: usize,
    step_index: usize,
) -> Result<CandidateDistribution> {
    if candidate_states.is_empty() {
        return Err(Error::EmptyInput("candidates"));
    }
    if anchor_index >= candidate_states.len() {
        return Err(Error::invalid(
            "anchor_index",
            format!(
                "{anchor_index} out of range for {} candidates",
                candidate_states.len()
            ),
        ));
    }
    let logits: Vec<f64> = candidate_states
        .iter()
        .map(|c| {
            let mut sq = 0.0;
            for d in 0..anchor_state.dim() {
                let diff = anchor_state.data()[d] - c.data()[d];
                sq += diff * diff;
            }
            -0.5 * sq
        })
        .collect();
    let (probs, log_probs) = stable_softmax(&logits);
    Ok(CandidateDistribution {
        probs,
        log_probs,
        anchor_index,
        step_index,
    })
}

/// Probability ratio `new.p[i] / old.p[i]`, computed in log space. The two
/// distributions must describe the same group, anchor, and step.
pub fn policy_ratio(
    new: &CandidateDistribution,
    old: &CandidateDistribution,
    candidate: usize,
) -> Result<f64> {
    if new.len() != old.len() {
        return Err(Error::GroupMismatch(format!(
            "candidate counts differ: {} vs {}",
            new.len(),
            old.len()
        )));
    }
    if new.anchor_index != old.anchor_index {
        return Err(Error::GroupMismatch(format!(
            "anchor indices differ: {} vs {}",
            new.anchor_index, old.anchor_index
        )));
    }
    if new.step_index != old.step_index {
        return Err(Error::GroupMismatch(format!(
            "step indices differ: {} vs {}",
            new.step_index, old.step_index
        )));
    }
    if candidate >= new.len() {
        return Err(Error::invalid(
            "candidate",
            format!("{candidate} out of range for {} candidates", new.len()),
        ));
    }
    Ok((new.log_probs[candidate] - old.log_probs[candidate]).exp())
}

/// Pulls a cotangent on the policy logits back to the anchor state.
///
/// Logit `j` is `-1/2 (x_j - a)^T P (x_j - a)` with `P` the diagonal
/// precision, so `d logit_j / d a = P (x_j - a)` and the pullback of a
/// logit cotangent `zbar` is `sum_j zbar_j * P (x_j - a)`.
pub(crate) fn logits_anchor_vjp(
    candidate_states: &[&Latent],
    anchor_state: &Latent,
    precision_diag: &Array1<f64>,
    zbar: &[f64],
) -> Array1<f64> {
    let d = anchor_state.dim();
    let mut out = Array1::<f64>::zeros(d);
    for (j, cand) in candidate_states.iter().enumerate() {
        if zbar[j] == 0.0 {
            continue;
        }
        for k in 0..d {
            out[k] += zbar[j] * precision_diag[k] * (cand.data()[k] - anchor_state.data()[k]);
        }
    }
    out
}

/// Gradient of `log p_i` with respect to the anchor state:
/// `P (x_i - a) - sum_j p_j P (x_j - a)`.
pub fn log_policy_anchor_grad(
    candidate_states: &[&Latent],
    anchor_state: &Latent,
    mask: &EditMask,
    bw: &Bandwidths,
    candidate: usize,
) -> Result<Array1<f64>> {
    if candidate >= candidate_states.len() {
        return Err(Error::invalid(
            "candidate",
            format!(
                "{candidate} out of range for {} candidates",
                candidate_states.len()
            ),
        ));
    }
    let (probs, _) = soft_assign(anchor_state, candidate_states, mask, bw)?;
    let precision = kernel_covariance_inverse_diag(mask, bw);
    let mut zbar = vec![0.0; candidate_states.len()];
    for (j, z) in zbar.iter_mut().enumerate() {
        *z = (if j == candidate { 1.0 } else { 0.0 }) - probs[j];
    }
    Ok(logits_anchor_vjp(
        candidate_states,
        anchor_state,
        &precision,
        &zbar,
    ))
}
