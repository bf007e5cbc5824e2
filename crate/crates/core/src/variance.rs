//! Monte-Carlo verification of the conditional-variance claims behind the
//! region-decoupled perturbation scheme.
//!
//! For a frozen anchor noise `eps*`, perturbing coordinate `d` with
//! amplitude `alpha_d` and rolling the deterministic flow out gives a
//! reward whose conditional variance is, to first order,
//! `sum_d alpha_d^2 a_d^2` with `a = J^T g`, `J = d x0 / d eps` the rollout
//! Jacobian and `g` the reward gradient at the unperturbed terminal. This
//! module measures such variances by sharded Monte Carlo, computes the
//! linearized predictions, and packages a battery of cross-checks
//! ([`run_variance_lab`]) over three model presets:
//!
//! * `identity` — zero velocity field, so the rollout is the identity and
//!   every prediction is exact;
//! * `linear_local` — a token-local linear field whose Jacobian is block
//!   diagonal and never couples the edit region to the background;
//! * `attn` — the attention field, where cross-region coupling is real and
//!   the lab quantifies how much it erodes background-variance suppression.
//!
//! Everything here is deterministic for a fixed seed: Monte-Carlo shards
//! use fixed counter-based substreams and are merged in index order, so
//! results do not depend on thread scheduling.

use ndarray::{Array1, Array2};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::env::{
    make_task, reward_edit, reward_edit_grad, reward_pres, reward_pres_grad, task_reward,
    task_reward_grad, EditTask, MaskSpec,
};
use crate::error::{Error, Result};
use crate::flow::{
    jacobian_wrt_noise, rollout, AttnFieldParams, Condition, LinearFieldParams, ModelGeometry,
    VelocityFieldParams,
};
use crate::latent::{EditMask, Latent};
use crate::noise::{alpha_map, perturb};
use crate::rng::{child_seed, stream};

/// Samples per Monte-Carlo shard; one RNG substream per shard.
pub const MC_SHARD: usize = 4096;

/// A scalar reward of the rollout terminal, with an optional analytic
/// gradient (finite differences fill in when it is absent).
pub trait RewardFunction: Sync {
    fn value(&self, x0: &Latent) -> Result<f64>;

    /// Analytic gradient with respect to the terminal state, if one is
    /// implemented.
    fn grad(&self, _x0: &Latent) -> Result<Option<Array1<f64>>> {
        Ok(None)
    }
}

/// Edit-region fit reward of a task (see [`crate::env::reward_edit`]).
pub struct EditReward {
    pub task: EditTask,
}

impl RewardFunction for EditReward {
    fn value(&self, x0: &Latent) -> Result<f64> {
        reward_edit(x0, &self.task)
    }

    fn grad(&self, x0: &Latent) -> Result<Option<Array1<f64>>> {
        reward_edit_grad(x0, &self.task).map(Some)
    }
}

/// Background preservation reward of a task (see
/// [`crate::env::reward_pres`]).
pub struct PresReward {
    pub task: EditTask,
}

impl RewardFunction for PresReward {
    fn value(&self, x0: &Latent) -> Result<f64> {
        reward_pres(x0, &self.task)
    }

    fn grad(&self, x0: &Latent) -> Result<Option<Array1<f64>>> {
        reward_pres_grad(x0, &self.task).map(Some)
    }
}

/// Combined edit + preservation reward of a task.
pub struct TaskReward {
    pub task: EditTask,
}

impl RewardFunction for TaskReward {
    fn value(&self, x0: &Latent) -> Result<f64> {
        task_reward(x0, &self.task)
    }

    fn grad(&self, x0: &Latent) -> Result<Option<Array1<f64>>> {
        task_reward_grad(x0, &self.task).map(Some)
    }
}

/// Affine reward `w . x + offset`; with a linear flow it makes every
/// variance prediction exact, which pins the Monte-Carlo machinery down.
pub struct LinearReward {
    pub weights: Array1<f64>,
    pub offset: f64,
}

impl RewardFunction for LinearReward {
    fn value(&self, x0: &Latent) -> Result<f64> {
        if self.weights.len() != x0.dim() {
            return Err(Error::DimensionMismatch {
                context: "LinearReward",
                expected: x0.dim(),
                actual: self.weights.len(),
            });
        }
        Ok(self.weights.dot(x0.data()) + self.offset)
    }

    fn grad(&self, x0: &Latent) -> Result<Option<Array1<f64>>> {
        if self.weights.len() != x0.dim() {
            return Err(Error::DimensionMismatch {
                context: "LinearReward",
                expected: x0.dim(),
                actual: self.weights.len(),
            });
        }
        Ok(Some(self.weights.clone()))
    }
}

/// Gradient of a reward at `x0`: analytic if the implementation provides
/// one, central finite differences with step `fd_step` otherwise.
pub fn reward_gradient(
    reward: &dyn RewardFunction,
    x0: &Latent,
    fd_step: f64,
) -> Result<Array1<f64>> {
    if let Some(g) = reward.grad(x0)? {
        if g.len() != x0.dim() {
            return Err(Error::DimensionMismatch {
                context: "reward_gradient",
                expected: x0.dim(),
                actual: g.len(),
            });
        }
        return Ok(g);
    }
    if !fd_step.is_finite() || fd_step <= 0.0 {
        return Err(Error::invalid("fd_step", "must be finite and positive"));
    }
    let mut g = Array1::zeros(x0.dim());
    let mut data = x0.data().clone();
    for d in 0..x0.dim() {
        let base = data[d];
        data[d] = base + fd_step;
        let plus = reward.value(&Latent::new(data.clone(), x0.grid())?)?;
        data[d] = base - fd_step;
        let minus = reward.value(&Latent::new(data.clone(), x0.grid())?)?;
        data[d] = base;
        g[d] = (plus - minus) / (2.0 * fd_step);
    }
    Ok(g)
}

/// Mean and unbiased variance of a Monte-Carlo sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
}

/// Estimates `Var[R(x0(eps)) | eps*]` where `eps` perturbs the anchor
/// with per-coordinate amplitudes `alpha`.
///
/// Sampling is sharded: shard `s` draws its samples from substream `s` of
/// `seed` and accumulates them with Welford's recurrence; shards run in
/// parallel and are merged in index order, so the estimate is a pure
/// function of `(inputs, seed)`.
#[allow(clippy::too_many_arguments)]
pub fn mc_conditional_variance(
    params: &VelocityFieldParams,
    reward: &dyn RewardFunction,
    anchor: &Latent,
    cond: &Condition,
    alpha: &Array1<f64>,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    if n_samples < 2 {
        return Err(Error::invalid(
            "n_samples",
            "need at least 2 samples for an unbiased variance",
        ));
    }
    let n_shards = n_samples.div_ceil(MC_SHARD);
    let shards: Vec<(usize, f64, f64)> = (0..n_shards)
        .into_par_iter()
        .map(|s| -> Result<(usize, f64, f64)> {
            let lo = s * MC_SHARD;
            let hi = (lo + MC_SHARD).min(n_samples);
            let mut rng = stream(seed, s as u64);
            let mut count = 0usize;
            let mut mean = 0.0;
            let mut m2 = 0.0;
            for _ in lo..hi {
                let eps = perturb(anchor, alpha, &mut rng)?;
                let traj = rollout(params, &eps, cond, n_steps)?;
                let r = reward.value(traj.terminal())?;
                count += 1;
                let d1 = r - mean;
                mean += d1 / count as f64;
                m2 += d1 * (r - mean);
            }
            Ok((count, mean, m2))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut n = 0usize;
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (cn, cmean, cm2) in shards {
        if cn == 0 {
            continue;
        }
        let total = n + cn;
        let delta = cmean - mean;
        mean += delta * cn as f64 / total as f64;
        m2 += cm2 + delta * delta * (n as f64 * cn as f64) / total as f64;
        n = total;
    }
    Ok(McEstimate {
        n,
        mean,
        variance: m2 / (n - 1) as f64,
    })
}

/// Uniform amplitude map (the global-resampling covariance).
pub fn uniform_alpha(dim: usize, a: f64) -> Array1<f64> {
    Array1::from_elem(dim, a)
}

/// `a = J^T g`: how a unit of noise in each coordinate moves the reward,
/// to first order.
pub fn sensitivity_vector(jacobian: &Array2<f64>, reward_grad: &Array1<f64>) -> Array1<f64> {
    jacobian.t().dot(reward_grad)
}

/// First-order conditional variance `sum_d alpha_d^2 a_d^2`.
pub fn predicted_variance(alpha: &Array1<f64>, sensitivity: &Array1<f64>) -> f64 {
    alpha
        .iter()
        .zip(sensitivity)
        .map(|(al, a)| al * al * a * a)
        .sum()
}

/// Squared norms of a vector restricted to the on- and off-mask elements.
pub fn region_norm_sq(v: &Array1<f64>, mask: &EditMask) -> (f64, f64) {
    let mut on = 0.0;
    let mut off = 0.0;
    for d in 0..v.len() {
        if mask.is_on(d) {
            on += v[d] * v[d];
        } else {
            off += v[d] * v[d];
        }
    }
    (on, off)
}

/// Frobenius gain from edit-region noise into background outputs,
/// relative to the background's own gain:
/// `||J[off, on]||_F / ||J[off, off]||_F`.
///
/// Zero means the flow never leaks edit-region noise into the background;
/// for such models the background variance under region-decoupled
/// perturbation is set by `alpha_base` alone.
pub fn cross_gain(jacobian: &Array2<f64>, mask: &EditMask) -> Result<f64> {
    if jacobian.nrows() != mask.dim() || jacobian.ncols() != mask.dim() {
        return Err(Error::DimensionMismatch {
            context: "cross_gain",
            expected: mask.dim(),
            actual: jacobian.nrows().max(jacobian.ncols()),
        });
    }
    let mut num = 0.0;
    let mut den = 0.0;
    for r in 0..jacobian.nrows() {
        if mask.is_on(r) {
            continue;
        }
        for c in 0..jacobian.ncols() {
            let j = jacobian[[r, c]];
            if mask.is_on(c) {
                num += j * j;
            } else {
                den += j * j;
            }
        }
    }
    if den == 0.0 {
        return Err(Error::invalid(
            "jacobian",
            "background block is identically zero; the cross gain is undefined",
        ));
    }
    Ok(num.sqrt() / den.sqrt())
}

/// First-order picture of one (model, reward, anchor) triple.
#[derive(Debug, Clone)]
pub struct LinearizationReport {
    /// `d x0 / d eps` at the anchor.
    pub jacobian: Array2<f64>,
    /// Terminal state of the unperturbed rollout.
    pub base_terminal: Latent,
    /// Reward at the unperturbed terminal.
    pub reward_value: f64,
    /// `J^T grad(reward)`.
    pub reward_sensitivity: Array1<f64>,
    /// Off-mask restriction of `J^T grad(pres)` — the channel through
    /// which background noise reaches the preservation reward.
    pub pres_sensitivity_off: Array1<f64>,
    /// See [`cross_gain`].
    pub cross_gain: f64,
}

/// Linearizes the rollout around the anchor and derives the sensitivity
/// vectors of a main reward and a preservation reward.
pub fn linearize(
    params: &VelocityFieldParams,
    reward: &dyn RewardFunction,
    pres: &dyn RewardFunction,
    anchor: &Latent,
    cond: &Condition,
    mask: &EditMask,
    n_steps: usize,
) -> Result<LinearizationReport> {
    let jacobian = jacobian_wrt_noise(params, anchor, cond, n_steps)?;
    let traj = rollout(params, anchor, cond, n_steps)?;
    let base_terminal = traj.terminal().clone();
    let g = reward_gradient(reward, &base_terminal, 1e-5)?;
    let reward_sensitivity = sensitivity_vector(&jacobian, &g);
    let gp = reward_gradient(pres, &base_terminal, 1e-5)?;
    let full = sensitivity_vector(&jacobian, &gp);
    let mut pres_sensitivity_off = Array1::zeros(full.len());
    for d in 0..full.len() {
        if !mask.is_on(d) {
            pres_sensitivity_off[d] = full[d];
        }
    }
    let kappa = cross_gain(&jacobian, mask)?;
    Ok(LinearizationReport {
        reward_value: reward.value(&base_terminal)?,
        jacobian,
        base_terminal,
        reward_sensitivity,
        pres_sensitivity_off,
        cross_gain: kappa,
    })
}

/// Monte-Carlo variance against its first-order prediction.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeltaMethodCheck {
    pub measured: f64,
    pub predicted: f64,
    pub rel_gap: f64,
}

/// Compares the measured conditional reward variance with the
/// linearization `sum_d alpha_d^2 a_d^2`.
#[allow(clippy::too_many_arguments)]
pub fn delta_method_check(
    params: &VelocityFieldParams,
    reward: &dyn RewardFunction,
    anchor: &Latent,
    cond: &Condition,
    alpha: &Array1<f64>,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<DeltaMethodCheck> {
    let jacobian = jacobian_wrt_noise(params, anchor, cond, n_steps)?;
    let traj = rollout(params, anchor, cond, n_steps)?;
    let g = reward_gradient(reward, traj.terminal(), 1e-5)?;
    let a = sensitivity_vector(&jacobian, &g);
    let predicted = predicted_variance(alpha, &a);
    let mc = mc_conditional_variance(params, reward, anchor, cond, alpha, n_steps, n_samples, seed)?;
    Ok(DeltaMethodCheck {
        measured: mc.variance,
        predicted,
        rel_gap: rel_gap(mc.variance, predicted),
    })
}

/// Predicted background-reward variance floors under both schemes, given
/// the off-mask sensitivity `h` of the preservation reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NuisancePrediction {
    /// `sigma^2 ||h||^2` — what uniform resampling injects.
    pub global_var: f64,
    /// `alpha_base^2 ||h||^2` — what the region-decoupled scheme injects.
    pub rdp_var: f64,
    /// Their ratio `alpha_base^2 / sigma^2` (0 when the global floor is 0).
    pub suppression: f64,
}

pub fn nuisance_prediction(h: &Array1<f64>, sigma: f64, alpha_base: f64) -> NuisancePrediction {
    let h2: f64 = h.iter().map(|v| v * v).sum();
    let global_var = sigma * sigma * h2;
    let rdp_var = alpha_base * alpha_base * h2;
    NuisancePrediction {
        global_var,
        rdp_var,
        suppression: if global_var > 0.0 {
            rdp_var / global_var
        } else {
            0.0
        },
    }
}

/// Per-sample reward deviations from the unperturbed rollout under three
/// amplitude maps sharing the same underlying normal draws: edit-region
/// noise only, background noise only, and both together.
#[allow(clippy::too_many_arguments)]
pub fn mc_reward_deltas(
    params: &VelocityFieldParams,
    reward: &dyn RewardFunction,
    anchor: &Latent,
    cond: &Condition,
    mask: &EditMask,
    alpha_edit: f64,
    alpha_base: f64,
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be positive"));
    }
    let base_traj = rollout(params, anchor, cond, n_steps)?;
    let r0 = reward.value(base_traj.terminal())?;
    let maps = [
        alpha_map(mask, alpha_edit, 0.0),
        alpha_map(mask, 0.0, alpha_base),
        alpha_map(mask, alpha_edit, alpha_base),
    ];
    (0..n_samples)
        .into_par_iter()
        .map(|i| -> Result<(f64, f64, f64)> {
            let mut out = [0.0; 3];
            for (k, map) in maps.iter().enumerate() {
                // Restarting the stream per variant replays the same
                // normal draws, so the three deviations share their
                // randomness coordinate by coordinate.
                let mut rng = stream(seed, i as u64);
                let eps = perturb(anchor, map, &mut rng)?;
                let traj = rollout(params, &eps, cond, n_steps)?;
                out[k] = reward.value(traj.terminal())? - r0;
            }
            Ok((out[0], out[1], out[2]))
        })
        .collect()
}

fn variance_of(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let n = values.clone().count();
    if n < 2 {
        return 0.0;
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64
}

fn covariance_of(
    a: impl Iterator<Item = f64> + Clone,
    b: impl Iterator<Item = f64> + Clone,
) -> f64 {
    let n = a.clone().count();
    if n < 2 {
        return 0.0;
    }
    let ma = a.clone().sum::<f64>() / n as f64;
    let mb = b.clone().sum::<f64>() / n as f64;
    a.zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum::<f64>() / (n - 1) as f64
}

/// Split of the total conditional reward variance into edit-driven,
/// background-driven, and interaction parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceDecomposition {
    /// Variance under edit-region noise alone.
    pub var_edit: f64,
    /// Variance under background noise alone.
    pub var_base: f64,
    /// Sample covariance between the two single-region deviations.
    pub covariance: f64,
    /// Cauchy-Schwarz bound `2 sqrt(var_edit * var_base)` on `|2 cov|`.
    pub cs_bound: f64,
    /// Variance under the combined map.
    pub total: f64,
    /// `total - var_edit - var_base - 2 cov`: zero when the reward
    /// responds additively to the two noise channels.
    pub residual: f64,
}

pub fn variance_decomposition(deltas: &[(f64, f64, f64)]) -> Result<VarianceDecomposition> {
    if deltas.len() < 2 {
        return Err(Error::invalid(
            "deltas",
            "need at least 2 samples to decompose a variance",
        ));
    }
    let var_edit = variance_of(deltas.iter().map(|d| d.0));
    let var_base = variance_of(deltas.iter().map(|d| d.1));
    let total = variance_of(deltas.iter().map(|d| d.2));
    let covariance = covariance_of(deltas.iter().map(|d| d.0), deltas.iter().map(|d| d.1));
    Ok(VarianceDecomposition {
        var_edit,
        var_base,
        covariance,
        cs_bound: 2.0 * (var_edit * var_base).sqrt(),
        total,
        residual: total - var_edit - var_base - 2.0 * covariance,
    })
}

/// Mean absolute deviation of a reward when only the edit region is
/// perturbed, for each amplitude in `alpha_edits`.
///
/// Sample `i` replays the same normal draws at every amplitude (common
/// random numbers), so the returned curve is smooth in the amplitude. The
/// background coordinates are copied bit-for-bit (`alpha_base = 0`), so a
/// nonzero result for a background-supported reward measures genuine
/// cross-region coupling in the flow.
#[allow(clippy::too_many_arguments)]
pub fn reward_bridge_error(
    params: &VelocityFieldParams,
    reward: &dyn RewardFunction,
    anchor: &Latent,
    cond: &Condition,
    mask: &EditMask,
    alpha_edits: &[f64],
    n_steps: usize,
    n_samples: usize,
    seed: u64,
) -> Result<Vec<(f64, f64)>> {
    if n_samples == 0 {
        return Err(Error::invalid("n_samples", "must be positive"));
    }
    if alpha_edits.is_empty() {
        return Err(Error::EmptyInput("alpha_edits"));
    }
    let base_traj = rollout(params, anchor, cond, n_steps)?;
    let r0 = reward.value(base_traj.terminal())?;
    let mut out = Vec::with_capacity(alpha_edits.len());
    for &a_e in alpha_edits {
        let map = alpha_map(mask, a_e, 0.0);
        let total: f64 = (0..n_samples)
            .into_par_iter()
            .map(|i| -> Result<f64> {
                let mut rng = stream(seed, i as u64);
                let eps = perturb(anchor, &map, &mut rng)?;
                let traj = rollout(params, &eps, cond, n_steps)?;
                Ok((reward.value(traj.terminal())? - r0).abs())
            })
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        out.push((a_e, total / n_samples as f64));
    }
    Ok(out)
}

/// Outcome class of one lab row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabStatus {
    Pass,
    Fail,
    /// Descriptive row with no pass criterion.
    Info,
}

/// One measured-versus-predicted comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabRow {
    /// `preset/quantity`.
    pub name: String,
    pub measured: f64,
    pub predicted: f64,
    /// `|measured - predicted| / |predicted|`, or `|measured|` when the
    /// prediction is exactly zero.
    pub rel_gap: f64,
    pub status: LabStatus,
}

/// Full output of [`run_variance_lab`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabReport {
    pub rows: Vec<LabRow>,
}

impl LabReport {
    pub fn n_failed(&self) -> usize {
        self.rows
            .iter()
            .filter(|r| r.status == LabStatus::Fail)
            .count()
    }

    pub fn passed(&self) -> bool {
        self.n_failed() == 0
    }
}

/// Knobs of the verification battery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LabConfig {
    /// Monte-Carlo samples per variance estimate.
    pub n_samples: usize,
    /// Euler steps per rollout.
    pub n_steps: usize,
    /// Global-resampling amplitude for the suppression rows.
    pub sigma: f64,
    /// Edit-region amplitude for the suppression rows.
    pub alpha_edit: f64,
    /// Background amplitude large enough to measure by Monte Carlo.
    pub alpha_base_mc: f64,
    /// Production-scale background amplitude, measured directly on the
    /// exact presets.
    pub alpha_base_report: f64,
    /// Amplitude for the attention-model linearization checks, small
    /// enough for the first-order prediction to hold.
    pub small_alpha: f64,
    /// Samples per amplitude in the coupling-leak sweep.
    pub bridge_samples: usize,
    pub seed: u64,
}

impl Default for LabConfig {
    fn default() -> Self {
        LabConfig {
            n_samples: 20_000,
            n_steps: 4,
            sigma: 0.3,
            alpha_edit: 0.3,
            alpha_base_mc: 0.05,
            alpha_base_report: 1e-4,
            small_alpha: 0.02,
            bridge_samples: 256,
            seed: 0,
        }
    }
}

impl LabConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_samples < 2 {
            return Err(Error::invalid("n_samples", "need at least 2"));
        }
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps", "must be positive"));
        }
        for (name, v) in [
            ("sigma", self.sigma),
            ("alpha_edit", self.alpha_edit),
            ("alpha_base_mc", self.alpha_base_mc),
            ("alpha_base_report", self.alpha_base_report),
            ("small_alpha", self.small_alpha),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(name, "must lie in [0, 1]"));
            }
        }
        if self.sigma == 0.0 || self.small_alpha == 0.0 {
            return Err(Error::invalid(
                "sigma/small_alpha",
                "ratio rows need positive amplitudes",
            ));
        }
        if self.bridge_samples == 0 {
            return Err(Error::invalid("bridge_samples", "must be positive"));
        }
        Ok(())
    }
}

fn rel_gap(measured: f64, predicted: f64) -> f64 {
    if predicted != 0.0 {
        ((measured - predicted) / predicted).abs()
    } else {
        measured.abs()
    }
}

fn pass_row(name: String, measured: f64, predicted: f64, tol: f64) -> LabRow {
    let gap = rel_gap(measured, predicted);
    LabRow {
        name,
        measured,
        predicted,
        rel_gap: gap,
        status: if gap <= tol {
            LabStatus::Pass
        } else {
            LabStatus::Fail
        },
    }
}

fn info_row(name: String, measured: f64, predicted: f64) -> LabRow {
    LabRow {
        rel_gap: rel_gap(measured, predicted),
        name,
        measured,
        predicted,
        status: LabStatus::Info,
    }
}

/// Unit vector supported on one mask region.
fn region_unit_vector(mask: &EditMask, on_region: bool, seed: u64) -> Result<Array1<f64>> {
    let mut rng = stream(seed, 0);
    let mut v = Array1::zeros(mask.dim());
    for d in 0..mask.dim() {
        let draw = rng.sample::<f64, _>(rand_distr::StandardNormal);
        if mask.is_on(d) == on_region {
            v[d] = draw;
        }
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return Err(Error::invalid(
            "mask",
            "selected region is empty; cannot build a unit vector on it",
        ));
    }
    Ok(v / norm)
}

/// Shared inputs of the lab presets.
struct LabBench {
    task: EditTask,
    anchor: Latent,
    w_on: Array1<f64>,
    w_off: Array1<f64>,
}

/// Rows for a preset whose flow map is linear and token-local, so every
/// prediction is exact and the only gap is Monte-Carlo error.
fn exact_preset_rows(
    preset: &str,
    params: &VelocityFieldParams,
    bench: &LabBench,
    cfg: &LabConfig,
    mc_seed: &mut impl FnMut() -> u64,
) -> Result<Vec<LabRow>> {
    let mask = &bench.task.mask;
    let cond = &bench.task.condition;
    let d = mask.dim();
    let jac = jacobian_wrt_noise(params, &bench.anchor, cond, cfg.n_steps)?;
    let a_off = sensitivity_vector(&jac, &bench.w_off);
    let a_on = sensitivity_vector(&jac, &bench.w_on);
    let reward_off = LinearReward {
        weights: bench.w_off.clone(),
        offset: 0.0,
    };
    let reward_on = LinearReward {
        weights: bench.w_on.clone(),
        offset: 0.0,
    };
    let mut mc = |reward: &dyn RewardFunction, alpha: &Array1<f64>| -> Result<f64> {
        Ok(mc_conditional_variance(
            params,
            reward,
            &bench.anchor,
            cond,
            alpha,
            cfg.n_steps,
            cfg.n_samples,
            mc_seed(),
        )?
        .variance)
    };

    let global_map = uniform_alpha(d, cfg.sigma);
    let rdp_map = alpha_map(mask, cfg.alpha_edit, cfg.alpha_base_mc);
    let rdp_default_map = alpha_map(mask, cfg.alpha_edit, cfg.alpha_base_report);

    let bg_global = mc(&reward_off, &global_map)?;
    let bg_rdp = mc(&reward_off, &rdp_map)?;
    let bg_rdp_default = mc(&reward_off, &rdp_default_map)?;
    let edit_global = mc(&reward_on, &global_map)?;
    let edit_rdp = mc(&reward_on, &rdp_map)?;

    let mut rows = vec![
        pass_row(
            format!("{preset}/bg_var_global"),
            bg_global,
            predicted_variance(&global_map, &a_off),
            0.10,
        ),
        pass_row(
            format!("{preset}/bg_var_rdp"),
            bg_rdp,
            predicted_variance(&rdp_map, &a_off),
            0.10,
        ),
        pass_row(
            format!("{preset}/bg_suppression"),
            bg_rdp / bg_global,
            (cfg.alpha_base_mc / cfg.sigma).powi(2),
            0.10,
        ),
        pass_row(
            format!("{preset}/bg_var_rdp_default"),
            bg_rdp_default,
            predicted_variance(&rdp_default_map, &a_off),
            0.10,
        ),
        pass_row(
            format!("{preset}/edit_var_global"),
            edit_global,
            predicted_variance(&global_map, &a_on),
            0.10,
        ),
        pass_row(
            format!("{preset}/edit_var_rdp"),
            edit_rdp,
            predicted_variance(&rdp_map, &a_on),
            0.10,
        ),
        pass_row(
            format!("{preset}/signal_ratio"),
            edit_rdp / edit_global,
            (cfg.alpha_edit / cfg.sigma).powi(2),
            0.10,
        ),
        pass_row(
            format!("{preset}/cross_gain"),
            cross_gain(&jac, mask)?,
            0.0,
            1e-12,
        ),
    ];

    // With the background frozen bit-for-bit and no cross-region coupling,
    // the preservation reward cannot move at all.
    let pres = PresReward {
        task: bench.task.clone(),
    };
    let leak = reward_bridge_error(
        params,
        &pres,
        &bench.anchor,
        cond,
        mask,
        &[cfg.alpha_edit],
        cfg.n_steps,
        cfg.bridge_samples,
        mc_seed(),
    )?;
    rows.push(pass_row(
        format!("{preset}/bridge_leak"),
        leak[0].1,
        0.0,
        1e-15,
    ));
    Ok(rows)
}

/// Rows for the attention preset: linearization checks at small
/// amplitudes, plus descriptive rows quantifying cross-region coupling.
fn attn_preset_rows(
    params: &VelocityFieldParams,
    bench: &LabBench,
    cfg: &LabConfig,
    mc_seed: &mut impl FnMut() -> u64,
) -> Result<Vec<LabRow>> {
    let preset = "attn";
    let mask = &bench.task.mask;
    let cond = &bench.task.condition;
    let d = mask.dim();
    let task_r = TaskReward {
        task: bench.task.clone(),
    };
    let pres_r = PresReward {
        task: bench.task.clone(),
    };
    let small_map = uniform_alpha(d, cfg.small_alpha);

    let dm_task = delta_method_check(
        params,
        &task_r,
        &bench.anchor,
        cond,
        &small_map,
        cfg.n_steps,
        cfg.n_samples,
        mc_seed(),
    )?;
    let dm_pres = delta_method_check(
        params,
        &pres_r,
        &bench.anchor,
        cond,
        &small_map,
        cfg.n_steps,
        cfg.n_samples,
        mc_seed(),
    )?;

    let jac = jacobian_wrt_noise(params, &bench.anchor, cond, cfg.n_steps)?;
    let kappa = cross_gain(&jac, mask)?;

    // Suppression at small amplitudes on a background-supported linear
    // reward: the prediction must include the edit-region leak term.
    let reward_off = LinearReward {
        weights: bench.w_off.clone(),
        offset: 0.0,
    };
    let a_off = sensitivity_vector(&jac, &bench.w_off);
    let (a_on_sq, a_off_sq) = region_norm_sq(&a_off, mask);
    let small_base = cfg.small_alpha * cfg.alpha_base_mc / cfg.sigma;
    let rdp_small_map = alpha_map(mask, cfg.small_alpha, small_base);
    let bg_global = mc_conditional_variance(
        params,
        &reward_off,
        &bench.anchor,
        cond,
        &uniform_alpha(d, cfg.small_alpha),
        cfg.n_steps,
        cfg.n_samples,
        mc_seed(),
    )?
    .variance;
    let bg_rdp = mc_conditional_variance(
        params,
        &reward_off,
        &bench.anchor,
        cond,
        &rdp_small_map,
        cfg.n_steps,
        cfg.n_samples,
        mc_seed(),
    )?
    .variance;
    let s2 = cfg.small_alpha * cfg.small_alpha;
    let predicted_ratio =
        (s2 * a_on_sq + small_base * small_base * a_off_sq) / (s2 * (a_on_sq + a_off_sq));

    // Coupling leak as a function of the edit amplitude (common random
    // numbers across the sweep).
    let scales = [cfg.alpha_edit / 2.0, cfg.alpha_edit];
    let leak = reward_bridge_error(
        params,
        &pres_r,
        &bench.anchor,
        cond,
        mask,
        &scales,
        cfg.n_steps,
        cfg.bridge_samples,
        mc_seed(),
    )?;

    let deltas = mc_reward_deltas(
        params,
        &task_r,
        &bench.anchor,
        cond,
        mask,
        cfg.alpha_edit,
        cfg.alpha_base_mc,
        cfg.n_steps,
        cfg.n_samples,
        mc_seed(),
    )?;
    let decomp = variance_decomposition(&deltas)?;

    Ok(vec![
        pass_row(
            format!("{preset}/delta_task_var"),
            dm_task.measured,
            dm_task.predicted,
            0.15,
        ),
        pass_row(
            format!("{preset}/delta_pres_var"),
            dm_pres.measured,
            dm_pres.predicted,
            0.15,
        ),
        info_row(format!("{preset}/cross_gain"), kappa, 0.0),
        pass_row(
            format!("{preset}/bg_suppression_small"),
            bg_rdp / bg_global,
            predicted_ratio,
            0.20,
        ),
        info_row(format!("{preset}/bridge_leak_half"), leak[0].1, 0.0),
        info_row(format!("{preset}/bridge_leak_full"), leak[1].1, 0.0),
        info_row(
            format!("{preset}/bridge_scaling"),
            if leak[0].1 > 0.0 {
                leak[1].1 / leak[0].1
            } else {
                0.0
            },
            2.0,
        ),
        LabRow {
            name: format!("{preset}/decomp_cov_bound"),
            measured: (2.0 * decomp.covariance).abs(),
            predicted: decomp.cs_bound,
            rel_gap: rel_gap((2.0 * decomp.covariance).abs(), decomp.cs_bound),
            status: if (2.0 * decomp.covariance).abs() <= decomp.cs_bound * (1.0 + 1e-9) {
                LabStatus::Pass
            } else {
                LabStatus::Fail
            },
        },
        info_row(
            format!("{preset}/decomp_additivity"),
            decomp.var_edit + decomp.var_base + 2.0 * decomp.covariance,
            decomp.total,
        ),
    ])
}

/// Runs the full verification battery on the default toy geometry and
/// three model presets. Deterministic for a fixed config.
pub fn run_variance_lab(cfg: &LabConfig) -> Result<LabReport> {
    cfg.validate()?;
    let geo = ModelGeometry::default_toy();
    let task = make_task(&geo, &MaskSpec::default_rect(), cfg.seed, 0)?;
    let mut anchor_rng = stream(child_seed(cfg.seed, 101), 0);
    let anchor = Latent::standard_normal(geo.grid, &mut anchor_rng);
    let bench = LabBench {
        w_on: region_unit_vector(&task.mask, true, child_seed(cfg.seed, 102))?,
        w_off: region_unit_vector(&task.mask, false, child_seed(cfg.seed, 103))?,
        anchor,
        task,
    };

    let mut counter = 0u64;
    let run_seed = child_seed(cfg.seed, 104);
    let mut mc_seed = move || {
        counter += 1;
        child_seed(run_seed, counter)
    };

    let identity = VelocityFieldParams::Linear(LinearFieldParams::zero(geo.grid));
    let local = VelocityFieldParams::Linear(LinearFieldParams::random_token_local(
        geo.grid,
        0.8,
        child_seed(cfg.seed, 105),
    ));
    let attn = VelocityFieldParams::Attn(AttnFieldParams::random(
        geo.grid,
        geo.d_txt,
        geo.n_layers,
        0.5,
        0.5,
        child_seed(cfg.seed, 106),
    )?);

    let mut rows = Vec::new();
    rows.extend(exact_preset_rows("identity", &identity, &bench, cfg, &mut mc_seed)?);
    rows.extend(exact_preset_rows("linear_local", &local, &bench, cfg, &mut mc_seed)?);
    rows.extend(attn_preset_rows(&attn, &bench, cfg, &mut mc_seed)?);
    Ok(LabReport { rows })
}
