//! Group-relative policy optimization for the toy flow editors.
//!
//! One update works on `groups_per_update` candidate groups. For each
//! group:
//!
//! 1. draw an anchor noise and build the candidate group under the
//!    configured perturbation scheme;
//! 2. roll every candidate out and score the terminals (task reward) and
//!    the attention maps (concentration reward);
//! 3. normalize each reward family across the configured scope, combine
//!    them with fixed weights, and standardize within the group to get
//!    advantages;
//! 4. subsample `anchors_per_group` perturbed candidates as anchors,
//!    record the surrogate policy at every interior rollout step under the
//!    sampling parameters ("old" policies);
//! 5. ascend the clipped surrogate objective, whose probability ratios
//!    come from re-evaluating the anchor states under the current
//!    parameters against the frozen old policies.
//!
//! The objective for one group is the mean over anchors, policy steps, and
//! candidates of `min(A_i * rho_i, A_i * clamp(rho_i, 1-eps, 1+eps))`; the
//! update gradient is the mean over groups. Everything is a pure function
//! of `(parameters, tasks, config, seed)`.

use ndarray::Array1;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::acd::{aggregate_acd, AttentionRecord};
use crate::env::{reward_edit, reward_pres, EditTask};
use crate::error::{Error, Result};
use crate::flow::{
    rollout, rollout_vjp_with_trajectory, ParamGrad, Trajectory, VelocityFieldParams,
};
use crate::latent::{check_same_grid, EditMask, Latent};
use crate::noise::{build_group, NoiseGroup, PerturbationScheme};
use crate::rng::{child_seed, stream};
use crate::surrogate::{
    candidate_policy, candidate_policy_euclidean, kernel_covariance_inverse_diag,
    logits_anchor_vjp, policy_ratio, Bandwidths, CandidateDistribution,
};

/// Guard added to standard deviations before dividing.
pub const STD_EPS: f64 = 1e-8;

/// Scope over which task/concentration rewards are normalized before
/// combination.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationScope {
    /// Pool all candidates of all groups in the update (the default).
    Minibatch,
    /// Normalize within each group separately.
    PerGroup,
}

/// Which kernel the surrogate candidate distribution uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SurrogateKind {
    /// Region-normalized masked distance (the default).
    RegionNormalized,
    /// Plain Euclidean distance baseline.
    Euclidean,
}

/// Hyper-parameters of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GrpoConfig {
    /// Candidates per group, `G`.
    pub group_size: usize,
    /// Anchor trajectories scored per group, `B`.
    pub anchors_per_group: usize,
    /// Euler steps per rollout during training.
    pub n_steps: usize,
    /// Clipping half-width for the probability ratios.
    pub eps_clip: f64,
    /// KL regularization weight; only the value 0 is implemented, the
    /// field exists so configs can state it explicitly.
    pub beta_kl: f64,
    pub learning_rate: f64,
    /// Weight of the normalized task reward in the combination.
    pub lambda_task: f64,
    /// Weight of the normalized concentration reward.
    pub lambda_acd: f64,
    pub groups_per_update: usize,
    pub scheme: PerturbationScheme,
    pub bandwidths: Bandwidths,
    /// Layers whose attention enters the concentration reward.
    pub selected_layers: Vec<usize>,
    pub normalization: NormalizationScope,
    pub surrogate: SurrogateKind,
    /// Take every `policy_stride`-th interior step for the surrogate
    /// policy (1 = all interior steps).
    pub policy_stride: usize,
    /// Index of the exact-reference candidate under the region-decoupled
    /// scheme.
    pub reference_index: usize,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        GrpoConfig {
            group_size: 8,
            anchors_per_group: 2,
            n_steps: 8,
            eps_clip: 0.2,
            beta_kl: 0.0,
            learning_rate: 3e-4,
            lambda_task: 0.5,
            lambda_acd: 0.5,
            groups_per_update: 4,
            scheme: PerturbationScheme::Rdp {
                alpha_edit: 0.3,
                alpha_base: 1e-4,
            },
            bandwidths: Bandwidths::new(0.9, 1.1).expect("static bandwidths"),
            selected_layers: vec![2, 3],
            normalization: NormalizationScope::Minibatch,
            surrogate: SurrogateKind::RegionNormalized,
            policy_stride: 1,
            reference_index: 0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.group_size < 2 {
            return Err(Error::invalid("group_size", "need at least 2 candidates"));
        }
        let perturbed = match self.scheme {
            PerturbationScheme::Rdp { .. } => self.group_size - 1,
            PerturbationScheme::Global { .. } => self.group_size,
        };
        if self.anchors_per_group == 0 || self.anchors_per_group > perturbed {
            return Err(Error::invalid(
                "anchors_per_group",
                format!(
                    "must lie in 1..={perturbed} (perturbed candidates under this scheme)"
                ),
            ));
        }
        if self.n_steps < 2 {
            return Err(Error::invalid(
                "n_steps",
                "need at least 2 steps so at least one interior state exists",
            ));
        }
        if !self.eps_clip.is_finite() || self.eps_clip <= 0.0 {
            return Err(Error::invalid("eps_clip", "must be finite and positive"));
        }
        if self.beta_kl != 0.0 {
            return Err(Error::invalid(
                "beta_kl",
                "KL regularization is not implemented; set it to 0",
            ));
        }
        if !self.learning_rate.is_finite() || self.learning_rate < 0.0 {
            return Err(Error::invalid(
                "learning_rate",
                "must be finite and non-negative",
            ));
        }
        if !self.lambda_task.is_finite() || self.lambda_task < 0.0 {
            return Err(Error::invalid("lambda_task", "must be non-negative"));
        }
        if !self.lambda_acd.is_finite() || self.lambda_acd < 0.0 {
            return Err(Error::invalid("lambda_acd", "must be non-negative"));
        }
        if self.groups_per_update == 0 {
            return Err(Error::invalid("groups_per_update", "must be positive"));
        }
        if self.policy_stride == 0 {
            return Err(Error::invalid("policy_stride", "must be positive"));
        }
        if self.reference_index >= self.group_size {
            return Err(Error::invalid(
                "reference_index",
                "must be a valid candidate index",
            ));
        }
        self.scheme.validate()?;
        // Deserialized configs bypass the Bandwidths constructor, so
        // re-check its domain here.
        Bandwidths::new(self.bandwidths.tau_edit(), self.bandwidths.tau_base())?;
        Ok(())
    }

    /// Interior rollout state indices the surrogate policy is evaluated
    /// at: `1, 1+stride, ...` up to `n_steps - 1`.
    pub fn policy_steps(&self) -> Vec<usize> {
        (1..self.n_steps).step_by(self.policy_stride).collect()
    }
}

/// Standardize to mean 0 / population std 1 (with the epsilon guard).
fn standardize(values: &[f64]) -> Vec<f64> {
    let n = values.len() as f64;
    if values.is_empty() {
        return Vec::new();
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    values.iter().map(|v| (v - mean) / (std + STD_EPS)).collect()
}

/// Reward normalization: `(r - mean) / (std + 1e-8)` with the population
/// standard deviation over the given values.
pub fn normalize_rewards(values: &[f64]) -> Vec<f64> {
    standardize(values)
}

/// Weighted combination of two already-normalized reward vectors.
pub fn combine_rewards(
    task_norm: &[f64],
    acd_norm: &[f64],
    lambda_task: f64,
    lambda_acd: f64,
) -> Result<Vec<f64>> {
    if task_norm.len() != acd_norm.len() {
        return Err(Error::DimensionMismatch {
            context: "combine_rewards",
            expected: task_norm.len(),
            actual: acd_norm.len(),
        });
    }
    Ok(task_norm
        .iter()
        .zip(acd_norm)
        .map(|(t, a)| lambda_task * t + lambda_acd * a)
        .collect())
}

/// Group-relative advantages: standardized combined rewards within one
/// group.
pub fn group_advantages(combined: &[f64]) -> Vec<f64> {
    standardize(combined)
}

/// Draws `count` distinct anchor indices from the perturbed candidates.
pub fn sample_anchors(
    perturbed: &[usize],
    count: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    if count == 0 || count > perturbed.len() {
        return Err(Error::invalid(
            "count",
            format!("must lie in 1..={}", perturbed.len()),
        ));
    }
    let picks = rand::seq::index::sample(rng, perturbed.len(), count);
    let mut out: Vec<usize> = picks.iter().map(|i| perturbed[i]).collect();
    out.sort_unstable();
    Ok(out)
}

/// Mean over entries and candidates of the clipped surrogate terms.
///
/// Each element of `ratios` holds the per-candidate probability ratios of
/// one (anchor, step) pair; `advantages` is shared across entries.
pub fn clipped_objective(
    ratios: &[Vec<f64>],
    advantages: &[f64],
    eps_clip: f64,
) -> Result<f64> {
    if ratios.is_empty() {
        return Err(Error::EmptyInput("ratios"));
    }
    let g = advantages.len();
    let mut total = 0.0;
    for entry in ratios {
        if entry.len() != g {
            return Err(Error::DimensionMismatch {
                context: "clipped_objective",
                expected: g,
                actual: entry.len(),
            });
        }
        for (i, &rho) in entry.iter().enumerate() {
            let a = advantages[i];
            let clipped = a * rho.clamp(1.0 - eps_clip, 1.0 + eps_clip);
            total += (a * rho).min(clipped);
        }
    }
    Ok(total / (ratios.len() * g) as f64)
}

/// Population standard deviation of the rewards within one group.
pub fn within_group_reward_std(rewards: &[f64]) -> f64 {
    if rewards.is_empty() {
        return 0.0;
    }
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n).sqrt()
}

/// Per-element mean squared drift of the background region away from the
/// source.
pub fn background_drift(x0: &Latent, source: &Latent, mask: &EditMask) -> Result<f64> {
    check_same_grid(x0, mask, "background_drift")?;
    check_same_grid(source, mask, "background_drift")?;
    if mask.off_count() == 0 {
        return Err(Error::invalid(
            "mask",
            "background drift needs a non-empty off-mask region",
        ));
    }
    let mut sq = 0.0;
    for d in 0..x0.dim() {
        if !mask.is_on(d) {
            let diff = x0.data()[d] - source.data()[d];
            sq += diff * diff;
        }
    }
    Ok(sq / mask.off_count() as f64)
}

/// Rollouts and raw rewards of one candidate group.
#[derive(Debug, Clone)]
pub struct GroupRollout {
    pub group: NoiseGroup,
    pub trajectories: Vec<Trajectory>,
    pub task_rewards: Vec<f64>,
    pub acd_rewards: Vec<f64>,
    /// Background drift of each candidate terminal against the source.
    pub drifts: Vec<f64>,
}

/// Substream tags inside a group seed: candidates use `0..G`, the anchor
/// noise uses `G`, anchor subsampling uses `G + 1`.
fn anchor_noise_stream(group_size: usize) -> u64 {
    group_size as u64
}

fn anchor_choice_stream(group_size: usize) -> u64 {
    group_size as u64 + 1
}

/// Draws the anchor noise, builds the candidate group, rolls every
/// candidate out, and scores terminals and attention maps.
pub fn rollout_group(
    params: &VelocityFieldParams,
    task: &EditTask,
    cfg: &GrpoConfig,
    group_seed: u64,
) -> Result<GroupRollout> {
    let grid = params.grid();
    let mut anchor_rng = stream(group_seed, anchor_noise_stream(cfg.group_size));
    let anchor = Latent::standard_normal(grid, &mut anchor_rng);
    let group = build_group(
        &anchor,
        &task.mask,
        cfg.scheme,
        cfg.group_size,
        cfg.reference_index,
        group_seed,
    )?;
    let mut trajectories = Vec::with_capacity(cfg.group_size);
    let mut task_rewards = Vec::with_capacity(cfg.group_size);
    let mut acd_rewards = Vec::with_capacity(cfg.group_size);
    let mut drifts = Vec::with_capacity(cfg.group_size);
    for cand in &group.candidates {
        let traj = rollout(params, cand, &task.condition, cfg.n_steps)?;
        let x0 = traj.terminal();
        task_rewards.push(reward_edit(x0, task)? + reward_pres(x0, task)?);
        drifts.push(background_drift(x0, &task.source, &task.mask)?);
        let acd = if traj.attentions.first().map_or(0, |s| s.len()) == 0 {
            // Linear models carry no attention; the concentration reward
            // degenerates to zero.
            0.0
        } else {
            let record = AttentionRecord::from_trajectory(&traj)?;
            aggregate_acd(&record, task.mask.token(), &cfg.selected_layers)?.aggregate
        };
        acd_rewards.push(acd);
        trajectories.push(traj);
    }
    Ok(GroupRollout {
        group,
        trajectories,
        task_rewards,
        acd_rewards,
        drifts,
    })
}

/// A group prepared for optimization: normalized rewards, advantages,
/// anchor subsample, and the frozen old policies.
#[derive(Debug, Clone)]
pub struct GroupBatch {
    pub rollout: GroupRollout,
    /// Raw weighted combination `lambda_task * task + lambda_acd * acd`
    /// (un-normalized; used for reporting).
    pub combined_raw: Vec<f64>,
    /// Weighted combination of the normalized rewards (the quantity whose
    /// group standardization gives the advantages).
    pub combined: Vec<f64>,
    pub advantages: Vec<f64>,
    pub anchors: Vec<usize>,
    pub policy_steps: Vec<usize>,
    /// `old_policies[anchor_pos][step_pos]`, computed under the sampling
    /// parameters.
    pub old_policies: Vec<Vec<CandidateDistribution>>,
}

fn surrogate_policy_at(
    cfg: &GrpoConfig,
    mask: &EditMask,
    candidate_states: &[&Latent],
    anchor_state: &Latent,
    anchor_index: usize,
    step_index: usize,
) -> Result<CandidateDistribution> {
    match cfg.surrogate {
        SurrogateKind::RegionNormalized => candidate_policy(
            candidate_states,
            anchor_state,
            mask,
            &cfg.bandwidths,
            anchor_index,
            step_index,
        ),
        SurrogateKind::Euclidean => {
            candidate_policy_euclidean(candidate_states, anchor_state, anchor_index, step_index)
        }
    }
}

fn surrogate_precision(cfg: &GrpoConfig, mask: &EditMask) -> Array1<f64> {
    match cfg.surrogate {
        SurrogateKind::RegionNormalized => kernel_covariance_inverse_diag(mask, &cfg.bandwidths),
        SurrogateKind::Euclidean => Array1::from_elem(mask.dim(), 1.0),
    }
}

/// Turns rolled-out groups into optimization-ready batches: reward
/// normalization over the configured scope, combination, per-group
/// advantages, anchor subsampling, and old-policy snapshots.
pub fn prepare_batches(
    rollouts: Vec<GroupRollout>,
    tasks: &[&EditTask],
    cfg: &GrpoConfig,
    group_seeds: &[u64],
) -> Result<Vec<GroupBatch>> {
    if rollouts.len() != tasks.len() || rollouts.len() != group_seeds.len() {
        return Err(Error::GroupMismatch(
            "rollouts, tasks, and seeds must align".to_string(),
        ));
    }
    // Normalization scope: pool across the update or stay within groups.
    let (task_norms, acd_norms): (Vec<Vec<f64>>, Vec<Vec<f64>>) = match cfg.normalization {
        NormalizationScope::PerGroup => rollouts
            .iter()
            .map(|r| {
                (
                    normalize_rewards(&r.task_rewards),
                    normalize_rewards(&r.acd_rewards),
                )
            })
            .unzip(),
        NormalizationScope::Minibatch => {
            let pooled_task: Vec<f64> = rollouts
                .iter()
                .flat_map(|r| r.task_rewards.iter().cloned())
                .collect();
            let pooled_acd: Vec<f64> = rollouts
                .iter()
                .flat_map(|r| r.acd_rewards.iter().cloned())
                .collect();
            let task_n = normalize_rewards(&pooled_task);
            let acd_n = normalize_rewards(&pooled_acd);
            let mut task_out = Vec::with_capacity(rollouts.len());
            let mut acd_out = Vec::with_capacity(rollouts.len());
            let mut offset = 0;
            for r in &rollouts {
                let g = r.task_rewards.len();
                task_out.push(task_n[offset..offset + g].to_vec());
                acd_out.push(acd_n[offset..offset + g].to_vec());
                offset += g;
            }
            (task_out, acd_out)
        }
    };

    let policy_steps = cfg.policy_steps();
    let mut batches = Vec::with_capacity(rollouts.len());
    for ((rollout, (task_norm, acd_norm)), (&task, &group_seed)) in rollouts
        .into_iter()
        .zip(task_norms.into_iter().zip(acd_norms))
        .zip(tasks.iter().zip(group_seeds))
    {
        let combined = combine_rewards(&task_norm, &acd_norm, cfg.lambda_task, cfg.lambda_acd)?;
        let combined_raw: Vec<f64> = rollout
            .task_rewards
            .iter()
            .zip(&rollout.acd_rewards)
            .map(|(t, a)| cfg.lambda_task * t + cfg.lambda_acd * a)
            .collect();
        let advantages = group_advantages(&combined);

        let mut rng = stream(group_seed, anchor_choice_stream(cfg.group_size));
        let perturbed = rollout.group.perturbed_indices();
        let anchors = sample_anchors(&perturbed, cfg.anchors_per_group, &mut rng)?;

        let mut old_policies = Vec::with_capacity(anchors.len());
        for &a in &anchors {
            let mut per_step = Vec::with_capacity(policy_steps.len());
            for &s in &policy_steps {
                let states: Vec<&Latent> =
                    rollout.trajectories.iter().map(|t| &t.states[s]).collect();
                let pol = surrogate_policy_at(
                    cfg,
                    &task.mask,
                    &states,
                    &rollout.trajectories[a].states[s],
                    a,
                    s,
                )?;
                per_step.push(pol);
            }
            old_policies.push(per_step);
        }

        batches.push(GroupBatch {
            rollout,
            combined_raw,
            combined,
            advantages,
            anchors,
            policy_steps: policy_steps.clone(),
            old_policies,
        });
    }
    Ok(batches)
}

/// Re-evaluates the surrogate policies of a batch's anchors under
/// `params`: the anchor trajectories are re-rolled, while the kernel
/// centers stay the frozen sampling-time candidate states.
pub fn anchor_policies(
    params: &VelocityFieldParams,
    batch: &GroupBatch,
    task: &EditTask,
    cfg: &GrpoConfig,
) -> Result<Vec<Vec<CandidateDistribution>>> {
    let mut out = Vec::with_capacity(batch.anchors.len());
    for &a in &batch.anchors {
        let traj = rollout(
            params,
            &batch.rollout.group.candidates[a],
            &task.condition,
            cfg.n_steps,
        )?;
        let mut per_step = Vec::with_capacity(batch.policy_steps.len());
        for &s in &batch.policy_steps {
            let states: Vec<&Latent> = batch
                .rollout
                .trajectories
                .iter()
                .map(|t| &t.states[s])
                .collect();
            per_step.push(surrogate_policy_at(
                cfg,
                &task.mask,
                &states,
                &traj.states[s],
                a,
                s,
            )?);
        }
        out.push(per_step);
    }
    Ok(out)
}

/// Clipped surrogate objective of one batch under `params` (0 at the
/// sampling parameters by construction).
pub fn group_objective(
    params: &VelocityFieldParams,
    batch: &GroupBatch,
    task: &EditTask,
    cfg: &GrpoConfig,
) -> Result<f64> {
    let new_policies = anchor_policies(params, batch, task, cfg)?;
    let mut entries = Vec::new();
    for (anchor_pos, per_step) in new_policies.iter().enumerate() {
        for (step_pos, new_pol) in per_step.iter().enumerate() {
            let old_pol = &batch.old_policies[anchor_pos][step_pos];
            let ratios: Vec<f64> = (0..cfg.group_size)
                .map(|i| policy_ratio(new_pol, old_pol, i))
                .collect::<Result<_>>()?;
            entries.push(ratios);
        }
    }
    // At the sampling parameters every ratio is 1, each term reduces to
    // A_i, and the standardized advantages average to zero — so the
    // objective starts at exactly 0 for every group.
    clipped_objective(&entries, &batch.advantages, cfg.eps_clip)
}

/// Gradient of [`group_objective`] with respect to the parameters, via one
/// reverse sweep per anchor trajectory.
pub fn group_objective_gradient(
    params: &VelocityFieldParams,
    batch: &GroupBatch,
    task: &EditTask,
    cfg: &GrpoConfig,
) -> Result<ParamGrad> {
    let precision = surrogate_precision(cfg, &task.mask);
    let n_entries = batch.anchors.len() * batch.policy_steps.len();
    let scale = 1.0 / (n_entries * cfg.group_size) as f64;
    let mut grad = ParamGrad::zeros_like(params);
    for (anchor_pos, &a) in batch.anchors.iter().enumerate() {
        let traj = rollout(
            params,
            &batch.rollout.group.candidates[a],
            &task.condition,
            cfg.n_steps,
        )?;
        let mut cotangents: Vec<(usize, Array1<f64>)> = Vec::new();
        for (step_pos, &s) in batch.policy_steps.iter().enumerate() {
            let states: Vec<&Latent> = batch
                .rollout
                .trajectories
                .iter()
                .map(|t| &t.states[s])
                .collect();
            let new_pol = surrogate_policy_at(cfg, &task.mask, &states, &traj.states[s], a, s)?;
            let old_pol = &batch.old_policies[anchor_pos][step_pos];

            // Per-candidate slope through the min/clip: the unclipped
            // branch contributes A_i * rho_i, the clipped branch is
            // constant in the parameters.
            let mut slope = vec![0.0; cfg.group_size];
            let mut slope_sum = 0.0;
            for (i, slope_i) in slope.iter_mut().enumerate() {
                let rho = policy_ratio(&new_pol, old_pol, i)?;
                let adv = batch.advantages[i];
                let raw = adv * rho;
                let clipped = adv * rho.clamp(1.0 - cfg.eps_clip, 1.0 + cfg.eps_clip);
                if raw <= clipped {
                    *slope_i = raw;
                    slope_sum += raw;
                }
            }
            // Pull back through the log-softmax: for logits z_j,
            // d/dz_j sum_i slope_i * log p_i = slope_j - p_j * sum_i slope_i.
            let mut zbar = vec![0.0; cfg.group_size];
            for j in 0..cfg.group_size {
                zbar[j] = scale * (slope[j] - new_pol.probs()[j] * slope_sum);
            }
            let w = logits_anchor_vjp(&states, &traj.states[s], &precision, &zbar);
            cotangents.push((s, w));
        }
        let anchor_grad =
            rollout_vjp_with_trajectory(params, &traj, &task.condition, &cotangents)?;
        grad.add_scaled(&anchor_grad, 1.0);
    }
    Ok(grad)
}

/// Per-group training diagnostics for one update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupMetrics {
    /// Mean over candidates of the raw weighted reward combination.
    pub mean_reward: f64,
    /// Within-group standard deviation of that combination.
    pub reward_std: f64,
    /// Mean background drift of the candidate terminals.
    pub bg_drift: f64,
    /// Mean concentration reward.
    pub mean_acd: f64,
    /// Group objective evaluated after the parameter step (0 before it).
    pub objective: f64,
}

/// Diagnostics of one full update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpdateMetrics {
    pub groups: Vec<GroupMetrics>,
    pub mean_reward: f64,
    pub mean_acd: f64,
    pub mean_bg_drift: f64,
    pub mean_objective: f64,
    pub grad_norm: f64,
}

/// One full GRPO update: rollout, score, optimize, and report.
///
/// Groups are assigned tasks round-robin. The returned parameters are the
/// single gradient-ascent step from the sampling parameters (one inner
/// epoch); metrics are computed per group.
pub fn train_step(
    params: &VelocityFieldParams,
    tasks: &[EditTask],
    cfg: &GrpoConfig,
    update_seed: u64,
) -> Result<(VelocityFieldParams, UpdateMetrics)> {
    cfg.validate()?;
    if tasks.is_empty() {
        return Err(Error::EmptyInput("tasks"));
    }
    let group_tasks: Vec<&EditTask> = (0..cfg.groups_per_update)
        .map(|g| &tasks[g % tasks.len()])
        .collect();
    let group_seeds: Vec<u64> = (0..cfg.groups_per_update)
        .map(|g| child_seed(update_seed, g as u64))
        .collect();

    // Rollout phase (parallel over groups, order-stable collection).
    let rollouts: Vec<GroupRollout> = group_seeds
        .par_iter()
        .zip(group_tasks.par_iter())
        .map(|(&seed, task)| rollout_group(params, task, cfg, seed))
        .collect::<Result<_>>()?;

    let batches = prepare_batches(rollouts, &group_tasks, cfg, &group_seeds)?;

    // Gradient phase. A non-finite group gradient aborts the update with
    // the offending group named, so the caller can dump diagnostics.
    let grads: Vec<ParamGrad> = batches
        .par_iter()
        .zip(group_tasks.par_iter())
        .enumerate()
        .map(|(g, (batch, task))| {
            let grad = group_objective_gradient(params, batch, task, cfg)?;
            if !grad.l2_norm().is_finite() {
                return Err(Error::NonFinite {
                    context: format!("objective gradient of group {g} (seed {})", group_seeds[g]),
                });
            }
            Ok(grad)
        })
        .collect::<Result<_>>()?;
    let mut grad = ParamGrad::zeros_like(params);
    for g in &grads {
        grad.add_scaled(g, 1.0 / cfg.groups_per_update as f64);
    }
    let new_params = params.step(&grad, cfg.learning_rate)?;

    // Post-step objectives, per group.
    let objectives: Vec<f64> = batches
        .par_iter()
        .zip(group_tasks.par_iter())
        .enumerate()
        .map(|(g, (batch, task))| {
            let obj = group_objective(&new_params, batch, task, cfg)?;
            if !obj.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("post-step objective of group {g} (seed {})", group_seeds[g]),
                });
            }
            Ok(obj)
        })
        .collect::<Result<_>>()?;

    let mut groups = Vec::with_capacity(batches.len());
    for (batch, objective) in batches.iter().zip(&objectives) {
        let g = cfg.group_size as f64;
        groups.push(GroupMetrics {
            mean_reward: batch.combined_raw.iter().sum::<f64>() / g,
            reward_std: within_group_reward_std(&batch.combined_raw),
            bg_drift: batch.rollout.drifts.iter().sum::<f64>() / g,
            mean_acd: batch.rollout.acd_rewards.iter().sum::<f64>() / g,
            objective: *objective,
        });
    }
    let n = groups.len() as f64;
    let metrics = UpdateMetrics {
        mean_reward: groups.iter().map(|g| g.mean_reward).sum::<f64>() / n,
        mean_acd: groups.iter().map(|g| g.mean_acd).sum::<f64>() / n,
        mean_bg_drift: groups.iter().map(|g| g.bg_drift).sum::<f64>() / n,
        mean_objective: groups.iter().map(|g| g.objective).sum::<f64>() / n,
        grad_norm: grad.l2_norm(),
        groups,
    };
    Ok((new_params, metrics))
}

/// Rolls one evaluation group and summarizes rewards and drift without any
/// optimization — the building block for scheme comparisons.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupEval {
    pub task_rewards: Vec<f64>,
    pub acd_rewards: Vec<f64>,
    pub combined_raw: Vec<f64>,
    pub drifts: Vec<f64>,
    pub task_reward_std: f64,
    pub mean_drift: f64,
    pub mean_combined: f64,
    pub mean_acd: f64,
}

pub fn evaluate_group(
    params: &VelocityFieldParams,
    task: &EditTask,
    cfg: &GrpoConfig,
    group_seed: u64,
) -> Result<GroupEval> {
    let r = rollout_group(params, task, cfg, group_seed)?;
    let combined_raw: Vec<f64> = r
        .task_rewards
        .iter()
        .zip(&r.acd_rewards)
        .map(|(t, a)| cfg.lambda_task * t + cfg.lambda_acd * a)
        .collect();
    let g = cfg.group_size as f64;
    Ok(GroupEval {
        task_reward_std: within_group_reward_std(&r.task_rewards),
        mean_drift: r.drifts.iter().sum::<f64>() / g,
        mean_combined: combined_raw.iter().sum::<f64>() / g,
        mean_acd: r.acd_rewards.iter().sum::<f64>() / g,
        task_rewards: r.task_rewards,
        acd_rewards: r.acd_rewards,
        combined_raw,
        drifts: r.drifts,
    })
}
