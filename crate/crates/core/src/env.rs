//! Synthetic region-editing tasks with analytic rewards.
//!
//! A task bundles a source latent (what the background must preserve), a
//! non-degenerate token-aligned edit mask, a target pattern defined inside
//! the mask, and a text condition. The rewards are per-element mean squared
//! errors with flipped sign, one per region:
//!
//! ```text
//! R_edit(x) = -|| M (x - target) ||^2 / |M|
//! R_pres(x) = -|| (1-M) (x - source) ||^2 / |M^c|
//! ```
//!
//! Both are exactly quadratic, so their gradients are available in closed
//! form — the variance analysis leans on that. The target pattern is
//! constant per channel across the masked tokens, which keeps it inside
//! the function class the attention models can realize (their messages add
//! the same vector to every token, weighted by attention mass).

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{Condition, ModelGeometry};
use crate::latent::{check_same_grid, EditMask, Latent};
use crate::rng::{child_seed, stream};

/// How the edit mask of a task is laid out on the token grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MaskSpec {
    /// Axis-aligned rectangle of tokens on the square grid.
    Rect {
        row0: usize,
        col0: usize,
        rows: usize,
        cols: usize,
    },
    /// A random token subset covering roughly this fraction of the grid.
    RandomFraction { fraction: f64 },
}

impl MaskSpec {
    /// A centered 4x4 token rectangle, the default toy edit region.
    pub fn default_rect() -> Self {
        MaskSpec::Rect {
            row0: 2,
            col0: 2,
            rows: 4,
            cols: 4,
        }
    }
}

/// One synthetic editing task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditTask {
    /// Latent whose off-mask content must be preserved.
    pub source: Latent,
    pub mask: EditMask,
    /// Target pattern; only its on-mask elements matter (off-mask elements
    /// are zero by construction).
    pub target_inside: Latent,
    pub condition: Condition,
    pub task_id: u64,
    /// Seed all task content was derived from.
    pub seed: u64,
}

/// Substream tags for task content derivation.
const SOURCE_STREAM: u64 = 0;
const TARGET_STREAM: u64 = 1;
const COND_STREAM: u64 = 2;
const MASK_STREAM: u64 = 3;

/// Builds a task deterministically from a seed: seeded source latent,
/// seeded per-channel target pattern, seeded text condition, and the mask
/// given by `spec`. Degenerate masks (empty or full) are rejected here.
pub fn make_task(
    geometry: &ModelGeometry,
    spec: &MaskSpec,
    seed: u64,
    task_id: u64,
) -> Result<EditTask> {
    let grid = geometry.grid;
    let task_seed = child_seed(seed, task_id);
    let mask = build_mask(geometry, spec, task_seed)?;
    if mask.is_degenerate() {
        return Err(Error::invalid(
            "spec",
            "mask must leave both regions non-empty",
        ));
    }

    let mut source_rng = stream(task_seed, SOURCE_STREAM);
    let source = Latent::standard_normal(grid, &mut source_rng);

    // One value per channel, repeated across all masked tokens.
    let mut target_rng = stream(task_seed, TARGET_STREAM);
    let pattern: Vec<f64> = (0..grid.token_dim())
        .map(|_| target_rng.sample::<f64, _>(rand_distr::StandardNormal))
        .collect();
    let mut target = Array1::zeros(grid.dim());
    for d in 0..grid.dim() {
        if mask.is_on(d) {
            target[d] = pattern[d % grid.token_dim()];
        }
    }
    let target_inside = Latent::new(target, grid)?;

    let mut cond_rng = stream(task_seed, COND_STREAM);
    let condition =
        Condition::standard_normal(geometry.n_txt, geometry.d_txt, task_id, &mut cond_rng);

    Ok(EditTask {
        source,
        mask,
        target_inside,
        condition,
        task_id,
        seed,
    })
}

fn build_mask(geometry: &ModelGeometry, spec: &MaskSpec, task_seed: u64) -> Result<EditMask> {
    let grid = geometry.grid;
    match *spec {
        MaskSpec::Rect {
            row0,
            col0,
            rows,
            cols,
        } => {
            let side = grid.side()?;
            if rows == 0 || cols == 0 {
                return Err(Error::invalid("spec", "rectangle must be non-empty"));
            }
            if row0 + rows > side || col0 + cols > side {
                return Err(Error::invalid(
                    "spec",
                    format!(
                        "rectangle {row0}+{rows} x {col0}+{cols} exceeds the {side}x{side} grid"
                    ),
                ));
            }
            let token: Vec<bool> = (0..grid.n_tokens())
                .map(|u| {
                    let (r, c) = (u / side, u % side);
                    r >= row0 && r < row0 + rows && c >= col0 && c < col0 + cols
                })
                .collect();
            EditMask::from_token_mask(token, grid)
        }
        MaskSpec::RandomFraction { fraction } => {
            if !(fraction > 0.0 && fraction < 1.0) {
                return Err(Error::invalid(
                    "fraction",
                    "must lie strictly between 0 and 1",
                ));
            }
            let n = grid.n_tokens();
            let count = ((fraction * n as f64).round() as usize).clamp(1, n - 1);
            let mut rng = stream(task_seed, MASK_STREAM);
            let chosen = rand::seq::index::sample(&mut rng, n, count);
            let mut token = vec![false; n];
            for u in chosen {
                token[u] = true;
            }
            EditMask::from_token_mask(token, grid)
        }
    }
}

/// Edit-side reward: negated mean squared error against the target inside
/// the mask.
pub fn reward_edit(x0: &Latent, task: &EditTask) -> Result<f64> {
    check_same_grid(x0, &task.mask, "reward_edit")?;
    let m = &task.mask;
    let mut sq = 0.0;
    for d in 0..x0.dim() {
        if m.is_on(d) {
            let diff = x0.data()[d] - task.target_inside.data()[d];
            sq += diff * diff;
        }
    }
    Ok(-sq / m.on_count() as f64)
}

/// Preservation-side reward: negated mean squared error against the source
/// outside the mask.
pub fn reward_pres(x0: &Latent, task: &EditTask) -> Result<f64> {
    check_same_grid(x0, &task.mask, "reward_pres")?;
    let m = &task.mask;
    let mut sq = 0.0;
    for d in 0..x0.dim() {
        if !m.is_on(d) {
            let diff = x0.data()[d] - task.source.data()[d];
            sq += diff * diff;
        }
    }
    Ok(-sq / m.off_count() as f64)
}

/// Total task reward: edit and preservation terms together.
pub fn task_reward(x0: &Latent, task: &EditTask) -> Result<f64> {
    Ok(reward_edit(x0, task)? + reward_pres(x0, task)?)
}

/// Closed-form gradient of [`reward_edit`] with respect to `x0`.
pub fn reward_edit_grad(x0: &Latent, task: &EditTask) -> Result<Array1<f64>> {
    check_same_grid(x0, &task.mask, "reward_edit_grad")?;
    let m = &task.mask;
    let scale = -2.0 / m.on_count() as f64;
    let mut g = Array1::zeros(x0.dim());
    for d in 0..x0.dim() {
        if m.is_on(d) {
            g[d] = scale * (x0.data()[d] - task.target_inside.data()[d]);
        }
    }
    Ok(g)
}

/// Closed-form gradient of [`reward_pres`] with respect to `x0`.
pub fn reward_pres_grad(x0: &Latent, task: &EditTask) -> Result<Array1<f64>> {
    check_same_grid(x0, &task.mask, "reward_pres_grad")?;
    let m = &task.mask;
    let scale = -2.0 / m.off_count() as f64;
    let mut g = Array1::zeros(x0.dim());
    for d in 0..x0.dim() {
        if !m.is_on(d) {
            g[d] = scale * (x0.data()[d] - task.source.data()[d]);
        }
    }
    Ok(g)
}

/// Closed-form gradient of [`task_reward`].
pub fn task_reward_grad(x0: &Latent, task: &EditTask) -> Result<Array1<f64>> {
    Ok(reward_edit_grad(x0, task)? + &reward_pres_grad(x0, task)?)
}

/// The latent that exactly maximizes the task reward: target inside the
/// mask, source outside.
pub fn ideal_output(task: &EditTask) -> Latent {
    let grid = task.source.grid();
    let data = Array1::from_iter((0..grid.dim()).map(|d| {
        if task.mask.is_on(d) {
            task.target_inside.data()[d]
        } else {
            task.source.data()[d]
        }
    }));
    Latent::new(data, grid).expect("components are finite")
}
