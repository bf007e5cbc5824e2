//! Velocity fields, deterministic Euler rollouts, and hand-written
//! derivatives through the rollout.
//!
//! Integration runs backwards in time from `t = 1` (pure noise) to `t = 0`
//! (the decoded sample) with a fixed step `dt = 1 / n_steps`:
//!
//! ```text
//! x_{k+1} = x_k - dt * v(x_k, t_k, c),    t_k = 1 - k * dt
//! ```
//!
//! The rollout is a deterministic map from the initial noise to the final
//! state. Training needs the transposed-Jacobian action of this map on
//! cotangents injected at intermediate states ([`rollout_vjp`]); the
//! variance analysis needs the full Jacobian with respect to the initial
//! noise ([`jacobian_wrt_noise`]). Both reuse the per-field `vjp`/`jvp`
//! kernels and an explicit loop over Euler steps — no autodiff framework.

mod attn;
mod linear;

pub use attn::{AttnFieldGrad, AttnFieldParams, AttnLayer};
pub use linear::{LinearFieldGrad, LinearFieldParams};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{Latent, TokenGrid};

/// Shapes of the toy model family: latent grid plus text geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelGeometry {
    pub grid: TokenGrid,
    /// Number of text tokens in a condition.
    pub n_txt: usize,
    /// Width of each text token embedding.
    pub d_txt: usize,
    /// Number of attention layers.
    pub n_layers: usize,
}

impl ModelGeometry {
    pub fn new(grid: TokenGrid, n_txt: usize, d_txt: usize, n_layers: usize) -> Result<Self> {
        if n_txt == 0 {
            return Err(Error::invalid("n_txt", "must be positive"));
        }
        if d_txt == 0 {
            return Err(Error::invalid("d_txt", "must be positive"));
        }
        if n_layers == 0 {
            return Err(Error::invalid("n_layers", "must be positive"));
        }
        Ok(ModelGeometry {
            grid,
            n_txt,
            d_txt,
            n_layers,
        })
    }

    /// Default toy geometry: an 8x8 token grid with 2 channels per token
    /// (flat dimension 128), 4 text tokens of width 4, and 4 layers.
    pub fn default_toy() -> Self {
        ModelGeometry {
            grid: TokenGrid::new(64, 2).expect("static geometry"),
            n_txt: 4,
            d_txt: 4,
            n_layers: 4,
        }
    }
}

/// Conditioning input: a small set of text token embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    text_tokens: Array2<f64>,
    /// Identifier of the prompt/task this condition belongs to.
    pub id: u64,
}

impl Condition {
    pub fn new(text_tokens: Array2<f64>, id: u64) -> Result<Self> {
        if text_tokens.nrows() == 0 || text_tokens.ncols() == 0 {
            return Err(Error::EmptyInput("Condition text_tokens"));
        }
        if !text_tokens.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Condition::new".to_string(),
            });
        }
        Ok(Condition { text_tokens, id })
    }

    pub fn standard_normal(n_txt: usize, d_txt: usize, id: u64, rng: &mut impl Rng) -> Self {
        let text = Array2::from_shape_fn((n_txt, d_txt), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        Condition {
            text_tokens: text,
            id,
        }
    }

    pub fn text_tokens(&self) -> &Array2<f64> {
        &self.text_tokens
    }

    pub fn n_txt(&self) -> usize {
        self.text_tokens.nrows()
    }

    pub fn d_txt(&self) -> usize {
        self.text_tokens.ncols()
    }
}

/// Parameters of one of the two toy velocity fields.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model_kind", rename_all = "snake_case")]
pub enum VelocityFieldParams {
    Linear(LinearFieldParams),
    Attn(AttnFieldParams),
}

impl VelocityFieldParams {
    pub fn grid(&self) -> TokenGrid {
        match self {
            VelocityFieldParams::Linear(p) => p.grid(),
            VelocityFieldParams::Attn(p) => p.grid(),
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            VelocityFieldParams::Linear(p) => p.n_params(),
            VelocityFieldParams::Attn(p) => p.n_params(),
        }
    }

    fn check_inputs(&self, x: &Latent, cond: &Condition, context: &'static str) -> Result<()> {
        if x.grid() != self.grid() {
            return Err(Error::DimensionMismatch {
                context,
                expected: self.grid().dim(),
                actual: x.dim(),
            });
        }
        if let VelocityFieldParams::Attn(p) = self {
            if cond.d_txt() != p.d_txt() {
                return Err(Error::DimensionMismatch {
                    context,
                    expected: p.d_txt(),
                    actual: cond.d_txt(),
                });
            }
        }
        Ok(())
    }

    /// Evaluates the velocity and returns the per-layer attention matrices
    /// (empty for the linear field).
    pub fn velocity(
        &self,
        x: &Latent,
        t: f64,
        cond: &Condition,
    ) -> Result<(Array1<f64>, Vec<Array2<f64>>)> {
        self.check_inputs(x, cond, "velocity")?;
        match self {
            VelocityFieldParams::Linear(p) => Ok((p.velocity(x.data()), Vec::new())),
            VelocityFieldParams::Attn(p) => Ok(p.velocity(x.data(), t, cond.text_tokens())),
        }
    }

    /// Reverse-mode products of the velocity: for a cotangent `w` on the
    /// output, returns `(dv/dtheta)^T w` and `(dv/dx)^T w`.
    pub fn velocity_vjp(
        &self,
        x: &Latent,
        t: f64,
        cond: &Condition,
        w: &Array1<f64>,
    ) -> Result<(ParamGrad, Array1<f64>)> {
        self.check_inputs(x, cond, "velocity_vjp")?;
        if w.len() != x.dim() {
            return Err(Error::DimensionMismatch {
                context: "velocity_vjp cotangent",
                expected: x.dim(),
                actual: w.len(),
            });
        }
        match self {
            VelocityFieldParams::Linear(p) => {
                let (g, x_bar) = p.vjp(x.data(), w);
                Ok((ParamGrad::Linear(g), x_bar))
            }
            VelocityFieldParams::Attn(p) => {
                let (g, x_bar) = p.vjp(x.data(), t, cond.text_tokens(), w);
                Ok((ParamGrad::Attn(g), x_bar))
            }
        }
    }

    /// Forward-mode product `(dv/dx) dx`.
    pub fn velocity_jvp(
        &self,
        x: &Latent,
        t: f64,
        cond: &Condition,
        dx: &Array1<f64>,
    ) -> Result<Array1<f64>> {
        self.check_inputs(x, cond, "velocity_jvp")?;
        if dx.len() != x.dim() {
            return Err(Error::DimensionMismatch {
                context: "velocity_jvp tangent",
                expected: x.dim(),
                actual: dx.len(),
            });
        }
        match self {
            VelocityFieldParams::Linear(p) => Ok(p.jvp(dx)),
            VelocityFieldParams::Attn(p) => Ok(p.jvp(x.data(), t, cond.text_tokens(), dx)),
        }
    }

    /// Flattens all trainable parameters into one vector. The layout is
    /// stable: linear = matrix row-major then bias; attention = per layer
    /// (w_q, w_k, w_o row-major) then w_state.
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            VelocityFieldParams::Linear(p) => {
                p.matrix.iter().chain(p.bias.iter()).cloned().collect()
            }
            VelocityFieldParams::Attn(p) => {
                let mut out = Vec::with_capacity(self.n_params());
                for layer in &p.layers {
                    out.extend(layer.w_q.iter());
                    out.extend(layer.w_k.iter());
                    out.extend(layer.w_o.iter());
                }
                out.extend(p.w_state.iter());
                out
            }
        }
    }

    /// Rebuilds parameters with the same shapes as `self` from a flat
    /// vector produced by [`Self::to_flat`].
    pub fn from_flat(&self, flat: &[f64]) -> Result<VelocityFieldParams> {
        if flat.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                context: "from_flat",
                expected: self.n_params(),
                actual: flat.len(),
            });
        }
        let mut it = flat.iter().cloned();
        match self {
            VelocityFieldParams::Linear(p) => {
                let d = p.grid().dim();
                let matrix = Array2::from_shape_fn((d, d), |_| it.next().unwrap());
                let bias = Array1::from_iter((0..d).map(|_| it.next().unwrap()));
                Ok(VelocityFieldParams::Linear(LinearFieldParams::new(
                    matrix,
                    bias,
                    p.grid(),
                )?))
            }
            VelocityFieldParams::Attn(p) => {
                let dk = p.grid().token_dim();
                let dt = p.d_txt();
                let mut layers = Vec::with_capacity(p.layers.len());
                for _ in 0..p.layers.len() {
                    let w_q = Array2::from_shape_fn((dt, dk), |_| it.next().unwrap());
                    let w_k = Array2::from_shape_fn((dk, dk), |_| it.next().unwrap());
                    let w_o = Array2::from_shape_fn((dt, dk), |_| it.next().unwrap());
                    layers.push(AttnLayer { w_q, w_k, w_o });
                }
                let d = p.grid().dim();
                let w_state = Array2::from_shape_fn((d, d), |_| it.next().unwrap());
                Ok(VelocityFieldParams::Attn(AttnFieldParams::new(
                    layers,
                    w_state,
                    p.time_scale,
                    p.grid(),
                    dt,
                )?))
            }
        }
    }

    /// Gradient-ascent step: returns `theta + lr * grad`.
    pub fn step(&self, grad: &ParamGrad, lr: f64) -> Result<VelocityFieldParams> {
        match (self, grad) {
            (VelocityFieldParams::Linear(p), ParamGrad::Linear(g)) => {
                let mut matrix = p.matrix.clone();
                matrix.scaled_add(lr, &g.matrix);
                let mut bias = p.bias.clone();
                bias.scaled_add(lr, &g.bias);
                Ok(VelocityFieldParams::Linear(LinearFieldParams::new(
                    matrix,
                    bias,
                    p.grid(),
                )?))
            }
            (VelocityFieldParams::Attn(p), ParamGrad::Attn(g)) => {
                let mut layers = Vec::with_capacity(p.layers.len());
                if p.layers.len() != g.layers.len() {
                    return Err(Error::GroupMismatch(
                        "gradient layer count differs from parameters".to_string(),
                    ));
                }
                for (lp, lg) in p.layers.iter().zip(&g.layers) {
                    let mut w_q = lp.w_q.clone();
                    w_q.scaled_add(lr, &lg.w_q);
                    let mut w_k = lp.w_k.clone();
                    w_k.scaled_add(lr, &lg.w_k);
                    let mut w_o = lp.w_o.clone();
                    w_o.scaled_add(lr, &lg.w_o);
                    layers.push(AttnLayer { w_q, w_k, w_o });
                }
                let mut w_state = p.w_state.clone();
                w_state.scaled_add(lr, &g.w_state);
                Ok(VelocityFieldParams::Attn(AttnFieldParams::new(
                    layers,
                    w_state,
                    p.time_scale,
                    p.grid(),
                    p.d_txt(),
                )?))
            }
            _ => Err(Error::GroupMismatch(
                "gradient kind differs from parameter kind".to_string(),
            )),
        }
    }
}

/// Parameter-space gradient matching the layout of a
/// [`VelocityFieldParams`].
#[derive(Debug, Clone, PartialEq)]
pub enum ParamGrad {
    Linear(LinearFieldGrad),
    Attn(AttnFieldGrad),
}

impl ParamGrad {
    pub fn zeros_like(params: &VelocityFieldParams) -> Self {
        match params {
            VelocityFieldParams::Linear(p) => ParamGrad::Linear(LinearFieldGrad::zeros(p)),
            VelocityFieldParams::Attn(p) => ParamGrad::Attn(AttnFieldGrad::zeros(p)),
        }
    }

    /// `self += c * other`. Panics on mismatched layouts (internal misuse,
    /// not a user error).
    pub fn add_scaled(&mut self, other: &ParamGrad, c: f64) {
        match (self, other) {
            (ParamGrad::Linear(a), ParamGrad::Linear(b)) => a.add_scaled(b, c),
            (ParamGrad::Attn(a), ParamGrad::Attn(b)) => a.add_scaled(b, c),
            _ => panic!("mismatched gradient kinds"),
        }
    }

    pub fn scale(&mut self, c: f64) {
        match self {
            ParamGrad::Linear(g) => g.scale(c),
            ParamGrad::Attn(g) => g.scale(c),
        }
    }

    /// Builds a gradient with the layout of `params` from a flat vector in
    /// [`VelocityFieldParams::to_flat`] order.
    pub fn from_flat_like(params: &VelocityFieldParams, flat: &[f64]) -> Result<ParamGrad> {
        Ok(match params.from_flat(flat)? {
            VelocityFieldParams::Linear(p) => ParamGrad::Linear(LinearFieldGrad {
                matrix: p.matrix,
                bias: p.bias,
            }),
            VelocityFieldParams::Attn(p) => ParamGrad::Attn(AttnFieldGrad {
                layers: p.layers,
                w_state: p.w_state,
            }),
        })
    }

    /// Flat view in the same order as [`VelocityFieldParams::to_flat`].
    pub fn to_flat(&self) -> Vec<f64> {
        match self {
            ParamGrad::Linear(g) => g.matrix.iter().chain(g.bias.iter()).cloned().collect(),
            ParamGrad::Attn(g) => {
                let mut out = Vec::new();
                for layer in &g.layers {
                    out.extend(layer.w_q.iter());
                    out.extend(layer.w_k.iter());
                    out.extend(layer.w_o.iter());
                }
                out.extend(g.w_state.iter());
                out
            }
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.to_flat().iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// States and attention maps of one deterministic Euler rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    /// `n_steps + 1` states; index 0 is the initial noise, the last entry
    /// the decoded sample.
    pub states: Vec<Latent>,
    /// Per step, the attention matrices of each layer at the state the
    /// velocity was evaluated at (empty inner vectors for linear fields).
    pub attentions: Vec<Vec<Array2<f64>>>,
    pub dt: f64,
}

impl Trajectory {
    pub fn n_steps(&self) -> usize {
        self.states.len() - 1
    }

    /// The decoded sample `x(0)`.
    pub fn terminal(&self) -> &Latent {
        self.states.last().expect("trajectory has states")
    }

    /// Integration time attached to state `k` (1 at the noise end, 0 at
    /// the sample end).
    pub fn time_of_state(&self, k: usize) -> f64 {
        1.0 - k as f64 * self.dt
    }
}

/// Runs the deterministic Euler rollout from noise `eps` at `t = 1` down
/// to `t = 0` in `n_steps` uniform steps.
pub fn rollout(
    params: &VelocityFieldParams,
    eps: &Latent,
    cond: &Condition,
    n_steps: usize,
) -> Result<Trajectory> {
    if n_steps == 0 {
        return Err(Error::invalid("n_steps", "must be positive"));
    }
    let dt = 1.0 / n_steps as f64;
    let mut states = Vec::with_capacity(n_steps + 1);
    let mut attentions = Vec::with_capacity(n_steps);
    states.push(eps.clone());
    for k in 0..n_steps {
        let t_k = 1.0 - k as f64 * dt;
        let (v, attn) = params.velocity(&states[k], t_k, cond)?;
        let mut next = states[k].data().clone();
        next.scaled_add(-dt, &v);
        let next = Latent::new(next, eps.grid()).map_err(|_| Error::NonFinite {
            context: format!("rollout step {k}"),
        })?;
        states.push(next);
        attentions.push(attn);
    }
    Ok(Trajectory {
        states,
        attentions,
        dt,
    })
}

/// Reverse-mode sweep through a rollout.
///
/// `cotangents` is a list of `(state_index, weight)` pairs: each injects a
/// cotangent vector on the state with that index (1..=n_steps; a cotangent
/// on state 0 would only influence the gradient with respect to the noise,
/// which is not returned). The result is
/// `sum_j (d state_{k_j} / d theta)^T w_j`.
pub fn rollout_vjp(
    params: &VelocityFieldParams,
    eps: &Latent,
    cond: &Condition,
    n_steps: usize,
    cotangents: &[(usize, Array1<f64>)],
) -> Result<ParamGrad> {
    let traj = rollout(params, eps, cond, n_steps)?;
    rollout_vjp_with_trajectory(params, &traj, cond, cotangents)
}

/// Same as [`rollout_vjp`] but reuses an existing forward trajectory
/// (which must have been produced by `params` on the same condition).
pub fn rollout_vjp_with_trajectory(
    params: &VelocityFieldParams,
    traj: &Trajectory,
    cond: &Condition,
    cotangents: &[(usize, Array1<f64>)],
) -> Result<ParamGrad> {
    let n_steps = traj.n_steps();
    let d = params.grid().dim();
    for (idx, w) in cotangents {
        if *idx > n_steps {
            return Err(Error::invalid(
                "cotangents",
                format!("state index {idx} exceeds n_steps {n_steps}"),
            ));
        }
        if w.len() != d {
            return Err(Error::DimensionMismatch {
                context: "rollout_vjp cotangent",
                expected: d,
                actual: w.len(),
            });
        }
    }
    let dt = traj.dt;
    let mut grad = ParamGrad::zeros_like(params);
    let mut lambda = Array1::<f64>::zeros(d);
    for k in (0..n_steps).rev() {
        for (idx, w) in cotangents {
            if *idx == k + 1 {
                lambda += w;
            }
        }
        let t_k = traj.time_of_state(k);
        let (pg, x_bar) = params.velocity_vjp(&traj.states[k], t_k, cond, &lambda)?;
        grad.add_scaled(&pg, -dt);
        lambda.scaled_add(-dt, &x_bar);
    }
    Ok(grad)
}

/// Dense Jacobian of the rollout terminal state with respect to the
/// initial noise, computed by pushing one tangent per coordinate through
/// the Euler recursion.
pub fn jacobian_wrt_noise(
    params: &VelocityFieldParams,
    eps: &Latent,
    cond: &Condition,
    n_steps: usize,
) -> Result<Array2<f64>> {
    let traj = rollout(params, eps, cond, n_steps)?;
    let d = eps.dim();
    let dt = traj.dt;
    // Columns of the running Jacobian, starting from the identity.
    let mut cols: Vec<Array1<f64>> = (0..d)
        .map(|j| {
            let mut e = Array1::zeros(d);
            e[j] = 1.0;
            e
        })
        .collect();
    for k in 0..n_steps {
        let t_k = traj.time_of_state(k);
        for col in cols.iter_mut() {
            let dv = params.velocity_jvp(&traj.states[k], t_k, cond, col)?;
            col.scaled_add(-dt, &dv);
        }
    }
    let mut jac = Array2::zeros((d, d));
    for (j, col) in cols.iter().enumerate() {
        for i in 0..d {
            jac[[i, j]] = col[i];
        }
    }
    Ok(jac)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;
    use ndarray::arr2;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let diff: f64 = a
            .iter()
            .zip(b)
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            .sqrt();
        let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        diff / na.max(nb).max(1e-300)
    }

    fn small_attn() -> (VelocityFieldParams, Condition, Latent) {
        let grid = TokenGrid::new(4, 2).unwrap();
        let params = AttnFieldParams::random(grid, 3, 2, 0.8, 0.9, 42).unwrap();
        let mut rng = stream(43, 0);
        let cond = Condition::standard_normal(2, 3, 7, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        (VelocityFieldParams::Attn(params), cond, eps)
    }

    #[test]
    fn linear_velocity_hand_example() {
        let grid = TokenGrid::new(1, 2).unwrap();
        let p = LinearFieldParams::new(
            arr2(&[[0.0, 1.0], [1.0, 0.0]]),
            Array1::from_vec(vec![0.5, -0.5]),
            grid,
        )
        .unwrap();
        let params = VelocityFieldParams::Linear(p);
        let x = Latent::from_vec(vec![1.0, 2.0], grid).unwrap();
        let mut rng = stream(0, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let (v, attn) = params.velocity(&x, 0.7, &cond).unwrap();
        assert_eq!(v.to_vec(), vec![2.5, 0.5]);
        assert!(attn.is_empty());
    }

    #[test]
    fn attn_with_zero_scores_is_uniform() {
        // Zero query weights make every score 0, so attention is uniform
        // and each token receives mass n_txt / n_tokens.
        let grid = TokenGrid::new(4, 2).unwrap();
        let d_txt = 3;
        let zeros_q = Array2::zeros((d_txt, 2));
        let zeros_k = Array2::zeros((2, 2));
        let mut w_o = Array2::zeros((d_txt, 2));
        w_o[[0, 0]] = 1.0;
        let layer = AttnLayer {
            w_q: zeros_q,
            w_k: zeros_k,
            w_o,
        };
        let params = AttnFieldParams::new(
            vec![layer],
            Array2::zeros((8, 8)),
            1.0,
            grid,
            d_txt,
        )
        .unwrap();
        let mut rng = stream(1, 0);
        let cond = Condition::standard_normal(2, d_txt, 0, &mut rng);
        let x = Latent::standard_normal(grid, &mut rng);
        let (v, attn) = params.velocity(x.data(), 0.5, cond.text_tokens());
        for row in attn[0].rows() {
            for &a in row {
                assert!((a - 0.25).abs() < 1e-15);
            }
        }
        // Expected message: mass = 2/4 per token, o = mean text channel 0.
        let ebar0 = cond.text_tokens().column(0).sum() / 2.0;
        for u in 0..4 {
            assert!((v[2 * u] - 0.5 * ebar0).abs() < 1e-12);
            assert!((v[2 * u + 1] - 0.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (params, cond, eps) = small_attn();
        let (_, attn) = params.velocity(&eps, 0.3, &cond).unwrap();
        for mat in &attn {
            for row in mat.rows() {
                let s: f64 = row.sum();
                assert!((s - 1.0).abs() < 1e-12);
                assert!(row.iter().all(|&a| a >= 0.0));
            }
        }
    }

    #[test]
    fn rollout_scalar_closed_form() {
        // One scalar coordinate, v = x: two Euler half-steps give
        // (1 - 1/2)^2 = 0.25 exactly.
        let grid = TokenGrid::new(1, 1).unwrap();
        let p = LinearFieldParams::new(arr2(&[[1.0]]), Array1::zeros(1), grid).unwrap();
        let params = VelocityFieldParams::Linear(p);
        let eps = Latent::from_vec(vec![1.0], grid).unwrap();
        let mut rng = stream(2, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let traj = rollout(&params, &eps, &cond, 2).unwrap();
        assert_eq!(traj.terminal().data()[0], 0.25);
        assert_eq!(traj.n_steps(), 2);
        assert_eq!(traj.time_of_state(0), 1.0);
        assert_eq!(traj.time_of_state(2), 0.0);
    }

    #[test]
    fn rollout_rejects_zero_steps() {
        let (params, cond, eps) = small_attn();
        assert!(rollout(&params, &eps, &cond, 0).is_err());
    }

    #[test]
    fn rollout_records_attention_per_step() {
        let (params, cond, eps) = small_attn();
        let traj = rollout(&params, &eps, &cond, 3).unwrap();
        assert_eq!(traj.attentions.len(), 3);
        for step in &traj.attentions {
            assert_eq!(step.len(), 2);
            assert_eq!(step[0].shape(), [2, 4]);
        }
    }

    #[test]
    fn euler_steps_are_consistent_with_velocity() {
        let (params, cond, eps) = small_attn();
        let traj = rollout(&params, &eps, &cond, 5).unwrap();
        for k in 0..5 {
            let (v, _) = params
                .velocity(&traj.states[k], traj.time_of_state(k), &cond)
                .unwrap();
            let mut expect = traj.states[k].data().clone();
            expect.scaled_add(-traj.dt, &v);
            assert_eq!(expect.to_vec(), traj.states[k + 1].data().to_vec());
        }
    }

    #[test]
    fn rollout_vjp_zero_cotangents_gives_zero_grad() {
        let (params, cond, eps) = small_attn();
        let g = rollout_vjp(&params, &eps, &cond, 4, &[]).unwrap();
        assert!(g.to_flat().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rollout_vjp_linear_analytic() {
        // Scalar flow v = a x: terminal = (1 - dt a)^T eps, so
        // d terminal / d a = T (1 - dt a)^(T-1) (-dt) eps.
        let grid = TokenGrid::new(1, 1).unwrap();
        let a = 0.8;
        let p = LinearFieldParams::new(arr2(&[[a]]), Array1::zeros(1), grid).unwrap();
        let params = VelocityFieldParams::Linear(p);
        let eps_val = 1.7;
        let eps = Latent::from_vec(vec![eps_val], grid).unwrap();
        let mut rng = stream(3, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let t_steps = 3usize;
        let dt = 1.0 / t_steps as f64;
        let w = Array1::from_vec(vec![1.0]);
        let grad = rollout_vjp(&params, &eps, &cond, t_steps, &[(t_steps, w)]).unwrap();
        let flat = grad.to_flat();
        let expect_da =
            t_steps as f64 * (1.0 - dt * a).powi(t_steps as i32 - 1) * (-dt) * eps_val;
        assert!((flat[0] - expect_da).abs() < 1e-12, "da {} vs {}", flat[0], expect_da);
        // Bias gradient: d terminal / d b = sum over steps of products; just
        // check it against finite differences.
        let f = |params: &VelocityFieldParams| {
            rollout(params, &eps, &cond, t_steps).unwrap().terminal().data()[0]
        };
        let base = params.to_flat();
        let h = 1e-6;
        let mut plus = base.clone();
        plus[1] += h;
        let mut minus = base.clone();
        minus[1] -= h;
        let fd = (f(&params.from_flat(&plus).unwrap()) - f(&params.from_flat(&minus).unwrap()))
            / (2.0 * h);
        assert!((flat[1] - fd).abs() < 1e-8);
    }

    #[test]
    fn rollout_vjp_matches_finite_differences_on_attn() {
        let (params, cond, eps) = small_attn();
        let t_steps = 4usize;
        // Cotangents on an interior state and the terminal state.
        let mut rng = stream(5, 0);
        let w2 = Array1::from_shape_fn(8, |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let w4 = Array1::from_shape_fn(8, |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let cotangents = vec![(2usize, w2.clone()), (4usize, w4.clone())];
        let grad = rollout_vjp(&params, &eps, &cond, t_steps, &cotangents).unwrap();

        let objective = |p: &VelocityFieldParams| -> f64 {
            let traj = rollout(p, &eps, &cond, t_steps).unwrap();
            traj.states[2].data().dot(&w2) + traj.states[4].data().dot(&w4)
        };
        let base = params.to_flat();
        let h = 1e-5;
        let mut fd = Vec::with_capacity(base.len());
        for i in 0..base.len() {
            let mut plus = base.clone();
            plus[i] += h;
            let mut minus = base.clone();
            minus[i] -= h;
            fd.push(
                (objective(&params.from_flat(&plus).unwrap())
                    - objective(&params.from_flat(&minus).unwrap()))
                    / (2.0 * h),
            );
        }
        let err = rel_err(&grad.to_flat(), &fd);
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn jacobian_of_zero_field_is_identity() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let params = VelocityFieldParams::Linear(LinearFieldParams::zero(grid));
        let mut rng = stream(6, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        let j = jacobian_wrt_noise(&params, &eps, &cond, 4).unwrap();
        for i in 0..4 {
            for k in 0..4 {
                assert_eq!(j[[i, k]], if i == k { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn jacobian_of_linear_field_matches_euler_product() {
        let grid = TokenGrid::new(2, 2).unwrap();
        let p = LinearFieldParams::random_dense(grid, 0.9, 9);
        let a = p.matrix.clone();
        let params = VelocityFieldParams::Linear(p);
        let mut rng = stream(10, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        let t_steps = 5usize;
        let dt = 1.0 / t_steps as f64;
        let j = jacobian_wrt_noise(&params, &eps, &cond, t_steps).unwrap();
        // Closed form: (I - dt A)^T_steps, best computed the same way the
        // recursion does (matrix product), compared entrywise.
        let d = grid.dim();
        let step = Array2::from_shape_fn((d, d), |(i, k)| {
            (if i == k { 1.0 } else { 0.0 }) - dt * a[[i, k]]
        });
        let mut product = Array2::eye(d);
        for _ in 0..t_steps {
            product = step.dot(&product);
        }
        let err = rel_err(
            j.as_slice().unwrap(),
            product.as_slice().unwrap(),
        );
        assert!(err < 1e-13, "relative error {err}");
    }

    #[test]
    fn jacobian_matches_finite_differences_on_attn() {
        let (params, cond, eps) = small_attn();
        let t_steps = 3usize;
        let j = jacobian_wrt_noise(&params, &eps, &cond, t_steps).unwrap();
        let d = eps.dim();
        let h = 1e-6;
        for col in 0..d {
            let mut plus = eps.data().clone();
            plus[col] += h;
            let mut minus = eps.data().clone();
            minus[col] -= h;
            let xp = rollout(
                &params,
                &Latent::new(plus, eps.grid()).unwrap(),
                &cond,
                t_steps,
            )
            .unwrap();
            let xm = rollout(
                &params,
                &Latent::new(minus, eps.grid()).unwrap(),
                &cond,
                t_steps,
            )
            .unwrap();
            for row in 0..d {
                let fd = (xp.terminal().data()[row] - xm.terminal().data()[row]) / (2.0 * h);
                assert!(
                    (j[[row, col]] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "J[{row},{col}] = {} vs fd {fd}",
                    j[[row, col]]
                );
            }
        }
    }

    #[test]
    fn token_local_field_keeps_jacobian_block_diagonal() {
        let grid = TokenGrid::new(4, 2).unwrap();
        let p = LinearFieldParams::random_token_local(grid, 0.9, 12);
        let params = VelocityFieldParams::Linear(p);
        let mut rng = stream(13, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        let j = jacobian_wrt_noise(&params, &eps, &cond, 4).unwrap();
        for i in 0..8 {
            for k in 0..8 {
                if grid.token_of(i) != grid.token_of(k) {
                    assert_eq!(j[[i, k]], 0.0, "cross-token entry J[{i},{k}] leaked");
                }
            }
        }
    }

    #[test]
    fn params_flat_round_trip_and_step() {
        let (params, _, _) = small_attn();
        let flat = params.to_flat();
        assert_eq!(flat.len(), params.n_params());
        let back = params.from_flat(&flat).unwrap();
        assert_eq!(params, back);

        let ones = vec![1.0; flat.len()];
        let grad = ParamGrad::from_flat_like(&params, &ones).unwrap();
        let stepped = params.step(&grad, 0.25).unwrap();
        for (new, old) in stepped.to_flat().iter().zip(&flat) {
            assert!((new - old - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn params_serde_round_trip() {
        let (params, _, _) = small_attn();
        let json = serde_json::to_string(&params).unwrap();
        assert!(json.contains("\"model_kind\":\"attn\""));
        let back: VelocityFieldParams = serde_json::from_str(&json).unwrap();
        assert_eq!(params, back);
    }

    #[test]
    fn velocity_jvp_matches_directional_fd() {
        let (params, cond, eps) = small_attn();
        let mut rng = stream(14, 0);
        let dx = Array1::from_shape_fn(8, |_| rng.sample::<f64, _>(rand_distr::StandardNormal));
        let jv = params.velocity_jvp(&eps, 0.6, &cond, &dx).unwrap();
        let h = 1e-6;
        let mut plus = eps.data().clone();
        plus.scaled_add(h, &dx);
        let mut minus = eps.data().clone();
        minus.scaled_add(-h, &dx);
        let (vp, _) = params
            .velocity(&Latent::new(plus, eps.grid()).unwrap(), 0.6, &cond)
            .unwrap();
        let (vm, _) = params
            .velocity(&Latent::new(minus, eps.grid()).unwrap(), 0.6, &cond)
            .unwrap();
        let fd = (vp - vm) / (2.0 * h);
        let err = rel_err(jv.as_slice().unwrap(), fd.as_slice().unwrap());
        assert!(err < 1e-6, "relative error {err}");
    }
}
