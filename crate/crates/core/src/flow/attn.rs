//! A small cross-attention velocity field.
//!
//! The latent is viewed as `n_tokens` image tokens of width `token_dim`.
//! Each layer computes text-to-image attention: queries come from the text
//! tokens, keys from the image tokens, and every image token `u` receives
//! the shared text message weighted by the total attention mass it
//! attracts. A time-scaled linear term in the state is added on top:
//!
//! ```text
//! v(x, t, c) = time_scale * t * (W_state x) + flatten(sum_l m^l)
//! m^l(u, :)  = mass_l(u) * o_l,   mass_l(u) = sum_v A_l(v, u)
//! A_l        = row_softmax(E W_q^l (X W_k^l)^T / sqrt(token_dim))
//! o_l        = mean_row(E) W_o^l
//! ```
//!
//! Queries and messages depend only on the text condition, so the state
//! enters attention exclusively through the keys. Both derivative modes
//! (reverse for training, forward for Jacobian columns) are written out by
//! hand below.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::TokenGrid;
use crate::rng::stream;

/// Per-layer projection weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnLayer {
    /// `d_txt x token_dim`, text-to-query projection.
    pub w_q: Array2<f64>,
    /// `token_dim x token_dim`, image-token-to-key projection.
    pub w_k: Array2<f64>,
    /// `d_txt x token_dim`, text-to-message projection.
    pub w_o: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnFieldParams {
    pub layers: Vec<AttnLayer>,
    /// `dim x dim` linear state term.
    pub w_state: Array2<f64>,
    /// Scalar in front of the `t * W_state x` term; fixed, not trained.
    pub time_scale: f64,
    grid: TokenGrid,
    d_txt: usize,
}

impl AttnFieldParams {
    pub fn new(
        layers: Vec<AttnLayer>,
        w_state: Array2<f64>,
        time_scale: f64,
        grid: TokenGrid,
        d_txt: usize,
    ) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("AttnFieldParams layers"));
        }
        if d_txt == 0 {
            return Err(Error::invalid("d_txt", "must be positive"));
        }
        if !time_scale.is_finite() {
            return Err(Error::NonFinite {
                context: "AttnFieldParams time_scale".to_string(),
            });
        }
        let dk = grid.token_dim();
        for (l, layer) in layers.iter().enumerate() {
            if layer.w_q.shape() != [d_txt, dk]
                || layer.w_k.shape() != [dk, dk]
                || layer.w_o.shape() != [d_txt, dk]
            {
                return Err(Error::invalid(
                    "layers",
                    format!("layer {l} weight shapes do not match the geometry"),
                ));
            }
            let finite = layer
                .w_q
                .iter()
                .chain(layer.w_k.iter())
                .chain(layer.w_o.iter())
                .all(|v| v.is_finite());
            if !finite {
                return Err(Error::NonFinite {
                    context: format!("AttnFieldParams layer {l}"),
                });
            }
        }
        let d = grid.dim();
        if w_state.shape() != [d, d] {
            return Err(Error::DimensionMismatch {
                context: "AttnFieldParams w_state",
                expected: d,
                actual: w_state.shape()[0].max(w_state.shape()[1]),
            });
        }
        if !w_state.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "AttnFieldParams w_state".to_string(),
            });
        }
        Ok(AttnFieldParams {
            layers,
            w_state,
            time_scale,
            grid,
            d_txt,
        })
    }

    /// Random initialization with `N(0, scale^2 / fan_in)` entries for each
    /// projection and `N(0, state_scale^2 / dim)` for the state term.
    pub fn random(
        grid: TokenGrid,
        d_txt: usize,
        n_layers: usize,
        state_scale: f64,
        attn_scale: f64,
        seed: u64,
    ) -> Result<Self> {
        let dk = grid.token_dim();
        let d = grid.dim();
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let mut rng = stream(seed, l as u64);
            let sq = attn_scale / (d_txt as f64).sqrt();
            let sk = attn_scale / (dk as f64).sqrt();
            let mut normal =
                |sd: f64| -> f64 { sd * rng.sample::<f64, _>(rand_distr::StandardNormal) };
            let w_q = Array2::from_shape_fn((d_txt, dk), |_| normal(sq));
            let w_k = Array2::from_shape_fn((dk, dk), |_| normal(sk));
            let w_o = Array2::from_shape_fn((d_txt, dk), |_| normal(sq));
            layers.push(AttnLayer { w_q, w_k, w_o });
        }
        let mut rng = stream(seed, n_layers as u64);
        let ss = state_scale / (d as f64).sqrt();
        let w_state =
            Array2::from_shape_fn((d, d), |_| ss * rng.sample::<f64, _>(rand_distr::StandardNormal));
        AttnFieldParams::new(layers, w_state, 1.0, grid, d_txt)
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn d_txt(&self) -> usize {
        self.d_txt
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn n_params(&self) -> usize {
        let dk = self.grid.token_dim();
        let per_layer = self.d_txt * dk + dk * dk + self.d_txt * dk;
        self.layers.len() * per_layer + self.grid.dim() * self.grid.dim()
    }

    fn tokens<'a>(&self, x: &'a Array1<f64>) -> ArrayView2<'a, f64> {
        x.view()
            .into_shape_with_order((self.grid.n_tokens(), self.grid.token_dim()))
            .expect("latent length matches grid")
    }

    /// Forward pass: velocity plus the per-layer attention matrices
    /// (`n_txt x n_tokens`, rows normalized).
    pub fn velocity(
        &self,
        x: &Array1<f64>,
        t: f64,
        text: &Array2<f64>,
    ) -> (Array1<f64>, Vec<Array2<f64>>) {
        let grid = self.grid;
        let xt = self.tokens(x);
        let ebar = text.mean_axis(Axis(0)).expect("text has rows");
        let scale = 1.0 / (grid.token_dim() as f64).sqrt();

        let mut messages = Array2::<f64>::zeros((grid.n_tokens(), grid.token_dim()));
        let mut attn_mats = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let q = text.dot(&layer.w_q);
            let k = xt.dot(&layer.w_k);
            let scores = q.dot(&k.t()) * scale;
            let attn = row_softmax(&scores);
            let mass = attn.sum_axis(Axis(0));
            let o = ebar.dot(&layer.w_o);
            for u in 0..grid.n_tokens() {
                for c in 0..grid.token_dim() {
                    messages[[u, c]] += mass[u] * o[c];
                }
            }
            attn_mats.push(attn);
        }

        let mut v = self.w_state.dot(x);
        v.mapv_inplace(|e| e * self.time_scale * t);
        let flat = messages
            .into_shape_with_order(grid.dim())
            .expect("message grid is contiguous");
        (v + &flat, attn_mats)
    }

    /// Reverse-mode products for cotangent `w` on the velocity output.
    pub fn vjp(
        &self,
        x: &Array1<f64>,
        t: f64,
        text: &Array2<f64>,
        w: &Array1<f64>,
    ) -> (AttnFieldGrad, Array1<f64>) {
        let grid = self.grid;
        let xt = self.tokens(x);
        let ebar = text.mean_axis(Axis(0)).expect("text has rows");
        let scale = 1.0 / (grid.token_dim() as f64).sqrt();
        let w_tok = w
            .view()
            .into_shape_with_order((grid.n_tokens(), grid.token_dim()))
            .expect("cotangent length matches grid");

        // State term: v_state = time_scale * t * W_state x.
        let ts = self.time_scale * t;
        let mut g_state = Array2::zeros((grid.dim(), grid.dim()));
        for i in 0..grid.dim() {
            for j in 0..grid.dim() {
                g_state[[i, j]] = ts * w[i] * x[j];
            }
        }
        let mut x_bar = self.w_state.t().dot(w);
        x_bar.mapv_inplace(|e| e * ts);

        let mut g_layers = Vec::with_capacity(self.layers.len());
        let mut xt_bar = Array2::<f64>::zeros((grid.n_tokens(), grid.token_dim()));
        for layer in &self.layers {
            // Recompute the forward intermediates for this layer.
            let q = text.dot(&layer.w_q);
            let k = xt.dot(&layer.w_k);
            let scores = q.dot(&k.t()) * scale;
            let attn = row_softmax(&scores);
            let mass = attn.sum_axis(Axis(0));
            let o = ebar.dot(&layer.w_o);

            // Message path: m(u, c) = mass(u) * o(c).
            let mass_bar =
                Array1::from_iter((0..grid.n_tokens()).map(|u| w_tok.row(u).dot(&o)));
            let mut o_bar = Array1::<f64>::zeros(grid.token_dim());
            for u in 0..grid.n_tokens() {
                o_bar.scaled_add(mass[u], &w_tok.row(u));
            }
            let g_w_o = outer(&ebar.view(), &o_bar.view());

            // mass(u) = sum_v attn(v, u): the attention cotangent is
            // mass_bar broadcast down the columns.
            let mut attn_bar = Array2::<f64>::zeros(attn.raw_dim());
            for v in 0..attn.nrows() {
                for u in 0..attn.ncols() {
                    attn_bar[[v, u]] = mass_bar[u];
                }
            }
            let scores_bar = row_softmax_vjp(&attn, &attn_bar);

            // scores = Q K^T * scale.
            let q_bar = scores_bar.dot(&k) * scale;
            let k_bar = scores_bar.t().dot(&q) * scale;

            let g_w_q = text.t().dot(&q_bar);
            let g_w_k = xt.t().dot(&k_bar);
            xt_bar = xt_bar + k_bar.dot(&layer.w_k.t());

            g_layers.push(AttnLayer {
                w_q: g_w_q,
                w_k: g_w_k,
                w_o: g_w_o,
            });
        }

        let xt_bar_flat = xt_bar
            .into_shape_with_order(grid.dim())
            .expect("token grid is contiguous");
        (
            AttnFieldGrad {
                layers: g_layers,
                w_state: g_state,
            },
            x_bar + &xt_bar_flat,
        )
    }

    /// Forward-mode product: directional derivative of the velocity in
    /// state direction `dx`.
    pub fn jvp(&self, x: &Array1<f64>, t: f64, text: &Array2<f64>, dx: &Array1<f64>) -> Array1<f64> {
        let grid = self.grid;
        let xt = self.tokens(x);
        let dxt = dx
            .view()
            .into_shape_with_order((grid.n_tokens(), grid.token_dim()))
            .expect("tangent length matches grid");
        let ebar = text.mean_axis(Axis(0)).expect("text has rows");
        let scale = 1.0 / (grid.token_dim() as f64).sqrt();

        let mut d_messages = Array2::<f64>::zeros((grid.n_tokens(), grid.token_dim()));
        for layer in &self.layers {
            let q = text.dot(&layer.w_q);
            let k = xt.dot(&layer.w_k);
            let scores = q.dot(&k.t()) * scale;
            let attn = row_softmax(&scores);
            let o = ebar.dot(&layer.w_o);

            let dk = dxt.dot(&layer.w_k);
            let dscores = q.dot(&dk.t()) * scale;
            let dattn = row_softmax_jvp(&attn, &dscores);
            let dmass = dattn.sum_axis(Axis(0));
            for u in 0..grid.n_tokens() {
                for c in 0..grid.token_dim() {
                    d_messages[[u, c]] += dmass[u] * o[c];
                }
            }
        }

        let mut dv = self.w_state.dot(dx);
        dv.mapv_inplace(|e| e * self.time_scale * t);
        let flat = d_messages
            .into_shape_with_order(grid.dim())
            .expect("message grid is contiguous");
        dv + &flat
    }
}

/// Gradient with the same layout as [`AttnFieldParams`] (the fixed
/// `time_scale` has no gradient slot).
#[derive(Debug, Clone, PartialEq)]
pub struct AttnFieldGrad {
    pub layers: Vec<AttnLayer>,
    pub w_state: Array2<f64>,
}

impl AttnFieldGrad {
    pub fn zeros(params: &AttnFieldParams) -> Self {
        let dk = params.grid.token_dim();
        let layers = params
            .layers
            .iter()
            .map(|_| AttnLayer {
                w_q: Array2::zeros((params.d_txt, dk)),
                w_k: Array2::zeros((dk, dk)),
                w_o: Array2::zeros((params.d_txt, dk)),
            })
            .collect();
        AttnFieldGrad {
            layers,
            w_state: Array2::zeros((params.grid.dim(), params.grid.dim())),
        }
    }

    pub fn add_scaled(&mut self, other: &AttnFieldGrad, c: f64) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            mine.w_q.scaled_add(c, &theirs.w_q);
            mine.w_k.scaled_add(c, &theirs.w_k);
            mine.w_o.scaled_add(c, &theirs.w_o);
        }
        self.w_state.scaled_add(c, &other.w_state);
    }

    pub fn scale(&mut self, c: f64) {
        for layer in &mut self.layers {
            layer.w_q.mapv_inplace(|v| v * c);
            layer.w_k.mapv_inplace(|v| v * c);
            layer.w_o.mapv_inplace(|v| v * c);
        }
        self.w_state.mapv_inplace(|v| v * c);
    }
}

fn outer(a: &ArrayView1<f64>, b: &ArrayView1<f64>) -> Array2<f64> {
    Array2::from_shape_fn((a.len(), b.len()), |(i, j)| a[i] * b[j])
}

/// Row-wise softmax with max subtraction for stability.
pub(crate) fn row_softmax(scores: &Array2<f64>) -> Array2<f64> {
    let mut out = scores.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|s| (s - max).exp());
        let z: f64 = row.sum();
        row.mapv_inplace(|e| e / z);
    }
    out
}

/// Reverse-mode softmax per row: given the output `attn` and a cotangent on
/// it, returns the cotangent on the scores.
fn row_softmax_vjp(attn: &Array2<f64>, attn_bar: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(attn.raw_dim());
    for v in 0..attn.nrows() {
        let dot: f64 = attn
            .row(v)
            .iter()
            .zip(attn_bar.row(v).iter())
            .map(|(a, b)| a * b)
            .sum();
        for u in 0..attn.ncols() {
            out[[v, u]] = attn[[v, u]] * (attn_bar[[v, u]] - dot);
        }
    }
    out
}

/// Forward-mode softmax per row: given the output `attn` and a tangent on
/// the scores, returns the tangent on the output.
fn row_softmax_jvp(attn: &Array2<f64>, dscores: &Array2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(attn.raw_dim());
    for v in 0..attn.nrows() {
        let dot: f64 = attn
            .row(v)
            .iter()
            .zip(dscores.row(v).iter())
            .map(|(a, d)| a * d)
            .sum();
        for u in 0..attn.ncols() {
            out[[v, u]] = attn[[v, u]] * (dscores[[v, u]] - dot);
        }
    }
    out
}
