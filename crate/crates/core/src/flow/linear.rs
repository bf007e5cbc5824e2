//! Linear velocity field `v(x, t, c) = A x + b`.
//!
//! The matrix can be made token-local (block-diagonal over tokens), which
//! gives an exactly region-local flow map — useful as a ground-truth case
//! for locality and variance checks. The bias is independent of time and
//! condition.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::TokenGrid;
use crate::rng::stream;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearFieldParams {
    pub matrix: Array2<f64>,
    pub bias: Array1<f64>,
    grid: TokenGrid,
}

impl LinearFieldParams {
    pub fn new(matrix: Array2<f64>, bias: Array1<f64>, grid: TokenGrid) -> Result<Self> {
        let d = grid.dim();
        if matrix.shape() != [d, d] {
            return Err(Error::DimensionMismatch {
                context: "LinearFieldParams matrix",
                expected: d,
                actual: matrix.shape()[0].max(matrix.shape()[1]),
            });
        }
        if bias.len() != d {
            return Err(Error::DimensionMismatch {
                context: "LinearFieldParams bias",
                expected: d,
                actual: bias.len(),
            });
        }
        if !matrix.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "LinearFieldParams::new".to_string(),
            });
        }
        Ok(LinearFieldParams { matrix, bias, grid })
    }

    /// The zero field: the rollout map is exactly the identity.
    pub fn zero(grid: TokenGrid) -> Self {
        let d = grid.dim();
        LinearFieldParams {
            matrix: Array2::zeros((d, d)),
            bias: Array1::zeros(d),
            grid,
        }
    }

    /// Dense random field with entries `N(0, scale^2 / dim)`.
    pub fn random_dense(grid: TokenGrid, scale: f64, seed: u64) -> Self {
        let d = grid.dim();
        let mut rng = stream(seed, 0);
        let sd = scale / (d as f64).sqrt();
        let matrix = Array2::from_shape_fn((d, d), |_| {
            sd * rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        LinearFieldParams {
            matrix,
            bias: Array1::zeros(d),
            grid,
        }
    }

    /// Token-local random field: `matrix[d][e]` is nonzero only when `d`
    /// and `e` belong to the same token, so the flow map never mixes
    /// tokens.
    pub fn random_token_local(grid: TokenGrid, scale: f64, seed: u64) -> Self {
        let d = grid.dim();
        let mut rng = stream(seed, 0);
        let sd = scale / (grid.token_dim() as f64).sqrt();
        let mut matrix = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                if grid.token_of(i) == grid.token_of(j) {
                    matrix[[i, j]] = sd * rng.sample::<f64, _>(rand_distr::StandardNormal);
                }
            }
        }
        LinearFieldParams {
            matrix,
            bias: Array1::zeros(d),
            grid,
        }
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn velocity(&self, x: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(x) + &self.bias
    }

    /// Reverse-mode products for cotangent `w` on the velocity output:
    /// returns the parameter gradient and the input cotangent `A^T w`.
    pub fn vjp(&self, x: &Array1<f64>, w: &Array1<f64>) -> (LinearFieldGrad, Array1<f64>) {
        let d = self.grid.dim();
        let mut g_matrix = Array2::zeros((d, d));
        for i in 0..d {
            for j in 0..d {
                g_matrix[[i, j]] = w[i] * x[j];
            }
        }
        let x_bar = self.matrix.t().dot(w);
        (
            LinearFieldGrad {
                matrix: g_matrix,
                bias: w.clone(),
            },
            x_bar,
        )
    }

    /// Forward-mode product: `A dx`.
    pub fn jvp(&self, dx: &Array1<f64>) -> Array1<f64> {
        self.matrix.dot(dx)
    }

    pub fn n_params(&self) -> usize {
        let d = self.grid.dim();
        d * d + d
    }
}

/// Gradient with the same layout as [`LinearFieldParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearFieldGrad {
    pub matrix: Array2<f64>,
    pub bias: Array1<f64>,
}

impl LinearFieldGrad {
    pub fn zeros(params: &LinearFieldParams) -> Self {
        let d = params.grid.dim();
        LinearFieldGrad {
            matrix: Array2::zeros((d, d)),
            bias: Array1::zeros(d),
        }
    }

    pub fn add_scaled(&mut self, other: &LinearFieldGrad, c: f64) {
        self.matrix.scaled_add(c, &other.matrix);
        self.bias.scaled_add(c, &other.bias);
    }

    pub fn scale(&mut self, c: f64) {
        self.matrix.mapv_inplace(|v| v * c);
        self.bias.mapv_inplace(|v| v * c);
    }
}
