//! Flat latent vectors, token grids, and binary edit masks.
//!
//! A latent is a flat `f64` vector of dimension `n_tokens * token_dim`.
//! Spatial structure enters only through the [`TokenGrid`] attached to it:
//! element `d` belongs to token `d / token_dim`. Edit masks are binary,
//! token-aligned indicator vectors; all region-restricted math in the crate
//! is phrased in terms of a mask and its complement.

use ndarray::Array1;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Grid interpretation of a flat latent: `n_tokens` spatial tokens with
/// `token_dim` channels each.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    n_tokens: usize,
    token_dim: usize,
}

impl TokenGrid {
    pub fn new(n_tokens: usize, token_dim: usize) -> Result<Self> {
        if n_tokens == 0 {
            return Err(Error::invalid("n_tokens", "must be positive"));
        }
        if token_dim == 0 {
            return Err(Error::invalid("token_dim", "must be positive"));
        }
        Ok(TokenGrid { n_tokens, token_dim })
    }

    pub fn n_tokens(&self) -> usize {
        self.n_tokens
    }

    pub fn token_dim(&self) -> usize {
        self.token_dim
    }

    /// Total flat dimension `n_tokens * token_dim`.
    pub fn dim(&self) -> usize {
        self.n_tokens * self.token_dim
    }

    /// Token index owning flat element `d`.
    pub fn token_of(&self, d: usize) -> usize {
        d / self.token_dim
    }

    /// Side length when the tokens form a square image grid.
    pub fn side(&self) -> Result<usize> {
        let side = (self.n_tokens as f64).sqrt().round() as usize;
        if side * side != self.n_tokens {
            return Err(Error::invalid(
                "n_tokens",
                format!("{} is not a perfect square", self.n_tokens),
            ));
        }
        Ok(side)
    }
}

/// A flat latent vector tagged with its grid interpretation.
///
/// Values are validated to be finite at construction; latents are immutable
/// afterwards, so downstream numeric code never has to re-check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Latent {
    data: Array1<f64>,
    grid: TokenGrid,
}

impl Latent {
    pub fn new(data: Array1<f64>, grid: TokenGrid) -> Result<Self> {
        if data.len() != grid.dim() {
            return Err(Error::DimensionMismatch {
                context: "Latent::new",
                expected: grid.dim(),
                actual: data.len(),
            });
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite {
                context: "Latent::new".to_string(),
            });
        }
        Ok(Latent { data, grid })
    }

    pub fn from_vec(values: Vec<f64>, grid: TokenGrid) -> Result<Self> {
        Latent::new(Array1::from_vec(values), grid)
    }

    pub fn zeros(grid: TokenGrid) -> Self {
        Latent {
            data: Array1::zeros(grid.dim()),
            grid,
        }
    }

    /// An i.i.d. standard-normal draw, consuming `dim` samples from `rng`.
    pub fn standard_normal(grid: TokenGrid, rng: &mut impl rand::Rng) -> Self {
        let data = Array1::from_iter(
            (0..grid.dim()).map(|_| rng.sample::<f64, _>(rand_distr::StandardNormal)),
        );
        Latent { data, grid }
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn data(&self) -> &Array1<f64> {
        &self.data
    }

    pub fn as_slice(&self) -> &[f64] {
        self.data.as_slice().expect("latent storage is contiguous")
    }

    /// Squared Euclidean norm of the whole vector.
    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Binary, token-aligned edit mask over a latent grid.
///
/// Stores both the elementwise 0/1 vector (for arithmetic) and the
/// per-token booleans (for attention-level quantities), plus cached counts
/// of on- and off-mask elements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EditMask {
    elem: Array1<f64>,
    token: Vec<bool>,
    grid: TokenGrid,
    on_count: usize,
}

impl EditMask {
    /// Builds a mask from per-token booleans, expanding each token to its
    /// `token_dim` elements.
    pub fn from_token_mask(token: Vec<bool>, grid: TokenGrid) -> Result<Self> {
        if token.len() != grid.n_tokens() {
            return Err(Error::DimensionMismatch {
                context: "EditMask::from_token_mask",
                expected: grid.n_tokens(),
                actual: token.len(),
            });
        }
        let mut elem = Array1::zeros(grid.dim());
        for (u, &inside) in token.iter().enumerate() {
            if inside {
                for c in 0..grid.token_dim() {
                    elem[u * grid.token_dim() + c] = 1.0;
                }
            }
        }
        let on_count = token.iter().filter(|&&b| b).count() * grid.token_dim();
        Ok(EditMask {
            elem,
            token,
            grid,
            on_count,
        })
    }

    /// Builds a mask from elementwise values, which must be exactly 0.0 or
    /// 1.0 and constant within each token.
    pub fn from_elements(elem: &[f64], grid: TokenGrid) -> Result<Self> {
        if elem.len() != grid.dim() {
            return Err(Error::DimensionMismatch {
                context: "EditMask::from_elements",
                expected: grid.dim(),
                actual: elem.len(),
            });
        }
        for (d, &v) in elem.iter().enumerate() {
            if v != 0.0 && v != 1.0 {
                return Err(Error::invalid(
                    "mask",
                    format!("element {d} is {v}, expected exactly 0.0 or 1.0"),
                ));
            }
        }
        let mut token = Vec::with_capacity(grid.n_tokens());
        for u in 0..grid.n_tokens() {
            let first = elem[u * grid.token_dim()];
            for c in 1..grid.token_dim() {
                if elem[u * grid.token_dim() + c] != first {
                    return Err(Error::invalid(
                        "mask",
                        format!("token {u} mixes 0 and 1 elements; masks must be token-aligned"),
                    ));
                }
            }
            token.push(first == 1.0);
        }
        EditMask::from_token_mask(token, grid)
    }

    pub fn grid(&self) -> TokenGrid {
        self.grid
    }

    pub fn dim(&self) -> usize {
        self.grid.dim()
    }

    /// Elementwise 0/1 indicator of the edit region.
    pub fn elem(&self) -> &Array1<f64> {
        &self.elem
    }

    /// Per-token membership flags.
    pub fn token(&self) -> &[bool] {
        &self.token
    }

    /// Number of elements inside the edit region, `|M|`.
    pub fn on_count(&self) -> usize {
        self.on_count
    }

    /// Number of elements outside the edit region, `|M^c|`.
    pub fn off_count(&self) -> usize {
        self.grid.dim() - self.on_count
    }

    /// Number of tokens inside the edit region.
    pub fn token_on_count(&self) -> usize {
        self.token.iter().filter(|&&b| b).count()
    }

    /// True when the mask selects element `d`.
    pub fn is_on(&self, d: usize) -> bool {
        self.elem[d] == 1.0
    }

    /// A mask is degenerate when either region is empty. Degenerate masks
    /// are still legal inputs for the masked arithmetic here; task
    /// construction rejects them separately.
    pub fn is_degenerate(&self) -> bool {
        self.on_count == 0 || self.on_count == self.grid.dim()
    }

    /// Flat indices inside the edit region.
    pub fn on_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&d| self.is_on(d)).collect()
    }

    /// Flat indices outside the edit region.
    pub fn off_indices(&self) -> Vec<usize> {
        (0..self.dim()).filter(|&d| !self.is_on(d)).collect()
    }
}

/// Split of a latent into its on-mask and off-mask parts.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionDecomposition {
    pub inside: Latent,
    pub outside: Latent,
}

/// Splits `x` into on-mask and off-mask components that sum back to `x`
/// exactly. Elements are copied, not scaled, so the reconstruction is exact
/// for every finite input.
pub fn decompose(x: &Latent, mask: &EditMask) -> Result<RegionDecomposition> {
    check_same_grid(x, mask, "decompose")?;
    let mut inside = Array1::zeros(x.dim());
    let mut outside = Array1::zeros(x.dim());
    for d in 0..x.dim() {
        if mask.is_on(d) {
            inside[d] = x.data()[d];
        } else {
            outside[d] = x.data()[d];
        }
    }
    Ok(RegionDecomposition {
        inside: Latent::new(inside, x.grid())?,
        outside: Latent::new(outside, x.grid())?,
    })
}

/// Squared norms of a latent restricted to each side of a mask.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionNorms {
    /// `|| M ⊙ x ||²`
    pub on_sq: f64,
    /// `|| (1 − M) ⊙ x ||²`
    pub off_sq: f64,
}

/// Squared Euclidean norms of `x` restricted to the edit region and its
/// complement.
pub fn region_norms(x: &Latent, mask: &EditMask) -> Result<RegionNorms> {
    check_same_grid(x, mask, "region_norms")?;
    let mut on_sq = 0.0;
    let mut off_sq = 0.0;
    for d in 0..x.dim() {
        let v = x.data()[d];
        if mask.is_on(d) {
            on_sq += v * v;
        } else {
            off_sq += v * v;
        }
    }
    Ok(RegionNorms { on_sq, off_sq })
}

pub(crate) fn check_same_grid(x: &Latent, mask: &EditMask, context: &'static str) -> Result<()> {
    if x.grid() != mask.grid() {
        return Err(Error::DimensionMismatch {
            context,
            expected: mask.dim(),
            actual: x.dim(),
        });
    }
    Ok(())
}
