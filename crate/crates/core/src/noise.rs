//! Candidate noise groups around a shared anchor draw.
//!
//! A group holds one anchor noise vector `eps*` and `G` candidate vectors
//! derived from it. Two schemes are supported:
//!
//! * **Region-decoupled** — candidate `i0` is the anchor itself (the exact
//!   reference), and every other candidate mixes fresh Gaussian noise into
//!   the anchor coordinate-wise with amplitude `alpha_edit` inside the edit
//!   mask and `alpha_base` outside:
//!   `eps_d = sqrt(1 - alpha_d^2) * eps*_d + alpha_d * delta_d`.
//! * **Global resampling** — every candidate mixes with a single amplitude
//!   `sigma` on all coordinates and there is no exact reference.
//!
//! The `sqrt(1 - a^2)` mixing keeps every candidate exactly standard normal
//! marginally, while the covariance of the deviation from the anchor is
//! `Diag(alpha^2)` (or `sigma^2 I`), which is what makes the local scheme's
//! background variance small.

use ndarray::Array1;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::latent::{check_same_grid, EditMask, Latent};
use crate::rng::stream;

/// How candidate noises are generated from the anchor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PerturbationScheme {
    /// Region-decoupled perturbation with separate amplitudes for the edit
    /// region and the background.
    Rdp { alpha_edit: f64, alpha_base: f64 },
    /// Uniform mixing on all coordinates; the baseline scheme.
    Global { sigma: f64 },
}

impl PerturbationScheme {
    pub fn rdp(alpha_edit: f64, alpha_base: f64) -> Result<Self> {
        let s = PerturbationScheme::Rdp {
            alpha_edit,
            alpha_base,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn global(sigma: f64) -> Result<Self> {
        let s = PerturbationScheme::Global { sigma };
        s.validate()?;
        Ok(s)
    }

    /// Checks amplitude domains: `0 <= alpha_base <= alpha_edit <= 1` and
    /// `0 <= sigma <= 1`.
    pub fn validate(&self) -> Result<()> {
        match *self {
            PerturbationScheme::Rdp {
                alpha_edit,
                alpha_base,
            } => {
                if !alpha_edit.is_finite() || !(0.0..=1.0).contains(&alpha_edit) {
                    return Err(Error::invalid("alpha_edit", "must lie in [0, 1]"));
                }
                if !alpha_base.is_finite() || !(0.0..=1.0).contains(&alpha_base) {
                    return Err(Error::invalid("alpha_base", "must lie in [0, 1]"));
                }
                if alpha_base > alpha_edit {
                    return Err(Error::invalid(
                        "alpha_base",
                        "must not exceed alpha_edit; the background amplitude is the small one",
                    ));
                }
                Ok(())
            }
            PerturbationScheme::Global { sigma } => {
                if !sigma.is_finite() || !(0.0..=1.0).contains(&sigma) {
                    return Err(Error::invalid("sigma", "must lie in [0, 1]"));
                }
                Ok(())
            }
        }
    }

    /// Short name used in file outputs and CLI flags.
    pub fn name(&self) -> &'static str {
        match self {
            PerturbationScheme::Rdp { .. } => "rdp",
            PerturbationScheme::Global { .. } => "global",
        }
    }
}

/// Per-coordinate mixing amplitudes for a region-decoupled scheme:
/// `alpha_edit` on masked elements, `alpha_base` elsewhere.
pub fn alpha_map(mask: &EditMask, alpha_edit: f64, alpha_base: f64) -> Array1<f64> {
    Array1::from_iter((0..mask.dim()).map(|d| if mask.is_on(d) { alpha_edit } else { alpha_base }))
}

/// Mixes fresh standard-normal noise into `anchor` with per-coordinate
/// amplitudes `alpha`, drawing one normal sample per coordinate from `rng`
/// regardless of the amplitude so that the stream layout does not depend on
/// the mask.
///
/// Coordinates with amplitude exactly 0 are copied bit-for-bit from the
/// anchor (no `+ 0.0 * delta` term, which could flip signed zeros).
pub fn perturb(anchor: &Latent, alpha: &Array1<f64>, rng: &mut impl Rng) -> Result<Latent> {
    if alpha.len() != anchor.dim() {
        return Err(Error::DimensionMismatch {
            context: "perturb",
            expected: anchor.dim(),
            actual: alpha.len(),
        });
    }
    let mut out = anchor.data().clone();
    for d in 0..anchor.dim() {
        let a = alpha[d];
        let delta: f64 = rng.sample(rand_distr::StandardNormal);
        if a != 0.0 {
            out[d] = (1.0 - a * a).sqrt() * anchor.data()[d] + a * delta;
        }
    }
    Latent::new(out, anchor.grid())
}

/// A group of candidate noise vectors tied to one anchor draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseGroup {
    pub anchor: Latent,
    pub candidates: Vec<Latent>,
    /// Index of the exact-reference candidate, if the scheme has one.
    pub reference_index: Option<usize>,
    pub scheme: PerturbationScheme,
    /// Seed the candidate streams were derived from.
    pub seed: u64,
}

impl NoiseGroup {
    /// Number of candidates `G`.
    pub fn size(&self) -> usize {
        self.candidates.len()
    }

    /// Indices of candidates that were actually perturbed, i.e. everything
    /// except the exact reference.
    pub fn perturbed_indices(&self) -> Vec<usize> {
        (0..self.size())
            .filter(|i| Some(*i) != self.reference_index)
            .collect()
    }
}

/// Builds a region-decoupled group: candidate `reference_index` is a
/// bitwise copy of the anchor; every other candidate `i` is perturbed with
/// the mask-dependent amplitude map using stream `i` of `seed`.
pub fn build_rdp_group(
    anchor: &Latent,
    mask: &EditMask,
    alpha_edit: f64,
    alpha_base: f64,
    group_size: usize,
    reference_index: usize,
    seed: u64,
) -> Result<NoiseGroup> {
    let scheme = PerturbationScheme::rdp(alpha_edit, alpha_base)?;
    check_same_grid(anchor, mask, "build_rdp_group")?;
    if group_size == 0 {
        return Err(Error::invalid("group_size", "must be positive"));
    }
    if reference_index >= group_size {
        return Err(Error::invalid(
            "reference_index",
            format!("{reference_index} out of range for group of {group_size}"),
        ));
    }
    let alpha = alpha_map(mask, alpha_edit, alpha_base);
    let mut candidates = Vec::with_capacity(group_size);
    for i in 0..group_size {
        if i == reference_index {
            candidates.push(anchor.clone());
        } else {
            let mut rng = stream(seed, i as u64);
            candidates.push(perturb(anchor, &alpha, &mut rng)?);
        }
    }
    Ok(NoiseGroup {
        anchor: anchor.clone(),
        candidates,
        reference_index: Some(reference_index),
        scheme,
        seed,
    })
}

/// Builds a global-resampling group: every candidate mixes amplitude
/// `sigma` on all coordinates; there is no exact reference.
pub fn build_global_group(
    anchor: &Latent,
    sigma: f64,
    group_size: usize,
    seed: u64,
) -> Result<NoiseGroup> {
    let scheme = PerturbationScheme::global(sigma)?;
    if group_size == 0 {
        return Err(Error::invalid("group_size", "must be positive"));
    }
    let alpha = Array1::from_elem(anchor.dim(), sigma);
    let mut candidates = Vec::with_capacity(group_size);
    for i in 0..group_size {
        let mut rng = stream(seed, i as u64);
        candidates.push(perturb(anchor, &alpha, &mut rng)?);
    }
    Ok(NoiseGroup {
        anchor: anchor.clone(),
        candidates,
        reference_index: None,
        scheme,
        seed,
    })
}

/// Builds a group under either scheme. `mask` and `reference_index` are
/// only consulted for the region-decoupled scheme.
pub fn build_group(
    anchor: &Latent,
    mask: &EditMask,
    scheme: PerturbationScheme,
    group_size: usize,
    reference_index: usize,
    seed: u64,
) -> Result<NoiseGroup> {
    match scheme {
        PerturbationScheme::Rdp {
            alpha_edit,
            alpha_base,
        } => build_rdp_group(
            anchor,
            mask,
            alpha_edit,
            alpha_base,
            group_size,
            reference_index,
            seed,
        ),
        PerturbationScheme::Global { sigma } => {
            build_global_group(anchor, sigma, group_size, seed)
        }
    }
}

/// Diagonal of the covariance of `candidate - anchor` conditioned on the
/// anchor, for one candidate of a group.
///
/// * exact reference: identically zero;
/// * region-decoupled, perturbed candidate: `alpha_d^2` per coordinate;
/// * global: `sigma^2` on every coordinate.
pub fn conditional_covariance_diag(
    group: &NoiseGroup,
    mask: &EditMask,
    candidate_index: usize,
) -> Result<Array1<f64>> {
    if candidate_index >= group.size() {
        return Err(Error::invalid(
            "candidate_index",
            format!("{candidate_index} out of range for group of {}", group.size()),
        ));
    }
    check_same_grid(&group.anchor, mask, "conditional_covariance_diag")?;
    if group.reference_index == Some(candidate_index) {
        return Ok(Array1::zeros(group.anchor.dim()));
    }
    match group.scheme {
        PerturbationScheme::Rdp {
            alpha_edit,
            alpha_base,
        } => {
            let alpha = alpha_map(mask, alpha_edit, alpha_base);
            Ok(alpha.mapv(|a| a * a))
        }
        PerturbationScheme::Global { sigma } => {
            Ok(Array1::from_elem(group.anchor.dim(), sigma * sigma))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latent::TokenGrid;
    use proptest::prelude::*;

    fn grid_2x2() -> TokenGrid {
        TokenGrid::new(2, 2).unwrap()
    }

    fn anchor(seed: u64, grid: TokenGrid) -> Latent {
        let mut rng = stream(seed, 1000);
        Latent::standard_normal(grid, &mut rng)
    }

    #[test]
    fn scheme_validation_rejects_bad_amplitudes() {
        assert!(PerturbationScheme::rdp(1.5, 0.1).is_err());
        assert!(PerturbationScheme::rdp(0.3, -0.1).is_err());
        assert!(PerturbationScheme::rdp(0.1, 0.3).is_err(), "base above edit");
        assert!(PerturbationScheme::global(-0.2).is_err());
        assert!(PerturbationScheme::global(f64::NAN).is_err());
        assert!(PerturbationScheme::rdp(0.3, 1e-4).is_ok());
        assert!(PerturbationScheme::global(0.3).is_ok());
    }

    #[test]
    fn alpha_map_places_amplitudes_by_region() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = alpha_map(&m, 0.3, 1e-4);
        assert_eq!(a.to_vec(), vec![0.3, 0.3, 1e-4, 1e-4]);
        // Degenerate all-off mask: the base amplitude everywhere.
        let none = EditMask::from_token_mask(vec![false, false], g).unwrap();
        assert_eq!(alpha_map(&none, 0.3, 1e-4).to_vec(), vec![1e-4; 4]);
    }

    #[test]
    fn reference_candidate_is_bitwise_anchor() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(3, g);
        let group = build_rdp_group(&a, &m, 0.3, 1e-4, 4, 2, 99).unwrap();
        assert_eq!(group.reference_index, Some(2));
        for d in 0..a.dim() {
            assert!(group.candidates[2].data()[d].to_bits() == a.data()[d].to_bits());
        }
        assert_eq!(group.perturbed_indices(), vec![0, 1, 3]);
    }

    #[test]
    fn zero_amplitudes_collapse_group_to_anchor() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(4, g);
        let group = build_rdp_group(&a, &m, 0.0, 0.0, 3, 0, 5).unwrap();
        for cand in &group.candidates {
            for d in 0..a.dim() {
                assert_eq!(cand.data()[d].to_bits(), a.data()[d].to_bits());
            }
        }
        // Same collapse for the global scheme at sigma = 0.
        let gg = build_global_group(&a, 0.0, 3, 5).unwrap();
        for cand in &gg.candidates {
            for d in 0..a.dim() {
                assert_eq!(cand.data()[d].to_bits(), a.data()[d].to_bits());
            }
        }
    }

    #[test]
    fn zero_base_amplitude_freezes_background_bitwise() {
        let g = TokenGrid::new(4, 2).unwrap();
        let m = EditMask::from_token_mask(vec![true, false, true, false], g).unwrap();
        let a = anchor(5, g);
        let group = build_rdp_group(&a, &m, 0.3, 0.0, 6, 0, 17).unwrap();
        for cand in &group.candidates {
            for d in 0..a.dim() {
                if !m.is_on(d) {
                    assert_eq!(cand.data()[d].to_bits(), a.data()[d].to_bits());
                }
            }
        }
        // On-mask coordinates of perturbed candidates do change.
        assert!(group.candidates[1].data()[0] != a.data()[0]);
    }

    #[test]
    fn tiny_sigma_stays_near_anchor() {
        let g = grid_2x2();
        let a = anchor(6, g);
        let group = build_global_group(&a, 1e-7, 4, 11).unwrap();
        for cand in &group.candidates {
            for d in 0..a.dim() {
                assert!((cand.data()[d] - a.data()[d]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn rebuilding_group_is_deterministic() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(7, g);
        let g1 = build_rdp_group(&a, &m, 0.3, 0.05, 5, 0, 123).unwrap();
        let g2 = build_rdp_group(&a, &m, 0.3, 0.05, 5, 0, 123).unwrap();
        assert_eq!(g1, g2);
        let g3 = build_rdp_group(&a, &m, 0.3, 0.05, 5, 0, 124).unwrap();
        assert_ne!(g1, g3);
    }

    /// Marginal preservation: regenerating the same perturbed candidate
    /// under fresh anchors keeps each coordinate standard normal.
    #[test]
    fn rdp_marginals_stay_standard_normal() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let n = 1_000_000usize;
        let d = g.dim();
        let mut sum = vec![0.0; d];
        let mut sum_sq = vec![0.0; d];
        let alpha = alpha_map(&m, 0.3, 1e-4);
        for rep in 0..n {
            let mut arng = stream(900, rep as u64);
            let a = Latent::standard_normal(g, &mut arng);
            let mut crng = stream(901, rep as u64);
            let cand = perturb(&a, &alpha, &mut crng).unwrap();
            for k in 0..d {
                sum[k] += cand.data()[k];
                sum_sq[k] += cand.data()[k] * cand.data()[k];
            }
        }
        for k in 0..d {
            let mean = sum[k] / n as f64;
            let var = sum_sq[k] / n as f64 - mean * mean;
            assert!(mean.abs() < 0.01, "coordinate {k} mean {mean}");
            assert!((var - 1.0).abs() < 0.02, "coordinate {k} var {var}");
        }
    }

    /// The deviation from a fixed anchor has variance sigma^2 per
    /// coordinate under the global scheme. The conditional mean of the
    /// deviation is (sqrt(1-s^2)-1) * anchor, nonzero, so the variance is
    /// taken around the per-coordinate sample means.
    #[test]
    fn global_conditional_deviation_variance_matches_sigma_sq() {
        let g = grid_2x2();
        let a = anchor(8, g);
        let sigma = 0.3;
        let n = 100_000usize;
        let alpha = Array1::from_elem(g.dim(), sigma);
        let mut s = vec![0.0; g.dim()];
        let mut s2 = vec![0.0; g.dim()];
        for rep in 0..n {
            let mut rng = stream(902, rep as u64);
            let cand = perturb(&a, &alpha, &mut rng).unwrap();
            for k in 0..g.dim() {
                let dev = cand.data()[k] - a.data()[k];
                s[k] += dev;
                s2[k] += dev * dev;
            }
        }
        let mut pooled_var = 0.0;
        for k in 0..g.dim() {
            let mean = s[k] / n as f64;
            pooled_var += s2[k] / n as f64 - mean * mean;
        }
        pooled_var /= g.dim() as f64;
        assert!(
            (pooled_var - sigma * sigma).abs() < 0.005,
            "pooled deviation variance {pooled_var}"
        );
    }

    /// Empirical deviation variance matches `conditional_covariance_diag`
    /// coordinate-wise at 1e5 samples within 5% relative.
    #[test]
    fn empirical_deviation_matches_conditional_covariance() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(9, g);
        let (alpha_edit, alpha_base) = (0.3, 0.2);
        let group = build_rdp_group(&a, &m, alpha_edit, alpha_base, 2, 0, 31).unwrap();
        let predicted = conditional_covariance_diag(&group, &m, 1).unwrap();
        let n = 100_000usize;
        let alpha = alpha_map(&m, alpha_edit, alpha_base);
        let mut s = vec![0.0; g.dim()];
        let mut s2 = vec![0.0; g.dim()];
        for rep in 0..n {
            let mut rng = stream(903, rep as u64);
            let cand = perturb(&a, &alpha, &mut rng).unwrap();
            for k in 0..g.dim() {
                let dev = cand.data()[k] - a.data()[k];
                s[k] += dev;
                s2[k] += dev * dev;
            }
        }
        for k in 0..g.dim() {
            let mean = s[k] / n as f64;
            let var = s2[k] / n as f64 - mean * mean;
            let rel = (var - predicted[k]).abs() / predicted[k];
            assert!(rel < 0.05, "coordinate {k}: var {var} vs {}", predicted[k]);
        }
    }

    #[test]
    fn conditional_covariance_cases() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(10, g);
        let rdp = build_rdp_group(&a, &m, 0.3, 1e-4, 3, 0, 3).unwrap();
        // Exact reference: identically zero.
        let c0 = conditional_covariance_diag(&rdp, &m, 0).unwrap();
        assert!(c0.iter().all(|&v| v == 0.0));
        // Perturbed candidate: alpha^2 per coordinate.
        let c1 = conditional_covariance_diag(&rdp, &m, 1).unwrap();
        assert_eq!(c1.to_vec(), vec![0.09, 0.09, 1e-8, 1e-8]);
        // Global: sigma^2 everywhere.
        let glob = build_global_group(&a, 0.3, 3, 3).unwrap();
        let cg = conditional_covariance_diag(&glob, &m, 0).unwrap();
        assert!(cg.iter().all(|&v| (v - 0.09).abs() < 1e-15));
        // Out-of-range candidate index errors.
        assert!(conditional_covariance_diag(&rdp, &m, 3).is_err());
    }

    #[test]
    fn noise_group_serde_round_trip() {
        let g = grid_2x2();
        let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
        let a = anchor(12, g);
        let group = build_rdp_group(&a, &m, 0.3, 1e-4, 3, 0, 77).unwrap();
        let json = serde_json::to_string(&group).unwrap();
        let back: NoiseGroup = serde_json::from_str(&json).unwrap();
        assert_eq!(group, back);
    }

    proptest! {
        #[test]
        fn perturbed_indices_exclude_reference(
            size in 1usize..8,
            seed in 0u64..1000,
        ) {
            let g = grid_2x2();
            let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
            let a = anchor(seed, g);
            let i0 = (seed as usize) % size;
            let group = build_rdp_group(&a, &m, 0.5, 0.1, size, i0, seed).unwrap();
            let perturbed = group.perturbed_indices();
            prop_assert_eq!(perturbed.len(), size - 1);
            prop_assert!(!perturbed.contains(&i0));
        }

        #[test]
        fn candidates_interpolate_anchor_and_fresh_noise(
            alpha_edit in 0.0f64..=1.0,
            frac in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            let alpha_base = alpha_edit * frac;
            let g = grid_2x2();
            let m = EditMask::from_token_mask(vec![true, false], g).unwrap();
            let a = anchor(seed.wrapping_add(500), g);
            let group = build_rdp_group(&a, &m, alpha_edit, alpha_base, 2, 0, seed).unwrap();
            let alpha = alpha_map(&m, alpha_edit, alpha_base);
            // Reconstruct the implied fresh-noise component and check it is
            // finite; at alpha = 1 the candidate must be independent of the
            // anchor (keep factor 0), at alpha = 0 identical to it.
            let cand = &group.candidates[1];
            for d in 0..a.dim() {
                let keep = (1.0 - alpha[d] * alpha[d]).sqrt();
                if alpha[d] == 0.0 {
                    prop_assert_eq!(cand.data()[d], a.data()[d]);
                } else {
                    let implied = (cand.data()[d] - keep * a.data()[d]) / alpha[d];
                    prop_assert!(implied.is_finite());
                }
            }
        }
    }
}
