//! Attention-concentration rewards.
//!
//! For a text-to-image attention matrix `A` (rows = text tokens, columns =
//! image tokens), the mass attracted by image token `u` is the column sum
//! `mass(u) = sum_v A(v, u)`. The concentration density of an edit region
//! compares the average mass per masked token against the average mass per
//! token overall:
//!
//! ```text
//! acd = ( sum_{u in M} mass(u) / (|M| + eps) )
//!     / ( sum_u      mass(u) / (N + eps) )
//! ```
//!
//! with `eps = 1e-8` in both guards. Uniform attention gives a density of
//! 1 (up to the guards); attention fully inside the region gives `N / |M|`.
//! Aggregating the density over selected layers and rollout steps yields a
//! scalar intrinsic reward, and contrasting aggregates between groups of
//! trajectories localizes which layers carry the edit signal.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::Trajectory;

/// Guard added to both count denominators of the density.
pub const ACD_EPS: f64 = 1e-8;

/// Attention matrices of one trajectory, step-major, with explicit layer
/// identifiers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// `mats[step][layer_pos]`, each `n_txt x n_tokens`.
    mats: Vec<Vec<Array2<f64>>>,
    /// Identifier of each layer position (usually `0..n_layers`).
    layer_ids: Vec<usize>,
}

impl AttentionRecord {
    pub fn new(mats: Vec<Vec<Array2<f64>>>, layer_ids: Vec<usize>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::EmptyInput("AttentionRecord steps"));
        }
        let shape = mats
            .first()
            .and_then(|step| step.first())
            .map(|m| (m.nrows(), m.ncols()));
        for step in &mats {
            if step.len() != layer_ids.len() {
                return Err(Error::GroupMismatch(format!(
                    "step has {} layers, expected {}",
                    step.len(),
                    layer_ids.len()
                )));
            }
            for m in step {
                if Some((m.nrows(), m.ncols())) != shape {
                    return Err(Error::GroupMismatch(
                        "attention matrices differ in shape".to_string(),
                    ));
                }
            }
        }
        if layer_ids.is_empty() {
            return Err(Error::EmptyInput("AttentionRecord layers"));
        }
        Ok(AttentionRecord { mats, layer_ids })
    }

    /// Collects the attention maps recorded during a rollout, labelling
    /// layer positions `0..n_layers`. Fails for trajectories of models
    /// without attention.
    pub fn from_trajectory(traj: &Trajectory) -> Result<Self> {
        let n_layers = traj
            .attentions
            .first()
            .map(|step| step.len())
            .unwrap_or(0);
        if n_layers == 0 {
            return Err(Error::EmptyInput(
                "trajectory carries no attention maps (linear model?)",
            ));
        }
        AttentionRecord::new(traj.attentions.clone(), (0..n_layers).collect())
    }

    pub fn layer_ids(&self) -> &[usize] {
        &self.layer_ids
    }

    pub fn step_count(&self) -> usize {
        self.mats.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.mats[0][0].ncols()
    }

    /// The maps as plain nested vectors, `[step][layer_pos][row][col]` —
    /// a binary-free layout that serializes to nested JSON arrays for
    /// offline inspection.
    pub fn nested_arrays(&self) -> Vec<Vec<Vec<Vec<f64>>>> {
        self.mats
            .iter()
            .map(|step| {
                step.iter()
                    .map(|m| m.rows().into_iter().map(|r| r.to_vec()).collect())
                    .collect()
            })
            .collect()
    }

    /// The attention matrix of `layer_id` at `step`.
    pub fn at(&self, step: usize, layer_id: usize) -> Result<&Array2<f64>> {
        let pos = self
            .layer_ids
            .iter()
            .position(|&l| l == layer_id)
            .ok_or_else(|| Error::invalid("layer_id", format!("{layer_id} not recorded")))?;
        self.mats
            .get(step)
            .map(|s| &s[pos])
            .ok_or_else(|| Error::invalid("step", format!("{step} out of range")))
    }
}

/// Column sums of an attention matrix: total mass attracted by each image
/// token. Rejects negative entries; rows are expected to be normalized but
/// that is checked by the callers that need it.
pub fn attention_mass(attn: &Array2<f64>) -> Result<Array1<f64>> {
    if let Some(neg) = attn.iter().find(|&&v| v < 0.0) {
        return Err(Error::invalid(
            "attn",
            format!("negative attention weight {neg}"),
        ));
    }
    Ok(attn.sum_axis(ndarray::Axis(0)))
}

/// Concentration density of `mass` on the masked tokens (see module docs).
pub fn acd_density(mass: &Array1<f64>, token_mask: &[bool]) -> Result<f64> {
    if mass.len() != token_mask.len() {
        return Err(Error::DimensionMismatch {
            context: "acd_density",
            expected: token_mask.len(),
            actual: mass.len(),
        });
    }
    let n = mass.len() as f64;
    let on_count = token_mask.iter().filter(|&&b| b).count() as f64;
    let mut on_mass = 0.0;
    let mut total_mass = 0.0;
    for (u, &m) in mass.iter().enumerate() {
        if m < 0.0 {
            return Err(Error::invalid("mass", format!("negative mass {m}")));
        }
        total_mass += m;
        if token_mask[u] {
            on_mass += m;
        }
    }
    if total_mass == 0.0 {
        return Err(Error::invalid("mass", "total attention mass is zero"));
    }
    let num = on_mass / (on_count + ACD_EPS);
    let den = total_mass / (n + ACD_EPS);
    Ok(num / den)
}

/// Densities of one trajectory over a layer subset, with per-layer means
/// and the overall aggregate (the intrinsic reward).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AcdReport {
    /// The layer subset, in the order given to [`aggregate_acd`].
    pub layer_set: Vec<usize>,
    pub step_count: usize,
    /// `values[layer_pos][step]`.
    pub values: Vec<Vec<f64>>,
    /// Mean density per selected layer across steps.
    pub layer_means: Vec<f64>,
    /// Mean over all selected layers and steps.
    pub aggregate: f64,
}

/// Computes the concentration density for every selected layer at every
/// recorded step and averages uniformly.
pub fn aggregate_acd(
    record: &AttentionRecord,
    token_mask: &[bool],
    layer_set: &[usize],
) -> Result<AcdReport> {
    if layer_set.is_empty() {
        return Err(Error::EmptyInput("layer_set"));
    }
    for l in layer_set {
        if !record.layer_ids().contains(l) {
            return Err(Error::invalid(
                "layer_set",
                format!("layer {l} not present in the record"),
            ));
        }
    }
    let steps = record.step_count();
    let mut values = Vec::with_capacity(layer_set.len());
    let mut layer_means = Vec::with_capacity(layer_set.len());
    let mut total = 0.0;
    for &l in layer_set {
        let mut per_step = Vec::with_capacity(steps);
        for s in 0..steps {
            let attn = record.at(s, l)?;
            let mass = attention_mass(attn)?;
            per_step.push(acd_density(&mass, token_mask)?);
        }
        let mean = per_step.iter().sum::<f64>() / steps as f64;
        total += per_step.iter().sum::<f64>();
        layer_means.push(mean);
        values.push(per_step);
    }
    let aggregate = total / (layer_set.len() * steps) as f64;
    Ok(AcdReport {
        layer_set: layer_set.to_vec(),
        step_count: steps,
        values,
        layer_means,
        aggregate,
    })
}

/// Contrast of per-layer mean densities between two sets of trajectories
/// (e.g. high-reward vs low-reward rollouts): for each layer, the mean over
/// `positives` minus the mean over `negatives`. All records must share the
/// same layer ids.
pub fn acd_layer_residual(
    positives: &[AttentionRecord],
    negatives: &[AttentionRecord],
    token_mask: &[bool],
) -> Result<Vec<(usize, f64)>> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::EmptyInput("acd_layer_residual records"));
    }
    let layer_ids = positives[0].layer_ids().to_vec();
    for rec in positives.iter().chain(negatives.iter()) {
        if rec.layer_ids() != layer_ids.as_slice() {
            return Err(Error::GroupMismatch(
                "records disagree on layer ids".to_string(),
            ));
        }
    }
    let mean_per_layer = |records: &[AttentionRecord], layer: usize| -> Result<f64> {
        let mut sum = 0.0;
        for rec in records {
            sum += aggregate_acd(rec, token_mask, &[layer])?.aggregate;
        }
        Ok(sum / records.len() as f64)
    };
    let mut out = Vec::with_capacity(layer_ids.len());
    for &l in &layer_ids {
        let pos = mean_per_layer(positives, l)?;
        let neg = mean_per_layer(negatives, l)?;
        out.push((l, pos - neg));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    fn uniform_attn(n_txt: usize, n_tokens: usize) -> Array2<f64> {
        Array2::from_elem((n_txt, n_tokens), 1.0 / n_tokens as f64)
    }

    #[test]
    fn attention_mass_hand_example() {
        let a = arr2(&[[0.5, 0.5], [0.25, 0.75]]);
        let mass = attention_mass(&a).unwrap();
        assert_eq!(mass.to_vec(), vec![0.75, 1.25]);
        // Mass conservation: sums to the number of text rows.
        assert!((mass.sum() - 2.0).abs() < 1e-15);
    }

    #[test]
    fn attention_mass_rejects_negative_entries() {
        let a = arr2(&[[1.1, -0.1]]);
        assert!(attention_mass(&a).is_err());
    }

    #[test]
    fn mass_conservation_for_normalized_rows() {
        use crate::flow::{rollout, AttnFieldParams, Condition, VelocityFieldParams};
        use crate::latent::{Latent, TokenGrid};
        use crate::rng::stream;
        let grid = TokenGrid::new(8, 2).unwrap();
        let params = AttnFieldParams::random(grid, 3, 2, 0.6, 0.8, 50).unwrap();
        let mut rng = stream(51, 0);
        let cond = Condition::standard_normal(3, 3, 0, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        let traj = rollout(&VelocityFieldParams::Attn(params), &eps, &cond, 4).unwrap();
        for step in &traj.attentions {
            for mat in step {
                let mass = attention_mass(mat).unwrap();
                assert!((mass.sum() - 3.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn uniform_attention_has_unit_density() {
        // Small grid: the eps guards shift the value by about
        // eps * (1/|M| - 1/N); keep a tolerance above that.
        let mass = attention_mass(&uniform_attn(2, 4)).unwrap();
        let acd = acd_density(&mass, &[true, false, false, false]).unwrap();
        assert!((acd - 1.0).abs() < 1e-8);

        // Default-geometry sizes: 64 tokens, 16 masked. Guard shift is
        // below 1e-9 here.
        let mass = attention_mass(&uniform_attn(4, 64)).unwrap();
        let mask: Vec<bool> = (0..64).map(|u| u < 16).collect();
        let acd = acd_density(&mass, &mask).unwrap();
        assert!((acd - 1.0).abs() < 1e-9, "uniform density {acd}");
    }

    #[test]
    fn fully_concentrated_attention_hits_count_ratio() {
        // All mass on masked tokens: density = N / |M| up to the guards.
        let n = 64usize;
        let m = 16usize;
        let mut attn = Array2::zeros((4, n));
        for v in 0..4 {
            for u in 0..m {
                attn[[v, u]] = 1.0 / m as f64;
            }
        }
        let mass = attention_mass(&attn).unwrap();
        let mask: Vec<bool> = (0..n).map(|u| u < m).collect();
        let acd = acd_density(&mass, &mask).unwrap();
        let expected = n as f64 / m as f64;
        assert!(
            (acd - expected).abs() / expected < 1e-6,
            "density {acd} vs {expected}"
        );
    }

    #[test]
    fn density_is_scale_invariant_and_monotone() {
        let mask = [true, false, false, false];
        let mass = Array1::from_vec(vec![0.5, 0.5, 0.5, 0.5]);
        let base = acd_density(&mass, &mask).unwrap();
        let scaled = acd_density(&(mass.clone() * 7.5), &mask).unwrap();
        assert!((base - scaled).abs() < 1e-12);

        // Moving mass into the masked token increases the density.
        let more = Array1::from_vec(vec![0.8, 0.2, 0.5, 0.5]);
        let higher = acd_density(&more, &mask).unwrap();
        assert!(higher > base);
    }

    #[test]
    fn density_input_validation() {
        let mass = Array1::from_vec(vec![0.5, 0.5]);
        assert!(acd_density(&mass, &[true]).is_err());
        let zero = Array1::from_vec(vec![0.0, 0.0]);
        assert!(acd_density(&zero, &[true, false]).is_err());
        let neg = Array1::from_vec(vec![-0.1, 0.5]);
        assert!(acd_density(&neg, &[true, false]).is_err());
    }

    #[test]
    fn aggregate_acd_averages_layers_and_steps() {
        // Two steps, two layers with known densities.
        let n = 4usize;
        let mask = [true, false, false, false];
        // Layer A: all mass on token 0 -> density = 4 (up to guards).
        let mut concentrated = Array2::zeros((1, n));
        concentrated[[0, 0]] = 1.0;
        // Layer B: uniform -> density = 1.
        let uniform = uniform_attn(1, n);
        let step: Vec<Array2<f64>> = vec![concentrated.clone(), uniform.clone()];
        let record = AttentionRecord::new(vec![step.clone(), step], vec![0, 1]).unwrap();

        let report = aggregate_acd(&record, &mask, &[0, 1]).unwrap();
        assert_eq!(report.step_count, 2);
        assert_eq!(report.layer_set, vec![0, 1]);
        assert!((report.layer_means[0] - 4.0).abs() < 1e-7);
        assert!((report.layer_means[1] - 1.0).abs() < 1e-7);
        assert!((report.aggregate - 2.5).abs() < 1e-7);

        // Restricting to one layer only uses that layer.
        let only_b = aggregate_acd(&record, &mask, &[1]).unwrap();
        assert!((only_b.aggregate - 1.0).abs() < 1e-7);
    }

    #[test]
    fn aggregate_acd_rejects_bad_layer_sets() {
        let record =
            AttentionRecord::new(vec![vec![uniform_attn(1, 4)]], vec![0]).unwrap();
        let mask = [true, false, false, false];
        assert!(aggregate_acd(&record, &mask, &[]).is_err());
        assert!(aggregate_acd(&record, &mask, &[3]).is_err());
    }

    #[test]
    fn layer_residual_contrasts_groups() {
        let n = 4usize;
        let mask = [true, false, false, false];
        let mut concentrated = Array2::zeros((1, n));
        concentrated[[0, 0]] = 1.0;
        let uniform = uniform_attn(1, n);
        // Positives concentrate in layer 0; negatives are uniform there.
        // Layer 1 is uniform for both.
        let pos = AttentionRecord::new(
            vec![vec![concentrated.clone(), uniform.clone()]],
            vec![0, 1],
        )
        .unwrap();
        let neg =
            AttentionRecord::new(vec![vec![uniform.clone(), uniform.clone()]], vec![0, 1])
                .unwrap();
        let residuals = acd_layer_residual(&[pos], &[neg], &mask).unwrap();
        assert_eq!(residuals.len(), 2);
        assert_eq!(residuals[0].0, 0);
        assert!((residuals[0].1 - 3.0).abs() < 1e-7, "layer 0 residual");
        assert!(residuals[1].1.abs() < 1e-9, "layer 1 residual");
    }

    #[test]
    fn layer_residual_validates_inputs() {
        let uniform = uniform_attn(1, 4);
        let rec0 = AttentionRecord::new(vec![vec![uniform.clone()]], vec![0]).unwrap();
        let rec1 = AttentionRecord::new(vec![vec![uniform.clone()]], vec![1]).unwrap();
        let mask = [true, false, false, false];
        assert!(acd_layer_residual(&[], std::slice::from_ref(&rec0), &mask).is_err());
        assert!(acd_layer_residual(&[rec0], &[rec1], &mask).is_err());
    }

    #[test]
    fn identical_groups_have_zero_residual() {
        let n = 4usize;
        let mask = [true, false, false, false];
        let mut attn = Array2::zeros((2, n));
        attn[[0, 0]] = 0.7;
        attn[[0, 2]] = 0.3;
        attn[[1, 1]] = 1.0;
        let recs = [AttentionRecord::new(vec![vec![attn]], vec![0]).unwrap()];
        let residuals = acd_layer_residual(&recs, &recs, &mask).unwrap();
        assert_eq!(residuals[0].1, 0.0);
    }

    #[test]
    fn record_from_trajectory_requires_attention() {
        use crate::flow::{rollout, Condition, LinearFieldParams, VelocityFieldParams};
        use crate::latent::{Latent, TokenGrid};
        use crate::rng::stream;
        let grid = TokenGrid::new(2, 2).unwrap();
        let params = VelocityFieldParams::Linear(LinearFieldParams::zero(grid));
        let mut rng = stream(52, 0);
        let cond = Condition::standard_normal(1, 1, 0, &mut rng);
        let eps = Latent::standard_normal(grid, &mut rng);
        let traj = rollout(&params, &eps, &cond, 2).unwrap();
        assert!(AttentionRecord::from_trajectory(&traj).is_err());
    }

    #[test]
    fn nested_arrays_are_plain_json_arrays() {
        let mut attn = Array2::zeros((2, 3));
        attn[[0, 0]] = 0.25;
        attn[[1, 2]] = 0.5;
        let rec = AttentionRecord::new(vec![vec![attn]], vec![0]).unwrap();
        let nested = rec.nested_arrays();
        assert_eq!(nested.len(), 1);
        assert_eq!(nested[0].len(), 1);
        assert_eq!(nested[0][0], vec![vec![0.25, 0.0, 0.0], vec![0.0, 0.0, 0.5]]);
        // Serializes without any struct wrapper: nothing but nested lists.
        let json = serde_json::to_string(&nested).unwrap();
        assert_eq!(json, "[[[[0.25,0.0,0.0],[0.0,0.0,0.5]]]]");
    }
}
