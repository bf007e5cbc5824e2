//! Experiment harness behind the `rcgrpo` binary: JSON configuration with
//! pinned defaults, cross-field validation, and the four commands
//! (`rollout`, `train`, `variance-lab`, `acd-diag`), each writing
//! deterministic CSV/JSON artifacts into an output directory.
//!
//! Determinism contract: given the same build, config, and seed, every
//! command rewrites byte-identical files. All randomness flows through
//! fixed counter-based substreams, parallel reductions are order-stable,
//! and numbers are printed with 9 significant digits (`{:.8e}`).

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};

use rcgrpo_core::acd::{acd_layer_residual, aggregate_acd, AttentionRecord};
use rcgrpo_core::env::{make_task, task_reward, EditTask, MaskSpec};
use rcgrpo_core::flow::{
    rollout, AttnFieldParams, LinearFieldParams, ModelGeometry, Trajectory, VelocityFieldParams,
};
use rcgrpo_core::grpo::{rollout_group, train_step, GrpoConfig};
use rcgrpo_core::latent::{Latent, TokenGrid};
use rcgrpo_core::noise::PerturbationScheme;
use rcgrpo_core::rng::{child_seed, stream};
use rcgrpo_core::variance::{run_variance_lab, LabConfig, LabStatus};

/// Substream tags separating the commands' random draws.
const ROLLOUT_TAG: u64 = 201;
const TRAIN_TAG: u64 = 202;
const DIAG_TAG: u64 = 203;

/// Token-grid and text-conditioning sizes of the model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeometryConfig {
    pub n_tokens: usize,
    pub token_dim: usize,
    pub n_txt: usize,
    pub d_txt: usize,
    pub n_layers: usize,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        GeometryConfig {
            n_tokens: 64,
            token_dim: 2,
            n_txt: 4,
            d_txt: 4,
            n_layers: 4,
        }
    }
}

impl GeometryConfig {
    pub fn build(&self) -> anyhow::Result<ModelGeometry> {
        let grid = TokenGrid::new(self.n_tokens, self.token_dim)
            .map_err(|e| anyhow!("geometry: {e}"))?;
        ModelGeometry::new(grid, self.n_txt, self.d_txt, self.n_layers)
            .map_err(|e| anyhow!("geometry: {e}"))
    }
}

/// Which velocity field the experiment drives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Cross-attention field (the default; required for concentration
    /// rewards and the attention diagnostic).
    Attn,
    /// Token-local linear field: no cross-region coupling by construction.
    LinearLocal,
    /// Dense linear field.
    LinearDense,
}

/// Model family and initialization scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub state_scale: f64,
    pub attn_scale: f64,
    pub linear_scale: f64,
    /// Parameter initialization seed, independent of the run seed so the
    /// same model can be driven under different noise.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            kind: ModelKind::Attn,
            state_scale: 0.5,
            attn_scale: 0.5,
            linear_scale: 0.8,
            init_seed: 7,
        }
    }
}

/// The suite of editing tasks a run cycles through.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSuiteConfig {
    pub n_tasks: usize,
    pub mask: MaskSpec,
}

impl Default for TaskSuiteConfig {
    fn default() -> Self {
        TaskSuiteConfig {
            n_tasks: 4,
            mask: MaskSpec::default_rect(),
        }
    }
}

/// Shape of the attention-contrast diagnostic: conditions scanned and
/// rollouts drawn per condition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiagConfig {
    pub n_conditions: usize,
    pub n_rollouts: usize,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            n_conditions: 200,
            n_rollouts: 4,
        }
    }
}

/// Everything a run needs, loadable from a single JSON document. Absent
/// fields take the pinned defaults, so `{}` is a valid config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub geometry: GeometryConfig,
    pub model: ModelConfig,
    pub grpo: GrpoConfig,
    pub tasks: TaskSuiteConfig,
    /// Training updates for `train`.
    pub n_updates: usize,
    /// Rollout steps used by `rollout` and `acd-diag` (training steps live
    /// in `grpo.n_steps`).
    pub t_eval: usize,
    /// Candidate groups rolled by `rollout`.
    pub eval_groups: usize,
    pub diag: DiagConfig,
    pub lab: LabConfig,
    /// Default output directory (the `--out` flag overrides it).
    pub out_dir: String,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            geometry: GeometryConfig::default(),
            model: ModelConfig::default(),
            grpo: GrpoConfig::default(),
            tasks: TaskSuiteConfig::default(),
            n_updates: 200,
            t_eval: 8,
            eval_groups: 4,
            diag: DiagConfig::default(),
            lab: LabConfig::default(),
            out_dir: "runs".to_string(),
            seed: 0,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: ExperimentConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        Ok(cfg)
    }

    /// Cross-field validation; every rejection names the offending field.
    pub fn validate(&self) -> anyhow::Result<()> {
        let geo = self.geometry.build()?;
        self.grpo.validate().map_err(|e| anyhow!("grpo: {e}"))?;
        for &l in &self.grpo.selected_layers {
            if l >= self.geometry.n_layers {
                bail!(
                    "grpo.selected_layers: layer {l} outside 0..{}",
                    self.geometry.n_layers
                );
            }
        }
        if self.t_eval == 0 {
            bail!("t_eval: must be positive");
        }
        if self.eval_groups == 0 {
            bail!("eval_groups: must be positive");
        }
        if self.n_updates > 100_000 {
            bail!("n_updates: {} exceeds the sanity cap of 100000", self.n_updates);
        }
        if self.tasks.n_tasks == 0 {
            bail!("tasks.n_tasks: must be positive");
        }
        if self.diag.n_conditions == 0 {
            bail!("diag.n_conditions: must be positive");
        }
        if self.diag.n_rollouts == 0 {
            bail!("diag.n_rollouts: must be positive");
        }
        for (name, v) in [
            ("model.state_scale", self.model.state_scale),
            ("model.attn_scale", self.model.attn_scale),
            ("model.linear_scale", self.model.linear_scale),
        ] {
            if !v.is_finite() || v < 0.0 {
                bail!("{name}: must be finite and non-negative");
            }
        }
        self.lab.validate().map_err(|e| anyhow!("lab: {e}"))?;
        // Mask consistency against the grid: building the first task
        // exercises every bound check.
        make_task(&geo, &self.tasks.mask, self.seed, 0).map_err(|e| anyhow!("tasks.mask: {e}"))?;
        Ok(())
    }

    /// Replaces the scheme kind, keeping configured amplitudes when the
    /// kind already matches and falling back to the pinned defaults
    /// (edit 0.3 / base 1e-4, sigma 0.3) otherwise.
    pub fn apply_scheme_kind(&mut self, kind: &str) -> anyhow::Result<()> {
        match (kind, self.grpo.scheme) {
            ("rdp", PerturbationScheme::Rdp { .. })
            | ("global", PerturbationScheme::Global { .. }) => Ok(()),
            ("rdp", _) => {
                self.grpo.scheme = PerturbationScheme::Rdp {
                    alpha_edit: 0.3,
                    alpha_base: 1e-4,
                };
                Ok(())
            }
            ("global", _) => {
                self.grpo.scheme = PerturbationScheme::Global { sigma: 0.3 };
                Ok(())
            }
            _ => bail!("scheme: unknown kind {kind:?} (expected \"rdp\" or \"global\")"),
        }
    }

    fn build_params(&self, geo: &ModelGeometry) -> anyhow::Result<VelocityFieldParams> {
        match self.model.kind {
            ModelKind::Attn => Ok(VelocityFieldParams::Attn(
                AttnFieldParams::random(
                    geo.grid,
                    geo.d_txt,
                    geo.n_layers,
                    self.model.state_scale,
                    self.model.attn_scale,
                    self.model.init_seed,
                )
                .map_err(|e| anyhow!("model: {e}"))?,
            )),
            ModelKind::LinearLocal => Ok(VelocityFieldParams::Linear(
                LinearFieldParams::random_token_local(
                    geo.grid,
                    self.model.linear_scale,
                    self.model.init_seed,
                ),
            )),
            ModelKind::LinearDense => Ok(VelocityFieldParams::Linear(
                LinearFieldParams::random_dense(
                    geo.grid,
                    self.model.linear_scale,
                    self.model.init_seed,
                ),
            )),
        }
    }

    fn build_tasks(&self, geo: &ModelGeometry) -> anyhow::Result<Vec<EditTask>> {
        (0..self.tasks.n_tasks)
            .map(|i| {
                make_task(geo, &self.tasks.mask, self.seed, i as u64)
                    .map_err(|e| anyhow!("tasks.mask: {e}"))
            })
            .collect()
    }
}

/// 9-significant-digit float formatting shared by every CSV writer.
fn fmt_f(x: f64) -> String {
    format!("{x:.8e}")
}

fn write_artifact(dir: &Path, name: &str, contents: &str) -> anyhow::Result<PathBuf> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, contents).with_context(|| format!("writing {}", path.display()))?;
    Ok(path)
}

/// Per-group block of the rollout summary JSON.
#[derive(Debug, Serialize)]
struct RolloutGroupSummary {
    group: usize,
    group_seed: u64,
    task_id: u64,
    scheme: &'static str,
    n_steps: usize,
    dt: f64,
    mean_task_reward: f64,
    mean_acd_reward: f64,
    mean_bg_drift: f64,
    terminal_norms: Vec<f64>,
}

#[derive(Debug, Serialize)]
struct RolloutSummary {
    seed: u64,
    eval_groups: usize,
    group_size: usize,
    groups: Vec<RolloutGroupSummary>,
}

/// Nested-array dump of one candidate's attention maps, for offline
/// inspection.
#[derive(Debug, Serialize)]
struct AttentionDump {
    group: usize,
    candidate: usize,
    layer_ids: Vec<usize>,
    /// `[step][layer][text_token][image_token]`.
    steps: Vec<Vec<Vec<Vec<f64>>>>,
}

fn has_attention(traj: &Trajectory) -> bool {
    traj.attentions.first().map_or(0, |s| s.len()) > 0
}

/// Rolls `eval_groups` candidate groups and writes per-candidate rewards,
/// the per-(layer, step) concentration densities, a trajectory summary,
/// and one attention dump.
pub fn cmd_rollout(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let geo = cfg.geometry.build()?;
    let params = cfg.build_params(&geo)?;
    let tasks = cfg.build_tasks(&geo)?;
    let mut grpo_cfg = cfg.grpo.clone();
    grpo_cfg.n_steps = cfg.t_eval;

    let rollout_seed = child_seed(cfg.seed, ROLLOUT_TAG);
    let all_layers: Vec<usize> = (0..geo.n_layers).collect();
    let mut candidates_csv =
        String::from("group,candidate,is_reference,task_reward,acd_reward,bg_drift\n");
    let mut acd_csv = String::from("group,candidate,layer,step,acd\n");
    let mut groups = Vec::with_capacity(cfg.eval_groups);
    let mut attention_dump: Option<AttentionDump> = None;

    for g in 0..cfg.eval_groups {
        let task = &tasks[g % tasks.len()];
        let group_seed = child_seed(rollout_seed, g as u64);
        let gr = rollout_group(&params, task, &grpo_cfg, group_seed)
            .map_err(|e| anyhow!("group {g}: {e}"))?;
        let size = gr.trajectories.len();
        for i in 0..size {
            let is_ref = gr.group.reference_index == Some(i);
            let _ = writeln!(
                candidates_csv,
                "{g},{i},{},{},{},{}",
                is_ref as u8,
                fmt_f(gr.task_rewards[i]),
                fmt_f(gr.acd_rewards[i]),
                fmt_f(gr.drifts[i]),
            );
            if has_attention(&gr.trajectories[i]) {
                let record = AttentionRecord::from_trajectory(&gr.trajectories[i])
                    .map_err(|e| anyhow!("group {g} candidate {i}: {e}"))?;
                let report = aggregate_acd(&record, task.mask.token(), &all_layers)
                    .map_err(|e| anyhow!("group {g} candidate {i}: {e}"))?;
                for (pos, &layer) in report.layer_set.iter().enumerate() {
                    for (step, value) in report.values[pos].iter().enumerate() {
                        let _ = writeln!(acd_csv, "{g},{i},{layer},{step},{}", fmt_f(*value));
                    }
                }
                if attention_dump.is_none() {
                    attention_dump = Some(AttentionDump {
                        group: g,
                        candidate: i,
                        layer_ids: record.layer_ids().to_vec(),
                        steps: record.nested_arrays(),
                    });
                }
            }
        }
        let n = size as f64;
        groups.push(RolloutGroupSummary {
            group: g,
            group_seed,
            task_id: task.task_id,
            scheme: grpo_cfg.scheme.name(),
            n_steps: cfg.t_eval,
            dt: 1.0 / cfg.t_eval as f64,
            mean_task_reward: gr.task_rewards.iter().sum::<f64>() / n,
            mean_acd_reward: gr.acd_rewards.iter().sum::<f64>() / n,
            mean_bg_drift: gr.drifts.iter().sum::<f64>() / n,
            terminal_norms: gr
                .trajectories
                .iter()
                .map(|t| t.terminal().norm_sq().sqrt())
                .collect(),
        });
    }

    let summary = RolloutSummary {
        seed: cfg.seed,
        eval_groups: cfg.eval_groups,
        group_size: cfg.grpo.group_size,
        groups,
    };
    let mut files = vec![
        write_artifact(out, "rollout_candidates.csv", &candidates_csv)?,
        write_artifact(out, "rollout_acd.csv", &acd_csv)?,
        write_artifact(
            out,
            "rollout_summary.json",
            &format!("{}\n", serde_json::to_string_pretty(&summary)?),
        )?,
    ];
    if let Some(dump) = attention_dump {
        files.push(write_artifact(
            out,
            "rollout_attention.json",
            &format!("{}\n", serde_json::to_string(&dump)?),
        )?);
    }
    Ok(files)
}

/// Final state of a training run.
#[derive(Debug, Serialize, Deserialize)]
pub struct Checkpoint {
    pub seed: u64,
    pub n_updates: usize,
    pub scheme: String,
    pub params: VelocityFieldParams,
}

/// Runs `n_updates` optimization steps, streaming one metrics row per
/// (update, group) and writing the final parameters as a checkpoint.
///
/// The noise groups are drawn from a seed that is fixed across updates, so
/// the run optimizes a frozen set of tasks and candidate draws; with
/// `learning_rate = 0` every update therefore reproduces identical rows.
/// On a non-finite abort the rows written so far remain on disk.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let geo = cfg.geometry.build()?;
    let mut params = cfg.build_params(&geo)?;
    let tasks = cfg.build_tasks(&geo)?;

    let mut csv = String::from("update,group,mean_reward,reward_std,bg_drift,mean_acd,objective\n");
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let metrics_path = out.join("train_metrics.csv");
    fs::write(&metrics_path, &csv)
        .with_context(|| format!("writing {}", metrics_path.display()))?;

    let update_seed = child_seed(cfg.seed, TRAIN_TAG);
    for u in 0..cfg.n_updates {
        match train_step(&params, &tasks, &cfg.grpo, update_seed) {
            Ok((next, metrics)) => {
                params = next;
                for (g, gm) in metrics.groups.iter().enumerate() {
                    let _ = writeln!(
                        csv,
                        "{u},{g},{},{},{},{},{}",
                        fmt_f(gm.mean_reward),
                        fmt_f(gm.reward_std),
                        fmt_f(gm.bg_drift),
                        fmt_f(gm.mean_acd),
                        fmt_f(gm.objective),
                    );
                }
                fs::write(&metrics_path, &csv)
                    .with_context(|| format!("writing {}", metrics_path.display()))?;
            }
            Err(e) => {
                fs::write(&metrics_path, &csv)
                    .with_context(|| format!("writing {}", metrics_path.display()))?;
                return Err(anyhow!(e).context(format!(
                    "training aborted at update {u}; partial metrics kept at {}",
                    metrics_path.display()
                )));
            }
        }
    }

    let checkpoint = Checkpoint {
        seed: cfg.seed,
        n_updates: cfg.n_updates,
        scheme: cfg.grpo.scheme.name().to_string(),
        params,
    };
    let ckpt_path = write_artifact(
        out,
        "checkpoint.json",
        &format!("{}\n", serde_json::to_string(&checkpoint)?),
    )?;
    Ok(vec![metrics_path, ckpt_path])
}

fn status_str(s: LabStatus) -> &'static str {
    match s {
        LabStatus::Pass => "pass",
        LabStatus::Fail => "fail",
        LabStatus::Info => "info",
    }
}

/// Runs the variance verification battery (the run seed overrides the
/// lab's own) and writes the report as JSON and CSV. Exits nonzero when
/// any checked row fails, with the files still written.
pub fn cmd_variance_lab(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    let mut lab = cfg.lab.clone();
    lab.seed = cfg.seed;
    let report = run_variance_lab(&lab).map_err(|e| anyhow!("variance lab: {e}"))?;

    let mut csv = String::from("name,measured,predicted,rel_gap,status\n");
    for row in &report.rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            row.name,
            fmt_f(row.measured),
            fmt_f(row.predicted),
            fmt_f(row.rel_gap),
            status_str(row.status),
        );
    }
    let files = vec![
        write_artifact(
            out,
            "variance_lab.json",
            &format!("{}\n", serde_json::to_string_pretty(&report)?),
        )?,
        write_artifact(out, "variance_lab.csv", &csv)?,
    ];
    if !report.passed() {
        bail!(
            "variance lab: {} of {} rows failed (see {})",
            report.n_failed(),
            report.rows.len(),
            files[0].display()
        );
    }
    Ok(files)
}

/// One row of the attention-contrast diagnostic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagRow {
    pub layer: usize,
    pub mean_positive: f64,
    pub mean_negative: f64,
    pub residual: f64,
}

/// Scans `diag.n_conditions` tasks; for each, draws `diag.n_rollouts`
/// independent rollouts, marks the highest task reward as positive and the
/// lowest as negative, and contrasts their per-layer concentration
/// densities. Writes one row per layer.
pub fn cmd_acd_diag(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<Vec<PathBuf>> {
    cfg.validate()?;
    if cfg.model.kind != ModelKind::Attn {
        bail!("model.kind: acd-diag needs attention maps; use the attn model");
    }
    let geo = cfg.geometry.build()?;
    let params = cfg.build_params(&geo)?;
    let all_layers: Vec<usize> = (0..geo.n_layers).collect();
    let diag_seed = child_seed(cfg.seed, DIAG_TAG);

    let mut pos_sums = vec![0.0; geo.n_layers];
    let mut neg_sums = vec![0.0; geo.n_layers];
    let mut res_sums = vec![0.0; geo.n_layers];
    for c in 0..cfg.diag.n_conditions {
        let task = make_task(&geo, &cfg.tasks.mask, cfg.seed, c as u64)
            .map_err(|e| anyhow!("tasks.mask: {e}"))?;
        let cond_seed = child_seed(diag_seed, c as u64);
        let mut rollouts = Vec::with_capacity(cfg.diag.n_rollouts);
        for r in 0..cfg.diag.n_rollouts {
            let mut rng = stream(cond_seed, r as u64);
            let eps = Latent::standard_normal(geo.grid, &mut rng);
            let traj = rollout(&params, &eps, &task.condition, cfg.t_eval)
                .map_err(|e| anyhow!("condition {c} rollout {r}: {e}"))?;
            let reward = task_reward(traj.terminal(), &task)
                .map_err(|e| anyhow!("condition {c} rollout {r}: {e}"))?;
            let record = AttentionRecord::from_trajectory(&traj)
                .map_err(|e| anyhow!("condition {c} rollout {r}: {e}"))?;
            rollouts.push((reward, record));
        }
        // First index wins ties, so the selection is deterministic.
        let mut best = 0;
        let mut worst = 0;
        for (r, (reward, _)) in rollouts.iter().enumerate() {
            if *reward > rollouts[best].0 {
                best = r;
            }
            if *reward < rollouts[worst].0 {
                worst = r;
            }
        }
        let positive = &rollouts[best].1;
        let negative = &rollouts[worst].1;
        let residuals = acd_layer_residual(
            std::slice::from_ref(positive),
            std::slice::from_ref(negative),
            task.mask.token(),
        )
        .map_err(|e| anyhow!("condition {c}: {e}"))?;
        let pos_report = aggregate_acd(positive, task.mask.token(), &all_layers)
            .map_err(|e| anyhow!("condition {c}: {e}"))?;
        let neg_report = aggregate_acd(negative, task.mask.token(), &all_layers)
            .map_err(|e| anyhow!("condition {c}: {e}"))?;
        for l in 0..geo.n_layers {
            pos_sums[l] += pos_report.layer_means[l];
            neg_sums[l] += neg_report.layer_means[l];
            res_sums[l] += residuals[l].1;
        }
    }

    let n = cfg.diag.n_conditions as f64;
    let rows: Vec<DiagRow> = (0..geo.n_layers)
        .map(|l| DiagRow {
            layer: l,
            mean_positive: pos_sums[l] / n,
            mean_negative: neg_sums[l] / n,
            residual: res_sums[l] / n,
        })
        .collect();
    let mut csv = String::from("layer,mean_positive,mean_negative,residual\n");
    for row in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{}",
            row.layer,
            fmt_f(row.mean_positive),
            fmt_f(row.mean_negative),
            fmt_f(row.residual),
        );
    }

    #[derive(Serialize)]
    struct DiagSummary<'a> {
        seed: u64,
        n_conditions: usize,
        n_rollouts: usize,
        rows: &'a [DiagRow],
    }
    let summary = DiagSummary {
        seed: cfg.seed,
        n_conditions: cfg.diag.n_conditions,
        n_rollouts: cfg.diag.n_rollouts,
        rows: &rows,
    };
    Ok(vec![
        write_artifact(out, "acd_residual.csv", &csv)?,
        write_artifact(
            out,
            "acd_diag.json",
            &format!("{}\n", serde_json::to_string_pretty(&summary)?),
        )?,
    ])
}

/// Re-exported so integration tests can parse the lab JSON.
pub use rcgrpo_core::variance::{LabReport, LabRow};
