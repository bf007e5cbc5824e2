//! End-to-end tests of the experiment harness: pinned defaults, field-named
//! validation, byte-identical reruns, metric streaming, and the compiled
//! binary's exit behavior.

use std::fs;
use std::path::Path;
use std::process::Command;

use rcgrpo_cli::{
    cmd_acd_diag, cmd_rollout, cmd_train, cmd_variance_lab, Checkpoint, DiagConfig,
    ExperimentConfig, GeometryConfig, LabReport, ModelKind,
};
use rcgrpo_core::env::MaskSpec;
use rcgrpo_core::grpo::{NormalizationScope, SurrogateKind};
use rcgrpo_core::noise::PerturbationScheme;
use rcgrpo_core::variance::{LabConfig, LabStatus};

/// Small geometry and counts so each command finishes in milliseconds.
fn tiny_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        seed,
        geometry: GeometryConfig {
            n_tokens: 4,
            token_dim: 2,
            n_txt: 2,
            d_txt: 3,
            n_layers: 2,
        },
        ..ExperimentConfig::default()
    };
    cfg.grpo.group_size = 3;
    cfg.grpo.anchors_per_group = 1;
    cfg.grpo.n_steps = 3;
    cfg.grpo.groups_per_update = 2;
    cfg.grpo.selected_layers = vec![0, 1];
    cfg.grpo.scheme = PerturbationScheme::Rdp {
        alpha_edit: 0.3,
        alpha_base: 0.05,
    };
    cfg.tasks.n_tasks = 2;
    cfg.tasks.mask = MaskSpec::Rect {
        row0: 0,
        col0: 0,
        rows: 1,
        cols: 2,
    };
    cfg.n_updates = 2;
    cfg.t_eval = 3;
    cfg.eval_groups = 2;
    cfg.diag = DiagConfig {
        n_conditions: 3,
        n_rollouts: 2,
    };
    cfg
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("reading {name}: {e}"))
}

fn csv_lines(text: &str) -> Vec<&str> {
    text.lines().collect()
}

#[test]
fn default_config_matches_pinned_values() {
    let cfg = ExperimentConfig::default();
    assert_eq!(cfg.geometry.n_tokens, 64);
    assert_eq!(cfg.geometry.token_dim, 2);
    assert_eq!(cfg.geometry.n_txt, 4);
    assert_eq!(cfg.geometry.d_txt, 4);
    assert_eq!(cfg.geometry.n_layers, 4);
    assert_eq!(cfg.grpo.group_size, 8);
    assert_eq!(cfg.grpo.anchors_per_group, 2);
    assert_eq!(cfg.grpo.n_steps, 8);
    assert_eq!(cfg.grpo.eps_clip, 0.2);
    assert_eq!(cfg.grpo.beta_kl, 0.0);
    assert_eq!(cfg.grpo.learning_rate, 3e-4);
    assert_eq!(cfg.grpo.lambda_task, 0.5);
    assert_eq!(cfg.grpo.lambda_acd, 0.5);
    assert_eq!(cfg.grpo.bandwidths.tau_edit(), 0.9);
    assert_eq!(cfg.grpo.bandwidths.tau_base(), 1.1);
    assert_eq!(cfg.grpo.selected_layers, vec![2, 3]);
    assert_eq!(cfg.grpo.normalization, NormalizationScope::Minibatch);
    assert_eq!(cfg.grpo.surrogate, SurrogateKind::RegionNormalized);
    assert_eq!(
        cfg.grpo.scheme,
        PerturbationScheme::Rdp {
            alpha_edit: 0.3,
            alpha_base: 1e-4
        }
    );
    assert_eq!(cfg.tasks.n_tasks, 4);
    assert_eq!(cfg.tasks.mask, MaskSpec::default_rect());
    assert_eq!(cfg.n_updates, 200);
    assert_eq!(cfg.t_eval, 8);
    assert_eq!(cfg.eval_groups, 4);
    assert_eq!(cfg.model.kind, ModelKind::Attn);
    assert_eq!(cfg.seed, 0);
    cfg.validate().expect("defaults must validate");
}

type Mutation = Box<dyn Fn(&mut ExperimentConfig)>;

#[test]
fn validation_errors_name_offending_fields() {
    let cases: Vec<(&str, Mutation)> = vec![
        (
            "grpo.selected_layers",
            Box::new(|c| c.grpo.selected_layers = vec![7]),
        ),
        (
            "anchors_per_group",
            Box::new(|c| c.grpo.anchors_per_group = 9),
        ),
        ("t_eval", Box::new(|c| c.t_eval = 0)),
        ("eval_groups", Box::new(|c| c.eval_groups = 0)),
        ("tasks.n_tasks", Box::new(|c| c.tasks.n_tasks = 0)),
        (
            "tasks.mask",
            Box::new(|c| {
                c.tasks.mask = MaskSpec::Rect {
                    row0: 40,
                    col0: 0,
                    rows: 1,
                    cols: 1,
                }
            }),
        ),
        ("diag.n_conditions", Box::new(|c| c.diag.n_conditions = 0)),
        ("model.state_scale", Box::new(|c| c.model.state_scale = -1.0)),
        ("lab", Box::new(|c| c.lab.n_samples = 1)),
        ("beta_kl", Box::new(|c| c.grpo.beta_kl = 0.1)),
    ];
    for (needle, mutate) in cases {
        let mut cfg = ExperimentConfig::default();
        mutate(&mut cfg);
        let err = cfg
            .validate()
            .expect_err(&format!("expected rejection naming {needle}"))
            .to_string();
        assert!(err.contains(needle), "error {err:?} does not name {needle}");
    }
}

#[test]
fn rollout_reruns_are_byte_identical() {
    let cfg = tiny_config(11);
    let dir_a = tempfile::tempdir().unwrap();
    let dir_b = tempfile::tempdir().unwrap();
    let files_a = cmd_rollout(&cfg, dir_a.path()).unwrap();
    let files_b = cmd_rollout(&cfg, dir_b.path()).unwrap();
    assert_eq!(files_a.len(), 4, "candidates, acd, summary, attention");
    for (a, b) in files_a.iter().zip(&files_b) {
        assert_eq!(a.file_name(), b.file_name());
        assert_eq!(
            fs::read(a).unwrap(),
            fs::read(b).unwrap(),
            "rerun changed {}",
            a.display()
        );
    }

    let candidates = read(dir_a.path(), "rollout_candidates.csv");
    let lines = csv_lines(&candidates);
    assert_eq!(
        lines[0],
        "group,candidate,is_reference,task_reward,acd_reward,bg_drift"
    );
    assert_eq!(lines.len(), 1 + cfg.eval_groups * cfg.grpo.group_size);
    for g in 0..cfg.eval_groups {
        let refs = lines[1..]
            .iter()
            .filter(|l| l.starts_with(&format!("{g},")))
            .filter(|l| l.split(',').nth(2) == Some("1"))
            .count();
        assert_eq!(refs, 1, "group {g} must flag exactly one reference");
    }

    let acd = read(dir_a.path(), "rollout_acd.csv");
    // groups x candidates x layers x steps data rows.
    assert_eq!(csv_lines(&acd).len(), 1 + 2 * 3 * 2 * 3);

    let summary: serde_json::Value =
        serde_json::from_str(&read(dir_a.path(), "rollout_summary.json")).unwrap();
    assert_eq!(summary["groups"].as_array().unwrap().len(), 2);
    assert_eq!(summary["group_size"], 3);

    let attention: serde_json::Value =
        serde_json::from_str(&read(dir_a.path(), "rollout_attention.json")).unwrap();
    assert_eq!(attention["group"], 0);
    assert_eq!(attention["candidate"], 0);
    let steps = attention["steps"].as_array().unwrap();
    assert_eq!(steps.len(), cfg.t_eval);
    // Each step holds n_layers matrices of n_txt rows.
    assert_eq!(steps[0].as_array().unwrap().len(), 2);
    assert_eq!(steps[0][0].as_array().unwrap().len(), 2);
    assert_eq!(steps[0][0][0].as_array().unwrap().len(), 4);
}

#[test]
fn linear_models_skip_attention_artifacts() {
    let mut cfg = tiny_config(3);
    cfg.model.kind = ModelKind::LinearLocal;
    let dir = tempfile::tempdir().unwrap();
    let files = cmd_rollout(&cfg, dir.path()).unwrap();
    assert_eq!(files.len(), 3, "no attention dump for linear fields");
    assert!(!dir.path().join("rollout_attention.json").exists());
    let acd = read(dir.path(), "rollout_acd.csv");
    assert_eq!(csv_lines(&acd), vec!["group,candidate,layer,step,acd"]);
    // Concentration rewards fall back to zero without attention maps.
    let candidates = read(dir.path(), "rollout_candidates.csv");
    for line in &csv_lines(&candidates)[1..] {
        assert_eq!(line.split(',').nth(4), Some("0.00000000e0"));
    }
}

#[test]
fn zero_amplitude_candidates_share_one_reward() {
    let mut cfg = tiny_config(5);
    cfg.grpo.scheme = PerturbationScheme::Rdp {
        alpha_edit: 0.0,
        alpha_base: 0.0,
    };
    let dir = tempfile::tempdir().unwrap();
    cmd_rollout(&cfg, dir.path()).unwrap();
    let candidates = read(dir.path(), "rollout_candidates.csv");
    for g in 0..cfg.eval_groups {
        let rewards: Vec<&str> = csv_lines(&candidates)[1..]
            .iter()
            .filter(|l| l.starts_with(&format!("{g},")))
            .map(|l| l.split(',').nth(3).unwrap())
            .collect();
        assert_eq!(rewards.len(), 3);
        assert!(
            rewards.iter().all(|r| *r == rewards[0]),
            "zero amplitudes must reproduce the anchor exactly: {rewards:?}"
        );
    }
}

#[test]
fn train_streams_metrics_and_checkpoints() {
    let mut cfg = tiny_config(17);
    cfg.n_updates = 0;
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(
        read(dir.path(), "train_metrics.csv"),
        "update,group,mean_reward,reward_std,bg_drift,mean_acd,objective\n",
        "zero updates leave a header-only metrics file"
    );

    cfg.n_updates = 2;
    let dir = tempfile::tempdir().unwrap();
    let files = cmd_train(&cfg, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let metrics = read(dir.path(), "train_metrics.csv");
    let lines = csv_lines(&metrics);
    assert_eq!(lines.len(), 1 + 2 * 2, "one row per (update, group)");
    for line in &lines[1..] {
        assert_eq!(line.split(',').count(), 7);
    }
    assert!(lines[1].starts_with("0,0,"));
    assert!(lines[4].starts_with("1,1,"));

    let checkpoint: Checkpoint =
        serde_json::from_str(&read(dir.path(), "checkpoint.json")).unwrap();
    assert_eq!(checkpoint.n_updates, 2);
    assert_eq!(checkpoint.scheme, "rdp");
    assert_eq!(checkpoint.seed, 17);
    // 2 layers x (query: 3x2, key: 2x2, output: 3x2) plus the dense 8x8
    // state matrix for the 8-dimensional latent.
    assert_eq!(checkpoint.params.n_params(), 2 * (6 + 4 + 6) + 64);
}

#[test]
fn zero_learning_rate_freezes_metric_rows() {
    let mut cfg = tiny_config(23);
    cfg.grpo.learning_rate = 0.0;
    cfg.n_updates = 3;
    let dir = tempfile::tempdir().unwrap();
    cmd_train(&cfg, dir.path()).unwrap();
    let metrics = read(dir.path(), "train_metrics.csv");
    let mut per_group: Vec<Vec<&str>> = vec![Vec::new(); cfg.grpo.groups_per_update];
    for line in &csv_lines(&metrics)[1..] {
        let (_, rest) = line.split_once(',').unwrap();
        let g: usize = rest.split(',').next().unwrap().parse().unwrap();
        per_group[g].push(rest);
    }
    for (g, rows) in per_group.iter().enumerate() {
        assert_eq!(rows.len(), 3);
        assert!(
            rows.iter().all(|r| *r == rows[0]),
            "group {g} rows drifted under zero learning rate: {rows:?}"
        );
    }
}

#[test]
fn variance_lab_artifacts_roundtrip() {
    let cfg = ExperimentConfig {
        seed: 0,
        lab: LabConfig {
            n_samples: 4000,
            bridge_samples: 64,
            ..LabConfig::default()
        },
        ..ExperimentConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    cmd_variance_lab(&cfg, dir.path()).expect("reduced battery must pass");

    let report: LabReport =
        serde_json::from_str(&read(dir.path(), "variance_lab.json")).unwrap();
    assert!(report.passed());
    let reparsed: LabReport =
        serde_json::from_str(&serde_json::to_string(&report).unwrap()).unwrap();
    assert_eq!(report, reparsed, "lab JSON must round-trip exactly");

    let suppression = report
        .rows
        .iter()
        .find(|r| r.name == "identity/bg_suppression")
        .expect("suppression row present");
    assert_eq!(suppression.status, LabStatus::Pass);
    let expected = (0.05f64 / 0.3).powi(2);
    assert!((suppression.predicted - expected).abs() < 1e-12);

    let csv = read(dir.path(), "variance_lab.csv");
    let lines = csv_lines(&csv);
    assert_eq!(lines[0], "name,measured,predicted,rel_gap,status");
    assert_eq!(lines.len(), 1 + report.rows.len());
    assert!(lines[1..].iter().any(|l| l.contains(",pass")));
}

#[test]
fn acd_diag_writes_one_row_per_layer() {
    let cfg = tiny_config(31);
    let dir = tempfile::tempdir().unwrap();
    let files = cmd_acd_diag(&cfg, dir.path()).unwrap();
    assert_eq!(files.len(), 2);
    let csv = read(dir.path(), "acd_residual.csv");
    let lines = csv_lines(&csv);
    assert_eq!(lines[0], "layer,mean_positive,mean_negative,residual");
    assert_eq!(lines.len(), 1 + cfg.geometry.n_layers);
    for (l, line) in lines[1..].iter().enumerate() {
        assert!(line.starts_with(&format!("{l},")));
    }

    let mut cfg = cfg;
    cfg.model.kind = ModelKind::LinearLocal;
    let err = cmd_acd_diag(&cfg, dir.path()).unwrap_err().to_string();
    assert!(err.contains("model.kind"), "{err}");
}

#[test]
fn single_rollout_contrast_is_exactly_zero() {
    let mut cfg = tiny_config(37);
    cfg.diag.n_rollouts = 1;
    let dir = tempfile::tempdir().unwrap();
    cmd_acd_diag(&cfg, dir.path()).unwrap();
    let csv = read(dir.path(), "acd_residual.csv");
    for line in &csv_lines(&csv)[1..] {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(
            fields[1], fields[2],
            "positive and negative collapse to the same rollout"
        );
        assert_eq!(fields[3], "0.00000000e0");
    }
}

#[test]
fn binary_runs_end_to_end() {
    let bin = env!("CARGO_BIN_EXE_rcgrpo");
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("tiny.json");
    fs::write(
        &config_path,
        serde_json::to_string(&tiny_config(1)).unwrap(),
    )
    .unwrap();

    let out = dir.path().join("run");
    let status = Command::new(bin)
        .args(["rollout", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out)
        .args(["--seed", "9"])
        .env("RCG_THREADS", "1")
        .output()
        .unwrap();
    assert!(status.status.success(), "{status:?}");
    let stdout = String::from_utf8(status.stdout).unwrap();
    assert!(stdout.contains("rollout_candidates.csv"), "{stdout}");
    assert!(out.join("rollout_summary.json").exists());

    // A scheme override flips every reference flag off (global resampling
    // perturbs all candidates).
    let out_global = dir.path().join("run_global");
    let status = Command::new(bin)
        .args(["rollout", "--config"])
        .arg(&config_path)
        .arg("--out")
        .arg(&out_global)
        .args(["--scheme", "global"])
        .output()
        .unwrap();
    assert!(status.status.success(), "{status:?}");
    let candidates = fs::read_to_string(out_global.join("rollout_candidates.csv")).unwrap();
    assert!(candidates
        .lines()
        .skip(1)
        .all(|l| l.split(',').nth(2) == Some("0")));

    // Invalid configs exit nonzero and name the field.
    let bad_path = dir.path().join("bad.json");
    fs::write(&bad_path, "{\"t_eval\": 0}").unwrap();
    let status = Command::new(bin)
        .args(["train", "--config"])
        .arg(&bad_path)
        .arg("--out")
        .arg(dir.path().join("bad_run"))
        .output()
        .unwrap();
    assert!(!status.status.success());
    let stderr = String::from_utf8(status.stderr).unwrap();
    assert!(stderr.contains("t_eval"), "{stderr}");

    // Unknown fields are load errors, not silent drops.
    let typo_path = dir.path().join("typo.json");
    fs::write(&typo_path, "{\"n_update\": 3}").unwrap();
    let status = Command::new(bin)
        .args(["rollout", "--config"])
        .arg(&typo_path)
        .output()
        .unwrap();
    assert!(!status.status.success());
    let stderr = String::from_utf8(status.stderr).unwrap();
    assert!(stderr.contains("n_update"), "{stderr}");
}
