//! End-to-end command tests: every subcommand through `cli::run`, exit
//! codes, flag plumbing, artifact determinism, and one spawn of the real
//! binary.

use std::path::{Path, PathBuf};

use cpn::cli::{exit_code, run};
use cpn::{EpisodeSpec, RunConfig};

/// Small, fast config rooted at `dir`. Synthetic scale is chosen so the
/// whole pipeline finishes in seconds.
fn test_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig {
        seed: 11,
        ..RunConfig::default()
    };
    cfg.paths.embeddings = dir.join("data/embeddings.bin");
    cfg.paths.attributes = dir.join("data/attributes.csv");
    cfg.paths.split = dir.join("data/split.json");
    cfg.paths.truth = dir.join("data/truth.bin");
    cfg.paths.pretrain_checkpoint = dir.join("out/pretrain.ckpt");
    cfg.paths.meta_checkpoint = dir.join("out/meta.ckpt");
    cfg.paths.pretrain_log = dir.join("out/pretrain_log.jsonl");
    cfg.paths.meta_log = dir.join("out/meta_log.jsonl");
    cfg.paths.eval_report = dir.join("out/eval.json");
    cfg.paths.ablation_report = dir.join("out/ablation.json");
    cfg.paths.viz = dir.join("out/viz.csv");
    cfg.synth.m = 5;
    cfg.synth.d = 12;
    cfg.synth.n_base = 8;
    cfg.synth.n_val = 4;
    cfg.synth.n_novel = 4;
    cfg.synth.per_class = 12;
    cfg.synth.sigma = 0.08;
    cfg.synth.min_angle = 0.4;
    cfg.pretrain.epochs = 6;
    cfg.pretrain.batch_size = 32;
    cfg.meta.epochs = 2;
    cfg.meta.episodes_per_epoch = 8;
    cfg.meta.val_episodes = 12;
    cfg.train_episode = EpisodeSpec {
        n_way: 3,
        k_shot: 1,
        n_query: 5,
    };
    cfg.eval_episode = EpisodeSpec {
        n_way: 3,
        k_shot: 1,
        n_query: 5,
    };
    cfg.eval_episodes = 60;
    cfg.viz.n_way = 3;
    cfg.viz.k_shot = 1;
    cfg.viz.n_query = 4;
    cfg
}

fn save_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("run.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn cli(cfg_path: &Path, args: &[&str]) -> i32 {
    let mut argv = vec!["cpn"];
    argv.extend_from_slice(args);
    argv.push("--config");
    let cfg_str = cfg_path.to_str().unwrap();
    argv.push(cfg_str);
    run(argv)
}

/// Runs synth, pretrain, and metatrain; returns the config and its path.
fn pipeline(dir: &Path) -> (RunConfig, PathBuf) {
    let cfg = test_config(dir);
    let path = save_config(dir, &cfg);
    assert_eq!(cli(&path, &["synth"]), exit_code::SUCCESS);
    assert_eq!(cli(&path, &["pretrain"]), exit_code::SUCCESS);
    assert_eq!(cli(&path, &["metatrain"]), exit_code::SUCCESS);
    (cfg, path)
}

fn read(path: &Path) -> Vec<u8> {
    std::fs::read(path).unwrap_or_else(|e| panic!("cannot read {}: {e}", path.display()))
}

#[test]
fn full_pipeline_succeeds_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = pipeline(dir.path());
    assert_eq!(cli(&path, &["eval"]), exit_code::SUCCESS);

    let first: Vec<Vec<u8>> = [
        &cfg.paths.embeddings,
        &cfg.paths.attributes,
        &cfg.paths.split,
        &cfg.paths.truth,
        &cfg.paths.pretrain_checkpoint,
        &cfg.paths.meta_checkpoint,
        &cfg.paths.pretrain_log,
        &cfg.paths.meta_log,
        &cfg.paths.eval_report,
    ]
    .iter()
    .map(|p| read(p))
    .collect();

    for command in ["synth", "pretrain", "metatrain", "eval"] {
        assert_eq!(cli(&path, &[command]), exit_code::SUCCESS);
    }
    let second: Vec<Vec<u8>> = [
        &cfg.paths.embeddings,
        &cfg.paths.attributes,
        &cfg.paths.split,
        &cfg.paths.truth,
        &cfg.paths.pretrain_checkpoint,
        &cfg.paths.meta_checkpoint,
        &cfg.paths.pretrain_log,
        &cfg.paths.meta_log,
        &cfg.paths.eval_report,
    ]
    .iter()
    .map(|p| read(p))
    .collect();
    assert_eq!(first, second);
}

#[test]
fn train_logs_have_the_documented_line_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, _) = pipeline(dir.path());

    let pre: Vec<serde_json::Value> = std::fs::read_to_string(&cfg.paths.pretrain_log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(pre.len(), cfg.pretrain.epochs);
    for (i, entry) in pre.iter().enumerate() {
        assert_eq!(entry["epoch"], i + 1);
        assert!(entry["train_loss"].is_f64());
        assert!(entry["val_acc"].is_null());
    }

    // Meta log: epoch-0 pre-trained baseline plus one line per epoch.
    let meta: Vec<serde_json::Value> = std::fs::read_to_string(&cfg.paths.meta_log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(meta.len(), cfg.meta.epochs + 1);
    assert_eq!(meta[0]["epoch"], 0);
    assert!(meta[0]["train_loss"].is_null());
    for (i, entry) in meta.iter().enumerate() {
        assert_eq!(entry["epoch"], i);
        assert!(entry["val_acc"].is_f64());
    }
}

#[test]
fn eval_flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = pipeline(dir.path());
    assert_eq!(
        cli(
            &path,
            &["eval", "--episodes", "17", "--shots", "5", "--seed", "99"]
        ),
        exit_code::SUCCESS
    );
    let wrapper: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg.paths.eval_report).unwrap()).unwrap();
    assert_eq!(wrapper["report"]["n_episodes"], 17);
    assert_eq!(wrapper["report"]["spec"]["k_shot"], 5);
    assert_eq!(wrapper["report"]["seed"], 99);
    // The resolved config is embedded, reflecting the seed override.
    assert_eq!(wrapper["config"]["seed"], 99);
    assert_eq!(wrapper["command"], "eval");
}

#[test]
fn thread_cap_does_not_change_the_report() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = pipeline(dir.path());
    let report_with = |args: &[&str]| -> serde_json::Value {
        assert_eq!(cli(&path, args), exit_code::SUCCESS);
        let wrapper: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&cfg.paths.eval_report).unwrap())
                .unwrap();
        wrapper["report"].clone()
    };
    let single = report_with(&["eval", "--threads", "1"]);
    let several = report_with(&["eval", "--threads", "4"]);
    assert_eq!(single, several);
}

#[test]
fn missing_artifacts_exit_five() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let path = save_config(dir.path(), &cfg);

    // No data files at all.
    assert_eq!(cli(&path, &["pretrain"]), exit_code::MISSING_ARTIFACT);
    assert_eq!(cli(&path, &["eval"]), exit_code::MISSING_ARTIFACT);

    assert_eq!(cli(&path, &["synth"]), exit_code::SUCCESS);
    // Data exists, checkpoints do not.
    assert_eq!(cli(&path, &["metatrain"]), exit_code::MISSING_ARTIFACT);
    assert_eq!(cli(&path, &["ablate"]), exit_code::MISSING_ARTIFACT);
    assert_eq!(cli(&path, &["export-viz"]), exit_code::MISSING_ARTIFACT);

    assert_eq!(cli(&path, &["pretrain"]), exit_code::SUCCESS);
    // Simple variants need only the stage-one checkpoint; fused ones still
    // exit five until metatrain has run.
    assert_eq!(
        cli(&path, &["eval", "--variant", "lcp"]),
        exit_code::SUCCESS
    );
    assert_eq!(
        cli(&path, &["eval", "--variant", "adaptive"]),
        exit_code::MISSING_ARTIFACT
    );
}

#[test]
fn invalid_config_values_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = test_config(dir.path());
    cfg.synth.sigma = -1.0;
    let path = save_config(dir.path(), &cfg);
    assert_eq!(cli(&path, &["synth"]), exit_code::CONFIG);

    // Unknown fields are config errors before any command logic runs.
    let bogus = dir.path().join("bogus.json");
    std::fs::write(&bogus, r#"{"no_such_field": 1}"#).unwrap();
    assert_eq!(cli(&bogus, &["synth"]), exit_code::CONFIG);

    // A config whose meta stage is invalid fails metatrain but not synth.
    let mut cfg = test_config(dir.path());
    cfg.meta.lr = -0.5;
    let path = save_config(dir.path(), &cfg);
    assert_eq!(cli(&path, &["synth"]), exit_code::CONFIG);
}

#[test]
fn gradcheck_passes_on_seeded_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = test_config(dir.path());
    let path = save_config(dir.path(), &cfg);
    assert_eq!(
        cli(&path, &["gradcheck", "--points", "3"]),
        exit_code::SUCCESS
    );
}

#[test]
fn ablate_writes_the_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = pipeline(dir.path());
    assert_eq!(
        cli(&path, &["ablate", "--episodes", "20"]),
        exit_code::SUCCESS
    );
    let wrapper: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&cfg.paths.ablation_report).unwrap())
            .unwrap();
    let rows = wrapper["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 10);
    assert_eq!(rows[0]["label"], "ricp");
    assert_eq!(rows[6]["label"], "adaptive");
    assert_eq!(rows[9]["label"], "gen-input=comp");
    for row in rows {
        assert_eq!(row["one_shot"]["n_episodes"], 20);
    }
}

#[test]
fn export_viz_writes_one_row_per_query_and_prototype() {
    let dir = tempfile::tempdir().unwrap();
    let (cfg, path) = pipeline(dir.path());
    assert_eq!(cli(&path, &["export-viz"]), exit_code::SUCCESS);
    let text = std::fs::read_to_string(&cfg.paths.viz).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Header, 3x4 queries, 3 variants x 3 classes of prototypes.
    assert_eq!(lines.len(), 1 + 12 + 9);
    assert!(lines[0].starts_with("role,variant,class_id,f_1"));
}

#[test]
fn spawned_binary_agrees_with_in_process_runs() {
    let in_dir = tempfile::tempdir().unwrap();
    let cfg = test_config(in_dir.path());
    let path = save_config(in_dir.path(), &cfg);
    assert_eq!(cli(&path, &["synth"]), exit_code::SUCCESS);

    let out_dir = tempfile::tempdir().unwrap();
    let spawn_cfg = test_config(out_dir.path());
    let spawn_path = save_config(out_dir.path(), &spawn_cfg);
    let output = std::process::Command::new(env!("CARGO_BIN_EXE_cpn"))
        .args(["synth", "--config", spawn_path.to_str().unwrap()])
        .output()
        .unwrap();
    assert!(
        output.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&output.stderr)
    );
    let report: serde_json::Value = serde_json::from_slice(&output.stdout).unwrap();
    assert_eq!(report["command"], "synth");
    assert_eq!(report["records"], 16 * 12);

    // Same seed, different processes: identical data files.
    assert_eq!(
        read(&cfg.paths.embeddings),
        read(&spawn_cfg.paths.embeddings)
    );
    assert_eq!(read(&cfg.paths.truth), read(&spawn_cfg.paths.truth));
}
