//! Process-level tests: spawn the real binary and check stdout, stderr, and
//! the exit-code contract (0 success, 1 usage/config, 2 data, 3 numeric).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dha::checkpoint::save_checkpoint;
use dha::config::RunConfig;
use dha::data::synth_generate;
use dha::pipeline;

fn dha_bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_dha"))
}

fn base_toml() -> String {
    r#"
seed = 42

[data]
format = "synthetic"
split_ratio = 0.25

[data.synthetic]
users = 24
items = 16
d_true = 2
noise = 0.05
side_corr = 1.0
positives_per_user = 6
user_side_dim = 5
item_side_dim = 5
vocab_tokens = 4
seq_len = 3

[model]
d = 3

[[components.user]]
kind = "static"
source = "synthetic:side"
corruption = 0.1

[[components.user]]
kind = "sequential"
source = "synthetic:sequences"
time_steps = 3
embedding_dim = 3

[[components.item]]
kind = "static"
source = "synthetic:side"
corruption = 0.1

[hyperparams]
lambda_f = 0.5
lambda_w = 0.001
alpha = 20.0

[schedule]
alternations = 2
epochs = 1
pretrain_epochs = 1
learning_rate = 0.05
user_batch = 8
item_batch = 8

[eval]
m_values = [5, 10]
"#
    .to_string()
}

fn write_config(dir: &Path, toml: &str) -> PathBuf {
    let path = dir.join("run.toml");
    std::fs::write(&path, toml).unwrap();
    path
}

fn stdout_str(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

fn stderr_str(out: &Output) -> String {
    String::from_utf8(out.stderr.clone()).unwrap()
}

#[test]
fn missing_config_names_the_path_and_exits_data_error() {
    let out = dha_bin()
        .args(["train", "--config", "/no/such/run.toml", "--out", "/tmp/x"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("/no/such/run.toml"));
}

#[test]
fn usage_error_exits_one() {
    let out = dha_bin().arg("train").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = dha_bin().output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let out = dha_bin().arg("--help").output().unwrap();
    assert_eq!(out.status.code(), Some(0));
}

#[test]
fn train_writes_checkpoints_and_full_loss_log() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_toml());
    let out_dir = dir.path().join("out");
    let out = dha_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    assert!(out_dir.join("checkpoint-01.dha").exists());
    assert!(out_dir.join("checkpoint-02.dha").exists());
    assert!(out_dir.join("model.dha").exists());
    assert!(out_dir.join("config.toml").exists());

    // alternations × epochs = 2 × 1 network-epoch entries.
    let log = std::fs::read_to_string(out_dir.join("loss_log.tsv")).unwrap();
    let epochs = log
        .lines()
        .skip(1)
        .filter(|l| l.split('\t').nth(2) == Some("epoch"))
        .count();
    assert_eq!(epochs, 2);
}

#[test]
fn same_config_and_seed_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_toml());
    for sub in ["a", "b"] {
        let out = dha_bin()
            .args(["train", "--config"])
            .arg(&cfg)
            .arg("--out")
            .arg(dir.path().join(sub))
            .output()
            .unwrap();
        assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    }
    for name in ["checkpoint-01.dha", "checkpoint-02.dha", "model.dha"] {
        let a = std::fs::read(dir.path().join("a").join(name)).unwrap();
        let b = std::fs::read(dir.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical runs");
    }
}

#[test]
fn eval_prints_exactly_the_configured_metric_lines() {
    let dir = tempfile::tempdir().unwrap();
    let toml = base_toml().replace("m_values = [5, 10]", "m_values = [50, 100]");
    let cfg = write_config(dir.path(), &toml);
    let out_dir = dir.path().join("out");
    let out = dha_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));

    let out = dha_bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("model.dha"))
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let stdout = stdout_str(&out);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4, "stdout: {stdout}");
    assert!(lines[0].starts_with("recall\t50\t"));
    assert!(lines[1].starts_with("recall\t100\t"));
    assert!(lines[2].starts_with("map\t50\t"));
    assert!(lines[3].starts_with("map\t100\t"));
}

#[test]
fn eval_rejects_checkpoint_from_different_d() {
    let dir = tempfile::tempdir().unwrap();
    let cfg3 = write_config(dir.path(), &base_toml());
    let out_dir = dir.path().join("out");
    let out = dha_bin()
        .args(["train", "--config"])
        .arg(&cfg3)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let toml4 = base_toml().replace("d = 3", "d = 4");
    let cfg4 = dir.path().join("run4.toml");
    std::fs::write(&cfg4, toml4).unwrap();
    let out = dha_bin()
        .args(["eval", "--config"])
        .arg(&cfg4)
        .arg("--checkpoint")
        .arg(out_dir.join("model.dha"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("config mismatch"));
}

#[test]
fn eval_reports_perfect_recall_for_oracle_factors() {
    let dir = tempfile::tempdir().unwrap();
    // Noiseless planted data whose latent width matches the model's, so the
    // generator's true factors can be written straight into a checkpoint.
    let toml = base_toml()
        .replace("noise = 0.05", "noise = 0.0")
        .replace("d_true = 2", "d_true = 3");
    let cfg_path = write_config(dir.path(), &toml);
    let cfg = RunConfig::from_toml(&toml).unwrap();

    let out_dir = dir.path().join("out");
    let (outcome, prepared) = pipeline::train_run(&cfg, &out_dir).unwrap();
    let synth = synth_generate(cfg.data.synthetic.as_ref().unwrap(), cfg.seed).unwrap();

    // Swap the learned factors for the generator's, mapping item rows into
    // the dataset's compressed index space.
    let mut state = outcome.state;
    let mut u = state.u.clone();
    for (idx, &id) in prepared.user_ids.iter().enumerate() {
        for k in 0..u.cols() {
            u.set(idx, k, synth.true_u.get(id as usize, k));
        }
    }
    let mut v = state.v.clone();
    for (idx, &id) in prepared.item_ids.iter().enumerate() {
        for k in 0..v.cols() {
            v.set(idx, k, synth.true_v.get(id as usize, k));
        }
    }
    state.u = u;
    state.v = v;
    let oracle_path = dir.path().join("oracle.dha");
    save_checkpoint(&state, &cfg.digest(), &oracle_path).unwrap();

    let out = dha_bin()
        .args(["eval", "--config"])
        .arg(&cfg_path)
        .arg("--checkpoint")
        .arg(&oracle_path)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    assert!(
        stdout_str(&out).contains("recall\t10\t1.000000"),
        "stdout: {}",
        stdout_str(&out)
    );
}

#[test]
fn recommend_prints_ranked_lines_and_rejects_unknown_user() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_toml());
    let out_dir = dir.path().join("out");
    let out = dha_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(out.status.success());

    let model = out_dir.join("model.dha");
    let out = dha_bin()
        .args(["recommend", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&model)
        .args(["--user", "0", "--top-m", "1"])
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let stdout = stdout_str(&out);
    assert_eq!(stdout.lines().count(), 1);
    assert!(stdout.starts_with("1\t"), "stdout: {stdout}");

    let out = dha_bin()
        .args(["recommend", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&model)
        .args(["--user", "0", "--top-m", "4"])
        .output()
        .unwrap();
    let stdout = stdout_str(&out);
    let rows: Vec<Vec<&str>> = stdout.lines().map(|l| l.split('\t').collect()).collect();
    assert_eq!(rows.len(), 4);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row.len(), 3);
        assert_eq!(row[0].parse::<usize>().unwrap(), k + 1);
        row[1].parse::<u32>().unwrap();
        row[2].parse::<f64>().unwrap();
    }

    let out = dha_bin()
        .args(["recommend", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(&model)
        .args(["--user", "9999"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_str(&out).contains("unknown user 9999"));
}

#[test]
fn gradcheck_passes_clean_and_fails_when_sabotaged() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_toml());
    let out = dha_bin()
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let stdout = stdout_str(&out);
    assert!(stdout.lines().count() > 10);
    assert!(stdout.lines().all(|l| l.ends_with("PASS")));

    let out = dha_bin()
        .args(["gradcheck", "--config"])
        .arg(&cfg)
        .env("DHA_GRADCHECK_CORRUPT", "user.0.layer.0.w")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    let stdout = stdout_str(&out);
    assert!(stdout.contains("user.0.layer.0.w") && stdout.contains("FAIL"));
    assert!(stderr_str(&out).contains("gradient check failed"));
}

#[test]
fn grid_emits_one_line_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let toml = base_toml() + "\n[grid]\nlambda_f = [0.5, 0.05]\nlearning_rate = [0.05]\n";
    let cfg = write_config(dir.path(), &toml);
    let out = dha_bin()
        .args(["grid", "--config"])
        .arg(&cfg)
        .output()
        .unwrap();
    assert!(out.status.success(), "stderr: {}", stderr_str(&out));
    let stdout = stdout_str(&out);
    assert_eq!(stdout.lines().count(), 2);
    for line in stdout.lines() {
        assert!(line.contains("map@10"), "line: {line}");
    }
}

#[test]
fn train_seed_flag_overrides_config_and_digest_follows() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &base_toml());
    let out_dir = dir.path().join("out");
    let out = dha_bin()
        .args(["train", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(&out_dir)
        .args(["--seed", "43"])
        .output()
        .unwrap();
    assert!(out.status.success());

    // The config file still says seed 42, so the checkpoint no longer
    // matches it.
    let out = dha_bin()
        .args(["eval", "--config"])
        .arg(&cfg)
        .arg("--checkpoint")
        .arg(out_dir.join("model.dha"))
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_str(&out).contains("config mismatch"));
}
