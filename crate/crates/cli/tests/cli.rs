//! End-to-end command tests on tiny budgets: the train/sweep/plot/verify
//! surface, config rejection, checkpoint resumption, and artifact hygiene.

use std::fs;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_metarl"))
}

fn walk(dir: &Path, out: &mut Vec<std::path::PathBuf>) {
    for entry in fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            walk(&p, out);
        } else {
            out.push(p);
        }
    }
}

const TINY_SIZES: &str = "
enc_obs_embed = 6
enc_act_embed = 4
enc_rew_embed = 4
gru_hidden = 8
latent_dim = 4
task_proj = 6
state_embed = 6
base_hidden = [8]
hyper_hidden = [8]
critic_hidden = [8]
vi_decoder_hidden = [8]
n_envs = 4
minibatches = 2
epochs = 2
";

#[test]
fn train_writes_logs_checkpoints_and_summary_under_run_dir() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN+HN\"\nenv = \"grid\"\nseed = 1\ntotal_frames = 1920\n\
         checkpoint_every = 4\ndump_trajectories = true\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, cfg).unwrap();
    let out_dir = dir.path().join("run");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&out_dir)
        .status()
        .unwrap();
    assert!(status.success());

    let log = fs::read_to_string(out_dir.join("log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 8, "1920 frames / 240 per update");
    // Frames are strictly increasing and the emitted field order is exact.
    let field_order = [
        "\"update\"",
        "\"frames\"",
        "\"mean_return\"",
        "\"policy_loss\"",
        "\"value_loss\"",
        "\"entropy\"",
        "\"j_infer\"",
        "\"j_prior\"",
        "\"latent_grad_norm\"",
    ];
    let mut prev = 0u64;
    for line in log.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        let frames = v["frames"].as_u64().unwrap();
        assert!(frames > prev);
        prev = frames;
        let positions: Vec<usize> =
            field_order.iter().map(|k| line.find(k).expect("field present")).collect();
        assert!(positions.windows(2).all(|w| w[0] < w[1]), "field order drifted: {line}");
    }
    assert!(out_dir.join("summary.json").exists());
    assert!(out_dir.join("checkpoints/ckpt-7.bin").exists());
    assert!(out_dir.join("trajectories.jsonl").exists());

    // Every artifact lives under the run directory.
    let mut produced = Vec::new();
    walk(dir.path(), &mut produced);
    for p in produced {
        assert!(
            p.starts_with(&out_dir) || p == cfg_path,
            "stray artifact: {}",
            p.display()
        );
    }
}

#[test]
fn invalid_config_fails_with_field_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("bad.toml");
    fs::write(&cfg_path, "method = \"RNN\"\nenv = \"grid\"\nlearning_rate = 0.1\n").unwrap();
    let out = bin().args(["train", "--config"]).arg(&cfg_path).output().unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("learning_rate"), "stderr: {stderr}");
}

#[test]
fn ti_plus_plus_with_zero_pretraining_is_a_hard_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = dir.path().join("run.toml");
    fs::write(
        &cfg_path,
        format!(
            "method = \"TI++\"\nenv = \"grid\"\ntotal_frames = 1920\npretrain_updates = 0\n{TINY_SIZES}"
        ),
    )
    .unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("run"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("pretraining"), "stderr: {stderr}");
}

#[test]
fn resume_continues_frame_counter_without_double_counting() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN\"\nenv = \"grid\"\nseed = 3\ntotal_frames = 1920\ncheckpoint_every = 4\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, &cfg).unwrap();

    // Full uninterrupted run; its mid-run checkpoint plays the part of an
    // interrupted run's last checkpoint.
    let full_dir = dir.path().join("full");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&full_dir)
        .status()
        .unwrap()
        .success());

    let resume_cfg = format!(
        "{cfg}resume_from = \"{}\"\n",
        full_dir.join("checkpoints/ckpt-3.state.json").display()
    );
    let resume_path = dir.path().join("resume.toml");
    fs::write(&resume_path, &resume_cfg).unwrap();
    let resumed_dir = dir.path().join("resumed");
    let out = bin()
        .args(["train", "--config"])
        .arg(&resume_path)
        .arg("--out")
        .arg(&resumed_dir)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let full_log = fs::read_to_string(full_dir.join("log.jsonl")).unwrap();
    let resumed_log = fs::read_to_string(resumed_dir.join("log.jsonl")).unwrap();
    let full_records: Vec<serde_json::Value> =
        full_log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let resumed_records: Vec<serde_json::Value> =
        resumed_log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // The resumed run covers updates 4..8 and its frame counter continues
    // exactly where the checkpoint left off.
    assert_eq!(resumed_records.len(), 4);
    assert_eq!(resumed_records[0]["update"], 4);
    assert_eq!(resumed_records[0]["frames"], full_records[4]["frames"]);
    assert_eq!(
        resumed_records.last().unwrap()["frames"],
        full_records.last().unwrap()["frames"]
    );
}

#[test]
fn resume_rejects_mismatched_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN\"\nenv = \"grid\"\nseed = 5\ntotal_frames = 960\ncheckpoint_every = 2\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, &cfg).unwrap();
    let run_dir = dir.path().join("run");
    assert!(bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(&run_dir)
        .status()
        .unwrap()
        .success());

    let tampered = format!(
        "{}resume_from = \"{}\"\n",
        cfg.replace("seed = 5", "seed = 6"),
        run_dir.join("checkpoints/ckpt-1.state.json").display()
    );
    let tam_path = dir.path().join("tampered.toml");
    fs::write(&tam_path, tampered).unwrap();
    let out = bin()
        .args(["train", "--config"])
        .arg(&tam_path)
        .arg("--out")
        .arg(dir.path().join("run2"))
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("hash"));
}

#[test]
fn sweep_creates_one_directory_per_cell_and_selects_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN\"\nenv = \"grid\"\ntotal_frames = 960\n\
         sweep_lrs = [1e-3, 1e-4]\nsweep_seeds = [0, 1]\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("sweep.toml");
    fs::write(&cfg_path, &cfg).unwrap();
    let out_dir = dir.path().join("sweep");
    let run = || {
        let status = bin()
            .args(["sweep", "--config"])
            .arg(&cfg_path)
            .arg("--out")
            .arg(&out_dir)
            .args(["--workers", "1"])
            .status()
            .unwrap();
        assert!(status.success());
        let sweep: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(out_dir.join("sweep.json")).unwrap()).unwrap();
        sweep["best_lr"].as_f64().unwrap()
    };
    let first = run();
    let cell_dirs: Vec<_> = fs::read_dir(&out_dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().is_dir())
        .collect();
    assert_eq!(cell_dirs.len(), 4, "2 lrs x 2 seeds");
    let second = run();
    assert_eq!(first, second, "rerun with the same seeds must select the same rate");
}

#[test]
fn plot_renders_svg_and_table() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN\"\nenv = \"grid\"\nseed = 2\ntotal_frames = 1920\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, &cfg).unwrap();
    let r1 = dir.path().join("s1");
    let r2 = dir.path().join("s2");
    for (seed, out) in [("2", &r1), ("3", &r2)] {
        assert!(bin()
            .args(["train", "--config"])
            .arg(&cfg_path)
            .args(["--seed", seed])
            .arg("--out")
            .arg(out)
            .status()
            .unwrap()
            .success());
    }
    let svg = dir.path().join("curves.svg");
    let status = bin()
        .args(["plot"])
        .arg(&r1)
        .arg(&r2)
        .arg("--out")
        .arg(&svg)
        .args(["--window", "3", "--resamples", "1000"])
        .status()
        .unwrap();
    assert!(status.success());
    let content = fs::read_to_string(&svg).unwrap();
    assert!(content.starts_with("<svg"));
    assert!(content.contains("polyline"));
    assert!(content.contains("polygon"), "confidence band present");
    assert!(svg.with_extension("tsv").exists());

    let missing = bin()
        .args(["plot"])
        .arg(dir.path().join("nope"))
        .arg("--out")
        .arg(dir.path().join("x.svg"))
        .output()
        .unwrap();
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope"));
}

#[test]
fn grad_probe_reports_zero_at_bias_init() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!(
        "method = \"RNN+HN\"\nenv = \"grid\"\nseed = 4\ntotal_frames = 480\n{TINY_SIZES}"
    );
    let cfg_path = dir.path().join("probe.toml");
    fs::write(&cfg_path, &cfg).unwrap();
    let out = bin()
        .args(["grad-probe", "--config"])
        .arg(&cfg_path)
        .arg("--out")
        .arg(dir.path().join("probe"))
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("0.000000e0"), "bias-init probe starts at zero: {stdout}");
}

#[test]
fn out_root_env_var_moves_derived_run_dirs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = format!("method = \"RNN\"\nenv = \"grid\"\nseed = 9\ntotal_frames = 480\n{TINY_SIZES}");
    let cfg_path = dir.path().join("run.toml");
    fs::write(&cfg_path, &cfg).unwrap();
    let root = dir.path().join("root-override");
    let status = bin()
        .args(["train", "--config"])
        .arg(&cfg_path)
        .env("METARL_OUT_ROOT", &root)
        .status()
        .unwrap();
    assert!(status.success());
    assert!(root.join("RNN-grid-seed9/log.jsonl").exists());
}
