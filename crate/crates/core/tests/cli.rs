//! End-to-end runs of the `res3atn` binary.

use std::path::Path;
use std::process::{Command, Output};

use clap::Parser;
use res3atn::cli::Cli;
use res3atn::train::{MetricsLog, Split};

const TINY: &str = r#"
[network]
input_frames = 8
attention_sites = [1]
channel_scale = 32

[augment]
frames_out = 8

[synthetic]
train_per_class = 3
eval_per_class = 2
frames = 10
"#;

fn res3atn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_res3atn"))
        .args(args)
        .env("R3ATN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn train_tiny(dir: &Path, epochs: &str) -> Output {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join("run");
    res3atn(&[
        "train",
        "--preset",
        "desk",
        "--config",
        cfg.to_str().unwrap(),
        "--synthetic",
        "--epochs",
        epochs,
        "--seed",
        "4",
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn train_then_eval_reproduces_the_logged_numbers() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "2");
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    for f in ["best.ckpt", "last.ckpt", "metrics.jsonl", "losses.tsv", "config.toml", "summary.md"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = MetricsLog::read(&run.join("metrics.jsonl")).unwrap();
    let last = log.iter().rev().find(|r| r.split == Split::Eval).unwrap();
    assert_eq!(last.epoch, 2);

    let ckpt = run.join("last.ckpt");
    let data = run.join("data/eval");
    let o = res3atn(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains(&format!("top1 {}\n", last.top1)), "{text}");
    assert!(text.contains(&format!("loss {}\n", last.loss)), "{text}");
    assert!(text.contains(&format!("samples {}\n", last.samples)), "{text}");

    let masks = dir.path().join("masks");
    let clip = std::fs::read_dir(data.join("0_right")).unwrap().next().unwrap().unwrap().path();
    let o = res3atn(&[
        "masks",
        "--checkpoint",
        run.join("best.ckpt").to_str().unwrap(),
        "--clip",
        clip.to_str().unwrap(),
        "--out",
        masks.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    // site 1 on 8 input frames keeps 2 mask frames
    assert!(masks.join("site1_frame0.pgm").exists());
    assert!(masks.join("site1_frame1.pgm").exists());
}

#[test]
fn zero_epochs_checkpoints_and_evaluates_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_tiny(dir.path(), "0");
    assert!(o.status.success(), "{}", stderr(&o));
    let run = dir.path().join("run");
    assert!(run.join("best.ckpt").exists());
    let log = MetricsLog::read(&run.join("metrics.jsonl")).unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!((log[0].epoch, log[0].split), (0, Split::Eval));
}

#[test]
fn mutated_gradcheck_exits_nonzero() {
    let o = res3atn(&["gradcheck", "--skip-network"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = res3atn(&["gradcheck", "--skip-network", "--mutate", "conv3d"]);
    assert_eq!(o.status.code(), Some(1), "{}", stdout(&o));
    assert!(stdout(&o).contains("conv3d"));
    assert!(stderr(&o).starts_with("res3atn: error[gradcheck]"), "{}", stderr(&o));
}

#[test]
fn missing_checkpoint_and_bad_config_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = res3atn(&["eval", "--checkpoint", "/nonexistent.ckpt", "--data", "/nonexistent"]);
    assert_eq!(o.status.code(), Some(3));
    assert_eq!(stderr(&o).lines().count(), 1);

    let cfg = dir.path().join("bad.toml");
    std::fs::write(&cfg, "[network]\nchanel_scale = 4\n").unwrap();
    let o = res3atn(&["train", "--config", cfg.to_str().unwrap(), "--synthetic"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("chanel_scale"), "{}", stderr(&o));
}

#[test]
fn desk_config_file_matches_the_desk_preset() {
    let dir = tempfile::tempdir().unwrap();
    let desk = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/desk.toml");
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let o = res3atn(&["train", "--synthetic", "--config", desk.to_str().unwrap(), "--epochs", "0", "--out", a.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = res3atn(&["train", "--synthetic", "--preset", "desk", "--epochs", "0", "--out", b.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = |p: &Path| std::fs::read_to_string(p.join("config.toml")).unwrap().replace(p.to_str().unwrap(), "OUT");
    assert_eq!(text(&a), text(&b));
}

#[test]
fn empty_custom_grid_exits_2_and_grid_names_parse() {
    let o = res3atn(&["ablate", "--synthetic", "--grid", "custom"]);
    assert_eq!(o.status.code(), Some(2));
    for grid in ["standard", "paper", "full", "custom"] {
        assert!(Cli::try_parse_from(["res3atn", "ablate", "--grid", grid]).is_ok(), "{grid}");
    }
    assert!(Cli::try_parse_from(["res3atn", "ablate", "--grid", "other"]).is_err());
}
