use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use vtrans_core::synth::write_corpus;

const SMALL: &str = "\
seg_frames = 16
cond_dim = 32
widths = 8,16,32
kernel = 3
batch_size = 4
gl_iters = 4
checkpoint_interval = 5
log_interval = 5
";

fn vtrans(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vtrans"))
        .args(args)
        .env_remove("VTRANS_SEED")
        .output()
        .expect("spawn vtrans")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

struct Setup {
    dir: tempfile::TempDir,
    config: PathBuf,
}

impl Setup {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        write_corpus(&dir.path().join("corpus"), 12, 3, 0.5, 3).unwrap();
        let config = dir.path().join("small.cfg");
        std::fs::write(&config, SMALL).unwrap();
        Self { dir, config }
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn train(&self, out: &str, extra: &[&str]) -> Output {
        let out = self.path(out);
        let normal = self.path("corpus/normal");
        let impaired = self.path("corpus/impaired");
        let mut args = vec![
            "train",
            "--config",
            s(&self.config),
            "--normal-dir",
            s(&normal),
            "--impaired-dir",
            s(&impaired),
            "--out-dir",
            s(&out),
        ];
        args.extend_from_slice(extra);
        vtrans(&args)
    }
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn train_writes_checkpoint_history_and_echo() {
    let t = Setup::new();
    let cache = format!("cache_dir={}", s(&t.path("shared_cache")));
    let o = t.train("run", &["--iters", "10", "--seed", "7", "--set", &cache]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stderr(&o).contains("(0 cached, 15 computed)"), "{}", stderr(&o));
    let hist = std::fs::read_to_string(t.path("run/loss_history.csv")).unwrap();
    assert_eq!(hist.lines().count(), 11);
    assert!(hist.starts_with("iteration,loss_d,loss_g,loss_c,wall_time\n"));
    assert!(t.path("run/checkpoint.ckpt").is_file());
    let echo = std::fs::read_to_string(t.path("run/effective_config.txt")).unwrap();
    assert!(echo.contains("seed = 7  # command line"), "{echo}");
    assert!(echo.contains("batch_size = 4  # file"), "{echo}");
    assert!(echo.contains("lr_gc = 0.0002  # default"), "{echo}");

    let again = t.train("run2", &["--iters", "10", "--seed", "7", "--set", &cache]);
    assert_eq!(again.status.code(), Some(0), "{}", stderr(&again));
    assert_eq!(
        std::fs::read(t.path("run/loss_history.csv")).unwrap(),
        std::fs::read(t.path("run2/loss_history.csv")).unwrap()
    );
    assert!(stderr(&again).contains("(15 cached, 0 computed)"), "{}", stderr(&again));
}

#[test]
fn train_rejects_unknown_key_and_bad_values() {
    let t = Setup::new();
    let o = t.train("bad", &["--set", "warp_factor=9"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("warp_factor"), "{}", stderr(&o));
    let o = t.train("bad", &["--set", "batch_size=0"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("batch_size"), "{}", stderr(&o));
    let o = t.train("bad", &["--ablation", "nope"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("ablation"), "{}", stderr(&o));
}

#[test]
fn train_fails_on_empty_corpus() {
    let t = Setup::new();
    std::fs::create_dir_all(t.path("empty")).unwrap();
    let empty = t.path("empty");
    let o = vtrans(&[
        "train",
        "--config",
        s(&t.config),
        "--normal-dir",
        s(&empty),
        "--impaired-dir",
        s(&t.path("corpus/impaired")),
        "--out-dir",
        s(&t.path("out")),
    ]);
    assert_ne!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("no WAV"), "{}", stderr(&o));
}

#[test]
fn environment_overrides_file_but_not_command_line() {
    let t = Setup::new();
    let out = t.path("envrun");
    let o = Command::new(env!("CARGO_BIN_EXE_vtrans"))
        .args([
            "train",
            "--config",
            s(&t.config),
            "--normal-dir",
            s(&t.path("corpus/normal")),
            "--impaired-dir",
            s(&t.path("corpus/impaired")),
            "--out-dir",
            s(&out),
            "--iters",
            "2",
        ])
        .env("VTRANS_ITERS", "3")
        .env("VTRANS_BATCH_SIZE", "2")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let echo = std::fs::read_to_string(out.join("effective_config.txt")).unwrap();
    assert!(echo.contains("iters = 2  # command line"), "{echo}");
    assert!(echo.contains("batch_size = 2  # env"), "{echo}");
}

#[test]
fn convert_file_directory_and_failures() {
    let t = Setup::new();
    assert_eq!(t.train("run", &["--iters", "3"]).status.code(), Some(0));
    let ckpt = t.path("run/checkpoint.ckpt");
    let input = t.path("corpus/impaired/0000.wav");
    let out = t.path("conv/one.wav");
    let o = vtrans(&["convert", "--checkpoint", s(&ckpt), "--input", s(&input), "--output", s(&out)]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.is_file());

    let mixed = t.path("mixed");
    std::fs::create_dir_all(&mixed).unwrap();
    std::fs::copy(&input, mixed.join("good.wav")).unwrap();
    std::fs::write(mixed.join("broken.wav"), b"not a wav").unwrap();
    let dir_out = t.path("mixed_out");
    let o = vtrans(&["convert", "--checkpoint", s(&ckpt), "--input", s(&mixed), "--output", s(&dir_out)]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let summary = std::fs::read_to_string(dir_out.join("summary.csv")).unwrap();
    assert!(summary.lines().any(|l| l.starts_with("broken.wav,failed")), "{summary}");
    assert!(summary.lines().any(|l| l.starts_with("good.wav,ok")), "{summary}");

    std::fs::remove_file(mixed.join("good.wav")).unwrap();
    let o = vtrans(&["convert", "--checkpoint", s(&ckpt), "--input", s(&mixed), "--output", s(&dir_out)]);
    assert_eq!(o.status.code(), Some(2));

    let missing_out = t.path("never.wav");
    let o = vtrans(&[
        "convert",
        "--checkpoint",
        s(&t.path("missing.ckpt")),
        "--input",
        s(&input),
        "--output",
        s(&missing_out),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!missing_out.exists());
}

#[test]
fn eval_writes_reports_spectrograms_and_plot() {
    let t = Setup::new();
    assert_eq!(t.train("a", &["--iters", "3"]).status.code(), Some(0));
    assert_eq!(t.train("b", &["--iters", "3", "--ablation", "no_sd"]).status.code(), Some(0));
    let ckpt = t.path("a/checkpoint.ckpt");
    let ha = format!("proposed={}", s(&t.path("a/loss_history.csv")));
    let hb = format!("no_sd={}", s(&t.path("b/loss_history.csv")));
    let out = t.path("eval");
    let o = vtrans(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--normal-dir",
        s(&t.path("corpus/normal")),
        "--impaired-dir",
        s(&t.path("corpus/impaired")),
        "--out-dir",
        s(&out),
        "--history",
        &ha,
        "--history",
        &hb,
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let gv = std::fs::read_to_string(out.join("gv_report.csv")).unwrap();
    assert_eq!(gv.lines().next(), Some("band,impaired,generated,normal"));
    assert_eq!(gv.lines().count(), 129);
    assert!(out.join("gv_summary.csv").is_file());
    let pngs = std::fs::read_dir(out.join("spectrograms"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "png")
        .count();
    assert_eq!(pngs, 6);
    let svg = std::fs::read_to_string(out.join("loss_curves.svg")).unwrap();
    assert_eq!(svg.matches("class=\"legend\"").count(), 2);
    assert_eq!(std::fs::read_dir(out.join("converted")).unwrap().count(), 3);

    let out0 = t.path("eval0");
    let o = vtrans(&[
        "eval",
        "--checkpoint",
        s(&ckpt),
        "--normal-dir",
        s(&t.path("corpus/normal")),
        "--impaired-dir",
        s(&t.path("corpus/impaired")),
        "--out-dir",
        s(&out0),
        "--spectrograms",
        "0",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(!out0.join("spectrograms").exists());
    assert!(!out0.join("loss_curves.svg").exists());
}

#[test]
fn features_round_trip_through_files() {
    let t = Setup::new();
    let input = t.path("corpus/normal/0001.wav");
    let stem = t.path("feat/utt");
    let wav = t.path("feat/utt_inv.wav");
    let o = vtrans(&[
        "features",
        "--input",
        s(&input),
        "--output",
        s(&stem),
        "--seg-frames",
        "16",
        "--invert",
        s(&wav),
        "--gl-iters",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for ext in ["npy", "json", "png"] {
        assert!(stem.with_extension(ext).is_file(), "{ext}");
    }
    assert!(wav.is_file());
    let back = t.path("feat/from_npy.wav");
    let o = vtrans(&[
        "features",
        "--input",
        s(&stem.with_extension("npy")),
        "--invert",
        s(&back),
        "--gl-iters",
        "5",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&wav).unwrap(), std::fs::read(&back).unwrap());
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(vtrans(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(vtrans(&["convert", "--input", "x"]).status.code(), Some(1));
    assert_eq!(vtrans(&["--help"]).status.code(), Some(0));
}
