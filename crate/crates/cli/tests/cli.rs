use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

fn ldt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ldt")).args(args).output().expect("spawn ldt")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn micro_config(dir: &Path) -> PathBuf {
    let micro = fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/micro.cfg")).unwrap();
    let body: String = micro
        .lines()
        .filter(|l| !l.starts_with("run.out_dir"))
        .map(|l| format!("{l}\n"))
        .collect();
    let path = dir.join("tiny.cfg");
    fs::write(
        &path,
        format!(
            "{body}run.out_dir = {}\ncodec.steps = 20\ncodec.batch_size = 4\ndiffusion.steps = 8\ntrain.steps = 3\ntrain.checkpoint_every = 0\n",
            dir.join("run").display()
        ),
    )
    .unwrap();
    path
}

/// A checkpoint trained once through the CLI and shared by the tests.
fn trained() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    let dir = DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = micro_config(dir.path());
        let out = ldt(&["train", "--log-every", "1", "--config", cfg.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let stdout = String::from_utf8_lossy(&out.stdout);
        assert!(stdout.contains("step      3"), "{stdout}");
        dir
    });
    dir.path()
}

fn ckpt() -> String {
    trained().join("run/final.ldtc").display().to_string()
}

#[test]
fn train_writes_metrics_and_checkpoint() {
    let csv = fs::read_to_string(trained().join("run/metrics.csv")).unwrap();
    assert!(csv.starts_with("phase,step,loss,wall_time_s\n"));
    assert_eq!(csv.lines().filter(|l| l.starts_with("denoiser,")).count(), 3);
}

#[test]
fn unknown_config_key_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "train.stepz = 3\n").unwrap();
    let out = ldt(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn missing_config_exits_3() {
    assert_eq!(code(&ldt(&["train", "--config", "/nonexistent/x.cfg"])), 3);
}

#[test]
fn label_out_of_range_exits_2() {
    let out = ldt(&["sample", "--ckpt", &ckpt(), "--label", "3", "--out", "/tmp/never"]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unwritable_output_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = ldt(&["sample", "--ckpt", &ckpt(), "--label", "0", "--out", blocker.join("sub").to_str().unwrap()]);
    assert_eq!(code(&out), 3);
}

#[test]
fn damaged_checkpoints_exit_4() {
    let bytes = fs::read(ckpt()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let truncated = dir.path().join("truncated.ldtc");
    fs::write(&truncated, &bytes[..bytes.len() / 2]).unwrap();
    let mut flipped = bytes.clone();
    flipped[bytes.len() / 3] ^= 0x10;
    let corrupt = dir.path().join("flipped.ldtc");
    fs::write(&corrupt, flipped).unwrap();
    let foreign = dir.path().join("foreign.ldtc");
    fs::write(&foreign, b"PK\x03\x04 not a checkpoint at all").unwrap();
    for path in [truncated, corrupt, foreign] {
        let out = ldt(&["sample", "--ckpt", path.to_str().unwrap(), "--label", "0", "--out", "/tmp/never"]);
        assert_eq!(code(&out), 4, "{}", path.display());
    }
}

#[test]
fn sampling_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out_dir = dir.path().join(name);
        let out = ldt(&[
            "sample", "--ckpt", &ckpt(), "--label", "2", "--count", "3", "--seed", seed, "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(&out_dir)
            .unwrap()
            .map(|e| {
                let e = e.unwrap();
                (e.file_name().to_string_lossy().into_owned(), fs::read(e.path()).unwrap())
            })
            .collect();
        files.sort();
        files
    };
    let a = run("a", "5");
    assert_eq!(a.len(), 3);
    assert_eq!(a[0].0, "label2_seed5_0000.ppm");
    assert!(a[0].1.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(a, run("b", "5"));
    assert_ne!(a.iter().map(|f| &f.1).collect::<Vec<_>>(), run("c", "6").iter().map(|f| &f.1).collect::<Vec<_>>());
}

#[test]
fn eval_with_two_samples_appends_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("eval.csv");
    for _ in 0..2 {
        let out = ldt(&["eval", "--ckpt", &ckpt(), "--n", "2", "--csv", csv.to_str().unwrap()]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let text = fs::read_to_string(&csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[0], "n,seed,guidance_scale,proxy_fid,wall_time_s");
    let fid: f64 = lines[1].split(',').nth(3).unwrap().parse().unwrap();
    assert!(fid.is_finite() && fid >= 0.0);
}

#[test]
fn eval_rejects_single_sample() {
    assert_eq!(code(&ldt(&["eval", "--ckpt", &ckpt(), "--n", "1", "--csv", "/tmp/never.csv"])), 2);
}

#[test]
fn help_shows_default_guidance() {
    for cmd in ["sample", "eval"] {
        let help = String::from_utf8_lossy(&ldt(&[cmd, "--help"]).stdout).to_string();
        assert!(help.contains("[default: 1.25]"), "{help}");
    }
}

#[test]
fn resume_continues_to_the_configured_step_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = micro_config(dir.path());
    let text = fs::read_to_string(&cfg).unwrap().replace("train.steps = 3", "train.steps = 5");
    fs::write(&cfg, text).unwrap();
    let out = ldt(&["train", "--resume", &ckpt(), "--log-every", "1", "--config", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("step      4") && stdout.contains("step      5") && !stdout.contains("step      3"));
}
