use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use streamfx::metrics::psnr;
use streamfx::world::load_dataset;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streamfx"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let o = run(args);
    assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

const TINY: &str = "height = 4\nwidth = 4\nc_frames = 2\nclip_frames = 4\nd_model = 16\nd_mlp = 32\nlayers = 1\nt_features = 8\nbatch_size = 2\nsteps = 3\ncheckpoint_every = 2\nwindow = 2\n";

fn write_config(dir: &Path) -> String {
    let p = dir.join("tiny.cfg");
    fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn exit_codes() {
    assert_eq!(run(&["--bogus"]).status.code(), Some(1));
    assert_eq!(run(&["gen-data", "--count", "x"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["eval"]).status.code(), Some(2));
    assert_eq!(run(&["distill-stage1", "--checkpoint", "/nonexistent.sfx"]).status.code(), Some(2));
}

#[test]
fn gen_data_is_seed_deterministic() {
    let d = tempfile::tempdir().unwrap();
    let out = |name: &str, seed: &str| {
        let dir = d.path().join(name);
        ok(&["gen-data", "--seed", seed, "--count", "3", "--out", dir.to_str().unwrap()]);
        let mut files: Vec<_> = fs::read_dir(&dir).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        files.iter().map(|f| (f.file_name().unwrap().to_owned(), fs::read(f).unwrap())).collect::<Vec<_>>()
    };
    let a = out("a", "5");
    assert_eq!(a.len(), 4);
    assert_eq!(a, out("b", "5"));
    assert_ne!(a, out("c", "6"));
}

#[test]
fn copy_eval_matches_direct_psnr() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    ok(&["gen-data", "--seed", "2", "--count", "4", "--out", data.to_str().unwrap()]);
    let csv = d.path().join("eval.csv");
    ok(&["eval", "--copy", "--data", data.to_str().unwrap(), "--out", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("index,seed,effect_id,mse,psnr,ssim"));
    for (t, line) in load_dataset(&data).unwrap().iter().zip(lines) {
        let cols: Vec<&str> = line.split(',').collect();
        let reported: f64 = cols[4].parse().unwrap();
        assert!((reported - psnr(&t.source, &t.target, 1.0).unwrap()).abs() < 1e-9);
        assert_eq!(cols[2].parse::<usize>().unwrap(), t.label);
    }
}

#[test]
fn full_pipeline_on_tiny_config() {
    let d = tempfile::tempdir().unwrap();
    let cfg = write_config(d.path());
    let dir = d.path().to_str().unwrap();
    let teacher = ok(&["train-teacher", "--config", &cfg, "--out", dir]).trim().to_string();
    assert!(Path::new(&teacher).exists());
    assert!(d.path().join("teacher_step2.sfx").exists());
    let log = fs::read_to_string(d.path().join("teacher.loss.csv")).unwrap();
    assert_eq!(log.lines().count(), 4);

    let s1 = ok(&["distill-stage1", "--config", &cfg, "--checkpoint", &teacher, "--out", dir]).trim().to_string();
    let s2 = ok(&["distill-stage2", "--config", &cfg, "--checkpoint", &s1, "--out", dir]).trim().to_string();
    assert!(Path::new(&s2).exists());

    let csv = d.path().join("e.csv");
    let stdout = ok(&["eval", "--config", &cfg, "--checkpoint", &s2, "--count", "4", "--out", csv.to_str().unwrap()]);
    assert_eq!(stdout.lines().count(), 4);
    assert_eq!(fs::read_to_string(&csv).unwrap().lines().count(), 5);

    let bench = ok(&["bench", "--config", &cfg, "--checkpoint", &s2, "--steps", "1,4", "--chunks", "5", "--warmup", "1"]);
    let rows: Vec<&str> = bench.lines().collect();
    assert_eq!(rows[0], "config,steps,window,chunk_ms_mean,chunk_ms_p95,fps");
    assert_eq!(rows.len(), 3);
    assert_eq!(rows[2].split(',').nth(1), Some("4"));
}
