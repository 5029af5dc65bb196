use std::path::Path;
use std::process::{Command, Output};

use skyalign_tensor::io::save_tensor;
use skyalign_tensor::Tensor;

const TINY: &str = "\
sat_size = 64
sat_alpha = 1.0
ground_width = 64
ground_height = 16
focal = 32.0
render_range_m = 30.0
pyramid_channels = [8, 4, 4]
heads = 2
window = 2
optimizer_hidden = 8
search_range_m = 16.0
template_m = 16.0
noise_theta_deg = 10.0
noise_t_m = 6.0
batch_size = 2
max_steps = 2
train_samples = 3
";

fn skyalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skyalign")).args(args).output().expect("binary runs")
}

fn tiny_config(dir: &Path) -> String {
    let p = dir.join("tiny.toml");
    std::fs::write(&p, TINY).unwrap();
    p.to_str().unwrap().to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_subcommand_prints_usage_and_exits_1() {
    let o = skyalign(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
}

#[test]
fn missing_subcommand_exits_1_and_help_exits_0() {
    assert_eq!(skyalign(&[]).status.code(), Some(1));
    assert_eq!(skyalign(&["--help"]).status.code(), Some(0));
}

#[test]
fn invalid_config_exits_1() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("bad.toml");
    std::fs::write(&p, "sat_size = 100\n").unwrap();
    let o = skyalign(&["--config", s(&p), "gradcheck", "--seeds", "1"]);
    assert_eq!(o.status.code(), Some(1));
    std::fs::write(&p, "no_such_key = 1\n").unwrap();
    assert_eq!(skyalign(&["--config", s(&p), "gradcheck"]).status.code(), Some(1));
}

#[test]
fn non_finite_map_exits_2() {
    let d = tempfile::tempdir().unwrap();
    let p = d.path().join("nan.cvt");
    save_tensor(&p, &Tensor::new(vec![2, 2], vec![0.1, f64::NAN, 0.3, 0.2]).unwrap()).unwrap();
    let o = skyalign(&["heatmap", "--input", s(&p), "--out", s(&d.path().join("h.pgm"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes() {
    let o = skyalign(&["gradcheck", "--seeds", "3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    assert!(String::from_utf8_lossy(&o.stdout).lines().count() >= 12);
}

#[test]
fn synth_train_refine_eval_heatmap_end_to_end() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let data = d.path().join("data");
    let o = skyalign(&["--config", &cfg, "--deterministic", "synth", "--out", s(&data), "--n", "3"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(data.join("manifest.csv").is_file() && data.join("ground_0002.pgm").is_file());

    let ck = d.path().join("ck");
    let o = skyalign(&["--config", &cfg, "train", "--data", s(&data), "--out", s(&ck)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(ck.join("final").join("manifest.txt").is_file());
    assert!(ck.join("loss.csv").is_file());

    let manifest = std::fs::read_to_string(data.join("manifest.csv")).unwrap();
    let row: Vec<&str> = manifest.lines().nth(1).unwrap().split(',').collect();
    let out = d.path().join("refine");
    let o = skyalign(&[
        "--config",
        &cfg,
        "refine",
        "--checkpoint",
        s(&ck.join("final")),
        "--ground",
        s(&data.join("ground_0000.pgm")),
        "--satellite",
        s(&data.join("satellite_0000.pgm")),
        "--prior-theta-deg",
        row[5],
        "--out",
        s(&out),
        "--format",
        "png",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(out.join("trace.csv")).unwrap();
    assert!(trace.starts_with("level,iter,theta_deg,tx_m,tz_m"));
    assert_eq!(trace.lines().count(), 7);
    assert!(out.join("heatmap.png").is_file());

    let png = d.path().join("again.png");
    let o = skyalign(&["heatmap", "--input", s(&out.join("prob.cvt")), "--out", s(&png)]);
    assert!(o.status.success() && png.is_file());

    let ev = d.path().join("eval");
    let o = skyalign(&["--config", &cfg, "eval", "--checkpoint", s(&ck.join("final")), "--data", s(&data), "--out", s(&ev)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_to_string(ev.join("errors.csv")).unwrap().lines().count(), 4);
    assert!(ev.join("summary.csv").is_file());
}

#[test]
fn bench_writes_one_csv_per_sweep() {
    let d = tempfile::tempdir().unwrap();
    let cfg = tiny_config(d.path());
    let out = d.path().join("bench");
    let o = skyalign(&["--config", &cfg, "bench", "--sweep", "iterations,range", "--n", "1", "--identity", "4", "--out", s(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["sweep_iterations.csv", "sweep_search_range_m.csv", "identity.csv"] {
        assert!(out.join(f).is_file(), "{f}");
    }
    let o = skyalign(&["--config", &cfg, "bench", "--sweep", "sideways", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(1));
}
