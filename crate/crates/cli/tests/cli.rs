use std::path::Path;
use std::process::{Command, Output};

use lmlt::metrics::{png_load, png_save, PlanarImage};

fn lmlt(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lmlt"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn field<T: std::str::FromStr>(out: &str, key: &str) -> T {
    out.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .and_then(|v| v.split_whitespace().next())
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("no {key}= in\n{out}"))
}

fn echoed_config(out: &str) -> String {
    out.split("\n\n").next().unwrap().to_string()
}

fn write_input(dir: &Path, w: usize, h: usize) {
    let data = (0..w * h * 3).map(|i| ((i * 7 + i / 97) % 256) as u8).collect();
    png_save(&PlanarImage::new(w, h, 3, data).unwrap(), &dir.join("in.png")).unwrap();
}

#[test]
fn count_reproduces_published_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmlt(&["count", "--preset", "tiny", "--scale", "2"], dir.path());
    assert!(o.status.success());
    let params: f64 = field(&stdout(&o), "params");
    assert!((params / 239e3 - 1.0).abs() < 0.005, "{params}");

    let o = lmlt(&["count", "--preset", "base", "--scale", "3"], dir.path());
    let params: f64 = field(&stdout(&o), "params");
    assert!((params / 660e3 - 1.0).abs() < 0.005, "{params}");

    let o = lmlt(&["count", "--preset", "tiny", "--scale", "2", "--no-pool"], dir.path());
    let flops: f64 = field(&stdout(&o), "flops");
    assert!((flops / 67e9 - 1.0).abs() < 0.10, "{flops}");
}

#[test]
fn count_writes_csv_and_rejects_unknown_presets() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmlt(&["count", "--preset", "small", "--csv", "r.csv"], dir.path());
    assert!(o.status.success());
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("layer,params,macs,acts\n"));
    assert!(csv.lines().last().unwrap().starts_with("total,"));

    let o = lmlt(&["count", "--preset", "huge"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown preset"));
    assert_eq!(lmlt(&["count", "--bogus-flag"], dir.path()).status.code(), Some(1));
}

#[test]
fn upscale_shapes_metrics_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_input(p, 32, 32);
    assert!(lmlt(&["init", "--preset", "tiny", "--scale", "4", "--out", "w.bin"], p).status.success());
    let o = lmlt(&["upscale", "--in", "in.png", "--out", "out.png", "--weights", "w.bin", "--runs", "1"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("time_ms_median="));
    let out = png_load(&p.join("out.png")).unwrap();
    assert_eq!((out.width, out.height, out.channels), (128, 128, 3));

    let o = lmlt(
        &["upscale", "--in", "in.png", "--out", "again.png", "--weights", "w.bin", "--ref", "out.png", "--runs", "0"],
        p,
    );
    assert!(stdout(&o).contains("psnr_y=inf"), "{}", stdout(&o));
    assert_eq!(std::fs::read(p.join("out.png")).unwrap(), std::fs::read(p.join("again.png")).unwrap());

    let o = lmlt(&["upscale", "--in", "in.png", "--out", "x.png", "--weights", "w.bin", "--scale", "2"], p);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("different config"));
    let o = lmlt(&["upscale", "--in", "missing.png", "--out", "x.png", "--weights", "w.bin"], p);
    assert_eq!(o.status.code(), Some(3));
    let o = lmlt(&["upscale", "--in", "in.png", "--out", "x.png", "--weights", "missing.bin"], p);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn zero_weights_give_a_black_image() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_input(p, 16, 12);
    let init = ["init", "--channels", "8", "--heads", "2", "--blocks", "1", "--window", "4", "--zero", "--out", "z.bin"];
    assert!(lmlt(&init, p).status.success());
    let o = lmlt(&["upscale", "--in", "in.png", "--out", "black.png", "--weights", "z.bin", "--runs", "0"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = png_load(&p.join("black.png")).unwrap();
    assert_eq!((out.width, out.height), (32, 24));
    assert!(out.data.iter().all(|&v| v == 0));
}

#[test]
fn echoed_config_replays_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    write_input(p, 16, 16);
    let init = ["init", "--channels", "8", "--heads", "2", "--blocks", "1", "--window", "4", "--out", "w.bin"];
    let o = lmlt(&init, p);
    std::fs::write(p.join("init.cfg"), echoed_config(&stdout(&o)).replace("out=w.bin", "out=w2.bin")).unwrap();
    assert!(lmlt(&["init", "--config", "init.cfg"], p).status.success());
    assert_eq!(std::fs::read(p.join("w.bin")).unwrap(), std::fs::read(p.join("w2.bin")).unwrap());

    let o = lmlt(&["upscale", "--in", "in.png", "--out", "a.png", "--weights", "w.bin", "--runs", "0"], p);
    let cfg = echoed_config(&stdout(&o)).replace("out=a.png", "out=b.png");
    std::fs::write(p.join("up.cfg"), cfg).unwrap();
    let o = lmlt(&["upscale", "--config", "up.cfg", "--runs", "0"], p);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(std::fs::read(p.join("a.png")).unwrap(), std::fs::read(p.join("b.png")).unwrap());
}

#[test]
fn gradcheck_passes_and_catches_a_corrupted_gradient() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmlt(&["gradcheck", "--size", "8"], dir.path());
    assert!(o.status.success(), "{}{}", stdout(&o), stderr(&o));
    let err: f64 = field(&stdout(&o), "max_rel_err");
    assert!(err < 1e-3);

    let o = lmlt(&["gradcheck", "--size", "8", "--corrupt-grad"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("block0.ccm.conv1.bias"), "{}", stdout(&o));
}

#[test]
fn bench_ratios() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmlt(&["bench", "--size", "32", "--channels", "12", "--window", "4", "--runs", "1"], dir.path());
    assert!(o.status.success());
    let out = stdout(&o);
    let rows: Vec<Vec<&str>> = out
        .lines()
        .skip_while(|l| !l.starts_with("heads,"))
        .skip(1)
        .map(|l| l.split(',').collect())
        .collect();
    assert_eq!(rows.len(), 4);
    for r in &rows {
        let ratio: f64 = r[3].parse().unwrap();
        if r[0] == "1" {
            assert_eq!(ratio, 1.0);
        } else {
            assert!(ratio < 1.0);
        }
    }
}

#[test]
fn train_toy_exit_codes_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let run = |csv: &str| lmlt(&["train-toy", "--patch", "16", "--steps", "250", "--seed", "4", "--loss-csv", csv], p);
    let a = run("a.csv");
    assert!(a.status.success(), "{}{}", stdout(&a), stderr(&a));
    run("b.csv");
    let a = std::fs::read(p.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(p.join("b.csv")).unwrap());
    assert_eq!(String::from_utf8(a).unwrap().lines().count(), 251);

    let o = lmlt(&["train-toy", "--patch", "16", "--steps", "3", "--lr", "0"], p);
    assert_eq!(o.status.code(), Some(1));
    let o = lmlt(&["train-toy", "--patch", "16", "--steps", "5", "--lr", "1e8"], p);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn selftest_passes_and_names_an_injected_fault() {
    let dir = tempfile::tempdir().unwrap();
    let o = lmlt(&["selftest"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    assert!(stdout(&o).lines().filter(|l| l.starts_with("PASS ")).count() >= 10);

    let o = lmlt(&["selftest", "--inject-fault", "model.param_closure"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL model.param_closure"));
    assert!(stderr(&o).contains("model.param_closure"));
    assert_eq!(lmlt(&["selftest", "--inject-fault", "nope"], dir.path()).status.code(), Some(1));
}
