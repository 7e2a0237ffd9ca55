use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use davegan::data;

fn davegan(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_davegan")).args(args).output().expect("spawn davegan")
}

fn ok(args: &[&str]) -> Output {
    let o = davegan(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn pgm_count(dir: &Path) -> usize {
    fs::read_dir(dir).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "pgm")).count()
}

/// Trains a one-epoch ellipse model on 8 images; returns the checkpoint path.
fn tiny_model(root: &Path) -> std::path::PathBuf {
    let data = root.join("data");
    ok(&["make-data", "--kind", "ellipse", "--num", "8", "--size", "32", "--out", s(&data), "--seed", "3"]);
    let cfg = root.join("tiny.cfg");
    fs::write(&cfg, "batch_size = 4\nepochs = 1\n").unwrap();
    let run = root.join("run");
    ok(&["train", "--data", s(&data), "--out", s(&run), "--config", s(&cfg), "--seed", "1"]);
    run.join("model.dvgn")
}

#[test]
fn make_data_variants() {
    let dir = tempfile::tempdir().unwrap();
    let ell = dir.path().join("ell");
    ok(&["make-data", "--kind", "ellipse", "--num", "100", "--size", "32", "--out", s(&ell)]);
    assert_eq!(pgm_count(&ell), 100);
    assert_eq!(data::read_manifest(&ell.join("manifest.txt")).unwrap().len(), 100);

    let cb_a = dir.path().join("cb_a");
    let cb_b = dir.path().join("cb_b");
    ok(&["make-data", "--kind", "checkerboard", "--size", "256", "--out", s(&cb_a)]);
    ok(&["make-data", "--kind", "checkerboard", "--size", "256", "--out", s(&cb_b)]);
    let name = "checkerboard_00000.pgm";
    assert_eq!(fs::read(cb_a.join(name)).unwrap(), fs::read(cb_b.join(name)).unwrap());

    let tiles = dir.path().join("tiles");
    ok(&["make-data", "--kind", "tiles", "--input", s(&cb_a.join(name)), "--tile", "64", "--out", s(&tiles)]);
    assert_eq!(pgm_count(&tiles), 16);

    let o = davegan(&["make-data", "--kind", "checkerboard", "--num", "3", "--out", s(&cb_a)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_then_use_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let model = tiny_model(root);
    assert!(model.exists());
    let log = fs::read_to_string(root.join("run/loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);

    let gen = root.join("gen");
    ok(&["generate", "--checkpoint", s(&model), "--num", "4", "--out", s(&gen)]);
    assert_eq!(pgm_count(&gen), 8);

    let rec = root.join("rec");
    let inputs: Vec<String> = (0..3).map(|i| root.join(format!("data/ellipse_{i:05}.pgm")).display().to_string()).collect();
    let mut args = vec!["reconstruct", "--checkpoint", s(&model), "--out", s(&rec), "--input"];
    args.extend(inputs.iter().map(String::as_str));
    ok(&args);
    assert_eq!(pgm_count(&rec), 6);
    assert!(rec.join("ellipse_00000.recon.pgm").exists());
    assert!(rec.join("ellipse_00000.recon.rounded.pgm").exists());

    let grid = root.join("grid.pgm");
    ok(&["traverse", "--checkpoint", s(&model), "--input", &inputs[0], "--out", s(&grid)]);
    let g = data::read_image(&grid).unwrap();
    assert_eq!((g.height(), g.width()), (5 * 32, 13 * 32));

    let flat = root.join("flat.pgm");
    ok(&["traverse", "--checkpoint", s(&model), "--input", &inputs[0], "--range", "0", "--steps", "3", "--out", s(&flat)]);
    let f = data::read_image(&flat).unwrap();
    for i in 0..f.height() {
        for j in 0..32 {
            assert_eq!(f.get(i, j), f.get(i, j + 32));
            assert_eq!(f.get(i, j), f.get(i, j + 64));
        }
    }

    let bad = root.join("bad.dvgn");
    let mut bytes = fs::read(&model).unwrap();
    bytes[4] = 9;
    fs::write(&bad, bytes).unwrap();
    let o = davegan(&["generate", "--checkpoint", s(&bad), "--out", s(&gen)]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("version"));
}

#[test]
fn metrics_modes() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    ok(&["make-data", "--kind", "ellipse", "--num", "6", "--size", "32", "--out", s(&a), "--seed", "4"]);

    let o = ok(&["metrics", "--set-a", s(&a), "--set-b", s(&a), "--mode", "rec"]);
    let csv = String::from_utf8(o.stdout).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("structure_id,e_rec,e_gen,v_f"));
    for line in lines {
        let cols: Vec<&str> = line.split(',').collect();
        assert_eq!(cols[1].parse::<f64>().unwrap(), 0.0);
        assert_eq!(cols[2], "");
    }
    assert!(String::from_utf8_lossy(&o.stderr).contains("E_rec = 0"));

    let subset = dir.path().join("subset.txt");
    fs::write(&subset, "a/ellipse_00002.pgm\na/ellipse_00004.pgm\n").unwrap();
    let o = ok(&["metrics", "--set-a", s(&subset), "--set-b", s(&a), "--mode", "gen"]);
    let csv = String::from_utf8(o.stdout).unwrap();
    assert_eq!(csv.lines().count(), 3);
    for line in csv.lines().skip(1) {
        assert_eq!(line.split(',').nth(2).unwrap().parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let o = davegan(&["train", "--data", s(&missing), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("not found"));

    let o = davegan(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn size_mismatch_names_file() {
    let dir = tempfile::tempdir().unwrap();
    let model = tiny_model(dir.path());
    let big = dir.path().join("big");
    ok(&["make-data", "--kind", "checkerboard", "--size", "64", "--out", s(&big)]);
    let img = big.join("checkerboard_00000.pgm");
    let o = davegan(&["reconstruct", "--checkpoint", s(&model), "--input", s(&img)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("checkerboard_00000.pgm"));
}

#[test]
fn same_seed_same_log() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    tiny_model(a.path());
    tiny_model(b.path());
    let log = |d: &Path| fs::read_to_string(d.join("run/loss_log.csv")).unwrap();
    assert_eq!(log(a.path()), log(b.path()));
}
