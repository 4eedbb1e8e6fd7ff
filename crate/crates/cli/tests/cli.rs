use std::path::Path;
use std::process::{Command, Output};

use faimreg::jacobian::{det_map, folding_count};
use faimreg::volume::{load_field, load_volume, save_field};
use faimreg::{Dims, DisplacementField};

fn faimreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faimreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, dims: &str) {
    let o = faimreg(&["synth", "--seed", "7", "--n", "3", "--dims", dims, "--labels", "3", "--out", p(dir)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for sub in ["", "images", "labels", "fields"] {
        let mut entries: Vec<_> = std::fs::read_dir(dir.join(sub)).unwrap().map(|e| e.unwrap().path()).collect();
        entries.sort();
        for e in entries.into_iter().filter(|e| e.is_file()) {
            out.push((e.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&e).unwrap()));
        }
    }
    out
}

#[test]
fn synth_writes_a_reproducible_dataset() {
    let t = tempfile::tempdir().unwrap();
    let o = faimreg(&["synth", "--seed", "7", "--n", "4", "--dims", "16", "--out", p(&t.path().join("a"))]);
    assert_eq!(code(&o), 0);
    faimreg(&["synth", "--seed", "7", "--n", "4", "--dims", "16", "--out", p(&t.path().join("b"))]);
    let a = read_tree(&t.path().join("a"));
    assert_eq!(a.len(), 13);
    assert_eq!(a, read_tree(&t.path().join("b")));
    let o = faimreg(&["synth", "--dims", "18", "--out", p(&t.path().join("c"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&faimreg(&["train", "--out", "x"])), 1);
    assert_eq!(code(&faimreg(&["describe", "--bogus"])), 1);
    assert_eq!(code(&faimreg(&["nonsense"])), 1);
    assert_eq!(code(&faimreg(&["--help"])), 0);
    assert_eq!(code(&faimreg(&["gradcheck", "--tolerance", "-1"])), 1);
}

#[test]
fn train_register_evaluate_round() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8");
    let run = t.path().join("run");
    let o = faimreg(&[
        "train", "--data", p(&data), "--model", "direct", "--lr", "0.05", "--epochs", "30", "--alpha", "0.1",
        "--beta", "1e-2", "--cc", "local5", "--out", p(&run),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("final step 180"));
    let log = std::fs::read_to_string(run.join("loss_log.csv")).unwrap();
    let mut lines = log.lines();
    assert_eq!(lines.next().unwrap(), "step,epoch,source,target,image,r1,r2,total");
    let rows: Vec<Vec<f64>> = lines
        .map(|l| l.split(',').skip(4).map(|v| v.parse().unwrap()).collect())
        .collect();
    assert_eq!(rows.len(), 30 * 6);
    for r in &rows {
        assert!((r[3] - (r[0] + 0.1 * r[1] + 1e-2 * r[2])).abs() <= 1e-12 * r[3].abs().max(1.0));
    }
    let ck = run.join("checkpoint.fck");

    let report = t.path().join("report.csv");
    let per_label = t.path().join("labels.csv");
    let o = faimreg(&[
        "evaluate", "--checkpoint", p(&ck), "--data", p(&data), "--report", p(&report), "--per-label", p(&per_label),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("mean_dice="));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6 + 1);
    assert!(std::fs::read_to_string(&per_label).unwrap().starts_with("source,target,label,dice"));

    let field = t.path().join("u.frv");
    let warped = t.path().join("w.frv");
    let img = |id: &str| data.join(format!("images/{id}.frv"));
    let o = faimreg(&[
        "register", "--checkpoint", p(&ck), "--source", p(&img("s00")), "--target", p(&img("s01")),
        "--source-id", "s00", "--target-id", "s01", "--out-field", p(&field), "--out-warped", p(&warped),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(load_field(&field).unwrap().dims(), Dims::cube(8));
    assert_eq!(load_volume(&warped).unwrap().dims(), Dims::cube(8));

    // the direct model has no field for an unknown pairing of ids
    let o = faimreg(&[
        "register", "--checkpoint", p(&ck), "--source", p(&img("s00")), "--target", p(&img("s01")),
        "--source-id", "s00", "--target-id", "zz", "--out-field", p(&field), "--out-warped", p(&warped),
    ]);
    assert_eq!(code(&o), 2);

    let other = t.path().join("other");
    synth(&other, "12");
    let o = faimreg(&[
        "register", "--checkpoint", p(&ck), "--source", p(&other.join("images/s00.frv")), "--target", p(&img("s01")),
        "--out-field", p(&field), "--out-warped", p(&warped),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("dims"));

    let o = faimreg(&["describe", "--checkpoint", p(&ck)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("u[s00->s01]"));
    assert!(stdout(&o).contains(&(3 * 8 * 8 * 8).to_string()));

    std::fs::write(&ck, b"garbage!").unwrap();
    let o = faimreg(&["evaluate", "--checkpoint", p(&ck), "--data", p(&data), "--report", p(&report)]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("bad magic"));
}

#[test]
fn faim_register_on_identical_inputs() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8");
    let run = t.path().join("run");
    let o = faimreg(&["train", "--data", p(&data), "--epochs", "1", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let img = data.join("images/s02.frv");
    let field = t.path().join("u.frv");
    let warped = t.path().join("w.frv");
    let o = faimreg(&[
        "register", "--checkpoint", p(&run.join("checkpoint.fck")), "--source", p(&img), "--target", p(&img),
        "--out-field", p(&field), "--out-warped", p(&warped),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let image_loss: f64 = stdout(&o).split_whitespace().next().unwrap().trim_start_matches("image=").parse().unwrap();
    assert!(image_loss < 0.01, "{image_loss}");
}

#[test]
fn evaluate_rejects_unlabeled_data() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8");
    let run = t.path().join("run");
    assert_eq!(code(&faimreg(&["train", "--data", p(&data), "--model", "direct", "--epochs", "1", "--out", p(&run)])), 0);
    let manifest = data.join("manifest.txt");
    let text = std::fs::read_to_string(&manifest).unwrap();
    let stripped: String = text.lines().filter(|l| !l.starts_with("label.")).map(|l| format!("{l}\n")).collect();
    std::fs::write(&manifest, stripped).unwrap();
    let o = faimreg(&[
        "evaluate", "--checkpoint", p(&run.join("checkpoint.fck")), "--data", p(&data), "--report", p(&t.path().join("r.csv")),
    ]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("no labels"));
}

#[test]
fn jmap_counts_folds() {
    let t = tempfile::tempdir().unwrap();
    let d = Dims::cube(6);
    let run = |u: &DisplacementField| {
        let f = t.path().join("u.frv");
        save_field(u, &f).unwrap();
        let (det, mask) = (t.path().join("det.frv"), t.path().join("mask.frv"));
        let o = faimreg(&["jmap", "--field", p(&f), "--out-det", p(&det), "--out-mask", p(&mask)]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        (stdout(&o).trim().to_string(), load_volume(&mask).unwrap())
    };
    let (n, mask) = run(&DisplacementField::zeros(d));
    assert_eq!(n, "N=0");
    assert!(mask.data().iter().all(|&v| v == 0.0));
    let fold = DisplacementField::from_fn(d, |x, _, _| [-2.0 * x as f32, 0.0, 0.0]).unwrap();
    let (n, mask) = run(&fold);
    assert_eq!(n, format!("N={}", d.len()));
    assert!(mask.data().iter().all(|&v| v == 1.0));

    let data = t.path().join("data");
    synth(&data, "8");
    let f = data.join("fields/s01.frv");
    assert_eq!(folding_count(&det_map(&load_field(&f).unwrap()).unwrap()), 0);
    let o = faimreg(&["jmap", "--field", p(&f), "--out-det", p(&t.path().join("d")), "--out-mask", p(&t.path().join("m"))]);
    assert_eq!(stdout(&o).trim(), "N=0");
    let o = faimreg(&[
        "jmap", "--field", p(&data.join("images/s01.frv")), "--out-det", p(&t.path().join("d")), "--out-mask", p(&t.path().join("m")),
    ]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_table_and_tolerance() {
    let o = faimreg(&["gradcheck", "--size", "4", "--samples", "1"]);
    assert_eq!(code(&o), 0, "{}{}", stdout(&o), stderr(&o));
    let table = stdout(&o);
    for op in [
        "conv3d", "conv3d transpose", "prelu", "add", "concat", "warp", "global cc", "local cc", "r1", "r2", "network",
    ] {
        assert!(table.contains(op), "{op} missing from\n{table}");
    }
    let o = faimreg(&["gradcheck", "--size", "3", "--samples", "1", "--tolerance", "1e-12"]);
    assert_eq!(code(&o), 2);
    assert!(stdout(&o).contains("FAIL"));
}

#[test]
fn describe_default_and_invalid_configs() {
    let o = faimreg(&["describe", "--dims", "16"]);
    assert_eq!(code(&o), 0);
    let text = stdout(&o);
    assert!(text.contains("3 total"));
    assert!(text.contains("pooling layers: 0"));
    assert!(text.contains("trainable parameters: 91379"));
    assert!(text.contains("179787"));
    let t = tempfile::tempdir().unwrap();
    let cfg = t.path().join("net.cfg");
    std::fs::write(&cfg, "branch_kernels=3,4\n").unwrap();
    assert_eq!(code(&faimreg(&["describe", "--config", p(&cfg)])), 1);
    std::fs::write(&cfg, "c0=8\n").unwrap();
    let o = faimreg(&["describe", "--config", p(&cfg)]);
    assert_eq!(code(&o), 0);
    assert!(stdout(&o).contains("->8"));
}

#[test]
fn train_config_file_and_overrides() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth(&data, "8");
    let cfg = t.path().join("train.cfg");
    std::fs::write(&cfg, "model=direct\nepochs=2\nlr=0.01\n").unwrap();
    let run = t.path().join("run");
    let o = faimreg(&["train", "--data", p(&data), "--config", p(&cfg), "--epochs", "1", "--out", p(&run)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(run.join("loss_log.csv")).unwrap().lines().count(), 1 + 6);
    std::fs::write(&cfg, "unknown=1\n").unwrap();
    assert_eq!(code(&faimreg(&["train", "--data", p(&data), "--config", p(&cfg), "--out", p(&run)])), 1);
    assert_eq!(code(&faimreg(&["train", "--data", p(&data), "--beta", "-1", "--out", p(&run)])), 1);
    assert_eq!(code(&faimreg(&["train", "--data", p(&t.path().join("missing")), "--out", p(&run)])), 2);
}
