use std::path::{Path, PathBuf};

use groupvq::cli::commands::{EXTENSION_HEADER, METRICS_HEADER, SWEEP_GROUPS_HEADER};
use groupvq::cli::run_command;
use groupvq::cli::tensor_file::read_tensor_file;
use groupvq::numerics::Tensor;

/// Small-but-real settings shared by the runs below.
const SMALL: &[&str] = &[
    "data.synthetic.count=64",
    "eval.synthetic.count=32",
    "train.codebook_size=64",
    "train.epochs=2",
    "train.mode=group:4",
];

fn gvq(out: &Path, args: &[&str], sets: &[&str]) -> i32 {
    let mut argv: Vec<String> = vec!["gvq".into()];
    argv.extend(args.iter().map(|s| s.to_string()));
    argv.push("--output".into());
    argv.push(out.display().to_string());
    for s in sets {
        argv.push("--set".into());
        argv.push(s.to_string());
    }
    run_command(argv)
}

fn read(path: impl AsRef<Path>) -> String {
    std::fs::read_to_string(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&read(path)).unwrap()
}

fn trained(dir: &Path) -> PathBuf {
    let out = dir.join("train");
    assert_eq!(gvq(&out, &["train"], SMALL), 0);
    out.join("checkpoint.gvqc")
}

#[test]
fn generate_data_writes_one_file_per_image() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        assert_eq!(gvq(out, &["generate-data"], &["data.synthetic.count=8", "data.synthetic.seed=5"]), 0);
    }
    let mut files: Vec<_> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "gvqt"))
        .collect();
    files.sort();
    assert_eq!(files.len(), 8);
    for f in &files {
        let t: Tensor<f32> = read_tensor_file(f).unwrap();
        assert_eq!(t.shape(), &[32, 32, 3]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(std::fs::read(f).unwrap(), std::fs::read(b.join(f.file_name().unwrap())).unwrap());
    }
}

#[test]
fn train_writes_checkpoint_and_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    assert!(ckpt.exists());
    let csv = read(dir.path().join("train/metrics.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], METRICS_HEADER);
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("0,") && lines[2].starts_with("1,"));
    let summary = json(dir.path().join("train/summary.json"));
    assert_eq!(summary["steps"], 4);
    assert_eq!(summary["mode"], "group:4");
}

#[test]
fn runs_are_deterministic_and_echo_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    assert_eq!(gvq(&a, &["train"], SMALL), 0);
    assert_eq!(gvq(&b, &["train"], SMALL), 0);
    let echoed = a.join("config.resolved.toml");
    assert_eq!(gvq(&c, &["train", "--config", echoed.to_str().unwrap()], &[]), 0);
    let first = std::fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(first, std::fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(first, std::fs::read(c.join("metrics.csv")).unwrap());
    assert_eq!(
        std::fs::read(a.join("checkpoint.gvqc")).unwrap(),
        std::fs::read(c.join("checkpoint.gvqc")).unwrap()
    );
}

#[test]
fn trains_from_a_directory_of_tensor_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    assert_eq!(gvq(&data, &["generate-data"], &["data.synthetic.count=16"]), 0);
    let set = format!("data.path=\"{}\"", data.display());
    let sets = ["train.codebook_size=16", "train.epochs=1", "train.mode=joint", "eval.synthetic.count=8", &set];
    assert_eq!(gvq(&dir.path().join("run"), &["train"], &sets), 0);
    assert_eq!(read(dir.path().join("run/metrics.csv")).lines().count(), 2);
}

#[test]
fn extend_identity_row_matches_eval() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let c = ckpt.to_str().unwrap();
    let (ext, ev) = (dir.path().join("ext"), dir.path().join("eval"));
    assert_eq!(gvq(&ext, &["extend", "--checkpoint", c, "--multiples", "1,2"], SMALL), 0);
    assert_eq!(gvq(&ev, &["eval", "--checkpoint", c], SMALL), 0);
    let csv = read(ext.join("extension.csv"));
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], EXTENSION_HEADER);
    assert_eq!(lines.len(), 3);
    let rows = json(ext.join("extension.json"))["rows"].clone();
    let plain = json(ev.join("eval.json"));
    assert_eq!(rows[0]["codebook_size"], 64);
    assert_eq!(rows[1]["codebook_size"], 128);
    for key in ["mse", "psnr", "ssim", "utilization"] {
        assert_eq!(rows[0][key], plain[key], "{key}");
    }
    assert_eq!(read(ev.join("usage.csv")).lines().count(), 65);
}

#[test]
fn resample_and_analyze_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = trained(dir.path());
    let c = ckpt.to_str().unwrap();
    let rs = dir.path().join("rs");
    assert_eq!(gvq(&rs, &["resample", "--checkpoint", c, "--mode", "self-extend", "--multiple", "2"], SMALL), 0);
    let codes: Tensor<f32> = read_tensor_file(&rs.join("codebook.gvqt")).unwrap();
    assert_eq!(codes.shape(), &[128, 32]);
    let remap = read(rs.join("remap.csv"));
    assert_eq!(remap.lines().next(), Some("old_index,new_index"));
    assert_eq!(remap.lines().count(), 65);
    assert!(remap.contains("\n16,32\n"));

    let down = dir.path().join("down");
    assert_eq!(gvq(&down, &["resample", "--checkpoint", c, "--sizes", "2,2,2,2"], SMALL), 0);
    assert_eq!(json(down.join("resample.json"))["codebook_size"], 8);

    let an = dir.path().join("an");
    assert_eq!(gvq(&an, &["analyze", "--checkpoint", c, "--per-group", "8"], SMALL), 0);
    assert_eq!(read(an.join("group_stats.csv")).lines().count(), 5);
    assert_eq!(read(an.join("projection_pca.csv")).lines().count(), 33);
    assert_eq!(read(an.join("projection_random.csv")).lines().count(), 33);
    let cos: Tensor<f32> = read_tensor_file(&an.join("cosine.gvqt")).unwrap();
    assert_eq!(cos.shape(), &[32, 32]);
    let csv = read(an.join("cosine.csv"));
    assert_eq!(csv.lines().next(), Some("i,j,sim"));
    assert_eq!(csv.lines().count(), 32 * 32 + 1);
    assert_eq!(read(an.join("projection_pca.csv")).lines().next(), Some("code_index,group,x,y"));
}

#[test]
fn sweeps_emit_complete_tables() {
    let dir = tempfile::tempdir().unwrap();
    let sets = [
        "data.synthetic.count=32",
        "eval.synthetic.count=16",
        "train.codebook_size=64",
        "train.epochs=1",
        "export.checkpoint=false",
    ];
    let g = dir.path().join("g");
    assert_eq!(gvq(&g, &["sweep-groups", "--groups", "1,4,16,64"], &sets), 0);
    let table = read(g.join("sweep_groups.csv"));
    let lines: Vec<&str> = table.lines().collect();
    assert_eq!(lines[0], SWEEP_GROUPS_HEADER);
    assert_eq!(lines.len(), 5);
    for (line, k) in lines[1..].iter().zip(["1", "4", "16", "64"]) {
        assert_eq!(line.split(',').next(), Some(k));
    }

    let p = dir.path().join("p");
    assert_eq!(gvq(&p, &["sweep-projector"], &sets), 0);
    assert_eq!(read(p.join("sweep_projector.csv")).lines().count(), 4);

    let e = dir.path().join("e");
    let mut with_ckpt = sets.to_vec();
    with_ckpt.pop();
    assert_eq!(gvq(&e, &["sweep-extension", "--multiples", "1,2,4"], &with_ckpt), 0);
    assert_eq!(read(e.join("sweep_extension.csv")).lines().count(), 4);
}

#[test]
fn error_paths_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    assert_eq!(run_command(["gvq", "frobnicate"]), 2);
    assert_eq!(gvq(&out, &["train"], &["train.mode=group:7"]), 2);
    assert_eq!(gvq(&out, &["train"], &["train.nonsense=1"]), 2);
    let missing = dir.path().join("nope.gvqc");
    assert_eq!(gvq(&out, &["eval", "--checkpoint", missing.to_str().unwrap()], SMALL), 1);
    let bad = dir.path().join("bad.gvqc");
    std::fs::write(&bad, b"XXXXjunkjunk").unwrap();
    assert_eq!(gvq(&out, &["eval", "--checkpoint", bad.to_str().unwrap()], SMALL), 1);
    assert_eq!(gvq(&out, &["train"], &["data.path=\"/definitely/not/here.gvqt\""]), 1);
    let ckpt = trained(dir.path());
    let c = ckpt.to_str().unwrap();
    assert_eq!(gvq(&out, &["resample", "--checkpoint", c, "--mode", "self-extend", "--sizes", "1,1,1,1"], SMALL), 2);
    assert_eq!(gvq(&out, &["resample", "--checkpoint", c], SMALL), 2);
}
