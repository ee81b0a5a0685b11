use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bqkit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bqkit"))
        .current_dir(dir)
        .env_remove("BQKIT_JOBS")
        .args(args)
        .output()
        .expect("spawn bqkit")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = bqkit(dir, args);
    assert!(
        out.status.success(),
        "bqkit {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn read_json(path: PathBuf) -> Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

fn csv_rows(path: PathBuf) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

/// A small trained MLP on blobs, written to `model.nnmod`.
fn mlp(dir: &Path) {
    ok(dir, &["train", "--arch", "mlp", "--data", "blobs", "--samples", "600", "--epochs", "5", "--seed", "3"]);
}

#[test]
fn train_writes_model_and_one_metrics_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["train", "--arch", "mlp", "--data", "blobs", "--epochs", "30", "--seed", "7"]);
    let rows = csv_rows(dir.path().join("model.csv"));
    assert_eq!(rows.len(), 30);
    assert!(dir.path().join("model.nnmod").exists());
    assert!(dir.path().join("model.nnmod.run.json").exists());
}

#[test]
fn repeated_training_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let args = ["train", "--arch", "mlp", "--epochs", "3", "--seed", "7", "--out", "a.nnmod"];
    ok(dir.path(), &args);
    let first = std::fs::read(dir.path().join("a.nnmod")).unwrap();
    ok(dir.path(), &args);
    assert_eq!(first, std::fs::read(dir.path().join("a.nnmod")).unwrap());

    // Same result from the recorded config, with a different worker count.
    std::fs::remove_file(dir.path().join("a.nnmod")).unwrap();
    ok(dir.path(), &["--jobs", "1", "run", "--config", "a.nnmod.run.json"]);
    assert_eq!(first, std::fs::read(dir.path().join("a.nnmod")).unwrap());
}

#[test]
fn bad_paths_fail_without_leaving_files() {
    let dir = tempfile::tempdir().unwrap();
    let out = bqkit(dir.path(), &["train", "--data", "missing.nnd", "--epochs", "1", "--out", "m.nnmod"]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());

    let out = bqkit(dir.path(), &["train", "--epochs", "1", "--out", "no/such/dir/m.nnmod"]);
    assert!(!out.status.success());
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert!(leftovers.is_empty(), "{leftovers:?}");
}

#[test]
fn jobs_must_be_positive() {
    let dir = tempfile::tempdir().unwrap();
    assert!(!bqkit(dir.path(), &["--jobs", "0", "train", "--epochs", "1"]).status.success());
    let out = Command::new(env!("CARGO_BIN_EXE_bqkit"))
        .current_dir(dir.path())
        .env("BQKIT_JOBS", "0")
        .args(["train", "--epochs", "1"])
        .output()
        .unwrap();
    assert!(!out.status.success());
}

#[test]
fn analyze_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    mlp(dir.path());
    // 32,16 hidden plus the classifier.
    let layers = 3;

    ok(dir.path(), &["analyze", "--mode", "gaussian", "--std", "0.05", "--out", "g.csv"]);
    assert_eq!(csv_rows(dir.path().join("g.csv")).len(), layers);

    ok(dir.path(), &[
        "analyze", "--mode", "grad-vs-random", "--fraction", "0.5", "--std", "0.05", "--seeds", "5", "--out", "r.csv",
    ]);
    let rows = csv_rows(dir.path().join("r.csv"));
    assert_eq!(rows.len(), 2 * layers * 5);
}

#[test]
fn zero_noise_gives_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    mlp(dir.path());
    ok(dir.path(), &["analyze", "--mode", "gaussian", "--std", "0", "--out", "z.csv"]);
    let text = std::fs::read_to_string(dir.path().join("z.csv")).unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|h| *h == "delta").unwrap();
    for row in csv_rows(dir.path().join("z.csv")) {
        assert_eq!(row[col].parse::<f64>().unwrap(), 0.0);
    }
}

#[test]
fn eval_matches_on_raw_container() {
    let dir = tempfile::tempdir().unwrap();
    mlp(dir.path());
    // Trying no layers stores every tensor raw.
    ok(dir.path(), &["compress", "--layers-to-try", "0", "--out", "raw.bqz"]);
    ok(dir.path(), &["eval", "--model", "model.nnmod", "--out", "a.json"]);
    ok(dir.path(), &["eval", "--model", "raw.bqz", "--out", "b.json"]);
    let a = read_json(dir.path().join("a.json"));
    let b = read_json(dir.path().join("b.json"));
    assert_eq!(a["accuracy"], b["accuracy"]);
    assert!(a["accuracy"].as_f64().unwrap() > 0.5);
}

#[test]
fn u8_compress_lists_rejected_layers() {
    let dir = tempfile::tempdir().unwrap();
    mlp(dir.path());
    ok(dir.path(), &[
        "compress", "--variant", "u8", "--layer-drop", "0.01", "--eval-samples", "1000", "--out", "u8.bqz",
    ]);
    let report = read_json(dir.path().join("u8.bqz.report.json"));
    let summary = &report["summary"];
    let accepted = summary["accepted"].as_array().unwrap();
    let rejected = summary["rejected"].as_array().expect("rejected layers listed");
    assert_eq!(accepted.len() + rejected.len(), 3);
    assert_eq!(summary["eval_samples"], 1000);
    assert_eq!(report["variant"], "u8");
    ok(dir.path(), &["eval", "--model", "u8.bqz", "--out", "e.json"]);
}

/// Bits per weight straight from the `.bqz` header: PQ layers cost their
/// labels plus float centroids, raw layers their stored width.
fn bpw_from_header(path: &Path) -> (f64, f64) {
    let bytes = std::fs::read(path).unwrap();
    assert_eq!(&bytes[..4], b"BQZ1");
    let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let header: Value = serde_json::from_slice(&bytes[14..14 + len]).unwrap();
    let weights: Vec<&str> =
        header["manifest"]["layers"].as_array().unwrap().iter().filter_map(|l| l["weight_ref"].as_str()).collect();
    let (mut bits, mut count, mut label_bits, mut pq_count) = (0u64, 0u64, 0u64, 0u64);
    for t in header["tensors"].as_array().unwrap() {
        if !weights.contains(&t["name"].as_str().unwrap()) {
            continue;
        }
        let n: u64 = t["shape"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).product();
        let coding = &t["coding"];
        count += n;
        match coding["mode"].as_str().unwrap() {
            "pq" => {
                let d = coding["d"].as_u64().unwrap();
                let blocks = (n + coding["pad"].as_u64().unwrap()) / d;
                let labels = blocks * coding["label_bits"].as_u64().unwrap();
                bits += labels + 32 * d * coding["n_clusters"].as_u64().unwrap();
                label_bits += labels;
                pq_count += n;
            }
            "raw" => bits += n * if t["dtype"] == "U8" { 8 } else { 32 },
            other => panic!("unexpected coding {other}"),
        }
    }
    (bits as f64 / count as f64, label_bits as f64 / pq_count as f64)
}

#[test]
fn report_bpw_matches_header_arithmetic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    ok(p, &["train", "--arch", "cnn", "--data", "textures", "--samples", "400", "--epochs", "2", "--seed", "1"]);
    ok(p, &["gwk", "--data", "textures", "--samples", "400", "--epochs", "1", "--cv", "4", "--pw", "2", "--bits", "4"]);
    ok(p, &["report", "model.bqz", "--reference", "model.nnmod", "--data", "textures", "--samples", "300"]);

    let (total, label_only) = bpw_from_header(&p.join("model.bqz"));
    let report = read_json(p.join("report.json"));
    let entry = &report["inputs"][0];
    let bpw = &entry["bits_per_weight"];
    assert!((bpw["total"].as_f64().unwrap() - total).abs() < 1e-12, "{bpw} vs {total}");
    assert!((bpw["label_only"].as_f64().unwrap() - label_only).abs() < 1e-12);
    assert!(entry["accuracy_delta"].is_number());

    let gwk = read_json(p.join("model.bqz.report.json"));
    assert_eq!(gwk["bits_per_weight"]["total"], bpw["total"]);
    assert_eq!(csv_rows(p.join("model.bqz.trace.csv")).len(), 1);
}
