use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
seed = 3
output_dir = "out"

[data]
source = "blobs"
blob_classes = 3
blob_per_class = 30
blob_side = 10
split = [60, 15, 15]
ood_source = "blobs"
ood_split = [15, 15]

[base]
architecture = "mlp:16"
epochs = 8
lr = 1e-2
batch_size = 16

[meta]
epochs = 6
batch_size = 16

[attack]
epsilon = 1.0
steps = 5
"#;

fn write_config(dir: &Path, text: &str) -> std::path::PathBuf {
    let path = dir.join("guide.toml");
    fs::write(&path, text).unwrap();
    path
}

fn guide(config: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_guide")).arg("-c").arg(config).args(args).output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn missing_dataset_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[data]\nsource = \"idx\"\nimages = \"nope.gz\"\nlabels = \"nope-labels.gz\"\n");
    let out = guide(&cfg, &["train-base"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("nope.gz"));
}

#[test]
fn unknown_metric_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL}\n[eval]\nmetric = \"vibes\"\n"));
    let out = guide(&cfg, &["evaluate"]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(!tmp.path().join("out/base").exists());
}

#[test]
fn unknown_keys_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "[base]\nepochz = 3\n");
    assert_eq!(guide(&cfg, &["train-base"]).status.code(), Some(2));
}

#[test]
fn downstream_stage_needs_its_inputs() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = guide(&cfg, &["calibrate"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(stderr(&out).contains("train-base"));
}

#[test]
fn train_base_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = guide(&cfg, &["train-base"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let base = tmp.path().join("out/base");
    let model = fs::read(base.join("model.gnn")).unwrap();
    let history = fs::read_to_string(base.join("history.csv")).unwrap();
    let losses: Vec<f64> = history.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 8);
    assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");

    let out = guide(&cfg, &["train-base"]);
    assert!(out.status.success());
    assert_eq!(fs::read(base.join("model.gnn")).unwrap(), model);
    assert_eq!(fs::read_to_string(base.join("history.csv")).unwrap(), history);
}

#[test]
fn full_report_is_byte_identical_on_rerun() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    let out = guide(&cfg, &["report"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let root = tmp.path().join("out");
    let meta_header = fs::read_to_string(root.join("meta/history.csv")).unwrap();
    assert!(meta_header.starts_with("epoch,rho,ell,kl,sre,total"));
    let report = fs::read_to_string(root.join("evaluate/report.csv")).unwrap();
    assert_eq!(report.lines().count(), 3);
    assert!(report.lines().nth(1).unwrap().starts_with("guide,mutual_info,"));

    let files = ["base/history.csv", "meta/history.csv", "evaluate/report.csv", "evaluate/scores.csv"];
    let first: Vec<Vec<u8>> = files.iter().map(|f| fs::read(root.join(f)).unwrap()).collect();
    fs::remove_dir_all(&root).unwrap();
    let out = guide(&cfg, &["report"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(root.join(f)).unwrap(), bytes, "{f} differs");
    }

    // thread count must not change results
    let out = guide(&cfg, &["-t", "3", "-o", tmp.path().join("t3").to_str().unwrap(), "report"]);
    assert!(out.status.success(), "{}", stderr(&out));
    for (f, bytes) in files.iter().zip(&first) {
        assert_eq!(&fs::read(tmp.path().join("t3").join(f)).unwrap(), bytes, "{f} differs with 3 threads");
    }
}

#[test]
fn corrupted_curriculum_cache_fails_hard() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), SMALL);
    for stage in ["train-base", "calibrate", "build-curriculum"] {
        let out = guide(&cfg, &[stage]);
        assert!(out.status.success(), "{stage}: {}", stderr(&out));
    }
    let views = tmp.path().join("out/curriculum/views.bin");
    let mut bytes = fs::read(&views).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0xff;
    fs::write(&views, bytes).unwrap();
    let out = guide(&cfg, &["train-meta"]);
    assert_eq!(out.status.code(), Some(3), "{}", stderr(&out));
    assert!(!tmp.path().join("out/meta/meta.gmm").exists());
}

#[test]
fn null_shift_gives_chance_auroc() {
    let tmp = tempfile::tempdir().unwrap();
    let text = SMALL.replace("ood_source = \"blobs\"", "ood_source = \"same\"").replace("[attack]", "[attack]\nenabled = false");
    let cfg = write_config(tmp.path(), &text);
    let out = guide(&cfg, &["report"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let report = fs::read_to_string(tmp.path().join("out/evaluate/report.csv")).unwrap();
    let header: Vec<&str> = report.lines().next().unwrap().split(',').collect();
    let col = header.iter().position(|&h| h == "auroc").unwrap();
    for line in report.lines().skip(1) {
        let auroc: f64 = line.split(',').nth(col).unwrap().parse().unwrap();
        assert!((auroc - 0.5).abs() <= 0.2, "{line}");
    }
}
