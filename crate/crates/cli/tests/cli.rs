//! Black-box tests of the `wsol` binary: exit codes, config resolution,
//! artifact layout, and the subcommand contracts that downstream scripts
//! rely on.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use wsol_core::cam::BBox;
use wsol_core::data::{generate_synthetic, save_dataset};
use wsol_core::eval::SampleResult;
use wsol_core::model::{build_network, save_checkpoint, CheckpointMeta, ModelConfig, Variant};

fn wsol(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wsol"))
        .args(args)
        .env_remove("WSOL_THREADS")
        .output()
        .expect("binary runs")
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Writes a small dataset pair and returns (train manifest, test manifest).
fn micro_dataset(dir: &Path, per_class: usize) -> (PathBuf, PathBuf) {
    let (train, test) = generate_synthetic(2, per_class, 2, 16, 5).unwrap();
    let train_manifest = save_dataset(&train, &dir.join("train")).unwrap();
    let test_manifest = save_dataset(&test, &dir.join("test")).unwrap();
    (train_manifest, test_manifest)
}

#[test]
fn help_exits_zero() {
    assert_eq!(exit_code(&wsol(&["--help"])), 0);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = wsol(&["frobnicate"]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsol(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "train.eppochs=3",
        "generate-data",
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(stderr(&out).contains("usage error"), "{}", stderr(&out));
}

#[test]
fn malformed_set_flag_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsol(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "no-equals-sign",
        "generate-data",
    ]);
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn bad_thread_env_is_a_usage_error() {
    let out = Command::new(env!("CARGO_BIN_EXE_wsol"))
        .args(["selftest"])
        .env("WSOL_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(exit_code(&out), 1);
}

#[test]
fn evaluate_without_inputs_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsol(&["--out", dir.path().to_str().unwrap(), "evaluate"]);
    assert_eq!(exit_code(&out), 1);
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1, "one-line diagnostic: {err}");
}

#[test]
fn missing_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let (_, test_manifest) = micro_dataset(dir.path(), 2);
    let out = wsol(&[
        "--out",
        dir.path().join("run").to_str().unwrap(),
        "evaluate",
        "--checkpoint",
        dir.path().join("absent.ckpt").to_str().unwrap(),
        "--data",
        test_manifest.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 2);
    assert_eq!(stderr(&out).lines().count(), 1);
}

#[test]
fn generate_data_writes_manifests_and_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = wsol(&[
        "--out",
        dir.path().to_str().unwrap(),
        "--set",
        "data.side=16",
        "--set",
        "data.per_class_train=2",
        "--set",
        "data.per_class_test=2",
        "generate-data",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(dir.path().join("train/manifest.csv").exists());
    assert!(dir.path().join("test/manifest.csv").exists());
    let cfg: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("config.json")).unwrap())
            .unwrap();
    assert_eq!(cfg["data"]["side"], 16);
    assert_eq!(cfg["data"]["per_class_train"], 2);
    // Untouched fields keep their defaults in the resolved file.
    assert_eq!(cfg["train"]["momentum"], 0.9);
}

#[test]
fn zero_epoch_train_preserves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let (train_manifest, _) = micro_dataset(dir.path(), 2);
    let run = dir.path().join("run");
    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "--set",
        "train.epochs=0",
        "--set",
        "train.batch_size=2",
        "--set",
        "train.seed=9",
        "train",
        "--data",
        train_manifest.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let reference = dir.path().join("reference.ckpt");
    let net = build_network(&ModelConfig::new(Variant::Toy10, 2, 16), 9).unwrap();
    let meta = CheckpointMeta {
        model: ModelConfig::new(Variant::Toy10, 2, 16),
        init_seed: 9,
        train_seed: Some(9),
        epochs_trained: 0,
    };
    save_checkpoint(&net, &meta, &reference).unwrap();
    assert_eq!(
        std::fs::read(run.join("checkpoint.ckpt")).unwrap(),
        std::fs::read(&reference).unwrap(),
        "untrained checkpoint must equal a fresh initialization"
    );
}

#[test]
fn results_fixture_scores_exactly() {
    let dir = tempfile::tempdir().unwrap();
    let bx = |x0, y0, x1, y1| BBox::new(x0, y0, x1, y1).unwrap();
    let result = |id, true_class, predicted, iou: f64| SampleResult {
        sample_id: id,
        true_class,
        predicted_class: predicted,
        bbox_top1: bx(0, 0, 1, 1),
        bbox_gtknown: bx(0, 0, 1, 1),
        iou_top1: iou,
        iou_gtknown: iou,
    };
    let fixture = vec![
        result(0, 0, 0, 0.6),
        result(1, 0, 0, 0.4),
        result(2, 1, 0, 0.9),
        result(3, 1, 0, 0.1),
    ];
    let fixture_path = dir.path().join("fixture.json");
    std::fs::write(&fixture_path, serde_json::to_string(&fixture).unwrap()).unwrap();

    let run = dir.path().join("run");
    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "evaluate",
        "--results",
        fixture_path.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("50.00"), "{text}");
    assert!(text.contains("25.00"), "{text}");
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["gt_known_loc"], 50.0);
    assert_eq!(report["top1_loc"], 25.0);
    assert_eq!(report["top1_clas"], 50.0);
}

#[test]
fn matrix_columns_follow_the_table_order() {
    let dir = tempfile::tempdir().unwrap();
    let (train_manifest, test_manifest) = micro_dataset(dir.path(), 4);
    let run = dir.path().join("run");
    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "--set",
        "train.epochs=1",
        "--set",
        "matrix.batch_sizes=[4]",
        "--set",
        "matrix.seeds=[0]",
        "matrix",
        "--train-data",
        train_manifest.to_str().unwrap(),
        "--test-data",
        test_manifest.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let table = std::fs::read_to_string(run.join("matrix.txt")).unwrap();
    let header = table
        .lines()
        .find(|l| l.starts_with("metric"))
        .expect("header line");
    let cols: Vec<&str> = header.split_whitespace().skip(1).collect();
    assert_eq!(cols, ["none", "hns", "gr", "gr_then_hns", "hns_then_gr"]);

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run.join("matrix.json")).unwrap()).unwrap();
    assert_eq!(report["cells"].as_array().unwrap().len(), 5);
}

#[test]
fn resolved_config_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("a");
    let out = wsol(&[
        "--out",
        first.to_str().unwrap(),
        "--set",
        "data.side=16",
        "--set",
        "data.per_class_train=2",
        "--set",
        "data.per_class_test=2",
        "--set",
        "data.seed=3",
        "generate-data",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let second = dir.path().join("b");
    let out = wsol(&[
        "--config",
        first.join("config.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
        "generate-data",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));

    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(
        read(&first.join("config.json")),
        read(&second.join("config.json"))
    );
    assert_eq!(
        read(&first.join("train/manifest.csv")),
        read(&second.join("train/manifest.csv"))
    );
    assert_eq!(
        read(&first.join("train/img_00000.ppm")),
        read(&second.join("train/img_00000.ppm"))
    );
}

#[test]
fn localize_and_preview_write_their_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let (train_manifest, test_manifest) = micro_dataset(dir.path(), 2);
    let run = dir.path().join("run");
    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "--set",
        "train.epochs=1",
        "--set",
        "train.batch_size=2",
        "train",
        "--data",
        train_manifest.to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    let ckpt = run.join("checkpoint.ckpt");

    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "localize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test_manifest.to_str().unwrap(),
        "--index",
        "1",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    assert!(run.join("heatmap.ppm").exists());
    assert!(run.join("overlay.ppm").exists());
    let record: serde_json::Value = serde_json::from_str(stdout(&out).trim()).unwrap();
    assert!(record["box"]["x_max"].as_u64().unwrap() <= 16);
    assert!(record["iou_with_ground_truth"].as_f64().unwrap() <= 1.0);

    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "augment-preview",
        "--data",
        train_manifest.to_str().unwrap(),
        "--draws",
        "2",
    ]);
    assert_eq!(exit_code(&out), 0, "{}", stderr(&out));
    for name in ["none", "hns", "gr", "gr_then_hns", "hns_then_gr"] {
        assert!(run.join(format!("preview_{name}.ppm")).exists(), "{name}");
    }

    let out = wsol(&[
        "--out",
        run.to_str().unwrap(),
        "localize",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--data",
        test_manifest.to_str().unwrap(),
        "--index",
        "999",
    ]);
    assert_eq!(exit_code(&out), 2);
}
