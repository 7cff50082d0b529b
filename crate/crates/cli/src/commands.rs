//! Subcommand implementations. Every command first materializes the run
//! directory and drops the fully-resolved config there, so a run can be
//! replayed byte-for-byte from its own artifacts.

use std::path::Path;
use std::process::ExitCode;

use serde::Serialize;

use wsol_core::augment::{apply_policy, batch_to_tensor, Image, Policy};
use wsol_core::cam::{cam_for_class, localize, normalized_map, BBox};
use wsol_core::data::{load_dataset, save_dataset, write_ppm, Dataset};
use wsol_core::eval::{evaluate, evaluate_model, iou, MatrixSpec, SampleResult};
use wsol_core::model::{
    build_network, load_checkpoint, save_checkpoint, CheckpointMeta, ModelConfig, Network,
};
use wsol_core::rng::RngStream;
use wsol_core::train::fit;

use crate::config::RunConfig;
use crate::{Command, Failure};

pub fn dispatch(cmd: &Command, cfg: &RunConfig, out: &Path) -> Result<ExitCode, Failure> {
    std::fs::create_dir_all(out)
        .map_err(|e| Failure::Runtime(format!("cannot create {}: {e}", out.display())))?;
    write_json(&out.join("config.json"), cfg)?;
    match cmd {
        Command::GenerateData => cmd_generate_data(cfg, out),
        Command::Train { data } => cmd_train(cfg, out, data),
        Command::Evaluate {
            checkpoint,
            data,
            results,
        } => cmd_evaluate(cfg, out, checkpoint.as_deref(), data.as_deref(), results.as_deref()),
        Command::Localize {
            checkpoint,
            data,
            index,
            class,
        } => cmd_localize(cfg, out, checkpoint, data, *index, *class),
        Command::AugmentPreview { data, index, draws } => {
            cmd_augment_preview(cfg, out, data, *index, *draws)
        }
        Command::Matrix {
            train_data,
            test_data,
        } => cmd_matrix(cfg, out, train_data, test_data),
        Command::Selftest => cmd_selftest(),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Failure::Runtime(format!("serialization failed: {e}")))?;
    text.push('\n');
    std::fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    std::fs::write(path, text)
        .map_err(|e| Failure::Runtime(format!("cannot write {}: {e}", path.display())))
}

/// Network geometry for a dataset: explicit config values win, inferred
/// values fill the gaps, disagreements get a warning on stderr.
fn model_config_for(cfg: &RunConfig, ds: &Dataset) -> ModelConfig {
    let ds_classes = ds.num_classes();
    let ds_side = ds.samples[0].image.width;
    let classes = cfg.model.num_classes.unwrap_or(ds_classes);
    let side = cfg.model.input_side.unwrap_or(ds_side);
    if classes != ds_classes {
        eprintln!("warning: config says {classes} classes, dataset has {ds_classes}");
    }
    if side != ds_side {
        eprintln!("warning: config says input side {side}, dataset images are {ds_side}");
    }
    ModelConfig::new(cfg.model.variant, classes, side)
}

fn cmd_generate_data(cfg: &RunConfig, out: &Path) -> Result<ExitCode, Failure> {
    let d = &cfg.data;
    let (train, test) = wsol_core::data::generate_synthetic(
        d.num_classes,
        d.per_class_train,
        d.per_class_test,
        d.side,
        d.seed,
    )?;
    let train_manifest = save_dataset(&train, &out.join("train"))?;
    let test_manifest = save_dataset(&test, &out.join("test"))?;
    println!(
        "wrote {} train samples to {}",
        train.len(),
        train_manifest.display()
    );
    println!(
        "wrote {} test samples to {}",
        test.len(),
        test_manifest.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &RunConfig, out: &Path, data: &Path) -> Result<ExitCode, Failure> {
    let ds = load_dataset(data)?;
    let mc = model_config_for(cfg, &ds);
    let mut net = build_network(&mc, cfg.train.seed)?;
    println!(
        "training {} ({} parameters) on {} samples",
        mc.variant,
        net.param_count(),
        ds.len()
    );
    let log = fit(&mut net, &ds, &cfg.train)?;
    write_text(&out.join("train_log.jsonl"), &log.to_jsonl()?)?;
    let meta = CheckpointMeta {
        model: mc,
        init_seed: cfg.train.seed,
        train_seed: Some(cfg.train.seed),
        epochs_trained: cfg.train.epochs,
    };
    let ckpt = out.join("checkpoint.ckpt");
    save_checkpoint(&net, &meta, &ckpt)?;
    if let Some(last) = log.entries.last() {
        println!(
            "epoch {}: lr {} mean loss {:.6}",
            last.epoch, last.lr, last.mean_loss
        );
    }
    println!("checkpoint written to {}", ckpt.display());
    Ok(ExitCode::SUCCESS)
}

fn load_network(path: &Path) -> Result<(Network, CheckpointMeta), Failure> {
    Ok(load_checkpoint(path)?)
}

fn cmd_evaluate(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: Option<&Path>,
    data: Option<&Path>,
    results: Option<&Path>,
) -> Result<ExitCode, Failure> {
    let report = if let Some(results_path) = results {
        let text = std::fs::read_to_string(results_path).map_err(|e| {
            Failure::Runtime(format!("cannot read {}: {e}", results_path.display()))
        })?;
        let results: Vec<SampleResult> = serde_json::from_str(&text).map_err(|e| {
            Failure::Runtime(format!("{} is not a results file: {e}", results_path.display()))
        })?;
        let num_classes = results
            .iter()
            .map(|r| r.true_class.max(r.predicted_class) + 1)
            .max()
            .unwrap_or(0);
        evaluate(&results, num_classes, None)?
    } else {
        let (Some(ckpt), Some(manifest)) = (checkpoint, data) else {
            return Err(Failure::Usage(
                "evaluate needs --checkpoint plus --data, or --results".to_string(),
            ));
        };
        let (net, _meta) = load_network(ckpt)?;
        let ds = load_dataset(manifest)?;
        let (report, sample_results) = evaluate_model(
            &net,
            &ds,
            cfg.eval.threshold_frac,
            cfg.eval.connectivity,
            None,
        )?;
        write_json(&out.join("results.json"), &sample_results)?;
        report
    };
    write_json(&out.join("report.json"), &report)?;
    print!("{}", report.render_text());
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct LocalizeRecord {
    /// Class whose activation map produced the box.
    class: usize,
    predicted_class: usize,
    true_class: usize,
    #[serde(rename = "box")]
    bbox: BBox,
    iou_with_ground_truth: f64,
}

/// Paints the one-pixel outline of a half-open box.
fn draw_box(img: &mut Image, b: &BBox, rgb: [f64; 3]) {
    for x in b.x_min..b.x_max {
        for c in 0..3 {
            img.set(x, b.y_min, c, rgb[c]);
            img.set(x, b.y_max - 1, c, rgb[c]);
        }
    }
    for y in b.y_min..b.y_max {
        for c in 0..3 {
            img.set(b.x_min, y, c, rgb[c]);
            img.set(b.x_max - 1, y, c, rgb[c]);
        }
    }
}

fn cmd_localize(
    cfg: &RunConfig,
    out: &Path,
    checkpoint: &Path,
    data: &Path,
    index: usize,
    class: Option<usize>,
) -> Result<ExitCode, Failure> {
    let (net, _meta) = load_network(checkpoint)?;
    let ds = load_dataset(data)?;
    if index >= ds.len() {
        return Err(Failure::Runtime(format!(
            "index {index} out of range, dataset has {} samples",
            ds.len()
        )));
    }
    let sample = &ds.samples[index];
    let side = net.config.input_side;
    let x = batch_to_tensor(&[&sample.image])?;
    let fwd = net.forward_eval(&x)?;
    let predicted = wsol_core::cam::argmax(fwd.logits.data());
    let cam_class = class.unwrap_or(predicted);
    let heat = cam_for_class(&net, &fwd.features, 0, cam_class)?;

    let norm = normalized_map(&heat, side)?;
    let mut heat_img = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let v = norm.get(x, y);
            for c in 0..3 {
                heat_img.set(x, y, c, v);
            }
        }
    }
    write_ppm(&heat_img, &out.join("heatmap.ppm"))?;

    let bbox = localize(&heat, side, cfg.eval.threshold_frac, cfg.eval.connectivity)?;
    let mut overlay = sample.image.clone();
    draw_box(&mut overlay, &sample.gt_box, [0.0, 0.0, 1.0]);
    draw_box(&mut overlay, &bbox, [0.0, 1.0, 0.0]);
    write_ppm(&overlay, &out.join("overlay.ppm"))?;

    let record = LocalizeRecord {
        class: cam_class,
        predicted_class: predicted,
        true_class: sample.label,
        bbox,
        iou_with_ground_truth: iou(&bbox, &sample.gt_box)?,
    };
    write_json(&out.join("localize.json"), &record)?;
    println!(
        "{}",
        serde_json::to_string(&record).map_err(|e| Failure::Runtime(e.to_string()))?
    );
    Ok(ExitCode::SUCCESS)
}

/// Lays out images left to right with a white separator column.
fn tile_row(images: &[Image], sep: usize) -> Image {
    let h = images[0].height;
    let w: usize = images.iter().map(|i| i.width).sum::<usize>() + sep * (images.len() - 1);
    let mut canvas = Image::new(w, h);
    for p in canvas.pixels.iter_mut() {
        *p = 1.0;
    }
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height {
            for x in 0..img.width {
                for c in 0..3 {
                    canvas.set(x0 + x, y, c, img.get(x, y, c));
                }
            }
        }
        x0 += img.width + sep;
    }
    canvas
}

fn cmd_augment_preview(
    cfg: &RunConfig,
    out: &Path,
    data: &Path,
    index: usize,
    draws: usize,
) -> Result<ExitCode, Failure> {
    if draws == 0 {
        return Err(Failure::Usage("--draws must be at least 1".to_string()));
    }
    let ds = load_dataset(data)?;
    if index >= ds.len() {
        return Err(Failure::Runtime(format!(
            "index {index} out of range, dataset has {} samples",
            ds.len()
        )));
    }
    let img = &ds.samples[index].image;
    let fill = cfg.train.augment.fill_value.unwrap_or(ds.channel_means());
    let stream = RngStream::new(cfg.train.seed);
    for policy in Policy::TABLE_ORDER {
        let mut spec = cfg.train.augment.clone();
        spec.policy = policy;
        let mut strip = vec![img.clone()];
        for d in 0..draws {
            let mut rng = stream.sample_stream(d, index);
            strip.push(apply_policy(&spec, fill, img, &mut rng)?);
        }
        let path = out.join(format!("preview_{policy}.ppm"));
        write_ppm(&tile_row(&strip, 2), &path)?;
        println!("wrote {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_matrix(
    cfg: &RunConfig,
    out: &Path,
    train_data: &Path,
    test_data: &Path,
) -> Result<ExitCode, Failure> {
    let train_set = load_dataset(train_data)?;
    let test_set = load_dataset(test_data)?;
    let spec = MatrixSpec {
        policies: cfg.matrix.policies.clone(),
        batch_sizes: cfg.matrix.batch_sizes.clone(),
        variants: cfg.matrix.variants.clone(),
        seeds: cfg.matrix.seeds.clone(),
        train: cfg.train.clone(),
        threshold_frac: cfg.eval.threshold_frac,
        connectivity: cfg.eval.connectivity,
    };
    let report = wsol_core::eval::run_matrix(&train_set, &test_set, &spec)?;
    write_text(&out.join("matrix.json"), &report.to_json()?)?;
    let text = report.render_text(&spec);
    write_text(&out.join("matrix.txt"), &text)?;
    print!("{text}");
    if report.any_divergence() {
        eprintln!("error: one or more matrix cells diverged");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_selftest() -> Result<ExitCode, Failure> {
    let checks = wsol_core::selftest::run_all();
    let mut failed = 0;
    for check in &checks {
        let status = if check.passed { "PASS" } else { "FAIL" };
        println!("{}: {status} ({})", check.name, check.detail);
        if !check.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        eprintln!("error: {failed} self-test check(s) failed");
        return Ok(ExitCode::from(2));
    }
    Ok(ExitCode::SUCCESS)
}
