//! IoU, the three localization metrics, and the experiment-matrix runner.
//!
//! Metric definitions (all strict at the 0.5 boundary):
//! GT-known Loc counts samples whose ground-truth-class box overlaps the
//! annotation with IoU > 0.5; Top-1 Loc additionally requires a correct
//! prediction and uses the predicted-class box; Top-1 Clas is plain
//! classification accuracy. Every percentage is an exact count ratio.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{batch_to_tensor, Policy};
use crate::cam::{argmax, cam_for_class, localize, BBox, Connectivity};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{build_network, ModelConfig, Network, Variant};
use crate::train::{fit, TrainConfig};

/// Intersection over union of two half-open pixel boxes.
pub fn iou(a: &BBox, b: &BBox) -> Result<f64> {
    for bx in [a, b] {
        if bx.x_min >= bx.x_max || bx.y_min >= bx.y_max {
            return Err(Error::invalid(format!("degenerate box {bx}")));
        }
    }
    let iw = a.x_max.min(b.x_max).saturating_sub(a.x_min.max(b.x_min));
    let ih = a.y_max.min(b.y_max).saturating_sub(a.y_min.max(b.y_min));
    let inter = (iw * ih) as f64;
    let union = (a.area() + b.area()) as f64 - inter;
    Ok(inter / union)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleResult {
    pub sample_id: usize,
    pub true_class: usize,
    pub predicted_class: usize,
    /// Box from the predicted class's activation map.
    pub bbox_top1: BBox,
    /// Box from the ground-truth class's activation map.
    pub bbox_gtknown: BBox,
    pub iou_top1: f64,
    pub iou_gtknown: f64,
}

/// Identifies one experiment cell; echoed into reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellKey {
    pub policy: Policy,
    pub batch_size: usize,
    pub variant: Variant,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: usize,
    pub n_samples: usize,
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top1_clas: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub gt_known_loc: f64,
    pub top1_loc: f64,
    pub top1_clas: f64,
    pub n_samples: usize,
    pub per_class: Vec<ClassMetrics>,
    pub cell: Option<CellKey>,
}

fn percent(count: usize, total: usize) -> f64 {
    100.0 * count as f64 / total as f64
}

impl MetricsReport {
    /// Three-line human-readable summary with 2-decimal percentages.
    pub fn render_text(&self) -> String {
        format!(
            "GT-known Loc: {:.2}\nTop-1 Loc:    {:.2}\nTop-1 Clas:   {:.2}\n(n = {})\n",
            self.gt_known_loc, self.top1_loc, self.top1_clas, self.n_samples
        )
    }
}

/// Aggregates per-sample results into the three metrics plus a per-class
/// breakdown.
pub fn evaluate(
    results: &[SampleResult],
    num_classes: usize,
    cell: Option<CellKey>,
) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::invalid("cannot evaluate zero samples"));
    }
    for r in results {
        if r.true_class >= num_classes || r.predicted_class >= num_classes {
            return Err(Error::invalid(format!(
                "sample {} references a class outside 0..{num_classes}",
                r.sample_id
            )));
        }
        for v in [r.iou_top1, r.iou_gtknown] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::invalid(format!(
                    "sample {} has IoU {v} outside [0, 1]",
                    r.sample_id
                )));
            }
        }
    }
    let mut totals = [0usize; 3]; // gt_known, top1_loc, top1_clas
    let mut class_counts = vec![[0usize; 4]; num_classes]; // + n per class
    for r in results {
        let correct = r.predicted_class == r.true_class;
        let hits = [
            r.iou_gtknown > 0.5,
            correct && r.iou_top1 > 0.5,
            correct,
        ];
        let row = &mut class_counts[r.true_class];
        row[3] += 1;
        for (i, &hit) in hits.iter().enumerate() {
            if hit {
                totals[i] += 1;
                row[i] += 1;
            }
        }
    }
    let n = results.len();
    let per_class = class_counts
        .iter()
        .enumerate()
        .filter(|(_, row)| row[3] > 0)
        .map(|(class, row)| ClassMetrics {
            class,
            n_samples: row[3],
            gt_known_loc: percent(row[0], row[3]),
            top1_loc: percent(row[1], row[3]),
            top1_clas: percent(row[2], row[3]),
        })
        .collect();
    Ok(MetricsReport {
        gt_known_loc: percent(totals[0], n),
        top1_loc: percent(totals[1], n),
        top1_clas: percent(totals[2], n),
        n_samples: n,
        per_class,
        cell,
    })
}

/// Runs eval-mode inference and CAM localization over a dataset.
/// Samples are independent, so they are processed in parallel; results
/// come back in dataset order regardless of the worker count.
pub fn evaluate_model(
    net: &Network,
    dataset: &Dataset,
    threshold_frac: f64,
    conn: Connectivity,
    cell: Option<CellKey>,
) -> Result<(MetricsReport, Vec<SampleResult>)> {
    if dataset.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    dataset.validate()?;
    let side = net.config.input_side;
    let results: Vec<SampleResult> = dataset
        .samples
        .par_iter()
        .enumerate()
        .map(|(sample_id, s)| -> Result<SampleResult> {
            let x = batch_to_tensor(&[&s.image])?;
            let out = net.forward_eval(&x)?;
            let predicted = argmax(out.logits.data());
            let bbox_top1 = localize(
                &cam_for_class(net, &out.features, 0, predicted)?,
                side,
                threshold_frac,
                conn,
            )?;
            let bbox_gtknown = if predicted == s.label {
                bbox_top1
            } else {
                localize(
                    &cam_for_class(net, &out.features, 0, s.label)?,
                    side,
                    threshold_frac,
                    conn,
                )?
            };
            Ok(SampleResult {
                sample_id,
                true_class: s.label,
                predicted_class: predicted,
                bbox_top1,
                bbox_gtknown,
                iou_top1: iou(&bbox_top1, &s.gt_box)?,
                iou_gtknown: iou(&bbox_gtknown, &s.gt_box)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&results, net.config.num_classes, cell)?;
    Ok((report, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixSpec {
    pub policies: Vec<Policy>,
    pub batch_sizes: Vec<usize>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Shared training recipe; batch size, policy and seed are overridden
    /// per cell.
    pub train: TrainConfig,
    pub threshold_frac: f64,
    pub connectivity: Connectivity,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellOutcome {
    pub cell: CellKey,
    /// Present unless the cell diverged.
    pub report: Option<MetricsReport>,
    pub divergence: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cells: Vec<CellOutcome>,
}

impl MatrixReport {
    pub fn any_divergence(&self) -> bool {
        self.cells.iter().any(|c| c.divergence.is_some())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    fn mean_metric(
        &self,
        policy: Policy,
        batch: usize,
        variant: Variant,
        pick: impl Fn(&MetricsReport) -> f64,
    ) -> Option<f64> {
        let vals: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| {
                c.cell.policy == policy && c.cell.batch_size == batch && c.cell.variant == variant
            })
            .filter_map(|c| c.report.as_ref().map(&pick))
            .collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Aligned tables, one block per (variant, batch): metric rows by
    /// policy columns, means over seeds, then the per-seed values.
    pub fn render_text(&self, spec: &MatrixSpec) -> String {
        let mut out = String::new();
        let metrics: [(&str, fn(&MetricsReport) -> f64); 3] = [
            ("GT-known Loc", |r| r.gt_known_loc),
            ("Top-1 Loc", |r| r.top1_loc),
            ("Top-1 Clas", |r| r.top1_clas),
        ];
        for &variant in &spec.variants {
            for &batch in &spec.batch_sizes {
                out.push_str(&format!("== {variant}, batch {batch} ==\n"));
                out.push_str(&format!("{:<14}", "metric"));
                for &p in &spec.policies {
                    out.push_str(&format!("{:>14}", p.name()));
                }
                out.push('\n');
                for (label, pick) in metrics {
                    out.push_str(&format!("{label:<14}"));
                    for &p in &spec.policies {
                        match self.mean_metric(p, batch, variant, pick) {
                            Some(m) => out.push_str(&format!("{m:>14.2}")),
                            None => out.push_str(&format!("{:>14}", "diverged")),
                        }
                    }
                    out.push('\n');
                }
                for &p in &spec.policies {
                    let seeds: Vec<String> = self
                        .cells
                        .iter()
                        .filter(|c| {
                            c.cell.policy == p
                                && c.cell.batch_size == batch
                                && c.cell.variant == variant
                        })
                        .map(|c| match (&c.report, &c.divergence) {
                            (Some(r), _) => {
                                format!("seed {}: {:.2}", c.cell.seed, r.top1_loc)
                            }
                            (None, Some(d)) => format!("seed {}: diverged ({d})", c.cell.seed),
                            (None, None) => format!("seed {}: missing", c.cell.seed),
                        })
                        .collect();
                    out.push_str(&format!(
                        "  Top-1 Loc per seed, {}: [{}]\n",
                        p.name(),
                        seeds.join(", ")
                    ));
                }
                out.push('\n');
            }
        }
        out
    }
}

impl MatrixSpec {
    pub fn validate(&self) -> Result<()> {
        if self.policies.is_empty()
            || self.batch_sizes.is_empty()
            || self.variants.is_empty()
            || self.seeds.is_empty()
        {
            return Err(Error::invalid("matrix axes must all be non-empty"));
        }
        if !(self.threshold_frac > 0.0 && self.threshold_frac < 1.0) {
            return Err(Error::invalid(format!(
                "threshold must lie strictly inside (0, 1), got {}",
                self.threshold_frac
            )));
        }
        self.train.validate()
    }
}

/// Trains and evaluates one network per (variant, batch, policy, seed)
/// cell, in that nesting order. The same seed drives both initialization
/// and training within a cell, so two policies at one seed share their
/// starting weights and shuffle order; the augmentation is the only
/// difference. Divergence is recorded in the cell and the run continues.
pub fn run_matrix(
    train_set: &Dataset,
    test_set: &Dataset,
    spec: &MatrixSpec,
) -> Result<MatrixReport> {
    spec.validate()?;
    if train_set.is_empty() || test_set.is_empty() {
        return Err(Error::invalid("matrix needs non-empty train and test sets"));
    }
    let side = train_set.samples[0].image.width;
    let num_classes = train_set.num_classes();
    let mut cells = Vec::new();
    for &variant in &spec.variants {
        for &batch in &spec.batch_sizes {
            for &policy in &spec.policies {
                for &seed in &spec.seeds {
                    let cell = CellKey {
                        policy,
                        batch_size: batch,
                        variant,
                        seed,
                    };
                    let config = ModelConfig::new(variant, num_classes, side);
                    let mut net = build_network(&config, seed)?;
                    let mut cfg = spec.train.clone();
                    cfg.batch_size = batch;
                    cfg.seed = seed;
                    cfg.augment.policy = policy;
                    match fit(&mut net, train_set, &cfg) {
                        Ok(_) => {
                            let (report, _) = evaluate_model(
                                &net,
                                test_set,
                                spec.threshold_frac,
                                spec.connectivity,
                                Some(cell),
                            )?;
                            cells.push(CellOutcome {
                                cell,
                                report: Some(report),
                                divergence: None,
                            });
                        }
                        Err(Error::TrainingDiverged { epoch, detail }) => {
                            cells.push(CellOutcome {
                                cell,
                                report: None,
                                divergence: Some(format!("epoch {epoch}: {detail}")),
                            });
                        }
                        Err(e) => return Err(e),
                    }
                }
            }
        }
    }
    Ok(MatrixReport { cells })
}
