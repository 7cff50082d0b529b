//! Class activation maps and heatmap-to-box extraction.
//!
//! Because the classifier sits directly on global average pooling, the
//! weighted sum of final feature maps is an exact spatial decomposition of
//! the logit: averaging the map recovers `logit_c - bias_c` to float
//! precision. Box extraction upsamples the map to input resolution,
//! normalizes it to [0, 1], keeps pixels at or above a threshold, and takes
//! the tight box of the largest connected component.

use serde::{Deserialize, Serialize};

use crate::augment::{bilinear_resize_buf, Image};
use crate::error::{Error, Result};
use crate::model::Network;
use crate::tensor::Tensor;

/// Single-channel float map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(Error::invalid(format!(
                "heatmap buffer has {} values, expected {width}x{height}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("heatmap contains non-finite values"));
        }
        Ok(Heatmap {
            width,
            height,
            values,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Axis-aligned box in pixel coordinates, min edges inclusive, max edges
/// exclusive. A valid box has positive area.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BBox {
    pub x_min: usize,
    pub y_min: usize,
    pub x_max: usize,
    pub y_max: usize,
}

impl BBox {
    pub fn new(x_min: usize, y_min: usize, x_max: usize, y_max: usize) -> Result<Self> {
        if x_min >= x_max || y_min >= y_max {
            return Err(Error::invalid(format!(
                "degenerate box ({x_min},{y_min})..({x_max},{y_max})"
            )));
        }
        Ok(BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn area(&self) -> usize {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn validate_within(&self, width: usize, height: usize) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::invalid(format!("degenerate box {self:?}")));
        }
        if self.x_max > width || self.y_max > height {
            return Err(Error::invalid(format!(
                "box {self:?} exceeds {width}x{height} frame"
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for BBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "({},{})..({},{})",
            self.x_min, self.y_min, self.x_max, self.y_max
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Connectivity {
    Four,
    Eight,
}

/// M(x, y) = sum_k class_weights[k] * features[k, x, y].
pub fn compute_cam(features: &Tensor, class_weights: &[f64]) -> Result<Heatmap> {
    features.expect_ndim(3, "cam features")?;
    let (k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
    );
    if class_weights.len() != k {
        return Err(Error::invalid(format!(
            "{} class weights for {k} feature channels",
            class_weights.len()
        )));
    }
    let mut values = vec![0.0; h * w];
    for (ch, &wk) in class_weights.iter().enumerate() {
        let plane = &features.data()[ch * h * w..(ch + 1) * h * w];
        for (v, &f) in values.iter_mut().zip(plane) {
            *v += wk * f;
        }
    }
    Heatmap::new(w, h, values)
}

/// Connected pixel groups of a binary mask. Each inner vector holds
/// row-major pixel indices in ascending order; the outer vector is ordered
/// by first (topmost-leftmost) pixel. Scanning row-major and growing each
/// component breadth-first makes both orderings automatic.
pub fn binary_components(
    mask: &[bool],
    width: usize,
    height: usize,
    conn: Connectivity,
) -> Vec<Vec<usize>> {
    assert_eq!(mask.len(), width * height, "mask length mismatch");
    let mut seen = vec![false; mask.len()];
    let mut components = Vec::new();
    let mut queue = std::collections::VecDeque::new();
    for start in 0..mask.len() {
        if !mask[start] || seen[start] {
            continue;
        }
        let mut pixels = Vec::new();
        seen[start] = true;
        queue.push_back(start);
        while let Some(idx) = queue.pop_front() {
            pixels.push(idx);
            let (x, y) = (idx % width, idx / width);
            let x_lo = x.saturating_sub(1);
            let x_hi = (x + 1).min(width - 1);
            let y_lo = y.saturating_sub(1);
            let y_hi = (y + 1).min(height - 1);
            for ny in y_lo..=y_hi {
                for nx in x_lo..=x_hi {
                    if (nx, ny) == (x, y) {
                        continue;
                    }
                    if conn == Connectivity::Four && nx != x && ny != y {
                        continue;
                    }
                    let nidx = ny * width + nx;
                    if mask[nidx] && !seen[nidx] {
                        seen[nidx] = true;
                        queue.push_back(nidx);
                    }
                }
            }
        }
        pixels.sort_unstable();
        components.push(pixels);
    }
    components
}

fn tight_bbox(pixels: &[usize], width: usize) -> BBox {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0;
    let mut y_max = 0;
    for &idx in pixels {
        let (x, y) = (idx % width, idx / width);
        x_min = x_min.min(x);
        y_min = y_min.min(y);
        x_max = x_max.max(x);
        y_max = y_max.max(y);
    }
    BBox {
        x_min,
        y_min,
        x_max: x_max + 1,
        y_max: y_max + 1,
    }
}

/// Bilinearly upsamples to `input_side` square and min-max normalizes to
/// [0, 1]. A constant map flattens to all zeros.
pub fn normalized_map(heatmap: &Heatmap, input_side: usize) -> Result<Heatmap> {
    if input_side == 0 {
        return Err(Error::invalid("input side must be positive"));
    }
    let mut up = bilinear_resize_buf(
        &heatmap.values,
        heatmap.width,
        heatmap.height,
        1,
        input_side,
        input_side,
    );
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in &up {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi == lo {
        up.fill(0.0);
    } else {
        let scale = 1.0 / (hi - lo);
        for v in &mut up {
            *v = (*v - lo) * scale;
        }
    }
    Heatmap::new(input_side, input_side, up)
}

/// Upsamples to `input_side`, min-max normalizes, binarizes at
/// `threshold_frac`, and returns the tight box of the largest component
/// (area ties broken by smallest y_min, then x_min). A constant heatmap
/// carries no location signal and yields the full-image box.
pub fn localize(
    heatmap: &Heatmap,
    input_side: usize,
    threshold_frac: f64,
    conn: Connectivity,
) -> Result<BBox> {
    if !(threshold_frac > 0.0 && threshold_frac < 1.0) {
        return Err(Error::invalid(format!(
            "threshold must lie strictly inside (0, 1), got {threshold_frac}"
        )));
    }
    let norm = normalized_map(heatmap, input_side)?;
    let mask: Vec<bool> = norm.values.iter().map(|&v| v >= threshold_frac).collect();
    let components = binary_components(&mask, input_side, input_side, conn);
    let best = components.iter().max_by(|a, b| {
        a.len().cmp(&b.len()).then_with(|| {
            // Larger index compares as "smaller" so max_by picks the
            // earliest topmost-leftmost start on equal areas.
            b[0].cmp(&a[0])
        })
    });
    match best {
        Some(pixels) => Ok(tight_bbox(pixels, input_side)),
        // Constant input: normalization zeroed the map and nothing passed
        // the threshold.
        None => BBox::new(0, 0, input_side, input_side),
    }
}

/// Index of the row maximum, earliest on ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Eval-mode forward, then CAM localization. The CAM class is
/// `target_class` when given (ground-truth-known scoring) and the argmax
/// prediction otherwise; the returned class is always the prediction.
pub fn predict_and_localize(
    net: &Network,
    image: &Image,
    target_class: Option<usize>,
    threshold_frac: f64,
    conn: Connectivity,
) -> Result<(usize, BBox)> {
    let side = net.config.input_side;
    if image.width != side || image.height != side {
        return Err(Error::invalid(format!(
            "image is {}x{}, network expects {side}x{side}",
            image.width, image.height
        )));
    }
    let num_classes = net.config.num_classes;
    if let Some(c) = target_class {
        if c >= num_classes {
            return Err(Error::invalid(format!(
                "target class {c} out of range for {num_classes} classes"
            )));
        }
    }
    let x = crate::augment::batch_to_tensor(&[image])?;
    let out = net.forward_eval(&x)?;
    let predicted = argmax(out.logits.data());
    let cam_class = target_class.unwrap_or(predicted);
    let bbox = localize(
        &cam_for_class(net, &out.features, 0, cam_class)?,
        side,
        threshold_frac,
        conn,
    )?;
    Ok((predicted, bbox))
}

/// CAM of sample `n` in a batched [n, k, h, w] feature tensor.
pub fn cam_for_class(
    net: &Network,
    features: &Tensor,
    n: usize,
    class: usize,
) -> Result<Heatmap> {
    features.expect_ndim(4, "batched features")?;
    let (batch, k, h, w) = (
        features.shape()[0],
        features.shape()[1],
        features.shape()[2],
        features.shape()[3],
    );
    if n >= batch {
        return Err(Error::invalid(format!("sample {n} out of batch {batch}")));
    }
    let num_classes = net.config.num_classes;
    if class >= num_classes {
        return Err(Error::invalid(format!(
            "class {class} out of range for {num_classes} classes"
        )));
    }
    let sample = Tensor::new(
        vec![k, h, w],
        features.data()[n * k * h * w..(n + 1) * k * h * w].to_vec(),
    )?;
    // Classifier weight is [k, num_classes]; column `class` holds w_k.
    let weights: Vec<f64> = (0..k)
        .map(|ki| net.classifier.weight.data()[ki * num_classes + class])
        .collect();
    compute_cam(&sample, &weights)
}
