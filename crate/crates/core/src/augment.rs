//! Training-time image augmentation.
//!
//! Two stochastic transforms and their compositions: hide-and-seek patch
//! masking (`hns_mask`) and randomized scale/aspect cropping (`gr_crop`).
//! Every transform draws from a caller-supplied stream in a fixed,
//! documented order, so a policy applied to the same image with the same
//! stream is bitwise reproducible.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;

/// RGB image, row-major, channel-interleaved, values in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Self {
        Image {
            width,
            height,
            pixels: vec![0.0; width * height * 3],
        }
    }

    pub fn from_pixels(width: usize, height: usize, pixels: Vec<f64>) -> Result<Self> {
        if pixels.len() != width * height * 3 {
            return Err(Error::invalid(format!(
                "image buffer has {} values, expected {}x{}x3 = {}",
                pixels.len(),
                width,
                height,
                width * height * 3
            )));
        }
        Ok(Image {
            width,
            height,
            pixels,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.pixels[(y * self.width + x) * 3 + c] = v;
    }

    /// Mean value of each channel.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            sums[0] += px[0];
            sums[1] += px[1];
            sums[2] += px[2];
        }
        let n = (self.width * self.height) as f64;
        [sums[0] / n, sums[1] / n, sums[2] / n]
    }

    /// Planar [3, h, w] tensor view of the interleaved pixel buffer.
    pub fn to_tensor(&self) -> crate::tensor::Tensor {
        let (w, h) = (self.width, self.height);
        let mut data = vec![0.0; 3 * h * w];
        for c in 0..3 {
            let plane = &mut data[c * h * w..(c + 1) * h * w];
            for (i, px) in self.pixels.chunks_exact(3).enumerate() {
                plane[i] = px[c];
            }
        }
        crate::tensor::Tensor::new(vec![3, h, w], data).expect("buffer sized above")
    }
}

/// Stacks same-sized images into an [n, 3, h, w] batch tensor.
pub fn batch_to_tensor(images: &[&Image]) -> Result<crate::tensor::Tensor> {
    let first = images
        .first()
        .ok_or_else(|| Error::invalid("cannot batch zero images"))?;
    let (w, h) = (first.width, first.height);
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.width != w || img.height != h {
            return Err(Error::invalid(format!(
                "image sizes differ within batch: {}x{} vs {w}x{h}",
                img.width, img.height
            )));
        }
        data.extend_from_slice(img.to_tensor().data());
    }
    crate::tensor::Tensor::new(vec![images.len(), 3, h, w], data)
}

/// Augmentation policy; the two composition orders name the transform that
/// runs second (`GrThenHns` is crop first, then hide).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    None,
    Hns,
    Gr,
    GrThenHns,
    HnsThenGr,
}

impl Policy {
    /// Column order used by the results tables: baseline, hide-and-seek,
    /// randomized cropping, then the two compositions.
    pub const TABLE_ORDER: [Policy; 5] = [
        Policy::None,
        Policy::Hns,
        Policy::Gr,
        Policy::GrThenHns,
        Policy::HnsThenGr,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Policy::None => "none",
            Policy::Hns => "hns",
            Policy::Gr => "gr",
            Policy::GrThenHns => "gr_then_hns",
            Policy::HnsThenGr => "hns_then_gr",
        }
    }
}

impl std::str::FromStr for Policy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "none" => Policy::None,
            "hns" => Policy::Hns,
            "gr" => Policy::Gr,
            "gr_then_hns" => Policy::GrThenHns,
            "hns_then_gr" => Policy::HnsThenGr,
            other => {
                return Err(Error::invalid(format!(
                    "unknown augmentation policy {other:?}; expected one of none, hns, gr, gr_then_hns, hns_then_gr"
                )))
            }
        })
    }
}

impl std::fmt::Display for Policy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Full augmentation configuration. `fill_value` of `None` means "use the
/// per-channel mean of the training set", resolved by the caller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentSpec {
    pub policy: Policy,
    pub hns_grid_sizes: Vec<usize>,
    pub hide_prob: f64,
    pub fill_value: Option<[f64; 3]>,
    pub gr_area_range: [f64; 2],
    pub gr_aspect_range: [f64; 2],
    pub gr_max_attempts: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            policy: Policy::None,
            hns_grid_sizes: vec![0, 4, 8, 16],
            hide_prob: 0.5,
            fill_value: None,
            gr_area_range: [0.08, 1.0],
            gr_aspect_range: [0.75, 4.0 / 3.0],
            gr_max_attempts: 10,
        }
    }
}

impl AugmentSpec {
    pub fn validate(&self) -> Result<()> {
        if self.hns_grid_sizes.is_empty() {
            return Err(Error::invalid("hns_grid_sizes must not be empty"));
        }
        if !(0.0..=1.0).contains(&self.hide_prob) {
            return Err(Error::invalid(format!(
                "hide_prob must be in [0, 1], got {}",
                self.hide_prob
            )));
        }
        let [alo, ahi] = self.gr_area_range;
        if !(alo > 0.0 && alo <= ahi && ahi <= 1.0) {
            return Err(Error::invalid(format!(
                "gr_area_range must satisfy 0 < lo <= hi <= 1, got [{alo}, {ahi}]"
            )));
        }
        let [rlo, rhi] = self.gr_aspect_range;
        if !(rlo > 0.0 && rlo <= 1.0 && 1.0 <= rhi) {
            return Err(Error::invalid(format!(
                "gr_aspect_range must satisfy 0 < lo <= 1 <= hi, got [{rlo}, {rhi}]"
            )));
        }
        if self.gr_max_attempts == 0 {
            return Err(Error::invalid("gr_max_attempts must be >= 1"));
        }
        if let Some(fill) = self.fill_value {
            if fill.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "fill_value components must be in [0, 1], got {fill:?}"
                )));
            }
        }
        Ok(())
    }
}

/// Bilinear resampling of an interleaved buffer with `channels` values per
/// pixel, align-corners convention: destination index `i` reads source
/// coordinate `i * (src - 1) / (dst - 1)`, or 0 when the destination has a
/// single element along that axis. Shared by image augmentation and heatmap
/// upsampling.
pub fn bilinear_resize_buf(
    src: &[f64],
    src_w: usize,
    src_h: usize,
    channels: usize,
    dst_w: usize,
    dst_h: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), src_w * src_h * channels, "source buffer size");
    assert!(src_w > 0 && src_h > 0 && dst_w > 0 && dst_h > 0, "empty extent");
    let mut dst = vec![0.0; dst_w * dst_h * channels];
    let sx = if dst_w > 1 {
        (src_w - 1) as f64 / (dst_w - 1) as f64
    } else {
        0.0
    };
    let sy = if dst_h > 1 {
        (src_h - 1) as f64 / (dst_h - 1) as f64
    } else {
        0.0
    };
    for oy in 0..dst_h {
        let fy = oy as f64 * sy;
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src_h - 1);
        let wy = fy - y0 as f64;
        for ox in 0..dst_w {
            let fx = ox as f64 * sx;
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src_w - 1);
            let wx = fx - x0 as f64;
            for c in 0..channels {
                let v00 = src[(y0 * src_w + x0) * channels + c];
                let v01 = src[(y0 * src_w + x1) * channels + c];
                let v10 = src[(y1 * src_w + x0) * channels + c];
                let v11 = src[(y1 * src_w + x1) * channels + c];
                let top = v00 + (v01 - v00) * wx;
                let bot = v10 + (v11 - v10) * wx;
                dst[(oy * dst_w + ox) * channels + c] = top + (bot - top) * wy;
            }
        }
    }
    dst
}

pub fn bilinear_resize(img: &Image, out_w: usize, out_h: usize) -> Result<Image> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::invalid("bilinear_resize to an empty extent"));
    }
    let pixels = bilinear_resize_buf(&img.pixels, img.width, img.height, 3, out_w, out_h);
    Ok(Image {
        width: out_w,
        height: out_h,
        pixels,
    })
}

/// Hide-and-seek masking. Draw order: one grid choice (uniform over
/// `grid_sizes`), then one Bernoulli per patch in row-major patch order.
/// A grid size is the patch side in pixels; 0 means "hide nothing" and
/// consumes only the grid draw. The image is tiled into ceil(h/g) x
/// ceil(w/g) patches (edge patches smaller), each hidden independently with
/// probability `hide_prob` by writing `fill` into all three channels.
pub fn hns_mask(
    img: &Image,
    grid_sizes: &[usize],
    hide_prob: f64,
    fill: [f64; 3],
    rng: &mut Rng,
) -> Result<Image> {
    if grid_sizes.is_empty() {
        return Err(Error::invalid("hns_mask: empty grid size list"));
    }
    if !(0.0..=1.0).contains(&hide_prob) {
        return Err(Error::invalid(format!(
            "hns_mask: hide_prob must be in [0, 1], got {hide_prob}"
        )));
    }
    if let Some(&g) = grid_sizes.iter().find(|&&g| g > img.width.min(img.height)) {
        return Err(Error::invalid(format!(
            "hns_mask: grid size {g} exceeds image side {}x{}",
            img.width, img.height
        )));
    }
    let g = grid_sizes[rng.below(grid_sizes.len() as u64) as usize];
    let mut out = img.clone();
    if g == 0 {
        return Ok(out);
    }
    let rows = img.height.div_ceil(g);
    let cols = img.width.div_ceil(g);
    for r in 0..rows {
        for c in 0..cols {
            let hide = rng.bernoulli(hide_prob);
            if !hide {
                continue;
            }
            let y_end = ((r + 1) * g).min(img.height);
            let x_end = ((c + 1) * g).min(img.width);
            for y in r * g..y_end {
                for x in c * g..x_end {
                    for (ch, &f) in fill.iter().enumerate() {
                        out.set(x, y, ch, f);
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Crop rectangle in pixel coordinates; `x, y` is the top-left corner.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// One candidate draw of the crop sampler.
#[derive(Debug, Clone, Copy)]
pub struct GrAttempt {
    /// Sampled target area as a fraction of the input area.
    pub area_frac: f64,
    /// Sampled aspect ratio (width over height).
    pub aspect: f64,
    pub accepted: bool,
}

/// Where a crop came from: an accepted sampled candidate, or the center
/// square fallback after `max_attempts` rejections.
#[derive(Debug, Clone)]
pub struct GrOutcome {
    pub rect: CropRect,
    pub attempts: Vec<GrAttempt>,
    pub fell_back: bool,
}

/// Chooses the crop rectangle for `gr_crop` and reports every candidate
/// draw, so the sampler's statistics are observable.
///
/// Per attempt the draw order is: area fraction `a ~ U(area_range)`, aspect
/// `r = exp(U(ln lo, ln hi))`, then, only if the candidate fits, uniform
/// integer offsets x then y. The candidate is `w = round(sqrt(a*W*H*r))`,
/// `h = round(sqrt(a*W*H/r))` and fits when `1 <= w <= W` and
/// `1 <= h <= H`. After `max_attempts` rejections the fallback is the
/// centered largest square (offsets floor-centered).
pub fn sample_gr_crop(
    width: usize,
    height: usize,
    area_range: [f64; 2],
    aspect_range: [f64; 2],
    max_attempts: usize,
    rng: &mut Rng,
) -> Result<GrOutcome> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("sample_gr_crop: empty input image"));
    }
    if !(area_range[0] > 0.0 && area_range[0] <= area_range[1] && area_range[1] <= 1.0) {
        return Err(Error::invalid(format!(
            "sample_gr_crop: bad area range {area_range:?}"
        )));
    }
    if !(aspect_range[0] > 0.0 && aspect_range[0] <= aspect_range[1]) {
        return Err(Error::invalid(format!(
            "sample_gr_crop: bad aspect range {aspect_range:?}"
        )));
    }
    if max_attempts == 0 {
        return Err(Error::invalid("sample_gr_crop: max_attempts must be >= 1"));
    }
    let area = (width * height) as f64;
    let mut attempts = Vec::with_capacity(max_attempts);
    for _ in 0..max_attempts {
        let a = rng.uniform(area_range[0], area_range[1]);
        let r = rng
            .uniform(aspect_range[0].ln(), aspect_range[1].ln())
            .exp()
            .clamp(aspect_range[0], aspect_range[1]);
        let w = (a * area * r).sqrt().round() as usize;
        let h = (a * area / r).sqrt().round() as usize;
        let fits = (1..=width).contains(&w) && (1..=height).contains(&h);
        attempts.push(GrAttempt {
            area_frac: a,
            aspect: r,
            accepted: fits,
        });
        if fits {
            let x = rng.below((width - w + 1) as u64) as usize;
            let y = rng.below((height - h + 1) as u64) as usize;
            return Ok(GrOutcome {
                rect: CropRect { x, y, w, h },
                attempts,
                fell_back: false,
            });
        }
    }
    let side = width.min(height);
    Ok(GrOutcome {
        rect: CropRect {
            x: (width - side) / 2,
            y: (height - side) / 2,
            w: side,
            h: side,
        },
        attempts,
        fell_back: true,
    })
}

pub fn crop(img: &Image, rect: CropRect) -> Result<Image> {
    if rect.w == 0 || rect.h == 0 || rect.x + rect.w > img.width || rect.y + rect.h > img.height {
        return Err(Error::invalid(format!(
            "crop rect {rect:?} outside {}x{} image",
            img.width, img.height
        )));
    }
    let mut out = Image::new(rect.w, rect.h);
    for y in 0..rect.h {
        let src = ((rect.y + y) * img.width + rect.x) * 3;
        let dst = y * rect.w * 3;
        out.pixels[dst..dst + rect.w * 3].copy_from_slice(&img.pixels[src..src + rect.w * 3]);
    }
    Ok(out)
}

/// Randomized scale/aspect crop: samples a rectangle (see `sample_gr_crop`),
/// crops it, and bilinearly resizes to `(out_w, out_h)`.
#[allow(clippy::too_many_arguments)]
pub fn gr_crop(
    img: &Image,
    area_range: [f64; 2],
    aspect_range: [f64; 2],
    max_attempts: usize,
    out_w: usize,
    out_h: usize,
    rng: &mut Rng,
) -> Result<Image> {
    let outcome = sample_gr_crop(img.width, img.height, area_range, aspect_range, max_attempts, rng)?;
    bilinear_resize(&crop(img, outcome.rect)?, out_w, out_h)
}

/// Applies the configured policy. Compositions consume draws left to right:
/// `GrThenHns` spends all crop draws, then all hide draws, from the same
/// stream. Output dimensions always equal the input's. `fill` is the
/// resolved hide fill color (see `AugmentSpec::fill_value`).
pub fn apply_policy(spec: &AugmentSpec, fill: [f64; 3], img: &Image, rng: &mut Rng) -> Result<Image> {
    spec.validate()?;
    let gr = |img: &Image, rng: &mut Rng| {
        gr_crop(
            img,
            spec.gr_area_range,
            spec.gr_aspect_range,
            spec.gr_max_attempts,
            img.width,
            img.height,
            rng,
        )
    };
    let hns = |img: &Image, rng: &mut Rng| {
        hns_mask(img, &spec.hns_grid_sizes, spec.hide_prob, fill, rng)
    };
    match spec.policy {
        Policy::None => Ok(img.clone()),
        Policy::Hns => hns(img, rng),
        Policy::Gr => gr(img, rng),
        Policy::GrThenHns => hns(&gr(img, rng)?, rng),
        Policy::HnsThenGr => gr(&hns(img, rng)?, rng),
    }
}
