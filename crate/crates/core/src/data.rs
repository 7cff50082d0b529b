//! Synthetic localization datasets, manifest I/O, and a P6 image codec.
//!
//! Each synthetic class is a (shape, hue) pair. A sample renders one filled
//! shape with a brighter, more saturated core region over a noisy background
//! with one class-uncorrelated distractor patch; the ground-truth box is the
//! tight bounding box of the rendered shape pixels. Pixels are quantized to
//! the 8-bit grid at generation time, so writing to PPM and reading back is
//! lossless.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use crate::augment::Image;
use crate::cam::BBox;
use crate::error::{Error, Result};
use crate::rng::{Rng, RngStream, TAG_DATAGEN};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub label: usize,
    pub gt_box: BBox,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        for (i, s) in self.samples.iter().enumerate() {
            if s.label >= self.class_names.len() {
                return Err(Error::invalid(format!(
                    "sample {i} has label {} but only {} classes exist",
                    s.label,
                    self.class_names.len()
                )));
            }
            s.gt_box
                .validate_within(s.image.width, s.image.height)
                .map_err(|e| Error::invalid(format!("sample {i}: {e}")))?;
        }
        Ok(())
    }

    /// Mean of each channel over every pixel of every image; the training
    /// loop uses this as the hide-and-seek fill color.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for s in &self.samples {
            for px in s.image.pixels.chunks_exact(3) {
                sums[0] += px[0];
                sums[1] += px[1];
                sums[2] += px[2];
            }
            count += s.image.width * s.image.height;
        }
        if count == 0 {
            return [0.0; 3];
        }
        [
            sums[0] / count as f64,
            sums[1] / count as f64,
            sums[2] / count as f64,
        ]
    }
}

fn codec_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Codec {
        path: path.display().to_string(),
        detail: detail.into(),
    }
}

/// Binary P6 with maxval 255. Channel values are clamped to [0, 1] and
/// rounded half-up to bytes.
pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(32 + img.pixels.len());
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for &v in &img.pixels {
        buf.push((v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8);
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Next whitespace-delimited header token, skipping `#` comments.
fn header_token(bytes: &[u8], pos: &mut usize) -> Option<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    (*pos > start).then(|| String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut pos = 0;
    let magic = header_token(&bytes, &mut pos)
        .ok_or_else(|| codec_err(path, "empty file, no magic"))?;
    if magic != "P6" {
        return Err(codec_err(
            path,
            format!("unsupported magic {magic:?}, only binary P6 is handled"),
        ));
    }
    let mut dim = |what: &str| -> Result<usize> {
        header_token(&bytes, &mut pos)
            .ok_or_else(|| codec_err(path, format!("header ends before {what}")))?
            .parse::<usize>()
            .map_err(|_| codec_err(path, format!("{what} is not a non-negative integer")))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")?;
    if maxval != 255 {
        return Err(codec_err(path, format!("maxval {maxval}, expected 255")));
    }
    if width == 0 || height == 0 {
        return Err(codec_err(path, "zero image dimension"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(codec_err(path, "missing whitespace after maxval"));
    }
    pos += 1;
    let need = width * height * 3;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(codec_err(
            path,
            format!("raster truncated: {} of {need} bytes", raster.len()),
        ));
    }
    if raster.len() > need {
        return Err(codec_err(
            path,
            format!("{} trailing bytes after raster", raster.len() - need),
        ));
    }
    let pixels = raster.iter().map(|&b| b as f64 / 255.0).collect();
    Image::from_pixels(width, height, pixels)
}

const MANIFEST_HEADER: &str = "filename,label,x_min,y_min,x_max,y_max";

/// Writes images as PPM files plus `manifest.csv` and `classes.txt` under
/// `root` and returns the manifest path.
pub fn save_dataset(ds: &Dataset, root: &Path) -> Result<PathBuf> {
    ds.validate()?;
    std::fs::create_dir_all(root).map_err(|e| Error::io(root.display().to_string(), e))?;
    let classes_path = root.join("classes.txt");
    let mut classes = String::new();
    for name in &ds.class_names {
        classes.push_str(name);
        classes.push('\n');
    }
    std::fs::write(&classes_path, classes)
        .map_err(|e| Error::io(classes_path.display().to_string(), e))?;
    let mut manifest = String::from(MANIFEST_HEADER);
    manifest.push('\n');
    for (i, s) in ds.samples.iter().enumerate() {
        let filename = format!("img_{i:05}.ppm");
        write_ppm(&s.image, &root.join(&filename))?;
        manifest.push_str(&format!(
            "{filename},{},{},{},{},{}\n",
            s.label, s.gt_box.x_min, s.gt_box.y_min, s.gt_box.x_max, s.gt_box.y_max
        ));
    }
    let manifest_path = root.join("manifest.csv");
    std::fs::write(&manifest_path, manifest)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    Ok(manifest_path)
}

fn manifest_err(path: &Path, line: usize, detail: impl Into<String>) -> Error {
    Error::Manifest {
        path: path.display().to_string(),
        line,
        detail: detail.into(),
    }
}

/// Loads a dataset given its manifest path; `classes.txt` and the images
/// are resolved relative to the manifest's directory. Every malformed line
/// is reported with its 1-based line number.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let root = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let classes_path = root.join("classes.txt");
    let classes_raw = std::fs::read_to_string(&classes_path)
        .map_err(|e| Error::io(classes_path.display().to_string(), e))?;
    let class_names: Vec<String> = classes_raw
        .lines()
        .map(str::trim_end)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if class_names.is_empty() {
        return Err(Error::invalid(format!(
            "{} lists no classes",
            classes_path.display()
        )));
    }
    let text = std::fs::read_to_string(manifest_path)
        .map_err(|e| Error::io(manifest_path.display().to_string(), e))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, header)) if header.trim_end() == MANIFEST_HEADER => {}
        Some((_, header)) => {
            return Err(manifest_err(
                manifest_path,
                1,
                format!("bad header {header:?}, expected {MANIFEST_HEADER:?}"),
            ))
        }
        None => return Err(manifest_err(manifest_path, 1, "empty manifest")),
    }
    let mut samples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(manifest_err(
                manifest_path,
                lineno,
                format!("expected 6 comma-separated fields, got {}", fields.len()),
            ));
        }
        let filename = fields[0];
        if !seen.insert(filename.to_string()) {
            return Err(manifest_err(
                manifest_path,
                lineno,
                format!("duplicate filename {filename:?}"),
            ));
        }
        let mut ints = [0usize; 5];
        for (slot, raw) in ints.iter_mut().zip(&fields[1..]) {
            *slot = raw.parse().map_err(|_| {
                manifest_err(
                    manifest_path,
                    lineno,
                    format!("field {raw:?} is not a non-negative integer"),
                )
            })?;
        }
        let [label, x_min, y_min, x_max, y_max] = ints;
        if label >= class_names.len() {
            return Err(manifest_err(
                manifest_path,
                lineno,
                format!("label {label} but classes.txt lists {}", class_names.len()),
            ));
        }
        let gt_box = BBox::new(x_min, y_min, x_max, y_max)
            .map_err(|e| manifest_err(manifest_path, lineno, e.to_string()))?;
        let image = read_ppm(&root.join(filename))
            .map_err(|e| manifest_err(manifest_path, lineno, e.to_string()))?;
        gt_box
            .validate_within(image.width, image.height)
            .map_err(|e| manifest_err(manifest_path, lineno, e.to_string()))?;
        samples.push(Sample {
            image,
            label,
            gt_box,
        });
    }
    Ok(Dataset {
        samples,
        class_names,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Square,
    Circle,
    Triangle,
    Diamond,
}

const KINDS: [Kind; 4] = [Kind::Square, Kind::Circle, Kind::Triangle, Kind::Diamond];

impl Kind {
    fn name(&self) -> &'static str {
        match self {
            Kind::Square => "square",
            Kind::Circle => "circle",
            Kind::Triangle => "triangle",
            Kind::Diamond => "diamond",
        }
    }

    /// Membership test at pixel center (u, v) inside a size x size box.
    fn contains(&self, u: f64, v: f64, size: f64) -> bool {
        let c = size / 2.0;
        match self {
            Kind::Square => true,
            Kind::Circle => (u - c).powi(2) + (v - c).powi(2) <= c * c,
            Kind::Triangle => (u - c).abs() <= (v / size) * c,
            Kind::Diamond => (u - c).abs() + (v - c).abs() <= c,
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as usize % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, t],
    }
}

/// Renders one sample: noise background, one distractor checker patch, then
/// the class shape (soft body plus saturated core). Returns the image and
/// the shape mask. The draw order is fixed, so a given stream always yields
/// the same sample.
fn render_sample(
    side: usize,
    class: usize,
    num_classes: usize,
    rng: &mut Rng,
) -> (Image, Vec<bool>) {
    let mut img = Image::new(side, side);
    for y in 0..side {
        for x in 0..side {
            let g = 0.30 + 0.30 * rng.unit();
            for c in 0..3 {
                let v = (g + 0.08 * (rng.unit() - 0.5)).clamp(0.0, 1.0);
                img.set(x, y, c, v);
            }
        }
    }

    // Distractor: class-uncorrelated texture so background context alone
    // cannot separate the classes.
    let d = ((side as f64 * (0.15 + 0.15 * rng.unit())).round() as usize).max(2);
    let dx0 = rng.below((side - d + 1) as u64) as usize;
    let dy0 = rng.below((side - d + 1) as u64) as usize;
    let ga = 0.2 + 0.6 * rng.unit();
    let gb = 0.2 + 0.6 * rng.unit();
    for y in dy0..dy0 + d {
        for x in dx0..dx0 + d {
            let v = if ((x - dx0) / 2 + (y - dy0) / 2) % 2 == 0 { ga } else { gb };
            for c in 0..3 {
                img.set(x, y, c, v);
            }
        }
    }

    // Shape occupies 20 to 60 percent of the side.
    let size = ((side as f64 * (0.2 + 0.4 * rng.unit())).round() as usize).max(3);
    let x0 = rng.below((side - size + 1) as u64) as usize;
    let y0 = rng.below((side - size + 1) as u64) as usize;
    let kind = KINDS[class % KINDS.len()];
    let hue = 360.0 * class as f64 / num_classes as f64;
    let body = hsv_to_rgb(hue, 0.55, 0.70);
    let core = hsv_to_rgb(hue, 0.95, 0.95);

    let mut mask = vec![false; side * side];
    for y in 0..size {
        for x in 0..size {
            if kind.contains(x as f64 + 0.5, y as f64 + 0.5, size as f64) {
                mask[(y0 + y) * side + (x0 + x)] = true;
                for c in 0..3 {
                    img.set(x0 + x, y0 + y, c, body[c]);
                }
            }
        }
    }
    // Core: the same shape at 45 percent scale, centered. The ground truth
    // stays the full body; the core only concentrates the color evidence.
    let csize = ((size as f64 * 0.45).round() as usize).max(1);
    let cx0 = x0 + (size - csize) / 2;
    let cy0 = y0 + (size - csize) / 2;
    for y in 0..csize {
        for x in 0..csize {
            if kind.contains(x as f64 + 0.5, y as f64 + 0.5, csize as f64) {
                for c in 0..3 {
                    img.set(cx0 + x, cy0 + y, c, core[c]);
                }
            }
        }
    }

    // Quantize to the 8-bit grid so the PPM round trip is exact.
    for v in &mut img.pixels {
        *v = (*v * 255.0 + 0.5).floor() / 255.0;
    }
    (img, mask)
}

fn tight_box_of_mask(mask: &[bool], width: usize) -> Option<BBox> {
    let mut x_min = usize::MAX;
    let mut y_min = usize::MAX;
    let mut x_max = 0;
    let mut y_max = 0;
    for (idx, &on) in mask.iter().enumerate() {
        if !on {
            continue;
        }
        let (x, y) = (idx % width, idx / width);
        x_min = x_min.min(x);
        y_min = y_min.min(y);
        x_max = x_max.max(x + 1);
        y_max = y_max.max(y + 1);
    }
    (x_min != usize::MAX).then(|| BBox {
        x_min,
        y_min,
        x_max,
        y_max,
    })
}

/// Generates disjoint train and test splits. Every sample draws from its
/// own substream keyed by (split, position), so the result depends only on
/// the arguments.
pub fn generate_synthetic(
    num_classes: usize,
    per_class_train: usize,
    per_class_test: usize,
    side: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    if side < 16 {
        return Err(Error::invalid(format!("side {side} below the minimum of 16")));
    }
    if num_classes < 2 {
        return Err(Error::invalid("need at least 2 classes"));
    }
    if per_class_train == 0 {
        return Err(Error::invalid("need at least one training sample per class"));
    }
    let stream = RngStream::new(seed);
    let class_names: Vec<String> = (0..num_classes)
        .map(|c| format!("{}{c:02}", KINDS[c % KINDS.len()].name()))
        .collect();
    let mut splits = Vec::with_capacity(2);
    for (split_tag, per_class) in [(0u64, per_class_train), (1u64, per_class_test)] {
        let mut samples = Vec::with_capacity(num_classes * per_class);
        for class in 0..num_classes {
            for i in 0..per_class {
                let index = (class * per_class + i) as u64;
                let mut rng = stream.derive(&[TAG_DATAGEN, split_tag, index]);
                let (image, mask) = render_sample(side, class, num_classes, &mut rng);
                let gt_box = tight_box_of_mask(&mask, side)
                    .expect("shape sizes of 3 or more pixels always render");
                samples.push(Sample {
                    image,
                    label: class,
                    gt_box,
                });
            }
        }
        splits.push(Dataset {
            samples,
            class_names: class_names.clone(),
        });
    }
    let test = splits.pop().expect("two splits built");
    let train = splits.pop().expect("two splits built");
    Ok((train, test))
}
