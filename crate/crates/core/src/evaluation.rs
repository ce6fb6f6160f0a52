//! Pixel accuracy metrics, dataset loading, the synthetic scene generator
//! and the benchmark loop.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::detector::Detector;
use crate::error::{Error, Result};
use crate::imageio::{
    probe_dimensions, read_image, read_mask, write_png_file, Mask, Raster, RgbImage,
};

/// Pixel tallies with shadow as the positive class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

pub fn confusion(pred: &Mask, gt: &Mask) -> Result<ConfusionCounts> {
    pred.check_size(gt.width(), gt.height())?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Shadow, non-shadow and total accuracy of one image. A metric whose
/// denominator is zero is `None`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImageMetrics {
    pub shadow: Option<f64>,
    pub nonshadow: Option<f64>,
    pub total: Option<f64>,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

pub fn metrics(c: &ConfusionCounts) -> ImageMetrics {
    ImageMetrics {
        shadow: ratio(c.tp, c.tp + c.fn_),
        nonshadow: ratio(c.tn, c.tn + c.fp),
        total: ratio(c.tp + c.tn, c.total()),
    }
}

/// Mean and population standard deviation over the defined values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub count: usize,
}

impl Aggregate {
    pub fn of(values: impl IntoIterator<Item = Option<f64>>) -> Self {
        let v: Vec<f64> = values.into_iter().flatten().collect();
        if v.is_empty() {
            return Aggregate {
                mean: None,
                std: None,
                count: 0,
            };
        }
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        Aggregate {
            mean: Some(mean),
            std: Some(var.sqrt()),
            count: v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImageReport {
    pub name: String,
    pub counts: ConfusionCounts,
    pub metrics: ImageMetrics,
    pub cnn_invocations: usize,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub images: Vec<ImageReport>,
    pub shadow_accuracy: Aggregate,
    pub nonshadow_accuracy: Aggregate,
    pub total_accuracy: Aggregate,
    pub seconds_per_image: Aggregate,
    pub mean_cnn_invocations: f64,
}

impl MetricReport {
    pub fn from_images(images: Vec<ImageReport>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::Dataset("no images to report".into()));
        }
        let n = images.len() as f64;
        Ok(MetricReport {
            shadow_accuracy: Aggregate::of(images.iter().map(|r| r.metrics.shadow)),
            nonshadow_accuracy: Aggregate::of(images.iter().map(|r| r.metrics.nonshadow)),
            total_accuracy: Aggregate::of(images.iter().map(|r| r.metrics.total)),
            seconds_per_image: Aggregate::of(images.iter().map(|r| Some(r.seconds))),
            mean_cnn_invocations: images.iter().map(|r| r.cnn_invocations as f64).sum::<f64>() / n,
            images,
        })
    }

    /// One `key=value` line per image followed by a `summary` line.
    pub fn to_lines(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
        let mut out = String::new();
        for r in &self.images {
            out.push_str(&format!(
                "image={} shadow_acc={} nonshadow_acc={} total_acc={} tp={} tn={} fp={} fn={} cnn_invocations={} seconds={:.4}\n",
                r.name,
                opt(r.metrics.shadow),
                opt(r.metrics.nonshadow),
                opt(r.metrics.total),
                r.counts.tp,
                r.counts.tn,
                r.counts.fp,
                r.counts.fn_,
                r.cnn_invocations,
                r.seconds
            ));
        }
        out.push_str(&format!(
            "summary images={} total_acc={}/{} shadow_acc={}/{} nonshadow_acc={}/{} cnn_invocations={:.1} seconds_per_image={}\n",
            self.images.len(),
            opt(self.total_accuracy.mean),
            opt(self.total_accuracy.std),
            opt(self.shadow_accuracy.mean),
            opt(self.shadow_accuracy.std),
            opt(self.nonshadow_accuracy.mean),
            opt(self.nonshadow_accuracy.std),
            self.mean_cnn_invocations,
            opt(self.seconds_per_image.mean),
        ));
        out
    }

    /// Accuracy summary as JSON. Wall-clock figures are left out so the
    /// document is reproducible; see [`MetricReport::timing_json`].
    ///
    /// Keys: `images` (count), `total_accuracy`, `shadow_accuracy`,
    /// `nonshadow_accuracy` (each `{mean, std, count}`, `null` when no image
    /// defines the metric), `mean_cnn_invocations`, and `per_image`, a list of
    /// `{name, tp, tn, fp, fn, shadow_accuracy, nonshadow_accuracy,
    /// total_accuracy, cnn_invocations}`.
    pub fn to_json(&self) -> String {
        let agg = |a: &Aggregate| json!({ "mean": a.mean, "std": a.std, "count": a.count });
        let per_image: Vec<_> = self
            .images
            .iter()
            .map(|r| {
                json!({
                    "name": r.name,
                    "tp": r.counts.tp,
                    "tn": r.counts.tn,
                    "fp": r.counts.fp,
                    "fn": r.counts.fn_,
                    "shadow_accuracy": r.metrics.shadow,
                    "nonshadow_accuracy": r.metrics.nonshadow,
                    "total_accuracy": r.metrics.total,
                    "cnn_invocations": r.cnn_invocations,
                })
            })
            .collect();
        let doc = json!({
            "images": self.images.len(),
            "total_accuracy": agg(&self.total_accuracy),
            "shadow_accuracy": agg(&self.shadow_accuracy),
            "nonshadow_accuracy": agg(&self.nonshadow_accuracy),
            "mean_cnn_invocations": self.mean_cnn_invocations,
            "per_image": per_image,
        });
        serde_json::to_string_pretty(&doc).expect("plain JSON values") + "\n"
    }

    /// Per-image and mean detection seconds as JSON.
    pub fn to_timing_json(&self) -> String {
        let per_image: BTreeMap<&str, f64> = self
            .images
            .iter()
            .map(|r| (r.name.as_str(), r.seconds))
            .collect();
        let doc = json!({
            "seconds_per_image": { "mean": self.seconds_per_image.mean, "std": self.seconds_per_image.std },
            "per_image": per_image,
        });
        serde_json::to_string_pretty(&doc).expect("plain JSON values") + "\n"
    }
}

// ---------------------------------------------------------------------------
// Datasets

/// Directory conventions for image/mask pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Layout {
    /// `Images/` and `Masks/` with shared file stems.
    ImagesMasks,
    /// `ShadowImages/` and `ShadowMasks/`, as in the SBU release.
    Sbu,
}

impl Layout {
    pub fn dirs(self) -> (&'static str, &'static str) {
        match self {
            Layout::ImagesMasks => ("Images", "Masks"),
            Layout::Sbu => ("ShadowImages", "ShadowMasks"),
        }
    }

    /// The first layout whose directories both exist under `root`.
    pub fn detect(root: &Path) -> Option<Layout> {
        [Layout::ImagesMasks, Layout::Sbu].into_iter().find(|l| {
            let (i, m) = l.dirs();
            root.join(i).is_dir() && root.join(m).is_dir()
        })
    }
}

impl std::str::FromStr for Layout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "images-masks" | "images" => Ok(Layout::ImagesMasks),
            "sbu" => Ok(Layout::Sbu),
            _ => Err(Error::InvalidArgument(format!(
                "unknown dataset layout {s:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImagePair {
    pub name: String,
    pub image: PathBuf,
    pub mask: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetIndex {
    pub pairs: Vec<ImagePair>,
    /// Files that were skipped, one message each.
    pub warnings: Vec<String>,
}

const IMAGE_EXTENSIONS: [&str; 2] = ["png", "ppm"];

fn stems(dir: &Path, warnings: &mut Vec<String>) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() {
            continue;
        }
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase);
        let Some(stem) = path
            .file_stem()
            .and_then(|s| s.to_str())
            .map(str::to_string)
        else {
            continue;
        };
        if !ext
            .as_deref()
            .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e))
        {
            warnings.push(format!("{}: unsupported file type", path.display()));
            continue;
        }
        if let Some(prev) = out.insert(stem, path.clone()) {
            warnings.push(format!(
                "{}: duplicate stem, keeping {}",
                prev.display(),
                path.display()
            ));
        }
    }
    Ok(out)
}

/// Pairs images with masks by file stem. Unmatched or size-mismatched files
/// become warnings; an empty result is an error.
pub fn load_dataset(root: &Path, layout: Layout) -> Result<DatasetIndex> {
    if !root.is_dir() {
        return Err(Error::Dataset(format!(
            "{} is not a directory",
            root.display()
        )));
    }
    let (img_dir, mask_dir) = layout.dirs();
    let mut warnings = Vec::new();
    let images = stems(&root.join(img_dir), &mut warnings)?;
    let mut masks = stems(&root.join(mask_dir), &mut warnings)?;
    let mut pairs = Vec::new();
    for (name, image) in images {
        let Some(mask) = masks.remove(&name) else {
            warnings.push(format!("{}: no matching mask", image.display()));
            continue;
        };
        let (di, dm) = (probe_dimensions(&image)?, probe_dimensions(&mask)?);
        if di != dm {
            warnings.push(format!(
                "{name}: image is {}x{} but mask is {}x{}",
                di.0, di.1, dm.0, dm.1
            ));
            continue;
        }
        pairs.push(ImagePair { name, image, mask });
    }
    for mask in masks.values() {
        warnings.push(format!("{}: no matching image", mask.display()));
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    if pairs.is_empty() {
        return Err(Error::Dataset(format!(
            "no image/mask pairs under {}",
            root.display()
        )));
    }
    Ok(DatasetIndex { pairs, warnings })
}

/// Loads and layout-detects a dataset directory.
pub fn load_dataset_auto(root: &Path) -> Result<DatasetIndex> {
    let layout = Layout::detect(root).ok_or_else(|| {
        Error::Dataset(format!(
            "{} has neither Images/+Masks/ nor ShadowImages/+ShadowMasks/",
            root.display()
        ))
    })?;
    load_dataset(root, layout)
}

impl DatasetIndex {
    /// Seeded random train/test split. `test_fraction` of the pairs
    /// (rounded, at least one when there are two or more pairs) go to test.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(DatasetIndex, DatasetIndex)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::InvalidArgument(format!(
                "test fraction {test_fraction} outside [0, 1)"
            )));
        }
        let n = self.pairs.len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut n_test = (test_fraction * n as f64).round() as usize;
        if test_fraction > 0.0 && n >= 2 {
            n_test = n_test.clamp(1, n - 1);
        }
        let mut test: Vec<usize> = order[..n_test].to_vec();
        let mut train: Vec<usize> = order[n_test..].to_vec();
        test.sort_unstable();
        train.sort_unstable();
        let pick = |idx: &[usize]| DatasetIndex {
            pairs: idx.iter().map(|&i| self.pairs[i].clone()).collect(),
            warnings: Vec::new(),
        };
        Ok((pick(&train), pick(&test)))
    }

    pub fn load_pair(&self, i: usize) -> Result<(RgbImage, Mask)> {
        let pair = &self.pairs[i];
        let img = read_image(&pair.image)?;
        let gt = read_mask(&pair.mask)?;
        gt.check_size(img.width(), img.height())?;
        Ok((img, gt))
    }

    pub fn load_all(&self) -> Result<Vec<(RgbImage, Mask)>> {
        (0..self.pairs.len()).map(|i| self.load_pair(i)).collect()
    }
}

// ---------------------------------------------------------------------------
// Synthetic scenes

pub const SHADOW_FRACTION_RANGE: (f64, f64) = (0.05, 0.6);
pub const SHADOW_FACTOR_RANGE: (f64, f64) = (0.3, 0.6);
/// Extra gain on the blue channel inside shadows.
pub const SHADOW_BLUE_GAIN: f64 = 1.15;

#[derive(Debug, Clone, Copy)]
enum Fill {
    Flat([f64; 3]),
    Noise([f64; 3], f64),
    Checker([f64; 3], [f64; 3], usize),
}

fn random_color(rng: &mut ChaCha8Rng) -> [f64; 3] {
    [0; 3].map(|_| rng.random_range(90.0..230.0))
}

fn random_fill(rng: &mut ChaCha8Rng) -> Fill {
    match rng.random_range(0..3) {
        0 => Fill::Flat(random_color(rng)),
        1 => Fill::Noise(random_color(rng), rng.random_range(8.0..25.0)),
        _ => {
            let a = random_color(rng);
            let k = rng.random_range(0.7..0.85);
            Fill::Checker(a, a.map(|v| v * k), rng.random_range(3..9))
        }
    }
}

fn cross(o: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0)
}

/// Counter-clockwise convex hull (monotone chain).
fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.partial_cmp(b).expect("finite points"));
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(2 * pts.len());
    for pass in 0..2 {
        let start = hull.len();
        for &p in &pts {
            while hull.len() >= start + 2
                && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0
            {
                hull.pop();
            }
            hull.push(p);
        }
        hull.pop();
        if pass == 0 {
            pts.reverse();
        }
    }
    hull
}

/// Whether `p` lies inside or on a counter-clockwise convex polygon.
fn in_convex(poly: &[(f64, f64)], p: (f64, f64)) -> bool {
    (0..poly.len()).all(|i| cross(poly[i], poly[(i + 1) % poly.len()], p) >= 0.0)
}

fn random_polygon(rng: &mut ChaCha8Rng, size: usize) -> Vec<(f64, f64)> {
    let s = size as f64;
    let (cx, cy) = (
        rng.random_range(0.1 * s..0.9 * s),
        rng.random_range(0.1 * s..0.9 * s),
    );
    let (rx, ry) = (
        rng.random_range(0.12 * s..0.4 * s),
        rng.random_range(0.12 * s..0.4 * s),
    );
    let pts = (0..rng.random_range(5..10))
        .map(|_| {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let r = rng.random_range(0.6..1.0f64).sqrt();
            (cx + rx * r * t.cos(), cy + ry * r * t.sin())
        })
        .collect();
    convex_hull(pts)
}

/// One synthetic scene: a Voronoi mosaic of flat, noisy and checkered fields
/// darkened inside one to three convex polygons. Returns the image and the
/// exact polygon mask (pixel centers inside any polygon).
pub fn synthetic_scene(size: usize, rng: &mut ChaCha8Rng) -> (RgbImage, Mask) {
    let s = size as f64;
    let sites: Vec<((f64, f64), Fill)> = (0..rng.random_range(3..7))
        .map(|_| {
            (
                (rng.random_range(0.0..s), rng.random_range(0.0..s)),
                random_fill(rng),
            )
        })
        .collect();
    let mut base = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let (_, fill) = sites
                .iter()
                .min_by(|a, b| {
                    let da = (a.0 .0 - px).powi(2) + (a.0 .1 - py).powi(2);
                    let db = (b.0 .0 - px).powi(2) + (b.0 .1 - py).powi(2);
                    da.partial_cmp(&db).expect("finite distances")
                })
                .expect("at least one site");
            base[y * size + x] = match *fill {
                Fill::Flat(c) => c,
                Fill::Noise(c, amp) => c.map(|v| v + rng.random_range(-amp..amp)),
                Fill::Checker(a, b, p) => {
                    if (x / p + y / p) % 2 == 0 {
                        a
                    } else {
                        b
                    }
                }
            };
        }
    }

    let (lo, hi) = SHADOW_FRACTION_RANGE;
    let mask = loop {
        let polys: Vec<_> = (0..rng.random_range(1..4))
            .map(|_| random_polygon(rng, size))
            .collect();
        let data: Vec<bool> = (0..size * size)
            .map(|i| {
                let p = ((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                polys.iter().any(|poly| in_convex(poly, p))
            })
            .collect();
        let frac = data.iter().filter(|&&b| b).count() as f64 / (size * size) as f64;
        if (lo..=hi).contains(&frac) {
            break Mask::from_vec(size, size, data).expect("size*size pixels");
        }
    };

    let f = rng.random_range(SHADOW_FACTOR_RANGE.0..SHADOW_FACTOR_RANGE.1);
    let mut img = Raster::new(size, size, 3);
    for (i, px) in base.iter().enumerate() {
        let out = if mask.data()[i] {
            [px[0] * f, px[1] * f, px[2] * f * SHADOW_BLUE_GAIN]
        } else {
            *px
        };
        img.pixel_mut(i)
            .copy_from_slice(&out.map(|v| v.round().clamp(0.0, 255.0) as u8));
    }
    (img, mask)
}

/// `n` scenes of `size`×`size` in memory, deterministic per seed.
pub fn synthetic_scenes(n: usize, size: usize, seed: u64) -> Vec<(RgbImage, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| synthetic_scene(size, &mut rng)).collect()
}

/// Writes `n` scenes to `out/Images/NNNN.png` and `out/Masks/NNNN.png`.
pub fn generate_synthetic(n: usize, size: usize, seed: u64, out: &Path) -> Result<DatasetIndex> {
    if n == 0 {
        return Err(Error::InvalidArgument(
            "scene count must be at least 1".into(),
        ));
    }
    if size < crate::imageio::PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "scene size {size} is smaller than a patch"
        )));
    }
    let (img_dir, mask_dir) = (out.join("Images"), out.join("Masks"));
    for d in [&img_dir, &mask_dir] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    let mut pairs = Vec::with_capacity(n);
    for (i, (img, mask)) in synthetic_scenes(n, size, seed).into_iter().enumerate() {
        let name = format!("{i:04}");
        let image = img_dir.join(format!("{name}.png"));
        let mask_path = mask_dir.join(format!("{name}.png"));
        write_png_file(&image, &img)?;
        write_png_file(&mask_path, &mask.to_gray())?;
        pairs.push(ImagePair {
            name,
            image,
            mask: mask_path,
        });
    }
    Ok(DatasetIndex {
        pairs,
        warnings: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Benchmark

/// A binary mask plus the number of network evaluations it cost.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskOutput {
    pub mask: Mask,
    pub cnn_invocations: usize,
}

pub trait MaskPredictor {
    fn predict_mask(&self, img: &RgbImage) -> Result<MaskOutput>;
}

impl MaskPredictor for Detector<'_> {
    fn predict_mask(&self, img: &RgbImage) -> Result<MaskOutput> {
        let r = self.detect(img)?;
        Ok(MaskOutput {
            mask: r.mask,
            cnn_invocations: r.cnn_invocations,
        })
    }
}

/// Scores one prediction against ground truth.
pub fn score(name: &str, out: &MaskOutput, gt: &Mask, seconds: f64) -> Result<ImageReport> {
    let counts = confusion(&out.mask, gt)?;
    Ok(ImageReport {
        name: name.to_string(),
        metrics: metrics(&counts),
        counts,
        cnn_invocations: out.cnn_invocations,
        seconds,
    })
}

/// Runs the predictor over every pair, one image at a time. Seconds cover
/// prediction only, not image decoding.
pub fn benchmark(predictor: &dyn MaskPredictor, index: &DatasetIndex) -> Result<MetricReport> {
    if index.pairs.is_empty() {
        return Err(Error::Dataset("empty dataset index".into()));
    }
    let mut images = Vec::with_capacity(index.pairs.len());
    for (i, pair) in index.pairs.iter().enumerate() {
        let (img, gt) = index.load_pair(i)?;
        let t = Instant::now();
        let out = predictor.predict_mask(&img)?;
        let seconds = t.elapsed().as_secs_f64();
        let r = score(&pair.name, &out, &gt, seconds)?;
        log::info!(
            "{}: total {:.4} in {seconds:.2}s, {} CNN evaluations",
            pair.name,
            r.metrics.total.unwrap_or(f64::NAN),
            r.cnn_invocations
        );
        images.push(r);
    }
    MetricReport::from_images(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_mask(rng: &mut ChaCha8Rng, w: usize, h: usize, p: f64) -> Mask {
        Mask::from_vec(w, h, (0..w * h).map(|_| rng.random_bool(p)).collect()).unwrap()
    }

    #[test]
    fn confusion_extremes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let gt = random_mask(&mut rng, 16, 16, 0.4);
        let same = confusion(&gt, &gt).unwrap();
        assert_eq!((same.fp, same.fn_), (0, 0));
        let inv = Mask::from_vec(16, 16, gt.data().iter().map(|b| !b).collect()).unwrap();
        let c = confusion(&inv, &gt).unwrap();
        assert_eq!((c.tp, c.tn), (0, 0));
        assert!(confusion(&Mask::new(4, 4), &Mask::new(4, 5)).is_err());
    }

    #[test]
    fn confusion_matches_pixel_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pred = random_mask(&mut rng, 32, 32, 0.5);
        let gt = random_mask(&mut rng, 32, 32, 0.3);
        let c = confusion(&pred, &gt).unwrap();
        let (mut tp, mut tn, mut fp, mut fneg) = (0, 0, 0, 0);
        for y in 0..32 {
            for x in 0..32 {
                let (p, g) = (pred.get(x, y), gt.get(x, y));
                if p && g {
                    tp += 1;
                } else if !p && !g {
                    tn += 1;
                } else if p {
                    fp += 1;
                } else {
                    fneg += 1;
                }
            }
        }
        assert_eq!(
            c,
            ConfusionCounts {
                tp,
                tn,
                fp,
                fn_: fneg
            }
        );
    }

    #[test]
    fn metric_arithmetic() {
        let m = metrics(&ConfusionCounts {
            tp: 90,
            fn_: 10,
            tn: 80,
            fp: 20,
        });
        assert_eq!(m.shadow, Some(0.9));
        assert_eq!(m.nonshadow, Some(0.8));
        assert_eq!(m.total, Some(0.85));
        let no_shadow = metrics(&ConfusionCounts {
            tp: 0,
            fn_: 0,
            tn: 50,
            fp: 3,
        });
        assert_eq!(no_shadow.shadow, None);
        let perfect = metrics(&ConfusionCounts {
            tp: 5,
            fn_: 0,
            tn: 7,
            fp: 0,
        });
        assert_eq!(
            (perfect.shadow, perfect.nonshadow, perfect.total),
            (Some(1.0), Some(1.0), Some(1.0))
        );
    }

    #[test]
    fn aggregate_skips_undefined_values() {
        let a = Aggregate::of([Some(0.5), None, Some(1.0)]);
        assert_eq!(a.count, 2);
        assert_eq!(a.mean, Some(0.75));
        assert_eq!(a.std, Some(0.25));
        assert_eq!(Aggregate::of([None]).mean, None);
    }

    #[test]
    fn hull_and_containment() {
        let hull = convex_hull(vec![
            (0.0, 0.0),
            (2.0, 0.0),
            (1.0, 1.0),
            (2.0, 2.0),
            (0.0, 2.0),
        ]);
        assert_eq!(hull.len(), 4);
        assert!(in_convex(&hull, (1.0, 1.0)));
        assert!(in_convex(&hull, (0.0, 1.0)));
        assert!(!in_convex(&hull, (2.1, 1.0)));
    }

    #[test]
    fn scenes_are_seeded_and_within_fraction_bounds() {
        let a = synthetic_scenes(6, 64, 5);
        let b = synthetic_scenes(6, 64, 5);
        assert_eq!(a, b);
        for (img, mask) in &a {
            let frac = mask.count() as f64 / 4096.0;
            assert!((0.05..=0.6).contains(&frac), "{frac}");
            assert_eq!((img.width(), img.height(), img.channels()), (64, 64, 3));
        }
        assert_ne!(a[0], synthetic_scenes(1, 64, 6)[0]);
    }

    #[test]
    fn split_is_disjoint_and_seeded() {
        let pairs = (0..8)
            .map(|i| ImagePair {
                name: format!("{i}"),
                image: PathBuf::from(format!("i{i}")),
                mask: PathBuf::from(format!("m{i}")),
            })
            .collect();
        let idx = DatasetIndex {
            pairs,
            warnings: vec![],
        };
        let (train, test) = idx.split(0.25, 3).unwrap();
        assert_eq!((train.pairs.len(), test.pairs.len()), (6, 2));
        assert!(test.pairs.iter().all(|p| !train.pairs.contains(p)));
        assert_eq!(idx.split(0.25, 3).unwrap(), (train, test));
    }
}
