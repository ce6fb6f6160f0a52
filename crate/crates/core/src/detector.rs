//! Two-step CNN inference on top of the shadow prior: one patch per region,
//! then patches along the boundaries of the regions that pass the
//! relative-confidence filter.

use std::time::{Duration, Instant};

use rayon::prelude::*;

use crate::cnn::{CnnModel, InferenceNet, PatchPrediction, OUTPUTS};
use crate::error::{Error, Result};
use crate::imageio::{
    extract_patch, patch_origin, rgb_to_lab, Mask, Patch, Raster, RgbImage, PATCH_SIZE,
};
use crate::prior::{shadow_prior_lab, SvmModel};
use crate::segmentation::{mean_shift_segment, MeanShiftParams, Segmentation};

/// Patches handed to the network per call.
const PREDICT_CHUNK: usize = 32;

/// Anything that maps RGBP patches to 32×32 shadow probabilities.
pub trait PatchPredictor: Sync {
    fn predict_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction>;

    /// Nine output cells per patch; override when the network can skip the
    /// rest of its output layer.
    fn predict_cells_batch(&self, patches: &[&Patch], cells: &[[usize; 9]]) -> Vec<[f64; 9]> {
        self.predict_batch(patches)
            .iter()
            .zip(cells)
            .map(|(p, c)| c.map(|i| p.probs[i]))
            .collect()
    }
}

impl PatchPredictor for InferenceNet {
    fn predict_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
        self.predict(patches)
    }

    fn predict_cells_batch(&self, patches: &[&Patch], cells: &[[usize; 9]]) -> Vec<[f64; 9]> {
        self.predict_cells(patches, cells)
    }
}

impl PatchPredictor for CnnModel {
    fn predict_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
        self.forward_batch(patches)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectorConfig {
    pub alpha: f64,
    pub binarize_threshold: f64,
    pub mean_shift: MeanShiftParams,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            alpha: 0.2,
            binarize_threshold: 0.5,
            mean_shift: MeanShiftParams::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "alpha {} outside (0, 1]",
                self.alpha
            )));
        }
        if !(self.binarize_threshold > 0.0 && self.binarize_threshold < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "threshold {} outside (0, 1)",
                self.binarize_threshold
            )));
        }
        self.mean_shift.validate()
    }
}

/// Per-region mean CNN output `s_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionPrediction {
    pub s: Vec<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StageTimings {
    pub segmentation: Duration,
    pub prior: Duration,
    pub region_prediction: Duration,
    pub filtering: Duration,
    pub refinement: Duration,
    pub binarization: Duration,
}

impl StageTimings {
    pub fn total(&self) -> Duration {
        self.segmentation
            + self.prior
            + self.region_prediction
            + self.filtering
            + self.refinement
            + self.binarization
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionResult {
    pub segmentation: Segmentation,
    pub prior: Raster<f64>,
    pub regions: RegionPrediction,
    pub selected: Vec<usize>,
    pub region_map: Raster<f64>,
    pub refined_map: Raster<f64>,
    pub mask: Mask,
    pub timing: StageTimings,
    pub cnn_invocations: usize,
    pub refined_pixels: usize,
}

fn check_inputs(img: &RgbImage, prior: &Raster<f64>, seg: &Segmentation) -> Result<()> {
    if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch",
            img.width(),
            img.height()
        )));
    }
    img.check_size(prior)?;
    if (seg.width(), seg.height()) != (img.width(), img.height()) {
        return Err(Error::dims(
            format!("{}x{}", img.width(), img.height()),
            format!("{}x{} segmentation", seg.width(), seg.height()),
        ));
    }
    Ok(())
}

/// Runs `f` over `items` in fixed-size chunks, in parallel, keeping order.
fn chunked<T: Sync, R: Send>(
    items: &[T],
    f: impl Fn(&[T]) -> Result<Vec<R>> + Sync + Send,
) -> Result<Vec<R>> {
    let parts = items
        .par_chunks(PREDICT_CHUNK)
        .map(f)
        .collect::<Result<Vec<_>>>()?;
    Ok(parts.into_iter().flatten().collect())
}

/// One forward pass per region at its centroid; `s_i` is the mean of the
/// 1024 outputs and fills region `i` of the returned map.
pub fn region_predict(
    img: &RgbImage,
    prior: &Raster<f64>,
    seg: &Segmentation,
    cnn: &dyn PatchPredictor,
) -> Result<(RegionPrediction, Raster<f64>)> {
    check_inputs(img, prior, seg)?;
    let s = chunked(seg.centroids(), |centers| {
        let patches = centers
            .iter()
            .map(|&c| extract_patch(img, prior, c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Patch> = patches.iter().collect();
        Ok(cnn
            .predict_batch(&refs)
            .iter()
            .map(|p| p.probs.iter().sum::<f64>() / OUTPUTS as f64)
            .collect())
    })?;
    let mut map = Raster::new(img.width(), img.height(), 1);
    let data = map.data_mut();
    for (pixels, &v) in seg.regions().iter().zip(&s) {
        for &px in pixels {
            data[px] = v;
        }
    }
    Ok((RegionPrediction { s }, map))
}

/// Regions whose score is at least `alpha` times the highest score.
pub fn filter_regions(pred: &RegionPrediction, alpha: f64) -> Vec<usize> {
    let max = pred.s.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let cut = alpha * max;
    (0..pred.s.len()).filter(|&i| pred.s[i] >= cut).collect()
}

/// Patch-local cells averaged for a boundary pixel: the 3×3 block around
/// the pixel's position in its patch, clamped to the patch.
pub fn neighborhood_cells(width: usize, height: usize, (x, y): (usize, usize)) -> [usize; 9] {
    let (ox, oy) = patch_origin(width, height, (x, y));
    let (lx, ly) = ((x - ox) as isize, (y - oy) as isize);
    let last = PATCH_SIZE as isize - 1;
    let mut cells = [0; 9];
    for (k, cell) in cells.iter_mut().enumerate() {
        let dy = k as isize / 3 - 1;
        let dx = k as isize % 3 - 1;
        let cy = (ly + dy).clamp(0, last) as usize;
        let cx = (lx + dx).clamp(0, last) as usize;
        *cell = cy * PATCH_SIZE + cx;
    }
    cells
}

/// Boundary pixels of the selected regions, in row-major image order.
pub fn refinement_pixels(seg: &Segmentation, selected: &[usize]) -> Vec<usize> {
    let mut pixels: Vec<usize> = selected
        .iter()
        .flat_map(|&i| seg.boundary_pixels(i).iter().copied())
        .collect();
    pixels.sort_unstable();
    pixels
}

/// Starting from `region_map`, re-predicts every boundary pixel of the
/// selected regions and writes the mean of the nine cells around it to the
/// pixel and its in-image 8-neighbours. Later pixels overwrite earlier ones.
/// Returns the refined map and the number of patches evaluated.
pub fn refine_edges(
    img: &RgbImage,
    prior: &Raster<f64>,
    seg: &Segmentation,
    selected: &[usize],
    cnn: &dyn PatchPredictor,
    region_map: &Raster<f64>,
) -> Result<(Raster<f64>, usize)> {
    check_inputs(img, prior, seg)?;
    img.check_size(region_map)?;
    if let Some(&bad) = selected.iter().find(|&&i| i >= seg.region_count()) {
        return Err(Error::InvalidArgument(format!("region {bad} out of range")));
    }
    let (w, h) = (img.width(), img.height());
    let pixels = refinement_pixels(seg, selected);
    let averages = chunked(&pixels, |chunk| {
        let centers: Vec<(usize, usize)> = chunk.iter().map(|&p| (p % w, p / w)).collect();
        let patches = centers
            .iter()
            .map(|&c| extract_patch(img, prior, c))
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Patch> = patches.iter().collect();
        let cells: Vec<[usize; 9]> = centers
            .iter()
            .map(|&c| neighborhood_cells(w, h, c))
            .collect();
        Ok(cnn
            .predict_cells_batch(&refs, &cells)
            .iter()
            .map(|v| v.iter().sum::<f64>() / 9.0)
            .collect::<Vec<f64>>())
    })?;
    let mut refined = region_map.clone();
    let data = refined.data_mut();
    for (&p, &avg) in pixels.iter().zip(&averages) {
        let (x, y) = ((p % w) as isize, (p / w) as isize);
        for dy in -1..=1 {
            for dx in -1..=1 {
                let (nx, ny) = (x + dx, y + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    data[ny as usize * w + nx as usize] = avg;
                }
            }
        }
    }
    Ok((refined, pixels.len()))
}

/// Shadow wherever the map is at least `t`.
pub fn binarize(map: &Raster<f64>, t: f64) -> Mask {
    let data = map.data().iter().map(|&v| v >= t).collect();
    Mask::from_vec(map.width(), map.height(), data).expect("one value per pixel")
}

/// Trained models for the full pipeline.
pub struct Detector<'a> {
    pub svm: &'a SvmModel,
    pub cnn: &'a dyn PatchPredictor,
    pub config: DetectorConfig,
}

impl Detector<'_> {
    pub fn detect(&self, img: &RgbImage) -> Result<DetectionResult> {
        detect(img, self.svm, self.cnn, &self.config)
    }
}

pub fn detect(
    img: &RgbImage,
    svm: &SvmModel,
    cnn: &dyn PatchPredictor,
    config: &DetectorConfig,
) -> Result<DetectionResult> {
    config.validate()?;
    if img.width() < PATCH_SIZE || img.height() < PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {}x{} is smaller than the {PATCH_SIZE}x{PATCH_SIZE} patch",
            img.width(),
            img.height()
        )));
    }
    let mut timing = StageTimings::default();

    let t = Instant::now();
    let lab = rgb_to_lab(img);
    let segmentation = mean_shift_segment(&lab, &config.mean_shift)?;
    timing.segmentation = t.elapsed();

    let t = Instant::now();
    let prior = shadow_prior_lab(svm, &lab, &segmentation)?.map;
    timing.prior = t.elapsed();

    let t = Instant::now();
    let (regions, region_map) = region_predict(img, &prior, &segmentation, cnn)?;
    timing.region_prediction = t.elapsed();

    let t = Instant::now();
    let selected = filter_regions(&regions, config.alpha);
    timing.filtering = t.elapsed();

    let t = Instant::now();
    let (refined_map, refined_pixels) =
        refine_edges(img, &prior, &segmentation, &selected, cnn, &region_map)?;
    timing.refinement = t.elapsed();

    let t = Instant::now();
    let mask = binarize(&refined_map, config.binarize_threshold);
    timing.binarization = t.elapsed();

    let cnn_invocations = segmentation.region_count() + refined_pixels;
    log::debug!(
        "detect {}x{}: {} regions, {} selected, {} CNN evaluations, {:?}",
        img.width(),
        img.height(),
        segmentation.region_count(),
        selected.len(),
        cnn_invocations,
        timing.total()
    );
    Ok(DetectionResult {
        segmentation,
        prior,
        regions,
        selected,
        region_map,
        refined_map,
        mask,
        timing,
        cnn_invocations,
        refined_pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::atomic::{AtomicUsize, Ordering};

    /// Returns a fixed 32×32 map for every patch and counts invocations.
    struct Stub {
        probs: Vec<f64>,
        calls: AtomicUsize,
    }

    impl Stub {
        fn constant(c: f64) -> Self {
            Self::pattern(vec![c; OUTPUTS])
        }

        fn pattern(probs: Vec<f64>) -> Self {
            Stub {
                probs,
                calls: AtomicUsize::new(0),
            }
        }
    }

    impl PatchPredictor for Stub {
        fn predict_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
            self.calls.fetch_add(patches.len(), Ordering::SeqCst);
            patches
                .iter()
                .map(|_| PatchPrediction {
                    probs: self.probs.clone(),
                })
                .collect()
        }
    }

    /// Mean of the prior channel; exercises patch extraction.
    struct PriorMean;

    impl PatchPredictor for PriorMean {
        fn predict_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
            patches
                .iter()
                .map(|p| {
                    let m = p.data()[3 * OUTPUTS..].iter().sum::<f64>() / OUTPUTS as f64;
                    PatchPrediction {
                        probs: vec![m; OUTPUTS],
                    }
                })
                .collect()
        }
    }

    fn quadrants(size: usize) -> (RgbImage, Raster<f64>, Segmentation) {
        let half = size / 2;
        let labels: Vec<u32> = (0..size * size)
            .map(|i| {
                let (x, y) = (i % size, i / size);
                (x >= half) as u32 + 2 * (y >= half) as u32
            })
            .collect();
        let seg = Segmentation::from_labels(size, size, labels.clone()).unwrap();
        let img = RgbImage::filled(size, size, 3, 90);
        let prior = Raster::from_vec(
            size,
            size,
            1,
            labels.iter().map(|&l| 0.1 + 0.2 * l as f64).collect(),
        )
        .unwrap();
        (img, prior, seg)
    }

    #[test]
    fn single_region_uses_one_patch() {
        let seg = Segmentation::from_labels(40, 40, vec![0; 1600]).unwrap();
        let img = RgbImage::filled(40, 40, 3, 10);
        let prior = Raster::filled(40, 40, 1, 0.3);
        let stub = Stub::constant(0.7);
        let (pred, map) = region_predict(&img, &prior, &seg, &stub).unwrap();
        assert_eq!(stub.calls.load(Ordering::SeqCst), 1);
        assert_eq!(pred.s.len(), 1);
        assert!((pred.s[0] - 0.7).abs() < 1e-12);
        assert!(map.data().iter().all(|&v| v == pred.s[0]));
    }

    #[test]
    fn constant_stub_fills_every_region() {
        let (img, prior, seg) = quadrants(64);
        let (pred, _) = region_predict(&img, &prior, &seg, &Stub::constant(0.7)).unwrap();
        assert_eq!(pred.s.len(), 4);
        assert!(pred.s.iter().all(|&v| (v - 0.7).abs() < 1e-12));
    }

    #[test]
    fn region_map_matches_direct_recomputation() {
        let (img, prior, seg) = quadrants(64);
        let (pred, map) = region_predict(&img, &prior, &seg, &PriorMean).unwrap();
        for i in 0..4 {
            let (cx, cy) = seg.centroid(i);
            let (ox, oy) = (cx.saturating_sub(16).min(32), cy.saturating_sub(16).min(32));
            let mut sum = 0.0;
            for y in oy..oy + 32 {
                for x in ox..ox + 32 {
                    sum += prior.get(x, y, 0);
                }
            }
            assert!((pred.s[i] - sum / 1024.0).abs() < 1e-12);
            for &px in seg.region(i) {
                assert_eq!(map.data()[px], pred.s[i]);
            }
        }
    }

    #[test]
    fn filter_follows_the_relative_threshold() {
        let pred = RegionPrediction {
            s: vec![0.9, 0.3, 0.1],
        };
        assert_eq!(filter_regions(&pred, 0.2), vec![0, 1]);
        let flat = RegionPrediction { s: vec![0.4; 5] };
        assert_eq!(filter_regions(&flat, 1.0), vec![0, 1, 2, 3, 4]);
        let tied = RegionPrediction {
            s: vec![0.2, 0.8, 0.8, 0.5],
        };
        assert_eq!(filter_regions(&tied, 1.0), vec![1, 2]);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(1..1000);
            let s: Vec<f64> = (0..m).map(|_| rng.random()).collect();
            let max = s.iter().copied().fold(0.0, f64::max);
            let pred = RegionPrediction { s: s.clone() };
            let (a1, a2) = (rng.random_range(0.01..1.0), rng.random_range(0.01..1.0));
            let (lo, hi) = if a1 < a2 { (a1, a2) } else { (a2, a1) };
            let r_lo = filter_regions(&pred, lo);
            let r_hi = filter_regions(&pred, hi);
            let expected: Vec<usize> = (0..m).filter(|&i| s[i] >= lo * max).collect();
            assert_eq!(r_lo, expected);
            assert!(r_hi.iter().all(|i| r_lo.contains(i)));
        }
    }

    #[test]
    fn empty_selection_keeps_region_map() {
        let (img, prior, seg) = quadrants(64);
        let (_, map) = region_predict(&img, &prior, &seg, &PriorMean).unwrap();
        let stub = Stub::constant(0.3);
        let (refined, n) = refine_edges(&img, &prior, &seg, &[], &stub, &map).unwrap();
        assert_eq!(n, 0);
        assert_eq!(refined, map);
        assert_eq!(stub.calls.load(Ordering::SeqCst), 0);
    }

    #[test]
    fn constant_stub_sets_refined_neighbourhoods() {
        let (img, prior, seg) = quadrants(64);
        let map = Raster::filled(64, 64, 1, 0.0);
        let stub = Stub::constant(0.25);
        let (refined, n) = refine_edges(&img, &prior, &seg, &[0], &stub, &map).unwrap();
        assert_eq!(n, seg.boundary_pixels(0).len());
        assert_eq!(stub.calls.load(Ordering::SeqCst), n);
        for (p, &v) in refined.data().iter().enumerate() {
            let (x, y) = ((p % 64) as isize, (p / 64) as isize);
            let touched = seg.boundary_pixels(0).iter().any(|&b| {
                let (bx, by) = ((b % 64) as isize, (b / 64) as isize);
                (bx - x).abs() <= 1 && (by - y).abs() <= 1
            });
            assert_eq!(v, if touched { 0.25 } else { 0.0 }, "pixel {p}");
        }
    }

    #[test]
    fn ramp_average_uses_patch_local_cells() {
        // region 1 is a single pixel at (40, 5); its only boundary pixel is itself
        let (w, h) = (64, 48);
        let mut labels = vec![0u32; w * h];
        labels[5 * w + 40] = 1;
        let seg = Segmentation::from_labels(w, h, labels).unwrap();
        assert_eq!(seg.boundary_pixels(1), &[5 * w + 40]);
        let img = RgbImage::filled(w, h, 3, 0);
        let prior = Raster::filled(w, h, 1, 0.0);
        let ramp: Vec<f64> = (0..OUTPUTS).map(|i| i as f64 / 2048.0).collect();
        let map = Raster::filled(w, h, 1, 0.0);
        let (refined, n) =
            refine_edges(&img, &prior, &seg, &[1], &Stub::pattern(ramp), &map).unwrap();
        assert_eq!(n, 1);
        // origin (24, 0): local center (16, 5); cells rows 4..=6, cols 15..=17
        let mut sum = 0.0;
        for ly in 4..=6 {
            for lx in 15..=17 {
                sum += (ly * 32 + lx) as f64 / 2048.0;
            }
        }
        let expected = sum / 9.0;
        for y in 4..=6 {
            for x in 39..=41 {
                assert_eq!(refined.get(x, y, 0), expected);
            }
        }
        assert_eq!(refined.get(38, 5, 0), 0.0);
    }

    #[test]
    fn border_neighbourhood_clamps_inside_patch() {
        // corner pixel: local (0, 0); out-of-patch cells reuse the nearest
        let cells = neighborhood_cells(64, 64, (0, 0));
        assert_eq!(cells, [0, 0, 1, 0, 0, 1, 32, 32, 33]);
        let cells = neighborhood_cells(64, 64, (63, 63));
        assert_eq!(cells[4], 31 * 32 + 31);
        assert_eq!(cells[8], 31 * 32 + 31);
    }

    #[test]
    fn overlapping_writes_follow_row_major_order() {
        // two adjacent single-pixel regions; the later one (row-major) wins
        let (w, h) = (40, 40);
        let mut labels = vec![0u32; w * h];
        labels[20 * w + 20] = 1;
        labels[20 * w + 21] = 2;
        let seg = Segmentation::from_labels(w, h, labels).unwrap();
        let img = RgbImage::filled(w, h, 3, 0);
        let prior =
            Raster::from_vec(w, h, 1, (0..w * h).map(|i| (i % w) as f64 / 64.0).collect()).unwrap();
        let map = Raster::filled(w, h, 1, 0.0);
        let (refined, _) = refine_edges(&img, &prior, &seg, &[1, 2], &PriorMean, &map).unwrap();
        let p21 = extract_patch(&img, &prior, (21, 20)).unwrap();
        let m21 = p21.data()[3 * OUTPUTS..].iter().sum::<f64>() / OUTPUTS as f64;
        assert_eq!(refined.get(20, 20, 0), m21);
        assert_eq!(refined.get(21, 20, 0), m21);
    }

    #[test]
    fn binarize_uses_inclusive_threshold() {
        let hi = Raster::filled(4, 4, 1, 0.9);
        assert_eq!(binarize(&hi, 0.5).count(), 16);
        let lo = Raster::filled(4, 4, 1, 0.1);
        assert_eq!(binarize(&lo, 0.5).count(), 0);
        let tie = Raster::filled(4, 4, 1, 0.5);
        assert_eq!(binarize(&tie, 0.5).count(), 16);
    }

    #[test]
    fn config_is_validated() {
        assert!(DetectorConfig::default().validate().is_ok());
        assert!(DetectorConfig {
            alpha: 0.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(DetectorConfig {
            binarize_threshold: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
