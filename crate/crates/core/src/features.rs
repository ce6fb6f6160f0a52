//! Region descriptors for the shadow prior: a 63-bin Lab color histogram
//! and a texton histogram, fused into one L1-normalized vector and compared
//! with the exponentiated χ² kernel.

use std::collections::HashSet;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::Raster;
use crate::segmentation::Segmentation;

pub const BINS_PER_CHANNEL: usize = 21;
pub const COLOR_BINS: usize = 3 * BINS_PER_CHANNEL;
pub const DEFAULT_TEXTONS: usize = 64;
/// Upper bound on response vectors fed to k-means; larger corpora are
/// subsampled with the dictionary seed.
pub const MAX_KMEANS_SAMPLES: usize = 40_000;
pub const KMEANS_MAX_ITERATIONS: usize = 100;

// Fixed binning ranges for L, a and b.
const CHANNEL_RANGES: [(f64, f64); 3] = [(0.0, 100.0), (-128.0, 127.0), (-128.0, 127.0)];

/// 63 bins, 21 per Lab channel; the whole vector sums to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorHistogram(pub Vec<f64>);

#[inline]
fn channel_bin(v: f64, (lo, hi): (f64, f64)) -> usize {
    let t = (v - lo) / (hi - lo) * BINS_PER_CHANNEL as f64;
    (t.floor().max(0.0) as usize).min(BINS_PER_CHANNEL - 1)
}

pub fn color_histogram(lab: &Raster<f64>, pixels: &[usize]) -> Result<ColorHistogram> {
    if pixels.is_empty() {
        return Err(Error::EmptyRegion);
    }
    let mut bins = vec![0.0; COLOR_BINS];
    for &p in pixels {
        let px = lab.pixel(p);
        for (c, range) in CHANNEL_RANGES.iter().enumerate() {
            bins[c * BINS_PER_CHANNEL + channel_bin(px[c], *range)] += 1.0;
        }
    }
    let norm = 1.0 / (3 * pixels.len()) as f64;
    bins.iter_mut().for_each(|b| *b *= norm);
    Ok(ColorHistogram(bins))
}

// ---------------------------------------------------------------------------
// Filter bank

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterKind {
    Gaussian,
    LaplacianOfGaussian,
    GaussianDx,
    GaussianDy,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FilterSpec {
    pub kind: FilterKind,
    /// Lab channel the filter reads: 0 = L, 1 = a, 2 = b.
    pub channel: usize,
    pub sigma: f64,
}

/// Ordered filter set; `version` identifies the definition that produced a
/// texton dictionary.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterBank {
    pub version: u32,
    pub filters: Vec<FilterSpec>,
}

pub const FILTER_BANK_VERSION: u32 = 1;

impl FilterBank {
    /// Gaussians on L, a, b plus LoG and x/y Gaussian derivatives on L, each
    /// at σ = 1 and σ = 2: twelve responses per pixel.
    pub fn standard() -> Self {
        let mut filters = Vec::with_capacity(12);
        for sigma in [1.0, 2.0] {
            for channel in 0..3 {
                filters.push(FilterSpec {
                    kind: FilterKind::Gaussian,
                    channel,
                    sigma,
                });
            }
            for kind in [
                FilterKind::LaplacianOfGaussian,
                FilterKind::GaussianDx,
                FilterKind::GaussianDy,
            ] {
                filters.push(FilterSpec {
                    kind,
                    channel: 0,
                    sigma,
                });
            }
        }
        FilterBank {
            version: FILTER_BANK_VERSION,
            filters,
        }
    }

    pub fn len(&self) -> usize {
        self.filters.len()
    }

    pub fn is_empty(&self) -> bool {
        self.filters.is_empty()
    }
}

struct Kernels {
    radius: isize,
    smooth: Vec<f64>,
    first: Vec<f64>,
    second: Vec<f64>,
}

fn kernels(sigma: f64) -> Kernels {
    let radius = (3.0 * sigma).ceil() as isize;
    let s2 = sigma * sigma;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * s2)).exp())
        .collect();
    let z: f64 = raw.iter().sum();
    let smooth: Vec<f64> = raw.iter().map(|g| g / z).collect();
    let first = (-radius..=radius)
        .zip(&smooth)
        .map(|(k, g)| -(k as f64) / s2 * g)
        .collect();
    let mut second: Vec<f64> = (-radius..=radius)
        .zip(&smooth)
        .map(|(k, g)| ((k * k) as f64 / (s2 * s2) - 1.0 / s2) * g)
        .collect();
    // zero DC response
    let mean = second.iter().sum::<f64>() / second.len() as f64;
    second.iter_mut().for_each(|v| *v -= mean);
    Kernels {
        radius,
        smooth,
        first,
        second,
    }
}

/// Separable convolution with replicated borders.
fn convolve(plane: &[f64], w: usize, h: usize, kx: &[f64], ky: &[f64], radius: isize) -> Vec<f64> {
    let mut tmp = vec![0.0; w * h];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for x in 0..w {
            let mut acc = 0.0;
            for (t, k) in kx.iter().enumerate() {
                let sx = (x as isize + t as isize - radius).clamp(0, w as isize - 1) as usize;
                acc += k * row[sx];
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for (t, k) in ky.iter().enumerate() {
            let sy = (y as isize + t as isize - radius).clamp(0, h as isize - 1) as usize;
            let src = &tmp[sy * w..(sy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for x in 0..w {
                dst[x] += k * src[x];
            }
        }
    }
    out
}

/// Runs the bank over a Lab raster; the output has one channel per filter.
pub fn filter_responses(lab: &Raster<f64>, bank: &FilterBank) -> Raster<f64> {
    let (w, h) = (lab.width(), lab.height());
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|c| (0..w * h).map(|i| lab.pixel(i)[c]).collect())
        .collect();
    let nf = bank.len();
    let mut out = Raster::new(w, h, nf);
    for (f, spec) in bank.filters.iter().enumerate() {
        let k = kernels(spec.sigma);
        let plane = &planes[spec.channel];
        let resp = match spec.kind {
            FilterKind::Gaussian => convolve(plane, w, h, &k.smooth, &k.smooth, k.radius),
            FilterKind::GaussianDx => convolve(plane, w, h, &k.first, &k.smooth, k.radius),
            FilterKind::GaussianDy => convolve(plane, w, h, &k.smooth, &k.first, k.radius),
            FilterKind::LaplacianOfGaussian => {
                let xx = convolve(plane, w, h, &k.second, &k.smooth, k.radius);
                let yy = convolve(plane, w, h, &k.smooth, &k.second, k.radius);
                xx.iter().zip(&yy).map(|(a, b)| a + b).collect()
            }
        };
        let data = out.data_mut();
        for (i, v) in resp.into_iter().enumerate() {
            data[i * nf + f] = v;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Textons

#[derive(Debug, Clone, PartialEq)]
pub struct TextonDictionary {
    pub bank: FilterBank,
    /// `k` centers, each with one value per filter.
    pub centers: Vec<Vec<f64>>,
}

impl TextonDictionary {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    /// Index of the nearest center; ties resolve to the lowest index.
    #[inline]
    pub fn nearest(&self, v: &[f64]) -> usize {
        nearest_center(&self.centers, v).0
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest_center(centers: &[Vec<f64>], v: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (i, c) in centers.iter().enumerate() {
        let d = sq_dist(c, v);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Clusters filter responses of the training images into `k` textons with
/// k-means++ seeding and at most [`KMEANS_MAX_ITERATIONS`] Lloyd steps.
pub fn build_texton_dictionary(
    images: &[Raster<f64>],
    k: usize,
    seed: u64,
) -> Result<TextonDictionary> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("no training images".into()));
    }
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "texton count must be at least 2, got {k}"
        )));
    }
    let bank = FilterBank::standard();
    let dim = bank.len();
    let responses: Vec<Raster<f64>> = images
        .iter()
        .map(|img| filter_responses(img, &bank))
        .collect();
    let total: usize = responses.iter().map(Raster::pixel_count).sum();

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picks: Vec<usize> = if total > MAX_KMEANS_SAMPLES {
        let mut v = index::sample(&mut rng, total, MAX_KMEANS_SAMPLES).into_vec();
        v.sort_unstable();
        v
    } else {
        (0..total).collect()
    };
    let mut samples: Vec<&[f64]> = Vec::with_capacity(picks.len());
    let mut image = 0;
    let mut offset = 0;
    for p in picks {
        while p >= offset + responses[image].pixel_count() {
            offset += responses[image].pixel_count();
            image += 1;
        }
        samples.push(responses[image].pixel(p - offset));
    }

    let distinct: HashSet<Vec<u64>> = samples
        .iter()
        .map(|s| s.iter().map(|v| v.to_bits()).collect())
        .collect();
    if distinct.len() < k {
        return Err(Error::Degenerate(format!(
            "{} distinct filter-response vectors, need at least {k}",
            distinct.len()
        )));
    }

    // k-means++ seeding
    let mut centers: Vec<Vec<f64>> = vec![samples[rng.random_range(0..samples.len())].to_vec()];
    let mut d2: Vec<f64> = samples.iter().map(|s| sq_dist(s, &centers[0])).collect();
    while centers.len() < k {
        let sum: f64 = d2.iter().sum();
        let mut target = rng.random::<f64>() * sum;
        let mut chosen = None;
        for (i, &d) in d2.iter().enumerate() {
            if d > 0.0 {
                chosen = Some(i);
                if target < d {
                    break;
                }
                target -= d;
            }
        }
        let chosen = chosen.expect("distinct vectors leave positive distance");
        let c = samples[chosen].to_vec();
        for (s, d) in samples.iter().zip(d2.iter_mut()) {
            *d = d.min(sq_dist(s, &c));
        }
        centers.push(c);
    }

    let mut assign = vec![usize::MAX; samples.len()];
    for _ in 0..KMEANS_MAX_ITERATIONS {
        let mut changed = false;
        for (s, a) in samples.iter().zip(assign.iter_mut()) {
            let n = nearest_center(&centers, s).0;
            if n != *a {
                *a = n;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (s, &a) in samples.iter().zip(&assign) {
            counts[a] += 1;
            for (acc, v) in sums[a].iter_mut().zip(s.iter()) {
                *acc += v;
            }
        }
        for ((c, sum), &n) in centers.iter_mut().zip(sums).zip(&counts) {
            // empty clusters keep their previous center
            if n > 0 {
                *c = sum.into_iter().map(|v| v / n as f64).collect();
            }
        }
    }
    Ok(TextonDictionary { bank, centers })
}

/// Nearest-texton index for every pixel of a response raster.
pub fn assign_textons(responses: &Raster<f64>, dict: &TextonDictionary) -> Vec<u16> {
    (0..responses.pixel_count())
        .map(|i| dict.nearest(responses.pixel(i)) as u16)
        .collect()
}

/// L1-normalized texton histogram of a region.
pub fn texton_histogram(
    responses: &Raster<f64>,
    dict: &TextonDictionary,
    pixels: &[usize],
) -> Result<Vec<f64>> {
    if pixels.is_empty() {
        return Err(Error::EmptyRegion);
    }
    if responses.channels() != dict.bank.len() {
        return Err(Error::dims(
            format!("{} filter responses", dict.bank.len()),
            responses.channels(),
        ));
    }
    let mut hist = vec![0.0; dict.len()];
    for &p in pixels {
        hist[dict.nearest(responses.pixel(p))] += 1.0;
    }
    let inv = 1.0 / pixels.len() as f64;
    hist.iter_mut().for_each(|v| *v *= inv);
    Ok(hist)
}

fn histogram_from_assignment(assign: &[u16], k: usize, pixels: &[usize]) -> Vec<f64> {
    let mut hist = vec![0.0; k];
    for &p in pixels {
        hist[assign[p] as usize] += 1.0;
    }
    let inv = 1.0 / pixels.len() as f64;
    hist.iter_mut().for_each(|v| *v *= inv);
    hist
}

// ---------------------------------------------------------------------------
// Fused feature and kernel

#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeature {
    pub color: ColorHistogram,
    pub texture: Vec<f64>,
    /// Color and texture concatenated, each half scaled to sum 0.5.
    pub combined: Vec<f64>,
}

impl RegionFeature {
    pub fn new(color: ColorHistogram, texture: Vec<f64>) -> Self {
        let combined = color
            .0
            .iter()
            .chain(texture.iter())
            .map(|v| 0.5 * v)
            .collect();
        RegionFeature {
            color,
            texture,
            combined,
        }
    }
}

/// Features for every region of a segmentation.
pub fn region_features(
    lab: &Raster<f64>,
    seg: &Segmentation,
    dict: &TextonDictionary,
) -> Result<Vec<RegionFeature>> {
    if !(lab.width() == seg.width() && lab.height() == seg.height()) {
        return Err(Error::dims(
            format!("{}x{}", seg.width(), seg.height()),
            format!("{}x{}", lab.width(), lab.height()),
        ));
    }
    let responses = filter_responses(lab, &dict.bank);
    let assign = assign_textons(&responses, dict);
    seg.regions()
        .iter()
        .map(|pixels| {
            let color = color_histogram(lab, pixels)?;
            Ok(RegionFeature::new(
                color,
                histogram_from_assignment(&assign, dict.len(), pixels),
            ))
        })
        .collect()
}

/// `½ Σ (x−y)² / (x+y)`, skipping coordinates where both are zero.
#[inline]
pub fn chi2_distance(x: &[f64], y: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (a, b) in x.iter().zip(y) {
        let s = a + b;
        if s > 0.0 {
            let d = a - b;
            acc += d * d / s;
        }
    }
    0.5 * acc
}

/// `exp(−γ · χ²(x, y))` for non-negative vectors of equal length.
pub fn chi2_kernel(x: &[f64], y: &[f64], gamma: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::dims(x.len(), y.len()));
    }
    if !(gamma > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "kernel width must be positive, got {gamma}"
        )));
    }
    if x.iter().chain(y).any(|v| *v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "χ² kernel needs finite non-negative components".into(),
        ));
    }
    Ok((-gamma * chi2_distance(x, y)).exp())
}

/// Kernel width from the training set: the reciprocal of the mean pairwise
/// χ² distance.
pub fn mean_distance_gamma(features: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..features.len() {
        for j in i + 1..features.len() {
            sum += chi2_distance(&features[i], &features[j]);
            pairs += 1;
        }
    }
    if pairs == 0 || sum <= 0.0 {
        1.0
    } else {
        pairs as f64 / sum
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn raster_from(w: usize, h: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Raster<f64> {
        let mut r = Raster::new(w, h, 3);
        for y in 0..h {
            for x in 0..w {
                r.pixel_mut(y * w + x).copy_from_slice(&f(x, y));
            }
        }
        r
    }

    #[test]
    fn identical_pixels_fill_three_bins() {
        let lab = raster_from(4, 4, |_, _| [42.0, -10.0, 17.0]);
        let h = color_histogram(&lab, &(0..16).collect::<Vec<_>>()).unwrap();
        let nz: Vec<f64> = h.0.iter().copied().filter(|&v| v > 0.0).collect();
        assert_eq!(nz.len(), 3);
        assert!(nz.iter().all(|&v| (v - 1.0 / 3.0).abs() < 1e-15));
    }

    #[test]
    fn extreme_lightness_bins() {
        let lab = raster_from(2, 1, |x, _| [if x == 0 { 0.0 } else { 100.0 }, 3.0, 3.0]);
        let h = color_histogram(&lab, &[0, 1]).unwrap();
        assert!((h.0[0] - 1.0 / 6.0).abs() < 1e-15);
        assert!((h.0[20] - 1.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn color_histogram_matches_naive_binning() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let lab = raster_from(20, 20, |_, _| {
            [
                rng.random_range(0.0..=100.0),
                rng.random_range(-128.0..=127.0),
                rng.random_range(-128.0..=127.0),
            ]
        });
        let pixels: Vec<usize> = index::sample(&mut rng, 400, 100).into_vec();
        let h = color_histogram(&lab, &pixels).unwrap();
        let mut oracle = [[0usize; 21]; 3];
        for &p in &pixels {
            let px = lab.pixel(p);
            for c in 0..3 {
                let (lo, hi) = CHANNEL_RANGES[c];
                // walk the bin edges instead of dividing
                let width = (hi - lo) / 21.0;
                let mut b = 0;
                while b < 20 && px[c] >= lo + (b + 1) as f64 * width {
                    b += 1;
                }
                oracle[c][b] += 1;
            }
        }
        for c in 0..3 {
            for b in 0..21 {
                assert!(
                    (h.0[c * 21 + b] - oracle[c][b] as f64 / 300.0).abs() < 1e-12,
                    "channel {c} bin {b}"
                );
            }
        }
        assert!((h.0.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_region_is_an_error() {
        let lab = raster_from(2, 2, |_, _| [0.0; 3]);
        assert!(matches!(
            color_histogram(&lab, &[]),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn standard_bank_has_twelve_filters() {
        let bank = FilterBank::standard();
        assert_eq!(bank.len(), 12);
        let lab = raster_from(9, 7, |x, y| [x as f64 * 3.0, y as f64, 5.0]);
        assert_eq!(filter_responses(&lab, &bank).channels(), 12);
    }

    #[test]
    fn flat_image_has_zero_derivative_responses() {
        let lab = raster_from(16, 16, |_, _| [40.0, 5.0, -5.0]);
        let bank = FilterBank::standard();
        let r = filter_responses(&lab, &bank);
        for (f, spec) in bank.filters.iter().enumerate() {
            let v = r.get(7, 7, f);
            match spec.kind {
                FilterKind::Gaussian => assert!((v - [40.0, 5.0, -5.0][spec.channel]).abs() < 1e-9),
                _ => assert!(v.abs() < 1e-9, "{spec:?} gave {v}"),
            }
        }
    }

    #[test]
    fn constant_corpus_cannot_form_two_textons() {
        let lab = raster_from(16, 16, |_, _| [50.0, 0.0, 0.0]);
        assert!(matches!(
            build_texton_dictionary(&[lab], 2, 1),
            Err(Error::Degenerate(_))
        ));
    }

    fn two_texture_image(seed: u64) -> (Raster<f64>, Vec<bool>) {
        // left: flat dark field; right: fine checkerboard around a lighter mean
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let split = rng.random_range(20..44);
        let lab = raster_from(64, 64, |x, y| {
            if x < split {
                [25.0, 0.0, 0.0]
            } else if (x + y) % 2 == 0 {
                [60.0, 0.0, 0.0]
            } else {
                [80.0, 0.0, 0.0]
            }
        });
        let is_checker = (0..64 * 64).map(|p| p % 64 >= split).collect();
        (lab, is_checker)
    }

    #[test]
    fn two_textures_separate_into_two_centers() {
        let corpus: Vec<_> = (0..3).map(two_texture_image).collect();
        let images: Vec<_> = corpus.iter().map(|(l, _)| l.clone()).collect();
        let dict = build_texton_dictionary(&images, 2, 9).unwrap();
        for (lab, truth) in &corpus {
            let assign = assign_textons(&filter_responses(lab, &dict.bank), &dict);
            for texture in [false, true] {
                let mut counts = [0usize; 2];
                for (a, _) in assign.iter().zip(truth).filter(|(_, t)| **t == texture) {
                    counts[*a as usize] += 1;
                }
                let purity =
                    *counts.iter().max().unwrap() as f64 / counts.iter().sum::<usize>() as f64;
                assert!(purity >= 0.95, "texture {texture}: purity {purity}");
            }
        }
    }

    #[test]
    fn dictionary_is_deterministic() {
        let images: Vec<_> = (0..2).map(|s| two_texture_image(s).0).collect();
        let a = build_texton_dictionary(&images, 4, 77).unwrap();
        let b = build_texton_dictionary(&images, 4, 77).unwrap();
        assert_eq!(a, b);
        let distinct: HashSet<Vec<u64>> = a
            .centers
            .iter()
            .map(|c| c.iter().map(|v| v.to_bits()).collect())
            .collect();
        assert_eq!(distinct.len(), 4);
    }

    fn toy_dictionary() -> TextonDictionary {
        let bank = FilterBank::standard();
        let centers = (0..3).map(|i| vec![i as f64 * 10.0; bank.len()]).collect();
        TextonDictionary { bank, centers }
    }

    #[test]
    fn texton_histogram_single_and_split() {
        let dict = toy_dictionary();
        let mut resp = Raster::new(4, 1, 12);
        for (i, v) in [0.5, 1.0, 9.0, 11.0].iter().enumerate() {
            resp.pixel_mut(i).iter_mut().for_each(|x| *x = *v);
        }
        assert_eq!(
            texton_histogram(&resp, &dict, &[0, 1]).unwrap(),
            vec![1.0, 0.0, 0.0]
        );
        assert_eq!(
            texton_histogram(&resp, &dict, &[0, 1, 2, 3]).unwrap(),
            vec![0.5, 0.5, 0.0]
        );
        assert!(texton_histogram(&resp, &dict, &[]).is_err());
    }

    #[test]
    fn texton_histogram_matches_naive_assignment() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let bank = FilterBank::standard();
        let centers: Vec<Vec<f64>> = (0..6)
            .map(|_| (0..12).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let dict = TextonDictionary {
            bank,
            centers: centers.clone(),
        };
        let resp = Raster::from_vec(
            10,
            10,
            12,
            (0..1200).map(|_| rng.random_range(-5.0..5.0)).collect(),
        )
        .unwrap();
        let mut pixels: Vec<usize> = index::sample(&mut rng, 100, 37).into_vec();
        let h = texton_histogram(&resp, &dict, &pixels).unwrap();
        let mut oracle = vec![0.0; 6];
        for &p in &pixels {
            let v = resp.pixel(p);
            let dists: Vec<f64> = centers
                .iter()
                .map(|c| c.iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum())
                .collect();
            let best = (0..6).fold(0, |b, i| if dists[i] < dists[b] { i } else { b });
            oracle[best] += 1.0 / 37.0;
        }
        for (a, b) in h.iter().zip(&oracle) {
            assert!((a - b).abs() < 1e-12);
        }
        // visiting order does not matter
        pixels.reverse();
        assert_eq!(texton_histogram(&resp, &dict, &pixels).unwrap(), h);
    }

    #[test]
    fn chi2_examples() {
        assert!(
            (chi2_kernel(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap() - (-1.0f64).exp()).abs() < 1e-15
        );
        assert_eq!(
            chi2_kernel(&[0.2, 0.0, 0.8], &[0.2, 0.0, 0.8], 3.0).unwrap(),
            1.0
        );
        assert!(chi2_kernel(&[-0.1, 1.1], &[0.5, 0.5], 1.0).is_err());
        assert!(chi2_kernel(&[0.5], &[0.5, 0.5], 1.0).is_err());
    }

    fn random_histogram(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        let mut v: Vec<f64> = (0..n)
            .map(|_| {
                if rng.random_bool(0.3) {
                    0.0
                } else {
                    rng.random()
                }
            })
            .collect();
        let s: f64 = v.iter().sum();
        v.iter_mut().for_each(|x| *x /= s);
        v
    }

    #[test]
    fn chi2_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..50 {
            let x = random_histogram(&mut rng, 63);
            let y = random_histogram(&mut rng, 63);
            let gamma = rng.random_range(0.1..5.0);
            let terms: Vec<f64> = x
                .iter()
                .zip(&y)
                .map(|(a, b)| {
                    if a + b == 0.0 {
                        0.0
                    } else {
                        (a - b) * (a - b) / (a + b)
                    }
                })
                .collect();
            let dist = terms.iter().sum::<f64>() / 2.0;
            let oracle = (-gamma * dist).exp();
            assert!((chi2_kernel(&x, &y, gamma).unwrap() - oracle).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn chi2_symmetric_and_bounded(seed in any::<u64>(), gamma in 0.01f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = random_histogram(&mut rng, 20);
            let y = random_histogram(&mut rng, 20);
            let kxy = chi2_kernel(&x, &y, gamma).unwrap();
            prop_assert_eq!(kxy, chi2_kernel(&y, &x, gamma).unwrap());
            prop_assert!(kxy > 0.0 && kxy <= 1.0);
            prop_assert_eq!(chi2_kernel(&x, &x, gamma).unwrap(), 1.0);
        }

        #[test]
        fn combined_feature_sums_to_one(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lab = raster_from(8, 8, |_, _| [rng.random_range(0.0..100.0), rng.random_range(-50.0..50.0), 0.0]);
            let color = color_histogram(&lab, &(0..64).collect::<Vec<_>>()).unwrap();
            let f = RegionFeature::new(color, random_histogram(&mut rng, 64));
            prop_assert!((f.combined.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            prop_assert!((f.combined[..63].iter().sum::<f64>() - 0.5).abs() < 1e-9);
            prop_assert!(f.combined.iter().all(|v| *v >= 0.0));
        }
    }
}
