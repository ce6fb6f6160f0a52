//! Training patch selection.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::imageio::{extract_patch, patch_origin, Mask, Patch, Raster, RgbImage, PATCH_SIZE};

/// Minimum shadow share of a shadow-class patch.
pub const SHADOW_MIN_FRACTION: f64 = 0.7;
/// Maximum shadow share of a non-shadow-class patch.
pub const NONSHADOW_MAX_FRACTION: f64 = 0.01;
/// Chebyshev distance from the center to a label transition for edge patches.
pub const EDGE_RADIUS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PatchClass {
    Shadow,
    NonShadow,
    ShadowEdge,
}

impl PatchClass {
    pub const ALL: [PatchClass; 3] = [
        PatchClass::Shadow,
        PatchClass::NonShadow,
        PatchClass::ShadowEdge,
    ];
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPatch {
    pub patch: Patch,
    /// Ground truth under the patch, row-major 32×32, values in {0, 1}.
    pub target: Vec<f64>,
    pub class: PatchClass,
    pub center: (usize, usize),
}

/// Summed-area table over a mask.
struct Integral {
    width: usize,
    sums: Vec<u32>,
}

impl Integral {
    fn new(mask: &Mask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let mut sums = vec![0u32; (w + 1) * (h + 1)];
        for y in 0..h {
            let mut row = 0;
            for x in 0..w {
                row += mask.get(x, y) as u32;
                sums[(y + 1) * (w + 1) + x + 1] = sums[y * (w + 1) + x + 1] + row;
            }
        }
        Integral { width: w, sums }
    }

    /// Count over `[x0, x1) × [y0, y1)`.
    fn count(&self, x0: usize, y0: usize, x1: usize, y1: usize) -> u32 {
        let s = |x: usize, y: usize| self.sums[y * (self.width + 1) + x];
        s(x1, y1) + s(x0, y0) - s(x0, y1) - s(x1, y0)
    }
}

/// Shadow share of the 32×32 window that [`extract_patch`] uses for `center`.
fn patch_fraction(integral: &Integral, w: usize, h: usize, center: (usize, usize)) -> f64 {
    let (ox, oy) = patch_origin(w, h, center);
    integral.count(ox, oy, ox + PATCH_SIZE, oy + PATCH_SIZE) as f64
        / (PATCH_SIZE * PATCH_SIZE) as f64
}

fn near_transition(integral: &Integral, gt: &Mask, (x, y): (usize, usize)) -> bool {
    let x0 = x.saturating_sub(EDGE_RADIUS);
    let y0 = y.saturating_sub(EDGE_RADIUS);
    let x1 = (x + EDGE_RADIUS + 1).min(gt.width());
    let y1 = (y + EDGE_RADIUS + 1).min(gt.height());
    let n = integral.count(x0, y0, x1, y1);
    n != 0 && n as usize != (x1 - x0) * (y1 - y0)
}

/// Whether a patch centered at `center` qualifies for `class`.
pub fn qualifies(gt: &Mask, center: (usize, usize), class: PatchClass) -> bool {
    let integral = Integral::new(gt);
    qualifies_with(&integral, gt, center, class)
}

fn qualifies_with(
    integral: &Integral,
    gt: &Mask,
    center: (usize, usize),
    class: PatchClass,
) -> bool {
    let (w, h) = (gt.width(), gt.height());
    match class {
        PatchClass::Shadow => {
            gt.get(center.0, center.1)
                && patch_fraction(integral, w, h, center) >= SHADOW_MIN_FRACTION
        }
        PatchClass::NonShadow => {
            !gt.get(center.0, center.1)
                && patch_fraction(integral, w, h, center) <= NONSHADOW_MAX_FRACTION
        }
        PatchClass::ShadowEdge => near_transition(integral, gt, center),
    }
}

/// Draws up to `per_class` patches of each class from one image, uniformly
/// among qualifying centers. Classes are not balanced here; see
/// [`balance_classes`].
pub fn sample_patches(
    img: &RgbImage,
    prior: &Raster<f64>,
    gt: &Mask,
    per_class: usize,
    seed: u64,
) -> Result<Vec<TrainingPatch>> {
    if per_class == 0 {
        return Err(Error::InvalidArgument(
            "per_class must be at least 1".into(),
        ));
    }
    img.check_size(prior)?;
    gt.check_size(img.width(), img.height())?;
    let (w, h) = (gt.width(), gt.height());
    if w < PATCH_SIZE || h < PATCH_SIZE {
        return Err(Error::InvalidArgument(format!(
            "image {w}x{h} is smaller than a patch"
        )));
    }
    let integral = Integral::new(gt);
    let mut candidates: [Vec<(usize, usize)>; 3] = Default::default();
    for y in 0..h {
        for x in 0..w {
            for (k, &class) in PatchClass::ALL.iter().enumerate() {
                if qualifies_with(&integral, gt, (x, y), class) {
                    candidates[k].push((x, y));
                }
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (k, &class) in PatchClass::ALL.iter().enumerate() {
        let pool = &candidates[k];
        for i in index::sample(&mut rng, pool.len(), per_class.min(pool.len())) {
            let center = pool[i];
            let patch = extract_patch(img, prior, center)?;
            let (ox, oy) = patch.origin;
            let mut target = Vec::with_capacity(PATCH_SIZE * PATCH_SIZE);
            for y in 0..PATCH_SIZE {
                for x in 0..PATCH_SIZE {
                    target.push(if gt.get(ox + x, oy + y) { 1.0 } else { 0.0 });
                }
            }
            out.push(TrainingPatch {
                patch,
                target,
                class,
                center,
            });
        }
    }
    Ok(out)
}

/// Trims every class to the size of the smallest one, keeping a seeded
/// random subset in original order.
pub fn balance_classes(patches: Vec<TrainingPatch>, seed: u64) -> Result<Vec<TrainingPatch>> {
    let counts = PatchClass::ALL.map(|c| patches.iter().filter(|p| p.class == c).count());
    let keep = *counts.iter().min().expect("three classes");
    if keep == 0 {
        let missing = PatchClass::ALL[counts.iter().position(|&c| c == 0).expect("an empty class")];
        return Err(Error::Dataset(format!(
            "no training patches of class {missing:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut selected = vec![false; patches.len()];
    for (k, &class) in PatchClass::ALL.iter().enumerate() {
        let members: Vec<usize> = patches
            .iter()
            .enumerate()
            .filter(|(_, p)| p.class == class)
            .map(|(i, _)| i)
            .collect();
        for i in index::sample(&mut rng, counts[k], keep) {
            selected[members[i]] = true;
        }
    }
    Ok(patches
        .into_iter()
        .zip(selected)
        .filter(|(_, s)| *s)
        .map(|(p, _)| p)
        .collect())
}
