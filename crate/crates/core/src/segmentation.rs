//! Mean-shift superpixels and region geometry.
//!
//! Segmentation runs in three passes over a CIELAB raster:
//!
//! 1. Joint spatial-range mean-shift filtering with flat kernels. Each pixel
//!    starts at `(x, y, L, a, b)` and moves to the mean of the pixels inside
//!    its spatial window whose color lies within the range bandwidth, until the
//!    joint displacement drops below [`CONVERGENCE_TOL`] or
//!    [`MAX_ITERATIONS`] is reached. A pixel's mode depends only on the input.
//! 2. 4-connected clustering: neighbors join when their modes are closer than
//!    the spatial bandwidth in position and the range bandwidth in color.
//! 3. Regions below `min_region_size` are folded, smallest first, into the
//!    adjacent region whose mean Lab color is nearest.
//!
//! Region ids are assigned in row-major order of first appearance.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap};

use crate::error::{Error, Result};
use crate::imageio::{encode_gray16, Raster};

pub const MAX_ITERATIONS: usize = 50;
pub const CONVERGENCE_TOL: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanShiftParams {
    /// Spatial bandwidth in pixels.
    pub spatial_bandwidth: f64,
    /// Range bandwidth in Lab units.
    pub range_bandwidth: f64,
    pub min_region_size: usize,
}

impl Default for MeanShiftParams {
    fn default() -> Self {
        MeanShiftParams {
            spatial_bandwidth: 8.0,
            range_bandwidth: 8.0,
            min_region_size: 100,
        }
    }
}

impl MeanShiftParams {
    pub fn validate(&self) -> Result<()> {
        let ok = self.spatial_bandwidth > 0.0
            && self.spatial_bandwidth.is_finite()
            && self.range_bandwidth > 0.0
            && self.range_bandwidth.is_finite()
            && self.min_region_size > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "mean-shift parameters must be positive: {self:?}"
            )))
        }
    }
}

/// A partition of the image into `m` labeled regions.
#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    width: usize,
    height: usize,
    labels: Vec<u32>,
    regions: Vec<Vec<usize>>,
    centroids: Vec<(usize, usize)>,
    boundary: Vec<Vec<usize>>,
}

impl Segmentation {
    /// Builds the region tables from a dense label map, where every id in
    /// `0..m` must occur at least once.
    pub fn from_labels(width: usize, height: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != width * height || labels.is_empty() {
            return Err(Error::dims(width * height, labels.len()));
        }
        let m = *labels.iter().max().expect("non-empty") as usize + 1;
        let mut regions = vec![Vec::new(); m];
        for (idx, &l) in labels.iter().enumerate() {
            regions[l as usize].push(idx);
        }
        if let Some(missing) = regions.iter().position(|r| r.is_empty()) {
            return Err(Error::InvalidArgument(format!(
                "label {missing} is unused; labels must be dense in 0..{m}"
            )));
        }
        let mut seg = Segmentation {
            width,
            height,
            labels,
            regions,
            centroids: Vec::new(),
            boundary: Vec::new(),
        };
        seg.boundary = compute_boundary_pixels(&seg);
        seg.centroids = (0..m)
            .map(|i| region_centroid(&seg, i).expect("region id in range"))
            .collect();
        Ok(seg)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn region_count(&self) -> usize {
        self.regions.len()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    #[inline]
    pub fn label(&self, x: usize, y: usize) -> usize {
        self.labels[y * self.width + x] as usize
    }

    /// Linear pixel indices of region `i`, ascending.
    pub fn region(&self, i: usize) -> &[usize] {
        &self.regions[i]
    }

    pub fn regions(&self) -> &[Vec<usize>] {
        &self.regions
    }

    pub fn centroid(&self, i: usize) -> (usize, usize) {
        self.centroids[i]
    }

    pub fn centroids(&self) -> &[(usize, usize)] {
        &self.centroids
    }

    /// Boundary pixels of region `i`, ascending linear index.
    pub fn boundary_pixels(&self, i: usize) -> &[usize] {
        &self.boundary[i]
    }

    pub fn total_boundary_pixels(&self) -> usize {
        self.boundary.iter().map(Vec::len).sum()
    }

    /// 16-bit grayscale PNG of the label map, for inspection.
    pub fn label_map_png(&self) -> Result<Vec<u8>> {
        let values: Vec<u16> = self
            .labels
            .iter()
            .map(|&l| l.min(u16::MAX as u32) as u16)
            .collect();
        encode_gray16(self.width, self.height, &values)
    }
}

/// Pixels with at least one 4-neighbor in a different region, per region.
/// The image border by itself does not make a pixel a boundary pixel.
pub fn compute_boundary_pixels(seg: &Segmentation) -> Vec<Vec<usize>> {
    let (w, h) = (seg.width, seg.height);
    let mut out = vec![Vec::new(); seg.region_count()];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let l = seg.labels[idx];
            let differs = (x > 0 && seg.labels[idx - 1] != l)
                || (x + 1 < w && seg.labels[idx + 1] != l)
                || (y > 0 && seg.labels[idx - w] != l)
                || (y + 1 < h && seg.labels[idx + w] != l);
            if differs {
                out[l as usize].push(idx);
            }
        }
    }
    out
}

/// Interior representative of region `i`: the rounded coordinate mean
/// (halves round down), or the region pixel nearest that mean when the
/// rounded point falls outside the region. Ties go to the lowest pixel index.
pub fn region_centroid(seg: &Segmentation, i: usize) -> Result<(usize, usize)> {
    let pixels = seg.regions.get(i).ok_or_else(|| {
        Error::InvalidArgument(format!("region {i} out of range 0..{}", seg.region_count()))
    })?;
    let w = seg.width;
    let n = pixels.len() as f64;
    let (sx, sy) = pixels.iter().fold((0.0, 0.0), |(sx, sy), &p| {
        (sx + (p % w) as f64, sy + (p / w) as f64)
    });
    let (mx, my) = (sx / n, sy / n);
    let round_half_down = |v: f64| (v - 0.5).ceil().max(0.0) as usize;
    let (rx, ry) = (round_half_down(mx), round_half_down(my));
    if rx < w && ry < seg.height && seg.labels[ry * w + rx] as usize == i {
        return Ok((rx, ry));
    }
    let mut best = pixels[0];
    let mut best_d = f64::INFINITY;
    for &p in pixels {
        let dx = (p % w) as f64 - mx;
        let dy = (p / w) as f64 - my;
        let d = dx * dx + dy * dy;
        if d < best_d {
            best_d = d;
            best = p;
        }
    }
    Ok((best % w, best / w))
}

/// Converged mean-shift mode for every pixel: `[x, y, L, a, b]`.
pub fn mean_shift_filter(lab: &Raster<f64>, params: &MeanShiftParams) -> Vec<[f64; 5]> {
    let (w, h) = (lab.width(), lab.height());
    let hs = params.spatial_bandwidth;
    let hs2 = hs * hs;
    let hr2 = params.range_bandwidth * params.range_bandwidth;
    let radius = hs.floor() as isize;
    let tol2 = CONVERGENCE_TOL * CONVERGENCE_TOL;
    let data = lab.data();

    let mut modes = Vec::with_capacity(w * h);
    for py in 0..h {
        for px in 0..w {
            let c = lab.pixel(py * w + px);
            let mut cur = [px as f64, py as f64, c[0], c[1], c[2]];
            for _ in 0..MAX_ITERATIONS {
                let cx = cur[0].round() as isize;
                let cy = cur[1].round() as isize;
                let x0 = (cx - radius).max(0) as usize;
                let x1 = ((cx + radius).min(w as isize - 1)).max(0) as usize;
                let y0 = (cy - radius).max(0) as usize;
                let y1 = ((cy + radius).min(h as isize - 1)).max(0) as usize;
                let mut acc = [0.0f64; 5];
                let mut count = 0usize;
                for y in y0..=y1 {
                    let dy = y as f64 - cur[1];
                    let dy2 = dy * dy;
                    if dy2 >= hs2 {
                        continue;
                    }
                    let row = &data[y * w * 3..(y + 1) * w * 3];
                    for x in x0..=x1 {
                        let dx = x as f64 - cur[0];
                        if dx * dx + dy2 >= hs2 {
                            continue;
                        }
                        let q = &row[x * 3..x * 3 + 3];
                        let dl = q[0] - cur[2];
                        let da = q[1] - cur[3];
                        let db = q[2] - cur[4];
                        if dl * dl + da * da + db * db >= hr2 {
                            continue;
                        }
                        acc[0] += x as f64;
                        acc[1] += y as f64;
                        acc[2] += q[0];
                        acc[3] += q[1];
                        acc[4] += q[2];
                        count += 1;
                    }
                }
                if count == 0 {
                    break;
                }
                let inv = 1.0 / count as f64;
                let mut shift2 = 0.0;
                for k in 0..5 {
                    let next = acc[k] * inv;
                    shift2 += (next - cur[k]) * (next - cur[k]);
                    cur[k] = next;
                }
                if shift2 < tol2 {
                    break;
                }
            }
            modes.push(cur);
        }
    }
    modes
}

struct DisjointSet {
    parent: Vec<usize>,
}

impl DisjointSet {
    fn new(n: usize) -> Self {
        DisjointSet {
            parent: (0..n).collect(),
        }
    }

    fn find(&mut self, mut a: usize) -> usize {
        while self.parent[a] != a {
            self.parent[a] = self.parent[self.parent[a]];
            a = self.parent[a];
        }
        a
    }

    /// Joins the sets, keeping the smaller root id.
    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi] = lo;
        }
    }
}

/// Runs filtering, mode clustering and small-region merging.
pub fn mean_shift_segment(lab: &Raster<f64>, params: &MeanShiftParams) -> Result<Segmentation> {
    params.validate()?;
    if lab.channels() != 3 {
        return Err(Error::dims("3-channel Lab raster", lab.channels()));
    }
    let (w, h) = (lab.width(), lab.height());
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("empty image".into()));
    }
    let modes = mean_shift_filter(lab, params);

    let hs2 = params.spatial_bandwidth * params.spatial_bandwidth;
    let hr2 = params.range_bandwidth * params.range_bandwidth;
    let close = |a: &[f64; 5], b: &[f64; 5]| {
        let ds = (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2);
        let dr = (a[2] - b[2]).powi(2) + (a[3] - b[3]).powi(2) + (a[4] - b[4]).powi(2);
        ds < hs2 && dr < hr2
    };
    let mut dsu = DisjointSet::new(w * h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w && close(&modes[i], &modes[i + 1]) {
                dsu.union(i, i + 1);
            }
            if y + 1 < h && close(&modes[i], &modes[i + w]) {
                dsu.union(i, i + w);
            }
        }
    }
    let comp: Vec<usize> = (0..w * h).map(|i| dsu.find(i)).collect();
    let merged = merge_small_regions(lab, &comp, params.min_region_size);
    Segmentation::from_labels(w, h, compact_labels(&merged))
}

/// Folds regions smaller than `min_size` into their nearest-colored neighbor.
/// `comp` maps each pixel to a representative id; the result does the same.
fn merge_small_regions(lab: &Raster<f64>, comp: &[usize], min_size: usize) -> Vec<usize> {
    let (w, h) = (lab.width(), lab.height());
    let n = comp.len();
    let mut size = vec![0usize; n];
    let mut sum = vec![[0.0f64; 3]; n];
    for (i, &c) in comp.iter().enumerate() {
        size[c] += 1;
        let p = lab.pixel(i);
        for k in 0..3 {
            sum[c][k] += p[k];
        }
    }
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            for j in [(x + 1 < w).then(|| i + 1), (y + 1 < h).then(|| i + w)]
                .into_iter()
                .flatten()
            {
                let (a, b) = (comp[i], comp[j]);
                if a != b {
                    adj[a].insert(b);
                    adj[b].insert(a);
                }
            }
        }
    }
    let mut roots = size.iter().filter(|&&s| s > 0).count();
    let mut dsu = DisjointSet::new(n);
    let mut heap: BinaryHeap<Reverse<(usize, usize)>> = (0..n)
        .filter(|&r| size[r] > 0 && size[r] < min_size)
        .map(|r| Reverse((size[r], r)))
        .collect();

    while let Some(Reverse((s, r))) = heap.pop() {
        if roots <= 1 {
            break;
        }
        if dsu.parent[r] != r || size[r] != s || s >= min_size {
            continue;
        }
        let mean = |id: usize| sum[id].map(|v| v / size[id] as f64);
        let mine = mean(r);
        let target = adj[r]
            .iter()
            .copied()
            .map(|nb| {
                let m = mean(nb);
                let d: f64 = (0..3).map(|k| (m[k] - mine[k]).powi(2)).sum();
                (d, nb)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)))
            .map(|(_, nb)| nb);
        let Some(target) = target else { continue };

        dsu.parent[r] = target;
        size[target] += size[r];
        for k in 0..3 {
            sum[target][k] += sum[r][k];
        }
        let neighbors = std::mem::take(&mut adj[r]);
        for nb in neighbors {
            adj[nb].remove(&r);
            if nb != target {
                adj[nb].insert(target);
                adj[target].insert(nb);
            }
        }
        roots -= 1;
        if size[target] < min_size {
            heap.push(Reverse((size[target], target)));
        }
    }
    comp.iter().map(|&c| dsu.find(c)).collect()
}

/// Renumbers arbitrary ids to `0..m` in order of first appearance.
fn compact_labels(ids: &[usize]) -> Vec<u32> {
    let mut map = std::collections::HashMap::new();
    ids.iter()
        .map(|id| {
            let next = map.len() as u32;
            *map.entry(*id).or_insert(next)
        })
        .collect()
}
