//! Region-level shadow classifier and the per-pixel shadow prior.
//!
//! A binary soft-margin SVM with the χ² kernel is trained on region features
//! by SMO (maximal-violating-pair working set, LIBSVM-style two-variable
//! update). Decision values are mapped to probabilities with Platt scaling
//! fitted on 3-fold out-of-fold decision values. The prior map writes each
//! region's probability to all of its pixels.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::container::{Container, Metadata};
use crate::error::{Error, Result};
use crate::features::{
    chi2_distance, mean_distance_gamma, region_features, FilterBank, FilterKind, FilterSpec,
    RegionFeature, TextonDictionary,
};
use crate::imageio::{rgb_to_lab, Mask, Raster, RgbImage};
use crate::segmentation::Segmentation;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RegionLabel {
    pub region: usize,
    pub shadow: bool,
    pub shadow_fraction: f64,
}

/// Majority label per region; a fraction of exactly one half is non-shadow.
pub fn label_regions(seg: &Segmentation, gt: &Mask) -> Result<Vec<RegionLabel>> {
    gt.check_size(seg.width(), seg.height())?;
    Ok(seg
        .regions()
        .iter()
        .enumerate()
        .map(|(region, pixels)| {
            let shadow = pixels.iter().filter(|&&p| gt.data()[p]).count();
            let shadow_fraction = shadow as f64 / pixels.len() as f64;
            RegionLabel {
                region,
                shadow: shadow_fraction > 0.5,
                shadow_fraction,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvmParams {
    /// Box constraint.
    pub c: f64,
    /// Stopping tolerance on the maximal KKT violation.
    pub tolerance: f64,
    pub max_pair_updates: usize,
    pub cv_folds: usize,
    pub seed: u64,
}

impl Default for SvmParams {
    fn default() -> Self {
        SvmParams {
            c: 1.0,
            tolerance: 1e-3,
            max_pair_updates: 1_000_000,
            cv_folds: 3,
            seed: 0,
        }
    }
}

impl SvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "SMO tolerance must be positive, got {}",
                self.tolerance
            )));
        }
        if self.max_pair_updates == 0 {
            return Err(Error::InvalidArgument(
                "SMO needs at least one pair update".into(),
            ));
        }
        if self.cv_folds < 2 {
            return Err(Error::InvalidArgument(format!(
                "calibration needs at least 2 folds, got {}",
                self.cv_folds
            )));
        }
        Ok(())
    }
}

/// Solution of `min ½ αᵀQα − Σα` s.t. `0 ≤ α ≤ C`, `yᵀα = 0`, with
/// `Q_ij = y_i y_j K_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolution {
    pub alpha: Vec<f64>,
    /// Offset of the decision function, `f(x) = Σ α_i y_i K(x_i, x) + bias`.
    pub bias: f64,
    /// Value of the minimized dual objective.
    pub objective: f64,
    pub iterations: usize,
    /// Maximal KKT violation `m(α) − M(α)` at exit.
    pub violation: f64,
}

/// Solves the SVM dual over a precomputed row-major `n × n` kernel matrix.
/// Labels are `true` for the positive (shadow) class.
pub fn solve_dual(
    kernel: &[f64],
    labels: &[bool],
    c: f64,
    tolerance: f64,
    max_pair_updates: usize,
) -> Result<DualSolution> {
    let n = labels.len();
    if kernel.len() != n * n {
        return Err(Error::dims(n * n, kernel.len()));
    }
    if !(c > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "C must be positive, got {c}"
        )));
    }
    if !labels.iter().any(|&l| l) || labels.iter().all(|&l| l) {
        return Err(Error::SingleClass);
    }
    let y: Vec<f64> = labels.iter().map(|&l| if l { 1.0 } else { -1.0 }).collect();
    let k = |i: usize, j: usize| kernel[i * n + j];
    let mut alpha = vec![0.0; n];
    let mut grad = vec![-1.0; n];
    let is_up = |a: f64, yt: f64| (yt > 0.0 && a < c) || (yt < 0.0 && a > 0.0);
    let is_low = |a: f64, yt: f64| (yt > 0.0 && a > 0.0) || (yt < 0.0 && a < c);

    let mut iterations = 0;
    let violation = loop {
        let mut i = usize::MAX;
        let mut gmax = f64::NEG_INFINITY;
        let mut j = usize::MAX;
        let mut gmin = f64::INFINITY;
        for t in 0..n {
            let v = -y[t] * grad[t];
            if is_up(alpha[t], y[t]) && v > gmax {
                gmax = v;
                i = t;
            }
            if is_low(alpha[t], y[t]) && v < gmin {
                gmin = v;
                j = t;
            }
        }
        let violation = gmax - gmin;
        if i == usize::MAX || j == usize::MAX || violation < tolerance {
            break violation.max(0.0);
        }
        if iterations >= max_pair_updates {
            return Err(Error::NotConverged {
                iterations,
                violation,
            });
        }
        iterations += 1;

        let (old_i, old_j) = (alpha[i], alpha[j]);
        let kij = k(i, j);
        let mut quad = k(i, i) + k(j, j) - 2.0 * kij;
        if quad <= 0.0 {
            quad = 1e-12;
        }
        if y[i] != y[j] {
            let delta = (-grad[i] - grad[j]) / quad;
            let diff = alpha[i] - alpha[j];
            alpha[i] += delta;
            alpha[j] += delta;
            if diff > 0.0 {
                if alpha[j] < 0.0 {
                    alpha[j] = 0.0;
                    alpha[i] = diff;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = -diff;
            }
            if diff > 0.0 {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = c - diff;
                }
            } else if alpha[j] > c {
                alpha[j] = c;
                alpha[i] = c + diff;
            }
        } else {
            let delta = (grad[i] - grad[j]) / quad;
            let sum = alpha[i] + alpha[j];
            alpha[i] -= delta;
            alpha[j] += delta;
            if sum > c {
                if alpha[i] > c {
                    alpha[i] = c;
                    alpha[j] = sum - c;
                }
            } else if alpha[j] < 0.0 {
                alpha[j] = 0.0;
                alpha[i] = sum;
            }
            if sum > c {
                if alpha[j] > c {
                    alpha[j] = c;
                    alpha[i] = sum - c;
                }
            } else if alpha[i] < 0.0 {
                alpha[i] = 0.0;
                alpha[j] = sum;
            }
        }
        let (di, dj) = (alpha[i] - old_i, alpha[j] - old_j);
        for t in 0..n {
            grad[t] += y[t] * (y[i] * k(t, i) * di + y[j] * k(t, j) * dj);
        }
    };

    // offset from free vectors, or the midpoint of the feasible interval
    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free, mut sum) = (0usize, 0.0);
    for t in 0..n {
        let yg = y[t] * grad[t];
        if alpha[t] >= c {
            if y[t] < 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else if alpha[t] <= 0.0 {
            if y[t] > 0.0 {
                ub = ub.min(yg);
            } else {
                lb = lb.max(yg);
            }
        } else {
            free += 1;
            sum += yg;
        }
    }
    let rho = if free > 0 {
        sum / free as f64
    } else {
        (ub + lb) / 2.0
    };
    let objective = 0.5
        * alpha
            .iter()
            .zip(&grad)
            .map(|(a, g)| a * (g - 1.0))
            .sum::<f64>();
    Ok(DualSolution {
        alpha,
        bias: -rho,
        objective,
        iterations,
        violation,
    })
}

/// Kernel expansion over the support vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmClassifier {
    pub support_vectors: Vec<Vec<f64>>,
    /// Signed coefficients `α_i y_i`.
    pub coefficients: Vec<f64>,
    pub bias: f64,
    pub gamma: f64,
}

impl SvmClassifier {
    pub fn dimension(&self) -> usize {
        self.support_vectors.first().map_or(0, Vec::len)
    }

    pub fn decision(&self, f: &[f64]) -> Result<f64> {
        if f.len() != self.dimension() {
            return Err(Error::dims(self.dimension(), f.len()));
        }
        Ok(self.decision_unchecked(f))
    }

    fn decision_unchecked(&self, f: &[f64]) -> f64 {
        let mut acc = 0.0;
        for (sv, coef) in self.support_vectors.iter().zip(&self.coefficients) {
            acc += coef * (-self.gamma * chi2_distance(sv, f)).exp();
        }
        acc + self.bias
    }
}

fn gram_matrix(x: &[Vec<f64>], gamma: f64) -> Vec<f64> {
    let n = x.len();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        k[i * n + i] = 1.0;
        for j in 0..i {
            let v = (-gamma * chi2_distance(&x[i], &x[j])).exp();
            k[i * n + j] = v;
            k[j * n + i] = v;
        }
    }
    k
}

/// Trains the χ² SVM on raw vectors with a given kernel width.
pub fn train_classifier(
    x: &[Vec<f64>],
    labels: &[bool],
    gamma: f64,
    params: &SvmParams,
) -> Result<(SvmClassifier, DualSolution)> {
    if x.len() != labels.len() {
        return Err(Error::dims(x.len(), labels.len()));
    }
    if let Some(d) = x.first().map(Vec::len) {
        if x.iter().any(|v| v.len() != d) {
            return Err(Error::InvalidArgument(
                "feature vectors differ in length".into(),
            ));
        }
    }
    if x.iter().flatten().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(Error::InvalidArgument(
            "features must be finite and non-negative".into(),
        ));
    }
    let kernel = gram_matrix(x, gamma);
    let sol = solve_dual(
        &kernel,
        labels,
        params.c,
        params.tolerance,
        params.max_pair_updates,
    )?;
    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (t, &a) in sol.alpha.iter().enumerate() {
        if a > 0.0 {
            support_vectors.push(x[t].clone());
            coefficients.push(if labels[t] { a } else { -a });
        }
    }
    let clf = SvmClassifier {
        support_vectors,
        coefficients,
        bias: sol.bias,
        gamma,
    };
    Ok((clf, sol))
}

/// Logistic calibration `P(shadow | f) = 1 / (1 + exp(A f + B))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Platt {
    pub a: f64,
    pub b: f64,
}

impl Platt {
    pub fn probability(&self, decision: f64) -> f64 {
        let z = self.a * decision + self.b;
        if z >= 0.0 {
            let e = (-z).exp();
            e / (1.0 + e)
        } else {
            1.0 / (1.0 + z.exp())
        }
    }

    /// Newton fit with backtracking on regularized targets.
    pub fn fit(decisions: &[f64], labels: &[bool]) -> Platt {
        let prior1 = labels.iter().filter(|&&l| l).count() as f64;
        let prior0 = labels.len() as f64 - prior1;
        let hi = (prior1 + 1.0) / (prior1 + 2.0);
        let lo = 1.0 / (prior0 + 2.0);
        let targets: Vec<f64> = labels.iter().map(|&l| if l { hi } else { lo }).collect();
        let objective = |a: f64, b: f64| -> f64 {
            decisions
                .iter()
                .zip(&targets)
                .map(|(&f, &t)| {
                    let z = f * a + b;
                    if z >= 0.0 {
                        t * z + (-z).exp().ln_1p()
                    } else {
                        (t - 1.0) * z + z.exp().ln_1p()
                    }
                })
                .sum()
        };
        let (mut a, mut b) = (0.0, ((prior0 + 1.0) / (prior1 + 1.0)).ln());
        let mut fval = objective(a, b);
        const SIGMA: f64 = 1e-12;
        for _ in 0..100 {
            let (mut h11, mut h22, mut h21, mut g1, mut g2) = (SIGMA, SIGMA, 0.0, 0.0, 0.0);
            for (&f, &t) in decisions.iter().zip(&targets) {
                let z = f * a + b;
                let (p, q) = if z >= 0.0 {
                    let e = (-z).exp();
                    (e / (1.0 + e), 1.0 / (1.0 + e))
                } else {
                    let e = z.exp();
                    (1.0 / (1.0 + e), e / (1.0 + e))
                };
                let d2 = p * q;
                h11 += f * f * d2;
                h22 += d2;
                h21 += f * d2;
                let d1 = t - p;
                g1 += f * d1;
                g2 += d1;
            }
            if g1.abs() < 1e-5 && g2.abs() < 1e-5 {
                break;
            }
            let det = h11 * h22 - h21 * h21;
            let da = -(h22 * g1 - h21 * g2) / det;
            let db = -(-h21 * g1 + h11 * g2) / det;
            let gd = g1 * da + g2 * db;
            let mut step = 1.0;
            while step >= 1e-10 {
                let (na, nb) = (a + step * da, b + step * db);
                let nf = objective(na, nb);
                if nf < fval + 1e-4 * step * gd {
                    a = na;
                    b = nb;
                    fval = nf;
                    break;
                }
                step /= 2.0;
            }
            if step < 1e-10 {
                break;
            }
        }
        Platt { a, b }
    }
}

/// Decision values for every sample from models that did not see it.
fn out_of_fold_decisions(
    x: &[Vec<f64>],
    labels: &[bool],
    gamma: f64,
    params: &SvmParams,
    full: &SvmClassifier,
) -> Result<Vec<f64>> {
    let n = x.len();
    let folds = params.cv_folds.clamp(2, n.max(2));
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(params.seed));
    let mut fold_of = vec![0; n];
    for (pos, &i) in order.iter().enumerate() {
        fold_of[i] = pos % folds;
    }
    let mut out = vec![0.0; n];
    for fold in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != fold).collect();
        let tx: Vec<Vec<f64>> = train.iter().map(|&i| x[i].clone()).collect();
        let ty: Vec<bool> = train.iter().map(|&i| labels[i]).collect();
        let model = match train_classifier(&tx, &ty, gamma, params) {
            Ok((m, _)) => Some(m),
            Err(Error::SingleClass) => None,
            Err(e) => return Err(e),
        };
        for i in (0..n).filter(|&i| fold_of[i] == fold) {
            out[i] = match &model {
                Some(m) => m.decision_unchecked(&x[i]),
                None => full.decision_unchecked(&x[i]),
            };
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainingMeta {
    pub seed: u64,
    pub dataset_fingerprint: String,
}

/// Trained region classifier plus everything needed to rebuild its features.
#[derive(Debug, Clone, PartialEq)]
pub struct SvmModel {
    pub classifier: SvmClassifier,
    pub platt: Platt,
    pub c: f64,
    pub dictionary: TextonDictionary,
    pub meta: TrainingMeta,
}

pub fn train_svm(
    features: &[RegionFeature],
    labels: &[RegionLabel],
    dictionary: TextonDictionary,
    params: &SvmParams,
) -> Result<SvmModel> {
    if features.len() != labels.len() {
        return Err(Error::dims(features.len(), labels.len()));
    }
    let x: Vec<Vec<f64>> = features.iter().map(|f| f.combined.clone()).collect();
    let y: Vec<bool> = labels.iter().map(|l| l.shadow).collect();
    let gamma = mean_distance_gamma(&x);
    let (classifier, _) = train_classifier(&x, &y, gamma, params)?;
    let oof = out_of_fold_decisions(&x, &y, gamma, params, &classifier)?;
    let platt = Platt::fit(&oof, &y);
    Ok(SvmModel {
        classifier,
        platt,
        c: params.c,
        dictionary,
        meta: TrainingMeta {
            seed: params.seed,
            dataset_fingerprint: String::new(),
        },
    })
}

pub fn svm_decision(model: &SvmModel, f: &[f64]) -> Result<f64> {
    model.classifier.decision(f)
}

/// Per-pixel prior with the per-region values it was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct ShadowPrior {
    /// One channel, constant within each region.
    pub map: Raster<f64>,
    pub probabilities: Vec<f64>,
    pub decisions: Vec<f64>,
}

/// Prior map from an already converted Lab image.
pub fn shadow_prior_lab(
    model: &SvmModel,
    lab: &Raster<f64>,
    seg: &Segmentation,
) -> Result<ShadowPrior> {
    let features = region_features(lab, seg, &model.dictionary)?;
    let decisions = features
        .iter()
        .map(|f| model.classifier.decision(&f.combined))
        .collect::<Result<Vec<_>>>()?;
    let probabilities: Vec<f64> = decisions
        .iter()
        .map(|&d| model.platt.probability(d))
        .collect();
    let mut map = Raster::new(seg.width(), seg.height(), 1);
    let data = map.data_mut();
    for (pixels, &p) in seg.regions().iter().zip(&probabilities) {
        for &px in pixels {
            data[px] = p;
        }
    }
    Ok(ShadowPrior {
        map,
        probabilities,
        decisions,
    })
}

pub fn shadow_prior(model: &SvmModel, img: &RgbImage, seg: &Segmentation) -> Result<ShadowPrior> {
    shadow_prior_lab(model, &rgb_to_lab(img), seg)
}

// ---------------------------------------------------------------------------
// Serialization

fn filter_kind_code(kind: FilterKind) -> f64 {
    match kind {
        FilterKind::Gaussian => 0.0,
        FilterKind::LaplacianOfGaussian => 1.0,
        FilterKind::GaussianDx => 2.0,
        FilterKind::GaussianDy => 3.0,
    }
}

fn filter_kind_from_code(code: f64) -> Result<FilterKind> {
    Ok(match code as i64 {
        0 => FilterKind::Gaussian,
        1 => FilterKind::LaplacianOfGaussian,
        2 => FilterKind::GaussianDx,
        3 => FilterKind::GaussianDy,
        _ => return Err(Error::Format(format!("unknown filter kind {code}"))),
    })
}

impl SvmModel {
    pub fn to_container(&self) -> Container {
        let clf = &self.classifier;
        let dim = clf.dimension();
        let k = self.dictionary.len();
        let nf = self.dictionary.bank.len();
        let meta = Metadata::new()
            .with("kind", "svm")
            .with("support_vectors", clf.support_vectors.len())
            .with("dimension", dim)
            .with("textons", k)
            .with("filters", nf)
            .with("filter_bank_version", self.dictionary.bank.version)
            .with("seed", self.meta.seed)
            .with("gamma", clf.gamma)
            .with("c", self.c)
            .with("dataset", &self.meta.dataset_fingerprint);
        let mut c = Container::new();
        c.push_meta(&meta);
        let sv: Vec<f64> = clf.support_vectors.iter().flatten().copied().collect();
        c.push_f64s(*b"SVEC", &sv);
        c.push_f64s(*b"COEF", &clf.coefficients);
        c.push_f64s(
            *b"PARM",
            &[clf.bias, clf.gamma, self.platt.a, self.platt.b, self.c],
        );
        let bank: Vec<f64> = self
            .dictionary
            .bank
            .filters
            .iter()
            .flat_map(|f| [filter_kind_code(f.kind), f.channel as f64, f.sigma])
            .collect();
        c.push_f64s(*b"FBNK", &bank);
        let centers: Vec<f64> = self.dictionary.centers.iter().flatten().copied().collect();
        c.push_f64s(*b"TXTN", &centers);
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.meta()?;
        if meta.require("kind")? != "svm" {
            return Err(Error::Format("not an SVM model".into()));
        }
        let n_sv: usize = meta.parse_value("support_vectors")?;
        let dim: usize = meta.parse_value("dimension")?;
        let k: usize = meta.parse_value("textons")?;
        let nf: usize = meta.parse_value("filters")?;
        let version: u32 = meta.parse_value("filter_bank_version")?;
        if n_sv == 0 {
            return Err(Error::Format("model has no support vectors".into()));
        }
        let sv = c.f64s_exact(b"SVEC", n_sv * dim)?;
        let coefficients = c.f64s_exact(b"COEF", n_sv)?;
        let parm = c.f64s_exact(b"PARM", 5)?;
        let bank_raw = c.f64s_exact(b"FBNK", nf * 3)?;
        let centers = c.f64s_exact(b"TXTN", k * nf)?;
        let filters = bank_raw
            .chunks_exact(3)
            .map(|f| {
                Ok(FilterSpec {
                    kind: filter_kind_from_code(f[0])?,
                    channel: f[1] as usize,
                    sigma: f[2],
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let bank = FilterBank { version, filters };
        if bank != FilterBank::standard() {
            return Err(Error::Format(
                "texton dictionary was built with a different filter bank".into(),
            ));
        }
        if dim != crate::features::COLOR_BINS + k {
            return Err(Error::Format(format!(
                "feature dimension {dim} does not match {k} textons"
            )));
        }
        Ok(SvmModel {
            classifier: SvmClassifier {
                support_vectors: sv.chunks_exact(dim.max(1)).map(<[f64]>::to_vec).collect(),
                coefficients,
                bias: parm[0],
                gamma: parm[1],
            },
            platt: Platt {
                a: parm[2],
                b: parm[3],
            },
            c: parm[4],
            dictionary: TextonDictionary {
                bank,
                centers: centers.chunks_exact(nf).map(<[f64]>::to_vec).collect(),
            },
            meta: TrainingMeta {
                seed: meta.parse_value("seed")?,
                dataset_fingerprint: meta.require("dataset")?.to_string(),
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
