//! Patch-level CNN: a 32×32 RGB + prior patch in, a 32×32 shadow
//! probability map out.
//!
//! Training and gradient checking run in `f64`; [`InferenceNet`] holds an
//! `f32` copy of the weights for detection.

mod linalg;
mod net;
mod sampling;
mod train;

use std::cell::RefCell;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub use net::{Architecture, CONV_LAYERS, OUTPUTS, STANDARD_WIDTHS};
pub use sampling::{
    balance_classes, qualifies, sample_patches, PatchClass, TrainingPatch, EDGE_RADIUS,
    NONSHADOW_MAX_FRACTION, SHADOW_MIN_FRACTION,
};
pub use train::{train_cnn, train_cnn_with, Schedule};

use crate::container::{Container, Metadata};
use crate::error::{Error, Result};
use crate::imageio::Patch;

const INIT_GAIN: f64 = 4.0;

/// Probability clamp used by [`loss`].
pub const LOSS_EPSILON: f64 = 1e-7;
/// Finite-difference step used by [`gradient_check`].
pub const GRADIENT_CHECK_STEP: f64 = 1e-3;
/// Gradient magnitude below which [`gradient_check`] compares absolutely;
/// sits above the round-off noise of the difference quotient.
pub const GRADIENT_CHECK_FLOOR: f64 = 1e-7;

/// Per-pixel shadow probabilities of one patch, row-major 32×32.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchPrediction {
    pub probs: Vec<f64>,
}

/// Logistic function kept strictly inside `(0, 1)`.
pub fn sigmoid(z: f64) -> f64 {
    (1.0 / (1.0 + (-z).exp())).clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Mean binary cross-entropy over the 1024 pixels.
pub fn loss(pred: &PatchPrediction, target: &[f64]) -> Result<f64> {
    if pred.probs.len() != OUTPUTS || target.len() != OUTPUTS {
        return Err(Error::dims(
            OUTPUTS,
            if pred.probs.len() != OUTPUTS {
                pred.probs.len()
            } else {
                target.len()
            },
        ));
    }
    Ok(loss_unchecked(&pred.probs, target))
}

fn loss_unchecked(probs: &[f64], target: &[f64]) -> f64 {
    let sum: f64 = probs
        .iter()
        .zip(target)
        .map(|(&q, &t)| {
            let q = q.clamp(LOSS_EPSILON, 1.0 - LOSS_EPSILON);
            t * q.ln() + (1.0 - t) * (1.0 - q).ln()
        })
        .sum();
    -sum / OUTPUTS as f64
}

/// Gradient of [`loss`] with respect to one logit.
fn loss_logit_grad(q: f64, t: f64) -> f64 {
    if q <= LOSS_EPSILON || q >= 1.0 - LOSS_EPSILON {
        0.0
    } else {
        (q - t) / OUTPUTS as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CnnTrainingMeta {
    pub seed: u64,
    pub schedule: Schedule,
    pub final_loss: f64,
    pub dataset_fingerprint: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CnnModel {
    arch: Architecture,
    params: Vec<Vec<f64>>,
    pub meta: CnnTrainingMeta,
}

impl CnnModel {
    /// All parameters zero.
    pub fn zeros(arch: Architecture) -> Self {
        CnnModel {
            arch,
            params: arch
                .tensor_lens()
                .into_iter()
                .map(|n| vec![0.0; n])
                .collect(),
            meta: CnnTrainingMeta::default(),
        }
    }

    /// Fan-in scaled normal weights with std `2 / sqrt(fan_in)`, which keeps
    /// activation variance steady through the slope-½ shifted softplus;
    /// zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Self::zeros(arch);
        let fan_ins: Vec<usize> = (0..CONV_LAYERS)
            .map(|l| arch.conv_shape(l).0 * 9)
            .chain(std::iter::once(arch.fc_inputs()))
            .collect();
        for (k, &fan_in) in fan_ins.iter().enumerate() {
            let normal =
                Normal::new(0.0, (INIT_GAIN / fan_in as f64).sqrt()).expect("positive std");
            for w in model.params[2 * k].iter_mut() {
                *w = normal.sample(&mut rng);
            }
        }
        model.meta.seed = seed;
        model
    }

    /// Builds a model from explicit tensors in [`Architecture::tensor_lens`] order.
    pub fn from_params(arch: Architecture, params: Vec<Vec<f64>>) -> Result<Self> {
        let lens = arch.tensor_lens();
        if params.len() != lens.len() {
            return Err(Error::dims(lens.len(), params.len()));
        }
        for (p, &n) in params.iter().zip(&lens) {
            if p.len() != n {
                return Err(Error::dims(n, p.len()));
            }
        }
        if !params.iter().flatten().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite CNN parameter".into()));
        }
        Ok(CnnModel {
            arch,
            params,
            meta: CnnTrainingMeta::default(),
        })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[Vec<f64>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.params
    }

    pub fn conv_weights(&self, l: usize) -> &[f64] {
        &self.params[2 * l]
    }

    pub fn conv_bias(&self, l: usize) -> &[f64] {
        &self.params[2 * l + 1]
    }

    pub fn fc_weights(&self) -> &[f64] {
        &self.params[2 * CONV_LAYERS]
    }

    pub fn fc_bias(&self) -> &[f64] {
        &self.params[2 * CONV_LAYERS + 1]
    }

    pub fn fc_bias_mut(&mut self) -> &mut [f64] {
        &mut self.params[2 * CONV_LAYERS + 1]
    }

    pub fn logits_batch(&self, patches: &[&Patch]) -> Vec<f64> {
        let inputs: Vec<f64> = patches
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        let feats = TRAINING_SCRATCH.with_borrow_mut(|(_, scratch)| {
            net::trunk(
                &self.arch,
                &self.params,
                &inputs,
                patches.len(),
                None,
                scratch,
            )
        });
        net::fc(&self.arch, &self.params, &feats, patches.len())
    }

    pub fn forward_batch(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
        to_predictions(self.logits_batch(patches).into_iter())
    }

    /// Mean loss over the batch and its gradient for every tensor.
    pub fn loss_and_gradients(
        &self,
        patches: &[&Patch],
        targets: &[&[f64]],
    ) -> Result<(f64, Vec<Vec<f64>>)> {
        if patches.len() != targets.len() {
            return Err(Error::dims(patches.len(), targets.len()));
        }
        if let Some(t) = targets.iter().find(|t| t.len() != OUTPUTS) {
            return Err(Error::dims(OUTPUTS, t.len()));
        }
        let batch = patches.len();
        let inputs: Vec<f64> = patches
            .iter()
            .flat_map(|p| p.data().iter().copied())
            .collect();
        TRAINING_SCRATCH.with_borrow_mut(|(trace, scratch)| {
            let feats = net::trunk(
                &self.arch,
                &self.params,
                &inputs,
                batch,
                Some(&mut *trace),
                scratch,
            );
            let logits = net::fc(&self.arch, &self.params, &feats, batch);
            let mut total = 0.0;
            let mut dlogits = vec![0.0; logits.len()];
            for (b, target) in targets.iter().enumerate() {
                let rows = b * OUTPUTS..(b + 1) * OUTPUTS;
                let probs: Vec<f64> = logits[rows.clone()].iter().map(|&z| sigmoid(z)).collect();
                total += loss_unchecked(&probs, target);
                for ((d, &q), &t) in dlogits[rows].iter_mut().zip(&probs).zip(target.iter()) {
                    *d = loss_logit_grad(q, t) / batch as f64;
                }
            }
            let grads = net::backward(&self.arch, &self.params, trace, batch, &dlogits, scratch);
            Ok((total / batch as f64, grads))
        })
    }

    /// Loss of a single patch under the current parameters.
    pub fn patch_loss(&self, patch: &Patch, target: &[f64]) -> Result<f64> {
        loss(&forward(self, patch), target)
    }

    pub fn inference(&self) -> InferenceNet {
        InferenceNet::new(self)
    }

    pub fn to_container(&self) -> Container {
        let s = &self.meta.schedule;
        let widths: Vec<String> = self.arch.widths.iter().map(usize::to_string).collect();
        let meta = Metadata::new()
            .with("kind", "cnn")
            .with("architecture", self.arch.fingerprint())
            .with("widths", widths.join(","))
            .with("seed", self.meta.seed)
            .with("epochs", s.epochs)
            .with("batch_size", s.batch_size)
            .with("learning_rate", s.learning_rate)
            .with("momentum", s.momentum)
            .with("final_loss", self.meta.final_loss)
            .with("dataset", &self.meta.dataset_fingerprint);
        let mut c = Container::new();
        c.push_meta(&meta);
        for (k, tensor) in self.params.iter().enumerate() {
            c.push_f64s(tensor_tag(k), tensor);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta = c.meta()?;
        if meta.require("kind")? != "cnn" {
            return Err(Error::Format("not a CNN model".into()));
        }
        let widths: Vec<usize> = meta
            .require("widths")?
            .split(',')
            .map(|w| {
                w.parse()
                    .map_err(|_| Error::Format("malformed CNN widths".into()))
            })
            .collect::<Result<_>>()?;
        let widths: [usize; CONV_LAYERS] = widths
            .try_into()
            .map_err(|_| Error::Format("CNN model must list six convolution widths".into()))?;
        let arch = Architecture::new(widths).map_err(|e| Error::Format(e.to_string()))?;
        let stored = meta.require("architecture")?;
        if stored != arch.fingerprint() {
            return Err(Error::Format(format!(
                "architecture fingerprint mismatch: file has `{stored}`, expected `{}`",
                arch.fingerprint()
            )));
        }
        let params = arch
            .tensor_lens()
            .into_iter()
            .enumerate()
            .map(|(k, n)| c.f64s_exact(&tensor_tag(k), n))
            .collect::<Result<Vec<_>>>()?;
        let mut model =
            CnnModel::from_params(arch, params).map_err(|e| Error::Format(e.to_string()))?;
        model.meta = CnnTrainingMeta {
            seed: meta.parse_value("seed")?,
            schedule: Schedule {
                epochs: meta.parse_value("epochs")?,
                batch_size: meta.parse_value("batch_size")?,
                learning_rate: meta.parse_value("learning_rate")?,
                momentum: meta.parse_value("momentum")?,
            },
            final_loss: meta.parse_value("final_loss")?,
            dataset_fingerprint: meta.require("dataset")?.to_string(),
        };
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}

/// `CW0`..`CW5` / `CB0`..`CB5` for conv tensors, `FCW_` / `FCB_` for the FC layer.
fn tensor_tag(k: usize) -> [u8; 4] {
    let l = k / 2;
    let bias = k % 2 == 1;
    if l < CONV_LAYERS {
        [b'C', if bias { b'B' } else { b'W' }, b'0' + l as u8, b'_']
    } else if bias {
        *b"FCB_"
    } else {
        *b"FCW_"
    }
}

fn to_predictions(logits: impl Iterator<Item = f64>) -> Vec<PatchPrediction> {
    let probs: Vec<f64> = logits.map(sigmoid).collect();
    probs
        .chunks_exact(OUTPUTS)
        .map(|c| PatchPrediction { probs: c.to_vec() })
        .collect()
}

pub fn forward(model: &CnnModel, patch: &Patch) -> PatchPrediction {
    model
        .forward_batch(&[patch])
        .pop()
        .expect("one prediction per patch")
}

/// Forward pass on a raw channel-major buffer.
pub fn forward_raw(model: &CnnModel, data: &[f64]) -> Result<PatchPrediction> {
    let patch = Patch::from_vec((0, 0), data.to_vec())?;
    Ok(forward(model, &patch))
}

/// Central-difference check of the analytic gradient on `samples`
/// parameters spread evenly over every tensor, using the five-point
/// stencil with step [`GRADIENT_CHECK_STEP`]. Returns the largest relative
/// error `|a - n| / max(|a|, |n|, GRADIENT_CHECK_FLOOR)`.
pub fn gradient_check(
    model: &CnnModel,
    patch: &Patch,
    target: &[f64],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let (_, grads) = model.loss_and_gradients(&[patch], &[target])?;
    check_gradients(model, patch, target, &grads, samples, seed)
}

/// Compares supplied gradients against central differences.
pub fn check_gradients(
    model: &CnnModel,
    patch: &Patch,
    target: &[f64],
    grads: &[Vec<f64>],
    samples: usize,
    seed: u64,
) -> Result<f64> {
    let lens = model.arch.tensor_lens();
    if grads.len() != lens.len() || grads.iter().zip(&lens).any(|(g, &n)| g.len() != n) {
        return Err(Error::dims(
            "one gradient per parameter",
            "mismatched gradient tensors",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_tensor = samples.div_ceil(lens.len());
    let mut probe = model.clone();
    let mut worst: f64 = 0.0;
    for (k, &n) in lens.iter().enumerate() {
        for i in index::sample(&mut rng, n, per_tensor.min(n)) {
            let original = probe.params[k][i];
            let mut at = |offset: f64| -> Result<f64> {
                probe.params[k][i] = original + offset;
                probe.patch_loss(patch, target)
            };
            let h = GRADIENT_CHECK_STEP;
            let numeric = (8.0 * (at(h)? - at(-h)?) - (at(2.0 * h)? - at(-2.0 * h)?)) / (12.0 * h);
            probe.params[k][i] = original;
            let analytic = grads[k][i];
            let err = (analytic - numeric).abs()
                / analytic.abs().max(numeric.abs()).max(GRADIENT_CHECK_FLOOR);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-precision copy of a model for detection.
#[derive(Debug, Clone)]
pub struct InferenceNet {
    arch: Architecture,
    params: Vec<Vec<f32>>,
    /// FC weights transposed so each output cell's column is contiguous.
    fc_columns: Vec<f32>,
}

/// Patches per trunk evaluation; bounds the im2col buffers.
const INFERENCE_CHUNK: usize = 32;

thread_local! {
    static SCRATCH: RefCell<net::Scratch<f32>> = RefCell::new(net::Scratch::default());
    static TRAINING_SCRATCH: RefCell<(net::Trace, net::Scratch<f64>)> = RefCell::new(Default::default());
}

impl InferenceNet {
    pub fn new(model: &CnnModel) -> Self {
        let params: Vec<Vec<f32>> = model
            .params
            .iter()
            .map(|t| t.iter().map(|&v| v as f32).collect())
            .collect();
        let f = model.arch.fc_inputs();
        let w = &params[2 * CONV_LAYERS];
        let mut fc_columns = vec![0.0f32; w.len()];
        for i in 0..f {
            for o in 0..OUTPUTS {
                fc_columns[o * f + i] = w[i * OUTPUTS + o];
            }
        }
        InferenceNet {
            arch: model.arch,
            params,
            fc_columns,
        }
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    fn features(&self, patches: &[&Patch]) -> Vec<f32> {
        let inputs: Vec<f32> = patches
            .iter()
            .flat_map(|p| p.data().iter().map(|&v| v as f32))
            .collect();
        SCRATCH.with_borrow_mut(|scratch| {
            net::trunk(
                &self.arch,
                &self.params,
                &inputs,
                patches.len(),
                None,
                scratch,
            )
        })
    }

    pub fn predict(&self, patches: &[&Patch]) -> Vec<PatchPrediction> {
        let mut out = Vec::with_capacity(patches.len());
        for chunk in patches.chunks(INFERENCE_CHUNK) {
            let feats = self.features(chunk);
            let logits = net::fc(&self.arch, &self.params, &feats, chunk.len());
            out.extend(to_predictions(logits.into_iter().map(f64::from)));
        }
        out
    }

    /// Probabilities of nine output cells (`y * 32 + x`) per patch, without
    /// evaluating the rest of the output layer.
    pub fn predict_cells(&self, patches: &[&Patch], cells: &[[usize; 9]]) -> Vec<[f64; 9]> {
        assert_eq!(patches.len(), cells.len(), "one cell list per patch");
        let f = self.arch.fc_inputs();
        let bias = &self.params[2 * CONV_LAYERS + 1];
        let mut out = Vec::with_capacity(patches.len());
        for (chunk, chunk_cells) in patches
            .chunks(INFERENCE_CHUNK)
            .zip(cells.chunks(INFERENCE_CHUNK))
        {
            let feats = self.features(chunk);
            for (row, wanted) in feats.chunks_exact(f).zip(chunk_cells) {
                out.push(wanted.map(|c| {
                    let col = &self.fc_columns[c * f..(c + 1) * f];
                    let dot: f32 = row.iter().zip(col).map(|(a, b)| a * b).sum();
                    sigmoid(f64::from(dot + bias[c]))
                }));
            }
        }
        out
    }
}
