//! Network definition, batched forward pass and backpropagation.

use super::linalg::{self, buffer, gemm, Op, Real};
use crate::error::{Error, Result};
use crate::imageio::{PATCH_CHANNELS, PATCH_LEN, PATCH_SIZE};

pub const OUTPUTS: usize = PATCH_SIZE * PATCH_SIZE;
pub const CONV_LAYERS: usize = 6;
pub const STANDARD_WIDTHS: [usize; CONV_LAYERS] = [32, 32, 64, 64, 128, 128];
/// Convolutions followed by a 2×2 pooling stage.
const POOLED: [bool; CONV_LAYERS] = [false, true, false, true, false, false];
const PLANE: usize = PATCH_SIZE * PATCH_SIZE;
/// Subtracted from every input value so the network sees `[-0.5, 0.5]`.
pub const INPUT_OFFSET: f64 = 0.5;

/// Fixed six-conv / two-pool / one-FC topology, parameterized only by the
/// convolution widths so tests can run a narrow copy of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub widths: [usize; CONV_LAYERS],
}

impl Default for Architecture {
    fn default() -> Self {
        Self::standard()
    }
}

impl Architecture {
    pub fn standard() -> Self {
        Architecture {
            widths: STANDARD_WIDTHS,
        }
    }

    pub fn new(widths: [usize; CONV_LAYERS]) -> Result<Self> {
        if widths.contains(&0) {
            return Err(Error::InvalidArgument(
                "convolution widths must be positive".into(),
            ));
        }
        Ok(Architecture { widths })
    }

    /// `(input channels, output channels, side length)` of conv layer `l`.
    pub fn conv_shape(&self, l: usize) -> (usize, usize, usize) {
        let cin = if l == 0 {
            PATCH_CHANNELS
        } else {
            self.widths[l - 1]
        };
        let side = PATCH_SIZE >> POOLED[..l].iter().filter(|&&p| p).count();
        (cin, self.widths[l], side)
    }

    pub fn fc_inputs(&self) -> usize {
        let side = PATCH_SIZE / 4;
        self.widths[CONV_LAYERS - 1] * side * side
    }

    /// Element count of every parameter tensor, in storage order:
    /// conv weights and biases alternating, then FC weights and bias.
    pub fn tensor_lens(&self) -> Vec<usize> {
        let mut lens = Vec::with_capacity(2 * CONV_LAYERS + 2);
        for l in 0..CONV_LAYERS {
            let (cin, cout, _) = self.conv_shape(l);
            lens.push(cout * cin * 9);
            lens.push(cout);
        }
        lens.push(self.fc_inputs() * OUTPUTS);
        lens.push(OUTPUTS);
        lens
    }

    pub fn parameter_count(&self) -> usize {
        self.tensor_lens().iter().sum()
    }

    /// Canonical description stored in model files and checked on load.
    pub fn fingerprint(&self) -> String {
        let mut parts = vec![format!(
            "in{PATCH_SIZE}x{PATCH_SIZE}x{PATCH_CHANNELS}-{INPUT_OFFSET}"
        )];
        for l in 0..CONV_LAYERS {
            parts.push(format!("conv3x3/{}+ssp", self.widths[l]));
            if POOLED[l] {
                parts.push("avgpool2".into());
            }
        }
        parts.push(format!("fc{}->{OUTPUTS}", self.fc_inputs()));
        parts.push("sigmoid".into());
        parts.join(",")
    }
}

/// Shifted softplus, `ln(1 + e^z) - ln 2`, evaluated without overflow.
fn activate<T: Real>(z: &mut [T]) {
    T::shifted_softplus(z);
}

/// Intermediate tensors kept for backpropagation, all `[C, B, H, W]`.
#[derive(Default)]
pub(crate) struct Trace {
    conv_inputs: Vec<Vec<f64>>,
    conv_outputs: Vec<Vec<f64>>,
    pub features: Vec<f64>,
}

/// Reusable activation and im2col buffers for one thread.
pub(crate) struct Scratch<T> {
    cols: Vec<T>,
    x: Vec<T>,
    y: Vec<T>,
}

impl<T> Default for Scratch<T> {
    fn default() -> Self {
        Scratch {
            cols: Vec::new(),
            x: Vec::new(),
            y: Vec::new(),
        }
    }
}

/// Runs the convolutional trunk on `batch` patches laid out back to back
/// (each `PATCH_LEN` values, channel-major) and returns the flattened
/// `batch × fc_inputs` feature matrix.
pub(crate) fn trunk<T: Real>(
    arch: &Architecture,
    params: &[Vec<T>],
    inputs: &[T],
    batch: usize,
    mut trace: Option<&mut Trace>,
    scratch: &mut Scratch<T>,
) -> Vec<T> {
    debug_assert_eq!(inputs.len(), batch * PATCH_LEN);
    let Scratch { cols, x, y } = scratch;
    // [B, C, HW] -> [C, B, HW], centered
    let offset = T::from_f64(INPUT_OFFSET);
    let mut x_len = inputs.len();
    let xs = buffer(x, x_len);
    for b in 0..batch {
        for c in 0..PATCH_CHANNELS {
            let src = &inputs[(b * PATCH_CHANNELS + c) * PLANE..][..PLANE];
            for (d, &v) in xs[(c * batch + b) * PLANE..][..PLANE].iter_mut().zip(src) {
                *d = v - offset;
            }
        }
    }
    for l in 0..CONV_LAYERS {
        let (cin, cout, side) = arch.conv_shape(l);
        let n = batch * side * side;
        let cs = buffer(cols, cin * 9 * n);
        linalg::im2col_into(&x[..x_len], cin, batch, side, side, cs);
        let (w, bias) = (&params[2 * l], &params[2 * l + 1]);
        let ys = buffer(y, cout * n);
        for (o, &b) in bias.iter().enumerate() {
            ys[o * n..(o + 1) * n].fill(b);
        }
        gemm(cout, cin * 9, n, Op::N(w), Op::N(cs), T::ONE, ys);
        activate(ys);
        if let Some(t) = trace.as_deref_mut() {
            store(&mut t.conv_inputs, l, &x[..x_len]);
            store(&mut t.conv_outputs, l, ys);
        }
        if POOLED[l] {
            x_len = cout * n / 4;
            linalg::avg_pool_into(&y[..cout * n], cout * batch, side, side, buffer(x, x_len));
        } else {
            std::mem::swap(x, y);
            x_len = cout * n;
        }
    }
    // [C, B, S] -> [B, C*S]
    let cout = arch.widths[CONV_LAYERS - 1];
    let s = arch.fc_inputs() / cout;
    let mut feats = vec![T::ZERO; x_len];
    for c in 0..cout {
        for b in 0..batch {
            feats[(b * cout + c) * s..][..s].copy_from_slice(&x[(c * batch + b) * s..][..s]);
        }
    }
    if let Some(t) = trace {
        t.features.clear();
        t.features.extend(feats.iter().map(|v| v.to_f64()));
    }
    feats
}

/// Copies `v` into slot `l`, reusing the slot's allocation.
fn store<T: Real>(slots: &mut Vec<Vec<f64>>, l: usize, v: &[T]) {
    if slots.len() <= l {
        slots.resize_with(l + 1, Vec::new);
    }
    slots[l].clear();
    slots[l].extend(v.iter().map(|x| x.to_f64()));
}

/// `batch × OUTPUTS` logits from trunk features.
pub(crate) fn fc<T: Real>(
    arch: &Architecture,
    params: &[Vec<T>],
    feats: &[T],
    batch: usize,
) -> Vec<T> {
    let f = arch.fc_inputs();
    let (w, bias) = (&params[2 * CONV_LAYERS], &params[2 * CONV_LAYERS + 1]);
    let mut logits = Vec::with_capacity(batch * OUTPUTS);
    for _ in 0..batch {
        logits.extend_from_slice(bias);
    }
    gemm(
        batch,
        f,
        OUTPUTS,
        Op::N(feats),
        Op::N(w),
        T::ONE,
        &mut logits,
    );
    logits
}

/// Gradients of `Σ dlogits · logits` with respect to every parameter tensor.
pub(crate) fn backward(
    arch: &Architecture,
    params: &[Vec<f64>],
    trace: &Trace,
    batch: usize,
    dlogits: &[f64],
    scratch: &mut Scratch<f64>,
) -> Vec<Vec<f64>> {
    let mut grads: Vec<Vec<f64>> = arch
        .tensor_lens()
        .into_iter()
        .map(|n| vec![0.0; n])
        .collect();
    let f = arch.fc_inputs();
    gemm(
        f,
        batch,
        OUTPUTS,
        Op::T(&trace.features),
        Op::N(dlogits),
        0.0,
        &mut grads[2 * CONV_LAYERS],
    );
    let db = &mut grads[2 * CONV_LAYERS + 1];
    for row in dlogits.chunks_exact(OUTPUTS) {
        for (d, g) in db.iter_mut().zip(row) {
            *d += g;
        }
    }
    let mut dfeats = vec![0.0; batch * f];
    gemm(
        batch,
        OUTPUTS,
        f,
        Op::N(dlogits),
        Op::T(&params[2 * CONV_LAYERS]),
        0.0,
        &mut dfeats,
    );

    let cout = arch.widths[CONV_LAYERS - 1];
    let s = f / cout;
    let mut dy = vec![0.0; dfeats.len()];
    for c in 0..cout {
        for b in 0..batch {
            dy[(c * batch + b) * s..][..s].copy_from_slice(&dfeats[(b * cout + c) * s..][..s]);
        }
    }
    for l in (0..CONV_LAYERS).rev() {
        let (cin, cout, side) = arch.conv_shape(l);
        let n = batch * side * side;
        if POOLED[l] {
            dy = linalg::avg_pool_backward(&dy, cout * batch, side, side);
        }
        linalg::shifted_softplus_backward(&mut dy, &trace.conv_outputs[l]);
        let cols = buffer(&mut scratch.cols, cin * 9 * n);
        linalg::im2col_into(&trace.conv_inputs[l], cin, batch, side, side, cols);
        gemm(
            cout,
            n,
            cin * 9,
            Op::N(&dy),
            Op::T(cols),
            0.0,
            &mut grads[2 * l],
        );
        for (o, g) in grads[2 * l + 1].iter_mut().enumerate() {
            *g = dy[o * n..(o + 1) * n].iter().sum();
        }
        if l > 0 {
            let dcols = buffer(&mut scratch.cols, cin * 9 * n);
            gemm(
                cin * 9,
                cout,
                n,
                Op::T(&params[2 * l]),
                Op::N(&dy),
                0.0,
                dcols,
            );
            let dx = buffer(&mut scratch.x, cin * n);
            linalg::col2im_into(dcols, cin, batch, side, side, dx);
            dy = dx.to_vec();
        }
    }
    grads
}
