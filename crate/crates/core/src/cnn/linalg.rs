//! Dense kernels shared by the network: GEMM dispatch, im2col for 3×3
//! same-padded convolutions, and 2×2 pooling. Activations use the
//! `[channel, batch, y, x]` layout so one GEMM covers a whole batch.

use std::ops::{Add, AddAssign, Mul, Sub};

pub trait Real:
    Copy
    + Default
    + PartialOrd
    + Send
    + Sync
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + AddAssign
    + 'static
{
    const ZERO: Self;
    const ONE: Self;
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// In-place `ln(1 + e^z) - ln 2`.
    fn shifted_softplus(z: &mut [Self]);

    /// `c = a · b + beta · c` on raw strided views.
    ///
    /// # Safety
    /// The pointers and strides must describe valid `m×k`, `k×n` and `m×n`
    /// views that do not alias `c`.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

impl Real for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn shifted_softplus(z: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were just detected.
            return unsafe { shifted_softplus_f64_avx2(z) };
        }
        shifted_softplus_f64::<false>(z);
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Real for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn shifted_softplus(z: &mut [Self]) {
        #[cfg(target_arch = "x86_64")]
        if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma")
        {
            // SAFETY: the required CPU features were just detected.
            return unsafe { shifted_softplus_avx2(z) };
        }
        shifted_softplus_f32::<false>(z);
    }
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn shifted_softplus_avx2(z: &mut [f32]) {
    shifted_softplus_f32::<true>(z);
}

#[inline(always)]
fn madd<const FMA: bool>(a: f32, b: f32, c: f32) -> f32 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

#[inline(always)]
fn madd64<const FMA: bool>(a: f64, b: f64, c: f64) -> f64 {
    if FMA {
        a.mul_add(b, c)
    } else {
        a * b + c
    }
}

/// Branch-free `ln(1 + e^z) - ln 2` so the loop vectorizes; absolute error
/// below 3e-7.
#[inline(always)]
fn shifted_softplus_f32<const FMA: bool>(z: &mut [f32]) {
    // ln(1 + x) on [0, 1], degree-8 Chebyshev fit, error 3.4e-8
    const LN1P: [f32; 9] = [
        3.380_092e-8,
        0.999_994_3,
        -0.499_838_6,
        0.331_548_8,
        -0.239_826_8,
        0.165_823_76,
        -0.093_252_945,
        0.034_850_13,
        -0.006_151_545,
    ];
    const ROUND: f32 = 12_582_912.0;
    for v in z {
        // e^-|v| = 2^n · e^r, |r| ≤ ln2 / 2, n rounded with the 1.5·2^23 trick
        let t = (-v.abs()).max(-87.0);
        let k = madd::<FMA>(t, std::f32::consts::LOG2_E, ROUND);
        let n = k - ROUND;
        let r = madd::<FMA>(n, 2.121_944_4e-4, madd::<FMA>(n, -0.693_359_4, t));
        let mut p = 1.0 / 720.0;
        for c in [1.0 / 120.0, 1.0 / 24.0, 1.0 / 6.0, 0.5, 1.0, 1.0] {
            p = madd::<FMA>(p, r, c);
        }
        let scale = f32::from_bits((((k.to_bits() as i32) - 0x4B40_0000 + 127) << 23) as u32);
        let e = p * scale;
        let mut q = LN1P[8];
        for &c in LN1P[..8].iter().rev() {
            q = madd::<FMA>(q, e, c);
        }
        *v = v.max(0.0) + q - std::f32::consts::LN_2;
    }
}

/// Branch-free `e^t` accurate to a few ulp for `t ≤ 709`; inputs below
/// −708 return `e^−708`.
#[inline(always)]
fn exp_f64<const FMA: bool>(t: f64) -> f64 {
    const ROUND: f64 = 6_755_399_441_055_744.0;
    const LN2_HI: f64 = 6.931_471_803_691_238_2e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let t = t.clamp(-708.0, 709.0);
    let k = madd64::<FMA>(t, std::f64::consts::LOG2_E, ROUND);
    let n = k - ROUND;
    let r = madd64::<FMA>(-n, LN2_LO, madd64::<FMA>(-n, LN2_HI, t));
    // Taylor series to r^13 on |r| ≤ ln2 / 2
    let mut p = 1.0 / 6_227_020_800.0;
    for c in [
        1.0 / 479_001_600.0,
        1.0 / 39_916_800.0,
        1.0 / 3_628_800.0,
        1.0 / 362_880.0,
        1.0 / 40_320.0,
        1.0 / 5_040.0,
        1.0 / 720.0,
        1.0 / 120.0,
        1.0 / 24.0,
        1.0 / 6.0,
        0.5,
        1.0,
        1.0,
    ] {
        p = madd64::<FMA>(p, r, c);
    }
    let scale =
        f64::from_bits((((k.to_bits() as i64) - ROUND.to_bits() as i64 + 1023) << 52) as u64);
    p * scale
}

/// Branch-free `ln(1 + x)` for `x ∈ [0, 1]` as `2 atanh(x / (2 + x))`.
#[inline(always)]
fn ln_1p_unit_f64<const FMA: bool>(x: f64) -> f64 {
    let s = x / (2.0 + x);
    let s2 = s * s;
    let mut p = 1.0 / 33.0;
    for k in (0..16).rev() {
        p = madd64::<FMA>(p, s2, 1.0 / (2 * k + 1) as f64);
    }
    2.0 * s * p
}

#[inline(always)]
fn shifted_softplus_f64<const FMA: bool>(z: &mut [f64]) {
    for v in z {
        *v = v.max(0.0) + ln_1p_unit_f64::<FMA>(exp_f64::<FMA>(-v.abs())) - std::f64::consts::LN_2;
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn shifted_softplus_f64_avx2(z: &mut [f64]) {
    shifted_softplus_f64::<true>(z);
}

#[inline(always)]
fn softplus_slope_f64<const FMA: bool>(grad: &mut [f64], y: &[f64]) {
    for (g, &y) in grad.iter_mut().zip(y) {
        *g *= madd64::<FMA>(-0.5, exp_f64::<FMA>(-y), 1.0);
    }
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2,fma")]
unsafe fn softplus_slope_f64_avx2(grad: &mut [f64], y: &[f64]) {
    softplus_slope_f64::<true>(grad, y);
}

/// Multiplies `grad` by the shifted-softplus derivative, written in terms
/// of the output `y` as `1 - e^-y / 2`.
pub fn shifted_softplus_backward(grad: &mut [f64], y: &[f64]) {
    assert_eq!(grad.len(), y.len());
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") && std::arch::is_x86_feature_detected!("fma") {
        // SAFETY: the required CPU features were just detected.
        return unsafe { softplus_slope_f64_avx2(grad, y) };
    }
    softplus_slope_f64::<false>(grad, y);
}

/// Operand of [`gemm`]: a row-major buffer, optionally read transposed.
#[derive(Clone, Copy)]
pub enum Op<'a, T> {
    /// Logical `rows × cols` matrix stored as is.
    N(&'a [T]),
    /// Logical `rows × cols` matrix stored as its `cols × rows` transpose.
    T(&'a [T]),
}

/// `c (m×n) = a (m×k) · b (k×n) + beta · c`, all row-major.
pub fn gemm<T: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: Op<'_, T>,
    b: Op<'_, T>,
    beta: T,
    c: &mut [T],
) {
    let (a, rsa, csa) = match a {
        Op::N(s) => (s, k as isize, 1),
        Op::T(s) => (s, 1, m as isize),
    };
    let (b, rsb, csb) = match b {
        Op::N(s) => (s, n as isize, 1),
        Op::T(s) => (s, 1, k as isize),
    };
    assert!(
        a.len() >= m * k && b.len() >= k * n && c.len() >= m * n,
        "gemm operand too small"
    );
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: bounds checked above; `c` is a distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

/// Grows `v` if needed and returns its first `len` elements.
pub fn buffer<T: Real>(v: &mut Vec<T>, len: usize) -> &mut [T] {
    if v.len() < len {
        v.resize(len, T::ZERO);
    }
    &mut v[..len]
}

/// 3×3 zero-padded patch matrix: `[c*9 + ky*3 + kx, (b*h + y)*w + x]`.
#[cfg(test)]
pub fn im2col<T: Real>(input: &[T], channels: usize, batch: usize, h: usize, w: usize) -> Vec<T> {
    let mut cols = vec![T::ZERO; channels * 9 * batch * h * w];
    im2col_into(input, channels, batch, h, w, &mut cols);
    cols
}

/// [`im2col`] into a caller-owned buffer; every element is overwritten.
pub fn im2col_into<T: Real>(
    input: &[T],
    channels: usize,
    batch: usize,
    h: usize,
    w: usize,
    cols: &mut [T],
) {
    let hw = h * w;
    let plane = batch * hw;
    debug_assert_eq!(input.len(), channels * plane);
    assert_eq!(cols.len(), channels * 9 * plane, "im2col buffer size");
    for c in 0..channels {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                // dst[y*w + x] = src[(y + dy)*w + x + dx] as one shifted block per image
                let shift = (ky as isize - 1) * w as isize + kx as isize - 1;
                for b in 0..batch {
                    let src = &input[c * plane + b * hw..][..hw];
                    let dst = &mut cols[row + b * hw..][..hw];
                    if shift >= 0 {
                        let s = shift as usize;
                        dst[..hw - s].copy_from_slice(&src[s..]);
                        dst[hw - s..].fill(T::ZERO);
                    } else {
                        let s = (-shift) as usize;
                        dst[s..].copy_from_slice(&src[..hw - s]);
                        dst[..s].fill(T::ZERO);
                    }
                    match kx {
                        0 => dst.iter_mut().step_by(w).for_each(|v| *v = T::ZERO),
                        2 => dst[w - 1..]
                            .iter_mut()
                            .step_by(w)
                            .for_each(|v| *v = T::ZERO),
                        _ => {}
                    }
                    match ky {
                        0 => dst[..w].fill(T::ZERO),
                        2 => dst[hw - w..].fill(T::ZERO),
                        _ => {}
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input.
#[cfg(test)]
pub fn col2im(cols: &[f64], channels: usize, batch: usize, h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; channels * batch * h * w];
    col2im_into(cols, channels, batch, h, w, &mut out);
    out
}

/// [`col2im`] into a caller-owned buffer, which is cleared first.
pub fn col2im_into(
    cols: &[f64],
    channels: usize,
    batch: usize,
    h: usize,
    w: usize,
    out: &mut [f64],
) {
    let plane = batch * h * w;
    assert_eq!(out.len(), channels * plane, "col2im buffer size");
    out.fill(0.0);
    for c in 0..channels {
        let dst = &mut out[c * plane..(c + 1) * plane];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (c * 9 + ky * 3 + kx) * plane;
                let src = &cols[row..row + plane];
                for b in 0..batch {
                    for y in 0..h {
                        let sy = y as isize + ky as isize - 1;
                        if sy < 0 || sy >= h as isize {
                            continue;
                        }
                        let g = &src[(b * h + y) * w..][..w];
                        let o = &mut dst[(b * h + sy as usize) * w..][..w];
                        let (o, g) = match kx {
                            0 => (&mut o[..w - 1], &g[1..]),
                            1 => (&mut o[..], g),
                            _ => (&mut o[1..], &g[..w - 1]),
                        };
                        for (o, g) in o.iter_mut().zip(g) {
                            *o += g;
                        }
                    }
                }
            }
        }
    }
}

/// 2×2 stride-2 average pooling over `channels * batch` planes of `h × w`.
#[cfg(test)]
pub fn avg_pool<T: Real>(input: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; planes * (h / 2) * (w / 2)];
    avg_pool_into(input, planes, h, w, &mut out);
    out
}

pub fn avg_pool_into<T: Real>(input: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::from_f64(0.25);
    assert_eq!(out.len(), planes * oh * ow, "pooling buffer size");
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let r0 = &src[2 * y * w..(2 * y + 1) * w];
            let r1 = &src[(2 * y + 1) * w..(2 * y + 2) * w];
            for x in 0..ow {
                dst[y * ow + x] = (r0[2 * x] + r0[2 * x + 1] + r1[2 * x] + r1[2 * x + 1]) * quarter;
            }
        }
    }
}

/// Gradient of [`avg_pool`] with respect to its input.
pub fn avg_pool_backward(grad: &[f64], planes: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; planes * h * w];
    for p in 0..planes {
        for y in 0..h {
            for x in 0..w {
                out[(p * h + y) * w + x] = 0.25 * grad[(p * oh + y / 2) * ow + x / 2];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2,3],[4,5,6]], b = [[1,0],[0,1],[1,1]]
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let at = [1.0, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let bt = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let expected = [4.0, 5.0, 10.0, 11.0];
        for (aa, bb) in [
            (Op::N(&a[..]), Op::N(&b[..])),
            (Op::T(&at[..]), Op::T(&bt[..])),
        ] {
            let mut c = [0.0; 4];
            gemm(2, 3, 2, aa, bb, 0.0, &mut c);
            assert_eq!(c, expected);
        }
        let mut c = [1.0f32; 4];
        let (a32, b32) = (a.map(|v| v as f32), b.map(|v| v as f32));
        gemm(2, 3, 2, Op::N(&a32[..]), Op::N(&b32[..]), 1.0, &mut c);
        assert_eq!(c, [5.0, 6.0, 11.0, 12.0]);
    }

    #[test]
    fn fast_softplus_tracks_exact() {
        let zs: Vec<f64> = (-40000..40000)
            .map(|i| i as f64 * 0.00517)
            .chain([-1e30, 1e30, -90.0, 90.0])
            .collect();
        let mut exact = zs.clone();
        f64::shifted_softplus(&mut exact);
        let mut approx: Vec<f32> = zs.iter().map(|&z| z as f32).collect();
        f32::shifted_softplus(&mut approx);
        for (e, a) in exact.iter().zip(&approx) {
            assert!(
                (e - *a as f64).abs() < 2e-6 * e.abs().max(1.0),
                "{e} vs {a}"
            );
        }
        assert!(exact[40000].abs() < 1e-15);
    }

    #[test]
    fn vector_softplus_matches_libm() {
        for i in -200_000..200_000 {
            let z = i as f64 * 3.7e-4 + 1e-9;
            let mut v = [z];
            f64::shifted_softplus(&mut v);
            let exact = z.max(0.0) + (-z.abs()).exp().ln_1p() - std::f64::consts::LN_2;
            assert!(
                (v[0] - exact).abs() <= 4.0 * f64::EPSILON * exact.abs().max(1.0),
                "{z}: {} vs {exact}",
                v[0]
            );
            let mut g = [1.0];
            shifted_softplus_backward(&mut g, &[exact]);
            assert!((g[0] - (1.0 - 0.5 * (-exact).exp())).abs() < 4.0 * f64::EPSILON);
        }
        let mut big = [800.0, -800.0];
        f64::shifted_softplus(&mut big);
        assert_eq!(big[0], 800.0 - std::f64::consts::LN_2);
        assert!((big[1] + std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn im2col_adjoint() {
        // <im2col(x), g> == <x, col2im(g)>
        let (c, b, h, w) = (2, 3, 4, 5);
        let x: Vec<f64> = (0..c * b * h * w)
            .map(|i| ((i * 37) % 11) as f64 - 5.0)
            .collect();
        let cols = im2col(&x, c, b, h, w);
        let g: Vec<f64> = (0..cols.len())
            .map(|i| ((i * 13) % 7) as f64 - 3.0)
            .collect();
        let lhs: f64 = cols.iter().zip(&g).map(|(a, b)| a * b).sum();
        let back = col2im(&g, c, b, h, w);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn im2col_center_tap_is_identity() {
        let x: Vec<f64> = (0..2 * 9).map(|i| i as f64).collect();
        let cols = im2col(&x, 2, 1, 3, 3);
        assert_eq!(&cols[4 * 9..5 * 9], &x[..9]);
        // top-left tap of pixel (0,0) is padding
        assert_eq!(cols[0], 0.0);
        // top-left tap of pixel (1,1) is pixel (0,0)
        assert_eq!(cols[4], x[0]);
    }

    #[test]
    fn pooling_round_trip_shapes() {
        let x: Vec<f64> = (0..2 * 16).map(|i| i as f64).collect();
        let p = avg_pool(&x, 2, 4, 4);
        assert_eq!(p.len(), 8);
        assert_eq!(p[0], (0.0 + 1.0 + 4.0 + 5.0) / 4.0);
        let g = avg_pool_backward(&vec![1.0; 8], 2, 4, 4);
        assert!(g.iter().all(|&v| v == 0.25));
    }
}
