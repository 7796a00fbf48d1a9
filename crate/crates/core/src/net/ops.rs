//! Numeric kernels shared by the forward and backward passes. Tensors are
//! plain row-major slices; feature maps use channel-major `C x H x W`.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Floating-point element type: `f32` for training, `f64` for gradient checks.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + AddAssign + SubAssign + MulAssign + Sum + Send + Sync + Debug + Default + 'static
{
    /// `C = alpha * A B + beta * C` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn erf(self) -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).unwrap()
    }
}

fn span(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path, $erf:path) => {
        impl Real for $t {
            fn gemm_raw(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= span(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= span(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= span(m, n, rsc, csc), "gemm: C too short");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: the asserts above bound every index the kernel touches.
                unsafe {
                    $gemm(m, k, n, alpha, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, beta, c.as_mut_ptr(), rsc, csc);
                }
            }

            fn erf(self) -> Self {
                $erf(self)
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm, libm::erff);
impl_real!(f64, matrixmultiply::dgemm, libm::erf);

fn beta_of<T: Real>(accumulate: bool) -> T {
    if accumulate {
        T::one()
    } else {
        T::zero()
    }
}

/// `C[m x n] (+)= A[m x k] B[k x n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    T::gemm_raw(m, k, n, T::one(), a, k as isize, 1, b, n as isize, 1, beta_of(accumulate), c, n as isize, 1);
}

/// `C[m x n] (+)= A[m x k] B[n x k]^T`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    T::gemm_raw(m, k, n, T::one(), a, k as isize, 1, b, 1, k as isize, beta_of(accumulate), c, n as isize, 1);
}

/// `C[m x n] (+)= A[k x m]^T B[k x n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T], accumulate: bool) {
    T::gemm_raw(m, k, n, T::one(), a, 1, m as isize, b, n as isize, 1, beta_of(accumulate), c, n as isize, 1);
}

/// Adds `bias[r]` to every element of row `r` of a `rows x cols` matrix.
pub fn add_row_bias<T: Real>(x: &mut [T], bias: &[T], cols: usize) {
    for (row, &b) in x.chunks_exact_mut(cols).zip(bias) {
        row.iter_mut().for_each(|v| *v += b);
    }
}

/// `grad[r] += sum of row r`.
pub fn accumulate_row_sums<T: Real>(grad: &mut [T], x: &[T], cols: usize) {
    for (g, row) in grad.iter_mut().zip(x.chunks_exact(cols)) {
        *g += row.iter().copied().sum::<T>();
    }
}

/// Geometry of a square-kernel 2-D convolution on one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c_in * self.kernel * self.kernel
    }

    /// Output columns `ox` whose input column `ox * stride + kx - pad` is
    /// inside the image.
    fn valid_cols(&self, kx: usize) -> (usize, usize) {
        let ow = self.out_w();
        let lo = self.pad.saturating_sub(kx).div_ceil(self.stride);
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(self.stride).min(ow);
        (lo.min(hi), hi)
    }

    /// Unfolds `x` into `patch x (out_h * out_w)` columns. `cols` must be
    /// zeroed; padding positions are left untouched.
    pub fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * oh * ow..][..oh * ow];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let start = lo * s + kx - self.pad;
                        let dst = &mut row[oy * ow + lo..oy * ow + hi];
                        for (d, &v) in dst.iter_mut().zip(src[start..].iter().step_by(s)) {
                            *d = v;
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back, accumulating.
    pub fn col2im<T: Real>(&self, cols: &[T], dx: &mut [T]) {
        let (oh, ow) = (self.out_h(), self.out_w());
        let (k, s) = (self.kernel, self.stride);
        for c in 0..self.c_in {
            let plane = &mut dx[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * oh * ow..][..oh * ow];
                    let (lo, hi) = self.valid_cols(kx);
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize || lo >= hi {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        let start = lo * s + kx - self.pad;
                        for (d, &v) in dst[start..].iter_mut().step_by(s).zip(&row[oy * ow + lo..oy * ow + hi]) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }

    /// `y = W * im2col(x) + b`, with `W: c_out x patch`.
    pub fn forward<T: Real>(&self, x: &[T], weight: &[T], bias: &[T], c_out: usize) -> Vec<T> {
        let n = self.out_h() * self.out_w();
        let mut cols = vec![T::zero(); self.patch() * n];
        self.im2col(x, &mut cols);
        let mut y = vec![T::zero(); c_out * n];
        gemm_nn(c_out, self.patch(), n, weight, &cols, &mut y, false);
        add_row_bias(&mut y, bias, n);
        y
    }

    /// Accumulates weight and bias gradients; returns `dx` when requested.
    pub fn backward<T: Real>(
        &self,
        x: &[T],
        weight: &[T],
        dy: &[T],
        c_out: usize,
        dweight: &mut [T],
        dbias: &mut [T],
        want_dx: bool,
    ) -> Option<Vec<T>> {
        let n = self.out_h() * self.out_w();
        let mut cols = vec![T::zero(); self.patch() * n];
        self.im2col(x, &mut cols);
        gemm_nt(c_out, n, self.patch(), dy, &cols, dweight, true);
        accumulate_row_sums(dbias, dy, n);
        if !want_dx {
            return None;
        }
        gemm_tn(self.patch(), c_out, n, weight, dy, &mut cols, false);
        let mut dx = vec![T::zero(); self.c_in * self.h * self.w];
        self.col2im(&cols, &mut dx);
        Some(dx)
    }
}

/// Per-location statistics kept by a channel layer norm.
#[derive(Clone, Debug, Default)]
pub struct LnCache<T> {
    pub xhat: Vec<T>,
    pub rstd: Vec<T>,
}

/// Layer norm over the channel axis of a `c x n` map, per location.
pub fn layer_norm<T: Real>(x: &[T], c: usize, n: usize, gamma: &[T], beta: &[T]) -> (Vec<T>, LnCache<T>) {
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut mean = vec![T::zero(); n];
    for row in x.chunks_exact(n) {
        mean.iter_mut().zip(row).for_each(|(m, &v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m *= inv_c);
    let mut var = vec![T::zero(); n];
    for row in x.chunks_exact(n) {
        for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
            let d = v - m;
            *s += d * d;
        }
    }
    let eps = T::lit(LN_EPS);
    let rstd: Vec<T> = var.iter().map(|&s| T::one() / (s * inv_c + eps).sqrt()).collect();
    let mut xhat = vec![T::zero(); c * n];
    let mut y = vec![T::zero(); c * n];
    for ch in 0..c {
        let (g, b) = (gamma[ch], beta[ch]);
        for p in 0..n {
            let h = (x[ch * n + p] - mean[p]) * rstd[p];
            xhat[ch * n + p] = h;
            y[ch * n + p] = g * h + b;
        }
    }
    (y, LnCache { xhat, rstd })
}

pub fn layer_norm_backward<T: Real>(
    cache: &LnCache<T>,
    dy: &[T],
    c: usize,
    n: usize,
    gamma: &[T],
    dgamma: &mut [T],
    dbeta: &mut [T],
) -> Vec<T> {
    let mut sum_d = vec![T::zero(); n];
    let mut sum_dx = vec![T::zero(); n];
    let mut dxhat = vec![T::zero(); c * n];
    for ch in 0..c {
        let g = gamma[ch];
        let (mut dg, mut db) = (T::zero(), T::zero());
        for p in 0..n {
            let i = ch * n + p;
            dg += dy[i] * cache.xhat[i];
            db += dy[i];
            let d = dy[i] * g;
            dxhat[i] = d;
            sum_d[p] += d;
            sum_dx[p] += d * cache.xhat[i];
        }
        dgamma[ch] += dg;
        dbeta[ch] += db;
    }
    let inv_c = T::one() / T::from_usize(c).unwrap();
    let mut dx = dxhat;
    for ch in 0..c {
        for p in 0..n {
            let i = ch * n + p;
            dx[i] = cache.rstd[p] * (dx[i] - inv_c * (sum_d[p] + cache.xhat[i] * sum_dx[p]));
        }
    }
    dx
}

const INV_SQRT2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(x: T) -> T {
    T::lit(0.5) * x * (T::one() + (x * T::lit(INV_SQRT2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let cdf = T::lit(0.5) * (T::one() + (x * T::lit(INV_SQRT2)).erf());
    let pdf = T::lit(INV_SQRT_2PI) * (-(x * x) * T::lit(0.5)).exp();
    cdf + x * pdf
}
