//! Row-major dense kernels. Everything here is single-threaded and has a
//! fixed summation order, so results are bit-reproducible.

use crate::real::Real;

const LANES: usize = 8;

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [T::zero(); LANES];
    let ca = a.chunks_exact(LANES);
    let cb = b.chunks_exact(LANES);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..LANES {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline(always)]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// `c[m,n] += a[m,k] · b[k,n]`
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx") {
        // SAFETY: the CPU supports AVX. Only instruction selection changes;
        // no fused multiply-add is enabled, so results are unchanged.
        unsafe { gemm_nn_avx(a, b, c, m, k, n) };
        return;
    }
    gemm_nn_body(a, b, c, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx")]
unsafe fn gemm_nn_avx<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    gemm_nn_body(a, b, c, m, k, n);
}

#[inline(always)]
fn gemm_nn_body<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    const MR: usize = 4;
    const NR: usize = 8;
    let full_n = n - n % NR;
    let mut i = 0;
    while i + MR <= m {
        let rows: [&[T]; MR] = std::array::from_fn(|r| &a[(i + r) * k..(i + r + 1) * k]);
        for j in (0..full_n).step_by(NR) {
            let mut acc = [[T::zero(); NR]; MR];
            for p in 0..k {
                let brow: &[T; NR] = b[p * n + j..p * n + j + NR].try_into().expect("tile width");
                for r in 0..MR {
                    let av = rows[r][p];
                    for l in 0..NR {
                        acc[r][l] += av * brow[l];
                    }
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                for (cv, &av) in crow.iter_mut().zip(acc_r) {
                    *cv += av;
                }
            }
        }
        if full_n < n {
            for (r, arow) in rows.iter().enumerate() {
                let crow = &mut c[(i + r) * n + full_n..(i + r + 1) * n];
                for (p, &aip) in arow.iter().enumerate() {
                    axpy(aip, &b[p * n + full_n..(p + 1) * n], crow);
                }
            }
        }
        i += MR;
    }
    for i in i..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &aip) in arow.iter().enumerate() {
            if aip != T::zero() {
                axpy(aip, &b[p * n..(p + 1) * n], crow);
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if m < 4 {
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let crow = &mut c[i * n..(i + 1) * n];
            for (j, cij) in crow.iter_mut().enumerate() {
                *cij += dot(arow, &b[j * k..(j + 1) * k]);
            }
        }
        return;
    }
    let mut bt = vec![T::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(a, &bt, c, m, k, n);
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &api) in arow.iter().enumerate() {
            if api != T::zero() {
                axpy(api, brow, &mut c[i * n..(i + 1) * n]);
            }
        }
    }
}

/// Numerically stable softmax of one row, written into `out`. The
/// normalizer is accumulated in f64.
pub fn softmax_into<T: Real>(row: &[T], out: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = 0f64;
    for (o, &x) in out.iter_mut().zip(row) {
        let e = (x - max).exp();
        *o = e;
        sum += e.as_f64();
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = T::of_f64(o.as_f64() * inv);
    }
}

/// Backward of a softmax row: `dx += p ⊙ (dp − Σ dp⊙p)`.
pub fn softmax_backward_into<T: Real>(p: &[T], dp: &[T], dx: &mut [T]) {
    let s: f64 = p
        .iter()
        .zip(dp)
        .map(|(&a, &b)| a.as_f64() * b.as_f64())
        .sum();
    let s = T::of_f64(s);
    for ((d, &pi), &gi) in dx.iter_mut().zip(p).zip(dp) {
        *d += pi * (gi - s);
    }
}

/// Exact (erf-based) GELU.
pub fn gelu<T: Real>(x: T) -> T {
    let half = T::of_f64(0.5);
    half * x * (T::one() + (x * T::of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::of_f64(0.5);
    let cdf = half * (T::one() + (x * T::of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-half * x * x).exp() * T::of_f64(0.398_942_280_401_432_7);
    cdf + x * pdf
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                c[i * n + j] = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
            }
        }
        c
    }

    fn transpose(x: &[f32], r: usize, c: usize) -> Vec<f32> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = x[i * c + j];
            }
        }
        t
    }

    #[test]
    fn gemm_variants_agree_with_naive() {
        let (m, k, n) = (5, 19, 7);
        let a: Vec<f32> = (0..m * k)
            .map(|i| ((i * 37 % 11) as f32 - 5.0) / 7.0)
            .collect();
        let b: Vec<f32> = (0..k * n)
            .map(|i| ((i * 17 % 13) as f32 - 6.0) / 5.0)
            .collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0f32; m * n];
        gemm_nn(&a, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0f32; m * n];
        gemm_nt(&a, &bt, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }

        let at = transpose(&a, m, k);
        let mut c = vec![0.0f32; m * n];
        gemm_tn(&at, &b, &mut c, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn gelu_fixed_points() {
        assert_eq!(gelu(0.0f32), 0.0);
        assert!((gelu(10.0f32) - 10.0).abs() < 1e-5);
        assert!(gelu(-10.0f32).abs() < 1e-5);
    }
}
