//! Forward kernels over row-major slices.
//!
//! Every loop accumulates in index order; nothing here is parallel.

use super::Real;

/// sqrt(2/pi), the tanh-GELU constant.
const GELU_K: f32 = 0.797_884_6;
const GELU_C: f32 = 0.044_715;

/// `[r×k] · [k×c]`, accumulated in increasing `k`.
pub fn matmul<T: Real>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * c..(i + 1) * c];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn transpose<T: Real>(a: &[T], r: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

/// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu<T: Real>(x: T) -> T {
    let (k, c, half) = (T::of_f32(GELU_K), T::of_f32(GELU_C), T::of_f32(0.5));
    half * x * (T::one() + (k * (x + c * x * x * x)).tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let (k, c, half) = (T::of_f32(GELU_K), T::of_f32(GELU_C), T::of_f32(0.5));
    let one = T::one();
    let t = (k * (x + c * x * x * x)).tanh();
    half * (one + t) + half * x * (one - t * t) * k * (one + T::of_f32(3.0) * c * x * x)
}

fn count<T: Real>(n: usize) -> T {
    T::of_f32(n as f32)
}

/// Per-row mean and reciprocal standard deviation (population variance).
pub fn row_stats<T: Real>(x: &[T], rows: usize, d: usize, eps: f32) -> Vec<(T, T)> {
    (0..rows)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / count(d);
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count(d);
            (mean, T::one() / (var + T::of_f32(eps)).sqrt())
        })
        .collect()
}

pub fn layernorm<T: Real>(x: &[T], gain: &[T], bias: &[T], rows: usize, d: usize, eps: f32) -> Vec<T> {
    let stats = row_stats(x, rows, d, eps);
    let mut out = vec![T::zero(); rows * d];
    for (i, &(mean, rstd)) in stats.iter().enumerate() {
        for j in 0..d {
            out[i * d + j] = (x[i * d + j] - mean) * rstd * gain[j] + bias[j];
        }
    }
    out
}

/// Softmax over each contiguous row of length `n`, max-subtracted.
pub fn softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for o in &mut out[start..] {
            *o /= sum;
        }
    }
    out
}

pub fn log_softmax_rows<T: Real>(x: &[T], n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(n) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Euclidean norm of each row.
pub fn row_norms<T: Real>(x: &[T], d: usize) -> Vec<T> {
    x.chunks(d)
        .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
        .collect()
}
