//! Slow reference implementations used to cross-check the fast paths.

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::Tensor;
use crate::sampler::{ddim_step, NoiseSchedule};

/// `softmax(Q K^T / sqrt(d)) V` with explicit loops over queries, keys and
/// features.
pub fn attention_loops(q: &Tensor, k: &Tensor, v: &Tensor, d_head: usize) -> Result<Tensor> {
    let (n, d) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, dv) = v.dims2()?;
    if d != dk || m != mv || m == 0 || d_head == 0 {
        return Err(Error::invalid("attention oracle shape mismatch"));
    }
    let (q, k, v) = (q.data(), k.data(), v.data());
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = vec![0.0; n * dv];
    for i in 0..n {
        let mut scores = vec![0.0; m];
        for j in 0..m {
            let mut s = 0.0;
            for c in 0..d {
                s += q[i * d + c] * k[j * d + c];
            }
            scores[j] = s * scale;
        }
        let p = softmax_extended(&scores);
        for j in 0..m {
            for c in 0..dv {
                out[i * dv + c] += p[j] * v[j * dv + c];
            }
        }
    }
    Tensor::new(vec![n, dv], out)
}

/// Error-free transformation `a + b = s + e`.
fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

/// Sum carried as an unevaluated pair (about 106 significant bits).
fn double_double_sum(xs: &[f64]) -> (f64, f64) {
    let (mut hi, mut lo) = (0.0, 0.0);
    for &x in xs {
        let (s, e) = two_sum(hi, x);
        hi = s;
        lo += e;
    }
    let (s, e) = two_sum(hi, lo);
    (s, e)
}

/// Softmax of one row with the normalizer accumulated in double-double
/// precision and the division corrected by one Newton step.
pub fn softmax_extended(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|x| (x - m).exp()).collect();
    let (hi, lo) = double_double_sum(&e);
    e.iter()
        .map(|&x| {
            let q = x / hi;
            // corrects both the rounding of x / hi and the dropped low word
            let r = (-q).mul_add(hi, x);
            q + (r - q * lo) / hi
        })
        .collect()
}

/// Unnormalized 2-D DFT by direct summation; angles use exact integer phase.
pub fn dft2_naive(x: &[f64], h: usize, w: usize) -> Vec<(f64, f64)> {
    let mut out = vec![(0.0, 0.0); h * w];
    for u in 0..h {
        for v in 0..w {
            let (mut re, mut im) = (0.0, 0.0);
            for y in 0..h {
                for xx in 0..w {
                    let phase = ((u * y) % h) as f64 / h as f64 + ((v * xx) % w) as f64 / w as f64;
                    let th = -std::f64::consts::TAU * phase;
                    re += x[y * w + xx] * th.cos();
                    im += x[y * w + xx] * th.sin();
                }
            }
            out[u * w + v] = (re, im);
        }
    }
    out
}

/// Focal frequency loss (`alpha = 1`) of `[C, H, W]` inputs from [`dft2_naive`].
pub fn focal_frequency_naive(x: &Tensor, y: &Tensor) -> Result<f64> {
    ensure_shape(x.shape(), y.shape())?;
    let (c, h, w) = x.chw()?;
    let n = h * w;
    let mut total = 0.0;
    for ch in 0..c {
        let d: Vec<f64> = (0..n).map(|i| x.data()[ch * n + i] - y.data()[ch * n + i]).collect();
        let mags: Vec<f64> = dft2_naive(&d, h, w)
            .iter()
            .map(|(re, im)| re.hypot(*im) / (n as f64).sqrt())
            .collect();
        let m = mags.iter().cloned().fold(0.0, f64::max);
        if m > 0.0 {
            total += mags.iter().map(|v| (v / m) * v * v).sum::<f64>() / n as f64;
        }
    }
    Ok(total / c as f64)
}

/// Nearest codebook row per latent cell by exhaustive comparison of squared
/// distances; ties go to the lowest index.
pub fn nearest_codes_brute(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    let (c, h, w) = z.chw()?;
    let (k, cc) = codebook.dims2()?;
    if c != cc {
        return Err(Error::invalid("codebook width differs from latent channels"));
    }
    let cells = h * w;
    Ok((0..cells)
        .map(|p| {
            let mut best = (0, f64::INFINITY);
            for code in 0..k {
                let d: f64 = (0..c)
                    .map(|ch| {
                        let diff = z.data()[ch * cells + p] - codebook.data()[code * c + ch];
                        diff * diff
                    })
                    .sum();
                if d < best.1 {
                    best = (code, d);
                }
            }
            best.0
        })
        .collect())
}

/// Full deterministic trajectory from `z_K` to step 0 driven by the
/// closed-form velocity toward `z0`.
pub fn ddim_oracle_trajectory(z_start: &Tensor, z0: &Tensor, sched: &NoiseSchedule) -> Result<Tensor> {
    let mut z = z_start.clone();
    for k in (1..=sched.steps()).rev() {
        let v = sched.oracle_velocity(&z, z0, k)?;
        z = ddim_step(&z, &v, k, sched)?.z_prev;
    }
    Ok(z)
}
