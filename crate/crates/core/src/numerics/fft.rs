//! 2-D discrete Fourier transforms over real images.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Unnormalized forward DFT of a real `h x w` image, row-major output.
pub fn fft2_real(x: &[f64], h: usize, w: usize) -> Vec<Complex64> {
    let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fft2_in_place(&mut buf, h, w, false);
    buf
}

/// Unnormalized 2-D transform in place. `inverse` uses the conjugate kernel
/// and does not divide by `h * w`.
pub fn fft2_in_place(buf: &mut [Complex64], h: usize, w: usize, inverse: bool) {
    let mut planner = FftPlanner::<f64>::new();
    let row_fft = if inverse {
        planner.plan_fft_inverse(w)
    } else {
        planner.plan_fft_forward(w)
    };
    for row in buf.chunks_exact_mut(w) {
        row_fft.process(row);
    }
    let col_fft = if inverse {
        planner.plan_fft_inverse(h)
    } else {
        planner.plan_fft_forward(h)
    };
    let mut column = vec![Complex64::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            column[y] = buf[y * w + x];
        }
        col_fft.process(&mut column);
        for y in 0..h {
            buf[y * w + x] = column[y];
        }
    }
}

/// Squared DFT magnitudes of a 2-D tensor (unnormalized transform, so the
/// spectrum sums to `N * sum(x^2)`).
pub fn power_spectrum_2d(x: &Tensor) -> Result<Tensor> {
    let (h, w) = match *x.shape() {
        [h, w] => (h, w),
        _ => {
            return Err(Error::invalid(format!(
                "power spectrum needs a 2-D tensor, got {:?}",
                x.shape()
            )))
        }
    };
    let spec = fft2_real(x.data(), h, w);
    Ok(Tensor::from_parts(
        vec![h, w],
        spec.iter().map(|c| c.norm_sqr()).collect(),
    ))
}

/// Signed frequency (cycles per sample) of DFT bin `k` out of `n`.
pub fn bin_frequency(k: usize, n: usize) -> f64 {
    let k = if k <= n / 2 { k as f64 } else { k as f64 - n as f64 };
    k / n as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_image_is_dc_only() {
        let x = Tensor::full(&[4, 6], 0.5);
        let p = power_spectrum_2d(&x).unwrap();
        let n = 24.0;
        assert!((p.data()[0] - (0.5 * n) * (0.5 * n)).abs() < 1e-9);
        assert!(p.data()[1..].iter().all(|&v| v.abs() < 1e-20));
    }

    #[test]
    fn inverse_round_trips() {
        let x: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect();
        let mut buf = fft2_real(&x, 3, 4);
        fft2_in_place(&mut buf, 3, 4, true);
        for (a, b) in buf.iter().zip(&x) {
            assert!((a.re / 12.0 - b).abs() < 1e-12);
            assert!(a.im.abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_non_2d() {
        assert!(power_spectrum_2d(&Tensor::zeros(&[2, 2, 2])).is_err());
    }
}
