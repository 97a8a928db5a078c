//! Tensor arithmetic, seeded randomness, reverse-mode gradients and FFTs.

pub mod fft;
pub mod gradcheck;
pub mod io;
pub mod linalg;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use fft::power_spectrum_2d;
pub use gradcheck::{grad_check, grad_check_coords, GradCheckReport};
pub use params::{AdamW, ParamSet, ParamVars};
pub use rng::{seeded_gaussian, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

use crate::error::{Error, Result};

/// Softmax over the last axis of a plain tensor.
pub fn softmax_lastdim(x: &Tensor) -> Result<Tensor> {
    let cols = *x.shape().last().unwrap_or(&0);
    if cols == 0 || x.is_empty() {
        return Err(Error::invalid("softmax over an empty axis"));
    }
    let mut out = x.clone();
    for row in out.data_mut().chunks_exact_mut(cols) {
        tape::softmax_in_place(row);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_uniform_and_stable() {
        let s = softmax_lastdim(&Tensor::from_vec(vec![0.0, 0.0, 0.0])).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let s = softmax_lastdim(&Tensor::from_vec(vec![1000.0, 0.0])).unwrap();
        assert!((s.data()[0] - 1.0).abs() < 1e-12);
        assert!(s.data()[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant() {
        let x = Tensor::new(vec![2, 3], vec![0.1, -2.0, 3.0, 1.0, 1.0, 0.5]).unwrap();
        let a = softmax_lastdim(&x).unwrap();
        let b = softmax_lastdim(&x.map(|v| v + 17.25)).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-15);
        for row in a.data().chunks(3) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}
