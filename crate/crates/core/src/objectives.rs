//! Pixel-space fusion objectives: the structural training loss and the
//! alignment energy minimized during latent refinement.

use std::rc::Rc;

use crate::codec::{Codec, CodecGraph};
use crate::error::{ensure_shape, Error, Result};
use crate::metrics::{gaussian_window, SSIM_C1, SSIM_C2, SSIM_SIGMA, SSIM_WINDOW};
use crate::numerics::{Tape, Tensor, Var};
use crate::scenes::composite_target;

/// Forward differences `(d/dx [H, W-1], d/dy [H-1, W])` of a `[H, W]` frame.
pub fn image_gradients(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (_, h, w) = x.chw()?;
    let d = x.data();
    let gx = Tensor::from_fn(&[h, w - 1], |k| {
        let (i, j) = (k / (w - 1), k % (w - 1));
        d[i * w + j + 1] - d[i * w + j]
    });
    let gy = Tensor::from_fn(&[h - 1, w], |k| d[k + w] - d[k]);
    Ok((gx, gy))
}

/// Tape version of [`image_gradients`] for `[H, W]` or `[1, H, W]` inputs.
pub fn gradients_var(tape: &Tape, x: Var) -> Result<(Var, Var)> {
    let s = tape.shape(x);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    let right: Rc<[usize]> = (0..h * (w - 1)).map(|k| (k / (w - 1)) * w + k % (w - 1) + 1).collect();
    let left: Rc<[usize]> = right.iter().map(|&p| p - 1).collect();
    let gx = tape.sub(tape.gather(x, right, &[h, w - 1])?, tape.gather(x, left, &[h, w - 1])?)?;
    let down: Rc<[usize]> = (w..h * w).collect();
    let up: Rc<[usize]> = (0..(h - 1) * w).collect();
    let gy = tape.sub(tape.gather(x, down, &[h - 1, w])?, tape.gather(x, up, &[h - 1, w])?)?;
    Ok((gx, gy))
}

/// Per-element entry of larger magnitude; ties keep `a`.
fn max_abs_select(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_map(b, |x, y| if y.abs() > x.abs() { y } else { x })
}

/// Per-pixel pseudo-fusion targets built from an IR/VI pair.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTargets {
    /// `max(IR, VI)`, shape `[H, W]`.
    pub composite: Tensor,
    /// Larger-magnitude horizontal gradient of the two sources.
    pub grad_x: Tensor,
    pub grad_y: Tensor,
}

impl FusionTargets {
    pub fn new(ir: &Tensor, vi: &Tensor) -> Result<Self> {
        ensure_shape(ir.shape(), vi.shape())?;
        let (c, h, w) = ir.chw()?;
        if c != 1 || h < 2 || w < 2 {
            return Err(Error::invalid(format!("fusion targets need a [H, W] frame, got {:?}", ir.shape())));
        }
        let ir = ir.clone().reshape(&[h, w])?;
        let vi = vi.clone().reshape(&[h, w])?;
        let (ix, iy) = image_gradients(&ir)?;
        let (vx, vy) = image_gradients(&vi)?;
        Ok(FusionTargets {
            composite: composite_target(&ir, &vi)?,
            grad_x: max_abs_select(&ix, &vx)?,
            grad_y: max_abs_select(&iy, &vy)?,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        let s = self.composite.shape();
        (s[0], s[1])
    }
}

/// Mean local SSIM on the tape, matching [`crate::metrics::ssim`].
pub fn ssim_var(tape: &Tape, x: Var, y: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let x = tape.reshape(x, &[1, h, w])?;
    let y = tape.reshape(y, &[1, h, w])?;
    let win = tape.constant(gaussian_window(SSIM_WINDOW, SSIM_SIGMA).reshape(&[1, 1, SSIM_WINDOW, SSIM_WINDOW])?);
    let blur = |v: Var| tape.conv2d(v, win, 1, 0);
    let (mx, my) = (blur(x)?, blur(y)?);
    let mxx = tape.mul(mx, mx)?;
    let myy = tape.mul(my, my)?;
    let mxy = tape.mul(mx, my)?;
    let vx = tape.sub(blur(tape.mul(x, x)?)?, mxx)?;
    let vy = tape.sub(blur(tape.mul(y, y)?)?, myy)?;
    let cxy = tape.sub(blur(tape.mul(x, y)?)?, mxy)?;
    let num = tape.mul(
        tape.add_scalar(tape.scale(mxy, 2.0), SSIM_C1),
        tape.add_scalar(tape.scale(cxy, 2.0), SSIM_C2),
    )?;
    let den = tape.mul(
        tape.add_scalar(tape.add(mxx, myy)?, SSIM_C1),
        tape.add_scalar(tape.add(vx, vy)?, SSIM_C2),
    )?;
    Ok(tape.mean(tape.div(num, den)?))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage2LossWeights {
    pub perc: f64,
    pub ssim: f64,
    pub grad: f64,
    pub int: f64,
}

impl Default for Stage2LossWeights {
    fn default() -> Self {
        Stage2LossWeights {
            perc: 0.1,
            ssim: 1.0,
            grad: 1.0,
            int: 1.0,
        }
    }
}

impl Stage2LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("perc", self.perc), ("ssim", self.ssim), ("grad", self.grad), ("int", self.int)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("stage-2 weight {name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.perc == 0.0 && self.ssim == 0.0 && self.grad == 0.0 && self.int == 0.0
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage2Loss {
    pub total: f64,
    pub perc: f64,
    pub ssim: f64,
    pub grad: f64,
    pub int: f64,
}

impl Stage2Loss {
    pub fn accumulate(&mut self, other: &Stage2Loss, weight: f64) {
        self.total += weight * other.total;
        self.perc += weight * other.perc;
        self.ssim += weight * other.ssim;
        self.grad += weight * other.grad;
        self.int += weight * other.int;
    }
}

fn mean_sq_diff(tape: &Tape, a: Var, b: &Tensor) -> Result<Var> {
    let d = tape.sub(a, tape.constant(b.clone()))?;
    Ok(tape.mean(tape.square(d)))
}

/// Weighted structural loss of a predicted frame `[H, W]` (or `[1, H, W]`).
/// Terms with zero weight are skipped. `encoder` supplies the feature space
/// for the perceptual term.
pub fn structural_loss_var(
    tape: &Tape,
    pred: Var,
    targets: &FusionTargets,
    weights: &Stage2LossWeights,
    encoder: Option<&CodecGraph>,
) -> Result<(Var, Stage2Loss)> {
    let (h, w) = targets.dims();
    let pred = tape.reshape(pred, &[h, w])?;
    let mut terms: Vec<Var> = Vec::new();
    let mut report = Stage2Loss::default();
    if weights.int > 0.0 {
        let l = mean_sq_diff(tape, pred, &targets.composite)?;
        report.int = tape.scalar(l);
        terms.push(tape.scale(l, weights.int));
    }
    if weights.grad > 0.0 {
        let (gx, gy) = gradients_var(tape, pred)?;
        let sx = tape.sum_sq(tape.sub(gx, tape.constant(targets.grad_x.clone()))?);
        let sy = tape.sum_sq(tape.sub(gy, tape.constant(targets.grad_y.clone()))?);
        let n = (targets.grad_x.len() + targets.grad_y.len()) as f64;
        let l = tape.scale(tape.add(sx, sy)?, 1.0 / n);
        report.grad = tape.scalar(l);
        terms.push(tape.scale(l, weights.grad));
    }
    if weights.ssim > 0.0 {
        let s = ssim_var(tape, pred, tape.constant(targets.composite.clone()))?;
        let l = tape.add_scalar(tape.scale(s, -1.0), 1.0);
        report.ssim = tape.scalar(l);
        terms.push(tape.scale(l, weights.ssim));
    }
    if weights.perc > 0.0 {
        let enc = encoder.ok_or_else(|| Error::invalid("perceptual term needs a frozen encoder"))?;
        let fp = enc.encode(tape.reshape(pred, &[1, h, w])?)?;
        let ft = enc.encode(tape.constant(targets.composite.clone().reshape(&[1, h, w])?))?;
        let ft = tape.detach(ft);
        let l = tape.mean(tape.square(tape.sub(fp, ft)?));
        report.perc = tape.scalar(l);
        terms.push(tape.scale(l, weights.perc));
    }
    let total = match terms.split_first() {
        None => tape.constant(Tensor::scalar(0.0)),
        Some((first, rest)) => rest.iter().try_fold(*first, |acc, &t| tape.add(acc, t))?,
    };
    report.total = tape.scalar(total);
    Ok((total, report))
}

/// Weights of the alignment energy used by latent refinement.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentWeights {
    pub grad: f64,
    pub int: f64,
}

impl Default for AlignmentWeights {
    fn default() -> Self {
        AlignmentWeights { grad: 1.0, int: 1.0 }
    }
}

/// `w_g ||grad(x) - G||^2 + w_i ||x - max(IR, VI)||^2` as plain sums of squares.
pub fn alignment_energy_var(tape: &Tape, x: Var, targets: &FusionTargets, weights: &AlignmentWeights) -> Result<Var> {
    let (h, w) = targets.dims();
    let x = tape.reshape(x, &[h, w])?;
    let (gx, gy) = gradients_var(tape, x)?;
    let sx = tape.sum_sq(tape.sub(gx, tape.constant(targets.grad_x.clone()))?);
    let sy = tape.sum_sq(tape.sub(gy, tape.constant(targets.grad_y.clone()))?);
    let g = tape.scale(tape.add(sx, sy)?, weights.grad);
    let i = tape.sum_sq(tape.sub(x, tape.constant(targets.composite.clone()))?);
    tape.add(g, tape.scale(i, weights.int))
}

/// Data term of the refinement objective as a function of the latent.
pub trait RefineEnergy {
    /// Energy and its gradient with respect to `z`.
    fn energy(&self, z: &Tensor) -> Result<(f64, Tensor)>;
}

/// Alignment energy evaluated on the frozen decoder's output.
pub struct DecodedAlignment<'a> {
    pub codec: &'a Codec,
    pub targets: &'a FusionTargets,
    pub weights: AlignmentWeights,
    /// Latents handed to the decoder are `z * latent_scale`.
    pub latent_scale: f64,
}

impl RefineEnergy for DecodedAlignment<'_> {
    fn energy(&self, z: &Tensor) -> Result<(f64, Tensor)> {
        let tape = Tape::new();
        let graph = CodecGraph::new(&tape, self.codec, false);
        let zv = tape.param(z.clone());
        let x = graph.decode(tape.scale(zv, self.latent_scale))?;
        let e = alignment_energy_var(&tape, x, self.targets, &self.weights)?;
        let value = tape.scalar(e);
        let mut grads = tape.backward(e)?;
        let g = grads.take(zv).unwrap_or_else(|| Tensor::zeros(z.shape()));
        Ok((value, g))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::ssim;
    use crate::numerics::{grad_check, Rng};

    fn random(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[h, w], |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn tape_ssim_matches_metric() {
        let (a, b) = (random(16, 16, 1), random(16, 16, 2));
        let tape = Tape::new();
        let s = ssim_var(&tape, tape.constant(a.clone()), tape.constant(b.clone())).unwrap();
        assert!((tape.scalar(s) - ssim(&a, &b).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn max_abs_gradient_targets() {
        let ir = Tensor::new(vec![2, 2], vec![0.0, 1.0, 0.0, 0.0]).unwrap();
        let vi = Tensor::new(vec![2, 2], vec![0.5, 0.0, 0.0, 0.3]).unwrap();
        let t = FusionTargets::new(&ir, &vi).unwrap();
        assert_eq!(t.composite.data(), &[0.5, 1.0, 0.0, 0.3]);
        assert_eq!(t.grad_x.data(), &[1.0, 0.3]);
        assert_eq!(t.grad_y.data(), &[-0.5, -1.0]);
    }

    #[test]
    fn intensity_term_zero_on_target() {
        let (ir, vi) = (random(16, 16, 3), random(16, 16, 4));
        let t = FusionTargets::new(&ir, &vi).unwrap();
        let tape = Tape::new();
        let pred = tape.constant(t.composite.clone());
        let w = Stage2LossWeights {
            perc: 0.0,
            ..Stage2LossWeights::default()
        };
        let (_, loss) = structural_loss_var(&tape, pred, &t, &w, None).unwrap();
        assert_eq!(loss.int, 0.0);
        assert!(loss.ssim.abs() < 1e-12);
        let zero = Stage2LossWeights {
            perc: 0.0,
            ssim: 0.0,
            grad: 0.0,
            int: 0.0,
        };
        let (l, r) = structural_loss_var(&tape, pred, &t, &zero, None).unwrap();
        assert_eq!(tape.scalar(l), 0.0);
        assert_eq!(r.total, 0.0);
    }

    #[test]
    fn structural_loss_gradient() {
        let (ir, vi) = (random(16, 16, 5), random(16, 16, 6));
        let t = FusionTargets::new(&ir, &vi).unwrap();
        let x = random(16, 16, 7);
        let w = Stage2LossWeights {
            perc: 0.0,
            ..Stage2LossWeights::default()
        };
        let r = grad_check(|tape, v| Ok(structural_loss_var(tape, v, &t, &w, None)?.0), &x, 1e-5).unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }

    #[test]
    fn alignment_energy_gradient() {
        let (ir, vi) = (random(8, 8, 8), random(8, 8, 9));
        let t = FusionTargets::new(&ir, &vi).unwrap();
        let x = random(8, 8, 10);
        let r = grad_check(
            |tape, v| alignment_energy_var(tape, v, &t, &AlignmentWeights::default()),
            &x,
            1e-5,
        )
        .unwrap();
        assert!(r.passed, "max rel error {}", r.max_rel_error);
    }
}
