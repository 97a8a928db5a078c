//! Backward bilinear warping, block-matching flow, forward-backward
//! occlusion masks and the occlusion-aware temporal warping loss.

use std::rc::Rc;

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::tape::BilinearTaps;
use crate::numerics::{Tape, Tensor, Var};

/// Displacements `[2, H, W]`: channel 0 is dx, channel 1 is dy.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField(Tensor);

/// Binary `[H, W]` validity mask; 0 marks cells without a source.
#[derive(Debug, Clone, PartialEq)]
pub struct OcclusionMask(Tensor);

impl FlowField {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 2 {
            return Err(Error::InvalidShape(t.shape().to_vec()));
        }
        t.check_finite("flow field")?;
        Ok(FlowField(t))
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField(Tensor::zeros(&[2, h, w]))
    }

    pub fn uniform(h: usize, w: usize, dx: f64, dy: f64) -> Self {
        let mut t = Tensor::zeros(&[2, h, w]);
        t.data_mut()[..h * w].fill(dx);
        t.data_mut()[h * w..].fill(dy);
        FlowField(t)
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[1], self.0.shape()[2])
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    /// (dx, dy) at flat cell index `p`.
    pub fn at(&self, p: usize) -> (f64, f64) {
        let (h, w) = self.dims();
        (self.0.data()[p], self.0.data()[h * w + p])
    }

    /// Average-pools displacements over `factor`×`factor` cells and divides
    /// by `factor`, giving displacements in units of the coarse grid.
    pub fn pool(&self, factor: usize) -> Result<FlowField> {
        let (h, w) = self.dims();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!("cannot pool {h}x{w} by {factor}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Tensor::zeros(&[2, ho, wo]);
        let norm = (factor * factor * factor) as f64;
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    out.data_mut()[c * ho * wo + (y / factor) * wo + x / factor] +=
                        self.0.data()[c * h * w + y * w + x] / norm;
                }
            }
        }
        Ok(FlowField(out))
    }
}

impl OcclusionMask {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::InvalidShape(t.shape().to_vec()));
        }
        if t.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::invalid("occlusion mask must be binary"));
        }
        Ok(OcclusionMask(t))
    }

    pub fn ones(h: usize, w: usize) -> Self {
        OcclusionMask(Tensor::full(&[h, w], 1.0))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.0.shape()[0], self.0.shape()[1])
    }

    pub fn count(&self) -> f64 {
        self.0.sum()
    }

    /// A coarse cell is valid only if every fine cell inside it is valid.
    pub fn pool(&self, factor: usize) -> Result<OcclusionMask> {
        let (h, w) = self.dims();
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::invalid(format!("cannot pool {h}x{w} by {factor}")));
        }
        let (ho, wo) = (h / factor, w / factor);
        let mut out = Tensor::full(&[ho, wo], 1.0);
        for y in 0..h {
            for x in 0..w {
                let o = &mut out.data_mut()[(y / factor) * wo + x / factor];
                *o = o.min(self.0.data()[y * w + x]);
            }
        }
        Ok(OcclusionMask(out))
    }
}

fn spatial(z: &Tensor) -> Result<(usize, usize, usize)> {
    z.chw()
}

/// Bilinear taps sampling the source at `p - flow(p)`, clamped to the border.
pub fn bilinear_taps(flow: &FlowField) -> Rc<[BilinearTaps]> {
    let (h, w) = flow.dims();
    let mut taps = Vec::with_capacity(h * w);
    for y in 0..h {
        for x in 0..w {
            let (dx, dy) = flow.at(y * w + x);
            let sy = (y as f64 - dy).clamp(0.0, (h - 1) as f64);
            let sx = (x as f64 - dx).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
            taps.push([
                (y0 * w + x0, (1.0 - fy) * (1.0 - fx)),
                (y0 * w + x1, (1.0 - fy) * fx),
                (y1 * w + x0, fy * (1.0 - fx)),
                (y1 * w + x1, fy * fx),
            ]);
        }
    }
    taps.into()
}

/// Backward warp of `z` (`[H, W]` or `[C, H, W]`) by `flow`.
pub fn warp_bilinear(z: &Tensor, flow: &FlowField) -> Result<Tensor> {
    let (_, h, w) = spatial(z)?;
    ensure_shape(&[h, w], &[flow.dims().0, flow.dims().1])?;
    let tape = Tape::new();
    let v = tape.constant(z.clone());
    let out = tape.warp(v, bilinear_taps(flow))?;
    Ok(tape.value(out))
}

/// Differentiable warp on a tape.
pub fn warp_var(tape: &Tape, z: Var, flow: &FlowField) -> Result<Var> {
    let shape = tape.shape(z);
    let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
    ensure_shape(&[h, w], &[flow.dims().0, flow.dims().1])?;
    tape.warp(z, bilinear_taps(flow))
}

/// Integer block matching. For each `block`×`block` tile of `curr`, picks the
/// displacement d within `radius` minimizing the mean absolute difference
/// between `curr(p)` and `prev(p - d)` over in-bounds pixels. Ties go to the
/// smallest |d|, then to the lexicographically smallest (dy, dx).
pub fn estimate_flow(prev: &Tensor, curr: &Tensor, block: usize, radius: usize) -> Result<FlowField> {
    let (h, w) = curr.dims2()?;
    ensure_shape(curr.shape(), prev.shape())?;
    if block < 4 || radius < 1 {
        return Err(Error::invalid("block must be >= 4 and radius >= 1"));
    }
    if block > h || block > w {
        return Err(Error::invalid(format!("block {block} larger than frame {h}x{w}")));
    }
    let r = radius as i64;
    let mut candidates: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect();
    candidates.sort_by_key(|&(dy, dx)| (dy * dy + dx * dx, dy, dx));
    let mut out = FlowField::zeros(h, w);
    let (pd, cd) = (prev.data(), curr.data());
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let area = ((ey - by) * (ex - bx)) as f64;
            let mut best = (f64::INFINITY, (0i64, 0i64));
            for &(dy, dx) in &candidates {
                let (mut sad, mut n) = (0.0, 0usize);
                for y in by..ey {
                    let sy = y as i64 - dy;
                    if sy < 0 || sy >= h as i64 {
                        continue;
                    }
                    for x in bx..ex {
                        let sx = x as i64 - dx;
                        if sx < 0 || sx >= w as i64 {
                            continue;
                        }
                        sad += (cd[y * w + x] - pd[sy as usize * w + sx as usize]).abs();
                        n += 1;
                    }
                }
                if (n as f64) < 0.5 * area {
                    continue;
                }
                let cost = sad / n as f64;
                if cost < best.0 {
                    best = (cost, (dy, dx));
                }
            }
            let (dy, dx) = best.1;
            for y in by..ey {
                for x in bx..ex {
                    out.0.data_mut()[y * w + x] = dx as f64;
                    out.0.data_mut()[h * w + y * w + x] = dy as f64;
                }
            }
        }
    }
    Ok(out)
}

/// Forward-backward consistency: 0 where
/// |fwd(p) + bwd(p - fwd(p))| > tau or the source falls outside the grid.
pub fn occlusion_mask(flow_fwd: &FlowField, flow_bwd: &FlowField, tau: f64) -> Result<OcclusionMask> {
    ensure_shape(flow_fwd.tensor().shape(), flow_bwd.tensor().shape())?;
    let (h, w) = flow_fwd.dims();
    let taps = bilinear_taps(flow_fwd);
    let mut mask = Tensor::zeros(&[h, w]);
    let plane = h * w;
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let (dx, dy) = flow_fwd.at(p);
            let (sy, sx) = (y as f64 - dy, x as f64 - dx);
            if sy < 0.0 || sx < 0.0 || sy > (h - 1) as f64 || sx > (w - 1) as f64 {
                continue;
            }
            let sample = |c: usize| -> f64 {
                taps[p]
                    .iter()
                    .map(|&(i, wt)| wt * flow_bwd.tensor().data()[c * plane + i])
                    .sum()
            };
            let (ex, ey) = (dx + sample(0), dy + sample(1));
            if (ex * ex + ey * ey).sqrt() <= tau {
                mask.data_mut()[p] = 1.0;
            }
        }
    }
    Ok(OcclusionMask(mask))
}

fn check_temporal_args(z_prev: &[usize], z_curr: &[usize], flow: &FlowField, mask: &OcclusionMask, eps: f64) -> Result<()> {
    if !(eps > 0.0) {
        return Err(Error::invalid("temporal loss eps must be positive"));
    }
    ensure_shape(z_prev, z_curr)?;
    let n = z_curr.len();
    if n < 2 {
        return Err(Error::InvalidShape(z_curr.to_vec()));
    }
    let hw = [z_curr[n - 2], z_curr[n - 1]];
    ensure_shape(&hw, &[flow.dims().0, flow.dims().1])?;
    ensure_shape(&hw, &[mask.dims().0, mask.dims().1])
}

/// `||M ⊙ (warp(z_prev) - z_curr)||² / (||M||₁ + eps)` on the tape. The mask
/// is broadcast over channels; `||M||₁` counts spatial cells.
pub fn temporal_loss_var(tape: &Tape, z_prev: Var, z_curr: Var, flow: &FlowField, mask: &OcclusionMask, eps: f64) -> Result<Var> {
    check_temporal_args(&tape.shape(z_prev), &tape.shape(z_curr), flow, mask, eps)?;
    let warped = warp_var(tape, z_prev, flow)?;
    let diff = tape.sub(warped, z_curr)?;
    let plane = mask.tensor().len();
    let channels = tape.value_ref(z_curr).len() / plane;
    let m = tape.constant(mask.tensor().clone().reshape(&[plane])?);
    let flat = tape.reshape(diff, &[channels * plane])?;
    let masked = tape.broadcast_mul(flat, m, 1)?;
    let num = tape.sum_sq(masked);
    Ok(tape.scale(num, 1.0 / (mask.count() + eps)))
}

pub fn temporal_loss(z_prev: &Tensor, z_curr: &Tensor, flow: &FlowField, mask: &OcclusionMask, eps: f64) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(z_prev.clone());
    let b = tape.constant(z_curr.clone());
    let l = temporal_loss_var(&tape, a, b, flow, mask, eps)?;
    Ok(tape.scalar(l))
}
