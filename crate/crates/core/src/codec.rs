//! Convolutional VQ autoencoder with a temporal latent-warping objective.
//!
//! Encoder: two stride-2 3x3 convolutions with SiLU, then a 1x1 projection to
//! `latent_channels`. Decoder: 3x3 conv, nearest 2x upsample, 3x3 conv,
//! nearest 2x upsample, 3x3 conv to one channel. Spatial factor is 4.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use rustfft::num_complex::Complex64;

use crate::error::{ensure_shape, Error, Result};
use crate::flow::{temporal_loss_var, FlowField, OcclusionMask};
use crate::numerics::fft::fft2_in_place;
use crate::numerics::params::init_normal;
use crate::numerics::{AdamW, ParamSet, ParamVars, Rng, Tape, Tensor, Var};

pub const DOWNSAMPLE: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct CodecConfig {
    pub latent_channels: usize,
    pub hidden: usize,
    pub codebook_size: usize,
    pub beta: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        CodecConfig {
            latent_channels: 8,
            hidden: 32,
            codebook_size: 64,
            beta: 0.25,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.hidden == 0 {
            return Err(Error::Config("codec widths must be positive".into()));
        }
        if self.codebook_size < 2 {
            return Err(Error::Config("codebook needs at least 2 entries".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config("commitment weight must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Stage1LossWeights {
    pub vq: f64,
    pub freq: f64,
    pub temporal: f64,
}

impl Default for Stage1LossWeights {
    fn default() -> Self {
        Stage1LossWeights {
            vq: 1.0,
            freq: 0.1,
            temporal: 1.0,
        }
    }
}

impl Stage1LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.vq, self.freq, self.temporal].iter().any(|w| !(*w >= 0.0)) {
            return Err(Error::Config("stage-1 loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Codec {
    pub cfg: CodecConfig,
    pub params: ParamSet,
}

/// Result of nearest-neighbour quantization.
#[derive(Debug, Clone)]
pub struct Quantized {
    pub z_q: Tensor,
    pub indices: Vec<usize>,
    pub vq_loss: f64,
}

/// Nearest codebook row for each spatial cell of `z: [C, h, w]`; ties go to
/// the lowest index.
pub fn nearest_codes(z: &Tensor, codebook: &Tensor) -> Result<Vec<usize>> {
    let (c, h, w) = z.chw()?;
    let (k, cc) = codebook.dims2()?;
    if cc != c {
        return Err(Error::ShapeMismatch {
            expected: vec![k, c],
            actual: codebook.shape().to_vec(),
        });
    }
    let plane = h * w;
    let cb = codebook.data();
    Ok((0..plane)
        .map(|p| {
            let mut best = (f64::INFINITY, 0);
            for j in 0..k {
                let d: f64 = (0..c)
                    .map(|ch| {
                        let diff = z.data()[ch * plane + p] - cb[j * c + ch];
                        diff * diff
                    })
                    .sum();
                if d < best.0 {
                    best = (d, j);
                }
            }
            best.1
        })
        .collect())
}

fn gather_index(indices: &[usize], channels: usize) -> Rc<[usize]> {
    let plane = indices.len();
    (0..channels * plane)
        .map(|i| indices[i % plane] * channels + i / plane)
        .collect()
}

/// Replaces each latent vector with its nearest code. `vq_loss` is
/// `mean((sg(z) - z_q)²) + beta * mean((z - sg(z_q))²)`.
pub fn quantize(z: &Tensor, codebook: &Tensor, beta: f64) -> Result<Quantized> {
    let indices = nearest_codes(z, codebook)?;
    let (c, _, _) = z.chw()?;
    let idx = gather_index(&indices, c);
    let z_q = Tensor::new(z.shape().to_vec(), idx.iter().map(|&i| codebook.data()[i]).collect())?;
    let mse = z.sub(&z_q)?.sq_norm() / z.len() as f64;
    Ok(Quantized {
        z_q,
        indices,
        vq_loss: (1.0 + beta) * mse,
    })
}

/// How the quantizer treats stop-gradient quantities on the tape.
#[derive(Debug, Clone)]
pub enum QuantMode {
    /// Nearest codes and stop-gradient targets from the current values.
    Live,
    /// Codes, `sg(z)` and `sg(z_q)` pinned per frame. The loss is then a
    /// smooth function whose exact gradient equals the straight-through
    /// gradient at the pinning point, which makes it finite-difference
    /// checkable.
    Frozen(Vec<FrozenQuant>),
}

#[derive(Debug, Clone)]
pub struct FrozenQuant {
    pub indices: Vec<usize>,
    pub z: Tensor,
    pub z_q: Tensor,
}

/// Squared-error mean on the tape.
fn mse_var(tape: &Tape, a: Var, b: Var) -> Result<Var> {
    let n = tape.value_ref(a).len() as f64;
    let d = tape.sub(a, b)?;
    let s = tape.sum_sq(d);
    Ok(tape.scale(s, 1.0 / n))
}

fn upsample2(tape: &Tape, x: Var) -> Result<Var> {
    let shape = tape.shape(x);
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (h2, w2) = (2 * h, 2 * w);
    let index: Rc<[usize]> = (0..c * h2 * w2)
        .map(|i| {
            let ch = i / (h2 * w2);
            let y = (i / w2) % h2;
            let x = i % w2;
            ch * h * w + (y / 2) * w + x / 2
        })
        .collect();
    tape.gather(x, index, &[c, h2, w2])
}

/// Builds tape nodes for one frame of the codec forward pass.
pub struct CodecGraph<'a> {
    pub tape: &'a Tape,
    pub vars: ParamVars,
    pub cfg: &'a CodecConfig,
}

impl<'a> CodecGraph<'a> {
    pub fn new(tape: &'a Tape, codec: &'a Codec, trainable: bool) -> Self {
        CodecGraph {
            tape,
            vars: codec.params.register(tape, trainable),
            cfg: &codec.cfg,
        }
    }

    fn conv(&self, x: Var, name: &str, stride: usize, pad: usize) -> Result<Var> {
        let w = self.vars.get(&format!("{name}.w"))?;
        let b = self.vars.get(&format!("{name}.b"))?;
        self.tape.conv2d_bias(x, w, b, stride, pad)
    }

    /// `x: [1, H, W]` to continuous latent `[C, H/4, W/4]`.
    pub fn encode(&self, x: Var) -> Result<Var> {
        let h = self.conv(x, "enc.c1", 2, 1)?;
        let h = self.tape.silu(h);
        let h = self.conv(h, "enc.c2", 2, 1)?;
        let h = self.tape.silu(h);
        self.conv(h, "enc.out", 1, 0)
    }

    /// Latent `[C, h, w]` to frame `[1, 4h, 4w]`.
    pub fn decode(&self, z: Var) -> Result<Var> {
        let h = self.conv(z, "dec.c1", 1, 1)?;
        let h = self.tape.silu(h);
        let h = upsample2(self.tape, h)?;
        let h = self.conv(h, "dec.c2", 1, 1)?;
        let h = self.tape.silu(h);
        let h = upsample2(self.tape, h)?;
        self.conv(h, "dec.out", 1, 1)
    }

    /// Straight-through quantization. Returns (decoder input, vq loss, pinning data).
    pub fn quantize(&self, z: Var, frozen: Option<&FrozenQuant>) -> Result<(Var, Var, FrozenQuant)> {
        let tape = self.tape;
        let codebook = self.vars.get("codebook")?;
        let pin = match frozen {
            Some(f) => f.clone(),
            None => {
                let zv = tape.value(z);
                let q = quantize(&zv, &tape.value(codebook), self.cfg.beta)?;
                FrozenQuant {
                    indices: q.indices,
                    z: zv,
                    z_q: q.z_q,
                }
            }
        };
        let zshape = tape.shape(z);
        ensure_shape(&zshape, pin.z.shape())?;
        let idx = gather_index(&pin.indices, zshape[0]);
        let z_q = tape.gather(codebook, idx, &zshape)?;
        let sg_z = tape.constant(pin.z.clone());
        let sg_zq = tape.constant(pin.z_q.clone());
        let codebook_term = mse_var(tape, sg_z, z_q)?;
        let commit = mse_var(tape, z, sg_zq)?;
        let commit = tape.scale(commit, self.cfg.beta);
        let vq = tape.add(codebook_term, commit)?;
        let offset = tape.constant(pin.z_q.sub(&pin.z)?);
        let z_st = tape.add(z, offset)?;
        Ok((z_st, vq, pin))
    }
}

impl Codec {
    pub fn new(cfg: CodecConfig, rng: &mut Rng) -> Result<Codec> {
        cfg.validate()?;
        let (c, hd) = (cfg.latent_channels, cfg.hidden);
        let mut p = ParamSet::new();
        let mut conv = |name: &str, co: usize, ci: usize, k: usize, rng: &mut Rng| {
            let std = 1.0 / ((ci * k * k) as f64).sqrt();
            p.insert(format!("{name}.w"), init_normal(&[co, ci, k, k], std, rng));
            p.insert(format!("{name}.b"), Tensor::zeros(&[co]));
        };
        conv("enc.c1", hd, 1, 3, rng);
        conv("enc.c2", hd, hd, 3, rng);
        conv("enc.out", c, hd, 1, rng);
        conv("dec.c1", hd, c, 3, rng);
        conv("dec.c2", hd, hd, 3, rng);
        conv("dec.out", 1, hd, 3, rng);
        p.insert("codebook", init_normal(&[cfg.codebook_size, c], 1.0, rng));
        Ok(Codec { cfg, params: p })
    }

    pub fn latent_shape(&self, height: usize, width: usize) -> Result<[usize; 3]> {
        if height % DOWNSAMPLE != 0 || width % DOWNSAMPLE != 0 {
            return Err(Error::invalid(format!(
                "frame {height}x{width} not divisible by {DOWNSAMPLE}"
            )));
        }
        Ok([self.cfg.latent_channels, height / DOWNSAMPLE, width / DOWNSAMPLE])
    }

    fn frame_input(&self, frame: &Tensor) -> Result<Tensor> {
        let (c, h, w) = frame.chw()?;
        if c != 1 {
            return Err(Error::invalid(format!("codec expects one channel, got {c}")));
        }
        self.latent_shape(h, w)?;
        frame.clone().reshape(&[1, h, w])
    }

    /// Continuous latent `[C, H/4, W/4]` of a `[H, W]` or `[1, H, W]` frame.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        let x = self.frame_input(frame)?;
        let tape = Tape::new();
        let g = CodecGraph::new(&tape, self, false);
        let xv = tape.constant(x);
        let z = g.encode(xv)?;
        Ok(tape.value(z))
    }

    /// Frame `[H, W]` from a latent `[C, h, w]`.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let (c, h, w) = z.chw()?;
        ensure_shape(&[self.cfg.latent_channels], &[c])?;
        let tape = Tape::new();
        let g = CodecGraph::new(&tape, self, false);
        let zv = tape.constant(z.clone());
        let x = g.decode(zv)?;
        tape.value(x).reshape(&[h * DOWNSAMPLE, w * DOWNSAMPLE])
    }

    pub fn quantize(&self, z: &Tensor) -> Result<Quantized> {
        quantize(z, self.params.get("codebook")?, self.cfg.beta)
    }

    /// Seeds the codebook with randomly chosen encoder outputs from `frames`.
    pub fn init_codebook_from(&mut self, frames: &[Tensor], rng: &mut Rng) -> Result<()> {
        let mut vectors = Vec::new();
        for f in frames {
            let z = self.encode(f)?;
            let (c, h, w) = z.chw()?;
            for p in 0..h * w {
                vectors.push((0..c).map(|ch| z.data()[ch * h * w + p]).collect::<Vec<_>>());
            }
        }
        if vectors.is_empty() {
            return Err(Error::invalid("codebook init needs at least one frame"));
        }
        let k = self.cfg.codebook_size;
        let cb = self.params.get_mut("codebook")?;
        let c = cb.shape()[1];
        for j in 0..k {
            let v = &vectors[rng.below(vectors.len())];
            for ch in 0..c {
                cb.data_mut()[j * c + ch] = v[ch] + 0.01 * rng.gaussian();
            }
        }
        Ok(())
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        let text = format!(
            "latent_channels = {}\nhidden = {}\ncodebook_size = {}\nbeta = {}\n",
            self.cfg.latent_channels, self.cfg.hidden, self.cfg.codebook_size, self.cfg.beta
        );
        let path = dir.join("codec.cfg");
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Codec> {
        let params = ParamSet::load_dir(dir)?;
        let path = dir.join("codec.cfg");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut cfg = CodecConfig::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format("codec config", line.to_string()))?;
            let bad = || Error::format("codec config", line.to_string());
            match k.trim() {
                "latent_channels" => cfg.latent_channels = v.trim().parse().map_err(|_| bad())?,
                "hidden" => cfg.hidden = v.trim().parse().map_err(|_| bad())?,
                "codebook_size" => cfg.codebook_size = v.trim().parse().map_err(|_| bad())?,
                "beta" => cfg.beta = v.trim().parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        cfg.validate()?;
        ensure_shape(&[cfg.codebook_size, cfg.latent_channels], params.get("codebook")?.shape())?;
        Ok(Codec { cfg, params })
    }
}

/// Focal frequency loss between equal-shape `[H, W]` or `[C, H, W]` tensors.
///
/// With orthonormal 2-D DFT `D = F(x - y)` per channel and `M = max |D|`, the
/// loss is `mean_u (|D_u| / M)^alpha * |D_u|²`, averaged over channels. The
/// spectral weights are differentiated, not detached.
pub struct FocalFrequency {
    pub value: f64,
    /// Gradient with respect to `x`; the gradient for `y` is its negation.
    pub grad: Tensor,
}

pub fn focal_frequency(x: &Tensor, y: &Tensor, alpha: f64) -> Result<FocalFrequency> {
    ensure_shape(x.shape(), y.shape())?;
    let (c, h, w) = x.chw()?;
    let n = h * w;
    let norm = 1.0 / (n as f64).sqrt();
    let mut value = 0.0;
    let mut grad = vec![0.0; x.len()];
    for ch in 0..c {
        let range = ch * n..(ch + 1) * n;
        let mut buf: Vec<Complex64> = x.data()[range.clone()]
            .iter()
            .zip(&y.data()[range.clone()])
            .map(|(a, b)| Complex64::new((a - b) * norm, 0.0))
            .collect();
        fft2_in_place(&mut buf, h, w, false);
        let mags: Vec<f64> = buf.iter().map(|d| d.norm()).collect();
        let (mut top, mut m) = (0, 0.0);
        for (i, &v) in mags.iter().enumerate() {
            if v > m {
                (top, m) = (i, v);
            }
        }
        if m == 0.0 {
            continue;
        }
        let total: f64 = mags.iter().map(|v| v.powf(2.0 + alpha)).sum();
        value += total / (m.powf(alpha) * n as f64);
        // dL/d|D_u| scaled by 1/|D_u| so that the gradient is Re(F⁻¹(g·D)).
        let mut g: Vec<Complex64> = buf
            .iter()
            .zip(&mags)
            .enumerate()
            .map(|(u, (d, &mag))| {
                if mag == 0.0 {
                    return Complex64::new(0.0, 0.0);
                }
                let mut dmag = (2.0 + alpha) * mag.powf(1.0 + alpha) / (m.powf(alpha) * n as f64);
                if u == top {
                    dmag -= alpha * total / (m.powf(alpha + 1.0) * n as f64);
                }
                d * (dmag / mag)
            })
            .collect();
        fft2_in_place(&mut g, h, w, true);
        for (o, v) in grad[range].iter_mut().zip(&g) {
            *o = v.re * norm;
        }
    }
    let inv_c = 1.0 / c as f64;
    Ok(FocalFrequency {
        value: value * inv_c,
        grad: Tensor::new(x.shape().to_vec(), grad.into_iter().map(|g| g * inv_c).collect())?,
    })
}

pub fn focal_frequency_loss(x: &Tensor, y: &Tensor) -> Result<f64> {
    Ok(focal_frequency(x, y, 1.0)?.value)
}

/// Focal frequency loss recorded on a tape.
pub fn focal_frequency_var(tape: &Tape, x: Var, y: Var) -> Result<Var> {
    let ff = focal_frequency(&tape.value_ref(x), &tape.value_ref(y), 1.0)?;
    let neg = ff.grad.scale(-1.0);
    tape.fused_scalar(&[x, y], ff.value, vec![ff.grad, neg])
}

/// A training clip with flows and masks already at latent resolution.
#[derive(Debug, Clone)]
pub struct Clip {
    pub frames: Vec<Tensor>,
    pub flows: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Stage1Loss {
    pub total: f64,
    pub rec: f64,
    pub vq: f64,
    pub freq: f64,
    pub temporal: f64,
}

pub const TEMPORAL_EPS: f64 = 1e-6;

/// Per-frame pinning data for every clip in a batch.
pub type BatchPins = Vec<Vec<FrozenQuant>>;

/// Builds the batch-mean compound loss on `graph`'s tape.
pub fn stage1_loss_var(
    graph: &CodecGraph<'_>,
    batch: &[Clip],
    weights: &Stage1LossWeights,
    mode: &QuantMode,
) -> Result<(Var, Stage1Loss, BatchPins)> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::invalid("empty stage-1 batch"));
    }
    let tape = graph.tape;
    let frozen: Option<&Vec<FrozenQuant>> = match mode {
        QuantMode::Live => None,
        QuantMode::Frozen(p) => Some(p),
    };
    let mut pins: BatchPins = Vec::with_capacity(batch.len());
    let mut terms: Vec<Var> = Vec::new();
    let mut parts = Stage1Loss::default();
    let mut frame_counter = 0;
    let inv_b = 1.0 / batch.len() as f64;
    for clip in batch {
        let n = clip.frames.len();
        if n == 0 {
            return Err(Error::invalid("empty clip"));
        }
        if weights.temporal > 0.0 && (n < 2 || clip.flows.len() != n - 1 || clip.masks.len() != n - 1) {
            return Err(Error::invalid(
                "temporal term needs clips of >= 2 frames with one flow and mask per pair",
            ));
        }
        let inv_n = 1.0 / n as f64;
        let mut latents = Vec::with_capacity(n);
        let mut clip_pins = Vec::with_capacity(n);
        for f in &clip.frames {
            let (c, h, w) = f.chw()?;
            if c != 1 {
                return Err(Error::invalid("stage-1 frames must be single channel"));
            }
            let x = tape.constant(f.clone().reshape(&[1, h, w])?);
            let z = graph.encode(x)?;
            let pin = frozen.and_then(|p| p.get(frame_counter));
            frame_counter += 1;
            let (z_st, vq, pin) = graph.quantize(z, pin)?;
            let rec = graph.decode(z_st)?;
            let l_rec = mse_var(tape, rec, x)?;
            let l_freq = focal_frequency_var(tape, rec, x)?;
            let w = inv_b * inv_n;
            parts.rec += w * tape.scalar(l_rec);
            parts.vq += w * tape.scalar(vq);
            parts.freq += w * tape.scalar(l_freq);
            terms.push(tape.scale(l_rec, w));
            terms.push(tape.scale(vq, w * weights.vq));
            terms.push(tape.scale(l_freq, w * weights.freq));
            latents.push(z);
            clip_pins.push(pin);
        }
        if weights.temporal > 0.0 {
            let w = inv_b / (n - 1) as f64;
            for t in 1..n {
                let lt = temporal_loss_var(tape, latents[t - 1], latents[t], &clip.flows[t - 1], &clip.masks[t - 1], TEMPORAL_EPS)?;
                parts.temporal += w * tape.scalar(lt);
                terms.push(tape.scale(lt, w * weights.temporal));
            }
        }
        pins.push(clip_pins);
    }
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = tape.add(total, t)?;
    }
    parts.total = tape.scalar(total);
    Ok((total, parts, pins))
}

/// Flattens per-clip pins in the frame order used by [`stage1_loss_var`].
pub fn flatten_pins(pins: BatchPins) -> QuantMode {
    QuantMode::Frozen(pins.into_iter().flatten().collect())
}

/// One AdamW step on the compound stage-1 objective.
pub fn stage1_train_step(codec: &mut Codec, opt: &mut AdamW, batch: &[Clip], weights: &Stage1LossWeights) -> Result<Stage1Loss> {
    let (grads, parts) = {
        let tape = Tape::new();
        let graph = CodecGraph::new(&tape, codec, true);
        let (loss, parts, _) = stage1_loss_var(&graph, batch, weights, &QuantMode::Live)?;
        let mut g = tape.backward(loss)?;
        (codec.params.collect_grads(&graph.vars, &mut g), parts)
    };
    if !parts.total.is_finite() {
        return Err(Error::NonFinite("stage-1 loss".into()));
    }
    opt.step(&mut codec.params, &grads)?;
    Ok(parts)
}

/// Mean latent warping error over held-out clips (continuous latents).
pub fn latent_warping_error(codec: &Codec, clips: &[Clip]) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for clip in clips {
        let z: Vec<Tensor> = clip.frames.iter().map(|f| codec.encode(f)).collect::<Result<_>>()?;
        for t in 1..z.len() {
            total += crate::flow::temporal_loss(&z[t - 1], &z[t], &clip.flows[t - 1], &clip.masks[t - 1], TEMPORAL_EPS)?;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::invalid("no frame pairs to evaluate"));
    }
    Ok(total / count as f64)
}
