//! History-conditioned latent denoiser and the zero-initialized IR adapter.
//!
//! The current noisy latent is split into `patch`×`patch` tokens. Each block
//! lets current tokens attend over a window made of embedded history tokens
//! followed by the current tokens themselves. History tokens carry a
//! positional embedding for their lag and a tag embedding for their noise
//! level; they provide keys and values only and are re-normalized per block.
//! The network predicts velocity `v`, with `z0 = alpha * z_k - sigma * v`.

use std::fs;
use std::path::Path;
use std::rc::Rc;

use crate::error::{ensure_shape, Error, Result};
use crate::numerics::params::init_normal;
use crate::numerics::{softmax_lastdim, ParamSet, ParamVars, Rng, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserConfig {
    pub width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    /// History budget T.
    pub history: usize,
    pub latent_channels: usize,
    pub latent_height: usize,
    pub latent_width: usize,
    pub mlp_ratio: usize,
    pub time_features: usize,
    /// Codec latents are divided by this before entering the denoiser.
    pub latent_scale: f64,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig {
            width: 64,
            heads: 4,
            blocks: 4,
            patch: 2,
            history: 8,
            latent_channels: 8,
            latent_height: 4,
            latent_width: 4,
            mlp_ratio: 4,
            time_features: 16,
            latent_scale: 1.0,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return bad("head count must divide a positive width");
        }
        if self.patch == 0 || self.latent_height % self.patch != 0 || self.latent_width % self.patch != 0 {
            return bad("patch size must divide the latent grid");
        }
        if self.blocks == 0 || self.history == 0 || self.latent_channels == 0 {
            return bad("blocks, history and latent channels must be positive");
        }
        if self.time_features < 2 || self.time_features % 2 != 0 || self.mlp_ratio == 0 {
            return bad("time features must be even and >= 2; mlp ratio positive");
        }
        if !(self.latent_scale > 0.0) {
            return bad("latent scale must be positive");
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        (self.latent_height / self.patch) * (self.latent_width / self.patch)
    }

    pub fn token_dim(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn latent_shape(&self) -> [usize; 3] {
        [self.latent_channels, self.latent_height, self.latent_width]
    }

    pub fn to_text(&self) -> String {
        format!(
            "width = {}\nheads = {}\nblocks = {}\npatch = {}\nhistory = {}\nlatent_channels = {}\nlatent_height = {}\nlatent_width = {}\nmlp_ratio = {}\ntime_features = {}\nlatent_scale = {:?}\n",
            self.width,
            self.heads,
            self.blocks,
            self.patch,
            self.history,
            self.latent_channels,
            self.latent_height,
            self.latent_width,
            self.mlp_ratio,
            self.time_features,
            self.latent_scale
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = DenoiserConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let bad = || Error::Config(format!("denoiser config line `{line}`"));
            let (k, v) = line.split_once('=').ok_or_else(bad)?;
            let v = v.trim();
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k.trim() {
                "width" => cfg.width = int()?,
                "heads" => cfg.heads = int()?,
                "blocks" => cfg.blocks = int()?,
                "patch" => cfg.patch = int()?,
                "history" => cfg.history = int()?,
                "latent_channels" => cfg.latent_channels = int()?,
                "latent_height" => cfg.latent_height = int()?,
                "latent_width" => cfg.latent_width = int()?,
                "mlp_ratio" => cfg.mlp_ratio = int()?,
                "time_features" => cfg.time_features = int()?,
                "latent_scale" => cfg.latent_scale = v.parse().map_err(|_| bad())?,
                _ => return Err(bad()),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// One history frame in the attention window.
#[derive(Debug, Clone, PartialEq)]
pub struct HistorySlot {
    /// Latent `[C, h, w]`, already modulated.
    pub latent: Tensor,
    /// 1 for the most recent frame.
    pub lag: usize,
    /// Noise level tag in [0, 1].
    pub level: f64,
}

/// Checks that slots fit the configured window.
pub fn validate_window(cfg: &DenoiserConfig, slots: &[HistorySlot]) -> Result<()> {
    if slots.len() > cfg.history {
        return Err(Error::invalid(format!(
            "window holds {} history frames, budget is {}",
            slots.len(),
            cfg.history
        )));
    }
    for s in slots {
        ensure_shape(&cfg.latent_shape(), s.latent.shape())?;
        if s.lag == 0 || s.lag > cfg.history {
            return Err(Error::invalid(format!("history lag {} outside 1..={}", s.lag, cfg.history)));
        }
        if !(0.0..=1.0).contains(&s.level) {
            return Err(Error::invalid(format!("history level {} outside [0, 1]", s.level)));
        }
    }
    Ok(())
}

/// Single-head scaled dot-product attention `softmax(Q K^T / sqrt(d)) V`.
pub fn anchored_attention(q: &Tensor, k: &Tensor, v: &Tensor, d_head: usize) -> Result<Tensor> {
    let (n, dq) = q.dims2()?;
    let (m, dk) = k.dims2()?;
    let (mv, _) = v.dims2()?;
    if d_head == 0 || dq != dk || m != mv || m == 0 {
        return Err(Error::invalid(format!(
            "attention shapes Q {:?}, K {:?}, V {:?}, d_head {d_head}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let scores = q.matmul(&k.transpose2()?)?.scale(1.0 / (d_head as f64).sqrt());
    let attn = softmax_lastdim(&scores)?;
    debug_assert_eq!(attn.shape(), &[n, m]);
    attn.matmul(v)
}

fn linear_init(p: &mut ParamSet, name: &str, din: usize, dout: usize, rng: &mut Rng) {
    p.insert(format!("{name}.w"), init_normal(&[din, dout], 1.0 / (din as f64).sqrt(), rng));
    p.insert(format!("{name}.b"), Tensor::zeros(&[dout]));
}

fn norm_init(p: &mut ParamSet, name: &str, d: usize) {
    p.insert(format!("{name}.g"), Tensor::full(&[d], 1.0));
    p.insert(format!("{name}.b"), Tensor::zeros(&[d]));
}

/// Position table `[frames * tokens, width]` initialized as a spatial term
/// shared by all frames plus a smaller per-frame term.
fn init_positions(frames: usize, tokens: usize, d: usize, rng: &mut Rng) -> Tensor {
    let spatial = init_normal(&[tokens, d], 0.5, rng);
    let temporal = init_normal(&[frames, d], 0.1, rng);
    Tensor::from_fn(&[frames * tokens, d], |k| {
        let (row, c) = (k / d, k % d);
        spatial.data()[(row % tokens) * d + c] + temporal.data()[(row / tokens) * d + c]
    })
}

#[derive(Debug, Clone)]
pub struct Denoiser {
    pub cfg: DenoiserConfig,
    pub params: ParamSet,
}

impl Denoiser {
    pub fn new(cfg: DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let (d, pd) = (cfg.width, cfg.token_dim());
        let mut p = ParamSet::new();
        linear_init(&mut p, "embed", pd, d, rng);
        p.insert("pos", init_positions(cfg.history + 1, cfg.tokens(), d, rng));
        p.insert("tag", init_normal(&[2, d], 0.1, rng));
        linear_init(&mut p, "time1", cfg.time_features, d, rng);
        linear_init(&mut p, "time2", d, d, rng);
        for b in 0..cfg.blocks {
            let pre = format!("block{b}");
            norm_init(&mut p, &format!("{pre}.ln1"), d);
            norm_init(&mut p, &format!("{pre}.lnkv"), d);
            norm_init(&mut p, &format!("{pre}.ln2"), d);
            for proj in ["q", "k", "v", "o"] {
                linear_init(&mut p, &format!("{pre}.{proj}"), d, d, rng);
            }
            linear_init(&mut p, &format!("{pre}.mlp1"), d, d * cfg.mlp_ratio, rng);
            linear_init(&mut p, &format!("{pre}.mlp2"), d * cfg.mlp_ratio, d, rng);
        }
        norm_init(&mut p, "out.ln", d);
        p.insert("out.w", Tensor::zeros(&[d, pd]));
        p.insert("out.b", Tensor::zeros(&[pd]));
        Ok(Denoiser { cfg, params: p })
    }

    /// Velocity for the current noisy latent `z_k` at diffusion time `t`.
    pub fn predict_velocity(&self, z_k: &Tensor, t: f64, slots: &[HistorySlot], c_struct: Option<&Tensor>) -> Result<Tensor> {
        let tape = Tape::new();
        let g = DenoiserGraph::new(&tape, self, false);
        let z = tape.constant(z_k.clone());
        let c = c_struct.map(|c| tape.constant(c.clone()));
        let v = g.forward(z, t, slots, c)?;
        Ok(tape.value(v))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)?;
        let path = dir.join("denoiser.cfg");
        fs::write(&path, self.cfg.to_text()).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let params = ParamSet::load_dir(dir)?;
        let path = dir.join("denoiser.cfg");
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let cfg = DenoiserConfig::from_text(&text)?;
        ensure_shape(&[cfg.width, cfg.token_dim()], params.get("out.w")?.shape())?;
        Ok(Denoiser { cfg, params })
    }
}

/// Gather index selecting columns `[start, start + len)` of a `[rows, cols]` matrix.
fn column_index(rows: usize, cols: usize, start: usize, len: usize) -> Rc<[usize]> {
    (0..rows * len).map(|i| (i / len) * cols + start + i % len).collect()
}

/// Sinusoidal features of a diffusion time in [0, 1].
pub fn time_features(t: f64, n: usize) -> Tensor {
    let half = n / 2;
    let mut out = vec![0.0; n];
    for i in 0..half {
        let freq = (-(1000f64).ln() * i as f64 / half as f64).exp();
        let arg = t * 1000.0 * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Tensor::from_vec(out)
}

/// Tape-level forward pass of the denoiser.
pub struct DenoiserGraph<'a> {
    pub tape: &'a Tape,
    pub vars: ParamVars,
    pub cfg: &'a DenoiserConfig,
    patch_index: Rc<[usize]>,
    unpatch_index: Rc<[usize]>,
}

impl<'a> DenoiserGraph<'a> {
    pub fn new(tape: &'a Tape, den: &'a Denoiser, trainable: bool) -> Self {
        let cfg = &den.cfg;
        let (c, h, w, p) = (cfg.latent_channels, cfg.latent_height, cfg.latent_width, cfg.patch);
        let (gh, gw) = (h / p, w / p);
        let pd = cfg.token_dim();
        // token (i, j), feature (ch, dy, dx) <- latent (ch, i*p+dy, j*p+dx)
        let patch_index: Rc<[usize]> = (0..gh * gw * pd)
            .map(|k| {
                let (tok, f) = (k / pd, k % pd);
                let (i, j) = (tok / gw, tok % gw);
                let (ch, dy, dx) = (f / (p * p), (f / p) % p, f % p);
                ch * h * w + (i * p + dy) * w + j * p + dx
            })
            .collect();
        let mut unpatch = vec![0; c * h * w];
        for (k, &src) in patch_index.iter().enumerate() {
            unpatch[src] = k;
        }
        DenoiserGraph {
            tape,
            vars: den.params.register(tape, trainable),
            cfg,
            patch_index,
            unpatch_index: unpatch.into(),
        }
    }

    fn v(&self, name: &str) -> Result<Var> {
        self.vars.get(name)
    }

    fn linear(&self, x: Var, name: &str) -> Result<Var> {
        self.tape.linear(x, self.v(&format!("{name}.w"))?, self.v(&format!("{name}.b"))?)
    }

    fn norm(&self, x: Var, name: &str) -> Result<Var> {
        self.tape.layer_norm(x, self.v(&format!("{name}.g"))?, self.v(&format!("{name}.b"))?)
    }

    pub fn patchify(&self, z: Var) -> Result<Var> {
        ensure_shape(&self.cfg.latent_shape(), &self.tape.shape(z))?;
        self.tape.gather(z, self.patch_index.clone(), &[self.cfg.tokens(), self.cfg.token_dim()])
    }

    pub fn unpatchify(&self, tokens: Var) -> Result<Var> {
        self.tape.gather(tokens, self.unpatch_index.clone(), &self.cfg.latent_shape())
    }

    fn pos_rows(&self, slot: usize) -> Result<Var> {
        let (n, d) = (self.cfg.tokens(), self.cfg.width);
        let index: Rc<[usize]> = (slot * n * d..(slot + 1) * n * d).collect();
        self.tape.gather(self.v("pos")?, index, &[n, d])
    }

    fn embed_tokens(&self, z: Var, slot: usize) -> Result<Var> {
        let tokens = self.patchify(z)?;
        let e = self.linear(tokens, "embed")?;
        let pos = self.pos_rows(slot)?;
        self.tape.add(e, pos)
    }

    /// Embedded history tokens `[slots * n, D]`, or `None` for an empty window.
    pub fn history_tokens(&self, slots: &[HistorySlot]) -> Result<Option<Var>> {
        validate_window(self.cfg, slots)?;
        if slots.is_empty() {
            return Ok(None);
        }
        let tape = self.tape;
        let mut parts = Vec::with_capacity(slots.len());
        for s in slots {
            let z = tape.constant(s.latent.clone());
            let e = self.embed_tokens(z, self.cfg.history - s.lag)?;
            let feats = tape.constant(Tensor::new(vec![1, 2], vec![s.level, s.level * s.level])?);
            let tag = tape.matmul(feats, self.v("tag")?)?;
            let tag = tape.reshape(tag, &[self.cfg.width])?;
            parts.push(tape.broadcast_add(e, tag, 1)?);
        }
        Ok(Some(tape.concat(&parts)?))
    }

    fn attention(&self, x: Var, memory: Option<Var>, pre: &str) -> Result<Var> {
        let tape = self.tape;
        let (n, d, dh) = (self.cfg.tokens(), self.cfg.width, self.cfg.head_dim());
        let xn = self.norm(x, &format!("{pre}.ln1"))?;
        let kv_in = match memory {
            Some(m) => {
                let mn = self.norm(m, &format!("{pre}.lnkv"))?;
                tape.concat(&[mn, xn])?
            }
            None => xn,
        };
        let rows = tape.shape(kv_in)[0];
        let q = self.linear(xn, &format!("{pre}.q"))?;
        let k = self.linear(kv_in, &format!("{pre}.k"))?;
        let v = self.linear(kv_in, &format!("{pre}.v"))?;
        let wo = self.v(&format!("{pre}.o.w"))?;
        let mut out: Option<Var> = None;
        for h in 0..self.cfg.heads {
            let qh = tape.gather(q, column_index(n, d, h * dh, dh), &[n, dh])?;
            let kh = tape.gather(k, column_index(rows, d, h * dh, dh), &[rows, dh])?;
            let vh = tape.gather(v, column_index(rows, d, h * dh, dh), &[rows, dh])?;
            let scores = tape.matmul_nt(qh, kh)?;
            let scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
            let attn = tape.softmax_rows(scores)?;
            let ctx = tape.matmul(attn, vh)?;
            let wo_h = tape.gather(wo, (h * dh * d..(h + 1) * dh * d).collect(), &[dh, d])?;
            let proj = tape.matmul(ctx, wo_h)?;
            out = Some(match out {
                Some(o) => tape.add(o, proj)?,
                None => proj,
            });
        }
        let out = out.expect("at least one head");
        tape.broadcast_add(out, self.v(&format!("{pre}.o.b"))?, 1)
    }

    fn time_embedding(&self, t: f64) -> Result<Var> {
        let tape = self.tape;
        let f = tape.constant(time_features(t, self.cfg.time_features).reshape(&[1, self.cfg.time_features])?);
        let h = self.linear(f, "time1")?;
        let h = tape.silu(h);
        let h = self.linear(h, "time2")?;
        tape.reshape(h, &[self.cfg.width])
    }

    /// Velocity `[C, h, w]`. `c_struct`, when given, is `[tokens, width]`.
    pub fn forward(&self, z_k: Var, t: f64, slots: &[HistorySlot], c_struct: Option<Var>) -> Result<Var> {
        let tape = self.tape;
        let mut x = self.embed_tokens(z_k, self.cfg.history)?;
        let temb = self.time_embedding(t)?;
        x = tape.broadcast_add(x, temb, 1)?;
        if let Some(c) = c_struct {
            x = tape.add(x, c)?;
        }
        let memory = self.history_tokens(slots)?;
        for b in 0..self.cfg.blocks {
            let pre = format!("block{b}");
            let a = self.attention(x, memory, &pre)?;
            x = tape.add(x, a)?;
            let h = self.norm(x, &format!("{pre}.ln2"))?;
            let h = self.linear(h, &format!("{pre}.mlp1"))?;
            let h = tape.silu(h);
            let h = self.linear(h, &format!("{pre}.mlp2"))?;
            x = tape.add(x, h)?;
        }
        let x = self.norm(x, "out.ln")?;
        let y = self.linear(x, "out")?;
        self.unpatchify(y)
    }
}

/// Zero-initialized structural adapter from an IR frame to token embeddings.
#[derive(Debug, Clone)]
pub struct ConditionAdapter {
    pub params: ParamSet,
    pub patch: usize,
}

pub const ADAPTER_HIDDEN: usize = 32;

impl ConditionAdapter {
    pub fn new(cfg: &DenoiserConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let hd = ADAPTER_HIDDEN;
        let mut p = ParamSet::new();
        p.insert("c1.w", init_normal(&[hd, 1, 3, 3], 1.0 / 3.0, rng));
        p.insert("c1.b", Tensor::zeros(&[hd]));
        p.insert("c2.w", init_normal(&[hd, hd, 3, 3], 1.0 / ((hd * 9) as f64).sqrt(), rng));
        p.insert("c2.b", Tensor::zeros(&[hd]));
        p.insert("out.w", Tensor::zeros(&[cfg.width, hd, cfg.patch, cfg.patch]));
        p.insert("out.b", Tensor::zeros(&[cfg.width]));
        Ok(ConditionAdapter { params: p, patch: cfg.patch })
    }

    /// Structural tokens `[tokens, width]` for an IR frame.
    pub fn adapt_condition(&self, ir: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let vars = self.params.register(&tape, false);
        let (_, h, w) = ir.chw()?;
        let x = tape.constant(ir.clone().reshape(&[1, h, w])?);
        let c = self.forward(&tape, &vars, x)?;
        Ok(tape.value(c))
    }

    pub fn forward(&self, tape: &Tape, vars: &ParamVars, ir: Var) -> Result<Var> {
        let shape = tape.shape(ir);
        let (h, w) = (shape[shape.len() - 2], shape[shape.len() - 1]);
        let f = 4 * self.patch;
        if h % f != 0 || w % f != 0 {
            return Err(Error::invalid(format!("IR frame {h}x{w} not divisible by {f}")));
        }
        let x = tape.conv2d_bias(ir, vars.get("c1.w")?, vars.get("c1.b")?, 2, 1)?;
        let x = tape.silu(x);
        let x = tape.conv2d_bias(x, vars.get("c2.w")?, vars.get("c2.b")?, 2, 1)?;
        let x = tape.silu(x);
        let y = tape.conv2d_bias(x, vars.get("out.w")?, vars.get("out.b")?, self.patch, 0)?;
        let s = tape.shape(y);
        let (d, n) = (s[0], s[1] * s[2]);
        let index: Rc<[usize]> = (0..n * d).map(|i| (i % d) * n + i / d).collect();
        tape.gather(y, index, &[n, d])
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.params.save_dir(dir)
    }

    pub fn load(dir: &Path, cfg: &DenoiserConfig) -> Result<Self> {
        let params = ParamSet::load_dir(dir)?;
        ensure_shape(
            &[cfg.width, ADAPTER_HIDDEN, cfg.patch, cfg.patch],
            params.get("out.w")?.shape(),
        )?;
        Ok(ConditionAdapter { params, patch: cfg.patch })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> DenoiserConfig {
        DenoiserConfig {
            width: 16,
            heads: 2,
            blocks: 2,
            history: 3,
            ..DenoiserConfig::default()
        }
    }

    #[test]
    fn singleton_and_uniform_attention() {
        let q = Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.0, 1.0]).unwrap();
        let k = Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        let v = Tensor::new(vec![1, 2], vec![7.0, -2.0]).unwrap();
        let out = anchored_attention(&q, &k, &v, 3).unwrap();
        assert_eq!(out.data(), &[7.0, -2.0, 7.0, -2.0]);
        let k = Tensor::new(vec![3, 3], vec![1.0; 9]).unwrap();
        let v = Tensor::new(vec![3, 1], vec![1.0, 2.0, 6.0]).unwrap();
        let out = anchored_attention(&q, &k, &v, 3).unwrap();
        for o in out.data() {
            assert!((o - 3.0).abs() < 1e-12);
        }
        assert!(anchored_attention(&q, &v, &v, 3).is_err());
    }

    #[test]
    fn zero_output_projection_gives_zero_velocity() {
        let cfg = small_cfg();
        let den = Denoiser::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let mut rng = Rng::new(2);
        let z = init_normal(&cfg.latent_shape(), 1.0, &mut rng);
        let v = den.predict_velocity(&z, 0.5, &[], None).unwrap();
        assert_eq!(v.shape(), &cfg.latent_shape());
        assert_eq!(v.max_abs(), 0.0);
    }

    #[test]
    fn window_validation() {
        let cfg = small_cfg();
        let den = Denoiser::new(cfg.clone(), &mut Rng::new(1)).unwrap();
        let z = Tensor::zeros(&cfg.latent_shape());
        let slot = |lag| HistorySlot {
            latent: z.clone(),
            lag,
            level: 0.0,
        };
        assert!(den.predict_velocity(&z, 0.5, &[slot(4)], None).is_err());
        assert!(den.predict_velocity(&z, 0.5, &[slot(1), slot(2), slot(3), slot(1)], None).is_err());
        assert!(den.predict_velocity(&z, 0.5, &[slot(1), slot(3)], None).is_ok());
    }

    #[test]
    fn fresh_adapter_outputs_zero() {
        let cfg = small_cfg();
        let ad = ConditionAdapter::new(&cfg, &mut Rng::new(4)).unwrap();
        let ir = Tensor::from_fn(&[16, 16], |i| (i % 7) as f64 / 7.0);
        let c = ad.adapt_condition(&ir).unwrap();
        assert_eq!(c.shape(), &[cfg.tokens(), cfg.width]);
        assert_eq!(c.max_abs(), 0.0);
    }

    #[test]
    fn config_text_round_trip() {
        let cfg = DenoiserConfig {
            latent_scale: 0.7312,
            ..DenoiserConfig::default()
        };
        assert_eq!(DenoiserConfig::from_text(&cfg.to_text()).unwrap(), cfg);
        assert!(DenoiserConfig::from_text("depth = 3").is_err());
    }
}
