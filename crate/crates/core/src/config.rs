//! Flat `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::Path;
use std::{fmt, fs};

use crate::codec::{CodecConfig, Stage1LossWeights};
use crate::denoiser::DenoiserConfig;
use crate::error::{Error, Result};
use crate::guidance::GuidanceSettings;
use crate::objectives::{AlignmentWeights, Stage2LossWeights};
use crate::sampler::{Ablation, RefinementSettings, SamplerSettings};
use crate::training::{CorpusConfig, HistoryCurriculum, HistoryJitter, TrainBudget};

/// Scene family written by `generate`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SceneKind {
    Random,
    Static,
}

impl SceneKind {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "random" => Some(SceneKind::Random),
            "static" => Some(SceneKind::Static),
            _ => None,
        }
    }

    fn name(self) -> &'static str {
        match self {
            SceneKind::Random => "random",
            SceneKind::Static => "static",
        }
    }
}

/// Every tunable of a run. `RunConfig::default()` holds the documented defaults.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub sequences: usize,
    pub frames: usize,
    pub flicker: f64,
    pub scene: SceneKind,
    pub latent_channels: usize,
    pub codec_hidden: usize,
    pub codebook_size: usize,
    pub beta: f64,
    pub lambda_vq: f64,
    pub lambda_f: f64,
    pub lambda_t: f64,
    pub clip_len: usize,
    pub stage1_steps: usize,
    pub stage1_batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub model_width: usize,
    pub heads: usize,
    pub blocks: usize,
    pub patch: usize,
    pub history: usize,
    pub prior_steps: usize,
    pub prior_batch: usize,
    pub adapter_steps: usize,
    pub adapter_batch: usize,
    pub lambda_p: f64,
    pub lambda_s: f64,
    pub lambda_g: f64,
    pub lambda_i: f64,
    pub p_empty: f64,
    pub p_baseline: f64,
    pub p_single: f64,
    pub corruption_min: f64,
    pub corruption_max: f64,
    pub max_level: f64,
    pub jitter_variants: usize,
    pub jitter_gain: f64,
    pub jitter_offset: f64,
    pub jitter_field: f64,
    pub single_scale: f64,
    pub steps: usize,
    pub scale: f64,
    pub sigma_stab: f64,
    pub n_ref: usize,
    pub gamma: f64,
    pub lambda_reg: f64,
    pub refine_steps: usize,
    pub refine_step: f64,
    pub w_grad: f64,
    pub w_int: f64,
    pub ablate: String,
    pub parallel_branches: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let corpus = CorpusConfig::default();
        let codec = CodecConfig::default();
        let s1 = Stage1LossWeights::default();
        let den = DenoiserConfig::default();
        let s2 = Stage2LossWeights::default();
        let cur = HistoryCurriculum::default();
        let jit = HistoryJitter::default();
        let g = GuidanceSettings::default();
        let r = RefinementSettings::default();
        RunConfig {
            seed: 1,
            height: corpus.height,
            width: corpus.width,
            sequences: corpus.sequences,
            frames: corpus.frames,
            flicker: corpus.flicker,
            scene: SceneKind::Random,
            latent_channels: codec.latent_channels,
            codec_hidden: codec.hidden,
            codebook_size: codec.codebook_size,
            beta: codec.beta,
            lambda_vq: s1.vq,
            lambda_f: s1.freq,
            lambda_t: s1.temporal,
            clip_len: 4,
            stage1_steps: 600,
            stage1_batch: 16,
            lr: 1e-4,
            weight_decay: 0.01,
            model_width: den.width,
            heads: den.heads,
            blocks: den.blocks,
            patch: den.patch,
            history: den.history,
            prior_steps: 3000,
            prior_batch: 8,
            adapter_steps: 400,
            adapter_batch: 4,
            lambda_p: s2.perc,
            lambda_s: s2.ssim,
            lambda_g: s2.grad,
            lambda_i: s2.int,
            p_empty: cur.p_empty,
            p_baseline: cur.p_baseline,
            p_single: cur.p_single,
            corruption_min: cur.corruption.0,
            corruption_max: cur.corruption.1,
            max_level: cur.max_level,
            jitter_variants: jit.variants,
            jitter_gain: jit.gain,
            jitter_offset: jit.offset,
            jitter_field: jit.field,
            single_scale: jit.single_scale,
            steps: 50,
            scale: g.scale,
            sigma_stab: g.sigma_stab,
            n_ref: r.cadence,
            gamma: r.gamma,
            lambda_reg: r.lambda_reg,
            refine_steps: r.inner_steps,
            refine_step: r.step_size,
            w_grad: r.weights.grad,
            w_int: r.weights.int,
            ablate: "full".into(),
            parallel_branches: true,
        }
    }
}

/// Key and one-line documentation, in serialization order.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for data, training and sampling"),
    ("height", "frame height in pixels (multiple of 4)"),
    ("width", "frame width in pixels (multiple of 4)"),
    ("sequences", "number of generated sequences"),
    ("frames", "frames per generated sequence"),
    ("flicker", "visible-band flicker amplitude"),
    ("scene", "random | static"),
    ("latent_channels", "codec latent channels C"),
    ("codec_hidden", "codec hidden width"),
    ("codebook_size", "VQ codebook entries"),
    ("beta", "VQ commitment weight"),
    ("lambda_vq", "stage-1 VQ weight"),
    ("lambda_f", "stage-1 focal-frequency weight"),
    ("lambda_t", "stage-1 temporal weight"),
    ("clip_len", "frames per stage-1 training clip"),
    ("stage1_steps", "stage-1 optimizer steps"),
    ("stage1_batch", "stage-1 clips per step"),
    ("lr", "AdamW learning rate for every stage"),
    ("weight_decay", "AdamW decoupled weight decay"),
    ("model_width", "denoiser token width"),
    ("heads", "attention heads"),
    ("blocks", "transformer blocks"),
    ("patch", "latent patch size"),
    ("history", "history window T"),
    ("prior_steps", "denoiser prior optimizer steps"),
    ("prior_batch", "denoiser prior examples per step"),
    ("adapter_steps", "stage-2 adapter optimizer steps"),
    ("adapter_batch", "stage-2 examples per step"),
    ("lambda_p", "stage-2 perceptual weight"),
    ("lambda_s", "stage-2 SSIM weight"),
    ("lambda_g", "stage-2 gradient weight"),
    ("lambda_i", "stage-2 intensity weight"),
    ("p_empty", "curriculum: probability of an empty window"),
    ("p_baseline", "curriculum: probability of an all-noise window"),
    ("p_single", "curriculum: probability of a single-frame window"),
    ("corruption_min", "curriculum: lower untagged history corruption"),
    ("corruption_max", "curriculum: upper untagged history corruption"),
    ("max_level", "curriculum: largest tagged modulation level"),
    ("jitter_variants", "artifact draws stored per history frame"),
    ("jitter_gain", "history artifact: gain std"),
    ("jitter_offset", "history artifact: offset std"),
    ("jitter_field", "history artifact: RMS of the smooth additive field"),
    ("single_scale", "artifact multiplier for lone most-recent frames"),
    ("steps", "DDIM sampling steps K"),
    ("scale", "history guidance scale s"),
    ("sigma_stab", "stabilized-history modulation level"),
    ("n_ref", "refine every n_ref sampling steps"),
    ("gamma", "refinement blend weight"),
    ("lambda_reg", "refinement proximity weight"),
    ("refine_steps", "refinement inner descent steps"),
    ("refine_step", "refinement initial step size"),
    ("w_grad", "alignment gradient weight"),
    ("w_int", "alignment intensity weight"),
    ("ablate", "full | hg | adapter | refine | h2"),
    ("parallel_branches", "evaluate guidance branches concurrently"),
];

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        macro_rules! num {
            ($field:ident) => {
                self.$field = parse_num(key, v)?
            };
        }
        match key.trim() {
            "seed" => num!(seed),
            "height" => num!(height),
            "width" => num!(width),
            "sequences" => num!(sequences),
            "frames" => num!(frames),
            "flicker" => num!(flicker),
            "scene" => {
                self.scene = SceneKind::parse(v).ok_or_else(|| Error::Config(format!("unknown scene `{v}`")))?
            }
            "latent_channels" => num!(latent_channels),
            "codec_hidden" => num!(codec_hidden),
            "codebook_size" => num!(codebook_size),
            "beta" => num!(beta),
            "lambda_vq" => num!(lambda_vq),
            "lambda_f" => num!(lambda_f),
            "lambda_t" => num!(lambda_t),
            "clip_len" => num!(clip_len),
            "stage1_steps" => num!(stage1_steps),
            "stage1_batch" => num!(stage1_batch),
            "lr" => num!(lr),
            "weight_decay" => num!(weight_decay),
            "model_width" => num!(model_width),
            "heads" => num!(heads),
            "blocks" => num!(blocks),
            "patch" => num!(patch),
            "history" => num!(history),
            "prior_steps" => num!(prior_steps),
            "prior_batch" => num!(prior_batch),
            "adapter_steps" => num!(adapter_steps),
            "adapter_batch" => num!(adapter_batch),
            "lambda_p" => num!(lambda_p),
            "lambda_s" => num!(lambda_s),
            "lambda_g" => num!(lambda_g),
            "lambda_i" => num!(lambda_i),
            "p_empty" => num!(p_empty),
            "p_baseline" => num!(p_baseline),
            "p_single" => num!(p_single),
            "corruption_min" => num!(corruption_min),
            "corruption_max" => num!(corruption_max),
            "max_level" => num!(max_level),
            "jitter_variants" => num!(jitter_variants),
            "jitter_gain" => num!(jitter_gain),
            "jitter_offset" => num!(jitter_offset),
            "jitter_field" => num!(jitter_field),
            "single_scale" => num!(single_scale),
            "steps" => num!(steps),
            "scale" => num!(scale),
            "sigma_stab" => num!(sigma_stab),
            "n_ref" => num!(n_ref),
            "gamma" => num!(gamma),
            "lambda_reg" => num!(lambda_reg),
            "refine_steps" => num!(refine_steps),
            "refine_step" => num!(refine_step),
            "w_grad" => num!(w_grad),
            "w_int" => num!(w_int),
            "ablate" => {
                Ablation::parse(v)?;
                self.ablate = v.to_string()
            }
            "parallel_branches" => num!(parallel_branches),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Result<String> {
        Ok(match key {
            "seed" => self.seed.to_string(),
            "height" => self.height.to_string(),
            "width" => self.width.to_string(),
            "sequences" => self.sequences.to_string(),
            "frames" => self.frames.to_string(),
            "flicker" => format!("{:?}", self.flicker),
            "scene" => self.scene.name().to_string(),
            "latent_channels" => self.latent_channels.to_string(),
            "codec_hidden" => self.codec_hidden.to_string(),
            "codebook_size" => self.codebook_size.to_string(),
            "beta" => format!("{:?}", self.beta),
            "lambda_vq" => format!("{:?}", self.lambda_vq),
            "lambda_f" => format!("{:?}", self.lambda_f),
            "lambda_t" => format!("{:?}", self.lambda_t),
            "clip_len" => self.clip_len.to_string(),
            "stage1_steps" => self.stage1_steps.to_string(),
            "stage1_batch" => self.stage1_batch.to_string(),
            "lr" => format!("{:?}", self.lr),
            "weight_decay" => format!("{:?}", self.weight_decay),
            "model_width" => self.model_width.to_string(),
            "heads" => self.heads.to_string(),
            "blocks" => self.blocks.to_string(),
            "patch" => self.patch.to_string(),
            "history" => self.history.to_string(),
            "prior_steps" => self.prior_steps.to_string(),
            "prior_batch" => self.prior_batch.to_string(),
            "adapter_steps" => self.adapter_steps.to_string(),
            "adapter_batch" => self.adapter_batch.to_string(),
            "lambda_p" => format!("{:?}", self.lambda_p),
            "lambda_s" => format!("{:?}", self.lambda_s),
            "lambda_g" => format!("{:?}", self.lambda_g),
            "lambda_i" => format!("{:?}", self.lambda_i),
            "p_empty" => format!("{:?}", self.p_empty),
            "p_baseline" => format!("{:?}", self.p_baseline),
            "p_single" => format!("{:?}", self.p_single),
            "corruption_min" => format!("{:?}", self.corruption_min),
            "corruption_max" => format!("{:?}", self.corruption_max),
            "max_level" => format!("{:?}", self.max_level),
            "jitter_variants" => self.jitter_variants.to_string(),
            "jitter_gain" => format!("{:?}", self.jitter_gain),
            "jitter_offset" => format!("{:?}", self.jitter_offset),
            "jitter_field" => format!("{:?}", self.jitter_field),
            "single_scale" => format!("{:?}", self.single_scale),
            "steps" => self.steps.to_string(),
            "scale" => format!("{:?}", self.scale),
            "sigma_stab" => format!("{:?}", self.sigma_stab),
            "n_ref" => self.n_ref.to_string(),
            "gamma" => format!("{:?}", self.gamma),
            "lambda_reg" => format!("{:?}", self.lambda_reg),
            "refine_steps" => self.refine_steps.to_string(),
            "refine_step" => format!("{:?}", self.refine_step),
            "w_grad" => format!("{:?}", self.w_grad),
            "w_int" => format!("{:?}", self.w_int),
            "ablate" => self.ablate.clone(),
            "parallel_branches" => self.parallel_branches.to_string(),
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        })
    }

    /// Parses `key = value` lines over the defaults. `#` starts a comment line.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_string()).map_err(|e| Error::io(path, e))
    }

    /// Applies `key=value` overrides in order.
    pub fn apply_overrides<'a>(&mut self, overrides: impl IntoIterator<Item = &'a str>) -> Result<()> {
        for o in overrides {
            let (k, v) = o
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{o}` is not key=value")))?;
            self.set(k, v)?;
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus().validate()?;
        self.codec().validate()?;
        self.stage1_weights().validate()?;
        self.denoiser(1.0).validate()?;
        self.stage2_weights().validate()?;
        self.sampler()?.validate()?;
        for (name, b) in [
            ("stage-1", self.stage1_budget()),
            ("prior", self.prior_budget()),
            ("adapter", self.adapter_budget()),
        ] {
            b.validate().map_err(|e| Error::Config(format!("{name} budget: {e}")))?;
        }
        if self.clip_len < 2 {
            return Err(Error::Config("clip_len must be at least 2".into()));
        }
        let p = [self.p_empty, self.p_baseline, self.p_single];
        if p.iter().any(|x| !(0.0..=1.0).contains(x)) || p.iter().sum::<f64>() > 1.0 {
            return Err(Error::Config("curriculum probabilities must lie in [0, 1] and sum to at most 1".into()));
        }
        if !(0.0 <= self.corruption_min && self.corruption_min <= self.corruption_max) {
            return Err(Error::Config("need 0 <= corruption_min <= corruption_max".into()));
        }
        let jit = [self.jitter_gain, self.jitter_offset, self.jitter_field, self.single_scale];
        if jit.iter().any(|x| !(*x >= 0.0 && x.is_finite())) {
            return Err(Error::Config("history artifact settings must be finite and >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.max_level) {
            return Err(Error::Config("max_level outside [0, 1]".into()));
        }
        Ok(())
    }

    pub fn corpus(&self) -> CorpusConfig {
        CorpusConfig {
            height: self.height,
            width: self.width,
            sequences: self.sequences,
            frames: self.frames,
            flicker: self.flicker,
        }
    }

    pub fn codec(&self) -> CodecConfig {
        CodecConfig {
            latent_channels: self.latent_channels,
            hidden: self.codec_hidden,
            codebook_size: self.codebook_size,
            beta: self.beta,
        }
    }

    pub fn stage1_weights(&self) -> Stage1LossWeights {
        Stage1LossWeights {
            vq: self.lambda_vq,
            freq: self.lambda_f,
            temporal: self.lambda_t,
        }
    }

    fn budget(&self, steps: usize, batch: usize) -> TrainBudget {
        TrainBudget {
            steps,
            batch,
            lr: self.lr,
            weight_decay: self.weight_decay,
        }
    }

    pub fn stage1_budget(&self) -> TrainBudget {
        self.budget(self.stage1_steps, self.stage1_batch)
    }

    pub fn prior_budget(&self) -> TrainBudget {
        self.budget(self.prior_steps, self.prior_batch)
    }

    pub fn adapter_budget(&self) -> TrainBudget {
        self.budget(self.adapter_steps, self.adapter_batch)
    }

    /// Denoiser shape for a `height x width` frame through the codec.
    pub fn denoiser(&self, latent_scale: f64) -> DenoiserConfig {
        DenoiserConfig {
            width: self.model_width,
            heads: self.heads,
            blocks: self.blocks,
            patch: self.patch,
            history: self.history,
            latent_channels: self.latent_channels,
            latent_height: self.height / crate::codec::DOWNSAMPLE,
            latent_width: self.width / crate::codec::DOWNSAMPLE,
            latent_scale,
            ..DenoiserConfig::default()
        }
    }

    pub fn stage2_weights(&self) -> Stage2LossWeights {
        Stage2LossWeights {
            perc: self.lambda_p,
            ssim: self.lambda_s,
            grad: self.lambda_g,
            int: self.lambda_i,
        }
    }

    pub fn curriculum(&self) -> HistoryCurriculum {
        HistoryCurriculum {
            window: self.history,
            p_empty: self.p_empty,
            p_baseline: self.p_baseline,
            p_single: self.p_single,
            corruption: (self.corruption_min, self.corruption_max),
            max_level: self.max_level,
        }
    }

    pub fn jitter(&self) -> HistoryJitter {
        HistoryJitter {
            variants: self.jitter_variants,
            gain: self.jitter_gain,
            offset: self.jitter_offset,
            field: self.jitter_field,
            single_scale: self.single_scale,
        }
    }

    pub fn sampler(&self) -> Result<SamplerSettings> {
        Ok(SamplerSettings {
            steps: self.steps,
            guidance: GuidanceSettings {
                scale: self.scale,
                sigma_stab: self.sigma_stab,
                window: self.history,
            },
            refine: RefinementSettings {
                gamma: self.gamma,
                lambda_reg: self.lambda_reg,
                inner_steps: self.refine_steps,
                step_size: self.refine_step,
                cadence: self.n_ref,
                weights: AlignmentWeights {
                    grad: self.w_grad,
                    int: self.w_int,
                },
            },
            ablation: Ablation::parse(&self.ablate)?,
            parallel_branches: self.parallel_branches,
        })
    }
}

impl fmt::Display for RunConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut out = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).map_err(|_| fmt::Error)?;
            writeln!(out, "# {doc}\n{key} = {value}")?;
        }
        f.write_str(&out)
    }
}
