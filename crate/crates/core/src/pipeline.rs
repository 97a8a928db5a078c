//! Stage drivers shared by the command line and the acceptance suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::codec::{latent_warping_error, Codec, Stage1Loss};
use crate::config::{RunConfig, SceneKind};
use crate::denoiser::{ConditionAdapter, Denoiser};
use crate::error::{Error, Result};
use crate::metrics::{MetricsRow, ssim};
use crate::numerics::{Rng, Tensor};
use crate::objectives::Stage2Loss;
use crate::sampler::FusionModels;
use crate::scenes::{export_bundle, generate_sequence, read_manifest, GroundTruthBundle, SceneConfig};
use crate::training::{latent_rms, prepare_sequences, stage1_clips, train_prior, train_stage1, train_stage2};

pub const CODEC_DIR: &str = "codec";
pub const DENOISER_DIR: &str = "denoiser";
pub const ADAPTER_DIR: &str = "adapter";
pub const CORPUS_INDEX: &str = "corpus.txt";

// Stream labels under the run seed.
const DATA: u64 = 1;
const STAGE1: u64 = 2;
const PRIOR: u64 = 3;
const ADAPTER: u64 = 4;
const JITTER: u64 = 5;

/// Scene description and rendered bundle of sequence `index`.
pub fn generate_scene(cfg: &RunConfig, index: usize) -> Result<(SceneConfig, GroundTruthBundle)> {
    let mut rng = Rng::new(cfg.seed).fork(DATA).fork(index as u64);
    let scene = match cfg.scene {
        SceneKind::Random => SceneConfig::random(cfg.height, cfg.width, cfg.frames, cfg.flicker, &mut rng),
        SceneKind::Static => SceneConfig::static_scene(cfg.height, cfg.width, cfg.frames, cfg.flicker),
    };
    let bundle = generate_sequence(&scene, &mut rng)?;
    Ok((scene, bundle))
}

pub fn generate_corpus(cfg: &RunConfig) -> Result<Vec<GroundTruthBundle>> {
    (0..cfg.sequences).map(|i| Ok(generate_scene(cfg, i)?.1)).collect()
}

/// Writes every sequence under `out` plus an index of their manifests.
pub fn write_corpus(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut index = String::new();
    for i in 0..cfg.sequences {
        let (scene, bundle) = generate_scene(cfg, i)?;
        let name = format!("seq_{i:04}");
        export_bundle(&bundle, &scene, cfg.seed, &out.join(&name))?;
        writeln!(index, "{name}/manifest.txt").expect("string write");
    }
    let path = out.join(CORPUS_INDEX);
    fs::write(&path, index).map_err(|e| Error::io(&path, e))?;
    cfg.save(&out.join("config.txt"))?;
    Ok(path)
}

/// Loads every sequence listed in `dir/corpus.txt`.
pub fn read_corpus(dir: &Path) -> Result<Vec<GroundTruthBundle>> {
    let path = dir.join(CORPUS_INDEX);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let bundles = text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| read_manifest(&dir.join(l))?.load_bundle())
        .collect::<Result<Vec<_>>>()?;
    if bundles.is_empty() {
        return Err(Error::format("corpus index", format!("{} lists no sequences", path.display())));
    }
    Ok(bundles)
}

pub struct Stage1Outcome {
    pub codec: Codec,
    pub curve: Vec<Stage1Loss>,
}

pub fn run_stage1(cfg: &RunConfig, corpus: &[GroundTruthBundle]) -> Result<Stage1Outcome> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed).fork(STAGE1);
    let clips = stage1_clips(corpus, cfg.clip_len)?;
    let mut codec = Codec::new(cfg.codec(), &mut rng.fork(0))?;
    let curve = train_stage1(&mut codec, &clips, &cfg.stage1_weights(), &cfg.stage1_budget(), &mut rng.fork(1))?;
    Ok(Stage1Outcome { codec, curve })
}

/// Occlusion-masked latent warping error of `codec` over `corpus`.
pub fn held_out_warping_error(cfg: &RunConfig, codec: &Codec, corpus: &[GroundTruthBundle]) -> Result<f64> {
    latent_warping_error(codec, &stage1_clips(corpus, cfg.clip_len)?)
}

pub struct Stage2Outcome {
    pub denoiser: Denoiser,
    pub adapter: ConditionAdapter,
    pub prior_curve: Vec<f64>,
    pub adapter_curve: Vec<Stage2Loss>,
}

/// Trains the denoiser prior, then the adapter against the frozen prior.
pub fn run_stage2(cfg: &RunConfig, codec: &Codec, corpus: &[GroundTruthBundle]) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let rng = Rng::new(cfg.seed);
    let targets: Vec<Tensor> = corpus
        .iter()
        .map(|b| b.composite_targets())
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let scale = latent_rms(codec, &targets)?;
    let data = prepare_sequences(corpus, codec, scale, &cfg.jitter(), &rng.fork(JITTER))?;
    let cur = cfg.curriculum();
    let prior_rng = rng.fork(PRIOR);
    let mut denoiser = Denoiser::new(cfg.denoiser(scale), &mut prior_rng.fork(0))?;
    let prior_curve = train_prior(&mut denoiser, &data, &cfg.prior_budget(), &cur, &mut prior_rng.fork(1))?;
    let adapter_rng = rng.fork(ADAPTER);
    let mut adapter = ConditionAdapter::new(&denoiser.cfg, &mut adapter_rng.fork(0))?;
    let adapter_curve = train_stage2(
        codec,
        &denoiser,
        &mut adapter,
        &data,
        &cfg.adapter_budget(),
        &cfg.stage2_weights(),
        &cur,
        &mut adapter_rng.fork(1),
    )?;
    Ok(Stage2Outcome {
        denoiser,
        adapter,
        prior_curve,
        adapter_curve,
    })
}

/// Loads codec, denoiser and adapter from a checkpoint directory.
pub fn load_models(dir: &Path) -> Result<FusionModels> {
    let sub = |name: &str| {
        let p = dir.join(name);
        if p.is_dir() {
            Ok(p)
        } else {
            Err(Error::MissingCheckpoint(p))
        }
    };
    let codec = Codec::load(&sub(CODEC_DIR)?)?;
    let denoiser = Denoiser::load(&sub(DENOISER_DIR)?)?;
    let adapter = ConditionAdapter::load(&sub(ADAPTER_DIR)?, &denoiser.cfg)?;
    Ok(FusionModels {
        codec,
        denoiser,
        adapter: Some(adapter),
    })
}

pub fn stage1_curve_csv(curve: &[Stage1Loss]) -> String {
    let mut out = String::from("step,total,rec,vq,freq,temporal\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{:.9},{:.9},{:.9},{:.9},{:.9}",
            l.total, l.rec, l.vq, l.freq, l.temporal
        );
    }
    out
}

pub fn prior_curve_csv(curve: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(out, "{i},{l:.9}");
    }
    out
}

pub fn stage2_curve_csv(curve: &[Stage2Loss]) -> String {
    let mut out = String::from("step,total,perc,ssim,grad,int\n");
    for (i, l) in curve.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{:.9},{:.9},{:.9},{:.9},{:.9}",
            l.total, l.perc, l.ssim, l.grad, l.int
        );
    }
    out
}

/// Mean of the first and last `window` entries.
pub fn curve_ends(curve: &[f64], window: usize) -> Option<(f64, f64)> {
    let w = window.min(curve.len());
    if w == 0 {
        return None;
    }
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    Some((mean(&curve[..w]), mean(&curve[curve.len() - w..])))
}

/// 1 on pixels no object ever covers.
pub fn background_mask(object_masks: &[Tensor]) -> Result<Tensor> {
    let first = object_masks
        .first()
        .ok_or_else(|| Error::invalid("no object masks"))?;
    object_masks
        .iter()
        .try_fold(Tensor::full(first.shape(), 1.0), |acc, m| {
            acc.zip_map(m, |a, b| if b > 0.0 { 0.0 } else { a })
        })
}

/// Mean SSIM of each frame against its target.
pub fn mean_target_ssim(frames: &[Tensor], targets: &[Tensor]) -> Result<f64> {
    if frames.len() != targets.len() || frames.is_empty() {
        return Err(Error::invalid("frames and targets must be non-empty and aligned"));
    }
    let mut sum = 0.0;
    for (f, t) in frames.iter().zip(targets) {
        let (_, h, w) = f.chw()?;
        sum += ssim(&f.clone().reshape(&[h, w])?, t)?;
    }
    Ok(sum / frames.len() as f64)
}

/// Per-run means of a report, one row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub frames: usize,
    pub cc: f64,
    pub en: f64,
    pub ssim: f64,
    pub diff_energy: f64,
    pub warped_residual: f64,
}

impl RunSummary {
    pub fn from_rows(label: &str, rows: &[MetricsRow]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::invalid(format!("run `{label}` has no report rows")));
        }
        let n = rows.len() as f64;
        let mean_opt = |f: fn(&MetricsRow) -> Option<f64>| {
            let v: Vec<f64> = rows.iter().filter_map(f).collect();
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        Ok(RunSummary {
            label: label.to_string(),
            frames: rows.len(),
            cc: rows.iter().map(|r| r.cc).sum::<f64>() / n,
            en: rows.iter().map(|r| r.en).sum::<f64>() / n,
            ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
            diff_energy: mean_opt(|r| r.diff_energy),
            warped_residual: mean_opt(|r| r.warped_residual),
        })
    }
}

pub const SUMMARY_HEADER: &str = "run,frames,cc,en,ssim,diff_energy,warped_residual";

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = format!("{SUMMARY_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            r.label, r.frames, r.cc, r.en, r.ssim, r.diff_energy, r.warped_residual
        );
    }
    out
}

/// Aligned text table; the lowest diff_energy is starred.
pub fn summary_text(rows: &[RunSummary]) -> String {
    let best = rows
        .iter()
        .map(|r| r.diff_energy)
        .fold(f64::INFINITY, f64::min);
    let width = rows.iter().map(|r| r.label.len()).max().unwrap_or(3).max(3);
    let mut out = format!(
        "{:<width$}  {:>6}  {:>8}  {:>8}  {:>8}  {:>12}  {:>12}\n",
        "run", "frames", "cc", "en", "ssim", "diff_energy", "warped_res"
    );
    for r in rows {
        let mark = if r.diff_energy == best { "*" } else { " " };
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>8.4}  {:>8.4}  {:>8.4}  {:>12.6e}{mark} {:>12.6e}",
            r.label, r.frames, r.cc, r.en, r.ssim, r.diff_energy, r.warped_residual
        );
    }
    out
}
