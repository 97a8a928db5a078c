//! Synthetic corpora and the training loops for the codec, the denoiser
//! prior and the IR adapter.

use crate::codec::{stage1_train_step, Clip, Codec, CodecGraph, Stage1Loss, Stage1LossWeights, DOWNSAMPLE};
use crate::denoiser::{ConditionAdapter, Denoiser, DenoiserGraph, HistorySlot};
use crate::error::{Error, Result};
use crate::guidance::{modulate, power_law_field};
use crate::numerics::{seeded_gaussian, AdamW, Rng, Tape, Tensor};
use crate::objectives::{structural_loss_var, FusionTargets, Stage2Loss, Stage2LossWeights};
use crate::scenes::{composite_target, generate_sequence, GroundTruthBundle, SceneConfig, MAX_FLICKER, MIN_FRAME_SIZE};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CorpusConfig {
    pub height: usize,
    pub width: usize,
    pub sequences: usize,
    pub frames: usize,
    pub flicker: f64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            height: 16,
            width: 16,
            sequences: 256,
            frames: 12,
            flicker: 0.2,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_FRAME_SIZE || self.width < MIN_FRAME_SIZE {
            return Err(Error::Config(format!("frames must be at least {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE}")));
        }
        if self.height % DOWNSAMPLE != 0 || self.width % DOWNSAMPLE != 0 {
            return Err(Error::Config(format!("frame size must be a multiple of {DOWNSAMPLE}")));
        }
        if self.sequences == 0 || self.frames == 0 {
            return Err(Error::Config("corpus needs at least one sequence and one frame".into()));
        }
        if !(0.0..=MAX_FLICKER).contains(&self.flicker) {
            return Err(Error::Config(format!("flicker must lie in [0, {MAX_FLICKER}]")));
        }
        Ok(())
    }
}

/// Random moving-object scenes, one forked stream per sequence.
pub fn generate_corpus(cfg: &CorpusConfig, rng: &Rng) -> Result<Vec<GroundTruthBundle>> {
    (0..cfg.sequences)
        .map(|i| {
            let mut r = rng.fork(i as u64);
            let scene = SceneConfig::random(cfg.height, cfg.width, cfg.frames, cfg.flicker, &mut r);
            generate_sequence(&scene, &mut r)
        })
        .collect()
}

/// Stage-I clips of `clip_len` frames with motion pooled to latent cells.
/// Every window yields a visible, an infrared and a composite clip.
pub fn stage1_clips(bundles: &[GroundTruthBundle], clip_len: usize) -> Result<Vec<Clip>> {
    if clip_len < 2 {
        return Err(Error::invalid("stage-1 clips need at least two frames"));
    }
    let mut clips = Vec::new();
    for b in bundles {
        let composite: Vec<Tensor> = b
            .ir
            .iter()
            .zip(&b.vi)
            .map(|(i, v)| composite_target(i, v))
            .collect::<Result<_>>()?;
        let mut start = 0;
        while start + clip_len <= b.len() {
            let range = start..start + clip_len;
            let flows = b.flows[start..start + clip_len - 1]
                .iter()
                .map(|f| f.pool(DOWNSAMPLE))
                .collect::<Result<Vec<_>>>()?;
            let masks = b.masks[start..start + clip_len - 1]
                .iter()
                .map(|m| m.pool(DOWNSAMPLE))
                .collect::<Result<Vec<_>>>()?;
            for source in [&b.vi, &b.ir, &composite] {
                clips.push(Clip {
                    frames: source[range.clone()].to_vec(),
                    flows: flows.clone(),
                    masks: masks.clone(),
                });
            }
            start += clip_len;
        }
    }
    Ok(clips)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainBudget {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl TrainBudget {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("training needs batch >= 1, lr > 0 and weight decay >= 0".into()));
        }
        Ok(())
    }
}

fn draw_batch<'a, T>(items: &'a [T], n: usize, rng: &mut Rng) -> Vec<&'a T> {
    (0..n).map(|_| &items[rng.below(items.len())]).collect()
}

/// Runs Stage-I training and returns the per-step loss curve.
pub fn train_stage1(
    codec: &mut Codec,
    clips: &[Clip],
    weights: &Stage1LossWeights,
    budget: &TrainBudget,
    rng: &mut Rng,
) -> Result<Vec<Stage1Loss>> {
    budget.validate()?;
    if clips.is_empty() {
        return Err(Error::invalid("no stage-1 clips"));
    }
    let seed_frames: Vec<Tensor> = clips.iter().flat_map(|c| c.frames.iter().cloned()).collect();
    codec.init_codebook_from(&seed_frames, rng)?;
    let mut opt = AdamW::new(budget.lr, budget.weight_decay);
    let mut curve = Vec::with_capacity(budget.steps);
    for _ in 0..budget.steps {
        let batch: Vec<Clip> = draw_batch(clips, budget.batch, rng).into_iter().cloned().collect();
        curve.push(stage1_train_step(codec, &mut opt, &batch, weights)?);
    }
    Ok(curve)
}

/// Root-mean-square of the codec latents of `frames`.
pub fn latent_rms(codec: &Codec, frames: &[Tensor]) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for f in frames {
        let z = codec.encode(f)?;
        sum += z.sq_norm();
        n += z.len();
    }
    if n == 0 || sum == 0.0 {
        return Err(Error::invalid("cannot derive a latent scale from zero latents"));
    }
    Ok((sum / n as f64).sqrt())
}

/// Per-frame artifacts given to history frames before encoding: a global
/// gain and offset plus a smooth `1/f^2` field on the composite, drawn
/// independently per variant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryJitter {
    /// Variants per frame; 0 stores only the clean latent.
    pub variants: usize,
    pub gain: f64,
    pub offset: f64,
    /// RMS of the smooth additive field.
    pub field: f64,
    /// Artifact multiplier for frames shown as a lone most-recent frame.
    pub single_scale: f64,
}

impl Default for HistoryJitter {
    fn default() -> Self {
        HistoryJitter {
            variants: 4,
            gain: 0.1,
            offset: 0.05,
            field: 0.05,
            single_scale: 10.0,
        }
    }
}

/// One sequence prepared for denoiser training, latents in denoiser units.
#[derive(Debug, Clone)]
pub struct FusionSequence {
    pub ir: Vec<Tensor>,
    pub vi: Vec<Tensor>,
    pub targets: Vec<FusionTargets>,
    pub z_vi: Vec<Tensor>,
    pub z_target: Vec<Tensor>,
    /// Jittered composite latents per frame, used as history.
    pub z_history: Vec<Vec<Tensor>>,
    /// Like `z_history` with artifacts scaled by `single_scale`.
    pub z_single: Vec<Vec<Tensor>>,
}

impl FusionSequence {
    fn history_latent(&self, frame: usize, single: bool, rng: &mut Rng) -> &Tensor {
        let v = if single { &self.z_single[frame] } else { &self.z_history[frame] };
        if v.is_empty() {
            &self.z_target[frame]
        } else {
            &v[rng.below(v.len())]
        }
    }
}

pub fn prepare_sequences(
    bundles: &[GroundTruthBundle],
    codec: &Codec,
    latent_scale: f64,
    jitter: &HistoryJitter,
    rng: &Rng,
) -> Result<Vec<FusionSequence>> {
    let enc = |f: &Tensor| Ok::<_, Error>(codec.encode(f)?.scale(1.0 / latent_scale));
    bundles
        .iter()
        .enumerate()
        .map(|(i, b)| {
            let mut r = rng.fork(i as u64);
            let targets = b
                .ir
                .iter()
                .zip(&b.vi_clean)
                .map(|(i, v)| FusionTargets::new(i, v))
                .collect::<Result<Vec<_>>>()?;
            let mut jittered = |scale: f64| {
                targets
                    .iter()
                    .map(|t| {
                        (0..jitter.variants)
                            .map(|_| {
                                let g = 1.0 + scale * jitter.gain * r.gaussian();
                                let o = scale * jitter.offset * r.gaussian();
                                let (h, w) = t.composite.dims2()?;
                                let field = power_law_field(h, w, 2.0, &mut r)?;
                                let rms = (field.sq_norm() / field.len() as f64).sqrt();
                                let k = if rms > 0.0 { scale * jitter.field / rms } else { 0.0 };
                                let x = t.composite.zip_map(&field, |x, f| (g * x + o + k * f).clamp(0.0, 1.0))?;
                                enc(&x)
                            })
                            .collect::<Result<Vec<_>>>()
                    })
                    .collect::<Result<Vec<_>>>()
            };
            let z_history = jittered(1.0)?;
            let z_single = jittered(jitter.single_scale)?;
            Ok(FusionSequence {
                z_vi: b.vi.iter().map(enc).collect::<Result<_>>()?,
                z_target: targets.iter().map(|t| enc(&t.composite)).collect::<Result<_>>()?,
                z_history,
                z_single,
                ir: b.ir.clone(),
                vi: b.vi.clone(),
                targets,
            })
        })
        .collect()
}

/// How training windows corrupt and select history.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HistoryCurriculum {
    pub window: usize,
    pub p_empty: f64,
    pub p_baseline: f64,
    pub p_single: f64,
    /// Range of the untagged Gaussian corruption added to every real history latent.
    pub corruption: (f64, f64),
    /// Upper end of the tagged modulation level for full windows.
    pub max_level: f64,
}

impl Default for HistoryCurriculum {
    fn default() -> Self {
        HistoryCurriculum {
            window: 8,
            p_empty: 0.1,
            p_baseline: 0.1,
            p_single: 0.3,
            corruption: (0.0, 0.1),
            max_level: 0.1,
        }
    }
}

/// History slots for predicting frame `t` of `seq`.
pub fn sample_history(seq: &FusionSequence, t: usize, cur: &HistoryCurriculum, rng: &mut Rng) -> Result<Vec<HistorySlot>> {
    let available = t.min(cur.window);
    let u = rng.uniform(0.0, 1.0);
    if available == 0 || u < cur.p_empty {
        return Ok(Vec::new());
    }
    let shape = seq.z_target[0].shape().to_vec();
    if u < cur.p_empty + cur.p_baseline {
        return (1..=available)
            .rev()
            .map(|lag| {
                Ok(HistorySlot {
                    latent: seeded_gaussian(&shape, rng)?,
                    lag,
                    level: 1.0,
                })
            })
            .collect();
    }
    let noise = rng.uniform(cur.corruption.0, cur.corruption.1);
    let corrupt = |lag: usize, single: bool, rng: &mut Rng| -> Result<Tensor> {
        let eps = seeded_gaussian(&shape, rng)?;
        seq.history_latent(t - lag, single, rng).axpby(1.0, &eps, noise)
    };
    if u < cur.p_empty + cur.p_baseline + cur.p_single {
        return Ok(vec![HistorySlot {
            latent: corrupt(1, true, rng)?,
            lag: 1,
            level: 0.0,
        }]);
    }
    let level = rng.uniform(0.0, cur.max_level);
    (1..=available)
        .rev()
        .map(|lag| {
            let z = corrupt(lag, false, rng)?;
            Ok(HistorySlot {
                latent: modulate(&z, level, rng)?,
                lag,
                level,
            })
        })
        .collect()
}

/// A drawn training example.
struct Draw<'a> {
    seq: &'a FusionSequence,
    t: usize,
    time: f64,
    eps: Tensor,
    history: Vec<HistorySlot>,
}

fn draw_examples<'a>(
    data: &'a [FusionSequence],
    n: usize,
    cur: &HistoryCurriculum,
    rng: &mut Rng,
) -> Result<Vec<Draw<'a>>> {
    (0..n)
        .map(|_| {
            let seq = &data[rng.below(data.len())];
            let len = seq.z_vi.len();
            let t = rng.below(len);
            let time = rng.uniform(0.02, 1.0);
            let eps = seeded_gaussian(seq.z_vi[t].shape(), rng)?;
            let history = sample_history(seq, t, cur, rng)?;
            Ok(Draw {
                seq,
                t,
                time,
                eps,
                history,
            })
        })
        .collect()
}

fn vp(time: f64) -> (f64, f64) {
    let a = std::f64::consts::FRAC_PI_2 * time;
    (a.cos(), a.sin())
}

/// One prior step: clean-latent regression from the noised visible latent.
pub fn prior_train_step(
    den: &mut Denoiser,
    opt: &mut AdamW,
    data: &[FusionSequence],
    batch: usize,
    cur: &HistoryCurriculum,
    rng: &mut Rng,
) -> Result<f64> {
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("prior step needs data and a positive batch"));
    }
    let draws = draw_examples(data, batch, cur, rng)?;
    let (grads, loss) = {
        let tape = Tape::new();
        let g = DenoiserGraph::new(&tape, den, true);
        let mut total = None;
        for d in &draws {
            let (a, s) = vp(d.time);
            let z_k = tape.constant(d.seq.z_vi[d.t].axpby(a, &d.eps, s)?);
            let v = g.forward(z_k, d.time, &d.history, None)?;
            let z0 = tape.sub(tape.scale(z_k, a), tape.scale(v, s))?;
            let diff = tape.sub(z0, tape.constant(d.seq.z_target[d.t].clone()))?;
            let l = tape.scale(tape.mean(tape.square(diff)), 1.0 / batch as f64);
            total = Some(match total {
                None => l,
                Some(acc) => tape.add(acc, l)?,
            });
        }
        let total = total.expect("non-empty batch");
        let value = tape.scalar(total);
        let mut gr = tape.backward(total)?;
        (den.params.collect_grads(&g.vars, &mut gr), value)
    };
    if !loss.is_finite() {
        return Err(Error::NonFinite("prior loss".into()));
    }
    opt.step(&mut den.params, &grads)?;
    Ok(loss)
}

pub fn train_prior(
    den: &mut Denoiser,
    data: &[FusionSequence],
    budget: &TrainBudget,
    cur: &HistoryCurriculum,
    rng: &mut Rng,
) -> Result<Vec<f64>> {
    budget.validate()?;
    let mut opt = AdamW::new(budget.lr, budget.weight_decay);
    (0..budget.steps)
        .map(|_| prior_train_step(den, &mut opt, data, budget.batch, cur, rng))
        .collect()
}

/// Structural loss of one-step predictions, optionally backpropagated into
/// the adapter. The codec and denoiser stay frozen.
fn stage2_batch(
    codec: &Codec,
    den: &Denoiser,
    adapter: Option<&ConditionAdapter>,
    draws: &[Draw<'_>],
    weights: &Stage2LossWeights,
    want_grads: bool,
) -> Result<(Stage2Loss, Option<crate::numerics::ParamSet>)> {
    let tape = Tape::new();
    let g = DenoiserGraph::new(&tape, den, false);
    let cg = CodecGraph::new(&tape, codec, false);
    let avars = adapter.map(|a| a.params.register(&tape, want_grads));
    let scale = den.cfg.latent_scale;
    let mut total = None;
    let mut report = Stage2Loss::default();
    let inv = 1.0 / draws.len() as f64;
    for d in draws {
        let (a, s) = vp(d.time);
        let z_k = tape.constant(d.seq.z_vi[d.t].axpby(a, &d.eps, s)?);
        let c = match (adapter, &avars) {
            (Some(ad), Some(vars)) => {
                let (_, h, w) = d.seq.ir[d.t].chw()?;
                let ir = tape.constant(d.seq.ir[d.t].clone().reshape(&[1, h, w])?);
                Some(ad.forward(&tape, vars, ir)?)
            }
            _ => None,
        };
        let v = g.forward(z_k, d.time, &d.history, c)?;
        let z0 = tape.sub(tape.scale(z_k, a), tape.scale(v, s))?;
        let frame = cg.decode(tape.scale(z0, scale))?;
        let (l, parts) = structural_loss_var(&tape, frame, &d.seq.targets[d.t], weights, Some(&cg))?;
        report.accumulate(&parts, inv);
        let l = tape.scale(l, inv);
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
    }
    let grads = match (want_grads, adapter, avars, total) {
        (true, Some(ad), Some(vars), Some(total)) if !weights.is_zero() => {
            let mut gr = tape.backward(total)?;
            Some(ad.params.collect_grads(&vars, &mut gr))
        }
        _ => None,
    };
    Ok((report, grads))
}

/// One Stage-II step updating only the adapter.
pub fn stage2_train_step(
    codec: &Codec,
    den: &Denoiser,
    adapter: &mut ConditionAdapter,
    opt: &mut AdamW,
    data: &[FusionSequence],
    batch: usize,
    weights: &Stage2LossWeights,
    cur: &HistoryCurriculum,
    rng: &mut Rng,
) -> Result<Stage2Loss> {
    weights.validate()?;
    if data.is_empty() || batch == 0 {
        return Err(Error::invalid("stage-2 step needs data and a positive batch"));
    }
    let draws = draw_examples(data, batch, cur, rng)?;
    let (loss, grads) = stage2_batch(codec, den, Some(adapter), &draws, weights, true)?;
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("stage-2 loss".into()));
    }
    if let Some(g) = grads {
        opt.step(&mut adapter.params, &g)?;
    }
    Ok(loss)
}

pub fn train_stage2(
    codec: &Codec,
    den: &Denoiser,
    adapter: &mut ConditionAdapter,
    data: &[FusionSequence],
    budget: &TrainBudget,
    weights: &Stage2LossWeights,
    cur: &HistoryCurriculum,
    rng: &mut Rng,
) -> Result<Vec<Stage2Loss>> {
    budget.validate()?;
    let mut opt = AdamW::new(budget.lr, budget.weight_decay);
    (0..budget.steps)
        .map(|_| stage2_train_step(codec, den, adapter, &mut opt, data, budget.batch, weights, cur, rng))
        .collect()
}

/// Mean structural loss over `n` draws from a fixed stream.
pub fn stage2_eval(
    codec: &Codec,
    den: &Denoiser,
    adapter: Option<&ConditionAdapter>,
    data: &[FusionSequence],
    n: usize,
    weights: &Stage2LossWeights,
    cur: &HistoryCurriculum,
    seed: u64,
) -> Result<Stage2Loss> {
    let mut rng = Rng::new(seed);
    let draws = draw_examples(data, n, cur, &mut rng)?;
    Ok(stage2_batch(codec, den, adapter, &draws, weights, false)?.0)
}
