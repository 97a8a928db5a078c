//! Noise schedule, deterministic DDIM steps, latent refinement and the
//! autoregressive fusion rollout.

use std::collections::VecDeque;

use crate::codec::Codec;
use crate::denoiser::{ConditionAdapter, Denoiser};
use crate::error::{ensure_shape, Error, Result};
use crate::flow::{estimate_flow, occlusion_mask, FlowField, OcclusionMask};
use crate::guidance::{compose_guidance, make_history_config, GuidanceSettings, HistoryVariant};
use crate::metrics::{frame_diff_energy, ls_slope, warped_residual, MetricsRow};
use crate::numerics::{seeded_gaussian, Rng, Tensor};
use crate::objectives::{AlignmentWeights, DecodedAlignment, FusionTargets, RefineEnergy};

/// Variance-preserving cosine schedule over `K` steps; index 0 is clean data.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    alphas: Vec<f64>,
    sigmas: Vec<f64>,
}

pub fn build_schedule(steps: usize) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(Error::invalid("schedule needs at least one step"));
    }
    let (alphas, sigmas) = (0..=steps)
        .map(|k| {
            let a = std::f64::consts::FRAC_PI_2 * k as f64 / steps as f64;
            (a.cos(), a.sin())
        })
        .unzip();
    Ok(NoiseSchedule { alphas, sigmas })
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.alphas.len() - 1
    }

    pub fn alpha(&self, k: usize) -> f64 {
        self.alphas[k]
    }

    pub fn sigma(&self, k: usize) -> f64 {
        self.sigmas[k]
    }

    /// Continuous time in [0, 1] fed to the denoiser.
    pub fn time(&self, k: usize) -> f64 {
        k as f64 / self.steps() as f64
    }

    fn check(&self, k: usize) -> Result<()> {
        if k > self.steps() {
            return Err(Error::invalid(format!("step {k} outside 0..={}", self.steps())));
        }
        Ok(())
    }

    /// `alpha_k * z0 + sigma_k * eps`.
    pub fn noise(&self, z0: &Tensor, eps: &Tensor, k: usize) -> Result<Tensor> {
        self.check(k)?;
        z0.axpby(self.alphas[k], eps, self.sigmas[k])
    }

    /// Velocity that maps `z_k` exactly onto `z0`.
    pub fn oracle_velocity(&self, z_k: &Tensor, z0: &Tensor, k: usize) -> Result<Tensor> {
        self.check(k)?;
        let (a, s) = (self.alphas[k], self.sigmas[k]);
        if s == 0.0 {
            return Ok(Tensor::zeros(z_k.shape()));
        }
        // v = alpha * eps - sigma * z0 with eps = (z_k - alpha z0) / sigma
        let eps = z_k.axpby(1.0 / s, z0, -a / s)?;
        eps.axpby(a, z0, -s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DdimStep {
    pub z_prev: Tensor,
    pub z0_hat: Tensor,
    pub eps_hat: Tensor,
}

/// One deterministic step from `k` to `k - 1` (or the identity at `k = 0`).
pub fn ddim_step(z_k: &Tensor, v: &Tensor, k: usize, sched: &NoiseSchedule) -> Result<DdimStep> {
    sched.check(k)?;
    ensure_shape(z_k.shape(), v.shape())?;
    let (a, s) = (sched.alpha(k), sched.sigma(k));
    let z0_hat = z_k.axpby(a, v, -s)?;
    let eps_hat = z_k.axpby(s, v, a)?;
    let z_prev = if k == 0 {
        z0_hat.clone()
    } else {
        ddim_update(&z0_hat, &eps_hat, k - 1, sched)?
    };
    Ok(DdimStep {
        z_prev,
        z0_hat,
        eps_hat,
    })
}

/// Re-noises a clean estimate to step `k`: `alpha_k * z0 + sigma_k * eps`.
pub fn ddim_update(z0: &Tensor, eps: &Tensor, k: usize, sched: &NoiseSchedule) -> Result<Tensor> {
    sched.noise(z0, eps, k)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RefinementSettings {
    /// Blend weight gamma of the refined latent.
    pub gamma: f64,
    pub lambda_reg: f64,
    pub inner_steps: usize,
    pub step_size: f64,
    /// Refine when the step index is a multiple of this.
    pub cadence: usize,
    pub weights: AlignmentWeights,
}

impl Default for RefinementSettings {
    fn default() -> Self {
        RefinementSettings {
            gamma: 0.3,
            lambda_reg: 1.0,
            inner_steps: 10,
            step_size: 0.1,
            cadence: 5,
            weights: AlignmentWeights::default(),
        }
    }
}

impl RefinementSettings {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("gamma {} outside [0, 1]", self.gamma)));
        }
        if !(self.lambda_reg >= 0.0) || !(self.step_size > 0.0) || self.cadence == 0 {
            return Err(Error::Config(
                "refinement needs lambda_reg >= 0, positive step size and cadence".into(),
            ));
        }
        if !(self.weights.grad >= 0.0 && self.weights.int >= 0.0) {
            return Err(Error::Config("alignment weights must be >= 0".into()));
        }
        Ok(())
    }

    /// Whether refinement runs at sampling index `i` (0 for the first step).
    pub fn applies_at(&self, i: usize) -> bool {
        i % self.cadence == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Refinement {
    /// `(1 - gamma) * z0_hat + gamma * z_star`.
    pub latent: Tensor,
    pub z_star: Tensor,
    /// Objective value after each accepted iterate, starting at `z0_hat`.
    pub objective: Vec<f64>,
}

const MAX_HALVINGS: usize = 40;

/// Gradient descent with backtracking on `E(z) + lambda_reg ||z - z0_hat||^2`
/// starting from `z0_hat`, then blended back.
pub fn refine_latent(z0_hat: &Tensor, energy: &dyn RefineEnergy, settings: &RefinementSettings) -> Result<Refinement> {
    settings.validate()?;
    let objective = |z: &Tensor| -> Result<(f64, Tensor)> {
        let (e, g) = energy.energy(z)?;
        let d = z.sub(z0_hat)?;
        let value = e + settings.lambda_reg * d.sq_norm();
        Ok((value, g.axpby(1.0, &d, 2.0 * settings.lambda_reg)?))
    };
    let mut z = z0_hat.clone();
    let (mut f, mut g) = objective(&z)?;
    if !f.is_finite() {
        return Err(Error::NonFinite("refinement energy at the initial latent".into()));
    }
    let mut trace = vec![f];
    let mut step = settings.step_size;
    'outer: for _ in 0..settings.inner_steps {
        let mut eta = step;
        for _ in 0..MAX_HALVINGS {
            let cand = z.axpby(1.0, &g, -eta)?;
            let (fc, gc) = objective(&cand)?;
            if !fc.is_finite() || !gc.data().iter().all(|v| v.is_finite()) {
                break 'outer;
            }
            if fc <= f {
                z = cand;
                f = fc;
                g = gc;
                trace.push(f);
                step = eta;
                continue 'outer;
            }
            eta *= 0.5;
        }
        break;
    }
    let latent = if settings.gamma == 0.0 {
        z0_hat.clone()
    } else {
        z0_hat.axpby(1.0 - settings.gamma, &z, settings.gamma)?
    };
    Ok(Refinement {
        latent,
        z_star: z,
        objective: trace,
    })
}

/// Components removed in ablation runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablation {
    /// Use only the baseline branch.
    pub no_guidance: bool,
    pub no_adapter: bool,
    pub no_refinement: bool,
    /// Replace the context-suppressed branch by the baseline branch.
    pub no_context_branch: bool,
}

impl Ablation {
    pub fn parse(name: &str) -> Result<Ablation> {
        let mut a = Ablation::default();
        match name {
            "none" | "full" => {}
            "hg" => a.no_guidance = true,
            "adapter" => a.no_adapter = true,
            "refine" | "lr" => a.no_refinement = true,
            "h2" => a.no_context_branch = true,
            other => return Err(Error::invalid(format!("unknown ablation `{other}` (hg|adapter|refine|h2)"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> &'static str {
        match (self.no_guidance, self.no_adapter, self.no_refinement, self.no_context_branch) {
            (false, false, false, false) => "full",
            (true, false, false, false) => "w/o HG",
            (false, true, false, false) => "w/o Adapter",
            (false, false, true, false) => "w/o LR",
            (false, false, false, true) => "w/o H2",
            _ => "custom",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SamplerSettings {
    pub steps: usize,
    pub guidance: GuidanceSettings,
    pub refine: RefinementSettings,
    pub ablation: Ablation,
    /// Evaluate the guidance branches on the rayon pool.
    pub parallel_branches: bool,
}

impl Default for SamplerSettings {
    fn default() -> Self {
        SamplerSettings {
            steps: 50,
            guidance: GuidanceSettings::default(),
            refine: RefinementSettings::default(),
            ablation: Ablation::default(),
            parallel_branches: true,
        }
    }
}

impl SamplerSettings {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("sampler needs at least one step".into()));
        }
        self.guidance.validate()?;
        self.refine.validate()
    }
}

#[derive(Debug, Clone)]
pub struct FusionModels {
    pub codec: Codec,
    pub denoiser: Denoiser,
    pub adapter: Option<ConditionAdapter>,
}

impl FusionModels {
    pub fn latent_scale(&self) -> f64 {
        self.denoiser.cfg.latent_scale
    }

    /// Codec latent of a frame in denoiser units.
    pub fn encode(&self, frame: &Tensor) -> Result<Tensor> {
        Ok(self.codec.encode(frame)?.scale(1.0 / self.latent_scale()))
    }

    /// Frame `[H, W]` from a latent in denoiser units.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.codec.decode(&z.scale(self.latent_scale()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutState {
    /// Clean fused latents, oldest first.
    pub history: VecDeque<Tensor>,
    pub capacity: usize,
    pub frame_index: usize,
    /// Root of every per-frame random stream.
    pub seed: u64,
}

impl RolloutState {
    pub fn new(capacity: usize, seed: u64) -> Self {
        RolloutState {
            history: VecDeque::with_capacity(capacity),
            capacity,
            frame_index: 0,
            seed,
        }
    }

    pub fn push(&mut self, z: Tensor) {
        if self.history.len() == self.capacity {
            self.history.pop_front();
        }
        self.history.push_back(z);
        self.frame_index += 1;
    }
}

const STREAM_INIT: u64 = 0;
const STREAM_STEPS: u64 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FusedFrame {
    pub frame: Tensor,
    pub latent: Tensor,
}

/// Fuses one frame and pushes its latent into `state`.
pub fn fuse_frame(
    ir: &Tensor,
    vi: &Tensor,
    state: &mut RolloutState,
    models: &FusionModels,
    settings: &SamplerSettings,
) -> Result<FusedFrame> {
    settings.validate()?;
    ensure_shape(ir.shape(), vi.shape())?;
    let cfg = &models.denoiser.cfg;
    if state.capacity > cfg.history || settings.guidance.window > cfg.history {
        return Err(Error::Config(format!(
            "history window exceeds the denoiser budget of {}",
            cfg.history
        )));
    }
    let z_vi = models.encode(vi)?;
    ensure_shape(&cfg.latent_shape(), z_vi.shape())?;
    let sched = build_schedule(settings.steps)?;
    let frame_rng = Rng::new(state.seed).fork(state.frame_index as u64);
    let k_max = sched.steps();
    let eps = seeded_gaussian(z_vi.shape(), &mut frame_rng.fork(STREAM_INIT))?;
    let mut z = sched.noise(&z_vi, &eps, k_max)?;

    let c_struct = match (&models.adapter, settings.ablation.no_adapter) {
        (Some(a), false) => Some(a.adapt_condition(ir)?),
        _ => None,
    };
    let targets = FusionTargets::new(ir, vi)?;
    let energy = DecodedAlignment {
        codec: &models.codec,
        targets: &targets,
        weights: settings.refine.weights,
        latent_scale: models.latent_scale(),
    };
    let history: Vec<Tensor> = state.history.iter().cloned().collect();
    let ab = settings.ablation;
    let guided = !history.is_empty() && !ab.no_guidance && settings.guidance.scale != 0.0;
    let steps_rng = frame_rng.fork(STREAM_STEPS);

    for k in (1..=k_max).rev() {
        let t = sched.time(k);
        let step_rng = steps_rng.fork(k as u64);
        let velocity = |variant: HistoryVariant| -> Result<Tensor> {
            let mut rng = step_rng.fork(variant.index() as u64);
            let hc = make_history_config(&history, variant, &settings.guidance, &mut rng)?;
            models.denoiser.predict_velocity(&z, t, &hc.slots, c_struct.as_ref())
        };
        let v = if guided {
            let third = if ab.no_context_branch {
                HistoryVariant::Baseline
            } else {
                HistoryVariant::ContextSuppressed
            };
            let (v0, v1, v2) = if settings.parallel_branches {
                let (v0, (v1, v2)) = rayon::join(
                    || velocity(HistoryVariant::Baseline),
                    || rayon::join(|| velocity(HistoryVariant::Stabilized), || velocity(third)),
                );
                (v0?, v1?, v2?)
            } else {
                (velocity(HistoryVariant::Baseline)?, velocity(HistoryVariant::Stabilized)?, velocity(third)?)
            };
            compose_guidance(&v0, &v1, &v2, settings.guidance.scale)?
        } else {
            velocity(HistoryVariant::Baseline)?
        };
        let step = ddim_step(&z, &v, k, &sched)?;
        let i = k_max - k;
        z = if !ab.no_refinement && settings.refine.applies_at(i) {
            let r = refine_latent(&step.z0_hat, &energy, &settings.refine)?;
            ddim_update(&r.latent, &step.eps_hat, k - 1, &sched)?
        } else {
            step.z_prev
        };
        z.check_finite("sampler latent")?;
    }
    let frame = models.decode(&z)?;
    state.push(z.clone());
    Ok(FusedFrame { frame, latent: z })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DriftStats {
    pub mean_diff_energy: f64,
    /// Least-squares slope of the difference-energy series.
    pub diff_energy_slope: f64,
    /// Mean squared deviation of each frame from the first fused frame.
    pub deviation: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionRunReport {
    pub rows: Vec<MetricsRow>,
    pub drift: DriftStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutOutput {
    pub frames: Vec<Tensor>,
    pub latents: Vec<Tensor>,
    pub report: FusionRunReport,
}

/// Flows and masks between consecutive frames; estimated from the visible
/// stream when not supplied.
pub fn motion_for(vi: &[Tensor]) -> Result<(Vec<FlowField>, Vec<OcclusionMask>)> {
    let mut flows = Vec::new();
    let mut masks = Vec::new();
    for p in vi.windows(2) {
        let (prev, curr) = (squeeze(&p[0])?, squeeze(&p[1])?);
        let fwd = estimate_flow(&prev, &curr, 4, 2)?;
        let bwd = estimate_flow(&curr, &prev, 4, 2)?;
        masks.push(occlusion_mask(&fwd, &bwd, 1.0)?);
        flows.push(fwd);
    }
    Ok((flows, masks))
}

fn squeeze(t: &Tensor) -> Result<Tensor> {
    let (_, h, w) = t.chw()?;
    t.clone().reshape(&[h, w])
}

/// Sequential fusion of a whole sequence with per-frame metrics.
pub fn rollout(
    ir_seq: &[Tensor],
    vi_seq: &[Tensor],
    models: &FusionModels,
    settings: &SamplerSettings,
    seed: u64,
    motion: Option<(&[FlowField], &[OcclusionMask])>,
) -> Result<RolloutOutput> {
    if ir_seq.len() != vi_seq.len() {
        return Err(Error::invalid(format!(
            "IR has {} frames, VI has {}",
            ir_seq.len(),
            vi_seq.len()
        )));
    }
    if ir_seq.is_empty() {
        return Err(Error::invalid("empty sequence"));
    }
    let mut state = RolloutState::new(settings.guidance.window, seed);
    let mut frames = Vec::with_capacity(ir_seq.len());
    let mut latents = Vec::with_capacity(ir_seq.len());
    for (ir, vi) in ir_seq.iter().zip(vi_seq) {
        let out = fuse_frame(ir, vi, &mut state, models, settings)?;
        frames.push(out.frame);
        latents.push(out.latent);
    }
    let report = evaluate_sequence(&frames, ir_seq, vi_seq, motion)?;
    Ok(RolloutOutput {
        frames,
        latents,
        report,
    })
}

/// Metrics rows and drift statistics of a fused sequence.
pub fn evaluate_sequence(
    frames: &[Tensor],
    ir_seq: &[Tensor],
    vi_seq: &[Tensor],
    motion: Option<(&[FlowField], &[OcclusionMask])>,
) -> Result<FusionRunReport> {
    let mut rows = frames
        .iter()
        .zip(ir_seq.iter().zip(vi_seq))
        .enumerate()
        .map(|(t, (f, (ir, vi)))| MetricsRow::evaluate(t, &squeeze(f)?, &squeeze(ir)?, &squeeze(vi)?))
        .collect::<Result<Vec<_>>>()?;
    let mut energies = Vec::new();
    if frames.len() > 1 {
        let flat: Vec<Tensor> = frames.iter().map(squeeze).collect::<Result<_>>()?;
        energies = frame_diff_energy(&flat)?;
        let estimated;
        let (flows, masks) = match motion {
            Some(m) => m,
            None => {
                estimated = motion_for(vi_seq)?;
                (&estimated.0[..], &estimated.1[..])
            }
        };
        let residual = warped_residual(&flat, flows, masks)?;
        for t in 1..frames.len() {
            rows[t].diff_energy = Some(energies[t - 1]);
            rows[t].warped_residual = Some(residual[t - 1]);
        }
    }
    let first = &frames[0];
    let deviation = frames
        .iter()
        .map(|f| Ok(f.sub(first)?.sq_norm() / f.len() as f64))
        .collect::<Result<Vec<_>>>()?;
    let mean = if energies.is_empty() {
        0.0
    } else {
        energies.iter().sum::<f64>() / energies.len() as f64
    };
    Ok(FusionRunReport {
        rows,
        drift: DriftStats {
            mean_diff_energy: mean,
            diff_energy_slope: ls_slope(&energies),
            deviation,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let s = build_schedule(50).unwrap();
        assert_eq!(s.alpha(0), 1.0);
        assert!(s.alpha(50).abs() < 1e-12);
        for k in 0..=50 {
            assert!((s.alpha(k).powi(2) + s.sigma(k).powi(2) - 1.0).abs() < 1e-12);
            if k > 0 {
                assert!(s.alpha(k) < s.alpha(k - 1));
            }
        }
        assert!(build_schedule(0).is_err());
        let one = build_schedule(1).unwrap();
        assert_eq!(one.steps(), 1);
        assert_eq!(one.sigma(0), 0.0);
    }

    #[test]
    fn scalar_ddim_arithmetic() {
        let s = NoiseSchedule {
            alphas: vec![1.0, 0.8],
            sigmas: vec![0.0, 0.6],
        };
        let step = ddim_step(&Tensor::from_vec(vec![1.0]), &Tensor::from_vec(vec![0.5]), 1, &s).unwrap();
        assert!((step.z0_hat.data()[0] - 0.5).abs() < 1e-15);
        let z = Tensor::from_vec(vec![0.3, -2.0]);
        let step = ddim_step(&z, &Tensor::zeros(&[2]), 0, &s).unwrap();
        assert_eq!(step.z0_hat, z);
        assert!(ddim_step(&z, &z, 2, &s).is_err());
    }

    struct Quadratic(Tensor);

    impl RefineEnergy for Quadratic {
        fn energy(&self, z: &Tensor) -> Result<(f64, Tensor)> {
            let d = z.sub(&self.0)?;
            Ok((d.sq_norm(), d.scale(2.0)))
        }
    }

    #[test]
    fn refinement_closed_form_and_limits() {
        let c = Tensor::from_vec(vec![1.0, -3.0, 0.5]);
        let z0 = Tensor::from_vec(vec![0.0, 1.0, 2.0]);
        let settings = RefinementSettings {
            gamma: 1.0,
            inner_steps: 60,
            ..RefinementSettings::default()
        };
        let r = refine_latent(&z0, &Quadratic(c.clone()), &settings).unwrap();
        let expected = c.add(&z0).unwrap().scale(0.5);
        assert!(r.z_star.max_abs_diff(&expected).unwrap() < 1e-6);
        assert!(r.objective.windows(2).all(|w| w[1] <= w[0]));
        let none = RefinementSettings {
            gamma: 0.0,
            ..RefinementSettings::default()
        };
        assert_eq!(refine_latent(&z0, &Quadratic(c.clone()), &none).unwrap().latent, z0);
        let stiff = RefinementSettings {
            lambda_reg: 1e6,
            ..RefinementSettings::default()
        };
        let r = refine_latent(&z0, &Quadratic(c), &stiff).unwrap();
        assert!(r.latent.max_abs_diff(&z0).unwrap() < 1e-3);
    }

    #[test]
    fn fifo_history() {
        let mut s = RolloutState::new(2, 0);
        for i in 0..3 {
            s.push(Tensor::scalar(i as f64));
        }
        assert_eq!(s.history.len(), 2);
        assert_eq!(s.history[0].data()[0], 1.0);
        assert_eq!(s.frame_index, 3);
    }

    #[test]
    fn ablation_names() {
        assert_eq!(Ablation::parse("hg").unwrap().label(), "w/o HG");
        assert_eq!(Ablation::parse("h2").unwrap().label(), "w/o H2");
        assert!(Ablation::parse("gan").is_err());
    }
}
