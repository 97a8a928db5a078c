//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! `cargo test --test acceptance` runs everything; `-- 5 6` runs a subset.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use drfuse_core::codec::{flatten_pins, nearest_codes, stage1_loss_var, Clip, CodecGraph, QuantMode, Stage1LossWeights};
use drfuse_core::codec::{focal_frequency_loss, Codec, CodecConfig};
use drfuse_core::config::{RunConfig, SceneKind};
use drfuse_core::denoiser::{anchored_attention, ConditionAdapter, Denoiser, DenoiserConfig, DenoiserGraph, HistorySlot};
use drfuse_core::flow::{temporal_loss_var, warp_var, FlowField, OcclusionMask};
use drfuse_core::guidance::{compose_guidance, modulate, power_law_field, spectral_attenuation_report};
use drfuse_core::metrics::{cc, ls_slope, masked_diff_energy};
use drfuse_core::numerics::gradcheck::GRAD_CHECK_TOLERANCE;
use drfuse_core::numerics::params::init_normal;
use drfuse_core::numerics::{grad_check, grad_check_coords, softmax_lastdim, GradCheckReport, Rng, Tape, Tensor};
use drfuse_core::objectives::{alignment_energy_var, structural_loss_var, AlignmentWeights, FusionTargets, Stage2LossWeights};
use drfuse_core::oracles::{
    attention_loops, ddim_oracle_trajectory, focal_frequency_naive, nearest_codes_brute, softmax_extended,
};
use drfuse_core::pipeline::{
    background_mask, generate_corpus, generate_scene, held_out_warping_error, mean_target_ssim, run_stage1, run_stage2,
    RunSummary,
};
use drfuse_core::sampler::{build_schedule, rollout, Ablation, FusionModels, RolloutOutput, SamplerSettings};

// Tolerances and budgets.
const GRAD_TOL: f64 = GRAD_CHECK_TOLERANCE;
const GRAD_BUDGET: Duration = Duration::from_secs(120);
const ATTENTION_TOL: f64 = 1e-10;
const SOFTMAX_TOL: f64 = 1e-12;
const DFT_REL_TOL: f64 = 1e-9;
const DDIM_TOL: f64 = 1e-6;
const DDIM_STEPS: usize = 50;
const INDEPENDENCE_SAMPLES: usize = 100_000;
const INDEPENDENCE_TOL: f64 = 0.01;
const SPECTRAL_LAMBDA: f64 = 0.02;
const SPECTRAL_TRIALS: usize = 1000;
const SPECTRAL_REL_TOL: f64 = 0.05;
const SPECTRAL_BUDGET: Duration = Duration::from_secs(60);
const TEMPORAL_GAP: f64 = 0.10;
const STAGE1_BUDGET: Duration = Duration::from_secs(30 * 60);
const DRIFT_FRAMES: usize = 64;
const DRIFT_FLICKER: f64 = 0.2;
const DRIFT_BUDGET: Duration = Duration::from_secs(10 * 60);
/// SSIM differences below this count as ties.
const SSIM_TIE: f64 = 0.01;
const ROLLOUT_SEED: u64 = 5;

/// Toy budget: the published rate of 1e-4 does not converge within a few
/// thousand steps on 16x16 frames.
fn toy_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.apply_overrides(["seed=42", "lr=1e-3"]).expect("valid overrides");
    cfg
}

struct Verdict {
    passed: bool,
    detail: String,
}

impl Verdict {
    fn new(passed: bool, detail: impl Into<String>) -> Self {
        Verdict {
            passed,
            detail: detail.into(),
        }
    }
}

/// Runs `check`, prints its line and records the result.
fn criterion(results: &mut Vec<bool>, id: u32, name: &str, check: impl FnOnce() -> Verdict) {
    let start = Instant::now();
    let v = check();
    println!(
        "[{}] {id}. {name}: {} ({:.1}s)",
        if v.passed { "PASS" } else { "FAIL" },
        v.detail,
        start.elapsed().as_secs_f64()
    );
    results.push(v.passed);
}

// ---------------------------------------------------------------- models

fn tiny_models(seed: u64) -> FusionModels {
    let mut rng = Rng::new(seed);
    let codec = Codec::new(
        CodecConfig {
            latent_channels: 4,
            hidden: 8,
            codebook_size: 16,
            beta: 0.25,
        },
        &mut rng,
    )
    .unwrap();
    let cfg = DenoiserConfig {
        width: 16,
        heads: 2,
        blocks: 2,
        latent_channels: 4,
        ..DenoiserConfig::default()
    };
    let mut denoiser = Denoiser::new(cfg.clone(), &mut rng).unwrap();
    let shape = denoiser.params.get("out.w").unwrap().shape().to_vec();
    *denoiser.params.get_mut("out.w").unwrap() = init_normal(&shape, 0.2, &mut rng);
    let mut adapter = ConditionAdapter::new(&cfg, &mut rng).unwrap();
    let shape = adapter.params.get("out.w").unwrap().shape().to_vec();
    *adapter.params.get_mut("out.w").unwrap() = init_normal(&shape, 0.1, &mut rng);
    FusionModels {
        codec,
        denoiser,
        adapter: Some(adapter),
    }
}

fn smooth_frame(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let (a, b, c) = (rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.0, 6.0));
    Tensor::from_fn(&[1, 16, 16], |i| {
        let (y, x) = ((i / 16) as f64, (i % 16) as f64);
        0.5 + 0.3 * (a * x / 4.0 + c).sin() * (b * y / 5.0).cos()
    })
}

fn random_flow(h: usize, w: usize, seed: u64) -> FlowField {
    let mut rng = Rng::new(seed);
    FlowField::new(Tensor::from_fn(&[2, h, w], |_| rng.uniform(-1.3, 1.3))).unwrap()
}

fn holed_mask(h: usize, w: usize) -> OcclusionMask {
    OcclusionMask::new(Tensor::from_fn(&[h, w], |i| if i % 5 == 3 { 0.0 } else { 1.0 })).unwrap()
}

fn spread(layout: &[(String, std::ops::Range<usize>)], per: usize) -> Vec<usize> {
    layout
        .iter()
        .flat_map(|(_, r)| r.clone().step_by((r.len() / per).max(1)).take(per))
        .collect()
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(1);
    let mut reports: Vec<(&str, GradCheckReport)> = Vec::new();

    let z = init_normal(&[2, 8, 8], 1.0, &mut rng);
    let flow = random_flow(8, 8, 2);
    let weights = init_normal(&[2, 8, 8], 1.0, &mut rng);
    reports.push((
        "warp",
        grad_check(|t, v| Ok(t.sum(t.mul(warp_var(t, v, &flow)?, t.constant(weights.clone()))?)), &z, 1e-6).unwrap(),
    ));

    let prev = init_normal(&[4, 8, 8], 1.0, &mut rng);
    let curr = init_normal(&[4, 8, 8], 1.0, &mut rng);
    let mask = holed_mask(8, 8);
    reports.push((
        "temporal",
        grad_check(|t, v| temporal_loss_var(t, t.constant(prev.clone()), v, &flow, &mask, 1e-6), &curr, 1e-6).unwrap(),
    ));

    let models = tiny_models(3);
    let codec = &models.codec;
    let batch = vec![Clip {
        frames: vec![smooth_frame(10), smooth_frame(11), smooth_frame(12)],
        flows: vec![random_flow(4, 4, 6), random_flow(4, 4, 7)],
        masks: vec![holed_mask(4, 4), OcclusionMask::ones(4, 4)],
    }];
    let s1w = Stage1LossWeights::default();
    let pins = {
        let tape = Tape::new();
        let graph = CodecGraph::new(&tape, codec, false);
        flatten_pins(stage1_loss_var(&graph, &batch, &s1w, &QuantMode::Live).unwrap().2)
    };
    reports.push((
        "stage-1",
        grad_check_coords(
            |t, v| {
                let graph = CodecGraph {
                    tape: t,
                    vars: codec.params.register_flat(t, v)?,
                    cfg: &codec.cfg,
                };
                Ok(stage1_loss_var(&graph, &batch, &s1w, &pins)?.0)
            },
            &codec.params.flatten(),
            1e-6,
            &spread(&codec.params.layout(), 6),
        )
        .unwrap(),
    ));

    let targets = FusionTargets::new(&smooth_frame(20), &smooth_frame(21)).unwrap();
    let adapter = models.adapter.as_ref().unwrap();
    let dcfg = &models.denoiser.cfg;
    let ir = smooth_frame(20);
    let z_k = init_normal(&dcfg.latent_shape(), 1.0, &mut rng);
    let slots: Vec<HistorySlot> = (1..=3)
        .map(|lag| HistorySlot {
            latent: init_normal(&dcfg.latent_shape(), 1.0, &mut rng),
            lag,
            level: 0.02,
        })
        .collect();
    let s2w = Stage2LossWeights::default();
    reports.push((
        "structural",
        grad_check_coords(
            |t, v| {
                let vars = adapter.params.register_flat(t, v)?;
                let c = adapter.forward(t, &vars, t.constant(ir.clone()))?;
                let g = DenoiserGraph::new(t, &models.denoiser, false);
                let zk = t.constant(z_k.clone());
                let vel = g.forward(zk, 0.7, &slots, Some(c))?;
                let z0 = t.sub(t.scale(zk, 0.6), t.scale(vel, 0.8))?;
                let cg = CodecGraph::new(t, codec, false);
                let x = cg.decode(t.scale(z0, dcfg.latent_scale))?;
                Ok(structural_loss_var(t, x, &targets, &s2w, Some(&cg))?.0)
            },
            &adapter.params.flatten(),
            1e-6,
            &spread(&adapter.params.layout(), 5),
        )
        .unwrap(),
    ));

    let z0_hat = init_normal(&[4, 4, 4], 1.0, &mut rng);
    let zr = z0_hat.axpby(1.0, &init_normal(&[4, 4, 4], 0.1, &mut rng), 1.0).unwrap();
    reports.push((
        "refinement",
        grad_check(
            |t, v| {
                let cg = CodecGraph::new(t, codec, false);
                let x = cg.decode(t.scale(v, models.latent_scale()))?;
                let e = alignment_energy_var(t, x, &targets, &AlignmentWeights::default())?;
                let reg = t.sum_sq(t.sub(v, t.constant(z0_hat.clone()))?);
                t.add(e, reg)
            },
            &zr,
            1e-6,
        )
        .unwrap(),
    ));

    let elapsed = start.elapsed();
    let worst = reports.iter().map(|(_, r)| r.max_rel_error).fold(0.0, f64::max);
    let all = reports.iter().all(|(_, r)| r.passed && r.max_rel_error < GRAD_TOL);
    let detail = reports
        .iter()
        .map(|(n, r)| format!("{n} {:.1e}", r.max_rel_error))
        .collect::<Vec<_>>()
        .join(", ");
    Verdict::new(
        all && elapsed < GRAD_BUDGET,
        format!("max rel err {worst:.1e} < {GRAD_TOL:.0e} [{detail}]"),
    )
}

// ---------------------------------------------------------------- 2

fn oracle_equivalences() -> Verdict {
    let mut rng = Rng::new(2);
    let q = init_normal(&[16, 8], 1.5, &mut rng);
    let k = init_normal(&[40, 8], 1.5, &mut rng);
    let v = init_normal(&[40, 16], 1.0, &mut rng);
    let att = anchored_attention(&q, &k, &v, 8)
        .unwrap()
        .max_abs_diff(&attention_loops(&q, &k, &v, 8).unwrap())
        .unwrap();

    let x = init_normal(&[6, 64], 20.0, &mut rng);
    let fast = softmax_lastdim(&x).unwrap();
    let mut sm: f64 = 0.0;
    for (row, got) in x.data().chunks(64).zip(fast.data().chunks(64)) {
        for (a, b) in got.iter().zip(softmax_extended(row)) {
            sm = sm.max((a - b).abs());
        }
    }

    let a = init_normal(&[2, 16, 16], 1.0, &mut rng);
    let b = init_normal(&[2, 16, 16], 1.0, &mut rng);
    let ff = focal_frequency_loss(&a, &b).unwrap();
    let ff_ref = focal_frequency_naive(&a, &b).unwrap();
    let dft = ((ff - ff_ref) / ff_ref).abs();

    let codebook = init_normal(&[64, 8], 1.0, &mut rng);
    let zq = init_normal(&[8, 8, 8], 1.2, &mut rng);
    let vq_exact = nearest_codes(&zq, &codebook).unwrap() == nearest_codes_brute(&zq, &codebook).unwrap();

    let sched = build_schedule(DDIM_STEPS).unwrap();
    let z0 = init_normal(&[8, 4, 4], 1.0, &mut rng);
    let eps = init_normal(&[8, 4, 4], 1.0, &mut rng);
    let end = ddim_oracle_trajectory(&sched.noise(&z0, &eps, DDIM_STEPS).unwrap(), &z0, &sched).unwrap();
    let ddim = end.max_abs_diff(&z0).unwrap();

    Verdict::new(
        att < ATTENTION_TOL && sm < SOFTMAX_TOL && dft < DFT_REL_TOL && vq_exact && ddim < DDIM_TOL,
        format!(
            "attention {att:.1e}, softmax {sm:.1e}, focal DFT rel {dft:.1e}, VQ exact {vq_exact}, DDIM {ddim:.1e}"
        ),
    )
}

// ---------------------------------------------------------------- 3

fn frame_bits(out: &RolloutOutput) -> Vec<u64> {
    out.frames.iter().flat_map(|f| f.data().iter().map(|v| v.to_bits())).collect()
}

fn guidance_identities() -> Verdict {
    let models = tiny_models(4);
    let ir: Vec<Tensor> = (0..4).map(|t| smooth_frame(30 + 2 * t)).collect();
    let vi: Vec<Tensor> = (0..4).map(|t| smooth_frame(31 + 2 * t)).collect();
    let base = SamplerSettings {
        steps: 8,
        ..SamplerSettings::default()
    };
    let mut zero = base.clone();
    zero.guidance.scale = 0.0;
    let mut h0 = base.clone();
    h0.ablation = Ablation {
        no_guidance: true,
        ..Ablation::default()
    };
    let run = |s: &SamplerSettings| frame_bits(&rollout(&ir, &vi, &models, s, 3, None).unwrap());
    let s0_equals_h0 = run(&zero) == run(&h0);

    let mut rng = Rng::new(5);
    let v0 = init_normal(&[4, 4, 4], 1.0, &mut rng);
    let v1 = init_normal(&[4, 4, 4], 1.0, &mut rng);
    let cancel = compose_guidance(&v0, &v1, &v1, 2.0).unwrap() == v0;
    let identity = modulate(&v1, 0.0, &mut rng).unwrap() == v1;
    let input = init_normal(&[INDEPENDENCE_SAMPLES], 1.0, &mut rng);
    let r = cc(&input, &modulate(&input, 1.0, &mut rng).unwrap()).unwrap();
    Verdict::new(
        s0_equals_h0 && cancel && identity && r.abs() < INDEPENDENCE_TOL,
        format!("s=0 == H(0)-only {s0_equals_h0}, v1==v2 cancels {cancel}, lambda=0 identity {identity}, lambda=1 |r| {:.4}", r.abs()),
    )
}

// ---------------------------------------------------------------- 4

fn spectral_filter() -> Verdict {
    let start = Instant::now();
    let mut rng = Rng::new(17);
    let z = power_law_field(32, 32, 2.0, &mut rng).unwrap();
    let bands = spectral_attenuation_report(&z, SPECTRAL_LAMBDA, &mut rng, SPECTRAL_TRIALS).unwrap();
    let worst = bands
        .iter()
        .map(|b| (b.corruption - b.predicted).abs() / b.predicted)
        .fold(0.0, f64::max);
    let monotone = bands.windows(2).all(|p| p[1].corruption > p[0].corruption);
    Verdict::new(
        worst < SPECTRAL_REL_TOL && monotone && start.elapsed() < SPECTRAL_BUDGET,
        format!(
            "{} bands, worst rel dev {worst:.3} < {SPECTRAL_REL_TOL}, monotone {monotone}, corruption {:.2e} -> {:.2e}",
            bands.len(),
            bands[0].corruption,
            bands[bands.len() - 1].corruption
        ),
    )
}

// ---------------------------------------------------------------- 5

/// Trains the paired codecs; the temporally regularized one is reused by
/// the drift and ablation criteria.
fn temporal_ablation(cfg: &RunConfig, corpus: &[drfuse_core::scenes::GroundTruthBundle]) -> (Verdict, Codec) {
    let start = Instant::now();
    let mut held_cfg = cfg.clone();
    held_cfg.seed = cfg.seed + 1000;
    held_cfg.sequences = 16;
    let held = generate_corpus(&held_cfg).unwrap();
    let with = run_stage1(cfg, corpus).unwrap().codec;
    let mut off = cfg.clone();
    off.lambda_t = 0.0;
    let without = run_stage1(&off, corpus).unwrap().codec;
    let e1 = held_out_warping_error(cfg, &with, &held).unwrap();
    let e0 = held_out_warping_error(cfg, &without, &held).unwrap();
    let gap = (e0 - e1) / e0;
    let verdict = Verdict::new(
        e1 < e0 && gap >= TEMPORAL_GAP && start.elapsed() < STAGE1_BUDGET,
        format!("held-out warping error {e1:.4e} (lambda_t=1) vs {e0:.4e} (lambda_t=0), gap {:.1}% >= {:.0}%", 100.0 * gap, 100.0 * TEMPORAL_GAP),
    );
    (verdict, with)
}

// ---------------------------------------------------------------- 6, 7

struct AblationRun {
    name: &'static str,
    bg_energy: Vec<f64>,
    summary: RunSummary,
    target_ssim: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn ablation_runs(cfg: &RunConfig, models: &FusionModels) -> (Vec<AblationRun>, f64, Duration) {
    let mut scene_cfg = cfg.clone();
    scene_cfg.scene = SceneKind::Static;
    scene_cfg.frames = DRIFT_FRAMES;
    scene_cfg.flicker = DRIFT_FLICKER;
    let (_, bundle) = generate_scene(&scene_cfg, 0).unwrap();
    let bg = background_mask(&bundle.object_masks).unwrap();
    let raw = mean(&masked_diff_energy(&bundle.vi, &bg).unwrap());
    let targets = bundle.composite_targets().unwrap();
    let motion = (&bundle.flows[..], &bundle.masks[..]);
    let base = cfg.sampler().unwrap();
    let mut full_time = Duration::ZERO;
    let runs = ["full", "hg", "adapter", "refine", "h2"]
        .into_iter()
        .map(|name| {
            let start = Instant::now();
            let settings = SamplerSettings {
                ablation: Ablation::parse(name).unwrap(),
                ..base.clone()
            };
            let out = rollout(&bundle.ir, &bundle.vi, models, &settings, ROLLOUT_SEED, Some(motion)).unwrap();
            if name == "full" {
                full_time = start.elapsed();
            }
            let frames: Vec<Tensor> = out.frames.iter().map(|f| f.clone().reshape(&[1, cfg.height, cfg.width]).unwrap()).collect();
            AblationRun {
                name,
                bg_energy: masked_diff_energy(&out.frames, &bg).unwrap(),
                summary: RunSummary::from_rows(settings.ablation.label(), &out.report.rows).unwrap(),
                target_ssim: mean_target_ssim(&frames, &targets).unwrap(),
            }
        })
        .collect();
    (runs, raw, full_time)
}

fn drift_resistance(runs: &[AblationRun], raw: f64, full_time: Duration) -> Verdict {
    let full = &runs[0];
    let hg = runs.iter().find(|r| r.name == "hg").unwrap();
    let (ef, eh) = (mean(&full.bg_energy), mean(&hg.bg_energy));
    let slope = ls_slope(&full.bg_energy);
    Verdict::new(
        ef < eh && ef < raw && slope <= 0.0 && full_time < DRIFT_BUDGET,
        format!(
            "background diff energy full {ef:.3e} vs w/o HG {eh:.3e} vs raw VI {raw:.3e}; full slope {slope:.2e} <= 0"
        ),
    )
}

fn ablation_matrix(runs: &[AblationRun]) -> Verdict {
    let full = &runs[0];
    let others = &runs[1..];
    let best_temporal = others.iter().all(|r| full.summary.diff_energy < r.summary.diff_energy);
    let best_ssim = others.iter().all(|r| full.target_ssim + SSIM_TIE >= r.target_ssim);
    let table = runs
        .iter()
        .map(|r| format!("{} de {:.3e} ssim {:.3}", r.name, r.summary.diff_energy, r.target_ssim))
        .collect::<Vec<_>>()
        .join("; ");
    Verdict::new(
        best_temporal && best_ssim,
        format!("full best diff_energy {best_temporal}, best-or-tied SSIM (tie {SSIM_TIE}) {best_ssim} [{table}]"),
    )
}

// ---------------------------------------------------------------- 8

fn tree_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn drfuse(args: &[&str], threads: &str) -> bool {
    Command::new(env!("CARGO_BIN_EXE_drfuse"))
        .args(args)
        .env("DRFUSE_THREADS", threads)
        .output()
        .map(|o| o.status.success())
        .unwrap_or(false)
}

fn determinism(models: &FusionModels, cfg: &RunConfig) -> Verdict {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let p = |name: &str| root.join(name).to_string_lossy().into_owned();

    // library rollout: parallel twice and serial once
    let mut scene_cfg = cfg.clone();
    scene_cfg.scene = SceneKind::Static;
    scene_cfg.frames = 6;
    let (_, bundle) = generate_scene(&scene_cfg, 0).unwrap();
    let par = cfg.sampler().unwrap();
    let mut ser = par.clone();
    ser.parallel_branches = false;
    let a = frame_bits(&rollout(&bundle.ir, &bundle.vi, models, &par, 9, None).unwrap());
    let b = frame_bits(&rollout(&bundle.ir, &bundle.vi, models, &par, 9, None).unwrap());
    let c = frame_bits(&rollout(&bundle.ir, &bundle.vi, models, &ser, 9, None).unwrap());
    let library = a == b && a == c;

    // command line: every subcommand twice, with different thread counts
    models.codec.save(&root.join("ckpt/codec")).unwrap();
    models.denoiser.save(&root.join("ckpt/denoiser")).unwrap();
    models.adapter.as_ref().unwrap().save(&root.join("ckpt/adapter")).unwrap();
    let small = ["--set", "sequences=2", "--set", "frames=5", "--seed", "3"];
    let quick = [
        "--set", "stage1_steps=2", "--set", "stage1_batch=2", "--set", "prior_steps=2", "--set", "adapter_steps=2",
        "--set", "model_width=16", "--set", "heads=2", "--set", "blocks=1",
    ];
    let mut ok = true;
    for run in ["a", "b"] {
        let threads = if run == "a" { "1" } else { "3" };
        let data = p(&format!("data_{run}"));
        let ck = p(&format!("train_{run}"));
        let fused = p(&format!("fused_{run}"));
        ok &= drfuse(&[&["generate", "--out", &data][..], &small].concat(), threads);
        ok &= drfuse(&[&["train-stage1", "--data", &data, "--out", &ck][..], &small, &quick].concat(), threads);
        ok &= drfuse(&[&["train-stage2", "--data", &data, "--ckpt", &ck][..], &small, &quick].concat(), threads);
        let manifest = format!("{data}/seq_0000/manifest.txt");
        ok &= drfuse(
            &["fuse", "--ckpt", &p("ckpt"), "--manifest", &manifest, "--out", &fused, "--diffmaps", "--set", "steps=10"],
            threads,
        );
        ok &= drfuse(&["eval", "--fused", &fused, "--manifest", &manifest], threads);
        ok &= drfuse(&["report", &fused, "--out", &format!("{fused}/table.csv")], threads);
    }
    let same = |x: &str, y: &str| tree_bytes(&root.join(x)) == tree_bytes(&root.join(y));
    let cli = ok && same("data_a", "data_b") && same("train_a", "train_b") && same("fused_a", "fused_b");
    Verdict::new(
        library && cli,
        format!("rollout parallel/serial bitwise equal {library}; generate, train-stage1/2, fuse, eval, report byte-identical across runs and thread counts {cli}"),
    )
}

// ---------------------------------------------------------------- main

fn main() {
    let selected: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wants = |id: u32| selected.is_empty() || selected.contains(&id);
    let mut results = Vec::new();

    if wants(1) {
        criterion(&mut results, 1, "gradient suite", gradient_suite);
    }
    if wants(2) {
        criterion(&mut results, 2, "oracle equivalences", oracle_equivalences);
    }
    if wants(3) {
        criterion(&mut results, 3, "guidance identities", guidance_identities);
    }
    if wants(4) {
        criterion(&mut results, 4, "spectral low-pass property", spectral_filter);
    }
    if [5, 6, 7, 8].iter().any(|&i| wants(i)) {
        let cfg = toy_config();
        let start = Instant::now();
        let corpus = generate_corpus(&cfg).unwrap();
        let mut codec = None;
        criterion(&mut results, 5, "stage-1 temporal ablation", || {
            let (v, c) = temporal_ablation(&cfg, &corpus);
            codec = Some(c);
            v
        });
        let codec = codec.unwrap();
        let stage2 = run_stage2(&cfg, &codec, &corpus).unwrap();
        let models = FusionModels {
            codec,
            denoiser: stage2.denoiser,
            adapter: Some(stage2.adapter),
        };
        println!("      toy training finished after {:.0}s", start.elapsed().as_secs_f64());
        if wants(6) || wants(7) {
            let (runs, raw, full_time) = ablation_runs(&cfg, &models);
            criterion(&mut results, 6, "drift resistance", || drift_resistance(&runs, raw, full_time));
            criterion(&mut results, 7, "ablation ordering", || ablation_matrix(&runs));
        }
        if wants(8) {
            criterion(&mut results, 8, "determinism", || determinism(&models, &cfg));
        }
    }

    let failed = results.iter().filter(|p| !**p).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
