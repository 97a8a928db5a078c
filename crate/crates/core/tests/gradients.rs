//! Finite-difference checks of every differentiable objective on small inputs.

mod common;

use drfuse_core::codec::{flatten_pins, stage1_loss_var, Clip, CodecGraph, QuantMode, Stage1LossWeights};
use drfuse_core::denoiser::{DenoiserGraph, HistorySlot};
use drfuse_core::flow::{temporal_loss_var, warp_var, FlowField, OcclusionMask};
use drfuse_core::numerics::gradcheck::{relative_error, GRAD_CHECK_TOLERANCE};
use drfuse_core::numerics::params::init_normal;
use drfuse_core::numerics::{grad_check, grad_check_coords, GradCheckReport, Rng, Tape, Tensor};
use drfuse_core::objectives::{
    alignment_energy_var, structural_loss_var, AlignmentWeights, DecodedAlignment, FusionTargets, RefineEnergy,
    Stage2LossWeights,
};

use common::{frame, tiny_models, FRAME};

const EPS: f64 = 1e-6;

fn assert_passed(name: &str, r: &GradCheckReport) {
    assert!(
        r.passed && r.max_rel_error < GRAD_CHECK_TOLERANCE,
        "{name}: max relative error {:e}",
        r.max_rel_error
    );
}

/// A few coordinates from every tensor of a flattened parameter set.
fn spread_coords(layout: &[(String, std::ops::Range<usize>)], per_tensor: usize) -> Vec<usize> {
    layout
        .iter()
        .flat_map(|(_, r)| {
            let step = (r.len() / per_tensor).max(1);
            r.clone().step_by(step).take(per_tensor)
        })
        .collect()
}

fn fractional_flow(h: usize, w: usize, seed: u64) -> FlowField {
    let mut rng = Rng::new(seed);
    FlowField::new(Tensor::from_fn(&[2, h, w], |_| rng.uniform(-1.3, 1.3))).unwrap()
}

fn partial_mask(h: usize, w: usize) -> OcclusionMask {
    OcclusionMask::new(Tensor::from_fn(&[h, w], |i| if i % 5 == 3 { 0.0 } else { 1.0 })).unwrap()
}

#[test]
fn warp_checks_against_finite_differences() {
    let mut rng = Rng::new(1);
    let z = init_normal(&[2, 8, 8], 1.0, &mut rng);
    let flow = fractional_flow(8, 8, 2);
    let weights = init_normal(&[2, 8, 8], 1.0, &mut rng);
    let r = grad_check(
        |t, v| {
            let w = warp_var(t, v, &flow)?;
            Ok(t.sum(t.mul(w, t.constant(weights.clone()))?))
        },
        &z,
        EPS,
    )
    .unwrap();
    assert_passed("warp", &r);
}

#[test]
fn temporal_loss_checks_in_both_frames() {
    let mut rng = Rng::new(3);
    let prev = init_normal(&[4, 8, 8], 1.0, &mut rng);
    let curr = init_normal(&[4, 8, 8], 1.0, &mut rng);
    let flow = fractional_flow(8, 8, 4);
    let mask = partial_mask(8, 8);
    let r = grad_check(
        |t, v| temporal_loss_var(t, t.constant(prev.clone()), v, &flow, &mask, 1e-6),
        &curr,
        EPS,
    )
    .unwrap();
    assert_passed("temporal loss, current frame", &r);
    let r = grad_check(
        |t, v| temporal_loss_var(t, v, t.constant(curr.clone()), &flow, &mask, 1e-6),
        &prev,
        EPS,
    )
    .unwrap();
    assert_passed("temporal loss, previous frame", &r);
}

#[test]
fn stage1_compound_loss_checks_in_codec_parameters() {
    let models = tiny_models(5);
    let codec = models.codec;
    let lat = FRAME / 4;
    let clip = Clip {
        frames: vec![frame(10), frame(11), frame(12)],
        flows: vec![fractional_flow(lat, lat, 6), fractional_flow(lat, lat, 7)],
        masks: vec![partial_mask(lat, lat), OcclusionMask::ones(lat, lat)],
    };
    let batch = vec![clip];
    let weights = Stage1LossWeights::default();
    let pins = {
        let tape = Tape::new();
        let graph = CodecGraph::new(&tape, &codec, false);
        flatten_pins(stage1_loss_var(&graph, &batch, &weights, &QuantMode::Live).unwrap().2)
    };
    let layout = codec.params.layout();
    let coords = spread_coords(&layout, 6);
    let r = grad_check_coords(
        |t, v| {
            let graph = CodecGraph {
                tape: t,
                vars: codec.params.register_flat(t, v)?,
                cfg: &codec.cfg,
            };
            Ok(stage1_loss_var(&graph, &batch, &weights, &pins)?.0)
        },
        &codec.params.flatten(),
        EPS,
        &coords,
    )
    .unwrap();
    assert_passed("stage-1 compound loss", &r);
    assert!(r.analytic.iter().filter(|g| g.abs() > 1e-8).count() > coords.len() / 2);
}

fn fusion_targets() -> FusionTargets {
    FusionTargets::new(&frame(20), &frame(21)).unwrap()
}

#[test]
fn structural_objective_checks_in_the_predicted_frame() {
    let models = tiny_models(8);
    let targets = fusion_targets();
    let x = frame(22).reshape(&[FRAME, FRAME]).unwrap();
    let weights = Stage2LossWeights::default();
    let r = grad_check(
        |t, v| {
            let enc = CodecGraph::new(t, &models.codec, false);
            Ok(structural_loss_var(t, v, &targets, &weights, Some(&enc))?.0)
        },
        &x,
        EPS,
    )
    .unwrap();
    assert_passed("structural objective", &r);
}

#[test]
fn structural_objective_checks_through_the_conditioned_denoiser() {
    let models = tiny_models(9);
    let adapter = models.adapter.as_ref().unwrap();
    let cfg = &models.denoiser.cfg;
    let targets = fusion_targets();
    let ir = frame(20);
    let mut rng = Rng::new(10);
    let z_k = init_normal(&cfg.latent_shape(), 1.0, &mut rng);
    let slots: Vec<HistorySlot> = (1..=3)
        .map(|lag| HistorySlot {
            latent: init_normal(&cfg.latent_shape(), 1.0, &mut rng),
            lag,
            level: 0.02,
        })
        .collect();
    let (a, s) = (0.6f64, 0.8f64);
    let weights = Stage2LossWeights::default();
    let coords = spread_coords(&adapter.params.layout(), 5);
    let r = grad_check_coords(
        |t, v| {
            let vars = adapter.params.register_flat(t, v)?;
            let c = adapter.forward(t, &vars, t.constant(ir.clone()))?;
            let g = DenoiserGraph::new(t, &models.denoiser, false);
            let zk = t.constant(z_k.clone());
            let vel = g.forward(zk, 0.7, &slots, Some(c))?;
            let z0 = t.sub(t.scale(zk, a), t.scale(vel, s))?;
            let cg = CodecGraph::new(t, &models.codec, false);
            let x = cg.decode(t.scale(z0, cfg.latent_scale))?;
            Ok(structural_loss_var(t, x, &targets, &weights, Some(&cg))?.0)
        },
        &adapter.params.flatten(),
        EPS,
        &coords,
    )
    .unwrap();
    assert_passed("structural objective through adapter", &r);
}

#[test]
fn refinement_energy_checks_through_the_decoder() {
    let models = tiny_models(11);
    let targets = fusion_targets();
    let lat = FRAME / 4;
    let mut rng = Rng::new(12);
    let z0_hat = init_normal(&[4, lat, lat], 1.0, &mut rng);
    let z = z0_hat.axpby(1.0, &init_normal(&[4, lat, lat], 0.1, &mut rng), 1.0).unwrap();
    let weights = AlignmentWeights::default();
    let lambda_reg = 1.0;

    let r = grad_check(
        |t, v| {
            let cg = CodecGraph::new(t, &models.codec, false);
            let x = cg.decode(t.scale(v, models.latent_scale()))?;
            let e = alignment_energy_var(t, x, &targets, &weights)?;
            let reg = t.sum_sq(t.sub(v, t.constant(z0_hat.clone()))?);
            t.add(e, t.scale(reg, lambda_reg))
        },
        &z,
        EPS,
    )
    .unwrap();
    assert_passed("refinement objective", &r);

    // The energy object used by the sampler must report the same gradient.
    let energy = DecodedAlignment {
        codec: &models.codec,
        targets: &targets,
        weights,
        latent_scale: models.latent_scale(),
    };
    let (_, g) = energy.energy(&z).unwrap();
    let scale = g.max_abs();
    let mut probe = z.clone();
    let mut worst: f64 = 0.0;
    for i in 0..z.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + EPS;
        let up = energy.energy(&probe).unwrap().0;
        probe.data_mut()[i] = orig - EPS;
        let down = energy.energy(&probe).unwrap().0;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * EPS);
        worst = worst.max(relative_error(g.data()[i], numeric, (scale * 1e-3).max(1e-8)));
    }
    assert!(worst < GRAD_CHECK_TOLERANCE, "decoded alignment: {worst:e}");
}
