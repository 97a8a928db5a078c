#![allow(dead_code)]

use drfuse_core::codec::{Codec, CodecConfig};
use drfuse_core::denoiser::{ConditionAdapter, Denoiser, DenoiserConfig};
use drfuse_core::numerics::params::init_normal;
use drfuse_core::numerics::{Rng, Tensor};
use drfuse_core::sampler::FusionModels;

pub const FRAME: usize = 16;

pub fn tiny_denoiser_cfg() -> DenoiserConfig {
    DenoiserConfig {
        width: 16,
        heads: 2,
        blocks: 2,
        history: 8,
        latent_channels: 4,
        latent_height: FRAME / 4,
        latent_width: FRAME / 4,
        ..DenoiserConfig::default()
    }
}

/// Untrained models on 16x16 frames with the zero-initialized output
/// layers replaced by random weights so every branch influences the result.
pub fn tiny_models(seed: u64) -> FusionModels {
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
    let cfg = tiny_denoiser_cfg();
    let mut denoiser = Denoiser::new(cfg.clone(), &mut rng).unwrap();
    let w = denoiser.params.get("out.w").unwrap().shape().to_vec();
    *denoiser.params.get_mut("out.w").unwrap() = init_normal(&w, 0.2, &mut rng);
    let mut adapter = ConditionAdapter::new(&cfg, &mut rng).unwrap();
    let w = adapter.params.get("out.w").unwrap().shape().to_vec();
    *adapter.params.get_mut("out.w").unwrap() = init_normal(&w, 0.1, &mut rng);
    FusionModels {
        codec,
        denoiser,
        adapter: Some(adapter),
    }
}

/// Smooth random frame in (0, 1) of shape `[1, FRAME, FRAME]`.
pub fn frame(seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    let (a, b, c) = (rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.0, 6.0));
    Tensor::from_fn(&[1, FRAME, FRAME], |i| {
        let (y, x) = ((i / FRAME) as f64, (i % FRAME) as f64);
        0.5 + 0.3 * (a * x / 4.0 + c).sin() * (b * y / 5.0).cos()
    })
}

pub fn sequence(n: usize, seed: u64) -> (Vec<Tensor>, Vec<Tensor>) {
    let ir = (0..n).map(|t| frame(seed + 2 * t as u64)).collect();
    let vi = (0..n).map(|t| frame(seed + 2 * t as u64 + 1)).collect();
    (ir, vi)
}
