//! Noise modulation of history latents, the three history configurations,
//! guidance composition and the spectral view of modulation.

use std::fmt::Write as _;

use rustfft::num_complex::Complex64;

use crate::denoiser::HistorySlot;
use crate::error::{ensure_shape, Error, Result};
use crate::numerics::fft::{bin_frequency, fft2_in_place, fft2_real};
use crate::numerics::{seeded_gaussian, Rng, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceSettings {
    /// Guidance scale s.
    pub scale: f64,
    /// Modulation level of the stabilized configuration.
    pub sigma_stab: f64,
    /// History budget T.
    pub window: usize,
}

impl Default for GuidanceSettings {
    fn default() -> Self {
        GuidanceSettings {
            scale: 2.0,
            sigma_stab: 0.02,
            window: 8,
        }
    }
}

impl GuidanceSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale >= 0.0 && self.scale.is_finite()) {
            return Err(Error::Config(format!("guidance scale {} must be finite and >= 0", self.scale)));
        }
        if !(0.0..=1.0).contains(&self.sigma_stab) {
            return Err(Error::Config(format!("sigma_stab {} outside [0, 1]", self.sigma_stab)));
        }
        if self.window == 0 {
            return Err(Error::Config("history window must be positive".into()));
        }
        Ok(())
    }
}

/// Variance-preserving coefficients `(alpha, sigma)` for level `lambda`.
pub fn modulation_coefficients(lambda: f64) -> Result<(f64, f64)> {
    if !(0.0..=1.0).contains(&lambda) {
        return Err(Error::invalid(format!("modulation level {lambda} outside [0, 1]")));
    }
    Ok(((1.0 - lambda * lambda).sqrt(), lambda))
}

/// `alpha * z + sigma * eps` with fresh `eps` from `rng`.
pub fn modulate(z: &Tensor, lambda: f64, rng: &mut Rng) -> Result<Tensor> {
    let (alpha, sigma) = modulation_coefficients(lambda)?;
    if sigma == 0.0 {
        return Ok(z.clone());
    }
    let eps = seeded_gaussian(z.shape(), rng)?;
    if alpha == 0.0 {
        return Ok(eps);
    }
    z.axpby(alpha, &eps, sigma)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HistoryVariant {
    /// Every slot is pure noise.
    Baseline,
    /// Every slot modulated at `sigma_stab`.
    Stabilized,
    /// Only the most recent frame, unmodulated.
    ContextSuppressed,
}

impl HistoryVariant {
    pub const ALL: [HistoryVariant; 3] = [
        HistoryVariant::Baseline,
        HistoryVariant::Stabilized,
        HistoryVariant::ContextSuppressed,
    ];

    pub fn index(self) -> usize {
        match self {
            HistoryVariant::Baseline => 0,
            HistoryVariant::Stabilized => 1,
            HistoryVariant::ContextSuppressed => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryConfig {
    pub variant: HistoryVariant,
    pub slots: Vec<HistorySlot>,
}

/// Builds one history configuration. `history` is ordered oldest first.
pub fn make_history_config(
    history: &[Tensor],
    variant: HistoryVariant,
    settings: &GuidanceSettings,
    rng: &mut Rng,
) -> Result<HistoryConfig> {
    settings.validate()?;
    if history.len() > settings.window {
        return Err(Error::invalid(format!(
            "history of {} frames exceeds window {}",
            history.len(),
            settings.window
        )));
    }
    for z in history.iter().skip(1) {
        ensure_shape(history[0].shape(), z.shape())?;
    }
    let n = history.len();
    let lag = |i: usize| n - i;
    let slots = match variant {
        HistoryVariant::Baseline => history
            .iter()
            .enumerate()
            .map(|(i, z)| {
                Ok(HistorySlot {
                    latent: seeded_gaussian(z.shape(), rng)?,
                    lag: lag(i),
                    level: 1.0,
                })
            })
            .collect::<Result<_>>()?,
        HistoryVariant::Stabilized => history
            .iter()
            .enumerate()
            .map(|(i, z)| {
                Ok(HistorySlot {
                    latent: modulate(z, settings.sigma_stab, rng)?,
                    lag: lag(i),
                    level: settings.sigma_stab,
                })
            })
            .collect::<Result<_>>()?,
        HistoryVariant::ContextSuppressed => {
            let last = history
                .last()
                .ok_or_else(|| Error::invalid("context-suppressed history needs at least one frame"))?;
            vec![HistorySlot {
                latent: last.clone(),
                lag: 1,
                level: 0.0,
            }]
        }
    };
    Ok(HistoryConfig { variant, slots })
}

/// `v0 + s * (v1 - v2)`.
pub fn compose_guidance(v0: &Tensor, v1: &Tensor, v2: &Tensor, s: f64) -> Result<Tensor> {
    ensure_shape(v0.shape(), v1.shape())?;
    ensure_shape(v0.shape(), v2.shape())?;
    let out = Tensor::new(
        v0.shape().to_vec(),
        v0.data()
            .iter()
            .zip(v1.data())
            .zip(v2.data())
            .map(|((a, b), c)| a + s * (b - c))
            .collect(),
    )?;
    out.check_finite("guided velocity")?;
    Ok(out)
}

/// Random 2-D field whose expected power spectrum falls as `|f|^-exponent`.
/// The DC component is zero.
pub fn power_law_field(h: usize, w: usize, exponent: f64, rng: &mut Rng) -> Result<Tensor> {
    if h == 0 || w == 0 {
        return Err(Error::InvalidShape(vec![h, w]));
    }
    let white = seeded_gaussian(&[h, w], rng)?;
    let mut spec = fft2_real(white.data(), h, w);
    for u in 0..h {
        for v in 0..w {
            let f = bin_frequency(u, h).hypot(bin_frequency(v, w));
            let gain = if f == 0.0 { 0.0 } else { f.powf(-exponent / 2.0) };
            spec[u * w + v] *= gain;
        }
    }
    fft2_in_place(&mut spec, h, w, true);
    let scale = 1.0 / (h * w) as f64;
    Tensor::new(vec![h, w], spec.iter().map(|c| c.re * scale).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralBand {
    pub band_low: f64,
    pub band_high: f64,
    pub bins: usize,
    /// Per-bin signal power of `z` normalized so white unit noise has power 1.
    pub signal_power: f64,
    /// Measured `|<Y, Z>|^2 / |Z|^4` over the band, i.e. the retained signal fraction.
    pub retention: f64,
    /// Measured noise-to-retained-signal power ratio.
    pub corruption: f64,
    /// `sigma^2 / (alpha^2 * signal_power)`.
    pub predicted: f64,
}

pub const SPECTRAL_BANDS: usize = 6;

/// Monte Carlo measurement of how modulation at `lambda` corrupts each
/// radial frequency band of `z`.
pub fn spectral_attenuation_report(z: &Tensor, lambda: f64, rng: &mut Rng, trials: usize) -> Result<Vec<SpectralBand>> {
    let (h, w) = z.dims2()?;
    if trials < 100 {
        return Err(Error::invalid(format!("spectral report needs >= 100 trials, got {trials}")));
    }
    if z.max_abs() == 0.0 {
        return Err(Error::invalid("spectral report of an all-zero latent"));
    }
    let (alpha, sigma) = modulation_coefficients(lambda)?;
    let n = (h * w) as f64;
    let r_max = 0.5f64.hypot(0.5);
    let width = r_max / SPECTRAL_BANDS as f64;
    let band_of: Vec<Option<usize>> = (0..h * w)
        .map(|k| {
            let r = bin_frequency(k / w, h).hypot(bin_frequency(k % w, w));
            (r > 0.0).then(|| ((r / width).ceil() as usize).clamp(1, SPECTRAL_BANDS) - 1)
        })
        .collect();
    let zf = fft2_real(z.data(), h, w);
    let mut signal = [0.0; SPECTRAL_BANDS];
    let mut bins = [0usize; SPECTRAL_BANDS];
    for (k, b) in band_of.iter().enumerate() {
        if let Some(b) = *b {
            signal[b] += zf[k].norm_sqr();
            bins[b] += 1;
        }
    }
    let mut cross = [0.0; SPECTRAL_BANDS];
    let mut noise = [0.0; SPECTRAL_BANDS];
    for _ in 0..trials {
        let y = modulate(z, lambda, rng)?;
        let yf = fft2_real(y.data(), h, w);
        for (k, b) in band_of.iter().enumerate() {
            if let Some(b) = *b {
                let zk: Complex64 = zf[k];
                cross[b] += (yf[k] * zk.conj()).re;
                noise[b] += (yf[k] - zk * alpha).norm_sqr();
            }
        }
    }
    let t = trials as f64;
    Ok((0..SPECTRAL_BANDS)
        .filter(|&b| bins[b] > 0 && signal[b] > 0.0)
        .map(|b| {
            let retained = alpha * alpha * signal[b];
            let gain = cross[b] / t / signal[b];
            SpectralBand {
                band_low: b as f64 * width,
                band_high: (b + 1) as f64 * width,
                bins: bins[b],
                signal_power: signal[b] / (n * bins[b] as f64),
                retention: gain * gain,
                corruption: if retained > 0.0 { noise[b] / t / retained } else { f64::INFINITY },
                predicted: if alpha > 0.0 {
                    sigma * sigma * n * bins[b] as f64 / retained
                } else {
                    f64::INFINITY
                },
            }
        })
        .collect())
}

pub fn spectral_report_csv(bands: &[SpectralBand]) -> String {
    let mut out = String::from("band_low,band_high,retention,corruption\n");
    for b in bands {
        let _ = writeln!(out, "{:.6},{:.6},{:.9},{:.9e}", b.band_low, b.band_high, b.retention, b.corruption);
    }
    out
}
