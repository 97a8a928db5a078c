//! Fusion quality metrics, temporal-stability proxies and difference maps.

use std::fmt::Write as _;

use crate::error::{ensure_shape, Error, Result};
use crate::flow::{temporal_loss, FlowField, OcclusionMask};
use crate::numerics::Tensor;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
pub const EN_BINS: usize = 256;

fn plane(a: &Tensor) -> Result<(usize, usize)> {
    let (c, h, w) = a.chw()?;
    if c != 1 {
        return Err(Error::invalid(format!("expected a single-channel frame, got {c} channels")));
    }
    Ok((h, w))
}

/// Pearson correlation; 0 when either input is constant.
pub fn cc(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    if a.is_empty() {
        return Err(Error::invalid("cc of empty images"));
    }
    let constant = |t: &Tensor| t.data().iter().all(|&v| v == t.data()[0]);
    if constant(a) || constant(b) {
        return Ok(0.0);
    }
    let (ma, mb) = (a.mean(), b.mean());
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.data().iter().zip(b.data()) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Shannon entropy in bits of the 256-bin histogram of values in [0, 1].
pub fn en(a: &Tensor) -> Result<f64> {
    if a.is_empty() {
        return Err(Error::invalid("entropy of an empty image"));
    }
    let mut hist = [0usize; EN_BINS];
    for &v in a.data() {
        let bin = (v.clamp(0.0, 1.0) * (EN_BINS - 1) as f64).round() as usize;
        hist[bin] += 1;
    }
    let n = a.len() as f64;
    Ok(hist
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.log2()
        })
        .sum::<f64>()
        .max(0.0))
}

/// Normalized 2-D Gaussian window `[size, size]`.
pub fn gaussian_window(size: usize, sigma: f64) -> Tensor {
    let c = (size as f64 - 1.0) / 2.0;
    let g: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = g.iter().sum();
    Tensor::from_fn(&[size, size], |k| g[k / size] * g[k % size] / (s * s))
}

/// Mean local SSIM over all fully contained 11x11 Gaussian windows.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    let (h, w) = plane(a)?;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid(format!("SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}")));
    }
    let win = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let (x, y, g) = (a.data(), b.data(), win.data());
    let (oh, ow) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut total = 0.0;
    for i in 0..oh {
        for j in 0..ow {
            let (mut mx, mut my, mut xx, mut yy, mut xy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for u in 0..SSIM_WINDOW {
                for v in 0..SSIM_WINDOW {
                    let gw = g[u * SSIM_WINDOW + v];
                    let p = (i + u) * w + j + v;
                    mx += gw * x[p];
                    my += gw * y[p];
                    xx += gw * x[p] * x[p];
                    yy += gw * y[p] * y[p];
                    xy += gw * x[p] * y[p];
                }
            }
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            total += ((2.0 * mx * my + SSIM_C1) * (2.0 * cxy + SSIM_C2))
                / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2));
        }
    }
    Ok(total / (oh * ow) as f64)
}

/// Peak signal-to-noise ratio for unit dynamic range.
pub fn psnr(a: &Tensor, b: &Tensor) -> Result<f64> {
    ensure_shape(a.shape(), b.shape())?;
    let mse = a.sub(b)?.sq_norm() / a.len() as f64;
    Ok(if mse == 0.0 { f64::INFINITY } else { -10.0 * mse.log10() })
}

fn check_sequence(seq: &[Tensor]) -> Result<()> {
    if seq.len() < 2 {
        return Err(Error::invalid("temporal metrics need at least two frames"));
    }
    for f in &seq[1..] {
        ensure_shape(seq[0].shape(), f.shape())?;
    }
    Ok(())
}

/// Mean squared difference of each adjacent pair; entry `t - 1` is pair `(t - 1, t)`.
pub fn frame_diff_energy(seq: &[Tensor]) -> Result<Vec<f64>> {
    check_sequence(seq)?;
    seq.windows(2)
        .map(|p| Ok(p[1].sub(&p[0])?.sq_norm() / p[0].len() as f64))
        .collect()
}

/// Frame-difference energy restricted to pixels where `region` is nonzero.
pub fn masked_diff_energy(seq: &[Tensor], region: &Tensor) -> Result<Vec<f64>> {
    check_sequence(seq)?;
    ensure_shape(seq[0].shape(), region.shape())?;
    let count = region.data().iter().filter(|&&m| m != 0.0).count();
    if count == 0 {
        return Err(Error::invalid("empty region for masked diff energy"));
    }
    Ok(seq
        .windows(2)
        .map(|p| {
            p[0].data()
                .iter()
                .zip(p[1].data())
                .zip(region.data())
                .filter(|(_, &m)| m != 0.0)
                .map(|((a, b), _)| (b - a) * (b - a))
                .sum::<f64>()
                / count as f64
        })
        .collect())
}

/// Occlusion-masked warping error of each frame against its flow-warped predecessor.
pub fn warped_residual(seq: &[Tensor], flows: &[FlowField], masks: &[OcclusionMask]) -> Result<Vec<f64>> {
    check_sequence(seq)?;
    if flows.len() != seq.len() - 1 || masks.len() != seq.len() - 1 {
        return Err(Error::invalid(format!(
            "{} frames need {} flows and masks, got {} and {}",
            seq.len(),
            seq.len() - 1,
            flows.len(),
            masks.len()
        )));
    }
    let (h, w) = plane(&seq[0])?;
    (1..seq.len())
        .map(|t| {
            let prev = seq[t - 1].clone().reshape(&[1, h, w])?;
            let curr = seq[t].clone().reshape(&[1, h, w])?;
            temporal_loss(&prev, &curr, &flows[t - 1], &masks[t - 1], 1e-6)
        })
        .collect()
}

/// Signed differences of adjacent frames on a red-white-blue map with one
/// scale for the whole sequence. Output frames are `[3, H, W]`.
pub fn diff_map_render(seq: &[Tensor]) -> Result<Vec<Tensor>> {
    check_sequence(seq)?;
    let (h, w) = plane(&seq[0])?;
    let diffs: Vec<Tensor> = seq.windows(2).map(|p| p[1].sub(&p[0])).collect::<Result<_>>()?;
    let scale = diffs.iter().map(Tensor::max_abs).fold(0.0, f64::max);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    let n = h * w;
    diffs
        .iter()
        .map(|d| {
            let mut rgb = vec![1.0; 3 * n];
            for (p, &v) in d.data().iter().enumerate() {
                let u = (v / scale).clamp(-1.0, 1.0);
                if u > 0.0 {
                    rgb[n + p] = 1.0 - u;
                    rgb[2 * n + p] = 1.0 - u;
                } else if u < 0.0 {
                    rgb[p] = 1.0 + u;
                    rgb[n + p] = 1.0 + u;
                }
            }
            Tensor::new(vec![3, h, w], rgb)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub frame: usize,
    pub cc_ir: f64,
    pub cc_vi: f64,
    pub cc: f64,
    pub en: f64,
    pub ssim_ir: f64,
    pub ssim_vi: f64,
    pub ssim: f64,
    /// Absent for the first frame.
    pub diff_energy: Option<f64>,
    pub warped_residual: Option<f64>,
}

impl MetricsRow {
    pub fn evaluate(frame: usize, fused: &Tensor, ir: &Tensor, vi: &Tensor) -> Result<Self> {
        let (cc_ir, cc_vi) = (cc(fused, ir)?, cc(fused, vi)?);
        let (ssim_ir, ssim_vi) = (ssim(fused, ir)?, ssim(fused, vi)?);
        Ok(MetricsRow {
            frame,
            cc_ir,
            cc_vi,
            cc: 0.5 * (cc_ir + cc_vi),
            en: en(fused)?,
            ssim_ir,
            ssim_vi,
            ssim: 0.5 * (ssim_ir + ssim_vi),
            diff_energy: None,
            warped_residual: None,
        })
    }
}

pub const REPORT_HEADER: &str = "frame,cc_ir,cc_vi,cc,en,ssim_ir,ssim_vi,ssim,diff_energy,warped_residual";

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn rows_to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(REPORT_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{:.9},{},{}",
            r.frame,
            r.cc_ir,
            r.cc_vi,
            r.cc,
            r.en,
            r.ssim_ir,
            r.ssim_vi,
            r.ssim,
            opt(r.diff_energy),
            opt(r.warped_residual)
        );
    }
    out
}

pub fn rows_from_csv(text: &str) -> Result<Vec<MetricsRow>> {
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(REPORT_HEADER) {
        return Err(Error::format("report", "missing or unexpected header"));
    }
    lines
        .filter(|l| !l.trim().is_empty())
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 10 {
                return Err(Error::format("report", format!("expected 10 fields: `{line}`")));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|_| Error::format("report", format!("bad number `{s}`")));
            let opt = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
            Ok(MetricsRow {
                frame: f[0].parse().map_err(|_| Error::format("report", format!("bad frame `{}`", f[0])))?,
                cc_ir: num(f[1])?,
                cc_vi: num(f[2])?,
                cc: num(f[3])?,
                en: num(f[4])?,
                ssim_ir: num(f[5])?,
                ssim_vi: num(f[6])?,
                ssim: num(f[7])?,
                diff_energy: opt(f[8])?,
                warped_residual: opt(f[9])?,
            })
        })
        .collect()
}

/// Ordinary least-squares slope of `ys` against their indices.
pub fn ls_slope(ys: &[f64]) -> f64 {
    let n = ys.len() as f64;
    if ys.len() < 2 {
        return 0.0;
    }
    let mx = (n - 1.0) / 2.0;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in ys.iter().enumerate() {
        let dx = i as f64 - mx;
        sxy += dx * (y - my);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;

    fn random(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = Rng::new(seed);
        Tensor::from_fn(&[h, w], |_| rng.uniform(0.0, 1.0))
    }

    #[test]
    fn cc_cases() {
        let x = random(8, 8, 1);
        assert!((cc(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        assert!((cc(&x, &x.scale(-1.0)).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(cc(&x, &Tensor::full(&[8, 8], 0.3)).unwrap(), 0.0);
        let y = random(8, 8, 2);
        let shifted = cc(&x.map(|v| v + 3.0), &y.map(|v| v + 3.0)).unwrap();
        assert!((shifted - cc(&x, &y).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(en(&Tensor::full(&[4, 4], 0.7)).unwrap(), 0.0);
        let all = Tensor::from_fn(&[16, 16], |i| i as f64 / 255.0);
        assert!((en(&all).unwrap() - 8.0).abs() < 1e-12);
        let split = Tensor::from_fn(&[4, 4], |i| if i < 4 { 0.0 } else { 1.0 });
        assert!((en(&split).unwrap() - 0.811_278_124_459_132_8).abs() < 1e-12);
        assert!(en(&Tensor::zeros(&[0])).is_err());
    }

    #[test]
    fn ssim_cases() {
        let x = random(16, 16, 3);
        assert!((ssim(&x, &x).unwrap() - 1.0).abs() < 1e-12);
        let y = random(16, 16, 4);
        assert!((ssim(&x, &y).unwrap() - ssim(&y, &x).unwrap()).abs() < 1e-12);
        let (a, b) = (0.5, 0.6);
        let expected = (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1);
        let got = ssim(&Tensor::full(&[12, 12], a), &Tensor::full(&[12, 12], b)).unwrap();
        assert!((got - expected).abs() < 1e-12);
        assert!(ssim(&Tensor::zeros(&[10, 10]), &Tensor::zeros(&[10, 10])).is_err());
    }

    #[test]
    fn diff_energy_cases() {
        let c = vec![Tensor::full(&[4, 4], 0.2); 3];
        assert_eq!(frame_diff_energy(&c).unwrap(), vec![0.0, 0.0]);
        let alt: Vec<Tensor> = (0..4).map(|t| Tensor::full(&[4, 4], (t % 2) as f64)).collect();
        assert_eq!(frame_diff_energy(&alt).unwrap(), vec![1.0; 3]);
        assert!(frame_diff_energy(&c[..1]).is_err());
    }

    #[test]
    fn residual_spikes_next_to_corrupted_frame() {
        let mut seq = vec![Tensor::full(&[4, 4], 0.5); 5];
        seq[2] = Tensor::full(&[4, 4], 0.9);
        let flows = vec![FlowField::zeros(4, 4); 4];
        let masks = vec![OcclusionMask::ones(4, 4); 4];
        let r = warped_residual(&seq, &flows, &masks).unwrap();
        assert_eq!(r[0], 0.0);
        assert!(r[1] > 0.0 && r[2] > 0.0);
        assert_eq!(r[3], 0.0);
    }

    #[test]
    fn diff_map_colors() {
        let a = Tensor::full(&[2, 2], 0.4);
        let maps = diff_map_render(&[a.clone(), a.clone()]).unwrap();
        assert!(maps[0].data().iter().all(|&v| v == 1.0));
        let maps = diff_map_render(&[a.clone(), a.map(|v| v + 0.1)]).unwrap();
        let m = &maps[0];
        assert!(m.data()[..4].iter().all(|&v| v == 1.0));
        assert!(m.data()[4..].iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn csv_round_trip() {
        let row = MetricsRow::evaluate(0, &random(16, 16, 5), &random(16, 16, 6), &random(16, 16, 7)).unwrap();
        let mut second = row.clone();
        second.frame = 1;
        second.diff_energy = Some(0.125);
        second.warped_residual = Some(0.5);
        let parsed = rows_from_csv(&rows_to_csv(&[row.clone(), second])).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!((parsed[0].ssim - row.ssim).abs() < 1e-8);
        assert_eq!(parsed[0].diff_energy, None);
        assert_eq!(parsed[1].diff_energy, Some(0.125));
    }

    #[test]
    fn slope_of_line() {
        assert!((ls_slope(&[1.0, 3.0, 5.0, 7.0]) - 2.0).abs() < 1e-12);
        assert_eq!(ls_slope(&[4.0]), 0.0);
    }
}
