//! Synthetic paired infrared/visible sequences with exact flow and occlusion.
//!
//! Objects translate rigidly by integer velocities and are composited
//! back-to-front (later objects occlude earlier ones), so ground-truth flow
//! and occlusion follow directly from a per-pixel owner buffer.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::flow::{FlowField, OcclusionMask};
use crate::numerics::io::{load_tensor, save_tensor, Dtype};
use crate::numerics::{Rng, Tensor};

pub const MIN_FRAME_SIZE: usize = 16;
pub const MAX_FLICKER: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Disk,
    Square,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ObjectSpec {
    pub shape: ShapeKind,
    /// Radius for disks, half side length for squares, in pixels.
    pub size: i32,
    /// Center (row, col) at frame 0.
    pub start: (i32, i32),
    /// Displacement per frame as (dy, dx).
    pub velocity: (i32, i32),
    pub ir_intensity: f64,
    pub texture: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub objects: Vec<ObjectSpec>,
    pub background_seed: u64,
    pub flicker: f64,
    pub ir_noise: f64,
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < MIN_FRAME_SIZE || self.width < MIN_FRAME_SIZE {
            return Err(Error::invalid(format!(
                "frame size {}x{} below the {MIN_FRAME_SIZE}x{MIN_FRAME_SIZE} minimum",
                self.height, self.width
            )));
        }
        if self.frames == 0 {
            return Err(Error::invalid("scene needs at least one frame"));
        }
        check_amplitude(self.flicker)?;
        if !(self.ir_noise >= 0.0) {
            return Err(Error::invalid("IR noise sigma must be non-negative"));
        }
        for o in &self.objects {
            if o.size < 1 {
                return Err(Error::invalid("object size must be at least one pixel"));
            }
        }
        Ok(())
    }

    /// Static objects over a static background; only flicker and sensor noise vary.
    pub fn static_scene(height: usize, width: usize, frames: usize, flicker: f64) -> Self {
        let (h, w) = (height as i32, width as i32);
        SceneConfig {
            height,
            width,
            frames,
            objects: vec![
                ObjectSpec {
                    shape: ShapeKind::Disk,
                    size: (h / 6).max(2),
                    start: (h / 3, w / 3),
                    velocity: (0, 0),
                    ir_intensity: 0.95,
                    texture: 1,
                },
                ObjectSpec {
                    shape: ShapeKind::Square,
                    size: (h / 8).max(1),
                    start: (2 * h / 3, 2 * w / 3),
                    velocity: (0, 0),
                    ir_intensity: 0.8,
                    texture: 2,
                },
            ],
            background_seed: 11,
            flicker,
            ir_noise: 0.01,
        }
    }

    /// Random scene for training data: 1 to 3 objects with small integer velocities.
    pub fn random(height: usize, width: usize, frames: usize, flicker: f64, rng: &mut Rng) -> Self {
        let n = 1 + rng.below(3);
        let (h, w) = (height as i32, width as i32);
        let objects = (0..n)
            .map(|_| {
                let size = 2 + rng.below((h / 6).max(2) as usize) as i32;
                ObjectSpec {
                    shape: if rng.below(2) == 0 {
                        ShapeKind::Disk
                    } else {
                        ShapeKind::Square
                    },
                    size,
                    start: (rng.below(h as usize) as i32, rng.below(w as usize) as i32),
                    velocity: (rng.below(5) as i32 - 2, rng.below(5) as i32 - 2),
                    ir_intensity: rng.uniform(0.6, 1.0),
                    texture: rng.next_u64(),
                }
            })
            .collect();
        SceneConfig {
            height,
            width,
            frames,
            objects,
            background_seed: rng.next_u64(),
            flicker,
            ir_noise: 0.01,
        }
    }
}

/// Frames, flows and masks for one generated sequence.
///
/// `flows[t - 1]` and `masks[t - 1]` live on the grid of frame `t`: sampling
/// frame `t - 1` at `p - flows[t - 1](p)` reproduces frame `t` wherever the
/// mask is 1. `flows_bwd[t - 1]` lives on the grid of frame `t - 1`.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub ir: Vec<Tensor>,
    pub vi: Vec<Tensor>,
    pub vi_clean: Vec<Tensor>,
    pub gains: Vec<f64>,
    pub flows: Vec<FlowField>,
    pub flows_bwd: Vec<FlowField>,
    pub masks: Vec<OcclusionMask>,
    /// 1 where any object covers the pixel.
    pub object_masks: Vec<Tensor>,
}

impl GroundTruthBundle {
    pub fn len(&self) -> usize {
        self.ir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ir.is_empty()
    }

    /// Per-pixel max(IR, clean VI) targets.
    pub fn composite_targets(&self) -> Result<Vec<Tensor>> {
        self.ir
            .iter()
            .zip(&self.vi_clean)
            .map(|(i, v)| composite_target(i, v))
            .collect()
    }
}

pub fn composite_target(ir: &Tensor, vi: &Tensor) -> Result<Tensor> {
    ir.zip_map(vi, f64::max)
}

fn check_amplitude(a: f64) -> Result<()> {
    if !(0.0..=MAX_FLICKER).contains(&a) {
        return Err(Error::invalid(format!(
            "flicker amplitude {a} outside [0, {MAX_FLICKER}]"
        )));
    }
    Ok(())
}

fn background_vi(seed: u64, h: usize, w: usize) -> Vec<f64> {
    let mut rng = Rng::new(seed);
    let waves: Vec<(f64, f64, f64, f64)> = (0..4)
        .map(|j| {
            let amp = 0.12 / (1.0 + j as f64 * 0.5);
            let fy = rng.uniform(-2.5, 2.5);
            let fx = rng.uniform(-2.5, 2.5);
            (amp, fy, fx, rng.uniform(0.0, std::f64::consts::TAU))
        })
        .collect();
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut v = 0.45;
            for &(a, fy, fx, ph) in &waves {
                let arg = std::f64::consts::TAU * (fy * y as f64 / h as f64 + fx * x as f64 / w as f64);
                v += a * (arg + ph).sin();
            }
            out[y * w + x] = v.clamp(0.05, 0.95);
        }
    }
    out
}

fn background_ir(h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = 0.12 + 0.05 * (y as f64 / h as f64) + 0.03 * (x as f64 / w as f64);
        }
    }
    out
}

impl ObjectSpec {
    fn center(&self, t: usize) -> (i32, i32) {
        (
            self.start.0 + self.velocity.0 * t as i32,
            self.start.1 + self.velocity.1 * t as i32,
        )
    }

    fn covers(&self, dy: i32, dx: i32) -> bool {
        match self.shape {
            ShapeKind::Disk => dy * dy + dx * dx <= self.size * self.size,
            ShapeKind::Square => dy.abs() <= self.size && dx.abs() <= self.size,
        }
    }

    fn ir_value(&self, dy: i32, dx: i32) -> f64 {
        let s = self.size as f64;
        let r2 = (dy * dy + dx * dx) as f64 / (s * s).max(1.0);
        self.ir_intensity * (1.0 - 0.25 * r2.min(2.0))
    }

    fn vi_value(&self, dy: i32, dx: i32) -> f64 {
        match self.texture % 4 {
            0 => {
                if ((dy.div_euclid(2) + dx.div_euclid(2)) & 1) == 0 {
                    0.85
                } else {
                    0.25
                }
            }
            1 => 0.55 + 0.3 * (dy as f64 * 1.3).sin(),
            2 => 0.55 + 0.3 * (dx as f64 * 1.3).cos(),
            _ => 0.3 + 0.5 * (((dy * dy + dx * dx) as f64).sqrt() * 0.9).cos().abs(),
        }
    }
}

/// Index of the front-most object covering each pixel at frame `t`, or -1.
fn owner_buffer(cfg: &SceneConfig, t: usize) -> Vec<i32> {
    let (h, w) = (cfg.height as i32, cfg.width as i32);
    let mut owner = vec![-1i32; (h * w) as usize];
    for (k, o) in cfg.objects.iter().enumerate() {
        let (cy, cx) = o.center(t);
        for y in (cy - o.size).max(0)..(cy + o.size + 1).min(h) {
            for x in (cx - o.size).max(0)..(cx + o.size + 1).min(w) {
                if o.covers(y - cy, x - cx) {
                    owner[(y * w + x) as usize] = k as i32;
                }
            }
        }
    }
    owner
}

pub fn generate_sequence(cfg: &SceneConfig, rng: &mut Rng) -> Result<GroundTruthBundle> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let bg_vi = background_vi(cfg.background_seed, h, w);
    let bg_ir = background_ir(h, w);
    let owners: Vec<Vec<i32>> = (0..cfg.frames).map(|t| owner_buffer(cfg, t)).collect();

    let mut ir = Vec::with_capacity(cfg.frames);
    let mut vi_clean = Vec::with_capacity(cfg.frames);
    let mut object_masks = Vec::with_capacity(cfg.frames);
    let mut noise_rng = rng.fork(1);
    for (t, owner) in owners.iter().enumerate() {
        let mut ir_t = vec![0.0; h * w];
        let mut vi_t = vec![0.0; h * w];
        let mut obj_t = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                if owner[p] < 0 {
                    ir_t[p] = bg_ir[p];
                    vi_t[p] = bg_vi[p];
                } else {
                    let o = &cfg.objects[owner[p] as usize];
                    let (cy, cx) = o.center(t);
                    let (dy, dx) = (y as i32 - cy, x as i32 - cx);
                    ir_t[p] = o.ir_value(dy, dx);
                    vi_t[p] = o.vi_value(dy, dx);
                    obj_t[p] = 1.0;
                }
                if cfg.ir_noise > 0.0 {
                    ir_t[p] += cfg.ir_noise * noise_rng.gaussian();
                }
                ir_t[p] = ir_t[p].clamp(0.0, 1.0);
            }
        }
        ir.push(Tensor::new(vec![h, w], ir_t)?);
        vi_clean.push(Tensor::new(vec![h, w], vi_t)?);
        object_masks.push(Tensor::new(vec![h, w], obj_t)?);
    }

    let gains = draw_flicker_gains(cfg.frames, cfg.flicker, &mut rng.fork(2))?;
    let vi = apply_gains(&vi_clean, &gains)?;

    let mut flows = Vec::new();
    let mut flows_bwd = Vec::new();
    let mut masks = Vec::new();
    for t in 1..cfg.frames {
        let (prev, curr) = (&owners[t - 1], &owners[t]);
        let velocity = |k: i32| -> (f64, f64) {
            if k < 0 {
                (0.0, 0.0)
            } else {
                let v = cfg.objects[k as usize].velocity;
                (v.1 as f64, v.0 as f64)
            }
        };
        let mut fwd = Tensor::zeros(&[2, h, w]);
        let mut bwd = Tensor::zeros(&[2, h, w]);
        let mut mask = Tensor::zeros(&[h, w]);
        for y in 0..h {
            for x in 0..w {
                let p = y * w + x;
                let (dx, dy) = velocity(curr[p]);
                fwd.data_mut()[p] = dx;
                fwd.data_mut()[h * w + p] = dy;
                let (bx, by) = velocity(prev[p]);
                bwd.data_mut()[p] = -bx;
                bwd.data_mut()[h * w + p] = -by;
                let (sy, sx) = (y as i64 - dy as i64, x as i64 - dx as i64);
                let visible = sy >= 0
                    && sx >= 0
                    && (sy as usize) < h
                    && (sx as usize) < w
                    && prev[sy as usize * w + sx as usize] == curr[p];
                mask.data_mut()[p] = if visible { 1.0 } else { 0.0 };
            }
        }
        flows.push(FlowField::new(fwd)?);
        flows_bwd.push(FlowField::new(bwd)?);
        masks.push(OcclusionMask::new(mask)?);
    }

    Ok(GroundTruthBundle {
        ir,
        vi,
        vi_clean,
        gains,
        flows,
        flows_bwd,
        masks,
        object_masks,
    })
}

/// Per-frame gains a_t drawn uniformly from [-amplitude, amplitude].
pub fn draw_flicker_gains(n: usize, amplitude: f64, rng: &mut Rng) -> Result<Vec<f64>> {
    check_amplitude(amplitude)?;
    Ok((0..n)
        .map(|_| {
            if amplitude == 0.0 {
                0.0
            } else {
                rng.uniform(-amplitude, amplitude)
            }
        })
        .collect())
}

/// Scales frame t by (1 + gains[t]) and clamps to [0, 1].
pub fn apply_gains(frames: &[Tensor], gains: &[f64]) -> Result<Vec<Tensor>> {
    if frames.len() != gains.len() {
        return Err(Error::invalid("one flicker gain per frame required"));
    }
    Ok(frames
        .iter()
        .zip(gains)
        .map(|(f, &a)| f.map(|v| (v * (1.0 + a)).clamp(0.0, 1.0)))
        .collect())
}

pub fn add_flicker(frames: &[Tensor], amplitude: f64, rng: &mut Rng) -> Result<Vec<Tensor>> {
    let gains = draw_flicker_gains(frames.len(), amplitude, rng)?;
    apply_gains(frames, &gains)
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Binary PGM (P5), 8-bit.
pub fn write_pgm(path: &Path, frame: &Tensor) -> Result<()> {
    let (h, w) = frame.dims2()?;
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(frame.data().iter().map(|&v| to_byte(v)));
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Binary PPM (P6) from RGB planes `[3, H, W]` or a grayscale `[H, W]` frame.
pub fn write_ppm(path: &Path, frame: &Tensor) -> Result<()> {
    let (c, h, w) = frame.chw()?;
    if c != 1 && c != 3 {
        return Err(Error::invalid(format!("PPM needs 1 or 3 channels, got {c}")));
    }
    let plane = h * w;
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    for p in 0..plane {
        for ch in 0..3 {
            let src = if c == 1 { 0 } else { ch };
            bytes.push(to_byte(frame.data()[src * plane + p]));
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

/// Reads P5 or P6 images; color is averaged to grayscale. Values in [0, 1].
pub fn read_netpbm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |d: &str| Error::format("netpbm", format!("{}: {d}", path.display()));
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..i]).to_string());
    }
    i += 1;
    let channels = match fields[0].as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(bad(&format!("unsupported magic {other}"))),
    };
    let parse = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, maxv) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxv != 255 {
        return Err(bad("only 8-bit images are supported"));
    }
    let body = bytes.get(i..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() != w * h * channels {
        return Err(bad("pixel data length does not match header"));
    }
    let data = body
        .chunks_exact(channels)
        .map(|px| px.iter().map(|&b| b as f64).sum::<f64>() / (255.0 * channels as f64))
        .collect();
    Tensor::new(vec![h, w], data)
}

/// A sequence written by [`export_bundle`].
#[derive(Debug, Clone)]
pub struct SequenceOnDisk {
    pub dir: PathBuf,
    pub height: usize,
    pub width: usize,
    pub flicker: f64,
    pub seed: u64,
    pub gains: Vec<f64>,
    pub ir: Vec<PathBuf>,
    pub vi: Vec<PathBuf>,
    pub vi_clean: Vec<PathBuf>,
    pub targets: Vec<PathBuf>,
    pub objects: Vec<PathBuf>,
    pub flows: Vec<PathBuf>,
    pub flows_bwd: Vec<PathBuf>,
    pub masks: Vec<PathBuf>,
}

/// Writes PGM/PPM frames, DRFT flows/masks, `ir.txt`/`vi.txt` frame lists
/// and `manifest.txt`. Frame lines read
/// `frame t gain ir vi vi_clean target objects [flow flow_bwd mask]`.
pub fn export_bundle(bundle: &GroundTruthBundle, cfg: &SceneConfig, seed: u64, dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::new();
    writeln!(manifest, "height {}", cfg.height).expect("string write");
    writeln!(manifest, "width {}", cfg.width).expect("string write");
    writeln!(manifest, "frames {}", bundle.len()).expect("string write");
    writeln!(manifest, "flicker {:?}", cfg.flicker).expect("string write");
    writeln!(manifest, "seed {seed}").expect("string write");
    let mut ir_list = String::new();
    let mut vi_list = String::new();
    let targets = bundle.composite_targets()?;
    for t in 0..bundle.len() {
        let ir = format!("ir_{t:04}.pgm");
        let vi = format!("vi_{t:04}.ppm");
        let clean = format!("viclean_{t:04}.pgm");
        let target = format!("target_{t:04}.pgm");
        let objects = format!("objects_{t:04}.drft");
        write_pgm(&dir.join(&ir), &bundle.ir[t])?;
        write_ppm(&dir.join(&vi), &bundle.vi[t])?;
        write_pgm(&dir.join(&clean), &bundle.vi_clean[t])?;
        write_pgm(&dir.join(&target), &targets[t])?;
        save_tensor(&dir.join(&objects), &bundle.object_masks[t], Dtype::F32)?;
        writeln!(ir_list, "{ir}").expect("string write");
        writeln!(vi_list, "{vi}").expect("string write");
        let mut line = format!("frame {t} {:?} {ir} {vi} {clean} {target} {objects}", bundle.gains[t]);
        if t > 0 {
            let flow = format!("flow_{t:04}.drft");
            let bwd = format!("flowbwd_{t:04}.drft");
            let mask = format!("mask_{t:04}.drft");
            save_tensor(&dir.join(&flow), bundle.flows[t - 1].tensor(), Dtype::F32)?;
            save_tensor(&dir.join(&bwd), bundle.flows_bwd[t - 1].tensor(), Dtype::F32)?;
            save_tensor(&dir.join(&mask), bundle.masks[t - 1].tensor(), Dtype::F32)?;
            write!(line, " {flow} {bwd} {mask}").expect("string write");
        }
        writeln!(manifest, "{line}").expect("string write");
    }
    for (name, text) in [("manifest.txt", &manifest), ("ir.txt", &ir_list), ("vi.txt", &vi_list)] {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
    }
    Ok(dir.join("manifest.txt"))
}

pub fn read_manifest(path: &Path) -> Result<SequenceOnDisk> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let bad = |d: &str| Error::format("sequence manifest", format!("{}: `{d}`", path.display()));
    let mut seq = SequenceOnDisk {
        dir: dir.clone(),
        height: 0,
        width: 0,
        flicker: 0.0,
        seed: 0,
        gains: vec![],
        ir: vec![],
        vi: vec![],
        vi_clean: vec![],
        targets: vec![],
        objects: vec![],
        flows: vec![],
        flows_bwd: vec![],
        masks: vec![],
    };
    let mut declared = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let f: Vec<&str> = line.split_whitespace().collect();
        let int = |s: &str| s.parse::<usize>().map_err(|_| bad(line));
        let real = |s: &str| s.parse::<f64>().map_err(|_| bad(line));
        match f[0] {
            "height" if f.len() == 2 => seq.height = int(f[1])?,
            "width" if f.len() == 2 => seq.width = int(f[1])?,
            "frames" if f.len() == 2 => declared = Some(int(f[1])?),
            "flicker" if f.len() == 2 => seq.flicker = real(f[1])?,
            "seed" if f.len() == 2 => seq.seed = f[1].parse().map_err(|_| bad(line))?,
            "frame" if f.len() == 8 || f.len() == 11 => {
                if int(f[1])? != seq.ir.len() || (f.len() == 11) != (seq.ir.len() > 0) {
                    return Err(bad(line));
                }
                seq.gains.push(real(f[2])?);
                seq.ir.push(dir.join(f[3]));
                seq.vi.push(dir.join(f[4]));
                seq.vi_clean.push(dir.join(f[5]));
                seq.targets.push(dir.join(f[6]));
                seq.objects.push(dir.join(f[7]));
                if f.len() == 11 {
                    seq.flows.push(dir.join(f[8]));
                    seq.flows_bwd.push(dir.join(f[9]));
                    seq.masks.push(dir.join(f[10]));
                }
            }
            _ => return Err(bad(line)),
        }
    }
    if seq.ir.is_empty() {
        return Err(bad("no frames listed"));
    }
    if declared.is_some_and(|n| n != seq.ir.len()) {
        return Err(bad("frame count does not match the frame lines"));
    }
    Ok(seq)
}

/// Reads a plain frame list (one relative path per line).
pub fn read_frame_list(path: &Path) -> Result<Vec<Tensor>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(|l| read_netpbm(&dir.join(l)))
        .collect()
}

impl SequenceOnDisk {
    pub fn len(&self) -> usize {
        self.ir.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ir.is_empty()
    }

    pub fn load_flows(&self) -> Result<(Vec<FlowField>, Vec<OcclusionMask>)> {
        let flows = self
            .flows
            .iter()
            .map(|p| FlowField::new(load_tensor(p)?))
            .collect::<Result<_>>()?;
        let masks = self
            .masks
            .iter()
            .map(|p| OcclusionMask::new(load_tensor(p)?))
            .collect::<Result<_>>()?;
        Ok((flows, masks))
    }

    pub fn load_targets(&self) -> Result<Vec<Tensor>> {
        self.targets.iter().map(|p| read_netpbm(p)).collect()
    }

    pub fn load_object_masks(&self) -> Result<Vec<Tensor>> {
        self.objects.iter().map(|p| load_tensor(p)).collect()
    }

    /// Rebuilds the bundle; frames carry 8-bit quantization.
    pub fn load_bundle(&self) -> Result<GroundTruthBundle> {
        let read = |ps: &[PathBuf]| ps.iter().map(|p| read_netpbm(p)).collect::<Result<Vec<_>>>();
        let (flows, masks) = self.load_flows()?;
        let flows_bwd = self
            .flows_bwd
            .iter()
            .map(|p| FlowField::new(load_tensor(p)?))
            .collect::<Result<_>>()?;
        Ok(GroundTruthBundle {
            ir: read(&self.ir)?,
            vi: read(&self.vi)?,
            vi_clean: read(&self.vi_clean)?,
            gains: self.gains.clone(),
            flows,
            flows_bwd,
            masks,
            object_masks: self.load_object_masks()?,
        })
    }
}
