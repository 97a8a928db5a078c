use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use drfuse_core::config::RunConfig;
use drfuse_core::metrics::{diff_map_render, ls_slope, masked_diff_energy, rows_from_csv, rows_to_csv};
use drfuse_core::numerics::Tensor;
use drfuse_core::pipeline::{
    background_mask, held_out_warping_error, load_models, mean_target_ssim, prior_curve_csv, read_corpus,
    run_stage1, run_stage2, stage1_curve_csv, stage2_curve_csv, summary_csv, summary_text, write_corpus,
    RunSummary, ADAPTER_DIR, CODEC_DIR, DENOISER_DIR,
};
use drfuse_core::sampler::{evaluate_sequence, rollout};
use drfuse_core::scenes::{read_frame_list, read_manifest, read_netpbm, write_ppm};
use drfuse_core::codec::Codec;

const REPORT: &str = "report.csv";
const RUN_INFO: &str = "run.txt";

#[derive(Parser)]
#[command(name = "drfuse", version, about = "History-guided infrared-visible video fusion")]
struct Cli {
    /// key = value config file; defaults apply to absent keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key, e.g. `--set prior_steps=500`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic IR/VI sequences with ground truth and a corpus index.
    Generate {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the codec; writes <out>/codec and stage1_loss.csv.
    TrainStage1 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Corpus used for the held-out warping error.
        #[arg(long)]
        heldout: Option<PathBuf>,
    },
    /// Train the denoiser prior and the IR adapter on top of a stage-1 checkpoint.
    TrainStage2 {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Fuse a sequence autoregressively.
    Fuse(FuseArgs),
    /// Score fused frames against a ground-truth sequence.
    Eval {
        #[arg(long)]
        fused: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Compare runs: mean metrics per run directory.
    Report {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct FuseArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Sequence manifest; supplies frames and ground-truth motion.
    #[arg(long, conflicts_with_all = ["ir", "vi"])]
    manifest: Option<PathBuf>,
    /// Frame list of infrared PGM/PPM files.
    #[arg(long, requires = "vi")]
    ir: Option<PathBuf>,
    /// Frame list of visible PGM/PPM files.
    #[arg(long, requires = "ir")]
    vi: Option<PathBuf>,
    /// Guidance scale s.
    #[arg(long)]
    scale: Option<f64>,
    /// full | hg | adapter | refine | h2
    #[arg(long)]
    ablate: Option<String>,
    /// Same as `--ablate hg`.
    #[arg(long, conflicts_with = "ablate")]
    ablate_guidance: bool,
    /// Write signed difference maps of consecutive frames.
    #[arg(long)]
    diffmaps: bool,
    /// Run name used by `report`; defaults to the ablation label.
    #[arg(long)]
    label: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("drfuse: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("DRFUSE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .with_context(|| format!("DRFUSE_THREADS must be a positive integer, got `{v}`"))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    Ok(())
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_overrides(cli.overrides.iter().map(String::as_str))?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let cfg = load_config(&cli)?;
    match cli.command {
        Command::Generate { out } => {
            let index = write_corpus(&cfg, &out)?;
            println!("wrote {} sequences; index {}", cfg.sequences, index.display());
        }
        Command::TrainStage1 { data, out, heldout } => {
            let corpus = read_corpus(&data)?;
            let outcome = run_stage1(&cfg, &corpus)?;
            create_dir(&out)?;
            outcome.codec.save(&out.join(CODEC_DIR))?;
            write(&out.join("stage1_loss.csv"), &stage1_curve_csv(&outcome.curve))?;
            cfg.save(&out.join("stage1_config.txt"))?;
            if let (Some(first), Some(last)) = (outcome.curve.first(), outcome.curve.last()) {
                println!("stage-1 loss {:.6} -> {:.6}", first.total, last.total);
            }
            if let Some(dir) = heldout {
                let err = held_out_warping_error(&cfg, &outcome.codec, &read_corpus(&dir)?)?;
                println!("held-out latent warping error {err:.6e}");
            }
        }
        Command::TrainStage2 { data, ckpt } => {
            let codec_dir = ckpt.join(CODEC_DIR);
            if !codec_dir.is_dir() {
                bail!("missing stage-1 checkpoint {}", codec_dir.display());
            }
            let codec = Codec::load(&codec_dir)?;
            let corpus = read_corpus(&data)?;
            let outcome = run_stage2(&cfg, &codec, &corpus)?;
            outcome.denoiser.save(&ckpt.join(DENOISER_DIR))?;
            outcome.adapter.save(&ckpt.join(ADAPTER_DIR))?;
            write(&ckpt.join("prior_loss.csv"), &prior_curve_csv(&outcome.prior_curve))?;
            write(&ckpt.join("stage2_loss.csv"), &stage2_curve_csv(&outcome.adapter_curve))?;
            cfg.save(&ckpt.join("stage2_config.txt"))?;
            if let (Some(a), Some(b)) = (outcome.adapter_curve.first(), outcome.adapter_curve.last()) {
                println!("stage-2 loss {:.6} -> {:.6}", a.total, b.total);
            }
        }
        Command::Fuse(args) => fuse(cfg, args)?,
        Command::Eval { fused, manifest } => eval(&fused, &manifest)?,
        Command::Report { runs, out } => {
            let rows = runs.iter().map(|d| summarize(d)).collect::<Result<Vec<_>>>()?;
            print!("{}", summary_text(&rows));
            if let Some(path) = out {
                write(&path, &summary_csv(&rows))?;
            }
        }
    }
    Ok(())
}

fn fuse(mut cfg: RunConfig, args: FuseArgs) -> Result<()> {
    if let Some(s) = args.scale {
        cfg.set("scale", &s.to_string())?;
    }
    if args.ablate_guidance {
        cfg.set("ablate", "hg")?;
    } else if let Some(a) = &args.ablate {
        cfg.set("ablate", a)?;
    }
    cfg.validate()?;
    let settings = cfg.sampler()?;
    let (ir, vi, motion) = match (&args.manifest, &args.ir, &args.vi) {
        (Some(m), _, _) => {
            let seq = read_manifest(m)?;
            let read = |ps: &[PathBuf]| ps.iter().map(|p| read_netpbm(p)).collect::<Result<Vec<_>, _>>();
            (read(&seq.ir)?, read(&seq.vi)?, Some(seq.load_flows()?))
        }
        (None, Some(ir), Some(vi)) => (read_frame_list(ir)?, read_frame_list(vi)?, None),
        _ => bail!("fuse needs --manifest or both --ir and --vi"),
    };
    if ir.len() != vi.len() {
        bail!("IR list has {} frames but VI list has {}", ir.len(), vi.len());
    }
    let models = load_models(&args.ckpt)?;
    let motion_ref = motion.as_ref().map(|(f, m)| (&f[..], &m[..]));
    let out = rollout(&ir, &vi, &models, &settings, cfg.seed, motion_ref)?;
    create_dir(&args.out)?;
    for (t, f) in out.frames.iter().enumerate() {
        write_ppm(&args.out.join(format!("fused_{t:04}.ppm")), f)?;
    }
    write(&args.out.join(REPORT), &rows_to_csv(&out.report.rows))?;
    let mut drift = String::from("frame,deviation\n");
    for (t, d) in out.report.drift.deviation.iter().enumerate() {
        drift.push_str(&format!("{t},{d:.9}\n"));
    }
    write(&args.out.join("drift.csv"), &drift)?;
    if args.diffmaps && out.frames.len() > 1 {
        let flat = out
            .frames
            .iter()
            .map(|f| {
                let (_, h, w) = f.chw()?;
                f.clone().reshape(&[h, w])
            })
            .collect::<drfuse_core::Result<Vec<Tensor>>>()?;
        for (t, m) in diff_map_render(&flat)?.iter().enumerate() {
            write_ppm(&args.out.join(format!("diff_{:04}.ppm", t + 1)), m)?;
        }
    }
    let label = args
        .label
        .unwrap_or_else(|| settings.ablation.label().replace(' ', "_").replace('/', ""));
    write(&args.out.join(RUN_INFO), &format!("label = {label}\n"))?;
    cfg.save(&args.out.join("config.txt"))?;
    println!(
        "fused {} frames; mean diff energy {:.6e}, slope {:.3e}",
        out.frames.len(),
        out.report.drift.mean_diff_energy,
        out.report.drift.diff_energy_slope
    );
    Ok(())
}

fn fused_frames(dir: &Path) -> Result<Vec<Tensor>> {
    let mut frames = Vec::new();
    loop {
        let p = dir.join(format!("fused_{:04}.ppm", frames.len()));
        if !p.exists() {
            break;
        }
        frames.push(read_netpbm(&p)?);
    }
    if frames.is_empty() {
        bail!("no fused_0000.ppm in {}", dir.display());
    }
    Ok(frames)
}

fn eval(fused: &Path, manifest: &Path) -> Result<()> {
    let frames = fused_frames(fused)?;
    let seq = read_manifest(manifest)?;
    if seq.len() != frames.len() {
        bail!("{} fused frames but the manifest lists {}", frames.len(), seq.len());
    }
    let ir = seq.ir.iter().map(|p| read_netpbm(p)).collect::<Result<Vec<_>, _>>()?;
    let vi = seq.vi.iter().map(|p| read_netpbm(p)).collect::<Result<Vec<_>, _>>()?;
    let (flows, masks) = seq.load_flows()?;
    let report = evaluate_sequence(&frames, &ir, &vi, Some((&flows, &masks)))?;
    write(&fused.join("eval.csv"), &rows_to_csv(&report.rows))?;
    let target_ssim = mean_target_ssim(
        &frames.iter().map(|f| f.clone().reshape(&[1, seq.height, seq.width])).collect::<Result<Vec<_>, _>>()?,
        &seq.load_targets()?,
    )?;
    let mut summary = format!(
        "frames = {}\nmean_diff_energy = {:e}\ndiff_energy_slope = {:e}\ntarget_ssim = {target_ssim:.6}\n",
        frames.len(),
        report.drift.mean_diff_energy,
        report.drift.diff_energy_slope
    );
    if frames.len() > 1 {
        let bg = background_mask(&seq.load_object_masks()?)?;
        let e = masked_diff_energy(&frames, &bg)?;
        let raw = masked_diff_energy(&vi, &bg)?;
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        summary.push_str(&format!(
            "background_diff_energy = {:e}\nbackground_diff_slope = {:e}\nraw_vi_background_diff_energy = {:e}\n",
            mean(&e),
            ls_slope(&e),
            mean(&raw)
        ));
    }
    write(&fused.join("eval_summary.txt"), &summary)?;
    print!("{summary}");
    Ok(())
}

fn summarize(dir: &Path) -> Result<RunSummary> {
    let path = dir.join(REPORT);
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let rows = rows_from_csv(&text)?;
    let label = fs::read_to_string(dir.join(RUN_INFO))
        .ok()
        .and_then(|t| {
            t.lines()
                .find_map(|l| l.split_once('=').filter(|(k, _)| k.trim() == "label").map(|(_, v)| v.trim().to_string()))
        })
        .unwrap_or_else(|| dir.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default());
    Ok(RunSummary::from_rows(&label, &rows)?)
}
