//! Command-line front end: data generation, training, inference, evaluation,
//! the fusion ablation and the self-check suites.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::data::{
    encode_pgm16, encode_ppm, generate_dataset, load_external_mask, normalize, read_pgm, read_ppm, rgb_to_bytes,
    sample_from_rasters, Dataset, DatasetIndex, DEFAULT_DMAX, depth_to_levels, denormalize,
};
use crate::gradcheck::{run_all, GradcheckConfig};
use crate::metrics::{evaluate, EvalConfig, IdentityOracle, Inpainter, MetricsReport, METRIC_NAMES};
use crate::models::{composite, FusionVariant};
use crate::tensor::{inject_conv_backward_sign_flip, no_grad, DType, Tensor};
use crate::trainer::{TrainConfig, Trainer, FINAL_CHECKPOINT};

pub const CONFIG_FILE: &str = "config.json";
pub const SEED_ENV: &str = "RGBD_INPAINT_SEED";

#[derive(Debug, Parser)]
#[command(name = "rgbd-inpaint", version, about = "Joint RGB-D inpainting with global and local WGAN-GP critics")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic RGB-D dataset.
    GenData(GenDataArgs),
    /// Train a generator and both critics.
    Train(TrainArgs),
    /// Inpaint one RGB-D image under an arbitrary mask.
    Infer(InferArgs),
    /// Score a checkpoint (or an oracle) on a dataset.
    Eval(EvalArgs),
    /// Train and evaluate all three fusion variants with identical data.
    Ablate(AblateArgs),
    /// Check gradients, second-order gradients and metric formulas.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantArg {
    Late,
    Early,
    None,
}

impl From<VariantArg> for FusionVariant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Late => FusionVariant::LateFusion,
            VariantArg::Early => FusionVariant::EarlyFusion,
            VariantArg::None => FusionVariant::NoFusion,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DTypeArg {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleArg {
    Identity,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
}

/// Optimization flags shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 32)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Channel width of the first generator and critic layers.
    #[arg(long, default_value_t = 4)]
    pub base_channels: usize,
    #[arg(long, default_value_t = 5)]
    pub critic_iters: usize,
    #[arg(long, default_value_t = 10.0)]
    pub lambda_gp: f64,
    #[arg(long, default_value_t = 0.001)]
    pub beta_adv: f64,
    #[arg(long, default_value_t = 1.0)]
    pub alpha: f64,
    /// Leading iterations trained on the content loss only.
    #[arg(long, default_value_t = 0)]
    pub warmup: u64,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = VariantArg::Late)]
    pub variant: VariantArg,
    #[arg(long, default_value_t = 1000)]
    pub iters: u64,
    /// Image side; must match the dataset when given.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: u64,
    /// Continue from a checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub rgb: PathBuf,
    #[arg(long)]
    pub depth: PathBuf,
    /// 8-bit PGM, 255 known and 0 missing.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    #[arg(long, required_unless_present = "oracle", conflicts_with = "oracle")]
    pub ckpt: Option<PathBuf>,
    /// Score a reference inpainter instead of a checkpoint.
    #[arg(long, value_enum)]
    pub oracle: Option<OracleArg>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub iters: u64,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GradcheckArgs {
    #[arg(long, value_enum, default_value_t = DTypeArg::F64)]
    pub dtype: DTypeArg,
    /// Maximum relative error; defaults to 1e-4 (f64) or 1e-2 (f32).
    #[arg(long)]
    pub tol: Option<f64>,
    #[arg(long, default_value_t = 20)]
    pub shapes: usize,
    #[arg(long, env = SEED_ENV, default_value_t = 0)]
    pub seed: u64,
    /// Also write the report as JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, hide = true)]
    pub inject_fault: bool,
}

fn write_config(out: &Path, command: &str, args: &impl Serialize) -> anyhow::Result<()> {
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let value = serde_json::json!({ "command": command, "args": args });
    fs::write(out.join(CONFIG_FILE), serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

fn load_dataset(root: &Path) -> anyhow::Result<Dataset> {
    let index = DatasetIndex::open(root).with_context(|| format!("opening dataset {}", root.display()))?;
    Ok(Dataset::load(&index)?)
}

fn train_config(optim: &OptimArgs, variant: FusionVariant, size: usize, iters: u64, seed: u64) -> TrainConfig {
    let mut cfg = TrainConfig {
        variant,
        image_size: size,
        base_channels: optim.base_channels,
        batch_size: optim.batch,
        learning_rate: optim.lr,
        critic_iters: optim.critic_iters,
        total_iters: iters,
        seed,
        content_only_warmup_iters: optim.warmup,
        ..Default::default()
    };
    cfg.weights.lambda_gp = optim.lambda_gp;
    cfg.weights.beta_adv = optim.beta_adv;
    cfg.weights.alpha = optim.alpha;
    cfg
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenData(a) => cmd_gen_data(&a),
        Command::Train(a) => cmd_train(&a),
        Command::Infer(a) => cmd_infer(&a),
        Command::Eval(a) => cmd_eval(&a),
        Command::Ablate(a) => cmd_ablate(&a),
        Command::Gradcheck(a) => cmd_gradcheck(&a),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs) -> anyhow::Result<()> {
    write_config(&a.out, "gen-data", a)?;
    let index = generate_dataset(&a.out, a.count, a.size, a.seed)?;
    println!("wrote {} scenes of {}x{} to {}", index.len(), a.size, a.size, a.out.display());
    Ok(())
}

pub fn cmd_train(a: &TrainArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    if let Some(s) = a.size {
        if s != data.size {
            bail!("--size {s} does not match dataset images of {} px", data.size);
        }
    }
    let mut trainer = match &a.resume {
        Some(path) => {
            let mut t = Trainer::load(path).with_context(|| format!("loading {}", path.display()))?;
            t.config.total_iters = a.iters;
            t
        }
        None => {
            let mut cfg = train_config(&a.optim, a.variant.into(), data.size, a.iters, a.seed);
            cfg.checkpoint_every = a.checkpoint_every;
            Trainer::new(cfg)?
        }
    };
    write_config(&a.out, "train", &serde_json::json!({ "cli": a, "resolved": trainer.config }))?;
    let every = (a.iters / 10).max(1);
    trainer.run_with_progress(&data, a.iters, Some(&a.out), |r| {
        if (r.iter + 1) % every == 0 {
            eprintln!(
                "iter {:>6}  l1_rgb {:.5}  l1_depth {:.5}  d_global {:.4}  d_local {:.4}  g_total {:.5}",
                r.iter + 1,
                r.l1_rgb,
                r.l1_depth,
                r.d_global_loss,
                r.d_local_loss,
                r.g_total
            );
        }
    })?;
    println!(
        "trained {} iterations ({} critic / {} generator updates); checkpoint {}",
        trainer.iter,
        trainer.counters.critic_updates,
        trainer.counters.generator_updates,
        a.out.join(FINAL_CHECKPOINT).display()
    );
    Ok(())
}

/// Blue (near) to red (far) for a normalized depth in `[-1, 1]`.
pub fn depth_color(v: f64) -> [u8; 3] {
    let t = ((v + 1.0) / 2.0).clamp(0.0, 1.0);
    [(255.0 * t).round() as u8, 0, (255.0 * (1.0 - t)).round() as u8]
}

pub const GRID_SEPARATOR: usize = 2;

/// Two rows (RGB, colour-mapped depth) of equally sized square panels,
/// separated by white bars. Panels are normalized `(1, 3, S, S)` RGB and
/// `(1, 1, S, S)` depth tensors.
pub fn render_grid(panels: &[(&Tensor<f64>, &Tensor<f64>)]) -> anyhow::Result<(usize, usize, Vec<u8>)> {
    let s = panels.first().context("grid needs at least one panel")?.0.shape()[2];
    let n = s * s;
    let sep = GRID_SEPARATOR;
    let width = panels.len() * s + (panels.len() - 1) * sep;
    let height = 2 * s + sep;
    let mut img = vec![255u8; width * height * 3];
    for (k, (rgb, depth)) in panels.iter().enumerate() {
        let x0 = k * (s + sep);
        for y in 0..s {
            for x in 0..s {
                let p = y * s + x;
                let top = (y * width + x0 + x) * 3;
                for c in 0..3 {
                    img[top + c] = ((rgb.data()[c * n + p] + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                }
                let bottom = ((y + s + sep) * width + x0 + x) * 3;
                img[bottom..bottom + 3].copy_from_slice(&depth_color(depth.data()[p]));
            }
        }
    }
    Ok((width, height, img))
}

pub fn cmd_infer(a: &InferArgs) -> anyhow::Result<()> {
    let trainer = Trainer::load(&a.ckpt).with_context(|| format!("loading {}", a.ckpt.display()))?;
    let rgb = read_ppm(&a.rgb).with_context(|| format!("reading {}", a.rgb.display()))?;
    let depth = read_pgm(&a.depth).with_context(|| format!("reading {}", a.depth.display()))?;
    let sample = sample_from_rasters("input", &a.rgb.display().to_string(), &rgb, &depth, DEFAULT_DMAX)?;
    let s = trainer.config.image_size;
    if sample.size != s {
        bail!("checkpoint expects {s}x{s} images, input is {0}x{0}", sample.size);
    }
    let mask = load_external_mask(&a.mask, s)?;
    write_config(&a.out, "infer", a)?;

    let (x_c, x_d) = normalize(&sample, DEFAULT_DMAX)?.tensors::<f64>()?;
    let m = mask.tensor::<f64>()?;
    let (z_c, z_d) = (x_c.mul(&m)?, x_d.mul(&m)?);
    let (out_c, out_d) = no_grad(|| -> crate::Result<_> {
        let (raw_c, raw_d) = trainer.generator.forward(&z_c, &z_d, &m)?;
        Ok((composite(&raw_c, &z_c, &m)?, composite(&raw_d, &z_d, &m)?))
    })?;

    let result = denormalize(&out_c, &out_d, 0, DEFAULT_DMAX, "inpainted")?;
    fs::write(a.out.join("inpainted.ppm"), encode_ppm(s, s, &rgb_to_bytes(&result.rgb))?)?;
    fs::write(a.out.join("inpainted_depth.pgm"), encode_pgm16(s, s, &depth_to_levels(&result.depth, DEFAULT_DMAX))?)?;
    let (w, h, grid) = render_grid(&[(&z_c, &z_d), (&out_c, &out_d), (&x_c, &x_d)])?;
    fs::write(a.out.join("grid.ppm"), encode_ppm(w, h, &grid)?)?;
    println!("inpainted {} hole pixels; wrote {}", mask.hole_count(), a.out.display());
    Ok(())
}

fn print_means(report: &MetricsReport) {
    for region in [&report.full, &report.hole_only] {
        let line: Vec<String> = METRIC_NAMES
            .iter()
            .zip(region.mean.values())
            .map(|(n, v)| format!("{n}={v:.6}"))
            .collect();
        println!("{:<9} {}", region.region.to_string(), line.join(" "));
    }
}

pub fn cmd_eval(a: &EvalArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    let cfg = EvalConfig { seed: a.seed };
    let report = match (&a.ckpt, a.oracle) {
        (_, Some(OracleArg::Identity)) => evaluate(&IdentityOracle, &data, &cfg)?,
        (Some(path), None) => {
            let trainer = Trainer::load(path).with_context(|| format!("loading {}", path.display()))?;
            if trainer.config.image_size != data.size {
                bail!("checkpoint expects {} px images, dataset has {} px", trainer.config.image_size, data.size);
            }
            evaluate(&trainer.generator as &dyn Inpainter, &data, &cfg)?
        }
        (None, None) => bail!("either --ckpt or --oracle is required"),
    };
    write_config(&a.out, "eval", a)?;
    report.write(&a.out, "metrics")?;
    print_means(&report);
    Ok(())
}

pub const ABLATION_FILE: &str = "ablation";

/// One row per variant, columns in [`METRIC_NAMES`] order.
pub fn ablation_csv(rows: &[(FusionVariant, [f64; 8])]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["variant"];
    header.extend(METRIC_NAMES);
    w.write_record(&header)?;
    for (v, vals) in rows {
        let mut rec = vec![v.short_name().to_string()];
        rec.extend(vals.iter().map(|x| x.to_string()));
        w.write_record(&rec)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub fn ablation_table(rows: &[(FusionVariant, [f64; 8])]) -> String {
    let mut out = format!("{:<14}", "variant");
    for n in METRIC_NAMES {
        let _ = write!(out, "{n:>12}");
    }
    out.push('\n');
    for (v, vals) in rows {
        let _ = write!(out, "{:<14}", v.to_string());
        for x in vals {
            let _ = write!(out, "{x:>12.5}");
        }
        out.push('\n');
    }
    out
}

pub fn cmd_ablate(a: &AblateArgs) -> anyhow::Result<()> {
    let data = load_dataset(&a.data)?;
    write_config(&a.out, "ablate", a)?;
    let mut full = Vec::new();
    let mut hole = Vec::new();
    let mut digests = Vec::new();
    for variant in FusionVariant::ALL {
        let cfg = train_config(&a.optim, variant, data.size, a.iters, a.seed);
        let dir = a.out.join(variant.short_name());
        let mut trainer = Trainer::new(cfg)?;
        trainer.run(&data, a.iters, Some(&dir))?;
        let report = evaluate(&trainer.generator as &dyn Inpainter, &data, &EvalConfig { seed: a.seed })?;
        report.write(&dir, "metrics")?;
        full.push((variant, report.full.mean.values()));
        hole.push((variant, report.hole_only.mean.values()));
        digests.push((variant, hex(&trainer.data_digest)));
        eprintln!("{variant}: batch/mask digest {}", hex(&trainer.data_digest));
    }
    let mut hashes = String::from("variant,batch_mask_sha256\n");
    for (v, d) in &digests {
        let _ = writeln!(hashes, "{},{d}", v.short_name());
    }
    fs::write(a.out.join("batch_hashes.csv"), hashes)?;
    if digests.iter().any(|(_, d)| *d != digests[0].1) {
        bail!("variants consumed different batch/mask sequences: {digests:?}");
    }
    fs::write(a.out.join(format!("{ABLATION_FILE}.csv")), ablation_csv(&full)?)?;
    fs::write(a.out.join(format!("{ABLATION_FILE}_hole_only.csv")), ablation_csv(&hole)?)?;
    let table = format!(
        "full image\n{}\nhole only\n{}",
        ablation_table(&full),
        ablation_table(&hole)
    );
    fs::write(a.out.join(format!("{ABLATION_FILE}.txt")), &table)?;
    print!("{table}");
    Ok(())
}

pub fn cmd_gradcheck(a: &GradcheckArgs) -> anyhow::Result<()> {
    let dtype = match a.dtype {
        DTypeArg::F32 => DType::F32,
        DTypeArg::F64 => DType::F64,
    };
    let mut cfg = GradcheckConfig::for_dtype(dtype);
    cfg.shapes_per_op = a.shapes;
    cfg.seed = a.seed;
    if let Some(t) = a.tol {
        if !(t > 0.0) {
            bail!("--tol must be positive");
        }
        cfg.tol = t;
    }
    inject_conv_backward_sign_flip(a.inject_fault);
    let report = match dtype {
        DType::F32 => run_all::<f32>(&cfg),
        DType::F64 => run_all::<f64>(&cfg),
    };
    inject_conv_backward_sign_flip(false);
    let report = report?;
    for r in &report.results {
        println!("{r}");
    }
    if let Some(out) = &a.out {
        write_config(out, "gradcheck", a)?;
        fs::write(out.join("gradcheck.json"), serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(bad) = report.first_failure() {
        bail!(
            "{} check failed for {}: max relative error {:.3e} (tolerance {:.1e})",
            bad.suite,
            bad.name,
            bad.max_rel_err,
            bad.tol
        );
    }
    println!("all {} checks passed", report.results.len());
    Ok(())
}
