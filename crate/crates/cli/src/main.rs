//! Command-line front end: `augment`, `gradcheck`, `train`, `diagnose`.
//!
//! Every command is bit-reproducible for a fixed seed: images, plan files,
//! metrics JSON, and checkpoints come out byte-identical across runs.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use invar::gradcore::{forward, ToyModel};
use invar::harness::{cmd_augment, cmd_diagnose, cmd_gradcheck, cmd_train, gen_scenes, scene_rois, RunConfig};
use invar::localaug::AugmentationPlan;
use invar::raster::{load_boxes, load_image, load_mask, save_gray_pgm, save_image, ObjectSet};

#[derive(Parser)]
#[command(name = "invar", version, about = "Seeded augmentation, invariance losses, and a gradient-checked toy training loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonOpts {
    /// Flat `key = value` config file; flags override file values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Augment a PPM image (optionally with PGM object masks and a box file).
    Augment {
        #[command(flatten)]
        common: CommonOpts,
        /// Input image (binary PPM, maxval 255).
        #[arg(long)]
        image: PathBuf,
        /// Box file: one `category x0 y0 x1 y1` line per object.
        #[arg(long)]
        boxes: Option<PathBuf>,
        /// One PGM mask per object, in box-file order.
        #[arg(long)]
        mask: Vec<PathBuf>,
        /// Write the sampled plan here for later replay.
        #[arg(long)]
        plan_out: Option<PathBuf>,
        /// Replay this plan instead of sampling one.
        #[arg(long)]
        plan_in: Option<PathBuf>,
    },
    /// Run every analytic-vs-finite-difference gradient check.
    Gradcheck {
        #[command(flatten)]
        common: CommonOpts,
    },
    /// Train the toy model on paired original/augmented synthetic scenes.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lambda1: Option<f64>,
        #[arg(long)]
        lambda2: Option<f64>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        n_scenes: Option<usize>,
        /// `dice_soft` or `mse`.
        #[arg(long)]
        attention_mode: Option<String>,
        /// `cumulative` or `ema`.
        #[arg(long)]
        proto_mode: Option<String>,
    },
    /// Compute prototype/attention diagnostics for a checkpoint.
    Diagnose {
        #[command(flatten)]
        common: CommonOpts,
        /// Checkpoint to diagnose.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Optional second checkpoint for feature L1 distances.
        #[arg(long)]
        checkpoint_b: Option<PathBuf>,
    },
}

fn load_config(common: &CommonOpts) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(())
}

fn run_augment(
    common: CommonOpts,
    image: PathBuf,
    boxes: Option<PathBuf>,
    masks: Vec<PathBuf>,
    plan_out: Option<PathBuf>,
    plan_in: Option<PathBuf>,
) -> Result<()> {
    let cfg = load_config(&common)?;
    let raster = load_image(&image).with_context(|| format!("loading {}", image.display()))?;

    let objects = match (&boxes, masks.is_empty()) {
        (None, true) => ObjectSet::empty(),
        (None, false) => bail!("--mask requires --boxes"),
        (Some(path), _) => {
            let entries = load_boxes(path)?;
            if entries.len() != masks.len() {
                bail!("{} boxes but {} masks", entries.len(), masks.len());
            }
            let mut mask_images = Vec::with_capacity(masks.len());
            for m in &masks {
                mask_images.push(load_mask(m).with_context(|| format!("loading {}", m.display()))?);
            }
            let (categories, rects): (Vec<_>, Vec<_>) = entries.into_iter().unzip();
            ObjectSet::from_parts(mask_images, rects, categories)?
        }
    };

    let plan = plan_in
        .map(|p| AugmentationPlan::load(&p).with_context(|| format!("loading plan {}", p.display())))
        .transpose()?;
    let (augmented, plan) = cmd_augment(&raster, &objects, plan, cfg.seed, &cfg)?;

    ensure_out_dir(&common.out_dir)?;
    let stem = image
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "image".into());
    let out_path = common.out_dir.join(format!("{stem}.aug.ppm"));
    save_image(&augmented, &out_path)?;
    if let Some(path) = plan_out {
        plan.save(&path)?;
    }
    println!(
        "augmented {} -> {} (alpha {:.4}, r {}, {} objects)",
        image.display(),
        out_path.display(),
        plan.alpha,
        plan.radius,
        objects.len()
    );
    Ok(())
}

fn run_gradcheck(common: CommonOpts) -> Result<()> {
    let cfg = load_config(&common)?;
    let report = cmd_gradcheck(&cfg)?;
    ensure_out_dir(&common.out_dir)?;
    report.save(common.out_dir.join("metrics.json"))?;
    for (name, err) in &report.summary.gradcheck {
        println!("gradcheck {name:<14} max rel err {err:.3e}");
    }
    let worst = report.summary.gradcheck_max_rel_err.unwrap_or(f64::NAN);
    if worst <= 1e-3 {
        println!("gradcheck PASS (max rel err {worst:.3e} <= 1e-3)");
        Ok(())
    } else {
        bail!("gradcheck FAIL (max rel err {worst:.3e} > 1e-3)");
    }
}

#[allow(clippy::too_many_arguments)]
fn run_train(
    common: CommonOpts,
    steps: Option<usize>,
    lambda1: Option<f64>,
    lambda2: Option<f64>,
    lr: Option<f64>,
    size: Option<usize>,
    n_scenes: Option<usize>,
    attention_mode: Option<String>,
    proto_mode: Option<String>,
) -> Result<()> {
    let mut cfg = load_config(&common)?;
    if let Some(v) = steps {
        cfg.steps = v;
    }
    if let Some(v) = lambda1 {
        cfg.lambda1 = v;
    }
    if let Some(v) = lambda2 {
        cfg.lambda2 = v;
    }
    if let Some(v) = lr {
        cfg.lr = v;
    }
    if let Some(v) = size {
        cfg.size = v;
    }
    if let Some(v) = n_scenes {
        cfg.n_scenes = v;
    }
    if let Some(v) = attention_mode {
        cfg.attention_mode = v;
        cfg.attention_mode()?;
    }
    if let Some(v) = proto_mode {
        cfg.proto_mode = v;
        cfg.proto_mode()?;
    }

    let out = cmd_train(&cfg)?;
    ensure_out_dir(&common.out_dir)?;
    out.report.save(common.out_dir.join("metrics.json"))?;
    out.model.save(common.out_dir.join("checkpoint.bin"))?;
    out.registries.0.save_json(common.out_dir.join("registry_original.json"))?;
    out.registries.1.save_json(common.out_dir.join("registry_augmented.json"))?;

    if let Some(last) = out.report.steps.last() {
        println!(
            "step {:>4}  sup {:.4}  att {:.4}  exp {:.4}  imp {:.4}  total {:.4}",
            last.step, last.sup, last.att, last.exp, last.imp, last.total
        );
    }
    println!(
        "trained {} steps; dice_hard {:?}, mean d_c {:?}; wrote {}",
        cfg.steps,
        out.report.summary.dice_hard,
        out.report.summary.mean_d_c,
        common.out_dir.display()
    );
    Ok(())
}

fn run_diagnose(common: CommonOpts, checkpoint: PathBuf, checkpoint_b: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(&common)?;
    let model = ToyModel::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let other = checkpoint_b
        .map(|p| ToyModel::load(&p).with_context(|| format!("loading {}", p.display())))
        .transpose()?;
    let (report, eval) = cmd_diagnose(&cfg, &model, other.as_ref())?;

    ensure_out_dir(&common.out_dir)?;
    report.save(common.out_dir.join("metrics.json"))?;
    for (d, reg) in eval.domains.iter().enumerate() {
        reg.save_json(common.out_dir.join(format!("registry_domain{d}.json")))?;
    }
    // channel-mean attention heat images for visual inspection
    let scenes = gen_scenes(cfg.seed, cfg.n_scenes, cfg.size);
    for (i, scene) in scenes.iter().enumerate() {
        let out = forward(&model, &scene.raster, &scene_rois(scene))?;
        let heat = out.attention.heat_bytes();
        save_gray_pgm(cfg.size, cfg.size, &heat, common.out_dir.join(format!("attention_{i}.pgm")))?;
    }

    println!(
        "diagnose: dice_hard {:?}, mean d_c {:?}, feature_l1 {:?}",
        report.summary.dice_hard, report.summary.mean_d_c, report.summary.feature_l1
    );
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Augment {
            common,
            image,
            boxes,
            mask,
            plan_out,
            plan_in,
        } => run_augment(common, image, boxes, mask, plan_out, plan_in),
        Command::Gradcheck { common } => run_gradcheck(common),
        Command::Train {
            common,
            steps,
            lambda1,
            lambda2,
            lr,
            size,
            n_scenes,
            attention_mode,
            proto_mode,
        } => run_train(common, steps, lambda1, lambda2, lr, size, n_scenes, attention_mode, proto_mode),
        Command::Diagnose {
            common,
            checkpoint,
            checkpoint_b,
        } => run_diagnose(common, checkpoint, checkpoint_b),
    }
}
