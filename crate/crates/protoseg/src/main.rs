//! Command-line entry points: train / eval / ablate / export-prototypes /
//! export-dataset. All tabular outputs are CSV; diagnostics go to stderr.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use protoseg::config::ExperimentConfig;
use protoseg::data::{export_dataset, generate_synthetic_dataset, split_folds, Dataset};
use protoseg::eval::{collect_prototypes, evaluate_fold, write_prototypes_csv, EvalOutcome};
use protoseg::trainer::{
    checkpoint_load, checkpoint_save, run_training, LossReport, TrainState,
};
use protoseg::{Error, Result};

#[derive(Parser)]
#[command(name = "protoseg", version, about = "Few-shot segmentation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonOpts {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory root (default: $PROTOSEG_OUT or ./runs).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one fold, writing checkpoints and a per-step CSV log.
    Train {
        #[command(flatten)]
        common: CommonOpts,
        /// Resume from a checkpoint file.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Fold index to train.
        #[arg(long, default_value_t = 0)]
        fold: usize,
        /// Seed for initialization and episode sampling.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Disable the class-specific contrastive branch.
        #[arg(long)]
        no_cscl: bool,
        /// Disable the class-agnostic contrastive branch.
        #[arg(long)]
        no_cacl: bool,
    },
    /// Evaluate a checkpoint on a fold's unseen classes.
    Eval {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Fold index (default: the checkpoint's training fold).
        #[arg(long)]
        fold: Option<usize>,
        /// Number of test episodes (default: eval.num_episodes).
        #[arg(long)]
        episodes: Option<usize>,
        /// Episode sampling seed (default: eval.seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train and evaluate the four loss configurations over folds and seeds.
    Ablate {
        #[command(flatten)]
        common: CommonOpts,
        /// Comma-separated training seeds.
        #[arg(long, default_value = "0,1,2")]
        seeds: String,
        /// Test episodes per evaluation (default: eval.num_episodes).
        #[arg(long)]
        episodes: Option<usize>,
    },
    /// Export unseen-class prototype embeddings as CSV.
    ExportPrototypes {
        #[command(flatten)]
        common: CommonOpts,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        episodes: usize,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate the synthetic dataset and export it as PNGs + manifest.
    ExportDataset {
        #[command(flatten)]
        common: CommonOpts,
    },
}

fn output_root(opt: &Option<PathBuf>) -> PathBuf {
    opt.clone()
        .or_else(|| std::env::var_os("PROTOSEG_OUT").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs"))
}

fn build_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    generate_synthetic_dataset(
        cfg.data.seed,
        cfg.data.num_classes,
        cfg.data.images_per_class,
        cfg.data.resolution,
    )
}

fn write_log_header(w: &mut impl Write) -> Result<()> {
    writeln!(
        w,
        "step,seg_loss,align_loss,cs_loss,ca_loss,total,lr,cs_skipped,ca_skipped,wall_ms"
    )?;
    Ok(())
}

fn format_opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x}")).unwrap_or_default()
}

fn write_log_row(w: &mut impl Write, r: &LossReport, wall_ms: f64) -> Result<()> {
    writeln!(
        w,
        "{},{},{},{},{},{},{},{},{},{:.3}",
        r.step,
        r.seg_loss,
        r.align_loss,
        format_opt(r.cs_loss),
        format_opt(r.ca_loss),
        r.total,
        r.lr,
        r.cs_skipped,
        r.ca_skipped,
        wall_ms
    )?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    common: &CommonOpts,
    resume: Option<&Path>,
    fold: usize,
    seed: u64,
    no_cscl: bool,
    no_cacl: bool,
) -> Result<()> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if no_cscl {
        cfg.cscl.enabled = false;
    }
    if no_cacl {
        cfg.cacl.enabled = false;
    }
    cfg.validate()?;

    let mut state = match resume {
        Some(path) => {
            let state = checkpoint_load(path)?;
            if state.config.hash() != cfg.hash() {
                return Err(Error::Checkpoint(
                    "checkpoint config hash does not match the provided config (including --no-* flags)".into(),
                ));
            }
            if state.fold_index != fold && fold != 0 {
                return Err(Error::Checkpoint(format!(
                    "checkpoint was trained on fold {}, requested fold {fold}",
                    state.fold_index
                )));
            }
            log::info!("resuming from step {} ({})", state.step, path.display());
            state
        }
        None => TrainState::new(cfg.clone(), fold, seed)?,
    };

    let dataset = build_dataset(&state.config)?;
    let run_dir = output_root(&common.out).join(format!(
        "{}-fold{}-seed{}",
        state.config.run.name, state.fold_index, state.seed
    ));
    std::fs::create_dir_all(&run_dir)?;
    let log_path = run_dir.join("train_log.csv");
    let fresh_log = state.step == 0 || !log_path.exists();
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    if fresh_log {
        write_log_header(&mut log_file)?;
    }

    let ckpt_path = run_dir.join("checkpoint.json");
    let every = state.config.run.checkpoint_every;
    let max_iterations = state.config.run.max_iterations;
    let mut last = Instant::now();
    run_training(&mut state, &dataset, &mut |state, report| {
        let wall_ms = last.elapsed().as_secs_f64() * 1e3;
        last = Instant::now();
        write_log_row(&mut log_file, report, wall_ms)?;
        if report.step % every == 0 && report.step < max_iterations {
            checkpoint_save(state, &ckpt_path)?;
        }
        if report.step % 100 == 0 {
            log::info!(
                "step {}/{}: total {:.4} seg {:.4}",
                report.step,
                max_iterations,
                report.total,
                report.seg_loss
            );
        }
        Ok(())
    })?;
    checkpoint_save(&state, &ckpt_path)?;
    println!(
        "trained {} steps (fold {}, seed {}); checkpoint: {}",
        state.step,
        state.fold_index,
        state.seed,
        ckpt_path.display()
    );
    Ok(())
}

fn check_eval_compatibility(cfg: &ExperimentConfig, state: &TrainState) -> Result<()> {
    if cfg.data != state.config.data
        || cfg.encoder != state.config.encoder
        || cfg.episode != state.config.episode
        || cfg.matcher != state.config.matcher
    {
        return Err(Error::Checkpoint(
            "config data/encoder/episode/matcher sections do not match the checkpoint".into(),
        ));
    }
    Ok(())
}

fn cmd_eval(
    common: &CommonOpts,
    checkpoint: &Path,
    fold: Option<usize>,
    episodes: Option<usize>,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let state = checkpoint_load(checkpoint)?;
    check_eval_compatibility(&cfg, &state)?;
    let fold_index = fold.unwrap_or(state.fold_index);
    if fold_index >= cfg.data.folds {
        return Err(Error::Config(format!(
            "fold {fold_index} out of range for {} folds",
            cfg.data.folds
        )));
    }
    let episodes = episodes.unwrap_or(cfg.eval.num_episodes);
    let seed = seed.unwrap_or(cfg.eval.seed);
    let dataset = build_dataset(&cfg)?;
    let split = split_folds(&dataset.class_ids(), cfg.data.folds, fold_index)?;
    let outcome = evaluate_fold(&state.params, &dataset, &split, &cfg, episodes, seed)?;

    let out_dir = output_root(&common.out);
    std::fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join(format!("eval-fold{fold_index}.csv"));
    let mut file = std::fs::File::create(&csv_path)?;
    writeln!(file, "fold,label,iou")?;
    for (c, iou) in &outcome.per_class_iou {
        let name = dataset.class_names.get(c).cloned().unwrap_or_default();
        writeln!(file, "{fold_index},{c}:{name},{iou}")?;
    }
    writeln!(file, "{fold_index},miou,{}", outcome.miou)?;

    println!("fold {fold_index} ({} episodes)", outcome.num_episodes);
    println!("{:<20} {:>8}", "class", "IoU");
    for (c, iou) in &outcome.per_class_iou {
        let name = dataset.class_names.get(c).cloned().unwrap_or_default();
        println!("{:<20} {:>8.4}", format!("{c}:{name}"), iou);
    }
    println!("{:<20} {:>8.4}", "mIoU", outcome.miou);
    log::info!("wrote {}", csv_path.display());
    Ok(())
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, Debug)]
struct Variant {
    cscl: bool,
    cacl: bool,
}

impl Variant {
    const ALL: [Variant; 4] = [
        Variant { cscl: false, cacl: false },
        Variant { cscl: false, cacl: true },
        Variant { cscl: true, cacl: false },
        Variant { cscl: true, cacl: true },
    ];

    fn label(&self) -> &'static str {
        match (self.cscl, self.cacl) {
            (false, false) => "neither",
            (false, true) => "cacl",
            (true, false) => "cscl",
            (true, true) => "both",
        }
    }
}

/// Train one ablation cell and return its unseen-class mIoU.
fn run_cell(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    variant: Variant,
    fold: usize,
    seed: u64,
    episodes: usize,
) -> Result<EvalOutcome> {
    let mut cfg = cfg.clone();
    cfg.cscl.enabled = variant.cscl;
    cfg.cacl.enabled = variant.cacl;
    let mut state = TrainState::new(cfg.clone(), fold, seed)?;
    run_training(&mut state, dataset, &mut |_, _| Ok(()))?;
    let split = split_folds(&dataset.class_ids(), cfg.data.folds, fold)?;
    evaluate_fold(&state.params, dataset, &split, &cfg, episodes, cfg.eval.seed)
}

fn cmd_ablate(common: &CommonOpts, seeds: &str, episodes: Option<usize>) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let seeds: Vec<u64> = seeds
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<u64>()
                .map_err(|e| Error::Config(format!("bad seed {s:?}: {e}")))
        })
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let episodes = episodes.unwrap_or(cfg.eval.num_episodes);
    let dataset = build_dataset(&cfg)?;
    let folds = cfg.data.folds;

    let mut cells: Vec<(Variant, usize, u64)> = Vec::new();
    for &variant in &Variant::ALL {
        for fold in 0..folds {
            for &seed in &seeds {
                cells.push((variant, fold, seed));
            }
        }
    }
    log::info!(
        "ablation: {} cells ({} variants x {folds} folds x {} seeds)",
        cells.len(),
        Variant::ALL.len(),
        seeds.len()
    );
    let results: Vec<((Variant, usize, u64), f64)> = cells
        .par_iter()
        .map(|&(variant, fold, seed)| {
            let outcome = run_cell(&cfg, &dataset, variant, fold, seed, episodes)?;
            log::info!(
                "cell {} fold {fold} seed {seed}: mIoU {:.4}",
                variant.label(),
                outcome.miou
            );
            Ok(((variant, fold, seed), outcome.miou))
        })
        .collect::<Result<_>>()?;
    let lookup: BTreeMap<(&str, usize, u64), f64> = results
        .iter()
        .map(|&((v, f, s), miou)| ((v.label(), f, s), miou))
        .collect();

    let out_dir = output_root(&common.out);
    std::fs::create_dir_all(&out_dir)?;
    let raw_path = out_dir.join("ablation_raw.csv");
    let mut raw = std::fs::File::create(&raw_path)?;
    writeln!(raw, "variant,fold,seed,miou")?;
    for ((v, f, s), miou) in &lookup {
        writeln!(raw, "{v},{f},{s},{miou}")?;
    }

    let stats = |v: &str, f: usize| -> (f64, f64) {
        let vals: Vec<f64> = seeds.iter().map(|&s| lookup[&(v, f, s)]).collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>()
            / vals.len() as f64;
        (mean, var.sqrt())
    };

    let table_path = out_dir.join("ablation.csv");
    let mut table = std::fs::File::create(&table_path)?;
    let header: Vec<String> = std::iter::once("variant".to_string())
        .chain((0..folds).map(|f| format!("fold-{}", f + 1)))
        .chain(std::iter::once("mean".to_string()))
        .collect();
    writeln!(table, "{}", header.join(","))?;
    let mut variant_means: BTreeMap<&str, f64> = BTreeMap::new();
    for v in Variant::ALL {
        let mut row = vec![v.label().to_string()];
        let mut fold_means = Vec::new();
        for f in 0..folds {
            let (mean, std) = stats(v.label(), f);
            fold_means.push(mean);
            row.push(format!("{mean:.4}±{std:.4}"));
        }
        let overall = fold_means.iter().sum::<f64>() / fold_means.len() as f64;
        variant_means.insert(v.label(), overall);
        row.push(format!("{overall:.4}"));
        writeln!(table, "{}", row.join(","))?;
        println!("{}", row.join(","));
    }
    let baseline = variant_means["neither"];
    let full = variant_means["both"];
    println!(
        "summary: both {full:.4} vs neither {baseline:.4} ({}{:.4})",
        if full >= baseline { "+" } else { "" },
        full - baseline
    );
    log::info!("wrote {} and {}", raw_path.display(), table_path.display());
    Ok(())
}

fn cmd_export_prototypes(
    common: &CommonOpts,
    checkpoint: &Path,
    episodes: usize,
    seed: Option<u64>,
) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let state = checkpoint_load(checkpoint)?;
    check_eval_compatibility(&cfg, &state)?;
    let dataset = build_dataset(&cfg)?;
    let split = split_folds(&dataset.class_ids(), cfg.data.folds, state.fold_index)?;
    let seed = seed.unwrap_or(cfg.eval.seed);
    let protos = collect_prototypes(&state.params, &dataset, &split, &cfg, episodes, seed)?;
    let out_dir = output_root(&common.out);
    std::fs::create_dir_all(&out_dir)?;
    let path = out_dir.join("prototypes.csv");
    let file = std::fs::File::create(&path)?;
    write_prototypes_csv(&protos, file)?;
    println!("wrote {} prototypes to {}", protos.len(), path.display());
    Ok(())
}

fn cmd_export_dataset(common: &CommonOpts) -> Result<()> {
    let cfg = ExperimentConfig::load(&common.config)?;
    let dataset = build_dataset(&cfg)?;
    let out_dir = output_root(&common.out).join("dataset");
    export_dataset(&dataset, &out_dir)?;
    println!("exported {} images to {}", dataset.images.len(), out_dir.display());
    Ok(())
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train { common, resume, fold, seed, no_cscl, no_cacl } => {
            cmd_train(common, resume.as_deref(), *fold, *seed, *no_cscl, *no_cacl)
        }
        Command::Eval { common, checkpoint, fold, episodes, seed } => {
            cmd_eval(common, checkpoint, *fold, *episodes, *seed)
        }
        Command::Ablate { common, seeds, episodes } => cmd_ablate(common, seeds, *episodes),
        Command::ExportPrototypes { common, checkpoint, episodes, seed } => {
            cmd_export_prototypes(common, checkpoint, *episodes, *seed)
        }
        Command::ExportDataset { common } => cmd_export_dataset(common),
    };
    if let Err(e) = result {
        eprintln!("error: {e}");
        std::process::exit(1);
    }
}
