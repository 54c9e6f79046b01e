use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use lodet::data::{synth_generate, DatasetIndex, SynthConfig};
use lodet::detector::Detector;
use lodet::eval::{from_records, to_records, DetectionRecord};
use lodet::lora::load_adapters;
use lodet::pipeline::{
    aggregate, read_table, trend, trend_markdown, write_table, Cell, ExperimentPlan, Samples, Strategy, Workspace,
};
use lodet::tensor::read_checkpoint;
use lodet::{Error, Result};

#[derive(Parser)]
#[command(name = "lodet", version, about = "Few-shot cross-domain fine-tuning of a diffusion box detector with low-rank adapters")]
struct Cli {
    /// Output root for checkpoints, traces and tables.
    #[arg(long, global = true, env = "LODET_RESULTS_DIR", default_value = "results")]
    results_dir: PathBuf,

    /// Experiment plan (TOML); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Profile {
    Source,
    Target,
}

#[derive(Subcommand)]
enum Command {
    /// Train the detector on the source domain.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run one grid cell.
    Run {
        #[arg(long)]
        strategy: Strategy,
        #[arg(long)]
        shots: usize,
        /// Adapter rank (adapter strategies only).
        #[arg(long)]
        rank: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Run every cell of the plan, skipping completed ones.
    Grid {
        /// Re-run completed cells.
        #[arg(long)]
        force: bool,
    },
    /// Fold run results into table.csv and table.md.
    Aggregate {
        #[arg(long)]
        allow_partial: bool,
    },
    /// Print the result table and the adapter-ordering check.
    Report,
    /// Write a synthetic dataset as PPM images plus COCO JSON.
    Synth {
        #[arg(long, value_enum)]
        profile: Profile,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate a checkpoint on a COCO dataset directory.
    Eval {
        #[arg(long)]
        data: PathBuf,
        /// Full-model checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Adapter-only checkpoint applied on top.
        #[arg(long)]
        adapter: Option<PathBuf>,
        /// Write detections as COCO results JSON.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Print the effective plan as TOML.
    Plan,
}

fn load_plan(path: Option<&Path>) -> Result<ExperimentPlan> {
    match path {
        Some(p) => ExperimentPlan::load(p),
        None => Ok(ExperimentPlan::default()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let mut plan = load_plan(cli.config.as_deref())?;
    match cli.command {
        Command::Pretrain { epochs } => {
            if let Some(e) = epochs {
                plan.pretrain.epochs = e;
            }
            let ws = Workspace::new(&cli.results_dir, plan)?;
            let r = ws.pretrain()?;
            println!(
                "pretrained: best source val mAP50 {:.4} at epoch {} ({:.0}s) -> {}",
                r.best_val_map50,
                r.best_epoch,
                r.seconds,
                ws.pretrained_path().display()
            );
        }
        Command::Run {
            strategy,
            shots,
            rank,
            seed,
            epochs,
        } => {
            let ws = Workspace::new(&cli.results_dir, plan)?;
            let cell = Cell::new(strategy, rank, shots, seed)?;
            let r = ws.run_with_epochs(&cell, epochs)?;
            println!(
                "{cell}: test mAP50 {:.4} at epoch {} (val {:.4}); train loss {:.4} -> {:.4}",
                r.test_map50, r.best_epoch, r.best_val_map50, r.initial_train_loss, r.final_train_loss
            );
        }
        Command::Grid { force } => {
            let ws = Workspace::new(&cli.results_dir, plan)?;
            let runs = ws.run_grid(force)?;
            println!("{} cells complete", runs.len());
        }
        Command::Aggregate { allow_partial } => {
            let ws = Workspace::new(&cli.results_dir, plan)?;
            let table = aggregate(&ws, allow_partial)?;
            write_table(&ws, &table)?;
            print!("{}", table.to_markdown());
        }
        Command::Report => {
            let path = cli.results_dir.join("table.csv");
            let table = read_table(&path).map_err(|e| match e {
                Error::Io { .. } => Error::Dependency(format!("{} not found; run `lodet aggregate` first", path.display())),
                other => other,
            })?;
            let rows = trend(&table, &plan.ranks);
            let mut text = table.to_markdown();
            text.push('\n');
            text.push_str(&trend_markdown(&rows));
            for r in rows.iter().filter(|r| r.rank.is_none()) {
                text.push_str(&format!(
                    "\nk={}: lora_after_ft {} lora_direct by {:+.2} points (mean over ranks)\n",
                    r.shots,
                    if r.holds { "matches or beats" } else { "trails" },
                    r.margin * 100.0
                ));
            }
            let out = cli.results_dir.join("report.md");
            std::fs::write(&out, &text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
            print!("{text}");
        }
        Command::Synth {
            profile,
            out,
            images,
            seed,
        } => {
            let mut cfg = match profile {
                Profile::Source => SynthConfig::source(seed),
                Profile::Target => SynthConfig::target(seed),
            };
            if let Some(n) = images {
                cfg.n_images = n;
            }
            let ds = synth_generate(&cfg)?;
            ds.save_dir(&out)?;
            println!("{} images, {} annotations -> {}", ds.images().len(), ds.annotations().len(), out.display());
        }
        Command::Eval {
            data,
            checkpoint,
            adapter,
            dump,
            seed,
        } => {
            let ds = DatasetIndex::load_dir(&data)?;
            let mut det = Detector::new(plan.detector.clone(), 0)?;
            det.load_checkpoint(&read_checkpoint(&checkpoint)?)?;
            if let Some(a) = adapter {
                load_adapters(&mut det, &read_checkpoint(&a)?)?;
            }
            let samples = Samples::new(&ds)?;
            let mut records: Vec<DetectionRecord> = Vec::new();
            for (&id, img) in samples.ids.iter().zip(&samples.images) {
                let dets = det.infer(img, seed.wrapping_add(id))?;
                records.extend(to_records(&ds, id, &dets)?);
            }
            let dets = from_records(&ds, &records)?;
            let gts = samples.ids.iter().map(|&id| Ok((id, ds.ground_truth(id)?))).collect::<Result<_>>()?;
            let classes: Vec<u32> = (0..ds.categories().len() as u32).collect();
            let result = lodet::eval::evaluate(&dets, &gts, &classes, lodet::eval::IOU_THRESHOLD, det.config.max_detections)?;
            if let Some(path) = dump {
                let text = serde_json::to_string(&records).expect("records serialize");
                std::fs::write(&path, text).map_err(|e| Error::Io { path: path.clone(), source: e })?;
            }
            println!("{}", serde_json::to_string_pretty(&result).expect("result serializes"));
        }
        Command::Plan => print!("{}", plan.to_toml()),
    }
    Ok(())
}
