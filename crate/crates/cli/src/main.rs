use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use amodal_core::eval::{summary_table, EvalVariant};
use amodal_core::runner::{self, RunConfig};
use amodal_core::segnet::InputMode;
use amodal_core::synth::{DatasetParams, Difficulty};
use amodal_core::{Error, Result};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "amodal", version, about = "Amodal video segmentation on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a synthetic dataset.
    Generate(GenerateArgs),
    /// Train a model; resumes from a checkpoint in the output directory.
    Train(ConfigArgs),
    /// Score a checkpoint against the VM and Convex baselines.
    Eval(EvalArgs),
    /// Train and score the four module-switch rows.
    Ablate(ConfigArgs),
    /// Train and score slot counts.
    SweepSlots {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,8,32")]
        slots: Vec<usize>,
    },
    /// Train and score visible-loss weights.
    SweepLambda {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
        lambdas: Vec<f64>,
    },
    /// Write prediction overlays as PPM images.
    RenderOverlays {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        sequences: usize,
    },
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "B")]
    difficulty: String,
    #[arg(long)]
    count: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 48)]
    image_size: usize,
    #[arg(long, default_value_t = 8)]
    frames: usize,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// none | pp | pp_star | sg
    #[arg(long, default_value = "none")]
    variant: String,
    /// Merge PP/PP* by intersection instead of union.
    #[arg(long)]
    pp_intersection: bool,
    #[arg(long)]
    out: PathBuf,
}

/// A JSON config (bare, or a `run.json`) with flag overrides on top.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train_data: Option<PathBuf>,
    #[arg(long)]
    val_data: Option<PathBuf>,
    #[arg(long)]
    test_data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr0: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    n_slots: Option<usize>,
    #[arg(long)]
    items_per_epoch: Option<usize>,
    /// box_channel | sg_visible_mask
    #[arg(long)]
    input_mode: Option<String>,
    #[arg(long)]
    no_temporal: bool,
    #[arg(long)]
    no_bidirectional: bool,
    #[arg(long)]
    no_bev: bool,
    /// Literal sums over frames and batch items in the loss.
    #[arg(long)]
    strict_sum_loss: bool,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::from_file(p)?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($field:expr, $value:expr) => {
                if let Some(v) = $value.clone() {
                    $field = v;
                }
            };
        }
        set!(cfg.seed, self.seed);
        set!(cfg.train_data, self.train_data);
        set!(cfg.output, self.out);
        set!(cfg.epochs, self.epochs);
        set!(cfg.batch_size, self.batch_size);
        set!(cfg.lr0, self.lr0);
        set!(cfg.loss.lambda, self.lambda);
        set!(cfg.loss.gamma, self.gamma);
        set!(cfg.model.n_slots, self.n_slots);
        if self.val_data.is_some() {
            cfg.val_data = self.val_data.clone();
        }
        if self.test_data.is_some() {
            cfg.test_data = self.test_data.clone();
        }
        if self.items_per_epoch.is_some() {
            cfg.items_per_epoch = self.items_per_epoch;
        }
        if let Some(mode) = &self.input_mode {
            cfg.model.input_mode = match mode.as_str() {
                "box_channel" => InputMode::BoxChannel,
                "sg_visible_mask" => InputMode::SgVisibleMask,
                other => return Err(Error::Config(format!("unknown input mode {other:?}"))),
            };
        }
        cfg.model.use_temporal &= !self.no_temporal;
        cfg.model.use_bidirectional &= !self.no_bidirectional;
        cfg.model.use_bev &= !self.no_bev;
        cfg.loss.strict_sum |= self.strict_sum_loss;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn print_rows(title: &str, md: &str, dir: &Path) {
    println!("{title}\n{md}");
    println!("tables written to {}", dir.display());
}

fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    match cli.command {
        Command::Generate(a) => {
            let params = DatasetParams {
                sequences: a.count,
                seed: a.seed,
                difficulty: a.difficulty.parse::<Difficulty>()?,
                image_size: a.image_size,
                frames: a.frames,
            };
            let s = runner::generate(&params, &a.out)?;
            println!(
                "{} sequences, {} objects, mean occlusion ratio {:.4}, {} of {} instances partially occluded",
                s.sequences, s.objects, s.mean_occlusion_ratio, s.partially_occluded_instances, s.instances
            );
        }
        Command::Train(a) => {
            let cfg = a.resolve()?;
            let outcome = runner::train_with(&cfg, |log| {
                let occ = log.val_miou_occ.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
                let full = log.val_miou_full.map_or_else(|| "n/a".to_string(), |v| format!("{v:.4}"));
                println!(
                    "epoch {:3}  lr {:.3e}  loss {:.6}  val mIoU_full {full}  val mIoU_occ {occ}",
                    log.epoch, log.lr, log.train_loss
                );
            })?;
            println!("{} epochs, checkpoint in {}", outcome.history.len(), cfg.output.display());
        }
        Command::Eval(a) => {
            let variant: EvalVariant = a.variant.parse()?;
            let report = runner::eval_checkpoint(&a.checkpoint, &a.data, variant, a.pp_intersection, &a.out)?;
            print!("{}", summary_table(&report.summaries()));
        }
        Command::Ablate(a) => {
            let cfg = a.resolve()?;
            let rows = runner::ablation(&cfg, &cfg.output)?;
            let tables = runner::ablation_tables(&rows);
            runner::write_table(&cfg.output, "ablation", &tables, &rows)?;
            runner::write_run_record(&cfg.output, "ablate", &cfg, cfg.seed, started)?;
            print_rows("ablation", &tables.0, &cfg.output);
        }
        Command::SweepSlots { config, slots } => {
            let cfg = config.resolve()?;
            let rows = runner::sweep_slots(&cfg, &cfg.output, &slots)?;
            let tables = runner::sweep_tables("n_slots", &rows, |c| c.model.n_slots.to_string());
            runner::write_table(&cfg.output, "sweep_slots", &tables, &rows)?;
            runner::write_run_record(&cfg.output, "sweep-slots", &cfg, cfg.seed, started)?;
            print_rows("slot sweep", &tables.0, &cfg.output);
        }
        Command::SweepLambda { config, lambdas } => {
            let cfg = config.resolve()?;
            let rows = runner::sweep_lambda(&cfg, &cfg.output, &lambdas)?;
            let tables = runner::sweep_tables("lambda", &rows, |c| c.loss.lambda.to_string());
            runner::write_table(&cfg.output, "sweep_lambda", &tables, &rows)?;
            runner::write_run_record(&cfg.output, "sweep-lambda", &cfg, cfg.seed, started)?;
            print_rows("lambda sweep", &tables.0, &cfg.output);
        }
        Command::RenderOverlays { checkpoint, data, out, sequences } => {
            let n = runner::render_overlays(&checkpoint, &data, sequences, &out)?;
            println!("{n} overlays written to {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = runner::worker_pool().and_then(|pool| pool.install(|| run(cli)));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
