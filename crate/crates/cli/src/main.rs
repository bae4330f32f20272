use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;

#[derive(Parser, Debug)]
#[command(name = "organseg", version, about = "Multi-organ segmentation from partially labeled and unlabeled data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate phantom datasets: one partially labeled set per institution,
    /// an unlabeled pool and a fully labeled eval split.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replace an existing non-empty output directory.
        #[arg(long)]
        force: bool,
    },
    /// Train a model; writes checkpoints, metrics.csv and run.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        run_dir: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even though the config differs from the checkpoint's.
        #[arg(long)]
        allow_config_drift: bool,
        /// Record every disturbance parameter to augs.jsonl.
        #[arg(long)]
        dump_augs: bool,
        /// Suppress per-epoch progress lines.
        #[arg(long, short)]
        quiet: bool,
    },
    /// Score a checkpoint on a fully labeled dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Manifest of the evaluation split.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Class registry; defaults to classes.txt next to the manifest.
        #[arg(long)]
        registry: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Agg::Global)]
        aggregation: Agg,
        /// Row label in the report table.
        #[arg(long, default_value = "organseg")]
        label: String,
    },
    /// Segment one image and write the argmax label map.
    Predict {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// When given, the checkpoint's class count is checked against it.
        #[arg(long)]
        registry: Option<PathBuf>,
    },
    /// Compare analytic gradients with finite differences on a tiny model.
    GradCheck {
        /// Optional `[gradcheck]` settings; defaults are the tiny model.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Prec::F64)]
        precision: Prec,
        /// Directory for run.json and report.txt.
        #[arg(long, default_value = "grad-check")]
        out: PathBuf,
        #[arg(long, hide = true)]
        sabotage: bool,
    },
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Agg {
    Global,
    PerImage,
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum Prec {
    F32,
    F64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData { config, out, force } => commands::gen_data(&config, &out, force),
        Command::Train {
            config,
            run_dir,
            resume,
            allow_config_drift,
            dump_augs,
            quiet,
        } => commands::train(&config, &run_dir, resume, allow_config_drift, dump_augs, quiet),
        Command::Eval {
            ckpt,
            data,
            out,
            registry,
            aggregation,
            label,
        } => {
            let agg = match aggregation {
                Agg::Global => organseg::eval::Aggregation::Global,
                Agg::PerImage => organseg::eval::Aggregation::PerImage,
            };
            commands::eval(&ckpt, &data, &out, registry, agg, &label)
        }
        Command::Predict {
            ckpt,
            image,
            out,
            registry,
        } => commands::predict(&ckpt, &image, &out, registry),
        Command::GradCheck {
            config,
            precision,
            out,
            sabotage,
        } => {
            let p = match precision {
                Prec::F32 => organseg::gradcheck::Precision::F32,
                Prec::F64 => organseg::gradcheck::Precision::F64,
            };
            commands::grad_check(config, p, &out, sabotage)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
