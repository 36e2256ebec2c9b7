use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use facekd_core::distill::{perf_alignment_score, JsonlSink};
use facekd_core::harness::{
    build_models, distill, end_to_end, evaluate_student, evaluate_teacher, generate_dataset,
    load_pretrained_teacher, perf_maps, perf_samples, pretrain_teacher, read_dataset, run_sweep,
    write_dataset, write_sweep_csv, Checkpoint, LoadMode, Preset, RunConfig, SweepKind, Workspace,
};
use facekd_core::Error;

#[derive(Parser)]
#[command(
    name = "facekd",
    version,
    about = "Cross-architecture face distillation at desk scale"
)]
struct Cli {
    /// Run configuration file (`key=value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Override one configuration key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,

    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic face dataset.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the teacher backbone alone and checkpoint it.
    PretrainTeacher {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        /// Per-step records (JSON lines).
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Distill the student from a pretrained teacher.
    Distill {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Ablation preset applied before `--set` overrides.
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Held-out verification and classification accuracy of a checkpoint.
    Eval {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// PERF maps of both branches as CSV, plus their alignment score.
    Perf {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Distill over a grid of prompt counts, center counts or facial modes.
    Sweep {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        teacher: PathBuf,
        /// `t`, `L` or `mode`.
        #[arg(long)]
        grid: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// gen-data, pretrain-teacher, distill and eval in one directory.
    Run {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        preset: Option<String>,
    },
}

fn usage(err: impl std::fmt::Display) -> Error {
    Error::Config(err.to_string())
}

fn base_config(cli: &Cli) -> Result<RunConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::parse(&fs::read_to_string(path)?)?,
        None => RunConfig::default(),
    };
    cfg.apply(cli.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn with_preset(cli: &Cli, preset: Option<&str>) -> Result<RunConfig, Error> {
    let mut cfg = base_config(cli)?;
    if let Some(p) = preset {
        cfg = p.parse::<Preset>()?.apply(&cfg);
        // Explicit overrides win over the preset.
        cfg.apply(cli.overrides.iter().map(String::as_str))?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// The config stored in a checkpoint, with command-line overrides on top.
fn checkpoint_config(cli: &Cli, ckpt: &Checkpoint) -> Result<RunConfig, Error> {
    let mut cfg = RunConfig::parse(&ckpt.config)?;
    cfg.apply(cli.overrides.iter().map(String::as_str))?;
    Ok(cfg)
}

fn workspace(dir: &Path, cfg: &RunConfig) -> Result<Workspace, Error> {
    Workspace::from_samples(read_dataset(dir)?, cfg.holdout)
}

fn jsonl(path: Option<&Path>) -> Result<JsonlSink<Box<dyn Write>>, Error> {
    let out: Box<dyn Write> = match path {
        Some(p) => Box::new(BufWriter::new(fs::File::create(p)?)),
        None => Box::new(io::sink()),
    };
    Ok(JsonlSink::new(out))
}

fn is_teacher_only(ckpt: &Checkpoint) -> bool {
    ckpt.params.iter().all(|p| p.name.starts_with("teacher."))
}

fn run(cli: &Cli) -> Result<(), Error> {
    match &cli.command {
        Command::GenData { out } => {
            let cfg = with_preset(cli, None)?;
            let samples = generate_dataset(&cfg.data_spec())?;
            write_dataset(out, &samples, cfg.data.image)?;
            fs::write(out.join("run.cfg"), cfg.to_text())?;
            println!("wrote {} images to {}", samples.len(), out.display());
        }
        Command::PretrainTeacher { data, out, metrics } => {
            let cfg = with_preset(cli, None)?;
            let ws = workspace(&data.data, &cfg)?;
            let mut sink = jsonl(metrics.as_deref())?;
            let pre = pretrain_teacher(&cfg, &ws, &mut |r| sink.write(r))?;
            sink.into_inner().flush()?;
            pre.checkpoint.save(out)?;
            println!(
                "teacher: verification {:.4}, classification {:.4}",
                pre.report.verification, pre.report.classification
            );
        }
        Command::Distill {
            data,
            teacher,
            out,
            preset,
            metrics,
        } => {
            let cfg = with_preset(cli, preset.as_deref())?;
            let teacher = Checkpoint::load(teacher)?;
            let ws = workspace(&data.data, &cfg)?;
            let models = build_models(&cfg, Some(&teacher))?;
            let mut sink = jsonl(metrics.as_deref())?;
            distill(&cfg, &models, &ws, &mut |r| sink.write(r))?;
            sink.into_inner().flush()?;
            Checkpoint::from_registry(cfg.to_text(), &models.registry).save(out)?;
            let report = evaluate_student(&cfg, &models, &ws)?;
            println!(
                "student: verification {:.4}, classification {:.4}",
                report.verification, report.classification
            );
        }
        Command::Eval {
            data,
            checkpoint,
            out,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(cli, &ckpt)?;
            let ws = workspace(&data.data, &cfg)?;
            let report = if is_teacher_only(&ckpt) {
                let teacher = load_pretrained_teacher(&cfg, &ckpt)?;
                serde_json::json!({ "teacher": evaluate_teacher(&cfg, &teacher, &ws)? })
            } else {
                let models = build_models(&cfg, None)?;
                ckpt.apply(&models.registry, LoadMode::Exact)?;
                serde_json::json!({
                    "student": evaluate_student(&cfg, &models, &ws)?,
                    "teacher": evaluate_teacher(&cfg, &models.teacher, &ws)?,
                })
            };
            let text = serde_json::to_string_pretty(&report)
                .map_err(|e| Error::Contract(e.to_string()))?
                + "\n";
            match out {
                Some(p) => fs::write(p, text)?,
                None => print!("{text}"),
            }
        }
        Command::Perf {
            data,
            checkpoint,
            out_dir,
        } => {
            let ckpt = Checkpoint::load(checkpoint)?;
            let cfg = checkpoint_config(cli, &ckpt)?;
            if is_teacher_only(&ckpt) {
                return Err(usage(
                    "perf needs a distilled checkpoint (teacher, student and mapping)",
                ));
            }
            let ws = workspace(&data.data, &cfg)?;
            let models = build_models(&cfg, None)?;
            ckpt.apply(&models.registry, LoadMode::Exact)?;
            let (t, s) = perf_maps(&models, &perf_samples(&cfg, &ws), cfg.perf_center)?;
            fs::create_dir_all(out_dir)?;
            t.write_csv(BufWriter::new(fs::File::create(
                out_dir.join("perf_teacher.csv"),
            )?))?;
            s.write_csv(BufWriter::new(fs::File::create(
                out_dir.join("perf_student.csv"),
            )?))?;
            let score = perf_alignment_score(&t, &s)?;
            fs::write(out_dir.join("perf_score.txt"), format!("{score:e}\n"))?;
            println!("perf alignment score {score:.6}");
        }
        Command::Sweep {
            data,
            teacher,
            grid,
            out,
        } => {
            let kind: SweepKind = grid.parse()?;
            let cfg = with_preset(cli, None)?;
            let teacher = Checkpoint::load(teacher)?;
            let ws = workspace(&data.data, &cfg)?;
            let rows = run_sweep(kind, &cfg, &teacher, &ws)?;
            let mut f = BufWriter::new(fs::File::create(out)?);
            write_sweep_csv(&rows, &mut f)?;
            f.flush()?;
            write_sweep_csv(&rows, io::stdout().lock())?;
        }
        Command::Run { out, preset } => {
            let cfg = with_preset(cli, preset.as_deref())?;
            let m = end_to_end(&cfg, out)?;
            println!(
                "student: verification {:.4}, classification {:.4}; teacher: verification {:.4}",
                m.student.verification, m.student.classification, m.teacher.verification
            );
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 2,
        Error::Io(_) => 3,
        Error::Integrity(_) | Error::ShapeMismatch { .. } => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_)) {
                eprintln!("run `facekd --help` for usage");
            }
            ExitCode::from(exit_code(&e))
        }
    }
}
