use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use oodguard::config::ExperimentConfig;
use oodguard::data::write_dataset;
use oodguard::eval::{
    aggregate_report, format_table, project_fold, read_report_csv, run_experiment, write_projection_csv,
    write_report_csv, RunOptions,
};
use oodguard::model::checkpoint::{load_checkpoint, save_checkpoint};
use oodguard::Error;

const RESOLVED_CONFIG: &str = "config.resolved.json";
const INCOMPLETE_MARKER: &str = "INCOMPLETE";

#[derive(Parser)]
#[command(name = "nirs-oodguard", version, about = "Two-stage OOD-aware training and evaluation for fNIRS classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the synthetic dataset described by the config.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Target directory [default: <output_dir>/dataset]
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overwrite a non-empty target directory.
        #[arg(long)]
        force: bool,
    },
    /// Cross-validate every subject and write reports, checkpoints, logs and projections.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Overrides output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Overrides the master seed.
        #[arg(long, env = "NIRS_OODGUARD_SEED")]
        seed: Option<u64>,
        /// Supervised stage only; no detector columns in the report.
        #[arg(long)]
        stage1_only: bool,
        /// Worker threads for folds.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Print the mean ± std table of a report CSV.
    Report { report: PathBuf },
    /// Re-export a fold's projections from its checkpoint.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Target directory [default: <output_dir>/projections]
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, env = "NIRS_OODGUARD_SEED")]
        seed: Option<u64>,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match &e {
            Error::Config(_) | Error::Format { .. } => Failure::Config(e.to_string()),
            Error::Fold { source, .. } if matches!(**source, Error::Config(_)) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: std::io::Error) -> Failure {
    Failure::Runtime(format!("{}: {e}", path.display()))
}

fn prepare_dir(dir: &Path, force: bool) -> CliResult<()> {
    if dir.exists() {
        let non_empty = fs::read_dir(dir).map_err(|e| io_err(dir, e))?.next().is_some();
        if non_empty && !force {
            return Err(Failure::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                dir.display()
            )));
        }
        if non_empty {
            fs::remove_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let cfg = ExperimentConfig::load(path)?;
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_synth(config: &Path, out: Option<PathBuf>, force: bool) -> CliResult<()> {
    let cfg = ExperimentConfig::load(config)?;
    let spec = cfg
        .dataset
        .synthetic
        .as_ref()
        .ok_or_else(|| Failure::Config(format!("{}: missing dataset.synthetic block", config.display())))?;
    spec.validate()?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("dataset"));
    let ds = oodguard::eval::generate_synthetic_dataset(spec)?;
    prepare_dir(&dir, force)?;
    write_dataset(&dir, &ds)?;
    println!(
        "wrote {} trials ({} subjects, {} classes, {} channels) to {}",
        ds.trials.len(),
        ds.subjects().len(),
        ds.labels.n_class(),
        ds.n_channels(),
        dir.display()
    );
    Ok(())
}

fn cmd_run(
    config: &Path,
    out: Option<PathBuf>,
    seed: Option<u64>,
    opts: RunOptions,
    force: bool,
) -> CliResult<()> {
    let mut cfg = ExperimentConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let dir = cfg.output_dir.clone();
    prepare_dir(&dir, force)?;
    let marker = dir.join(INCOMPLETE_MARKER);
    write(&marker, "run in progress or failed; outputs in this directory are partial\n")?;
    write(&dir.join(RESOLVED_CONFIG), &cfg.to_json_pretty())?;

    let run = run_experiment(&ds, &cfg, &opts)?;
    for sub in ["checkpoints", "logs", "projections"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
    }
    for f in &run.folds {
        let stem = format!("{}_fold{}", f.record.subject_id, f.record.fold_index);
        save_checkpoint(&dir.join("checkpoints").join(format!("{stem}.ckpt")), &f.model, &f.meta)?;
        f.stage1_log.write_csv(&dir.join("logs").join(format!("{stem}_stage1.csv")))?;
        if let Some(l) = &f.stage2_log {
            l.write_csv(&dir.join("logs").join(format!("{stem}_stage2.csv")))?;
        }
        for (sub, pts) in &f.projections {
            write_projection_csv(&dir.join("projections").join(format!("{stem}_{}.csv", sub.as_str())), pts)?;
        }
    }
    let audits: Vec<_> = run.folds.iter().map(|f| (&f.record.subject_id, f.record.fold_index, &f.audit)).collect();
    write(
        &dir.join("audit.json"),
        &serde_json::to_string_pretty(&audits).map_err(|e| Failure::Runtime(e.to_string()))?,
    )?;
    write_report_csv(&dir.join("report.csv"), &run.report)?;
    let table = format_table(&run.report);
    write(&dir.join("report.txt"), &table)?;
    fs::remove_file(&marker).map_err(|e| io_err(&marker, e))?;
    print!("{table}");
    println!(
        "{} folds over {} subjects; outputs in {}",
        run.folds.len(),
        run.report.n_subjects,
        dir.display()
    );
    Ok(())
}

fn cmd_report(path: &Path) -> CliResult<()> {
    let records = read_report_csv(path)?;
    let report = aggregate_report(&records, 0)?;
    print!("{}", format_table(&report));
    Ok(())
}

fn cmd_project(config: &Path, checkpoint: &Path, out: Option<PathBuf>, seed: Option<u64>) -> CliResult<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    let (model, meta) = load_checkpoint(checkpoint)?;
    let (Some(subject), Some(fold)) = (meta.subject_id.clone(), meta.fold_index) else {
        return Err(Failure::Config(format!("{}: checkpoint has no subject/fold metadata", checkpoint.display())));
    };
    if meta.config_hash.as_deref().is_some_and(|h| h != cfg.config_hash()) {
        eprintln!("warning: checkpoint was trained under a different configuration");
    }
    let ds = cfg.load_dataset()?;
    let projections = project_fold(&ds, &cfg, &model, &subject, fold)?;
    let dir = out.unwrap_or_else(|| cfg.output_dir.join("projections"));
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    for (sub, pts) in &projections {
        let path = dir.join(format!("{subject}_fold{fold}_{}.csv", sub.as_str()));
        write_projection_csv(&path, pts)?;
        println!("{} ({} points, {} subspace)", path.display(), pts.len(), sub.as_str());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { config, out, force } => cmd_synth(&config, out, force),
        Command::Run {
            config,
            out,
            seed,
            stage1_only,
            jobs,
            force,
        } => cmd_run(&config, out, seed, RunOptions { stage1_only, jobs }, force),
        Command::Report { report } => cmd_report(&report),
        Command::Project {
            config,
            checkpoint,
            out,
            seed,
        } => cmd_project(&config, &checkpoint, out, seed),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
