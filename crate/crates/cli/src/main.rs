//! `headkd`: run distillation experiments from TOML configs.
//!
//! Exit codes: 0 success, 1 invalid input or config, 2 runtime or numeric
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use headkd::data::{DatasetKind, SyntheticSpec};
use headkd::harness::commands::{self, Overrides};
use headkd::harness::config::{DataSection, ExperimentConfig, CONFIG_VERSION};
use headkd::harness::{Command, LoadedConfig};
use headkd::Error;

#[derive(Parser)]
#[command(
    name = "headkd",
    version,
    about = "Teacher-head and student-head knowledge distillation experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Output directory (overrides `output_dir`).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Run with this single seed (overrides `seeds`).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Write a synthetic dataset to <out>/data.csv.
    GenData {
        /// Config with a [data.synthetic] section; the flags below override it.
        config: Option<PathBuf>,
        /// gaussian_blobs or concentric_rings.
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        num_classes: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        samples_per_class: Option<usize>,
        #[arg(long)]
        noise_std: Option<f64>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Generation seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train one model per seed; writes model.ckpt and report.csv.
    Train {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Three-phase SH-KD; writes a checkpoint and report per phase and summary.csv.
    Shkd {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Compare a teacher and a student checkpoint; writes angles.csv and analysis.csv.
    Analyze {
        config: PathBuf,
        /// Teacher checkpoint (overrides analyze.teacher).
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Student checkpoint (overrides analyze.student).
        #[arg(long)]
        student: Option<PathBuf>,
        /// Output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// SH-KD once per initial-student width; writes ablation.csv.
    Ablate {
        config: PathBuf,
        #[command(flatten)]
        common: Common,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

fn load(path: &Path, command: Command, overrides: &Overrides) -> Result<LoadedConfig, Error> {
    let mut loaded = LoadedConfig::load(path)?;
    overrides.apply(&mut loaded, command)?;
    Ok(loaded)
}

fn common(c: Common) -> Overrides {
    Overrides {
        out: c.out,
        seed: c.seed,
        ..Overrides::default()
    }
}

fn print_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn run(command: Sub) -> Result<(), Error> {
    match command {
        Sub::GenData {
            config,
            kind,
            num_classes,
            dim,
            samples_per_class,
            noise_std,
            out,
            seed,
        } => {
            let overrides = Overrides {
                out,
                seed,
                ..Overrides::default()
            };
            let mut loaded = match config {
                Some(path) => LoadedConfig::load(&path)?,
                None => {
                    let Some(kind) = &kind else {
                        return Err(Error::Config(vec![
                            "kind: required when no config file is given".into(),
                        ]));
                    };
                    LoadedConfig {
                        config: ExperimentConfig {
                            version: CONFIG_VERSION,
                            output_dir: PathBuf::from("."),
                            seeds: Vec::new(),
                            teacher_checkpoint: None,
                            data: DataSection {
                                synthetic: Some(SyntheticSpec {
                                    kind: kind.parse()?,
                                    num_classes: 4,
                                    dim: 8,
                                    samples_per_class: 200,
                                    noise_std: 0.15,
                                    seed: 0,
                                }),
                                csv: None,
                                split_seed: 0,
                                test_fraction: headkd::data::DEFAULT_TEST_FRACTION,
                            },
                            teacher: None,
                            student: None,
                            initial_student: None,
                            train: None,
                            shkd: None,
                            ablate: None,
                            analyze: None,
                        },
                        base_dir: PathBuf::new(),
                    }
                }
            };
            if let Some(spec) = &mut loaded.config.data.synthetic {
                if let Some(k) = &kind {
                    spec.kind = k.parse::<DatasetKind>()?;
                }
                spec.num_classes = num_classes.unwrap_or(spec.num_classes);
                spec.dim = dim.unwrap_or(spec.dim);
                spec.samples_per_class = samples_per_class.unwrap_or(spec.samples_per_class);
                spec.noise_std = noise_std.unwrap_or(spec.noise_std);
            }
            overrides.apply(&mut loaded, Command::GenData)?;
            print_written(&commands::gen_data(&loaded)?);
        }
        Sub::Train { config, common: c } => {
            let loaded = load(&config, Command::Train, &common(c))?;
            print_written(&commands::train(&loaded)?);
        }
        Sub::Shkd { config, common: c } => {
            let loaded = load(&config, Command::Shkd, &common(c))?;
            print_written(&commands::shkd(&loaded)?);
        }
        Sub::Analyze {
            config,
            teacher,
            student,
            out,
        } => {
            let overrides = Overrides {
                out,
                seed: None,
                teacher,
                student,
            };
            let loaded = load(&config, Command::Analyze, &overrides)?;
            let (written, analysis) = commands::analyze(&loaded)?;
            print_written(&written);
            print!("{}", analysis.summary_csv());
        }
        Sub::Ablate { config, common: c } => {
            let loaded = load(&config, Command::Ablate, &common(c))?;
            let (written, monotone) = commands::ablate(&loaded)?;
            print_written(&written);
            for (path, ok) in written.iter().zip(monotone) {
                eprintln!(
                    "observation ({}): teacher accuracy {} as the initial width shrinks",
                    path.display(),
                    if ok {
                        "does not increase"
                    } else {
                        "increases somewhere"
                    }
                );
            }
        }
    }
    Ok(())
}
