use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::commands;
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::run::RunDir;

#[derive(Debug, Parser)]
#[command(
    name = "imind",
    version,
    about = "Subject-object disentangled fMRI decoding on synthetic or file-based voxel data"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Debug, Default, Args)]
pub struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the `seed` key.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent of the run directory.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-subject dataset.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Stage 1: masked-autoencoder pretraining of the voxel encoder.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Stage 2: end-to-end training of the disentangled dual decoder.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
        /// Stage-1 checkpoint directory.
        #[arg(long)]
        stage1: Option<PathBuf>,
    },
    /// Evaluate a stage-2 checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Object-voxel fingerprint of one class for one subject.
    Attribute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        class: Option<usize>,
        #[arg(long)]
        subject: Option<usize>,
    },
    /// K-Means and linear subject-identification baselines.
    Baselines {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
}

/// Where a finished command left its outputs.
#[derive(Debug)]
pub struct Outcome {
    pub run_dir: Option<PathBuf>,
    pub code: i32,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Synth { .. } => "synth",
            Command::Pretrain { .. } => "pretrain",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Attribute { .. } => "attribute",
            Command::Baselines { .. } => "baselines",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::Synth { common }
            | Command::Pretrain { common, .. }
            | Command::Train { common, .. }
            | Command::Eval { common, .. }
            | Command::Attribute { common, .. }
            | Command::Baselines { common, .. } => common,
        }
    }

    /// Flags take precedence over the config file.
    fn apply_flags(&self, cfg: &mut RunConfig) {
        if let Some(s) = self.common().seed {
            cfg.seed = s;
        }
        let set = |slot: &mut Option<PathBuf>, v: &Option<PathBuf>| {
            if v.is_some() {
                slot.clone_from(v);
            }
        };
        match self {
            Command::Synth { .. } => {}
            Command::Pretrain { dataset, .. } | Command::Baselines { dataset, .. } => {
                set(&mut cfg.paths.dataset, dataset)
            }
            Command::Train {
                dataset, stage1, ..
            } => {
                set(&mut cfg.paths.dataset, dataset);
                set(&mut cfg.paths.stage1, stage1);
            }
            Command::Eval {
                checkpoint,
                dataset,
                ..
            } => {
                set(&mut cfg.paths.dataset, dataset);
                set(&mut cfg.paths.checkpoint, checkpoint);
            }
            Command::Attribute {
                checkpoint,
                dataset,
                class,
                subject,
                ..
            } => {
                set(&mut cfg.paths.dataset, dataset);
                set(&mut cfg.paths.checkpoint, checkpoint);
                if let Some(c) = class {
                    cfg.attribute.class = *c;
                }
                if let Some(s) = subject {
                    cfg.attribute.subject = *s;
                }
            }
        }
    }
}

fn report(e: &CliError) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

/// Runs one command. Errors before the run directory exists (bad config)
/// leave nothing on disk.
pub fn execute(cmd: &Command) -> Outcome {
    let common = cmd.common();
    let loaded: CliResult<(String, RunConfig)> =
        RunConfig::load(common.config.as_deref()).map(|(text, mut cfg)| {
            cmd.apply_flags(&mut cfg);
            (text, cfg)
        });
    let (text, cfg) = match loaded {
        Ok(v) => v,
        Err(e) => {
            return Outcome {
                run_dir: None,
                code: report(&e),
            }
        }
    };
    let run = match RunDir::create(&common.out, cmd.name()).and_then(|r| {
        r.echo_config(&text, &cfg)?;
        Ok(r)
    }) {
        Ok(r) => r,
        Err(e) => {
            return Outcome {
                run_dir: None,
                code: report(&e),
            }
        }
    };
    let body = match cmd {
        Command::Synth { .. } => commands::synth,
        Command::Pretrain { .. } => commands::pretrain,
        Command::Train { .. } => commands::train,
        Command::Eval { .. } => commands::eval,
        Command::Attribute { .. } => commands::attribute,
        Command::Baselines { .. } => commands::baselines,
    };
    let result = body(&cfg, &run);
    let mut code = match &result {
        Ok(_) => 0,
        Err(e) => report(e),
    };
    if let Err(e) = run.write_summary(cmd.name(), &cfg, &result) {
        code = code.max(report(&e));
    }
    println!("run directory: {}", run.path.display());
    Outcome {
        run_dir: Some(run.path),
        code,
    }
}

/// Parses `args` (including the program name) and runs the command.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => execute(&cli.command).code,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            code
        }
    }
}
