//! `glvd` command-line driver. Each stage reads the experiment config, writes
//! its artifacts into a fresh output directory and describes the run in
//! `manifest.json`.

mod error;
mod manifest;
mod stages;

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, Subcommand};

use glvd::experiment::ExperimentConfig;

pub use error::{CliError, CliResult, EXIT_RUNTIME, EXIT_VALIDATION};
pub use manifest::{output_fingerprints, OutputFile, RunManifest, StageArgs, MANIFEST_FILE, MANIFEST_FORMAT};

/// Environment variable naming the corpus root when the config has none.
pub const DATA_DIR_ENV: &str = "GLVD_DATA_DIR";

#[derive(Debug, Parser)]
#[command(name = "glvd", version, about = "Keypoint-guided learned vertex descent for face meshes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override one config value, e.g. `descent.steps=10`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    pub overrides: Vec<String>,
    /// Output directory; must not exist yet.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed of the stage (corpus, training or descent seed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, default_value_t = 1)]
    pub workers: usize,
    /// Re-run the stage recorded in a run manifest.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus.
    GenCorpus,
    /// Train the keypoint heatmap surrogate.
    TrainHeatmap,
    /// Pretrain the image encoder on signed distances.
    PretrainSdf,
    /// Train the keypoint and vertex branches.
    Train,
    /// Reconstruct a mesh from view files.
    Reconstruct {
        /// View files (image, mask and camera), 1 to 8.
        views: Vec<PathBuf>,
        /// Also write the mesh after every descent step.
        #[arg(long)]
        trace: bool,
    },
    /// Chamfer tables over view counts plus the yaw analysis.
    Evaluate {
        #[arg(long)]
        split: Option<String>,
    },
    /// Train and evaluate every ablation row.
    Ablate {
        #[arg(long)]
        split: Option<String>,
    },
    /// Steps-versus-clipping grid.
    Sweep {
        #[arg(long)]
        split: Option<String>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenCorpus => "gen-corpus",
            Command::TrainHeatmap => "train-heatmap",
            Command::PretrainSdf => "pretrain-sdf",
            Command::Train => "train",
            Command::Reconstruct { .. } => "reconstruct",
            Command::Evaluate { .. } => "evaluate",
            Command::Ablate { .. } => "ablate",
            Command::Sweep { .. } => "sweep",
        }
    }

    fn args(&self) -> StageArgs {
        match self {
            Command::Reconstruct { views, trace } => StageArgs {
                views: views.clone(),
                trace: *trace,
                split: None,
            },
            Command::Evaluate { split } | Command::Ablate { split } | Command::Sweep { split } => StageArgs {
                split: split.clone(),
                ..StageArgs::default()
            },
            _ => StageArgs::default(),
        }
    }
}

/// Resolved inputs of one stage run.
pub struct Invocation {
    pub command: String,
    pub args: StageArgs,
    pub config: ExperimentConfig,
    pub workers: usize,
    pub out: PathBuf,
}

/// Parse arguments, run, print errors; returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_VALIDATION } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(&cli) {
        Ok(m) => {
            eprintln!("{} finished in {:.1}s", m.command, m.wall_clock_secs);
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.code
        }
    }
}

/// Resolve the config, run the stage into a staging directory, write the
/// manifest and move the directory into place.
pub fn dispatch(cli: &Cli) -> CliResult<RunManifest> {
    let inv = resolve(cli)?;
    execute(&inv)
}

fn resolve(cli: &Cli) -> CliResult<Invocation> {
    let out = cli
        .out
        .clone()
        .ok_or_else(|| CliError::validation("--out DIR is required"))?;
    let name = cli.command.name();
    if let Some(path) = &cli.manifest {
        if cli.config.is_some() || !cli.overrides.is_empty() || cli.seed.is_some() {
            return Err(CliError::validation("--manifest cannot be combined with --config, --set or --seed"));
        }
        let m = RunManifest::load(path)?;
        if m.command != name {
            return Err(CliError::validation(format!(
                "manifest {} records `{}`, not `{name}`",
                path.display(),
                m.command
            )));
        }
        let given = cli.command.args();
        let args = if given == StageArgs::default() { m.args } else { given };
        return Ok(Invocation {
            command: name.into(),
            args,
            config: m.config,
            workers: cli.workers,
            out,
        });
    }
    let mut config = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    config.apply_overrides(&cli.overrides)?;
    if let Some(seed) = cli.seed {
        match cli.command {
            Command::GenCorpus => config.corpus.seed = seed,
            Command::TrainHeatmap | Command::PretrainSdf | Command::Train | Command::Ablate { .. } => {
                config.train.seed = seed
            }
            Command::Reconstruct { .. } | Command::Evaluate { .. } | Command::Sweep { .. } => config.descent.seed = seed,
        }
    }
    if config.artifacts.corpus.is_none() {
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            config.artifacts.corpus = Some(PathBuf::from(dir));
        }
    }
    config.validate()?;
    Ok(Invocation {
        command: name.into(),
        args: cli.command.args(),
        config,
        workers: cli.workers.max(1),
        out,
    })
}

/// Run a resolved invocation.
pub fn execute(inv: &Invocation) -> CliResult<RunManifest> {
    let start = Instant::now();
    if inv.out.exists() {
        return Err(CliError::validation(format!(
            "output directory {} already exists",
            inv.out.display()
        )));
    }
    let staging = staging_dir(&inv.out)?;
    let result = (|| -> CliResult<RunManifest> {
        let text = inv.config.to_toml_string()?;
        write_file(&staging.join("config.toml"), text.as_bytes())?;
        let record = stages::run_stage(inv, &staging)?;
        let manifest = RunManifest {
            format: MANIFEST_FORMAT.into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: inv.command.clone(),
            args: inv.args.clone(),
            config: inv.config.clone(),
            config_fingerprint: inv.config.fingerprint(),
            workers: inv.workers,
            corpus_fingerprint: record.corpus_fingerprint,
            inputs: record.inputs,
            outputs: output_fingerprints(&staging)?,
            wall_clock_secs: start.elapsed().as_secs_f64(),
        };
        let json = serde_json::to_vec_pretty(&manifest).map_err(|e| CliError::runtime(e.to_string()))?;
        write_file(&staging.join(MANIFEST_FILE), &json)?;
        Ok(manifest)
    })();
    match result {
        Ok(m) => {
            std::fs::rename(&staging, &inv.out).map_err(|e| {
                CliError::runtime(format!("cannot move {} to {}: {e}", staging.display(), inv.out.display()))
            })?;
            Ok(m)
        }
        Err(e) => {
            let _ = std::fs::remove_dir_all(&staging);
            Err(e)
        }
    }
}

fn staging_dir(out: &Path) -> CliResult<PathBuf> {
    let parent = match out.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&parent)
        .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
    let name = out
        .file_name()
        .ok_or_else(|| CliError::validation(format!("invalid output directory {}", out.display())))?;
    let staging = parent.join(format!(".{}.partial-{}", name.to_string_lossy(), std::process::id()));
    if staging.exists() {
        std::fs::remove_dir_all(&staging)
            .map_err(|e| CliError::runtime(format!("cannot clear {}: {e}", staging.display())))?;
    }
    std::fs::create_dir(&staging).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", staging.display())))?;
    Ok(staging)
}

pub(crate) fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::runtime(format!("cannot create {}: {e}", dir.display())))?;
    }
    std::fs::write(path, bytes).map_err(|e| CliError::runtime(format!("cannot write {}: {e}", path.display())))
}
