use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use deepexp::bbvi::OptimizerConfig;
use deepexp::data::Format;
use deepexp::eval::EvalConfig;
use deepexp::hierarchy::DEFAULT_TOP_M;
use deepexp::model::DefArchitecture;
use serde::{Deserialize, Serialize};

use crate::failure::{usage, Failure};

#[derive(Debug, Parser)]
#[command(
    name = "deepexp",
    version,
    about = "Deep exponential families fit by black box variational inference"
)]
pub struct Cli {
    /// JSON run configuration; flags given on the command line override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a count matrix.
    Train(TrainArgs),
    /// Score held-out rows under a checkpoint.
    Eval(EvalArgs),
    /// Draw a synthetic data set from an architecture.
    Simulate(SimulateArgs),
    /// Write the learned hierarchy of a checkpoint as JSON and DOT.
    ExportHierarchy(ExportArgs),
}

#[derive(Debug, Args, Default)]
pub struct ModelArgs {
    /// Built-in architecture, e.g. sparse-gamma-100-30-15.
    #[arg(long)]
    pub arch: Option<String>,
    /// Architecture JSON file (as written to architecture.json).
    #[arg(long)]
    pub arch_file: Option<PathBuf>,
}

#[derive(Debug, Args, Default)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// uci-bow or tsv.
    #[arg(long)]
    pub format: Option<Format>,
    /// One name per line, used to label items.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    /// Row fractions for train, validation and held-out, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 3)]
    pub split: Option<Vec<f64>>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub step_size: Option<f64>,
    #[arg(long)]
    pub samples: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub validation_interval: Option<usize>,
    #[arg(long)]
    pub convergence_threshold: Option<f64>,
    #[arg(long)]
    pub checkpoint_interval: Option<usize>,
    /// Local iterations used when scoring held-out rows after training.
    #[arg(long)]
    pub local_iterations: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// When given, the checkpoint must have been written for this model.
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub observed_fraction: Option<f64>,
    #[arg(long)]
    pub local_iterations: Option<usize>,
    #[arg(long)]
    pub ndcg: bool,
    #[arg(long)]
    pub per_row: bool,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub rows: Option<usize>,
    /// Number of items (vocabulary size) for a built-in architecture.
    #[arg(long)]
    pub items: Option<usize>,
    #[arg(long)]
    pub format: Option<Format>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub top_m: Option<usize>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
}

/// Everything a run needs. Built from defaults, then the JSON file, then
/// flags, and written to `<out>/config.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub workers: Option<usize>,
    pub out: PathBuf,
    pub architecture: Option<String>,
    pub architecture_file: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub format: Format,
    pub vocab: Option<PathBuf>,
    pub split: [f64; 3],
    pub optimizer: OptimizerConfig,
    pub eval: EvalConfig,
    pub checkpoint: Option<PathBuf>,
    pub rows: usize,
    pub items: Option<usize>,
    pub top_m: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            workers: None,
            out: PathBuf::from("out"),
            architecture: None,
            architecture_file: None,
            data: None,
            format: Format::UciBow,
            vocab: None,
            split: [0.8, 0.1, 0.1],
            optimizer: OptimizerConfig::default(),
            eval: EvalConfig::default(),
            checkpoint: None,
            rows: 100,
            items: None,
            top_m: DEFAULT_TOP_M,
        }
    }
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn set_opt<T>(slot: &mut Option<T>, v: Option<T>) {
    if v.is_some() {
        *slot = v;
    }
}

impl RunConfig {
    pub fn resolve(cli: &Cli) -> Result<Self, Failure> {
        let mut c = match &cli.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Failure::Usage(format!("cannot read config {}: {e}", p.display()))
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| Failure::Usage(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        set(&mut c.seed, cli.seed);
        set_opt(&mut c.workers, cli.workers);
        set(&mut c.out, cli.out.clone());
        match &cli.command {
            Command::Train(a) => {
                c.apply_model(&a.model);
                c.apply_data(&a.data);
                if let Some(s) = &a.split {
                    c.split = [s[0], s[1], s[2]];
                }
                let o = &mut c.optimizer;
                set(&mut o.max_iterations, a.iterations);
                set(&mut o.step_size, a.step_size);
                set(&mut o.n_samples, a.samples);
                set(&mut o.batch_size, a.batch_size);
                set(&mut o.validation_interval, a.validation_interval);
                set(&mut o.convergence_threshold, a.convergence_threshold);
                set(&mut o.checkpoint_interval, a.checkpoint_interval);
                set(&mut c.eval.local.max_iterations, a.local_iterations);
            }
            Command::Eval(a) => {
                set_opt(&mut c.checkpoint, a.checkpoint.clone());
                c.apply_model(&a.model);
                c.apply_data(&a.data);
                set(&mut c.eval.observed_fraction, a.observed_fraction);
                set(&mut c.eval.local.max_iterations, a.local_iterations);
                c.eval.ndcg |= a.ndcg;
                c.eval.per_row |= a.per_row;
            }
            Command::Simulate(a) => {
                c.apply_model(&a.model);
                set(&mut c.rows, a.rows);
                set_opt(&mut c.items, a.items);
                set(&mut c.format, a.format);
            }
            Command::ExportHierarchy(a) => {
                set_opt(&mut c.checkpoint, a.checkpoint.clone());
                set(&mut c.top_m, a.top_m);
                set_opt(&mut c.vocab, a.vocab.clone());
            }
        }
        c.validate()?;
        Ok(c)
    }

    fn apply_model(&mut self, m: &ModelArgs) {
        if m.arch.is_some() || m.arch_file.is_some() {
            self.architecture = m.arch.clone();
            self.architecture_file = m.arch_file.clone();
        }
    }

    fn apply_data(&mut self, d: &DataArgs) {
        set_opt(&mut self.data, d.data.clone());
        set(&mut self.format, d.format);
        set_opt(&mut self.vocab, d.vocab.clone());
    }

    fn validate(&self) -> Result<(), Failure> {
        if self.architecture.is_some() && self.architecture_file.is_some() {
            return Err(Failure::Usage(
                "give either an architecture name or an architecture file, not both".into(),
            ));
        }
        if self.workers == Some(0) {
            return Err(Failure::Usage("--workers must be at least 1".into()));
        }
        usage(self.optimizer.validate())?;
        usage(self.eval.local.validate())?;
        if !(0.0..=1.0).contains(&self.eval.observed_fraction) {
            return Err(Failure::Usage(format!(
                "observed fraction {} outside [0, 1]",
                self.eval.observed_fraction
            )));
        }
        Ok(())
    }

    /// The architecture named or stored in the configuration, if any,
    /// sized for `n_items` items when it comes from the registry.
    pub fn architecture(&self, n_items: Option<usize>) -> Result<Option<DefArchitecture>, Failure> {
        if let Some(path) = &self.architecture_file {
            let text = read_input(path)?;
            let arch: DefArchitecture = serde_json::from_str(&text).map_err(|e| {
                Failure::Usage(format!("bad architecture file {}: {e}", path.display()))
            })?;
            return Ok(Some(arch));
        }
        match &self.architecture {
            Some(name) => {
                let n = n_items.ok_or_else(|| {
                    Failure::Usage(format!("the number of items is needed to build {name:?}"))
                })?;
                Ok(Some(usage(DefArchitecture::named(name, n))?))
            }
            None => Ok(None),
        }
    }
}

/// Read an input file; a missing or unreadable file is a usage error that
/// names the path.
pub fn read_input(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path)
        .map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

pub fn require<'a, T>(v: &'a Option<T>, what: &str) -> Result<&'a T, Failure> {
    v.as_ref()
        .ok_or_else(|| Failure::Usage(format!("missing {what}")))
}
