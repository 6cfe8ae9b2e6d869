use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use coordmatch_bench::config::parse_class_pair;
use coordmatch_bench::{run_experiment, BatchTiming, ConfigError, ExperimentConfig, Method};

const SEED_HELP: &str = "\
Run r (0-based) uses seed mix64(master + (r + 1) * 0x9E3779B97F4A7C15) with
wrapping 64-bit arithmetic, where mix64 is the SplitMix64 output function.
Each run seed drives two ChaCha8 streams: stream 0 for the train/test split and
initial labels, stream 1 for batch selection. Every method therefore starts
from the same partition for a given --seed.

A --config file holds `key = value` lines using the long flag names (dashes or
underscores); flags given on the command line override the file.";

/// Batch active learning experiments: learning curves of test accuracy
/// against the number of labels queried.
#[derive(Debug, Parser)]
#[command(name = "coordmatch", version, after_long_help = SEED_HELP)]
struct Cli {
    /// Flat key = value configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Headered CSV with numeric features and one label column
    #[arg(long)]
    dataset: Option<PathBuf>,
    /// Label column: a header name, a 0-based index, or `last` [default: last]
    #[arg(long)]
    label_col: Option<String>,
    /// Keep only two classes of a multiclass file, e.g. `M,N`
    #[arg(long)]
    keep_classes: Option<String>,
    /// Skip min-max scaling of the features
    #[arg(long)]
    no_normalize: bool,
    /// sim_match, max_uncertain, random or sequential [default: sim_match]
    #[arg(long)]
    method: Option<String>,
    /// Batch size [default: 20]
    #[arg(long)]
    k: Option<usize>,
    /// Simulated trajectories per batch [default: 20]
    #[arg(long)]
    trajectories: Option<usize>,
    /// RBF kernel width [default: 0.05]
    #[arg(long)]
    kernel_width: Option<f64>,
    /// Ridge penalty on the dual weights [default: 0.0001]
    #[arg(long)]
    ridge: Option<f64>,
    /// Fraction of examples used for training [default: 0.7]
    #[arg(long)]
    train_frac: Option<f64>,
    /// Initially labeled examples per class [default: 5]
    #[arg(long)]
    seeds_per_class: Option<usize>,
    /// Independent runs [default: 50]
    #[arg(long)]
    runs: Option<usize>,
    /// Labels queried per run, a multiple of k [default: 100]
    #[arg(long)]
    budget: Option<usize>,
    /// Master seed [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Aggregate CSV: queries,mean_accuracy,variance
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-run CSV: run,seed,queries,accuracy
    #[arg(long)]
    per_run_out: Option<PathBuf>,
    /// Worker threads (0 = all cores)
    #[arg(long, default_value_t = 0)]
    threads: usize,
}

impl Cli {
    fn into_config(self) -> Result<(ExperimentConfig, usize), ConfigError> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::from_file(path)?,
            None => ExperimentConfig::default(),
        };
        if let Some(v) = self.dataset {
            c.dataset = v;
        }
        if let Some(v) = self.label_col {
            c.label_col = v;
        }
        if let Some(v) = self.keep_classes {
            c.keep_classes = Some(parse_class_pair(&v)?);
        }
        if self.no_normalize {
            c.normalize = false;
        }
        if let Some(v) = self.method {
            c.method = v.parse::<Method>()?;
        }
        macro_rules! take {
            ($($field:ident),*) => {$(if let Some(v) = self.$field { c.$field = v; })*};
        }
        take!(k, trajectories, kernel_width, ridge, train_frac, seeds_per_class, runs, budget, seed);
        if let Some(v) = self.out {
            c.out = Some(v);
        }
        if let Some(v) = self.per_run_out {
            c.per_run_out = Some(v);
        }
        c.validate()?;
        Ok((c, self.threads))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (config, threads) = match cli.into_config() {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    };
    if threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
            eprintln!("error: {e}");
            return ExitCode::FAILURE;
        }
    }
    let report = |t: BatchTiming| {
        eprintln!(
            "run {} batch {}: selected in {:.3} s",
            t.run,
            t.round + 1,
            t.elapsed.as_secs_f64()
        );
    };
    match run_experiment(&config, Some(&report)) {
        Ok(result) => {
            if config.out.is_none() {
                println!("queries,mean_accuracy,variance");
                let c = &result.curve;
                for j in 0..c.queries.len() {
                    println!("{},{},{}", c.queries[j], c.mean_accuracy[j], c.variance[j]);
                }
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
