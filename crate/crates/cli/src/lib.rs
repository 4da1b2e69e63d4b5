//! Command-line front end for the tensorforest pipeline.

pub mod commands;
pub mod config;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use tensorforest::synth::SynthOptions;
use tensorforest::{Error, Result};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(
    name = "tensorforest",
    version,
    about = "CP tensor features + random forest, evaluated by nested stratified CV"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Scan, clean and deduplicate a class-per-folder image tree into manifest.jsonl.
    Ingest(ConfigArgs),
    /// Write features_r<R>.fmx1 with .json and .csv companions.
    Extract(ConfigArgs),
    /// Nested cross-validation; writes report.json and cm_fold<k>.csv.
    Evaluate(ConfigArgs),
    /// Branch ablation; writes ablation.json.
    Ablate(ConfigArgs),
    /// Analytic operation counts; writes flops.json.
    Flops(ConfigArgs),
    /// Generate a synthetic class-per-folder image tree.
    Synth(SynthArgs),
    /// ingest, extract, evaluate, ablate and flops in sequence.
    All(ConfigArgs),
}

/// Every configuration key, as `--key value` (hyphenated spellings accepted).
#[derive(Debug, Clone, Default, Args)]
pub struct ConfigArgs {
    /// File of `key = value` lines; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "dataset_root", alias = "dataset-root", value_name = "DIR")]
    pub dataset_root: Option<String>,
    #[arg(long = "output_dir", alias = "output-dir", value_name = "DIR")]
    pub output_dir: Option<String>,
    #[arg(long = "parafac_rank", alias = "parafac-rank", value_name = "R")]
    pub parafac_rank: Option<String>,
    #[arg(long = "spatial_filters", alias = "spatial-filters", value_name = "N")]
    pub spatial_filters: Option<String>,
    #[arg(long = "outer_k", alias = "outer-k", value_name = "K")]
    pub outer_k: Option<String>,
    #[arg(long = "inner_k", alias = "inner-k", value_name = "K")]
    pub inner_k: Option<String>,
    #[arg(long = "ablation_folds", alias = "ablation-folds", value_name = "K")]
    pub ablation_folds: Option<String>,
    #[arg(long, value_name = "U64")]
    pub seed: Option<String>,
    #[arg(long, value_name = "N")]
    pub trees: Option<String>,
    /// Integer or `none`.
    #[arg(long = "max_depth", alias = "max-depth", value_name = "D")]
    pub max_depth: Option<String>,
    #[arg(
        long = "min_samples_split",
        alias = "min-samples-split",
        value_name = "N"
    )]
    pub min_samples_split: Option<String>,
    /// Integer or `none` for floor(sqrt(features)).
    #[arg(
        long = "features_per_split",
        alias = "features-per-split",
        value_name = "N"
    )]
    pub features_per_split: Option<String>,
    #[arg(long, value_name = "BOOL")]
    pub bootstrap: Option<String>,
    #[arg(long = "als_max_sweeps", alias = "als-max-sweeps", value_name = "N")]
    pub als_max_sweeps: Option<String>,
    #[arg(long = "als_tolerance", alias = "als-tolerance", value_name = "X")]
    pub als_tolerance: Option<String>,
    /// `svd` (default) or `uniform`.
    #[arg(long = "als_init", alias = "als-init", value_name = "INIT")]
    pub als_init: Option<String>,
    /// Comma-separated candidate ranks for inner-loop rank selection.
    #[arg(long = "select_ranks", alias = "select-ranks", value_name = "R,R,..")]
    pub select_ranks: Option<String>,
    /// FMX1 matrix replacing the spatial branch, one row per sample.
    #[arg(
        long = "embeddings_file",
        alias = "embeddings-file",
        value_name = "FILE"
    )]
    pub embeddings_file: Option<String>,
    /// Thread count; 0 uses every core. Never changes results.
    #[arg(long, value_name = "N")]
    pub workers: Option<String>,
    /// Add environment metadata (time, paths, threads) to reports.
    #[arg(long)]
    pub annotate: bool,
}

impl ConfigArgs {
    fn flags(&self) -> Vec<(&'static str, &String)> {
        [
            ("dataset_root", &self.dataset_root),
            ("output_dir", &self.output_dir),
            ("parafac_rank", &self.parafac_rank),
            ("spatial_filters", &self.spatial_filters),
            ("outer_k", &self.outer_k),
            ("inner_k", &self.inner_k),
            ("ablation_folds", &self.ablation_folds),
            ("seed", &self.seed),
            ("trees", &self.trees),
            ("max_depth", &self.max_depth),
            ("min_samples_split", &self.min_samples_split),
            ("features_per_split", &self.features_per_split),
            ("bootstrap", &self.bootstrap),
            ("als_max_sweeps", &self.als_max_sweeps),
            ("als_tolerance", &self.als_tolerance),
            ("als_init", &self.als_init),
            ("select_ranks", &self.select_ranks),
            ("embeddings_file", &self.embeddings_file),
            ("workers", &self.workers),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k, v)))
        .collect()
    }

    /// Defaults, then the config file, then flags.
    pub fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(path) = &self.config {
            cfg.apply_file(path)?;
        }
        for (key, value) in self.flags() {
            cfg.set(key, value)?;
        }
        cfg.annotate |= self.annotate;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Destination directory; defaults to dataset_root.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub classes: usize,
    /// Comma-separated image counts per class. Defaults to 40 per class with
    /// the last class at 20.
    #[arg(long = "per-class", alias = "per_class", value_name = "N,N,..")]
    pub per_class: Option<String>,
    /// Planted byte-identical copies per class.
    #[arg(long, default_value_t = 0)]
    pub duplicates: usize,
    /// Constant-intensity images per class, rejected at ingest.
    #[arg(long, default_value_t = 0)]
    pub uniform: usize,
    #[arg(long = "noise-sigma", alias = "noise_sigma", default_value_t = 8.0)]
    pub noise_sigma: f64,
}

impl SynthArgs {
    pub fn resolve(&self) -> Result<(PathBuf, SynthOptions)> {
        let cfg = self.config.resolve()?;
        let root = match (&self.out, &cfg.dataset_root) {
            (Some(out), _) => out.clone(),
            (None, Some(root)) => root.clone(),
            (None, None) => return Err(Error::config("out", "required (or dataset_root)")),
        };
        if self.classes == 0 {
            return Err(Error::config("classes", "must be >= 1"));
        }
        let per_class: Vec<usize> = match &self.per_class {
            Some(list) => list
                .split(',')
                .map(|s| {
                    s.trim()
                        .parse()
                        .map_err(|_| Error::config("per_class", format!("cannot parse {s:?}")))
                })
                .collect::<Result<_>>()?,
            None => {
                let mut v = vec![40; self.classes];
                if let Some(last) = v.last_mut() {
                    *last = 20;
                }
                v
            }
        };
        if per_class.len() != self.classes {
            return Err(Error::config(
                "per_class",
                format!("{} counts for {} classes", per_class.len(), self.classes),
            ));
        }
        let opts = SynthOptions {
            per_class,
            seed: cfg.seed,
            duplicates: self.duplicates,
            uniform: self.uniform,
            noise_sigma: self.noise_sigma,
        };
        Ok((root, opts))
    }
}

/// Worker count requested on the command line or in the config file.
pub fn workers(cmd: &Command) -> Result<usize> {
    let args = match cmd {
        Command::Synth(s) => &s.config,
        Command::Ingest(a)
        | Command::Extract(a)
        | Command::Evaluate(a)
        | Command::Ablate(a)
        | Command::Flops(a)
        | Command::All(a) => a,
    };
    Ok(args.resolve()?.workers)
}

pub fn run(cmd: &Command) -> Result<()> {
    match cmd {
        Command::Ingest(a) => commands::cmd_ingest(&a.resolve()?).map(|_| ()),
        Command::Extract(a) => commands::cmd_extract(&a.resolve()?),
        Command::Evaluate(a) => commands::cmd_evaluate(&a.resolve()?),
        Command::Ablate(a) => commands::cmd_ablate(&a.resolve()?),
        Command::Flops(a) => commands::cmd_flops(&a.resolve()?),
        Command::All(a) => commands::cmd_all(&a.resolve()?),
        Command::Synth(s) => {
            let (root, opts) = s.resolve()?;
            let summary = commands::cmd_synth(&root, &opts)?;
            println!(
                "wrote {} images to {} ({:?} per class)",
                summary.files,
                root.display(),
                summary.per_class
            );
            Ok(())
        }
    }
}

/// Process exit status for an error: 2 for filesystem failures, 1 otherwise.
pub fn exit_code(err: &Error) -> u8 {
    if err.is_io() {
        2
    } else {
        1
    }
}
