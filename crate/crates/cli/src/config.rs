//! Run configuration: a flat `key = value` file overridden by flags.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::Serialize;
use tensorforest::features::{ParafacFeatureSpec, SpatialFeatureSpec};
use tensorforest::forest::ForestOptions;
use tensorforest::tensor::{AlsInit, AlsOptions};
use tensorforest::{Error, Result};

pub const KEYS: &[&str] = &[
    "dataset_root",
    "output_dir",
    "parafac_rank",
    "spatial_filters",
    "outer_k",
    "inner_k",
    "ablation_folds",
    "seed",
    "trees",
    "max_depth",
    "min_samples_split",
    "features_per_split",
    "bootstrap",
    "als_max_sweeps",
    "als_tolerance",
    "als_init",
    "select_ranks",
    "embeddings_file",
    "workers",
    "annotate",
];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub dataset_root: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub parafac_rank: usize,
    pub spatial_filters: usize,
    pub outer_k: usize,
    pub inner_k: usize,
    pub ablation_folds: usize,
    pub seed: u64,
    pub trees: usize,
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub als_max_sweeps: usize,
    pub als_tolerance: f64,
    pub als_init: AlsInit,
    pub select_ranks: Vec<usize>,
    pub embeddings_file: Option<PathBuf>,
    /// Thread count; 0 uses every core.
    pub workers: usize,
    pub annotate: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let forest = ForestOptions::default();
        let als = AlsOptions::default();
        RunConfig {
            dataset_root: None,
            output_dir: None,
            parafac_rank: 16,
            spatial_filters: 32,
            outer_k: 5,
            inner_k: 5,
            ablation_folds: 3,
            seed: 42,
            trees: forest.tree_count,
            max_depth: forest.max_depth,
            min_samples_split: forest.min_samples_split,
            features_per_split: forest.features_per_split,
            bootstrap: forest.bootstrap,
            als_max_sweeps: als.max_sweeps,
            als_tolerance: als.rel_fit_tolerance,
            als_init: als.init,
            select_ranks: Vec::new(),
            embeddings_file: None,
            workers: 0,
            annotate: false,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(key, format!("cannot parse {value:?}")))
}

fn parse_optional(key: &str, value: &str) -> Result<Option<usize>> {
    match value {
        "" | "none" => Ok(None),
        v => parse(key, v).map(Some),
    }
}

fn parse_path(key: &str, value: &str) -> Result<PathBuf> {
    if value.is_empty() {
        return Err(Error::config(key, "path must not be empty"));
    }
    Ok(PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "dataset_root" => self.dataset_root = Some(parse_path(key, value)?),
            "output_dir" => self.output_dir = Some(parse_path(key, value)?),
            "parafac_rank" => self.parafac_rank = parse(key, value)?,
            "spatial_filters" => self.spatial_filters = parse(key, value)?,
            "outer_k" => self.outer_k = parse(key, value)?,
            "inner_k" => self.inner_k = parse(key, value)?,
            "ablation_folds" => self.ablation_folds = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "trees" => self.trees = parse(key, value)?,
            "max_depth" => self.max_depth = parse_optional(key, value)?,
            "min_samples_split" => self.min_samples_split = parse(key, value)?,
            "features_per_split" => self.features_per_split = parse_optional(key, value)?,
            "bootstrap" => self.bootstrap = parse(key, value)?,
            "als_max_sweeps" => self.als_max_sweeps = parse(key, value)?,
            "als_tolerance" => self.als_tolerance = parse(key, value)?,
            "als_init" => {
                self.als_init = match value {
                    "svd" => AlsInit::Svd,
                    "uniform" => AlsInit::Uniform,
                    _ => return Err(Error::config(key, "expected svd or uniform")),
                }
            }
            "select_ranks" => {
                self.select_ranks = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse(key, s))
                    .collect::<Result<_>>()?
            }
            "embeddings_file" => self.embeddings_file = Some(parse_path(key, value)?),
            "workers" => self.workers = parse(key, value)?,
            "annotate" => self.annotate = parse(key, value)?,
            _ => return Err(Error::config(key, "unknown key")),
        }
        Ok(())
    }

    /// Apply `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::config(
                    "config",
                    format!("line {}: expected key = value", n + 1),
                ));
            };
            self.set(&key.trim().replace('-', "_"), value)?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        for (key, value) in [
            ("outer_k", self.outer_k),
            ("inner_k", self.inner_k),
            ("ablation_folds", self.ablation_folds),
        ] {
            if value < 2 {
                return Err(Error::config(key, format!("must be >= 2, got {value}")));
            }
        }
        if self.parafac_rank < 1 {
            return Err(Error::config("parafac_rank", "must be >= 1"));
        }
        if self.select_ranks.contains(&0) {
            return Err(Error::config("select_ranks", "ranks must be >= 1"));
        }
        if self.spatial_filters < 1 && self.embeddings_file.is_none() {
            return Err(Error::config("spatial_filters", "must be >= 1"));
        }
        self.als().validate()?;
        self.forest().validate()
    }

    pub fn dataset_root(&self) -> Result<&Path> {
        self.dataset_root
            .as_deref()
            .ok_or_else(|| Error::config("dataset_root", "required"))
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output_dir
            .as_deref()
            .ok_or_else(|| Error::config("output_dir", "required"))
    }

    pub fn als(&self) -> AlsOptions {
        AlsOptions {
            max_sweeps: self.als_max_sweeps,
            rel_fit_tolerance: self.als_tolerance,
            init: self.als_init,
            init_seed: self.seed,
            ..AlsOptions::default()
        }
    }

    pub fn parafac_spec(&self, rank: usize) -> ParafacFeatureSpec {
        ParafacFeatureSpec {
            rank,
            als: self.als(),
        }
    }

    pub fn spatial_spec(&self) -> SpatialFeatureSpec {
        SpatialFeatureSpec {
            filter_count: self.spatial_filters,
            seed: self.seed,
        }
    }

    pub fn forest(&self) -> ForestOptions {
        ForestOptions {
            tree_count: self.trees,
            max_depth: self.max_depth,
            min_samples_split: self.min_samples_split,
            features_per_split: self.features_per_split,
            bootstrap: self.bootstrap,
            seed: self.seed,
        }
    }

    /// Ranks whose features `extract` writes: the configured rank plus any
    /// selection candidates, ascending.
    pub fn extract_ranks(&self) -> Vec<usize> {
        let mut ranks = self.select_ranks.clone();
        ranks.push(self.parafac_rank);
        ranks.sort_unstable();
        ranks.dedup();
        ranks
    }

    /// Ranks evaluated by nested CV.
    pub fn candidate_ranks(&self) -> Vec<usize> {
        if self.select_ranks.is_empty() {
            vec![self.parafac_rank]
        } else {
            self.select_ranks.clone()
        }
    }

    /// Settings that influence results. Paths and the worker count are left
    /// out so that reports do not depend on where or how fast they ran.
    pub fn echo(&self) -> ConfigEcho {
        ConfigEcho {
            parafac_rank: self.parafac_rank,
            spatial_filters: self.spatial_filters,
            spatial_source: if self.embeddings_file.is_some() {
                "embeddings"
            } else {
                "filter_bank"
            },
            outer_k: self.outer_k,
            inner_k: self.inner_k,
            ablation_folds: self.ablation_folds,
            seed: self.seed,
            select_ranks: self.select_ranks.clone(),
            als: self.als(),
            forest: self.forest(),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub parafac_rank: usize,
    pub spatial_filters: usize,
    pub spatial_source: &'static str,
    pub outer_k: usize,
    pub inner_k: usize,
    pub ablation_folds: usize,
    pub seed: u64,
    pub select_ranks: Vec<usize>,
    pub als: AlsOptions,
    pub forest: ForestOptions,
}
