//! Subcommand bodies. Each reads its inputs from and writes its artifacts to
//! the configured output directory, so `all` is their composition.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use tensorforest::dataset::{ingest, DatasetManifest};
use tensorforest::eval::{run_ablation, run_nested_cv, AblationVariants, CvConfig, RankFeatures};
use tensorforest::features::{extract_features, import_embeddings, FeatureMatrix};
use tensorforest::flops::{cost_pipeline, default_references, expected_depth};
use tensorforest::preprocess::{preprocess_file, GrayImage64};
use tensorforest::synth::{generate, SynthOptions, SynthSummary};
use tensorforest::{Error, Result};

use crate::config::{ConfigEcho, RunConfig};

pub const MANIFEST: &str = "manifest.jsonl";
pub const REPORT: &str = "report.json";
pub const ABLATION: &str = "ablation.json";
pub const FLOPS: &str = "flops.json";

pub fn features_stem(rank: usize) -> String {
    format!("features_r{rank}")
}

pub fn cm_file(fold: usize) -> String {
    format!("cm_fold{fold}.csv")
}

fn create_file(path: &Path) -> Result<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::InvalidInput(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_text(path, &text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        what: "json",
        reason: format!("{}: {e}", path.display()),
    })
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.output_dir()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    Ok(dir.to_path_buf())
}

/// Environment metadata, only emitted with `annotate`.
#[derive(Debug, Serialize)]
struct Annotation {
    tool_version: &'static str,
    unix_time: u64,
    workers: usize,
    dataset_root: Option<String>,
    output_dir: Option<String>,
}

fn annotation(cfg: &RunConfig) -> Option<Annotation> {
    cfg.annotate.then(|| Annotation {
        tool_version: env!("CARGO_PKG_VERSION"),
        unix_time: SystemTime::now()
            .duration_since(UNIX_EPOCH)
            .map_or(0, |d| d.as_secs()),
        workers: rayon::current_num_threads(),
        dataset_root: cfg.dataset_root.as_ref().map(|p| p.display().to_string()),
        output_dir: cfg.output_dir.as_ref().map(|p| p.display().to_string()),
    })
}

fn timed<T>(name: &str, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f()?;
    log::info!("{name} finished in {:.2} s", start.elapsed().as_secs_f64());
    Ok(out)
}

pub fn cmd_ingest(cfg: &RunConfig) -> Result<DatasetManifest> {
    timed("ingest", || {
        let root = cfg.dataset_root()?;
        let dir = output_dir(cfg)?;
        let ingested = ingest(root)?;
        let m = ingested.manifest;
        m.save(&dir.join(MANIFEST))?;
        log::info!(
            "{} classes, N0 = {}, N1 = {}",
            m.class_count(),
            m.n0(),
            m.n1()
        );
        Ok(m)
    })
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    DatasetManifest::load(&cfg.output_dir()?.join(MANIFEST))
}

/// Re-clean the manifest's samples in manifest order.
fn load_samples(root: &Path, manifest: &DatasetManifest) -> Result<Vec<GrayImage64>> {
    manifest
        .sample_indices()
        .par_iter()
        .map(|&i| {
            let rec = &manifest.records[i];
            preprocess_file(&root.join(&rec.path)).map_err(|reason| {
                Error::InvalidInput(format!(
                    "{} was accepted at ingest but now fails cleaning ({reason:?})",
                    rec.path
                ))
            })
        })
        .collect()
}

/// JSON companion of a features file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub rank: usize,
    pub rows: usize,
    pub cols: usize,
    pub parafac_len: usize,
    pub spatial_len: usize,
    pub spatial_source: String,
    pub classes: Vec<String>,
    pub labels: Vec<usize>,
    pub degenerate: Vec<bool>,
}

pub fn cmd_extract(cfg: &RunConfig) -> Result<()> {
    timed("extract", || {
        let root = cfg.dataset_root()?;
        let dir = output_dir(cfg)?;
        let manifest = load_manifest(cfg)?;
        let images = load_samples(root, &manifest)?;
        let refs: Vec<&GrayImage64> = images.iter().collect();
        let spatial = match &cfg.embeddings_file {
            Some(path) => import_embeddings(path, refs.len())?,
            None => extract_features(&refs, None, Some(&cfg.spatial_spec()))?.spatial,
        };
        let echo = cfg.echo();
        for rank in cfg.extract_ranks() {
            let parafac = extract_features(&refs, Some(&cfg.parafac_spec(rank)), None)?;
            let combined = FeatureMatrix::hconcat(&parafac.parafac, &spatial)?;
            let stem = features_stem(rank);
            combined.save_fmx1(&dir.join(format!("{stem}.fmx1")))?;
            let csv_path = dir.join(format!("{stem}.csv"));
            let mut csv = create_file(&csv_path)?;
            combined
                .write_csv(&mut csv)
                .and_then(|_| csv.flush())
                .map_err(|e| Error::io(&csv_path, e))?;
            let degenerate = parafac.degenerate.iter().filter(|&&d| d).count();
            if degenerate > 0 {
                log::warn!("rank {rank}: {degenerate} images gave a degenerate CP model");
            }
            write_json(
                &dir.join(format!("{stem}.json")),
                &FeatureSidecar {
                    rank,
                    rows: combined.rows(),
                    cols: combined.cols(),
                    parafac_len: combined.parafac_len(),
                    spatial_len: combined.spatial_len(),
                    spatial_source: echo.spatial_source.to_string(),
                    classes: manifest.classes.names().to_vec(),
                    labels: manifest.sample_labels(),
                    degenerate: parafac.degenerate,
                },
            )?;
        }
        Ok(())
    })
}

fn load_features(dir: &Path, rank: usize) -> Result<(FeatureMatrix, FeatureSidecar)> {
    let stem = features_stem(rank);
    let sidecar: FeatureSidecar = read_json(&dir.join(format!("{stem}.json")))?;
    let m = FeatureMatrix::load_fmx1(&dir.join(format!("{stem}.fmx1")))?
        .with_parafac_len(sidecar.parafac_len)?;
    if m.rows() != sidecar.rows || m.rows() != sidecar.labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{stem}: {} feature rows, {} labels",
            m.rows(),
            sidecar.labels.len()
        )));
    }
    Ok((m, sidecar))
}

#[derive(Serialize)]
struct EvaluationReport<'a> {
    config: ConfigEcho,
    classes: &'a [String],
    samples: usize,
    cv: &'a tensorforest::eval::FoldReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotation: Option<Annotation>,
}

pub fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    timed("evaluate", || {
        let dir = output_dir(cfg)?;
        let loaded: Vec<(usize, FeatureMatrix, FeatureSidecar)> = cfg
            .candidate_ranks()
            .into_iter()
            .map(|r| load_features(&dir, r).map(|(m, s)| (r, m, s)))
            .collect::<Result<_>>()?;
        let first = &loaded[0].2;
        if loaded.iter().any(|(_, _, s)| s.labels != first.labels) {
            return Err(Error::InvalidInput(
                "feature files disagree on labels; re-run extract".into(),
            ));
        }
        let candidates: Vec<RankFeatures<'_>> = loaded
            .iter()
            .map(|(rank, m, _)| RankFeatures {
                rank: *rank,
                features: m,
            })
            .collect();
        let cv = CvConfig {
            outer_k: cfg.outer_k,
            inner_k: cfg.inner_k,
            seed: cfg.seed,
            forest: cfg.forest(),
        };
        let report = run_nested_cv(&candidates, &first.labels, first.classes.len(), &cv)?;
        for (fold, cm) in report.test_confusion.iter().enumerate() {
            write_text(&dir.join(cm_file(fold + 1)), &cm.to_csv())?;
        }
        log::info!(
            "mean outer test accuracy {:.4} (std {:.4})",
            report.outer_mean.test.accuracy,
            report.outer_std.test.accuracy
        );
        write_json(
            &dir.join(REPORT),
            &EvaluationReport {
                config: cfg.echo(),
                classes: &first.classes,
                samples: first.rows,
                cv: &report,
                annotation: annotation(cfg),
            },
        )
    })
}

#[derive(Serialize)]
struct AblationFile<'a> {
    config: ConfigEcho,
    ablation: &'a tensorforest::eval::AblationReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotation: Option<Annotation>,
}

pub fn cmd_ablate(cfg: &RunConfig) -> Result<()> {
    timed("ablate", || {
        let dir = output_dir(cfg)?;
        let (m, sidecar) = load_features(&dir, cfg.parafac_rank)?;
        let variants = AblationVariants::from_blocks(&m.parafac_block(), &m.spatial_block())?;
        let report = run_ablation(
            &variants,
            &sidecar.labels,
            sidecar.classes.len(),
            cfg.ablation_folds,
            cfg.seed,
            &cfg.forest(),
        )?;
        write_json(
            &dir.join(ABLATION),
            &AblationFile {
                config: cfg.echo(),
                ablation: &report,
                annotation: annotation(cfg),
            },
        )
    })
}

#[derive(Serialize)]
struct FlopsFile {
    #[serde(flatten)]
    report: tensorforest::flops::FlopsReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    annotation: Option<Annotation>,
}

/// Costs of running the configured pipeline over the ingested samples. Trees
/// are assumed to reach the balanced depth of one outer training fold.
pub fn cmd_flops(cfg: &RunConfig) -> Result<()> {
    timed("flops", || {
        let dir = output_dir(cfg)?;
        let n = load_manifest(cfg)?.n1();
        let n_train = n - n.div_ceil(cfg.outer_k);
        let forest = cfg.forest();
        let spatial = cfg.spatial_spec();
        let report = cost_pipeline(
            n,
            Some(&cfg.parafac_spec(cfg.parafac_rank)),
            cfg.embeddings_file.is_none().then_some(&spatial),
            &forest,
            expected_depth(n_train, &forest),
            default_references(),
        );
        write_json(
            &dir.join(FLOPS),
            &FlopsFile {
                report,
                annotation: annotation(cfg),
            },
        )
    })
}

pub fn cmd_all(cfg: &RunConfig) -> Result<()> {
    cmd_ingest(cfg)?;
    cmd_extract(cfg)?;
    cmd_evaluate(cfg)?;
    cmd_ablate(cfg)?;
    cmd_flops(cfg)
}

pub fn cmd_synth(root: &Path, opts: &SynthOptions) -> Result<SynthSummary> {
    timed("synth", || generate(root, opts))
}
