//! Confusion matrices, classification metrics, nested stratified
//! cross-validation and the branch ablation.
//!
//! Every training step goes through [`fit_and_score`], which oversamples and
//! standardizes using training indices only and refuses to proceed if an
//! evaluation index shows up in the training multiset.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{check_disjoint, class_weights, oversample, stratified_kfold};
use crate::error::{Error, Result};
use crate::features::{concat_blocks, FeatureMatrix, Standardizer};
use crate::forest::{train_forest, ForestOptions};
use crate::seed::derive_seed;

/// Entry `(i, j)` counts samples of true class `i` predicted as `j`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(k: usize) -> Self {
        ConfusionMatrix {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_rows(rows: &[&[u64]]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::ShapeMismatch(
                "confusion matrix must be square".into(),
            ));
        }
        Ok(ConfusionMatrix {
            k,
            counts: rows.concat(),
        })
    }

    pub fn classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, t: usize, p: usize) -> u64 {
        self.counts[t * self.k + p]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row_sum(&self, t: usize) -> u64 {
        (0..self.k).map(|p| self.get(t, p)).sum()
    }

    pub fn column_sum(&self, p: usize) -> u64 {
        (0..self.k).map(|t| self.get(t, p)).sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.get(i, i)).sum()
    }

    /// Comma-separated grid, one true class per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for t in 0..self.k {
            let row: Vec<String> = (0..self.k).map(|p| self.get(t, p).to_string()).collect();
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

pub fn confusion_matrix(y_true: &[usize], y_pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if y_true.len() != y_pred.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} true labels vs {} predictions",
            y_true.len(),
            y_pred.len()
        )));
    }
    let mut cm = ConfusionMatrix::zeros(k);
    for (&t, &p) in y_true.iter().zip(y_pred) {
        if let Some(&label) = [t, p].iter().find(|&&l| l >= k) {
            return Err(Error::InvalidLabel { label, classes: k });
        }
        cm.counts[t * k + p] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Averaged {
    #[serde(rename = "macro")]
    pub macro_avg: f64,
    pub weighted: f64,
}

/// Accuracy plus macro- and support-weighted precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub accuracy: f64,
    pub precision: Averaged,
    pub recall: Averaged,
    pub f1: Averaged,
}

impl MetricsRecord {
    fn fields(&self) -> [f64; 7] {
        [
            self.accuracy,
            self.precision.macro_avg,
            self.precision.weighted,
            self.recall.macro_avg,
            self.recall.weighted,
            self.f1.macro_avg,
            self.f1.weighted,
        ]
    }

    fn from_fields(f: [f64; 7]) -> Self {
        MetricsRecord {
            accuracy: f[0],
            precision: Averaged {
                macro_avg: f[1],
                weighted: f[2],
            },
            recall: Averaged {
                macro_avg: f[3],
                weighted: f[4],
            },
            f1: Averaged {
                macro_avg: f[5],
                weighted: f[6],
            },
        }
    }
}

pub fn compute_metrics(cm: &ConfusionMatrix) -> Result<MetricsRecord> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyEvaluation);
    }
    let k = cm.classes();
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = cm.get(c, c);
        let precision = ratio(tp, cm.column_sum(c));
        let recall = ratio(tp, cm.row_sum(c));
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        per_class.push((precision, recall, f1, cm.row_sum(c) as f64));
    }
    let macro_of =
        |pick: fn(&(f64, f64, f64, f64)) -> f64| per_class.iter().map(pick).sum::<f64>() / k as f64;
    let weighted_of = |pick: fn(&(f64, f64, f64, f64)) -> f64| {
        per_class.iter().map(|c| pick(c) * c.3).sum::<f64>() / total as f64
    };
    Ok(MetricsRecord {
        accuracy: cm.trace() as f64 / total as f64,
        precision: Averaged {
            macro_avg: macro_of(|c| c.0),
            weighted: weighted_of(|c| c.0),
        },
        recall: Averaged {
            macro_avg: macro_of(|c| c.1),
            weighted: weighted_of(|c| c.1),
        },
        f1: Averaged {
            macro_avg: macro_of(|c| c.2),
            weighted: weighted_of(|c| c.2),
        },
    })
}

/// Population mean and standard deviation of each metric.
pub fn summarize(records: &[MetricsRecord]) -> (MetricsRecord, MetricsRecord) {
    let n = records.len().max(1) as f64;
    let mut mean = [0.0; 7];
    for r in records {
        for (m, v) in mean.iter_mut().zip(r.fields()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 7];
    for r in records {
        for ((s, v), m) in var.iter_mut().zip(r.fields()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.map(|s| (s / n).sqrt());
    (
        MetricsRecord::from_fields(mean),
        MetricsRecord::from_fields(std),
    )
}

/// Population mean and standard deviation of a scalar series.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Confusion matrices of one train/evaluate round.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitOutcome {
    pub train: ConfusionMatrix,
    pub eval: ConfusionMatrix,
}

/// Oversample the training indices, fit the standardizer on the original
/// training rows, train a class-weighted forest and score both partitions.
pub fn fit_and_score(
    features: &FeatureMatrix,
    labels: &[usize],
    k: usize,
    train: &[usize],
    eval: &[usize],
    forest: &ForestOptions,
    seed: u64,
) -> Result<SplitOutcome> {
    let resampled = oversample(train, labels, derive_seed(seed, &[0]));
    check_disjoint(&resampled, eval)?;
    let train_labels: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
    let weights = class_weights(&train_labels, k)?;

    let standardizer = Standardizer::fit(&features.select_rows(train))?;
    let x = standardizer.transform(&features.select_rows(&resampled))?;
    let y: Vec<usize> = resampled.iter().map(|&i| labels[i]).collect();
    let w: Vec<f64> = y.iter().map(|&c| weights[c]).collect();
    let opts = ForestOptions {
        seed: derive_seed(forest.seed, &[seed]),
        ..*forest
    };
    let model = train_forest(&x, &y, &w, k, &opts)?;

    let score = |idx: &[usize]| -> Result<ConfusionMatrix> {
        let pred = model.predict_all(&standardizer.transform(&features.select_rows(idx))?)?;
        let truth: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        confusion_matrix(&truth, &pred, k)
    };
    Ok(SplitOutcome {
        train: score(train)?,
        eval: score(eval)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub outer_k: usize,
    pub inner_k: usize,
    pub seed: u64,
    pub forest: ForestOptions,
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_k < 2 {
            return Err(Error::config(
                "outer_k",
                format!("must be >= 2, got {}", self.outer_k),
            ));
        }
        if self.inner_k < 2 {
            return Err(Error::config(
                "inner_k",
                format!("must be >= 2, got {}", self.inner_k),
            ));
        }
        self.forest.validate()
    }
}

/// Feature matrix for one PARAFAC rank.
#[derive(Debug, Clone, Copy)]
pub struct RankFeatures<'a> {
    pub rank: usize,
    pub features: &'a FeatureMatrix,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainValidation {
    pub train: MetricsRecord,
    pub validation: MetricsRecord,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainTest {
    pub train: MetricsRecord,
    pub test: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerRow {
    pub outer_fold: usize,
    pub inner_fold: usize,
    pub rank: usize,
    pub train: MetricsRecord,
    pub validation: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerFoldAggregate {
    pub inner_fold: usize,
    pub train: MetricsRecord,
    pub validation: MetricsRecord,
}

/// Inner-loop results of one candidate rank, aggregated over outer folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InnerSummary {
    pub rank: usize,
    pub by_inner_fold: Vec<InnerFoldAggregate>,
    pub mean: TrainValidation,
    pub std: TrainValidation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OuterRow {
    pub fold: usize,
    pub rank: usize,
    pub train: MetricsRecord,
    pub test: MetricsRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub outer_k: usize,
    pub inner_k: usize,
    pub seed: u64,
    pub candidate_ranks: Vec<usize>,
    pub rank_selection: bool,
    pub inner: Vec<InnerRow>,
    pub inner_summary: Vec<InnerSummary>,
    pub outer: Vec<OuterRow>,
    pub outer_mean: TrainTest,
    pub outer_std: TrainTest,
    /// Outer test confusion matrix of each fold.
    #[serde(skip)]
    pub test_confusion: Vec<ConfusionMatrix>,
}

struct OuterResult {
    inner: Vec<InnerRow>,
    outer: OuterRow,
    confusion: ConfusionMatrix,
}

/// Nested stratified cross-validation. With more than one candidate the
/// inner loop selects, per outer fold, the rank with the best mean inner
/// validation macro F1 (first listed wins ties); with one candidate the inner
/// loop only estimates.
pub fn run_nested_cv(
    candidates: &[RankFeatures<'_>],
    labels: &[usize],
    k: usize,
    cfg: &CvConfig,
) -> Result<FoldReport> {
    cfg.validate()?;
    if candidates.is_empty() {
        return Err(Error::config("parafac_rank", "no feature set to evaluate"));
    }
    if let Some(c) = candidates
        .iter()
        .find(|c| c.features.rows() != labels.len())
    {
        return Err(Error::ShapeMismatch(format!(
            "rank {} features have {} rows for {} labels",
            c.rank,
            c.features.rows(),
            labels.len()
        )));
    }
    let outer = stratified_kfold(labels, cfg.outer_k, derive_seed(cfg.seed, &[1]))?;

    let results: Vec<OuterResult> = (0..cfg.outer_k)
        .into_par_iter()
        .map(|o| -> Result<OuterResult> {
            let outer_train = outer.train_indices(o);
            let test = outer.test_indices(o);
            let train_labels: Vec<usize> = outer_train.iter().map(|&i| labels[i]).collect();
            let inner = stratified_kfold(
                &train_labels,
                cfg.inner_k,
                derive_seed(cfg.seed, &[2, o as u64]),
            )?;
            let mut rows = Vec::new();
            let mut best: Option<(f64, usize)> = None;
            for (ci, cand) in candidates.iter().enumerate() {
                let mut f1s = Vec::with_capacity(cfg.inner_k);
                for j in 0..cfg.inner_k {
                    let tr: Vec<usize> = inner
                        .train_indices(j)
                        .iter()
                        .map(|&p| outer_train[p])
                        .collect();
                    let va: Vec<usize> = inner
                        .test_indices(j)
                        .iter()
                        .map(|&p| outer_train[p])
                        .collect();
                    let out = fit_and_score(
                        cand.features,
                        labels,
                        k,
                        &tr,
                        &va,
                        &cfg.forest,
                        derive_seed(cfg.seed, &[3, o as u64, j as u64]),
                    )?;
                    let validation = compute_metrics(&out.eval)?;
                    f1s.push(validation.f1.macro_avg);
                    rows.push(InnerRow {
                        outer_fold: o + 1,
                        inner_fold: j + 1,
                        rank: cand.rank,
                        train: compute_metrics(&out.train)?,
                        validation,
                    });
                }
                let score = mean_std(&f1s).0;
                if best.is_none_or(|(b, _)| score > b) {
                    best = Some((score, ci));
                }
            }
            let chosen = &candidates[best.expect("at least one candidate").1];
            let out = fit_and_score(
                chosen.features,
                labels,
                k,
                &outer_train,
                &test,
                &cfg.forest,
                derive_seed(cfg.seed, &[4, o as u64]),
            )?;
            Ok(OuterResult {
                inner: rows,
                outer: OuterRow {
                    fold: o + 1,
                    rank: chosen.rank,
                    train: compute_metrics(&out.train)?,
                    test: compute_metrics(&out.eval)?,
                },
                confusion: out.eval,
            })
        })
        .collect::<Result<_>>()?;

    let inner: Vec<InnerRow> = results.iter().flat_map(|r| r.inner.clone()).collect();
    let inner_summary = candidates
        .iter()
        .map(|c| summarize_inner(&inner, c.rank, cfg.inner_k))
        .collect();
    let outer_rows: Vec<OuterRow> = results.iter().map(|r| r.outer.clone()).collect();
    let (train_mean, train_std) =
        summarize(&outer_rows.iter().map(|r| r.train).collect::<Vec<_>>());
    let (test_mean, test_std) = summarize(&outer_rows.iter().map(|r| r.test).collect::<Vec<_>>());
    Ok(FoldReport {
        outer_k: cfg.outer_k,
        inner_k: cfg.inner_k,
        seed: cfg.seed,
        candidate_ranks: candidates.iter().map(|c| c.rank).collect(),
        rank_selection: candidates.len() > 1,
        inner,
        inner_summary,
        outer: outer_rows,
        outer_mean: TrainTest {
            train: train_mean,
            test: test_mean,
        },
        outer_std: TrainTest {
            train: train_std,
            test: test_std,
        },
        test_confusion: results.into_iter().map(|r| r.confusion).collect(),
    })
}

fn summarize_inner(rows: &[InnerRow], rank: usize, inner_k: usize) -> InnerSummary {
    let of_rank: Vec<&InnerRow> = rows.iter().filter(|r| r.rank == rank).collect();
    let by_inner_fold = (1..=inner_k)
        .map(|j| {
            let sel: Vec<&&InnerRow> = of_rank.iter().filter(|r| r.inner_fold == j).collect();
            InnerFoldAggregate {
                inner_fold: j,
                train: summarize(&sel.iter().map(|r| r.train).collect::<Vec<_>>()).0,
                validation: summarize(&sel.iter().map(|r| r.validation).collect::<Vec<_>>()).0,
            }
        })
        .collect();
    let (tm, ts) = summarize(&of_rank.iter().map(|r| r.train).collect::<Vec<_>>());
    let (vm, vs) = summarize(&of_rank.iter().map(|r| r.validation).collect::<Vec<_>>());
    InnerSummary {
        rank,
        by_inner_fold,
        mean: TrainValidation {
            train: tm,
            validation: vm,
        },
        std: TrainValidation {
            train: ts,
            validation: vs,
        },
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantScores {
    pub mean_f1: f64,
    pub std_f1: f64,
    pub per_fold: Vec<f64>,
}

impl VariantScores {
    fn from_folds(per_fold: Vec<f64>) -> Self {
        let (mean_f1, std_f1) = mean_std(&per_fold);
        VariantScores {
            mean_f1,
            std_f1,
            per_fold,
        }
    }
}

/// Macro F1 of each branch variant over the same stratified folds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub folds: usize,
    pub seed: u64,
    #[serde(rename = "CNN-only")]
    pub cnn_only: VariantScores,
    #[serde(rename = "PARAFAC-only")]
    pub parafac_only: VariantScores,
    #[serde(rename = "Fused")]
    pub fused: VariantScores,
}

/// Raw (unstandardized) matrices of the three ablation variants.
#[derive(Debug, Clone)]
pub struct AblationVariants {
    pub cnn_only: FeatureMatrix,
    pub parafac_only: FeatureMatrix,
    pub fused: FeatureMatrix,
}

impl AblationVariants {
    pub fn from_blocks(parafac: &FeatureMatrix, spatial: &FeatureMatrix) -> Result<Self> {
        Ok(AblationVariants {
            cnn_only: concat_blocks(None, Some(spatial))?,
            parafac_only: concat_blocks(Some(parafac), None)?,
            fused: concat_blocks(Some(parafac), Some(spatial))?,
        })
    }
}

/// Single-level stratified CV; every variant sees the same folds, the same
/// oversampling draws and the same forest seeds.
pub fn run_ablation(
    variants: &AblationVariants,
    labels: &[usize],
    k: usize,
    folds: usize,
    seed: u64,
    forest: &ForestOptions,
) -> Result<AblationReport> {
    if folds < 2 {
        return Err(Error::config(
            "ablation_folds",
            format!("must be >= 2, got {folds}"),
        ));
    }
    forest.validate()?;
    let assignment = stratified_kfold(labels, folds, derive_seed(seed, &[5]))?;
    let score = |m: &FeatureMatrix| -> Result<Vec<f64>> {
        (0..folds)
            .into_par_iter()
            .map(|f| {
                let out = fit_and_score(
                    m,
                    labels,
                    k,
                    &assignment.train_indices(f),
                    &assignment.test_indices(f),
                    forest,
                    derive_seed(seed, &[6, f as u64]),
                )?;
                Ok(compute_metrics(&out.eval)?.f1.macro_avg)
            })
            .collect()
    };
    Ok(AblationReport {
        folds,
        seed,
        cnn_only: VariantScores::from_folds(score(&variants.cnn_only)?),
        parafac_only: VariantScores::from_folds(score(&variants.parafac_only)?),
        fused: VariantScores::from_folds(score(&variants.fused)?),
    })
}
