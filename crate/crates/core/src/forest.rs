//! Class-weighted random forest on weighted Gini impurity.
//!
//! Sample weights scale both the impurity sums and the leaf class
//! distributions. Bootstrap draws are uniform over rows; weights never change
//! the draw probability.

use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::seed::rng_from;

pub const DEPTH_CAP: usize = 64;
const MIN_GAIN: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForestOptions {
    pub tree_count: usize,
    /// `None` means unlimited, which is still capped at [`DEPTH_CAP`].
    pub max_depth: Option<usize>,
    pub min_samples_split: usize,
    /// `None` means `floor(sqrt(feature count))`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
    pub seed: u64,
}

impl Default for ForestOptions {
    fn default() -> Self {
        ForestOptions {
            tree_count: 100,
            max_depth: None,
            min_samples_split: 2,
            features_per_split: None,
            bootstrap: true,
            seed: 0,
        }
    }
}

impl ForestOptions {
    fn depth_limit(&self) -> usize {
        self.max_depth.unwrap_or(DEPTH_CAP).min(DEPTH_CAP)
    }

    pub fn split_candidates(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().floor() as usize)
            .clamp(1, n_features.max(1))
    }

    pub fn validate(&self) -> Result<()> {
        if self.tree_count == 0 {
            return Err(Error::config("trees", "tree count must be at least 1"));
        }
        if self.features_per_split == Some(0) {
            return Err(Error::config("features_per_split", "must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    /// Values `<= threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        proba: Vec<f64>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecisionTree {
    pub nodes: Vec<Node>,
}

impl DecisionTree {
    fn leaf_for(&self, x: &[f32]) -> &[f64] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] as f64 <= *threshold {
                        *left
                    } else {
                        *right
                    }
                }
                Node::Leaf { proba } => return proba,
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub trees: Vec<DecisionTree>,
    pub n_classes: usize,
    pub n_features: usize,
}

struct TrainingView<'a> {
    x: &'a FeatureMatrix,
    y: &'a [usize],
    w: &'a [f64],
    k: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

impl SplitChoice {
    fn beats(&self, other: &SplitChoice) -> bool {
        self.gain > other.gain
            || (self.gain == other.gain
                && (self.feature < other.feature
                    || (self.feature == other.feature && self.threshold < other.threshold)))
    }
}

fn gini(class_w: &[f64], total: f64) -> f64 {
    1.0 - class_w
        .iter()
        .map(|&c| (c / total) * (c / total))
        .sum::<f64>()
}

impl TrainingView<'_> {
    fn class_weights(&self, samples: &[usize]) -> (Vec<f64>, f64) {
        let mut cw = vec![0.0; self.k];
        for &i in samples {
            cw[self.y[i]] += self.w[i];
        }
        let total = cw.iter().sum();
        (cw, total)
    }

    /// Best weighted-Gini threshold on one feature, `None` if the feature is
    /// constant over the node.
    fn best_threshold(
        &self,
        feature: usize,
        samples: &[usize],
        parent: (&[f64], f64),
        scratch: &mut Vec<(f32, usize)>,
    ) -> Option<SplitChoice> {
        scratch.clear();
        scratch.extend(samples.iter().map(|&i| (self.x.get(i, feature), i)));
        scratch.sort_by(|a, b| a.0.total_cmp(&b.0));
        if scratch.first()?.0 == scratch.last()?.0 {
            return None;
        }
        let (parent_cw, total) = parent;
        let parent_gini = gini(parent_cw, total);
        let mut left = vec![0.0; self.k];
        let mut right = parent_cw.to_vec();
        let mut left_total = 0.0;
        let mut best: Option<SplitChoice> = None;
        for pos in 0..scratch.len() - 1 {
            let (v, i) = scratch[pos];
            let wi = self.w[i];
            left[self.y[i]] += wi;
            right[self.y[i]] -= wi;
            left_total += wi;
            let next = scratch[pos + 1].0;
            if v == next {
                continue;
            }
            let right_total = total - left_total;
            let gain = parent_gini
                - (left_total / total) * gini(&left, left_total)
                - (right_total / total) * gini(&right, right_total);
            let cand = SplitChoice {
                feature,
                threshold: (v as f64 + next as f64) / 2.0,
                gain,
            };
            if best.is_none_or(|b| cand.gain > b.gain) {
                best = Some(cand);
            }
        }
        best
    }

    fn best_split(
        &self,
        samples: &[usize],
        candidates: usize,
        rng: &mut ChaCha8Rng,
        scratch: &mut Vec<(f32, usize)>,
    ) -> Option<SplitChoice> {
        let (cw, total) = self.class_weights(samples);
        let mut order: Vec<usize> = (0..self.x.cols()).collect();
        order.shuffle(rng);
        let mut examined = 0;
        let mut best: Option<SplitChoice> = None;
        for f in order {
            if examined == candidates {
                break;
            }
            let Some(cand) = self.best_threshold(f, samples, (&cw, total), scratch) else {
                continue;
            };
            examined += 1;
            if best.is_none_or(|b| cand.beats(&b)) {
                best = Some(cand);
            }
        }
        best.filter(|b| b.gain > MIN_GAIN)
    }

    fn grow(
        &self,
        samples: Vec<usize>,
        opts: &ForestOptions,
        rng: &mut ChaCha8Rng,
    ) -> DecisionTree {
        let candidates = opts.split_candidates(self.x.cols());
        let depth_limit = opts.depth_limit();
        let mut nodes = vec![Node::Leaf { proba: Vec::new() }];
        let mut stack = vec![(0usize, samples, 0usize)];
        let mut scratch = Vec::new();
        while let Some((id, samples, depth)) = stack.pop() {
            let (cw, total) = self.class_weights(&samples);
            let pure = cw.iter().filter(|&&c| c > 0.0).count() <= 1;
            let split = if pure || depth >= depth_limit || samples.len() < opts.min_samples_split {
                None
            } else {
                self.best_split(&samples, candidates, rng, &mut scratch)
            };
            match split {
                None => {
                    nodes[id] = Node::Leaf {
                        proba: cw.iter().map(|c| c / total).collect(),
                    };
                }
                Some(s) => {
                    let (l, r): (Vec<usize>, Vec<usize>) = samples
                        .iter()
                        .partition(|&&i| self.x.get(i, s.feature) as f64 <= s.threshold);
                    let left = nodes.len();
                    nodes.push(Node::Leaf { proba: Vec::new() });
                    nodes.push(Node::Leaf { proba: Vec::new() });
                    nodes[id] = Node::Split {
                        feature: s.feature,
                        threshold: s.threshold,
                        left,
                        right: left + 1,
                    };
                    // right pushed first so the left subtree is grown first
                    stack.push((left + 1, r, depth + 1));
                    stack.push((left, l, depth + 1));
                }
            }
        }
        DecisionTree { nodes }
    }
}

/// Train `opts.tree_count` trees, each on its own seeded bootstrap.
pub fn train_forest(
    x: &FeatureMatrix,
    y: &[usize],
    sample_weights: &[f64],
    n_classes: usize,
    opts: &ForestOptions,
) -> Result<Forest> {
    opts.validate()?;
    if x.rows() == 0 || x.cols() == 0 {
        return Err(Error::EmptyTrainingSet);
    }
    if y.len() != x.rows() || sample_weights.len() != x.rows() {
        return Err(Error::ShapeMismatch(format!(
            "{} rows, {} labels, {} weights",
            x.rows(),
            y.len(),
            sample_weights.len()
        )));
    }
    if let Some(&label) = y.iter().find(|&&l| l >= n_classes) {
        return Err(Error::InvalidLabel {
            label,
            classes: n_classes,
        });
    }
    if x.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite feature value".into()));
    }
    if sample_weights.iter().any(|&w| !(w > 0.0) || !w.is_finite()) {
        return Err(Error::InvalidInput(
            "sample weights must be positive".into(),
        ));
    }
    let view = TrainingView {
        x,
        y,
        w: sample_weights,
        k: n_classes,
    };
    let n = x.rows();
    let trees = (0..opts.tree_count)
        .into_par_iter()
        .map(|t| {
            let mut rng = rng_from(opts.seed, &[t as u64]);
            let samples = if opts.bootstrap {
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            view.grow(samples, opts, &mut rng)
        })
        .collect();
    Ok(Forest {
        trees,
        n_classes,
        n_features: x.cols(),
    })
}

impl Forest {
    pub fn predict_proba(&self, x: &[f32]) -> Result<Vec<f64>> {
        if x.len() != self.n_features {
            return Err(Error::ShapeMismatch(format!(
                "forest expects {} features, got {}",
                self.n_features,
                x.len()
            )));
        }
        let mut acc = vec![0.0; self.n_classes];
        for t in &self.trees {
            for (a, p) in acc.iter_mut().zip(t.leaf_for(x)) {
                *a += p;
            }
        }
        let n = self.trees.len() as f64;
        acc.iter_mut().for_each(|a| *a /= n);
        Ok(acc)
    }

    /// Argmax of the mean leaf distribution, lowest class id on ties.
    pub fn predict(&self, x: &[f32]) -> Result<usize> {
        Ok(argmax(&self.predict_proba(x)?))
    }

    pub fn predict_all(&self, x: &FeatureMatrix) -> Result<Vec<usize>> {
        (0..x.rows()).map(|i| self.predict(x.row(i))).collect()
    }

    /// Versioned line format:
    ///
    /// ```text
    /// tensorforest-forest 1
    /// classes <K> features <F> trees <T>
    /// tree <index> <node count>
    /// split <feature> <threshold f64 bits, hex> <left> <right>
    /// leaf <p_0 bits, hex> ... <p_{K-1} bits, hex>
    /// ```
    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "tensorforest-forest 1")?;
        writeln!(
            w,
            "classes {} features {} trees {}",
            self.n_classes,
            self.n_features,
            self.trees.len()
        )?;
        for (t, tree) in self.trees.iter().enumerate() {
            writeln!(w, "tree {t} {}", tree.nodes.len())?;
            for node in &tree.nodes {
                match node {
                    Node::Split {
                        feature,
                        threshold,
                        left,
                        right,
                    } => writeln!(
                        w,
                        "split {feature} {:016x} {left} {right}",
                        threshold.to_bits()
                    )?,
                    Node::Leaf { proba } => {
                        let bits: Vec<String> = proba
                            .iter()
                            .map(|p| format!("{:016x}", p.to_bits()))
                            .collect();
                        writeln!(w, "leaf {}", bits.join(" "))?
                    }
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: impl BufRead) -> Result<Forest> {
        let bad = |reason: String| Error::Format {
            what: "forest file",
            reason,
        };
        let mut lines = r.lines().map(|l| l.map_err(|e| bad(e.to_string())));
        let mut next = || {
            lines
                .next()
                .unwrap_or_else(|| Err(bad("unexpected end".into())))
        };
        if next()? != "tensorforest-forest 1" {
            return Err(bad("unsupported version line".into()));
        }
        let num = |s: Option<&str>| -> Result<usize> {
            s.and_then(|v| v.parse().ok())
                .ok_or_else(|| bad(format!("expected integer, got {s:?}")))
        };
        let bits = |s: Option<&str>| -> Result<f64> {
            s.and_then(|v| u64::from_str_radix(v, 16).ok())
                .map(f64::from_bits)
                .ok_or_else(|| bad(format!("expected hex float bits, got {s:?}")))
        };
        let header = next()?;
        let h: Vec<&str> = header.split_whitespace().collect();
        if h.len() != 6 || h[0] != "classes" || h[2] != "features" || h[4] != "trees" {
            return Err(bad(format!("bad header {header:?}")));
        }
        let (k, f, t) = (num(Some(h[1]))?, num(Some(h[3]))?, num(Some(h[5]))?);
        let mut trees = Vec::with_capacity(t);
        for ti in 0..t {
            let line = next()?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some("tree") || num(parts.next())? != ti {
                return Err(bad(format!("expected tree {ti}")));
            }
            let count = num(parts.next())?;
            let mut nodes = Vec::with_capacity(count);
            for _ in 0..count {
                let line = next()?;
                let mut p = line.split_whitespace();
                let node = match p.next() {
                    Some("split") => Node::Split {
                        feature: num(p.next())?,
                        threshold: bits(p.next())?,
                        left: num(p.next())?,
                        right: num(p.next())?,
                    },
                    Some("leaf") => Node::Leaf {
                        proba: p.map(|s| bits(Some(s))).collect::<Result<_>>()?,
                    },
                    other => return Err(bad(format!("unknown node kind {other:?}"))),
                };
                match &node {
                    Node::Split {
                        feature,
                        left,
                        right,
                        ..
                    } if *feature >= f || *left >= count || *right >= count => {
                        return Err(bad("split refers outside the tree".into()))
                    }
                    Node::Leaf { proba } if proba.len() != k => {
                        return Err(bad("leaf has wrong class count".into()))
                    }
                    _ => {}
                }
                nodes.push(node);
            }
            trees.push(DecisionTree { nodes });
        }
        Ok(Forest {
            trees,
            n_classes: k,
            n_features: f,
        })
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best
}
