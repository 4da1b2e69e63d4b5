//! Dataset ingestion, deduplication and the fold-local resampling protocol.
//!
//! The on-disk manifest is line-delimited JSON: one header object carrying
//! the class list and counts, followed by one object per file in
//! lexicographic (class, path) order.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{self, GrayImage64, RejectionReason};
use crate::seed::rng_from;

/// Folder names in lexicographic order; the position is the class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassMap {
    names: Vec<String>,
}

impl ClassMap {
    pub fn new(mut names: Vec<String>) -> Result<Self> {
        names.sort();
        let before = names.len();
        names.dedup();
        if names.len() != before {
            return Err(Error::InvalidInput("duplicate class folder names".into()));
        }
        Ok(ClassMap { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.names.binary_search_by(|n| n.as_str().cmp(name)).ok()
    }
}

/// One class per immediate subdirectory of `root`.
pub fn scan_classes(root: &Path) -> Result<ClassMap> {
    let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut names = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root, e))?;
        let ft = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if ft.is_dir() {
            names.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if names.is_empty() {
        return Err(Error::NoClassesFound(root.to_path_buf()));
    }
    ClassMap::new(names)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    /// Path relative to the dataset root, `/`-separated.
    pub path: String,
    pub class_id: usize,
    pub accepted: bool,
    pub rejection: Option<RejectionReason>,
    pub duplicate_of: Option<usize>,
}

impl ManifestRecord {
    /// Accepted and not a duplicate.
    pub fn is_sample(&self) -> bool {
        self.accepted && self.duplicate_of.is_none()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub classes: ClassMap,
    pub records: Vec<ManifestRecord>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestHeader {
    classes: Vec<String>,
    k: usize,
    n0: usize,
    n1: usize,
    raw_counts: Vec<usize>,
    clean_counts: Vec<usize>,
}

impl DatasetManifest {
    pub fn class_count(&self) -> usize {
        self.classes.len()
    }

    /// Raw file count.
    pub fn n0(&self) -> usize {
        self.records.len()
    }

    /// Clean, distinct image count.
    pub fn n1(&self) -> usize {
        self.records.iter().filter(|r| r.is_sample()).count()
    }

    pub fn raw_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count()];
        for r in &self.records {
            c[r.class_id] += 1;
        }
        c
    }

    pub fn clean_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.class_count()];
        for r in self.records.iter().filter(|r| r.is_sample()) {
            c[r.class_id] += 1;
        }
        c
    }

    /// Record indices of the clean samples, in manifest order.
    pub fn sample_indices(&self) -> Vec<usize> {
        (0..self.records.len())
            .filter(|&i| self.records[i].is_sample())
            .collect()
    }

    pub fn sample_labels(&self) -> Vec<usize> {
        self.records
            .iter()
            .filter(|r| r.is_sample())
            .map(|r| r.class_id)
            .collect()
    }

    fn header(&self) -> ManifestHeader {
        ManifestHeader {
            classes: self.classes.names().to_vec(),
            k: self.class_count(),
            n0: self.n0(),
            n1: self.n1(),
            raw_counts: self.raw_counts(),
            clean_counts: self.clean_counts(),
        }
    }

    pub fn write_jsonl(&self, w: &mut impl Write) -> std::io::Result<()> {
        serde_json::to_writer(&mut *w, &self.header())?;
        writeln!(w)?;
        for r in &self.records {
            serde_json::to_writer(&mut *w, r)?;
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_jsonl(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn read_jsonl(r: impl BufRead) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "manifest",
            reason,
        };
        let mut lines = r.lines();
        let header_line = lines
            .next()
            .ok_or_else(|| bad("missing header line".into()))?
            .map_err(|e| bad(e.to_string()))?;
        let header: ManifestHeader =
            serde_json::from_str(&header_line).map_err(|e| bad(format!("header: {e}")))?;
        let classes = ClassMap::new(header.classes.clone())?;
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            let line = line.map_err(|e| bad(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord =
                serde_json::from_str(&line).map_err(|e| bad(format!("record {}: {e}", n + 1)))?;
            if rec.class_id >= classes.len() {
                return Err(bad(format!("record {} has class {}", n + 1, rec.class_id)));
            }
            records.push(rec);
        }
        let m = DatasetManifest { classes, records };
        if m.header() != header {
            return Err(bad("header counts disagree with records".into()));
        }
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_jsonl(BufReader::new(file))
    }
}

/// Manifest plus the cleaned image of every accepted record.
#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub images: Vec<Option<GrayImage64>>,
}

impl Ingested {
    /// Cleaned images of the samples, in manifest order.
    pub fn sample_images(&self) -> Vec<&GrayImage64> {
        self.manifest
            .sample_indices()
            .into_iter()
            .map(|i| {
                self.images[i]
                    .as_ref()
                    .expect("accepted records carry an image")
            })
            .collect()
    }
}

fn class_files(root: &Path, class: &str) -> Result<Vec<PathBuf>> {
    let dir = root.join(class);
    let mut files = Vec::new();
    for entry in walkdir::WalkDir::new(&dir).sort_by_file_name() {
        let entry = entry.map_err(|e| {
            let path = e.path().unwrap_or(&dir).to_path_buf();
            Error::io(path, e.into())
        })?;
        if entry.file_type().is_file() {
            files.push(entry.into_path());
        }
    }
    Ok(files)
}

fn relative(root: &Path, path: &Path) -> String {
    path.strip_prefix(root)
        .unwrap_or(path)
        .components()
        .map(|c| c.as_os_str().to_string_lossy())
        .collect::<Vec<_>>()
        .join("/")
}

/// Preprocess every regular file under each class folder. Records are in
/// (class id, file path) order regardless of processing order.
pub fn build_manifest(root: &Path, classes: &ClassMap) -> Result<Ingested> {
    let mut entries = Vec::new();
    for (class_id, name) in classes.names().iter().enumerate() {
        for path in class_files(root, name)? {
            entries.push((class_id, path));
        }
    }
    let cleaned: Vec<std::result::Result<GrayImage64, RejectionReason>> = entries
        .par_iter()
        .map(|(_, path)| preprocess::preprocess_file(path))
        .collect();
    let mut records = Vec::with_capacity(entries.len());
    let mut images = Vec::with_capacity(entries.len());
    for ((class_id, path), outcome) in entries.iter().zip(cleaned) {
        let (accepted, rejection, image) = match outcome {
            Ok(img) => (true, None, Some(img)),
            Err(reason) => (false, Some(reason), None),
        };
        records.push(ManifestRecord {
            path: relative(root, path),
            class_id: *class_id,
            accepted,
            rejection,
            duplicate_of: None,
        });
        images.push(image);
    }
    Ok(Ingested {
        manifest: DatasetManifest {
            classes: classes.clone(),
            records,
        },
        images,
    })
}

/// Mark exact duplicates (on the quantized 8-bit pixels). The lowest-index
/// record of each group survives, whatever its class.
pub fn dedup(
    manifest: &DatasetManifest,
    images: &[Option<GrayImage64>],
) -> Result<DatasetManifest> {
    if images.len() != manifest.records.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} images for {} records",
            images.len(),
            manifest.records.len()
        )));
    }
    let mut first_seen: HashMap<&[u8], usize> = HashMap::new();
    let mut out = manifest.clone();
    for (i, rec) in out.records.iter_mut().enumerate() {
        if !rec.accepted {
            continue;
        }
        let img = images[i]
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("accepted record {i} has no image")))?;
        match first_seen.get(img.as_bytes()) {
            Some(&first) if first != i => rec.duplicate_of = Some(first),
            _ => {
                first_seen.insert(img.as_bytes(), i);
            }
        }
    }
    Ok(out)
}

/// Scan, preprocess and deduplicate a class-per-folder tree.
pub fn ingest(root: &Path) -> Result<Ingested> {
    let classes = scan_classes(root)?;
    let built = build_manifest(root, &classes)?;
    let manifest = dedup(&built.manifest, &built.images)?;
    Ok(Ingested {
        manifest,
        images: built.images,
    })
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldAssignment {
    pub k: usize,
    pub seed: u64,
    /// Fold index of each sample.
    pub folds: Vec<usize>,
}

impl FoldAssignment {
    pub fn test_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] == fold)
            .collect()
    }

    pub fn train_indices(&self, fold: usize) -> Vec<usize> {
        (0..self.folds.len())
            .filter(|&i| self.folds[i] != fold)
            .collect()
    }
}

/// Shuffle each class with a seeded generator and deal its samples
/// round-robin over the folds. The dealing position carries over from one
/// class to the next so overall fold sizes stay balanced too.
pub fn stratified_kfold(labels: &[usize], k: usize, seed: u64) -> Result<FoldAssignment> {
    if k < 2 {
        return Err(Error::config(
            "k",
            format!("fold count must be >= 2, got {k}"),
        ));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        by_class.entry(y).or_default().push(i);
    }
    if let Some((&class, members)) = by_class.iter().find(|(_, m)| m.len() < k) {
        return Err(Error::StratificationImpossible {
            class,
            count: members.len(),
            k,
        });
    }
    let mut rng = rng_from(seed, &[]);
    let mut folds = vec![0; labels.len()];
    let mut next = 0;
    for members in by_class.values_mut() {
        members.shuffle(&mut rng);
        for &i in members.iter() {
            folds[i] = next;
            next = (next + 1) % k;
        }
    }
    Ok(FoldAssignment { k, seed, folds })
}

/// Random oversampling of a training index set: every class is topped up to
/// the largest class count by drawing with replacement from its own
/// training indices. The originals come first, in their given order.
pub fn oversample(train: &[usize], labels: &[usize], seed: u64) -> Vec<usize> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in train {
        by_class.entry(labels[i]).or_default().push(i);
    }
    let target = by_class.values().map(Vec::len).max().unwrap_or(0);
    let mut rng = rng_from(seed, &[]);
    let mut out = train.to_vec();
    for members in by_class.values() {
        for _ in members.len()..target {
            out.push(members[rng.random_range(0..members.len())]);
        }
    }
    out
}

/// Inverse-frequency class weights `N / (K · n_k)` over a training fold's
/// pre-oversampling labels.
pub fn class_weights(train_labels: &[usize], k: usize) -> Result<Vec<f64>> {
    let mut counts = vec![0usize; k];
    for &y in train_labels {
        if y >= k {
            return Err(Error::InvalidLabel {
                label: y,
                classes: k,
            });
        }
        counts[y] += 1;
    }
    if let Some(missing) = counts.iter().position(|&c| c == 0) {
        return Err(Error::MissingClass(missing));
    }
    let n = train_labels.len() as f64;
    Ok(counts.iter().map(|&c| n / (k as f64 * c as f64)).collect())
}

/// Error if any test index occurs in the training multiset.
pub fn check_disjoint(train: &[usize], test: &[usize]) -> Result<()> {
    let test: HashSet<usize> = test.iter().copied().collect();
    match train.iter().find(|i| test.contains(i)) {
        Some(&i) => Err(Error::Leakage(i)),
        None => Ok(()),
    }
}
