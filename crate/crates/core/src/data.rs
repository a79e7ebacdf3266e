//! Dataset manifests, threshold augmentation plans, and prediction files.

use std::collections::HashMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "valid" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        })
    }
}

#[derive(Debug, Clone)]
pub struct ManifestRecord {
    pub split: Split,
    /// Path relative to the manifest file's directory.
    pub image_path: PathBuf,
    pub latex: String,
}

impl ManifestRecord {
    /// Identifier used in prediction and diagnostic files: the image file
    /// stem.
    pub fn id(&self) -> String {
        self.image_path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default()
    }
}

#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
}

impl DatasetManifest {
    pub fn resolve(&self, record: &ManifestRecord) -> PathBuf {
        self.root.join(&record.image_path)
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }
}

/// Reads and validates a tab-separated `split<TAB>image_path<TAB>latex`
/// manifest. Rejects malformed lines, unknown splits, missing image files,
/// duplicate (image, latex) pairs, and ambiguous image ids.
pub fn ingest(path: &Path) -> Result<DatasetManifest> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Manifest(format!("cannot read {}: {}", path.display(), e)))?;
    let root = path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."));
    let mut records = Vec::new();
    let mut seen_pairs: HashMap<(String, String), usize> = HashMap::new();
    let mut seen_ids: HashMap<String, usize> = HashMap::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(Error::Manifest(format!(
                "line {}: expected 3 tab-separated fields, got {}",
                line_no,
                fields.len()
            )));
        }
        let split = Split::parse(fields[0]).ok_or_else(|| {
            Error::Manifest(format!("line {}: unknown split {:?}", line_no, fields[0]))
        })?;
        let image_path = PathBuf::from(fields[1]);
        let latex = fields[2].to_string();
        if !root.join(&image_path).is_file() {
            return Err(Error::Manifest(format!(
                "line {}: image {} not found",
                line_no,
                root.join(&image_path).display()
            )));
        }
        let pair_key = (fields[1].to_string(), latex.clone());
        if let Some(first) = seen_pairs.insert(pair_key, line_no) {
            return Err(Error::Manifest(format!(
                "duplicate (image, latex) pair on lines {} and {}",
                first, line_no
            )));
        }
        let record = ManifestRecord {
            split,
            image_path,
            latex,
        };
        if let Some(first) = seen_ids.insert(record.id(), line_no) {
            return Err(Error::Manifest(format!(
                "ambiguous image id {:?} on lines {} and {}",
                record.id(),
                first,
                line_no
            )));
        }
        records.push(record);
    }
    if records.is_empty() {
        return Err(Error::Manifest("manifest has no records".into()));
    }
    Ok(DatasetManifest { records, root })
}

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\n",
            r.split,
            r.image_path.display(),
            r.latex
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}

/// Thresholds applied to training images; evaluation uses the single eval
/// threshold.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AugmentationPlan {
    pub thresholds: Vec<u8>,
    pub eval_threshold: u8,
}

impl Default for AugmentationPlan {
    fn default() -> Self {
        AugmentationPlan {
            thresholds: vec![160, 180, 200],
            eval_threshold: 160,
        }
    }
}

impl AugmentationPlan {
    pub fn validate(&self) -> Result<()> {
        if self.thresholds.is_empty() {
            return Err(Error::InvalidInput("augmentation needs >= 1 threshold".into()));
        }
        Ok(())
    }
}

/// One (training image, threshold) pair sharing the image's target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainSample {
    pub record_index: usize,
    pub threshold: u8,
}

/// Expands the train split: one sample per (image, threshold). Samples at
/// different thresholds are kept distinct even when their segmentations
/// coincide.
pub fn augment(manifest: &DatasetManifest, plan: &AugmentationPlan) -> Result<Vec<TrainSample>> {
    plan.validate()?;
    let mut out = Vec::new();
    for (i, r) in manifest.records.iter().enumerate() {
        if r.split != Split::Train {
            continue;
        }
        for &threshold in &plan.thresholds {
            out.push(TrainSample {
                record_index: i,
                threshold,
            });
        }
    }
    Ok(out)
}

/// Writes `image_id<TAB>latex` lines.
pub fn write_predictions(path: &Path, predictions: &[(String, String)]) -> Result<()> {
    let mut out = String::new();
    for (id, latex) in predictions {
        out.push_str(&format!("{}\t{}\n", id, latex));
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<(String, String)>> {
    let text = std::fs::read_to_string(path)?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        match line.split_once('\t') {
            Some((id, latex)) => out.push((id.to_string(), latex.to_string())),
            None => {
                return Err(Error::Manifest(format!(
                    "predictions line {}: missing tab separator",
                    idx + 1
                )))
            }
        }
    }
    Ok(out)
}
