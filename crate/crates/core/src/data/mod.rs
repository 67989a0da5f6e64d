//! Feature files, dataset manifests, segment resampling and the synthetic
//! planted-anomaly generator.

mod features;
mod synth;

pub use features::{
    decode_features, decode_frame_labels, encode_features, read_feature_file, read_frame_labels,
    write_feature_file, write_frame_labels, FEATURE_MAGIC, FEATURE_VERSION,
};
pub use synth::{
    generate_synthetic, synthesize_video, SynthConfig, SynthOutput, SynthPrior, SynthVideo,
};

use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Frames covered by one snippet.
pub const FRAMES_PER_SNIPPET: usize = 16;

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub frame_labels_path: Option<PathBuf>,
}

/// A JSON-lines list of videos. Relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Manifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root, path)
    }

    /// Parses manifest text; `source` only labels diagnostics.
    pub fn parse(text: &str, root: PathBuf, source: &Path) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |message: String| Error::Manifest {
                path: source.to_path_buf(),
                line: i + 1,
                message,
            };
            let entry: ManifestEntry =
                serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
            if entry.label > 1 {
                return Err(err(format!("label {} is not 0 or 1", entry.label)));
            }
            entries.push(entry);
        }
        Ok(Self { root, entries })
    }

    pub fn to_jsonl(&self) -> String {
        self.entries
            .iter()
            .map(|e| serde_json::to_string(e).expect("manifest entries always serialize") + "\n")
            .collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    pub fn features_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.resolve(&entry.path)
    }

    pub fn frame_labels_path(&self, entry: &ManifestEntry) -> Option<PathBuf> {
        entry.frame_labels_path.as_deref().map(|p| self.resolve(p))
    }

    pub fn count_label(&self, label: u8) -> usize {
        self.entries.iter().filter(|e| e.label == label).count()
    }
}

/// How snippets within a segment are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Source row ranges for resampling `t0` snippets into `t` segments.
///
/// Range `i` is `⌊i·t0/t⌋ .. ⌊(i+1)·t0/t⌋`; an empty range becomes the
/// single row at its start, clamped to the last row.
pub fn segment_ranges(t0: usize, t: usize) -> Vec<Range<usize>> {
    (0..t)
        .map(|i| {
            let lo = i * t0 / t;
            let hi = (i + 1) * t0 / t;
            if hi > lo {
                lo..hi
            } else {
                let r = lo.min(t0 - 1);
                r..r + 1
            }
        })
        .collect()
}

/// Resamples a `[T0, D]` sequence to `[t, D]` by pooling contiguous ranges.
pub fn resample_segments<S: Scalar>(
    x: &Tensor<S>,
    t: usize,
    pooling: Pooling,
) -> Result<Tensor<S>> {
    let (t0, d) = x.dims2()?;
    if t0 == 0 || t == 0 {
        return Err(Error::shape(format!(
            "cannot resample {t0} snippets into {t} segments"
        )));
    }
    if t0 == t {
        return Ok(x.clone());
    }
    let mut out = Vec::with_capacity(t * d);
    for r in segment_ranges(t0, t) {
        let n = S::from_usize(r.len()).unwrap();
        for c in 0..d {
            let vals = r.clone().map(|j| x.data()[j * d + c]);
            out.push(match pooling {
                Pooling::Mean => vals.fold(S::zero(), |a, b| a + b) / n,
                Pooling::Max => vals.fold(S::neg_infinity(), S::max),
            });
        }
    }
    Tensor::new(vec![t, d], out)
}

/// A video loaded from a manifest.
#[derive(Clone, Debug)]
pub struct Video {
    pub path: PathBuf,
    pub label: u8,
    pub features: Tensor<f32>,
    pub frame_labels: Option<Vec<u8>>,
}

/// Reads every video of a manifest; frame labels are read when listed.
pub fn load_videos(manifest: &Manifest) -> Result<Vec<Video>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let path = manifest.features_path(e);
            let features = read_feature_file(&path)?;
            let frame_labels = manifest
                .frame_labels_path(e)
                .map(read_frame_labels)
                .transpose()?;
            Ok(Video {
                path,
                label: e.label,
                features,
                frame_labels,
            })
        })
        .collect()
}
