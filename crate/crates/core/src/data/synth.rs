//! Synthetic planted-anomaly videos.
//!
//! Normal snippets follow a per-channel AR(1) process around a channel mean
//! shared by the whole dataset. The dataset also fixes a few anomaly types,
//! each a signed mean shift on its own random channel subset. Abnormal videos
//! apply one type per segment inside one or more contiguous segments.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{write_feature_file, write_frame_labels, Manifest, ManifestEntry, FRAMES_PER_SNIPPET};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_normal: usize,
    pub n_abnormal: usize,
    /// Share of each class held out for the test manifest.
    pub test_fraction: f64,
    pub feature_dim: usize,
    /// Inclusive snippet-count range per video.
    pub snippets: [usize; 2],
    /// Inclusive number of anomaly segments per abnormal video.
    pub segments: [usize; 2],
    /// Inclusive anomaly segment length range, in snippets.
    pub segment_len: [usize; 2],
    /// Magnitude of the additive mean shift.
    pub shift: f64,
    /// Standard deviation of the stationary noise.
    pub noise: f64,
    /// AR(1) coefficient of the noise along time.
    pub smoothing: f64,
    /// Share of channels shifted inside an anomaly segment.
    pub channel_fraction: f64,
    /// Number of distinct anomaly patterns in the dataset.
    pub anomaly_types: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_normal: 125,
            n_abnormal: 125,
            test_fraction: 0.2,
            feature_dim: 32,
            snippets: [48, 160],
            segments: [1, 3],
            segment_len: [4, 24],
            shift: 2.5,
            noise: 1.0,
            smoothing: 0.7,
            channel_fraction: 0.25,
            anomaly_types: 8,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_normal == 0
            || self.n_abnormal == 0
            || self.feature_dim == 0
            || self.anomaly_types == 0
        {
            return bad(
                "video counts, feature dimension and anomaly types must be at least 1".into(),
            );
        }
        for (name, [lo, hi]) in [
            ("snippets", self.snippets),
            ("segments", self.segments),
            ("segment_len", self.segment_len),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!(
                    "{name} range [{lo}, {hi}] must be nonempty and start at 1 or more"
                ));
            }
        }
        if !(0.0..1.0).contains(&self.test_fraction) {
            return bad(format!(
                "test_fraction {} outside [0, 1)",
                self.test_fraction
            ));
        }
        if !(self.shift >= 0.0 && self.shift.is_finite())
            || !(self.noise > 0.0 && self.noise.is_finite())
        {
            return bad("shift must be non-negative and noise positive".into());
        }
        if !(0.0..1.0).contains(&self.smoothing) {
            return bad(format!("smoothing {} outside [0, 1)", self.smoothing));
        }
        if !(self.channel_fraction > 0.0 && self.channel_fraction <= 1.0) {
            return bad(format!(
                "channel_fraction {} outside (0, 1]",
                self.channel_fraction
            ));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// The dataset-wide channel mean of normal snippets.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut rng = self.rng(0);
        (0..self.feature_dim)
            .map(|_| rng.sample(StandardNormal))
            .collect()
    }

    /// Channel means plus the anomaly patterns, shared by every video.
    pub fn prior(&self) -> SynthPrior {
        let d = self.feature_dim;
        let n_ch = ((d as f64 * self.channel_fraction).round() as usize).clamp(1, d);
        let mut rng = self.rng(u64::MAX);
        let patterns = (0..self.anomaly_types)
            .map(|_| {
                index::sample(&mut rng, d, n_ch)
                    .into_iter()
                    .map(|c| {
                        (
                            c,
                            if rng.random_bool(0.5) {
                                self.shift
                            } else {
                                -self.shift
                            },
                        )
                    })
                    .collect()
            })
            .collect();
        SynthPrior {
            means: self.channel_means(),
            patterns,
        }
    }

    pub fn total_videos(&self) -> usize {
        self.n_normal + self.n_abnormal
    }

    /// Video label by generation index: normal videos come first.
    pub fn label_of(&self, index: usize) -> u8 {
        u8::from(index >= self.n_normal)
    }
}

/// Dataset-wide parameters of the generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthPrior {
    pub means: Vec<f64>,
    /// Per anomaly type, the shifted channels and their signed shifts.
    pub patterns: Vec<Vec<(usize, f64)>>,
}

/// One generated video and its ground truth.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthVideo {
    pub label: u8,
    pub features: Tensor<f32>,
    pub snippet_labels: Vec<u8>,
    pub frame_labels: Vec<u8>,
}

/// Generates video `index`; its random stream depends only on the seed and
/// the index.
pub fn synthesize_video(cfg: &SynthConfig, index: usize, prior: &SynthPrior) -> SynthVideo {
    let means = &prior.means;
    let d = cfg.feature_dim;
    let label = cfg.label_of(index);
    let mut rng = cfg.rng(index as u64 + 1);
    let t = rng.random_range(cfg.snippets[0]..=cfg.snippets[1]);
    let rho = cfg.smoothing;
    let innov = (1.0 - rho * rho).sqrt();

    let mut x = vec![0.0f64; t * d];
    let mut z: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    for row in 0..t {
        if row > 0 {
            for zc in z.iter_mut() {
                let e: f64 = rng.sample(StandardNormal);
                *zc = rho * *zc + innov * e;
            }
        }
        for c in 0..d {
            x[row * d + c] = means[c] + cfg.noise * z[c];
        }
    }

    let mut snippet_labels = vec![0u8; t];
    if label == 1 {
        let n_seg = rng.random_range(cfg.segments[0]..=cfg.segments[1]);
        for _ in 0..n_seg {
            let len = rng
                .random_range(cfg.segment_len[0]..=cfg.segment_len[1])
                .min(t);
            let start = rng.random_range(0..=t - len);
            let pattern = &prior.patterns[rng.random_range(0..prior.patterns.len())];
            for row in start..start + len {
                snippet_labels[row] = 1;
                for &(c, s) in pattern {
                    x[row * d + c] += s;
                }
            }
        }
    }

    let frames = t * FRAMES_PER_SNIPPET - rng.random_range(0..FRAMES_PER_SNIPPET);
    let frame_labels = (0..frames)
        .map(|f| snippet_labels[f / FRAMES_PER_SNIPPET])
        .collect();
    let features = Tensor::new(vec![t, d], x.into_iter().map(|v| v as f32).collect())
        .expect("generated shape matches its data");
    SynthVideo {
        label,
        features,
        snippet_labels,
        frame_labels,
    }
}

/// Paths written by [`generate_synthetic`].
#[derive(Clone, Debug)]
pub struct SynthOutput {
    pub train_manifest: PathBuf,
    pub test_manifest: PathBuf,
    pub train_videos: usize,
    pub test_videos: usize,
}

/// Writes features, frame labels and `train.jsonl` / `test.jsonl` under
/// `out_dir`. The last `round(n·test_fraction)` videos of each class form
/// the test split.
pub fn generate_synthetic(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<SynthOutput> {
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    for sub in ["features", "labels"] {
        let dir = out_dir.join(sub);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let prior = cfg.prior();
    let n_test = |n: usize| (n as f64 * cfg.test_fraction).round() as usize;
    let (test_normal, test_abnormal) = (n_test(cfg.n_normal), n_test(cfg.n_abnormal));

    let mut train = Vec::new();
    let mut test = Vec::new();
    for i in 0..cfg.total_videos() {
        let video = synthesize_video(cfg, i, &prior);
        let feat = PathBuf::from("features").join(format!("{i:04}.vadf"));
        let labels = PathBuf::from("labels").join(format!("{i:04}.u8"));
        write_feature_file(out_dir.join(&feat), &video.features)?;
        write_frame_labels(out_dir.join(&labels), &video.frame_labels)?;
        let entry = ManifestEntry {
            path: feat,
            label: video.label,
            frame_labels_path: Some(labels),
        };
        let held_out = if video.label == 0 {
            i >= cfg.n_normal - test_normal
        } else {
            i >= cfg.total_videos() - test_abnormal
        };
        if held_out {
            test.push(entry);
        } else {
            train.push(entry);
        }
    }

    let save = |name: &str, entries: Vec<ManifestEntry>| -> Result<PathBuf> {
        let path = out_dir.join(name);
        Manifest {
            root: out_dir.to_path_buf(),
            entries,
        }
        .save(&path)?;
        Ok(path)
    };
    let (train_videos, test_videos) = (train.len(), test.len());
    Ok(SynthOutput {
        train_manifest: save("train.jsonl", train)?,
        test_manifest: save("test.jsonl", test)?,
        train_videos,
        test_videos,
    })
}
