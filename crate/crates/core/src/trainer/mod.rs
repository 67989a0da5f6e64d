//! Adam, balanced batches, the training loop and frame-level inference.

mod adam;

pub use adam::AdamState;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{load_videos, resample_segments, Manifest, Pooling, Video, FRAMES_PER_SNIPPET};
use crate::diff::Graph;
use crate::error::{Error, Result};
use crate::losses::{video_loss, BatchCounts, GuideBranch, LossBreakdown, LossConfig};
use crate::model::{save_checkpoint, ForwardOptions, ModelConfig, ModelParams, ScoreSnapshot};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    /// Videos per batch, half of each label.
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    /// Segments each training video is resampled to.
    pub segments: usize,
    pub pooling: Pooling,
    /// Residual factor for suppressed snippets.
    pub beta: f64,
    /// Threads used for per-video forward and backward passes.
    pub workers: usize,
    /// Checkpoint cadence in iterations; 0 keeps only the final checkpoint.
    pub checkpoint_every: usize,
    pub loss: LossConfig,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 5e-4,
            batch_size: 32,
            iterations: 4000,
            seed: 0,
            segments: 320,
            pooling: Pooling::Mean,
            beta: 0.0,
            workers: 1,
            checkpoint_every: 100,
            loss: LossConfig::default(),
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size {} must be even and positive",
                self.batch_size
            )));
        }
        if self.segments == 0 || self.iterations == 0 || self.workers == 0 {
            return Err(Error::Config(
                "segments, iterations and workers must be at least 1".into(),
            ));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite())
            || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite())
        {
            return Err(Error::Config(
                "learning rate and weight decay must be finite and non-negative".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(Error::Config(format!("beta {} outside [0, 1]", self.beta)));
        }
        self.loss.validate()?;
        self.model.validate()
    }

    fn forward_options(&self, training: bool) -> ForwardOptions {
        ForwardOptions {
            eps: self.loss.eps,
            beta: self.beta,
            training,
        }
    }
}

/// Indices of the videos in one batch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub normal: Vec<usize>,
    pub abnormal: Vec<usize>,
}

impl Batch {
    /// `(video, label)` pairs, normal videos first.
    pub fn slots(&self) -> impl Iterator<Item = (usize, u8)> + '_ {
        self.normal
            .iter()
            .map(|&v| (v, 0))
            .chain(self.abnormal.iter().map(|&v| (v, 1)))
    }

    pub fn labels(&self) -> Vec<u8> {
        self.slots().map(|(_, l)| l).collect()
    }
}

fn draw<R: Rng + ?Sized>(pool: &[usize], n: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= n {
        index::sample(rng, pool.len(), n)
            .into_iter()
            .map(|i| pool[i])
            .collect()
    } else {
        (0..n)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// Samples `batch_size / 2` videos from each pool, without replacement when
/// the pool is large enough.
pub fn make_batch<R: Rng + ?Sized>(
    normal_pool: &[usize],
    abnormal_pool: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Batch> {
    if normal_pool.is_empty() || abnormal_pool.is_empty() {
        return Err(Error::Config(
            "training needs at least one normal and one abnormal video".into(),
        ));
    }
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Config(format!(
            "batch size {batch_size} must be even and positive"
        )));
    }
    let half = batch_size / 2;
    Ok(Batch {
        normal: draw(normal_pool, half, rng),
        abnormal: draw(abnormal_pool, half, rng),
    })
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub step: usize,
    pub guide: GuideBranch,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

const INIT_STREAM: u64 = u64::MAX;
const BATCH_STREAM: u64 = 0;

/// Training state over a fixed set of videos.
pub struct Trainer<S: Scalar> {
    cfg: TrainConfig,
    params: ModelParams<S>,
    adam: AdamState<S>,
    /// Training features already resampled to `cfg.segments`.
    features: Vec<Tensor<S>>,
    labels: Vec<u8>,
    normal: Vec<usize>,
    abnormal: Vec<usize>,
    batch_rng: ChaCha8Rng,
    step: usize,
    pool: Option<rayon::ThreadPool>,
}

impl<S: Scalar> Trainer<S> {
    /// Initializes parameters from the seed.
    pub fn new(videos: &[Video], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let params = ModelParams::init(&cfg.model, &mut stream_rng(cfg.seed, INIT_STREAM))?;
        Self::with_params(videos, cfg, params)
    }

    pub fn with_params(
        videos: &[Video],
        cfg: &TrainConfig,
        params: ModelParams<S>,
    ) -> Result<Self> {
        cfg.validate()?;
        if params.config() != &cfg.model {
            return Err(Error::Config(
                "parameters do not match the configured architecture".into(),
            ));
        }
        let mut features = Vec::with_capacity(videos.len());
        for v in videos {
            let d = v.features.shape()[1];
            if d != cfg.model.feature_dim {
                return Err(Error::shape(format!(
                    "{}: {d} channels, model expects {}",
                    v.path.display(),
                    cfg.model.feature_dim
                )));
            }
            features.push(resample_segments(
                &v.features.cast::<S>(),
                cfg.segments,
                cfg.pooling,
            )?);
        }
        let labels: Vec<u8> = videos.iter().map(|v| v.label).collect();
        let pick = |l: u8| {
            (0..labels.len())
                .filter(|&i| labels[i] == l)
                .collect::<Vec<_>>()
        };
        let (normal, abnormal) = (pick(0), pick(1));
        if normal.is_empty() || abnormal.is_empty() {
            return Err(Error::Config(
                "training set must contain both normal and abnormal videos".into(),
            ));
        }
        let pool = if cfg.workers > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.workers)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Self {
            adam: AdamState::new(&params),
            cfg: cfg.clone(),
            params,
            features,
            labels,
            normal,
            abnormal,
            batch_rng: stream_rng(cfg.seed, BATCH_STREAM),
            step: 0,
            pool,
        })
    }

    pub fn params(&self) -> &ModelParams<S> {
        &self.params
    }

    pub fn into_params(self) -> ModelParams<S> {
        self.params
    }

    /// Completed iterations.
    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Loss and summed gradients of one batch, without updating anything.
    pub fn batch_gradients(
        &self,
        batch: &Batch,
        step: usize,
    ) -> Result<(LossBreakdown, Vec<Vec<S>>)> {
        let labels = batch.labels();
        let counts = BatchCounts::from_labels(&labels)?;
        let slots: Vec<(usize, (usize, u8))> = batch.slots().enumerate().collect();
        let run = |&(slot, (video, label)): &(usize, (usize, u8))| -> Result<(LossBreakdown, Vec<Vec<S>>)> {
            let stream = 1 + (step * self.cfg.batch_size + slot) as u64;
            let mut rng = stream_rng(self.cfg.seed, stream);
            let mut g = Graph::new();
            let det = self.params.bind(&mut g)?;
            let x = g.constant(self.features[video].clone());
            let out = det.forward(&mut g, x, &self.cfg.forward_options(true), &mut rng)?;
            let loss = video_loss(&mut g, &out, label, step, &self.cfg.loss, &counts)?;
            let grads = g.backward(loss.total)?;
            let per_param = det
                .params
                .iter()
                .zip(self.params.tensors())
                .map(|(&v, (_, t))| grads.wrt(v).map_or_else(|| vec![S::zero(); t.numel()], <[S]>::to_vec))
                .collect();
            Ok((loss.breakdown, per_param))
        };
        let results: Vec<Result<(LossBreakdown, Vec<Vec<S>>)>> = match &self.pool {
            Some(pool) => pool.install(|| slots.par_iter().map(run).collect()),
            None => slots.iter().map(run).collect(),
        };
        let mut total = LossBreakdown::default();
        let mut acc: Vec<Vec<S>> = self
            .params
            .tensors()
            .iter()
            .map(|(_, t)| vec![S::zero(); t.numel()])
            .collect();
        for r in results {
            let (bd, grads) = r?;
            total += bd;
            for (a, g) in acc.iter_mut().zip(grads) {
                for (x, y) in a.iter_mut().zip(g) {
                    *x = *x + y;
                }
            }
        }
        total.mix_classification(self.cfg.loss.alpha);
        Ok((total, acc))
    }

    /// Runs one iteration and returns its log record.
    pub fn step(&mut self) -> Result<TrainRecord> {
        let step = self.step;
        let batch = make_batch(
            &self.normal,
            &self.abnormal,
            self.cfg.batch_size,
            &mut self.batch_rng,
        )?;
        debug_assert!(batch.slots().all(|(v, l)| self.labels[v] == l));
        let (loss, grads) = self.batch_gradients(&batch, step)?;
        self.adam
            .step(&mut self.params, &grads, self.cfg.lr, self.cfg.weight_decay)?;
        self.step += 1;
        Ok(TrainRecord {
            step,
            guide: GuideBranch::for_step(step, self.cfg.loss.switch_iter),
            loss,
        })
    }
}

/// Where training writes its log and checkpoints.
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub dir: PathBuf,
}

impl TrainOutputs {
    pub fn log_path(&self) -> PathBuf {
        self.dir.join("train_log.jsonl")
    }

    pub fn checkpoint_path(&self, step: usize) -> PathBuf {
        self.dir
            .join("checkpoints")
            .join(format!("step_{step:06}.ckpt"))
    }

    pub fn final_checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

/// Result of [`train`].
pub struct TrainResult<S> {
    pub params: ModelParams<S>,
    pub log: Vec<TrainRecord>,
}

/// Trains for `cfg.iterations` steps. With `out`, writes the JSON-lines log,
/// periodic checkpoints and the final checkpoint.
pub fn train<S: Scalar>(
    videos: &[Video],
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainResult<S>> {
    Trainer::<S>::new(videos, cfg)?.run(out)
}

impl<S: Scalar> Trainer<S> {
    /// Runs `iterations` more steps from the current state, writing outputs
    /// like [`train`].
    pub fn run(self, out: Option<&TrainOutputs>) -> Result<TrainResult<S>> {
        let mut trainer = self;
        let cfg = trainer.cfg.clone();
        let cfg = &cfg;
        let mut log_file = match out {
            Some(o) => {
                let ckpt = o.dir.join("checkpoints");
                fs::create_dir_all(&ckpt).map_err(|e| Error::io(&ckpt, e))?;
                let path = o.log_path();
                let f = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                Some((path, std::io::BufWriter::new(f)))
            }
            None => None,
        };
        let mut log = Vec::with_capacity(cfg.iterations);
        for _ in 0..cfg.iterations {
            let rec = trainer.step()?;
            if let Some((path, w)) = log_file.as_mut() {
                let line = serde_json::to_string(&rec).expect("records always serialize");
                writeln!(w, "{line}").map_err(|e| Error::io(path.as_path(), e))?;
            }
            let done = trainer.step_count();
            if let Some(o) = out {
                if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 {
                    save_checkpoint(o.checkpoint_path(done), trainer.params())?;
                }
            }
            log.push(rec);
        }
        if let Some((path, mut w)) = log_file {
            w.flush().map_err(|e| Error::io(&path, e))?;
        }
        if let Some(o) = out {
            save_checkpoint(o.final_checkpoint(), trainer.params())?;
        }
        Ok(TrainResult {
            params: trainer.into_params(),
            log,
        })
    }
}

/// Loads a manifest and trains on it.
pub fn train_manifest<S: Scalar>(
    manifest: impl AsRef<Path>,
    cfg: &TrainConfig,
    out: Option<&TrainOutputs>,
) -> Result<TrainResult<S>> {
    let manifest = Manifest::load(manifest)?;
    let videos = load_videos(&manifest)?;
    train(&videos, cfg, out)
}

/// Repeats every snippet score for the frames it covers.
pub fn expand_frames<S: Copy>(scores: &[S]) -> Vec<S> {
    scores
        .iter()
        .flat_map(|&s| std::iter::repeat_n(s, FRAMES_PER_SNIPPET))
        .collect()
}

/// Branch scores of a full, unresampled feature sequence with dropout off.
pub fn infer_snapshot<S: Scalar>(
    params: &ModelParams<S>,
    features: &Tensor<S>,
    eps: f64,
    beta: f64,
) -> Result<ScoreSnapshot<S>> {
    let opts = ForwardOptions {
        eps,
        beta,
        training: false,
    };
    // Dropout is off, so the generator is never drawn from.
    params.score(features, &opts, &mut ChaCha8Rng::seed_from_u64(0))
}

/// Frame-level anomaly scores: the attention-weighted branch, ×16 frames.
pub fn infer<S: Scalar>(params: &ModelParams<S>, features: &Tensor<S>) -> Result<Vec<S>> {
    let snap = infer_snapshot(params, features, LossConfig::default().eps, 0.0)?;
    Ok(expand_frames(&snap.s_a))
}
