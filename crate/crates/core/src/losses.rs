//! Training objectives: branch classification losses, attention guides,
//! norm, smoothness and sparsity terms, and their weighted total.
//!
//! Batch averages are built as sums of per-video contributions, each already
//! divided by the size of its label subset. That keeps videos independent so
//! their graphs can be built and differentiated separately.

use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::model::ModelOutput;
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

/// Probability clamp applied before every cross-entropy.
pub const BCE_CLAMP: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Suppressed rate ε.
    pub eps: f64,
    /// Mix between unsuppressed and suppressed classification branches.
    pub alpha: f64,
    /// Norm loss weight.
    pub gamma: f64,
    /// Smoothness weight.
    pub mu: f64,
    /// Sparsity weight.
    pub sparsity_weight: f64,
    /// Iteration at which the positive guide switches to binarized targets.
    pub switch_iter: usize,
    /// Fraction of snippets averaged into the video score.
    pub topk_fraction: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            eps: 0.2,
            alpha: 0.8,
            gamma: 0.8,
            mu: 0.01,
            sparsity_weight: 1.0,
            switch_iter: 400,
            topk_fraction: 1.0 / 16.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = 0.0..=1.0;
        if !unit.contains(&self.eps) {
            return Err(Error::Config(format!("eps {} outside [0, 1]", self.eps)));
        }
        if !unit.contains(&self.alpha) {
            return Err(Error::Config(format!(
                "alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        for (name, v) in [
            ("gamma", self.gamma),
            ("mu", self.mu),
            ("sparsity_weight", self.sparsity_weight),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!(
                    "{name} {v} must be finite and non-negative"
                )));
            }
        }
        if !(self.topk_fraction > 0.0 && self.topk_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "topk_fraction {} outside (0, 1]",
                self.topk_fraction
            )));
        }
        Ok(())
    }
}

/// Which target the positive guide used.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuideBranch {
    /// Raw classifier scores.
    Soft,
    /// Classifier scores binarized at 0.5.
    Hard,
}

impl GuideBranch {
    pub fn for_step(step: usize, switch_iter: usize) -> Self {
        if step < switch_iter {
            Self::Soft
        } else {
            Self::Hard
        }
    }
}

/// Values of every loss term, already averaged over the batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub c_o: f64,
    pub c_a: f64,
    pub c_so: f64,
    pub c_sa: f64,
    pub c_all: f64,
    pub guide_neg: f64,
    pub guide_pos: f64,
    pub norm: f64,
    pub smooth: f64,
    pub sparse: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// The weighted total recomputed from the individual terms.
    pub fn reassemble(&self, cfg: &LossConfig) -> f64 {
        self.c_all
            + cfg.gamma * self.norm
            + self.guide_neg
            + self.guide_pos
            + cfg.mu * self.smooth
            + cfg.sparsity_weight * self.sparse
    }

    /// Recomputes `c_all` from the four classification terms.
    pub fn mix_classification(&mut self, alpha: f64) {
        self.c_all = alpha * (self.c_o + self.c_a) + (1.0 - alpha) * (self.c_so + self.c_sa);
    }

    pub fn is_finite(&self) -> bool {
        self.fields().iter().all(|v| v.is_finite())
    }

    fn fields(&self) -> [f64; 11] {
        [
            self.c_o,
            self.c_a,
            self.c_so,
            self.c_sa,
            self.c_all,
            self.guide_neg,
            self.guide_pos,
            self.norm,
            self.smooth,
            self.sparse,
            self.total,
        ]
    }
}

impl Add for LossBreakdown {
    type Output = Self;

    fn add(mut self, rhs: Self) -> Self {
        self += rhs;
        self
    }
}

impl AddAssign for LossBreakdown {
    fn add_assign(&mut self, r: Self) {
        self.c_o += r.c_o;
        self.c_a += r.c_a;
        self.c_so += r.c_so;
        self.c_sa += r.c_sa;
        self.c_all += r.c_all;
        self.guide_neg += r.guide_neg;
        self.guide_pos += r.guide_pos;
        self.norm += r.norm;
        self.smooth += r.smooth;
        self.sparse += r.sparse;
        self.total += r.total;
    }
}

/// Number of snippets pooled into a video score.
pub fn topk_count(t_len: usize, fraction: f64) -> usize {
    ((t_len as f64 * fraction).ceil() as usize).clamp(1, t_len.max(1))
}

/// Indices of the `k` largest values, largest first; ties go to the lower index.
pub fn topk_indices<S: Scalar>(values: &[S], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| {
        values[j]
            .partial_cmp(&values[i])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    idx.truncate(k);
    idx
}

/// Mean of the top-k snippet scores of a `[T, 1]` score column.
pub fn video_score<S: Scalar>(g: &mut Graph<S>, scores: Var, topk_fraction: f64) -> Result<Var> {
    let (t_len, _) = g.value(scores).dims2()?;
    if t_len == 0 {
        return Err(Error::shape("video score needs at least one snippet"));
    }
    let k = topk_count(t_len, topk_fraction);
    let rows = topk_indices(g.value(scores).data(), k);
    let top = g.select_rows(scores, &rows)?;
    Ok(g.mean(top))
}

/// Clamped cross-entropy between a pooled score and a video label.
pub fn video_bce<S: Scalar>(
    g: &mut Graph<S>,
    scores: Var,
    label: u8,
    topk_fraction: f64,
) -> Result<Var> {
    let p = video_score(g, scores, topk_fraction)?;
    g.bce(p, lit(label as f64), lit(BCE_CLAMP), lit(1.0 - BCE_CLAMP))
}

fn mse<S: Scalar>(g: &mut Graph<S>, x: Var, target: Var) -> Result<Var> {
    let diff = g.sub(x, target)?;
    let sq = g.square(diff);
    Ok(g.mean(sq))
}

/// Mean of `A²`: pulls attention of a normal video towards zero.
pub fn guide_loss_neg<S: Scalar>(g: &mut Graph<S>, attention: Var) -> Var {
    let sq = g.square(attention);
    g.mean(sq)
}

/// MSE between attention and detached classifier scores, binarized at 0.5
/// once `step >= switch_iter`.
pub fn guide_loss_pos<S: Scalar>(
    g: &mut Graph<S>,
    attention: Var,
    s_o: Var,
    step: usize,
    switch_iter: usize,
) -> Result<(Var, GuideBranch)> {
    let branch = GuideBranch::for_step(step, switch_iter);
    let target = match branch {
        GuideBranch::Soft => g.detach(s_o),
        GuideBranch::Hard => {
            let half = lit::<S>(0.5);
            let t = g
                .value(s_o)
                .map(|v| if v > half { S::one() } else { S::zero() });
            g.constant(t)
        }
    };
    Ok((mse(g, attention, target)?, branch))
}

/// Mean absolute attention.
pub fn norm_loss<S: Scalar>(g: &mut Graph<S>, attention: Var) -> Var {
    let n = g.value(attention).numel().max(1);
    let l1 = g.abs_sum(attention);
    g.scale(l1, S::one() / lit::<S>(n as f64))
}

/// Mean squared successive difference and mean score of a `[T, 1]` column.
pub fn smooth_sparse<S: Scalar>(g: &mut Graph<S>, scores: Var) -> Result<(Var, Var)> {
    let (t_len, _) = g.value(scores).dims2()?;
    if t_len == 0 {
        return Err(Error::shape("smoothness needs at least one snippet"));
    }
    let smooth = if t_len == 1 {
        g.constant(Tensor::scalar(S::zero()))
    } else {
        let head = g.slice_rows(scores, 0, t_len - 1)?;
        let tail = g.slice_rows(scores, 1, t_len)?;
        mse(g, head, tail)?
    };
    let sparse = g.mean(scores);
    Ok((smooth, sparse))
}

/// Label composition of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BatchCounts {
    pub videos: usize,
    pub normal: usize,
    pub abnormal: usize,
}

impl BatchCounts {
    pub fn from_labels(labels: &[u8]) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::Usage("loss over an empty batch".into()));
        }
        if let Some(bad) = labels.iter().find(|&&l| l > 1) {
            return Err(Error::Usage(format!("video label {bad} is not 0 or 1")));
        }
        let abnormal = labels.iter().filter(|&&l| l == 1).count();
        Ok(Self {
            videos: labels.len(),
            normal: labels.len() - abnormal,
            abnormal,
        })
    }
}

/// One video's share of the batch loss.
#[derive(Clone, Debug)]
pub struct VideoLoss {
    pub total: Var,
    pub breakdown: LossBreakdown,
    /// Set for abnormal videos.
    pub guide: Option<GuideBranch>,
}

/// Builds one video's weighted contribution to the batch total.
pub fn video_loss<S: Scalar>(
    g: &mut Graph<S>,
    out: &ModelOutput<S>,
    label: u8,
    step: usize,
    cfg: &LossConfig,
    counts: &BatchCounts,
) -> Result<VideoLoss> {
    let f = cfg.topk_fraction;
    let alpha = cfg.alpha;
    let wb = 1.0 / counts.videos as f64;
    let mut bd = LossBreakdown::default();
    let mut parts: Vec<(Var, f64)> = Vec::new();

    let branches = [out.s_o, out.s_a, out.s_so, out.s_sa];
    let mut bce = [0.0; 4];
    for (i, &s) in branches.iter().enumerate() {
        let l = video_bce(g, s, label, f)?;
        bce[i] = g.value(l).item().to_f64_lossy() * wb;
        let mix = if i < 2 { alpha } else { 1.0 - alpha };
        parts.push((l, mix * wb));
    }
    [bd.c_o, bd.c_a, bd.c_so, bd.c_sa] = bce;
    bd.mix_classification(alpha);

    let mut guide = None;
    if label == 0 {
        let w = 1.0 / counts.normal as f64;
        let l = guide_loss_neg(g, out.attention);
        bd.guide_neg = g.value(l).item().to_f64_lossy() * w;
        parts.push((l, w));
    } else {
        let w = 1.0 / counts.abnormal as f64;
        let (gp, branch) = guide_loss_pos(g, out.attention, out.s_o, step, cfg.switch_iter)?;
        guide = Some(branch);
        bd.guide_pos = g.value(gp).item().to_f64_lossy() * w;
        parts.push((gp, w));

        let nl = norm_loss(g, out.attention);
        bd.norm = g.value(nl).item().to_f64_lossy() * w;
        parts.push((nl, cfg.gamma * w));

        for s in [out.s_o, out.s_a] {
            let (sm, sp) = smooth_sparse(g, s)?;
            bd.smooth += g.value(sm).item().to_f64_lossy() * w;
            bd.sparse += g.value(sp).item().to_f64_lossy() * w;
            parts.push((sm, cfg.mu * w));
            parts.push((sp, cfg.sparsity_weight * w));
        }
    }

    let mut total = None;
    for (v, w) in parts {
        let term = g.scale(v, lit(w));
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.expect("every video contributes classification terms");
    bd.total = g.value(total).item().to_f64_lossy();
    Ok(VideoLoss {
        total,
        breakdown: bd,
        guide,
    })
}

/// Batch loss on a single graph.
pub fn total_loss<S: Scalar>(
    g: &mut Graph<S>,
    outputs: &[ModelOutput<S>],
    labels: &[u8],
    step: usize,
    cfg: &LossConfig,
) -> Result<(Var, LossBreakdown)> {
    cfg.validate()?;
    if outputs.len() != labels.len() {
        return Err(Error::Usage(format!(
            "{} model outputs for {} labels",
            outputs.len(),
            labels.len()
        )));
    }
    let counts = BatchCounts::from_labels(labels)?;
    let mut total: Option<Var> = None;
    let mut bd = LossBreakdown::default();
    for (out, &label) in outputs.iter().zip(labels) {
        let v = video_loss(g, out, label, step, cfg, &counts)?;
        bd += v.breakdown;
        total = Some(match total {
            None => v.total,
            Some(acc) => g.add(acc, v.total)?,
        });
    }
    let total = total.expect("batch is nonempty");
    bd.mix_classification(cfg.alpha);
    bd.total = g.value(total).item().to_f64_lossy();
    Ok((total, bd))
}
