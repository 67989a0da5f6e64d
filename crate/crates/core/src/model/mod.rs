//! The detector: temporal embedding, anomalous attention, snippet classifier
//! and the four supervision branches.

mod checkpoint;
mod params;

pub use checkpoint::{
    load_checkpoint, load_checkpoint_auto, read_checkpoint, save_checkpoint, write_checkpoint,
    CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use params::{ModelParams, ParamSpec};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Var};
use crate::error::{Error, Result};
use crate::layers::{AffineLayer, Conv1dLayer, DilatedBranch, NonLocalBlock, DILATIONS};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture hyper-parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Snippet feature dimension `D`; must be divisible by 4.
    pub feature_dim: usize,
    /// Temporal kernel size shared by the dilated branches, the aggregation
    /// convolution and the attention unit.
    pub kernel_size: usize,
    /// Width of the hidden attention unit.
    pub attention_hidden: usize,
    /// Hidden widths of the snippet classifier (its output width is 1).
    pub classifier_hidden: [usize; 2],
    pub dropout: f64,
    pub leaky_slope: f64,
    /// Whether temporal convolutions carry a bias term.
    pub conv_bias: bool,
    /// Apply LeakyReLU after the last attention convolution as well.
    pub final_attention_leaky: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 1024,
            kernel_size: 3,
            attention_hidden: 512,
            classifier_hidden: [512, 128],
            dropout: 0.7,
            leaky_slope: 0.2,
            conv_bias: true,
            final_attention_leaky: false,
        }
    }
}

impl ModelConfig {
    pub fn with_feature_dim(feature_dim: usize) -> Self {
        Self {
            feature_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0 || self.feature_dim % 4 != 0 {
            return Err(Error::Config(format!(
                "feature dimension {} must be a positive multiple of 4",
                self.feature_dim
            )));
        }
        if self.kernel_size == 0
            || self.attention_hidden == 0
            || self.classifier_hidden.contains(&0)
        {
            return Err(Error::Config("layer sizes must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                self.dropout
            )));
        }
        Ok(())
    }
}

/// Per-call switches for [`Detector::forward`].
#[derive(Clone, Copy, Debug)]
pub struct ForwardOptions {
    /// Suppressed rate ε in `[0, 1]`.
    pub eps: f64,
    /// Residual factor applied to suppressed snippets, in `[0, 1]`.
    pub beta: f64,
    pub training: bool,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        Self {
            eps: 0.2,
            beta: 0.0,
            training: false,
        }
    }
}

/// Attention-derived scores and the threshold that produced them.
#[derive(Clone, Debug)]
pub struct BranchScores<S> {
    pub s_a: Var,
    pub s_so: Var,
    pub s_sa: Var,
    pub theta: S,
    /// `true` where `A[j] < theta`, i.e. the snippet keeps its full score.
    pub retained: Vec<bool>,
}

/// Everything one video's forward pass produces.
#[derive(Clone, Debug)]
pub struct ModelOutput<S> {
    pub embedded: Var,
    pub attention: Var,
    pub s_o: Var,
    pub s_a: Var,
    pub s_so: Var,
    pub s_sa: Var,
    pub theta: S,
    pub retained: Vec<bool>,
}

/// Plain values of a [`ModelOutput`], detached from its graph.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSnapshot<S> {
    pub attention: Vec<S>,
    pub s_o: Vec<S>,
    pub s_a: Vec<S>,
    pub s_so: Vec<S>,
    pub s_sa: Vec<S>,
    pub theta: S,
}

impl<S: Scalar> ModelOutput<S> {
    pub fn snapshot(&self, g: &Graph<S>) -> ScoreSnapshot<S> {
        let v = |x: Var| g.value(x).data().to_vec();
        ScoreSnapshot {
            attention: v(self.attention),
            s_o: v(self.s_o),
            s_a: v(self.s_a),
            s_so: v(self.s_so),
            s_sa: v(self.s_sa),
            theta: self.theta,
        }
    }
}

/// Floating threshold `(max(A) - min(A)) * eps + min(A)`.
pub fn attention_threshold<S: Scalar>(attention: &[S], eps: S) -> S {
    let (lo, hi) = attention
        .iter()
        .fold((S::infinity(), S::neg_infinity()), |(lo, hi), &a| {
            (lo.min(a), hi.max(a))
        });
    (hi - lo) * eps + lo
}

/// Attention-weighted and suppressed score branches.
///
/// `S_a = A ⊙ S_o`; snippets with `A[j] >= theta` are scaled by `beta` in
/// both suppressed branches. The comparison uses attention values only, so
/// no gradient flows through the threshold.
pub fn branch_scores<S: Scalar>(
    g: &mut Graph<S>,
    s_o: Var,
    attention: Var,
    eps: f64,
    beta: f64,
) -> Result<BranchScores<S>> {
    if !(0.0..=1.0).contains(&eps) {
        return Err(Error::Param(format!(
            "suppressed rate {eps} outside [0, 1]"
        )));
    }
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Param(format!(
            "suppression scale {beta} outside [0, 1]"
        )));
    }
    if g.value(attention).numel() == 0 {
        return Err(Error::shape("branch scores need at least one snippet"));
    }
    let s_a = g.mul(attention, s_o)?;
    let a = g.value(attention).data();
    let theta = attention_threshold(a, S::from_f64_lossy(eps));
    let retained: Vec<bool> = a.iter().map(|&v| v < theta).collect();
    let beta = S::from_f64_lossy(beta);
    let mask: Vec<S> = retained
        .iter()
        .map(|&keep| if keep { S::one() } else { beta })
        .collect();
    let s_so = g.mul_const(s_o, mask.clone())?;
    let s_sa = g.mul_const(s_a, mask)?;
    Ok(BranchScores {
        s_a,
        s_so,
        s_sa,
        theta,
        retained,
    })
}

/// Model parameters bound to a graph.
#[derive(Clone, Debug)]
pub struct Detector {
    pub config: ModelConfig,
    pub nonlocal: NonLocalBlock,
    pub dilated: DilatedBranch,
    pub aggregate: Conv1dLayer,
    pub attention: Vec<Conv1dLayer>,
    pub classifier: Vec<AffineLayer>,
    /// Parameter handles in [`ParamSpec`] order.
    pub params: Vec<Var>,
}

impl Detector {
    /// Assembles layers from parameter handles laid out as in
    /// [`ParamSpec::layout`].
    pub fn from_vars(config: &ModelConfig, vars: &[Var]) -> Result<Self> {
        config.validate()?;
        let layout = ParamSpec::layout(config);
        if layout.len() != vars.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                layout.len(),
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut conv = |dilation: usize| -> Conv1dLayer {
            let weight = it.next().unwrap();
            let bias = config.conv_bias.then(|| it.next().unwrap());
            Conv1dLayer {
                weight,
                bias,
                dilation,
            }
        };
        let nonlocal = NonLocalBlock {
            query: conv(1),
            key: conv(1),
            value: conv(1),
        };
        let dilated = DilatedBranch {
            branches: DILATIONS.map(&mut conv),
        };
        let aggregate = conv(1);
        let attention = vec![conv(1), conv(1)];
        let mut it = vars[ParamSpec::classifier_offset(config)..].iter().copied();
        let classifier = (0..3)
            .map(|_| AffineLayer {
                weight: it.next().unwrap(),
                bias: it.next().unwrap(),
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            nonlocal,
            dilated,
            aggregate,
            attention,
            classifier,
            params: vars.to_vec(),
        })
    }

    /// `F_e = F + TC(concat(F_l1, F_l2, F_l3, F_g))`.
    pub fn temporal_embed<S: Scalar>(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        let fg = self.nonlocal.forward(g, f)?;
        let [l1, l2, l3] = self.dilated.forward(g, f)?;
        let cat = g.concat_channels(&[l1, l2, l3, fg])?;
        let fused = self.aggregate.forward(g, cat)?;
        g.add(f, fused)
    }

    /// Stacked temporal-convolution units followed by a sigmoid; `[T, 1]`.
    pub fn attention_forward<S: Scalar>(&self, g: &mut Graph<S>, fe: Var) -> Result<Var> {
        let slope = S::from_f64_lossy(self.config.leaky_slope);
        let mut h = fe;
        let last = self.attention.len() - 1;
        for (i, unit) in self.attention.iter().enumerate() {
            h = unit.forward(g, h)?;
            if i < last || self.config.final_attention_leaky {
                h = g.leaky_relu(h, slope);
            }
        }
        Ok(g.sigmoid(h))
    }

    /// Per-snippet classifier scores `S_o`; `[T, 1]`.
    pub fn classify<S: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        fe: Var,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        let last = self.classifier.len() - 1;
        let mut h = fe;
        for (i, layer) in self.classifier.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.relu(h);
                h = g.dropout(h, self.config.dropout, training, rng)?;
            }
        }
        Ok(g.sigmoid(h))
    }

    pub fn forward<S: Scalar, R: Rng + ?Sized>(
        &self,
        g: &mut Graph<S>,
        features: Var,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ModelOutput<S>> {
        let x = g.value(features);
        let (t_len, d) = x.dims2()?;
        if t_len == 0 {
            return Err(Error::shape("a video needs at least one snippet"));
        }
        if d != self.config.feature_dim {
            return Err(Error::shape(format!(
                "features have {d} channels, model expects {}",
                self.config.feature_dim
            )));
        }
        if !x.is_finite() {
            return Err(Error::Param("features contain non-finite values".into()));
        }
        let embedded = self.temporal_embed(g, features)?;
        let attention = self.attention_forward(g, embedded)?;
        let s_o = self.classify(g, embedded, opts.training, rng)?;
        let b = branch_scores(g, s_o, attention, opts.eps, opts.beta)?;
        Ok(ModelOutput {
            embedded,
            attention,
            s_o,
            s_a: b.s_a,
            s_so: b.s_so,
            s_sa: b.s_sa,
            theta: b.theta,
            retained: b.retained,
        })
    }
}

impl<S: Scalar> ModelParams<S> {
    /// Places every parameter on `g` as a trainable leaf.
    pub fn bind(&self, g: &mut Graph<S>) -> Result<Detector> {
        let vars: Vec<Var> = self
            .tensors()
            .iter()
            .map(|(_, t)| g.param(t.clone()))
            .collect();
        Detector::from_vars(self.config(), &vars)
    }

    /// Forward pass of one video without recording gradients for later use.
    pub fn score<R: Rng + ?Sized>(
        &self,
        features: &Tensor<S>,
        opts: &ForwardOptions,
        rng: &mut R,
    ) -> Result<ScoreSnapshot<S>> {
        let mut g = Graph::new();
        let det = self.bind(&mut g)?;
        let x = g.constant(features.clone());
        let out = det.forward(&mut g, x, opts, rng)?;
        Ok(out.snapshot(&g))
    }
}
