use rand::Rng;

use super::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::DILATIONS;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Name and shape of one parameter tensor.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    /// Fan-in used for initialisation; zero marks a bias.
    pub fan_in: usize,
}

impl ParamSpec {
    fn weight(name: String, shape: Vec<usize>, fan_in: usize) -> Self {
        Self {
            name,
            shape,
            fan_in,
        }
    }

    fn bias(name: String, width: usize) -> Self {
        Self {
            name,
            shape: vec![width],
            fan_in: 0,
        }
    }

    /// Canonical parameter order for a configuration.
    pub fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
        let d = cfg.feature_dim;
        let q = d / 4;
        let k = cfg.kernel_size;
        let h = cfg.attention_hidden;
        let mut out = Vec::new();
        let conv = |out: &mut Vec<ParamSpec>, name: &str, taps: usize, cin: usize, cout: usize| {
            out.push(Self::weight(
                format!("{name}.weight"),
                vec![taps, cin, cout],
                taps * cin,
            ));
            if cfg.conv_bias {
                out.push(Self::bias(format!("{name}.bias"), cout));
            }
        };
        for part in ["query", "key", "value"] {
            conv(&mut out, &format!("embed.nonlocal.{part}"), 1, d, q);
        }
        for i in 0..DILATIONS.len() {
            conv(&mut out, &format!("embed.dilated.{i}"), k, d, q);
        }
        conv(&mut out, "embed.aggregate", k, d, d);
        conv(&mut out, "attention.0", k, d, h);
        conv(&mut out, "attention.1", k, h, 1);
        let [c1, c2] = cfg.classifier_hidden;
        for (i, (cin, cout)) in [(d, c1), (c1, c2), (c2, 1)].into_iter().enumerate() {
            out.push(Self::weight(
                format!("classifier.{i}.weight"),
                vec![cin, cout],
                cin,
            ));
            out.push(Self::bias(format!("classifier.{i}.bias"), cout));
        }
        out
    }

    /// Index of the first classifier tensor in [`ParamSpec::layout`].
    pub fn classifier_offset(cfg: &ModelConfig) -> usize {
        Self::layout(cfg)
            .iter()
            .position(|p| p.name.starts_with("classifier."))
            .expect("layout always contains the classifier")
    }
}

/// All learnable weights, in canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<S> {
    config: ModelConfig,
    tensors: Vec<(String, Tensor<S>)>,
}

impl<S: Scalar> ModelParams<S> {
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let tensors = ParamSpec::layout(config)
            .into_iter()
            .map(|p| (p.name, Tensor::zeros(p.shape)))
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Uniform fan-in scaled weights in `±1/sqrt(fan_in)`, zero biases.
    pub fn init<R: Rng + ?Sized>(config: &ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let tensors = ParamSpec::layout(config)
            .into_iter()
            .map(|p| {
                let mut t = Tensor::zeros(p.shape);
                if p.fan_in > 0 {
                    let bound = 1.0 / (p.fan_in as f64).sqrt();
                    for v in t.data_mut() {
                        *v = S::from_f64_lossy(rng.random_range(-bound..bound));
                    }
                }
                (p.name, t)
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    /// Accepts named tensors in any order, checking them against the layout.
    pub fn from_named(config: &ModelConfig, mut named: Vec<(String, Tensor<S>)>) -> Result<Self> {
        config.validate()?;
        let layout = ParamSpec::layout(config);
        let mut tensors = Vec::with_capacity(layout.len());
        for spec in &layout {
            let pos = named
                .iter()
                .position(|(n, _)| n == &spec.name)
                .ok_or_else(|| Error::Config(format!("missing parameter `{}`", spec.name)))?;
            let (name, t) = named.swap_remove(pos);
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::Config(format!(
                    "parameter `{name}` has shape {:?}, architecture expects {:?}",
                    t.shape(),
                    spec.shape
                )));
            }
            tensors.push((name, t));
        }
        if let Some((extra, _)) = named.first() {
            return Err(Error::Config(format!("unexpected parameter `{extra}`")));
        }
        Ok(Self {
            config: config.clone(),
            tensors,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn tensors(&self) -> &[(String, Tensor<S>)] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<S>)> {
        self.tensors.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|(_, t)| t.is_finite())
    }

    pub fn cast<T: Scalar>(&self) -> ModelParams<T> {
        ModelParams {
            config: self.config.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| (n.clone(), t.cast()))
                .collect(),
        }
    }
}
