//! Finite-difference verification of every primitive, every layer and the
//! full training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::{grad_check, CheckReport, GradCheckOptions, Graph, Var};
use crate::error::Result;
use crate::layers::{AffineLayer, Conv1dLayer, NonLocalBlock};
use crate::losses::{total_loss, LossConfig};
use crate::model::{Detector, ForwardOptions, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// One line of the verification table.
#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
    pub tol: f64,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_error.is_finite() && self.max_rel_error < self.tol
    }

    fn from_report(name: impl Into<String>, r: &CheckReport, tol: f64) -> Self {
        Self {
            name: name.into(),
            coords: r.inputs.iter().map(|c| c.coords_checked).sum(),
            max_rel_error: r.max_rel_error(),
            tol,
        }
    }
}

#[derive(Clone, Debug)]
pub struct SuiteOptions {
    pub seed: u64,
    /// Snippets per video in the loss check.
    pub segments: usize,
    pub feature_dim: usize,
    /// Videos per label in the loss check.
    pub videos_per_label: usize,
    /// Coordinates sampled per parameter tensor in the loss check.
    pub max_coords: Option<usize>,
    pub primitive_tol: f64,
    pub loss_tol: f64,
    pub model: ModelConfig,
    pub loss: LossConfig,
}

impl Default for SuiteOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            segments: 12,
            feature_dim: 16,
            videos_per_label: 2,
            max_coords: Some(48),
            primitive_tol: 1e-5,
            loss_tol: 1e-4,
            model: ModelConfig::default(),
            loss: LossConfig::default(),
        }
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

/// Weighted sum with a fixed random probe, so every output element matters.
fn probe_sum(g: &mut Graph<f64>, y: Var, probe: &Tensor<f64>) -> Result<Var> {
    let p = g.constant(probe.clone());
    let m = g.mul(y, p)?;
    Ok(g.sum(m))
}

type Program = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

fn primitive_programs(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor<f64>>, Program)> {
    let (t, c, o) = (7, 4, 3);
    let p_to = random(rng, &[t, o]);
    let p_tc = random(rng, &[t, c]);
    let mut out: Vec<(&'static str, Vec<Tensor<f64>>, Program)> = Vec::new();
    for (name, d) in [("conv1d d=1", 1), ("conv1d d=2", 2), ("conv1d d=4", 4)] {
        let p = p_to.clone();
        out.push((
            name,
            vec![
                random(rng, &[t, c]),
                random(rng, &[3, c, o]),
                random(rng, &[o]),
            ],
            Box::new(move |g, v| {
                let y = g.conv1d(v[0], v[1], Some(v[2]), d)?;
                probe_sum(g, y, &p)
            }),
        ));
    }
    let p = p_to.clone();
    out.push((
        "affine",
        vec![
            random(rng, &[t, c]),
            random(rng, &[c, o]),
            random(rng, &[o]),
        ],
        Box::new(move |g, v| {
            let y = g.affine(v[0], v[1], Some(v[2]))?;
            probe_sum(g, y, &p)
        }),
    ));
    let p = random(rng, &[t, t]);
    out.push((
        "matmul",
        vec![random(rng, &[t, c]), random(rng, &[t, c])],
        Box::new(move |g, v| {
            let y = g.matmul(v[0], v[1], true)?;
            probe_sum(g, y, &p)
        }),
    ));
    let unary: [(&'static str, fn(&mut Graph<f64>, Var) -> Result<Var>); 4] = [
        ("softmax", |g, x| g.softmax_rows(x)),
        ("sigmoid", |g, x| Ok(g.sigmoid(x))),
        ("relu", |g, x| Ok(g.relu(x))),
        ("leaky_relu", |g, x| Ok(g.leaky_relu(x, 0.2))),
    ];
    for (name, f) in unary {
        let p = p_tc.clone();
        out.push((
            name,
            vec![random(rng, &[t, c])],
            Box::new(move |g, v| {
                let y = f(g, v[0])?;
                probe_sum(g, y, &p)
            }),
        ));
    }
    let p = random(rng, &[t, c + o]);
    out.push((
        "concat",
        vec![random(rng, &[t, c]), random(rng, &[t, o])],
        Box::new(move |g, v| {
            let y = g.concat_channels(&[v[0], v[1]])?;
            let y = g.square(y);
            probe_sum(g, y, &p)
        }),
    ));
    let p = p_tc.clone();
    let factors: Vec<f64> = (0..t * c).map(|_| rng.random_range(0.0..1.0)).collect();
    out.push((
        "add/sub/mul/scale",
        vec![random(rng, &[t, c]), random(rng, &[t, c])],
        Box::new(move |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let m = g.mul_const(m, factors.clone())?;
            let y = g.scale(m, 1.7);
            probe_sum(g, y, &p)
        }),
    ));
    out.push((
        "slice/select/reductions",
        vec![random(rng, &[t, c])],
        Box::new(move |g, v| {
            let s = g.slice_rows(v[0], 1, 5)?;
            let sel = g.select_rows(v[0], &[6, 0, 3])?;
            let a = g.abs_sum(s);
            let b = g.square(sel);
            let b = g.mean(b);
            g.add(a, b)
        }),
    ));
    out.push((
        "bce",
        vec![random(rng, &[t, 1])],
        Box::new(move |g, v| {
            let s = g.sigmoid(v[0]);
            let m = g.mean(s);
            g.bce(m, 1.0, 1e-7, 1.0 - 1e-7)
        }),
    ));
    out
}

/// One check per differentiable primitive.
pub fn primitive_checks(seed: u64, tol: f64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    primitive_programs(&mut rng)
        .into_iter()
        .map(|(name, inputs, f)| {
            let r = grad_check(f, &inputs, &opts)?;
            Ok(CheckRow::from_report(name, &r, tol))
        })
        .collect()
}

/// Random parameters with non-zero biases.
pub fn random_params(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ModelParams<f64>> {
    let mut p = ModelParams::<f64>::init(cfg, rng)?;
    for (name, t) in p.tensors_mut() {
        if name.ends_with(".bias") {
            for v in t.data_mut() {
                *v = rng.random_range(-0.2..0.2);
            }
        }
    }
    Ok(p)
}

fn conv(vars: &[Var], dilation: usize) -> Conv1dLayer {
    Conv1dLayer {
        weight: vars[0],
        bias: Some(vars[1]),
        dilation,
    }
}

/// One check per layer of a reduced-width model.
pub fn layer_checks(seed: u64, tol: f64) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions {
        tol,
        ..GradCheckOptions::default()
    };
    let (t, d, q) = (9, 8, 2);
    let x = random(&mut rng, &[t, d]);
    let mut rows = Vec::new();

    let mut inputs = vec![x.clone()];
    for _ in 0..3 {
        inputs.push(random(&mut rng, &[1, d, q]));
        inputs.push(random(&mut rng, &[q]));
    }
    let p = random(&mut rng, &[t, q]);
    let r = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let block = NonLocalBlock {
                query: conv(&v[1..], 1),
                key: conv(&v[3..], 1),
                value: conv(&v[5..], 1),
            };
            let y = block.forward(g, v[0])?;
            probe_sum(g, y, &p)
        },
        &inputs,
        &opts,
    )?;
    rows.push(CheckRow::from_report("non-local block", &r, tol));

    let cfg = ModelConfig {
        feature_dim: d,
        attention_hidden: 6,
        classifier_hidden: [5, 4],
        ..ModelConfig::default()
    };
    let params = random_params(&cfg, &mut rng)?;
    let mut inputs = vec![x];
    inputs.extend(params.tensors().iter().map(|(_, t)| t.clone()));
    let pe = random(&mut rng, &[t, d]);
    let ps = random(&mut rng, &[t, 1]);
    type Stage = fn(&Detector, &mut Graph<f64>, Var, &Tensor<f64>, &Tensor<f64>) -> Result<Var>;
    let stages: [(&str, Stage); 3] = [
        ("temporal embedding", |det, g, x, pe, _| {
            let y = det.temporal_embed(g, x)?;
            probe_sum(g, y, pe)
        }),
        ("attention unit", |det, g, x, _, ps| {
            let y = det.attention_forward(g, x)?;
            probe_sum(g, y, ps)
        }),
        ("snippet classifier", |det, g, x, _, ps| {
            let y = det.classify(g, x, false, &mut ChaCha8Rng::seed_from_u64(0))?;
            probe_sum(g, y, ps)
        }),
    ];
    for (name, stage) in stages {
        let r = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let det = Detector::from_vars(&cfg, &v[1..])?;
                stage(&det, g, v[0], &pe, &ps)
            },
            &inputs,
            &opts,
        )?;
        rows.push(CheckRow::from_report(name, &r, tol));
    }

    let inputs = vec![
        random(&mut rng, &[t, d]),
        random(&mut rng, &[d, 5]),
        random(&mut rng, &[5]),
    ];
    let p = random(&mut rng, &[t, 5]);
    let r = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let y = AffineLayer {
                weight: v[1],
                bias: v[2],
            }
            .forward(g, v[0])?;
            probe_sum(g, y, &p)
        },
        &inputs,
        &opts,
    )?;
    rows.push(CheckRow::from_report("affine layer", &r, tol));
    Ok(rows)
}

/// Total training loss against every parameter tensor of a full-width
/// model, dropout off. Runs at the switch iteration: before it the guide
/// target is a detached copy of the scores, which finite differences
/// cannot hold fixed.
pub fn loss_checks(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let cfg = ModelConfig {
        feature_dim: opts.feature_dim,
        ..opts.model.clone()
    };
    let params = random_params(&cfg, &mut rng)?;
    let n = 2 * opts.videos_per_label;
    let features: Vec<Tensor<f64>> = (0..n)
        .map(|_| random(&mut rng, &[opts.segments, cfg.feature_dim]))
        .collect();
    let labels: Vec<u8> = (0..n)
        .map(|i| u8::from(i >= opts.videos_per_label))
        .collect();
    let loss_cfg = opts.loss.clone();
    let step = loss_cfg.switch_iter;
    let fwd = ForwardOptions {
        eps: loss_cfg.eps,
        beta: 0.0,
        training: false,
    };
    let inputs: Vec<Tensor<f64>> = params.tensors().iter().map(|(_, t)| t.clone()).collect();
    let gc = GradCheckOptions {
        tol: opts.loss_tol,
        max_coords: opts.max_coords,
        seed: opts.seed,
        ..GradCheckOptions::default()
    };
    let report = grad_check(
        |g: &mut Graph<f64>, v: &[Var]| {
            let det = Detector::from_vars(&cfg, v)?;
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let mut outs = Vec::with_capacity(n);
            for x in &features {
                let xv = g.constant(x.clone());
                outs.push(det.forward(g, xv, &fwd, &mut r)?);
            }
            Ok(total_loss(g, &outs, &labels, step, &loss_cfg)?.0)
        },
        &inputs,
        &gc,
    )?;
    Ok(report
        .inputs
        .iter()
        .zip(params.tensors())
        .map(|(c, (name, _))| CheckRow {
            name: format!("loss / {name}"),
            coords: c.coords_checked,
            max_rel_error: c.max_rel_error,
            tol: opts.loss_tol,
        })
        .collect())
}

/// Primitives, layers and the full loss.
pub fn gradcheck_suite(opts: &SuiteOptions) -> Result<Vec<CheckRow>> {
    let mut rows = primitive_checks(opts.seed, opts.primitive_tol)?;
    rows.extend(layer_checks(opts.seed.wrapping_add(1), opts.primitive_tol)?);
    rows.extend(loss_checks(opts)?);
    Ok(rows)
}

/// Fixed-width text table with a PASS/FAIL column.
pub fn format_table(rows: &[CheckRow]) -> String {
    let width = rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
    let mut s = format!(
        "{:<width$}  {:>6}  {:>10}  {:>8}  result\n",
        "check", "coords", "rel error", "tol"
    );
    for r in rows {
        s += &format!(
            "{:<width$}  {:>6}  {:>10.3e}  {:>8.0e}  {}\n",
            r.name,
            r.coords,
            r.max_rel_error,
            r.tol,
            if r.passed() { "PASS" } else { "FAIL" }
        );
    }
    s
}
