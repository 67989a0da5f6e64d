use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Gradient magnitude below which an input is treated as having no gradient.
pub const ZERO_GRADIENT_SCALE: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub eps: f64,
    /// Pass threshold on the per-input relative error.
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates per input.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct InputCheck {
    pub index: usize,
    pub coords_checked: usize,
    pub max_abs_error: f64,
    /// Largest absolute discrepancy divided by the largest gradient magnitude
    /// (analytic or numeric) over the checked coordinates. Falls back to the
    /// absolute error when every checked gradient is below
    /// [`ZERO_GRADIENT_SCALE`], where central differences only measure
    /// rounding noise.
    pub max_rel_error: f64,
}

#[derive(Clone, Debug)]
pub struct CheckReport {
    pub inputs: Vec<InputCheck>,
    pub tol: f64,
}

impl CheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs
            .iter()
            .map(|c| c.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.inputs.iter().all(|c| c.max_rel_error <= self.tol)
    }
}

fn evaluate<S: Scalar, F>(f: &F, inputs: &[Tensor<S>]) -> Result<(Graph<S>, Vec<Var>, Var)>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| graph.param(t.clone())).collect();
    let root = f(&mut graph, &vars)?;
    if graph.value(root).numel() != 1 {
        return Err(Error::Usage(format!(
            "grad_check needs a scalar-valued function, got shape {:?}",
            graph.value(root).shape()
        )));
    }
    Ok((graph, vars, root))
}

/// Compares reverse-mode gradients of a scalar tensor program against
/// central finite differences, input by input.
pub fn grad_check<S: Scalar, F>(
    f: F,
    inputs: &[Tensor<S>],
    opts: &GradCheckOptions,
) -> Result<CheckReport>
where
    F: Fn(&mut Graph<S>, &[Var]) -> Result<Var>,
{
    if inputs.iter().any(|t| !t.is_finite()) {
        return Err(Error::Usage("grad_check inputs must be finite".into()));
    }
    let (graph, vars, root) = evaluate(&f, inputs)?;
    let grads = graph.backward(root)?;
    let eps = S::from_f64_lossy(opts.eps);

    let mut work: Vec<Tensor<S>> = inputs.to_vec();
    let mut report = Vec::with_capacity(inputs.len());
    for (i, var) in vars.iter().enumerate() {
        let numel = inputs[i].numel();
        let coords: Vec<usize> = match opts.max_coords {
            Some(m) if m < numel => {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(opts.seed ^ (i as u64).wrapping_mul(0x9E37_79B9));
                let mut picked = index::sample(&mut rng, numel, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        let analytic = grads.wrt(*var);
        let mut max_abs: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for &c in &coords {
            let original = work[i].data()[c];
            let (up, down) = (original + eps, original - eps);
            work[i].data_mut()[c] = up;
            let plus = {
                let (g, _, r) = evaluate(&f, &work)?;
                g.value(r).item().to_f64_lossy()
            };
            work[i].data_mut()[c] = down;
            let minus = {
                let (g, _, r) = evaluate(&f, &work)?;
                g.value(r).item().to_f64_lossy()
            };
            work[i].data_mut()[c] = original;
            let numeric = (plus - minus) / (up - down).to_f64_lossy();
            let a = analytic.map_or(0.0, |g| g[c].to_f64_lossy());
            max_abs = max_abs.max((a - numeric).abs());
            scale = scale.max(a.abs()).max(numeric.abs());
        }
        let max_rel = if scale < ZERO_GRADIENT_SCALE {
            max_abs
        } else {
            max_abs / scale
        };
        report.push(InputCheck {
            index: i,
            coords_checked: coords.len(),
            max_abs_error: max_abs,
            max_rel_error: max_rel,
        });
    }
    Ok(CheckReport {
        inputs: report,
        tol: opts.tol,
    })
}
