use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::scalar::{lit, Scalar};

/// Adam moments with L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    /// Completed updates.
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new(params: &ModelParams<S>) -> Self {
        let zeros = || {
            params
                .tensors()
                .iter()
                .map(|(_, t)| vec![S::zero(); t.numel()])
                .collect()
        };
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Applies one bias-corrected update. Gradients are checked before any
    /// parameter changes.
    pub fn step(
        &mut self,
        params: &mut ModelParams<S>,
        grads: &[Vec<S>],
        lr: f64,
        weight_decay: f64,
    ) -> Result<()> {
        if grads.len() != self.m.len() {
            return Err(Error::Usage(format!(
                "{} gradient tensors for {} parameters",
                grads.len(),
                self.m.len()
            )));
        }
        for ((name, t), g) in params.tensors().iter().zip(grads) {
            if g.len() != t.numel() {
                return Err(Error::shape(format!(
                    "gradient for `{name}` has {} elements",
                    g.len()
                )));
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
        self.t += 1;
        let (b1, b2) = (lit::<S>(self.beta1), lit::<S>(self.beta2));
        let c1 = lit::<S>(1.0 - self.beta1.powi(self.t as i32));
        let c2 = lit::<S>(1.0 - self.beta2.powi(self.t as i32));
        let (lr, wd, eps) = (lit::<S>(lr), lit::<S>(weight_decay), lit::<S>(self.eps));
        let one = S::one();
        for (i, (_, t)) in params.tensors_mut().enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, p) in t.data_mut().iter_mut().enumerate() {
                let g = grads[i][j] + wd * *p;
                m[j] = b1 * m[j] + (one - b1) * g;
                v[j] = b2 * v[j] + (one - b2) * g * g;
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *p = *p - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
