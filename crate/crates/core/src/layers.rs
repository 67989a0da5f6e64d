//! Composite temporal blocks built from graph primitives.
//!
//! Layers hold [`Var`] handles to parameters that were already placed on a
//! [`Graph`], so the same structs serve training, inference and gradient
//! checks.

use crate::diff::{Graph, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Dilations of the three local branches.
pub const DILATIONS: [usize; 3] = [1, 2, 4];

#[derive(Clone, Copy, Debug)]
pub struct Conv1dLayer {
    pub weight: Var,
    pub bias: Option<Var>,
    pub dilation: usize,
}

impl Conv1dLayer {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        g.conv1d(x, self.weight, self.bias, self.dilation)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AffineLayer {
    pub weight: Var,
    pub bias: Var,
}

impl AffineLayer {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, x: Var) -> Result<Var> {
        g.affine(x, self.weight, Some(self.bias))
    }
}

/// Global branch: embedded-Gaussian self-attention over time.
///
/// Query, key and value are kernel-size-1 convolutions `D -> D/4`. The output
/// is `softmax_rows(Q Kᵀ) V`, without a scaling factor or an internal
/// residual.
#[derive(Clone, Copy, Debug)]
pub struct NonLocalBlock {
    pub query: Conv1dLayer,
    pub key: Conv1dLayer,
    pub value: Conv1dLayer,
}

impl NonLocalBlock {
    /// Returns `(attention weights [T, T], output [T, D/4])`.
    pub fn forward_with_weights<S: Scalar>(&self, g: &mut Graph<S>, f: Var) -> Result<(Var, Var)> {
        let q = self.query.forward(g, f)?;
        let k = self.key.forward(g, f)?;
        let v = self.value.forward(g, f)?;
        let logits = g.matmul(q, k, true)?;
        let weights = g.softmax_rows(logits)?;
        let out = g.matmul(weights, v, false)?;
        Ok((weights, out))
    }

    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, f: Var) -> Result<Var> {
        Ok(self.forward_with_weights(g, f)?.1)
    }
}

/// Local branches: three independently parameterised dilated convolutions.
#[derive(Clone, Copy, Debug)]
pub struct DilatedBranch {
    pub branches: [Conv1dLayer; 3],
}

impl DilatedBranch {
    pub fn forward<S: Scalar>(&self, g: &mut Graph<S>, f: Var) -> Result<[Var; 3]> {
        let [a, b, c] = self.branches;
        Ok([a.forward(g, f)?, b.forward(g, f)?, c.forward(g, f)?])
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::{grad_check, GradCheckOptions};
    use crate::tensor::Tensor;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    fn conv(g: &mut Graph<f64>, w: Tensor<f64>, b: Tensor<f64>, dilation: usize) -> Conv1dLayer {
        Conv1dLayer {
            weight: g.param(w),
            bias: Some(g.param(b)),
            dilation,
        }
    }

    fn nonlocal(
        g: &mut Graph<f64>,
        rng: &mut ChaCha8Rng,
        d: usize,
    ) -> (NonLocalBlock, Vec<Tensor<f64>>) {
        let ts: Vec<Tensor<f64>> = (0..3)
            .flat_map(|_| [random(rng, &[1, d, d / 4]), random(rng, &[d / 4])])
            .collect();
        let block = NonLocalBlock {
            query: conv(g, ts[0].clone(), ts[1].clone(), 1),
            key: conv(g, ts[2].clone(), ts[3].clone(), 1),
            value: conv(g, ts[4].clone(), ts[5].clone(), 1),
        };
        (block, ts)
    }

    /// Projection by a kernel-size-1 convolution, written as plain loops.
    fn project(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Vec<Vec<f64>> {
        let (t_len, d) = (x.shape()[0], x.shape()[1]);
        let out = w.shape()[2];
        (0..t_len)
            .map(|t| {
                (0..out)
                    .map(|o| {
                        b.data()[o]
                            + (0..d)
                                .map(|c| x.data()[t * d + c] * w.data()[c * out + o])
                                .sum::<f64>()
                    })
                    .collect()
            })
            .collect()
    }

    #[test]
    fn nonlocal_matches_three_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (t_len, d) = (5, 8);
        let x = random(&mut rng, &[t_len, d]);
        let mut g = Graph::new();
        let (block, ts) = nonlocal(&mut g, &mut rng, d);
        let xv = g.constant(x.clone());
        let (weights, out) = block.forward_with_weights(&mut g, xv).unwrap();

        let q = project(&x, &ts[0], &ts[1]);
        let k = project(&x, &ts[2], &ts[3]);
        let v = project(&x, &ts[4], &ts[5]);
        for i in 0..t_len {
            let logits: Vec<f64> = (0..t_len)
                .map(|j| (0..d / 4).map(|c| q[i][c] * k[j][c]).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            let row_sum: f64 = g.value(weights).row(i).iter().sum();
            assert!((row_sum - 1.0).abs() < 1e-9);
            for c in 0..d / 4 {
                let expected: f64 = (0..t_len).map(|j| exps[j] / z * v[j][c]).sum();
                assert!((g.value(out).row(i)[c] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn nonlocal_single_step_returns_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let x = random(&mut rng, &[1, 8]);
        let mut g = Graph::new();
        let (block, ts) = nonlocal(&mut g, &mut rng, 8);
        let xv = g.constant(x.clone());
        let out = block.forward(&mut g, xv).unwrap();
        let v = project(&x, &ts[4], &ts[5]);
        for c in 0..2 {
            assert!((g.value(out).data()[c] - v[0][c]).abs() < 1e-15);
        }
    }

    #[test]
    fn nonlocal_constant_input_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let row: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x = Tensor::new(vec![6, 8], row.repeat(6)).unwrap();
        let mut g = Graph::new();
        let (block, ts) = nonlocal(&mut g, &mut rng, 8);
        let xv = g.constant(x.clone());
        let (weights, out) = block.forward_with_weights(&mut g, xv).unwrap();
        assert!(g
            .value(weights)
            .data()
            .iter()
            .all(|&w| (w - 1.0 / 6.0).abs() < 1e-12));
        let v = project(&x, &ts[4], &ts[5]);
        for t in 0..6 {
            for c in 0..2 {
                assert!((g.value(out).row(t)[c] - v[0][c]).abs() < 1e-12);
            }
        }
        // Permuting the (identical) rows changes nothing.
        let perm = Tensor::new(vec![6, 8], row.repeat(6)).unwrap();
        let pv = g.constant(perm);
        let out2 = block.forward(&mut g, pv).unwrap();
        assert_eq!(g.value(out).data(), g.value(out2).data());
    }

    #[test]
    fn dilated_zero_input_and_impulse_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        let d = 8;
        let mut g = Graph::new();
        let mk = |g: &mut Graph<f64>, rng: &mut ChaCha8Rng, dil| {
            conv(g, random(rng, &[3, d, d / 4]), random(rng, &[d / 4]), dil)
        };
        let branch = DilatedBranch {
            branches: [
                mk(&mut g, &mut rng, 1),
                mk(&mut g, &mut rng, 2),
                mk(&mut g, &mut rng, 4),
            ],
        };
        let zero = g.constant(Tensor::zeros(vec![9, d]));
        let outs = branch.forward(&mut g, zero).unwrap();
        for (o, layer) in outs.iter().zip(branch.branches) {
            let bias = g.value(layer.bias.unwrap()).data().to_vec();
            for t in 0..9 {
                assert_eq!(g.value(*o).row(t), bias.as_slice());
            }
        }

        // Bias-free impulse at t=3 through the dilation-4 branch.
        let mut impulse = Tensor::zeros(vec![9, d]);
        for c in 0..d {
            impulse.data_mut()[3 * d + c] = 1.0;
        }
        let iv = g.constant(impulse);
        let w = branch.branches[2].weight;
        let y = g.conv1d(iv, w, None, 4).unwrap();
        for t in 0..9 {
            let nonzero = g.value(y).row(t).iter().any(|&v| v != 0.0);
            assert_eq!(nonzero, t == 3 || t == 7, "t={t}");
        }
    }

    #[test]
    fn composed_blocks_pass_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(25);
        let d = 8;
        let mut inputs = vec![random(&mut rng, &[6, d])];
        for _ in 0..3 {
            inputs.push(random(&mut rng, &[1, d, d / 4]));
            inputs.push(random(&mut rng, &[d / 4]));
        }
        for _ in 0..3 {
            inputs.push(random(&mut rng, &[3, d, d / 4]));
            inputs.push(random(&mut rng, &[d / 4]));
        }
        let probe = random(&mut rng, &[6, d]);
        let report = grad_check(
            |g: &mut Graph<f64>, v: &[Var]| {
                let c = |i: usize, dil| Conv1dLayer {
                    weight: v[i],
                    bias: Some(v[i + 1]),
                    dilation: dil,
                };
                let nl = NonLocalBlock {
                    query: c(1, 1),
                    key: c(3, 1),
                    value: c(5, 1),
                };
                let db = DilatedBranch {
                    branches: [c(7, 1), c(9, 2), c(11, 4)],
                };
                let fg = nl.forward(g, v[0])?;
                let [a, b, cc] = db.forward(g, v[0])?;
                let cat = g.concat_channels(&[a, b, cc, fg])?;
                let p = g.constant(probe.clone());
                let m = g.mul(cat, p)?;
                let s = g.sigmoid(m);
                Ok(g.sum(s))
            },
            &inputs,
            &GradCheckOptions::default(),
        )
        .unwrap();
        assert!(report.max_rel_error() < 1e-5, "{report:?}");
    }
}
