use super::{tap_rows, tap_shift, Graph, Op, Var};
use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};

/// Adjoints produced by one reverse sweep.
#[derive(Clone, Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Vec<S>>>,
    visited: Vec<usize>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the root with respect to `v`, if `v` was reached.
    pub fn wrt(&self, v: Var) -> Option<&[S]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Indices of the non-leaf nodes whose adjoints were propagated, in the
    /// order they were visited.
    pub fn visited(&self) -> &[usize] {
        &self.visited
    }
}

fn accumulate<S: Scalar>(
    grads: &mut [Option<Vec<S>>],
    graph: &Graph<S>,
    v: Var,
    f: impl FnOnce(&mut [S]),
) {
    let node = &graph.nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let slot = grads[v.0].get_or_insert_with(|| vec![S::zero(); node.value.numel()]);
    f(slot);
}

fn add_into<S: Scalar>(dst: &mut [S], src: &[S]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

impl<S: Scalar> Graph<S> {
    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<S>> {
        if self.value(root).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<S>>> = vec![None; root.0 + 1];
        let mut visited = Vec::new();
        if self.nodes[root.0].requires_grad {
            grads[root.0] = Some(vec![S::one()]);
        }
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else {
                continue;
            };
            visited.push(i);
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads, visited })
    }

    fn propagate(&self, i: usize, g: &[S], grads: &mut [Option<Vec<S>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
            } => {
                let x = self.value(*input);
                let w = self.value(*kernel);
                let (t_len, c_in) = (x.shape()[0], x.shape()[1]);
                let (k_len, c_out) = (w.shape()[0], w.shape()[2]);
                accumulate(grads, self, *input, |dx| {
                    for k in 0..k_len {
                        let shift = tap_shift(k, k_len, *dilation);
                        let Some((t0, rows)) = tap_rows(shift, t_len) else {
                            continue;
                        };
                        let src = (t0 as isize + shift) as usize;
                        // dx[src..] += g[t0..] · W_kᵀ
                        S::gemm_raw(
                            rows,
                            c_out,
                            c_in,
                            S::one(),
                            MatRef::row_major(g, c_out).with_offset(t0 * c_out),
                            MatRef {
                                data: w.data(),
                                offset: k * c_in * c_out,
                                row_stride: 1,
                                col_stride: c_out,
                            },
                            S::one(),
                            dx,
                            src * c_in,
                            c_in,
                        );
                    }
                });
                accumulate(grads, self, *kernel, |dw| {
                    for k in 0..k_len {
                        let shift = tap_shift(k, k_len, *dilation);
                        let Some((t0, rows)) = tap_rows(shift, t_len) else {
                            continue;
                        };
                        let src = (t0 as isize + shift) as usize;
                        // dW_k += x[src..]ᵀ · g[t0..]
                        S::gemm_raw(
                            c_in,
                            rows,
                            c_out,
                            S::one(),
                            MatRef {
                                data: x.data(),
                                offset: src * c_in,
                                row_stride: 1,
                                col_stride: c_in,
                            },
                            MatRef::row_major(g, c_out).with_offset(t0 * c_out),
                            S::one(),
                            dw,
                            k * c_in * c_out,
                            c_out,
                        );
                    }
                });
                if let Some(b) = bias {
                    accumulate(grads, self, *b, |db| {
                        for row in g.chunks(c_out) {
                            add_into(db, row);
                        }
                    });
                }
            }
            Op::Matmul { a, b, transpose_b } => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (br, bc) = (bv.shape()[0], bv.shape()[1]);
                let n = if *transpose_b { br } else { bc };
                accumulate(grads, self, *a, |da| {
                    // da = g · Bᵀ where B is the effective right operand.
                    let bt = if *transpose_b {
                        MatRef::row_major(bv.data(), bc)
                    } else {
                        MatRef::transposed(bv.data(), bc)
                    };
                    S::gemm_raw(
                        m,
                        n,
                        k,
                        S::one(),
                        MatRef::row_major(g, n),
                        bt,
                        S::one(),
                        da,
                        0,
                        k,
                    );
                });
                accumulate(grads, self, *b, |db| {
                    if *transpose_b {
                        // db[n×k] = gᵀ · A
                        S::gemm_raw(
                            n,
                            m,
                            k,
                            S::one(),
                            MatRef::transposed(g, n),
                            MatRef::row_major(av.data(), k),
                            S::one(),
                            db,
                            0,
                            k,
                        );
                    } else {
                        // db[k×n] = Aᵀ · g
                        S::gemm_raw(
                            k,
                            m,
                            n,
                            S::one(),
                            MatRef::transposed(av.data(), k),
                            MatRef::row_major(g, n),
                            S::one(),
                            db,
                            0,
                            n,
                        );
                    }
                });
            }
            Op::AddBias { x, bias } => {
                accumulate(grads, self, *x, |dx| add_into(dx, g));
                let c = self.value(*bias).numel();
                accumulate(grads, self, *bias, |db| {
                    for row in g.chunks(c) {
                        add_into(db, row);
                    }
                });
            }
            Op::Add(a, b) => {
                accumulate(grads, self, *a, |d| add_into(d, g));
                accumulate(grads, self, *b, |d| add_into(d, g));
            }
            Op::Sub(a, b) => {
                accumulate(grads, self, *a, |d| add_into(d, g));
                accumulate(grads, self, *b, |d| {
                    for (d, &gg) in d.iter_mut().zip(g) {
                        *d = *d - gg;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                accumulate(grads, self, *a, |d| {
                    for ((d, &gg), &y) in d.iter_mut().zip(g).zip(vb) {
                        *d = *d + gg * y;
                    }
                });
                accumulate(grads, self, *b, |d| {
                    for ((d, &gg), &x) in d.iter_mut().zip(g).zip(va) {
                        *d = *d + gg * x;
                    }
                });
            }
            Op::MulConst { x, factors: mask } | Op::Dropout { x, mask } => {
                accumulate(grads, self, *x, |d| {
                    for ((d, &gg), &m) in d.iter_mut().zip(g).zip(mask) {
                        *d = *d + gg * m;
                    }
                });
            }
            Op::Scale { x, factor } => {
                accumulate(grads, self, *x, |d| {
                    for (d, &gg) in d.iter_mut().zip(g) {
                        *d = *d + gg * *factor;
                    }
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, self, *x, |d| {
                    for ((d, &gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        if v > S::zero() {
                            *d = *d + gg;
                        }
                    }
                });
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                accumulate(grads, self, *x, |d| {
                    for ((d, &gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + if v > S::zero() { gg } else { gg * *slope };
                    }
                });
            }
            Op::Sigmoid(x) => {
                accumulate(grads, self, *x, |d| {
                    for ((d, &gg), &y) in d.iter_mut().zip(g).zip(out) {
                        *d = *d + gg * y * (S::one() - y);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                accumulate(grads, self, *x, |d| {
                    if c == 0 {
                        return;
                    }
                    for ((drow, grow), yrow) in d.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c))
                    {
                        let dot = grow
                            .iter()
                            .zip(yrow)
                            .fold(S::zero(), |acc, (&gg, &y)| acc + gg * y);
                        for ((d, &gg), &y) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d = *d + y * (gg - dot);
                        }
                    }
                });
            }
            Op::Concat { inputs } => {
                let t_len = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &v in inputs {
                    let w = self.value(v).shape()[1];
                    accumulate(grads, self, v, |d| {
                        for t in 0..t_len {
                            add_into(
                                &mut d[t * w..(t + 1) * w],
                                &g[t * total + col..t * total + col + w],
                            );
                        }
                    });
                    col += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.value.shape()[1];
                accumulate(grads, self, *x, |d| {
                    add_into(&mut d[start * c..start * c + g.len()], g);
                });
            }
            Op::SelectRows { x, rows } => {
                let c = node.value.shape()[1];
                accumulate(grads, self, *x, |d| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut d[r * c..(r + 1) * c], &g[i * c..(i + 1) * c]);
                    }
                });
            }
            Op::Sum(x) => {
                accumulate(grads, self, *x, |d| {
                    for d in d.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                if n > 0 {
                    let share = g[0] / S::from_usize(n).unwrap();
                    accumulate(grads, self, *x, |d| {
                        for d in d.iter_mut() {
                            *d = *d + share;
                        }
                    });
                }
            }
            Op::Square(x) => {
                let xv = self.value(*x).data();
                let two = S::one() + S::one();
                accumulate(grads, self, *x, |d| {
                    for ((d, &gg), &v) in d.iter_mut().zip(g).zip(xv) {
                        *d = *d + two * v * gg;
                    }
                });
            }
            Op::AbsSum(x) => {
                let xv = self.value(*x).data();
                accumulate(grads, self, *x, |d| {
                    for (d, &v) in d.iter_mut().zip(xv) {
                        if v > S::zero() {
                            *d = *d + g[0];
                        } else if v < S::zero() {
                            *d = *d - g[0];
                        }
                    }
                });
            }
            Op::Bce { p, target, lo, hi } => {
                let pv = self.value(*p).item();
                accumulate(grads, self, *p, |d| {
                    if pv > *lo && pv < *hi {
                        let dp = (pv - *target) / (pv * (S::one() - pv));
                        d[0] = d[0] + g[0] * dp;
                    }
                });
            }
        }
    }
}
