//! Tape-based reverse-mode differentiation over small dense tensors.
//!
//! A [`Graph`] records every primitive as it executes. Handles to recorded
//! values are plain [`Var`] indices, so a graph can be built, queried and
//! differentiated without any shared ownership. [`Graph::backward`] walks the
//! tape once in reverse and returns the accumulated adjoints.
//!
//! Matrices are `[rows, cols]` with time along rows and channels along
//! columns. Convolutions run along the time axis with zero "same" padding.

mod backward;
mod gradcheck;

pub use backward::Gradients;
pub use gradcheck::{grad_check, CheckReport, GradCheckOptions, InputCheck, ZERO_GRADIENT_SCALE};

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{MatRef, Scalar};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op<S> {
    Leaf,
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    },
    Matmul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst {
        x: Var,
        factors: Vec<S>,
    },
    Scale {
        x: Var,
        factor: S,
    },
    Relu(Var),
    LeakyRelu {
        x: Var,
        slope: S,
    },
    Sigmoid(Var),
    SoftmaxRows(Var),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Square(Var),
    AbsSum(Var),
    Bce {
        p: Var,
        target: S,
        lo: S,
        hi: S,
    },
}

impl<S> Op<S> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Conv1d { .. } => "conv1d",
            Op::Matmul { .. } => "matmul",
            Op::AddBias { .. } => "add_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::Relu(_) => "relu",
            Op::LeakyRelu { .. } => "leaky_relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::SoftmaxRows(_) => "softmax_rows",
            Op::Dropout { .. } => "dropout",
            Op::Concat { .. } => "concat_channels",
            Op::SliceRows { .. } => "slice_rows",
            Op::SelectRows { .. } => "select_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::Square(_) => "square",
            Op::AbsSum(_) => "abs_sum",
            Op::Bce { .. } => "bce",
        }
    }
}

#[derive(Clone, Debug)]
pub(crate) struct Node<S> {
    pub(crate) value: Tensor<S>,
    pub(crate) op: Op<S>,
    pub(crate) requires_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Clone, Debug, Default)]
pub struct Graph<S> {
    pub(crate) nodes: Vec<Node<S>>,
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Names of the recorded operations in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiated leaf.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Copy of `v`'s current value that is cut off from differentiation.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    fn matrix_dims(&self, v: Var, what: &str) -> Result<(usize, usize)> {
        self.value(v)
            .dims2()
            .map_err(|e| Error::shape(format!("{what}: {e}")))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!(
                "{what}: shapes {sa:?} and {sb:?} differ"
            )));
        }
        Ok(())
    }

    /// Temporal convolution with zero "same" padding.
    ///
    /// `input` is `[T, Cin]`, `kernel` is `[K, Cin, Cout]`, `bias` is `[Cout]`.
    /// Tap `k` (zero-based) reads time index `t + (k + 1 - ceil(K/2)) * dilation`.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dilation: usize,
    ) -> Result<Var> {
        if dilation == 0 {
            return Err(Error::Param("conv1d dilation must be at least 1".into()));
        }
        let (t_len, c_in) = self.matrix_dims(input, "conv1d input")?;
        let (k_len, k_in, c_out) = match self.value(kernel).shape() {
            [k, ci, co] => (*k, *ci, *co),
            other => {
                return Err(Error::shape(format!(
                    "conv1d kernel must be [K, Cin, Cout], got {other:?}"
                )))
            }
        };
        if k_in != c_in {
            return Err(Error::shape(format!(
                "conv1d kernel expects {k_in} input channels, input has {c_in}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape(format!(
                    "conv1d bias must be [{c_out}], got {:?}",
                    self.value(b).shape()
                )));
            }
        }
        let mut out = vec![S::zero(); t_len * c_out];
        if let Some(b) = bias {
            let b = self.value(b).data();
            for row in out.chunks_mut(c_out) {
                row.copy_from_slice(b);
            }
        }
        {
            let x = self.value(input).data();
            let w = self.value(kernel).data();
            for k in 0..k_len {
                let shift = tap_shift(k, k_len, dilation);
                let Some((t0, rows)) = tap_rows(shift, t_len) else {
                    continue;
                };
                let src = (t0 as isize + shift) as usize;
                S::gemm_raw(
                    rows,
                    c_in,
                    c_out,
                    S::one(),
                    MatRef::row_major(x, c_in).with_offset(src * c_in),
                    MatRef::row_major(w, c_out).with_offset(k * c_in * c_out),
                    S::one(),
                    &mut out,
                    t0 * c_out,
                    c_out,
                );
            }
        }
        let mut deps = vec![input, kernel];
        deps.extend(bias);
        let rg = self.any_grad(&deps);
        let value = Tensor::new(vec![t_len, c_out], out)?;
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
            },
            rg,
        ))
    }

    /// `a · b`, or `a · bᵀ` when `transpose_b` is set.
    pub fn matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul lhs")?;
        let (br, bc) = self.matrix_dims(b, "matmul rhs")?;
        let (bk, n) = if transpose_b { (bc, br) } else { (br, bc) };
        if bk != k {
            return Err(Error::shape(format!(
                "matmul inner dimensions differ: [{m}, {k}] x [{bk}, {n}]"
            )));
        }
        let mut out = vec![S::zero(); m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            let bref = if transpose_b {
                MatRef::transposed(bv, bc)
            } else {
                MatRef::row_major(bv, bc)
            };
            S::gemm_raw(
                m,
                k,
                n,
                S::one(),
                MatRef::row_major(av, k),
                bref,
                S::zero(),
                &mut out,
                0,
                n,
            );
        }
        let rg = self.any_grad(&[a, b]);
        let value = Tensor::new(vec![m, n], out)?;
        Ok(self.push(value, Op::Matmul { a, b, transpose_b }, rg))
    }

    /// Adds a `[C]` bias to every row of a `[T, C]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(x, "bias add")?;
        if self.value(bias).shape() != [c] {
            return Err(Error::shape(format!(
                "bias must be [{c}], got {:?}",
                self.value(bias).shape()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(c) {
            for (o, &bb) in row.iter_mut().zip(&b) {
                *o = *o + bb;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias { x, bias }, rg))
    }

    /// `input · weight + bias` for `[T, Cin] · [Cin, Cout]`.
    pub fn affine(&mut self, input: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (_, c_in) = self.matrix_dims(input, "affine input")?;
        let (w_in, _) = self.matrix_dims(weight, "affine weight")?;
        if w_in != c_in {
            return Err(Error::shape(format!(
                "affine weight expects {w_in} inputs, input has {c_in}"
            )));
        }
        let prod = self.matmul(input, weight, false)?;
        match bias {
            Some(b) => self.add_bias(prod, b),
            None => Ok(prod),
        }
    }

    fn zip_with(
        &mut self,
        a: Var,
        b: Var,
        what: &str,
        op: Op<S>,
        f: impl Fn(S, S) -> S,
    ) -> Result<Var> {
        self.same_shape(a, b, what)?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", Op::Sub(a, b), |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "elementwise_mul", Op::Mul(a, b), |x, y| x * y)
    }

    /// Elementwise product with fixed, non-differentiated factors.
    pub fn mul_const(&mut self, x: Var, factors: Vec<S>) -> Result<Var> {
        let v = self.value(x);
        if factors.len() != v.numel() {
            return Err(Error::shape(format!(
                "mul_const: {} factors for {} elements",
                factors.len(),
                v.numel()
            )));
        }
        let data = v
            .data()
            .iter()
            .zip(&factors)
            .map(|(&a, &f)| a * f)
            .collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::MulConst { x, factors }, rg))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let value = self.value(x).map(|v| v * factor);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { S::zero() });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: S) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > S::zero() { v } else { v * slope });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid_scalar);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, c) = self.matrix_dims(x, "softmax_rows")?;
        let mut value = self.value(x).clone();
        if c > 0 {
            for row in value.data_mut().chunks_mut(c) {
                let max = row.iter().copied().fold(S::neg_infinity(), S::max);
                let mut total = S::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total = total + *v;
                }
                for v in row.iter_mut() {
                    *v = *v / total;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - rate)` while
    /// training; outside training, or at rate 0, the input is returned as is.
    pub fn dropout<R: Rng + ?Sized>(
        &mut self,
        x: Var,
        rate: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Param(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep = S::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<S> = (0..self.value(x).numel())
            .map(|_| {
                if rng.random::<f64>() < rate {
                    S::zero()
                } else {
                    keep
                }
            })
            .collect();
        let v = self.value(x);
        let data = v.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::new(v.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Dropout { x, mask }, rg))
    }

    /// Concatenates matrices along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| Error::shape("concat_channels needs at least one input"))?;
        let (t_len, _) = self.matrix_dims(first, "concat_channels")?;
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let (t, c) = self.matrix_dims(v, "concat_channels")?;
            if t != t_len {
                return Err(Error::shape(format!(
                    "concat_channels: time lengths {t_len} and {t} differ"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(t_len * total);
        for t in 0..t_len {
            for (&v, &w) in inputs.iter().zip(&widths) {
                data.extend_from_slice(&self.value(v).data()[t * w..(t + 1) * w]);
            }
        }
        let value = Tensor::new(vec![t_len, total], data)?;
        let rg = self.any_grad(inputs);
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (t, c) = self.matrix_dims(x, "slice_rows")?;
        if start > end || end > t {
            return Err(Error::shape(format!(
                "slice_rows {start}..{end} outside 0..{t}"
            )));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Gathers the listed rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (t, c) = self.matrix_dims(x, "select_rows")?;
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            if r >= t {
                return Err(Error::shape(format!("select_rows: row {r} outside 0..{t}")));
            }
            data.extend_from_slice(&self.value(x).data()[r * c..(r + 1) * c]);
        }
        let value = Tensor::new(vec![rows.len(), c], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().fold(S::zero(), |a, &b| a + b);
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Mean over all elements; the mean of an empty tensor is zero.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = v.numel();
        let total = v.data().iter().fold(S::zero(), |a, &b| a + b);
        let mean = if n == 0 {
            S::zero()
        } else {
            total / S::from_usize(n).unwrap()
        };
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(mean), Op::Mean(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * v);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Square(x), rg)
    }

    /// Sum of absolute values (L1 norm).
    pub fn abs_sum(&mut self, x: Var) -> Var {
        let total = self
            .value(x)
            .data()
            .iter()
            .fold(S::zero(), |a, &b| a + b.abs());
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::AbsSum(x), rg)
    }

    /// Binary cross-entropy of a scalar probability against a fixed target,
    /// with the probability clamped to `[lo, hi]`.
    pub fn bce(&mut self, p: Var, target: S, lo: S, hi: S) -> Result<Var> {
        let v = self.value(p);
        if v.numel() != 1 {
            return Err(Error::shape(format!(
                "bce expects a scalar probability, got shape {:?}",
                v.shape()
            )));
        }
        let pc = v.item().max(lo).min(hi);
        let loss = -(target * pc.ln() + (S::one() - target) * (S::one() - pc).ln());
        let rg = self.any_grad(&[p]);
        Ok(self.push(Tensor::scalar(loss), Op::Bce { p, target, lo, hi }, rg))
    }
}

pub(crate) fn sigmoid_scalar<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

/// Signed time offset of kernel tap `k` for a `k_len`-tap kernel.
pub(crate) fn tap_shift(k: usize, k_len: usize, dilation: usize) -> isize {
    (k as isize + 1 - k_len.div_ceil(2) as isize) * dilation as isize
}

/// Output rows `(first, count)` whose source row `t + shift` lies in `0..t_len`.
pub(crate) fn tap_rows(shift: isize, t_len: usize) -> Option<(usize, usize)> {
    let t = t_len as isize;
    let t0 = (-shift).max(0);
    let t1 = (t - shift).min(t);
    (t1 > t0).then(|| (t0 as usize, (t1 - t0) as usize))
}
