//! Loop-based reference implementations used only by tests. Nothing here
//! touches the graph engine.

use crate::model::ModelParams;
use crate::tensor::Tensor;

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor<f64>) -> Rows {
    let c = t.shape()[1];
    t.data().chunks(c).map(|r| r.to_vec()).collect()
}

/// `out[t,o] = b[o] + Σ_{k=1..K, c} w[k,c,o] · x[t + (k − ⌈K/2⌉)·d, c]`, zero
/// outside the sequence.
pub fn conv(x: &Rows, w: &Tensor<f64>, b: Option<&Tensor<f64>>, d: usize) -> Rows {
    let (k_len, c_in, c_out) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    let t_len = x.len() as isize;
    let half = k_len.div_ceil(2) as isize;
    (0..t_len)
        .map(|t| {
            (0..c_out)
                .map(|o| {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for k1 in 1..=k_len {
                        let src = t + (k1 as isize - half) * d as isize;
                        if (0..t_len).contains(&src) {
                            for c in 0..c_in {
                                acc += w.data()[((k1 - 1) * c_in + c) * c_out + o]
                                    * x[src as usize][c];
                            }
                        }
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

pub fn affine(x: &Rows, w: &Tensor<f64>, b: &Tensor<f64>) -> Rows {
    let (c_in, c_out) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|r| {
            (0..c_out)
                .map(|o| {
                    b.data()[o]
                        + (0..c_in)
                            .map(|c| r[c] * w.data()[c * c_out + o])
                            .sum::<f64>()
                })
                .collect()
        })
        .collect()
}

pub fn map(x: &Rows, f: impl Fn(f64) -> f64) -> Rows {
    x.iter()
        .map(|r| r.iter().map(|&v| f(v)).collect())
        .collect()
}

pub fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

pub fn nonlocal(x: &Rows, p: &ModelParams<f64>) -> Rows {
    let get = |n: &str| p.get(n).unwrap();
    let proj = |part: &str| {
        conv(
            x,
            get(&format!("embed.nonlocal.{part}.weight")),
            p.get(&format!("embed.nonlocal.{part}.bias")),
            1,
        )
    };
    let (q, k, v) = (proj("query"), proj("key"), proj("value"));
    let t_len = x.len();
    (0..t_len)
        .map(|i| {
            let logits: Vec<f64> = (0..t_len)
                .map(|j| q[i].iter().zip(&k[j]).map(|(a, b)| a * b).sum())
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = e.iter().sum();
            (0..v[0].len())
                .map(|c| (0..t_len).map(|j| e[j] / z * v[j][c]).sum())
                .collect()
        })
        .collect()
}

pub fn embed(x: &Rows, p: &ModelParams<f64>) -> Rows {
    let mut cat: Rows = vec![Vec::new(); x.len()];
    for (i, d) in [1usize, 2, 4].into_iter().enumerate() {
        let w = p.get(&format!("embed.dilated.{i}.weight")).unwrap();
        let b = p.get(&format!("embed.dilated.{i}.bias"));
        for (row, part) in cat.iter_mut().zip(conv(x, w, b, d)) {
            row.extend(part);
        }
    }
    for (row, part) in cat.iter_mut().zip(nonlocal(x, p)) {
        row.extend(part);
    }
    let fused = conv(
        &cat,
        p.get("embed.aggregate.weight").unwrap(),
        p.get("embed.aggregate.bias"),
        1,
    );
    x.iter()
        .zip(fused)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + y).collect())
        .collect()
}

pub fn attention(fe: &Rows, p: &ModelParams<f64>) -> Vec<f64> {
    let slope = p.config().leaky_slope;
    let h = conv(
        fe,
        p.get("attention.0.weight").unwrap(),
        p.get("attention.0.bias"),
        1,
    );
    let h = map(&h, |v| if v > 0.0 { v } else { slope * v });
    let z = conv(
        &h,
        p.get("attention.1.weight").unwrap(),
        p.get("attention.1.bias"),
        1,
    );
    z.iter().map(|r| sigmoid(r[0])).collect()
}

/// Classifier scores with dropout disabled.
pub fn classify(fe: &Rows, p: &ModelParams<f64>) -> Vec<f64> {
    let layer = |x: &Rows, i: usize| {
        affine(
            x,
            p.get(&format!("classifier.{i}.weight")).unwrap(),
            p.get(&format!("classifier.{i}.bias")).unwrap(),
        )
    };
    let h = map(&layer(fe, 0), |v| v.max(0.0));
    let h = map(&layer(&h, 1), |v| v.max(0.0));
    layer(&h, 2).iter().map(|r| sigmoid(r[0])).collect()
}
