//! Layer kernels with hand-derived reverse-mode backward passes.
//!
//! Weights are stored as f32 tensors; activations and every reduction are
//! carried in f64. Matrices are `[in x out]` row-major, so a forward pass is
//! `y = x W + b`.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    None,
    Relu,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `out = x W (+ b)`, W is `[x.len() x out.len()]`.
pub fn affine_into(x: &[f64], w: &[f32], b: Option<&[f32]>, out: &mut [f64]) {
    let n_out = out.len();
    debug_assert_eq!(w.len(), x.len() * n_out);
    match b {
        Some(b) => out.iter_mut().zip(b).for_each(|(o, &b)| *o = b as f64),
        None => out.iter_mut().for_each(|o| *o = 0.0),
    }
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &w[i * n_out..(i + 1) * n_out];
        for (o, &wij) in out.iter_mut().zip(row) {
            *o += xi * wij as f64;
        }
    }
}

/// Accumulates `dW += x^T dy` into a gradient buffer.
pub fn outer_acc(x: &[f64], dy: &[f64], dw: &mut [f32]) {
    let n_out = dy.len();
    for (i, &xi) in x.iter().enumerate() {
        if xi == 0.0 {
            continue;
        }
        let row = &mut dw[i * n_out..(i + 1) * n_out];
        for (g, &d) in row.iter_mut().zip(dy) {
            *g += (xi * d) as f32;
        }
    }
}

/// Accumulates `dx += dy W^T`.
pub fn backprop_input_acc(w: &[f32], dy: &[f64], dx: &mut [f64]) {
    let n_out = dy.len();
    for (i, d) in dx.iter_mut().enumerate() {
        let row = &w[i * n_out..(i + 1) * n_out];
        let mut s = 0.0;
        for (&wij, &g) in row.iter().zip(dy) {
            s += wij as f64 * g;
        }
        *d += s;
    }
}

pub fn add_acc(dst: &mut [f32], src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s as f32;
    }
}

// ---------------------------------------------------------------------------
// GRU

/// Borrowed GRU weights. Input weights are `[input x hidden]`, recurrent
/// weights `[hidden x hidden]`, biases `[hidden]`.
#[derive(Debug, Clone, Copy)]
pub struct GruWeights<'a> {
    pub input: usize,
    pub hidden: usize,
    pub w_z: &'a [f32],
    pub w_r: &'a [f32],
    pub w_c: &'a [f32],
    pub u_z: &'a [f32],
    pub u_r: &'a [f32],
    pub u_c: &'a [f32],
    pub b_z: &'a [f32],
    pub b_r: &'a [f32],
    pub b_c: &'a [f32],
}

/// Mutable gradient buffers matching [`GruWeights`].
#[derive(Debug)]
pub struct GruGrads<'a> {
    pub w_z: &'a mut [f32],
    pub w_r: &'a mut [f32],
    pub w_c: &'a mut [f32],
    pub u_z: &'a mut [f32],
    pub u_r: &'a mut [f32],
    pub u_c: &'a mut [f32],
    pub b_z: &'a mut [f32],
    pub b_r: &'a mut [f32],
    pub b_c: &'a mut [f32],
}

impl<'a> GruWeights<'a> {
    /// Builds a view from nine tensors in the order
    /// `w_z, w_r, w_c, u_z, u_r, u_c, b_z, b_r, b_c`, checking shapes.
    pub fn from_tensors(t: [&'a Tensor; 9]) -> Result<Self> {
        let input = t[0].rows();
        let hidden = t[0].cols();
        for (k, tensor) in t.iter().enumerate() {
            let expected: Vec<usize> = match k {
                0..=2 => vec![input, hidden],
                3..=5 => vec![hidden, hidden],
                _ => vec![hidden],
            };
            if tensor.shape() != expected.as_slice() {
                return Err(Error::Shape(format!(
                    "GRU weight {k} has shape {:?}, expected {expected:?}",
                    tensor.shape()
                )));
            }
        }
        Ok(GruWeights {
            input,
            hidden,
            w_z: t[0].data(),
            w_r: t[1].data(),
            w_c: t[2].data(),
            u_z: t[3].data(),
            u_r: t[4].data(),
            u_c: t[5].data(),
            b_z: t[6].data(),
            b_r: t[7].data(),
            b_c: t[8].data(),
        })
    }
}

/// Activations retained by one GRU step for the backward pass.
#[derive(Debug, Clone)]
pub struct GruStepCache {
    pub x: Vec<f64>,
    pub h_prev: Vec<f64>,
    pub z: Vec<f64>,
    pub r: Vec<f64>,
    pub c: Vec<f64>,
    pub rh: Vec<f64>,
    pub h: Vec<f64>,
}

pub fn gru_forward(w: &GruWeights<'_>, x: Vec<f64>, h_prev: Vec<f64>) -> GruStepCache {
    let h_dim = w.hidden;
    let mut z = vec![0.0; h_dim];
    let mut r = vec![0.0; h_dim];
    let mut c = vec![0.0; h_dim];
    let mut tmp = vec![0.0; h_dim];

    affine_into(&x, w.w_z, Some(w.b_z), &mut z);
    affine_into(&h_prev, w.u_z, None, &mut tmp);
    z.iter_mut().zip(&tmp).for_each(|(a, t)| *a = sigmoid(*a + t));

    affine_into(&x, w.w_r, Some(w.b_r), &mut r);
    affine_into(&h_prev, w.u_r, None, &mut tmp);
    r.iter_mut().zip(&tmp).for_each(|(a, t)| *a = sigmoid(*a + t));

    let rh: Vec<f64> = r.iter().zip(&h_prev).map(|(r, h)| r * h).collect();
    affine_into(&x, w.w_c, Some(w.b_c), &mut c);
    affine_into(&rh, w.u_c, None, &mut tmp);
    c.iter_mut().zip(&tmp).for_each(|(a, t)| *a = (*a + t).tanh());

    let h = (0..h_dim)
        .map(|k| (1.0 - z[k]) * h_prev[k] + z[k] * c[k])
        .collect();
    GruStepCache {
        x,
        h_prev,
        z,
        r,
        c,
        rh,
        h,
    }
}

/// Backward through one step. Accumulates weight gradients into `grads`
/// (when given), input gradient into `dx` (when given) and returns the
/// gradient with respect to the previous state.
pub fn gru_backward(
    w: &GruWeights<'_>,
    cache: &GruStepCache,
    dh: &[f64],
    grads: Option<&mut GruGrads<'_>>,
    dx: Option<&mut [f64]>,
) -> Vec<f64> {
    let h_dim = w.hidden;
    let mut da_z = vec![0.0; h_dim];
    let mut da_c = vec![0.0; h_dim];
    let mut dh_prev = vec![0.0; h_dim];
    for k in 0..h_dim {
        let z = cache.z[k];
        let c = cache.c[k];
        let dz = dh[k] * (c - cache.h_prev[k]);
        da_z[k] = dz * z * (1.0 - z);
        da_c[k] = dh[k] * z * (1.0 - c * c);
        dh_prev[k] = dh[k] * (1.0 - z);
    }
    let mut d_rh = vec![0.0; h_dim];
    backprop_input_acc(w.u_c, &da_c, &mut d_rh);
    let mut da_r = vec![0.0; h_dim];
    for k in 0..h_dim {
        let r = cache.r[k];
        dh_prev[k] += d_rh[k] * r;
        da_r[k] = d_rh[k] * cache.h_prev[k] * r * (1.0 - r);
    }
    backprop_input_acc(w.u_z, &da_z, &mut dh_prev);
    backprop_input_acc(w.u_r, &da_r, &mut dh_prev);

    if let Some(g) = grads {
        outer_acc(&cache.x, &da_z, g.w_z);
        outer_acc(&cache.x, &da_r, g.w_r);
        outer_acc(&cache.x, &da_c, g.w_c);
        outer_acc(&cache.h_prev, &da_z, g.u_z);
        outer_acc(&cache.h_prev, &da_r, g.u_r);
        outer_acc(&cache.rh, &da_c, g.u_c);
        add_acc(g.b_z, &da_z);
        add_acc(g.b_r, &da_r);
        add_acc(g.b_c, &da_c);
    }
    if let Some(dx) = dx {
        backprop_input_acc(w.w_z, &da_z, dx);
        backprop_input_acc(w.w_r, &da_r, dx);
        backprop_input_acc(w.w_c, &da_c, dx);
    }
    dh_prev
}

/// One GRU step: `z = s(x Wz + h Uz + bz)`, `r = s(x Wr + h Ur + br)`,
/// `c = tanh(x Wc + (r*h) Uc + bc)`, `h' = (1 - z) h + z c`.
pub fn gru_step(x: &[f64], h_prev: &[f64], w: &GruWeights<'_>) -> Result<Vec<f64>> {
    if x.len() != w.input || h_prev.len() != w.hidden {
        return Err(Error::Shape(format!(
            "gru_step expects input {} / state {}, got {} / {}",
            w.input,
            w.hidden,
            x.len(),
            h_prev.len()
        )));
    }
    Ok(gru_forward(w, x.to_vec(), h_prev.to_vec()).h)
}

// ---------------------------------------------------------------------------
// Embedding

pub fn embedding_lookup(indices: &[usize], table: &Tensor) -> Result<Tensor> {
    if table.shape().len() != 2 {
        return Err(Error::Shape("embedding table must be 2-D".into()));
    }
    let (v, e) = (table.rows(), table.cols());
    if indices.is_empty() {
        return Err(Error::InvalidShape("empty index sequence".into()));
    }
    let mut out = Vec::with_capacity(indices.len() * e);
    for &i in indices {
        if i >= v {
            return Err(Error::Index { index: i, len: v });
        }
        out.extend_from_slice(table.row(i));
    }
    Tensor::from_vec(&[indices.len(), e], out)
}

/// Scatters `upstream[len x E]` onto the looked-up rows of `grad_table`.
pub fn embedding_backward(indices: &[usize], upstream: &Tensor, grad_table: &mut Tensor) -> Result<()> {
    let (v, e) = (grad_table.rows(), grad_table.cols());
    if upstream.shape() != [indices.len(), e] {
        return Err(Error::Shape(format!(
            "upstream gradient shape {:?} does not match [{}, {e}]",
            upstream.shape(),
            indices.len()
        )));
    }
    for (pos, &i) in indices.iter().enumerate() {
        if i >= v {
            return Err(Error::Index { index: i, len: v });
        }
        let src = upstream.row(pos);
        for (g, &u) in grad_table.row_mut(i).iter_mut().zip(src) {
            *g += u;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Dense

fn check_dense(x_len: usize, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.shape().len() != 2 || w.rows() != x_len || b.shape() != [w.cols()] {
        return Err(Error::Shape(format!(
            "dense: x[{x_len}] W{:?} b{:?}",
            w.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn apply_activation(y: &mut [f64], act: Activation) {
    if act == Activation::Relu {
        y.iter_mut().for_each(|v| *v = v.max(0.0));
    }
}

/// `activation(x W + b)`.
pub fn dense(x: &[f64], w: &Tensor, b: &Tensor, act: Activation) -> Result<Vec<f64>> {
    check_dense(x.len(), w, b)?;
    let mut y = vec![0.0; w.cols()];
    affine_into(x, w.data(), Some(b.data()), &mut y);
    apply_activation(&mut y, act);
    Ok(y)
}

/// Backward of [`dense`] given its output `y`. Accumulates into `dw`, `db`
/// and returns the input gradient.
pub fn dense_backward(
    x: &[f64],
    w: &Tensor,
    y: &[f64],
    dy: &[f64],
    act: Activation,
    dw: &mut Tensor,
    db: &mut Tensor,
) -> Result<Vec<f64>> {
    if dy.len() != w.cols() || y.len() != w.cols() || x.len() != w.rows() {
        return Err(Error::Shape("dense_backward dimension mismatch".into()));
    }
    let da: Vec<f64> = match act {
        Activation::None => dy.to_vec(),
        Activation::Relu => dy
            .iter()
            .zip(y)
            .map(|(&g, &o)| if o > 0.0 { g } else { 0.0 })
            .collect(),
    };
    outer_acc(x, &da, dw.data_mut());
    add_acc(db.data_mut(), &da);
    let mut dx = vec![0.0; x.len()];
    backprop_input_acc(w.data(), &da, &mut dx);
    Ok(dx)
}

// ---------------------------------------------------------------------------
// Softmax

/// Numerically stable softmax, in place.
pub fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

/// Log-softmax via log-sum-exp.
pub fn log_softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Returns `(-log p[target], p)`. The logit gradient is `p - onehot(target)`.
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>)> {
    if target >= logits.len() {
        return Err(Error::Index {
            index: target,
            len: logits.len(),
        });
    }
    let log_p = log_softmax(logits);
    let loss = -log_p[target];
    let p = log_p.iter().map(|v| v.exp()).collect();
    Ok((loss, p))
}

/// `p - onehot(target)`.
pub fn softmax_cross_entropy_grad(p: &[f64], target: usize) -> Vec<f64> {
    let mut g = p.to_vec();
    g[target] -= 1.0;
    g
}

// ---------------------------------------------------------------------------
// Dropout

pub const MAX_DROPOUT: f64 = 0.5;

pub fn check_dropout_rate(rate: f64) -> Result<()> {
    if !(0.0..=MAX_DROPOUT).contains(&rate) {
        return Err(Error::Config(format!("dropout rate {rate} outside [0, {MAX_DROPOUT}]")));
    }
    Ok(())
}

/// Inverted-dropout multipliers: 0 with probability `rate`, else `1/(1-rate)`.
pub fn dropout_mask(len: usize, rate: f64, rng: &mut Rng) -> Vec<f64> {
    let keep = 1.0 / (1.0 - rate);
    (0..len)
        .map(|_| if rng.bernoulli(rate) { 0.0 } else { keep })
        .collect()
}

/// Inverted dropout; identity outside training or at rate 0.
pub fn dropout(x: &[f64], rate: f64, rng: &mut Rng, training: bool) -> Result<Vec<f64>> {
    check_dropout_rate(rate)?;
    if !training || rate == 0.0 {
        return Ok(x.to_vec());
    }
    let mask = dropout_mask(x.len(), rate, rng);
    Ok(x.iter().zip(&mask).map(|(a, m)| a * m).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::finite_diff_check;
    use crate::nn::init::{init_tensor, InitMethod, InitSpec};
    use crate::nn::params::ParamStore;

    fn zeros(shape: &[usize]) -> Tensor {
        Tensor::zeros(shape).unwrap()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        init_tensor(shape, &InitSpec::new(InitMethod::Normal, 1.0, seed).unwrap()).unwrap()
    }

    fn scaled(shape: &[usize], seed: u64, scale: f32) -> Tensor {
        let t = random(shape, seed);
        Tensor::from_vec(shape, t.data().iter().map(|v| v * scale).collect()).unwrap()
    }

    fn sigmoid_ref(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn gru_zero_weights_halves_state() {
        let t = [
            zeros(&[3, 2]),
            zeros(&[3, 2]),
            zeros(&[3, 2]),
            zeros(&[2, 2]),
            zeros(&[2, 2]),
            zeros(&[2, 2]),
            zeros(&[2]),
            zeros(&[2]),
            zeros(&[2]),
        ];
        let w = GruWeights::from_tensors(t.each_ref()).unwrap();
        let h = gru_step(&[1.0, -3.0, 0.5], &[0.4, -0.2], &w).unwrap();
        assert!((h[0] - 0.2).abs() < 1e-12 && (h[1] + 0.1).abs() < 1e-12);
        let h0 = gru_step(&[1.0, -3.0, 0.5], &[0.0, 0.0], &w).unwrap();
        assert_eq!(h0, vec![0.0, 0.0]);
        assert!(matches!(gru_step(&[1.0], &[0.0, 0.0], &w), Err(Error::Shape(_))));
    }

    #[test]
    fn gru_matches_scalar_equations() {
        for seed in 0..20u64 {
            let (e, h) = (1 + (seed as usize % 4), 1 + ((seed as usize / 4) % 4));
            let t: [Tensor; 9] = std::array::from_fn(|k| {
                let shape = match k {
                    0..=2 => vec![e, h],
                    3..=5 => vec![h, h],
                    _ => vec![h],
                };
                scaled(&shape, seed * 100 + k as u64, 0.7)
            });
            let w = GruWeights::from_tensors(t.each_ref()).unwrap();
            let x: Vec<f64> = (0..e).map(|i| (i as f64 * 0.37 + seed as f64).sin()).collect();
            let hp: Vec<f64> = (0..h).map(|i| (i as f64 * 0.61 - seed as f64).cos() * 0.8).collect();
            let got = gru_step(&x, &hp, &w).unwrap();

            // Independent scalar evaluation, element by element.
            let m = |t: &Tensor, i: usize, j: usize| t.data()[i * t.cols() + j] as f64;
            let mut r = vec![0.0; h];
            let mut z = vec![0.0; h];
            for j in 0..h {
                let mut az = t[6].data()[j] as f64;
                let mut ar = t[7].data()[j] as f64;
                for i in 0..e {
                    az += x[i] * m(&t[0], i, j);
                    ar += x[i] * m(&t[1], i, j);
                }
                for i in 0..h {
                    az += hp[i] * m(&t[3], i, j);
                    ar += hp[i] * m(&t[4], i, j);
                }
                z[j] = sigmoid_ref(az);
                r[j] = sigmoid_ref(ar);
            }
            for j in 0..h {
                let mut ac = t[8].data()[j] as f64;
                for i in 0..e {
                    ac += x[i] * m(&t[2], i, j);
                }
                for i in 0..h {
                    ac += r[i] * hp[i] * m(&t[5], i, j);
                }
                let c = ac.tanh();
                let expected = (1.0 - z[j]) * hp[j] + z[j] * c;
                assert!((got[j] - expected).abs() < 1e-12, "seed {seed} j {j}");
            }
        }
    }

    #[test]
    fn gru_backward_matches_finite_differences() {
        let (e, h) = (3, 4);
        let names = ["w_z", "w_r", "w_c", "u_z", "u_r", "u_c", "b_z", "b_r", "b_c"];
        let mut store = ParamStore::new();
        for (k, n) in names.iter().enumerate() {
            let shape = match k {
                0..=2 => vec![e, h],
                3..=5 => vec![h, h],
                _ => vec![h],
            };
            store.insert(n, scaled(&shape, 40 + k as u64, 0.6)).unwrap();
        }
        let xs = [vec![0.3, -0.5, 0.9], vec![-0.2, 0.4, 0.1], vec![0.7, 0.0, -0.6]];
        let coef = [0.5, -1.2, 0.8, 0.3];
        // loss = coef . h_3 after three steps, from zero state.
        let loss = |s: &ParamStore| -> f64 {
            let t: [&Tensor; 9] = std::array::from_fn(|k| s.values().get(k).unwrap());
            let w = GruWeights::from_tensors(t).unwrap();
            let mut hs = vec![0.0; h];
            for x in &xs {
                hs = gru_step(x, &hs, &w).unwrap();
            }
            hs.iter().zip(&coef).map(|(a, b)| a * b).sum()
        };
        // Analytic gradient through BPTT.
        {
            let (vals, grads) = store.split_mut();
            let t: [&Tensor; 9] = std::array::from_fn(|k| &vals[k]);
            let w = GruWeights::from_tensors(t).unwrap();
            let mut caches = Vec::new();
            let mut hs = vec![0.0; h];
            for x in &xs {
                let c = gru_forward(&w, x.clone(), hs);
                hs = c.h.clone();
                caches.push(c);
            }
            let [gwz, gwr, gwc, guz, gur, guc, gbz, gbr, gbc] = grads else {
                unreachable!()
            };
            let mut g = GruGrads {
                w_z: gwz.data_mut(),
                w_r: gwr.data_mut(),
                w_c: gwc.data_mut(),
                u_z: guz.data_mut(),
                u_r: gur.data_mut(),
                u_c: guc.data_mut(),
                b_z: gbz.data_mut(),
                b_r: gbr.data_mut(),
                b_c: gbc.data_mut(),
            };
            let mut dh = coef.to_vec();
            for c in caches.iter().rev() {
                dh = gru_backward(&w, c, &dh, Some(&mut g), None);
            }
        }
        let err = finite_diff_check(loss, &store, 1e-4);
        assert!(err < 1e-4, "max rel err {err}");
    }

    #[test]
    fn embedding_rows_and_errors() {
        let table = Tensor::from_vec(&[3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap();
        let out = embedding_lookup(&[0, 0], &table).unwrap();
        assert_eq!(out.row(0), out.row(1));
        let one_hot = embedding_lookup(&[2], &table).unwrap();
        assert_eq!(one_hot.row(0), &[0., 0., 1.]);
        assert!(matches!(embedding_lookup(&[3], &table), Err(Error::Index { index: 3, len: 3 })));
    }

    #[test]
    fn embedding_gradient_scatters_onto_rows() {
        let mut store = ParamStore::new();
        let id = store.insert("table", scaled(&[5, 3], 2, 0.5)).unwrap();
        let indices = [1usize, 3, 1];
        let upstream = Tensor::from_vec(&[3, 3], vec![0.5, -1.0, 2.0, 0.1, 0.2, 0.3, -0.7, 0.4, 1.5]).unwrap();
        embedding_backward(&indices, &upstream, store.grad_mut(id)).unwrap();
        let g = store.grad(id);
        assert!(g.row(0).iter().chain(g.row(2)).chain(g.row(4)).all(|&v| v == 0.0));
        let loss = |s: &ParamStore| -> f64 {
            let out = embedding_lookup(&indices, s.value(id)).unwrap();
            out.data()
                .iter()
                .zip(upstream.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        assert!(finite_diff_check(loss, &store, 1e-4) < 1e-6);
    }

    #[test]
    fn dense_identity_and_relu() {
        let w = Tensor::from_vec(&[2, 2], vec![1., 0., 0., 1.]).unwrap();
        let b = zeros(&[2]);
        assert_eq!(dense(&[-1.0, 2.0], &w, &b, Activation::None).unwrap(), vec![-1.0, 2.0]);
        assert_eq!(dense(&[-1.0, 2.0], &w, &b, Activation::Relu).unwrap(), vec![0.0, 2.0]);
        assert!(matches!(dense(&[1.0], &w, &b, Activation::None), Err(Error::Shape(_))));
    }

    #[test]
    fn dense_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let (n_in, n_out) = (1 + seed as usize % 8, 1 + (seed as usize * 3) % 8);
            for act in [Activation::None, Activation::Relu] {
                let mut store = ParamStore::new();
                let w_id = store.insert("w", scaled(&[n_in, n_out], seed, 0.8)).unwrap();
                let b_id = store.insert("b", scaled(&[n_out], seed + 50, 0.8)).unwrap();
                let x: Vec<f64> = (0..n_in).map(|i| ((i + 1) as f64 * 0.77 + seed as f64).sin()).collect();
                let coef: Vec<f64> = (0..n_out).map(|j| ((j + 2) as f64 * 1.3).cos()).collect();
                let loss = |s: &ParamStore| -> f64 {
                    let y = dense(&x, s.value(w_id), s.value(b_id), act).unwrap();
                    y.iter().zip(&coef).map(|(a, b)| a * b).sum()
                };
                let y = dense(&x, store.value(w_id), store.value(b_id), act).unwrap();
                let w = store.value(w_id).clone();
                let mut dw = zeros(&[n_in, n_out]);
                let mut db = zeros(&[n_out]);
                dense_backward(&x, &w, &y, &coef, act, &mut dw, &mut db).unwrap();
                *store.grad_mut(w_id) = dw;
                *store.grad_mut(b_id) = db;
                let err = finite_diff_check(loss, &store, 1e-4);
                assert!(err < 1e-4, "seed {seed} {act:?}: {err}");
            }
        }
    }

    #[test]
    fn softmax_cases() {
        let (loss, p) = softmax_cross_entropy(&[0.0; 50], 7).unwrap();
        assert!((loss - 50f64.ln()).abs() < 1e-12);
        assert!(p.iter().all(|&v| (v - 0.02).abs() < 1e-15));
        let (loss, p) = softmax_cross_entropy(&[1000.0, 0.0], 0).unwrap();
        assert!(loss.abs() < 1e-12 && loss.is_finite());
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(softmax_cross_entropy(&[0.0, 1.0], 2).is_err());
    }

    #[test]
    fn softmax_gradient_matches_finite_differences() {
        for seed in 0..10u64 {
            let v = 2 + seed as usize % 7;
            let logits: Vec<f64> = (0..v).map(|i| ((i as f64 + 1.0) * 1.7 + seed as f64).sin() * 3.0).collect();
            let target = seed as usize % v;
            let (_, p) = softmax_cross_entropy(&logits, target).unwrap();
            let g = softmax_cross_entropy_grad(&p, target);
            for k in 0..v {
                let eps = 1e-6;
                let mut hi = logits.clone();
                hi[k] += eps;
                let mut lo = logits.clone();
                lo[k] -= eps;
                let fd = (softmax_cross_entropy(&hi, target).unwrap().0
                    - softmax_cross_entropy(&lo, target).unwrap().0)
                    / (2.0 * eps);
                let rel = (fd - g[k]).abs() / fd.abs().max(g[k].abs()).max(1e-6);
                assert!(rel < 1e-4, "seed {seed} k {k}: {fd} vs {}", g[k]);
            }
        }
    }

    #[test]
    fn dropout_modes() {
        let mut rng = Rng::new(1);
        let x = vec![1.0, -2.0, 3.0];
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(dropout(&x, 0.4, &mut rng, false).unwrap(), x);
        assert!(matches!(dropout(&x, 0.6, &mut rng, true), Err(Error::Config(_))));
        assert!(dropout(&x, -0.1, &mut rng, false).is_err());
    }

    #[test]
    fn dropout_is_unbiased() {
        let mut rng = Rng::new(5);
        let x: Vec<f64> = (0..100_000).map(|i| 1.0 + (i % 10) as f64 * 0.1).collect();
        let y = dropout(&x, 0.5, &mut rng, true).unwrap();
        let mx = x.iter().sum::<f64>() / x.len() as f64;
        let my = y.iter().sum::<f64>() / y.len() as f64;
        assert!(((my - mx) / mx).abs() < 0.02, "{mx} vs {my}");
        assert!(y.iter().all(|&v| v == 0.0 || v >= 2.0));
    }
}
