//! Feed-forward networks over a flat parameter buffer, with hand-written
//! backprop and Adam.
//!
//! Parameters live in one `Vec<f64>` so optimizers, finite-difference checks
//! and serialization all treat a model as a plain vector. Each layer stores a
//! row-major `in × out` weight block followed by its `out` biases.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    sizes: Vec<usize>,
}

/// Activations recorded by [`Mlp::forward_trace`]; `layers[0]` is the input.
#[derive(Debug, Clone)]
pub struct Trace {
    layers: Vec<Array2<f64>>,
}

impl Trace {
    pub fn output(&self) -> &Array2<f64> {
        self.layers.last().expect("trace has an output")
    }
}

impl Mlp {
    /// `sizes` lists input width, hidden widths, output width. Hidden layers
    /// use tanh; the output layer is linear.
    pub fn new(sizes: &[usize]) -> Self {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        Mlp {
            sizes: sizes.to_vec(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().unwrap()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn num_params(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn layer<'a>(&self, params: &'a [f64], l: usize) -> (ArrayView2<'a, f64>, ArrayView1<'a, f64>) {
        let offset: usize = self.sizes[..=l]
            .windows(2)
            .map(|w| w[0] * w[1] + w[1])
            .sum();
        let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = ArrayView2::from_shape((n_in, n_out), &params[offset..offset + n_in * n_out])
            .expect("weight block");
        let b = ArrayView1::from(&params[offset + n_in * n_out..offset + n_in * n_out + n_out]);
        (w, b)
    }

    fn offsets(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.sizes.len() - 1);
        let mut acc = 0;
        for w in self.sizes.windows(2) {
            out.push(acc);
            acc += w[0] * w[1] + w[1];
        }
        out
    }

    /// Uniform Glorot weights, zero biases.
    pub fn init<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        let mut params = vec![0.0; self.num_params()];
        for (offset, w) in self.offsets().into_iter().zip(self.sizes.windows(2)) {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit);
            for p in &mut params[offset..offset + w[0] * w[1]] {
                *p = dist.sample(rng);
            }
        }
        params
    }

    pub fn forward(&self, params: &[f64], x: ArrayView2<f64>) -> Array2<f64> {
        debug_assert_eq!(params.len(), self.num_params());
        let n_layers = self.sizes.len() - 1;
        let mut a = x.to_owned();
        for l in 0..n_layers {
            let (w, b) = self.layer(params, l);
            let mut z = a.dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            a = z;
        }
        a
    }

    pub fn forward_one(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let x = ArrayView2::from_shape((1, x.len()), x).expect("row vector");
        self.forward(params, x).into_raw_vec_and_offset().0
    }

    pub fn forward_trace(&self, params: &[f64], x: ArrayView2<f64>) -> Trace {
        let n_layers = self.sizes.len() - 1;
        let mut layers = Vec::with_capacity(n_layers + 1);
        layers.push(x.to_owned());
        for l in 0..n_layers {
            let (w, b) = self.layer(params, l);
            let mut z = layers[l].dot(&w);
            z += &b;
            if l + 1 < n_layers {
                z.mapv_inplace(f64::tanh);
            }
            layers.push(z);
        }
        Trace { layers }
    }

    /// Accumulates `dL/dparams` into `grad` and returns `dL/dinput`, given
    /// `dL/doutput` for the batch in `trace`.
    pub fn backward(
        &self,
        params: &[f64],
        trace: &Trace,
        grad_out: Array2<f64>,
        grad: &mut [f64],
    ) -> Array2<f64> {
        let n_layers = self.sizes.len() - 1;
        let offsets = self.offsets();
        let mut delta = grad_out;
        for l in (0..n_layers).rev() {
            if l + 1 < n_layers {
                // tanh'(z) = 1 - a²
                delta.zip_mut_with(&trace.layers[l + 1], |d, &a| *d *= 1.0 - a * a);
            }
            let (n_in, n_out) = (self.sizes[l], self.sizes[l + 1]);
            let input = &trace.layers[l];
            let gw = input.t().dot(&delta);
            let gb = delta.sum_axis(Axis(0));
            let off = offsets[l];
            for (g, v) in grad[off..off + n_in * n_out].iter_mut().zip(gw.iter()) {
                *g += v;
            }
            for (g, v) in grad[off + n_in * n_out..off + n_in * n_out + n_out]
                .iter_mut()
                .zip(gb.iter())
            {
                *g += v;
            }
            let (w, _) = self.layer(params, l);
            delta = delta.dot(&w.t());
        }
        delta
    }
}

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * grad[i];
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * grad[i] * grad[i];
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Row-wise softmax with the max subtracted for stability.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    out
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

pub fn one_hot(labels: &[usize], k: usize) -> Array2<f64> {
    let mut out = Array2::zeros((labels.len(), k));
    for (i, &l) in labels.iter().enumerate() {
        out[[i, l]] = 1.0;
    }
    out
}

pub fn concat_cols(parts: &[ArrayView2<f64>]) -> Array2<f64> {
    ndarray::concatenate(Axis(1), parts).expect("row counts agree")
}

/// Fixed per-feature affine map `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Standardizer {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    /// Column statistics of `x`; near-constant columns keep unit scale.
    pub fn fit(x: ArrayView2<f64>) -> Self {
        let n = x.nrows().max(1) as f64;
        let mean: Vec<f64> = x.map_axis(Axis(0), |c| c.sum() / n).to_vec();
        let std = x
            .axis_iter(Axis(1))
            .zip(&mean)
            .map(|(c, m)| {
                let sd = (c.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n).sqrt();
                if sd > 1e-6 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, std }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, x: ArrayView2<f64>) -> Array2<f64> {
        let mut out = x.to_owned();
        for ((mut c, m), s) in out.axis_iter_mut(Axis(1)).zip(&self.mean).zip(&self.std) {
            c.mapv_inplace(|v| (v - m) / s);
        }
        out
    }

    pub fn apply_one(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.std)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

pub fn column_rms(x: ArrayView2<f64>) -> Array1<f64> {
    let n = x.nrows().max(1) as f64;
    x.map_axis(Axis(0), |col| (col.iter().map(|v| v * v).sum::<f64>() / n).sqrt())
}

/// Central finite differences on `indices`, compared against `analytic`.
/// Relative error is `|a − n| / max(|a|, |n|, floor)`; the floor keeps
/// vanishing gradients from reporting noise as error.
pub fn max_relative_error(
    params: &[f64],
    analytic: &[f64],
    indices: &[usize],
    eps: f64,
    floor: f64,
    mut loss: impl FnMut(&[f64]) -> f64,
) -> f64 {
    let mut p = params.to_vec();
    let mut worst = 0.0f64;
    for &i in indices {
        let orig = p[i];
        p[i] = orig + eps;
        let plus = loss(&p);
        p[i] = orig - eps;
        let minus = loss(&p);
        p[i] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(floor);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// At least `min(count, n)` distinct parameter indices, drawn without
/// replacement.
pub fn sample_indices<R: Rng + ?Sized>(n: usize, count: usize, rng: &mut R) -> Vec<usize> {
    let mut idx = rand::seq::index::sample(rng, n, count.min(n)).into_vec();
    idx.sort_unstable();
    idx
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn param_count() {
        let mlp = Mlp::new(&[3, 4, 2]);
        assert_eq!(mlp.num_params(), 3 * 4 + 4 + 4 * 2 + 2);
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mlp = Mlp::new(&[3, 5, 4, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let params = mlp.init(&mut rng);
        let x = array![[0.1, -0.3, 0.7], [0.5, 0.2, -0.9], [-0.4, 0.8, 0.3]];
        let target = array![[0.2, -0.1], [0.0, 0.4], [-0.3, 0.3]];

        let loss = |p: &[f64]| {
            let y = mlp.forward(p, x.view());
            (&y - &target).mapv(|v| v * v).sum() * 0.5
        };
        let trace = mlp.forward_trace(&params, x.view());
        let mut grad = vec![0.0; params.len()];
        mlp.backward(&params, &trace, trace.output() - &target, &mut grad);

        let all: Vec<usize> = (0..params.len()).collect();
        let err = max_relative_error(&params, &grad, &all, 1e-5, 1e-8, loss);
        assert!(err < 1e-6, "max relative error {err}");
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mlp = Mlp::new(&[2, 3, 1]);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = mlp.init(&mut rng);
        let x = array![[0.3, -0.2]];
        let trace = mlp.forward_trace(&params, x.view());
        let mut grad = vec![0.0; params.len()];
        let gx = mlp.backward(&params, &trace, array![[1.0]], &mut grad);
        for j in 0..2 {
            let mut xp = x.clone();
            xp[[0, j]] += 1e-6;
            let mut xm = x.clone();
            xm[[0, j]] -= 1e-6;
            let num = (mlp.forward(&params, xp.view())[[0, 0]]
                - mlp.forward(&params, xm.view())[[0, 0]])
                / 2e-6;
            assert!((num - gx[[0, j]]).abs() < 1e-8);
        }
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let p = softmax_rows(array![[1000.0, 0.0, -1000.0], [0.0, 0.0, 0.0]].view());
        for row in p.rows() {
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.25, 0.25, 0.25, 0.25]), 0);
        assert_eq!(argmax(&[0.1, 0.4, 0.4]), 1);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        let mut p = vec![3.0, -2.0];
        let mut opt = Adam::new(2, 0.1);
        for _ in 0..500 {
            let g = vec![2.0 * p[0], 2.0 * p[1]];
            opt.step(&mut p, &g);
        }
        assert!(p.iter().all(|v| v.abs() < 1e-3), "{p:?}");
    }
}
