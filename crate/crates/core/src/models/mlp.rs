//! Dense feed-forward classifier.
//!
//! Hidden blocks are `Dense → ReLU → BatchNorm → Dropout`. The head is two
//! independent sigmoid units whose outputs are renormalized to sum to one;
//! training minimizes cross-entropy on the renormalized pair with Adam.

use super::{sigmoid, ModelError};
use crate::domain::Outcome;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpSpec {
    pub hidden: Vec<usize>,
    pub batch_norm: bool,
    pub dropout: f64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub train_fraction: f64,
    pub bn_momentum: f64,
    pub bn_epsilon: f64,
}

impl Default for MlpSpec {
    fn default() -> Self {
        Self {
            hidden: vec![64, 32, 32],
            batch_norm: true,
            dropout: 0.4,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-7,
            epochs: 400,
            batch_size: 16,
            train_fraction: 0.85,
            bn_momentum: 0.9,
            bn_epsilon: 1e-3,
        }
    }
}

impl MlpSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidSpec(m.to_string()));
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden widths must be non-empty and positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.learning_rate > 0.0) || !(self.adam_epsilon > 0.0) {
            return bad("learning rate and Adam epsilon must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must be in [0, 1)");
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch size must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train fraction must be in (0, 1)");
        }
        if !(0.0..1.0).contains(&self.bn_momentum) || !(self.bn_epsilon > 0.0) {
            return bad("batch-norm momentum must be in [0, 1) and epsilon positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    /// Row-major `n_out × n_in`.
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn he_normal(n_in: usize, n_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let sd = (2.0 / n_in as f64).sqrt();
        let normal = Normal::new(0.0, sd).expect("finite sd");
        // truncated at two standard deviations
        let w = (0..n_in * n_out)
            .map(|_| loop {
                let v: f64 = normal.sample(rng);
                if v.abs() <= 2.0 * sd {
                    break v;
                }
            })
            .collect();
        Self {
            n_in,
            n_out,
            w,
            b: vec![0.0; n_out],
        }
    }

    /// `out[r, o] = Σ_i x[r, i]·w[o, i] + b[o]` for `rows` rows.
    fn forward(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut out = vec![0.0; rows * self.n_out];
        for r in 0..rows {
            let xr = &x[r * self.n_in..(r + 1) * self.n_in];
            for o in 0..self.n_out {
                let wo = &self.w[o * self.n_in..(o + 1) * self.n_in];
                out[r * self.n_out + o] = self.b[o] + xr.iter().zip(wo).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct BatchNorm {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
}

impl BatchNorm {
    fn new(width: usize) -> Self {
        Self {
            gamma: vec![1.0; width],
            beta: vec![0.0; width],
            running_mean: vec![0.0; width],
            running_var: vec![1.0; width],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Hidden {
    dense: Dense,
    bn: Option<BatchNorm>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    spec: MlpSpec,
    hidden: Vec<Hidden>,
    output: Dense,
}

/// Activations kept from a training forward pass.
struct Cache {
    input: Vec<f64>,
    pre: Vec<f64>,
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    batch_mean: Vec<f64>,
    batch_var: Vec<f64>,
    /// Dropout scale per element: 0 or 1/(1−p); empty when dropout is off.
    keep: Vec<f64>,
}

struct Grads(Vec<Vec<f64>>);

impl Mlp {
    fn init(n_in: usize, spec: &MlpSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut hidden = Vec::new();
        let mut width = n_in;
        for &h in &spec.hidden {
            hidden.push(Hidden {
                dense: Dense::he_normal(width, h, rng),
                bn: spec.batch_norm.then(|| BatchNorm::new(h)),
            });
            width = h;
        }
        Self {
            spec: spec.clone(),
            hidden,
            output: Dense::he_normal(width, 2, rng),
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn n_inputs(&self) -> usize {
        self.hidden[0].dense.n_in
    }

    /// Parameter tensors in a fixed order shared with [`Grads`].
    fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut out = Vec::new();
        for h in &mut self.hidden {
            out.push(&mut h.dense.w);
            out.push(&mut h.dense.b);
            if let Some(bn) = &mut h.bn {
                out.push(&mut bn.gamma);
                out.push(&mut bn.beta);
            }
        }
        out.push(&mut self.output.w);
        out.push(&mut self.output.b);
        out
    }

    /// Inference: running batch-norm statistics, no dropout.
    pub fn predict_encoded(&self, x: &[f64]) -> [f64; 2] {
        let mut h = x.to_vec();
        for layer in &self.hidden {
            let mut a = layer.dense.forward(&h, 1);
            for v in &mut a {
                *v = v.max(0.0);
            }
            if let Some(bn) = &layer.bn {
                for (j, v) in a.iter_mut().enumerate() {
                    *v = bn.gamma[j] * (*v - bn.running_mean[j])
                        / (bn.running_var[j] + self.spec.bn_epsilon).sqrt()
                        + bn.beta[j];
                }
            }
            h = a;
        }
        let z = self.output.forward(&h, 1);
        let s = [sigmoid(z[0]), sigmoid(z[1])];
        let total = s[0] + s[1];
        [s[0] / total, s[1] / total]
    }

    /// Training-mode forward pass over a row-major batch. Returns per-layer
    /// caches and the output logits. Dropout is applied only when `rng` is given.
    fn forward_train(&self, x: &[f64], rows: usize, mut rng: Option<&mut ChaCha8Rng>) -> (Vec<Cache>, Vec<f64>) {
        let mut caches = Vec::with_capacity(self.hidden.len());
        let mut h = x.to_vec();
        let keep_scale = 1.0 / (1.0 - self.spec.dropout);
        for layer in &self.hidden {
            let width = layer.dense.n_out;
            let pre = layer.dense.forward(&h, rows);
            let mut act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            let (mut xhat, mut inv_std, mut batch_mean, mut batch_var) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new());
            if let Some(bn) = &layer.bn {
                batch_mean = vec![0.0; width];
                batch_var = vec![0.0; width];
                for r in 0..rows {
                    for j in 0..width {
                        batch_mean[j] += act[r * width + j];
                    }
                }
                batch_mean.iter_mut().for_each(|m| *m /= rows as f64);
                for r in 0..rows {
                    for j in 0..width {
                        batch_var[j] += (act[r * width + j] - batch_mean[j]).powi(2);
                    }
                }
                batch_var.iter_mut().for_each(|v| *v /= rows as f64);
                inv_std = batch_var
                    .iter()
                    .map(|v| 1.0 / (v + self.spec.bn_epsilon).sqrt())
                    .collect();
                xhat = vec![0.0; rows * width];
                for r in 0..rows {
                    for j in 0..width {
                        let k = r * width + j;
                        xhat[k] = (act[k] - batch_mean[j]) * inv_std[j];
                        act[k] = bn.gamma[j] * xhat[k] + bn.beta[j];
                    }
                }
            }
            let mut keep = Vec::new();
            if let (Some(rng), true) = (rng.as_deref_mut(), self.spec.dropout > 0.0) {
                keep = (0..rows * width)
                    .map(|_| if rng.random::<f64>() < self.spec.dropout { 0.0 } else { keep_scale })
                    .collect();
                for (a, k) in act.iter_mut().zip(&keep) {
                    *a *= k;
                }
            }
            caches.push(Cache {
                input: std::mem::replace(&mut h, act),
                pre,
                xhat,
                inv_std,
                batch_mean,
                batch_var,
                keep,
            });
        }
        let logits = self.output.forward(&h, rows);
        caches.push(Cache {
            input: h,
            pre: Vec::new(),
            xhat: Vec::new(),
            inv_std: Vec::new(),
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
            keep: Vec::new(),
        });
        (caches, logits)
    }

    /// Mean renormalized cross-entropy over the batch.
    fn loss(logits: &[f64], labels: &[Outcome]) -> f64 {
        let rows = labels.len();
        let mut total = 0.0;
        for (r, y) in labels.iter().enumerate() {
            let s = [sigmoid(logits[2 * r]), sigmoid(logits[2 * r + 1])];
            total -= (s[y.class_index()] / (s[0] + s[1])).ln();
        }
        total / rows as f64
    }

    fn backward(&self, caches: &[Cache], logits: &[f64], labels: &[Outcome]) -> Grads {
        let rows = labels.len();
        let inv_rows = 1.0 / rows as f64;
        // d loss / d logits for p_y = s_y / (s_0 + s_1)
        let mut dz = vec![0.0; rows * 2];
        for (r, y) in labels.iter().enumerate() {
            let s = [sigmoid(logits[2 * r]), sigmoid(logits[2 * r + 1])];
            let total = s[0] + s[1];
            for k in 0..2 {
                let own = if k == y.class_index() { 1.0 - s[k] } else { 0.0 };
                dz[2 * r + k] = inv_rows * (s[k] * (1.0 - s[k]) / total - own);
            }
        }

        let mut grads_rev: Vec<Vec<f64>> = Vec::new();
        let (dw, db, mut dh) = dense_backward(&self.output, &caches[self.hidden.len()].input, &dz, rows, true);
        grads_rev.push(db);
        grads_rev.push(dw);

        for (l, layer) in self.hidden.iter().enumerate().rev() {
            let c = &caches[l];
            let width = layer.dense.n_out;
            if !c.keep.is_empty() {
                for (d, k) in dh.iter_mut().zip(&c.keep) {
                    *d *= k;
                }
            }
            if let Some(bn) = &layer.bn {
                let mut dgamma = vec![0.0; width];
                let mut dbeta = vec![0.0; width];
                let mut sum_dxhat = vec![0.0; width];
                let mut sum_dxhat_xhat = vec![0.0; width];
                for r in 0..rows {
                    for j in 0..width {
                        let k = r * width + j;
                        dgamma[j] += dh[k] * c.xhat[k];
                        dbeta[j] += dh[k];
                        let dxhat = dh[k] * bn.gamma[j];
                        sum_dxhat[j] += dxhat;
                        sum_dxhat_xhat[j] += dxhat * c.xhat[k];
                    }
                }
                for r in 0..rows {
                    for j in 0..width {
                        let k = r * width + j;
                        let dxhat = dh[k] * bn.gamma[j];
                        dh[k] = c.inv_std[j] * inv_rows
                            * (rows as f64 * dxhat - sum_dxhat[j] - c.xhat[k] * sum_dxhat_xhat[j]);
                    }
                }
                grads_rev.push(dbeta);
                grads_rev.push(dgamma);
            }
            for (d, a) in dh.iter_mut().zip(&c.pre) {
                if *a <= 0.0 {
                    *d = 0.0;
                }
            }
            let (dw, db, dx) = dense_backward(&layer.dense, &c.input, &dh, rows, l > 0);
            grads_rev.push(db);
            grads_rev.push(dw);
            dh = dx;
        }
        grads_rev.reverse();
        Grads(grads_rev)
    }

    fn update_running_stats(&mut self, caches: &[Cache]) {
        let m = self.spec.bn_momentum;
        for (layer, c) in self.hidden.iter_mut().zip(caches) {
            if let Some(bn) = &mut layer.bn {
                for j in 0..bn.running_mean.len() {
                    bn.running_mean[j] = m * bn.running_mean[j] + (1.0 - m) * c.batch_mean[j];
                    bn.running_var[j] = m * bn.running_var[j] + (1.0 - m) * c.batch_var[j];
                }
            }
        }
    }

    /// Trains from scratch; returns the model and the mean loss per epoch.
    pub(super) fn fit(
        x: &[Vec<f64>],
        y: &[Outcome],
        spec: &MlpSpec,
        seed: u64,
    ) -> Result<(Mlp, Vec<f64>), ModelError> {
        if x.is_empty() {
            return Err(ModelError::EmptyTrainingSet);
        }
        let n_in = x[0].len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut model = Mlp::init(n_in, spec, &mut rng);
        let mut adam = Adam::new(&mut model, spec);
        let mut order: Vec<usize> = (0..x.len()).collect();
        let mut history = Vec::with_capacity(spec.epochs);
        let mut batch_x = Vec::with_capacity(spec.batch_size * n_in);
        let mut batch_y = Vec::with_capacity(spec.batch_size);
        for _ in 0..spec.epochs {
            order.shuffle(&mut rng);
            let mut epoch_loss = 0.0;
            for chunk in order.chunks(spec.batch_size) {
                batch_x.clear();
                batch_y.clear();
                for &i in chunk {
                    batch_x.extend_from_slice(&x[i]);
                    batch_y.push(y[i]);
                }
                let (caches, logits) = model.forward_train(&batch_x, chunk.len(), Some(&mut rng));
                epoch_loss += Mlp::loss(&logits, &batch_y) * chunk.len() as f64;
                let grads = model.backward(&caches, &logits, &batch_y);
                model.update_running_stats(&caches);
                adam.step(&mut model, &grads);
            }
            history.push(epoch_loss / x.len() as f64);
        }
        Ok((model, history))
    }
}

/// Returns `(dW, db, dX)`; `dX` is skipped (empty) when not needed.
fn dense_backward(layer: &Dense, input: &[f64], dout: &[f64], rows: usize, need_dx: bool) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n_in, n_out) = (layer.n_in, layer.n_out);
    let mut dw = vec![0.0; n_out * n_in];
    let mut db = vec![0.0; n_out];
    let mut dx = if need_dx { vec![0.0; rows * n_in] } else { Vec::new() };
    for r in 0..rows {
        let xr = &input[r * n_in..(r + 1) * n_in];
        for o in 0..n_out {
            let d = dout[r * n_out + o];
            if d == 0.0 {
                continue;
            }
            db[o] += d;
            let row = &mut dw[o * n_in..(o + 1) * n_in];
            for (g, xv) in row.iter_mut().zip(xr) {
                *g += d * xv;
            }
            if need_dx {
                let wo = &layer.w[o * n_in..(o + 1) * n_in];
                for (dxv, wv) in dx[r * n_in..(r + 1) * n_in].iter_mut().zip(wo) {
                    *dxv += d * wv;
                }
            }
        }
    }
    (dw, db, dx)
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
}

impl Adam {
    fn new(model: &mut Mlp, spec: &MlpSpec) -> Self {
        let shapes: Vec<usize> = model.params_mut().iter().map(|p| p.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            lr: spec.learning_rate,
            beta1: spec.beta1,
            beta2: spec.beta2,
            eps: spec.adam_epsilon,
        }
    }

    fn step(&mut self, model: &mut Mlp, grads: &Grads) {
        self.t += 1;
        let lr_t = self.lr * (1.0 - self.beta2.powi(self.t)).sqrt() / (1.0 - self.beta1.powi(self.t));
        for (((p, g), m), v) in model
            .params_mut()
            .into_iter()
            .zip(&grads.0)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for k in 0..p.len() {
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * g[k];
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * g[k] * g[k];
                p[k] -= lr_t * m[k] / (v[k].sqrt() + self.eps);
            }
        }
    }
}
