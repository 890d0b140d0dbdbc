//! Sigmoid multilayer perceptron trained by Adam on mean squared error.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{elapsed_since, Family, ModelMeta, ModelParams, SurfaceModel, TrainingSet};
use crate::error::{Error, Result};
use crate::rng::{tags, RngSeed};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpArch {
    /// Number of hidden layers `L`.
    pub layers: usize,
    pub width: usize,
    /// Bound `w` on every weight (biases are not bounded).
    pub weight_bound: f64,
}

impl Default for MlpArch {
    fn default() -> Self {
        MlpArch {
            layers: 2,
            width: 64,
            weight_bound: 10.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Total number of mini-batch updates.
    pub steps: usize,
    pub batch_size: usize,
    /// Initial Adam step size; decays on a cosine schedule to 2% of it.
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 3000,
            batch_size: 256,
            learning_rate: 0.01,
            seed: 0,
        }
    }
}

/// Affine map followed by the activation. `w` is `fan_in × fan_out`,
/// row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub fan_in: usize,
    pub fan_out: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Layer {
        Layer {
            fan_in: self.fan_in,
            fan_out: self.fan_out,
            w: vec![0.0; self.w.len()],
            b: vec![0.0; self.b.len()],
        }
    }

    /// `out = b + aᵀ·w` for one input row.
    fn affine(&self, a: &[f64], out: &mut [f64]) {
        out.copy_from_slice(&self.b);
        for (i, &ai) in a.iter().enumerate() {
            let row = &self.w[i * self.fan_out..(i + 1) * self.fan_out];
            for (o, wv) in out.iter_mut().zip(row) {
                *o += ai * wv;
            }
        }
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Network output at one standardized input.
pub(super) fn forward_one(layers: &[Layer], z: &[f64]) -> f64 {
    let mut a = z.to_vec();
    let last = layers.len() - 1;
    for (l, layer) in layers.iter().enumerate() {
        let mut out = vec![0.0; layer.fan_out];
        layer.affine(&a, &mut out);
        if l < last {
            out.iter_mut().for_each(|v| *v = sigmoid(*v));
        }
        a = out;
    }
    a[0]
}

/// Mean squared error over a batch and its gradient.
fn loss_grad(layers: &[Layer], x: &[&[f64]], y: &[f64], grads: &mut [Layer]) -> f64 {
    let n = x.len();
    let nl = layers.len();
    for g in grads.iter_mut() {
        g.w.iter_mut().for_each(|v| *v = 0.0);
        g.b.iter_mut().for_each(|v| *v = 0.0);
    }
    // acts[l] holds the batch input to layer l, row-major.
    let mut acts: Vec<Vec<f64>> = Vec::with_capacity(nl + 1);
    acts.push(x.iter().flat_map(|r| r.iter().copied()).collect());
    for (l, layer) in layers.iter().enumerate() {
        let prev = &acts[l];
        let mut next = vec![0.0; n * layer.fan_out];
        for r in 0..n {
            let out = &mut next[r * layer.fan_out..(r + 1) * layer.fan_out];
            layer.affine(&prev[r * layer.fan_in..(r + 1) * layer.fan_in], out);
            if l + 1 < nl {
                out.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
        }
        acts.push(next);
    }
    let out = &acts[nl];
    let mut loss = 0.0;
    let mut delta: Vec<f64> = (0..n)
        .map(|r| {
            let e = out[r] - y[r];
            loss += e * e;
            2.0 * e / n as f64
        })
        .collect();
    for l in (0..nl).rev() {
        let layer = &layers[l];
        let a = &acts[l];
        let g = &mut grads[l];
        for r in 0..n {
            let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
            for (bo, d) in g.b.iter_mut().zip(dr) {
                *bo += d;
            }
            for i in 0..layer.fan_in {
                let ai = a[r * layer.fan_in + i];
                let gw = &mut g.w[i * layer.fan_out..(i + 1) * layer.fan_out];
                for (gv, d) in gw.iter_mut().zip(dr) {
                    *gv += ai * d;
                }
            }
        }
        if l > 0 {
            let mut prev = vec![0.0; n * layer.fan_in];
            for r in 0..n {
                let dr = &delta[r * layer.fan_out..(r + 1) * layer.fan_out];
                for i in 0..layer.fan_in {
                    let ai = a[r * layer.fan_in + i];
                    let s = dot(dr, &layer.w[i * layer.fan_out..(i + 1) * layer.fan_out]);
                    prev[r * layer.fan_in + i] = s * ai * (1.0 - ai);
                }
            }
            delta = prev;
        }
    }
    loss / n as f64
}

fn init_layers<R: Rng>(rng: &mut R, d: usize, arch: &MlpArch) -> Vec<Layer> {
    let mut sizes = vec![d];
    sizes.extend(std::iter::repeat_n(arch.width, arch.layers));
    sizes.push(1);
    sizes
        .windows(2)
        .map(|s| {
            let a = (6.0 / (s[0] + s[1]) as f64).sqrt().min(arch.weight_bound);
            Layer {
                fan_in: s[0],
                fan_out: s[1],
                w: (0..s[0] * s[1]).map(|_| a * (2.0 * rng.random::<f64>() - 1.0)).collect(),
                b: vec![0.0; s[1]],
            }
        })
        .collect()
}

struct Adam {
    m: Vec<Layer>,
    v: Vec<Layer>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn step(&mut self, layers: &mut [Layer], grads: &[Layer], lr: f64, bound: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64], clip: bool| {
            for k in 0..p.len() {
                m[k] = Self::B1 * m[k] + (1.0 - Self::B1) * g[k];
                v[k] = Self::B2 * v[k] + (1.0 - Self::B2) * g[k] * g[k];
                p[k] -= lr * (m[k] / c1) / ((v[k] / c2).sqrt() + Self::EPS);
                if clip {
                    p[k] = p[k].clamp(-bound, bound);
                }
            }
        };
        for l in 0..layers.len() {
            update(&mut layers[l].w, &grads[l].w, &mut self.m[l].w, &mut self.v[l].w, true);
            update(&mut layers[l].b, &grads[l].b, &mut self.m[l].b, &mut self.v[l].b, false);
        }
    }
}

/// Trains a network. Single-threaded and fully determined by the data and
/// `train.seed`.
pub fn fit_mlp(data: &TrainingSet, arch: &MlpArch, train: &TrainConfig) -> Result<SurfaceModel> {
    let start = std::time::Instant::now();
    if arch.layers < 1 || arch.width < 1 {
        return Err(Error::Domain("MLP needs at least one hidden layer of width >= 1".into()));
    }
    if !(arch.weight_bound > 0.0) || train.batch_size == 0 || !(train.learning_rate > 0.0) {
        return Err(Error::Domain("MLP weight bound, batch size and learning rate must be positive".into()));
    }
    let (m, d) = (data.len(), data.dim());
    let z = data.standardized_inputs();
    let y = data.targets();
    let shift = y.iter().sum::<f64>() / m as f64;
    let sd = (y.iter().map(|v| (v - shift).powi(2)).sum::<f64>() / m as f64).sqrt();
    let scale = if sd > 0.0 { sd } else { 1.0 };
    let ys: Vec<f64> = y.iter().map(|v| (v - shift) / scale).collect();

    let mut rng = RngSeed(train.seed).derive(tags::TRAINING).stream(0, 0);
    let mut layers = init_layers(&mut rng, d, arch);
    let mut grads: Vec<Layer> = layers.iter().map(Layer::zeros_like).collect();
    let mut adam = Adam {
        m: layers.iter().map(Layer::zeros_like).collect(),
        v: layers.iter().map(Layer::zeros_like).collect(),
        t: 0,
    };
    let batch = train.batch_size.min(m);
    let per_epoch = m / batch;
    let mut order: Vec<usize> = (0..m).collect();
    let mut xb: Vec<&[f64]> = Vec::with_capacity(batch);
    let mut yb = Vec::with_capacity(batch);
    for step in 0..train.steps {
        let k = step % per_epoch;
        if k == 0 {
            order.shuffle(&mut rng);
        }
        xb.clear();
        yb.clear();
        for &i in &order[k * batch..(k + 1) * batch] {
            xb.push(z.row(i));
            yb.push(ys[i]);
        }
        let loss = loss_grad(&layers, &xb, &yb, &mut grads);
        if !loss.is_finite() {
            return Err(Error::Diverged { epoch: step / per_epoch });
        }
        let progress = step as f64 / train.steps as f64;
        let lr = train.learning_rate * (0.02 + 0.98 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()));
        adam.step(&mut layers, &grads, lr, arch.weight_bound);
    }
    if layers.iter().any(|l| l.w.iter().chain(&l.b).any(|v| !v.is_finite())) {
        return Err(Error::Diverged {
            epoch: train.steps / per_epoch,
        });
    }
    Ok(SurfaceModel {
        family: Family::Mlp,
        params: ModelParams::Mlp {
            arch: *arch,
            layers,
            target_shift: shift,
            target_scale: scale,
        },
        standardization: data.standardization().clone(),
        meta: ModelMeta {
            fit_seconds: elapsed_since(start),
            sample_size: m,
            hyperparameters: serde_json::json!({ "arch": arch, "train": train }),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::Matrix;

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = RngSeed(5).stream(0, 0);
        let arch = MlpArch {
            layers: 2,
            width: 6,
            weight_bound: 10.0,
        };
        let mut layers = init_layers(&mut rng, 3, &arch);
        for l in layers.iter_mut() {
            l.b.iter_mut().for_each(|b| *b = rng.random::<f64>() - 0.5);
        }
        let xs: Vec<Vec<f64>> = (0..8).map(|_| (0..3).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect()).collect();
        let x: Vec<&[f64]> = xs.iter().map(|r| r.as_slice()).collect();
        let y: Vec<f64> = (0..8).map(|_| rng.random::<f64>()).collect();
        let mut grads: Vec<Layer> = layers.iter().map(Layer::zeros_like).collect();
        loss_grad(&layers, &x, &y, &mut grads);
        let mut scratch = grads.clone();
        for _ in 0..5 {
            let l = rng.random_range(0..layers.len());
            let k = rng.random_range(0..layers[l].w.len());
            let h = 1e-6;
            let mut plus = layers.clone();
            plus[l].w[k] += h;
            let mut minus = layers.clone();
            minus[l].w[k] -= h;
            let fd = (loss_grad(&plus, &x, &y, &mut scratch) - loss_grad(&minus, &x, &y, &mut scratch)) / (2.0 * h);
            let an = grads[l].w[k];
            assert!((fd - an).abs() <= 1e-4 * an.abs().max(1e-8), "layer {l} weight {k}: {fd} vs {an}");
        }
    }

    #[test]
    fn constant_target_and_clipping() {
        let x = Matrix::from_fn(300, 2, |i, j| ((i * 13 + j * 7) % 17) as f64 / 8.0 - 1.0);
        let ts = TrainingSet::new(x.clone(), vec![-3.0; 300]).unwrap();
        let arch = MlpArch {
            layers: 2,
            width: 8,
            weight_bound: 0.5,
        };
        let train = TrainConfig {
            steps: 200,
            ..TrainConfig::default()
        };
        let model = fit_mlp(&ts, &arch, &train).unwrap();
        for v in model.evaluate(&x).unwrap() {
            assert!((v + 3.0).abs() < 0.03);
        }
        if let ModelParams::Mlp { layers, .. } = &model.params {
            assert!(layers.iter().flat_map(|l| &l.w).all(|w| w.abs() <= 0.5));
        }
    }

    #[test]
    fn training_is_reproducible() {
        let x = Matrix::from_fn(100, 1, |i, _| i as f64 / 50.0 - 1.0);
        let y: Vec<f64> = (0..100).map(|i| (i as f64 / 20.0).sin()).collect();
        let ts = TrainingSet::new(x, y).unwrap();
        let train = TrainConfig {
            steps: 50,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let a = fit_mlp(&ts, &MlpArch::default(), &train).unwrap();
        let b = fit_mlp(&ts, &MlpArch::default(), &train).unwrap();
        assert_eq!(a.params, b.params);
    }
}
