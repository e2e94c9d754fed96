//! Float MLP training: cross-entropy from logits, soft orthogonality
//! penalty, Adam, early stopping.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{DenseLayer, MlpModel, NUM_CLASSES, WAVEFORM_LEN};

use super::dataset::{stratified_split, LabeledWaveform};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub early_stop_patience: usize,
    pub val_fraction: f64,
    pub test_fraction: f64,
    pub adam: AdamConfig,
    pub batch_size: usize,
    /// Weight of the `||W^T W - I||_F^2` penalty.
    pub ortho_lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            early_stop_patience: 10,
            val_fraction: 0.10,
            test_fraction: 0.20,
            adam: AdamConfig::default(),
            batch_size: 64,
            ortho_lambda: 0.01,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        for (name, f) in [("val_fraction", self.val_fraction), ("test_fraction", self.test_fraction)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(Error::Config(format!("{name} must lie in (0, 1), got {f}")));
            }
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.ortho_lambda >= 0.0 && self.ortho_lambda.is_finite()) {
            return Err(Error::Config("ortho_lambda must be non-negative".into()));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::Config("adam.lr must be positive".into()));
        }
        Ok(())
    }
}

/// Gradients with the same shapes as the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Gradients {
    fn zeros_like(model: &MlpModel) -> Self {
        Self {
            weights: model.layers().iter().map(|l| vec![0.0; l.weights.len()]).collect(),
            biases: model.layers().iter().map(|l| vec![0.0; l.biases.len()]).collect(),
        }
    }
}

/// `log(sum(exp(z))) - z[label]`, evaluated stably.
pub fn cross_entropy_from_logits(logits: &[f64], label: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    lse - logits[label]
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// `||W^T W - I||_F^2` for a row-major `[out x in]` weight matrix.
pub fn orthogonality_penalty(layer: &DenseLayer) -> f64 {
    let gram = gram_minus_identity(layer);
    gram.iter().map(|v| v * v).sum()
}

fn gram_minus_identity(layer: &DenseLayer) -> Vec<f64> {
    let n = layer.inputs;
    let mut g = vec![0.0; n * n];
    for row in layer.weights.chunks_exact(n) {
        for a in 0..n {
            let ra = row[a];
            if ra == 0.0 {
                continue;
            }
            for b in 0..n {
                g[a * n + b] += ra * row[b];
            }
        }
    }
    for a in 0..n {
        g[a * n + a] -= 1.0;
    }
    g
}

/// Mean cross-entropy over `batch` plus `lambda * sum(penalty)`, and its
/// gradient with respect to every parameter.
pub fn loss_and_gradients(
    model: &MlpModel,
    batch: &[(&[f64], usize)],
    lambda: f64,
) -> (f64, Gradients) {
    let mut grads = Gradients::zeros_like(model);
    let layers = model.layers();
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;

    for (x, label) in batch {
        // Forward, keeping every layer's output.
        let mut outs: Vec<Vec<f64>> = Vec::with_capacity(layers.len());
        for l in layers {
            let input = outs.last().map(Vec::as_slice).unwrap_or(x);
            outs.push(l.forward(input));
        }
        let logits = outs.last().expect("at least one layer");
        loss += scale * cross_entropy_from_logits(logits, *label);

        let mut delta = softmax(logits);
        delta[*label] -= 1.0;
        delta.iter_mut().for_each(|d| *d *= scale);

        for li in (0..layers.len()).rev() {
            let l = &layers[li];
            let input: &[f64] = if li == 0 { x } else { &outs[li - 1] };
            let gw = &mut grads.weights[li];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                grads.biases[li][o] += d;
                for (g, v) in gw[o * l.inputs..(o + 1) * l.inputs].iter_mut().zip(input) {
                    *g += d * v;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; l.inputs];
                for (o, d) in delta.iter().enumerate() {
                    for (p, w) in prev.iter_mut().zip(&l.weights[o * l.inputs..(o + 1) * l.inputs]) {
                        *p += d * w;
                    }
                }
                // ReLU derivative of the previous layer.
                for (p, a) in prev.iter_mut().zip(&outs[li - 1]) {
                    if *a <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
    }

    if lambda > 0.0 {
        for (li, l) in layers.iter().enumerate() {
            let g = gram_minus_identity(l);
            loss += lambda * g.iter().map(|v| v * v).sum::<f64>();
            // d/dW ||W^T W - I||^2 = 4 W (W^T W - I)
            let n = l.inputs;
            for (o, row) in l.weights.chunks_exact(n).enumerate() {
                for b in 0..n {
                    let s: f64 = (0..n).map(|a| row[a] * g[a * n + b]).sum();
                    grads.weights[li][o * n + b] += 4.0 * lambda * s;
                }
            }
        }
    }
    (loss, grads)
}

/// Glorot-uniform weights, zero biases.
pub fn init_model(topology: &[usize], rng: &mut impl Rng) -> Result<MlpModel> {
    if topology.first() != Some(&WAVEFORM_LEN) || topology.last() != Some(&NUM_CLASSES) {
        return Err(Error::Model(format!(
            "topology must start at {WAVEFORM_LEN} and end at {NUM_CLASSES}, got {topology:?}"
        )));
    }
    let mut model = MlpModel::zeros(topology)?;
    for l in model.layers_mut() {
        let limit = (6.0 / (l.inputs + l.outputs) as f64).sqrt();
        for w in l.weights.iter_mut() {
            *w = rng.random_range(-limit..limit);
        }
    }
    Ok(model)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub epochs: Vec<EpochLog>,
    /// RMS of the training inputs; training runs on inputs divided by it and
    /// the factor is folded into the first layer afterwards.
    pub input_scale: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainingLog {
    /// One JSON object per epoch.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.epochs {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }
}

struct Adam {
    cfg: AdamConfig,
    t: i32,
    m: Gradients,
    v: Gradients,
}

impl Adam {
    fn new(cfg: AdamConfig, model: &MlpModel) -> Self {
        Self {
            cfg,
            t: 0,
            m: Gradients::zeros_like(model),
            v: Gradients::zeros_like(model),
        }
    }

    fn step(&mut self, model: &mut MlpModel, g: &Gradients) {
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let update = |p: &mut [f64], g: &[f64], m: &mut [f64], v: &mut [f64]| {
            for (((p, g), m), v) in p.iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = c.beta1 * *m + (1.0 - c.beta1) * g;
                *v = c.beta2 * *v + (1.0 - c.beta2) * g * g;
                *p -= c.lr * (*m / bc1) / ((*v / bc2).sqrt() + c.epsilon);
            }
        };
        for (li, l) in model.layers_mut().iter_mut().enumerate() {
            update(&mut l.weights, &g.weights[li], &mut self.m.weights[li], &mut self.v.weights[li]);
            update(&mut l.biases, &g.biases[li], &mut self.m.biases[li], &mut self.v.biases[li]);
        }
    }
}

fn as_inputs(data: &[LabeledWaveform], scale: f64) -> Vec<([f64; WAVEFORM_LEN], usize)> {
    data.iter()
        .map(|d| (d.waveform.to_f64().map(|v| v / scale), d.label.index()))
        .collect()
}

/// Root mean square of all input values, at least 1.
pub fn input_rms(data: &[LabeledWaveform]) -> f64 {
    let n = (data.len() * WAVEFORM_LEN).max(1) as f64;
    let ms: f64 = data
        .iter()
        .flat_map(|d| d.waveform.0)
        .map(|v| f64::from(v).powi(2))
        .sum::<f64>()
        / n;
    ms.sqrt().max(1.0)
}

fn dataset_loss(model: &MlpModel, data: &[([f64; WAVEFORM_LEN], usize)], lambda: f64) -> f64 {
    let ce: f64 = data
        .iter()
        .map(|(x, y)| {
            let logits = model.infer_float(x).expect("40 inputs");
            cross_entropy_from_logits(&logits, *y)
        })
        .sum::<f64>()
        / data.len().max(1) as f64;
    ce + lambda * model.layers().iter().map(orthogonality_penalty).sum::<f64>()
}

/// Trains a float model on `data`. A stratified `val_fraction` of it is held
/// out for early stopping; the weights of the best validation epoch are
/// returned. Deterministic for a given `cfg.seed`.
pub fn train_mlp(
    data: &[LabeledWaveform],
    topology: &[usize],
    cfg: &TrainConfig,
) -> Result<(MlpModel, TrainingLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Input("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (train_part, val_part) = stratified_split(data, cfg.val_fraction, rng.random());
    let train_part = if train_part.is_empty() { data } else { &train_part };
    let scale = input_rms(train_part);
    let train = as_inputs(train_part, scale);
    let val = as_inputs(if val_part.is_empty() { data } else { &val_part }, scale);

    let mut model = init_model(topology, &mut rng)?;
    let mut adam = Adam::new(cfg.adam, &model);
    let mut best = (f64::INFINITY, model.clone(), 0);
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut stale = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(&[f64], usize)> =
                chunk.iter().map(|&i| (&train[i].0[..], train[i].1)).collect();
            let (loss, grads) = loss_and_gradients(&model, &batch, cfg.ortho_lambda);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            train_loss += loss * chunk.len() as f64 / train.len() as f64;
            adam.step(&mut model, &grads);
        }
        let val_loss = dataset_loss(&model, &val, cfg.ortho_lambda);
        if !val_loss.is_finite() {
            return Err(Error::Diverged { epoch, loss: val_loss });
        }
        log.push(EpochLog {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best.0 {
            best = (val_loss, model.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.early_stop_patience {
                stopped_early = true;
                break;
            }
        }
    }

    let mut model = best.1;
    for w in model.layers_mut()[0].weights.iter_mut() {
        *w /= scale;
    }
    Ok((
        model,
        TrainingLog {
            epochs: log,
            input_scale: scale,
            best_epoch: best.2,
            stopped_early,
        },
    ))
}

/// Fraction of `data` whose float prediction matches the label.
pub fn float_accuracy(model: &MlpModel, data: &[LabeledWaveform]) -> f64 {
    use crate::nn::SpikeClassifier;
    let correct = data
        .iter()
        .filter(|d| model.classify_waveform(&d.waveform) == d.label)
        .count();
    correct as f64 / data.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, SpikeClass, SpikeWaveform};

    fn ce_via_softmax(logits: &[f64], label: usize) -> f64 {
        let s: f64 = logits.iter().map(|z| z.exp()).sum();
        -(logits[label].exp() / s).ln()
    }

    #[test]
    fn log_sum_exp_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..1000 {
            let z: Vec<f64> = (0..3).map(|_| rng.random_range(-20.0..20.0)).collect();
            let y = rng.random_range(0..3);
            let a = cross_entropy_from_logits(&z, y);
            let b = ce_via_softmax(&z, y);
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        // Stays finite where the naive form overflows.
        assert!(cross_entropy_from_logits(&[1000.0, 0.0, -1000.0], 1).is_finite());
    }

    #[test]
    fn gradient_at_zero_is_class_frequency_residual() {
        let model = MlpModel::zeros(&[40, 3]).unwrap();
        let inputs: Vec<Vec<f64>> = (0..6).map(|i| (0..40).map(|j| (i * j) as f64 * 0.1).collect()).collect();
        let labels = [0, 1, 1, 2, 2, 2];
        let batch: Vec<(&[f64], usize)> = inputs.iter().map(|x| x.as_slice()).zip(labels).collect();
        let (loss, g) = loss_and_gradients(&model, &batch, 0.0);
        assert!((loss - 3f64.ln()).abs() < 1e-12);
        let freq = [1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0];
        for k in 0..3 {
            assert!((g.biases[0][k] - (1.0 / 3.0 - freq[k])).abs() < 1e-12);
            for j in 0..40 {
                let expected: f64 = batch
                    .iter()
                    .map(|(x, y)| (1.0 / 3.0 - f64::from(u8::from(*y == k))) * x[j])
                    .sum::<f64>()
                    / 6.0;
                assert!((g.weights[0][k * 40 + j] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn orthonormal_rows_have_zero_penalty_when_square() {
        let mut l = DenseLayer::zeros(3, 3, Activation::Linear);
        for i in 0..3 {
            l.weights[i * 3 + i] = 1.0;
        }
        assert_eq!(orthogonality_penalty(&l), 0.0);
        l.weights[0] = 2.0;
        assert_eq!(orthogonality_penalty(&l), 9.0);
    }

    fn clusters(n: usize, seed: u64) -> Vec<LabeledWaveform> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let centres = [-60i32, 0, 60];
        (0..n)
            .map(|i| {
                let c = i % 3;
                let w = std::array::from_fn(|j| {
                    let shape = if j < 20 { centres[c] } else { -centres[c] / 2 };
                    (shape + rng.random_range(-8..=8)) as i8
                });
                LabeledWaveform {
                    waveform: SpikeWaveform(w),
                    label: SpikeClass::from_index(c).unwrap(),
                    origin_index: i as u64,
                }
            })
            .collect()
    }

    #[test]
    fn separable_clusters_reach_full_accuracy() {
        let data = clusters(300, 3);
        let cfg = TrainConfig {
            ortho_lambda: 0.001,
            ..Default::default()
        };
        let (model, log) = train_mlp(&data, &[40, 8, 3], &cfg).unwrap();
        assert_eq!(float_accuracy(&model, &data), 1.0);
        assert!(log.epochs.len() <= 100);
    }

    #[test]
    fn training_is_deterministic() {
        let data = clusters(90, 5);
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let a = train_mlp(&data, &[40, 4, 3], &cfg).unwrap();
        let b = train_mlp(&data, &[40, 4, 3], &cfg).unwrap();
        assert_eq!(a, b);
        let c = train_mlp(&data, &[40, 4, 3], &TrainConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a.0, c.0);
    }

    #[test]
    fn early_stopping_halts_after_patience() {
        // Random labels: validation loss cannot keep improving.
        let mut data = clusters(120, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in data.iter_mut() {
            d.label = SpikeClass::from_index(rng.random_range(0..3)).unwrap();
        }
        let cfg = TrainConfig {
            epochs: 1000,
            early_stop_patience: 3,
            adam: AdamConfig { lr: 0.05, ..Default::default() },
            ..Default::default()
        };
        let (_, log) = train_mlp(&data, &[40, 16, 3], &cfg).unwrap();
        assert!(log.stopped_early);
        assert_eq!(log.epochs.len(), log.best_epoch + 3);
        let best = log.epochs[log.best_epoch - 1].val_loss;
        assert!(log.epochs[log.best_epoch..].iter().all(|e| e.val_loss >= best));
    }

    #[test]
    fn divergence_is_reported() {
        let data = clusters(60, 2);
        let cfg = TrainConfig {
            adam: AdamConfig { lr: f64::INFINITY, ..Default::default() },
            ..Default::default()
        };
        assert!(matches!(train_mlp(&data, &[40, 3], &cfg), Err(Error::Diverged { .. })));
    }
}
