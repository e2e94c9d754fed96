#![allow(dead_code)]

use headstage::detector::DetectorConfig;
use headstage::nn::{quantize, MlpModel, QuantizedMlpModel, SpikeWaveform};
use headstage::pipeline::PipelineOptions;
use headstage::signal::{generate_recording, Annotation, Recording, RecordingConfig, SynthesisParams};
use headstage::train::{build_dataset, prepare_training_part, stratified_split, train_mlp, CvConfig, LabeledWaveform, TrainConfig};

pub fn recording(duration_s: f64, seed: u64) -> (Recording, Vec<Annotation>) {
    let cfg = RecordingConfig {
        duration_s,
        seed,
        ..Default::default()
    };
    generate_recording(&cfg, &SynthesisParams::default()).unwrap()
}

pub fn dataset(duration_s: f64, seed: u64) -> Vec<LabeledWaveform> {
    let (rec, ann) = recording(duration_s, seed);
    build_dataset(&rec, &ann, &DetectorConfig::default(), &PipelineOptions::default(), 1.0).unwrap()
}

pub struct Trained {
    pub float: MlpModel,
    pub quantized: QuantizedMlpModel,
    pub train: Vec<LabeledWaveform>,
    pub test: Vec<LabeledWaveform>,
}

/// 80/20 split of a synthetic dataset; the training part is balanced and
/// filtered, the test part is left as detected.
pub fn trained(duration_s: f64, seed: u64, topology: &[usize]) -> Trained {
    let data = dataset(duration_s, seed);
    let (train, test) = stratified_split(&data, 0.2, seed);
    let train = prepare_training_part(&train, &CvConfig::default(), seed).unwrap();
    let cfg = TrainConfig {
        seed,
        ..Default::default()
    };
    let (float, _) = train_mlp(&train, topology, &cfg).unwrap();
    let calib: Vec<SpikeWaveform> = train.iter().map(|d| d.waveform).collect();
    let quantized = quantize(&float, &calib).unwrap();
    Trained {
        float,
        quantized,
        train,
        test,
    }
}

/// Smoothing recurrence evaluated over the whole vector.
pub fn smooth(x: &[f64], alpha: f64) -> Vec<f64> {
    let mut y = Vec::with_capacity(x.len());
    let mut prev = 0.0;
    for &v in x {
        prev = alpha * v + (1.0 - alpha) * prev;
        y.push(prev);
    }
    y
}

/// `psi[n] = y[n]^2 - y[n-1] * y[n+1]` with zero before the start.
pub fn batch_neo(y: &[f64]) -> Vec<f64> {
    (0..y.len().saturating_sub(1))
        .map(|n| {
            let before = if n == 0 { 0.0 } else { y[n - 1] };
            y[n] * y[n] - before * y[n + 1]
        })
        .collect()
}
