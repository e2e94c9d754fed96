//! Labeled waveform datasets: assembly from detections, class balancing,
//! outlier filtering and stratified splits.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::{SpikeClass, SpikeWaveform, NUM_CLASSES, WAVEFORM_LEN};
use crate::pipeline::{capture_detections, PipelineOptions};
use crate::signal::{ms_to_ticks, Annotation, Recording};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabeledWaveform {
    pub waveform: SpikeWaveform,
    pub label: SpikeClass,
    /// Detection tick the waveform was captured after.
    pub origin_index: u64,
}

/// Runs the detector/capture FSM over `recording` and labels every capture.
///
/// A capture takes the class of the annotation nearest to its detection tick
/// when one lies within `label_window_ms`; otherwise it is a false positive.
pub fn build_dataset(
    recording: &Recording,
    annotations: &[Annotation],
    detector: &DetectorConfig,
    options: &PipelineOptions,
    label_window_ms: f64,
) -> Result<Vec<LabeledWaveform>> {
    let captures = capture_detections(recording, detector, options)?;
    let window = ms_to_ticks(label_window_ms, recording.sample_rate_hz);
    Ok(captures
        .into_iter()
        .map(|c| LabeledWaveform {
            waveform: c.waveform,
            label: label_for(c.detection_tick, annotations, window),
            origin_index: c.detection_tick,
        })
        .collect())
}

fn label_for(tick: u64, annotations: &[Annotation], window: f64) -> SpikeClass {
    let t = tick as f64;
    let i = annotations.partition_point(|a| a.sample_index < tick);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|k| annotations.get(k))
        .map(|a| ((a.sample_index as f64 - t).abs(), a))
        .filter(|(d, _)| *d <= window)
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .map(|(_, a)| SpikeClass::from(a.label))
        .unwrap_or(SpikeClass::F)
}

pub fn class_counts(data: &[LabeledWaveform]) -> [usize; NUM_CLASSES] {
    let mut counts = [0; NUM_CLASSES];
    for d in data {
        counts[d.label.index()] += 1;
    }
    counts
}

/// Uniformly downsamples every class to the size of the smallest one.
/// Retained samples keep their original relative order.
pub fn balance_classes(data: &[LabeledWaveform], seed: u64) -> Result<Vec<LabeledWaveform>> {
    let counts = class_counts(data);
    if let Some(c) = SpikeClass::ALL.iter().find(|c| counts[c.index()] == 0) {
        return Err(Error::Input(format!("class {c} has no samples")));
    }
    let target = *counts.iter().min().expect("three classes");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; data.len()];
    for class in SpikeClass::ALL {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
        idx.shuffle(&mut rng);
        for &i in &idx[..target] {
            keep[i] = true;
        }
    }
    Ok(data
        .iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(*d))
        .collect())
}

fn standardize(data: &[LabeledWaveform]) -> Vec<[f64; WAVEFORM_LEN]> {
    let n = data.len() as f64;
    let mut mean = [0.0; WAVEFORM_LEN];
    for d in data {
        for (m, v) in mean.iter_mut().zip(d.waveform.0) {
            *m += f64::from(v) / n;
        }
    }
    let mut std = [0.0; WAVEFORM_LEN];
    for d in data {
        for ((s, v), m) in std.iter_mut().zip(d.waveform.0).zip(&mean) {
            *s += (f64::from(v) - m).powi(2) / n;
        }
    }
    for s in std.iter_mut() {
        *s = if *s > 0.0 { s.sqrt() } else { 1.0 };
    }
    data.iter()
        .map(|d| {
            let mut z = [0.0; WAVEFORM_LEN];
            for (j, v) in d.waveform.0.iter().enumerate() {
                z[j] = (f64::from(*v) - mean[j]) / std[j];
            }
            z
        })
        .collect()
}

/// Removes samples whose `k` nearest neighbours (Euclidean, standardized
/// waveform space) contain at least `min_foreign` differently-labeled
/// samples. Distance ties are broken by index. Sets of `k` or fewer
/// samples are returned unchanged.
pub fn filter_outliers(data: &[LabeledWaveform], k: usize, min_foreign: usize) -> Vec<LabeledWaveform> {
    if data.len() <= k || k == 0 {
        return data.to_vec();
    }
    let z = standardize(data);
    let keep: Vec<bool> = (0..data.len())
        .into_par_iter()
        .map(|i| {
            let mut dist: Vec<(f64, usize)> = z
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(j, zj)| {
                    let d: f64 = z[i].iter().zip(zj).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            dist.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let foreign = dist[..k]
                .iter()
                .filter(|(_, j)| data[*j].label != data[i].label)
                .count();
            foreign < min_foreign
        })
        .collect();
    data.iter()
        .zip(keep)
        .filter_map(|(d, k)| k.then_some(*d))
        .collect()
}

/// Assigns each sample a fold in `0..folds`, round-robin within each class
/// after a seeded shuffle.
pub fn stratified_folds(labels: &[SpikeClass], folds: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![0; labels.len()];
    for class in SpikeClass::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        idx.shuffle(&mut rng);
        for (pos, i) in idx.into_iter().enumerate() {
            assignment[i] = pos % folds;
        }
    }
    assignment
}

/// Per-class seeded split; `fraction` of each class (rounded) goes to the
/// second part.
pub fn stratified_split(
    data: &[LabeledWaveform],
    fraction: f64,
    seed: u64,
) -> (Vec<LabeledWaveform>, Vec<LabeledWaveform>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut held = vec![false; data.len()];
    for class in SpikeClass::ALL {
        let mut idx: Vec<usize> = (0..data.len()).filter(|&i| data[i].label == class).collect();
        idx.shuffle(&mut rng);
        let n = (idx.len() as f64 * fraction).round() as usize;
        for &i in &idx[..n] {
            held[i] = true;
        }
    }
    let mut first = Vec::new();
    let mut second = Vec::new();
    for (d, h) in data.iter().zip(held) {
        if h {
            second.push(*d);
        } else {
            first.push(*d);
        }
    }
    (first, second)
}

pub fn write_dataset<W: Write>(mut w: W, data: &[LabeledWaveform]) -> Result<()> {
    for d in data {
        serde_json::to_writer(&mut w, d)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset<R: Read>(r: R) -> Result<Vec<LabeledWaveform>> {
    let mut out = Vec::new();
    for (n, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let d: LabeledWaveform = serde_json::from_str(&line)
            .map_err(|e| Error::format("dataset", format!("line {}: {e}", n + 1)))?;
        out.push(d);
    }
    Ok(out)
}

pub fn save_dataset(path: impl AsRef<Path>, data: &[LabeledWaveform]) -> Result<()> {
    write_dataset(BufWriter::new(File::create(path)?), data)
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<LabeledWaveform>> {
    read_dataset(File::open(path)?)
}
