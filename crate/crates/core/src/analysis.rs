//! Offline post-processing and classification metrics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::detector::DetectorConfig;
use crate::error::{Error, Result};
use crate::nn::{SpikeClass, SpikeClassifier, NUM_CLASSES};
use crate::pipeline::{FsmState, HeadStage, PipelineEvent, PipelineOptions};
use crate::signal::{ms_to_ticks, Annotation, Recording};

/// Counts indexed `[true][predicted]` in `(CS, SS, F)` order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_CLASSES]; NUM_CLASSES]) -> Self {
        Self { counts }
    }

    pub fn from_pairs<I: IntoIterator<Item = (SpikeClass, SpikeClass)>>(pairs: I) -> Self {
        let mut cm = Self::default();
        for (t, p) in pairs {
            cm.add(t, p);
        }
        cm
    }

    pub fn add(&mut self, truth: SpikeClass, predicted: SpikeClass) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    /// One-vs-rest `(tp, fn, fp, tn)` for `class`.
    pub fn one_vs_rest(&self, class: SpikeClass) -> (u64, u64, u64, u64) {
        let k = class.index();
        let tp = self.counts[k][k];
        let fn_ = self.counts[k].iter().sum::<u64>() - tp;
        let fp = self.counts.iter().map(|row| row[k]).sum::<u64>() - tp;
        let tn = self.total() - tp - fn_ - fp;
        (tp, fn_, fp, tn)
    }
}

/// One-vs-rest accuracy `(Tn + Tp) / (Tn + Tp + Fn + Fp)`.
pub fn accuracy(cm: &ConfusionMatrix, class: SpikeClass) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::Input("confusion matrix is empty".into()));
    }
    let (tp, _, _, tn) = cm.one_vs_rest(class);
    Ok((tp + tn) as f64 / total as f64)
}

/// Unweighted mean of the per-class accuracies.
pub fn overall_accuracy(cm: &ConfusionMatrix) -> Result<f64> {
    let mut sum = 0.0;
    for c in SpikeClass::ALL {
        sum += accuracy(cm, c)?;
    }
    Ok(sum / NUM_CLASSES as f64)
}

pub fn precision(cm: &ConfusionMatrix, class: SpikeClass) -> Option<f64> {
    let (tp, _, fp, _) = cm.one_vs_rest(class);
    (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
}

pub fn recall(cm: &ConfusionMatrix, class: SpikeClass) -> Option<f64> {
    let (tp, fn_, _, _) = cm.one_vs_rest(class);
    (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
}

/// F1 score; `defined` is false when there are no true positives, in which
/// case `value` is 0.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub value: f64,
    pub defined: bool,
}

pub fn f1(cm: &ConfusionMatrix, class: SpikeClass) -> F1Score {
    let (tp, fn_, fp, _) = cm.one_vs_rest(class);
    if tp == 0 {
        return F1Score {
            value: 0.0,
            defined: false,
        };
    }
    let p = tp as f64 / (tp + fp) as f64;
    let r = tp as f64 / (tp + fn_) as f64;
    F1Score {
        value: 2.0 * p * r / (p + r),
        defined: true,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PostprocConfig {
    /// Window after each retained SS event in which all events are dropped.
    pub dead_zone_ms: f64,
}

impl Default for PostprocConfig {
    fn default() -> Self {
        Self { dead_zone_ms: 4.0 }
    }
}

impl PostprocConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.dead_zone_ms >= 0.0 && self.dead_zone_ms.is_finite()) {
            return Err(Error::Config("dead_zone_ms must be non-negative".into()));
        }
        Ok(())
    }
}

fn check_sorted(events: &[PipelineEvent]) -> Result<()> {
    if events.windows(2).any(|w| w[1].timestamp < w[0].timestamp) {
        return Err(Error::Input("events are not sorted by timestamp".into()));
    }
    Ok(())
}

/// Drops every event closer than the dead zone to the last retained simple
/// spike. Complex spikes do not open a dead zone.
pub fn apply_dead_zone(
    events: &[PipelineEvent],
    cfg: &PostprocConfig,
    sample_rate_hz: f64,
) -> Result<Vec<PipelineEvent>> {
    cfg.validate()?;
    check_sorted(events)?;
    let zone = ms_to_ticks(cfg.dead_zone_ms, sample_rate_hz);
    let mut last_ss: Option<u64> = None;
    let mut out = Vec::with_capacity(events.len());
    for e in events {
        if let Some(t) = last_ss {
            if ((e.timestamp - t) as f64) < zone {
                continue;
            }
        }
        if e.class == SpikeClass::SS {
            last_ss = Some(e.timestamp);
        }
        out.push(*e);
    }
    Ok(out)
}

/// Outcome of matching detected events against ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchResult {
    pub confusion: ConfusionMatrix,
    pub matched: u64,
    /// Unmatched annotations, by true class.
    pub missed: [u64; NUM_CLASSES],
    /// Unmatched events, by predicted class.
    pub spurious: [u64; NUM_CLASSES],
    /// `(true, predicted)` for every matched pair, missed annotation and
    /// spurious event.
    pub pairs: Vec<(SpikeClass, SpikeClass)>,
}

/// Greedy one-to-one matching in time order: each event takes the nearest
/// unmatched annotation within `tolerance_ms` (earlier one on ties).
///
/// Missed annotations count as `(truth, F)`, spurious events as
/// `(F, predicted)`.
pub fn match_events(
    events: &[PipelineEvent],
    annotations: &[Annotation],
    tolerance_ms: f64,
    sample_rate_hz: f64,
) -> Result<MatchResult> {
    check_sorted(events)?;
    if annotations.windows(2).any(|w| w[1].sample_index < w[0].sample_index) {
        return Err(Error::Input("annotations are not sorted".into()));
    }
    let tol = ms_to_ticks(tolerance_ms, sample_rate_hz);
    let mut used = vec![false; annotations.len()];
    let mut result = MatchResult {
        confusion: ConfusionMatrix::default(),
        matched: 0,
        missed: [0; NUM_CLASSES],
        spurious: [0; NUM_CLASSES],
        pairs: Vec::new(),
    };

    for e in events {
        let t = e.timestamp as f64;
        let start = annotations.partition_point(|a| (a.sample_index as f64) < t - tol);
        let mut best: Option<(usize, f64)> = None;
        for (i, a) in annotations.iter().enumerate().skip(start) {
            let d = a.sample_index as f64 - t;
            if d > tol {
                break;
            }
            if used[i] {
                continue;
            }
            if best.is_none_or(|(_, bd)| d.abs() < bd) {
                best = Some((i, d.abs()));
            }
        }
        let pair = match best {
            Some((i, _)) => {
                used[i] = true;
                result.matched += 1;
                (SpikeClass::from(annotations[i].label), e.class)
            }
            None => {
                result.spurious[e.class.index()] += 1;
                (SpikeClass::F, e.class)
            }
        };
        result.pairs.push(pair);
    }
    for (a, _) in annotations.iter().zip(&used).filter(|(_, u)| !**u) {
        let truth = SpikeClass::from(a.label);
        result.missed[truth.index()] += 1;
        result.pairs.push((truth, SpikeClass::F));
    }
    result.confusion = ConfusionMatrix::from_pairs(result.pairs.iter().copied());
    Ok(result)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub accuracy: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub f1: f64,
    pub f1_defined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub per_class: BTreeMap<String, ClassMetrics>,
    pub overall_accuracy: f64,
}

pub fn metrics_report(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let mut per_class = BTreeMap::new();
    for c in SpikeClass::ALL {
        let f = f1(cm, c);
        per_class.insert(
            c.to_string(),
            ClassMetrics {
                accuracy: accuracy(cm, c)?,
                precision: precision(cm, c),
                recall: recall(cm, c),
                f1: f.value,
                f1_defined: f.defined,
            },
        );
    }
    Ok(MetricsReport {
        confusion: *cm,
        per_class,
        overall_accuracy: overall_accuracy(cm)?,
    })
}

/// Writes a per-tick CSV trace for plotting: raw sample, smoothed sample,
/// smoothed NEO, threshold, FSM state, a detection marker and the class of
/// any event emitted on that tick.
pub fn write_trace<W: Write, C: SpikeClassifier + ?Sized>(
    w: W,
    recording: &Recording,
    detector: &DetectorConfig,
    model: &C,
    options: &PipelineOptions,
) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["tick", "raw", "smoothed", "neo", "threshold", "state", "detection", "event"])?;
    let mut stage = HeadStage::new(*detector, *options, recording.sample_rate_hz)?;
    for (tick, &x) in recording.samples.iter().enumerate() {
        let before = stage.state();
        let event = stage.step(x, model);
        let s = stage.detector_state();
        let detection = before == FsmState::Running && stage.state() == FsmState::Detected;
        let state = match stage.state() {
            FsmState::Init => "INIT",
            FsmState::Running => "RUNNING",
            FsmState::Detected => "DETECTED",
            FsmState::Classifying => "CLASSIFYING",
        };
        out.write_record([
            tick.to_string(),
            x.to_string(),
            s.y_signal.to_string(),
            s.y_neo.to_string(),
            s.threshold.to_string(),
            state.to_string(),
            u8::from(detection).to_string(),
            event.map(|e| e.class.to_string()).unwrap_or_default(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
