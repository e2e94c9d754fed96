//! Head-stage controller.
//!
//! A sample-serial finite-state machine drives the detector, the 40-sample
//! capture buffer and the classifier:
//!
//! ```text
//! INIT --converged--> RUNNING --detection--> DETECTED --40 samples--> CLASSIFYING
//!                        ^                                                 |
//!                        +------------------ classify_ticks ---------------+
//! ```
//!
//! The threshold is only updated in INIT. The detector keeps filtering in
//! every state so the capture sees continuous smoothed samples, but
//! detections are only honoured in RUNNING.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::detector::{DetectorConfig, DetectorState, Detector};
use crate::error::{Error, Result};
use crate::nn::{reduce_sample, SpikeClass, SpikeClassifier, SpikeWaveform, WAVEFORM_LEN};
use crate::signal::Recording;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FsmState {
    Init,
    Running,
    Detected,
    Classifying,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineOptions {
    /// Sample ticks spent in CLASSIFYING per detection.
    pub classify_ticks: u32,
    /// Emit events classified as F instead of dropping them.
    pub store_false_positives: bool,
}

impl Default for PipelineOptions {
    fn default() -> Self {
        Self {
            classify_ticks: 1,
            store_false_positives: false,
        }
    }
}

impl PipelineOptions {
    pub fn validate(&self) -> Result<()> {
        if self.classify_ticks == 0 {
            return Err(Error::Config("classify_ticks must be at least 1".into()));
        }
        Ok(())
    }
}

/// Reduced-precision samples captured after a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaptureBuffer {
    pub samples: [i8; WAVEFORM_LEN],
    pub fill_count: usize,
    pub detection_tick: u64,
}

impl CaptureBuffer {
    fn empty() -> Self {
        Self {
            samples: [0; WAVEFORM_LEN],
            fill_count: 0,
            detection_tick: 0,
        }
    }

    pub fn is_full(&self) -> bool {
        self.fill_count == WAVEFORM_LEN
    }

    pub fn waveform(&self) -> SpikeWaveform {
        SpikeWaveform(self.samples)
    }
}

/// Condensed output of the head stage: when a spike happened and its type.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PipelineEvent {
    pub timestamp: u64,
    pub class: SpikeClass,
}

/// Per-run accounting, used as input to the energy model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub sample_rate_hz: f64,
    pub total_ticks: u64,
    pub init_ticks: u64,
    pub running_ticks: u64,
    pub detected_ticks: u64,
    pub classifying_ticks: u64,
    /// Detections honoured in RUNNING.
    pub detections: u64,
    pub classify_invocations: u64,
    pub classified_cs: u64,
    pub classified_ss: u64,
    pub classified_f: u64,
    pub emitted_events: u64,
}

impl RunStats {
    pub fn duration_s(&self) -> f64 {
        if self.sample_rate_hz > 0.0 {
            self.total_ticks as f64 / self.sample_rate_hz
        } else {
            0.0
        }
    }
}

/// One head-stage channel.
#[derive(Debug, Clone)]
pub struct HeadStage {
    detector: Detector,
    options: PipelineOptions,
    state: FsmState,
    buffer: CaptureBuffer,
    classify_remaining: u32,
    tick: u64,
    stats: RunStats,
}

impl HeadStage {
    pub fn new(detector: DetectorConfig, options: PipelineOptions, sample_rate_hz: f64) -> Result<Self> {
        options.validate()?;
        Ok(Self {
            detector: Detector::new(detector)?,
            options,
            state: FsmState::Init,
            buffer: CaptureBuffer::empty(),
            classify_remaining: 0,
            tick: 0,
            stats: RunStats {
                sample_rate_hz,
                ..RunStats::default()
            },
        })
    }

    pub fn state(&self) -> FsmState {
        self.state
    }

    pub fn detector_state(&self) -> &DetectorState {
        self.detector.state()
    }

    pub fn buffer(&self) -> &CaptureBuffer {
        &self.buffer
    }

    pub fn stats(&self) -> &RunStats {
        &self.stats
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    /// Host command: return to INIT and recalculate the threshold.
    /// Any capture in progress is discarded.
    pub fn request_reconvergence(&mut self) {
        self.detector.request_reconvergence();
        self.state = FsmState::Init;
        self.buffer = CaptureBuffer::empty();
        self.classify_remaining = 0;
    }

    /// Advances by one sample using `classify` on each full capture buffer.
    pub fn step_with<F>(&mut self, x: i16, mut classify: F) -> Option<PipelineEvent>
    where
        F: FnMut(&CaptureBuffer) -> SpikeClass,
    {
        let t = self.tick;
        self.tick += 1;
        self.stats.total_ticks += 1;
        let sample = f64::from(x);
        let mut event = None;

        match self.state {
            FsmState::Init => {
                self.stats.init_ticks += 1;
                self.detector.step(sample, true);
                if self.detector.state().converged {
                    self.state = FsmState::Running;
                }
            }
            FsmState::Running => {
                self.stats.running_ticks += 1;
                if self.detector.step(sample, false) {
                    self.stats.detections += 1;
                    self.buffer = CaptureBuffer {
                        detection_tick: t,
                        ..CaptureBuffer::empty()
                    };
                    self.state = FsmState::Detected;
                }
            }
            FsmState::Detected => {
                self.stats.detected_ticks += 1;
                self.detector.step(sample, false);
                let b = &mut self.buffer;
                b.samples[b.fill_count] = reduce_sample(self.detector.state().y_signal);
                b.fill_count += 1;
                if b.is_full() {
                    self.state = FsmState::Classifying;
                    self.classify_remaining = self.options.classify_ticks;
                }
            }
            FsmState::Classifying => {
                self.stats.classifying_ticks += 1;
                self.detector.step(sample, false);
                if self.classify_remaining == self.options.classify_ticks {
                    debug_assert!(self.buffer.is_full());
                    let class = classify(&self.buffer);
                    self.stats.classify_invocations += 1;
                    match class {
                        SpikeClass::CS => self.stats.classified_cs += 1,
                        SpikeClass::SS => self.stats.classified_ss += 1,
                        SpikeClass::F => self.stats.classified_f += 1,
                    }
                    if class != SpikeClass::F || self.options.store_false_positives {
                        self.stats.emitted_events += 1;
                        event = Some(PipelineEvent {
                            timestamp: self.buffer.detection_tick,
                            class,
                        });
                    }
                }
                self.classify_remaining -= 1;
                if self.classify_remaining == 0 {
                    self.state = FsmState::Running;
                }
            }
        }
        event
    }

    pub fn step<C: SpikeClassifier + ?Sized>(&mut self, x: i16, model: &C) -> Option<PipelineEvent> {
        self.step_with(x, |buf| model.classify_waveform(&buf.waveform()))
    }
}

/// Runs a fresh head stage over a whole recording.
pub fn run_pipeline<C: SpikeClassifier + ?Sized>(
    recording: &Recording,
    detector: &DetectorConfig,
    model: &C,
    options: &PipelineOptions,
) -> Result<(Vec<PipelineEvent>, RunStats)> {
    let mut stage = HeadStage::new(*detector, *options, recording.sample_rate_hz)?;
    let events = recording
        .samples
        .iter()
        .filter_map(|&x| stage.step(x, model))
        .collect();
    Ok((events, stage.stats.clone()))
}

/// A filled capture buffer together with its detection tick.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Capture {
    pub detection_tick: u64,
    pub waveform: SpikeWaveform,
}

/// Runs the FSM without a classifier and returns every capture it makes.
/// These are the waveforms a deployed classifier would see.
pub fn capture_detections(
    recording: &Recording,
    detector: &DetectorConfig,
    options: &PipelineOptions,
) -> Result<Vec<Capture>> {
    let mut stage = HeadStage::new(*detector, *options, recording.sample_rate_hz)?;
    let mut captures = Vec::new();
    for &x in &recording.samples {
        stage.step_with(x, |buf| {
            captures.push(Capture {
                detection_tick: buf.detection_tick,
                waveform: buf.waveform(),
            });
            SpikeClass::F
        });
    }
    Ok(captures)
}

#[derive(Serialize, Deserialize)]
struct EventRow {
    timestamp: u64,
    class: String,
}

/// Debug event log: CSV `timestamp,class`.
pub fn write_events_csv<W: Write>(w: W, events: &[PipelineEvent]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for e in events {
        out.serialize(EventRow {
            timestamp: e.timestamp,
            class: e.class.to_string(),
        })?;
    }
    if events.is_empty() {
        out.write_record(["timestamp", "class"])?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events_csv<R: Read>(r: R) -> Result<Vec<PipelineEvent>> {
    let mut input = csv::Reader::from_reader(r);
    input
        .deserialize::<EventRow>()
        .map(|row| {
            let row = row?;
            Ok(PipelineEvent {
                timestamp: row.timestamp,
                class: row.class.parse()?,
            })
        })
        .collect()
}
