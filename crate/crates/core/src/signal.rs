//! Sample and annotation data model, recording/annotation file formats and a
//! synthetic Purkinje-cell signal generator with ground-truth annotations.
//!
//! Samples are signed, zero-centred ADC counts. For a 10-bit converter the
//! range is `-512..=511`, which maps onto the classifier's signed 8-bit input
//! range after division by four.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_SAMPLE_RATE_HZ: f64 = 24414.0;
pub const DEFAULT_ADC_BITS: u8 = 10;

/// Acquisition parameters of a single-channel recording.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RecordingConfig {
    pub sample_rate_hz: f64,
    pub adc_bits: u8,
    pub duration_s: f64,
    pub seed: u64,
}

impl Default for RecordingConfig {
    fn default() -> Self {
        Self {
            sample_rate_hz: DEFAULT_SAMPLE_RATE_HZ,
            adc_bits: DEFAULT_ADC_BITS,
            duration_s: 60.0,
            seed: 0,
        }
    }
}

impl RecordingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0 && self.sample_rate_hz.is_finite()) {
            return Err(Error::Config(format!(
                "sample_rate_hz must be positive, got {}",
                self.sample_rate_hz
            )));
        }
        validate_adc_bits(self.adc_bits)?;
        if !(self.duration_s > 0.0 && self.duration_s.is_finite()) {
            return Err(Error::Config(format!(
                "duration_s must be positive, got {}",
                self.duration_s
            )));
        }
        Ok(())
    }

    pub fn total_samples(&self) -> usize {
        (self.duration_s * self.sample_rate_hz).round() as usize
    }
}

fn validate_adc_bits(bits: u8) -> Result<()> {
    if !(2..=16).contains(&bits) {
        return Err(Error::Config(format!(
            "adc_bits must be in 2..=16, got {bits}"
        )));
    }
    Ok(())
}

/// Inclusive signed range of an ADC with the given resolution.
pub fn adc_range(adc_bits: u8) -> (i16, i16) {
    let half = 1i32 << (adc_bits - 1);
    (-half as i16, (half - 1) as i16)
}

/// Converts a duration in milliseconds into (fractional) sample ticks.
pub fn ms_to_ticks(ms: f64, sample_rate_hz: f64) -> f64 {
    ms * 1e-3 * sample_rate_hz
}

/// Ground-truth spike type of an annotated event.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpikeKind {
    #[serde(rename = "SS")]
    Simple,
    #[serde(rename = "CS")]
    Complex,
}

impl fmt::Display for SpikeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpikeKind::Simple => "SS",
            SpikeKind::Complex => "CS",
        })
    }
}

impl FromStr for SpikeKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "SS" => Ok(SpikeKind::Simple),
            "CS" => Ok(SpikeKind::Complex),
            other => Err(Error::format("annotation", format!("unknown label {other:?}"))),
        }
    }
}

/// Onset of a ground-truth spike.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Annotation {
    pub sample_index: u64,
    pub label: SpikeKind,
}

/// A single-channel recording held in memory.
#[derive(Debug, Clone, PartialEq)]
pub struct Recording {
    pub sample_rate_hz: f64,
    pub adc_bits: u8,
    pub samples: Vec<i16>,
}

impl Recording {
    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate_hz
    }

    /// Copies out the samples in `range` as a new recording.
    pub fn slice(&self, range: std::ops::Range<usize>) -> Recording {
        Recording {
            sample_rate_hz: self.sample_rate_hz,
            adc_bits: self.adc_bits,
            samples: self.samples[range].to_vec(),
        }
    }
}

/// Parameters of the synthetic signal model.
///
/// Amplitudes, noise and drift are expressed in ADC counts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthesisParams {
    pub ss_rate_hz: f64,
    pub cs_rate_hz: f64,
    pub noise_sigma: f64,
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    pub offset: f64,
    /// Per-sample probability that a saturated run starts.
    pub saturation_prob: f64,
    pub min_interval_ms: f64,
    /// Peak of the negative lobe of a simple spike.
    pub ss_amplitude: f64,
    /// Peak of the initial negative lobe of a complex spike.
    pub cs_amplitude: f64,
    /// Spike-free interval at the start of the recording, in seconds.
    pub settle_s: f64,
}

impl Default for SynthesisParams {
    fn default() -> Self {
        Self {
            ss_rate_hz: 90.0,
            cs_rate_hz: 1.0,
            noise_sigma: 10.0,
            drift_amplitude: 25.0,
            drift_period_s: 2.5,
            offset: 12.0,
            saturation_prob: 2e-5,
            min_interval_ms: 4.0,
            ss_amplitude: 180.0,
            cs_amplitude: 230.0,
            settle_s: 0.5,
        }
    }
}

impl SynthesisParams {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.ss_rate_hz,
            self.cs_rate_hz,
            self.noise_sigma,
            self.drift_amplitude,
            self.drift_period_s,
            self.offset,
            self.saturation_prob,
            self.min_interval_ms,
            self.ss_amplitude,
            self.cs_amplitude,
            self.settle_s,
        ];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("synthesis parameters must be finite".into()));
        }
        if self.ss_rate_hz < 0.0 || self.cs_rate_hz < 0.0 {
            return Err(Error::Config("spike rates must be non-negative".into()));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Config("noise_sigma must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.saturation_prob) {
            return Err(Error::Config("saturation_prob must lie in [0, 1]".into()));
        }
        if self.min_interval_ms < 2.0 {
            return Err(Error::Config(format!(
                "min_interval_ms must be at least 2.0, got {}",
                self.min_interval_ms
            )));
        }
        if self.settle_s < 0.0 {
            return Err(Error::Config("settle_s must be non-negative".into()));
        }
        if self.drift_period_s <= 0.0 {
            return Err(Error::Config("drift_period_s must be positive".into()));
        }
        Ok(())
    }
}

const SS_SPAN_MS: f64 = 0.8;
const CS_SPAN_MS: f64 = 1.7;

fn gauss(t: f64, centre: f64, sigma: f64) -> f64 {
    let z = (t - centre) / sigma;
    (-0.5 * z * z).exp()
}

/// Simple spike: sharp negative lobe followed by a broader positive one.
fn simple_template(t_ms: f64) -> f64 {
    -gauss(t_ms, 0.20, 0.07) + 0.40 * gauss(t_ms, 0.45, 0.12)
}

/// Complex spike: initial spike followed by three decaying wavelets.
fn complex_template(t_ms: f64) -> f64 {
    let initial = -gauss(t_ms, 0.20, 0.07) + 0.30 * gauss(t_ms, 0.42, 0.10);
    let wavelets: f64 = [(0.75, 0.60), (1.05, 0.45), (1.35, 0.30)]
        .iter()
        .map(|&(c, a)| a * (-gauss(t_ms, c, 0.06) + 0.5 * gauss(t_ms, c + 0.12, 0.06)))
        .sum();
    initial + wavelets
}

struct SpikeInstance {
    onset: usize,
    kind: SpikeKind,
    amplitude: f64,
    width: f64,
}

/// Synthesises a recording and its ground-truth annotations.
///
/// Spike onsets follow a Poisson process with a dead time of
/// `min_interval_ms` shared by both classes, starting after `settle_s`; each spike is a complex spike
/// with probability `cs_rate / (ss_rate + cs_rate)`. Output is a pure
/// function of `(cfg, params)`.
pub fn generate_recording(
    cfg: &RecordingConfig,
    params: &SynthesisParams,
) -> Result<(Recording, Vec<Annotation>)> {
    cfg.validate()?;
    params.validate()?;

    let fs = cfg.sample_rate_hz;
    let n = cfg.total_samples();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let spikes = draw_spikes(&mut rng, n, fs, params);

    let mut signal = vec![params.offset; n];

    if params.drift_amplitude > 0.0 {
        // Sinusoid plus a mean-reverting random walk with a quarter of the
        // sinusoid's amplitude as its stationary deviation.
        let omega = 2.0 * std::f64::consts::PI / (params.drift_period_s * fs);
        let phase = rng.random::<f64>() * 2.0 * std::f64::consts::PI;
        let tau = params.drift_period_s * fs;
        let decay = (-1.0 / tau).exp();
        let walk_sigma = 0.25 * params.drift_amplitude * (1.0 - decay * decay).sqrt();
        let step = Normal::new(0.0, walk_sigma).expect("finite sigma");
        let mut walk = 0.0;
        for (i, v) in signal.iter_mut().enumerate() {
            walk = decay * walk + step.sample(&mut rng);
            *v += params.drift_amplitude * (omega * i as f64 + phase).sin() + walk;
        }
    }

    if params.noise_sigma > 0.0 {
        let noise = Normal::new(0.0, params.noise_sigma).expect("finite sigma");
        for v in signal.iter_mut() {
            *v += noise.sample(&mut rng);
        }
    }

    let dt_ms = 1e3 / fs;
    for spike in &spikes {
        let (span, peak, shape): (f64, f64, fn(f64) -> f64) = match spike.kind {
            SpikeKind::Simple => (SS_SPAN_MS, params.ss_amplitude, simple_template),
            SpikeKind::Complex => (CS_SPAN_MS, params.cs_amplitude, complex_template),
        };
        let len = (span * spike.width / dt_ms).ceil() as usize;
        for k in 0..len.min(n - spike.onset) {
            let t = k as f64 * dt_ms / spike.width;
            signal[spike.onset + k] += peak * spike.amplitude * shape(t);
        }
    }

    let (lo, hi) = adc_range(cfg.adc_bits);
    let mut samples: Vec<i16> = signal
        .iter()
        .map(|v| v.round().clamp(lo as f64, hi as f64) as i16)
        .collect();

    if params.saturation_prob > 0.0 {
        let mut i = 0;
        while i < n {
            if rng.random::<f64>() < params.saturation_prob {
                let run = rng.random_range(3..=8usize);
                let rail = if rng.random::<bool>() { hi } else { lo };
                for s in samples.iter_mut().skip(i).take(run) {
                    *s = rail;
                }
                i += run;
            } else {
                i += 1;
            }
        }
    }

    let annotations = to_annotations(&spikes);

    Ok((
        Recording {
            sample_rate_hz: fs,
            adc_bits: cfg.adc_bits,
            samples,
        },
        annotations,
    ))
}

fn to_annotations(spikes: &[SpikeInstance]) -> Vec<Annotation> {
    spikes
        .iter()
        .map(|s| Annotation {
            sample_index: s.onset as u64,
            label: s.kind,
        })
        .collect()
}

/// The annotations `generate_recording` would produce for the same inputs,
/// without synthesising any samples.
pub fn draw_annotations(cfg: &RecordingConfig, params: &SynthesisParams) -> Result<Vec<Annotation>> {
    cfg.validate()?;
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let spikes = draw_spikes(&mut rng, cfg.total_samples(), cfg.sample_rate_hz, params);
    Ok(to_annotations(&spikes))
}

fn draw_spikes(
    rng: &mut ChaCha8Rng,
    n: usize,
    fs: f64,
    params: &SynthesisParams,
) -> Vec<SpikeInstance> {
    let rate = params.ss_rate_hz + params.cs_rate_hz;
    if rate <= 0.0 {
        return Vec::new();
    }
    let p_complex = params.cs_rate_hz / rate;
    let dead_ticks = ms_to_ticks(params.min_interval_ms, fs).ceil();
    // Mean of the exponential part so the overall rate stays at `rate`.
    let extra_mean = (fs / rate - dead_ticks).max(1e-9);
    let exp = Exp::new(1.0 / extra_mean).expect("positive rate");
    let max_len = (CS_SPAN_MS * 1.1 * 1e-3 * fs).ceil() as usize;

    let mut spikes = Vec::new();
    let mut t = (params.settle_s * fs).ceil() as usize + exp.sample(rng).round() as usize;
    while t + max_len < n {
        let kind = if rng.random::<f64>() < p_complex {
            SpikeKind::Complex
        } else {
            SpikeKind::Simple
        };
        spikes.push(SpikeInstance {
            onset: t,
            kind,
            amplitude: rng.random_range(0.8..=1.2),
            width: rng.random_range(0.9..=1.1),
        });
        t += dead_ticks as usize + exp.sample(rng).round() as usize;
    }
    spikes
}

const RECORDING_MAGIC: &[u8; 4] = b"SPKR";
const RECORDING_VERSION: u8 = 1;
const RECORDING_HEADER_LEN: usize = 16;

fn encode_recording_header(sample_rate_hz: f64, adc_bits: u8) -> [u8; RECORDING_HEADER_LEN] {
    let mut header = [0u8; RECORDING_HEADER_LEN];
    header[..4].copy_from_slice(RECORDING_MAGIC);
    header[4] = RECORDING_VERSION;
    header[5] = adc_bits;
    // bytes 6..8 reserved
    header[8..].copy_from_slice(&sample_rate_hz.to_le_bytes());
    header
}

/// Writes a recording as a little-endian `SPKR` file.
pub fn write_recording<W: Write>(mut w: W, rec: &Recording) -> Result<()> {
    w.write_all(&encode_recording_header(rec.sample_rate_hz, rec.adc_bits))?;
    let mut buf = Vec::with_capacity(rec.samples.len() * 2);
    for s in &rec.samples {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

pub fn save_recording(path: impl AsRef<Path>, rec: &Recording) -> Result<()> {
    write_recording(BufWriter::new(File::create(path)?), rec)
}

/// Streaming reader over the samples of an `SPKR` file.
pub struct RecordingReader<R> {
    inner: R,
    sample_rate_hz: f64,
    adc_bits: u8,
    range: (i16, i16),
    index: u64,
}

impl<R: Read> RecordingReader<R> {
    /// Parses and validates the header.
    pub fn new(mut inner: R) -> Result<Self> {
        let mut header = [0u8; RECORDING_HEADER_LEN];
        read_exact_or(&mut inner, &mut header, "recording header")?;
        if &header[..4] != RECORDING_MAGIC {
            return Err(Error::format("recording", "bad magic"));
        }
        if header[4] != RECORDING_VERSION {
            return Err(Error::format(
                "recording",
                format!("unsupported version {}", header[4]),
            ));
        }
        let adc_bits = header[5];
        validate_adc_bits(adc_bits).map_err(|e| Error::format("recording", e.to_string()))?;
        let sample_rate_hz = f64::from_le_bytes(header[8..16].try_into().expect("8 bytes"));
        if !(sample_rate_hz > 0.0 && sample_rate_hz.is_finite()) {
            return Err(Error::format(
                "recording",
                format!("invalid sample rate {sample_rate_hz}"),
            ));
        }
        Ok(Self {
            inner,
            sample_rate_hz,
            adc_bits,
            range: adc_range(adc_bits),
            index: 0,
        })
    }

    pub fn sample_rate_hz(&self) -> f64 {
        self.sample_rate_hz
    }

    pub fn adc_bits(&self) -> u8 {
        self.adc_bits
    }

    fn next_sample(&mut self) -> Result<Option<i16>> {
        let mut word = [0u8; 2];
        let mut filled = 0;
        while filled < 2 {
            match self.inner.read(&mut word[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => return Err(Error::format("recording", "truncated payload")),
                Ok(k) => filled += k,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        let v = i16::from_le_bytes(word);
        if v < self.range.0 || v > self.range.1 {
            return Err(Error::format(
                "recording",
                format!(
                    "sample {} at index {} outside the {}-bit range",
                    v, self.index, self.adc_bits
                ),
            ));
        }
        self.index += 1;
        Ok(Some(v))
    }
}

impl<R: Read> Iterator for RecordingReader<R> {
    type Item = Result<i16>;

    fn next(&mut self) -> Option<Self::Item> {
        self.next_sample().transpose()
    }
}

fn read_exact_or<R: Read>(r: &mut R, buf: &mut [u8], what: &'static str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(what, "file too short")
        } else {
            e.into()
        }
    })
}

/// Reads a whole `SPKR` stream into memory.
pub fn read_recording<R: Read>(r: R) -> Result<Recording> {
    let reader = RecordingReader::new(r)?;
    let sample_rate_hz = reader.sample_rate_hz();
    let adc_bits = reader.adc_bits();
    let samples = reader.collect::<Result<Vec<_>>>()?;
    Ok(Recording {
        sample_rate_hz,
        adc_bits,
        samples,
    })
}

pub fn load_recording(path: impl AsRef<Path>) -> Result<Recording> {
    read_recording(BufReader::new(File::open(path)?))
}

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    sample_index: u64,
    label: String,
}

/// Writes annotations as CSV with header `sample_index,label`.
pub fn write_annotations<W: Write>(w: W, annotations: &[Annotation]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for a in annotations {
        out.serialize(AnnotationRow {
            sample_index: a.sample_index,
            label: a.label.to_string(),
        })?;
    }
    if annotations.is_empty() {
        out.write_record(["sample_index", "label"])?;
    }
    out.flush()?;
    Ok(())
}

pub fn save_annotations(path: impl AsRef<Path>, annotations: &[Annotation]) -> Result<()> {
    write_annotations(BufWriter::new(File::create(path)?), annotations)
}

/// Reads annotations, rejecting unknown labels and non-increasing rows.
pub fn read_annotations<R: Read>(r: R) -> Result<Vec<Annotation>> {
    let mut input = csv::Reader::from_reader(r);
    let headers = input.headers()?.clone();
    if headers.iter().collect::<Vec<_>>() != ["sample_index", "label"] {
        return Err(Error::format(
            "annotation",
            format!("expected header sample_index,label, got {:?}", headers),
        ));
    }
    let mut out: Vec<Annotation> = Vec::new();
    for row in input.deserialize::<AnnotationRow>() {
        let row = row?;
        let a = Annotation {
            sample_index: row.sample_index,
            label: row.label.parse()?,
        };
        if let Some(prev) = out.last() {
            if a.sample_index <= prev.sample_index {
                return Err(Error::format(
                    "annotation",
                    format!(
                        "rows not strictly increasing: {} after {}",
                        a.sample_index, prev.sample_index
                    ),
                ));
            }
        }
        out.push(a);
    }
    Ok(out)
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<Vec<Annotation>> {
    read_annotations(BufReader::new(File::open(path)?))
}
