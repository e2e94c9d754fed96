//! Non-volatile event storage and the head-stage resource budget.
//!
//! Each stored event is a 32-bit word: the class bit in the most significant
//! position (1 = CS, 0 = SS) and the detection tick in the low 31 bits.
//! F detections are never stored.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::SpikeClass;
use crate::pipeline::PipelineEvent;

pub const RECORD_BYTES: u64 = 4;
pub const MAX_TIMESTAMP: u64 = (1 << 31) - 1;
const CLASS_BIT: u32 = 1 << 31;

/// Packed `(class, timestamp)` word.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct EventRecord(pub u32);

impl EventRecord {
    pub fn timestamp(self) -> u64 {
        u64::from(self.0 & !CLASS_BIT)
    }

    pub fn class(self) -> SpikeClass {
        if self.0 & CLASS_BIT != 0 {
            SpikeClass::CS
        } else {
            SpikeClass::SS
        }
    }
}

pub fn pack(event: &PipelineEvent) -> Result<EventRecord> {
    if event.timestamp > MAX_TIMESTAMP {
        return Err(Error::Input(format!(
            "timestamp {} does not fit 31 bits",
            event.timestamp
        )));
    }
    let class_bit = match event.class {
        SpikeClass::CS => CLASS_BIT,
        SpikeClass::SS => 0,
        SpikeClass::F => {
            return Err(Error::Input("F events are not storable".into()));
        }
    };
    Ok(EventRecord(class_bit | event.timestamp as u32))
}

pub fn unpack(record: EventRecord) -> PipelineEvent {
    PipelineEvent {
        timestamp: record.timestamp(),
        class: record.class(),
    }
}

/// Bytes needed to store `ceil(duration * rate)` records.
pub fn storage_required(duration_s: f64, spike_rate_hz: f64, record_bytes: u64) -> u64 {
    (duration_s * spike_rate_hz).ceil() as u64 * record_bytes
}

/// How the detector energy figure is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectorEnergyBasis {
    /// Once per input sample.
    PerSample,
    /// Once per classified spike.
    PerEvent,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ResourceModel {
    pub e_detect_cycle_nj: f64,
    pub e_classify_nj: f64,
    pub e_store_nj: f64,
    pub e_adc_conversion_pj: f64,
    pub sample_rate_hz: f64,
    pub spike_rate_hz: f64,
    pub battery_capacity_mah: f64,
    /// Supply voltage used to convert mAh into joules. An assumption: the
    /// battery datasheets only give a charge capacity.
    pub battery_voltage_v: f64,
    pub storage_capacity_bytes: u64,
    pub detector_energy_basis: DetectorEnergyBasis,
}

impl Default for ResourceModel {
    fn default() -> Self {
        Self {
            e_detect_cycle_nj: 4.46,
            e_classify_nj: 311.0,
            e_store_nj: 0.28,
            e_adc_conversion_pj: 0.5,
            sample_rate_hz: 24414.0,
            spike_rate_hz: 100.0,
            battery_capacity_mah: 12.0,
            battery_voltage_v: 1.5,
            storage_capacity_bytes: 32 << 20,
            detector_energy_basis: DetectorEnergyBasis::PerSample,
        }
    }
}

impl ResourceModel {
    pub fn validate(&self) -> Result<()> {
        let values = [
            ("e_detect_cycle_nj", self.e_detect_cycle_nj),
            ("e_classify_nj", self.e_classify_nj),
            ("e_store_nj", self.e_store_nj),
            ("e_adc_conversion_pj", self.e_adc_conversion_pj),
            ("sample_rate_hz", self.sample_rate_hz),
            ("battery_capacity_mah", self.battery_capacity_mah),
            ("battery_voltage_v", self.battery_voltage_v),
        ];
        for (name, v) in values {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.spike_rate_hz >= 0.0 && self.spike_rate_hz.is_finite()) {
            return Err(Error::Config("spike_rate_hz must be non-negative".into()));
        }
        if self.storage_capacity_bytes == 0 {
            return Err(Error::Config("storage_capacity_bytes must be positive".into()));
        }
        Ok(())
    }

    pub fn battery_energy_j(&self) -> f64 {
        self.battery_capacity_mah * 3600.0 * self.battery_voltage_v / 1000.0
    }
}

/// Average power per component, in microwatts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PowerBreakdown {
    pub adc_uw: f64,
    pub detector_uw: f64,
    pub classifier_uw: f64,
    pub storage_uw: f64,
    pub total_uw: f64,
}

impl PowerBreakdown {
    pub fn total_w(&self) -> f64 {
        self.total_uw * 1e-6
    }
}

// nJ * Hz = nW; nW / 1000 = uW.
fn nj_at_hz_to_uw(energy_nj: f64, rate_hz: f64) -> f64 {
    energy_nj * rate_hz / 1000.0
}

pub fn average_power(model: &ResourceModel) -> PowerBreakdown {
    let adc_uw = nj_at_hz_to_uw(model.e_adc_conversion_pj / 1000.0, model.sample_rate_hz);
    let detector_rate = match model.detector_energy_basis {
        DetectorEnergyBasis::PerSample => model.sample_rate_hz,
        DetectorEnergyBasis::PerEvent => model.spike_rate_hz,
    };
    let detector_uw = nj_at_hz_to_uw(model.e_detect_cycle_nj, detector_rate);
    let classifier_uw = nj_at_hz_to_uw(model.e_classify_nj, model.spike_rate_hz);
    let storage_uw = nj_at_hz_to_uw(model.e_store_nj, model.spike_rate_hz);
    PowerBreakdown {
        adc_uw,
        detector_uw,
        classifier_uw,
        storage_uw,
        total_uw: adc_uw + detector_uw + classifier_uw + storage_uw,
    }
}

/// Seconds of continuous operation on one battery charge.
pub fn battery_life_s(model: &ResourceModel) -> Result<f64> {
    model.validate()?;
    let power_w = average_power(model).total_w();
    assert!(power_w > 0.0, "average power must be positive");
    Ok(model.battery_energy_j() / power_w)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Headroom {
    /// Free storage after an experiment of the reported duration.
    pub storage_bytes: i64,
    /// Battery life beyond the reported duration.
    pub battery_hours: f64,
}

/// Resource report for an experiment of `duration_s`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResourceReport {
    pub duration_s: f64,
    pub spike_rate_hz: f64,
    pub battery_voltage_v: f64,
    pub battery_voltage_assumed: bool,
    pub power_breakdown: PowerBreakdown,
    pub battery_days: f64,
    pub storage_bytes: u64,
    pub storage_capacity_bytes: u64,
    pub headroom: Headroom,
}

pub fn resource_report(model: &ResourceModel, duration_s: f64) -> Result<ResourceReport> {
    let life_s = battery_life_s(model)?;
    let storage_bytes = storage_required(duration_s, model.spike_rate_hz, RECORD_BYTES);
    Ok(ResourceReport {
        duration_s,
        spike_rate_hz: model.spike_rate_hz,
        battery_voltage_v: model.battery_voltage_v,
        battery_voltage_assumed: true,
        power_breakdown: average_power(model),
        battery_days: life_s / 86_400.0,
        storage_bytes,
        storage_capacity_bytes: model.storage_capacity_bytes,
        headroom: Headroom {
            storage_bytes: model.storage_capacity_bytes as i64 - storage_bytes as i64,
            battery_hours: (life_s - duration_s) / 3600.0,
        },
    })
}

const EVENT_LOG_MAGIC: &[u8; 4] = b"SPKE";
const EVENT_LOG_VERSION: u16 = 1;
pub const EVENT_LOG_HEADER_LEN: usize = 12;

/// Writes records as little-endian words after a 12-byte header:
/// magic `SPKE`, version u16, reserved u16, sample rate u32 (Hz).
pub fn write_event_log<W: Write>(mut w: W, sample_rate_hz: u32, records: &[EventRecord]) -> Result<()> {
    let mut header = [0u8; EVENT_LOG_HEADER_LEN];
    header[..4].copy_from_slice(EVENT_LOG_MAGIC);
    header[4..6].copy_from_slice(&EVENT_LOG_VERSION.to_le_bytes());
    header[8..12].copy_from_slice(&sample_rate_hz.to_le_bytes());
    w.write_all(&header)?;
    let mut buf = Vec::with_capacity(records.len() * 4);
    for r in records {
        buf.extend_from_slice(&r.0.to_le_bytes());
    }
    w.write_all(&buf)?;
    w.flush()?;
    Ok(())
}

/// Reads an event log, validating the header and timestamp order.
pub fn read_event_log<R: Read>(mut r: R) -> Result<(u32, Vec<EventRecord>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    if bytes.len() < EVENT_LOG_HEADER_LEN {
        return Err(Error::format("event log", "file too short"));
    }
    if &bytes[..4] != EVENT_LOG_MAGIC {
        return Err(Error::format("event log", "bad magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EVENT_LOG_VERSION {
        return Err(Error::format("event log", format!("unsupported version {version}")));
    }
    let sample_rate = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    let payload = &bytes[EVENT_LOG_HEADER_LEN..];
    if payload.len() % 4 != 0 {
        return Err(Error::format("event log", "truncated record"));
    }
    let records: Vec<EventRecord> = payload
        .chunks_exact(4)
        .map(|c| EventRecord(u32::from_le_bytes(c.try_into().expect("4 bytes"))))
        .collect();
    for (i, pair) in records.windows(2).enumerate() {
        if pair[1].timestamp() <= pair[0].timestamp() {
            return Err(Error::format(
                "event log",
                format!("timestamps not increasing at record {}", i + 1),
            ));
        }
    }
    Ok((sample_rate, records))
}

pub fn save_event_log(path: impl AsRef<Path>, sample_rate_hz: u32, records: &[EventRecord]) -> Result<()> {
    write_event_log(BufWriter::new(File::create(path)?), sample_rate_hz, records)
}

pub fn load_event_log(path: impl AsRef<Path>) -> Result<(u32, Vec<EventRecord>)> {
    read_event_log(BufReader::new(File::open(path)?))
}

/// Packs the storable (non-F) events of a stream.
pub fn pack_events(events: &[PipelineEvent]) -> Result<Vec<EventRecord>> {
    events
        .iter()
        .filter(|e| e.class != SpikeClass::F)
        .map(pack)
        .collect()
}
