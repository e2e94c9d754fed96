//! The shared TOML configuration file.

use std::path::Path;

use headstage::analysis::PostprocConfig;
use headstage::detector::DetectorConfig;
use headstage::pipeline::PipelineOptions;
use headstage::signal::{RecordingConfig, SynthesisParams};
use headstage::store::ResourceModel;
use headstage::train::{DseConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub label_window_ms: f64,
    pub outlier_k: usize,
    pub outlier_min_foreign: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            label_window_ms: 1.0,
            outlier_k: 10,
            outlier_min_foreign: 9,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsConfig {
    pub tolerance_ms: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self { tolerance_ms: 1.0 }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub recording: RecordingConfig,
    pub synthesis: SynthesisParams,
    pub detector: DetectorConfig,
    pub pipeline: PipelineOptions,
    pub dataset: DatasetConfig,
    pub train: TrainConfig,
    pub dse: DseConfig,
    pub resources: ResourceModel,
    pub postprocess: PostprocConfig,
    pub metrics: MetricsConfig,
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let cfg: Self = toml::from_str(text).map_err(|e| e.message().to_string())?;
        cfg.validate().map_err(|e| e.to_string())?;
        Ok(cfg)
    }

    pub fn validate(&self) -> headstage::Result<()> {
        self.recording.validate()?;
        self.synthesis.validate()?;
        self.detector.validate()?;
        self.pipeline.validate()?;
        self.train.validate()?;
        self.dse.validate()?;
        self.resources.validate()?;
        self.postprocess.validate()?;
        if self.dataset.outlier_min_foreign > self.dataset.outlier_k {
            return Err(headstage::Error::Config(
                "dataset.outlier_min_foreign cannot exceed dataset.outlier_k".into(),
            ));
        }
        if !(self.metrics.tolerance_ms >= 0.0) {
            return Err(headstage::Error::Config("metrics.tolerance_ms must be non-negative".into()));
        }
        Ok(())
    }
}

/// One line of documentation per configuration key.
pub const KEY_DOCS: &[(&str, &str)] = &[
    ("recording.sample_rate_hz", "ADC sampling rate in Hz"),
    ("recording.adc_bits", "signed ADC resolution, 2..=16"),
    ("recording.duration_s", "length of generated recordings in seconds"),
    ("recording.seed", "generator seed"),
    ("synthesis.ss_rate_hz", "mean simple-spike rate"),
    ("synthesis.cs_rate_hz", "mean complex-spike rate"),
    ("synthesis.noise_sigma", "Gaussian noise standard deviation (ADC counts)"),
    ("synthesis.drift_amplitude", "electrode drift amplitude (ADC counts)"),
    ("synthesis.drift_period_s", "period of the sinusoidal drift component"),
    ("synthesis.offset", "constant DC offset (ADC counts)"),
    ("synthesis.saturation_prob", "per-sample probability that a saturated run starts"),
    ("synthesis.min_interval_ms", "minimum spacing between spikes, at least 2"),
    ("synthesis.ss_amplitude", "simple-spike peak amplitude (ADC counts)"),
    ("synthesis.cs_amplitude", "complex-spike peak amplitude (ADC counts)"),
    ("synthesis.settle_s", "spike-free interval at the start of a recording"),
    ("detector.alpha_signal", "smoothing coefficient of the input IIR"),
    ("detector.alpha_neo", "smoothing coefficient of the NEO IIR"),
    ("detector.threshold_gain", "threshold = gain * running NEO mean"),
    ("detector.alpha_thresh", "EMA coefficient of the running NEO mean"),
    ("detector.convergence_epsilon", "largest relative threshold change counted as stable"),
    ("detector.convergence_window", "consecutive stable ticks needed to converge"),
    ("pipeline.classify_ticks", "ticks spent in CLASSIFYING per detection"),
    ("pipeline.store_false_positives", "emit events classified as F"),
    ("dataset.label_window_ms", "annotation search window around a detection"),
    ("dataset.outlier_k", "neighbours inspected by the outlier filter"),
    ("dataset.outlier_min_foreign", "foreign-label neighbours that mark an outlier"),
    ("train.epochs", "maximum training epochs"),
    ("train.early_stop_patience", "epochs without validation improvement before stopping"),
    ("train.val_fraction", "validation share of the training part"),
    ("train.test_fraction", "held-out test share used by `train`"),
    ("train.batch_size", "mini-batch size"),
    ("train.ortho_lambda", "orthogonality regularization factor"),
    ("train.seed", "training and split seed"),
    ("train.adam.lr", "Adam learning rate"),
    ("train.adam.beta1", "Adam first-moment decay"),
    ("train.adam.beta2", "Adam second-moment decay"),
    ("train.adam.epsilon", "Adam denominator guard"),
    ("dse.max_hidden_layers", "deepest hidden stack in the full grid"),
    ("dse.layer_size_ranges", "upper width bound per hidden layer"),
    ("dse.descending_sizes_required", "hidden widths must be non-increasing"),
    ("dse.folds", "cross-validation folds"),
    ("dse.cs_accuracy_floor", "CS interval lower bound a topology must exceed"),
    ("dse.confidence", "confidence level of the accuracy intervals"),
    ("dse.regularization_factors", "regularization factors crossed with the full grid"),
    ("dse.grid", "candidate set: \"table3\" or \"full\""),
    ("dse.outlier_k", "neighbours inspected by the per-fold outlier filter"),
    ("dse.outlier_min_foreign", "foreign-label neighbours that mark an outlier"),
    ("resources.e_detect_cycle_nj", "detector energy per cycle (nJ)"),
    ("resources.e_classify_nj", "classifier energy per inference (nJ)"),
    ("resources.e_store_nj", "storage energy per record (nJ)"),
    ("resources.e_adc_conversion_pj", "ADC energy per conversion (pJ)"),
    ("resources.sample_rate_hz", "ADC conversions per second"),
    ("resources.spike_rate_hz", "classified spikes per second"),
    ("resources.battery_capacity_mah", "battery charge"),
    ("resources.battery_voltage_v", "assumed battery voltage"),
    ("resources.storage_capacity_bytes", "removable storage size"),
    ("resources.detector_energy_basis", "\"per_sample\" or \"per_event\" detector charging"),
    ("postprocess.dead_zone_ms", "window after a simple spike in which events are dropped"),
    ("metrics.tolerance_ms", "event-to-annotation matching tolerance"),
];

fn flatten(prefix: &str, value: &toml::Value, out: &mut Vec<(String, String)>) {
    match value {
        toml::Value::Table(t) => {
            for (k, v) in t {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        v => out.push((prefix.to_string(), v.to_string())),
    }
}

/// `(key, default)` for every configuration key, in file order.
pub fn default_keys() -> Vec<(String, String)> {
    let value = toml::Value::try_from(CliConfig::default()).expect("defaults serialize");
    let mut out = Vec::new();
    flatten("", &value, &mut out);
    out
}

/// Help text listing every key with its default.
pub fn config_help() -> String {
    let mut text = String::from(
        "CONFIGURATION (TOML, every key optional, unknown keys rejected):\n",
    );
    let mut section = String::new();
    for (key, default) in default_keys() {
        let (sec, _) = key.split_once('.').unwrap_or((&key, ""));
        if sec != section {
            text.push_str(&format!("\n  [{sec}]\n"));
            section = sec.to_string();
        }
        let doc = KEY_DOCS
            .iter()
            .find(|(k, _)| *k == key)
            .map(|(_, d)| *d)
            .unwrap_or("");
        text.push_str(&format!("    {key} = {default}\n        {doc}\n"));
    }
    text
}
