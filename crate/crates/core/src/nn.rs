//! Multilayer-perceptron classifier: float reference inference, symmetric
//! signed 8-bit post-training quantization and integer-only inference.
//!
//! Class indices are fixed as `(CS, SS, F)`. Argmax ties resolve to the
//! lowest index in both inference paths.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::signal::SpikeKind;

/// Samples per captured spike waveform.
pub const WAVEFORM_LEN: usize = 40;
pub const NUM_CLASSES: usize = 3;

const SCALE_FLOOR: f64 = 1e-8;
const MODEL_FILE_VERSION: u32 = 1;

/// Classifier output class, in output-neuron order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpikeClass {
    CS,
    SS,
    F,
}

impl SpikeClass {
    pub const ALL: [SpikeClass; NUM_CLASSES] = [SpikeClass::CS, SpikeClass::SS, SpikeClass::F];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }
}

impl From<SpikeKind> for SpikeClass {
    fn from(kind: SpikeKind) -> Self {
        match kind {
            SpikeKind::Simple => SpikeClass::SS,
            SpikeKind::Complex => SpikeClass::CS,
        }
    }
}

impl fmt::Display for SpikeClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SpikeClass::CS => "CS",
            SpikeClass::SS => "SS",
            SpikeClass::F => "F",
        })
    }
}

impl FromStr for SpikeClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "CS" => Ok(SpikeClass::CS),
            "SS" => Ok(SpikeClass::SS),
            "F" => Ok(SpikeClass::F),
            other => Err(Error::Input(format!("unknown class {other:?}"))),
        }
    }
}

/// Forty signed 8-bit samples captured after a detection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SpikeWaveform(pub [i8; WAVEFORM_LEN]);

impl Serialize for SpikeWaveform {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_seq(self.0.iter())
    }
}

impl<'de> Deserialize<'de> for SpikeWaveform {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = Vec::<i8>::deserialize(d)?;
        let n = v.len();
        v.try_into().map(SpikeWaveform).map_err(|_| {
            serde::de::Error::invalid_length(n, &"exactly 40 samples")
        })
    }
}

impl SpikeWaveform {
    pub fn to_f64(&self) -> [f64; WAVEFORM_LEN] {
        self.0.map(f64::from)
    }
}

/// Reduces a (smoothed) 10-bit sample to the classifier's 8-bit input:
/// divide by four, floor, clamp.
pub fn reduce_sample(value: f64) -> i8 {
    (value / 4.0).floor().clamp(-128.0, 127.0) as i8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

/// Index of the largest logit; ties go to the lowest index.
pub fn classify(logits: &[f64]) -> SpikeClass {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate().take(NUM_CLASSES) {
        if *v > logits[best] {
            best = i;
        }
    }
    SpikeClass::from_index(best).expect("index below NUM_CLASSES")
}

/// Fully connected layer with row-major `[outputs x inputs]` weights.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self {
            inputs,
            outputs,
            weights: vec![0.0; inputs * outputs],
            biases: vec![0.0; outputs],
            activation,
        }
    }

    pub fn weight(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.inputs + col]
    }

    /// Pre-activation output `W x + b`.
    pub fn affine(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.inputs)
            .zip(&self.biases)
            .map(|(row, b)| row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + b)
            .collect()
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        let mut z = self.affine(x);
        if self.activation == Activation::Relu {
            z.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        z
    }
}

fn check_chain(dims: &[(usize, usize, Activation)]) -> Result<()> {
    let Some(first) = dims.first() else {
        return Err(Error::Model("model has no layers".into()));
    };
    if first.0 != WAVEFORM_LEN {
        return Err(Error::Model(format!(
            "first layer expects {} inputs, must be {WAVEFORM_LEN}",
            first.0
        )));
    }
    for (i, pair) in dims.windows(2).enumerate() {
        if pair[0].1 != pair[1].0 {
            return Err(Error::Model(format!(
                "layer {i} outputs {} values but layer {} expects {}",
                pair[0].1,
                i + 1,
                pair[1].0
            )));
        }
    }
    let last = dims.len() - 1;
    if dims[last].1 != NUM_CLASSES {
        return Err(Error::Model(format!(
            "output layer has {} neurons, must be {NUM_CLASSES}",
            dims[last].1
        )));
    }
    for (i, d) in dims.iter().enumerate() {
        let expected = if i == last {
            Activation::Linear
        } else {
            Activation::Relu
        };
        if d.2 != expected {
            return Err(Error::Model(format!(
                "layer {i} has activation {:?}, expected {:?}",
                d.2, expected
            )));
        }
        if d.1 == 0 {
            return Err(Error::Model(format!("layer {i} has no neurons")));
        }
    }
    Ok(())
}

/// Float MLP: 40 inputs, ReLU hidden layers, linear 3-logit output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel {
    layers: Vec<DenseLayer>,
}

impl MlpModel {
    pub fn new(layers: Vec<DenseLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.weights.len() != l.inputs * l.outputs || l.biases.len() != l.outputs {
                return Err(Error::Model(format!("layer {i} has inconsistent parameter sizes")));
            }
        }
        check_chain(
            &layers
                .iter()
                .map(|l| (l.inputs, l.outputs, l.activation))
                .collect::<Vec<_>>(),
        )?;
        Ok(Self { layers })
    }

    /// All-zero model with the given layer sizes (input first, output last).
    pub fn zeros(topology: &[usize]) -> Result<Self> {
        if topology.len() < 2 {
            return Err(Error::Model("topology needs at least input and output".into()));
        }
        let n = topology.len() - 1;
        let layers = topology
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let act = if i + 1 == n {
                    Activation::Linear
                } else {
                    Activation::Relu
                };
                DenseLayer::zeros(w[0], w[1], act)
            })
            .collect();
        Self::new(layers)
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn topology(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    /// Logits of a dense forward pass. No softmax is applied.
    pub fn infer_float(&self, input: &[f64]) -> Result<Vec<f64>> {
        if input.len() != WAVEFORM_LEN {
            return Err(Error::Input(format!(
                "expected {WAVEFORM_LEN} inputs, got {}",
                input.len()
            )));
        }
        Ok(self.layers.iter().fold(input.to_vec(), |x, l| l.forward(&x)))
    }

    /// Post-activation output of every layer.
    pub fn activations(&self, input: &[f64]) -> Vec<Vec<f64>> {
        let mut out: Vec<Vec<f64>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let x = out.last().map(Vec::as_slice).unwrap_or(input);
            out.push(l.forward(x));
        }
        out
    }
}

/// Integer layer: `acc = sum(q_w * q_in) + q_bias` in 32 bits.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedLayer {
    pub inputs: usize,
    pub outputs: usize,
    pub q_weights: Vec<i8>,
    pub q_biases: Vec<i32>,
    pub input_scale: f64,
    pub weight_scale: f64,
    pub output_scale: f64,
    pub activation: Activation,
}

impl QuantizedLayer {
    fn accumulator_scale(&self) -> f64 {
        self.input_scale * self.weight_scale
    }

    fn accumulate(&self, x: &[i8]) -> Vec<i32> {
        self.q_weights
            .chunks_exact(self.inputs)
            .zip(&self.q_biases)
            .map(|(row, &b)| {
                row.iter()
                    .zip(x)
                    .fold(b, |acc, (&w, &v)| acc + i32::from(w) * i32::from(v))
            })
            .collect()
    }

    /// Worst-case accumulator magnitude for any int8 input.
    fn accumulator_bound(&self) -> i64 {
        self.q_weights
            .chunks_exact(self.inputs)
            .zip(&self.q_biases)
            .map(|(row, &b)| {
                row.iter().map(|&w| i64::from(w).abs() * 128).sum::<i64>() + i64::from(b).abs()
            })
            .max()
            .unwrap_or(0)
    }
}

/// Signed 8-bit model with per-layer symmetric scales (zero point 0).
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedMlpModel {
    layers: Vec<QuantizedLayer>,
}

impl QuantizedMlpModel {
    /// Validates dimensions, scales and the accumulator range.
    pub fn new(layers: Vec<QuantizedLayer>) -> Result<Self> {
        for (i, l) in layers.iter().enumerate() {
            if l.q_weights.len() != l.inputs * l.outputs || l.q_biases.len() != l.outputs {
                return Err(Error::Model(format!("layer {i} has inconsistent parameter sizes")));
            }
            if l.q_weights.iter().any(|&w| w == i8::MIN) {
                return Err(Error::Model(format!("layer {i} has a weight of -128")));
            }
            for (name, s) in [
                ("input_scale", l.input_scale),
                ("weight_scale", l.weight_scale),
                ("output_scale", l.output_scale),
            ] {
                if !(s > 0.0 && s.is_finite()) {
                    return Err(Error::Model(format!("layer {i} {name} must be positive, got {s}")));
                }
            }
            if l.accumulator_bound() > i64::from(i32::MAX) {
                return Err(Error::Model(format!(
                    "layer {i} can overflow the 32-bit accumulator"
                )));
            }
        }
        check_chain(
            &layers
                .iter()
                .map(|l| (l.inputs, l.outputs, l.activation))
                .collect::<Vec<_>>(),
        )?;
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[QuantizedLayer] {
        &self.layers
    }

    pub fn topology(&self) -> Vec<usize> {
        std::iter::once(self.layers[0].inputs)
            .chain(self.layers.iter().map(|l| l.outputs))
            .collect()
    }

    /// Integer inference. Returns dequantized logits and the argmax class.
    pub fn infer_quantized(&self, input: &SpikeWaveform) -> ([f64; NUM_CLASSES], SpikeClass) {
        let mut x: Vec<i8> = input.0.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let acc = layer.accumulate(&x);
            if i == last {
                let scale = layer.accumulator_scale();
                let mut logits = [0.0; NUM_CLASSES];
                for (o, a) in logits.iter_mut().zip(&acc) {
                    *o = f64::from(*a) * scale;
                }
                // Argmax on the integer accumulators; the positive scale
                // preserves order.
                let mut best = 0;
                for (k, a) in acc.iter().enumerate() {
                    if *a > acc[best] {
                        best = k;
                    }
                }
                return (logits, SpikeClass::from_index(best).expect("3 outputs"));
            }
            let rescale = layer.accumulator_scale() / layer.output_scale;
            x = acc
                .iter()
                .map(|&a| {
                    let q = (f64::from(a) * rescale).round_ties_even().clamp(-128.0, 127.0) as i8;
                    match layer.activation {
                        Activation::Relu => q.max(0),
                        Activation::Linear => q,
                    }
                })
                .collect();
        }
        unreachable!("model has at least one layer")
    }
}

/// Symmetric scale for values whose largest magnitude is `max_abs`.
fn symmetric_scale(max_abs: f64) -> f64 {
    (max_abs / 127.0).max(SCALE_FLOOR)
}

/// Post-training quantization with max-abs calibration.
///
/// The first layer's input scale is 1 because the inputs already are
/// signed 8-bit counts. Every layer's output scale is calibrated from the
/// largest float activation seen on `calibration`; the next layer inherits
/// it as its input scale.
pub fn quantize(model: &MlpModel, calibration: &[SpikeWaveform]) -> Result<QuantizedMlpModel> {
    if calibration.is_empty() {
        return Err(Error::Input("calibration set is empty".into()));
    }
    let n_layers = model.layers().len();
    let mut max_act = vec![0.0f64; n_layers];
    for w in calibration {
        for (m, act) in max_act.iter_mut().zip(model.activations(&w.to_f64())) {
            *m = act.iter().fold(*m, |m, v| m.max(v.abs()));
        }
    }

    let mut layers = Vec::with_capacity(n_layers);
    let mut input_scale = 1.0;
    for (layer, &act_max) in model.layers().iter().zip(&max_act) {
        let w_max = layer.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
        let weight_scale = symmetric_scale(w_max);
        let q_weights = layer
            .weights
            .iter()
            .map(|w| (w / weight_scale).round_ties_even().clamp(-127.0, 127.0) as i8)
            .collect();
        let bias_scale = input_scale * weight_scale;
        let q_biases = layer
            .biases
            .iter()
            .map(|b| {
                let q = (b / bias_scale).round_ties_even();
                if q.abs() > f64::from(i32::MAX) {
                    Err(Error::Model(format!(
                        "bias {b} does not fit 32 bits at scale {bias_scale:e}"
                    )))
                } else {
                    Ok(q as i32)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let output_scale = symmetric_scale(act_max);
        layers.push(QuantizedLayer {
            inputs: layer.inputs,
            outputs: layer.outputs,
            q_weights,
            q_biases,
            input_scale,
            weight_scale,
            output_scale,
            activation: layer.activation,
        });
        input_scale = output_scale;
    }
    QuantizedMlpModel::new(layers)
}

/// Anything that maps a captured waveform to a class.
pub trait SpikeClassifier {
    fn classify_waveform(&self, waveform: &SpikeWaveform) -> SpikeClass;
}

impl SpikeClassifier for MlpModel {
    fn classify_waveform(&self, waveform: &SpikeWaveform) -> SpikeClass {
        let logits = self
            .infer_float(&waveform.to_f64())
            .expect("waveform has the model's input width");
        classify(&logits)
    }
}

impl SpikeClassifier for QuantizedMlpModel {
    fn classify_waveform(&self, waveform: &SpikeWaveform) -> SpikeClass {
        self.infer_quantized(waveform).1
    }
}

/// A model of either precision, as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyModel {
    Float(MlpModel),
    Quantized(QuantizedMlpModel),
}

#[derive(Serialize, Deserialize)]
struct FloatLayerRepr {
    weights: Vec<f64>,
    biases: Vec<f64>,
    activation: Activation,
}

#[derive(Serialize, Deserialize)]
struct QuantLayerRepr {
    weights: Vec<i64>,
    biases: Vec<i64>,
    activation: Activation,
    input_scale: f64,
    weight_scale: f64,
    output_scale: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum ModelBody {
    Float { layers: Vec<FloatLayerRepr> },
    Quant { layers: Vec<QuantLayerRepr> },
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    topology: Vec<usize>,
    #[serde(flatten)]
    body: ModelBody,
}

impl AnyModel {
    pub fn topology(&self) -> Vec<usize> {
        match self {
            AnyModel::Float(m) => m.topology(),
            AnyModel::Quantized(m) => m.topology(),
        }
    }

    fn to_file(&self) -> ModelFile {
        let body = match self {
            AnyModel::Float(m) => ModelBody::Float {
                layers: m
                    .layers()
                    .iter()
                    .map(|l| FloatLayerRepr {
                        weights: l.weights.clone(),
                        biases: l.biases.clone(),
                        activation: l.activation,
                    })
                    .collect(),
            },
            AnyModel::Quantized(m) => ModelBody::Quant {
                layers: m
                    .layers()
                    .iter()
                    .map(|l| QuantLayerRepr {
                        weights: l.q_weights.iter().map(|&w| i64::from(w)).collect(),
                        biases: l.q_biases.iter().map(|&b| i64::from(b)).collect(),
                        activation: l.activation,
                        input_scale: l.input_scale,
                        weight_scale: l.weight_scale,
                        output_scale: l.output_scale,
                    })
                    .collect(),
            },
        };
        ModelFile {
            version: MODEL_FILE_VERSION,
            topology: self.topology(),
            body,
        }
    }

    fn from_file(file: ModelFile) -> Result<Self> {
        if file.version != MODEL_FILE_VERSION {
            return Err(Error::Model(format!(
                "unsupported model file version {}",
                file.version
            )));
        }
        let topo = &file.topology;
        let n_layers = match &file.body {
            ModelBody::Float { layers } => layers.len(),
            ModelBody::Quant { layers } => layers.len(),
        };
        if topo.len() != n_layers + 1 {
            return Err(Error::Model(format!(
                "topology {topo:?} does not describe {n_layers} layers"
            )));
        }
        let model = match file.body {
            ModelBody::Float { layers } => AnyModel::Float(MlpModel::new(
                layers
                    .into_iter()
                    .enumerate()
                    .map(|(i, l)| DenseLayer {
                        inputs: topo[i],
                        outputs: topo[i + 1],
                        weights: l.weights,
                        biases: l.biases,
                        activation: l.activation,
                    })
                    .collect(),
            )?),
            ModelBody::Quant { layers } => {
                let mut out = Vec::with_capacity(layers.len());
                for (i, l) in layers.into_iter().enumerate() {
                    let q_weights = l
                        .weights
                        .iter()
                        .map(|&w| {
                            i8::try_from(w)
                                .ok()
                                .filter(|w| *w != i8::MIN)
                                .ok_or_else(|| {
                                    Error::Model(format!("layer {i} weight {w} outside int8 range"))
                                })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let q_biases = l
                        .biases
                        .iter()
                        .map(|&b| {
                            i32::try_from(b).map_err(|_| {
                                Error::Model(format!("layer {i} bias {b} outside int32 range"))
                            })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    out.push(QuantizedLayer {
                        inputs: topo[i],
                        outputs: topo[i + 1],
                        q_weights,
                        q_biases,
                        input_scale: l.input_scale,
                        weight_scale: l.weight_scale,
                        output_scale: l.output_scale,
                        activation: l.activation,
                    });
                }
                AnyModel::Quantized(QuantizedMlpModel::new(out)?)
            }
        };
        Ok(model)
    }
}

pub fn write_model<W: Write>(mut w: W, model: &AnyModel) -> Result<()> {
    serde_json::to_writer_pretty(&mut w, &model.to_file())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_model<R: Read>(r: R) -> Result<AnyModel> {
    let file: ModelFile = serde_json::from_reader(r)?;
    AnyModel::from_file(file)
}

pub fn save_model(path: impl AsRef<Path>, model: &AnyModel) -> Result<()> {
    write_model(BufWriter::new(File::create(path)?), model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<AnyModel> {
    read_model(BufReader::new(File::open(path)?))
}
