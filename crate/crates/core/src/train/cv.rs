//! Cross-validation, the topology grid search and its selection rule.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::analysis::{accuracy, ConfusionMatrix};
use crate::error::{Error, Result};
use crate::nn::{quantize, MlpModel, QuantizedMlpModel, SpikeClass, SpikeClassifier, SpikeWaveform, NUM_CLASSES, WAVEFORM_LEN};

use super::dataset::{balance_classes, filter_outliers, stratified_folds, stratified_split, LabeledWaveform};
use super::mlp::{train_mlp, TrainConfig, TrainingLog};

/// Mixes `parts` into a seed with FNV-1a followed by a splitmix64 finalizer.
/// Stable across platforms and releases.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for word in std::iter::once(base).chain(parts.iter().copied()) {
        for b in word.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    let mut z = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn topology_seed(base: u64, topology: &[usize], rf: f64, fold: usize) -> u64 {
    let mut parts: Vec<u64> = topology.iter().map(|&n| n as u64).collect();
    parts.push(rf.to_bits());
    parts.push(fold as u64);
    derive_seed(base, &parts)
}

/// `sum n(i) * n(i+1)` over consecutive layer sizes.
pub fn complexity(topology: &[usize]) -> u64 {
    topology.windows(2).map(|w| (w[0] * w[1]) as u64).sum()
}

/// Confusion matrix of `classifier` over `data` (rows = true label).
pub fn evaluate<C: SpikeClassifier + ?Sized>(classifier: &C, data: &[LabeledWaveform]) -> ConfusionMatrix {
    ConfusionMatrix::from_pairs(data.iter().map(|d| (d.label, classifier.classify_waveform(&d.waveform))))
}

/// Evaluates `model` after quantizing it against `calibration`, or in float
/// when `quantize_first` is false.
pub fn evaluate_model(
    model: &MlpModel,
    data: &[LabeledWaveform],
    quantize_first: bool,
    calibration: &[SpikeWaveform],
) -> Result<ConfusionMatrix> {
    if quantize_first {
        let q = quantize(model, calibration)?;
        Ok(evaluate(&q, data))
    } else {
        Ok(evaluate(model, data))
    }
}

/// Settings for the per-fold preprocessing of training parts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    pub folds: usize,
    pub confidence: f64,
    pub outlier_k: usize,
    pub outlier_min_foreign: usize,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self {
            folds: 10,
            confidence: 0.95,
            outlier_k: 10,
            outlier_min_foreign: 9,
        }
    }
}

impl CvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config("folds must be at least 2".into()));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return Err(Error::Config(format!("confidence must lie in (0, 1), got {}", self.confidence)));
        }
        if self.outlier_min_foreign > self.outlier_k {
            return Err(Error::Config("outlier_min_foreign cannot exceed outlier_k".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassStats {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
}

impl ClassStats {
    /// Mean, standard error of the mean and a two-sided normal-approximation
    /// interval at `confidence`.
    pub fn from_samples(samples: &[f64], confidence: f64) -> Self {
        let n = samples.len() as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = if samples.len() > 1 {
            samples.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let std_error = (var / n).sqrt();
        let z = z_score(confidence);
        Self {
            mean,
            std_error,
            ci_low: mean - z * std_error,
            ci_high: mean + z * std_error,
        }
    }
}

/// Two-sided standard-normal critical value.
pub fn z_score(confidence: f64) -> f64 {
    Normal::standard().inverse_cdf(0.5 + confidence / 2.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub topology: Vec<usize>,
    pub ortho_lambda: f64,
    /// Indexed in `(CS, SS, F)` order.
    pub per_class: [ClassStats; NUM_CLASSES],
    pub fold_accuracies: Vec<[f64; NUM_CLASSES]>,
    pub confusion: ConfusionMatrix,
}

impl CvResult {
    pub fn class(&self, class: SpikeClass) -> &ClassStats {
        &self.per_class[class.index()]
    }
}

fn check_cv_input(data: &[LabeledWaveform], cv: &CvConfig) -> Result<()> {
    cv.validate()?;
    if data.len() < cv.folds {
        return Err(Error::Input(format!(
            "dataset of {} samples is smaller than {} folds",
            data.len(),
            cv.folds
        )));
    }
    Ok(())
}

fn fold_assignment(data: &[LabeledWaveform], cv: &CvConfig, seed: u64) -> Vec<usize> {
    let labels: Vec<SpikeClass> = data.iter().map(|d| d.label).collect();
    stratified_folds(&labels, cv.folds, derive_seed(seed, &[u64::MAX]))
}

/// Balances and filters a training part. Never applied to held-out data.
pub fn prepare_training_part(
    data: &[LabeledWaveform],
    cv: &CvConfig,
    seed: u64,
) -> Result<Vec<LabeledWaveform>> {
    let balanced = balance_classes(data, seed)?;
    Ok(filter_outliers(&balanced, cv.outlier_k, cv.outlier_min_foreign))
}

fn run_fold(
    data: &[LabeledWaveform],
    assignment: &[usize],
    fold: usize,
    topology: &[usize],
    cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<ConfusionMatrix> {
    let seed = topology_seed(cfg.seed, topology, cfg.ortho_lambda, fold);
    let (train, test): (Vec<_>, Vec<_>) = data
        .iter()
        .zip(assignment)
        .partition(|(_, &f)| f != fold);
    let train: Vec<LabeledWaveform> = train.into_iter().map(|(d, _)| *d).collect();
    let test: Vec<LabeledWaveform> = test.into_iter().map(|(d, _)| *d).collect();
    if test.is_empty() {
        return Err(Error::Input(format!("fold {fold} has no held-out samples")));
    }
    let train = prepare_training_part(&train, cv, seed)?;
    let (model, _) = train_mlp(&train, topology, &TrainConfig { seed, ..*cfg })?;
    let calibration: Vec<SpikeWaveform> = train.iter().map(|d| d.waveform).collect();
    evaluate_model(&model, &test, true, &calibration)
}

fn summarize(
    topology: &[usize],
    ortho_lambda: f64,
    folds: Vec<ConfusionMatrix>,
    confidence: f64,
) -> Result<CvResult> {
    let mut fold_accuracies = Vec::with_capacity(folds.len());
    let mut confusion = ConfusionMatrix::default();
    for cm in &folds {
        let mut acc = [0.0; NUM_CLASSES];
        for class in SpikeClass::ALL {
            acc[class.index()] = accuracy(cm, class)?;
        }
        fold_accuracies.push(acc);
        confusion.merge(cm);
    }
    let per_class = std::array::from_fn(|k| {
        let samples: Vec<f64> = fold_accuracies.iter().map(|a| a[k]).collect();
        ClassStats::from_samples(&samples, confidence)
    });
    Ok(CvResult {
        topology: topology.to_vec(),
        ortho_lambda,
        per_class,
        fold_accuracies,
        confusion,
    })
}

/// Stratified k-fold cross-validation. For each fold the training part is
/// balanced and outlier-filtered, a model is trained, quantized against the
/// training part and evaluated on the untouched held-out part. Folds run in
/// parallel; results do not depend on scheduling.
pub fn cross_validate(
    data: &[LabeledWaveform],
    topology: &[usize],
    cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<CvResult> {
    check_cv_input(data, cv)?;
    let assignment = fold_assignment(data, cv, cfg.seed);
    let folds = (0..cv.folds)
        .into_par_iter()
        .map(|f| run_fold(data, &assignment, f, topology, cfg, cv))
        .collect::<Result<Vec<_>>>()?;
    summarize(topology, cfg.ortho_lambda, folds, cv.confidence)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridKind {
    /// The nine reference candidate rows.
    Table3,
    /// Every non-increasing hidden-layer configuration within the ranges.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DseConfig {
    pub max_hidden_layers: usize,
    pub layer_size_ranges: Vec<usize>,
    pub descending_sizes_required: bool,
    pub folds: usize,
    pub cs_accuracy_floor: f64,
    pub confidence: f64,
    pub regularization_factors: Vec<f64>,
    pub grid: GridKind,
    pub outlier_k: usize,
    pub outlier_min_foreign: usize,
}

impl Default for DseConfig {
    fn default() -> Self {
        Self {
            max_hidden_layers: 4,
            layer_size_ranges: vec![40, 20, 10, 10],
            descending_sizes_required: true,
            folds: 10,
            cs_accuracy_floor: 0.90,
            confidence: 0.95,
            regularization_factors: vec![0.01, 0.001],
            grid: GridKind::Table3,
            outlier_k: 10,
            outlier_min_foreign: 9,
        }
    }
}

impl DseConfig {
    pub fn validate(&self) -> Result<()> {
        self.cv_config().validate()?;
        if self.layer_size_ranges.len() < self.max_hidden_layers {
            return Err(Error::Config(format!(
                "layer_size_ranges needs {} entries, got {}",
                self.max_hidden_layers,
                self.layer_size_ranges.len()
            )));
        }
        if self.layer_size_ranges.iter().any(|&r| r == 0) {
            return Err(Error::Config("layer_size_ranges entries must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.cs_accuracy_floor) {
            return Err(Error::Config("cs_accuracy_floor must lie in [0, 1]".into()));
        }
        if self.regularization_factors.is_empty()
            || self.regularization_factors.iter().any(|r| !(r.is_finite() && *r >= 0.0))
        {
            return Err(Error::Config("regularization_factors must be non-empty and non-negative".into()));
        }
        Ok(())
    }

    pub fn cv_config(&self) -> CvConfig {
        CvConfig {
            folds: self.folds,
            confidence: self.confidence,
            outlier_k: self.outlier_k,
            outlier_min_foreign: self.outlier_min_foreign,
        }
    }

    pub fn candidates(&self) -> Vec<Candidate> {
        match self.grid {
            GridKind::Table3 => table3_grid(),
            GridKind::Full => full_grid(self),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub topology: Vec<usize>,
    pub rf: f64,
}

fn candidate(topology: &[usize], rf: f64) -> Candidate {
    Candidate {
        topology: topology.to_vec(),
        rf,
    }
}

/// The nine reference (topology, regularization factor) rows.
pub fn table3_grid() -> Vec<Candidate> {
    vec![
        candidate(&[40, 2, 3], 0.001),
        candidate(&[40, 2, 3], 0.01),
        candidate(&[40, 4, 3, 3], 0.01),
        candidate(&[40, 5, 5, 2, 3], 0.01),
        candidate(&[40, 7, 7, 4, 3, 3], 0.01),
        candidate(&[40, 8, 8, 3, 3, 3], 0.001),
        candidate(&[40, 14, 10, 4, 3, 3], 0.01),
        candidate(&[40, 16, 7, 5, 4, 3], 0.01),
        candidate(&[40, 28, 14, 8, 6, 3], 0.01),
    ]
}

/// All hidden-layer configurations with up to `max_hidden_layers` layers,
/// each width bounded by its range and, if required, by the previous width.
pub fn hidden_configurations(cfg: &DseConfig) -> Vec<Vec<usize>> {
    fn extend(cfg: &DseConfig, prefix: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        out.push(prefix.clone());
        let depth = prefix.len();
        if depth == cfg.max_hidden_layers {
            return;
        }
        let mut hi = cfg.layer_size_ranges[depth];
        if cfg.descending_sizes_required {
            if let Some(&last) = prefix.last() {
                hi = hi.min(last);
            }
        }
        for w in 1..=hi {
            prefix.push(w);
            extend(cfg, prefix, out);
            prefix.pop();
        }
    }
    let mut out = Vec::new();
    extend(cfg, &mut Vec::new(), &mut out);
    out
}

pub fn full_grid(cfg: &DseConfig) -> Vec<Candidate> {
    let mut out = Vec::new();
    for hidden in hidden_configurations(cfg) {
        let mut topology = vec![WAVEFORM_LEN];
        topology.extend(&hidden);
        topology.push(NUM_CLASSES);
        for &rf in &cfg.regularization_factors {
            out.push(candidate(&topology, rf));
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DseRow {
    pub topology: Vec<usize>,
    pub rf: f64,
    pub stats: [ClassStats; NUM_CLASSES],
    pub complexity: u64,
}

impl DseRow {
    pub fn architecture(&self) -> String {
        self.topology
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("-")
    }

    pub fn class(&self, class: SpikeClass) -> &ClassStats {
        &self.stats[class.index()]
    }
}

/// Cross-validates every candidate. All (candidate, fold) tasks share one
/// fold assignment and run on the current rayon pool.
pub fn run_dse(
    data: &[LabeledWaveform],
    candidates: &[Candidate],
    cfg: &TrainConfig,
    dse: &DseConfig,
) -> Result<Vec<DseRow>> {
    dse.validate()?;
    let cv = dse.cv_config();
    check_cv_input(data, &cv)?;
    let assignment = fold_assignment(data, &cv, cfg.seed);
    let tasks: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..cv.folds).map(move |f| (c, f)))
        .collect();
    let results = tasks
        .par_iter()
        .map(|&(c, f)| {
            let cand = &candidates[c];
            let train_cfg = TrainConfig {
                ortho_lambda: cand.rf,
                ..*cfg
            };
            run_fold(data, &assignment, f, &cand.topology, &train_cfg, &cv)
        })
        .collect::<Result<Vec<_>>>()?;
    candidates
        .iter()
        .zip(results.chunks(cv.folds))
        .map(|(cand, folds)| {
            let r = summarize(&cand.topology, cand.rf, folds.to_vec(), cv.confidence)?;
            Ok(DseRow {
                topology: cand.topology.clone(),
                rf: cand.rf,
                stats: r.per_class,
                complexity: complexity(&cand.topology),
            })
        })
        .collect()
}

/// Keeps rows whose CS interval lower bound exceeds `cs_floor`, then picks
/// the lowest complexity, then fewer layers, then the lexicographically
/// smaller topology, then the earlier row.
pub fn dse_select(rows: &[DseRow], cs_floor: f64) -> Result<&DseRow> {
    if rows.is_empty() {
        return Err(Error::Input("no grid-search results to select from".into()));
    }
    rows.iter()
        .filter(|r| r.class(SpikeClass::CS).ci_low > cs_floor)
        .min_by(|a, b| {
            a.complexity
                .cmp(&b.complexity)
                .then(a.topology.len().cmp(&b.topology.len()))
                .then(a.topology.cmp(&b.topology))
        })
        .ok_or_else(|| {
            Error::Infeasible(format!(
                "no topology has a CS accuracy interval above {cs_floor}"
            ))
        })
}

const DSE_HEADER: [&str; 12] = [
    "architecture",
    "rf",
    "cs_mean",
    "cs_ci_low",
    "cs_ci_high",
    "ss_mean",
    "ss_ci_low",
    "ss_ci_high",
    "f_mean",
    "f_ci_low",
    "f_ci_high",
    "complexity",
];

pub fn write_dse_csv<W: Write>(w: W, rows: &[DseRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(DSE_HEADER)?;
    for r in rows {
        let mut rec = vec![r.architecture(), r.rf.to_string()];
        for s in &r.stats {
            rec.extend([s.mean, s.ci_low, s.ci_high].map(|v| format!("{v:.6}")));
        }
        rec.push(r.complexity.to_string());
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

/// Result of the final train/test flow.
#[derive(Debug, Clone)]
pub struct FinalModel {
    pub float: MlpModel,
    pub quantized: QuantizedMlpModel,
    pub log: TrainingLog,
    pub test_confusion: ConfusionMatrix,
    pub train_size: usize,
    pub test_size: usize,
}

/// Holds out a stratified `test_fraction`, prepares and trains on the rest,
/// quantizes against the prepared training part and evaluates the
/// quantized model on the held-out part.
pub fn train_and_test(
    data: &[LabeledWaveform],
    topology: &[usize],
    cfg: &TrainConfig,
    cv: &CvConfig,
) -> Result<FinalModel> {
    cfg.validate()?;
    let (train, test) = stratified_split(data, cfg.test_fraction, derive_seed(cfg.seed, &[u64::MAX - 1]));
    let train = prepare_training_part(&train, cv, cfg.seed)?;
    let (float, log) = train_mlp(&train, topology, cfg)?;
    let calibration: Vec<SpikeWaveform> = train.iter().map(|d| d.waveform).collect();
    let quantized = quantize(&float, &calibration)?;
    let test_confusion = evaluate(&quantized, &test);
    Ok(FinalModel {
        float,
        quantized,
        log,
        test_confusion,
        train_size: train.len(),
        test_size: test.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_complexities() {
        let expected = [86, 86, 181, 241, 378, 426, 761, 819, 1690];
        let got: Vec<u64> = table3_grid().iter().map(|c| complexity(&c.topology)).collect();
        assert_eq!(got, expected);
    }

    #[test]
    fn seed_mixing_is_stable_and_sensitive() {
        assert_eq!(derive_seed(1, &[2, 3]), derive_seed(1, &[2, 3]));
        assert_ne!(derive_seed(1, &[2, 3]), derive_seed(1, &[3, 2]));
        assert_ne!(derive_seed(0, &[]), derive_seed(1, &[]));
    }

    #[test]
    fn z_for_95_percent() {
        assert!((z_score(0.95) - 1.959_963_984_540_054).abs() < 1e-9);
    }

    #[test]
    fn identical_samples_give_zero_width() {
        let s = ClassStats::from_samples(&[0.93; 10], 0.95);
        assert!((s.mean - 0.93).abs() < 1e-15);
        assert!(s.ci_high - s.ci_low < 1e-12);
    }

    #[test]
    fn full_grid_respects_bounds() {
        let cfg = DseConfig {
            layer_size_ranges: vec![4, 3, 2, 2],
            ..Default::default()
        };
        let hidden = hidden_configurations(&cfg);
        assert!(hidden.contains(&vec![]));
        assert!(hidden.iter().all(|h| h.windows(2).all(|w| w[0] >= w[1])));
        assert!(hidden.iter().all(|h| h.iter().zip(&cfg.layer_size_ranges).all(|(w, r)| w <= r)));
        assert_eq!(full_grid(&cfg).len(), hidden.len() * 2);
        // Brute-force count of non-increasing sequences.
        let mut count = 1;
        for a in 1..=4 {
            count += 1;
            for b in 1..=a.min(3) {
                count += 1;
                for c in 1..=b.min(2) {
                    count += 1 + c.min(2);
                }
            }
        }
        assert_eq!(hidden.len(), count);
    }

    fn row(topology: &[usize], cs_low: f64) -> DseRow {
        let s = ClassStats {
            mean: cs_low + 0.01,
            std_error: 0.005,
            ci_low: cs_low,
            ci_high: cs_low + 0.02,
        };
        DseRow {
            topology: topology.to_vec(),
            rf: 0.01,
            stats: [s; 3],
            complexity: complexity(topology),
        }
    }

    #[test]
    fn selection_prefers_lowest_complexity_survivor() {
        let rows = vec![
            row(&[40, 2, 3], 0.80),
            row(&[40, 28, 14, 8, 6, 3], 0.93),
            row(&[40, 16, 7, 5, 4, 3], 0.91),
        ];
        assert_eq!(dse_select(&rows, 0.90).unwrap().topology, vec![40, 16, 7, 5, 4, 3]);
        assert!(matches!(dse_select(&rows, 0.95), Err(Error::Infeasible(_))));
        assert!(dse_select(&[], 0.9).is_err());
    }

    #[test]
    fn selection_tie_breaks() {
        let mut a = row(&[40, 2, 3], 0.95);
        let mut b = row(&[40, 2, 3], 0.95);
        a.rf = 0.01;
        b.rf = 0.001;
        let rows = vec![a.clone(), b];
        assert_eq!(dse_select(&rows, 0.9).unwrap().rf, 0.01);
        let mut c = row(&[40, 3, 3], 0.95);
        c.complexity = a.complexity;
        let rows = vec![c, a];
        assert_eq!(dse_select(&rows, 0.9).unwrap().topology, vec![40, 2, 3]);
    }

    #[test]
    fn dse_csv_layout() {
        let mut buf = Vec::new();
        write_dse_csv(&mut buf, &[row(&[40, 16, 7, 5, 4, 3], 0.91)]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), DSE_HEADER.join(","));
        let fields: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(fields[0], "40-16-7-5-4-3");
        assert_eq!(fields[1], "0.01");
        assert_eq!(fields[11], "819");
    }
}
