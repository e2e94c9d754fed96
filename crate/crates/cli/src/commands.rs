use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use headstage::analysis::{apply_dead_zone, match_events, metrics_report, write_trace};
use headstage::nn::{load_model, quantize, save_model, AnyModel, SpikeClass, SpikeClassifier, SpikeWaveform};
use headstage::pipeline::{capture_detections, run_pipeline, write_events_csv, RunStats};
use headstage::signal::{generate_recording, load_annotations, load_recording, save_annotations, save_recording};
use headstage::store::{load_event_log, pack_events, resource_report, save_event_log, unpack, EventRecord};
use headstage::train::{
    balance_classes, build_dataset, class_counts, dse_select, load_dataset, run_dse, save_dataset,
    train_and_test, write_dse_csv, CvConfig, GridKind,
};
use serde::Serialize;

use crate::{
    BuildDatasetArgs, Cli, CliConfig, CliError, Command, DetectArgs, DseArgs, GenerateArgs, GridArg,
    MetricsArgs, PostprocessArgs, QuantizeArgs, ReportArgs, RunArgs, TrainArgs,
};

type Result<T> = std::result::Result<T, CliError>;

pub fn dispatch(cli: Cli) -> Result<()> {
    let cfg = CliConfig::load(cli.config.as_deref())?;
    match cli.command {
        Command::Generate(a) => generate(&cfg, a),
        Command::Detect(a) => detect(&cfg, a),
        Command::BuildDataset(a) => build(&cfg, a),
        Command::Train(a) => train(&cfg, a),
        Command::Quantize(a) => quantize_cmd(a),
        Command::Dse(a) => dse(&cfg, a),
        Command::Run(a) => run(&cfg, a),
        Command::Postprocess(a) => postprocess(&cfg, a),
        Command::Report(a) => report(&cfg, a),
        Command::Metrics(a) => metrics(&cfg, a),
    }
}

/// Attaches the path to I/O failures.
fn at<T>(path: &Path, r: headstage::Result<T>) -> Result<T> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Io(m) => CliError::Io(format!("{}: {m}", path.display())),
        CliError::Validation(m) => CliError::Validation(format!("{}: {m}", path.display())),
        other => other,
    })
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| CliError::Io(e.to_string()))?;
    writeln!(w)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    serde_json::from_reader(std::io::BufReader::new(file))
        .map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))
}

fn generate(cfg: &CliConfig, a: GenerateArgs) -> Result<()> {
    let mut rec_cfg = cfg.recording;
    if let Some(d) = a.duration_s {
        rec_cfg.duration_s = d;
    }
    if let Some(s) = a.seed {
        rec_cfg.seed = s;
    }
    let (rec, ann) = generate_recording(&rec_cfg, &cfg.synthesis)?;
    at(&a.out, save_recording(&a.out, &rec))?;
    at(&a.annotations, save_annotations(&a.annotations, &ann))?;
    eprintln!(
        "{} samples ({:.1} s), {} annotations",
        rec.samples.len(),
        rec.duration_s(),
        ann.len()
    );
    Ok(())
}

/// Stand-in classifier for traces without a model.
struct Unclassified;

impl SpikeClassifier for Unclassified {
    fn classify_waveform(&self, _: &SpikeWaveform) -> SpikeClass {
        SpikeClass::F
    }
}

fn detect(cfg: &CliConfig, a: DetectArgs) -> Result<()> {
    let rec = at(&a.input, load_recording(&a.input))?;
    let captures = capture_detections(&rec, &cfg.detector, &cfg.pipeline)?;
    let mut w = csv::Writer::from_writer(create(&a.out)?);
    let mut write = || -> csv::Result<()> {
        w.write_record(["detection_tick"])?;
        for c in &captures {
            w.write_record([c.detection_tick.to_string()])?;
        }
        w.flush()?;
        Ok(())
    };
    write().map_err(|e| CliError::Io(format!("{}: {e}", a.out.display())))?;
    if let Some(trace) = &a.trace {
        let model = a.model.as_ref().map(|p| at(p, load_model(p))).transpose()?;
        let w = create(trace)?;
        let r = match &model {
            Some(AnyModel::Float(m)) => write_trace(w, &rec, &cfg.detector, m, &cfg.pipeline),
            Some(AnyModel::Quantized(m)) => write_trace(w, &rec, &cfg.detector, m, &cfg.pipeline),
            None => write_trace(w, &rec, &cfg.detector, &Unclassified, &cfg.pipeline),
        };
        at(trace, r)?;
    }
    eprintln!("{} detections", captures.len());
    Ok(())
}

fn build(cfg: &CliConfig, a: BuildDatasetArgs) -> Result<()> {
    let rec = at(&a.input, load_recording(&a.input))?;
    let ann = at(&a.annotations, load_annotations(&a.annotations))?;
    let mut data = build_dataset(&rec, &ann, &cfg.detector, &cfg.pipeline, cfg.dataset.label_window_ms)?;
    if a.balance {
        data = balance_classes(&data, a.seed.unwrap_or(cfg.train.seed))?;
    }
    at(&a.out, save_dataset(&a.out, &data))?;
    let [cs, ss, f] = class_counts(&data);
    eprintln!("{} waveforms: CS {cs}, SS {ss}, F {f}", data.len());
    Ok(())
}

fn cv_config(cfg: &CliConfig) -> CvConfig {
    CvConfig {
        folds: cfg.dse.folds,
        confidence: cfg.dse.confidence,
        outlier_k: cfg.dataset.outlier_k,
        outlier_min_foreign: cfg.dataset.outlier_min_foreign,
    }
}

#[derive(Serialize)]
struct TrainSummary {
    topology: Vec<usize>,
    ortho_lambda: f64,
    train_size: usize,
    test_size: usize,
    best_epoch: usize,
    stopped_early: bool,
    test_metrics: headstage::analysis::MetricsReport,
}

fn train(cfg: &CliConfig, a: TrainArgs) -> Result<()> {
    let data = at(&a.data, load_dataset(&a.data))?;
    let mut tc = cfg.train;
    if let Some(rf) = a.rf {
        tc.ortho_lambda = rf;
    }
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let result = train_and_test(&data, &a.topology, &tc, &cv_config(cfg))?;
    at(&a.out, save_model(&a.out, &AnyModel::Float(result.float.clone())))?;
    if let Some(log) = &a.log {
        let w = create(log)?;
        at(log, result.log.write_jsonl(w))?;
    }
    let summary = TrainSummary {
        topology: a.topology.clone(),
        ortho_lambda: tc.ortho_lambda,
        train_size: result.train_size,
        test_size: result.test_size,
        best_epoch: result.log.best_epoch,
        stopped_early: result.log.stopped_early,
        test_metrics: metrics_report(&result.test_confusion)?,
    };
    eprintln!(
        "held-out overall accuracy {:.4} after {} epochs",
        summary.test_metrics.overall_accuracy,
        result.log.epochs.len()
    );
    if let Some(path) = &a.summary {
        write_json(path, &summary)?;
    }
    Ok(())
}

fn quantize_cmd(a: QuantizeArgs) -> Result<()> {
    let model = match at(&a.model, load_model(&a.model))? {
        AnyModel::Float(m) => m,
        AnyModel::Quantized(_) => {
            return Err(CliError::Validation(format!("{} is already quantized", a.model.display())))
        }
    };
    let calib: Vec<SpikeWaveform> = at(&a.calib, load_dataset(&a.calib))?
        .into_iter()
        .map(|d| d.waveform)
        .collect();
    let q = quantize(&model, &calib)?;
    at(&a.out, save_model(&a.out, &AnyModel::Quantized(q)))
}

#[derive(Serialize)]
struct Selection {
    architecture: String,
    topology: Vec<usize>,
    rf: f64,
    complexity: u64,
    cs_ci_low: f64,
}

fn dse(cfg: &CliConfig, a: DseArgs) -> Result<()> {
    let data = at(&a.data, load_dataset(&a.data))?;
    let mut dc = cfg.dse.clone();
    if let Some(g) = a.grid {
        dc.grid = match g {
            GridArg::Table3 => GridKind::Table3,
            GridArg::Full => GridKind::Full,
        };
    }
    let mut tc = cfg.train;
    if let Some(s) = a.seed {
        tc.seed = s;
    }
    let candidates = dc.candidates();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs.unwrap_or(0))
        .build()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let rows = pool.install(|| run_dse(&data, &candidates, &tc, &dc))?;
    let w = create(&a.out)?;
    at(&a.out, write_dse_csv(w, &rows))?;
    let chosen = dse_select(&rows, dc.cs_accuracy_floor)?;
    eprintln!(
        "selected {} (rf {}, complexity {})",
        chosen.architecture(),
        chosen.rf,
        chosen.complexity
    );
    if let Some(path) = &a.select {
        write_json(
            path,
            &Selection {
                architecture: chosen.architecture(),
                topology: chosen.topology.clone(),
                rf: chosen.rf,
                complexity: chosen.complexity,
                cs_ci_low: chosen.class(SpikeClass::CS).ci_low,
            },
        )?;
    }
    Ok(())
}

fn sample_rate_u32(rate: f64) -> Result<u32> {
    if rate.fract() != 0.0 || !(1.0..=f64::from(u32::MAX)).contains(&rate) {
        return Err(CliError::Validation(format!(
            "sample rate {rate} cannot be stored as whole hertz in an event log"
        )));
    }
    Ok(rate as u32)
}

fn run(cfg: &CliConfig, a: RunArgs) -> Result<()> {
    let rec = at(&a.input, load_recording(&a.input))?;
    let model = at(&a.model, load_model(&a.model))?;
    let (events, stats) = match &model {
        AnyModel::Quantized(m) => run_pipeline(&rec, &cfg.detector, m, &cfg.pipeline)?,
        AnyModel::Float(m) => run_pipeline(&rec, &cfg.detector, m, &cfg.pipeline)?,
    };
    let rate = sample_rate_u32(rec.sample_rate_hz)?;
    at(&a.out, save_event_log(&a.out, rate, &pack_events(&events)?))?;
    if let Some(path) = &a.events_csv {
        at(path, write_events_csv(create(path)?, &events))?;
    }
    if let Some(path) = &a.stats {
        write_json(path, &stats)?;
    }
    eprintln!(
        "{} detections, {} events ({} CS, {} SS, {} F classified)",
        stats.detections, stats.emitted_events, stats.classified_cs, stats.classified_ss, stats.classified_f
    );
    Ok(())
}

fn postprocess(cfg: &CliConfig, a: PostprocessArgs) -> Result<()> {
    let (rate, records) = at(&a.input, load_event_log(&a.input))?;
    let mut pc = cfg.postprocess;
    if let Some(dz) = a.dead_zone_ms {
        pc.dead_zone_ms = dz;
    }
    let events: Vec<_> = records.into_iter().map(unpack).collect();
    let kept = apply_dead_zone(&events, &pc, f64::from(rate))?;
    let packed: Vec<EventRecord> = pack_events(&kept)?;
    at(&a.out, save_event_log(&a.out, rate, &packed))?;
    eprintln!("kept {} of {} events", kept.len(), events.len());
    Ok(())
}

fn report(cfg: &CliConfig, a: ReportArgs) -> Result<()> {
    let mut model = cfg.resources;
    if let Some(path) = &a.stats {
        let stats: RunStats = read_json(path)?;
        let duration = stats.duration_s();
        if duration <= 0.0 {
            return Err(CliError::Validation(format!("{}: run covers no time", path.display())));
        }
        model.spike_rate_hz = stats.classify_invocations as f64 / duration;
        model.sample_rate_hz = stats.sample_rate_hz;
    }
    let r = resource_report(&model, a.duration_s)?;
    eprintln!(
        "{:.3} uW, {:.2} days on {} mAh at an assumed {} V",
        r.power_breakdown.total_uw, r.battery_days, model.battery_capacity_mah, r.battery_voltage_v
    );
    write_json(&a.out, &r)
}

fn metrics(cfg: &CliConfig, a: MetricsArgs) -> Result<()> {
    let (rate, records) = at(&a.events, load_event_log(&a.events))?;
    let ann = at(&a.annotations, load_annotations(&a.annotations))?;
    let start = (a.start_s * f64::from(rate)).ceil() as u64;
    let events: Vec<_> = records
        .into_iter()
        .map(unpack)
        .filter(|e| e.timestamp >= start)
        .collect();
    let ann: Vec<_> = ann.into_iter().filter(|x| x.sample_index >= start).collect();
    let tol = a.tolerance_ms.unwrap_or(cfg.metrics.tolerance_ms);
    let m = match_events(&events, &ann, tol, f64::from(rate))?;
    let r = metrics_report(&m.confusion)?;
    eprintln!("overall accuracy {:.4}", r.overall_accuracy);
    write_json(&a.out, &r)
}
