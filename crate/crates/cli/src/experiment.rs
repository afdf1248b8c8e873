//! Experiment orchestration: data preparation, training, evaluation, report
//! emission, and model comparison tables.

use std::path::{Path, PathBuf};

use depthbench_core::checkpoint::{load_checkpoint, restore_store, save_checkpoint, Checkpoint};
use depthbench_core::data::{
    gen_synthetic_mono, gen_synthetic_stereo, load_mono_dataset, load_stereo_dataset, split_dataset,
    write_file_atomic, DatasetIndex, MonoGenConfig, MonoSample, StereoGenConfig, StereoSample,
};
use depthbench_core::mono::{build_mono_model, MonoModel, MonoStructure};
use depthbench_core::report::{Aggregates, MetricsReport};
use depthbench_core::stereo::{build_anynet, AnyNet};
use depthbench_core::train::{
    evaluate_mono, evaluate_stereo, train_mono, train_stereo, TrainHistory, TrainState,
};
use serde::{Deserialize, Serialize};

use crate::config::{parse_activation, parse_spn, ExperimentConfig, Task};
use crate::CliError;

pub const SCHEMA_VERSION: u32 = 1;

/// Reference results from full-scale training of the original model family;
/// annotation only, not reproduced at desk scale.
pub const REFERENCE_NOTE: &str =
    "full-scale reference results for this variant; annotation only, not desk-reproducible";

fn mono_reference(structure: &str, activation: &str) -> Option<(u64, f64)> {
    match (structure, activation) {
        ("4-1-4", "leaky_relu") => Some((1_966_467, 0.9895)),
        ("3-1-3", "leaky_relu") => Some((489_091, 0.9903)),
        ("3-1-3", "swish") => Some((489_091, 0.9871)),
        _ => None,
    }
}

fn stereo_reference(spn: Option<usize>) -> Option<(u64, f64)> {
    match spn {
        None => Some((34_629, 0.2994)),
        Some(1) => Some((34_827, 0.3048)),
        Some(2) => Some((35_277, 0.3193)),
        Some(4) => Some((36_933, 0.3264)),
        Some(8) => Some((43_269, 0.3178)),
        Some(_) => None,
    }
}

// ── Report schema ───────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ParamBlock {
    pub trainable: u64,
    pub non_trainable: u64,
    pub total: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReferenceBlock {
    pub parameters: u64,
    pub metric: f64,
    pub metric_name: String,
    pub note: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainBlock {
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Relative path of the per-step loss curve next to this report.
    pub history_csv: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub wall_clock_s: Option<f64>,
}

/// Self-contained experiment report; re-renderable without model files.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub experiment_id: String,
    pub task: String,
    pub variant: String,
    pub parameters: ParamBlock,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference: Option<ReferenceBlock>,
    pub macs_total: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macs_per_stage: Option<Vec<u64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainBlock>,
    pub metrics: MetricsReport,
}

/// Rounds to 9 significant digits, the serialization precision of reports.
pub fn round9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("round-trip of formatted float")
}

fn round_report(report: &mut ExperimentReport) {
    if let Some(r) = &mut report.reference {
        r.metric = round9(r.metric);
    }
    if let Some(t) = &mut report.train {
        t.initial_loss = round9(t.initial_loss);
        t.final_loss = round9(t.final_loss);
        t.wall_clock_s = t.wall_clock_s.map(round9);
    }
    for m in &mut report.metrics.metrics {
        for v in &mut m.per_sample {
            *v = round9(*v);
        }
        let a = &mut m.aggregates;
        a.mean = round9(a.mean);
        a.median = round9(a.median);
        a.q25 = round9(a.q25);
        a.q75 = round9(a.q75);
        a.min = round9(a.min);
        a.max = round9(a.max);
    }
}

// ── Data preparation ────────────────────────────────────────────────────

pub enum Dataset {
    Mono { train: Vec<MonoSample>, test: Vec<MonoSample> },
    Stereo { train: Vec<StereoSample>, test: Vec<StereoSample> },
}

pub fn prepare_data(config: &ExperimentConfig, base_dir: &Path) -> Result<Dataset, CliError> {
    let d = &config.data;
    match (config.task()?, d.source.as_str()) {
        (Task::Mono, "generate") => {
            let samples = gen_synthetic_mono(
                d.seed,
                &MonoGenConfig { count: d.count, height: d.height, width: d.width },
            )?;
            let (train, test) = split_samples(samples, d.split_ratio, d.split_seed)?;
            Ok(Dataset::Mono { train, test })
        }
        (Task::Stereo, "generate") => {
            let samples = gen_synthetic_stereo(
                d.seed,
                &StereoGenConfig {
                    count: d.count,
                    height: d.height,
                    width: d.width,
                    max_disparity: d.max_disparity,
                },
            )?;
            let (train, test) = split_samples(samples, d.split_ratio, d.split_seed)?;
            Ok(Dataset::Stereo { train, test })
        }
        (task, "manifest") => {
            if d.manifest.is_empty() {
                return Err(CliError::usage("data.source = manifest requires data.manifest"));
            }
            let path = base_dir.join(&d.manifest);
            match task {
                Task::Mono => {
                    let samples = load_mono_dataset(&path)?;
                    let (train, test) = split_samples(samples, d.split_ratio, d.split_seed)?;
                    Ok(Dataset::Mono { train, test })
                }
                Task::Stereo => {
                    let samples = load_stereo_dataset(&path)?;
                    let (train, test) = split_samples(samples, d.split_ratio, d.split_seed)?;
                    Ok(Dataset::Stereo { train, test })
                }
            }
        }
        (_, other) => Err(CliError::usage(format!(
            "unknown data.source {other:?} (expected generate or manifest)"
        ))),
    }
}

/// Splits via the deterministic index machinery so file- and
/// generator-backed datasets shuffle identically.
fn split_samples<T: Clone>(samples: Vec<T>, ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), CliError> {
    let index = DatasetIndex {
        kind: depthbench_core::data::DatasetKind::Mono,
        depth_min: 0.0,
        depth_max: 1.0,
        samples: (0..samples.len())
            .map(|i| depthbench_core::data::SampleDescriptor { files: vec![i.to_string()] })
            .collect(),
    };
    let (train_idx, test_idx) = split_dataset(&index, ratio, seed)?;
    let pick = |idx: &DatasetIndex| -> Vec<T> {
        idx.samples
            .iter()
            .map(|s| samples[s.files[0].parse::<usize>().expect("synthetic descriptor")].clone())
            .collect()
    };
    Ok((pick(&train_idx), pick(&test_idx)))
}

// ── Checkpoint header fields ────────────────────────────────────────────

fn join_usize(values: &[usize]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

fn join_f64(values: &[f64]) -> String {
    values.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn checkpoint_fields(config: &ExperimentConfig, state: &TrainState) -> Result<Vec<(String, String)>, CliError> {
    let mut fields: Vec<(String, String)> = vec![
        ("model.task".into(), config.experiment.task.clone()),
        ("optimizer.kind".into(), config.train.optimizer.clone()),
        ("optimizer.learning_rate".into(), config.train.learning_rate.to_string()),
        ("optimizer.beta1".into(), config.train.beta1.to_string()),
        ("optimizer.beta2".into(), config.train.beta2.to_string()),
        ("optimizer.epsilon".into(), config.train.epsilon.to_string()),
        ("optimizer.batch_size".into(), config.train.batch_size.to_string()),
        ("optimizer.max_steps".into(), config.train.steps.to_string()),
        ("optimizer.seed".into(), config.train.seed.to_string()),
        ("state.step".into(), state.step.to_string()),
        ("state.optimizer_t".into(), state.optimizer.step_count().to_string()),
        ("state.rng_seed".into(), config.train.seed.to_string()),
        ("state.rng_word_pos".into(), "0".into()),
    ];
    match config.task()? {
        Task::Mono => {
            let mc = config.mono_config()?;
            fields.push(("model.structure".into(), config.model.structure.clone()));
            fields.push(("model.activation".into(), config.model.activation.clone()));
            fields.push(("model.input_size".into(), mc.input_size.to_string()));
            fields.push(("model.skip_connections".into(), mc.use_skip_connections.to_string()));
            fields.push(("model.ladder".into(), join_usize(&mc.filter_ladder)));
            fields.push(("model.bottleneck".into(), mc.bottleneck_channels.to_string()));
        }
        Task::Stereo => {
            let sc = config.stereo_config()?;
            fields.push(("model.spn_channels".into(), config.model.spn_channels.clone()));
            fields.push(("model.max_disparity".into(), sc.max_disparity.to_string()));
            fields.push(("model.residual_range".into(), sc.residual_range.to_string()));
            fields.push(("model.unet_base_channels".into(), sc.unet_base_channels.to_string()));
            fields.push(("model.disparity_net_channels".into(), join_usize(&sc.disparity_net_channels)));
            fields.push(("model.stage_loss_weights".into(), join_f64(&sc.stage_loss_weights)));
        }
    }
    Ok(fields)
}

pub enum LoadedModel {
    Mono(Box<MonoModel>),
    Stereo(Box<AnyNet>),
}

/// Rebuilds a model from checkpoint header fields and loads its parameters.
pub fn model_from_checkpoint(ck: &Checkpoint) -> Result<LoadedModel, CliError> {
    let task = ck.require("model.task")?;
    match task {
        "mono" => {
            let structure = MonoStructure::parse(ck.require("model.structure")?)?;
            let activation = parse_activation(ck.require("model.activation")?)?;
            let input_size: usize = parse_field(ck, "model.input_size")?;
            let mut config = depthbench_core::mono::MonoConfig::new(structure)
                .with_input_size(input_size)
                .with_activation(activation);
            config.use_skip_connections = parse_field(ck, "model.skip_connections")?;
            let mut model = build_mono_model(config)?;
            restore_store(ck, model.store_mut(), None)?;
            Ok(LoadedModel::Mono(Box::new(model)))
        }
        "stereo" => {
            let config = depthbench_core::stereo::AnyNetConfig {
                max_disparity: parse_field(ck, "model.max_disparity")?,
                residual_range: parse_field(ck, "model.residual_range")?,
                spn_channels: parse_spn(ck.require("model.spn_channels")?)?,
                stage_loss_weights: parse_list4(ck.require("model.stage_loss_weights")?)?,
                unet_base_channels: parse_field(ck, "model.unet_base_channels")?,
                disparity_net_channels: parse_list3(ck.require("model.disparity_net_channels")?)?,
            };
            let mut model = build_anynet(config)?;
            restore_store(ck, model.store_mut(), None)?;
            Ok(LoadedModel::Stereo(Box::new(model)))
        }
        other => Err(CliError::runtime(format!("checkpoint has unknown task {other:?}"))),
    }
}

fn parse_field<T: std::str::FromStr>(ck: &Checkpoint, key: &str) -> Result<T, CliError> {
    ck.require(key)?
        .parse()
        .map_err(|_| CliError::runtime(format!("bad checkpoint field {key}")))
}

fn parse_list3(s: &str) -> Result<[usize; 3], CliError> {
    let v: Vec<usize> = s.split(',').filter_map(|p| p.trim().parse().ok()).collect();
    v.try_into()
        .map_err(|_| CliError::runtime("expected 3 comma-separated integers".to_string()))
}

fn parse_list4(s: &str) -> Result<[f64; 4], CliError> {
    let v: Vec<f64> = s.split(',').filter_map(|p| p.trim().parse().ok()).collect();
    v.try_into()
        .map_err(|_| CliError::runtime("expected 4 comma-separated numbers".to_string()))
}

// ── run_experiment ──────────────────────────────────────────────────────

pub struct RunOutput {
    pub report_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

pub fn run_experiment(
    config: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    deterministic: bool,
) -> Result<RunOutput, CliError> {
    std::fs::create_dir_all(out_dir).map_err(depthbench_core::Error::Io)?;
    let dataset = prepare_data(config, base_dir)?;
    let opt_cfg = config.optimizer_config()?;

    let (params, macs_total, macs_per_stage, history, metrics, reference, metric_name) = match (&dataset, config.task()?) {
        (Dataset::Mono { train, test }, Task::Mono) => {
            let mut model = build_mono_model(config.mono_config()?)?;
            model.init(config.train.seed);
            let mut state = TrainState::new(&opt_cfg, model.store());
            let history = train_mono(&mut model, train, test, &config.loss_weights(), &opt_cfg, &mut state)?;
            let metrics = evaluate_mono(&model, test)?;
            let macs = count_mono_macs(&model)?;
            let fields = checkpoint_fields(config, &state)?;
            let ck = save_checkpoint(&fields, model.store(), Some(&state.optimizer))?;
            write_file_atomic(&out_dir.join("checkpoint.dpb"), &ck)?;
            let reference = mono_reference(&config.model.structure, &config.model.activation);
            (model.store().counts(), macs, None, history, metrics, reference, "ssim")
        }
        (Dataset::Stereo { train, test }, Task::Stereo) => {
            let mut model = build_anynet(config.stereo_config()?)?;
            model.init(config.train.seed);
            let up_to = if model.config.spn_channels.is_some() { 4 } else { 3 };
            let mut state = TrainState::new(&opt_cfg, model.store());
            let history = train_stereo(&mut model, train, test, config.loss.beta, &opt_cfg, &mut state)?;
            let metrics = evaluate_stereo(&model, test, up_to)?;
            let per_stage: Vec<u64> = (1..=up_to)
                .map(|s| model.count_macs(config.data.height, config.data.width, s))
                .collect::<depthbench_core::Result<_>>()?;
            let fields = checkpoint_fields(config, &state)?;
            let ck = save_checkpoint(&fields, model.store(), Some(&state.optimizer))?;
            write_file_atomic(&out_dir.join("checkpoint.dpb"), &ck)?;
            let reference = stereo_reference(model.config.spn_channels);
            let total = *per_stage.last().expect("at least one stage");
            (model.store().counts(), total, Some(per_stage), history, metrics, reference, "three_pixel_error")
        }
        _ => unreachable!("task/dataset pairing enforced by prepare_data"),
    };

    write_history_csvs(out_dir, &history)?;
    write_per_sample_csv(out_dir, &metrics)?;

    let mut report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment_id: config.experiment.id.clone(),
        task: config.experiment.task.clone(),
        variant: config.variant()?,
        parameters: ParamBlock {
            trainable: params.trainable,
            non_trainable: params.non_trainable,
            total: params.total,
        },
        reference: reference.map(|(p, m)| ReferenceBlock {
            parameters: p,
            metric: m,
            metric_name: metric_name.to_string(),
            note: REFERENCE_NOTE.to_string(),
        }),
        macs_total,
        macs_per_stage,
        train: Some(TrainBlock {
            steps: history.train_loss.len(),
            initial_loss: *history.train_loss.first().unwrap_or(&f64::NAN),
            final_loss: *history.train_loss.last().unwrap_or(&f64::NAN),
            history_csv: "train_history.csv".to_string(),
            wall_clock_s: if deterministic {
                None
            } else {
                Some(history.wall_clock_s.iter().sum())
            },
        }),
        metrics,
    };
    round_report(&mut report);
    let report_path = out_dir.join("report.json");
    write_file_atomic(&report_path, &to_json_bytes(&report)?)?;
    Ok(RunOutput { report_path, checkpoint_path: out_dir.join("checkpoint.dpb") })
}

fn count_mono_macs(model: &MonoModel) -> Result<u64, CliError> {
    use depthbench_core::blocks::ForwardCtx;
    use depthbench_core::Tensor;
    let size = model.config.input_size;
    let mut tape = depthbench_core::Tape::new();
    let mut ctx = ForwardCtx::new(&mut tape, false);
    let input = ctx.tape.constant(Tensor::zeros(vec![1, 3, size, size]));
    model.forward(&mut ctx, input)?;
    Ok(tape.total_macs())
}

pub fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>, CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)
        .map_err(|e| CliError::runtime(format!("serialization failed: {e}")))?;
    bytes.push(b'\n');
    Ok(bytes)
}

fn write_history_csvs(out_dir: &Path, history: &TrainHistory) -> Result<(), CliError> {
    let stage_count = history.stage_losses.first().map(Vec::len).unwrap_or(0);
    let mut csv = String::from("step,loss");
    for s in 1..=stage_count {
        csv.push_str(&format!(",stage{s}_smooth_l1"));
    }
    csv.push('\n');
    for (i, loss) in history.train_loss.iter().enumerate() {
        csv.push_str(&format!("{i},{}", fmt9(*loss)));
        if stage_count > 0 {
            for v in &history.stage_losses[i] {
                csv.push_str(&format!(",{}", fmt9(*v)));
            }
        }
        csv.push('\n');
    }
    write_file_atomic(&out_dir.join("train_history.csv"), csv.as_bytes())?;

    if !history.validation.is_empty() {
        let mut csv = String::from("epoch,val_loss,val_metric\n");
        for v in &history.validation {
            csv.push_str(&format!("{},{},{}\n", v.epoch, fmt9(v.loss), fmt9(v.metric)));
        }
        write_file_atomic(&out_dir.join("val_history.csv"), csv.as_bytes())?;
    }
    Ok(())
}

fn write_per_sample_csv(out_dir: &Path, metrics: &MetricsReport) -> Result<(), CliError> {
    let mut csv = String::from("sample");
    for m in &metrics.metrics {
        csv.push(',');
        csv.push_str(&m.name);
    }
    csv.push('\n');
    let rows = metrics.metrics.first().map(|m| m.per_sample.len()).unwrap_or(0);
    for i in 0..rows {
        csv.push_str(&i.to_string());
        for m in &metrics.metrics {
            csv.push_str(&format!(",{}", fmt9(m.per_sample[i])));
        }
        csv.push('\n');
    }
    write_file_atomic(&out_dir.join("per_sample.csv"), csv.as_bytes())?;
    Ok(())
}

/// 9-significant-digit text form used in CSV artifacts.
pub fn fmt9(x: f64) -> String {
    let r = round9(x);
    format!("{r}")
}

// ── compare_models ──────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareRow {
    pub experiment_id: String,
    pub variant: String,
    pub trainable: u64,
    pub non_trainable: u64,
    pub total: u64,
    /// 1 - total / largest total in the comparison.
    pub reduction_vs_largest: f64,
    pub reduction_trainable_vs_largest: f64,
    pub metric_name: String,
    pub mean: f64,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub min: f64,
    pub max: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_parameters: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reference_metric: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CompareTable {
    pub schema_version: u32,
    pub task: String,
    pub rows: Vec<CompareRow>,
}

/// Final-stage error series for stereo reports, plain ssim for mono.
fn primary_series(report: &ExperimentReport) -> Result<(&str, &Aggregates), CliError> {
    if report.task == "mono" {
        let m = report
            .metrics
            .get("ssim")
            .ok_or_else(|| CliError::runtime("mono report lacks ssim series"))?;
        return Ok(("ssim", &m.aggregates));
    }
    let last = report
        .metrics
        .metrics
        .iter()
        .rfind(|m| m.name.starts_with("three_pixel_error_stage"))
        .ok_or_else(|| CliError::runtime("stereo report lacks three_pixel_error series"))?;
    Ok((&last.name, &last.aggregates))
}

pub fn compare_models(report_paths: &[PathBuf]) -> Result<CompareTable, CliError> {
    if report_paths.len() < 2 {
        return Err(CliError::usage("compare needs at least two report files"));
    }
    let mut reports = Vec::new();
    for path in report_paths {
        let text = std::fs::read_to_string(path).map_err(depthbench_core::Error::Io)?;
        let report: ExperimentReport = serde_json::from_str(&text)
            .map_err(|e| CliError::runtime(format!("bad report {}: {e}", path.display())))?;
        reports.push(report);
    }
    let task = reports[0].task.clone();
    if reports.iter().any(|r| r.task != task) {
        return Err(CliError::usage("compare requires reports of the same task"));
    }
    let largest_total = reports.iter().map(|r| r.parameters.total).max().expect("non-empty") as f64;
    let largest_trainable = reports.iter().map(|r| r.parameters.trainable).max().expect("non-empty") as f64;
    let mut rows = Vec::new();
    for r in &reports {
        let (metric_name, agg) = primary_series(r)?;
        rows.push(CompareRow {
            experiment_id: r.experiment_id.clone(),
            variant: r.variant.clone(),
            trainable: r.parameters.trainable,
            non_trainable: r.parameters.non_trainable,
            total: r.parameters.total,
            reduction_vs_largest: round9(1.0 - r.parameters.total as f64 / largest_total),
            reduction_trainable_vs_largest: round9(1.0 - r.parameters.trainable as f64 / largest_trainable),
            metric_name: metric_name.to_string(),
            mean: agg.mean,
            median: agg.median,
            q25: agg.q25,
            q75: agg.q75,
            min: agg.min,
            max: agg.max,
            reference_parameters: r.reference.as_ref().map(|x| x.parameters),
            reference_metric: r.reference.as_ref().map(|x| x.metric),
        });
    }
    // Output invariant to input ordering: rows sorted by parameter count.
    rows.sort_by(|a, b| a.total.cmp(&b.total).then_with(|| a.experiment_id.cmp(&b.experiment_id)));
    Ok(CompareTable { schema_version: SCHEMA_VERSION, task, rows })
}

pub fn compare_to_csv(table: &CompareTable) -> String {
    let mut csv = String::from(
        "experiment_id,variant,trainable,non_trainable,total,reduction_vs_largest,reduction_trainable_vs_largest,metric_name,mean,median,q25,q75,min,max,reference_parameters,reference_metric\n",
    );
    for r in &table.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            r.experiment_id,
            r.variant,
            r.trainable,
            r.non_trainable,
            r.total,
            fmt9(r.reduction_vs_largest),
            fmt9(r.reduction_trainable_vs_largest),
            r.metric_name,
            fmt9(r.mean),
            fmt9(r.median),
            fmt9(r.q25),
            fmt9(r.q75),
            fmt9(r.min),
            fmt9(r.max),
            r.reference_parameters.map(|v| v.to_string()).unwrap_or_default(),
            r.reference_metric.map(fmt9).unwrap_or_default(),
        ));
    }
    csv
}

// ── emit_report ─────────────────────────────────────────────────────────

pub fn emit_report(report_path: &Path, format: &str) -> Result<Vec<u8>, CliError> {
    let text = std::fs::read_to_string(report_path).map_err(depthbench_core::Error::Io)?;
    let report: ExperimentReport = serde_json::from_str(&text)
        .map_err(|e| CliError::runtime(format!("bad report {}: {e}", report_path.display())))?;
    match format {
        "json" => to_json_bytes(&report),
        "csv" => {
            let mut csv = String::from("sample");
            for m in &report.metrics.metrics {
                csv.push(',');
                csv.push_str(&m.name);
            }
            csv.push('\n');
            let rows = report.metrics.metrics.first().map(|m| m.per_sample.len()).unwrap_or(0);
            for i in 0..rows {
                csv.push_str(&i.to_string());
                for m in &report.metrics.metrics {
                    csv.push_str(&format!(",{}", fmt9(m.per_sample[i])));
                }
                csv.push('\n');
            }
            Ok(csv.into_bytes())
        }
        other => Err(CliError::usage(format!("unknown format {other:?} (expected csv or json)"))),
    }
}

// ── eval (checkpoint) ───────────────────────────────────────────────────

pub fn eval_checkpoint(
    checkpoint_path: &Path,
    config: &ExperimentConfig,
    base_dir: &Path,
    out_dir: &Path,
    pointcloud_out: Option<&Path>,
) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(out_dir).map_err(depthbench_core::Error::Io)?;
    let bytes = std::fs::read(checkpoint_path).map_err(depthbench_core::Error::Io)?;
    let ck = load_checkpoint(&bytes)?;
    let model = model_from_checkpoint(&ck)?;
    let dataset = prepare_data(config, base_dir)?;

    let (task, metrics) = match (&model, &dataset) {
        (LoadedModel::Mono(m), Dataset::Mono { test, .. }) => {
            if let Some(pc_path) = pointcloud_out {
                export_pointcloud(m, test, pc_path)?;
            }
            ("mono", evaluate_mono(m, test)?)
        }
        (LoadedModel::Stereo(m), Dataset::Stereo { test, .. }) => {
            let up_to = if m.config.spn_channels.is_some() { 4 } else { 3 };
            ("stereo", evaluate_stereo(m, test, up_to)?)
        }
        _ => return Err(CliError::usage("checkpoint task does not match config task")),
    };

    let (params, reference, metric_name, macs_total, macs_per_stage) = match &model {
        LoadedModel::Mono(m) => (
            m.store().counts(),
            mono_reference(
                ck.field("model.structure").unwrap_or(""),
                ck.field("model.activation").unwrap_or(""),
            ),
            "ssim",
            count_mono_macs(m)?,
            None,
        ),
        LoadedModel::Stereo(m) => {
            let up_to = if m.config.spn_channels.is_some() { 4 } else { 3 };
            let per_stage: Vec<u64> = (1..=up_to)
                .map(|s| m.count_macs(config.data.height, config.data.width, s))
                .collect::<depthbench_core::Result<_>>()?;
            let total = *per_stage.last().expect("stages");
            (m.store().counts(), stereo_reference(m.config.spn_channels), "three_pixel_error", total, Some(per_stage))
        }
    };

    write_per_sample_csv(out_dir, &metrics)?;
    let mut report = ExperimentReport {
        schema_version: SCHEMA_VERSION,
        experiment_id: config.experiment.id.clone(),
        task: task.to_string(),
        variant: config.variant()?,
        parameters: ParamBlock {
            trainable: params.trainable,
            non_trainable: params.non_trainable,
            total: params.total,
        },
        reference: reference.map(|(p, m)| ReferenceBlock {
            parameters: p,
            metric: m,
            metric_name: metric_name.to_string(),
            note: REFERENCE_NOTE.to_string(),
        }),
        macs_total,
        macs_per_stage,
        train: None,
        metrics,
    };
    round_report(&mut report);
    let report_path = out_dir.join("report.json");
    write_file_atomic(&report_path, &to_json_bytes(&report)?)?;
    Ok(report_path)
}

/// Exports the first test sample's predicted depth as an XYZ point cloud,
/// back-projected with a simple centred pinhole model.
fn export_pointcloud(model: &MonoModel, samples: &[MonoSample], path: &Path) -> Result<(), CliError> {
    use depthbench_core::data::{depth_to_pointcloud, CameraIntrinsics};
    let sample = samples
        .first()
        .ok_or_else(|| CliError::runtime("no samples to export"))?;
    let pred = model.predict_depth(&sample.rgb)?;
    let (h, w) = (pred.height as f64, pred.width as f64);
    let intrinsics = CameraIntrinsics::new(w, w, w / 2.0, h / 2.0)?;
    let points = depth_to_pointcloud(&pred, &intrinsics, &sample.mask);
    let mut text = String::with_capacity(points.len() * 32);
    for p in points {
        text.push_str(&format!("{} {} {}\n", fmt9(p[0]), fmt9(p[1]), fmt9(p[2])));
    }
    write_file_atomic(path, text.as_bytes())?;
    Ok(())
}
