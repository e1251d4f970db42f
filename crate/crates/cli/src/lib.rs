//! Command implementations behind the `ndssm` binary.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use ndssm_core::checkpoint::{load_checkpoint, save_checkpoint, CheckpointInfo};
use ndssm_core::config::{ExperimentConfig, EXPERIMENT_SCHEMA};
use ndssm_core::conv::{profile_conv, ProfileReport};
use ndssm_core::data::make_dataset;
use ndssm_core::io::{
    images_container, images_from_container, read_container, write_container, write_pgm, Container, DType,
    MetricsWriter,
};
use ndssm_core::model::{
    evaluate_zero_shot, Dataset, IsotropicModel, LayerKind, Precision, Split, StageSummary, Trainer,
};
use ndssm_core::ndkernel::{assemble_factored, FactoredInit, FactoredKernelSpec};
use ndssm_core::resolution::{rescale_delta, ResizeSchedule, ResolutionPlan};
use ndssm_core::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;
pub const EXIT_MISSING_CHECKPOINT: i32 = 4;

/// A failed command with its process exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl CliError {
    pub fn new(code: i32, message: impl Into<String>) -> Self {
        CliError { code, message: message.into() }
    }

    pub fn config(message: impl Into<String>) -> Self {
        CliError::new(EXIT_CONFIG, message)
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.message)
    }
}

impl std::error::Error for CliError {}

fn innermost(e: &Error) -> &Error {
    match e {
        Error::Stage { source, .. } => innermost(source),
        other => other,
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match innermost(&e) {
            Error::Config(_) => EXIT_CONFIG,
            Error::Numerical(_) => EXIT_NUMERICAL,
            _ => 1,
        };
        CliError::new(code, e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new(1, e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub const BENCH_REPORT_SCHEMA: &str = include_str!("../../../schema/bench-report.schema.json");

/// Every violation of `schema` by `instance`, as `path: message` lines.
pub fn schema_errors(schema: &str, instance: &serde_json::Value) -> Vec<String> {
    let schema: serde_json::Value = serde_json::from_str(schema).expect("bundled schema is valid JSON");
    let validator = jsonschema::validator_for(&schema).expect("bundled schema compiles");
    validator
        .iter_errors(instance)
        .map(|e| {
            let path = e.instance_path.to_string();
            format!("{}: {e}", if path.is_empty() { "/" } else { &path })
        })
        .collect()
}

/// Parses and schema-validates a config document before deserializing it.
pub fn parse_config(text: &str) -> CliResult<ExperimentConfig> {
    let value: serde_json::Value = serde_json::from_str(text)
        .map_err(|e| CliError::config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    let errors = schema_errors(EXPERIMENT_SCHEMA, &value);
    if !errors.is_empty() {
        return Err(CliError::config(format!("config does not match the schema:\n  {}", errors.join("\n  "))));
    }
    Ok(ExperimentConfig::from_json(text)?)
}

/// Loads a config file, or a named preset written as `preset:NAME`.
pub fn load_config(source: &str) -> CliResult<ExperimentConfig> {
    if let Some(name) = source.strip_prefix("preset:") {
        return Ok(ExperimentConfig::preset(name)?);
    }
    let text = fs::read_to_string(source).map_err(|e| CliError::config(format!("cannot read config {source}: {e}")))?;
    parse_config(&text).map_err(|e| CliError::new(e.code, format!("{source}: {}", e.message)))
}

/// Command-line overrides shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub precision: Option<Precision>,
}

pub fn apply_overrides(mut cfg: ExperimentConfig, o: &Overrides) -> CliResult<ExperimentConfig> {
    if let Some(seed) = o.seed {
        cfg.train.seed = seed;
    }
    if let Some(p) = o.precision {
        cfg.train.precision = p;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `8x8,32x32`; a bare `32` means `32x32`.
pub fn parse_resolutions(text: &str) -> CliResult<Vec<Vec<usize>>> {
    text.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| {
            let parts: Vec<usize> = s
                .trim()
                .split('x')
                .map(|v| v.parse::<usize>().map_err(|_| CliError::config(format!("invalid resolution {s:?}"))))
                .collect::<CliResult<_>>()?;
            Ok(if parts.len() == 1 { vec![parts[0], parts[0]] } else { parts })
        })
        .collect()
}

pub fn resolution_tag(r: &[usize]) -> String {
    r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

fn ensure_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| CliError::new(1, format!("cannot create {}: {e}", out.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::new(1, e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

fn kernel_spec(cfg: &ExperimentConfig, seed: u64) -> CliResult<FactoredKernelSpec> {
    let m = &cfg.model;
    let res = &cfg.data.resolution;
    let grid: Vec<usize> = res.iter().map(|r| r / m.patch).collect();
    let deltas = m.delta.clone().unwrap_or_else(|| grid.iter().map(|&g| 1.0 / g as f64).collect());
    let init = FactoredInit {
        kind: m.init,
        state_dim: m.state_dim,
        rank: m.rank,
        lengths: &grid,
        deltas: &deltas,
        method: m.method,
        bidirectional: m.bidirectional,
    };
    Ok(FactoredKernelSpec::initialize(&init, seed)?)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelOutput {
    pub resolution: Vec<usize>,
    pub shape: Vec<usize>,
    pub tensor: String,
    pub pgm: Option<PathBuf>,
}

/// Assembles `spec` at each resolution (rescaling step sizes from `train`),
/// writes one container and one PGM per 2D kernel.
pub fn write_kernels(
    spec: &FactoredKernelSpec,
    alpha: ndssm_core::Cutoff,
    train: &[usize],
    resolutions: &[Vec<usize>],
    out: &Path,
) -> CliResult<Vec<KernelOutput>> {
    ensure_dir(out)?;
    let mut container = Container::with_metadata(serde_json::json!({ "kind": "kernels", "alpha": alpha }));
    let mut outputs = Vec::new();
    for r in resolutions {
        let spec_r = rescale_delta(spec, &ResolutionPlan::new(train, r)?)?;
        let k = assemble_factored(&spec_r, alpha)?;
        let name = format!("kernel.{}", resolution_tag(r));
        let pgm = if k.data.ndim() == 2 {
            let p = out.join(format!("kernel_{}.pgm", resolution_tag(r)));
            write_pgm(&p, &k.data)?;
            Some(p)
        } else {
            None
        };
        outputs.push(KernelOutput { resolution: r.clone(), shape: k.shape().to_vec(), tensor: name.clone(), pgm });
        container.push(name, DType::F64, k.data);
    }
    write_container(out.join("kernels.ndssm"), &container)?;
    Ok(outputs)
}

/// `kernel`: the configured kernel at the data resolution and every test resolution.
pub fn cmd_kernel(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<KernelOutput>> {
    let spec = kernel_spec(cfg, cfg.train.seed)?;
    write_kernels(&spec, cfg.train.alpha, &cfg.data.resolution, &data_and_test_resolutions(cfg), out)
}

/// The data resolution followed by every distinct test resolution.
pub fn data_and_test_resolutions(cfg: &ExperimentConfig) -> Vec<Vec<usize>> {
    let mut out = vec![cfg.data.resolution.clone()];
    for r in &cfg.resolution.test_resolutions {
        if !out.contains(r) {
            out.push(r.clone());
        }
    }
    out
}

pub fn build_dataset(cfg: &ExperimentConfig) -> CliResult<Dataset> {
    let data = match (&cfg.data.manifest, &cfg.data.files) {
        (Some(m), _) => {
            let (train, val) = make_dataset(m)?;
            Dataset::from_scenes(train, val, cfg.data.antialias)
        }
        (None, Some(files)) => {
            let train = images_from_container(&read_container(&files.train)?)?;
            let val = images_from_container(&read_container(&files.val)?)?;
            Dataset::from_images(train, val)
        }
        (None, None) => return Err(CliError::config("data needs a manifest or files")),
    };
    Ok(data.with_precision(cfg.train.precision))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BestEntry {
    pub resolution: Vec<usize>,
    pub epoch: usize,
    pub accuracy: f64,
    pub checkpoint: PathBuf,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config_hash: String,
    pub param_count: usize,
    pub stages: Vec<StageSummary>,
    pub best: Vec<BestEntry>,
    pub final_checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub skipped_steps: usize,
}

/// `train`: plain training, or the configured resizing schedule. Writes
/// `metrics.ndjson`, `final.ndssm`, one `best_<res>.ndssm` per evaluation
/// resolution, the resolved config and a summary.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> CliResult<TrainSummary> {
    ensure_dir(out)?;
    let hash = cfg.hash();
    write_json(&out.join("config.json"), cfg)?;
    let stages = cfg.stages();
    let first = &stages[0];
    let model = IsotropicModel::new(cfg.model.clone(), &first.resolution, first.alpha, cfg.train.seed)?;
    let param_count = model.param_count();
    let mut data = build_dataset(cfg)?;

    let metrics_path = out.join("metrics.ndjson");
    fs::write(&metrics_path, b"")?;
    let mut writer = MetricsWriter::append(&metrics_path)?;
    let mut trainer = Trainer::new(model, &mut data, cfg.train.clone(), cfg.eval_resolutions())?
        .with_sink(move |row| writer.write(row));
    if cfg.train.epochs > 0 {
        let schedule = match &cfg.resolution.schedule {
            Some(s) => s.clone(),
            None => ResizeSchedule { stages, warmup_steps: cfg.train.warmup_steps },
        };
        trainer.run(&schedule)?;
    }
    let (model, record) = trainer.into_parts();

    let final_path = out.join("final.ndssm");
    let info = CheckpointInfo {
        config_hash: Some(hash.clone()),
        stage_history: record.stages.clone(),
        epoch: record.stages.iter().map(|s| s.epochs).sum(),
        ..CheckpointInfo::default()
    };
    save_checkpoint(&final_path, &model, &info)?;
    let mut best = Vec::new();
    for (res, b) in &record.best {
        let path = out.join(format!("best_{}.ndssm", resolution_tag(res)));
        let info = CheckpointInfo {
            selected_for: Some(res.clone()),
            epoch: b.epoch,
            val_accuracy: Some(b.accuracy),
            ..info.clone()
        };
        save_checkpoint(&path, &b.model, &info)?;
        best.push(BestEntry { resolution: res.clone(), epoch: b.epoch, accuracy: b.accuracy, checkpoint: path });
    }
    let summary = TrainSummary {
        config_hash: hash,
        param_count,
        stages: record.stages,
        best,
        final_checkpoint: final_path,
        metrics: metrics_path,
        skipped_steps: record.skipped_steps,
    };
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotRow {
    pub checkpoint: PathBuf,
    pub layer: LayerKind,
    pub param_count: usize,
    pub train_resolution: Vec<usize>,
    pub test_resolution: Vec<usize>,
    pub accuracy: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ZeroShotReport {
    pub rows: Vec<ZeroShotRow>,
}

/// `zeroshot`: every checkpoint evaluated on the validation split at every
/// resolution. Missing checkpoints exit with code 4.
pub fn cmd_zeroshot(
    cfg: &ExperimentConfig,
    checkpoints: &[PathBuf],
    resolutions: &[Vec<usize>],
) -> CliResult<ZeroShotReport> {
    let mut loaded = Vec::with_capacity(checkpoints.len());
    for path in checkpoints {
        if !path.exists() {
            return Err(CliError::new(EXIT_MISSING_CHECKPOINT, format!("checkpoint {} not found", path.display())));
        }
        loaded.push((path.clone(), load_checkpoint(path)?));
    }
    let mut data = build_dataset(cfg)?;
    let mut rows = Vec::new();
    for (path, ck) in &loaded {
        let model = &ck.model;
        let trained = model.resolution().to_vec();
        for r in resolutions {
            let val = data.view(Split::Val, r)?;
            let ev = evaluate_zero_shot(model, &val, &trained)?;
            rows.push(ZeroShotRow {
                checkpoint: path.clone(),
                layer: model.config.layer,
                param_count: model.param_count(),
                train_resolution: trained.clone(),
                test_resolution: r.clone(),
                accuracy: ev.accuracy,
                loss: ev.loss,
            });
        }
    }
    Ok(ZeroShotReport { rows })
}

/// Share of time the FFT pipeline took in the reference measurements.
pub const REFERENCE_FFT_SHARE: [f64; 2] = [0.65, 0.80];

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BenchReport {
    pub preset: Option<String>,
    pub profile: ProfileReport,
    pub fft_pipeline_fraction: f64,
    pub reference_fft_share: [f64; 2],
    pub note: String,
}

/// Input `[batch, L...]` and kernel shapes of a named bench preset.
pub fn bench_preset(name: &str) -> CliResult<(Vec<usize>, Vec<usize>)> {
    match name {
        "paper-fig9" => Ok((vec![64, 224, 224], vec![224, 224])),
        "small" => Ok((vec![8, 64, 64], vec![64, 64])),
        other => Err(CliError::config(format!("unknown bench preset {other:?} (paper-fig9, small)"))),
    }
}

pub fn cmd_bench(
    preset: Option<&str>,
    input: &[usize],
    kernel: &[usize],
    repetitions: usize,
) -> CliResult<BenchReport> {
    let profile = profile_conv(input, kernel, repetitions)?;
    let share = profile.fft_pipeline_fraction;
    let note = format!(
        "forward FFT, pointwise product and inverse FFT took {:.1}% of the convolution here; reference GPU measurements put this share at 65-80%",
        share * 100.0
    );
    Ok(BenchReport {
        preset: preset.map(str::to_string),
        profile,
        fft_pipeline_fraction: share,
        reference_fft_share: REFERENCE_FFT_SHARE,
        note,
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RenderedFile {
    pub split: Split,
    pub resolution: Vec<usize>,
    pub path: PathBuf,
}

/// `render-data`: the manifest's scenes rendered at the data resolution, the
/// test resolutions and the manifest's cache list, one container per split
/// and resolution, plus a PGM preview of the first validation images.
pub fn cmd_render(cfg: &ExperimentConfig, out: &Path) -> CliResult<Vec<RenderedFile>> {
    let manifest = cfg.data.manifest.as_ref().ok_or_else(|| CliError::config("render-data needs data.manifest"))?;
    ensure_dir(out)?;
    let (train, val) = make_dataset(manifest)?;
    write_json(&out.join("manifest.json"), manifest)?;
    write_json(&out.join("scenes.json"), &serde_json::json!({ "train": train, "val": val }))?;
    let mut resolutions = data_and_test_resolutions(cfg);
    for r in &manifest.cache_resolutions {
        if !resolutions.contains(r) {
            resolutions.push(r.clone());
        }
    }
    let mut data = Dataset::from_scenes(train, val, cfg.data.antialias);
    let mut files = Vec::new();
    for r in &resolutions {
        for split in [Split::Train, Split::Val] {
            let set = data.view(split, r)?;
            let name = format!("{}_{}.ndssm", if split == Split::Train { "train" } else { "val" }, resolution_tag(r));
            let path = out.join(name);
            write_container(&path, &images_container(&set, DType::F64)?)?;
            files.push(RenderedFile { split, resolution: r.clone(), path });
        }
        let val = data.view(Split::Val, r)?;
        for (i, im) in val.images.iter().take(4).enumerate() {
            write_pgm(out.join(format!("preview_{}_{i}.pgm", resolution_tag(r))), &im.channel(0))?;
        }
    }
    Ok(files)
}

/// Sizes the global worker pool from `NDSSM_THREADS`, if set.
pub fn configure_threads() -> CliResult<Option<usize>> {
    let Ok(v) = std::env::var("NDSSM_THREADS") else { return Ok(None) };
    let n: usize = v
        .trim()
        .parse()
        .map_err(|_| CliError::config(format!("NDSSM_THREADS must be a positive integer, got {v:?}")))?;
    if n == 0 {
        return Err(CliError::config("NDSSM_THREADS must be at least 1"));
    }
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(|e| CliError::new(1, e.to_string()))?;
    Ok(Some(n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolution_lists() {
        assert_eq!(parse_resolutions("8,32").unwrap(), vec![vec![8, 8], vec![32, 32]]);
        assert_eq!(parse_resolutions("4x6, 8x12").unwrap(), vec![vec![4, 6], vec![8, 12]]);
        assert_eq!(parse_resolutions("8,a").unwrap_err().code, EXIT_CONFIG);
    }

    #[test]
    fn error_codes() {
        let e: CliError = Error::Config("x".into()).in_stage(1).into();
        assert_eq!(e.code, EXIT_CONFIG);
        let e: CliError = Error::Numerical("nan".into()).into();
        assert_eq!(e.code, EXIT_NUMERICAL);
    }
}
