use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::network::{score, IsotropicModel};
use super::optim::{AdamW, LrSchedule};
use crate::conv::FeatureMap;
use crate::data::{render_set, SceneSpec};
use crate::error::{Error, Result};
use crate::resolution::{resample_image, run_schedule, ResizeSchedule, ResizeStage, StageContext, StageTrainer};
use crate::ssm::Cutoff;
use crate::util::mix_seed;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    /// Rounds a value to this storage precision.
    pub fn store(self, v: f64) -> f64 {
        match self {
            Precision::F32 => v as f32 as f64,
            Precision::F64 => v,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::config(format!("unknown precision {other:?} (expected f32 or f64)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrScheduleKind {
    /// Linear warmup, then cosine decay to zero.
    CosineWarmup,
}

fn default_warmup() -> usize {
    crate::resolution::DEFAULT_WARMUP_STEPS
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub schedule: LrScheduleKind,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
    pub seed: u64,
    pub alpha: Cutoff,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.01,
            weight_decay: 0.03,
            schedule: LrScheduleKind::CosineWarmup,
            warmup_steps: default_warmup(),
            seed: 0,
            alpha: Cutoff::INFINITE,
            precision: Precision::F64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config("train.lr must be positive"));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("train.weight_decay must be non-negative"));
        }
        Ok(())
    }
}

/// Images with labels at one resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledImages {
    pub images: Vec<FeatureMap>,
    pub labels: Vec<usize>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn resolution(&self) -> Option<&[usize]> {
        self.images.first().map(|im| im.resolution())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Clone, Debug)]
enum Source {
    Scenes { train: Vec<SceneSpec>, val: Vec<SceneSpec>, antialias: usize },
    Images { train: Arc<LabeledImages>, val: Arc<LabeledImages> },
}

/// Train and validation data that can be viewed at any resolution. Scenes are
/// re-rendered; stored images are resampled. Views are cached.
#[derive(Clone, Debug)]
pub struct Dataset {
    source: Source,
    precision: Precision,
    cache: BTreeMap<(Split, Vec<usize>), Arc<LabeledImages>>,
}

impl Dataset {
    pub fn from_scenes(train: Vec<SceneSpec>, val: Vec<SceneSpec>, antialias: usize) -> Self {
        Dataset { source: Source::Scenes { train, val, antialias }, precision: Precision::F64, cache: BTreeMap::new() }
    }

    pub fn from_images(train: LabeledImages, val: LabeledImages) -> Self {
        Dataset {
            source: Source::Images { train: Arc::new(train), val: Arc::new(val) },
            precision: Precision::F64,
            cache: BTreeMap::new(),
        }
    }

    /// Rounds every view to `precision`.
    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self.cache.clear();
        self
    }

    pub fn view(&mut self, split: Split, resolution: &[usize]) -> Result<Arc<LabeledImages>> {
        let key = (split, resolution.to_vec());
        if let Some(v) = self.cache.get(&key) {
            return Ok(v.clone());
        }
        let mut set = match &self.source {
            Source::Scenes { train, val, antialias } => {
                let scenes = if split == Split::Train { train } else { val };
                let r = render_set(scenes, resolution, *antialias)?;
                LabeledImages { images: r.images, labels: r.labels }
            }
            Source::Images { train, val } => {
                let src = if split == Split::Train { train } else { val };
                let images =
                    src.images
                        .iter()
                        .map(|im| {
                            if im.resolution() == resolution {
                                Ok(im.clone())
                            } else {
                                resample_image(im, resolution)
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                LabeledImages { images, labels: src.labels.clone() }
            }
        };
        if self.precision == Precision::F32 {
            for im in set.images.iter_mut() {
                let mut t = im.tensor().clone();
                t.data_mut().iter_mut().for_each(|v| *v = Precision::F32.store(*v));
                *im = FeatureMap::new(t)?;
            }
        }
        let set = Arc::new(set);
        self.cache.insert(key, set.clone());
        Ok(set)
    }
}

/// One line of the metrics stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: Split,
    pub resolution: Vec<usize>,
    pub accuracy: f64,
    pub loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    pub loss: f64,
}

/// Accuracy and loss of `model` on `data`, whose resolution may differ from
/// the one the model was trained at; step sizes are rescaled by the
/// resolution ratio and the model itself is left untouched.
pub fn evaluate_zero_shot(
    model: &IsotropicModel,
    data: &LabeledImages,
    trained_resolution: &[usize],
) -> Result<Evaluation> {
    if model.resolution() != trained_resolution {
        return Err(Error::domain(format!(
            "model refers to resolution {:?}, not {trained_resolution:?}",
            model.resolution()
        )));
    }
    if data.is_empty() {
        return Err(Error::domain("evaluation set is empty"));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (images, labels) in data.images.chunks(256).zip(data.labels.chunks(256)) {
        let logits = model.forward(images)?;
        let (l, c) = score(&logits, labels, model.config.classes)?;
        loss += l * images.len() as f64;
        correct += c;
    }
    Ok(Evaluation { accuracy: correct as f64 / data.len() as f64, loss: loss / data.len() as f64 })
}

/// Best validation result seen for one test resolution, with the model that produced it.
#[derive(Clone, Debug)]
pub struct BestAtResolution {
    pub epoch: usize,
    pub accuracy: f64,
    pub model: IsotropicModel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSummary {
    pub index: usize,
    pub resolution: Vec<usize>,
    pub epochs: usize,
    pub alpha: Cutoff,
    pub steps: usize,
    /// Mean wall-clock time of one optimizer step (forward, backward, update).
    pub mean_step_ms: f64,
}

#[derive(Clone, Debug, Default)]
pub struct TrainRecord {
    pub metrics: Vec<MetricRow>,
    pub best: BTreeMap<Vec<usize>, BestAtResolution>,
    pub stages: Vec<StageSummary>,
    pub skipped_steps: usize,
}

impl TrainRecord {
    /// Last validation row at `resolution`.
    pub fn final_val(&self, resolution: &[usize]) -> Option<&MetricRow> {
        self.metrics.iter().rev().find(|m| m.split == Split::Val && m.resolution == resolution)
    }
}

type Sink<'a> = Box<dyn FnMut(&MetricRow) -> Result<()> + 'a>;

/// Drives optimization of one model over one dataset; usable directly or as a
/// [`StageTrainer`] inside [`run_schedule`].
pub struct Trainer<'a> {
    pub model: IsotropicModel,
    pub record: TrainRecord,
    config: TrainConfig,
    data: &'a mut Dataset,
    eval_resolutions: Vec<Vec<usize>>,
    opt: AdamW,
    schedule: LrSchedule,
    step: usize,
    epoch: usize,
    started: Instant,
    sink: Option<Sink<'a>>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: IsotropicModel,
        data: &'a mut Dataset,
        config: TrainConfig,
        eval_resolutions: Vec<Vec<usize>>,
    ) -> Result<Self> {
        config.validate()?;
        let opt = AdamW::new(model.params.len(), config.weight_decay);
        let schedule = LrSchedule { base_lr: config.lr, warmup_steps: config.warmup_steps, total_steps: 1 };
        Ok(Trainer {
            model,
            record: TrainRecord::default(),
            config,
            data,
            eval_resolutions,
            opt,
            schedule,
            step: 0,
            epoch: 0,
            started: Instant::now(),
            sink: None,
        })
    }

    /// Receives every metric row as it is produced.
    pub fn with_sink(mut self, sink: impl FnMut(&MetricRow) -> Result<()> + 'a) -> Self {
        self.sink = Some(Box::new(sink));
        self
    }

    fn emit(&mut self, row: MetricRow) -> Result<()> {
        if let Some(sink) = self.sink.as_mut() {
            sink(&row)?;
        }
        self.record.metrics.push(row);
        Ok(())
    }

    fn steps_per_epoch(&mut self) -> Result<usize> {
        let n = self.data.view(Split::Train, self.model.resolution())?.len();
        Ok(n.div_ceil(self.config.batch_size).max(1))
    }

    fn run_epoch(&mut self) -> Result<(f64, usize)> {
        let res = self.model.resolution().to_vec();
        let train = self.data.view(Split::Train, &res)?;
        if train.is_empty() {
            return Err(Error::config("training set is empty"));
        }
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, self.epoch as u64)));
        let mut loss = 0.0;
        let mut correct = 0;
        let mut step_ms = 0.0;
        let mut steps = 0;
        for idx in order.chunks(self.config.batch_size) {
            let t0 = Instant::now();
            let images: Vec<FeatureMap> = idx.iter().map(|&i| train.images[i].clone()).collect();
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let tape = self.model.forward_tape(&images, true)?;
            let grads = self.model.backward(&tape, &labels)?;
            let lr = self.schedule.lr(self.step);
            if self.opt.step(&mut self.model.params, &grads.values, lr) {
                if self.config.precision == Precision::F32 {
                    let p = self.config.precision;
                    self.model.params.values.iter_mut().for_each(|v| *v = p.store(*v));
                }
            } else {
                self.record.skipped_steps += 1;
            }
            if !self.model.params.is_finite() {
                return Err(Error::numerical(format!("non-finite parameters after step {}", self.step)));
            }
            self.step += 1;
            loss += grads.loss * idx.len() as f64;
            correct += grads.correct;
            step_ms += t0.elapsed().as_secs_f64() * 1e3;
            steps += 1;
        }
        self.epoch += 1;
        let n = train.len() as f64;
        let lr = self.schedule.lr(self.step.saturating_sub(1));
        let row = MetricRow {
            epoch: self.epoch,
            split: Split::Train,
            resolution: res.clone(),
            accuracy: correct as f64 / n,
            loss: loss / n,
            lr,
            wall_ms: self.wall_ms(),
        };
        self.emit(row)?;
        self.evaluate_all(lr)?;
        Ok((step_ms, steps))
    }

    fn wall_ms(&self) -> f64 {
        (self.started.elapsed().as_secs_f64() * 1e6).round() / 1e3
    }

    fn evaluate_all(&mut self, lr: f64) -> Result<()> {
        let trained = self.model.resolution().to_vec();
        for res in self.eval_resolutions.clone() {
            let val = self.data.view(Split::Val, &res)?;
            if val.is_empty() {
                continue;
            }
            let ev = evaluate_zero_shot(&self.model, &val, &trained)?;
            let row = MetricRow {
                epoch: self.epoch,
                split: Split::Val,
                resolution: res.clone(),
                accuracy: ev.accuracy,
                loss: ev.loss,
                lr,
                wall_ms: self.wall_ms(),
            };
            self.emit(row)?;
            let better = self.record.best.get(&res).is_none_or(|b| ev.accuracy > b.accuracy);
            if better {
                self.record.best.insert(
                    res,
                    BestAtResolution { epoch: self.epoch, accuracy: ev.accuracy, model: self.model.clone() },
                );
            }
        }
        Ok(())
    }

    /// Trains at the model's own resolution for `config.epochs` epochs as a
    /// single-stage schedule.
    pub fn train(&mut self) -> Result<()> {
        if self.config.epochs == 0 {
            return Ok(());
        }
        let stage = ResizeStage {
            resolution: self.model.resolution().to_vec(),
            epochs: self.config.epochs,
            alpha: self.model.alpha(),
            lr_epochs: None,
        };
        let schedule = ResizeSchedule { stages: vec![stage], warmup_steps: self.config.warmup_steps };
        run_schedule(&schedule, self)?;
        Ok(())
    }

    pub fn run(&mut self, schedule: &ResizeSchedule) -> Result<()> {
        run_schedule(schedule, self)?;
        Ok(())
    }

    pub fn into_parts(self) -> (IsotropicModel, TrainRecord) {
        (self.model, self.record)
    }
}

impl StageTrainer for Trainer<'_> {
    type Metrics = StageSummary;

    fn set_resolution(&mut self, ctx: &StageContext) -> Result<()> {
        if ctx.plan.is_some() || self.model.resolution() != ctx.resolution.as_slice() {
            self.model.rebase_resolution(&ctx.resolution)?;
        }
        self.data.view(Split::Train, &ctx.resolution)?;
        Ok(())
    }

    fn set_alpha(&mut self, alpha: Cutoff) -> Result<()> {
        self.model.set_alpha(alpha);
        Ok(())
    }

    fn reset_lr_schedule(&mut self, epochs: usize, warmup_steps: usize) -> Result<()> {
        let per_epoch = self.steps_per_epoch()?;
        self.schedule = LrSchedule { base_lr: self.config.lr, warmup_steps, total_steps: epochs * per_epoch };
        self.step = 0;
        Ok(())
    }

    fn train_epochs(&mut self, ctx: &StageContext) -> Result<StageSummary> {
        let mut total_ms = 0.0;
        let mut steps = 0;
        for _ in 0..ctx.epochs {
            let (ms, n) = self.run_epoch()?;
            total_ms += ms;
            steps += n;
        }
        let summary = StageSummary {
            index: ctx.index,
            resolution: ctx.resolution.clone(),
            epochs: ctx.epochs,
            alpha: ctx.alpha,
            steps,
            mean_step_ms: if steps > 0 { total_ms / steps as f64 } else { 0.0 },
        };
        self.record.stages.push(summary.clone());
        Ok(summary)
    }
}

/// Trains `model` at its own resolution and returns it with the record.
pub fn train(
    model: IsotropicModel,
    data: &mut Dataset,
    config: &TrainConfig,
    eval_resolutions: &[Vec<usize>],
) -> Result<(IsotropicModel, TrainRecord)> {
    let mut t = Trainer::new(model, data, config.clone(), eval_resolutions.to_vec())?;
    t.train()?;
    Ok(t.into_parts())
}
