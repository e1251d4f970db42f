//! Resolution handling: step-size rescaling for zero-shot resolution change,
//! antialiased resampling of images, and multi-stage resizing schedules.

use serde::{Deserialize, Serialize};

use crate::conv::FeatureMap;
use crate::error::{Error, Result};
use crate::ndkernel::FactoredKernelSpec;
use crate::ssm::{Cutoff, DiagonalSSM};
use crate::tensor::Tensor;

/// Warmup steps applied at the start of every schedule stage.
pub const DEFAULT_WARMUP_STEPS: usize = 100;

/// A change of sampling resolution; `delta_scale = train / test` per axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResolutionPlan {
    pub train_resolution: Vec<usize>,
    pub test_resolution: Vec<usize>,
    pub delta_scale: Vec<f64>,
}

impl ResolutionPlan {
    pub fn new(train: &[usize], test: &[usize]) -> Result<Self> {
        if train.len() != test.len() || train.is_empty() {
            return Err(Error::domain(format!("resolution plan needs matching axes, got {train:?} -> {test:?}")));
        }
        if train.contains(&0) || test.contains(&0) {
            return Err(Error::domain(format!("resolutions must be positive, got {train:?} -> {test:?}")));
        }
        Ok(ResolutionPlan {
            train_resolution: train.to_vec(),
            test_resolution: test.to_vec(),
            delta_scale: train.iter().zip(test).map(|(&a, &b)| a as f64 / b as f64).collect(),
        })
    }

    pub fn identity(resolution: &[usize]) -> Result<Self> {
        ResolutionPlan::new(resolution, resolution)
    }

    pub fn is_identity(&self) -> bool {
        self.train_resolution == self.test_resolution
    }
}

/// Scales every axis step size by the plan's ratio and resizes kernel lengths
/// to the test resolution. The bandlimit anchor `mask_delta` is left where it
/// was, so the set of kept states is the one the kernel was trained with.
pub fn rescale_delta(spec: &FactoredKernelSpec, plan: &ResolutionPlan) -> Result<FactoredKernelSpec> {
    if plan.delta_scale.len() != spec.dims() {
        return Err(Error::domain(format!("plan has {} axes, kernel has {}", plan.delta_scale.len(), spec.dims())));
    }
    if plan.delta_scale.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
        return Err(Error::domain("delta scale must be positive"));
    }
    let mut out = spec.clone();
    for (tau, ax) in out.axes.iter_mut().enumerate() {
        if plan.train_resolution[tau] == plan.test_resolution[tau] {
            continue;
        }
        ax.delta *= plan.delta_scale[tau];
        let scaled = ax.length as f64 * plan.test_resolution[tau] as f64 / plan.train_resolution[tau] as f64;
        ax.length = (scaled.round() as usize).max(1);
    }
    Ok(out)
}

fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Normalized triangle-filter taps for resizing `n` samples to `m`.
fn resample_taps(n: usize, m: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / m as f64;
    let support = scale.max(1.0);
    let shrinking = scale > 1.0;
    (0..m)
        .map(|i| {
            let x = (i as f64 + 0.5) * scale - 0.5;
            let lo = (x - support).ceil() as isize;
            let hi = (x + support).floor() as isize;
            let mut taps: Vec<(usize, f64)> = Vec::new();
            let mut total = 0.0;
            for j in lo..=hi {
                let w = 1.0 - (j as f64 - x).abs() / support;
                if w <= 0.0 {
                    continue;
                }
                let src = if shrinking { reflect101(j, n) } else { j.clamp(0, n as isize - 1) as usize };
                total += w;
                taps.push((src, w));
            }
            for t in taps.iter_mut() {
                t.1 /= total;
            }
            taps
        })
        .collect()
}

/// Resizes one axis of a row-major tensor.
fn resample_axis(t: &Tensor, axis: usize, m: usize) -> Tensor {
    let shape = t.shape();
    let n = shape[axis];
    if n == m {
        return t.clone();
    }
    let taps = resample_taps(n, m);
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let mut new_shape = shape.to_vec();
    new_shape[axis] = m;
    let src = t.data();
    let mut out = vec![0.0; outer * m * inner];
    for o in 0..outer {
        for (i, row) in taps.iter().enumerate() {
            let dst = &mut out[(o * m + i) * inner..(o * m + i + 1) * inner];
            for &(j, w) in row {
                let s = &src[(o * n + j) * inner..(o * n + j + 1) * inner];
                for (d, v) in dst.iter_mut().zip(s) {
                    *d += w * v;
                }
            }
        }
    }
    Tensor::new(new_shape, out).expect("resample shape")
}

/// Separable bilinear (trilinear in 3D) resampling. When shrinking an axis by
/// a factor `s`, the triangle filter is widened to `s` input samples, which
/// acts as the antialiasing prefilter.
pub fn resample_image(image: &FeatureMap, target: &[usize]) -> Result<FeatureMap> {
    let res = image.resolution();
    if target.len() != res.len() || target.contains(&0) {
        return Err(Error::domain(format!("cannot resample {res:?} to {target:?}")));
    }
    let mut t = image.tensor().clone();
    for (axis, &m) in target.iter().enumerate() {
        t = resample_axis(&t, axis + 1, m);
    }
    FeatureMap::new(t)
}

/// Expected kernel length in samples, `1 / delta`.
pub fn effective_kernel_length(ssm: &DiagonalSSM) -> f64 {
    1.0 / ssm.delta
}

/// One stage of a progressive-resizing schedule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeStage {
    pub resolution: Vec<usize>,
    pub epochs: usize,
    pub alpha: Cutoff,
    /// Length of the stage's cosine learning-rate schedule in epochs; the
    /// stage's own epoch count when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lr_epochs: Option<usize>,
}

impl ResizeStage {
    pub fn schedule_epochs(&self) -> usize {
        self.lr_epochs.unwrap_or(self.epochs)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResizeSchedule {
    pub stages: Vec<ResizeStage>,
    #[serde(default = "default_warmup")]
    pub warmup_steps: usize,
}

fn default_warmup() -> usize {
    DEFAULT_WARMUP_STEPS
}

impl ResizeSchedule {
    pub fn new(stages: Vec<ResizeStage>) -> Result<Self> {
        let s = ResizeSchedule { stages, warmup_steps: DEFAULT_WARMUP_STEPS };
        s.validate()?;
        Ok(s)
    }

    /// Splits `total_epochs` between a low-resolution stage and a final stage,
    /// giving the first stage `fraction` of the budget (rounded).
    pub fn two_stage(
        low: &[usize],
        base: &[usize],
        total_epochs: usize,
        fraction: f64,
        alphas: (Cutoff, Cutoff),
    ) -> Result<Self> {
        let first = ((total_epochs as f64) * fraction).round() as usize;
        if first == 0 || first >= total_epochs {
            return Err(Error::config(format!("cannot split {total_epochs} epochs {fraction}:{}", 1.0 - fraction)));
        }
        ResizeSchedule::new(vec![
            ResizeStage { resolution: low.to_vec(), epochs: first, alpha: alphas.0, lr_epochs: None },
            ResizeStage { resolution: base.to_vec(), epochs: total_epochs - first, alpha: alphas.1, lr_epochs: None },
        ])
    }

    pub fn validate(&self) -> Result<()> {
        let first = self.stages.first().ok_or_else(|| Error::config("a schedule needs at least one stage"))?;
        for (i, st) in self.stages.iter().enumerate() {
            if st.epochs == 0 {
                return Err(Error::config(format!("stage {i}: epoch count must be positive")));
            }
            if st.lr_epochs == Some(0) {
                return Err(Error::config(format!("stage {i}: schedule length must be positive")));
            }
            if st.resolution.len() != first.resolution.len() || st.resolution.contains(&0) {
                return Err(Error::config(format!(
                    "stage {i}: resolution {:?} is not compatible with {:?}",
                    st.resolution, first.resolution
                )));
            }
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

/// Everything a trainer needs to enter one stage.
#[derive(Clone, Debug, PartialEq)]
pub struct StageContext {
    pub index: usize,
    pub resolution: Vec<usize>,
    /// Change from the previous stage's resolution; `None` for the first stage.
    pub plan: Option<ResolutionPlan>,
    pub alpha: Cutoff,
    pub epochs: usize,
    pub lr_epochs: usize,
    pub warmup_steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleEvent {
    StageStart(usize),
    ScheduleReset(usize),
    StageEnd(usize),
}

/// Callbacks driven by [`run_schedule`].
pub trait StageTrainer {
    type Metrics;

    /// Re-samples the data view for the stage and rescales the model's step
    /// sizes through [`rescale_delta`] when `ctx.plan` is present.
    fn set_resolution(&mut self, ctx: &StageContext) -> Result<()>;
    fn set_alpha(&mut self, alpha: Cutoff) -> Result<()>;
    /// Restarts the learning-rate schedule (linear warmup then cosine decay).
    fn reset_lr_schedule(&mut self, epochs: usize, warmup_steps: usize) -> Result<()>;
    fn train_epochs(&mut self, ctx: &StageContext) -> Result<Self::Metrics>;
}

#[derive(Clone, Debug)]
pub struct ScheduleRun<M> {
    pub stages: Vec<M>,
    pub events: Vec<ScheduleEvent>,
}

pub fn run_schedule<T: StageTrainer>(schedule: &ResizeSchedule, trainer: &mut T) -> Result<ScheduleRun<T::Metrics>> {
    schedule.validate()?;
    let mut events = Vec::new();
    let mut stages = Vec::with_capacity(schedule.stages.len());
    let mut previous: Option<&[usize]> = None;
    for (index, st) in schedule.stages.iter().enumerate() {
        let plan = match previous {
            Some(prev) => Some(ResolutionPlan::new(prev, &st.resolution).map_err(|e| e.in_stage(index))?),
            None => None,
        };
        let ctx = StageContext {
            index,
            resolution: st.resolution.clone(),
            plan,
            alpha: st.alpha,
            epochs: st.epochs,
            lr_epochs: st.schedule_epochs(),
            warmup_steps: schedule.warmup_steps,
        };
        events.push(ScheduleEvent::StageStart(index));
        let metrics = (|| {
            trainer.set_resolution(&ctx)?;
            trainer.set_alpha(ctx.alpha)?;
            trainer.reset_lr_schedule(ctx.lr_epochs, ctx.warmup_steps)?;
            events.push(ScheduleEvent::ScheduleReset(index));
            trainer.train_epochs(&ctx)
        })()
        .map_err(|e| e.in_stage(index))?;
        events.push(ScheduleEvent::StageEnd(index));
        stages.push(metrics);
        previous = Some(&st.resolution);
    }
    Ok(ScheduleRun { stages, events })
}
