//! Synthetic scenes defined in continuous unit-square coordinates, rendered at
//! any sampling resolution by stratified supersampling.
//!
//! Axis 0 of a rendered image is `y` (rows), axis 1 is `x` (columns); pixel
//! `(i, j)` of an `R0 x R1` render covers `[i/R0, (i+1)/R0] x [j/R1, (j+1)/R1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::conv::FeatureMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util::mix_seed;

/// Width of the logistic transition at primitive boundaries, in scene units.
pub const EDGE_SOFTNESS: f64 = 0.006;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrimitiveShape {
    Ellipse,
    Rectangle,
    /// Elliptical annulus whose width is [`RING_WIDTH`] of the semi-axes.
    Ring,
}

/// Ring band width as a fraction of the semi-axes.
pub const RING_WIDTH: f64 = 0.45;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Primitive {
    pub shape: PrimitiveShape,
    /// `[x, y]` in `[0, 1]`.
    pub center: [f64; 2],
    /// Semi-axes `[along x, along y]` before rotation, in `[0.05, 0.4]`.
    pub axes: [f64; 2],
    /// Counter-clockwise rotation in `[0, pi)`.
    pub rotation: f64,
    pub intensity: f64,
}

impl Primitive {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.center.iter().all(|&c| in_unit(c)) {
            return Err(Error::domain(format!("center {:?} outside the unit square", self.center)));
        }
        if !self.axes.iter().all(|&a| (0.05..=0.4).contains(&a)) {
            return Err(Error::domain(format!("axes {:?} outside [0.05, 0.4]", self.axes)));
        }
        if !(0.0..std::f64::consts::PI).contains(&self.rotation) {
            return Err(Error::domain(format!("rotation {} outside [0, pi)", self.rotation)));
        }
        if !(0.2..=1.0).contains(&self.intensity) {
            return Err(Error::domain(format!("intensity {} outside [0.2, 1]", self.intensity)));
        }
        Ok(())
    }

    /// Approximate signed distance to the boundary (negative inside).
    fn signed_distance(&self, x: f64, y: f64) -> f64 {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        let [ax, ay] = self.axes;
        match self.shape {
            PrimitiveShape::Rectangle => {
                let qx = u.abs() - ax;
                let qy = v.abs() - ay;
                let outside = qx.max(0.0).hypot(qy.max(0.0));
                outside + qx.max(qy).min(0.0)
            }
            PrimitiveShape::Ellipse | PrimitiveShape::Ring => {
                let r = (u / ax).hypot(v / ay);
                let scale = ax.min(ay);
                let d = (r - 1.0) * scale;
                if self.shape == PrimitiveShape::Ring {
                    let half = 0.5 * RING_WIDTH * scale;
                    (d + half).abs() - half
                } else {
                    d
                }
            }
        }
    }

    /// Soft occupancy in `[0, 1]`.
    fn coverage(&self, x: f64, y: f64) -> f64 {
        let d = self.signed_distance(x, y) / EDGE_SOFTNESS;
        1.0 / (1.0 + d.exp())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub label: usize,
    /// Painted in order, later primitives over earlier ones.
    pub primitives: Vec<Primitive>,
    pub background: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Continuous scene intensity at `(x, y)`.
    pub fn intensity(&self, x: f64, y: f64) -> f64 {
        self.primitives.iter().fold(self.background, |acc, p| {
            let m = p.coverage(x, y);
            acc * (1.0 - m) + p.intensity * m
        })
    }
}

/// Renders a 2D scene. Each pixel is the mean intensity over
/// `antialias_samples^2` stratified sub-pixel points.
pub fn render(scene: &SceneSpec, resolution: &[usize], antialias_samples: usize) -> Result<FeatureMap> {
    if resolution.len() != 2 || resolution.iter().any(|&r| r < 2) {
        return Err(Error::domain(format!("render needs two axes of at least 2 samples, got {resolution:?}")));
    }
    if antialias_samples == 0 {
        return Err(Error::domain("antialias_samples must be at least 1"));
    }
    let (rows, cols) = (resolution[0], resolution[1]);
    let s = antialias_samples;
    let inv = 1.0 / (s * s) as f64;
    let offsets: Vec<f64> = (0..s).map(|k| (k as f64 + 0.5) / s as f64).collect();
    let mut data = Vec::with_capacity(rows * cols);
    for i in 0..rows {
        for j in 0..cols {
            let mut acc = 0.0;
            for oy in &offsets {
                let y = (i as f64 + oy) / rows as f64;
                for ox in &offsets {
                    let x = (j as f64 + ox) / cols as f64;
                    acc += scene.intensity(x, y);
                }
            }
            data.push(acc * inv);
        }
    }
    FeatureMap::new(Tensor::new(vec![1, rows, cols], data)?)
}

/// Block-mean downsampling by an integer factor on every spatial axis.
pub fn box_downsample(image: &FeatureMap, factor: usize) -> Result<FeatureMap> {
    let res = image.resolution();
    if factor == 0 || res.iter().any(|&r| r % factor != 0) {
        return Err(Error::domain(format!("cannot box-downsample {res:?} by {factor}")));
    }
    let t = image.tensor();
    let mut shape = t.shape().to_vec();
    for s in shape.iter_mut().skip(1) {
        *s /= factor;
    }
    let norm = (factor as f64).powi(res.len() as i32);
    let out = Tensor::from_fn(&shape, |idx| {
        let mut acc = 0.0;
        let mut sub = vec![0usize; res.len()];
        loop {
            let mut src = Vec::with_capacity(idx.len());
            src.push(idx[0]);
            for (d, &o) in sub.iter().enumerate() {
                src.push(idx[d + 1] * factor + o);
            }
            acc += t.get(&src);
            if !crate::tensor::increment(&mut sub, &vec![factor; res.len()]) {
                break;
            }
        }
        acc / norm
    });
    FeatureMap::new(out)
}

/// Class-conditional generation rules.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassRules {
    /// Up to four classes: disk, ring, pair of small disks, bar.
    Shapes,
    /// Two classes: a single horizontal bar or a single vertical bar.
    Bars,
}

impl ClassRules {
    pub fn max_classes(self) -> usize {
        match self {
            ClassRules::Shapes => 4,
            ClassRules::Bars => 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub n_train: usize,
    pub n_val: usize,
    pub n_classes: usize,
    pub rules: ClassRules,
    pub seed: u64,
    /// Resolutions to pre-render, if any.
    #[serde(default)]
    pub cache_resolutions: Vec<Vec<usize>>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 || self.n_classes > self.rules.max_classes() {
            return Err(Error::config(format!(
                "{:?} rules support 2..={} classes, got {}",
                self.rules,
                self.rules.max_classes(),
                self.n_classes
            )));
        }
        if self.n_train == 0 {
            return Err(Error::config("n_train must be positive"));
        }
        Ok(())
    }
}

fn jittered_center(rng: &mut ChaCha8Rng, spread: f64) -> [f64; 2] {
    [0.5 + rng.random_range(-spread..=spread), 0.5 + rng.random_range(-spread..=spread)]
}

fn generate_scene(rules: ClassRules, label: usize, seed: u64) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let background = rng.random_range(0.0..0.15);
    let intensity = rng.random_range(0.5..=1.0);
    let rotation = rng.random_range(0.0..std::f64::consts::PI);
    let prim = |shape, center, axes, rotation| Primitive { shape, center, axes, rotation, intensity };
    let primitives = match (rules, label) {
        (ClassRules::Shapes, 0) => {
            let r = rng.random_range(0.2..0.3);
            vec![prim(
                PrimitiveShape::Ellipse,
                jittered_center(&mut rng, 0.1),
                [r, r * rng.random_range(0.85..1.0)],
                rotation,
            )]
        }
        (ClassRules::Shapes, 1) => {
            let r = rng.random_range(0.25..0.33);
            vec![prim(
                PrimitiveShape::Ring,
                jittered_center(&mut rng, 0.08),
                [r, r * rng.random_range(0.85..1.0)],
                rotation,
            )]
        }
        (ClassRules::Shapes, 2) => {
            let c = jittered_center(&mut rng, 0.05);
            let sep = rng.random_range(0.22..0.28);
            let (s, co) = rotation.sin_cos();
            let r = rng.random_range(0.09..0.12);
            vec![
                prim(PrimitiveShape::Ellipse, [c[0] + sep * co, c[1] + sep * s], [r, r], 0.0),
                prim(PrimitiveShape::Ellipse, [c[0] - sep * co, c[1] - sep * s], [r, r], 0.0),
            ]
        }
        (ClassRules::Shapes, _) => {
            let long = rng.random_range(0.3..0.38);
            let short = rng.random_range(0.06..0.09);
            vec![prim(PrimitiveShape::Rectangle, jittered_center(&mut rng, 0.08), [long, short], rotation)]
        }
        (ClassRules::Bars, l) => {
            let long = rng.random_range(0.3..0.4);
            let short = rng.random_range(0.06..0.1);
            let rot = if l == 0 { 0.0 } else { std::f64::consts::FRAC_PI_2 };
            vec![prim(PrimitiveShape::Rectangle, jittered_center(&mut rng, 0.1), [long, short], rot)]
        }
    };
    SceneSpec { label, primitives, background, seed }
}

/// Train and validation scenes. Scene `k` (train first, then validation) has
/// label `k mod n_classes` and seed `mix(seed, k)`, so the two sets are
/// disjoint and balanced.
pub fn make_dataset(manifest: &DatasetManifest) -> Result<(Vec<SceneSpec>, Vec<SceneSpec>)> {
    manifest.validate()?;
    let scene = |k: usize| generate_scene(manifest.rules, k % manifest.n_classes, mix_seed(manifest.seed, k as u64));
    let train = (0..manifest.n_train).map(scene).collect();
    let val = (manifest.n_train..manifest.n_train + manifest.n_val).map(scene).collect();
    Ok((train, val))
}

/// Rendered images stacked as `[batch, 1, R0, R1]` with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct RenderedSet {
    pub images: Vec<FeatureMap>,
    pub labels: Vec<usize>,
    pub resolution: Vec<usize>,
}

pub fn render_set(scenes: &[SceneSpec], resolution: &[usize], antialias_samples: usize) -> Result<RenderedSet> {
    use rayon::prelude::*;
    let images = scenes.par_iter().map(|s| render(s, resolution, antialias_samples)).collect::<Result<Vec<_>>>()?;
    Ok(RenderedSet { images, labels: scenes.iter().map(|s| s.label).collect(), resolution: resolution.to_vec() })
}

/// Accuracy of a softmax-regression probe on raw pixels, trained by full-batch
/// gradient descent and scored on its own training set.
pub fn linear_probe_accuracy(set: &RenderedSet, n_classes: usize, steps: usize, lr: f64) -> f64 {
    let n = set.images.len();
    if n == 0 {
        return 0.0;
    }
    let dim = set.images[0].tensor().len();
    let feats: Vec<&[f64]> = set.images.iter().map(|im| im.tensor().data()).collect();
    let mut w = vec![0.0; n_classes * dim];
    let mut b = vec![0.0; n_classes];
    let logits = |w: &[f64], b: &[f64], x: &[f64]| -> Vec<f64> {
        (0..n_classes)
            .map(|k| b[k] + w[k * dim..(k + 1) * dim].iter().zip(x).map(|(a, b)| a * b).sum::<f64>())
            .collect()
    };
    for _ in 0..steps {
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; n_classes];
        for (x, &y) in feats.iter().zip(&set.labels) {
            let p = crate::model::softmax(&logits(&w, &b, x));
            for k in 0..n_classes {
                let g = p[k] - if k == y { 1.0 } else { 0.0 };
                gb[k] += g;
                for (gw, xv) in gw[k * dim..(k + 1) * dim].iter_mut().zip(x.iter()) {
                    *gw += g * xv;
                }
            }
        }
        let scale = lr / n as f64;
        w.iter_mut().zip(&gw).for_each(|(w, g)| *w -= scale * g);
        b.iter_mut().zip(&gb).for_each(|(b, g)| *b -= scale * g);
    }
    let correct = feats.iter().zip(&set.labels).filter(|(x, &y)| crate::model::argmax(&logits(&w, &b, x)) == y).count();
    correct as f64 / n as f64
}
