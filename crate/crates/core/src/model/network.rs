use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::params::ParamSet;
use super::{argmax, log_softmax};
use crate::conv::{ConvMode, ConvPlan, FeatureMap};
use crate::error::{Error, Result};
use crate::ndkernel::{assemble_factored, kernel_grad_wrt_c, AxisCoeffs, FactoredInit, FactoredKernelSpec, KernelAxis};
use crate::resolution::{rescale_delta, ResolutionPlan};
use crate::ssm::{Cutoff, Discretization, InitKind, C64};
use crate::tensor::{increment, Tensor};
use crate::util::mix_seed;

const NORM_EPS: f64 = 1e-5;
/// Samples per sequential accumulation chunk in the backward pass. Fixed so
/// that gradient sums do not depend on the thread count.
const GRAD_CHUNK: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    /// Depthwise global convolution with a factored S4ND kernel.
    S4nd,
    /// Depthwise local convolution with a learned `k^D` kernel.
    Conv,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub layer: LayerKind,
    pub depth: usize,
    pub width: usize,
    pub patch: usize,
    pub in_channels: usize,
    pub classes: usize,
    pub state_dim: usize,
    pub rank: usize,
    pub init: InitKind,
    pub bidirectional: bool,
    pub method: Discretization,
    /// Step size per axis at the training resolution; `1 / grid` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<Vec<f64>>,
    pub train_delta: bool,
    pub conv_kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layer: LayerKind::S4nd,
            depth: 4,
            width: 64,
            patch: 1,
            in_channels: 1,
            classes: 4,
            state_dim: 16,
            rank: 1,
            init: InitKind::Fourier,
            bidirectional: true,
            method: Discretization::Trapezoid,
            delta: None,
            train_delta: false,
            conv_kernel: 3,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("width", self.width),
            ("patch", self.patch),
            ("in_channels", self.in_channels),
            ("state_dim", self.state_dim),
            ("rank", self.rank),
            ("conv_kernel", self.conv_kernel),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("model.{name} must be positive")));
            }
        }
        if self.classes < 2 {
            return Err(Error::config("model.classes must be at least 2"));
        }
        if self.conv_kernel.is_multiple_of(2) {
            return Err(Error::config("model.conv_kernel must be odd"));
        }
        if let Some(d) = &self.delta {
            if d.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
                return Err(Error::config("model.delta entries must be positive"));
            }
        }
        Ok(())
    }
}

/// Frozen state matrix and input vector shared by all channels of one block axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisBasis {
    pub a: Vec<C64>,
    pub b: Vec<C64>,
}

#[derive(Clone, Debug, PartialEq)]
struct BlockLayout {
    norm_scale: usize,
    norm_shift: usize,
    kernel: usize,
    log_delta: Option<usize>,
    mix_w: usize,
    mix_b: usize,
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    stem_w: usize,
    stem_b: usize,
    blocks: Vec<BlockLayout>,
    head_w: usize,
    head_b: usize,
}

impl Layout {
    fn find(params: &ParamSet, config: &ModelConfig) -> Result<Self> {
        let idx = |name: String| {
            params.index_of(&name).ok_or_else(|| Error::domain(format!("missing parameter segment {name}")))
        };
        let blocks = (0..config.depth)
            .map(|l| {
                let kernel_name = match config.layer {
                    LayerKind::S4nd => format!("blocks.{l}.ssm.c"),
                    LayerKind::Conv => format!("blocks.{l}.conv.weight"),
                };
                Ok(BlockLayout {
                    norm_scale: idx(format!("blocks.{l}.norm.scale"))?,
                    norm_shift: idx(format!("blocks.{l}.norm.shift"))?,
                    kernel: idx(kernel_name)?,
                    log_delta: match config.layer {
                        LayerKind::S4nd => Some(idx(format!("blocks.{l}.ssm.log_delta"))?),
                        LayerKind::Conv => None,
                    },
                    mix_w: idx(format!("blocks.{l}.mix.weight"))?,
                    mix_b: idx(format!("blocks.{l}.mix.bias"))?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Layout {
            stem_w: idx("stem.weight".into())?,
            stem_b: idx("stem.bias".into())?,
            blocks,
            head_w: idx("head.weight".into())?,
            head_b: idx("head.bias".into())?,
        })
    }
}

/// Parameter gradients and kernel-gradient accumulators of one sample chunk.
type ChunkGrads = (Vec<f64>, Vec<Vec<Vec<C64>>>);

/// Isotropic classifier: patch stem, `depth` residual blocks of
/// (channel norm, depthwise convolution, GELU, pointwise mix), mean pool, linear head.
#[derive(Clone, Debug, PartialEq)]
pub struct IsotropicModel {
    pub config: ModelConfig,
    pub params: ParamSet,
    resolution: Vec<usize>,
    bases: Vec<Vec<AxisBasis>>,
    alpha: Cutoff,
    layout: Layout,
}

/// The local-convolution baseline shares the skeleton; only the layer kind differs.
pub type Conv2dBaselineModel = IsotropicModel;

fn gaussian(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    (0..n).map(|_| std * Distribution::<f64>::sample(&StandardNormal, rng)).collect()
}

fn gelu(x: f64) -> (f64, f64) {
    const K: f64 = 0.797_884_560_802_865_4;
    const A: f64 = 0.044_715;
    let inner = K * (x + A * x * x * x);
    let t = inner.tanh();
    let value = 0.5 * x * (1.0 + t);
    let slope = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * K * (1.0 + 3.0 * A * x * x);
    (value, slope)
}

struct PreparedBlock {
    plan: ConvPlan,
    spectra: Vec<Vec<C64>>,
    specs: Vec<FactoredKernelSpec>,
}

struct Prepared {
    grid: Vec<usize>,
    blocks: Vec<PreparedBlock>,
}

#[derive(Clone, Debug)]
struct BlockActs {
    normed: Vec<f64>,
    rstd: Vec<f64>,
    z_hat: Vec<Vec<C64>>,
    y: Vec<f64>,
    g: Vec<f64>,
}

#[derive(Clone, Debug)]
struct SampleActs {
    patches: Vec<f64>,
    blocks: Vec<BlockActs>,
    pooled: Vec<f64>,
}

struct SampleOut {
    logits: Vec<f64>,
    features: Vec<f64>,
    acts: Option<SampleActs>,
}

/// Result of a forward pass. Activations are present only when retained.
pub struct Tape {
    pub logits: Vec<Vec<f64>>,
    prepared: Prepared,
    samples: Option<Vec<SampleActs>>,
}

impl Tape {
    pub fn retained(&self) -> bool {
        self.samples.is_some()
    }
}

/// Gradient of the mean cross-entropy over a batch, laid out like [`ParamSet::values`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub values: Vec<f64>,
    pub loss: f64,
    pub correct: usize,
}

impl IsotropicModel {
    /// Builds a model for inputs of `resolution` (pixels per spatial axis).
    pub fn new(config: ModelConfig, resolution: &[usize], alpha: Cutoff, seed: u64) -> Result<Self> {
        config.validate()?;
        let grid = grid_for(&config, resolution)?;
        let dims = grid.len();
        let h = config.width;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0x57E3));
        let mut params = ParamSet::new();
        let fan_in = config.in_channels * config.patch.pow(dims as u32);
        params.add(
            "stem.weight",
            &[h, fan_in],
            true,
            true,
            gaussian(&mut rng, h * fan_in, 1.0 / (fan_in as f64).sqrt()),
        );
        params.add("stem.bias", &[h], true, true, gaussian(&mut rng, h, 1.0));
        let deltas: Vec<f64> = match &config.delta {
            Some(d) if d.len() == dims => d.clone(),
            Some(d) => {
                return Err(Error::config(format!("model.delta has {} entries for {dims} axes", d.len())));
            }
            None => grid.iter().map(|&g| 1.0 / g as f64).collect(),
        };
        let mut bases = Vec::with_capacity(config.depth);
        for l in 0..config.depth {
            params.add(format!("blocks.{l}.norm.scale"), &[h], false, true, vec![1.0; h]);
            params.add(format!("blocks.{l}.norm.shift"), &[h], false, true, vec![0.0; h]);
            match config.layer {
                LayerKind::S4nd => {
                    let dirs = if config.bidirectional { 2 } else { 1 };
                    let n = config.state_dim;
                    let mut c = Vec::with_capacity(h * dims * config.rank * dirs * n * 2);
                    let mut block_bases = Vec::new();
                    for ch in 0..h {
                        let spec = FactoredKernelSpec::initialize(
                            &FactoredInit {
                                kind: config.init,
                                state_dim: n,
                                rank: config.rank,
                                lengths: &grid,
                                deltas: &deltas,
                                method: config.method,
                                bidirectional: config.bidirectional,
                            },
                            mix_seed(seed, ((l as u64) << 32) | ch as u64),
                        )?;
                        if ch == 0 {
                            block_bases =
                                spec.axes.iter().map(|ax| AxisBasis { a: ax.a.clone(), b: ax.b.clone() }).collect();
                        }
                        for ax in &spec.axes {
                            for co in &ax.coeffs {
                                for v in co.forward.iter().chain(&co.backward) {
                                    c.push(v.re);
                                    c.push(v.im);
                                }
                            }
                        }
                    }
                    params.add(format!("blocks.{l}.ssm.c"), &[h, dims, config.rank, dirs, n, 2], false, true, c);
                    let logd: Vec<f64> = (0..h).flat_map(|_| deltas.iter().map(|d| d.ln())).collect();
                    params.add(format!("blocks.{l}.ssm.log_delta"), &[h, dims], false, config.train_delta, logd);
                    bases.push(block_bases);
                }
                LayerKind::Conv => {
                    let k = config.conv_kernel;
                    let taps = k.pow(dims as u32);
                    let mut shape = vec![h];
                    shape.extend(std::iter::repeat_n(k, dims));
                    let w = gaussian(&mut rng, h * taps, 1.0 / (taps as f64).sqrt());
                    params.add(format!("blocks.{l}.conv.weight"), &shape, true, true, w);
                    bases.push(Vec::new());
                }
            }
            params.add(
                format!("blocks.{l}.mix.weight"),
                &[h, h],
                true,
                true,
                gaussian(&mut rng, h * h, 1.0 / (h as f64).sqrt()),
            );
            params.add(format!("blocks.{l}.mix.bias"), &[h], true, true, vec![0.0; h]);
        }
        let k = config.classes;
        params.add("head.weight", &[k, h], true, true, gaussian(&mut rng, k * h, 1.0 / (h as f64).sqrt()));
        params.add("head.bias", &[k], true, true, vec![0.0; k]);
        let layout = Layout::find(&params, &config)?;
        Ok(IsotropicModel { config, params, resolution: resolution.to_vec(), bases, alpha, layout })
    }

    /// Reassembles a model from stored parts (checkpoint loading).
    pub fn from_parts(
        config: ModelConfig,
        resolution: &[usize],
        alpha: Cutoff,
        params: ParamSet,
        bases: Vec<Vec<AxisBasis>>,
    ) -> Result<Self> {
        config.validate()?;
        grid_for(&config, resolution)?;
        let layout = Layout::find(&params, &config)?;
        if bases.len() != config.depth {
            return Err(Error::domain("one basis list per block is required"));
        }
        Ok(IsotropicModel { config, params, resolution: resolution.to_vec(), bases, alpha, layout })
    }

    /// The resolution the model's step sizes refer to.
    pub fn resolution(&self) -> &[usize] {
        &self.resolution
    }

    pub fn bases(&self) -> &[Vec<AxisBasis>] {
        &self.bases
    }

    pub fn alpha(&self) -> Cutoff {
        self.alpha
    }

    pub fn set_alpha(&mut self, alpha: Cutoff) {
        self.alpha = alpha;
    }

    pub fn param_count(&self) -> usize {
        self.params.trainable_count()
    }

    fn dims(&self) -> usize {
        self.resolution.len()
    }

    /// Per-channel step sizes of block `block` at the model's own resolution.
    pub fn channel_deltas(&self, block: usize, channel: usize) -> Vec<f64> {
        match self.layout.blocks[block].log_delta {
            Some(seg) => {
                let d = self.dims();
                self.params.get(seg)[channel * d..(channel + 1) * d].iter().map(|v| v.exp()).collect()
            }
            None => Vec::new(),
        }
    }

    /// The factored kernel of one channel, rescaled to `grid` when it differs
    /// from the model's own grid. The bandlimit anchor stays at the model's
    /// own step size.
    pub fn channel_spec(&self, block: usize, channel: usize, grid: &[usize]) -> Result<FactoredKernelSpec> {
        let cfg = &self.config;
        if cfg.layer != LayerKind::S4nd {
            return Err(Error::Usage("local convolution blocks have no state space kernel".into()));
        }
        if block >= cfg.depth || channel >= cfg.width {
            return Err(Error::domain(format!("no channel {channel} in block {block}")));
        }
        let own = grid_for(cfg, &self.resolution)?;
        let dims = own.len();
        let n = cfg.state_dim;
        let dirs = if cfg.bidirectional { 2 } else { 1 };
        let c = self.params.get(self.layout.blocks[block].kernel);
        let deltas = self.channel_deltas(block, channel);
        let per_channel = dims * cfg.rank * dirs * n * 2;
        let base = channel * per_channel;
        let read = |off: usize| -> Vec<C64> { (0..n).map(|s| C64::new(c[off + 2 * s], c[off + 2 * s + 1])).collect() };
        let axes = (0..dims)
            .map(|tau| {
                let coeffs = (0..cfg.rank)
                    .map(|i| {
                        let off = base + ((tau * cfg.rank + i) * dirs) * n * 2;
                        AxisCoeffs {
                            forward: read(off),
                            backward: if cfg.bidirectional { read(off + n * 2) } else { Vec::new() },
                        }
                    })
                    .collect();
                KernelAxis {
                    a: self.bases[block][tau].a.clone(),
                    b: self.bases[block][tau].b.clone(),
                    delta: deltas[tau],
                    init_kind: cfg.init,
                    length: own[tau],
                    mask_delta: deltas[tau],
                    coeffs,
                }
            })
            .collect();
        let spec = FactoredKernelSpec { axes, rank: cfg.rank, method: cfg.method, bidirectional: cfg.bidirectional };
        if grid == own.as_slice() {
            return Ok(spec);
        }
        rescale_delta(&spec, &ResolutionPlan::new(&own, grid)?)
    }

    fn conv_mode(&self) -> ConvMode {
        match self.config.layer {
            LayerKind::S4nd if !self.config.bidirectional => ConvMode::Causal,
            _ => ConvMode::Centered,
        }
    }

    fn prepare(&self, grid: &[usize]) -> Result<Prepared> {
        let h = self.config.width;
        let mode = self.conv_mode();
        let blocks = (0..self.config.depth)
            .map(|l| {
                let (kernels, specs) = match self.config.layer {
                    LayerKind::S4nd => {
                        let specs = (0..h).map(|ch| self.channel_spec(l, ch, grid)).collect::<Result<Vec<_>>>()?;
                        let kernels = specs
                            .iter()
                            .map(|s| assemble_factored(s, self.alpha).map(|k| k.data))
                            .collect::<Result<Vec<_>>>()?;
                        (kernels, specs)
                    }
                    LayerKind::Conv => {
                        let k = self.config.conv_kernel;
                        let shape = vec![k; grid.len()];
                        let taps = k.pow(grid.len() as u32);
                        let w = self.params.get(self.layout.blocks[l].kernel);
                        let kernels = (0..h)
                            .map(|ch| Tensor::new(shape.clone(), w[ch * taps..(ch + 1) * taps].to_vec()))
                            .collect::<Result<Vec<_>>>()?;
                        (kernels, Vec::new())
                    }
                };
                let plan = ConvPlan::new(grid, kernels[0].shape(), mode)?;
                let spectra = kernels.iter().map(|k| plan.kernel_spectrum(k)).collect::<Result<Vec<_>>>()?;
                Ok(PreparedBlock { plan, spectra, specs })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Prepared { grid: grid.to_vec(), blocks })
    }

    /// Gathers `p^D` patches of every channel at every grid position: `[positions, features]`.
    fn patches(&self, image: &FeatureMap, grid: &[usize]) -> Vec<f64> {
        let p = self.config.patch;
        let dims = grid.len();
        let t = image.tensor();
        let cin = self.config.in_channels;
        let patch_shape = vec![p; dims];
        let npos: usize = grid.iter().product();
        let feat = cin * p.pow(dims as u32);
        let mut out = Vec::with_capacity(npos * feat);
        let mut g = vec![0usize; dims];
        let mut src = vec![0usize; dims + 1];
        for _ in 0..npos {
            for c in 0..cin {
                src[0] = c;
                let mut o = vec![0usize; dims];
                loop {
                    for d in 0..dims {
                        src[d + 1] = g[d] * p + o[d];
                    }
                    out.push(t.get(&src));
                    if !increment(&mut o, &patch_shape) {
                        break;
                    }
                }
            }
            increment(&mut g, grid);
        }
        out
    }

    fn check_input(&self, image: &FeatureMap) -> Result<Vec<usize>> {
        if image.channels() != self.config.in_channels {
            return Err(Error::domain(format!(
                "model expects {} input channels, got {}",
                self.config.in_channels,
                image.channels()
            )));
        }
        if image.resolution().len() != self.dims() {
            return Err(Error::domain(format!("model expects {}D inputs, got {:?}", self.dims(), image.resolution())));
        }
        grid_for(&self.config, image.resolution())
    }

    fn sample_forward(&self, image: &FeatureMap, prep: &Prepared, retain: bool) -> Result<SampleOut> {
        let h = self.config.width;
        let grid = &prep.grid;
        let npos: usize = grid.iter().product();
        let patches = self.patches(image, grid);
        let feat = patches.len() / npos;
        let sw = self.params.get(self.layout.stem_w);
        let sb = self.params.get(self.layout.stem_b);
        let mut x = vec![0.0; h * npos];
        for ch in 0..h {
            let w = &sw[ch * feat..(ch + 1) * feat];
            for p in 0..npos {
                let f = &patches[p * feat..(p + 1) * feat];
                x[ch * npos + p] = sb[ch] + w.iter().zip(f).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let mut blocks = Vec::new();
        for (l, bl) in self.layout.blocks.iter().enumerate() {
            let pb = &prep.blocks[l];
            let gamma = self.params.get(bl.norm_scale);
            let beta = self.params.get(bl.norm_shift);
            let mut normed = vec![0.0; h * npos];
            let mut rstd = vec![0.0; npos];
            for p in 0..npos {
                let mean = (0..h).map(|c| x[c * npos + p]).sum::<f64>() / h as f64;
                let var = (0..h).map(|c| (x[c * npos + p] - mean).powi(2)).sum::<f64>() / h as f64;
                let r = 1.0 / (var + NORM_EPS).sqrt();
                rstd[p] = r;
                for c in 0..h {
                    normed[c * npos + p] = (x[c * npos + p] - mean) * r;
                }
            }
            let mut y = vec![0.0; h * npos];
            let mut z_hat = Vec::with_capacity(if retain { h } else { 0 });
            for c in 0..h {
                let z: Vec<f64> = normed[c * npos..(c + 1) * npos].iter().map(|n| n * gamma[c] + beta[c]).collect();
                let zt = Tensor::new(grid.clone(), z)?;
                let zh = pb.plan.input_spectrum(&zt)?;
                let yc = pb.plan.forward_spectra(&zh, &pb.spectra[c]);
                y[c * npos..(c + 1) * npos].copy_from_slice(yc.data());
                if retain {
                    z_hat.push(zh);
                }
            }
            let g: Vec<f64> = y.iter().map(|&v| gelu(v).0).collect();
            let mw = self.params.get(bl.mix_w);
            let mb = self.params.get(bl.mix_b);
            for o in 0..h {
                let row = &mw[o * h..(o + 1) * h];
                let xo = &mut x[o * npos..(o + 1) * npos];
                for v in xo.iter_mut() {
                    *v += mb[o];
                }
                for (i, &w) in row.iter().enumerate() {
                    let gi = &g[i * npos..(i + 1) * npos];
                    for (v, gv) in xo.iter_mut().zip(gi) {
                        *v += w * gv;
                    }
                }
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::numerical(format!("non-finite activation in block {l}")));
            }
            if retain {
                blocks.push(BlockActs { normed, rstd, z_hat, y, g });
            }
        }
        let pooled: Vec<f64> = (0..h).map(|c| x[c * npos..(c + 1) * npos].iter().sum::<f64>() / npos as f64).collect();
        let hw = self.params.get(self.layout.head_w);
        let hb = self.params.get(self.layout.head_b);
        let logits: Vec<f64> = (0..self.config.classes)
            .map(|k| hb[k] + hw[k * h..(k + 1) * h].iter().zip(&pooled).map(|(a, b)| a * b).sum::<f64>())
            .collect();
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite logits"));
        }
        let acts = retain.then_some(SampleActs { patches, blocks, pooled });
        Ok(SampleOut { logits, features: x, acts })
    }

    fn batch_grid(&self, batch: &[FeatureMap]) -> Result<Vec<usize>> {
        let first = batch.first().ok_or_else(|| Error::domain("empty batch"))?;
        let grid = self.check_input(first)?;
        for im in batch {
            if im.resolution() != first.resolution() || im.channels() != first.channels() {
                return Err(Error::domain("all images in a batch must share one shape"));
            }
        }
        Ok(grid)
    }

    /// Forward pass; `retain` keeps the activations needed by [`backward`](Self::backward).
    pub fn forward_tape(&self, batch: &[FeatureMap], retain: bool) -> Result<Tape> {
        let grid = self.batch_grid(batch)?;
        let prepared = self.prepare(&grid)?;
        let outs = batch.par_iter().map(|im| self.sample_forward(im, &prepared, retain)).collect::<Result<Vec<_>>>()?;
        let logits = outs.iter().map(|o| o.logits.clone()).collect();
        let samples = if retain { Some(outs.into_iter().map(|o| o.acts.expect("retained")).collect()) } else { None };
        Ok(Tape { logits, prepared, samples })
    }

    /// Logits, `[batch][classes]`.
    pub fn forward(&self, batch: &[FeatureMap]) -> Result<Vec<Vec<f64>>> {
        Ok(self.forward_tape(batch, false)?.logits)
    }

    /// Activations entering the pooling layer, `[width, grid...]` per sample.
    pub fn features(&self, batch: &[FeatureMap]) -> Result<Vec<Tensor>> {
        let grid = self.batch_grid(batch)?;
        let prepared = self.prepare(&grid)?;
        let mut shape = vec![self.config.width];
        shape.extend_from_slice(&grid);
        batch
            .par_iter()
            .map(|im| {
                let out = self.sample_forward(im, &prepared, false)?;
                Tensor::new(shape.clone(), out.features)
            })
            .collect()
    }

    /// Mean cross-entropy and number of correct predictions.
    pub fn loss(&self, batch: &[FeatureMap], labels: &[usize]) -> Result<(f64, usize)> {
        let logits = self.forward(batch)?;
        score(&logits, labels, self.config.classes)
    }

    /// Gradients of the mean cross-entropy for the batch recorded in `tape`.
    pub fn backward(&self, tape: &Tape, labels: &[usize]) -> Result<Gradients> {
        let samples = tape
            .samples
            .as_ref()
            .ok_or_else(|| Error::Usage("backward needs a forward pass with retained activations".into()))?;
        if labels.len() != samples.len() {
            return Err(Error::domain(format!("{} labels for {} samples", labels.len(), samples.len())));
        }
        let (loss, correct) = score(&tape.logits, labels, self.config.classes)?;
        let batch = samples.len() as f64;
        let prep = &tape.prepared;
        let chunks: Vec<ChunkGrads> = samples
            .par_chunks(GRAD_CHUNK)
            .zip(tape.logits.par_chunks(GRAD_CHUNK))
            .zip(labels.par_chunks(GRAD_CHUNK))
            .map(|((acts, logits), labels)| {
                let mut grads = vec![0.0; self.params.len()];
                let mut kacc = self.kernel_accumulators(prep);
                for ((a, lg), &y) in acts.iter().zip(logits).zip(labels) {
                    let mut d = super::softmax(lg);
                    d[y] -= 1.0;
                    for v in d.iter_mut() {
                        *v /= batch;
                    }
                    self.sample_backward(prep, a, &d, &mut grads, &mut kacc)?;
                }
                Ok((grads, kacc))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut iter = chunks.into_iter();
        let (mut grads, mut kacc) = iter.next().expect("non-empty batch");
        for (g, k) in iter {
            grads.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            for (ka, kb) in kacc.iter_mut().zip(&k) {
                for (ca, cb) in ka.iter_mut().zip(kb) {
                    ca.iter_mut().zip(cb).for_each(|(a, b)| *a += b);
                }
            }
        }
        self.kernel_param_grads(prep, kacc, &mut grads)?;
        for seg in &self.params.segments {
            if !seg.trainable {
                grads[seg.range()].iter_mut().for_each(|g| *g = 0.0);
            }
        }
        Ok(Gradients { values: grads, loss, correct })
    }

    fn kernel_accumulators(&self, prep: &Prepared) -> Vec<Vec<Vec<C64>>> {
        prep.blocks
            .iter()
            .map(|b| {
                let len: usize = b.plan.padded_shape().iter().product();
                vec![vec![C64::new(0.0, 0.0); len]; self.config.width]
            })
            .collect()
    }

    fn sample_backward(
        &self,
        prep: &Prepared,
        acts: &SampleActs,
        dlogits: &[f64],
        grads: &mut [f64],
        kacc: &mut [Vec<Vec<C64>>],
    ) -> Result<()> {
        let h = self.config.width;
        let grid = &prep.grid;
        let npos: usize = grid.iter().product();
        let seg = |i: usize| self.params.segments[i].range();

        let hw = self.params.get(self.layout.head_w);
        let r = seg(self.layout.head_w);
        for (k, &dl) in dlogits.iter().enumerate() {
            for (c, &pv) in acts.pooled.iter().enumerate() {
                grads[r.start + k * h + c] += dl * pv;
            }
        }
        let r = seg(self.layout.head_b);
        for (k, &dl) in dlogits.iter().enumerate() {
            grads[r.start + k] += dl;
        }
        let mut dx = vec![0.0; h * npos];
        for c in 0..h {
            let dp: f64 = dlogits.iter().enumerate().map(|(k, &dl)| dl * hw[k * h + c]).sum::<f64>() / npos as f64;
            dx[c * npos..(c + 1) * npos].iter_mut().for_each(|v| *v = dp);
        }

        for (l, bl) in self.layout.blocks.iter().enumerate().rev() {
            let a = &acts.blocks[l];
            let pb = &prep.blocks[l];
            let mw = self.params.get(bl.mix_w);
            let r = seg(bl.mix_w);
            for o in 0..h {
                let dxo = &dx[o * npos..(o + 1) * npos];
                for i in 0..h {
                    let gi = &a.g[i * npos..(i + 1) * npos];
                    grads[r.start + o * h + i] += dxo.iter().zip(gi).map(|(u, v)| u * v).sum::<f64>();
                }
            }
            let r = seg(bl.mix_b);
            for o in 0..h {
                grads[r.start + o] += dx[o * npos..(o + 1) * npos].iter().sum::<f64>();
            }
            // dy = (W^T dx) * gelu'(y)
            let mut dy = vec![0.0; h * npos];
            for o in 0..h {
                let dxo = &dx[o * npos..(o + 1) * npos];
                for i in 0..h {
                    let w = mw[o * h + i];
                    for (d, u) in dy[i * npos..(i + 1) * npos].iter_mut().zip(dxo) {
                        *d += w * u;
                    }
                }
            }
            for (d, &yv) in dy.iter_mut().zip(&a.y) {
                *d *= gelu(yv).1;
            }
            let gamma = self.params.get(bl.norm_scale);
            let rg = seg(bl.norm_scale);
            let rb = seg(bl.norm_shift);
            let mut dn = vec![0.0; h * npos];
            for c in 0..h {
                let up = Tensor::new(grid.clone(), dy[c * npos..(c + 1) * npos].to_vec())?;
                let w_hat = pb.plan.upstream_spectrum(&up)?;
                let dz = pb.plan.grad_input_spectra(&w_hat, &pb.spectra[c]);
                for ((acc, w), u) in kacc[l][c].iter_mut().zip(&w_hat).zip(&a.z_hat[c]) {
                    *acc += w * u.conj();
                }
                let nc = &a.normed[c * npos..(c + 1) * npos];
                let dzc = dz.data();
                grads[rg.start + c] += dzc.iter().zip(nc).map(|(u, v)| u * v).sum::<f64>();
                grads[rb.start + c] += dzc.iter().sum::<f64>();
                for (d, u) in dn[c * npos..(c + 1) * npos].iter_mut().zip(dzc) {
                    *d = u * gamma[c];
                }
            }
            for p in 0..npos {
                let mut m1 = 0.0;
                let mut m2 = 0.0;
                for c in 0..h {
                    m1 += dn[c * npos + p];
                    m2 += dn[c * npos + p] * a.normed[c * npos + p];
                }
                m1 /= h as f64;
                m2 /= h as f64;
                for c in 0..h {
                    let i = c * npos + p;
                    dx[i] += a.rstd[p] * (dn[i] - m1 - a.normed[i] * m2);
                }
            }
        }

        let feat = acts.patches.len() / npos;
        let rw = seg(self.layout.stem_w);
        let rb = seg(self.layout.stem_b);
        for c in 0..h {
            let dxc = &dx[c * npos..(c + 1) * npos];
            grads[rb.start + c] += dxc.iter().sum::<f64>();
            for (p, &d) in dxc.iter().enumerate() {
                let f = &acts.patches[p * feat..(p + 1) * feat];
                for (j, fv) in f.iter().enumerate() {
                    grads[rw.start + c * feat + j] += d * fv;
                }
            }
        }
        Ok(())
    }

    fn kernel_param_grads(&self, prep: &Prepared, kacc: Vec<Vec<Vec<C64>>>, grads: &mut [f64]) -> Result<()> {
        let dims = prep.grid.len();
        for (l, (pb, acc)) in prep.blocks.iter().zip(kacc).enumerate() {
            let bl = &self.layout.blocks[l];
            let kr = self.params.segments[bl.kernel].range();
            for (c, mut buf) in acc.into_iter().enumerate() {
                pb.plan.inverse_in_place(&mut buf);
                let dk = pb.plan.grad_kernel_from_correlation(&buf);
                match self.config.layer {
                    LayerKind::Conv => {
                        let taps = dk.len();
                        for (g, v) in grads[kr.start + c * taps..kr.start + (c + 1) * taps].iter_mut().zip(dk.data()) {
                            *g += v;
                        }
                    }
                    LayerKind::S4nd => {
                        let spec = &pb.specs[c];
                        let kg = kernel_grad_wrt_c(spec, self.alpha, &dk, self.config.train_delta)?;
                        let n = self.config.state_dim;
                        let dirs = if self.config.bidirectional { 2 } else { 1 };
                        let per_channel = dims * self.config.rank * dirs * n * 2;
                        for tau in 0..dims {
                            for i in 0..self.config.rank {
                                let off = kr.start + c * per_channel + ((tau * self.config.rank + i) * dirs) * n * 2;
                                let co = &kg.coeffs[tau][i];
                                for (s, v) in co.forward.iter().chain(&co.backward).enumerate() {
                                    grads[off + 2 * s] += v.re;
                                    grads[off + 2 * s + 1] += v.im;
                                }
                            }
                        }
                        if let (Some(ld), Some(seg)) = (kg.log_delta, bl.log_delta) {
                            let r = self.params.segments[seg].range();
                            for (tau, v) in ld.iter().enumerate() {
                                grads[r.start + c * dims + tau] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }

    /// Moves the model's reference resolution to `resolution`, folding the
    /// step-size change into the stored `log delta` (and with it the bandlimit anchor).
    pub fn rebase_resolution(&mut self, resolution: &[usize]) -> Result<()> {
        let grid = grid_for(&self.config, resolution)?;
        if resolution == self.resolution.as_slice() {
            return Ok(());
        }
        if let LayerKind::S4nd = self.config.layer {
            let dims = grid.len();
            for l in 0..self.config.depth {
                let seg = self.layout.blocks[l].log_delta.expect("s4nd block");
                let new: Vec<f64> = (0..self.config.width)
                    .map(|c| self.channel_spec(l, c, &grid))
                    .collect::<Result<Vec<_>>>()?
                    .iter()
                    .flat_map(|s| s.axes.iter().map(|ax| ax.delta.ln()).collect::<Vec<_>>())
                    .collect();
                debug_assert_eq!(new.len(), self.config.width * dims);
                self.params.get_mut(seg).copy_from_slice(&new);
            }
        }
        self.resolution = resolution.to_vec();
        Ok(())
    }

    /// The same network with channels reordered: channel `i` of the result is
    /// channel `perm[i]` of `self`.
    pub fn permute_channels(&self, perm: &[usize]) -> Result<Self> {
        let h = self.config.width;
        let mut sorted = perm.to_vec();
        sorted.sort_unstable();
        if sorted != (0..h).collect::<Vec<_>>() {
            return Err(Error::domain("not a permutation of the channels"));
        }
        let mut out = self.clone();
        let src = &self.params;
        let permute_rows = |out: &mut ParamSet, seg: usize| {
            let row = src.segments[seg].len() / h;
            let from = src.get(seg);
            let to = out.get_mut(seg);
            for (i, &p) in perm.iter().enumerate() {
                to[i * row..(i + 1) * row].copy_from_slice(&from[p * row..(p + 1) * row]);
            }
        };
        permute_rows(&mut out.params, self.layout.stem_w);
        permute_rows(&mut out.params, self.layout.stem_b);
        for bl in &self.layout.blocks {
            permute_rows(&mut out.params, bl.norm_scale);
            permute_rows(&mut out.params, bl.norm_shift);
            permute_rows(&mut out.params, bl.kernel);
            if let Some(s) = bl.log_delta {
                permute_rows(&mut out.params, s);
            }
            permute_rows(&mut out.params, bl.mix_b);
            let from = src.get(bl.mix_w);
            let to = out.params.get_mut(bl.mix_w);
            for (i, &pi) in perm.iter().enumerate() {
                for (j, &pj) in perm.iter().enumerate() {
                    to[i * h + j] = from[pi * h + pj];
                }
            }
        }
        let k = self.config.classes;
        let from = src.get(self.layout.head_w);
        let to = out.params.get_mut(self.layout.head_w);
        for cls in 0..k {
            for (i, &p) in perm.iter().enumerate() {
                to[cls * h + i] = from[cls * h + p];
            }
        }
        Ok(out)
    }

    /// Predicted class per image.
    pub fn predict(&self, batch: &[FeatureMap]) -> Result<Vec<usize>> {
        Ok(self.forward(batch)?.iter().map(|l| argmax(l)).collect())
    }
}

/// Grid of the stem output for an input resolution.
pub fn grid_for(config: &ModelConfig, resolution: &[usize]) -> Result<Vec<usize>> {
    if resolution.is_empty() || resolution.len() > 3 {
        return Err(Error::domain(format!("unsupported input resolution {resolution:?}")));
    }
    if resolution.iter().any(|&r| r == 0 || r % config.patch != 0) {
        return Err(Error::domain(format!(
            "resolution {resolution:?} is not divisible by patch size {}",
            config.patch
        )));
    }
    Ok(resolution.iter().map(|&r| r / config.patch).collect())
}

/// Mean cross-entropy and count of correct argmax predictions.
pub fn score(logits: &[Vec<f64>], labels: &[usize], classes: usize) -> Result<(f64, usize)> {
    if logits.len() != labels.len() {
        return Err(Error::domain("logits and labels differ in length"));
    }
    let mut loss = 0.0;
    let mut correct = 0;
    for (l, &y) in logits.iter().zip(labels) {
        if y >= classes {
            return Err(Error::domain(format!("label {y} out of range for {classes} classes")));
        }
        loss -= log_softmax(l)[y];
        if argmax(l) == y {
            correct += 1;
        }
    }
    Ok((loss / logits.len().max(1) as f64, correct))
}
