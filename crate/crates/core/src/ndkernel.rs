//! N-dimensional kernels assembled from per-axis 1D SSM kernels.
//!
//! The general kernel is `K(t) = Re <C, (x)_tau exp(t_tau A_tau) B_tau>` with a
//! dense coefficient tensor `C` of shape `N_1 x ... x N_D`. When
//! `C = sum_i c_i^(1) (x) ... (x) c_i^(D)` the kernel factors into a sum of
//! outer products of 1D kernels, which is the form the model uses.
//! [`assemble_dense`] is kept as a small-scale reference.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ssm::{
    apply_mask, bandlimit_mask, discretization_delta_derivatives, discretize_basis, draw_coefficients, init_ssm,
    join_bidirectional, sample_kernel, validate_basis, Cutoff, DiagonalSSM, DiscreteRealization, Discretization,
    InitKind, C64,
};
use crate::tensor::{increment, Tensor};
use crate::util::mix_seed;

/// Upper bound on `prod N_tau` for dense coefficient tensors.
pub const DENSE_STATE_LIMIT: usize = 1 << 20;

/// Forward and backward coefficient vectors for one rank term on one axis.
/// `backward` is empty for causal kernels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AxisCoeffs {
    pub forward: Vec<C64>,
    pub backward: Vec<C64>,
}

impl AxisCoeffs {
    pub fn zeros(n: usize, bidirectional: bool) -> Self {
        AxisCoeffs {
            forward: vec![C64::new(0.0, 0.0); n],
            backward: if bidirectional { vec![C64::new(0.0, 0.0); n] } else { Vec::new() },
        }
    }
}

/// One axis of a factored kernel: a shared `(a, b, delta)` basis and `rank`
/// coefficient sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelAxis {
    pub a: Vec<C64>,
    pub b: Vec<C64>,
    pub delta: f64,
    pub init_kind: InitKind,
    /// Samples per direction; bidirectional kernels have `2 length - 1` taps.
    pub length: usize,
    /// Step size at which the bandlimit mask is evaluated. Equal to `delta`
    /// at construction; resolution changes move `delta` but keep this fixed.
    pub mask_delta: f64,
    pub coeffs: Vec<AxisCoeffs>,
}

impl KernelAxis {
    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    /// The 1D SSM carrying the forward coefficients of rank term `rank`.
    pub fn ssm(&self, rank: usize) -> Result<DiagonalSSM> {
        DiagonalSSM::new(
            self.a.clone(),
            self.b.clone(),
            self.coeffs[rank].forward.clone(),
            self.delta,
            self.init_kind,
            !self.coeffs[rank].backward.is_empty(),
        )
    }

    pub fn discretize(&self, method: Discretization) -> Result<DiscreteRealization> {
        discretize_basis(&self.a, &self.b, self.delta, method)
    }

    pub fn mask(&self, alpha: Cutoff) -> Vec<bool> {
        bandlimit_mask(&self.a, self.mask_delta, alpha)
    }
}

/// Rank-`r` factored ND kernel.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FactoredKernelSpec {
    pub axes: Vec<KernelAxis>,
    pub rank: usize,
    pub method: Discretization,
    pub bidirectional: bool,
}

/// Arguments for [`FactoredKernelSpec::initialize`].
#[derive(Clone, Debug)]
pub struct FactoredInit<'a> {
    pub kind: InitKind,
    pub state_dim: usize,
    pub rank: usize,
    pub lengths: &'a [usize],
    pub deltas: &'a [f64],
    pub method: Discretization,
    pub bidirectional: bool,
}

impl FactoredKernelSpec {
    pub fn initialize(init: &FactoredInit<'_>, seed: u64) -> Result<Self> {
        if init.lengths.len() != init.deltas.len() {
            return Err(Error::domain("lengths and deltas must have one entry per axis"));
        }
        let axes = init
            .lengths
            .iter()
            .zip(init.deltas)
            .enumerate()
            .map(|(tau, (&length, &delta))| {
                new_axis(
                    init.kind,
                    init.state_dim,
                    init.rank,
                    length,
                    delta,
                    init.bidirectional,
                    mix_seed(seed, tau as u64),
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let spec = FactoredKernelSpec { axes, rank: init.rank, method: init.method, bidirectional: init.bidirectional };
        spec.validate()?;
        Ok(spec)
    }

    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    /// Per-axis tap counts of the assembled kernel.
    pub fn kernel_shape(&self) -> Vec<usize> {
        self.axes.iter().map(|ax| if self.bidirectional { 2 * ax.length - 1 } else { ax.length }).collect()
    }

    pub fn deltas(&self) -> Vec<f64> {
        self.axes.iter().map(|a| a.delta).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims()) {
            return Err(Error::domain(format!("dims must be 1, 2 or 3, got {}", self.dims())));
        }
        if self.rank == 0 {
            return Err(Error::domain("rank must be at least 1"));
        }
        for (tau, ax) in self.axes.iter().enumerate() {
            validate_basis(&ax.a, &ax.b, ax.delta)?;
            if !(ax.mask_delta > 0.0 && ax.mask_delta.is_finite()) {
                return Err(Error::domain(format!("axis {tau}: mask delta must be positive")));
            }
            if ax.length == 0 {
                return Err(Error::domain(format!("axis {tau}: kernel length must be at least 1")));
            }
            if ax.coeffs.len() != self.rank {
                return Err(Error::domain(format!(
                    "axis {tau}: {} coefficient sets for rank {}",
                    ax.coeffs.len(),
                    self.rank
                )));
            }
            let n = ax.state_size();
            for (i, c) in ax.coeffs.iter().enumerate() {
                let bwd_ok = if self.bidirectional { c.backward.len() == n } else { c.backward.is_empty() };
                if c.forward.len() != n || !bwd_ok {
                    return Err(Error::domain(format!(
                        "axis {tau}, rank {i}: coefficient lengths do not match state size {n}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Sampled 1D kernels indexed `[rank][axis]`, with the bandlimit applied.
    pub fn axis_kernels(&self, alpha: Cutoff) -> Result<Vec<Vec<Vec<f64>>>> {
        self.axis_kernels_counted(alpha, &mut AssemblyStats::default())
    }

    fn axis_kernels_counted(&self, alpha: Cutoff, stats: &mut AssemblyStats) -> Result<Vec<Vec<Vec<f64>>>> {
        let reals = self.axes.iter().map(|ax| ax.discretize(self.method)).collect::<Result<Vec<_>>>()?;
        let masks: Vec<Vec<bool>> = self.axes.iter().map(|ax| ax.mask(alpha)).collect();
        (0..self.rank)
            .map(|i| {
                self.axes
                    .iter()
                    .enumerate()
                    .map(|(tau, ax)| {
                        let mut fwd = ax.coeffs[i].forward.clone();
                        apply_mask(&mut fwd, &masks[tau]);
                        let k_fwd = sample_kernel(&reals[tau], &fwd, ax.length)?;
                        stats.sample_mults += (ax.length * ax.state_size()) as u64;
                        if !self.bidirectional {
                            return Ok(k_fwd);
                        }
                        let mut bwd = ax.coeffs[i].backward.clone();
                        apply_mask(&mut bwd, &masks[tau]);
                        let k_bwd = sample_kernel(&reals[tau], &bwd, ax.length)?;
                        stats.sample_mults += (ax.length * ax.state_size()) as u64;
                        Ok(join_bidirectional(&k_fwd, &k_bwd, self.method))
                    })
                    .collect()
            })
            .collect()
    }
}

fn new_axis(
    kind: InitKind,
    state_dim: usize,
    rank: usize,
    length: usize,
    delta: f64,
    bidirectional: bool,
    seed: u64,
) -> Result<KernelAxis> {
    let ssm = init_ssm(kind, state_dim, delta, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, 0xC0EF));
    let coeffs = (0..rank)
        .map(|_| {
            let forward = draw_coefficients(&mut rng, state_dim);
            let backward = if bidirectional { draw_coefficients(&mut rng, state_dim) } else { Vec::new() };
            AxisCoeffs { forward, backward }
        })
        .collect();
    Ok(KernelAxis { a: ssm.a, b: ssm.b, delta, init_kind: kind, length, mask_delta: delta, coeffs })
}

/// Discrete ND kernel samples.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelTensor {
    pub data: Tensor,
    /// Step size per axis the kernel was sampled at.
    pub delta: Vec<f64>,
    /// Bidirectional kernels are centered (`2L - 1` taps per axis); causal ones start at 0.
    pub centered: bool,
}

impl KernelTensor {
    pub fn shape(&self) -> &[usize] {
        self.data.shape()
    }
}

/// Multiply counts gathered during assembly.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AssemblyStats {
    /// Complex multiplies spent sampling 1D kernels or dense basis terms.
    pub sample_mults: u64,
    /// Real multiplies spent forming outer products.
    pub combine_mults: u64,
}

impl AssemblyStats {
    pub fn total(&self) -> u64 {
        self.sample_mults + self.combine_mults
    }
}

/// `sum_i K_i^(1) (x) ... (x) K_i^(D)` for per-rank lists of axis kernels.
pub fn combine_axis_kernels(per_rank: &[Vec<Vec<f64>>]) -> Result<Tensor> {
    combine_counted(per_rank, &mut AssemblyStats::default())
}

fn combine_counted(per_rank: &[Vec<Vec<f64>>], stats: &mut AssemblyStats) -> Result<Tensor> {
    let first = per_rank.first().ok_or_else(|| Error::domain("at least one rank term is required"))?;
    let shape: Vec<usize> = first.iter().map(Vec::len).collect();
    if shape.is_empty() || shape.contains(&0) {
        return Err(Error::domain("axis kernels must be non-empty"));
    }
    let mut out = Tensor::zeros(&shape);
    for kernels in per_rank {
        let this_shape: Vec<usize> = kernels.iter().map(Vec::len).collect();
        if this_shape != shape {
            return Err(Error::domain(format!("rank terms disagree on shape: {this_shape:?} vs {shape:?}")));
        }
        // running prefix products keep this O(prod L) per rank
        let data = out.data_mut();
        let mut partial = kernels[0].clone();
        for k in &kernels[1..] {
            let mut next = Vec::with_capacity(partial.len() * k.len());
            for &p in &partial {
                for &v in k {
                    next.push(p * v);
                }
            }
            stats.combine_mults += next.len() as u64;
            partial = next;
        }
        for (o, p) in data.iter_mut().zip(&partial) {
            *o += p;
        }
    }
    Ok(out)
}

/// Samples a factored spec into a kernel tensor.
pub fn assemble_factored(spec: &FactoredKernelSpec, alpha: Cutoff) -> Result<KernelTensor> {
    assemble_factored_with_stats(spec, alpha).map(|(k, _)| k)
}

pub fn assemble_factored_with_stats(spec: &FactoredKernelSpec, alpha: Cutoff) -> Result<(KernelTensor, AssemblyStats)> {
    spec.validate()?;
    let mut stats = AssemblyStats::default();
    let kernels = spec.axis_kernels_counted(alpha, &mut stats)?;
    let data = combine_counted(&kernels, &mut stats)?;
    Ok((KernelTensor { data, delta: spec.deltas(), centered: spec.bidirectional }, stats))
}

/// Complex tensor stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    pub shape: Vec<usize>,
    pub data: Vec<C64>,
}

impl ComplexTensor {
    pub fn new(shape: Vec<usize>, data: Vec<C64>) -> Result<Self> {
        let len: usize = shape.iter().product();
        if len != data.len() {
            return Err(Error::domain(format!("shape {shape:?} needs {len} values, got {}", data.len())));
        }
        Ok(ComplexTensor { shape, data })
    }

    /// `sum_i (x)_tau v_i^(tau)`.
    pub fn from_outer_sum(per_rank: &[Vec<Vec<C64>>]) -> Result<Self> {
        let first = per_rank.first().ok_or_else(|| Error::domain("empty outer sum"))?;
        let shape: Vec<usize> = first.iter().map(Vec::len).collect();
        let mut data = vec![C64::new(0.0, 0.0); shape.iter().product()];
        for vecs in per_rank {
            let mut idx = vec![0usize; shape.len()];
            for d in data.iter_mut() {
                let mut p = C64::new(1.0, 0.0);
                for (tau, &i) in idx.iter().enumerate() {
                    p *= vecs[tau][i];
                }
                *d += p;
                increment(&mut idx, &shape);
            }
        }
        Ok(ComplexTensor { shape, data })
    }
}

/// One axis of a dense-coefficient kernel.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseAxis {
    pub a: Vec<C64>,
    pub b: Vec<C64>,
    pub delta: f64,
    pub length: usize,
}

/// Kernel with a full coefficient tensor `C`; causal only.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseKernelSpec {
    pub axes: Vec<DenseAxis>,
    pub c: ComplexTensor,
    pub method: Discretization,
}

impl DenseKernelSpec {
    pub fn dims(&self) -> usize {
        self.axes.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.axes.is_empty() {
            return Err(Error::domain("dense spec needs at least one axis"));
        }
        let states: Vec<usize> = self.axes.iter().map(|a| a.a.len()).collect();
        if states != self.c.shape {
            return Err(Error::domain(format!(
                "C has shape {:?} but the axis state sizes are {states:?}",
                self.c.shape
            )));
        }
        for ax in &self.axes {
            validate_basis(&ax.a, &ax.b, ax.delta)?;
            if ax.length == 0 {
                return Err(Error::domain("kernel length must be at least 1"));
            }
        }
        Ok(())
    }

    /// The dense equivalent of a causal factored spec. Each axis is expanded to
    /// its conjugate-closed state set `[a, conj(a)]` with coefficients
    /// `[c/2, conj(c)/2]`, so the per-axis real parts become one complex sum and
    /// `C = sum_i (x)_tau c_i^(tau)` over the expanded states.
    pub fn from_factored(spec: &FactoredKernelSpec) -> Result<Self> {
        if spec.bidirectional {
            return Err(Error::domain("dense specs are causal; the factored spec is bidirectional"));
        }
        let conj_closed = |v: &[C64], scale: f64| -> Vec<C64> {
            v.iter().map(|z| z * scale).chain(v.iter().map(|z| z.conj() * scale)).collect()
        };
        let per_rank: Vec<Vec<Vec<C64>>> = (0..spec.rank)
            .map(|i| spec.axes.iter().map(|ax| conj_closed(&ax.coeffs[i].forward, 0.5)).collect())
            .collect();
        Ok(DenseKernelSpec {
            axes: spec
                .axes
                .iter()
                .map(|ax| DenseAxis {
                    a: conj_closed(&ax.a, 1.0),
                    b: conj_closed(&ax.b, 1.0),
                    delta: ax.delta,
                    length: ax.length,
                })
                .collect(),
            c: ComplexTensor::from_outer_sum(&per_rank)?,
            method: spec.method,
        })
    }
}

/// Direct evaluation of `Re sum_n C[n] prod_tau b_bar_n a_bar_n^k` over every
/// state and sample index. Coefficient slices masked on any axis are zeroed.
pub fn assemble_dense(spec: &DenseKernelSpec, alpha: Cutoff) -> Result<KernelTensor> {
    assemble_dense_with_stats(spec, alpha).map(|(k, _)| k)
}

pub fn assemble_dense_with_stats(spec: &DenseKernelSpec, alpha: Cutoff) -> Result<(KernelTensor, AssemblyStats)> {
    spec.validate()?;
    let states = spec.c.shape.clone();
    let total_states: usize = states.iter().product();
    if total_states > DENSE_STATE_LIMIT {
        return Err(Error::Capacity(format!(
            "dense coefficient tensor has {total_states} entries, limit {DENSE_STATE_LIMIT}"
        )));
    }
    let lengths: Vec<usize> = spec.axes.iter().map(|a| a.length).collect();
    let bases = spec
        .axes
        .iter()
        .map(|ax| discretize_basis(&ax.a, &ax.b, ax.delta, spec.method).map(|r| r.basis(ax.length)))
        .collect::<Result<Vec<_>>>()?;
    let masks: Vec<Vec<bool>> = spec.axes.iter().map(|ax| bandlimit_mask(&ax.a, ax.delta, alpha)).collect();

    let mut coeff = spec.c.data.clone();
    let mut n_idx = vec![0usize; states.len()];
    for c in coeff.iter_mut() {
        if n_idx.iter().enumerate().any(|(tau, &n)| !masks[tau][n]) {
            *c = C64::new(0.0, 0.0);
        }
        increment(&mut n_idx, &states);
    }

    let dims = states.len();
    let mut stats = AssemblyStats::default();
    let mut out = Tensor::zeros(&lengths);
    let mut k_idx = vec![0usize; dims];
    for value in out.data_mut().iter_mut() {
        let mut acc = C64::new(0.0, 0.0);
        let mut n_idx = vec![0usize; dims];
        for &c in &coeff {
            let mut term = c;
            for tau in 0..dims {
                term *= bases[tau][k_idx[tau] * states[tau] + n_idx[tau]];
            }
            acc += term;
            increment(&mut n_idx, &states);
        }
        stats.sample_mults += (total_states * dims) as u64;
        *value = acc.re;
        increment(&mut k_idx, &lengths);
    }
    if !out.is_finite() {
        return Err(Error::numerical("dense kernel has non-finite samples"));
    }
    Ok((KernelTensor { data: out, delta: spec.axes.iter().map(|a| a.delta).collect(), centered: false }, stats))
}

/// Extends a 2D spec with a freshly initialized third (temporal) axis.
pub fn inflate_2d_to_3d(
    spec2d: &FactoredKernelSpec,
    temporal_init: InitKind,
    temporal_delta: f64,
    temporal_length: usize,
    seed: u64,
) -> Result<FactoredKernelSpec> {
    if spec2d.dims() != 2 {
        return Err(Error::domain(format!("inflation needs a 2D spec, got {}D", spec2d.dims())));
    }
    let state_dim = spec2d.axes[1].state_size();
    let temporal =
        new_axis(temporal_init, state_dim, spec2d.rank, temporal_length, temporal_delta, spec2d.bidirectional, seed)?;
    let mut out = spec2d.clone();
    out.axes.push(temporal);
    out.validate()?;
    Ok(out)
}

/// Gradients of `<upstream, K>` with respect to a factored spec's coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGrads {
    /// Indexed `[axis][rank]`. Complex entries hold `dL/dRe(c) + i dL/dIm(c)`.
    pub coeffs: Vec<Vec<AxisCoeffs>>,
    /// `dL/d log(delta)` per axis, when requested.
    pub log_delta: Option<Vec<f64>>,
}

/// Exact gradients of `<upstream, assemble_factored(spec, alpha)>`.
///
/// The kernel is multilinear in the per-axis 1D kernels and each 1D kernel is
/// linear in its coefficients, so every axis gradient is the upstream tensor
/// contracted against the other axes' kernels, then against the conjugated
/// basis. Masked coefficients receive zero gradient.
pub fn kernel_grad_wrt_c(
    spec: &FactoredKernelSpec,
    alpha: Cutoff,
    upstream: &Tensor,
    with_log_delta: bool,
) -> Result<KernelGrads> {
    spec.validate()?;
    let shape = spec.kernel_shape();
    if upstream.shape() != shape.as_slice() {
        return Err(Error::domain(format!(
            "upstream shape {:?} does not match kernel shape {shape:?}",
            upstream.shape()
        )));
    }
    let dims = spec.dims();
    let kernels = spec.axis_kernels(alpha)?;
    let reals = spec.axes.iter().map(|ax| ax.discretize(spec.method)).collect::<Result<Vec<_>>>()?;

    let mut coeffs: Vec<Vec<AxisCoeffs>> =
        spec.axes.iter().map(|ax| vec![AxisCoeffs::zeros(ax.state_size(), spec.bidirectional); spec.rank]).collect();
    let mut log_delta = vec![0.0; dims];

    for i in 0..spec.rank {
        let axis_grads = contract_others(upstream, &kernels[i]);
        for tau in 0..dims {
            let ax = &spec.axes[tau];
            let g = &axis_grads[tau];
            let mask = ax.mask(alpha);
            let len = ax.length;
            let (g_fwd, g_bwd): (Vec<f64>, Vec<f64>) = if spec.bidirectional {
                let fwd = g[len - 1..].to_vec();
                let mut bwd = vec![0.0; len];
                let first = if spec.method.shares_center() { 0 } else { 1 };
                for k in first..len {
                    bwd[k] = g[len - 1 - k];
                }
                (fwd, bwd)
            } else {
                (g.clone(), Vec::new())
            };
            let basis = reals[tau].basis(len);
            let n = ax.state_size();
            let project = |gk: &[f64]| -> Vec<C64> {
                (0..n)
                    .map(|s| {
                        if !mask[s] {
                            return C64::new(0.0, 0.0);
                        }
                        gk.iter().enumerate().map(|(k, &w)| basis[k * n + s].conj() * w).sum()
                    })
                    .collect()
            };
            coeffs[tau][i].forward = project(&g_fwd);
            if spec.bidirectional {
                coeffs[tau][i].backward = project(&g_bwd);
            }

            if with_log_delta {
                let dk_fwd = kernel_delta_derivative(ax, &reals[tau], &ax.coeffs[i].forward, &mask);
                let mut d = dot(&g_fwd, &dk_fwd);
                if spec.bidirectional {
                    let dk_bwd = kernel_delta_derivative(ax, &reals[tau], &ax.coeffs[i].backward, &mask);
                    let first = if spec.method.shares_center() { 0 } else { 1 };
                    d += dot(&g_bwd[first..], &dk_bwd[first..]);
                }
                log_delta[tau] += d * ax.delta;
            }
        }
    }
    Ok(KernelGrads { coeffs, log_delta: with_log_delta.then_some(log_delta) })
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `d K[k] / d delta` for a causal 1D kernel.
fn kernel_delta_derivative(ax: &KernelAxis, real: &DiscreteRealization, c: &[C64], mask: &[bool]) -> Vec<f64> {
    let (da, db) = discretization_delta_derivatives(&ax.a, &ax.b, real);
    let n = ax.state_size();
    let mut out = vec![0.0; ax.length];
    for s in 0..n {
        if !mask[s] {
            continue;
        }
        let (abar, bbar) = (real.a_bar[s], real.b_bar[s]);
        let w0 = real.method.center_weight();
        // d/dDelta [b_bar a_bar^k] = db a_bar^k + b_bar k a_bar^(k-1) da
        let mut pow = C64::new(1.0, 0.0);
        let mut pow_prev = C64::new(0.0, 0.0);
        for (k, o) in out.iter_mut().enumerate() {
            let term = db[s] * pow + bbar * (k as f64) * pow_prev * da[s];
            let w = if k == 0 { w0 } else { 1.0 };
            *o += w * (c[s] * term).re;
            pow_prev = pow;
            pow *= abar;
        }
    }
    out
}

/// For each axis, contracts `upstream` with the kernels of every other axis.
fn contract_others(upstream: &Tensor, kernels: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let shape = upstream.shape().to_vec();
    let dims = shape.len();
    let mut out: Vec<Vec<f64>> = shape.iter().map(|&n| vec![0.0; n]).collect();
    let mut idx = vec![0usize; dims];
    for &u in upstream.data() {
        if u != 0.0 {
            for tau in 0..dims {
                let mut p = u;
                for (sigma, &i) in idx.iter().enumerate() {
                    if sigma != tau {
                        p *= kernels[sigma][i];
                    }
                }
                out[tau][idx[tau]] += p;
            }
        }
        increment(&mut idx, &shape);
    }
    out
}
