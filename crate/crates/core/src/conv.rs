//! FFT-based depthwise ND convolution, its adjoint, and a state-space
//! recurrence that reproduces the same outputs by scanning each axis.
//!
//! Convolution is linear (zero padded), never circular. `Causal` mode
//! computes `y[x] = sum_j K[j] u[x - j]`; `Centered` mode shifts the kernel
//! origin to tap `(L_k - 1) / 2` on every axis.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{next_fast_len, FftNd};
use crate::ndkernel::{DenseKernelSpec, KernelTensor};
use crate::ssm::{discretize_basis, C64};
use crate::tensor::{increment, strides, Tensor};

/// Largest per-axis input length accepted by [`recurrence_nd_oracle`].
pub const RECURRENCE_MAX_LEN: usize = 16;
/// Largest per-axis state size accepted by [`recurrence_nd_oracle`].
pub const RECURRENCE_MAX_STATE: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConvMode {
    Causal,
    Centered,
}

/// Channels-first activations: shape `[channels, L_1, ..., L_D]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    data: Tensor,
}

impl FeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.ndim() < 2 {
            return Err(Error::domain("feature maps need a channel axis and at least one spatial axis"));
        }
        if data.shape()[0] == 0 {
            return Err(Error::domain("feature maps need at least one channel"));
        }
        if !data.is_finite() {
            return Err(Error::numerical("feature map contains non-finite values"));
        }
        Ok(FeatureMap { data })
    }

    pub fn from_channels(channels: &[Tensor]) -> Result<Self> {
        FeatureMap::new(Tensor::stack(channels)?)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    /// Spatial sample counts per axis.
    pub fn resolution(&self) -> &[usize] {
        &self.data.shape()[1..]
    }

    pub fn channel(&self, c: usize) -> Tensor {
        self.data.slice_outer(c)
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }
}

/// Padded shapes, crop offsets and FFT plan for one (input, kernel, mode) triple.
#[derive(Clone, Debug)]
pub struct ConvPlan {
    input_shape: Vec<usize>,
    kernel_shape: Vec<usize>,
    mode: ConvMode,
    padded: Vec<usize>,
    offsets: Vec<usize>,
    fft: FftNd,
}

impl ConvPlan {
    pub fn new(input_shape: &[usize], kernel_shape: &[usize], mode: ConvMode) -> Result<Self> {
        if input_shape.len() != kernel_shape.len() {
            return Err(Error::domain(format!(
                "kernel has {} dims but input has {}",
                kernel_shape.len(),
                input_shape.len()
            )));
        }
        if input_shape.is_empty() || input_shape.contains(&0) || kernel_shape.contains(&0) {
            return Err(Error::domain("convolution shapes must be non-empty"));
        }
        let mut padded = Vec::with_capacity(input_shape.len());
        let mut offsets = Vec::with_capacity(input_shape.len());
        for (&l, &lk) in input_shape.iter().zip(kernel_shape) {
            let (limit, off) = match mode {
                ConvMode::Causal => (l, 0),
                ConvMode::Centered => (2 * l - 1, (lk - 1) / 2),
            };
            if lk > limit {
                return Err(Error::domain(format!(
                    "kernel length {lk} exceeds {limit} for input length {l} in {mode:?} mode"
                )));
            }
            // Smallest length for which neither the cropped forward outputs nor
            // the adjoint correlations see wrapped-around samples.
            let need = (l + lk - 1 - off).max(off + l);
            padded.push(next_fast_len(need));
            offsets.push(off);
        }
        let fft = FftNd::new(&padded);
        Ok(ConvPlan {
            input_shape: input_shape.to_vec(),
            kernel_shape: kernel_shape.to_vec(),
            mode,
            padded,
            offsets,
            fft,
        })
    }

    pub fn padded_shape(&self) -> &[usize] {
        &self.padded
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn kernel_shape(&self) -> &[usize] {
        &self.kernel_shape
    }

    pub fn mode(&self) -> ConvMode {
        self.mode
    }

    /// Zero-pads `src` (shape `shape`) into the padded buffer starting at `origin`.
    fn embed(&self, src: &[f64], shape: &[usize], origin: &[usize]) -> Vec<C64> {
        let mut buf = vec![C64::new(0.0, 0.0); self.fft.len()];
        let pstrides = strides(&self.padded);
        let row = shape[shape.len() - 1];
        let dims = shape.len();
        let mut idx = vec![0usize; dims];
        for chunk in src.chunks_exact(row) {
            let base: usize = (0..dims).map(|d| (idx[d] + origin[d]) * pstrides[d]).sum();
            for (dst, &v) in buf[base..base + row].iter_mut().zip(chunk) {
                dst.re = v;
            }
            idx[dims - 1] = row - 1;
            increment(&mut idx, shape);
        }
        buf
    }

    /// Reads the real part of `shape` samples starting at `origin`.
    fn crop(&self, buf: &[C64], shape: &[usize], origin: &[usize]) -> Vec<f64> {
        let pstrides = strides(&self.padded);
        let dims = shape.len();
        let row = shape[dims - 1];
        let total: usize = shape.iter().product();
        let mut out = Vec::with_capacity(total);
        let mut idx = vec![0usize; dims];
        for _ in 0..total / row {
            let base: usize = (0..dims).map(|d| (idx[d] + origin[d]) * pstrides[d]).sum();
            out.extend(buf[base..base + row].iter().map(|z| z.re));
            idx[dims - 1] = row - 1;
            increment(&mut idx, shape);
        }
        out
    }

    fn check(&self, t: &Tensor, shape: &[usize], what: &str) -> Result<()> {
        if t.shape() != shape {
            return Err(Error::domain(format!("{what} has shape {:?}, expected {shape:?}", t.shape())));
        }
        Ok(())
    }

    pub fn kernel_spectrum(&self, kernel: &Tensor) -> Result<Vec<C64>> {
        self.check(kernel, &self.kernel_shape, "kernel")?;
        let zero = vec![0; self.padded.len()];
        let mut buf = self.embed(kernel.data(), &self.kernel_shape, &zero);
        self.fft.forward(&mut buf);
        Ok(buf)
    }

    pub fn input_spectrum(&self, input: &Tensor) -> Result<Vec<C64>> {
        self.check(input, &self.input_shape, "input")?;
        let zero = vec![0; self.padded.len()];
        let mut buf = self.embed(input.data(), &self.input_shape, &zero);
        self.fft.forward(&mut buf);
        Ok(buf)
    }

    /// Forward convolution from precomputed spectra.
    pub fn forward_spectra(&self, input_hat: &[C64], kernel_hat: &[C64]) -> Tensor {
        let mut buf: Vec<C64> = input_hat.iter().zip(kernel_hat).map(|(a, b)| a * b).collect();
        self.fft.inverse(&mut buf);
        let data = self.crop(&buf, &self.input_shape, &self.offsets);
        Tensor::new(self.input_shape.clone(), data).expect("crop shape")
    }

    /// Forward convolutions of two inputs sharing one kernel, using a single
    /// complex transform pair (the inputs ride in the real and imaginary parts).
    pub fn forward_pair(&self, first: &Tensor, second: &Tensor, kernel_hat: &[C64]) -> Result<(Tensor, Tensor)> {
        self.check(first, &self.input_shape, "input")?;
        self.check(second, &self.input_shape, "input")?;
        let zero = vec![0; self.padded.len()];
        let mut buf = self.embed(first.data(), &self.input_shape, &zero);
        let other = self.embed(second.data(), &self.input_shape, &zero);
        for (z, o) in buf.iter_mut().zip(&other) {
            z.im = o.re;
        }
        self.fft.forward(&mut buf);
        for (z, k) in buf.iter_mut().zip(kernel_hat) {
            *z *= k;
        }
        self.fft.inverse(&mut buf);
        let re = self.crop(&buf, &self.input_shape, &self.offsets);
        let swapped: Vec<C64> = buf.iter().map(|z| C64::new(z.im, 0.0)).collect();
        let im = self.crop(&swapped, &self.input_shape, &self.offsets);
        Ok((Tensor::new(self.input_shape.clone(), re)?, Tensor::new(self.input_shape.clone(), im)?))
    }

    pub fn forward(&self, input: &Tensor, kernel: &Tensor) -> Result<Tensor> {
        let k = self.kernel_spectrum(kernel)?;
        let u = self.input_spectrum(input)?;
        Ok(self.forward_spectra(&u, &k))
    }

    /// Spectrum of the upstream gradient placed where the forward pass cropped.
    pub fn upstream_spectrum(&self, upstream: &Tensor) -> Result<Vec<C64>> {
        self.check(upstream, &self.input_shape, "upstream")?;
        let mut buf = self.embed(upstream.data(), &self.input_shape, &self.offsets);
        self.fft.forward(&mut buf);
        Ok(buf)
    }

    /// `dL/du`: correlation of the upstream gradient with the kernel.
    pub fn grad_input_spectra(&self, upstream_hat: &[C64], kernel_hat: &[C64]) -> Tensor {
        let mut buf: Vec<C64> = upstream_hat.iter().zip(kernel_hat).map(|(w, k)| w * k.conj()).collect();
        self.fft.inverse(&mut buf);
        let zero = vec![0; self.padded.len()];
        let data = self.crop(&buf, &self.input_shape, &zero);
        Tensor::new(self.input_shape.clone(), data).expect("crop shape")
    }

    /// `dL/dK`: correlation of the upstream gradient with the input, cropped to the kernel.
    pub fn grad_kernel_spectra(&self, upstream_hat: &[C64], input_hat: &[C64]) -> Tensor {
        let mut buf: Vec<C64> = upstream_hat.iter().zip(input_hat).map(|(w, u)| w * u.conj()).collect();
        self.fft.inverse(&mut buf);
        self.grad_kernel_from_correlation(&buf)
    }

    /// Crops an inverse-transformed `sum W conj(U)` product to the kernel shape.
    pub fn grad_kernel_from_correlation(&self, buf: &[C64]) -> Tensor {
        let zero = vec![0; self.padded.len()];
        let data = self.crop(buf, &self.kernel_shape, &zero);
        Tensor::new(self.kernel_shape.clone(), data).expect("crop shape")
    }

    pub fn inverse_in_place(&self, buf: &mut [C64]) {
        self.fft.inverse(buf);
    }

    pub fn backward(&self, upstream: &Tensor, input: &Tensor, kernel: &Tensor) -> Result<(Tensor, Tensor)> {
        let w = self.upstream_spectrum(upstream)?;
        let k = self.kernel_spectrum(kernel)?;
        let u = self.input_spectrum(input)?;
        Ok((self.grad_input_spectra(&w, &k), self.grad_kernel_spectra(&w, &u)))
    }
}

/// Linear ND convolution of one channel by an assembled kernel.
pub fn fft_conv_nd(input: &Tensor, kernel: &KernelTensor, mode: ConvMode) -> Result<Tensor> {
    let plan = ConvPlan::new(input.shape(), kernel.shape(), mode)?;
    plan.forward(input, &kernel.data)
}

/// Adjoint of [`fft_conv_nd`]: returns `(dL/d input, dL/d kernel)` for upstream `dL/dy`.
pub fn fft_conv_backward(
    upstream: &Tensor,
    input: &Tensor,
    kernel: &KernelTensor,
    mode: ConvMode,
) -> Result<(Tensor, Tensor)> {
    let plan = ConvPlan::new(input.shape(), kernel.shape(), mode)?;
    plan.backward(upstream, input, &kernel.data)
}

/// Per-channel convolution; channel `c` of the output only sees channel `c` of the input.
pub fn depthwise_forward(input: &FeatureMap, kernels: &[KernelTensor], mode: ConvMode) -> Result<FeatureMap> {
    if kernels.len() != input.channels() {
        return Err(Error::domain(format!("{} kernels for {} channels", kernels.len(), input.channels())));
    }
    let outputs =
        kernels.iter().enumerate().map(|(c, k)| fft_conv_nd(&input.channel(c), k, mode)).collect::<Result<Vec<_>>>()?;
    FeatureMap::from_channels(&outputs)
}

/// Runs the discretized multidimensional SSM directly: one 1D scan per axis,
/// each adding that axis' state dimension, then `y = Re <C, x>` per position.
/// Zero initial state. Causal by construction.
pub fn recurrence_nd_oracle(input: &Tensor, spec: &DenseKernelSpec) -> Result<Tensor> {
    spec.validate()?;
    let dims = spec.dims();
    if !(2..=3).contains(&dims) || input.ndim() != dims {
        return Err(Error::domain(format!(
            "recurrence needs a 2D or 3D input matching the spec, got input {:?} and {dims}D spec",
            input.shape()
        )));
    }
    let shape = input.shape().to_vec();
    for (tau, ax) in spec.axes.iter().enumerate() {
        if shape[tau] > RECURRENCE_MAX_LEN || ax.a.len() > RECURRENCE_MAX_STATE {
            return Err(Error::Capacity(format!(
                "recurrence limited to L <= {RECURRENCE_MAX_LEN}, N <= {RECURRENCE_MAX_STATE} per axis"
            )));
        }
        if ax.length != shape[tau] {
            return Err(Error::domain(format!(
                "axis {tau}: kernel length {} must equal input length {}",
                ax.length, shape[tau]
            )));
        }
    }
    let reals =
        spec.axes.iter().map(|ax| discretize_basis(&ax.a, &ax.b, ax.delta, spec.method)).collect::<Result<Vec<_>>>()?;

    let positions: usize = shape.iter().product();
    let pstrides = strides(&shape);
    // partial state: positions x (state dims bound so far), innermost axis first
    let mut state: Vec<C64> = input.data().iter().map(|&v| C64::new(v, 0.0)).collect();
    let mut width = 1usize;
    for tau in (0..dims).rev() {
        let n = reals[tau].state_size();
        let (abar, bbar) = (&reals[tau].a_bar, &reals[tau].b_bar);
        let new_width = n * width;
        let mut next = vec![C64::new(0.0, 0.0); positions * new_width];
        let mut idx = vec![0usize; dims];
        for p in 0..positions {
            let has_prev = idx[tau] > 0;
            let prev_p = if has_prev { p - pstrides[tau] } else { 0 };
            for s in 0..n {
                for r in 0..width {
                    let carry =
                        if has_prev { abar[s] * next[prev_p * new_width + s * width + r] } else { C64::new(0.0, 0.0) };
                    next[p * new_width + s * width + r] = carry + bbar[s] * state[p * width + r];
                }
            }
            increment(&mut idx, &shape);
        }
        let excess = 1.0 - reals[tau].method.center_weight();
        if excess != 0.0 {
            for p in 0..positions {
                for s in 0..n {
                    for r in 0..width {
                        next[p * new_width + s * width + r] -= bbar[s] * excess * state[p * width + r];
                    }
                }
            }
        }
        state = next;
        width = new_width;
    }
    let c = &spec.c.data;
    let out: Vec<f64> = (0..positions)
        .map(|p| state[p * width..(p + 1) * width].iter().zip(c).map(|(x, c)| c * x).sum::<C64>().re)
        .collect();
    Tensor::new(shape, out)
}

/// Named stage timings in milliseconds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTimes {
    pub forward_fft: f64,
    pub pointwise: f64,
    pub inverse_fft: f64,
    pub pad_crop: f64,
    pub other: f64,
}

impl StageTimes {
    fn values(&self) -> [f64; 5] {
        [self.forward_fft, self.pointwise, self.inverse_fft, self.pad_crop, self.other]
    }

    fn from_values(v: [f64; 5]) -> Self {
        StageTimes { forward_fft: v[0], pointwise: v[1], inverse_fft: v[2], pad_crop: v[3], other: v[4] }
    }

    pub fn total(&self) -> f64 {
        self.values().iter().sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileShape {
    /// `[batch, L_1, ..., L_D]`
    pub input: Vec<usize>,
    pub kernel: Vec<usize>,
    pub padded: Vec<usize>,
}

/// Timing breakdown of the FFT convolution pipeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProfileReport {
    pub shape: ProfileShape,
    /// Median over repetitions, per stage.
    pub stage_times_ms: StageTimes,
    pub stage_fractions: StageTimes,
    pub repetitions: usize,
    /// Combined share of forward FFT, pointwise product and inverse FFT.
    pub fft_pipeline_fraction: f64,
    /// Sum of all outputs of the last repetition.
    pub output_checksum: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Times a single-channel centered convolution over a batch, stage by stage.
/// Inputs and kernel are pseudo-random with a fixed seed.
pub fn profile_conv(input_shape: &[usize], kernel_shape: &[usize], repetitions: usize) -> Result<ProfileReport> {
    if input_shape.len() < 2 {
        return Err(Error::domain("profile input shape is [batch, L_1, ..., L_D]"));
    }
    let reps = repetitions.max(1);
    let batch = input_shape[0];
    let spatial = &input_shape[1..];
    let mode = ConvMode::Centered;
    let plan = ConvPlan::new(spatial, kernel_shape, mode)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let kernel = Tensor::from_fn(kernel_shape, |_| rng.random::<f64>() - 0.5);
    let inputs: Vec<Tensor> = (0..batch).map(|_| Tensor::from_fn(spatial, |_| rng.random::<f64>() - 0.5)).collect();
    let zero = vec![0; spatial.len()];

    let mut samples: Vec<[f64; 5]> = Vec::with_capacity(reps);
    let mut checksum = 0.0;
    for _ in 0..reps {
        let mut t = [0.0f64; 5];
        let start = Instant::now();
        let s = Instant::now();
        let mut k_hat = plan.embed(kernel.data(), kernel_shape, &zero);
        t[3] += ms(s);
        let s = Instant::now();
        plan.fft.forward(&mut k_hat);
        t[0] += ms(s);
        checksum = 0.0;
        for u in &inputs {
            let s = Instant::now();
            let mut buf = plan.embed(u.data(), spatial, &zero);
            t[3] += ms(s);
            let s = Instant::now();
            plan.fft.forward(&mut buf);
            t[0] += ms(s);
            let s = Instant::now();
            for (z, k) in buf.iter_mut().zip(&k_hat) {
                *z *= k;
            }
            t[1] += ms(s);
            let s = Instant::now();
            plan.fft.inverse(&mut buf);
            t[2] += ms(s);
            let s = Instant::now();
            let y = plan.crop(&buf, spatial, &plan.offsets);
            t[3] += ms(s);
            checksum += y.iter().sum::<f64>();
        }
        let total = ms(start);
        t[4] = (total - t[..4].iter().sum::<f64>()).max(0.0);
        samples.push(t);
    }
    let mut medians = [0.0f64; 5];
    for (stage, m) in medians.iter_mut().enumerate() {
        let mut col: Vec<f64> = samples.iter().map(|s| s[stage]).collect();
        *m = median(&mut col);
    }
    let sum: f64 = medians.iter().sum();
    let fractions = if sum > 0.0 { medians.map(|m| m / sum) } else { [0.0, 0.0, 0.0, 0.0, 1.0] };
    Ok(ProfileReport {
        shape: ProfileShape { input: input_shape.to_vec(), kernel: kernel_shape.to_vec(), padded: plan.padded.clone() },
        stage_times_ms: StageTimes::from_values(medians),
        stage_fractions: StageTimes::from_values(fractions),
        repetitions: reps,
        fft_pipeline_fraction: fractions[0] + fractions[1] + fractions[2],
        output_checksum: checksum,
    })
}

fn ms(since: Instant) -> f64 {
    since.elapsed().as_secs_f64() * 1e3
}

#[cfg(test)]
mod tests {
    use super::*;

    fn kt(t: Tensor, centered: bool) -> KernelTensor {
        let d = t.ndim();
        KernelTensor { data: t, delta: vec![1.0; d], centered }
    }

    #[test]
    fn delta_kernel_is_identity() {
        let input = Tensor::from_fn(&[4, 5], |i| (i[0] * 5 + i[1]) as f64 * 0.3 - 2.0);
        let mut k = Tensor::zeros(&[1, 1]);
        k.set(&[0, 0], 1.0);
        let out = fft_conv_nd(&input, &kt(k, false), ConvMode::Causal).unwrap();
        assert!(out.max_abs_diff(&input) < 1e-12);

        let mut k = Tensor::zeros(&[7, 9]);
        k.set(&[3, 4], 1.0);
        let out = fft_conv_nd(&input, &kt(k, true), ConvMode::Centered).unwrap();
        assert!(out.max_abs_diff(&input) < 1e-12);
    }

    #[test]
    fn running_sum() {
        let input = Tensor::new(vec![3], vec![1.0, 2.0, 3.0]).unwrap();
        let k = Tensor::new(vec![3], vec![1.0; 3]).unwrap();
        let out = fft_conv_nd(&input, &kt(k, false), ConvMode::Causal).unwrap();
        for (g, w) in out.data().iter().zip([1.0, 3.0, 6.0]) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors() {
        let input = Tensor::zeros(&[4, 4]);
        assert!(fft_conv_nd(&input, &kt(Tensor::zeros(&[3]), false), ConvMode::Causal).is_err());
        assert!(fft_conv_nd(&input, &kt(Tensor::zeros(&[5, 1]), false), ConvMode::Causal).is_err());
        assert!(fft_conv_nd(&input, &kt(Tensor::zeros(&[8, 1]), true), ConvMode::Centered).is_err());
        let fm = FeatureMap::new(Tensor::zeros(&[2, 4])).unwrap();
        assert!(depthwise_forward(&fm, &[kt(Tensor::zeros(&[1]), false)], ConvMode::Causal).is_err());
    }

    #[test]
    fn backward_of_delta_kernel_and_zero_upstream() {
        let input = Tensor::from_fn(&[3, 4], |i| (i[0] as f64) - (i[1] as f64) * 0.5);
        let up = Tensor::from_fn(&[3, 4], |i| (i[0] * i[1]) as f64 + 0.25);
        let mut k = Tensor::zeros(&[5, 7]);
        k.set(&[2, 3], 1.0);
        let kernel = kt(k, true);
        let (gi, _) = fft_conv_backward(&up, &input, &kernel, ConvMode::Centered).unwrap();
        assert!(gi.max_abs_diff(&up) < 1e-12);
        let (gi, gk) = fft_conv_backward(&Tensor::zeros(&[3, 4]), &input, &kernel, ConvMode::Centered).unwrap();
        assert!(gi.data().iter().all(|v| v.abs() < 1e-15));
        assert!(gk.data().iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn paired_forward_matches_single() {
        let a = Tensor::from_fn(&[5, 6], |i| ((i[0] * 7 + i[1] * 3) % 5) as f64 - 2.0);
        let b = Tensor::from_fn(&[5, 6], |i| (i[0] as f64 * 0.3).sin() + i[1] as f64);
        let k = Tensor::from_fn(&[9, 11], |i| ((i[0] + 2 * i[1]) as f64 * 0.21).cos());
        let plan = ConvPlan::new(&[5, 6], &[9, 11], ConvMode::Centered).unwrap();
        let k_hat = plan.kernel_spectrum(&k).unwrap();
        let (ya, yb) = plan.forward_pair(&a, &b, &k_hat).unwrap();
        assert!(ya.max_abs_diff(&plan.forward(&a, &k).unwrap()) < 1e-12);
        assert!(yb.max_abs_diff(&plan.forward(&b, &k).unwrap()) < 1e-12);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let x = Tensor::from_fn(&[2, 4, 4], |i| (i[0] * 16 + i[1] * 4 + i[2]) as f64);
        let fm = FeatureMap::new(x).unwrap();
        let mut delta = Tensor::zeros(&[7, 7]);
        delta.set(&[3, 3], 1.0);
        let out =
            depthwise_forward(&fm, &[kt(delta.clone(), true), kt(Tensor::zeros(&[7, 7]), true)], ConvMode::Centered)
                .unwrap();
        assert!(out.channel(0).max_abs_diff(&fm.channel(0)) < 1e-12);
        assert!(out.channel(1).data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn profile_fractions_partition() {
        let r1 = profile_conv(&[2, 8, 8], &[15, 15], 1).unwrap();
        let r3 = profile_conv(&[2, 8, 8], &[15, 15], 3).unwrap();
        let f = &r3.stage_fractions;
        assert!((f.total() - 1.0).abs() < 1e-9);
        assert_eq!(r1.output_checksum, r3.output_checksum);
        assert_eq!(r3.repetitions, 3);
    }
}
