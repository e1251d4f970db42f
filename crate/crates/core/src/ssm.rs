//! One-dimensional diagonal state-space models.
//!
//! A diagonal SSM `x' = diag(a) x + b u`, `y = <c, x>` has the convolution
//! kernel `K(t) = sum_n c_n b_n exp(t a_n)`: a `c`-weighted combination of
//! damped complex exponentials. This module builds those parameters,
//! discretizes them at a step size `delta`, samples the discrete kernel and
//! masks coefficients whose basis frequency would alias at that step size.
//!
//! Real-valued kernels: each stored state is the representative of a
//! conjugate pair, and every sampled kernel is `Re(sum_n ...)`. The pair's
//! factor of two is folded into `c`, so a single state with `a = 0`,
//! `b = c = 1` samples to the constant kernel `1`.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Below this `|delta * a|` the zero-order-hold input weight uses its series expansion.
const ZOH_SERIES_THRESHOLD: f64 = 1e-6;

/// State dimension used when a config does not specify one.
pub const DEFAULT_STATE_DIM: usize = 64;

/// Basis-function initialization families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitKind {
    /// `a_n = -1/2 + i pi n`: damped sinusoids at `n / 2` cycles per unit time.
    Fourier,
    /// `a_n = -1/2 + i (N/pi)(N/(2n+1) - 1)`, the diagonal stand-in for HiPPO-LegS.
    InverseDecay,
    /// `a_n = -1/2 + i pi n` with `b_n = 1`.
    LinearDecay,
    /// Linear frequency law with the index jittered by `U[0, 1)`.
    RandomLinear,
    /// Inverse frequency law with the index jittered by `U[0, 1)`.
    RandomInverse,
}

impl InitKind {
    pub const ALL: [InitKind; 5] = [
        InitKind::Fourier,
        InitKind::InverseDecay,
        InitKind::LinearDecay,
        InitKind::RandomLinear,
        InitKind::RandomInverse,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            InitKind::Fourier => "fourier",
            InitKind::InverseDecay => "inverse-decay",
            InitKind::LinearDecay => "linear-decay",
            InitKind::RandomLinear => "random-linear",
            InitKind::RandomInverse => "random-inverse",
        }
    }
}

impl fmt::Display for InitKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for InitKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fourier" => Ok(InitKind::Fourier),
            // legs has no exact diagonal form; the inverse law is its usual surrogate
            "inverse-decay" | "legs" => Ok(InitKind::InverseDecay),
            "linear-decay" | "linear" => Ok(InitKind::LinearDecay),
            "random-linear" => Ok(InitKind::RandomLinear),
            "random-inverse" | "random-inv" => Ok(InitKind::RandomInverse),
            other => Err(Error::config(format!("unsupported init kind {other:?}"))),
        }
    }
}

/// Rule turning continuous `(a, b)` into discrete `(a_bar, b_bar)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Discretization {
    DirectSample,
    Zoh,
    Bilinear,
    /// `K[k] = delta K(k delta)`, with tap 0 at half weight: the trapezoid rule
    /// for the continuous convolution integral, second-order accurate in
    /// `delta`. Bidirectional kernels add both half-weight taps at the center.
    Trapezoid,
}

impl Discretization {
    /// Weight of tap 0 relative to `b_bar a_bar^0`.
    pub fn center_weight(self) -> f64 {
        match self {
            Discretization::Trapezoid => 0.5,
            _ => 1.0,
        }
    }

    /// Whether the backward kernel's tap 0 also lands on the center of a
    /// bidirectional kernel.
    pub fn shares_center(self) -> bool {
        self == Discretization::Trapezoid
    }
}

impl FromStr for Discretization {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct-sample" | "direct" => Ok(Discretization::DirectSample),
            "zoh" => Ok(Discretization::Zoh),
            "bilinear" => Ok(Discretization::Bilinear),
            "trapezoid" => Ok(Discretization::Trapezoid),
            other => Err(Error::config(format!("unsupported discretization {other:?}"))),
        }
    }
}

/// Bandlimit cutoff `alpha`, a fraction of the Nyquist rate. `alpha = 1`
/// is the Nyquist cutoff for pure sinusoids; infinity disables masking.
///
/// Serialized as a JSON number, or the string `"inf"` for infinity.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct Cutoff(f64);

impl Cutoff {
    pub const INFINITE: Cutoff = Cutoff(f64::INFINITY);

    pub fn new(alpha: f64) -> Result<Self> {
        if alpha.is_nan() || alpha <= 0.0 {
            return Err(Error::config(format!("bandlimit alpha must be positive, got {alpha}")));
        }
        Ok(Cutoff(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_infinite(self) -> bool {
        self.0.is_infinite()
    }
}

impl Default for Cutoff {
    fn default() -> Self {
        Cutoff::INFINITE
    }
}

impl fmt::Display for Cutoff {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_infinite() {
            f.write_str("inf")
        } else {
            write!(f, "{}", self.0)
        }
    }
}

impl FromStr for Cutoff {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "inf" | "infinity" | "none" => Ok(Cutoff::INFINITE),
            other => other
                .parse::<f64>()
                .map_err(|_| Error::config(format!("invalid bandlimit alpha {s:?}")))
                .and_then(Cutoff::new),
        }
    }
}

impl Serialize for Cutoff {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        if self.is_infinite() {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Cutoff {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let parsed = match Raw::deserialize(deserializer)? {
            Raw::Num(v) => Cutoff::new(v),
            Raw::Text(s) => s.parse(),
        };
        parsed.map_err(serde::de::Error::custom)
    }
}

/// Continuous diagonal SSM for one axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagonalSSM {
    /// Diagonal of the state matrix, `Re(a_n) <= 0`.
    pub a: Vec<C64>,
    pub b: Vec<C64>,
    /// Linear-combination weights over the basis kernels.
    pub c: Vec<C64>,
    /// Time per sample.
    pub delta: f64,
    pub init_kind: InitKind,
    pub bidirectional: bool,
}

impl DiagonalSSM {
    pub fn new(
        a: Vec<C64>,
        b: Vec<C64>,
        c: Vec<C64>,
        delta: f64,
        init_kind: InitKind,
        bidirectional: bool,
    ) -> Result<Self> {
        let ssm = DiagonalSSM { a, b, c, delta, init_kind, bidirectional };
        ssm.validate()?;
        Ok(ssm)
    }

    pub fn state_size(&self) -> usize {
        self.a.len()
    }

    pub fn validate(&self) -> Result<()> {
        validate_basis(&self.a, &self.b, self.delta)?;
        if self.c.len() != self.a.len() {
            return Err(Error::domain(format!("c has length {} but the state size is {}", self.c.len(), self.a.len())));
        }
        Ok(())
    }

    /// Same SSM with a different step size.
    pub fn with_delta(&self, delta: f64) -> Result<Self> {
        let mut out = self.clone();
        out.delta = delta;
        out.validate()?;
        Ok(out)
    }
}

pub(crate) fn validate_basis(a: &[C64], b: &[C64], delta: f64) -> Result<()> {
    if a.is_empty() {
        return Err(Error::domain("state size must be at least 1"));
    }
    if b.len() != a.len() {
        return Err(Error::domain(format!("b has length {} but a has length {}", b.len(), a.len())));
    }
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::domain(format!("delta must be positive and finite, got {delta}")));
    }
    if let Some(n) = a.iter().position(|z| z.re.is_nan() || z.re > 0.0 || !z.im.is_finite()) {
        return Err(Error::domain(format!("unstable state {n}: Re(a) = {} > 0", a[n].re)));
    }
    Ok(())
}

/// Discrete transition and input weights for a fixed step size.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteRealization {
    pub a_bar: Vec<C64>,
    pub b_bar: Vec<C64>,
    pub method: Discretization,
    pub delta: f64,
}

impl DiscreteRealization {
    pub fn state_size(&self) -> usize {
        self.a_bar.len()
    }

    /// Basis values `w_k b_bar_n a_bar_n^k`, row-major `len x N`, where `w_k`
    /// is the method's center weight at `k = 0` and 1 elsewhere.
    pub fn basis(&self, len: usize) -> Vec<C64> {
        let n = self.state_size();
        let mut out = Vec::with_capacity(len * n);
        let mut pow = self.b_bar.clone();
        let w0 = self.method.center_weight();
        for k in 0..len {
            if k == 0 {
                out.extend(pow.iter().map(|p| p * w0));
            } else {
                out.extend_from_slice(&pow);
            }
            for (p, a) in pow.iter_mut().zip(&self.a_bar) {
                *p *= a;
            }
        }
        out
    }
}

/// Cutoff decision for each state.
#[derive(Clone, Debug, PartialEq)]
pub struct BandlimitPolicy {
    pub alpha: Cutoff,
    /// `true` where the coefficient is kept.
    pub mask: Vec<bool>,
}

impl BandlimitPolicy {
    pub fn kept(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Draws a diagonal SSM from one of the initialization families.
pub fn init_ssm(kind: InitKind, n: usize, delta: f64, seed: u64) -> Result<DiagonalSSM> {
    if n == 0 {
        return Err(Error::domain("state size N must be at least 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let nf = n as f64;
    let inverse_law = |idx: f64| (nf / PI) * (nf / (2.0 * idx + 1.0) - 1.0);

    let a: Vec<C64> = (0..n)
        .map(|i| {
            let idx = i as f64;
            let im = match kind {
                InitKind::Fourier | InitKind::LinearDecay => PI * idx,
                InitKind::InverseDecay => inverse_law(idx),
                InitKind::RandomLinear => PI * (idx + rng.random::<f64>()),
                InitKind::RandomInverse => inverse_law(idx + rng.random::<f64>()),
            };
            C64::new(-0.5, im)
        })
        .collect();
    let b = vec![C64::new(1.0, 0.0); n];
    let c = draw_coefficients(&mut rng, n);
    DiagonalSSM::new(a, b, c, delta, kind, true)
}

/// Unit-variance complex Gaussian coefficients scaled by `1/sqrt(n)`.
pub fn draw_coefficients<R: Rng>(rng: &mut R, n: usize) -> Vec<C64> {
    let scale = 1.0 / (2.0 * n as f64).sqrt();
    (0..n)
        .map(|_| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            C64::new(re * scale, im * scale)
        })
        .collect()
}

/// Discretizes an SSM at its own step size.
pub fn discretize(ssm: &DiagonalSSM, method: Discretization) -> Result<DiscreteRealization> {
    discretize_basis(&ssm.a, &ssm.b, ssm.delta, method)
}

pub(crate) fn discretize_basis(
    a: &[C64],
    b: &[C64],
    delta: f64,
    method: Discretization,
) -> Result<DiscreteRealization> {
    validate_basis(a, b, delta)?;
    discretize_raw(a, b, delta, method)
}

fn discretize_raw(a: &[C64], b: &[C64], delta: f64, method: Discretization) -> Result<DiscreteRealization> {
    let mut a_bar = Vec::with_capacity(a.len());
    let mut b_bar = Vec::with_capacity(a.len());
    for (n, (&an, &bn)) in a.iter().zip(b).enumerate() {
        let da = an * delta;
        let (ab, bb) = match method {
            Discretization::DirectSample => (da.exp(), bn),
            Discretization::Trapezoid => (da.exp(), bn * delta),
            Discretization::Zoh => {
                let ab = da.exp();
                let bb = if da.norm() < ZOH_SERIES_THRESHOLD {
                    // (exp(da) - 1)/a = delta (1 + da/2 + da^2/6 + ...)
                    bn * delta * (1.0 + da / 2.0 + da * da / 6.0)
                } else {
                    (ab - 1.0) / an * bn
                };
                (ab, bb)
            }
            Discretization::Bilinear => {
                let denom = 1.0 - da / 2.0;
                if denom.norm() < 1e-12 {
                    return Err(Error::numerical(format!("bilinear pole at state {n}: delta * a = {da}")));
                }
                ((1.0 + da / 2.0) / denom, bn * delta / denom)
            }
        };
        a_bar.push(ab);
        b_bar.push(bb);
    }
    Ok(DiscreteRealization { a_bar, b_bar, method, delta })
}

/// Derivatives of `a_bar` and `b_bar` with respect to `delta`.
pub(crate) fn discretization_delta_derivatives(
    a: &[C64],
    b: &[C64],
    real: &DiscreteRealization,
) -> (Vec<C64>, Vec<C64>) {
    let delta = real.delta;
    let mut da_bar = Vec::with_capacity(a.len());
    let mut db_bar = Vec::with_capacity(a.len());
    for n in 0..a.len() {
        let (an, bn, abar) = (a[n], b[n], real.a_bar[n]);
        match real.method {
            Discretization::DirectSample => {
                da_bar.push(an * abar);
                db_bar.push(C64::new(0.0, 0.0));
            }
            Discretization::Zoh => {
                da_bar.push(an * abar);
                db_bar.push(abar * bn);
            }
            Discretization::Trapezoid => {
                da_bar.push(an * abar);
                db_bar.push(bn);
            }
            Discretization::Bilinear => {
                let denom = 1.0 - an * delta / 2.0;
                let d2 = denom * denom;
                da_bar.push(an / d2);
                db_bar.push(bn / d2);
            }
        }
    }
    (da_bar, db_bar)
}

/// Samples `K[k] = w_k Re(sum_n c_n b_bar_n a_bar_n^k)` for `k < len`; `w_0` is
/// the method's center weight, all other weights are 1.
pub fn sample_kernel(real: &DiscreteRealization, c: &[C64], len: usize) -> Result<Vec<f64>> {
    if len == 0 {
        return Err(Error::domain("kernel length must be at least 1"));
    }
    if c.len() != real.state_size() {
        return Err(Error::domain(format!("c has length {} but the state size is {}", c.len(), real.state_size())));
    }
    let mut pow: Vec<C64> = real.b_bar.iter().zip(c).map(|(b, c)| b * c).collect();
    let mut out = Vec::with_capacity(len);
    for k in 0..len {
        let value: f64 = pow.iter().map(|z| z.re).sum();
        if !value.is_finite() {
            let n = pow.iter().position(|z| !z.re.is_finite()).unwrap_or(0);
            return Err(Error::numerical(format!(
                "non-finite kernel sample at k = {k} from state index {n} (|a_bar| = {})",
                real.a_bar[n].norm()
            )));
        }
        out.push(if k == 0 { value * real.method.center_weight() } else { value });
        for (p, a) in pow.iter_mut().zip(&real.a_bar) {
            *p *= a;
        }
    }
    Ok(out)
}

/// Keep state `n` iff its frequency in cycles per sample, `|Im a_n| delta / 2pi`,
/// is at most `alpha / 2`.
pub fn bandlimit_mask(a: &[C64], delta: f64, alpha: Cutoff) -> Vec<bool> {
    if alpha.is_infinite() {
        return vec![true; a.len()];
    }
    let half = alpha.value() / 2.0;
    a.iter().map(|z| z.im.abs() / (2.0 * PI) * delta <= half).collect()
}

/// Zeroes the coefficients of basis functions above the cutoff. The input is not modified.
pub fn apply_bandlimit(ssm: &DiagonalSSM, alpha: Cutoff) -> (DiagonalSSM, BandlimitPolicy) {
    let mask = bandlimit_mask(&ssm.a, ssm.delta, alpha);
    let mut out = ssm.clone();
    apply_mask(&mut out.c, &mask);
    (out, BandlimitPolicy { alpha, mask })
}

pub(crate) fn apply_mask(c: &mut [C64], mask: &[bool]) {
    for (ci, &keep) in c.iter_mut().zip(mask) {
        if !keep {
            *ci = C64::new(0.0, 0.0);
        }
    }
}

/// Noncausal kernel of length `2 len - 1` centered at index `len - 1`.
///
/// The right half (including the center) is the forward kernel, the left
/// half the backward kernel mirrored; both share `a_bar`, `b_bar`.
pub fn bidirectional_kernel(
    real: &DiscreteRealization,
    c_forward: &[C64],
    c_backward: &[C64],
    len: usize,
) -> Result<Vec<f64>> {
    let fwd = sample_kernel(real, c_forward, len)?;
    let bwd = sample_kernel(real, c_backward, len)?;
    Ok(join_bidirectional(&fwd, &bwd, real.method))
}

pub(crate) fn join_bidirectional(fwd: &[f64], bwd: &[f64], method: Discretization) -> Vec<f64> {
    let len = fwd.len();
    let mut out = vec![0.0; 2 * len - 1];
    out[len - 1..].copy_from_slice(fwd);
    if method.shares_center() {
        out[len - 1] += bwd[0];
    }
    for k in 1..len {
        out[len - 1 - k] = bwd[k];
    }
    out
}
