//! Multidimensional complex FFT over row-major buffers, built on `rustfft`.

use std::sync::{Arc, Mutex, OnceLock};

use rustfft::{Fft, FftDirection, FftPlanner};

use crate::ssm::C64;

fn planner() -> &'static Mutex<FftPlanner<f64>> {
    static PLANNER: OnceLock<Mutex<FftPlanner<f64>>> = OnceLock::new();
    PLANNER.get_or_init(|| Mutex::new(FftPlanner::new()))
}

fn plan(len: usize, direction: FftDirection) -> Arc<dyn Fft<f64>> {
    let mut planner = planner().lock().unwrap_or_else(|p| p.into_inner());
    planner.plan_fft(len, direction)
}

/// Smallest integer `>= n` whose only prime factors are 2, 3 and 5.
pub fn next_fast_len(n: usize) -> usize {
    let mut m = n.max(1);
    loop {
        let mut r = m;
        for p in [2, 3, 5] {
            while r.is_multiple_of(p) {
                r /= p;
            }
        }
        if r == 1 {
            return m;
        }
        m += 1;
    }
}

/// Planned N-dimensional transform for a fixed shape.
#[derive(Clone)]
pub struct FftNd {
    shape: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("shape", &self.shape).finish()
    }
}

impl FftNd {
    pub fn new(shape: &[usize]) -> Self {
        assert!(shape.iter().all(|&n| n > 0), "FFT shape must be positive: {shape:?}");
        FftNd {
            shape: shape.to_vec(),
            forward: shape.iter().map(|&n| plan(n, FftDirection::Forward)).collect(),
            inverse: shape.iter().map(|&n| plan(n, FftDirection::Inverse)).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Unnormalized forward transform in place.
    pub fn forward(&self, data: &mut [C64]) {
        self.run(data, &self.forward);
    }

    /// Inverse transform in place, normalized so `inverse(forward(x)) == x`.
    pub fn inverse(&self, data: &mut [C64]) {
        self.run(data, &self.inverse);
        let scale = 1.0 / self.len() as f64;
        for z in data.iter_mut() {
            *z *= scale;
        }
    }

    fn run(&self, data: &mut [C64], plans: &[Arc<dyn Fft<f64>>]) {
        assert_eq!(data.len(), self.len(), "buffer does not match FFT shape");
        let dims = self.shape.len();
        let mut gather: Vec<C64> = Vec::new();
        for (axis, fft) in plans.iter().enumerate().take(dims) {
            let n = self.shape[axis];
            if n == 1 {
                continue;
            }
            let mut scratch = vec![C64::new(0.0, 0.0); fft.get_inplace_scratch_len()];
            let inner: usize = self.shape[axis + 1..].iter().product();
            if inner == 1 {
                fft.process_with_scratch(data, &mut scratch);
                continue;
            }
            let outer: usize = self.shape[..axis].iter().product();
            gather.resize(data.len(), C64::new(0.0, 0.0));
            // move `axis` innermost, transform, move it back
            for o in 0..outer {
                let base = o * n * inner;
                for i in 0..inner {
                    let dst = (o * inner + i) * n;
                    for j in 0..n {
                        gather[dst + j] = data[base + j * inner + i];
                    }
                }
            }
            fft.process_with_scratch(&mut gather, &mut scratch);
            for o in 0..outer {
                let base = o * n * inner;
                for i in 0..inner {
                    let src = (o * inner + i) * n;
                    for j in 0..n {
                        data[base + j * inner + i] = gather[src + j];
                    }
                }
            }
        }
    }
}
