//! Accuracy and cost of complex-step versus forward-difference derivatives on
//! `f(x) = (eˣ + x³ + x)/(x + 1)` over random `x ∈ [0, 1]`.

use std::hint::black_box;
use std::time::{Duration, Instant};

use num_traits::Float;
use rand::rngs::StdRng;
use rand::{RngExt, SeedableRng};

use crate::csfd::Complex;

/// Precision the benchmark arithmetic runs in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Double,
    Single,
}

impl Precision {
    pub fn name(self) -> &'static str {
        match self {
            Precision::Double => "f64",
            Precision::Single => "f32",
        }
    }
}

#[derive(Debug, Clone)]
pub struct DiffcheckConfig {
    pub samples: usize,
    pub h: f64,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for DiffcheckConfig {
    fn default() -> Self {
        Self { samples: 1_000_000, h: 1e-8, seed: 0, precision: Precision::Double }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodStats {
    pub time: Duration,
    pub max_rel_error: f64,
    pub mean_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiffcheckReport {
    pub precision: Precision,
    pub samples: usize,
    pub h: f64,
    pub forward_difference: MethodStats,
    pub complex_step: MethodStats,
}

impl DiffcheckReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,precision,samples,h,time_ms,max_rel_error,mean_rel_error\n");
        for (name, s) in [("fd", &self.forward_difference), ("csfd", &self.complex_step)] {
            out.push_str(&format!(
                "{},{},{},{:e},{:.3},{:e},{:e}\n",
                name,
                self.precision.name(),
                self.samples,
                self.h,
                s.time.as_secs_f64() * 1e3,
                s.max_rel_error,
                s.mean_rel_error
            ));
        }
        out
    }
}

pub fn test_function<T: Float>(x: T) -> T {
    (x.exp() + x * x * x + x) / (x + T::one())
}

pub fn test_function_complex<T: Float>(x: Complex<T>) -> Complex<T> {
    (x.exp() + x * x * x + x) / (x + T::one())
}

/// Analytic derivative in double precision, the reference for both methods.
pub fn test_derivative(x: f64) -> f64 {
    let e = x.exp();
    let num = e + x * x * x + x;
    let dnum = e + 3.0 * x * x + 1.0;
    (dnum * (x + 1.0) - num) / ((x + 1.0) * (x + 1.0))
}

pub fn run(cfg: &DiffcheckConfig) -> DiffcheckReport {
    match cfg.precision {
        Precision::Double => run_typed::<f64>(cfg),
        Precision::Single => run_typed::<f32>(cfg),
    }
}

fn run_typed<T: Float>(cfg: &DiffcheckConfig) -> DiffcheckReport {
    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let xs: Vec<f64> = (0..cfg.samples).map(|_| rng.random_range(0.0..1.0)).collect();
    let h = T::from(cfg.h).unwrap();

    let mut fd = vec![0.0; xs.len()];
    let start = Instant::now();
    for (x, out) in xs.iter().zip(fd.iter_mut()) {
        let x = black_box(T::from(*x).unwrap());
        let d = (test_function(x + h) - test_function(x)) / h;
        *out = black_box(d).to_f64().unwrap();
    }
    let fd_time = start.elapsed();

    let mut cs = vec![0.0; xs.len()];
    let start = Instant::now();
    for (x, out) in xs.iter().zip(cs.iter_mut()) {
        let x = black_box(T::from(*x).unwrap());
        let z = test_function_complex(Complex::new(x, h));
        *out = black_box(z.im / h).to_f64().unwrap();
    }
    let cs_time = start.elapsed();

    DiffcheckReport {
        precision: cfg.precision,
        samples: cfg.samples,
        h: cfg.h,
        forward_difference: stats(&xs, &fd, fd_time),
        complex_step: stats(&xs, &cs, cs_time),
    }
}

fn stats(xs: &[f64], values: &[f64], time: Duration) -> MethodStats {
    let mut max: f64 = 0.0;
    let mut sum = 0.0;
    for (x, v) in xs.iter().zip(values) {
        let exact = test_derivative(*x);
        let e = ((v - exact) / exact).abs();
        max = max.max(e);
        sum += e;
    }
    MethodStats { time, max_rel_error: max, mean_rel_error: sum / xs.len().max(1) as f64 }
}
