//! One-dimensional least-mean-square problem `E[½(X·Q(w) − X·w*)²]`,
//! optimized either with the straight-through estimator or with pseudo
//! quantization noise.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Rng, Tensor};
use crate::diffq::NoiseKind;
use crate::error::{Error, Result};
use crate::quant::{delta, uniform_quantize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LmsMethod {
    Ste,
    Pqn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LmsConfig {
    pub w_star: f64,
    pub bits: u32,
    pub lr: f64,
    pub steps: usize,
    pub method: LmsMethod,
    pub noise: NoiseKind,
    /// Second moment of `X`.
    pub sigma2: f64,
    /// Draw `X ~ N(0, σ²)` each step instead of using the expected gradient.
    pub stochastic_x: bool,
    pub seed: u64,
}

impl Default for LmsConfig {
    fn default() -> Self {
        Self {
            w_star: 0.11,
            bits: 4,
            lr: 0.5,
            steps: 1000,
            method: LmsMethod::Ste,
            noise: NoiseKind::Uniform,
            sigma2: 1.0,
            stochastic_x: false,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TrajectoryPoint {
    pub n: usize,
    pub w: f64,
    pub q_w: f64,
    pub grad: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub points: Vec<TrajectoryPoint>,
    pub warnings: Vec<String>,
}

impl Trajectory {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["n", "w", "q_w", "grad"]).map_err(csv_err)?;
        for p in &self.points {
            w.write_record([p.n.to_string(), p.w.to_string(), p.q_w.to_string(), p.grad.to_string()])
                .map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }
}

pub(crate) fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::invalid(format!("csv: {other:?}")),
    }
}

fn quantize_scalar(w: f64, bits: u32) -> Result<f64> {
    Ok(uniform_quantize(&Tensor::scalar(w), bits)?.reconstruct().item())
}

/// Runs `steps` SGD updates from `w_0 = w*`, clamping iterates to `[0, 1]`.
/// The trajectory holds `steps + 1` points; the gradient stored at the last
/// point is the one the next update would use.
pub fn run_lms(cfg: &LmsConfig) -> Result<Trajectory> {
    if !(0.0..=1.0).contains(&cfg.w_star) {
        return Err(Error::invalid(format!("w_star {} outside [0, 1]", cfg.w_star)));
    }
    if !(cfg.lr >= 0.0) || !(cfg.sigma2 >= 0.0) {
        return Err(Error::invalid("lr and sigma2 must be non-negative"));
    }
    let step_delta = delta(cfg.bits as f64)?;
    let mut warnings = Vec::new();
    if cfg.method == LmsMethod::Ste && quantize_scalar(cfg.w_star, cfg.bits)? == cfg.w_star {
        warnings.push(format!(
            "w_star {} is a grid point at {} bits; no oscillation expected",
            cfg.w_star, cfg.bits
        ));
    }

    let mut rng = Rng::new(cfg.seed);
    let mut w = cfg.w_star;
    let mut points = Vec::with_capacity(cfg.steps + 1);
    for n in 0..=cfg.steps {
        let q_w = quantize_scalar(w, cfg.bits)?;
        let x2 = if cfg.stochastic_x {
            let x = cfg.sigma2.sqrt() * rng.gaussian();
            x * x
        } else {
            cfg.sigma2
        };
        let grad = match cfg.method {
            LmsMethod::Ste => x2 * (q_w - cfg.w_star),
            LmsMethod::Pqn => {
                let eps = match cfg.noise {
                    NoiseKind::Uniform => rng.uniform_pm1(),
                    NoiseKind::Gaussian => rng.gaussian(),
                };
                x2 * (w + step_delta / 2.0 * eps - cfg.w_star)
            }
        };
        points.push(TrajectoryPoint { n, w, q_w, grad });
        w = (w - cfg.lr * grad).clamp(0.0, 1.0);
    }
    Ok(Trajectory { points, warnings })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Oscillation {
    pub oscillating: bool,
    /// Distinct quantized levels visited in the tail, ascending.
    pub levels: Vec<f64>,
}

/// Oscillating iff the last `tail` quantized values take exactly two
/// levels, each at least 10% of the time.
pub fn detect_oscillation(traj: &Trajectory, tail: usize) -> Result<Oscillation> {
    if tail == 0 || tail > traj.points.len() {
        return Err(Error::invalid(format!(
            "tail {tail} must be in 1..={}",
            traj.points.len()
        )));
    }
    let mut counts: Vec<(f64, usize)> = Vec::new();
    for p in &traj.points[traj.points.len() - tail..] {
        match counts.iter_mut().find(|(v, _)| v.to_bits() == p.q_w.to_bits()) {
            Some((_, c)) => *c += 1,
            None => counts.push((p.q_w, 1)),
        }
    }
    counts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let oscillating = counts.len() == 2 && counts.iter().all(|&(_, c)| c as f64 >= 0.1 * tail as f64);
    Ok(Oscillation {
        oscillating,
        levels: counts.into_iter().map(|(v, _)| v).collect(),
    })
}

/// Monte-Carlo mean and standard error of the noisy gradient
/// `σ²(w + (Δ/2)ε − w*)`.
pub fn mc_gradient_estimate(
    w: f64,
    w_star: f64,
    bits: f64,
    sigma2: f64,
    noise: NoiseKind,
    n_samples: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    if n_samples < 1000 {
        return Err(Error::invalid(format!("need at least 1000 samples, got {n_samples}")));
    }
    let half_step = delta(bits)? / 2.0;
    let eps = noise.sample(&mut Rng::new(seed), &[n_samples]);
    let samples: Vec<f64> = eps.data().iter().map(|e| sigma2 * (w + half_step * e - w_star)).collect();
    let n = n_samples as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = samples.iter().map(|g| (g - mean) * (g - mean)).sum::<f64>() / (n - 1.0);
    Ok((mean, (var / n).sqrt()))
}
