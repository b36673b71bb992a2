//! Monte Carlo KL divergence estimators and the synthetic Gaussian study.
//!
//! With samples `x ~ q` and `r(x) = p(x)/q(x)`:
//!
//! * `K1 = -log r` (unbiased, variance `Var(log r)`),
//! * `K2 = (log r)^2 / 2` (biased, low variance),
//! * `K3 = (r - 1) - log r` (unbiased, nonnegative, variance explodes as
//!   `p` and `q` separate).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Exec};

#[derive(Debug, Error, PartialEq)]
pub enum KlError {
    #[error("need at least 2 samples, got {0}")]
    TooFewSamples(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimatorKind {
    #[default]
    K1,
    K2,
    K3,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 3] = [EstimatorKind::K1, EstimatorKind::K2, EstimatorKind::K3];

    /// Per-sample estimator value from `log r`.
    #[inline]
    pub fn value(self, log_ratio: f64) -> f64 {
        match self {
            EstimatorKind::K1 => -log_ratio,
            EstimatorKind::K2 => 0.5 * log_ratio * log_ratio,
            EstimatorKind::K3 => log_ratio.exp_m1() - log_ratio,
        }
    }

    /// Derivative of the estimator value with respect to `log r`.
    #[inline]
    pub fn dvalue(self, log_ratio: f64) -> f64 {
        match self {
            EstimatorKind::K1 => -1.0,
            EstimatorKind::K2 => log_ratio,
            EstimatorKind::K3 => log_ratio.exp_m1(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::K1 => "k1",
            EstimatorKind::K2 => "k2",
            EstimatorKind::K3 => "k3",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimateStats {
    pub n: usize,
    pub mean: f64,
    /// Per-sample (unbiased) variance of the estimator values.
    pub variance: f64,
    pub std_error: f64,
}

/// Streaming mean / M2 accumulator with an order-fixed merge.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, v: f64) {
        self.n += 1;
        let d = v - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (v - self.mean);
    }

    fn merge(self, o: Moments) -> Moments {
        if self.n == 0 {
            return o;
        }
        if o.n == 0 {
            return self;
        }
        let n = self.n + o.n;
        let d = o.mean - self.mean;
        Moments {
            n,
            mean: self.mean + d * (o.n as f64 / n as f64),
            m2: self.m2 + o.m2 + d * d * (self.n as f64 * o.n as f64 / n as f64),
        }
    }

    fn stats(self) -> EstimateStats {
        let variance = if self.n > 1 {
            (self.m2 / (self.n - 1) as f64).max(0.0)
        } else {
            0.0
        };
        EstimateStats {
            n: self.n as usize,
            mean: self.mean,
            variance,
            std_error: (variance / self.n as f64).sqrt(),
        }
    }
}

pub fn estimate_kl(log_ratios: &[f64], kind: EstimatorKind) -> Result<EstimateStats, KlError> {
    if log_ratios.len() < 2 {
        return Err(KlError::TooFewSamples(log_ratios.len()));
    }
    let mut m = Moments::default();
    for &lr in log_ratios {
        m.push(kind.value(lr));
    }
    Ok(m.stats())
}

/// `log p(x) - log q(x)` for unit-variance Gaussians with means `mu_p`, `mu_q`.
pub fn gaussian_log_ratio(x: f64, mu_p: f64, mu_q: f64) -> f64 {
    (mu_p - mu_q) * x + (mu_q * mu_q - mu_p * mu_p) / 2.0
}

/// SplitMix64 finalizer.
#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based standard normal draw keyed by `(seed, stream, index)`.
///
/// Each key is hashed independently, so any subset of draws can be produced
/// in any order with identical results.
pub fn counter_normal(seed: u64, stream: u64, index: u64) -> f64 {
    let base = mix64(seed ^ mix64(stream ^ 0xA076_1D64_78BD_642F));
    let a = mix64(base ^ index.wrapping_mul(2));
    let b = mix64(base ^ index.wrapping_mul(2).wrapping_add(1));
    // (0, 1] to keep ln finite
    let u1 = ((a >> 11) as f64 + 1.0) * (1.0 / (1u64 << 53) as f64);
    let u2 = (b >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub delta: f64,
    pub estimator: EstimatorKind,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
    pub analytic_kl: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyTable {
    pub n: usize,
    pub seed: u64,
    pub rows: Vec<StudyRow>,
}

impl StudyTable {
    pub fn row(&self, delta: f64, kind: EstimatorKind) -> Option<&StudyRow> {
        self.rows.iter().find(|r| r.delta == delta && r.estimator == kind)
    }

    /// CSV with columns `delta,estimator,mean,variance,analytic_kl`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("delta,estimator,mean,variance,analytic_kl\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.delta,
                r.estimator.name(),
                r.mean,
                r.variance,
                r.analytic_kl
            ));
        }
        out
    }
}

pub const DEFAULT_DELTAS: [f64; 5] = [0.1, 0.5, 1.0, 2.0, 3.0];
const STUDY_CHUNK: usize = 1 << 14;

/// Estimates `KL(q || p)` with `q = N(0,1)`, `p = N(delta,1)` for each delta.
///
/// Samples are drawn in fixed-size chunks that are merged in chunk order, so
/// the table is bitwise identical for any thread count.
pub fn kl_study(deltas: &[f64], n: usize, seed: u64, exec: Exec) -> StudyTable {
    let mut rows = Vec::with_capacity(deltas.len() * 3);
    for &delta in deltas {
        let stream = delta.to_bits();
        let chunks = n.div_ceil(STUDY_CHUNK);
        let partial = exec::map_range(exec, chunks, |c| {
            let mut m = [Moments::default(); 3];
            let start = c * STUDY_CHUNK;
            let end = (start + STUDY_CHUNK).min(n);
            for i in start..end {
                let x = counter_normal(seed, stream, i as u64);
                let lr = gaussian_log_ratio(x, delta, 0.0);
                for (acc, kind) in m.iter_mut().zip(EstimatorKind::ALL) {
                    acc.push(kind.value(lr));
                }
            }
            m
        });
        let mut total = [Moments::default(); 3];
        for m in partial {
            for (t, p) in total.iter_mut().zip(m) {
                *t = t.merge(p);
            }
        }
        for (m, kind) in total.into_iter().zip(EstimatorKind::ALL) {
            let s = m.stats();
            rows.push(StudyRow {
                delta,
                estimator: kind,
                mean: s.mean,
                variance: s.variance,
                std_error: s.std_error,
                analytic_kl: delta * delta / 2.0,
            });
        }
    }
    StudyTable { n, seed, rows }
}
