//! Software mirror of the grouped-GEMM expert dataflow: permute tokens by
//! expert, quantize both operands, multiply, and scatter back to token order.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{round_trip, QuantError};
use crate::toylm::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    #[default]
    Exact,
    Mxfp8,
    Nvfp4Pt,
}

fn transpose(m: &Mat<f32>) -> Mat<f32> {
    let mut t = Mat::zeros(m.cols, m.rows);
    for r in 0..m.rows {
        for c in 0..m.cols {
            t.data[c * m.rows + r] = m.data[r * m.cols + c];
        }
    }
    t
}

/// `x` is `[tokens × d]`, `groups[e]` lists the tokens routed to expert `e`,
/// whose weight is `[d × h]`. Activations are quantized per token and
/// weights per output channel, both with blocks along `d`; products are
/// accumulated in f64. Tokens outside every group get zero rows.
pub fn moe_forward_reference(
    x: &Mat<f32>,
    groups: &[Vec<usize>],
    weights: &[Mat<f32>],
    precision: Precision,
) -> Result<Mat<f64>, QuantError> {
    if groups.len() != weights.len() {
        return Err(QuantError::Shape(format!(
            "{} groups for {} experts",
            groups.len(),
            weights.len()
        )));
    }
    let h = weights.first().map_or(0, |w| w.cols);
    if weights.iter().any(|w| w.rows != x.cols || w.cols != h) {
        return Err(QuantError::Shape(
            "expert weights do not match the activation width".into(),
        ));
    }
    let mut seen = vec![false; x.rows];
    for &t in groups.iter().flatten() {
        if t >= x.rows || std::mem::replace(&mut seen[t], true) {
            return Err(QuantError::Shape(format!("token {t} out of range or routed twice")));
        }
    }
    let mut out = Mat::zeros(x.rows, h);
    for (group, w) in groups.iter().zip(weights) {
        if group.is_empty() {
            continue;
        }
        let mut a = Mat::zeros(group.len(), x.cols);
        for (i, &t) in group.iter().enumerate() {
            a.row_mut(i).copy_from_slice(x.row(t));
        }
        let a = round_trip(&a, precision)?;
        let wt = round_trip(&transpose(w), precision)?;
        for (i, &t) in group.iter().enumerate() {
            let ar = a.row(i);
            for j in 0..h {
                let wr = wt.row(j);
                out.data[t * h + j] = ar.iter().zip(wr).map(|(p, q)| *p as f64 * *q as f64).sum();
            }
        }
    }
    Ok(out)
}

/// `max|ŷ − y| / max|y|`.
pub fn relative_error(approx: &Mat<f64>, exact: &Mat<f64>) -> f64 {
    let num = approx
        .data
        .iter()
        .zip(&exact.data)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let den = exact.data.iter().map(|v| v.abs()).fold(0.0, f64::max);
    num / den
}

pub fn random_normal(rows: usize, cols: usize, seed: u64) -> Mat<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mat {
        rows,
        cols,
        data: (0..rows * cols).map(|_| StandardNormal.sample(&mut rng)).collect(),
    }
}

/// Errors of both formats on a dense `n×n` N(0,1) product for one seed:
/// a single expert receiving every token.
pub fn format_errors(n: usize, seed: u64) -> Result<(f64, f64), QuantError> {
    let x = random_normal(n, n, seed);
    let w = random_normal(n, n, seed ^ 0x9e37_79b9_7f4a_7c15);
    let groups = vec![(0..n).collect::<Vec<_>>()];
    let ws = std::slice::from_ref(&w);
    let exact = moe_forward_reference(&x, &groups, ws, Precision::Exact)?;
    let mx = moe_forward_reference(&x, &groups, ws, Precision::Mxfp8)?;
    let nv = moe_forward_reference(&x, &groups, ws, Precision::Nvfp4Pt)?;
    Ok((relative_error(&mx, &exact), relative_error(&nv, &exact)))
}

/// Scans `seeds` and sets each threshold to the worst observed error plus
/// `margin` (relative).
pub fn calibrate(n: usize, seeds: std::ops::Range<u64>, margin: f64) -> Result<super::Calibration, QuantError> {
    let (mut mx, mut nv) = (0.0f64, 0.0f64);
    for s in seeds.clone() {
        let (a, b) = format_errors(n, s)?;
        mx = mx.max(a);
        nv = nv.max(b);
    }
    Ok(super::Calibration {
        size: n,
        seeds: (seeds.start, seeds.end),
        mxfp8_worst: mx,
        nvfp4_pt_worst: nv,
        mxfp8_threshold: mx * (1.0 + margin),
        nvfp4_pt_threshold: nv * (1.0 + margin),
    })
}
