//! Block-scaled low-precision formats: MXFP8 (E4M3 codes, one E8M0 scale per
//! 32 elements) and NVFP4 with per-token scales (E2M1 codes, one E4M3 scale
//! per 16 elements, one f32 scale per row). Rows are quantized independently,
//! so results never depend on batch composition or on later rows.

pub mod codec;
mod golden;
mod moe;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::exec::{self, Exec};
use crate::toylm::Mat;
use codec::*;

pub use golden::{golden_input, read_golden, verify_golden, write_golden, Calibration, GoldenFixture, GoldenReport};
pub use moe::{calibrate, format_errors, moe_forward_reference, random_normal, relative_error, Precision};

pub const MXFP8_BLOCK: usize = 32;
pub const NVFP4_BLOCK: usize = 16;
/// `E4M3_MAX · E2M1_MAX`: the token scale maps the row maximum here.
pub const NVFP4_TOKEN_RANGE: f32 = 2688.0;

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("non-finite input at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("invalid encoding: {0}")]
    Encoding(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("fixture: {0}")]
    Fixture(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mxfp8Tensor {
    pub rows: usize,
    /// Logical width; storage is padded to a whole number of blocks.
    pub cols: usize,
    /// One E4M3 byte per (padded) element, row-major.
    pub codes: Vec<u8>,
    /// One E8M0 byte per block, row-major.
    pub scales: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Nvfp4Tensor {
    pub rows: usize,
    pub cols: usize,
    /// E2M1 nibbles, two per byte (even element in the low nibble).
    pub codes: Vec<u8>,
    /// One E4M3 byte per 16-element block.
    pub block_scales: Vec<u8>,
    pub token_scales: Vec<f32>,
}

impl Nvfp4Tensor {
    pub fn code(&self, row: usize, col: usize) -> u8 {
        let i = row * padded(self.cols, NVFP4_BLOCK) + col;
        (self.codes[i / 2] >> ((i % 2) * 4)) & 0x0f
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "format", rename_all = "snake_case")]
pub enum QuantizedTensor {
    Mxfp8(Mxfp8Tensor),
    Nvfp4Pt(Nvfp4Tensor),
}

pub(crate) fn padded(cols: usize, block: usize) -> usize {
    cols.div_ceil(block) * block
}

fn check_finite(x: &Mat<f32>) -> Result<(), QuantError> {
    match x.data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(QuantError::NonFinite {
            row: i / x.cols.max(1),
            col: i % x.cols.max(1),
        }),
        None => Ok(()),
    }
}

fn padded_row(x: &Mat<f32>, r: usize, width: usize) -> Vec<f32> {
    let mut row = x.row(r).to_vec();
    row.resize(width, 0.0);
    row
}

fn amax(v: &[f32]) -> f32 {
    v.iter().fold(0.0f32, |m, x| m.max(x.abs()))
}

/// Codes and scale byte of one MXFP8 block.
fn mxfp8_block(block: &[f32]) -> (Vec<u8>, u8) {
    let a = amax(block);
    if a == 0.0 {
        return (vec![0; block.len()], encode_e8m0(0));
    }
    let byte = encode_e8m0(floor_log2(a as f64) - 8);
    let e = decode_e8m0(byte).expect("clamped exponent");
    let codes: Vec<u8> = block.iter().map(|&v| encode_e4m3(v as f64 * pow2(-e))).collect();
    if codes.iter().all(|&c| c == 0) {
        // everything underflowed: canonical zero block
        return (codes, encode_e8m0(0));
    }
    (codes, byte)
}

pub fn quantize_mxfp8(x: &Mat<f32>) -> Result<Mxfp8Tensor, QuantError> {
    quantize_mxfp8_with(x, Exec::default())
}

pub fn quantize_mxfp8_with(x: &Mat<f32>, exec: Exec) -> Result<Mxfp8Tensor, QuantError> {
    check_finite(x)?;
    let width = padded(x.cols, MXFP8_BLOCK);
    let rows = exec::map_range(exec, x.rows, |r| {
        let row = padded_row(x, r, width);
        let mut codes = Vec::with_capacity(width);
        let mut scales = Vec::with_capacity(width / MXFP8_BLOCK);
        for block in row.chunks_exact(MXFP8_BLOCK) {
            let (c, s) = mxfp8_block(block);
            codes.extend(c);
            scales.push(s);
        }
        (codes, scales)
    });
    let (codes, scales): (Vec<Vec<u8>>, Vec<Vec<u8>>) = rows.into_iter().unzip();
    Ok(Mxfp8Tensor {
        rows: x.rows,
        cols: x.cols,
        codes: codes.concat(),
        scales: scales.concat(),
    })
}

pub fn dequantize_mxfp8(q: &Mxfp8Tensor) -> Result<Mat<f32>, QuantError> {
    let width = padded(q.cols, MXFP8_BLOCK);
    let blocks = width / MXFP8_BLOCK;
    if q.codes.len() != q.rows * width || q.scales.len() != q.rows * blocks {
        return Err(QuantError::Shape("MXFP8 storage does not match its shape".into()));
    }
    let mut out = Mat::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        for c in 0..q.cols {
            let s = q.scales[r * blocks + c / MXFP8_BLOCK];
            let e = decode_e8m0(s).ok_or_else(|| QuantError::Encoding("E8M0 byte 255".into()))?;
            let code = q.codes[r * width + c];
            let v = decode_e4m3(code).ok_or_else(|| QuantError::Encoding(format!("E4M3 NaN code {code:#04x}")))?;
            out.data[r * q.cols + c] = (v * pow2(e)) as f32;
        }
    }
    Ok(out)
}

/// Token scale of a row: maps the row maximum onto the largest code·scale.
fn token_scale(row_amax: f32) -> f32 {
    let s = row_amax / NVFP4_TOKEN_RANGE;
    // zero rows, and rows so small the scale underflows, quantize to zero
    if s == 0.0 {
        1.0
    } else {
        s
    }
}

fn nvfp4_block(block: &[f32], s: f32) -> (Vec<u8>, u8) {
    let zero = (vec![0; block.len()], 0u8);
    let b = encode_e4m3((amax(block) / (6.0 * s)) as f64);
    let bd = decode_e4m3(b).expect("finite code") as f32;
    let unit = s * bd;
    if unit == 0.0 {
        return zero;
    }
    let codes: Vec<u8> = block.iter().map(|&v| encode_e2m1((v / unit) as f64)).collect();
    if codes.iter().all(|&c| c == 0) {
        return zero;
    }
    (codes, b)
}

pub fn quantize_nvfp4_pt(x: &Mat<f32>) -> Result<Nvfp4Tensor, QuantError> {
    quantize_nvfp4_pt_with(x, Exec::default())
}

pub fn quantize_nvfp4_pt_with(x: &Mat<f32>, exec: Exec) -> Result<Nvfp4Tensor, QuantError> {
    check_finite(x)?;
    let width = padded(x.cols, NVFP4_BLOCK);
    let rows = exec::map_range(exec, x.rows, |r| {
        let row = padded_row(x, r, width);
        let s = token_scale(amax(&row));
        let mut nibbles = Vec::with_capacity(width);
        let mut scales = Vec::with_capacity(width / NVFP4_BLOCK);
        for block in row.chunks_exact(NVFP4_BLOCK) {
            let (c, b) = nvfp4_block(block, s);
            nibbles.extend(c);
            scales.push(b);
        }
        (nibbles, scales, s)
    });
    let mut codes = Vec::with_capacity(x.rows * width / 2);
    let mut block_scales = Vec::new();
    let mut token_scales = Vec::with_capacity(x.rows);
    for (nibbles, scales, s) in rows {
        // widths are multiples of 16, so rows never share a byte
        codes.extend(nibbles.chunks_exact(2).map(|p| p[0] | (p[1] << 4)));
        block_scales.extend(scales);
        token_scales.push(s);
    }
    Ok(Nvfp4Tensor {
        rows: x.rows,
        cols: x.cols,
        codes,
        block_scales,
        token_scales,
    })
}

pub fn dequantize_nvfp4_pt(q: &Nvfp4Tensor) -> Result<Mat<f32>, QuantError> {
    let width = padded(q.cols, NVFP4_BLOCK);
    let blocks = width / NVFP4_BLOCK;
    if q.codes.len() * 2 != q.rows * width || q.block_scales.len() != q.rows * blocks || q.token_scales.len() != q.rows
    {
        return Err(QuantError::Shape("NVFP4 storage does not match its shape".into()));
    }
    let mut out = Mat::zeros(q.rows, q.cols);
    for r in 0..q.rows {
        let s = q.token_scales[r];
        if !s.is_finite() {
            return Err(QuantError::Encoding("non-finite token scale".into()));
        }
        for c in 0..q.cols {
            let b = q.block_scales[r * blocks + c / NVFP4_BLOCK];
            let bd =
                decode_e4m3(b).ok_or_else(|| QuantError::Encoding(format!("E4M3 NaN block scale {b:#04x}")))? as f32;
            let code = decode_e2m1(q.code(r, c)) as f32;
            out.data[r * q.cols + c] = code * bd * s;
        }
    }
    Ok(out)
}

pub fn quantize(x: &Mat<f32>, precision: Precision) -> Result<Option<QuantizedTensor>, QuantError> {
    Ok(match precision {
        Precision::Exact => None,
        Precision::Mxfp8 => Some(QuantizedTensor::Mxfp8(quantize_mxfp8(x)?)),
        Precision::Nvfp4Pt => Some(QuantizedTensor::Nvfp4Pt(quantize_nvfp4_pt(x)?)),
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Result<Mat<f32>, QuantError> {
    match q {
        QuantizedTensor::Mxfp8(t) => dequantize_mxfp8(t),
        QuantizedTensor::Nvfp4Pt(t) => dequantize_nvfp4_pt(t),
    }
}

/// Quantize then dequantize; the identity for `Exact`.
pub fn round_trip(x: &Mat<f32>, precision: Precision) -> Result<Mat<f32>, QuantError> {
    match quantize(x, precision)? {
        None => Ok(x.clone()),
        Some(q) => dequantize(&q),
    }
}
