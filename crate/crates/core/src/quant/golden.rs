//! Golden-tensor fixtures: `u32` LE header length, a JSON header (format,
//! shape, section sizes, SHA-256 of the payload), then the raw sections —
//! input f32 values, codes, scales and (NVFP4) token scales.

use serde::{Deserialize, Serialize};

use super::*;
use crate::toylm::sha256_hex;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub size: usize,
    pub seeds: (u64, u64),
    pub mxfp8_worst: f64,
    pub nvfp4_pt_worst: f64,
    pub mxfp8_threshold: f64,
    pub nvfp4_pt_threshold: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GoldenFixture {
    pub input: Mat<f32>,
    pub tensor: QuantizedTensor,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Section {
    name: String,
    bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    rows: usize,
    cols: usize,
    sections: Vec<Section>,
    digest: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GoldenReport {
    pub format: String,
    pub rows: usize,
    pub cols: usize,
    pub codes_match: bool,
    pub scales_match: bool,
    pub dequantized_match: bool,
}

impl GoldenReport {
    pub fn ok(&self) -> bool {
        self.codes_match && self.scales_match && self.dequantized_match
    }
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f32s(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

/// Hand-picked edge cases plus Gaussian noise; 40 columns so both formats
/// exercise padding.
pub fn golden_input() -> Mat<f32> {
    let cols = 40;
    let mut rows: Vec<Vec<f32>> = Vec::new();
    let mut special = vec![
        0.0, 448.0, 1.0, 2.5, -3.0, 1e-40, 1e-3, -1e30, 6.0, 2688.0, 0.1, -0.5, 500.0, 3.5, 1.0e-7, 7.0,
    ];
    special.resize(cols, 0.25);
    rows.push(special);
    rows.push(vec![1.0; cols]);
    rows.push(vec![0.0; cols]);
    rows.push((0..cols).map(|i| if i % 16 == 0 { 6.0 } else { 2.5 }).collect());
    let noise = super::random_normal(2, cols, 7);
    rows.extend(noise.data.chunks(cols).map(|r| r.to_vec()));
    Mat {
        rows: rows.len(),
        cols,
        data: rows.concat(),
    }
}

pub fn write_golden(f: &GoldenFixture) -> Vec<u8> {
    let mut sections: Vec<(&str, Vec<u8>)> = vec![("input", f32_bytes(&f.input.data))];
    let format = match &f.tensor {
        QuantizedTensor::Mxfp8(t) => {
            sections.push(("codes", t.codes.clone()));
            sections.push(("scales", t.scales.clone()));
            "mxfp8"
        }
        QuantizedTensor::Nvfp4Pt(t) => {
            sections.push(("codes", t.codes.clone()));
            sections.push(("scales", t.block_scales.clone()));
            sections.push(("token_scales", f32_bytes(&t.token_scales)));
            "nvfp4_pt"
        }
    };
    let payload: Vec<u8> = sections.iter().flat_map(|(_, b)| b.iter().copied()).collect();
    let header = Header {
        format: format.into(),
        rows: f.input.rows,
        cols: f.input.cols,
        sections: sections
            .iter()
            .map(|(n, b)| Section {
                name: n.to_string(),
                bytes: b.len(),
            })
            .collect(),
        digest: sha256_hex(&payload),
    };
    let h = serde_json::to_vec(&header).expect("header serializes");
    let mut out = (h.len() as u32).to_le_bytes().to_vec();
    out.extend(h);
    out.extend(payload);
    out
}

pub fn read_golden(bytes: &[u8]) -> Result<GoldenFixture, QuantError> {
    let bad = |m: String| QuantError::Fixture(m);
    let hlen = bytes
        .get(..4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or_else(|| bad("truncated".into()))?;
    let hbytes = bytes.get(4..4 + hlen).ok_or_else(|| bad("truncated header".into()))?;
    let header: Header = serde_json::from_slice(hbytes).map_err(|e| bad(e.to_string()))?;
    let payload = &bytes[4 + hlen..];
    if sha256_hex(payload) != header.digest {
        return Err(bad("payload digest mismatch".into()));
    }
    let mut parts = std::collections::BTreeMap::new();
    let mut at = 0;
    for s in &header.sections {
        let b = payload
            .get(at..at + s.bytes)
            .ok_or_else(|| bad(format!("section {} truncated", s.name)))?;
        parts.insert(s.name.as_str(), b);
        at += s.bytes;
    }
    if at != payload.len() {
        return Err(bad("trailing bytes".into()));
    }
    let get = |n: &str| parts.get(n).copied().ok_or_else(|| bad(format!("missing section {n}")));
    let input = Mat {
        rows: header.rows,
        cols: header.cols,
        data: f32s(get("input")?),
    };
    if input.data.len() != input.rows * input.cols {
        return Err(bad("input shape mismatch".into()));
    }
    let tensor = match header.format.as_str() {
        "mxfp8" => QuantizedTensor::Mxfp8(Mxfp8Tensor {
            rows: header.rows,
            cols: header.cols,
            codes: get("codes")?.to_vec(),
            scales: get("scales")?.to_vec(),
        }),
        "nvfp4_pt" => QuantizedTensor::Nvfp4Pt(Nvfp4Tensor {
            rows: header.rows,
            cols: header.cols,
            codes: get("codes")?.to_vec(),
            block_scales: get("scales")?.to_vec(),
            token_scales: f32s(get("token_scales")?),
        }),
        other => return Err(bad(format!("unknown format {other}"))),
    };
    Ok(GoldenFixture { input, tensor })
}

/// Re-quantizes the fixture input and compares codes, scales and the
/// dequantized values bitwise against the stored tensor.
pub fn verify_golden(bytes: &[u8]) -> Result<GoldenReport, QuantError> {
    let f = read_golden(bytes)?;
    let bits = |m: &Mat<f32>| m.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let (format, codes_match, scales_match) = match &f.tensor {
        QuantizedTensor::Mxfp8(t) => {
            let q = quantize_mxfp8(&f.input)?;
            ("mxfp8", q.codes == t.codes, q.scales == t.scales)
        }
        QuantizedTensor::Nvfp4Pt(t) => {
            let q = quantize_nvfp4_pt(&f.input)?;
            let ts = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            (
                "nvfp4_pt",
                q.codes == t.codes,
                q.block_scales == t.block_scales && ts(&q.token_scales) == ts(&t.token_scales),
            )
        }
    };
    let stored = dequantize(&f.tensor)?;
    let fresh = round_trip(
        &f.input,
        match f.tensor {
            QuantizedTensor::Mxfp8(_) => Precision::Mxfp8,
            QuantizedTensor::Nvfp4Pt(_) => Precision::Nvfp4Pt,
        },
    )?;
    Ok(GoldenReport {
        format: format.into(),
        rows: f.input.rows,
        cols: f.input.cols,
        codes_match,
        scales_match,
        dequantized_match: bits(&stored) == bits(&fresh),
    })
}
