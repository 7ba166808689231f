//! Fake-quantization with straight-through gradients.
//!
//! Weight quantizers work per output channel (axis 0 of an OIHW or `[O, I]`
//! tensor). Forward values are the dequantized levels; the backward pass is
//! the identity.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_TERNARY_THRESHOLD: f32 = 0.05;
pub const ACTIVATION_BITS: u32 = 8;

/// Weight data format supported by a compute unit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    Ternary,
    Int8,
    Float,
}

impl Precision {
    /// Higher is expected to be more accurate.
    pub fn rank(self) -> u8 {
        match self {
            Precision::Ternary => 0,
            Precision::Int8 => 1,
            Precision::Float => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Precision::Ternary => "ternary",
            Precision::Int8 => "int8",
            Precision::Float => "float",
        }
    }
}

fn channels(w: &Tensor) -> (usize, usize) {
    let c = w.dim(0);
    (c, w.numel() / c)
}

fn check_finite(op: &'static str, w: &Tensor) -> Result<()> {
    if !w.all_finite() {
        return Err(Error::Invalid(format!("{op}: non-finite input")));
    }
    Ok(())
}

/// Per-channel ternary statistics: values with `|w| > delta` map to `±scale`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TernaryStats {
    pub delta: f32,
    pub scale: f32,
}

pub fn ternary_stats(w: &Tensor, threshold: f32) -> Vec<TernaryStats> {
    let (c, per) = channels(w);
    (0..c)
        .map(|ch| {
            let row = &w.data()[ch * per..(ch + 1) * per];
            let max = row.iter().fold(0.0f32, |m, v| m.max(v.abs()));
            let delta = threshold * max;
            let (mut sum, mut count) = (0.0f64, 0usize);
            for v in row.iter().filter(|v| v.abs() > delta) {
                sum += v.abs() as f64;
                count += 1;
            }
            let scale = if count == 0 { 0.0 } else { (sum / count as f64) as f32 };
            TernaryStats { delta, scale }
        })
        .collect()
}

/// Codes in {-1, 0, +1} per element.
pub fn ternary_codes(w: &Tensor, stats: &[TernaryStats]) -> Vec<i8> {
    let (_, per) = channels(w);
    w.data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let s = stats[i / per];
            if s.scale == 0.0 || v.abs() <= s.delta {
                0
            } else if v > 0.0 {
                1
            } else {
                -1
            }
        })
        .collect()
}

pub fn ternary_dequantize(codes: &[i8], scales: &[f32], shape: &[usize]) -> Result<Tensor> {
    let per = codes.len() / scales.len().max(1);
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &q)| q as f32 * scales[i / per])
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Ternary fake-quantization with the default per-channel statistics.
pub fn quantize_ternary(w: &Tensor, threshold: f32) -> Result<Tensor> {
    check_finite("quantize_ternary", w)?;
    let stats = ternary_stats(w, threshold);
    let codes = ternary_codes(w, &stats);
    let scales: Vec<f32> = stats.iter().map(|s| s.scale).collect();
    ternary_dequantize(&codes, &scales, w.shape())
}

fn levels(bits: u32) -> Result<i32> {
    if !(2..=8).contains(&bits) {
        return Err(Error::Invalid(format!("bit-width {bits} outside [2, 8]")));
    }
    Ok((1 << (bits - 1)) - 1)
}

pub fn channel_max_abs(w: &Tensor) -> Vec<f32> {
    let (_, per) = channels(w);
    w.data()
        .chunks(per)
        .map(|row| row.iter().fold(0.0f32, |m, v| m.max(v.abs())))
        .collect()
}

/// Symmetric integer codes; `ranges[c]` is the magnitude mapped to the top level.
pub fn affine_codes(w: &Tensor, bits: u32, ranges: &[f32]) -> Result<Vec<i8>> {
    let top = levels(bits)?;
    let per = w.numel() / ranges.len();
    Ok(w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let r = ranges[i / per];
            if r == 0.0 {
                return 0;
            }
            let q = (v as f64 * top as f64 / r as f64).round();
            q.clamp(-top as f64, top as f64) as i8
        })
        .collect())
}

/// Inverse of [`affine_codes`]: `q * range / (2^(b-1) - 1)`, evaluated in f64.
pub fn affine_dequantize(codes: &[i8], bits: u32, ranges: &[f32], shape: &[usize]) -> Result<Tensor> {
    let top = levels(bits)? as f64;
    let per = codes.len() / ranges.len().max(1);
    let data = codes
        .iter()
        .enumerate()
        .map(|(i, &q)| (q as f64 * ranges[i / per] as f64 / top) as f32)
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Symmetric per-channel integer fake-quantization.
pub fn quantize_affine(w: &Tensor, bits: u32) -> Result<Tensor> {
    check_finite("quantize_affine", w)?;
    let ranges = channel_max_abs(w);
    let codes = affine_codes(w, bits, &ranges)?;
    affine_dequantize(&codes, bits, &ranges, w.shape())
}

/// Quantized form of a weight tensor, as materialized for deployment.
#[derive(Clone, Debug, PartialEq)]
pub enum QuantCodes {
    Ternary { codes: Vec<i8>, scales: Vec<f32> },
    Int { bits: u32, codes: Vec<i8>, ranges: Vec<f32> },
    Float(Vec<f32>),
}

impl QuantCodes {
    pub fn dequantize(&self, shape: &[usize]) -> Result<Tensor> {
        match self {
            QuantCodes::Ternary { codes, scales } => ternary_dequantize(codes, scales, shape),
            QuantCodes::Int { bits, codes, ranges } => affine_dequantize(codes, *bits, ranges, shape),
            QuantCodes::Float(v) => Tensor::new(shape.to_vec(), v.clone()),
        }
    }
}

/// A weight quantizer with optionally frozen statistics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightQuantizer {
    Ternary {
        threshold: f32,
        frozen: Option<Vec<TernaryStats>>,
    },
    Int {
        bits: u32,
        frozen: Option<Vec<f32>>,
    },
    Identity,
}

impl WeightQuantizer {
    pub fn for_precision(p: Precision, ternary_threshold: f32) -> Self {
        match p {
            Precision::Ternary => WeightQuantizer::Ternary {
                threshold: ternary_threshold,
                frozen: None,
            },
            Precision::Int8 => WeightQuantizer::Int { bits: 8, frozen: None },
            Precision::Float => WeightQuantizer::Identity,
        }
    }

    pub fn codes(&self, w: &Tensor) -> Result<QuantCodes> {
        check_finite("quantize", w)?;
        Ok(match self {
            WeightQuantizer::Ternary { threshold, frozen } => {
                let stats = match frozen {
                    Some(s) => s.clone(),
                    None => ternary_stats(w, *threshold),
                };
                QuantCodes::Ternary {
                    codes: ternary_codes(w, &stats),
                    scales: stats.iter().map(|s| s.scale).collect(),
                }
            }
            WeightQuantizer::Int { bits, frozen } => {
                let ranges = match frozen {
                    Some(r) => r.clone(),
                    None => channel_max_abs(w),
                };
                QuantCodes::Int {
                    bits: *bits,
                    codes: affine_codes(w, *bits, &ranges)?,
                    ranges,
                }
            }
            WeightQuantizer::Identity => QuantCodes::Float(w.data().to_vec()),
        })
    }

    pub fn quantize(&self, w: &Tensor) -> Result<Tensor> {
        match self {
            WeightQuantizer::Identity => Ok(w.clone()),
            _ => self.codes(w)?.dequantize(w.shape()),
        }
    }

    /// Fixes the statistics to those of `w`.
    pub fn freeze(&mut self, w: &Tensor) {
        match self {
            WeightQuantizer::Ternary { threshold, frozen } => *frozen = Some(ternary_stats(w, *threshold)),
            WeightQuantizer::Int { frozen, .. } => *frozen = Some(channel_max_abs(w)),
            WeightQuantizer::Identity => {}
        }
    }

    pub fn unfreeze(&mut self) {
        match self {
            WeightQuantizer::Ternary { frozen, .. } => *frozen = None,
            WeightQuantizer::Int { frozen, .. } => *frozen = None,
            WeightQuantizer::Identity => {}
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, WeightQuantizer::Identity)
    }

    /// Records the quantized value of `w` with an identity gradient.
    pub fn apply(&self, tape: &mut Tape, w: Var) -> Result<Var> {
        if self.is_identity() {
            return Ok(w);
        }
        let q = self.quantize(tape.value(w))?;
        tape.straight_through(w, q)
    }
}

/// Per-tensor symmetric activation fake-quantization.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ActivationQuantizer {
    pub frozen_range: Option<f32>,
}

impl ActivationQuantizer {
    pub fn range_of(&self, x: &Tensor) -> f32 {
        self.frozen_range.unwrap_or_else(|| x.max_abs())
    }

    pub fn quantize(&self, x: &Tensor) -> Result<Tensor> {
        quantize_activation(x, self.range_of(x))
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let q = self.quantize(tape.value(x))?;
        tape.straight_through(x, q)
    }
}

pub fn quantize_activation(x: &Tensor, range: f32) -> Result<Tensor> {
    let flat = x.clone().reshape([1, x.numel()])?;
    let codes = affine_codes(&flat, ACTIVATION_BITS, &[range])?;
    affine_dequantize(&codes, ACTIVATION_BITS, &[range], x.shape())
}
