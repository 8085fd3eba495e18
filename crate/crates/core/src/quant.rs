//! Uniform min-max quantization and the straight-through (QAT) baseline.

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};

/// Largest supported bitwidth. Indices are stored as `u32`.
pub const MAX_BITS: u32 = 32;

/// Per-tensor affine range used to map weights onto `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleParams {
    pub min: f64,
    pub max: f64,
}

impl ScaleParams {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        if !(min <= max) || !min.is_finite() || !max.is_finite() {
            return Err(Error::invalid(format!("invalid scale ({min}, {max})")));
        }
        Ok(Self { min, max })
    }

    pub fn unit() -> Self {
        Self { min: 0.0, max: 1.0 }
    }

    pub fn of(w: &Tensor) -> Self {
        Self {
            min: w.min(),
            max: w.max(),
        }
    }

    pub fn range(&self) -> f64 {
        self.max - self.min
    }

    /// A constant tensor (zero range) normalizes to 0 everywhere.
    pub fn normalize(&self, x: f64) -> f64 {
        let r = self.range();
        if r == 0.0 {
            0.0
        } else {
            (x - self.min) / r
        }
    }

    pub fn denormalize(&self, u: f64) -> f64 {
        self.min + self.range() * u
    }

    /// Rounds both ends to the nearest `f32`, the precision they are
    /// serialized with.
    pub fn to_f32_precision(self) -> Self {
        Self {
            min: self.min as f32 as f64,
            max: self.max as f32 as f64,
        }
    }
}

/// Quantization step `1 / (2^bits - 1)` for a real-valued bitwidth.
pub fn delta(bits: f64) -> Result<f64> {
    if !(bits > 0.0) {
        return Err(Error::invalid(format!("bitwidth must be positive, got {bits}")));
    }
    Ok(1.0 / (bits.exp2() - 1.0))
}

/// Records `1 / (2^bits - 1)` on the tape as `reciprocal(exp2(b) - 1)`.
pub fn delta_node(tape: &mut Tape, bits: NodeId) -> Result<NodeId> {
    let shape = tape.value(bits).shape().to_vec();
    if tape.value(bits).data().iter().any(|&b| !(b > 0.0)) {
        return Err(Error::invalid("bitwidth must be positive"));
    }
    let pow = tape.exp2(bits);
    let one = tape.constant(Tensor::full(&shape, 1.0));
    let levels = tape.sub(pow, one)?;
    Ok(tape.reciprocal(levels))
}

pub fn min_max_scale(w: &Tensor) -> (Tensor, ScaleParams) {
    let scale = ScaleParams::of(w);
    (w.map(|x| scale.normalize(x)), scale)
}

/// Rounds half away from zero; used for both weight indices and bitwidths.
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}

fn levels(bits: u32) -> f64 {
    ((1u64 << bits) - 1) as f64
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(Error::invalid(format!("bitwidth must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

fn quantize_index(u: f64, bits: u32) -> u32 {
    round_half_away(u.clamp(0.0, 1.0) * levels(bits)) as u32
}

/// Weights stored as integer grid indices with one bitwidth per group of
/// `group_size` consecutive (row-major) entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedTensor {
    pub shape: Vec<usize>,
    pub group_size: usize,
    pub bits: Vec<u8>,
    pub indices: Vec<u32>,
    pub scale: ScaleParams,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.indices.len()
    }

    pub fn num_groups(&self) -> usize {
        self.numel().div_ceil(self.group_size)
    }

    pub fn group_of(&self, i: usize) -> usize {
        i / self.group_size
    }

    /// Length of group `s`; only the last group can be short.
    pub fn group_len(&self, s: usize) -> usize {
        group_len(self.numel(), self.group_size, s)
    }

    /// Grid values in `[0, 1]`.
    pub fn reconstruct_normalized(&self) -> Vec<f64> {
        self.indices
            .iter()
            .enumerate()
            .map(|(i, &q)| q as f64 / levels(self.bits[self.group_of(i)] as u32))
            .collect()
    }

    /// Dequantized weights `min + (max - min) · index / (2^b - 1)`.
    pub fn reconstruct(&self) -> Tensor {
        let data = self
            .reconstruct_normalized()
            .into_iter()
            .map(|u| self.scale.denormalize(u))
            .collect();
        Tensor::new(self.shape.clone(), data).expect("quantized tensor shape is consistent")
    }

    /// Checks the structural invariants: shape, group count, index range.
    pub fn validate(&self) -> Result<()> {
        let numel: usize = self.shape.iter().product();
        if numel != self.indices.len() || numel == 0 {
            return Err(Error::invalid(format!(
                "shape {:?} does not match {} indices",
                self.shape,
                self.indices.len()
            )));
        }
        if self.group_size == 0 || self.bits.len() != self.num_groups() {
            return Err(Error::invalid(format!(
                "{} bitwidths for {} weights in groups of {}",
                self.bits.len(),
                numel,
                self.group_size
            )));
        }
        for (s, &b) in self.bits.iter().enumerate() {
            check_bits(b as u32)?;
            let start = s * self.group_size;
            let end = start + self.group_len(s);
            if let Some(q) = self.indices[start..end].iter().find(|&&q| q as f64 > levels(b as u32)) {
                return Err(Error::invalid(format!("index {q} does not fit {b} bits in group {s}")));
            }
        }
        Ok(())
    }
}

pub(crate) fn group_len(d: usize, g: usize, s: usize) -> usize {
    g.min(d - s * g)
}

/// Quantizes `w_hat` (entries in `[0, 1]`) on a `2^bits`-point grid. The
/// result is one group spanning the whole tensor, with a unit scale.
pub fn uniform_quantize(w_hat: &Tensor, bits: u32) -> Result<QuantizedTensor> {
    check_bits(bits)?;
    const TOL: f64 = 1e-12;
    if let Some(x) = w_hat.data().iter().find(|&&x| !(-TOL..=1.0 + TOL).contains(&x)) {
        return Err(Error::invalid(format!("value {x} outside [0, 1]")));
    }
    Ok(QuantizedTensor {
        shape: w_hat.shape().to_vec(),
        group_size: w_hat.len(),
        bits: vec![bits as u8],
        indices: w_hat.data().iter().map(|&u| quantize_index(u, bits)).collect(),
        scale: ScaleParams::unit(),
    })
}

/// Quantizes raw weights with a per-group bitwidth after normalizing them
/// with `scale`. Normalized values are clamped into `[0, 1]`.
pub fn quantize_grouped(w: &Tensor, bits: &[u8], group_size: usize, scale: ScaleParams) -> Result<QuantizedTensor> {
    if group_size == 0 || w.len().div_ceil(group_size) != bits.len() {
        return Err(Error::invalid(format!(
            "{} bitwidths for {} weights in groups of {group_size}",
            bits.len(),
            w.len()
        )));
    }
    for &b in bits {
        check_bits(b as u32)?;
    }
    let indices = w
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| quantize_index(scale.normalize(x), bits[i / group_size] as u32))
        .collect();
    Ok(QuantizedTensor {
        shape: w.shape().to_vec(),
        group_size,
        bits: bits.to_vec(),
        indices,
        scale,
    })
}

/// Straight-through quantization with the scale recomputed from the
/// current weights.
pub fn ste_qat_forward(tape: &mut Tape, w: NodeId, bits: u32) -> Result<NodeId> {
    let scale = ScaleParams::of(tape.value(w));
    ste_qat_forward_scaled(tape, w, bits, scale)
}

/// Forward: `Q(w, bits)` under `scale`. Backward: identity.
pub fn ste_qat_forward_scaled(tape: &mut Tape, w: NodeId, bits: u32, scale: ScaleParams) -> Result<NodeId> {
    check_bits(bits)?;
    let lv = levels(bits);
    let value = tape
        .value(w)
        .map(|x| scale.denormalize(round_half_away(scale.normalize(x).clamp(0.0, 1.0) * lv) / lv));
    tape.straight_through(w, value)
}
