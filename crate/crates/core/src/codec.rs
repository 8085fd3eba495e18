//! Bit-exact serialization of hardened models.
//!
//! ```text
//! "DFQ1" | u16 version | u32 n_tensors | n × record
//! record: u16 name_len | name | u8 kind | u8 ndim | ndim × u32 dims | body
//! kind 0 (raw):       d × f32
//! kind 1 (quantized): u32 g | u8 b_min | f32 min | f32 max | u8 max_c
//!                     | group codes (ceil(d/g) × max_c bits, padded)
//!                     | weights (len_s × b_s bits per group, padded)
//! ```
//!
//! Multi-byte values are little-endian. Bitstreams are MSB-first and each
//! one is zero-padded to a byte boundary. A group code stores `b_s - b_min`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::quant::{QuantizedTensor, ScaleParams, MAX_BITS};

pub const MAGIC: [u8; 4] = *b"DFQ1";
pub const VERSION: u16 = 1;
/// Bits per megabyte, `8 · 2^20`.
pub const BITS_PER_MB: f64 = 8_388_608.0;

const KIND_RAW: u8 = 0;
const KIND_QUANTIZED: u8 = 1;
const FILE_HEADER_BYTES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TensorData {
    Raw { shape: Vec<usize>, values: Vec<f32> },
    Quantized { b_min: u8, tensor: QuantizedTensor },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HardenedTensor {
    pub name: String,
    #[serde(flatten)]
    pub data: TensorData,
}

impl HardenedTensor {
    pub fn shape(&self) -> &[usize] {
        match &self.data {
            TensorData::Raw { shape, .. } => shape,
            TensorData::Quantized { tensor, .. } => &tensor.shape,
        }
    }

    pub fn numel(&self) -> usize {
        self.shape().iter().product()
    }

    /// Dequantized (or widened raw) values.
    pub fn values(&self) -> Tensor {
        match &self.data {
            TensorData::Raw { shape, values } => {
                Tensor::new(shape.clone(), values.iter().map(|&v| v as f64).collect()).expect("raw tensor shape")
            }
            TensorData::Quantized { tensor, .. } => tensor.reconstruct(),
        }
    }

    /// Size counted by the true-model-size formula: `d · 32` for raw
    /// tensors, [`layer_true_bits`] for quantized ones.
    pub fn paper_bits(&self) -> u64 {
        match &self.data {
            TensorData::Raw { values, .. } => values.len() as u64 * 32,
            TensorData::Quantized { b_min, tensor } => {
                layer_true_bits(tensor.numel(), tensor.group_size, &tensor.bits, *b_min)
            }
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HardenedModel {
    pub tensors: Vec<HardenedTensor>,
}

impl HardenedModel {
    pub fn paper_bits(&self) -> u64 {
        self.tensors.iter().map(HardenedTensor::paper_bits).sum()
    }

    pub fn true_size_mb(&self) -> f64 {
        self.paper_bits() as f64 / BITS_PER_MB
    }

    /// Mean bits per weight, raw weights counted at 32; 0 for an empty
    /// model.
    pub fn mean_bits(&self) -> f64 {
        let (mut bits, mut count) = (0u64, 0usize);
        for t in &self.tensors {
            match &t.data {
                TensorData::Raw { values, .. } => bits += 32 * values.len() as u64,
                TensorData::Quantized { tensor, .. } => bits += payload_bits(tensor),
            }
            count += t.numel();
        }
        if count == 0 {
            0.0
        } else {
            bits as f64 / count as f64
        }
    }
}

/// Width of one group code: `ceil(max_s log2(1 + b_s - b_min))`, i.e. the
/// number of bits needed to write the largest `b_s - b_min`.
pub fn max_code_bits(bits: &[u8], b_min: u8) -> u8 {
    let top = bits.iter().map(|&b| b.saturating_sub(b_min)).max().unwrap_or(0);
    (u8::BITS - top.leading_zeros()) as u8
}

fn payload_bits(t: &QuantizedTensor) -> u64 {
    (0..t.num_groups()).map(|s| t.group_len(s) as u64 * t.bits[s] as u64).sum()
}

/// True size of one quantized layer in bits:
/// `2·32 + 8 + ceil(d/g)·max_c + Σ_s len_s·b_s`.
pub fn layer_true_bits(numel: usize, group_size: usize, bits: &[u8], b_min: u8) -> u64 {
    let groups = numel.div_ceil(group_size) as u64;
    let payload: u64 = bits
        .iter()
        .enumerate()
        .map(|(s, &b)| crate::quant::group_len(numel, group_size, s) as u64 * b as u64)
        .sum();
    2 * 32 + 8 + groups * max_code_bits(bits, b_min) as u64 + payload
}

struct BitWriter {
    bytes: Vec<u8>,
    used: u32,
}

impl BitWriter {
    fn new() -> Self {
        Self {
            bytes: Vec::new(),
            used: 8,
        }
    }

    fn write(&mut self, value: u32, width: u32) {
        for k in (0..width).rev() {
            if self.used == 8 {
                self.bytes.push(0);
                self.used = 0;
            }
            let bit = ((value >> k) & 1) as u8;
            *self.bytes.last_mut().expect("byte pushed above") |= bit << (7 - self.used);
            self.used += 1;
        }
    }

    fn finish(self) -> Vec<u8> {
        self.bytes
    }
}

struct BitReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> BitReader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn read(&mut self, width: u32) -> u32 {
        let mut v = 0u32;
        for _ in 0..width {
            let byte = self.bytes[self.pos / 8];
            v = (v << 1) | ((byte >> (7 - self.pos % 8)) & 1) as u32;
            self.pos += 1;
        }
        v
    }
}

pub fn pack(model: &HardenedModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let n = u32::try_from(model.tensors.len()).map_err(|_| Error::invalid("too many tensors"))?;
    out.extend_from_slice(&n.to_le_bytes());
    for t in &model.tensors {
        write_record(&mut out, t)?;
    }
    Ok(out)
}

fn write_record(out: &mut Vec<u8>, t: &HardenedTensor) -> Result<()> {
    let name = t.name.as_bytes();
    let name_len = u16::try_from(name.len()).map_err(|_| Error::invalid(format!("tensor name too long: {}", t.name)))?;
    let shape = t.shape();
    if shape.is_empty() || shape.len() > u8::MAX as usize || shape.contains(&0) {
        return Err(Error::invalid(format!("tensor {}: unsupported shape {shape:?}", t.name)));
    }
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name);
    let kind = match t.data {
        TensorData::Raw { .. } => KIND_RAW,
        TensorData::Quantized { .. } => KIND_QUANTIZED,
    };
    out.push(kind);
    out.push(shape.len() as u8);
    for &dim in shape {
        let dim = u32::try_from(dim).map_err(|_| Error::invalid(format!("tensor {}: dimension too large", t.name)))?;
        out.extend_from_slice(&dim.to_le_bytes());
    }

    match &t.data {
        TensorData::Raw { shape, values } => {
            if shape.iter().product::<usize>() != values.len() {
                return Err(Error::invalid(format!("tensor {}: shape/value count mismatch", t.name)));
            }
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        TensorData::Quantized { b_min, tensor } => {
            let q = tensor;
            if *b_min == 0 || u32::from(*b_min) > MAX_BITS {
                return Err(Error::invalid(format!("tensor {}: b_min {b_min} out of range", t.name)));
            }
            q.validate().map_err(|e| Error::invalid(format!("tensor {}: {e}", t.name)))?;
            for (s, &b) in q.bits.iter().enumerate() {
                if b < *b_min {
                    return Err(Error::invalid(format!(
                        "tensor {} group {s}: bitwidth {b} below b_min {b_min}",
                        t.name
                    )));
                }
                let start = s * q.group_size;
                for &idx in &q.indices[start..start + q.group_len(s)] {
                    if u64::from(idx) >= 1u64 << b {
                        return Err(Error::invalid(format!(
                            "tensor {} group {s}: index {idx} does not fit {b} bits",
                            t.name
                        )));
                    }
                }
            }
            let g = u32::try_from(q.group_size).map_err(|_| Error::invalid("group size too large"))?;
            out.extend_from_slice(&g.to_le_bytes());
            out.push(*b_min);
            out.extend_from_slice(&(q.scale.min as f32).to_le_bytes());
            out.extend_from_slice(&(q.scale.max as f32).to_le_bytes());
            let max_c = max_code_bits(&q.bits, *b_min);
            out.push(max_c);

            let mut codes = BitWriter::new();
            for &b in &q.bits {
                codes.write(u32::from(b - b_min), u32::from(max_c));
            }
            out.extend(codes.finish());

            let mut weights = BitWriter::new();
            for (i, &idx) in q.indices.iter().enumerate() {
                weights.write(idx, u32::from(q.bits[q.group_of(i)]));
            }
            out.extend(weights.finish());
        }
    }
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::codec(
                self.pos,
                format!("truncated stream reading {what} ({n} bytes needed, {} left)", self.bytes.len() - self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }
}

/// Byte accounting for one decoded record.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct RecordLayout {
    bytes: usize,
    framing_bytes: usize,
    padding_bits: u64,
}

pub fn unpack(bytes: &[u8]) -> Result<HardenedModel> {
    Ok(decode(bytes)?.0)
}

fn decode(bytes: &[u8]) -> Result<(HardenedModel, Vec<RecordLayout>)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic").map_err(|_| Error::codec(0, "bad magic (file too short)"))?;
    if magic != MAGIC {
        return Err(Error::codec(0, format!("bad magic {magic:02x?}, expected {MAGIC:02x?}")));
    }
    let version = cur.u16("version")?;
    if version != VERSION {
        return Err(Error::codec(4, format!("unsupported version {version}")));
    }
    let n = cur.u32("tensor count")?;
    let mut tensors = Vec::new();
    let mut layouts = Vec::new();
    for _ in 0..n {
        let start = cur.pos;
        let (t, framing, padding) = read_record(&mut cur)?;
        layouts.push(RecordLayout {
            bytes: cur.pos - start,
            framing_bytes: framing,
            padding_bits: padding,
        });
        tensors.push(t);
    }
    if cur.pos != bytes.len() {
        return Err(Error::codec(cur.pos, format!("{} trailing bytes", bytes.len() - cur.pos)));
    }
    Ok((HardenedModel { tensors }, layouts))
}

fn read_record(cur: &mut Cursor<'_>) -> Result<(HardenedTensor, usize, u64)> {
    let record_start = cur.pos;
    let name_len = cur.u16("name length")? as usize;
    let name_at = cur.pos;
    let name = std::str::from_utf8(cur.take(name_len, "name")?)
        .map_err(|_| Error::codec(name_at, "tensor name is not UTF-8"))?
        .to_string();
    let kind_at = cur.pos;
    let kind = cur.u8("kind")?;
    let ndim_at = cur.pos;
    let ndim = cur.u8("ndim")? as usize;
    if ndim == 0 {
        return Err(Error::codec(ndim_at, format!("tensor {name}: zero dimensions")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let at = cur.pos;
        let dim = cur.u32("dimension")? as usize;
        if dim == 0 {
            return Err(Error::codec(at, format!("tensor {name}: zero extent")));
        }
        shape.push(dim);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .ok_or_else(|| Error::codec(ndim_at, format!("tensor {name}: shape overflows")))?;

    match kind {
        KIND_RAW => {
            let framing = cur.pos - record_start;
            if numel > (cur.bytes.len() - cur.pos) / 4 {
                return Err(Error::codec(cur.pos, format!("truncated stream reading {name} values")));
            }
            let values = (0..numel).map(|_| cur.f32("raw value")).collect::<Result<Vec<_>>>()?;
            let t = HardenedTensor {
                name,
                data: TensorData::Raw { shape, values },
            };
            Ok((t, framing, 0))
        }
        KIND_QUANTIZED => {
            let g_at = cur.pos;
            let g = cur.u32("group size")? as usize;
            if g == 0 {
                return Err(Error::codec(g_at, format!("tensor {name}: zero group size")));
            }
            let b_min_at = cur.pos;
            let b_min = cur.u8("b_min")?;
            if b_min == 0 || u32::from(b_min) > MAX_BITS {
                return Err(Error::codec(b_min_at, format!("tensor {name}: b_min {b_min} out of range")));
            }
            let framing = cur.pos - record_start;
            let min = cur.f32("scale min")? as f64;
            let max = cur.f32("scale max")? as f64;
            if !(min <= max) || !min.is_finite() || !max.is_finite() {
                return Err(Error::codec(cur.pos - 8, format!("tensor {name}: invalid scale ({min}, {max})")));
            }
            let c_at = cur.pos;
            let max_c = cur.u8("max code bits")?;
            if max_c > 8 {
                return Err(Error::codec(c_at, format!("tensor {name}: max code width {max_c} exceeds 8")));
            }
            let groups = numel.div_ceil(g);
            let code_bits = groups as u64 * max_c as u64;
            let codes_at = cur.pos;
            let code_bytes = cur.take(code_bits.div_ceil(8) as usize, "group codes")?;
            let mut reader = BitReader::new(code_bytes);
            let mut bits = Vec::with_capacity(groups);
            for s in 0..groups {
                let b = u32::from(b_min) + reader.read(u32::from(max_c));
                if b > MAX_BITS {
                    return Err(Error::codec(
                        codes_at + (s * max_c as usize) / 8,
                        format!("tensor {name} group {s}: bitwidth {b} out of range"),
                    ));
                }
                bits.push(b as u8);
            }
            let payload: u64 = (0..groups)
                .map(|s| crate::quant::group_len(numel, g, s) as u64 * bits[s] as u64)
                .sum();
            let weight_bytes = cur.take(payload.div_ceil(8) as usize, "weights")?;
            let mut reader = BitReader::new(weight_bytes);
            let indices = (0..numel).map(|i| reader.read(u32::from(bits[i / g]))).collect();
            let padding = (code_bits.div_ceil(8) * 8 - code_bits) + (payload.div_ceil(8) * 8 - payload);
            let tensor = QuantizedTensor {
                shape,
                group_size: g,
                bits,
                indices,
                scale: ScaleParams { min, max },
            };
            let t = HardenedTensor {
                name,
                data: TensorData::Quantized { b_min, tensor },
            };
            Ok((t, framing, padding))
        }
        other => Err(Error::codec(kind_at, format!("tensor {name}: unknown kind {other}"))),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TensorInspection {
    pub name: String,
    pub kind: &'static str,
    pub shape: Vec<usize>,
    pub numel: usize,
    pub group_size: Option<usize>,
    pub b_min: Option<u8>,
    pub max_code_bits: Option<u8>,
    /// Number of weights stored with each bitwidth.
    pub bit_histogram: BTreeMap<u8, usize>,
    pub mean_bits: f64,
    pub paper_bits: u64,
    pub file_bytes: usize,
    pub framing_bits: u64,
    pub padding_bits: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inspection {
    pub tensors: Vec<TensorInspection>,
    pub paper_bits: u64,
    pub file_bytes: usize,
    /// File header plus per-record framing, in bits.
    pub framing_bits: u64,
    pub padding_bits: u64,
    pub paper_mb: f64,
    pub file_mb: f64,
    pub mean_bits: f64,
    /// Raw (unquantized) tensors, counted at 32 bits per value.
    pub raw_tensors: Vec<String>,
}

pub fn inspect(bytes: &[u8]) -> Result<Inspection> {
    let (model, layouts) = decode(bytes)?;
    let mut tensors = Vec::new();
    for (t, layout) in model.tensors.iter().zip(&layouts) {
        let mut hist = BTreeMap::new();
        let (kind, g, b_min, max_c) = match &t.data {
            TensorData::Raw { values, .. } => {
                hist.insert(32, values.len());
                ("raw", None, None, None)
            }
            TensorData::Quantized { b_min, tensor } => {
                for s in 0..tensor.num_groups() {
                    *hist.entry(tensor.bits[s]).or_insert(0) += tensor.group_len(s);
                }
                let c = max_code_bits(&tensor.bits, *b_min);
                ("quantized", Some(tensor.group_size), Some(*b_min), Some(c))
            }
        };
        let numel = t.numel();
        let weighted: u64 = hist.iter().map(|(&b, &n)| b as u64 * n as u64).sum();
        tensors.push(TensorInspection {
            name: t.name.clone(),
            kind,
            shape: t.shape().to_vec(),
            numel,
            group_size: g,
            b_min,
            max_code_bits: max_c,
            bit_histogram: hist,
            mean_bits: weighted as f64 / numel as f64,
            paper_bits: t.paper_bits(),
            file_bytes: layout.bytes,
            framing_bits: layout.framing_bytes as u64 * 8,
            padding_bits: layout.padding_bits,
        });
    }
    let paper_bits = model.paper_bits();
    Ok(Inspection {
        paper_bits,
        file_bytes: bytes.len(),
        framing_bits: FILE_HEADER_BYTES as u64 * 8 + tensors.iter().map(|t| t.framing_bits).sum::<u64>(),
        padding_bits: tensors.iter().map(|t| t.padding_bits).sum(),
        paper_mb: paper_bits as f64 / BITS_PER_MB,
        file_mb: bytes.len() as f64 * 8.0 / BITS_PER_MB,
        mean_bits: model.mean_bits(),
        raw_tensors: tensors.iter().filter(|t| t.kind == "raw").map(|t| t.name.clone()).collect(),
        tensors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// d=16, g=8, bits [3, 5], b_min 2.
    fn fixture() -> HardenedModel {
        let indices: Vec<u32> = (0..8).map(|i| i % 8).chain((0..8).map(|i| 31 - i)).collect();
        HardenedModel {
            tensors: vec![HardenedTensor {
                name: "w".into(),
                data: TensorData::Quantized {
                    b_min: 2,
                    tensor: QuantizedTensor {
                        shape: vec![16],
                        group_size: 8,
                        bits: vec![3, 5],
                        indices,
                        scale: ScaleParams { min: -0.5, max: 0.75 },
                    },
                },
            }],
        }
    }

    #[test]
    fn code_width() {
        assert_eq!(max_code_bits(&[3, 5], 2), 2);
        assert_eq!(max_code_bits(&[2, 2], 2), 0);
        assert_eq!(max_code_bits(&[3], 2), 1);
        assert_eq!(max_code_bits(&[6], 2), 3);
        assert_eq!(max_code_bits(&[32], 1), 5);
    }

    #[test]
    fn fixture_is_140_bits() {
        assert_eq!(layer_true_bits(16, 8, &[3, 5], 2), 140);
        assert_eq!(fixture().paper_bits(), 140);
    }

    #[test]
    fn fixture_layout() {
        let bytes = pack(&fixture()).unwrap();
        // header 10, name_len 2 + name 1, kind 1, ndim 1, dim 4, g 4, b_min 1
        let framing = 10 + 2 + 1 + 1 + 1 + 4 + 4 + 1;
        assert_eq!(bytes.len() - framing, 18);
        assert_eq!(&bytes[..4], b"DFQ1");
        // codes 01, 11 → 0111_0000
        let codes_at = framing + 9;
        assert_eq!(bytes[codes_at], 0b0111_0000);
        // first weights: 000 001 010 ...
        assert_eq!(bytes[codes_at + 1], 0b0000_0101);
        let report = inspect(&bytes).unwrap();
        assert_eq!(report.paper_bits, 140);
        assert_eq!(report.file_bytes, bytes.len());
        assert_eq!(report.tensors[0].max_code_bits, Some(2));
        assert_eq!(report.tensors[0].bit_histogram, BTreeMap::from([(3, 8), (5, 8)]));
    }

    #[test]
    fn empty_model_is_ten_bytes() {
        let bytes = pack(&HardenedModel::default()).unwrap();
        assert_eq!(bytes, [0x44, 0x46, 0x51, 0x31, 1, 0, 0, 0, 0, 0]);
        assert_eq!(unpack(&bytes).unwrap(), HardenedModel::default());
    }

    #[test]
    fn raw_record() {
        let m = HardenedModel {
            tensors: vec![HardenedTensor {
                name: "b".into(),
                data: TensorData::Raw {
                    shape: vec![3],
                    values: vec![1.5, -2.0, 0.1],
                },
            }],
        };
        let bytes = pack(&m).unwrap();
        // header 10 + name 3 + kind/ndim 2 + dim 4 + data 12
        assert_eq!(bytes.len(), 10 + 3 + 2 + 4 + 12);
        assert_eq!(bytes[13], 0);
        assert_eq!(unpack(&bytes).unwrap(), m);
        let r = inspect(&bytes).unwrap();
        assert_eq!(r.raw_tensors, vec!["b".to_string()]);
        assert_eq!(r.tensors[0].paper_bits, 96);
    }

    #[test]
    fn bad_magic_names_offset_zero() {
        let mut bytes = pack(&fixture()).unwrap();
        bytes[0] = b'X';
        match unpack(&bytes) {
            Err(Error::Codec { offset: 0, message }) => assert!(message.contains("magic")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn truncation_and_trailing_bytes_rejected() {
        let bytes = pack(&fixture()).unwrap();
        for cut in [3, 7, 12, bytes.len() - 1] {
            assert!(unpack(&bytes[..cut]).is_err(), "cut {cut}");
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(unpack(&extra).is_err());
    }

    #[test]
    fn out_of_range_bitwidth_rejected() {
        let mut m = fixture();
        if let TensorData::Quantized { b_min, .. } = &mut m.tensors[0].data {
            *b_min = 30;
        }
        // b_min above the group bitwidths cannot be packed
        assert!(pack(&m).is_err());

        let mut bytes = pack(&fixture()).unwrap();
        // raise b_min in the file so b_min + code exceeds 32
        let b_min_at = 10 + 2 + 1 + 1 + 1 + 4 + 4;
        bytes[b_min_at] = 31;
        let err = unpack(&bytes).unwrap_err().to_string();
        assert!(err.contains("out of range"), "{err}");
    }

    #[test]
    fn index_overflow_names_tensor_and_group() {
        let mut m = fixture();
        if let TensorData::Quantized { tensor, .. } = &mut m.tensors[0].data {
            tensor.indices[9] = 32;
        }
        let err = pack(&m).unwrap_err().to_string();
        assert!(err.contains("tensor w") && err.contains("group 1"), "{err}");
    }

    #[test]
    fn b_min_layer_decodes_from_b_min_fields() {
        // two groups at b_min = 3, so max_c = 0 and no code bytes
        let m = HardenedModel {
            tensors: vec![HardenedTensor {
                name: "x".into(),
                data: TensorData::Quantized {
                    b_min: 3,
                    tensor: QuantizedTensor {
                        shape: vec![2, 2],
                        group_size: 2,
                        bits: vec![3, 3],
                        indices: vec![7, 0, 5, 2],
                        scale: ScaleParams { min: 0.0, max: 7.0 },
                    },
                },
            }],
        };
        let bytes = pack(&m).unwrap();
        let body = &bytes[bytes.len() - 2..];
        // 111 000 101 010 → 1110_0010 1010_0000
        assert_eq!(body, [0b1110_0010, 0b1010_0000]);
        let back = unpack(&bytes).unwrap();
        assert_eq!(back.tensors[0].values().data(), &[7.0, 0.0, 5.0, 2.0]);
    }

    #[test]
    fn mean_bits_of_mixed_model() {
        let r = inspect(&pack(&fixture()).unwrap()).unwrap();
        assert!((r.mean_bits - (8.0 * 3.0 + 8.0 * 5.0) / 16.0).abs() < 1e-12);
    }

    fn arb_model() -> impl Strategy<Value = HardenedModel> {
        let tensor = (1usize..=200, prop::sample::select(vec![1usize, 4, 8, 16]), 1u8..=8, any::<u64>(), any::<bool>())
            .prop_map(|(d, g, b_min, seed, raw)| {
                let mut rng = crate::autodiff::Rng::new(seed);
                if raw {
                    let values = (0..d).map(|_| rng.gaussian() as f32).collect();
                    return HardenedTensor {
                        name: format!("raw{seed}"),
                        data: TensorData::Raw { shape: vec![d], values },
                    };
                }
                let groups = d.div_ceil(g);
                let bits: Vec<u8> = (0..groups).map(|_| b_min + rng.below(16.min(33 - b_min as usize)) as u8).collect();
                let indices = (0..d)
                    .map(|i| (rng.next_u64() % (1u64 << bits[i / g])) as u32)
                    .collect();
                let a = rng.gaussian() as f32 as f64;
                let b = (a + rng.next_f64()) as f32 as f64;
                HardenedTensor {
                    name: format!("q{seed}"),
                    data: TensorData::Quantized {
                        b_min,
                        tensor: QuantizedTensor {
                            shape: vec![d],
                            group_size: g,
                            bits,
                            indices,
                            scale: ScaleParams { min: a, max: b.max(a) },
                        },
                    },
                }
            });
        prop::collection::vec(tensor, 0..4).prop_map(|tensors| HardenedModel { tensors })
    }

    proptest! {
        #[test]
        fn round_trip(m in arb_model()) {
            let bytes = pack(&m).unwrap();
            let back = unpack(&bytes).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(pack(&back).unwrap(), bytes);
        }

        #[test]
        fn accounting_matches_file_size(m in arb_model()) {
            let bytes = pack(&m).unwrap();
            let r = inspect(&bytes).unwrap();
            prop_assert!(r.paper_bits <= r.file_bytes as u64 * 8);
            prop_assert_eq!(r.file_bytes as u64 * 8 - r.paper_bits, r.framing_bits + r.padding_bits);
        }
    }
}
