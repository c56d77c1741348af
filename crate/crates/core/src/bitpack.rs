//! Fixed-width code packing, the `SBQPACK1` container, and model-size
//! accounting for packed weights.
//!
//! Codes are packed least-significant-bit first: code `k` starts at bit
//! `(k * bits) % 8` of byte `(k * bits) / 8` and may straddle into the
//! next byte. Symmetric codes are offset by `2^(bits-1) - 1` so they pack
//! as unsigned values. Trailing bits of the last byte are zero.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "SBQPACK1"
//! version      u16       1
//! bits         u8
//! mode         u8        0 = asymmetric, 1 = symmetric
//! rows         u32
//! cols         u32
//! subchannels  u32
//! metadata     rows*subchannels x (scale f32, min_val f32)
//! payload      ceil(rows*cols*bits/8) bytes of packed codes
//! ```
//!
//! Symmetric containers store `min_val = 0`, so the container size depends
//! only on shape, bit width and sub-channel count.

use std::path::Path;

use crate::error::{Error, Result};
use crate::quant::{check_bits, dequantize, CodesTensor, FakeQuant, QuantMode, QuantParams};
use crate::subchannel::SubchannelQuantResult;
use crate::tensor::{merge_subchannels, Tensor2D};

pub const PACK_MAGIC: &[u8; 8] = b"SBQPACK1";
pub const PACK_VERSION: u16 = 1;
const HEADER_LEN: usize = 8 + 2 + 1 + 1 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedBlob {
    pub bits: u8,
    pub code_count: usize,
    pub bytes: Vec<u8>,
}

pub fn packed_len(code_count: usize, bits: u8) -> usize {
    (code_count * bits as usize).div_ceil(8)
}

fn offset(mode: QuantMode, bits: u8) -> i32 {
    -mode.min_code(bits)
}

/// Packs codes LSB-first at `q.bits()` bits per code.
pub fn pack_codes(q: &CodesTensor) -> Result<PackedBlob> {
    let bits = q.bits();
    let off = offset(q.mode(), bits);
    let limit = 1u32 << bits;
    let mut bytes = vec![0u8; packed_len(q.len(), bits)];
    let mut bit_pos = 0usize;
    for &c in q.codes() {
        let v = (c + off) as u32;
        if (c + off) < 0 || v >= limit {
            return Err(Error::Encoding(format!(
                "code {c} does not fit in {bits} bits"
            )));
        }
        let word = v << (bit_pos % 8);
        let byte = bit_pos / 8;
        bytes[byte] |= word as u8;
        if word >> 8 != 0 {
            bytes[byte + 1] |= (word >> 8) as u8;
        }
        bit_pos += bits as usize;
    }
    Ok(PackedBlob {
        bits,
        code_count: q.len(),
        bytes,
    })
}

/// Inverse of [`pack_codes`]; the result is a single row of `code_count` codes.
pub fn unpack_codes(b: &PackedBlob, mode: QuantMode) -> Result<CodesTensor> {
    check_bits(mode, b.bits).map_err(|e| Error::Decoding(e.to_string()))?;
    if b.code_count == 0 {
        return Err(Error::Decoding("blob holds no codes".into()));
    }
    let need = packed_len(b.code_count, b.bits);
    if b.bytes.len() != need {
        return Err(Error::Decoding(format!(
            "blob has {} bytes, {} codes at {} bits need {need}",
            b.bytes.len(),
            b.code_count,
            b.bits
        )));
    }
    let used_bits = b.code_count * b.bits as usize;
    if !used_bits.is_multiple_of(8) {
        let pad_mask = !((1u16 << (used_bits % 8)) - 1) as u8;
        if b.bytes[need - 1] & pad_mask != 0 {
            return Err(Error::Decoding("non-zero padding bits".into()));
        }
    }
    let off = offset(mode, b.bits);
    let mask = (1u32 << b.bits) - 1;
    let codes = (0..b.code_count)
        .map(|k| {
            let bit_pos = k * b.bits as usize;
            let byte = bit_pos / 8;
            let mut word = b.bytes[byte] as u32;
            if byte + 1 < b.bytes.len() {
                word |= (b.bytes[byte + 1] as u32) << 8;
            }
            ((word >> (bit_pos % 8)) & mask) as i32 - off
        })
        .collect();
    CodesTensor::new(1, b.code_count, mode, b.bits, codes)
        .map_err(|e| Error::Decoding(e.to_string()))
}

/// A packed-ready quantized tensor: codes in sub-channel layout plus the
/// per-group parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub rows: usize,
    pub cols: usize,
    pub subchannels: usize,
    pub codes: CodesTensor,
    pub params: QuantParams,
}

impl QuantizedTensor {
    pub fn from_subchannel(r: &SubchannelQuantResult) -> Self {
        Self {
            rows: r.deq.rows(),
            cols: r.deq.cols(),
            subchannels: r.subchannels,
            codes: r.codes.clone(),
            params: r.params.clone(),
        }
    }

    pub fn from_fake_quant(f: &FakeQuant) -> Self {
        Self {
            rows: f.deq.rows(),
            cols: f.deq.cols(),
            subchannels: 1,
            codes: f.codes.clone(),
            params: f.params.clone(),
        }
    }

    pub fn bits(&self) -> u8 {
        self.codes.bits()
    }

    pub fn mode(&self) -> QuantMode {
        self.codes.mode()
    }

    /// De-quantized tensor in the original `rows x cols` shape.
    pub fn dequantize(&self) -> Result<Tensor2D> {
        let sub = dequantize(&self.codes, &self.params)?;
        merge_subchannels(&sub, self.subchannels)
    }
}

/// Container size for a given shape; independent of the values.
pub fn container_len(rows: usize, cols: usize, bits: u8, subchannels: usize) -> usize {
    HEADER_LEN + rows * subchannels * 8 + packed_len(rows * cols, bits)
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Encoding(format!("{what} = {v} does not fit in u32")))
}

fn to_f32(v: f64, what: &str) -> Result<f32> {
    let f = v as f32;
    if !f.is_finite() {
        return Err(Error::Encoding(format!(
            "{what} {v} is not representable as f32"
        )));
    }
    Ok(f)
}

pub fn serialize(t: &QuantizedTensor) -> Result<Vec<u8>> {
    let groups = t.rows * t.subchannels;
    if t.params.len() != groups || t.codes.len() != t.rows * t.cols {
        return Err(Error::Encoding("inconsistent quantized tensor".into()));
    }
    let mut out = Vec::with_capacity(container_len(t.rows, t.cols, t.bits(), t.subchannels));
    out.extend_from_slice(PACK_MAGIC);
    out.extend_from_slice(&PACK_VERSION.to_le_bytes());
    out.push(t.bits());
    out.push(t.mode().as_u8());
    out.extend_from_slice(&to_u32(t.rows, "rows")?.to_le_bytes());
    out.extend_from_slice(&to_u32(t.cols, "cols")?.to_le_bytes());
    out.extend_from_slice(&to_u32(t.subchannels, "subchannels")?.to_le_bytes());
    for g in 0..groups {
        let scale = to_f32(t.params.scale[g], "scale")?;
        if scale <= 0.0 {
            return Err(Error::Encoding(format!(
                "scale {} underflows f32",
                t.params.scale[g]
            )));
        }
        out.extend_from_slice(&scale.to_le_bytes());
        out.extend_from_slice(&to_f32(t.params.min_val[g], "min_val")?.to_le_bytes());
    }
    out.extend_from_slice(&pack_codes(&t.codes)?.bytes);
    Ok(out)
}

/// Parses a container. Clip factors are not stored and come back as 1.0.
pub fn deserialize(bytes: &[u8]) -> Result<QuantizedTensor> {
    let bad = |m: &str| Error::Decoding(m.to_string());
    if bytes.len() < HEADER_LEN {
        return Err(bad("container shorter than its header"));
    }
    if &bytes[..8] != PACK_MAGIC {
        return Err(bad("bad container magic"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != PACK_VERSION {
        return Err(Error::Decoding(format!(
            "unsupported container version {version}"
        )));
    }
    let bits = bytes[10];
    let mode = QuantMode::from_u8(bytes[11])
        .ok_or_else(|| Error::Decoding(format!("unknown mode byte {}", bytes[11])))?;
    check_bits(mode, bits).map_err(|e| Error::Decoding(e.to_string()))?;
    let (rows, cols, subchannels) = (u32_at(12), u32_at(16), u32_at(20));
    if rows == 0 || cols == 0 || subchannels == 0 || cols % subchannels != 0 {
        return Err(Error::Decoding(format!(
            "invalid geometry rows={rows} cols={cols} subchannels={subchannels}"
        )));
    }
    let expected = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(bits as usize))
        .and_then(|_| rows.checked_mul(subchannels))
        .map(|_| container_len(rows, cols, bits, subchannels))
        .ok_or_else(|| bad("container geometry overflows"))?;
    if bytes.len() != expected {
        return Err(Error::Decoding(format!(
            "container is {} bytes, expected {expected}",
            bytes.len()
        )));
    }
    let groups = rows * subchannels;
    let mut params = QuantParams::with_capacity(mode, groups);
    let f32_at = |i: usize| f32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as f64;
    for g in 0..groups {
        let at = HEADER_LEN + 8 * g;
        let (scale, min_val) = (f32_at(at), f32_at(at + 4));
        if !(scale > 0.0 && scale.is_finite() && min_val.is_finite()) {
            return Err(Error::Decoding(format!("invalid metadata in group {g}")));
        }
        params.push(crate::quant::ChannelParams {
            scale,
            min_val,
            clip: 1.0,
        });
    }
    let payload = &bytes[HEADER_LEN + 8 * groups..];
    let blob = PackedBlob {
        bits,
        code_count: rows * cols,
        bytes: payload.to_vec(),
    };
    let codes = unpack_codes(&blob, mode)?.reshaped(groups, cols / subchannels)?;
    Ok(QuantizedTensor {
        rows,
        cols,
        subchannels,
        codes,
        params,
    })
}

pub fn write_container(t: &QuantizedTensor, path: impl AsRef<Path>) -> Result<usize> {
    let path = path.as_ref();
    let bytes = serialize(t)?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(bytes.len())
}

pub fn read_container(path: impl AsRef<Path>) -> Result<QuantizedTensor> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    deserialize(&bytes)
}

pub const METADATA_BYTES_PER_SCALAR: u64 = 4;
pub const FLOAT_BYTES_PER_PARAM: u64 = 4;

/// Disk-size model for a partially quantized network.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SizeModel {
    pub quantized_params: u64,
    pub unquantized_params: u64,
    pub subchannel_groups: u64,
    pub bits: u8,
    /// 2 for asymmetric (scale, min), 1 for symmetric (scale).
    pub metadata_scalars_per_group: u8,
}

impl SizeModel {
    pub fn float_only(params: u64) -> Self {
        Self {
            quantized_params: 0,
            unquantized_params: params,
            subchannel_groups: 0,
            bits: 32,
            metadata_scalars_per_group: 0,
        }
    }

    pub fn packed_weight_bytes(&self) -> u64 {
        (self.quantized_params * self.bits as u64).div_ceil(8)
    }

    pub fn float_bytes(&self) -> u64 {
        self.unquantized_params * FLOAT_BYTES_PER_PARAM
    }

    pub fn metadata_bytes(&self) -> u64 {
        self.subchannel_groups * self.metadata_scalars_per_group as u64 * METADATA_BYTES_PER_SCALAR
    }
}

pub fn model_size_bytes(m: &SizeModel) -> u64 {
    m.packed_weight_bytes() + m.float_bytes() + m.metadata_bytes()
}

/// Assumptions used to turn a parameter count into a [`SizeModel`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SizeAssumptions {
    pub total_params: u64,
    /// Fraction of parameters that get quantized (0 for a float model).
    pub quantized_share: f64,
    pub bits: u8,
    pub mode: QuantMode,
    pub subchannels: u64,
    /// Length of a channel in the quantized layers.
    pub channel_width: u64,
}

impl SizeAssumptions {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.quantized_share) {
            return Err(Error::config("quantized share must lie in [0, 1]"));
        }
        check_bits(self.mode, self.bits)?;
        if self.subchannels == 0 || self.channel_width == 0 {
            return Err(Error::config(
                "subchannels and channel width must be positive",
            ));
        }
        if !self.channel_width.is_multiple_of(self.subchannels) {
            return Err(Error::dim(format!(
                "channel width {} is not divisible into {} sub-channels",
                self.channel_width, self.subchannels
            )));
        }
        Ok(())
    }

    pub fn model(&self) -> Result<SizeModel> {
        self.validate()?;
        let quantized = (self.total_params as f64 * self.quantized_share).round() as u64;
        let channels = quantized.div_ceil(self.channel_width);
        Ok(SizeModel {
            quantized_params: quantized,
            unquantized_params: self.total_params - quantized,
            subchannel_groups: channels * self.subchannels,
            bits: self.bits,
            metadata_scalars_per_group: match self.mode {
                QuantMode::Asymmetric => 2,
                QuantMode::Symmetric => 1,
            },
        })
    }
}
