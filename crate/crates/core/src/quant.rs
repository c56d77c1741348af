//! Per-channel uniform quantization: parameter estimation, rounding to
//! integer codes, and de-quantization, in symmetric and asymmetric forms.
//!
//! Conventions:
//! - rounding is round-half-to-even;
//! - a clip factor `c` shrinks the asymmetric range `[m, M]` about its
//!   midpoint to `[mid - c*h, mid + c*h]` with `h = (M - m) / 2`, and
//!   scales the symmetric bound `max|w|` to `c * max|w|`;
//! - a degenerate channel (zero range, or all zeros for symmetric) gets
//!   `scale = 1` so that every code is 0 and the channel reconstructs exactly.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::subchannel::{ClipGrid, ClipMetric};
use crate::tensor::Tensor2D;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum QuantMode {
    Symmetric,
    Asymmetric,
}

impl QuantMode {
    /// Largest legal code.
    pub fn max_code(self, bits: u8) -> i32 {
        match self {
            QuantMode::Asymmetric => (1i32 << bits) - 1,
            QuantMode::Symmetric => (1i32 << (bits - 1)) - 1,
        }
    }

    /// Smallest legal code.
    pub fn min_code(self, bits: u8) -> i32 {
        match self {
            QuantMode::Asymmetric => 0,
            QuantMode::Symmetric => -self.max_code(bits),
        }
    }

    /// Number of quantization steps between the smallest representable
    /// value and the reference point (min for asymmetric, zero for symmetric).
    pub fn levels(self, bits: u8) -> f64 {
        self.max_code(bits) as f64
    }

    pub fn as_u8(self) -> u8 {
        match self {
            QuantMode::Asymmetric => 0,
            QuantMode::Symmetric => 1,
        }
    }

    pub fn from_u8(v: u8) -> Option<Self> {
        match v {
            0 => Some(QuantMode::Asymmetric),
            1 => Some(QuantMode::Symmetric),
            _ => None,
        }
    }
}

impl fmt::Display for QuantMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            QuantMode::Symmetric => write!(f, "sym"),
            QuantMode::Asymmetric => write!(f, "asym"),
        }
    }
}

impl FromStr for QuantMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sym" | "symmetric" => Ok(QuantMode::Symmetric),
            "asym" | "asymmetric" => Ok(QuantMode::Asymmetric),
            _ => Err(Error::config(format!("unknown quantization mode '{s}'"))),
        }
    }
}

/// Checks that `bits` is usable with `mode`.
///
/// Symmetric quantization needs at least 2 bits: with 1 bit the magnitude
/// bound `2^(bits-1) - 1` is zero and no scale exists.
pub fn check_bits(mode: QuantMode, bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(Error::config(format!("bits must be in 1..=8, got {bits}")));
    }
    if mode == QuantMode::Symmetric && bits < 2 {
        return Err(Error::config(
            "symmetric quantization needs at least 2 bits (1 bit leaves no magnitude levels)",
        ));
    }
    Ok(())
}

pub(crate) fn check_clip(clip: f64) -> Result<()> {
    if !(clip > 0.0 && clip <= 1.0) {
        return Err(Error::config(format!(
            "clip factor must lie in (0, 1], got {clip}"
        )));
    }
    Ok(())
}

/// Per-(sub-)channel quantization metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantParams {
    pub mode: QuantMode,
    pub scale: Vec<f64>,
    /// Lower end of the clipped range; all zeros in symmetric mode.
    pub min_val: Vec<f64>,
    pub clip: Vec<f64>,
}

impl QuantParams {
    pub fn len(&self) -> usize {
        self.scale.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale.is_empty()
    }

    pub(crate) fn with_capacity(mode: QuantMode, n: usize) -> Self {
        Self {
            mode,
            scale: Vec::with_capacity(n),
            min_val: Vec::with_capacity(n),
            clip: Vec::with_capacity(n),
        }
    }

    pub(crate) fn push(&mut self, p: ChannelParams) {
        self.scale.push(p.scale);
        self.min_val.push(p.min_val);
        self.clip.push(p.clip);
    }

    pub fn channel(&self, r: usize) -> ChannelParams {
        ChannelParams {
            scale: self.scale[r],
            min_val: self.min_val[r],
            clip: self.clip[r],
        }
    }
}

/// Parameters of a single (sub-)channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ChannelParams {
    pub scale: f64,
    pub min_val: f64,
    pub clip: f64,
}

impl ChannelParams {
    /// Real-valued code position before rounding and clamping.
    #[inline]
    pub fn unrounded(&self, w: f64) -> f64 {
        (w - self.min_val) / self.scale
    }

    #[inline]
    pub fn dequantize(&self, code: i32) -> f64 {
        code as f64 * self.scale + self.min_val
    }
}

/// Asymmetric parameters for one channel.
pub fn channel_params_asym(row: &[f64], bits: u8, clip: f64) -> ChannelParams {
    let (lo, hi) = min_max(row);
    if lo == hi {
        return ChannelParams {
            scale: 1.0,
            min_val: lo,
            clip,
        };
    }
    let mid = 0.5 * (hi + lo);
    let half = 0.5 * (hi - lo);
    ChannelParams {
        scale: 2.0 * clip * half / QuantMode::Asymmetric.levels(bits),
        min_val: mid - clip * half,
        clip,
    }
}

/// Symmetric parameters for one channel.
pub fn channel_params_sym(row: &[f64], bits: u8, clip: f64) -> ChannelParams {
    let bound = row.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if bound == 0.0 {
        1.0
    } else {
        clip * bound / QuantMode::Symmetric.levels(bits)
    };
    ChannelParams {
        scale,
        min_val: 0.0,
        clip,
    }
}

pub fn channel_params(mode: QuantMode, row: &[f64], bits: u8, clip: f64) -> ChannelParams {
    match mode {
        QuantMode::Asymmetric => channel_params_asym(row, bits, clip),
        QuantMode::Symmetric => channel_params_sym(row, bits, clip),
    }
}

/// Rounds (half to even) and clamps one value to a legal code.
#[inline]
pub fn round_clip(unrounded: f64, mode: QuantMode, bits: u8) -> i32 {
    let lo = mode.min_code(bits) as f64;
    let hi = mode.max_code(bits) as f64;
    unrounded.round_ties_even().clamp(lo, hi) as i32
}

pub(crate) fn min_max(row: &[f64]) -> (f64, f64) {
    row.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

fn params_for(mode: QuantMode, w: &Tensor2D, bits: u8, clip: &[f64]) -> Result<QuantParams> {
    check_bits(mode, bits)?;
    if clip.len() != w.rows() {
        return Err(Error::dim(format!(
            "{} clip factors for {} channels",
            clip.len(),
            w.rows()
        )));
    }
    clip.iter().try_for_each(|&c| check_clip(c))?;
    let mut p = QuantParams::with_capacity(mode, w.rows());
    for (row, &c) in w.row_iter().zip(clip) {
        p.push(channel_params(mode, row, bits, c));
    }
    Ok(p)
}

/// Per-channel scale and minimum for asymmetric quantization.
pub fn scale_and_min_asym(w: &Tensor2D, bits: u8, clip: &[f64]) -> Result<QuantParams> {
    params_for(QuantMode::Asymmetric, w, bits, clip)
}

/// Per-channel scale for symmetric quantization.
pub fn scale_sym(w: &Tensor2D, bits: u8, clip: &[f64]) -> Result<QuantParams> {
    params_for(QuantMode::Symmetric, w, bits, clip)
}

/// Integer codes in row-major order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CodesTensor {
    rows: usize,
    cols: usize,
    mode: QuantMode,
    bits: u8,
    codes: Vec<i32>,
}

impl CodesTensor {
    /// Validates shape and code range.
    pub fn new(
        rows: usize,
        cols: usize,
        mode: QuantMode,
        bits: u8,
        codes: Vec<i32>,
    ) -> Result<Self> {
        check_bits(mode, bits)?;
        if rows == 0 || cols == 0 || codes.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} codes for shape {rows}x{cols}",
                codes.len()
            )));
        }
        let (lo, hi) = (mode.min_code(bits), mode.max_code(bits));
        if let Some(bad) = codes.iter().find(|c| !(lo..=hi).contains(*c)) {
            return Err(Error::Encoding(format!(
                "code {bad} outside [{lo}, {hi}] for {bits}-bit {mode}"
            )));
        }
        Ok(Self {
            rows,
            cols,
            mode,
            bits,
            codes,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn mode(&self) -> QuantMode {
        self.mode
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    /// Same codes under another row/column split.
    pub fn reshaped(self, rows: usize, cols: usize) -> Result<Self> {
        if rows * cols != self.codes.len() {
            return Err(Error::dim("code count does not match new shape"));
        }
        Ok(Self { rows, cols, ..self })
    }

    pub fn distinct(&self) -> Vec<i32> {
        let mut v = self.codes.clone();
        v.sort_unstable();
        v.dedup();
        v
    }
}

/// Rounds `(w - min_val) / scale` per channel and clamps to the legal code range.
pub fn quantize_codes(w: &Tensor2D, p: &QuantParams, bits: u8) -> Result<CodesTensor> {
    check_bits(p.mode, bits)?;
    if p.len() != w.rows() {
        return Err(Error::dim(format!(
            "{} parameter sets for {} channels",
            p.len(),
            w.rows()
        )));
    }
    let mut codes = Vec::with_capacity(w.len());
    for (r, row) in w.row_iter().enumerate() {
        let cp = p.channel(r);
        codes.extend(
            row.iter()
                .map(|&v| round_clip(cp.unrounded(v), p.mode, bits)),
        );
    }
    CodesTensor::new(w.rows(), w.cols(), p.mode, bits, codes)
}

pub fn dequantize(q: &CodesTensor, p: &QuantParams) -> Result<Tensor2D> {
    if p.len() != q.rows() || p.mode != q.mode() {
        return Err(Error::dim(format!(
            "{} {} parameter sets for {} {} code rows",
            p.len(),
            p.mode,
            q.rows(),
            q.mode()
        )));
    }
    let data = q
        .codes()
        .chunks_exact(q.cols())
        .enumerate()
        .flat_map(|(r, row)| {
            let cp = p.channel(r);
            row.iter().map(move |&c| cp.dequantize(c))
        })
        .collect();
    Tensor2D::new(q.rows(), q.cols(), data)
}

/// Output of a quantize/de-quantize pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FakeQuant {
    pub deq: Tensor2D,
    pub params: QuantParams,
    pub codes: CodesTensor,
}

/// Per-channel fake quantization with no clipping.
///
/// Uses `cfg.bits` and `cfg.mode` only; sub-channels and clip search are
/// handled by [`crate::subchannel::quantize_subch_clip`].
pub fn fake_quant(w: &Tensor2D, cfg: &QuantConfig) -> Result<FakeQuant> {
    let clip = vec![1.0; w.rows()];
    let params = params_for(cfg.mode, w, cfg.bits, &clip)?;
    let codes = quantize_codes(w, &params, cfg.bits)?;
    let deq = dequantize(&codes, &params)?;
    Ok(FakeQuant { deq, params, codes })
}

#[derive(Debug, Clone, PartialEq)]
pub struct QuantConfig {
    pub bits: u8,
    pub mode: QuantMode,
    pub subchannels: usize,
    pub clip_grid: ClipGrid,
    pub clip_metric: ClipMetric,
    /// Treat scale and min as constants in the backward pass (full STE).
    pub stop_gradient_scale: bool,
    pub msqe_weight: f64,
}

impl Default for QuantConfig {
    fn default() -> Self {
        Self {
            bits: 2,
            mode: QuantMode::Asymmetric,
            subchannels: 1,
            clip_grid: ClipGrid::unclipped(),
            clip_metric: ClipMetric::MeanAbs,
            stop_gradient_scale: true,
            msqe_weight: 0.0,
        }
    }
}

impl QuantConfig {
    pub fn symmetric(bits: u8) -> Self {
        Self {
            bits,
            mode: QuantMode::Symmetric,
            ..Self::default()
        }
    }

    pub fn asymmetric(bits: u8) -> Self {
        Self {
            bits,
            ..Self::default()
        }
    }

    /// Asymmetric with `subchannels` groups per channel and greedy clip search.
    pub fn subchannel_clip(bits: u8, subchannels: usize, grid: ClipGrid) -> Self {
        Self {
            bits,
            subchannels,
            clip_grid: grid,
            stop_gradient_scale: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_bits(self.mode, self.bits)?;
        if self.subchannels == 0 {
            return Err(Error::config("subchannels must be at least 1"));
        }
        self.clip_grid.validate()?;
        if !(self.msqe_weight >= 0.0 && self.msqe_weight.is_finite()) {
            return Err(Error::config(format!(
                "msqe weight must be a finite non-negative number, got {}",
                self.msqe_weight
            )));
        }
        Ok(())
    }
}
