//! Sub-channel quantization with a greedy per-sub-channel clip search.
//!
//! The weight matrix is split into contiguous sub-channels, each sub-channel
//! tries every clip factor of a [`ClipGrid`], and keeps the one with the
//! smallest reconstruction error. Sub-channels are independent, so the
//! per-row search is also the joint optimum over the grid.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::quant::{
    channel_params, check_bits, dequantize, round_clip, ChannelParams, CodesTensor, QuantConfig,
    QuantMode, QuantParams,
};
use crate::tensor::{merge_subchannels, reshape_subchannels, Tensor2D};

/// Arithmetic grid of clip factors `start, start+step, ..` up to `stop`.
///
/// Points are computed as `start + k*step` for integral `k`; `stop` and
/// `1.0` are always members.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipGrid {
    pub start: f64,
    pub stop: f64,
    pub step: f64,
}

impl ClipGrid {
    /// `[0.5, 1.0]` in steps of `0.05`.
    pub const COARSE: ClipGrid = ClipGrid {
        start: 0.5,
        stop: 1.0,
        step: 0.05,
    };

    /// `[0.8, 1.0]` in steps of `0.02`.
    pub const FINE: ClipGrid = ClipGrid {
        start: 0.8,
        stop: 1.0,
        step: 0.02,
    };

    pub fn new(start: f64, stop: f64, step: f64) -> Result<Self> {
        let g = Self { start, stop, step };
        g.validate()?;
        Ok(g)
    }

    /// The singleton grid `{1.0}`: no clipping.
    pub fn unclipped() -> Self {
        Self {
            start: 1.0,
            stop: 1.0,
            step: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.start > 0.0
            && self.start <= self.stop
            && self.stop <= 1.0
            && self.step > 0.0
            && self.step.is_finite();
        if !ok {
            return Err(Error::config(format!(
                "invalid clip grid {self}: need 0 < start <= stop <= 1 and step > 0"
            )));
        }
        Ok(())
    }

    /// Grid points in ascending order.
    pub fn points(&self) -> Vec<f64> {
        let tol = 1e-9 * self.step;
        let mut pts = Vec::new();
        let mut k = 0u32;
        loop {
            let v = self.start + f64::from(k) * self.step;
            if v > self.stop + tol {
                break;
            }
            pts.push(v.min(self.stop));
            k += 1;
        }
        for anchor in [self.stop, 1.0] {
            match pts.last_mut() {
                Some(last) if (*last - anchor).abs() <= tol => *last = anchor,
                _ => pts.push(anchor),
            }
        }
        pts.dedup();
        pts
    }
}

impl fmt::Display for ClipGrid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}", self.start, self.stop, self.step)
    }
}

impl FromStr for ClipGrid {
    type Err = Error;

    /// Accepts `paper-alg1` (or `coarse`), `paper-libri` (or `fine`), `none`,
    /// or `start:stop:step`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper-alg1" | "coarse" => return Ok(Self::COARSE),
            "paper-libri" | "fine" => return Ok(Self::FINE),
            "none" => return Ok(Self::unclipped()),
            _ => {}
        }
        let parts: Vec<&str> = s.split(':').collect();
        if parts.len() != 3 {
            return Err(Error::config(format!(
                "grid '{s}' is neither a preset nor start:stop:step"
            )));
        }
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad number '{p}' in grid '{s}'")))
        };
        Self::new(num(parts[0])?, num(parts[1])?, num(parts[2])?)
    }
}

/// Error used to rank clip candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ClipMetric {
    #[default]
    MeanAbs,
    MeanSquare,
}

fn error_sum(row: &[f64], p: &ChannelParams, mode: QuantMode, bits: u8, metric: ClipMetric) -> f64 {
    row.iter()
        .map(|&v| {
            let d = v - p.dequantize(round_clip(p.unrounded(v), mode, bits));
            match metric {
                ClipMetric::MeanAbs => d.abs(),
                ClipMetric::MeanSquare => d * d,
            }
        })
        .sum()
}

fn row_error(row: &[f64], p: &ChannelParams, mode: QuantMode, bits: u8, metric: ClipMetric) -> f64 {
    error_sum(row, p, mode, bits, metric) / row.len() as f64
}

/// Mean absolute error accumulated from the per-group sums the search ranks.
/// Rounded addition is monotone, so a search that never picks a worse group
/// cannot report a worse total.
fn grouped_mae(w_sub: &Tensor2D, params: &QuantParams, mode: QuantMode, bits: u8) -> f64 {
    let total: f64 = w_sub
        .row_iter()
        .enumerate()
        .map(|(g, row)| error_sum(row, &params.channel(g), mode, bits, ClipMetric::MeanAbs))
        .sum();
    total / w_sub.len() as f64
}

/// Best clip factor for a single (sub-)channel; ties go to the larger factor.
pub fn select_clip(
    row: &[f64],
    mode: QuantMode,
    bits: u8,
    grid: &[f64],
    metric: ClipMetric,
) -> ChannelParams {
    let mut best: Option<(ChannelParams, f64)> = None;
    for &clip in grid.iter().rev() {
        let p = channel_params(mode, row, bits, clip);
        let err = row_error(row, &p, mode, bits, metric);
        if best.is_none_or(|(_, e)| err < e) {
            best = Some((p, err));
        }
    }
    best.expect("grid is non-empty").0
}

/// Greedy asymmetric clip search over rows already in sub-channel layout.
pub fn greedy_search_clip(
    w_sub: &Tensor2D,
    bits: u8,
    grid: &ClipGrid,
) -> Result<(CodesTensor, QuantParams)> {
    greedy_search_clip_with(
        w_sub,
        QuantMode::Asymmetric,
        bits,
        grid,
        ClipMetric::MeanAbs,
    )
}

pub fn greedy_search_clip_with(
    w_sub: &Tensor2D,
    mode: QuantMode,
    bits: u8,
    grid: &ClipGrid,
    metric: ClipMetric,
) -> Result<(CodesTensor, QuantParams)> {
    check_bits(mode, bits)?;
    grid.validate()?;
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::config("empty clip grid"));
    }
    let mut params = QuantParams::with_capacity(mode, w_sub.rows());
    let mut codes = Vec::with_capacity(w_sub.len());
    for row in w_sub.row_iter() {
        let p = select_clip(row, mode, bits, &points, metric);
        codes.extend(row.iter().map(|&v| round_clip(p.unrounded(v), mode, bits)));
        params.push(p);
    }
    let codes = CodesTensor::new(w_sub.rows(), w_sub.cols(), mode, bits, codes)?;
    Ok((codes, params))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubchannelQuantResult {
    /// De-quantized weights in the input shape.
    pub deq: Tensor2D,
    /// One entry per sub-channel, row-major over `(channel, sub-channel)`.
    pub params: QuantParams,
    /// Codes in sub-channel layout.
    pub codes: CodesTensor,
    pub subchannels: usize,
    pub mae: f64,
}

/// Split into sub-channels, search clip factors, de-quantize, and restore
/// the input shape.
pub fn quantize_subch_clip(w: &Tensor2D, cfg: &QuantConfig) -> Result<SubchannelQuantResult> {
    cfg.validate()?;
    let w_sub = reshape_subchannels(w, cfg.subchannels)?;
    let (codes, params) =
        greedy_search_clip_with(&w_sub, cfg.mode, cfg.bits, &cfg.clip_grid, cfg.clip_metric)?;
    let deq_sub = dequantize(&codes, &params)?;
    let deq = merge_subchannels(&deq_sub, cfg.subchannels)?;
    let mae = grouped_mae(&w_sub, &params, cfg.mode, cfg.bits);
    Ok(SubchannelQuantResult {
        deq,
        params,
        codes,
        subchannels: cfg.subchannels,
        mae,
    })
}

/// Number of stored metadata scalars: one scale per group, plus one minimum
/// per group in asymmetric mode.
pub fn metadata_count(cfg: &QuantConfig, rows: usize) -> usize {
    let per_group = match cfg.mode {
        QuantMode::Asymmetric => 2,
        QuantMode::Symmetric => 1,
    };
    rows * cfg.subchannels * per_group
}
