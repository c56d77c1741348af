//! Quantization-error sweeps over standard-normal weight matrices.
//!
//! Every `(N, seed)` cell draws one `[channels x N]` tensor and runs all
//! methods on it, so method comparisons are paired.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::quant::{QuantConfig, QuantMode};
use crate::subchannel::{quantize_subch_clip, ClipGrid};
use crate::tensor::randn;

pub const DEFAULT_WIDTHS: [usize; 5] = [32, 64, 128, 256, 512];
pub const DEFAULT_CHANNELS: usize = 32;
/// Seeds per cell.
pub const DEFAULT_SEEDS: usize = 10;

/// A named error-sweep method: `{sym|asym}-<S>sub[-clip]`.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepMethod {
    pub name: String,
    pub mode: QuantMode,
    pub subchannels: usize,
    pub clip: bool,
}

impl SweepMethod {
    pub fn config(&self, bits: u8) -> QuantConfig {
        QuantConfig {
            bits,
            mode: self.mode,
            subchannels: self.subchannels,
            clip_grid: if self.clip {
                ClipGrid::COARSE
            } else {
                ClipGrid::unclipped()
            },
            ..QuantConfig::default()
        }
    }

    pub fn defaults() -> Vec<SweepMethod> {
        [
            "sym-1sub",
            "asym-1sub",
            "asym-4sub",
            "asym-8sub",
            "asym-4sub-clip",
            "asym-8sub-clip",
        ]
        .iter()
        .map(|s| s.parse().expect("valid preset"))
        .collect()
    }
}

impl FromStr for SweepMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || {
            Error::config(format!(
                "method '{s}' is not of the form {{sym|asym}}-<S>sub[-clip]"
            ))
        };
        let mut parts = s.split('-');
        let mode: QuantMode = parts.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let sub = parts.next().ok_or_else(bad)?;
        let subchannels: usize = sub
            .strip_suffix("sub")
            .and_then(|n| n.parse().ok())
            .filter(|&n| n > 0)
            .ok_or_else(bad)?;
        let clip = match parts.next() {
            None => false,
            Some("clip") => true,
            Some(_) => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(SweepMethod {
            name: s.to_string(),
            mode,
            subchannels,
            clip,
        })
    }
}

impl fmt::Display for SweepMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepSpec {
    pub channels: usize,
    pub widths: Vec<usize>,
    pub methods: Vec<SweepMethod>,
    pub seeds: usize,
    pub bits: u8,
    /// Mixed into every cell seed.
    pub base_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            channels: DEFAULT_CHANNELS,
            widths: DEFAULT_WIDTHS.to_vec(),
            methods: SweepMethod::defaults(),
            seeds: DEFAULT_SEEDS,
            bits: 2,
            base_seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty()
            || self.methods.is_empty()
            || self.seeds == 0
            || self.channels == 0
        {
            return Err(Error::config(
                "sweep needs channels, widths, methods and seeds",
            ));
        }
        if self.widths.contains(&0) {
            return Err(Error::config("sweep widths must be positive"));
        }
        for m in &self.methods {
            m.config(self.bits).validate()?;
        }
        Ok(())
    }
}

/// Seed for the tensor of cell `(width, index)`.
pub fn cell_seed(base_seed: u64, width: usize, index: usize) -> u64 {
    // splitmix64 finalizer over a simple combination
    let mut z = base_seed
        .wrapping_add((width as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add((index as u64).wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorRecord {
    pub method: String,
    pub n: usize,
    pub seed: usize,
    pub mae: f64,
}

/// A cell that could not run, e.g. a width not divisible by the sub-channel count.
#[derive(Debug, Clone, PartialEq)]
pub struct CellFailure {
    pub method: String,
    pub n: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ErrorCurve {
    pub records: Vec<ErrorRecord>,
    pub failures: Vec<CellFailure>,
}

/// Mean and standard error of the mean.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeanSe {
    pub mean: f64,
    pub se: f64,
    pub count: usize,
}

pub fn mean_se(values: &[f64]) -> MeanSe {
    let n = values.len();
    let mean = values.iter().sum::<f64>() / n as f64;
    let se = if n > 1 {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    } else {
        0.0
    };
    MeanSe { mean, se, count: n }
}

impl ErrorCurve {
    pub fn sort(&mut self) {
        self.records
            .sort_by(|a, b| (&a.method, a.n, a.seed).cmp(&(&b.method, b.n, b.seed)));
        self.failures
            .sort_by(|a, b| (&a.method, a.n).cmp(&(&b.method, b.n)));
    }

    /// Per-seed errors of one method at one width, ordered by seed.
    pub fn cell(&self, method: &str, n: usize) -> Vec<f64> {
        let mut v: Vec<&ErrorRecord> = self
            .records
            .iter()
            .filter(|r| r.method == method && r.n == n)
            .collect();
        v.sort_by_key(|r| r.seed);
        v.into_iter().map(|r| r.mae).collect()
    }

    pub fn summary(&self) -> BTreeMap<(String, usize), MeanSe> {
        let mut groups: BTreeMap<(String, usize), Vec<f64>> = BTreeMap::new();
        for r in &self.records {
            groups
                .entry((r.method.clone(), r.n))
                .or_default()
                .push(r.mae);
        }
        groups.into_iter().map(|(k, v)| (k, mean_se(&v))).collect()
    }

    /// Paired difference `worse - better` across seeds at width `n`.
    pub fn paired_gap(&self, worse: &str, better: &str, n: usize) -> Option<MeanSe> {
        let a = self.cell(worse, n);
        let b = self.cell(better, n);
        if a.is_empty() || a.len() != b.len() {
            return None;
        }
        let d: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x - y).collect();
        Some(mean_se(&d))
    }

    /// CSV text: header `method,n,seed,mae`, sorted rows, 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut sorted = self.clone();
        sorted.sort();
        let mut s = String::from("method,n,seed,mae\n");
        for r in &sorted.records {
            s.push_str(&format!("{},{},{},{:.8e}\n", r.method, r.n, r.seed, r.mae));
        }
        s
    }
}

pub fn run_error_sweep(spec: &SweepSpec) -> Result<ErrorCurve> {
    spec.validate()?;
    let cells: Vec<(usize, usize)> = spec
        .widths
        .iter()
        .flat_map(|&n| (0..spec.seeds).map(move |s| (n, s)))
        .collect();
    let results: Vec<Result<Vec<std::result::Result<ErrorRecord, CellFailure>>>> = cells
        .par_iter()
        .map(|&(n, s)| {
            let w = randn(spec.channels, n, cell_seed(spec.base_seed, n, s))?;
            Ok(spec
                .methods
                .iter()
                .map(|m| match quantize_subch_clip(&w, &m.config(spec.bits)) {
                    Ok(r) => Ok(ErrorRecord {
                        method: m.name.clone(),
                        n,
                        seed: s,
                        mae: r.mae,
                    }),
                    Err(e) => Err(CellFailure {
                        method: m.name.clone(),
                        n,
                        message: e.to_string(),
                    }),
                })
                .collect())
        })
        .collect();
    let mut curve = ErrorCurve::default();
    for cell in results {
        for r in cell? {
            match r {
                Ok(rec) => curve.records.push(rec),
                Err(f) => {
                    if !curve.failures.contains(&f) {
                        curve.failures.push(f);
                    }
                }
            }
        }
    }
    curve.sort();
    Ok(curve)
}

pub fn write_csv(curve: &ErrorCurve, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(curve.to_csv().as_bytes())
        .map_err(|e| Error::io(path, e))
}
