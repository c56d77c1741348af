//! Command-line front end.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data, shape or
//! format error, 3 numeric or training failure. Summaries are printed as
//! `key=value` pairs.

use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};

use crate::bench::{run_error_sweep, SweepMethod, SweepSpec, DEFAULT_SEEDS};
use crate::bitpack::{
    model_size_bytes, read_container, write_container, QuantizedTensor, SizeAssumptions, SizeModel,
};
use crate::error::{Error, Result};
use crate::quant::{QuantConfig, QuantMode};
use crate::subchannel::{quantize_subch_clip, ClipGrid};
use crate::tensor::{read_t2d, write_t2d};
use crate::train::{train_toy, Method, TrainConfig, DEFAULT_MSQE_WEIGHT};

#[derive(Debug, Parser)]
#[command(name = "sbq", version, about = "Low-bit weight quantization toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum QuantMethod {
    /// symmetric per-channel
    Sym,
    /// asymmetric per-channel
    Asym,
    /// asymmetric with scale backprop (same forward as asym)
    AsymSc,
    /// asymmetric sub-channels with greedy clip search
    SubchClip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum TrainMethod {
    Float,
    Sym,
    Asym,
    AsymSc,
    SubchClip,
}

impl From<TrainMethod> for Method {
    fn from(m: TrainMethod) -> Self {
        match m {
            TrainMethod::Float => Method::Float,
            TrainMethod::Sym => Method::I2Wsym,
            TrainMethod::Asym => Method::I2Wasym,
            TrainMethod::AsymSc => Method::I2WasymSc,
            TrainMethod::SubchClip => Method::I2WasymScSubchClip,
        }
    }
}

fn parse_bits(s: &str) -> std::result::Result<u8, String> {
    match s {
        "1" | "2" | "4" | "8" => Ok(s.parse().unwrap()),
        _ => Err(format!("bits must be one of 1, 2, 4, 8 (got '{s}')")),
    }
}

fn parse_grid(s: &str) -> std::result::Result<ClipGrid, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Quantize a SBQTENS1 tensor into a SBQPACK1 container.
    Quantize {
        /// Input tensor file.
        input: PathBuf,
        #[arg(long, value_enum, default_value = "asym")]
        method: QuantMethod,
        #[arg(long, default_value = "2", value_parser = parse_bits)]
        bits: u8,
        /// Sub-channels per channel [default: 4 for subch-clip, else 1].
        #[arg(long)]
        subchannels: Option<usize>,
        /// Clip grid: paper-alg1, paper-libri, none, or start:stop:step
        /// [default: paper-alg1 for subch-clip, else none].
        #[arg(long, value_parser = parse_grid)]
        grid: Option<ClipGrid>,
        /// Accepted for uniformity; quantization is deterministic.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output container [default: input with .sbq extension].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Expand a SBQPACK1 container back into a SBQTENS1 tensor.
    Dequantize {
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output tensor [default: input with .t2d extension].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Mean-absolute-error sweep over standard-normal tensors (CSV).
    Sweep {
        #[arg(long, default_value_t = 32)]
        channels: usize,
        /// Comma-separated channel widths.
        #[arg(long, value_delimiter = ',', default_value = "32,64,128,256,512")]
        widths: Vec<usize>,
        /// Comma-separated methods, each {sym|asym}-<S>sub[-clip].
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "sym-1sub,asym-1sub,asym-4sub,asym-8sub,asym-4sub-clip,asym-8sub-clip"
        )]
        methods: Vec<String>,
        /// Tensors per (method, width) cell.
        #[arg(long, default_value_t = DEFAULT_SEEDS)]
        seeds: usize,
        #[arg(long, default_value = "2", value_parser = parse_bits)]
        bits: u8,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Disk size of a partially quantized model.
    Size {
        /// Total parameter count.
        #[arg(long, default_value_t = 118_000_000)]
        params: u64,
        /// Fraction of parameters that are quantized.
        #[arg(long, default_value_t = 0.95)]
        quantized_share: f64,
        /// Report the all-float model instead.
        #[arg(long)]
        float: bool,
        #[arg(long, default_value = "2", value_parser = parse_bits)]
        bits: u8,
        #[arg(long, value_enum, default_value = "asym")]
        method: QuantMethod,
        #[arg(long, default_value_t = 1)]
        subchannels: u64,
        /// Channel length of the quantized layers.
        #[arg(long, default_value_t = 512)]
        channel_width: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the toy student network and write its loss trace (CSV).
    TrainToy {
        #[arg(long, value_enum, default_value = "asym")]
        method: TrainMethod,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2000)]
        steps: usize,
        #[arg(long, default_value_t = 0.1)]
        lr: f64,
        #[arg(long, default_value_t = DEFAULT_MSQE_WEIGHT)]
        msqe_weight: f64,
        #[arg(long, default_value = "2", value_parser = parse_bits)]
        bits: u8,
        #[arg(long, default_value_t = 4)]
        subchannels: usize,
        #[arg(long, default_value = "paper-libri", value_parser = parse_grid)]
        grid: ClipGrid,
        /// CSV destination; printed to stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Dimension(_) | Error::Encoding(_) | Error::Decoding(_) | Error::Io { .. } => 2,
        Error::Training { .. } => 3,
    }
}

fn quant_config(
    method: QuantMethod,
    bits: u8,
    subchannels: Option<usize>,
    grid: Option<ClipGrid>,
) -> QuantConfig {
    let (mode, default_sub, default_grid) = match method {
        QuantMethod::Sym => (QuantMode::Symmetric, 1, ClipGrid::unclipped()),
        QuantMethod::Asym | QuantMethod::AsymSc => {
            (QuantMode::Asymmetric, 1, ClipGrid::unclipped())
        }
        QuantMethod::SubchClip => (QuantMode::Asymmetric, 4, ClipGrid::COARSE),
    };
    QuantConfig {
        bits,
        mode,
        subchannels: subchannels.unwrap_or(default_sub),
        clip_grid: grid.unwrap_or(default_grid),
        stop_gradient_scale: matches!(method, QuantMethod::Sym | QuantMethod::Asym),
        ..QuantConfig::default()
    }
}

fn emit(text: &str, out: Option<&Path>, stdout: &mut dyn Write) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => stdout
            .write_all(text.as_bytes())
            .map_err(|e| Error::io("<stdout>", e)),
    }
}

fn say(stdout: &mut dyn Write, line: String) -> Result<()> {
    writeln!(stdout, "{line}").map_err(|e| Error::io("<stdout>", e))
}

/// Runs a parsed command, writing summaries to `stdout`.
pub fn execute(cmd: Command, stdout: &mut dyn Write) -> Result<()> {
    match cmd {
        Command::Quantize {
            input,
            method,
            bits,
            subchannels,
            grid,
            seed: _,
            out,
        } => {
            let cfg = quant_config(method, bits, subchannels, grid);
            cfg.validate()?;
            let w = read_t2d(&input)?;
            let r = quantize_subch_clip(&w, &cfg)?;
            let out = out.unwrap_or_else(|| input.with_extension("sbq"));
            let bytes = write_container(&QuantizedTensor::from_subchannel(&r), &out)?;
            say(
                stdout,
                format!(
                    "mae={} bytes={} subchannels={}",
                    r.mae, bytes, cfg.subchannels
                ),
            )
        }
        Command::Dequantize {
            input,
            seed: _,
            out,
        } => {
            let q = read_container(&input)?;
            let deq = q.dequantize()?;
            let out = out.unwrap_or_else(|| input.with_extension("t2d"));
            write_t2d(&deq, &out)?;
            say(
                stdout,
                format!(
                    "rows={} cols={} out={}",
                    deq.rows(),
                    deq.cols(),
                    out.display()
                ),
            )
        }
        Command::Sweep {
            channels,
            widths,
            methods,
            seeds,
            bits,
            seed,
            out,
        } => {
            let methods = methods
                .iter()
                .map(|m| m.parse::<SweepMethod>())
                .collect::<Result<Vec<_>>>()?;
            let spec = SweepSpec {
                channels,
                widths,
                methods,
                seeds,
                bits,
                base_seed: seed,
            };
            let curve = run_error_sweep(&spec)?;
            emit(&curve.to_csv(), out.as_deref(), stdout)?;
            if out.is_some() {
                for ((method, n), s) in curve.summary() {
                    say(
                        stdout,
                        format!(
                            "method={method} n={n} mean_mae={:.6} se={:.6}",
                            s.mean, s.se
                        ),
                    )?;
                }
            }
            for f in &curve.failures {
                eprintln!("skipped method={} n={}: {}", f.method, f.n, f.message);
            }
            Ok(())
        }
        Command::Size {
            params,
            quantized_share,
            float,
            bits,
            method,
            subchannels,
            channel_width,
            seed: _,
            out,
        } => {
            let mode = match method {
                QuantMethod::Sym => QuantMode::Symmetric,
                _ => QuantMode::Asymmetric,
            };
            let assumptions = SizeAssumptions {
                total_params: params,
                quantized_share: if float { 0.0 } else { quantized_share },
                bits,
                mode,
                subchannels,
                channel_width,
            };
            let model = if float {
                SizeModel::float_only(params)
            } else {
                assumptions.model()?
            };
            let report = size_report(&assumptions, &model, float);
            emit(&report, out.as_deref(), stdout)?;
            if out.is_some() {
                say(
                    stdout,
                    format!("total_mb={:.3}", model_size_bytes(&model) as f64 / 1e6),
                )?;
            }
            Ok(())
        }
        Command::TrainToy {
            method,
            seed,
            steps,
            lr,
            msqe_weight,
            bits,
            subchannels,
            grid,
            out,
        } => {
            let cfg = TrainConfig {
                method: method.into(),
                seed,
                steps,
                learning_rate: lr,
                msqe_weight,
                bits,
                subchannels,
                grid,
            };
            let run = train_toy(&cfg)?;
            emit(&run.to_csv(), out.as_deref(), stdout)?;
            if out.is_some() {
                say(
                    stdout,
                    format!(
                        "method={} final_loss={:.9e} final_msqe={:.9e}",
                        run.method,
                        run.final_loss(),
                        run.final_msqe()
                    ),
                )?;
            }
            Ok(())
        }
    }
}

fn size_report(a: &SizeAssumptions, m: &SizeModel, float: bool) -> String {
    let total = model_size_bytes(m);
    let mut s = String::new();
    let mut kv = |k: &str, v: String| s.push_str(&format!("{k}={v}\n"));
    kv("assumption.total_params", a.total_params.to_string());
    if float {
        kv("assumption.precision", "float32 (4 bytes/param)".into());
    } else {
        kv("assumption.quantized_share", a.quantized_share.to_string());
        kv(
            "assumption.packing",
            format!(
                "{} bits/param ({} bytes/param)",
                a.bits,
                a.bits as f64 / 8.0
            ),
        );
        kv("assumption.unquantized", "float32 (4 bytes/param)".into());
        kv("assumption.metadata", "32-bit float per scalar".into());
        kv(
            "assumption.metadata_scalars_per_group",
            m.metadata_scalars_per_group.to_string(),
        );
        kv("assumption.channel_width", a.channel_width.to_string());
        kv("assumption.subchannels", a.subchannels.to_string());
    }
    kv("quantized_params", m.quantized_params.to_string());
    kv("unquantized_params", m.unquantized_params.to_string());
    kv("groups", m.subchannel_groups.to_string());
    kv("packed_weight_bytes", m.packed_weight_bytes().to_string());
    kv("float_bytes", m.float_bytes().to_string());
    kv("metadata_bytes", m.metadata_bytes().to_string());
    kv("total_bytes", total.to_string());
    kv("total_mb", format!("{:.3}", total as f64 / 1e6));
    s
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn run<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 {
                stdout.write_all(text.as_bytes())
            } else {
                stderr.write_all(text.as_bytes())
            };
            return code;
        }
    };
    match execute(cli.command, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            exit_code(&e)
        }
    }
}
