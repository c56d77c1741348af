//! Toy quantization-aware training.
//!
//! A `16 -> 32 -> 8` tanh network is fit by plain gradient descent to the
//! outputs of a frozen random teacher of the same shape. Both student weight
//! matrices are fake-quantized on every forward pass; the teacher, the
//! inputs and the student initialization are all drawn from the run seed.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use crate::autodiff::Graph;
use crate::error::{Error, Result};
use crate::quant::QuantConfig;
use crate::ste::msqe_loss;
use crate::subchannel::ClipGrid;
use crate::tensor::{randn_with, Rng, Tensor2D};

pub const INPUT_DIM: usize = 16;
pub const HIDDEN_DIM: usize = 32;
pub const OUTPUT_DIM: usize = 8;
pub const SAMPLES: usize = 128;
pub const DEFAULT_MSQE_WEIGHT: f64 = 1e-2;

/// QAT method applied to the student weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Method {
    /// No quantization.
    Float,
    /// Symmetric, full STE.
    I2Wsym,
    /// Asymmetric per-channel, full STE.
    I2Wasym,
    /// Asymmetric per-channel with gradients through scale and min.
    I2WasymSc,
    /// `I2WasymSc` plus sub-channels and greedy clip search.
    I2WasymScSubchClip,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Float,
        Method::I2Wsym,
        Method::I2Wasym,
        Method::I2WasymSc,
        Method::I2WasymScSubchClip,
    ];

    /// Quantizer used for this method, or `None` for [`Method::Float`].
    pub fn quant_config(self, bits: u8, subchannels: usize, grid: ClipGrid) -> Option<QuantConfig> {
        let cfg = match self {
            Method::Float => return None,
            Method::I2Wsym => QuantConfig::symmetric(bits),
            Method::I2Wasym => QuantConfig::asymmetric(bits),
            Method::I2WasymSc => QuantConfig {
                stop_gradient_scale: false,
                ..QuantConfig::asymmetric(bits)
            },
            Method::I2WasymScSubchClip => QuantConfig::subchannel_clip(bits, subchannels, grid),
        };
        Some(cfg)
    }

    pub fn cli_name(self) -> &'static str {
        match self {
            Method::Float => "float",
            Method::I2Wsym => "sym",
            Method::I2Wasym => "asym",
            Method::I2WasymSc => "asym-sc",
            Method::I2WasymScSubchClip => "subch-clip",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Method::Float => "Float",
            Method::I2Wsym => "I2Wsym",
            Method::I2Wasym => "I2Wasym",
            Method::I2WasymSc => "I2WasymSc",
            Method::I2WasymScSubchClip => "I2WasymScSubchClip",
        };
        f.write_str(s)
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.cli_name() == s || m.to_string() == s)
            .ok_or_else(|| Error::config(format!("unknown method '{s}'")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub msqe_weight: f64,
    pub bits: u8,
    pub subchannels: usize,
    pub grid: ClipGrid,
}

impl TrainConfig {
    pub fn new(method: Method, seed: u64) -> Self {
        Self {
            method,
            seed,
            steps: 2000,
            learning_rate: 0.1,
            msqe_weight: DEFAULT_MSQE_WEIGHT,
            bits: 2,
            subchannels: 4,
            grid: ClipGrid::FINE,
        }
    }

    fn quant(&self) -> Result<Option<QuantConfig>> {
        let cfg = self
            .method
            .quant_config(self.bits, self.subchannels, self.grid);
        if let Some(c) = &cfg {
            c.validate()?;
            for width in [INPUT_DIM, HIDDEN_DIM] {
                if width % c.subchannels != 0 {
                    return Err(Error::dim(format!(
                        "layer width {width} is not divisible into {} sub-channels",
                        c.subchannels
                    )));
                }
            }
        }
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainRun {
    pub method: Method,
    pub seed: u64,
    pub steps: usize,
    pub learning_rate: f64,
    pub msqe_weight: f64,
    /// Objective (task loss plus weighted MSQE) before each update.
    pub loss_trace: Vec<f64>,
    pub task_trace: Vec<f64>,
    /// MSQE summed over both weight matrices, before each update.
    pub msqe_trace: Vec<f64>,
}

impl TrainRun {
    pub fn final_loss(&self) -> f64 {
        *self.loss_trace.last().expect("steps >= 1")
    }

    pub fn final_task_loss(&self) -> f64 {
        *self.task_trace.last().expect("steps >= 1")
    }

    pub fn final_msqe(&self) -> f64 {
        *self.msqe_trace.last().expect("steps >= 1")
    }

    /// `step,loss,msqe` with a header row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,msqe\n");
        for (i, (l, m)) in self.loss_trace.iter().zip(&self.msqe_trace).enumerate() {
            s.push_str(&format!("{i},{l:.9e},{m:.9e}\n"));
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

struct Problem {
    inputs: Tensor2D,
    targets: Tensor2D,
    w1: Tensor2D,
    w2: Tensor2D,
}

fn scaled_randn(rows: usize, cols: usize, scale: f64, rng: &mut Rng) -> Result<Tensor2D> {
    Ok(randn_with(rows, cols, rng)?.map(|v| v * scale))
}

fn tanh_mlp(x: &Tensor2D, w1: &Tensor2D, w2: &Tensor2D) -> Result<Tensor2D> {
    let mut g = Graph::new();
    let (xi, a, b) = (g.leaf(x.clone()), g.leaf(w1.clone()), g.leaf(w2.clone()));
    let h = g.matmul_t(xi, a)?;
    let h = g.tanh(h);
    let y = g.matmul_t(h, b)?;
    Ok(g.value(y).clone())
}

fn problem(seed: u64) -> Result<Problem> {
    let mut rng = Rng::new(seed);
    let in_scale = 1.0 / (INPUT_DIM as f64).sqrt();
    let hid_scale = 1.0 / (HIDDEN_DIM as f64).sqrt();
    let t1 = scaled_randn(HIDDEN_DIM, INPUT_DIM, 2.0 * in_scale, &mut rng)?;
    let t2 = scaled_randn(OUTPUT_DIM, HIDDEN_DIM, 2.0 * hid_scale, &mut rng)?;
    let inputs = randn_with(SAMPLES, INPUT_DIM, &mut rng)?;
    let targets = tanh_mlp(&inputs, &t1, &t2)?;
    Ok(Problem {
        inputs,
        targets,
        w1: scaled_randn(HIDDEN_DIM, INPUT_DIM, in_scale, &mut rng)?,
        w2: scaled_randn(OUTPUT_DIM, HIDDEN_DIM, hid_scale, &mut rng)?,
    })
}

/// Trains the toy student and returns per-step traces.
pub fn train_toy(cfg: &TrainConfig) -> Result<TrainRun> {
    if cfg.steps == 0 {
        return Err(Error::config("steps must be at least 1"));
    }
    if !(cfg.learning_rate >= 0.0 && cfg.learning_rate.is_finite()) {
        return Err(Error::config(
            "learning rate must be finite and non-negative",
        ));
    }
    if !(cfg.msqe_weight >= 0.0 && cfg.msqe_weight.is_finite()) {
        return Err(Error::config("msqe weight must be finite and non-negative"));
    }
    let quant = cfg.quant()?;
    let Problem {
        inputs,
        targets,
        mut w1,
        mut w2,
    } = problem(cfg.seed)?;
    let mut run = TrainRun {
        method: cfg.method,
        seed: cfg.seed,
        steps: cfg.steps,
        learning_rate: cfg.learning_rate,
        msqe_weight: cfg.msqe_weight,
        loss_trace: Vec::with_capacity(cfg.steps),
        task_trace: Vec::with_capacity(cfg.steps),
        msqe_trace: Vec::with_capacity(cfg.steps),
    };
    for step in 0..cfg.steps {
        let mut g = Graph::new();
        let x = g.leaf(inputs.clone());
        let y = g.leaf(targets.clone());
        let a = g.leaf(w1.clone());
        let b = g.leaf(w2.clone());
        let (qa, qb) = match &quant {
            Some(q) => (g.fake_quant(a, q)?, g.fake_quant(b, q)?),
            None => (a, b),
        };
        let h = g.matmul_t(x, qa)?;
        let h = g.tanh(h);
        let out = g.matmul_t(h, qb)?;
        let err = g.sub(out, y)?;
        let task = g.mean_square(err);
        let (objective, msqe) = match &quant {
            Some(q) => {
                let ma = msqe_loss(&mut g, a, q)?;
                let mb = msqe_loss(&mut g, b, q)?;
                let m = g.add_scaled(ma, mb, 1.0)?;
                let total = g.add_scaled(task, m, cfg.msqe_weight)?;
                (total, g.scalar(m))
            }
            None => (task, 0.0),
        };
        let loss = g.scalar(objective);
        if !loss.is_finite() {
            return Err(Error::Training { step, loss });
        }
        run.loss_trace.push(loss);
        run.task_trace.push(g.scalar(task));
        run.msqe_trace.push(msqe);
        g.backward(objective)?;
        for (w, id) in [(&mut w1, a), (&mut w2, b)] {
            for (v, d) in w.data_mut().iter_mut().zip(g.adjoint(id).data()) {
                *v -= cfg.learning_rate * d;
            }
        }
    }
    Ok(run)
}

/// Median of a non-empty slice.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
