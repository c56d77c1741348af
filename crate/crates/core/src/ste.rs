//! Straight-through gradients for fake quantization, the MSQE regularizer,
//! and finite-difference gradient checks.
//!
//! Backward rules for `deq = round_clip(u) * scale + min_val`, with
//! `u = (w - min_val) / scale`:
//!
//! * rounding passes gradients unchanged;
//! * an entry whose rounded code lies inside the legal code range passes
//!   its gradient through, saturated entries get none directly;
//! * with `stop_gradient_scale = true`, `scale` and `min_val` are constants;
//! * otherwise they are differentiated through the channel max/min (or
//!   max-abs) reductions, routing the subgradient to the first arg-extremum
//!   of each (sub-)channel.
//!
//! The clip factor picked by the greedy search is held fixed in the
//! backward pass.
//!
//! For an in-range entry the result is `d deq_i = dw_i + (q_i - u_i) d scale`;
//! for a saturated one it is `q_i d scale + d min_val`.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::quant::{ChannelParams, QuantConfig, QuantMode};
use crate::subchannel::quantize_subch_clip;
use crate::tensor::{Rng, Tensor2D};

#[derive(Debug, Clone, Copy, PartialEq)]
struct GroupTape {
    params: ChannelParams,
    /// Index of the first maximum (asymmetric) or first max-abs entry (symmetric).
    argmax: usize,
    argmin: usize,
    degenerate: bool,
}

/// Saved forward state of one fake-quant node.
#[derive(Debug, Clone)]
pub struct FakeQuantTape {
    mode: QuantMode,
    bits: u8,
    stop_gradient_scale: bool,
    group_len: usize,
    groups: Vec<GroupTape>,
    codes: Vec<i32>,
    unrounded: Vec<f64>,
    in_range: Vec<bool>,
}

fn first_extrema(row: &[f64]) -> (usize, usize) {
    let mut imax = 0;
    let mut imin = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[imax] {
            imax = i;
        }
        if v < row[imin] {
            imin = i;
        }
    }
    (imax, imin)
}

fn first_abs_max(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if v.abs() > row[best].abs() {
            best = i;
        }
    }
    best
}

impl FakeQuantTape {
    /// Runs the forward pass (sub-channel split and clip search included)
    /// and records what the backward pass needs.
    pub fn forward(w: &Tensor2D, cfg: &QuantConfig) -> Result<(Tensor2D, Self)> {
        let r = quantize_subch_clip(w, cfg)?;
        let group_len = r.codes.cols();
        let (lo_code, hi_code) = (cfg.mode.min_code(cfg.bits), cfg.mode.max_code(cfg.bits));
        let mut groups = Vec::with_capacity(r.params.len());
        let mut unrounded = Vec::with_capacity(w.len());
        let mut in_range = Vec::with_capacity(w.len());
        for (g, row) in w.data().chunks_exact(group_len).enumerate() {
            let params = r.params.channel(g);
            let (argmax, argmin, degenerate) = match cfg.mode {
                QuantMode::Asymmetric => {
                    let (imax, imin) = first_extrema(row);
                    (imax, imin, row[imax] == row[imin])
                }
                QuantMode::Symmetric => {
                    let i = first_abs_max(row);
                    (i, i, row[i] == 0.0)
                }
            };
            for &v in row {
                let u = params.unrounded(v);
                let k = u.round_ties_even();
                unrounded.push(u);
                in_range.push(k >= lo_code as f64 && k <= hi_code as f64);
            }
            groups.push(GroupTape {
                params,
                argmax,
                argmin,
                degenerate,
            });
        }
        let tape = Self {
            mode: cfg.mode,
            bits: cfg.bits,
            stop_gradient_scale: cfg.stop_gradient_scale,
            group_len,
            groups,
            codes: r.codes.codes().to_vec(),
            unrounded,
            in_range,
        };
        Ok((r.deq, tape))
    }

    pub fn codes(&self) -> &[i32] {
        &self.codes
    }

    /// Entries whose gradient passes the clamp.
    pub fn in_range(&self) -> &[bool] {
        &self.in_range
    }

    pub fn clips(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.params.clip).collect()
    }

    /// Vector-Jacobian product: gradient w.r.t. the input given the output adjoint.
    #[allow(clippy::needless_range_loop)]
    pub fn backward(&self, w: &Tensor2D, g_out: &Tensor2D) -> Result<Tensor2D> {
        if w.len() != self.codes.len() || g_out.len() != self.codes.len() {
            return Err(Error::dim("fake-quant backward shape mismatch"));
        }
        let levels = self.mode.levels(self.bits);
        let mut grad = vec![0.0; w.len()];
        for (g, gt) in self.groups.iter().enumerate() {
            let base = g * self.group_len;
            let mut d_scale = 0.0;
            let mut d_min = 0.0;
            for i in base..base + self.group_len {
                let go = g_out.data()[i];
                let q = self.codes[i] as f64;
                if self.in_range[i] {
                    grad[i] += go;
                    d_scale += go * (q - self.unrounded[i]);
                } else {
                    d_scale += go * q;
                    d_min += go;
                }
            }
            if self.stop_gradient_scale {
                continue;
            }
            let c = gt.params.clip;
            let (imax, imin) = (base + gt.argmax, base + gt.argmin);
            match (self.mode, gt.degenerate) {
                (QuantMode::Asymmetric, false) => {
                    // scale = c (M - m) / L, min_val = M (1 - c)/2 + m (1 + c)/2
                    grad[imax] += d_scale * c / levels + d_min * 0.5 * (1.0 - c);
                    grad[imin] += -d_scale * c / levels + d_min * 0.5 * (1.0 + c);
                }
                // scale fixed at 1, min_val = m
                (QuantMode::Asymmetric, true) => grad[imin] += d_min,
                (QuantMode::Symmetric, false) => {
                    let sign = w.data()[imax].signum();
                    grad[imax] += d_scale * c * sign / levels;
                }
                (QuantMode::Symmetric, true) => {}
            }
        }
        Tensor2D::new(w.rows(), w.cols(), grad)
    }

    /// Evaluates the frozen-code surrogate at `w`: rounding offsets, clamp
    /// decisions, arg-extrema and clip factors come from the recorded
    /// forward pass, while `scale` and `min_val` are recomputed from `w`
    /// unless `stop_gradient_scale` is set. Agrees with the forward output
    /// at the recorded point, and its exact derivative is what
    /// [`FakeQuantTape::backward`] computes.
    pub fn frozen_forward(&self, w: &Tensor2D) -> Result<Tensor2D> {
        if w.len() != self.codes.len() {
            return Err(Error::dim("surrogate shape mismatch"));
        }
        let levels = self.mode.levels(self.bits);
        let mut out = Vec::with_capacity(w.len());
        for (g, (row, gt)) in w
            .data()
            .chunks_exact(self.group_len)
            .zip(&self.groups)
            .enumerate()
        {
            let p = if self.stop_gradient_scale {
                gt.params
            } else {
                let c = gt.params.clip;
                match (self.mode, gt.degenerate) {
                    (QuantMode::Asymmetric, false) => {
                        let (hi, lo) = (row[gt.argmax], row[gt.argmin]);
                        ChannelParams {
                            scale: c * (hi - lo) / levels,
                            min_val: 0.5 * (hi + lo) - 0.5 * c * (hi - lo),
                            clip: c,
                        }
                    }
                    (QuantMode::Asymmetric, true) => ChannelParams {
                        min_val: row[gt.argmin],
                        ..gt.params
                    },
                    (QuantMode::Symmetric, false) => ChannelParams {
                        scale: c * row[gt.argmax].abs() / levels,
                        ..gt.params
                    },
                    (QuantMode::Symmetric, true) => gt.params,
                }
            };
            out.extend(row.iter().enumerate().map(|(j, &v)| {
                let i = g * self.group_len + j;
                let q = self.codes[i] as f64;
                if self.in_range[i] {
                    let offset = q - self.unrounded[i];
                    (p.unrounded(v) + offset) * p.scale + p.min_val
                } else {
                    q * p.scale + p.min_val
                }
            }));
        }
        Tensor2D::new(w.rows(), w.cols(), out)
    }
}

/// Mean squared quantization error `mean((w - deq(w))^2)` as a graph node.
pub fn msqe_loss(graph: &mut Graph, w: NodeId, cfg: &QuantConfig) -> Result<NodeId> {
    let deq = graph.fake_quant(w, cfg)?;
    let diff = graph.sub(w, deq)?;
    Ok(graph.mean_square(diff))
}

/// Forward value and input gradient of `sum(seed * deq(w))`.
pub fn fake_quant_vjp(
    w: &Tensor2D,
    cfg: &QuantConfig,
    seed: &Tensor2D,
) -> Result<(Tensor2D, Tensor2D)> {
    let mut g = Graph::new();
    let wi = g.leaf(w.clone());
    let out = g.fake_quant(wi, cfg)?;
    g.backward_with_seed(out, seed)?;
    Ok((g.value(out).clone(), g.adjoint(wi).clone()))
}

/// Relative error with a unit floor: `|a - b| / max(1, |a|, |b|)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / 1f64.max(a.abs()).max(b.abs())
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub stop_gradient_scale: bool,
    pub probes: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
    /// Gradient of a constant-channel input under the degenerate fallback.
    pub degenerate_grad_finite: bool,
}

/// Probes used by [`grad_check`].
pub const GRAD_CHECK_PROBES: usize = 100;
const FD_STEP: f64 = 1e-4;
const HALF_POINT_MARGIN: f64 = 1e-3;

/// Draws a random tensor whose code positions stay at least
/// `HALF_POINT_MARGIN` (in units of scale) away from rounding half-points.
pub fn sample_probe_tensor(cfg: &QuantConfig, rng: &mut Rng) -> Result<Tensor2D> {
    loop {
        let rows = 1 + rng.below(3) as usize;
        let group = [4usize, 8][rng.below(2) as usize];
        let cols = group * cfg.subchannels;
        let w = crate::tensor::randn_with(rows, cols, rng)?;
        let r = quantize_subch_clip(&w, cfg)?;
        let near_half = w.data().chunks_exact(group).enumerate().any(|(g, row)| {
            let p = r.params.channel(g);
            row.iter().any(|&v| {
                let u = p.unrounded(v);
                (u - u.floor() - 0.5).abs() < HALF_POINT_MARGIN
            })
        });
        if !near_half {
            return Ok(w);
        }
    }
}

/// Compares analytic fake-quant gradients against central finite differences
/// of the frozen-code surrogate on random vector-Jacobian probes.
pub fn grad_check(cfg: &QuantConfig, seed: u64) -> Result<GradCheckReport> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut max_rel = 0.0f64;
    let mut coords = 0;
    for _ in 0..GRAD_CHECK_PROBES {
        let w = sample_probe_tensor(cfg, &mut rng)?;
        let proj = crate::tensor::randn_with(w.rows(), w.cols(), &mut rng)?;
        let (_, analytic) = fake_quant_vjp(&w, cfg, &proj)?;
        let (_, tape) = FakeQuantTape::forward(&w, cfg)?;
        let phi = |x: &Tensor2D| -> Result<f64> {
            let f = tape.frozen_forward(x)?;
            Ok(f.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum())
        };
        for k in 0..w.len() {
            let mut plus = w.clone();
            plus.data_mut()[k] += FD_STEP;
            let mut minus = w.clone();
            minus.data_mut()[k] -= FD_STEP;
            let numeric = (phi(&plus)? - phi(&minus)?) / (2.0 * FD_STEP);
            max_rel = max_rel.max(relative_error(analytic.data()[k], numeric));
            coords += 1;
        }
    }
    let flat = Tensor2D::new(1, 4 * cfg.subchannels, vec![0.75; 4 * cfg.subchannels])?;
    let ones = Tensor2D::new(1, flat.cols(), vec![1.0; flat.cols()])?;
    let (_, dg) = fake_quant_vjp(&flat, cfg, &ones)?;
    Ok(GradCheckReport {
        stop_gradient_scale: cfg.stop_gradient_scale,
        probes: GRAD_CHECK_PROBES,
        coordinates: coords,
        max_rel_error: max_rel,
        degenerate_grad_finite: dg.data().iter().all(|v| v.is_finite()),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::fake_quant;
    use crate::subchannel::ClipGrid;
    use crate::tensor::randn;

    fn sg(mut cfg: QuantConfig, stop: bool) -> QuantConfig {
        cfg.stop_gradient_scale = stop;
        cfg
    }

    #[test]
    fn full_ste_is_identity_inside_range() {
        let w = Tensor2D::from_rows(&[[0.1, 0.9, 2.2, 3.0]]).unwrap();
        let cfg = sg(QuantConfig::asymmetric(2), true);
        let ones = Tensor2D::new(1, 4, vec![1.0; 4]).unwrap();
        let (deq, grad) = fake_quant_vjp(&w, &cfg, &ones).unwrap();
        assert_eq!(deq, fake_quant(&w, &cfg).unwrap().deq);
        assert_eq!(grad.data(), &[1.0; 4]);
    }

    #[test]
    fn full_ste_blocks_saturated_entries() {
        // clip 0.5 maps [-1, 3] to [0, 2], which holds the cluster exactly
        let t = 2.0 / 3.0;
        let w = Tensor2D::from_rows(&[[-1.0, 0.0, t, 2.0 * t, 2.0, 0.0, t, 2.0 * t, 2.0, 3.0]])
            .unwrap();
        let cfg = QuantConfig {
            clip_grid: ClipGrid::new(0.5, 0.5, 0.1).unwrap(),
            ..sg(QuantConfig::asymmetric(2), true)
        };
        let (_, tape) = FakeQuantTape::forward(&w, &cfg).unwrap();
        assert_eq!(tape.clips(), vec![0.5]);
        let ones = Tensor2D::new(1, 10, vec![1.0; 10]).unwrap();
        let grad = tape.backward(&w, &ones).unwrap();
        let mut expect = vec![1.0; 10];
        expect[0] = 0.0;
        expect[9] = 0.0;
        assert_eq!(grad.data(), expect.as_slice());
    }

    #[test]
    fn scale_backprop_matches_surrogate_derivative() {
        let w = Tensor2D::from_rows(&[[-0.7, 0.35, 1.12, 2.4]]).unwrap();
        let cfg = sg(QuantConfig::asymmetric(2), false);
        let (_, tape) = FakeQuantTape::forward(&w, &cfg).unwrap();
        for i in 0..4 {
            let mut seed = vec![0.0; 4];
            seed[i] = 1.0;
            let seed = Tensor2D::new(1, 4, seed).unwrap();
            let (_, grad) = fake_quant_vjp(&w, &cfg, &seed).unwrap();
            for k in 0..4 {
                let h = 1e-4;
                let mut p = w.clone();
                p.data_mut()[k] += h;
                let mut m = w.clone();
                m.data_mut()[k] -= h;
                let num = (tape.frozen_forward(&p).unwrap().data()[i]
                    - tape.frozen_forward(&m).unwrap().data()[i])
                    / (2.0 * h);
                assert!(relative_error(grad.data()[k], num) < 1e-5, "d{i}/d{k}");
            }
        }
    }

    #[test]
    fn surrogate_agrees_with_forward_at_base_point() {
        for stop in [true, false] {
            for cfg in [
                QuantConfig::asymmetric(2),
                QuantConfig::symmetric(2),
                QuantConfig::subchannel_clip(2, 4, ClipGrid::COARSE),
            ] {
                let cfg = sg(cfg, stop);
                let w = randn(3, 16, 5).unwrap();
                let (deq, tape) = FakeQuantTape::forward(&w, &cfg).unwrap();
                let s = tape.frozen_forward(&w).unwrap();
                for (a, b) in deq.data().iter().zip(s.data()) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn msqe_examples() {
        let cfg = QuantConfig::asymmetric(2);
        let mut g = Graph::new();
        let w = g.leaf(Tensor2D::from_rows(&[[0.0, 1.0, 2.0, 3.0]]).unwrap());
        let l = msqe_loss(&mut g, w, &cfg).unwrap();
        assert_eq!(g.scalar(l), 0.0);

        let mut g = Graph::new();
        let w = g.leaf(Tensor2D::from_rows(&[[-1.0, 0.5, 2.0]]).unwrap());
        let l = msqe_loss(&mut g, w, &cfg).unwrap();
        assert!((g.scalar(l) - 0.25 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn grad_check_passes_both_regimes() {
        for stop in [true, false] {
            let r = grad_check(&sg(QuantConfig::asymmetric(2), stop), 1).unwrap();
            assert!(r.max_rel_error <= 1e-5, "{r:?}");
            assert!(r.degenerate_grad_finite);
        }
        let r = grad_check(&sg(QuantConfig::symmetric(2), false), 2).unwrap();
        assert!(r.max_rel_error <= 1e-5, "{r:?}");
    }

    #[test]
    fn degenerate_channel_gradient_is_identity() {
        let w = Tensor2D::from_rows(&[[0.5; 4]]).unwrap();
        let ones = Tensor2D::new(1, 4, vec![1.0; 4]).unwrap();
        for stop in [true, false] {
            let (deq, grad) =
                fake_quant_vjp(&w, &sg(QuantConfig::asymmetric(2), stop), &ones).unwrap();
            assert_eq!(deq, w);
            assert_eq!(grad.data(), &[1.0; 4]);
        }
    }
}
