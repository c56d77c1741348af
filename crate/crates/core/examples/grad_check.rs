//! Straight-through gradients: the clamp mask under full STE, and the
//! finite-difference check for both gradient regimes.
//!
//! Run with: `cargo run --release --example grad_check`

use sbq::ste::{fake_quant_vjp, grad_check};
use sbq::{ClipGrid, QuantConfig, Tensor2D};

fn main() -> sbq::Result<()> {
    let w = Tensor2D::from_rows(&[[-1.0, 0.0, 0.7, 1.3, 2.0, 0.1, 0.6, 1.2, 1.9, 3.0]])?;
    let ones = Tensor2D::new(1, w.cols(), vec![1.0; w.cols()])?;
    for stop in [true, false] {
        let cfg = QuantConfig {
            stop_gradient_scale: stop,
            clip_grid: ClipGrid::new(0.5, 0.5, 0.1)?,
            ..QuantConfig::asymmetric(2)
        };
        let (deq, grad) = fake_quant_vjp(&w, &cfg, &ones)?;
        println!("stop_gradient_scale={stop}");
        println!(
            "  deq  {:?}",
            deq.data()
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
        );
        println!(
            "  grad {:?}",
            grad.data()
                .iter()
                .map(|v| format!("{v:.3}"))
                .collect::<Vec<_>>()
        );
    }

    println!();
    for stop in [true, false] {
        let cfg = QuantConfig {
            stop_gradient_scale: stop,
            ..QuantConfig::subchannel_clip(2, 2, ClipGrid::COARSE)
        };
        let r = grad_check(&cfg, 0)?;
        println!(
            "grad_check stop_gradient_scale={stop}: {} probes, {} coordinates, max relative error {:.2e}",
            r.probes, r.coordinates, r.max_rel_error
        );
    }
    Ok(())
}
