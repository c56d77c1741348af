//! Per-channel fake quantization of a two-channel tensor with a skewed channel,
//! symmetric against asymmetric, showing codes, parameters and the
//! de-quantized values.
//!
//! Run with: `cargo run --example quantize_tensor`

use sbq::{fake_quant, mean_abs_diff, QuantConfig, Tensor2D};

fn main() -> sbq::Result<()> {
    let w = Tensor2D::from_rows(&[
        [0.1, -0.2, 0.15, 0.05, -0.1, 0.2, 0.0, 0.9],
        [-0.6, 0.3, -0.1, 0.45, 0.2, -0.35, 0.6, 0.05],
    ])?;
    for cfg in [QuantConfig::symmetric(2), QuantConfig::asymmetric(2)] {
        let f = fake_quant(&w, &cfg)?;
        println!("{} {}-bit", cfg.mode, cfg.bits);
        for r in 0..w.rows() {
            let p = f.params.channel(r);
            let codes = &f.codes.codes()[r * w.cols()..(r + 1) * w.cols()];
            println!("  channel {r}: scale={:.4} min={:.4}", p.scale, p.min_val);
            println!("    codes {codes:?}");
            println!(
                "    deq   {:?}",
                f.deq
                    .row(r)
                    .iter()
                    .map(|v| format!("{v:.3}"))
                    .collect::<Vec<_>>()
            );
        }
        println!(
            "  distinct codes {:?}, mae {:.4}\n",
            f.codes.distinct(),
            mean_abs_diff(&w, &f.deq)?
        );
    }
    Ok(())
}
