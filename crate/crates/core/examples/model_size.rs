//! Disk size of a 118M-parameter model in float and in the 2-bit
//! configurations, with 95% of parameters quantized.
//!
//! Run with: `cargo run --example model_size`

use sbq::{model_size_bytes, QuantMode, SizeAssumptions, SizeModel};

fn main() -> sbq::Result<()> {
    let params = 118_000_000;
    let mb = |m: &SizeModel| model_size_bytes(m) as f64 / 1e6;
    println!(
        "{:<24} {:>10}",
        "float32",
        format!("{:.1} MB", mb(&SizeModel::float_only(params)))
    );
    for (label, mode, subchannels) in [
        ("2-bit symmetric", QuantMode::Symmetric, 1),
        ("2-bit asymmetric", QuantMode::Asymmetric, 1),
        ("2-bit asym, 4 sub", QuantMode::Asymmetric, 4),
        ("2-bit asym, 8 sub", QuantMode::Asymmetric, 8),
    ] {
        let m = SizeAssumptions {
            total_params: params,
            quantized_share: 0.95,
            bits: 2,
            mode,
            subchannels,
            channel_width: 512,
        }
        .model()?;
        println!(
            "{label:<24} {:>10}  (weights {:.1}, float {:.1}, metadata {:.2})",
            format!("{:.2} MB", mb(&m)),
            m.packed_weight_bytes() as f64 / 1e6,
            m.float_bytes() as f64 / 1e6,
            m.metadata_bytes() as f64 / 1e6,
        );
    }
    Ok(())
}
