//! Sub-channel quantization with the greedy clip search on a standard-normal
//! weight matrix: error per configuration and the clip factors it picked.
//!
//! Run with: `cargo run --release --example subchannel_clip`

use sbq::{quantize_subch_clip, randn, ClipGrid, QuantConfig};

fn main() -> sbq::Result<()> {
    let w = randn(32, 128, 42)?;
    println!("{:<28} {:>10} {:>10}", "config", "mae", "metadata");
    for (s, grid, label) in [
        (1, ClipGrid::unclipped(), "per-channel"),
        (4, ClipGrid::unclipped(), "4 sub-channels"),
        (8, ClipGrid::unclipped(), "8 sub-channels"),
        (4, ClipGrid::COARSE, "4 sub-channels + clip"),
        (8, ClipGrid::COARSE, "8 sub-channels + clip"),
        (4, ClipGrid::FINE, "4 sub-channels + fine clip"),
    ] {
        let cfg = QuantConfig::subchannel_clip(2, s, grid);
        let r = quantize_subch_clip(&w, &cfg)?;
        let meta = sbq::metadata_count(&cfg, w.rows());
        println!("{label:<28} {:>10.5} {meta:>10}", r.mae);
    }

    let r = quantize_subch_clip(&w, &QuantConfig::subchannel_clip(2, 4, ClipGrid::COARSE))?;
    let mut histogram = std::collections::BTreeMap::new();
    for g in 0..r.params.len() {
        *histogram
            .entry(format!("{:.2}", r.params.channel(g).clip))
            .or_insert(0) += 1;
    }
    println!("\nclip factors chosen for 4 sub-channels: {histogram:?}");
    Ok(())
}
