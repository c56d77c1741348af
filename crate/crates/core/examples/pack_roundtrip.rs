//! Quantize, pack into an SBQPACK1 container, read it back and compare.
//!
//! Run with: `cargo run --example pack_roundtrip`

use sbq::bitpack::{container_len, read_container, write_container};
use sbq::{pack_codes, quantize_subch_clip, randn, ClipGrid, QuantConfig, QuantizedTensor};

fn main() -> sbq::Result<()> {
    let w = randn(64, 256, 1)?;
    let cfg = QuantConfig::subchannel_clip(2, 4, ClipGrid::COARSE);
    let r = quantize_subch_clip(&w, &cfg)?;
    let q = QuantizedTensor::from_subchannel(&r);

    let blob = pack_codes(&q.codes)?;
    println!(
        "{} codes -> {} payload bytes ({} bytes/param)",
        w.len(),
        blob.bytes.len(),
        blob.bytes.len() as f64 / w.len() as f64
    );

    let dir = std::env::temp_dir().join("sbq-pack-roundtrip");
    std::fs::create_dir_all(&dir).map_err(|e| sbq::Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("w.sbq");
    let written = write_container(&q, &path)?;
    println!(
        "container {} bytes (expected {}), float32 would be {}",
        written,
        container_len(w.rows(), w.cols(), cfg.bits, cfg.subchannels),
        w.len() * 4
    );

    let back = read_container(&path)?;
    assert_eq!(back.codes, q.codes);
    let deq = back.dequantize()?;
    let drift = deq
        .data()
        .iter()
        .zip(r.deq.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    println!("codes identical; max de-quantization drift from f32 metadata {drift:.2e}");
    Ok(())
}
