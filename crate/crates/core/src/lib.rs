//! Low-bit weight quantization.
//!
//! Symmetric and asymmetric per-channel fake quantization, sub-channel
//! quantization with a greedy per-sub-channel clip search, straight-through
//! gradients (with optional back-propagation through scale and minimum),
//! an MSQE regularizer, fixed-width 2-bit packing, a quantization-error
//! sweep, and a toy quantization-aware trainer.
//!
//! ```
//! use sbq::{quantize_subch_clip, randn, ClipGrid, QuantConfig};
//!
//! let w = randn(32, 128, 0).unwrap();
//! let per_channel = quantize_subch_clip(&w, &QuantConfig::asymmetric(2)).unwrap();
//! let cfg = QuantConfig::subchannel_clip(2, 4, ClipGrid::COARSE);
//! let sub = quantize_subch_clip(&w, &cfg).unwrap();
//! assert!(sub.mae < per_channel.mae);
//! ```

pub mod autodiff;
pub mod bench;
pub mod bitpack;
pub mod cli;
pub mod error;
pub mod quant;
pub mod ste;
pub mod subchannel;
pub mod tensor;
pub mod train;

pub use bitpack::{
    deserialize, model_size_bytes, pack_codes, serialize, unpack_codes, PackedBlob,
    QuantizedTensor, SizeAssumptions, SizeModel,
};
pub use error::{Error, Result};
pub use quant::{
    dequantize, fake_quant, quantize_codes, scale_and_min_asym, scale_sym, CodesTensor, FakeQuant,
    QuantConfig, QuantMode, QuantParams,
};
pub use subchannel::{
    greedy_search_clip, metadata_count, quantize_subch_clip, ClipGrid, ClipMetric,
    SubchannelQuantResult,
};
pub use tensor::{mean_abs_diff, randn, reshape_subchannels, Rng, Tensor2D};
