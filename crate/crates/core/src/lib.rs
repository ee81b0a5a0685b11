//! Model compression toolkit for small dense and convolutional classifiers.
//!
//! The crate is organised bottom-up:
//!
//! * [`store`] holds tensors, layer manifests and the `.nnmod` container.
//! * [`net`] is a reference forward/backward/training engine plus synthetic datasets.
//! * [`qat`] provides uniform fake quantization and element-wise gradient scaling.
//! * [`sensitivity`] runs perturbation experiments over layers and bins.
//! * [`binquant`] is the sensitivity-driven binning compressor (no retraining).
//! * [`gwk`] is gradient-weighted k-means over product-quantized weight blocks.
//! * [`codec`] packs labels, Huffman-codes them and writes `.bqz` files.

pub mod binquant;
pub mod codec;
mod error;
pub mod gwk;
pub mod io;
pub mod net;
pub mod qat;
pub mod rng;
pub mod run;
pub mod sensitivity;
pub mod stats;
pub mod store;

pub use error::{Error, Result};
pub use net::{Dataset, Network, Split, TrainConfig};
pub use store::{
    ConvMeta, DType, LayerDesc, LayerKind, Model, ModelManifest, QuantParams, TensorData,
    TensorRecord,
};
