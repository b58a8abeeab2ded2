//! Tensor container formats: the neutral input archive and the EFPK
//! packed-model file, with streaming per-layer reads for cold starts.

mod archive;
mod efpk;

pub use archive::{
    read_tensor_archive, ArchiveError, ArchiveTensor, DType, TensorArchive,
};
pub use efpk::{
    read_efpk, read_efpk_streaming, write_efpk, EfpkError, EfpkReader, EfpkTensorDesc,
    LayerStream, LayerTensors, EFPK_MAGIC, EFPK_VERSION,
};
