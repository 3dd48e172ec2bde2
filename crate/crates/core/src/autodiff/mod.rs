//! Dense tensors, reverse-mode differentiation and first-order optimizers.

mod archive;
mod graph;
mod optim;
mod tensor;

pub use archive::{
    archive_hash, decode_records, encode_records, read_archive, store_records, write_archive, ArchiveRecord,
    ARCHIVE_MAGIC, ARCHIVE_VERSION,
};
pub use graph::{Gradients, Graph, OpKind, Var, LN_EPS};
pub use optim::{Optimizer, UpdateRule};
pub use tensor::{ParamId, ParamStore, Parameter, Tensor};
