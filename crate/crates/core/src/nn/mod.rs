//! Dense tensors and a reverse-mode tape for the layer set the enhancer uses.

pub mod checkpoint;
pub mod conv;
mod gradcheck;
mod graph;
pub mod gru;
pub mod norm;
mod params;
mod tensor;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
pub use conv::{conv_frame, conv_frame_packed, tconv_frame, tconv_frame_packed, ChannelMajor, ConvSpec, TConvSpec};
pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, DEFAULT_STEP, KINK_RETRIES, REL_ERR_FLOOR};
pub use graph::{linear_row, pool_planes, BnMode, Grads, Graph, Var, BCE_CLAMP};
pub use gru::{gru_cell, gru_forward, GruWeights};
pub use norm::BatchStats;
pub use params::{uniform, ParamEntry, ParamStore};
pub use tensor::Tensor;
