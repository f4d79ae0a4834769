//! Joint objective, optimizer and training loop.

mod gradcheck;
mod loss;
mod optim;
mod trainer;

pub use gradcheck::{model_gradcheck, MODEL_GRADCHECK_TOL};
pub use loss::{loss_se, loss_total, loss_vad, record_loss, LossConfig, LossNodes, LossTargets};
pub use optim::Rmsprop;
pub use trainer::{
    output_paths, Batch, EpochLog, RecordedStats, Segment, TrainConfig, TrainExample, TrainState, Trainer,
    BEST_CHECKPOINT, STATE_CHECKPOINT,
};
