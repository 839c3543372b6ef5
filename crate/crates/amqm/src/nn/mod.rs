//! From-scratch neural-network core: tensors, layer ops, model
//! assembly, SGD training, and checkpoint persistence. All math runs in
//! f64; parameters live on the 32-bit-representable grid so checkpoints
//! round-trip exactly.

mod checkpoint;
mod model;
mod ops;
mod tensor;
mod train;

pub use checkpoint::{
    checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use model::{
    argmax, init_weights, mean_batch_loss, model_backward, model_forward, predict, sgd_step,
    ActShape, ForwardCache, Gradients, LayerSpec, ModelConfig, ParamPair, Parameters,
};
pub use ops::{
    conv2d, conv2d_backward, cross_entropy, dropout, dropout_backward, fully_connected,
    fully_connected_backward, maxpool2x2, maxpool2x2_backward, relu, relu_backward, softmax,
    ConvGrads, DropoutRecord, FcGrads, Mode, PoolRecord, PROB_FLOOR,
};
pub use tensor::{stack_batch, Tensor};
pub use train::{
    evaluate_accuracy, train, EpochRecord, Hyperparams, Sample, SplitData, TrainingTrace,
    TRACE_HEADER,
};

// Stream tags keeping initialization, shuffling, and dropout draws
// independent for one master seed.
pub(crate) const DOMAIN_INIT: u64 = 0x4E49;
pub(crate) const DOMAIN_SHUFFLE: u64 = 0x4E53;
pub(crate) const DOMAIN_DROPOUT: u64 = 0x4E44;
