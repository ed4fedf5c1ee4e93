//! Independent blockwise distillation: block training, reassembly,
//! fine-tuning, and the weights file format.

pub mod train;
pub mod weights_io;

pub use train::{
    accuracy, block_loss, evaluate_with_student_block, finetune, reassemble, remainder_cross_entropy, train_block,
    train_block_from, train_network, train_teacher, BlockOutcome, BlockSummary, DistillTask, FinetuneSummary,
    LossMode, LossTerms, ReplacementDecision, TeacherSummary, TrainParams, TrainedBlockResult,
};
pub use weights_io::{load_network, save_network, weights_digest};
