//! Trial sampling, optimizers, schedules and the two-stage training driver.

mod gradcheck;
mod optim;
mod sampler;
mod train;

pub use gradcheck::{grad_check, GradCheckReport, GRAD_FLOOR};
pub use optim::{lr_schedule, optimizer_step, LrSchedule, OptimizerKind, OptimizerState, ScheduleKind};
pub use sampler::{
    group_by_speaker, mixup_embeddings, plan_cells, sample_trial_batch, SpeakerItem, TrialBatchPlan, TrialCell,
};
pub use train::{
    attention_batch_loss, embed_corpus, encode_batch, finetune_joint, pretrain_encoder, train_backend, train_nplda,
    BatchLoss, BatchTargets, ClassifierLoss, EpochLog, FinetuneConfig, NpldaTrainConfig, PretrainConfig,
    TrainingLog,
};
