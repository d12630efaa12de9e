//! Dynamics losses, optimizers and the staged fitting loop.

mod cma;
mod eval;
mod losses;
mod optim;
mod stage;

pub use cma::{
    cma_es_gains, cma_es_minimize, CmaConfig, CmaOutcome, GainSearch, LOG_KD_RANGE, LOG_KP_RANGE,
};
pub use eval::{evaluate, noise_floor, EvalReport, FrameMetrics};
pub use losses::{
    bind_tracks, chamfer, chamfer_grad, knn_edges, length_loss, length_loss_grad, track_loss,
    track_loss_grad, FrameTarget, LossTerms, LossWeights, RestEdge, Supervision, LENGTH_NEIGHBORS,
};
pub use optim::{clip_norm, clip_values, Adam, AdamConfig};
pub use stage::{
    init_model, train_model, train_stage12, write_loss_csv, FitProblem, LossRecord, ModelInit,
    TrainConfig, TrainOutcome, TrainReport, TrainSchedule, Trainer, SINGLE_EXPERT_LOGIT,
};
