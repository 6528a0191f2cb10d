//! Single-layer softmax attention `f_W(X) = Xᵀ S(X W x̄)`: losses, gradients,
//! smoothness constants and the gradient-based trainers.

mod model;
mod train;

pub use model::{
    eval_masked, forward, lipschitz_general, lipschitz_log, loss_bar, loss_inf, softmax,
    LossKind, Objective, Scoring, SeqSpec, LOG_GUARD,
};
pub use train::{
    ball_stationarity, cosine, geometric_radii, reg_path, train_gd, train_wfin, Init,
    References, RegPathConfig, RegPathPoint, TrainConfig, TrainRecord, TrainTrace,
    WfinOptions, WfinResult,
};
