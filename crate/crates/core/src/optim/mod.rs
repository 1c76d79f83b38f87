//! Loss, classifier and minimizer used to train both segmentation stages.

mod lbfgs;
mod mlp;
mod params_file;

pub use lbfgs::{lbfgs_minimize, Control, IterationState, LbfgsConfig, LbfgsOutcome, StopReason};
pub use mlp::{
    accuracy, cross_entropy_loss, mlp_forward, mlp_loss_grad, mlp_predict, softmax_rows,
    MlpParams, MlpView, TrainingBatch, DEFAULT_HIDDEN, PROB_FLOOR,
};
pub(crate) use mlp::loss_grad_flat;
pub use params_file::{read_params, write_params, ParamHeader, FEATURE_SCHEMA_VERSION};
