//! Dense feed-forward classifier with hand-written backpropagation.

mod adam;
mod gradcheck;
mod loss;
mod network;
mod params;

pub use adam::{adam_step, AdamState};
pub use gradcheck::{grad_check, grad_check_with, relative_error};
pub use loss::{
    argmax, ce_logit_grad, ce_loss, soft_ce_logit_grad, soft_ce_loss, softmax, softmax_backward,
    LOG_FLOOR,
};
pub use network::{
    add_l1, backward, backward_from_logits, forward, forward_cached, predict,
    transition_ce_logit_grad, Batch, ForwardCache,
};
pub use params::{Activation, GradientSet, Layer, ModelDelta, ModelParams, Tensors};
