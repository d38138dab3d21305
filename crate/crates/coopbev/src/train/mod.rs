//! Training machinery: bipartite matching between predictions and ground
//! truth, focal and L1 losses, the optimizer, and the sequence train step.

pub mod hungarian;
pub mod loss;
pub mod optim;
pub mod step;


pub use hungarian::{brute_force_min_cost, hungarian_match, CostMatrix};
pub use loss::{focal_loss, focal_loss_grad, l1_box_loss, l1_box_loss_grad};
pub use optim::{clip_grad_norm, lr_schedule, zero_grads, AdamW, GradCoverage};
pub use step::{frame_loss, match_outputs, train_step, PairedFrame, StepOutcome, TrainConfig, TrainState};

