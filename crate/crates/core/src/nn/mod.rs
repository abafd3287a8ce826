//! Minimal neural-network core: dense tensors, a reverse-mode tape,
//! transformer blocks, rotary positions, losses and the optimizer.

pub mod block;
pub mod gradcheck;
pub mod graph;
pub mod mask;
pub mod optim;
pub mod params;
pub mod rope;
pub mod tensor;

pub use block::{attention_block, block_forward, init_block, init_params, stack_forward, BlockConfig};
pub use graph::{mse_value, smooth_l1_value, Bound, Grads, Graph, Var};
pub use mask::AttnMask;
pub use optim::{AdamW, OptimConfig, StepStats};
pub use params::{Init, Param, ParamSet};
pub use rope::{rope_1d, rope_3d, RopeConfig, RopeLayout, RopeTable};
pub use tensor::{Real, Tensor};

/// Mean elementwise smooth-L1 between two tensors.
pub fn smooth_l1<T: Real>(pred: &Tensor<T>, target: &Tensor<T>, beta: T) -> crate::Result<T> {
    if pred.shape() != target.shape() {
        return Err(crate::Error::Shape("smooth_l1 operands differ in shape".into()));
    }
    Ok(smooth_l1_value(pred.data(), target.data(), beta))
}

/// Mean squared error between two tensors.
pub fn mse<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> crate::Result<T> {
    if pred.shape() != target.shape() {
        return Err(crate::Error::Shape("mse operands differ in shape".into()));
    }
    Ok(mse_value(pred.data(), target.data()))
}
