//! Minimal differentiable math core: dense matrices, a reverse-mode tape,
//! named parameters with SGD, and finite-difference gradient certification.

mod check;
mod params;
mod tape;
mod tensor;

pub use check::{grad_check, GradCheckEntry, GradCheckReport};
pub use params::{uniform_init, xavier_init, Param, ParamRecord, ParamSet, Sgd};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::Tensor2;
