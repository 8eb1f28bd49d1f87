//! Per-pixel feature stacks and the classical filter bank.

pub mod classical;
mod stack;

pub use classical::{
    dog_stack, featurize_classical, gaussian_stack, hessian_stack, membrane_projections,
    sobel_stack, to_luminance, FeatureSetConfig, Filter,
};
pub use stack::FeatureStack;
