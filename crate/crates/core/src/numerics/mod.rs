//! Dense tensors and the convolution, resampling and PCA primitives the rest
//! of the crate is built on.

mod conv;
pub(crate) mod pca;
mod resize;
mod tensor;

pub use conv::{conv2d, conv2d_plane_sparse, convolve_separable, max_pool2, reflect_index, Padding};
pub use pca::{pca_fit, pca_project, PcaModel};
pub use resize::resize_bilinear;
pub use tensor::{Plane, Tensor};
