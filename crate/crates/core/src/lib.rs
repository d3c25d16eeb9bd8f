//! Gaussian particle fields: isotropic and anisotropic kernels, image
//! fitting against an L1 + D-SSIM loss with quadtree initialization and
//! adaptive particle control, and forward 3D splat rendering.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod field;
pub mod image;
pub mod kernels;
pub mod loss;
pub mod optimize;
pub mod splat3d;
pub mod ssim;
pub mod tree;

pub use error::{Error, Result};
pub use field::{
    loss_gradients, reconstruct, reconstruct_par, AnisoParticle2D, GridSpec, IsoParticle2D, KernelKind, LossConfig,
    Particle2D, ParticleGrad,
};
pub use image::ImageGrid;
pub use loss::{l1_term, loss, psnr};
pub use optimize::{fit, AdaptiveControlParams, FitConfig, FitState, LearningRates, Optimizer};
pub use ssim::ssim;
pub use tree::{build_quadtree, init_particles_from_tree, InitParams, QuadTreeNode};
