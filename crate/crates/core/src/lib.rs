//! Desk-scale rigging toolkit: skeleton tokenization, evaluation metrics,
//! pose augmentation, geodesic-voxel skinning, an MST connectivity
//! baseline, a toy autoregressive auto-encoder with a mesh-conditioned
//! latent diffusion model, and a motion-transfer optimizer.

pub mod ablation;
pub mod arae;
pub mod autodiff;
pub mod deform;
pub mod diffusion;
pub mod gvb;
pub mod io;
pub mod error;
pub mod metrics;
pub mod motion;
pub mod mst;
pub mod nn;
pub mod pointnet;
pub mod skeleton;
pub mod tokenizer;

pub use error::RigError;
pub use skeleton::{Mesh, RigAsset, Skeleton, SkinWeights, Vec3};
