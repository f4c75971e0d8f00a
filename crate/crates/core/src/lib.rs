//! Differentiable underwater Gaussian splatting on the CPU.
//!
//! A scene is a cloud of anisotropic 3D Gaussians plus a learnable water
//! medium. One forward pass renders the scattering-free radiance image, scores
//! every Gaussian for floater-likeness, renders a pruned ("enhanced") image,
//! and composes it with attenuation and backscatter into an underwater image.
//! Every stage has a hand-written adjoint so the whole chain trains with Adam.

pub mod autodiff;
pub mod error;
pub mod io;
pub mod losses;
pub mod medium;
pub mod mlp;
pub mod optim;
pub mod paup;
pub mod pipeline;
pub mod raster;
pub mod sh;
pub mod synthetic;
pub mod trainer;
pub mod types;

pub use error::{Error, Result};
pub use medium::{Aabb, MediumParams, VMGrid};
pub use mlp::{DenseNet, PruneMlp};
pub use pipeline::Model;
pub use raster::{rasterize, render_depth, RenderBundle, Splat2D};
pub use types::{CameraView, Gaussian3D, GaussianCloud, Image, Quat, Vec3};
