//! Diffusion-based cloth perception and dynamics with sampling-based planning.
//!
//! The crate is organised bottom-up:
//!
//! * [`geometry`] – meshes, point clouds, FPS and the MSE / Chamfer / EMD metrics
//! * [`clothsim`] – a mass-spring cloth simulator used as ground truth
//! * [`observation`] – partial point clouds, augmentation and tokenization
//! * [`neural`] – a reverse-mode autodiff tensor core and transformer layers
//! * [`diffusion`] – DDPM schedule, noising, loss and ancestral sampling
//! * [`perception`] – the state-estimation diffusion model
//! * [`dynamics`] – the future-frame diffusion model
//! * [`planner`] – MPPI/CEM planning with grasp selection
//! * [`io`] and [`pipeline`] – persistence, datasets and evaluation

pub mod clothsim;
pub mod diffusion;
pub mod dynamics;
pub mod error;
pub mod geometry;
pub mod io;
pub mod neural;
pub mod observation;
pub mod patchnet;
pub mod perception;
pub mod pipeline;
pub mod planner;
pub mod training;

pub use error::{Error, Result};
