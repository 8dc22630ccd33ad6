//! Sparse-view depth reconstruction and novel view synthesis.
//!
//! A target view is rendered from three posed source images: source views are
//! chosen by a Delaunay triangulation of camera positions, a learned
//! coarse-to-fine sphere tracer finds the surface for every pixel at once, and
//! a blending network produces colour and a per-pixel confidence.

pub mod autodiff;
pub mod camera;
pub mod encoders;
pub mod error;
pub mod model;
pub mod objective;
pub mod ray_marcher;
pub mod renderer;
pub mod scene_io;
pub mod trainer;
pub mod view_select;

pub use error::{Error, Result};
pub use autodiff::{Scalar, Tensor, Var};
pub use camera::{Camera, CameraIntrinsics, CameraPose};
pub use model::{Model, ModelConfig};
pub use objective::{LossConfig, MetricsReport};
pub use renderer::{render, RenderOutput};
pub use scene_io::{load_scene, SceneDataset, Split, View};
pub use trainer::{Checkpoint, TrainConfig};
pub use view_select::{ViewSelection, WorkingSet};
