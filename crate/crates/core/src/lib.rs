//! Multi-view morphable face fitting with occlusion-aware view synthesis.
//!
//! A linear morphable model is rendered into several calibrated views by a
//! software rasterizer. Pairs of views are tied together by covisible maps,
//! depth-based view synthesis and epipolar constraints, and all parameters
//! are fitted jointly by a damped Gauss-Newton solver.

// `!(x > 0.0)` is used on purpose throughout: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod camera;
pub mod error;
pub mod image;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod objective;
pub mod optimizer;
pub mod params;
pub mod raster;
pub mod raycast;
pub mod scene;
pub mod sh;
pub mod synth;
pub mod synthesis;

pub use camera::{project, relative_pose, CameraIntrinsics, PoseSE3, Projection};
pub use error::{Error, Result};
pub use image::{DepthMap, Image, Mask, RgbImage, EMPTY_DEPTH};
pub use model::{Landmark, MorphableModel};
pub use params::{ParamGroup, ParameterVector, ViewParams};
pub use raster::{render, rasterize, FragmentBuffer, RenderOutputs, EMPTY_TRIANGLE};
pub use synthesis::{covisible_map, covisible_triangles, covisible_vertices, synthesize_target, CovisibleMap};
pub use losses::{LossReport, LossWeights};
pub use metrics::{evaluate_fit, FitMetrics};
pub use objective::{Ablation, Objective, ObjectiveConfig, ObservedView, Term, ViewRig};
pub use optimizer::{fit, fit_rig, FitConfig, FitTrace};
pub use scene::{read_scene, SceneDir};
pub use synth::{generate_model, generate_scene, ModelSpec, RigSpec, Scene};
