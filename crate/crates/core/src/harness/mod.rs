//! Desk-scale scenes, the end-to-end pipeline and the gradient suite.

pub mod gradients;
pub mod pipeline;
pub mod scene;

pub use gradients::{run_gradient_suite, GradSuiteReport};
pub use pipeline::{run_pipeline, PipelineMode, PipelineOptions, PipelineOutput, PipelineReport};
pub use scene::{gen_scene, Profile, SceneConfig, SyntheticScene};
