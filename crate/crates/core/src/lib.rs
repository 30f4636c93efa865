//! Object pose estimation and online shape completion from partial references.
//!
//! The library tracks the 6-DoF pose of a single rigid object through an RGBD
//! sequence when the object's shape is only partially known up front. The
//! reference material may be a handful of posed RGBD views, the first frame of
//! the test sequence itself, or an externally produced mesh of unverified
//! scale. Whatever the source, the reconstructed model keeps an explicit
//! per-vertex record of which surface regions were actually observed; every
//! downstream stage — hypothesis scoring, ICP refinement, keyframe selection —
//! consumes only the trusted (certain) portion and treats the rest as
//! provisional. When too little of the visible object is trusted, the pipeline
//! completes the model online by fusing accumulated test views back into the
//! reconstruction.
//!
//! Modules mirror the pipeline stages:
//!
//! - [`geom`]: poses, intrinsics, viewpoint sampling, projection.
//! - [`img`]: small owned image buffers (color / depth / mask) and frames.
//! - [`mesh`]: indexed triangle meshes and surface sampling.
//! - [`volume`]: TSDF fusion, marching-cubes extraction, volumetric raycasting.
//! - [`raster`]: z-buffered mesh rasterization and vertex visibility.
//! - [`model`]: the hybrid mesh + per-vertex-uncertainty object model.
//! - [`pose`]: hypothesis generation, ICP refinement, scored selection, tracking.
//! - [`completion`]: keyframe memory pool and uncertainty-driven rebuilds.
//! - [`genmodel`]: ingesting generated meshes (scale search, view augmentation).
//! - [`synth`]: synthetic scenes and trajectories for tests and benchmarks.
//! - [`eval`]: pose/shape metrics (ADD, ADD-S, AUC, Chamfer).
//! - [`io`]: PLY/OBJ/PNG/JSON/binary-checkpoint serialization.
//! - [`pipeline`]: configuration plus the frame loop tying it all together.

pub mod completion;
pub mod eval;
pub mod genmodel;
pub mod geom;
pub mod img;
pub mod io;
pub mod mesh;
pub mod model;
mod mc_tables;
mod par;
pub mod pipeline;
pub mod pose;
pub mod raster;
pub mod synth;
pub mod volume;
