//! Tetrahedral-mesh radiance fields.
//!
//! A scene is a conformal tetrahedral mesh whose leaf elements are turned
//! into 3D Gaussians for splatting. Base vertices move only through an
//! orientation-preserving invertible map, so trained meshes stay free of
//! inverted elements. Leaves come from implicit 1-to-4 subdivision of the
//! base tets and follow the base mesh under simulation or deformation.
//!
//! The numerical core is generic over the scalar type ([`Real`], implemented
//! for `f32` and `f64`); aliases for both precisions are exported below.

pub mod checkpoint;
pub mod error;
pub mod linalg;
pub mod model;
pub mod ply;
pub mod scalar;
pub mod tetgen;
pub mod tetmesh;

pub mod dynamics;
pub mod hierarchy;
pub mod imageio;
pub mod homeo;
pub mod reparam;
pub mod scene;
pub mod sh;
pub mod splat;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Real;
pub use tetmesh::{Aabb, QualityReport, TetMesh};

pub type TetMesh32 = TetMesh<f32>;
pub type TetMesh64 = TetMesh<f64>;
pub type Map32 = homeo::OrientationPreservingMap<f32>;
pub type Map64 = homeo::OrientationPreservingMap<f64>;
