//! Camera action manifold geometry for interactive perception.
//!
//! - [`sphere`]: points, tangent vectors, geodesics and hulls on the
//!   hemispherical camera sphere.
//! - [`karcher`]: Fréchet mean by a Riemannian trust-region method.
//! - [`davs`]: the dynamic active vision space built from SOI keypoints
//!   and the current camera position, with its sampling cone.

pub mod davs;
pub mod karcher;
pub mod sphere;

pub use davs::{
    build_davs, build_refined_manifold, build_soi_polygon, find_perpendicular_points,
    sample_direction, tangent_frame, DavsConfig, DavsError, DavsManifold, SoiKeypointSet,
    SoiPolygon, TangentFrame,
};
pub use karcher::{karcher_mean, FrechetProblem, KarcherError, KarcherOptions};
pub use sphere::{GeometryError, SphereChart, SpherePoint, TangentVector, Vec3};
