//! Square symmetric geometric maps for face surfaces.
//!
//! The pipeline turns an open triangle mesh of a 3D face into a square
//! image of interpolated surface coordinates and back:
//!
//! 1. [`mesh`] loads OBJ geometry and checks the topology.
//! 2. [`harmonic`] flattens the surface to a unit disk with a discrete
//!    harmonic map.
//! 3. [`deform`] drags the disk into the unit square, pinning landmark
//!    pairs symmetrically, straightening the central axis, and spreading
//!    the outer boundary along the square's perimeter.
//! 4. [`sampling`] rasterizes the embedding into a geometric map with a
//!    validity mask, samples it back bilinearly, and mirrors it across
//!    the face's symmetry axis.
//!
//! [`losses`] evaluates the training objective of a translation network
//! operating on such maps, [`netshape`] derives the layer-by-layer
//! tensor shapes of that network, and [`metrics`] aligns and compares
//! reconstructed surfaces. [`synth`] generates the deterministic
//! geometry used by tests and fixtures.

pub mod deform;
pub mod error;
pub mod harmonic;
pub mod losses;
pub mod mesh;
pub mod metrics;
pub mod netshape;
pub mod rigid;
pub mod sampling;
pub mod sparse;
pub mod synth;

pub use deform::{
    axis_targets, deform_to_gmap, rearrange_key_vertices, DeformParams, DeformReport, FixedSet,
    KeySpecDoc, KeyVertexSpec, LandmarkPair,
};
pub use error::{Error, Result};
pub use harmonic::{boundary_to_circle, solve_harmonic, Frame, UVEmbedding};
pub use mesh::{parse_obj, Mesh, TopologyReport};
pub use sampling::{
    backward_sample, build_raster_table, flip_map, forward_map, GeometricMap, RasterTable,
    DEFAULT_RESOLUTION,
};
