//! Self-supervised, geodesic-consistent 3D keypoints on deforming point clouds.
//!
//! The crate is organized bottom-up: [`pcloud`] and [`io`] hold the data
//! types and file formats, [`synth`] generates deforming sequences with known
//! correspondences, [`geodesy`] approximates intrinsic distances, [`losses`]
//! and [`nnet`] define the model and its training signal, [`trainer`] runs
//! optimization and [`metrics`] scores predicted keypoints.

pub mod geodesy;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nnet;
pub mod pcloud;
pub mod synth;
pub mod trainer;

pub use geodesy::{GeodesicMatrix, GeodesyError, NeighborGraph};
pub use io::{FormatError, Manifest, ManifestFile};
pub use losses::{KeypointSet, LossError, LossTerms, LossWeights, ProbabilityMatrix, Term};
pub use pcloud::{CloudError, Correspondence, Point3, PointCloud, SequenceWindow};
pub use synth::{DeformSpec, Generator, SynthError};
