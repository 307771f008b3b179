//! Shared fixtures for the benchmarks.

use std::sync::Arc;

use geokp::geodesy::{geodesics_with_retry, DEFAULT_K};
use geokp::synth::{generate, DeformSpec, Generator};
use geokp::{GeodesicMatrix, PointCloud};

/// A bending-tube sequence of `n_frames` frames with `n_points` points each.
pub fn bend_frames(n_points: usize, n_frames: usize) -> Vec<PointCloud> {
    generate(&DeformSpec {
        generator: Generator::BendingCylinder,
        n_points,
        n_frames,
        amplitude: 0.5,
        seed: 0,
    })
    .expect("valid spec")
    .frames()
    .to_vec()
}

/// Geodesic matrices of `frames`, as the trainer holds them.
pub fn geodesics(frames: &[PointCloud]) -> Vec<Arc<GeodesicMatrix>> {
    frames
        .iter()
        .map(|f| Arc::new(geodesics_with_retry(f, DEFAULT_K, 3).expect("connected").0))
        .collect()
}
