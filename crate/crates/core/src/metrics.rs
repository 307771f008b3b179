//! Keypoint quality metrics and perturbation protocols.
//!
//! Distances are in the units of the input clouds; the default thresholds
//! assume shapes of roughly unit extent.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::geodesy::{geodesics_with_retry, GeodesicMatrix, GeodesyError};
use crate::io::write_atomic;
use crate::losses::{chamfer_mean, expected_geodesics, KeypointSet, LossError, ProbabilityMatrix};
use crate::nnet::{forward, ModelError, ModelParams};
use crate::pcloud::{aabb, add_gaussian_noise, dist2, fps_downsample, CloudError, PointCloud, SequenceWindow};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("need at least 2 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("empty point cloud")]
    EmptyCloud,
    #[error("sequence has no ground-truth correspondences")]
    MissingCorrespondence,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid protocol {0:?} (expected clean, noise:<variance> or fps:<ratio>)")]
    BadProtocol(String),
    #[error(transparent)]
    Cloud(#[from] CloudError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// PCK thresholds 0.01, 0.02, ..., 0.10.
pub fn default_taus() -> Vec<f64> {
    (1..=10).map(|i| i as f64 / 100.0).collect()
}

pub const DEFAULT_DELTA: f64 = 0.05;
const VOLUME_EPS: f64 = 1e-6;

fn nearest_index(q: &[f64; 3], set: &[[f64; 3]]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (j, p) in set.iter().enumerate() {
        let d = dist2(q, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best.0
}

/// Percentage of keypoints whose nearest keypoint in the next frame carries
/// the same index, over all consecutive frame pairs.
pub fn t_con(kp_seq: &[KeypointSet]) -> Result<f64, MetricsError> {
    if kp_seq.len() < 2 {
        return Err(MetricsError::TooFewFrames(kp_seq.len()));
    }
    let k = kp_seq[0].len();
    if kp_seq.iter().any(|s| s.len() != k) {
        return Err(MetricsError::ShapeMismatch("keypoint counts differ across frames".into()));
    }
    let mut hits = 0usize;
    for pair in kp_seq.windows(2) {
        let next = pair[1].positions();
        hits += pair[0]
            .positions()
            .iter()
            .enumerate()
            .filter(|(i, p)| nearest_index(p, next) == *i)
            .count();
    }
    Ok(100.0 * hits as f64 / ((kp_seq.len() - 1) * k).max(1) as f64)
}

/// Per-keypoint repeatability errors: frame-1 probabilities carried to frame
/// `t` through the ground-truth correspondence, re-expected over frame-`t`
/// coordinates, and compared with the frame-`t` prediction (`t >= 2`).
pub fn repeatability_errors(window: &SequenceWindow, ws: &[ProbabilityMatrix]) -> Result<Vec<f64>, MetricsError> {
    if window.len() < 2 {
        return Err(MetricsError::TooFewFrames(window.len()));
    }
    if ws.len() != window.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} frames, {} W", window.len(), ws.len())));
    }
    let n = window.n_points();
    if ws.iter().any(|w| w.n() != n) {
        return Err(MetricsError::ShapeMismatch("W columns differ from point count".into()));
    }
    let w1 = ws[0].as_array();
    let mut errors = Vec::new();
    for t in 1..window.len() {
        let map = window.map_from_first(t).ok_or(MetricsError::MissingCorrespondence)?;
        let pts = window.frames()[t].points();
        let pred = ws[t].as_array();
        for i in 0..ws[0].k() {
            let mut gt = [0.0; 3];
            let mut pr = [0.0; 3];
            for p in 0..n {
                let a = w1[[i, p]];
                let b = pred[[i, p]];
                for ax in 0..3 {
                    gt[ax] += a * pts[map[p]][ax];
                    pr[ax] += b * pts[p][ax];
                }
            }
            errors.push(dist2(&gt, &pr).sqrt());
        }
    }
    Ok(errors)
}

/// PCK curve: for each `tau`, the percentage of repeatability errors below it.
pub fn pck(window: &SequenceWindow, ws: &[ProbabilityMatrix], taus: &[f64]) -> Result<Vec<(f64, f64)>, MetricsError> {
    let errors = repeatability_errors(window, ws)?;
    Ok(pck_from_errors(&errors, taus))
}

pub fn pck_from_errors(errors: &[f64], taus: &[f64]) -> Vec<(f64, f64)> {
    taus.iter()
        .map(|&tau| {
            let hits = errors.iter().filter(|&&e| e < tau).count();
            (tau, 100.0 * hits as f64 / errors.len().max(1) as f64)
        })
        .collect()
}

/// Percentage of keypoints within `delta` of some cloud point.
pub fn inclusivity(kps: &KeypointSet, cloud: &PointCloud, delta: f64) -> Result<f64, MetricsError> {
    if cloud.is_empty() {
        return Err(MetricsError::EmptyCloud);
    }
    let pts = cloud.points();
    let inside = kps
        .positions()
        .iter()
        .filter(|k| dist2(k, &pts[nearest_index(k, pts)]) <= delta * delta)
        .count();
    Ok(100.0 * inside as f64 / kps.len().max(1) as f64)
}

fn padded_volume(points: &[[f64; 3]]) -> f64 {
    let (lo, hi) = aabb(points);
    (0..3).map(|a| hi[a] - lo[a] + VOLUME_EPS).product()
}

/// Bounding-box volume of the keypoints relative to that of the cloud, in
/// percent and capped at 100.
pub fn coverage_metric(kps: &KeypointSet, cloud: &PointCloud) -> Result<f64, MetricsError> {
    if kps.len() < 2 {
        return Err(MetricsError::TooFewKeypoints(kps.len()));
    }
    let ratio = padded_volume(kps.positions()) / padded_volume(cloud.points());
    Ok(100.0 * ratio.min(1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GdErr {
    pub value: f64,
    /// Set when K = 1: no off-diagonal entries exist and `value` is 0 by convention.
    pub degenerate: bool,
}

/// Mean over consecutive frames of the mean absolute off-diagonal change in
/// expected keypoint geodesics `W D Wᵀ`.
pub fn gd_err<D: std::borrow::Borrow<GeodesicMatrix>>(ws: &[ProbabilityMatrix], ds: &[D]) -> Result<GdErr, MetricsError> {
    if ws.len() < 2 {
        return Err(MetricsError::TooFewFrames(ws.len()));
    }
    if ds.len() != ws.len() {
        return Err(MetricsError::ShapeMismatch(format!("{} W, {} D", ws.len(), ds.len())));
    }
    let k = ws[0].k();
    if k < 2 {
        return Ok(GdErr {
            value: 0.0,
            degenerate: true,
        });
    }
    let gs = ws
        .iter()
        .zip(ds)
        .map(|(w, d)| expected_geodesics(w, d.borrow()).map(|(g, _)| g))
        .collect::<Result<Vec<_>, _>>()?;
    let mut total = 0.0;
    for pair in gs.windows(2) {
        let mut s = 0.0;
        for i in 0..k {
            for j in 0..k {
                if i != j {
                    s += (pair[0][[i, j]] - pair[1][[i, j]]).abs();
                }
            }
        }
        total += s / (k * (k - 1)) as f64;
    }
    Ok(GdErr {
        value: total / (gs.len() - 1) as f64,
        degenerate: false,
    })
}

/// Input perturbation applied before evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum Protocol {
    Clean,
    /// Additive Gaussian noise of this per-axis variance.
    Noise(f64),
    /// Farthest-point downsampling to `N / ratio` points, frame by frame.
    Fps(usize),
}

impl FromStr for Protocol {
    type Err = MetricsError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || MetricsError::BadProtocol(s.to_string());
        match s.split_once(':') {
            None if s == "clean" => Ok(Protocol::Clean),
            Some(("noise", v)) => {
                let v: f64 = v.parse().map_err(|_| bad())?;
                if !(v.is_finite() && v >= 0.0) {
                    return Err(bad());
                }
                Ok(Protocol::Noise(v))
            }
            Some(("fps", r)) => {
                let r = r.trim_start_matches('x');
                let r: usize = r.parse().map_err(|_| bad())?;
                if r == 0 {
                    return Err(bad());
                }
                Ok(Protocol::Fps(r))
            }
            _ => Err(bad()),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Clean => write!(f, "clean"),
            Protocol::Noise(v) => write!(f, "noise:{v}"),
            Protocol::Fps(r) => write!(f, "fps:{r}"),
        }
    }
}

/// Applies `protocol` to every frame. Noise keeps the correspondences;
/// downsampling discards them. `noise:0` and `fps:1` return the input.
pub fn perturb(seq: &SequenceWindow, protocol: Protocol, seed: u64) -> Result<SequenceWindow, MetricsError> {
    match protocol {
        Protocol::Clean | Protocol::Noise(0.0) | Protocol::Fps(1) => Ok(seq.clone()),
        Protocol::Noise(v) => {
            let frames = seq
                .frames()
                .iter()
                .enumerate()
                .map(|(t, f)| add_gaussian_noise(f, v, seed.wrapping_add(t as u64)))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SequenceWindow::new(frames, seq.correspondences().map(<[_]>::to_vec))?)
        }
        Protocol::Fps(r) => {
            let m = seq.n_points() / r;
            let frames = seq
                .frames()
                .iter()
                .map(|f| fps_downsample(f, m, 0))
                .collect::<Result<Vec<_>, _>>()?;
            Ok(SequenceWindow::new(frames, None)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EvalOptions {
    pub delta: f64,
    pub knn_k: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            delta: DEFAULT_DELTA,
            knn_k: crate::geodesy::DEFAULT_K,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub protocol: Protocol,
    pub options: EvalOptions,
    pub n_frames: usize,
    pub n_points: usize,
    /// Percent, averaged over frames.
    pub inclusivity: f64,
    /// Percent, averaged over frames.
    pub coverage: f64,
    pub t_con: f64,
    /// `(tau, percent)`; empty when correspondences are unavailable.
    pub pck: Vec<(f64, f64)>,
    /// Mean-normalized Chamfer distance between each frame and its
    /// reconstruction, averaged over frames.
    pub recon_err: f64,
    pub gd_err: GdErr,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn pck_at(&self, tau: f64) -> Option<f64> {
        self.pck.iter().find(|(t, _)| (t - tau).abs() < 1e-12).map(|p| p.1)
    }

    pub fn pck_csv(&self) -> String {
        let mut out = String::from("tau,pck\n");
        for (t, p) in &self.pck {
            out.push_str(&format!("{t},{p}\n"));
        }
        out
    }

    pub fn write_pck_csv(&self, path: &Path) -> Result<(), crate::io::FormatError> {
        write_atomic(path, self.pck_csv().as_bytes())
    }
}

/// Perturbs the sequence, runs the model on every frame and scores the output.
/// Geodesics are computed on the perturbed frames.
pub fn evaluate(
    params: &ModelParams,
    seq: &SequenceWindow,
    protocol: Protocol,
    options: EvalOptions,
) -> Result<MetricsReport, MetricsError> {
    if seq.len() < 2 {
        return Err(MetricsError::TooFewFrames(seq.len()));
    }
    let seq = perturb(seq, protocol, options.seed)?;
    let frames = seq.frames();
    let outputs = frames
        .par_iter()
        .map(|f| -> Result<_, MetricsError> {
            let out = forward(params, f)?;
            let (d, _) = geodesics_with_retry(f, options.knn_k, 3)?;
            let inc = inclusivity(&out.keypoints, f, options.delta)?;
            let cov = coverage_metric(&out.keypoints, f)?;
            let rec = chamfer_mean(f.points(), &out.reconstruction)?;
            Ok((out, d, inc, cov, rec))
        })
        .collect::<Result<Vec<_>, _>>()?;
    let t = frames.len() as f64;
    let kps: Vec<_> = outputs.iter().map(|o| o.0.keypoints.clone()).collect();
    let ws: Vec<_> = outputs.iter().map(|o| o.0.w.clone()).collect();
    let ds: Vec<_> = outputs.iter().map(|o| &o.1).collect();

    let mut warnings = Vec::new();
    let pck_curve = if seq.correspondences().is_some() {
        pck(&seq, &ws, &default_taus())?
    } else {
        warnings.push(format!("{protocol}: no correspondences after perturbation; PCK omitted"));
        Vec::new()
    };
    let gd = gd_err(&ws, &ds)?;
    if gd.degenerate {
        warnings.push("gd_err undefined for a single keypoint; reported as 0".into());
    }
    Ok(MetricsReport {
        protocol,
        options,
        n_frames: frames.len(),
        n_points: seq.n_points(),
        inclusivity: outputs.iter().map(|o| o.2).sum::<f64>() / t,
        coverage: outputs.iter().map(|o| o.3).sum::<f64>() / t,
        t_con: t_con(&kps)?,
        pck: pck_curve,
        recon_err: outputs.iter().map(|o| o.4).sum::<f64>() / t,
        gd_err: gd,
        warnings,
    })
}
