//! Training losses and their analytic gradients.
//!
//! Keypoints are expectations `P = W X` of a row-stochastic `K×N` matrix `W`
//! over the cloud coordinates `X`. Every loss reports its value together with
//! the gradient with respect to its direct inputs; [`total_loss`] chains the
//! keypoint gradients back onto `W`.
//!
//! Min-distance terms break ties toward the lowest index and take the
//! gradient of the selected branch. A zero-length difference contributes a
//! zero subgradient.

use std::borrow::Borrow;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::GeodesicMatrix;
use crate::pcloud::{dist2, Point3, PointCloud};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("empty point set")]
    EmptyCloud,
    #[error("need at least 2 keypoints, got {0}")]
    TooFewKeypoints(usize),
    #[error("need at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("not a probability matrix: {0}")]
    InvalidProbabilities(String),
    #[error("invalid loss weights: {0}")]
    InvalidWeights(String),
    #[error("geodesic loss enabled but no geodesic matrices supplied")]
    MissingGeodesics,
    #[error("reconstruction loss enabled but no reconstructions supplied")]
    MissingReconstruction,
}

const ROW_SUM_TOL: f64 = 1e-9;

/// `K×N` matrix whose row `j` is keypoint `j`'s distribution over the points.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    w: Array2<f64>,
}

impl ProbabilityMatrix {
    pub fn new(w: Array2<f64>) -> Result<Self, LossError> {
        if let Some(v) = w.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(LossError::InvalidProbabilities(format!("entry {v} outside [0, 1]")));
        }
        for (j, row) in w.rows().into_iter().enumerate() {
            let s = row.sum();
            if (s - 1.0).abs() > ROW_SUM_TOL {
                return Err(LossError::InvalidProbabilities(format!("row {j} sums to {s}")));
            }
        }
        Ok(Self { w })
    }

    /// Skips the stochasticity checks. The losses are defined for any matrix,
    /// which gradient probes rely on.
    pub fn new_unchecked(w: Array2<f64>) -> Self {
        Self { w }
    }

    /// Row `j` puts all its mass on point `indices[j]`.
    pub fn one_hot(indices: &[usize], n: usize) -> Self {
        let mut w = Array2::zeros((indices.len(), n));
        for (j, &i) in indices.iter().enumerate() {
            w[[j, i]] = 1.0;
        }
        Self { w }
    }

    pub fn k(&self) -> usize {
        self.w.nrows()
    }

    pub fn n(&self) -> usize {
        self.w.ncols()
    }

    pub fn as_array(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn into_array(self) -> Array2<f64> {
        self.w
    }

    /// The matrix with its columns reordered so column `c` is old column `perm[c]`.
    pub fn permute_columns(&self, perm: &[usize]) -> Self {
        let w = Array2::from_shape_fn((self.k(), perm.len()), |(j, c)| self.w[[j, perm[c]]]);
        Self { w }
    }
}

/// Expected keypoint positions.
#[derive(Debug, Clone, PartialEq)]
pub struct KeypointSet {
    positions: Vec<Point3>,
}

impl KeypointSet {
    pub fn new(positions: Vec<Point3>) -> Self {
        Self { positions }
    }

    pub fn positions(&self) -> &[Point3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn as_matrix(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.positions.len(), 3), self.positions.as_flattened())
            .expect("contiguous")
    }
}

/// `P = W X`: each keypoint is a convex combination of the cloud's points.
pub fn expected_keypoints(w: &ProbabilityMatrix, cloud: &PointCloud) -> Result<KeypointSet, LossError> {
    if w.n() != cloud.len() {
        return Err(LossError::ShapeMismatch(format!(
            "W has {} columns, cloud has {} points",
            w.n(),
            cloud.len()
        )));
    }
    let p = w.as_array().dot(&cloud.as_matrix());
    Ok(KeypointSet {
        positions: p.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect(),
    })
}

/// A scalar loss and its gradient with respect to a point set.
#[derive(Debug, Clone, PartialEq)]
pub struct PointLoss {
    pub value: f64,
    pub grad: Vec<Point3>,
}

fn nearest(q: &Point3, set: &[Point3]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, p) in set.iter().enumerate() {
        let d = dist2(q, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

#[inline]
fn sub(a: &Point3, b: &Point3) -> Point3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
fn norm(a: &Point3) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

#[inline]
fn axpy(acc: &mut Point3, s: f64, v: &Point3) {
    for a in 0..3 {
        acc[a] += s * v[a];
    }
}

/// Sum-convention Chamfer distance between `p` and `q`, with the gradient
/// with respect to `q`.
pub fn chamfer(p: &[Point3], q: &[Point3]) -> Result<PointLoss, LossError> {
    if p.is_empty() || q.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; q.len()];
    for x in p {
        let (j, d) = nearest(x, q);
        value += d;
        axpy(&mut grad[j], 2.0, &sub(&q[j], x));
    }
    for (j, y) in q.iter().enumerate() {
        let (i, d) = nearest(y, p);
        value += d;
        axpy(&mut grad[j], 2.0, &sub(y, &p[i]));
    }
    Ok(PointLoss { value, grad })
}

/// Chamfer distance with both sums replaced by means, comparable across
/// point counts. Used as the reconstruction error metric.
pub fn chamfer_mean(p: &[Point3], q: &[Point3]) -> Result<f64, LossError> {
    if p.is_empty() || q.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let fwd: f64 = p.iter().map(|x| nearest(x, q).1).sum::<f64>() / p.len() as f64;
    let bwd: f64 = q.iter().map(|y| nearest(y, p).1).sum::<f64>() / q.len() as f64;
    Ok(fwd + bwd)
}

/// Inverse of (mean nearest-other-keypoint distance + `epsilon`).
pub fn coverage_loss(kps: &KeypointSet, epsilon: f64) -> Result<PointLoss, LossError> {
    let p = kps.positions();
    let k = p.len();
    if k < 2 {
        return Err(LossError::TooFewKeypoints(k));
    }
    let mut mean = 0.0;
    let mut dmean = vec![[0.0; 3]; k];
    for i in 0..k {
        let mut best = (usize::MAX, f64::INFINITY);
        for j in 0..k {
            if j != i {
                let d = dist2(&p[i], &p[j]);
                if d < best.1 {
                    best = (j, d);
                }
            }
        }
        let j = best.0;
        let diff = sub(&p[i], &p[j]);
        let d = norm(&diff);
        mean += d / k as f64;
        if d > 0.0 {
            axpy(&mut dmean[i], 1.0 / (k as f64 * d), &diff);
            axpy(&mut dmean[j], -1.0 / (k as f64 * d), &diff);
        }
    }
    let denom = mean + epsilon;
    let value = 1.0 / denom;
    let scale = -1.0 / (denom * denom);
    let grad = dmean.iter().map(|g| g.map(|v| v * scale)).collect();
    Ok(PointLoss { value, grad })
}

/// Mean distance from each keypoint to its nearest cloud point; gradient is
/// with respect to the keypoints.
pub fn surface_loss(kps: &KeypointSet, cloud: &[Point3]) -> Result<PointLoss, LossError> {
    if cloud.is_empty() {
        return Err(LossError::EmptyCloud);
    }
    let p = kps.positions();
    let k = p.len().max(1) as f64;
    let mut value = 0.0;
    let mut grad = vec![[0.0; 3]; p.len()];
    for (i, kp) in p.iter().enumerate() {
        let (j, _) = nearest(kp, cloud);
        let diff = sub(kp, &cloud[j]);
        let d = norm(&diff);
        value += d / k;
        if d > 0.0 {
            axpy(&mut grad[i], 1.0 / (k * d), &diff);
        }
    }
    Ok(PointLoss { value, grad })
}

/// Which frame pairs the geodesic loss sums over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PairConvention {
    /// Every ordered pair `a != b`: each unordered pair counted twice.
    Ordered,
    /// Each unordered pair `a < b` once.
    Unordered,
}

impl PairConvention {
    fn factor(self) -> f64 {
        match self {
            PairConvention::Ordered => 2.0,
            PairConvention::Unordered => 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicLoss {
    pub value: f64,
    /// Gradient with respect to each frame's `W`.
    pub grads: Vec<Array2<f64>>,
}

/// Expected keypoint-to-keypoint geodesic distances `G = W D Wᵀ`, and `W D`.
pub fn expected_geodesics(w: &ProbabilityMatrix, d: &GeodesicMatrix) -> Result<(Array2<f64>, Array2<f64>), LossError> {
    if w.n() != d.n() {
        return Err(LossError::ShapeMismatch(format!(
            "W has {} columns, geodesic matrix is {}x{}",
            w.n(),
            d.n(),
            d.n()
        )));
    }
    let wd = w.as_array().dot(d.as_array());
    let g = wd.dot(&w.as_array().t());
    Ok((g, wd))
}

/// Sum over frame pairs of `‖G^a - G^b‖²_F`. Assumes symmetric geodesic
/// matrices, for which `∂/∂W^a = Σ_{b≠a} 4 (G^a - G^b) W^a D^a` per unordered pair.
pub fn geodesic_loss<W, D>(ws: &[W], ds: &[D], pairs: PairConvention) -> Result<GeodesicLoss, LossError>
where
    W: Borrow<ProbabilityMatrix>,
    D: Borrow<GeodesicMatrix>,
{
    let t = ws.len();
    if t < 2 {
        return Err(LossError::TooFewFrames(t));
    }
    if ds.len() != t {
        return Err(LossError::ShapeMismatch(format!("{t} probability matrices, {} geodesic matrices", ds.len())));
    }
    let k = ws[0].borrow().k();
    if let Some(bad) = ws.iter().position(|w| w.borrow().k() != k) {
        return Err(LossError::ShapeMismatch(format!("frame {bad} has a different keypoint count")));
    }
    let mut gs = Vec::with_capacity(t);
    let mut wds = Vec::with_capacity(t);
    for (w, d) in ws.iter().zip(ds) {
        let (g, wd) = expected_geodesics(w.borrow(), d.borrow())?;
        gs.push(g);
        wds.push(wd);
    }
    let factor = pairs.factor();
    let mut value = 0.0;
    let mut coef: Vec<Array2<f64>> = vec![Array2::zeros((k, k)); t];
    for a in 0..t {
        for b in (a + 1)..t {
            let diff = &gs[a] - &gs[b];
            value += factor * diff.iter().map(|v| v * v).sum::<f64>();
            coef[a] += &diff;
            coef[b] -= &diff;
        }
    }
    let grads = coef
        .iter()
        .zip(&wds)
        .map(|(c, wd)| c.dot(wd) * (4.0 * factor))
        .collect();
    Ok(GeodesicLoss { value, grads })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmoothingLoss {
    pub value: f64,
    /// Gradient with respect to each frame's keypoints.
    pub grads: Vec<Vec<Point3>>,
}

/// Mean distance travelled by each keypoint between consecutive frames.
pub fn smoothing_loss(kp_seq: &[KeypointSet]) -> Result<SmoothingLoss, LossError> {
    let t = kp_seq.len();
    if t < 2 {
        return Err(LossError::TooFewFrames(t));
    }
    let k = kp_seq[0].len();
    if let Some(bad) = kp_seq.iter().position(|s| s.len() != k) {
        return Err(LossError::ShapeMismatch(format!("frame {bad} has a different keypoint count")));
    }
    let scale = 1.0 / ((t - 1) as f64 * k.max(1) as f64);
    let mut value = 0.0;
    let mut grads = vec![vec![[0.0; 3]; k]; t];
    for s in 0..t - 1 {
        for j in 0..k {
            let diff = sub(&kp_seq[s].positions[j], &kp_seq[s + 1].positions[j]);
            let d = norm(&diff);
            value += scale * d;
            if d > 0.0 {
                axpy(&mut grads[s][j], scale / d, &diff);
                axpy(&mut grads[s + 1][j], -scale / d, &diff);
            }
        }
    }
    Ok(SmoothingLoss { value, grads })
}

fn default_rec() -> f64 {
    1.0
}
fn default_cov() -> f64 {
    2.5
}
fn default_surf() -> f64 {
    6.0
}
fn default_geo() -> f64 {
    6.0
}
fn default_smt() -> f64 {
    2.0
}
fn default_epsilon() -> f64 {
    1e-2
}
fn default_true() -> bool {
    true
}

/// Term weights. Defaults are the shape weights {1, 2.5, 6} and deformation
/// weights {6, 2}, with `epsilon = 1e-2` in the coverage term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    #[serde(default = "default_rec")]
    pub rec: f64,
    #[serde(default = "default_cov")]
    pub cov: f64,
    #[serde(default = "default_surf")]
    pub surf: f64,
    #[serde(default = "default_geo")]
    pub geo: f64,
    #[serde(default = "default_smt")]
    pub smt: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Sum the geodesic term over ordered frame pairs (each pair twice).
    #[serde(default = "default_true")]
    pub ordered_pairs: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            rec: default_rec(),
            cov: default_cov(),
            surf: default_surf(),
            geo: default_geo(),
            smt: default_smt(),
            epsilon: default_epsilon(),
            ordered_pairs: true,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            rec: 0.0,
            cov: 0.0,
            surf: 0.0,
            geo: 0.0,
            smt: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [
            ("rec", self.rec),
            ("cov", self.cov),
            ("surf", self.surf),
            ("geo", self.geo),
            ("smt", self.smt),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(LossError::InvalidWeights(format!("{name} = {v}")));
            }
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(LossError::InvalidWeights(format!("epsilon = {}", self.epsilon)));
        }
        Ok(())
    }

    pub fn pair_convention(&self) -> PairConvention {
        if self.ordered_pairs {
            PairConvention::Ordered
        } else {
            PairConvention::Unordered
        }
    }

    /// Zeroes the weight of `term`.
    pub fn without(mut self, term: Term) -> Self {
        *self.weight_mut(term) = 0.0;
        self
    }

    pub fn weight(&self, term: Term) -> f64 {
        match term {
            Term::Rec => self.rec,
            Term::Cov => self.cov,
            Term::Surf => self.surf,
            Term::Geo => self.geo,
            Term::Smt => self.smt,
        }
    }

    fn weight_mut(&mut self, term: Term) -> &mut f64 {
        match term {
            Term::Rec => &mut self.rec,
            Term::Cov => &mut self.cov,
            Term::Surf => &mut self.surf,
            Term::Geo => &mut self.geo,
            Term::Smt => &mut self.smt,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Term {
    Rec,
    Cov,
    Surf,
    Geo,
    Smt,
}

impl Term {
    pub const ALL: [Term; 5] = [Term::Rec, Term::Cov, Term::Surf, Term::Geo, Term::Smt];

    pub fn name(self) -> &'static str {
        match self {
            Term::Rec => "l_rec",
            Term::Cov => "l_cov",
            Term::Surf => "l_surf",
            Term::Geo => "l_geo",
            Term::Smt => "l_smt",
        }
    }
}

/// Unweighted values of each term; disabled terms are exactly 0.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub rec: f64,
    pub cov: f64,
    pub surf: f64,
    pub geo: f64,
    pub smt: f64,
}

impl LossTerms {
    pub fn get(&self, term: Term) -> f64 {
        match term {
            Term::Rec => self.rec,
            Term::Cov => self.cov,
            Term::Surf => self.surf,
            Term::Geo => self.geo,
            Term::Smt => self.smt,
        }
    }

    pub fn weighted(&self, weights: &LossWeights) -> f64 {
        Term::ALL.iter().map(|&t| weights.weight(t) * self.get(t)).sum()
    }

    /// First term whose value is not finite.
    pub fn first_non_finite(&self) -> Option<Term> {
        Term::ALL.into_iter().find(|&t| !self.get(t).is_finite())
    }

    pub fn add_scaled(&mut self, other: &LossTerms, s: f64) {
        self.rec += s * other.rec;
        self.cov += s * other.cov;
        self.surf += s * other.surf;
        self.geo += s * other.geo;
        self.smt += s * other.smt;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TotalLoss {
    pub total: f64,
    pub terms: LossTerms,
    /// `∂total/∂W^t`, including the keypoint terms chained through `P = W X`.
    /// The reconstruction path is not included; see `grad_recon`.
    pub grad_w: Vec<Array2<f64>>,
    /// `∂total/∂recon^t`; empty vectors when the reconstruction term is off.
    pub grad_recon: Vec<Vec<Point3>>,
}

/// Inputs of [`total_loss`] for one window of `T` frames.
pub struct LossInputs<'a, D: Borrow<GeodesicMatrix>> {
    pub frames: &'a [PointCloud],
    pub ws: &'a [ProbabilityMatrix],
    /// Required when the geodesic weight is non-zero.
    pub ds: Option<&'a [D]>,
    /// Required when the reconstruction weight is non-zero.
    pub recons: Option<&'a [Vec<Point3>]>,
}

/// Weighted sum of all terms. Shape terms are averaged over the frames;
/// terms with weight 0 are skipped entirely and reported as 0.
pub fn total_loss<D: Borrow<GeodesicMatrix>>(inputs: &LossInputs<'_, D>, weights: &LossWeights) -> Result<TotalLoss, LossError> {
    weights.validate()?;
    let LossInputs { frames, ws, ds, recons } = *inputs;
    let t = frames.len();
    if ws.len() != t {
        return Err(LossError::ShapeMismatch(format!("{t} frames, {} probability matrices", ws.len())));
    }
    if t == 0 {
        return Err(LossError::TooFewFrames(0));
    }
    let kps = frames
        .iter()
        .zip(ws)
        .map(|(f, w)| expected_keypoints(w, f))
        .collect::<Result<Vec<_>, _>>()?;
    let k = ws[0].k();
    let per_frame = 1.0 / t as f64;

    let mut terms = LossTerms::default();
    let mut grad_kp: Vec<Vec<Point3>> = vec![vec![[0.0; 3]; k]; t];
    let mut grad_w: Vec<Array2<f64>> = ws.iter().map(|w| Array2::zeros(w.as_array().raw_dim())).collect();
    let mut grad_recon: Vec<Vec<Point3>> = vec![Vec::new(); t];

    if weights.rec > 0.0 {
        let recons = recons.ok_or(LossError::MissingReconstruction)?;
        if recons.len() != t {
            return Err(LossError::ShapeMismatch(format!("{t} frames, {} reconstructions", recons.len())));
        }
        for (s, (f, r)) in frames.iter().zip(recons).enumerate() {
            let c = chamfer(f.points(), r)?;
            terms.rec += per_frame * c.value;
            grad_recon[s] = c.grad.iter().map(|g| g.map(|v| v * weights.rec * per_frame)).collect();
        }
    }
    if weights.cov > 0.0 {
        for (s, kp) in kps.iter().enumerate() {
            let c = coverage_loss(kp, weights.epsilon)?;
            terms.cov += per_frame * c.value;
            for (acc, g) in grad_kp[s].iter_mut().zip(&c.grad) {
                axpy(acc, weights.cov * per_frame, g);
            }
        }
    }
    if weights.surf > 0.0 {
        for (s, (kp, f)) in kps.iter().zip(frames).enumerate() {
            let c = surface_loss(kp, f.points())?;
            terms.surf += per_frame * c.value;
            for (acc, g) in grad_kp[s].iter_mut().zip(&c.grad) {
                axpy(acc, weights.surf * per_frame, g);
            }
        }
    }
    if weights.geo > 0.0 {
        let ds = ds.ok_or(LossError::MissingGeodesics)?;
        let g = geodesic_loss(ws, ds, weights.pair_convention())?;
        terms.geo = g.value;
        for (acc, gw) in grad_w.iter_mut().zip(&g.grads) {
            acc.scaled_add(weights.geo, gw);
        }
    }
    if weights.smt > 0.0 {
        let sm = smoothing_loss(&kps)?;
        terms.smt = sm.value;
        for (acc, gs) in grad_kp.iter_mut().zip(&sm.grads) {
            for (a, g) in acc.iter_mut().zip(gs) {
                axpy(a, weights.smt, g);
            }
        }
    }

    // chain keypoint gradients: ∂/∂W = (∂/∂P) Xᵀ
    for ((gw, gk), f) in grad_w.iter_mut().zip(&grad_kp).zip(frames) {
        if gk.iter().all(|g| *g == [0.0; 3]) {
            continue;
        }
        let gk = ArrayView2::from_shape((k, 3), gk.as_flattened()).expect("contiguous");
        *gw += &gk.dot(&f.as_matrix().t());
    }

    Ok(TotalLoss {
        total: terms.weighted(weights),
        terms,
        grad_w,
        grad_recon,
    })
}
