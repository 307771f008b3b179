//! Training over sliding windows of deforming sequences.
//!
//! A batch is `batch_windows` windows whose gradients are averaged before a
//! single Adam step. Window gradients are evaluated in parallel and reduced
//! in window order, so results do not depend on the thread count.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geodesy::{cache_read, GeodesicMatrix, GeodesyError};
use crate::io::{FormatError, ManifestFile};
use crate::losses::{total_loss, LossError, LossInputs, LossTerms, LossWeights, Term};
use crate::nnet::{
    adam_step, backward, forward, init_params, save_checkpoint, AdamConfig, AdamState, CheckpointError, Forward,
    Gradients, ModelError, ModelParams,
};
use crate::pcloud::PointCloud;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{manifest}: no geodesic cache for frame {frame}; run preprocess first")]
    MissingGeodesicCache { manifest: PathBuf, frame: usize },
    #[error("sequence has {frames} frames, fewer than the window length {t_window}")]
    TooShortSequence { frames: usize, t_window: usize },
    #[error("frame {frame} has {found} points, config expects {expected}")]
    PointCountMismatch { frame: usize, expected: usize, found: usize },
    #[error("non-finite {term} at epoch {epoch}; aborting before the parameter update")]
    NonFiniteLoss { term: &'static str, epoch: usize },
    #[error("non-finite gradient at epoch {epoch}; aborting before the parameter update")]
    NonFiniteGradient { epoch: usize },
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error(transparent)]
    Geodesy(#[from] GeodesyError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn d_k() -> usize {
    12
}
fn d_m() -> usize {
    512
}
fn d_t() -> usize {
    4
}
fn d_one() -> usize {
    1
}
fn d_batch() -> usize {
    4
}
fn d_epochs() -> usize {
    200
}
fn d_lr() -> f64 {
    1e-3
}
fn d_knn() -> usize {
    crate::geodesy::DEFAULT_K
}
fn d_n() -> usize {
    512
}
fn d_out() -> PathBuf {
    PathBuf::from("run")
}

/// Training configuration; every field has a default so a JSON config only
/// needs to list what it changes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_k")]
    pub k_keypoints: usize,
    #[serde(default = "d_m")]
    pub m_recon: usize,
    #[serde(default = "d_t")]
    pub t_window: usize,
    #[serde(default = "d_one")]
    pub stride: usize,
    #[serde(default = "d_batch")]
    pub batch_windows: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub weights: LossWeights,
    /// Terms forced to weight 0 regardless of `weights`.
    #[serde(default)]
    pub ablation: Vec<Term>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_knn")]
    pub knn_k: usize,
    #[serde(default = "d_n")]
    pub n_points: usize,
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub val: Vec<PathBuf>,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.k_keypoints < 2 {
            return bad(format!("k_keypoints = {} < 2", self.k_keypoints));
        }
        for (name, v) in [
            ("m_recon", self.m_recon),
            ("stride", self.stride),
            ("batch_windows", self.batch_windows),
            ("knn_k", self.knn_k),
            ("n_points", self.n_points),
        ] {
            if v == 0 {
                return bad(format!("{name} must be >= 1"));
            }
        }
        if self.t_window < 2 {
            return bad(format!("t_window = {} < 2", self.t_window));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad(format!("lr = {}", self.lr));
        }
        if self.n_points < self.k_keypoints {
            return bad(format!("n_points {} < k_keypoints {}", self.n_points, self.k_keypoints));
        }
        self.weights.validate()?;
        Ok(())
    }

    /// Loss weights with the ablated terms zeroed.
    pub fn effective_weights(&self) -> LossWeights {
        self.ablation.iter().fold(self.weights, |w, &t| w.without(t))
    }
}

/// Whether the geodesic term participates at these weights.
pub fn needs_geodesics(weights: &LossWeights) -> bool {
    weights.geo > 0.0
}

enum GeodesicSource {
    None,
    Memory(Vec<Arc<GeodesicMatrix>>),
    Files(Vec<PathBuf>),
}

/// Frames of one sequence with geodesic matrices loaded on first use.
pub struct SequenceData {
    name: PathBuf,
    frames: Vec<PointCloud>,
    source: GeodesicSource,
    loaded: Vec<OnceLock<Arc<GeodesicMatrix>>>,
    loads: AtomicUsize,
}

impl SequenceData {
    pub fn in_memory(frames: Vec<PointCloud>, geodesics: Option<Vec<GeodesicMatrix>>) -> Self {
        let t = frames.len();
        Self {
            name: PathBuf::from("<memory>"),
            frames,
            source: match geodesics {
                Some(g) => GeodesicSource::Memory(g.into_iter().map(Arc::new).collect()),
                None => GeodesicSource::None,
            },
            loaded: (0..t).map(|_| OnceLock::new()).collect(),
            loads: AtomicUsize::new(0),
        }
    }

    /// Reads the frames; geodesic caches listed in the manifest are only
    /// opened when a window first needs them.
    pub fn from_manifest(path: &Path) -> Result<Self, TrainError> {
        let file = ManifestFile::load(path)?;
        let seq = file.load_sequence()?;
        let t = seq.len();
        let source = match file.geodesic_paths() {
            Some(p) if p.len() == t => GeodesicSource::Files(p),
            Some(p) => {
                return Err(TrainError::InvalidConfig(format!(
                    "{}: {} geodesic caches for {t} frames",
                    path.display(),
                    p.len()
                )))
            }
            None => GeodesicSource::None,
        };
        Ok(Self {
            name: path.to_path_buf(),
            frames: seq.frames().to_vec(),
            source,
            loaded: (0..t).map(|_| OnceLock::new()).collect(),
            loads: AtomicUsize::new(0),
        })
    }

    pub fn frames(&self) -> &[PointCloud] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// How many geodesic matrices have been fetched so far.
    pub fn geodesic_loads(&self) -> usize {
        self.loads.load(Ordering::Relaxed)
    }

    fn check_geodesics(&self) -> Result<(), TrainError> {
        let missing = |frame| TrainError::MissingGeodesicCache {
            manifest: self.name.clone(),
            frame,
        };
        match &self.source {
            GeodesicSource::None => Err(missing(0)),
            GeodesicSource::Memory(_) => Ok(()),
            GeodesicSource::Files(paths) => match paths.iter().position(|p| !p.is_file()) {
                Some(frame) => Err(missing(frame)),
                None => Ok(()),
            },
        }
    }

    pub fn geodesic(&self, t: usize) -> Result<Arc<GeodesicMatrix>, TrainError> {
        if let Some(d) = self.loaded[t].get() {
            return Ok(d.clone());
        }
        let d = match &self.source {
            GeodesicSource::None => {
                return Err(TrainError::MissingGeodesicCache {
                    manifest: self.name.clone(),
                    frame: t,
                })
            }
            GeodesicSource::Memory(g) => g[t].clone(),
            GeodesicSource::Files(p) => {
                let d = cache_read(&p[t])?;
                if d.n() != self.frames[t].len() {
                    return Err(TrainError::InvalidConfig(format!(
                        "{}: {} points but geodesic cache is {}x{}",
                        p[t].display(),
                        self.frames[t].len(),
                        d.n(),
                        d.n()
                    )));
                }
                Arc::new(d)
            }
        };
        self.loads.fetch_add(1, Ordering::Relaxed);
        Ok(self.loaded[t].get_or_init(|| d).clone())
    }
}

/// `len` consecutive frames of a sequence.
#[derive(Clone)]
pub struct Window {
    pub seq: Arc<SequenceData>,
    pub start: usize,
    pub len: usize,
}

impl Window {
    pub fn frames(&self) -> &[PointCloud] {
        &self.seq.frames[self.start..self.start + self.len]
    }

    pub fn geodesics(&self) -> Result<Vec<Arc<GeodesicMatrix>>, TrainError> {
        (self.start..self.start + self.len).map(|t| self.seq.geodesic(t)).collect()
    }
}

/// Overlapping windows of `t_window` frames every `stride` frames. With
/// `require_geodesics`, every frame must have a geodesic cache available
/// (checked without reading it).
pub fn make_windows(
    seq: &Arc<SequenceData>,
    t_window: usize,
    stride: usize,
    require_geodesics: bool,
) -> Result<Vec<Window>, TrainError> {
    if t_window == 0 || stride == 0 {
        return Err(TrainError::InvalidConfig("t_window and stride must be >= 1".into()));
    }
    if seq.len() < t_window {
        return Err(TrainError::TooShortSequence {
            frames: seq.len(),
            t_window,
        });
    }
    if require_geodesics {
        seq.check_geodesics()?;
    }
    Ok((0..=seq.len() - t_window)
        .step_by(stride)
        .map(|start| Window {
            seq: seq.clone(),
            start,
            len: t_window,
        })
        .collect())
}

/// Loss value and breakdown of one window.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WindowLoss {
    pub total: f64,
    pub terms: LossTerms,
}

fn run_forward(params: &ModelParams, frames: &[PointCloud]) -> Result<Vec<Forward>, TrainError> {
    frames.iter().map(|f| Ok(forward(params, f)?)).collect()
}

fn window_total(
    fwds: &[Forward],
    frames: &[PointCloud],
    ds: Option<&[Arc<GeodesicMatrix>]>,
    weights: &LossWeights,
) -> Result<crate::losses::TotalLoss, TrainError> {
    let ws: Vec<_> = fwds.iter().map(|f| f.w.clone()).collect();
    let recons: Vec<_> = fwds.iter().map(|f| f.reconstruction.clone()).collect();
    Ok(total_loss(
        &LossInputs {
            frames,
            ws: &ws,
            ds,
            recons: Some(&recons),
        },
        weights,
    )?)
}

/// Loss and parameter gradients of one window. Geodesics are only required
/// when the geodesic weight is non-zero.
pub fn window_gradient(
    params: &ModelParams,
    frames: &[PointCloud],
    ds: Option<&[Arc<GeodesicMatrix>]>,
    weights: &LossWeights,
) -> Result<(WindowLoss, Gradients), TrainError> {
    let fwds = run_forward(params, frames)?;
    let loss = window_total(&fwds, frames, ds, weights)?;
    let mut grads = Gradients::zeros_like(params);
    for ((f, gw), gr) in fwds.iter().zip(&loss.grad_w).zip(&loss.grad_recon) {
        grads.add_assign(&backward(params, f, gw, gr)?);
    }
    Ok((
        WindowLoss {
            total: loss.total,
            terms: loss.terms,
        },
        grads,
    ))
}

pub fn window_loss(
    params: &ModelParams,
    frames: &[PointCloud],
    ds: Option<&[Arc<GeodesicMatrix>]>,
    weights: &LossWeights,
) -> Result<WindowLoss, TrainError> {
    let fwds = run_forward(params, frames)?;
    let loss = window_total(&fwds, frames, ds, weights)?;
    Ok(WindowLoss {
        total: loss.total,
        terms: loss.terms,
    })
}

fn window_inputs(w: &Window, weights: &LossWeights) -> Result<Option<Vec<Arc<GeodesicMatrix>>>, TrainError> {
    if needs_geodesics(weights) {
        Ok(Some(w.geodesics()?))
    } else {
        Ok(None)
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean unweighted terms over the epoch's windows, evaluated before each update.
    pub terms: LossTerms,
    pub total: f64,
    pub val_total: Option<f64>,
}

pub const LOG_HEADER: &str = "epoch,l_rec,l_cov,l_surf,l_geo,l_smt,total,val_total";

impl EpochLog {
    pub fn csv_row(&self) -> String {
        let t = &self.terms;
        let val = self.val_total.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{}",
            self.epoch, t.rec, t.cov, t.surf, t.geo, t.smt, self.total, val
        )
    }
}

pub struct TrainOutcome {
    pub last: ModelParams,
    pub best: ModelParams,
    /// 1-based epoch of `best`; 0 when no epoch ran.
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

fn mean_loss(params: &ModelParams, windows: &[Window], weights: &LossWeights) -> Result<f64, TrainError> {
    let losses = windows
        .par_iter()
        .map(|w| {
            let ds = window_inputs(w, weights)?;
            window_loss(params, w.frames(), ds.as_deref(), weights)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(losses.iter().map(|l| l.total).sum::<f64>() / losses.len().max(1) as f64)
}

/// Trains on the given sequences. When `out_dir` is set, the CSV log,
/// `best.gkpm` and `last.gkpm` are written there; the log is appended to
/// after every epoch. Model selection uses the validation total when
/// validation sequences are given and the training total otherwise.
pub fn train(
    config: &TrainConfig,
    train_seqs: &[Arc<SequenceData>],
    val_seqs: &[Arc<SequenceData>],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome, TrainError> {
    config.validate()?;
    let weights = config.effective_weights();
    let need_d = needs_geodesics(&weights);
    if train_seqs.is_empty() {
        return Err(TrainError::InvalidConfig("no training sequences".into()));
    }
    for seq in train_seqs.iter().chain(val_seqs) {
        if let Some((frame, f)) = seq.frames().iter().enumerate().find(|(_, f)| f.len() != config.n_points) {
            return Err(TrainError::PointCountMismatch {
                frame,
                expected: config.n_points,
                found: f.len(),
            });
        }
    }
    let collect = |seqs: &[Arc<SequenceData>]| -> Result<Vec<Window>, TrainError> {
        let mut out = Vec::new();
        for s in seqs {
            out.extend(make_windows(s, config.t_window, config.stride, need_d)?);
        }
        Ok(out)
    };
    let mut windows = collect(train_seqs)?;
    let val_windows = collect(val_seqs)?;

    let mut params = init_params(config.k_keypoints, config.m_recon, config.seed)?;
    let mut adam = AdamState::for_params(
        &params,
        AdamConfig {
            lr: config.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
            let path = dir.join("train_log.csv");
            let mut f = fs::File::create(&path).map_err(io_err(&path))?;
            writeln!(f, "{LOG_HEADER}").map_err(io_err(&path))?;
            Some((f, path))
        }
        None => None,
    };

    let mut best = params.clone();
    let mut best_score = f64::INFINITY;
    let mut best_epoch = 0;
    let mut log = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        windows.shuffle(&mut rng);
        let mut sum = LossTerms::default();
        let mut total = 0.0;
        for batch in windows.chunks(config.batch_windows) {
            let results = batch
                .par_iter()
                .map(|w| {
                    let ds = window_inputs(w, &weights)?;
                    window_gradient(&params, w.frames(), ds.as_deref(), &weights)
                })
                .collect::<Result<Vec<_>, _>>()?;
            let mut grads = Gradients::zeros_like(&params);
            for (loss, g) in &results {
                if let Some(term) = loss.terms.first_non_finite() {
                    return Err(TrainError::NonFiniteLoss { term: term.name(), epoch });
                }
                sum.add_scaled(&loss.terms, 1.0);
                total += loss.total;
                grads.add_assign(g);
            }
            grads.scale(1.0 / results.len() as f64);
            if !grads.is_finite() {
                return Err(TrainError::NonFiniteGradient { epoch });
            }
            adam_step(&mut params, &grads, &mut adam)?;
        }
        let count = windows.len() as f64;
        let mut terms = LossTerms::default();
        terms.add_scaled(&sum, 1.0 / count);
        let row = EpochLog {
            epoch,
            terms,
            total: total / count,
            val_total: if val_windows.is_empty() {
                None
            } else {
                Some(mean_loss(&params, &val_windows, &weights)?)
            },
        };
        // the training total is measured before each update, so on the
        // training-only path the pre-epoch parameters are what it scores
        let score = row.val_total.unwrap_or(row.total);
        if score < best_score {
            best_score = score;
            best_epoch = epoch;
            best = params.clone();
        }
        if let Some((f, path)) = &mut log_file {
            writeln!(f, "{}", row.csv_row()).map_err(io_err(path))?;
        }
        log.push(row);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&best, &dir.join("best.gkpm"))?;
        save_checkpoint(&params, &dir.join("last.gkpm"))?;
    }
    Ok(TrainOutcome {
        last: params,
        best,
        best_epoch,
        log,
    })
}

/// Loads the manifests named in `config` and trains, writing outputs to
/// `config.out_dir`.
pub fn train_from_config(config: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    let load = |paths: &[PathBuf]| -> Result<Vec<Arc<SequenceData>>, TrainError> {
        paths.iter().map(|p| SequenceData::from_manifest(p).map(Arc::new)).collect()
    };
    let train_seqs = load(&config.train)?;
    let val_seqs = load(&config.val)?;
    train(config, &train_seqs, &val_seqs, Some(&config.out_dir))
}

/// Keypoints of a single frame. Never touches geodesic data.
pub fn infer(params: &ModelParams, cloud: &PointCloud) -> Result<Forward, TrainError> {
    Ok(forward(params, cloud)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geodesy::{build_knn_graph, cache_write, shortest_paths};
    use crate::io::write_sequence;
    use crate::synth::{generate, DeformSpec, Generator};

    fn synth(n_frames: usize, n_points: usize) -> Vec<PointCloud> {
        generate(&DeformSpec {
            generator: Generator::BendingCylinder,
            n_points,
            n_frames,
            amplitude: 0.4,
            seed: 1,
        })
        .unwrap()
        .frames()
        .to_vec()
    }

    fn geodesics(frames: &[PointCloud]) -> Vec<GeodesicMatrix> {
        frames
            .iter()
            .map(|f| shortest_paths(&build_knn_graph(f, 5).unwrap()).unwrap())
            .collect()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            k_keypoints: 4,
            m_recon: 16,
            t_window: 2,
            batch_windows: 2,
            epochs: 3,
            n_points: 64,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn window_counts() {
        let seq = |t| Arc::new(SequenceData::in_memory(synth(t, 32), None));
        assert_eq!(make_windows(&seq(6), 4, 1, false).unwrap().len(), 3);
        assert_eq!(make_windows(&seq(4), 4, 1, false).unwrap().len(), 1);
        assert_eq!(make_windows(&seq(7), 2, 2, false).unwrap().len(), 3);
        assert!(matches!(
            make_windows(&seq(3), 4, 1, false),
            Err(TrainError::TooShortSequence { frames: 3, t_window: 4 })
        ));
        assert!(matches!(
            make_windows(&seq(4), 4, 1, true),
            Err(TrainError::MissingGeodesicCache { .. })
        ));
    }

    #[test]
    fn config_defaults_and_json() {
        let c = TrainConfig::default();
        assert_eq!((c.k_keypoints, c.m_recon, c.t_window, c.batch_windows), (12, 512, 4, 4));
        assert_eq!((c.lr, c.knn_k, c.n_points, c.seed), (1e-3, 5, 512, 0));
        assert_eq!(c.weights, LossWeights::default());
        let parsed: TrainConfig = serde_json::from_str(r#"{"k_keypoints": 8, "ablation": ["geo"]}"#).unwrap();
        assert_eq!(parsed.k_keypoints, 8);
        assert_eq!(parsed.effective_weights().geo, 0.0);
        assert!(serde_json::from_str::<TrainConfig>(r#"{"bogus": 1}"#).is_err());
    }

    #[test]
    fn zero_epochs_checkpoints_initial_params() {
        let dir = tempfile::tempdir().unwrap();
        let frames = synth(3, 64);
        let d = geodesics(&frames);
        let seq = Arc::new(SequenceData::in_memory(frames, Some(d)));
        let cfg = TrainConfig { epochs: 0, ..small_config() };
        let out = train(&cfg, &[seq], &[], Some(dir.path())).unwrap();
        assert!(out.log.is_empty());
        let text = fs::read_to_string(dir.path().join("train_log.csv")).unwrap();
        assert_eq!(text.trim(), LOG_HEADER);
        let saved = crate::nnet::load_checkpoint(&dir.path().join("best.gkpm")).unwrap();
        assert_eq!(saved.to_flat(), init_params(4, 16, 0).unwrap().to_flat());
    }

    #[test]
    fn ablated_geodesic_term_is_zero_and_never_loaded() {
        let frames = synth(4, 64);
        let seq = Arc::new(SequenceData::in_memory(frames.clone(), Some(geodesics(&frames))));
        let cfg = TrainConfig {
            ablation: vec![Term::Geo],
            ..small_config()
        };
        let out = train(&cfg, &[seq.clone()], &[], None).unwrap();
        assert!(out.log.iter().all(|r| r.terms.geo == 0.0));
        assert_eq!(seq.geodesic_loads(), 0);
        for r in &out.log {
            assert!((r.total - r.terms.weighted(&cfg.effective_weights())).abs() < 1e-9 * r.total);
        }
    }

    #[test]
    fn manifests_with_caches_train_deterministically() {
        let dir = tempfile::tempdir().unwrap();
        let frames = synth(4, 64);
        let window = crate::pcloud::SequenceWindow::new(frames.clone(), None).unwrap();
        let manifest = write_sequence(&dir.path().join("data"), &window).unwrap();
        let mut file = ManifestFile::load(&manifest).unwrap();
        let mut names = Vec::new();
        for (t, d) in geodesics(&frames).iter().enumerate() {
            let name = PathBuf::from(format!("frame_{t:04}.gkpd"));
            cache_write(d, &dir.path().join("data").join(&name)).unwrap();
            names.push(name);
        }
        file.manifest.geodesics = Some(names);
        file.save().unwrap();

        let run = |sub: &str| {
            let cfg = TrainConfig {
                train: vec![manifest.clone()],
                out_dir: dir.path().join(sub),
                ..small_config()
            };
            train_from_config(&cfg).unwrap();
            (
                fs::read(dir.path().join(sub).join("train_log.csv")).unwrap(),
                fs::read(dir.path().join(sub).join("last.gkpm")).unwrap(),
            )
        };
        let a = run("a");
        let b = run("b");
        assert_eq!(a, b);
        let text = String::from_utf8(a.0).unwrap();
        assert_eq!(text.lines().count(), 4);
    }

    #[test]
    fn missing_cache_file_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let frames = synth(4, 64);
        let window = crate::pcloud::SequenceWindow::new(frames, None).unwrap();
        let manifest = write_sequence(dir.path(), &window).unwrap();
        let mut file = ManifestFile::load(&manifest).unwrap();
        file.manifest.geodesics = Some((0..4).map(|t| PathBuf::from(format!("g{t}.gkpd"))).collect());
        file.save().unwrap();
        let cfg = TrainConfig {
            train: vec![manifest],
            out_dir: dir.path().join("out"),
            ..small_config()
        };
        assert!(matches!(train_from_config(&cfg), Err(TrainError::MissingGeodesicCache { frame: 0, .. })));
    }

    #[test]
    fn infer_is_deterministic() {
        let p = init_params(4, 8, 3).unwrap();
        let f = &synth(2, 40)[1];
        let a = infer(&p, f).unwrap();
        let b = infer(&p, f).unwrap();
        assert_eq!(a.keypoints, b.keypoints);
    }
}
