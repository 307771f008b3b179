use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ModelError;
use crate::losses::{KeypointSet, ProbabilityMatrix};
use crate::pcloud::{normalize, Point3, PointCloud};

/// Width of the per-point feature and of the pooled global feature.
pub const FEATURE_DIM: usize = 128;
const ENC_HIDDEN: usize = 64;
const DEC_HIDDEN: usize = 256;

/// Layer indices into [`ModelParams::layers`].
pub(crate) const ENC1: usize = 0;
pub(crate) const ENC2: usize = 1;
pub(crate) const HEAD1: usize = 2;
pub(crate) const HEAD2: usize = 3;
pub(crate) const DEC1: usize = 4;
pub(crate) const DEC2: usize = 5;
pub(crate) const DEC3: usize = 6;
pub const N_LAYERS: usize = 7;

/// Fully connected layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

impl Dense {
    pub fn zeros(out: usize, inp: usize) -> Self {
        Self {
            w: Array2::zeros((out, inp)),
            b: Array1::zeros(out),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn out_dim(&self) -> usize {
        self.w.nrows()
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }

    /// Row-wise application to a batch `rows × in`.
    fn apply(&self, x: &ArrayView2<'_, f64>) -> Array2<f64> {
        let mut y = x.dot(&self.w.t());
        y += &self.b;
        y
    }
}

/// `(out, in)` of every layer for the given keypoint and reconstruction sizes.
pub fn layer_dims(k: usize, m: usize) -> [(usize, usize); N_LAYERS] {
    [
        (ENC_HIDDEN, 3),
        (FEATURE_DIM, ENC_HIDDEN),
        (FEATURE_DIM, 2 * FEATURE_DIM),
        (k, FEATURE_DIM),
        (DEC_HIDDEN, 3 * k),
        (DEC_HIDDEN, DEC_HIDDEN),
        (3 * m, DEC_HIDDEN),
    ]
}

/// Network weights. The revision counter changes on every mutation through
/// [`ModelParams::layers_mut`], which lets `backward` reject stale caches.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    k: usize,
    m: usize,
    layers: Vec<Dense>,
    revision: u64,
}

impl ModelParams {
    pub fn from_layers(k: usize, m: usize, layers: Vec<Dense>) -> Result<Self, ModelError> {
        check_dims(k, m)?;
        let dims = layer_dims(k, m);
        if layers.len() != N_LAYERS {
            return Err(ModelError::ShapeMismatch(format!("{} layers, expected {N_LAYERS}", layers.len())));
        }
        for (i, (l, &(o, inp))) in layers.iter().zip(&dims).enumerate() {
            if l.w.dim() != (o, inp) || l.b.len() != o {
                return Err(ModelError::ShapeMismatch(format!(
                    "layer {i} is {:?}+{}, expected ({o}, {inp})+{o}",
                    l.w.dim(),
                    l.b.len()
                )));
            }
        }
        Ok(Self { k, m, layers, revision: 0 })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn layers(&self) -> &[Dense] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Dense] {
        self.revision += 1;
        &mut self.layers
    }

    pub fn revision(&self) -> u64 {
        self.revision
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Dense::param_count).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.w.iter());
            out.extend(l.b.iter());
        }
        out
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<(), ModelError> {
        if flat.len() != self.param_count() {
            return Err(ModelError::ShapeMismatch(format!(
                "{} values for {} parameters",
                flat.len(),
                self.param_count()
            )));
        }
        let mut it = flat.iter().copied();
        for l in self.layers_mut() {
            l.w.iter_mut().chain(l.b.iter_mut()).for_each(|v| *v = it.next().expect("length checked"));
        }
        Ok(())
    }
}

fn check_dims(k: usize, m: usize) -> Result<(), ModelError> {
    if k < 2 || m < 1 {
        return Err(ModelError::InvalidDims { k, m });
    }
    Ok(())
}

/// Glorot-uniform weights, zero biases.
pub fn init_params(k: usize, m: usize, seed: u64) -> Result<ModelParams, ModelError> {
    check_dims(k, m)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = layer_dims(k, m)
        .iter()
        .map(|&(out, inp)| {
            let limit = (6.0 / (out + inp) as f64).sqrt();
            Dense {
                w: Array2::from_shape_simple_fn((out, inp), || rng.random_range(-limit..=limit)),
                b: Array1::zeros(out),
            }
        })
        .collect();
    ModelParams::from_layers(k, m, layers)
}

/// Parameter gradients, shaped like [`ModelParams::layers`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub layers: Vec<Dense>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            layers: params.layers.iter().map(|l| Dense::zeros(l.out_dim(), l.in_dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.w += &b.w;
            a.b += &b.b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for l in &mut self.layers {
            l.w *= s;
            l.b *= s;
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.layers.iter().flat_map(|l| l.w.iter().chain(l.b.iter()).copied()).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.w.iter().chain(l.b.iter()).all(|v| v.is_finite()))
    }
}

fn relu(mut a: Array2<f64>) -> Array2<f64> {
    a.mapv_inplace(|v| v.max(0.0));
    a
}

/// Subgradient 0 at the kink.
fn relu_mask(grad: &mut Array2<f64>, act: &Array2<f64>) {
    grad.zip_mut_with(act, |g, &a| {
        if a <= 0.0 {
            *g = 0.0
        }
    });
}

/// Output of [`forward`] together with the intermediates `backward` needs.
#[derive(Debug, Clone)]
pub struct Forward {
    pub w: ProbabilityMatrix,
    pub keypoints: KeypointSet,
    pub reconstruction: Vec<Point3>,
    revision: u64,
    raw: Array2<f64>,
    x: Array2<f64>,
    h1: Array2<f64>,
    h2: Array2<f64>,
    argmax: Vec<usize>,
    concat: Array2<f64>,
    h3: Array2<f64>,
    z: Array1<f64>,
    d1: Array1<f64>,
    d2: Array1<f64>,
}

/// Runs the network on one frame.
///
/// The encoder sees the frame normalized to the unit cube, so scores do not
/// depend on position or scale; keypoints are expectations over the raw
/// coordinates, and the decoder reconstructs in raw coordinates.
pub fn forward(params: &ModelParams, cloud: &PointCloud) -> Result<Forward, ModelError> {
    let n = cloud.len();
    if n < params.k {
        return Err(ModelError::ShapeMismatch(format!("{n} points for {} keypoints", params.k)));
    }
    let raw = cloud.as_matrix().to_owned();
    let x = normalize(cloud)?.as_matrix().to_owned();
    let l = &params.layers;

    let h1 = relu(l[ENC1].apply(&x.view()));
    let h2 = relu(l[ENC2].apply(&h1.view()));
    let mut argmax = vec![0usize; FEATURE_DIM];
    let mut global = Array1::<f64>::from_elem(FEATURE_DIM, f64::NEG_INFINITY);
    for (i, row) in h2.rows().into_iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            // strict `>` keeps the lowest index on ties
            if v > global[c] {
                global[c] = v;
                argmax[c] = i;
            }
        }
    }
    let mut concat = Array2::<f64>::zeros((n, 2 * FEATURE_DIM));
    concat.slice_mut(s![.., ..FEATURE_DIM]).assign(&h2);
    concat.slice_mut(s![.., FEATURE_DIM..]).assign(&global.broadcast((n, FEATURE_DIM)).expect("broadcast"));
    let h3 = relu(l[HEAD1].apply(&concat.view()));
    let scores = l[HEAD2].apply(&h3.view()); // N × K

    let mut w = scores.t().to_owned();
    for mut row in w.rows_mut() {
        let mx = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - mx).exp());
        let sum = row.sum();
        row /= sum;
    }
    let p = w.dot(&raw); // K × 3
    let z = Array1::from_iter(p.iter().copied());
    let d1 = (l[DEC1].w.dot(&z) + &l[DEC1].b).mapv(|v| v.max(0.0));
    let d2 = (l[DEC2].w.dot(&d1) + &l[DEC2].b).mapv(|v| v.max(0.0));
    let r = l[DEC3].w.dot(&d2) + &l[DEC3].b;

    Ok(Forward {
        w: ProbabilityMatrix::new_unchecked(w),
        keypoints: KeypointSet::new(p.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect()),
        reconstruction: r.as_slice().expect("contiguous").chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        revision: params.revision,
        raw,
        x,
        h1,
        h2,
        argmax,
        concat,
        h3,
        z,
        d1,
        d2,
    })
}

/// Back-propagates `∂L/∂W` (and optionally `∂L/∂reconstruction`) through the
/// network. An empty `grad_recon` means the reconstruction does not enter the loss.
pub fn backward(
    params: &ModelParams,
    cache: &Forward,
    grad_w: &Array2<f64>,
    grad_recon: &[Point3],
) -> Result<Gradients, ModelError> {
    if cache.revision != params.revision {
        return Err(ModelError::StaleCache {
            cached: cache.revision,
            current: params.revision,
        });
    }
    let k = params.k;
    let n = cache.raw.nrows();
    if grad_w.dim() != (k, n) {
        return Err(ModelError::ShapeMismatch(format!("grad_w is {:?}, expected ({k}, {n})", grad_w.dim())));
    }
    if !grad_recon.is_empty() && grad_recon.len() != params.m {
        return Err(ModelError::ShapeMismatch(format!(
            "{} reconstruction gradients for {} points",
            grad_recon.len(),
            params.m
        )));
    }
    let l = &params.layers;
    let mut g = Gradients::zeros_like(params);
    let mut gw = grad_w.clone();

    if !grad_recon.is_empty() {
        let gr = Array1::from_iter(grad_recon.iter().flatten().copied());
        g.layers[DEC3].w = outer(&gr, &cache.d2);
        g.layers[DEC3].b = gr.clone();
        let mut gd2 = l[DEC3].w.t().dot(&gr);
        gd2.zip_mut_with(&cache.d2, |g, &a| if a <= 0.0 { *g = 0.0 });
        g.layers[DEC2].w = outer(&gd2, &cache.d1);
        let mut gd1 = l[DEC2].w.t().dot(&gd2);
        g.layers[DEC2].b = gd2;
        gd1.zip_mut_with(&cache.d1, |g, &a| if a <= 0.0 { *g = 0.0 });
        g.layers[DEC1].w = outer(&gd1, &cache.z);
        let gz = l[DEC1].w.t().dot(&gd1);
        g.layers[DEC1].b = gd1;
        let gp = gz.into_shape_with_order((k, 3)).expect("3K entries");
        gw += &gp.dot(&cache.raw.t());
    }

    // softmax, row-wise: gS = W ⊙ (gW - <W, gW>)
    let wmat = cache.w.as_array();
    let mut gs = Array2::<f64>::zeros((k, n));
    for ((mut out, wr), gr) in gs.rows_mut().into_iter().zip(wmat.rows()).zip(gw.rows()) {
        let dot = wr.dot(&gr);
        out.assign(&(&wr * &(&gr - dot)));
    }
    let gs_t = gs.t(); // N × K

    g.layers[HEAD2].w = gs.dot(&cache.h3);
    g.layers[HEAD2].b = gs.sum_axis(Axis(1));
    let mut gh3 = gs_t.dot(&l[HEAD2].w);
    relu_mask(&mut gh3, &cache.h3);

    g.layers[HEAD1].w = gh3.t().dot(&cache.concat);
    g.layers[HEAD1].b = gh3.sum_axis(Axis(0));
    let gc = gh3.dot(&l[HEAD1].w);

    let mut gh2 = gc.slice(s![.., ..FEATURE_DIM]).to_owned();
    let gglobal = gc.slice(s![.., FEATURE_DIM..]).sum_axis(Axis(0));
    for (c, &i) in cache.argmax.iter().enumerate() {
        gh2[[i, c]] += gglobal[c];
    }
    relu_mask(&mut gh2, &cache.h2);

    g.layers[ENC2].w = gh2.t().dot(&cache.h1);
    g.layers[ENC2].b = gh2.sum_axis(Axis(0));
    let mut gh1 = gh2.dot(&l[ENC2].w);
    relu_mask(&mut gh1, &cache.h1);

    g.layers[ENC1].w = gh1.t().dot(&cache.x);
    g.layers[ENC1].b = gh1.sum_axis(Axis(0));
    Ok(g)
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let a2 = a.view().insert_axis(Axis(1));
    let b2 = b.view().insert_axis(Axis(0));
    a2.dot(&b2)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-0.5..0.5))).collect(),
            0,
        )
        .unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = init_params(4, 16, 7).unwrap();
        assert_eq!(a, init_params(4, 16, 7).unwrap());
        assert_ne!(a.to_flat(), init_params(4, 16, 8).unwrap().to_flat());
        for l in a.layers() {
            let limit = (6.0 / (l.in_dim() + l.out_dim()) as f64).sqrt();
            assert!(l.w.iter().all(|v| v.abs() <= limit));
            assert!(l.b.iter().all(|&v| v == 0.0));
        }
        assert!(matches!(init_params(1, 16, 0), Err(ModelError::InvalidDims { .. })));
        assert!(matches!(init_params(4, 0, 0), Err(ModelError::InvalidDims { .. })));
    }

    #[test]
    fn forward_outputs_are_well_formed() {
        let p = init_params(6, 20, 1).unwrap();
        let c = cloud(50, 2);
        let f = forward(&p, &c).unwrap();
        for row in f.w.as_array().rows() {
            assert!((row.sum() - 1.0).abs() < 1e-9);
            assert!(row.iter().all(|&v| v > 0.0));
        }
        let (lo, hi) = c.aabb();
        for kp in f.keypoints.positions() {
            for a in 0..3 {
                assert!(kp[a] >= lo[a] - 1e-12 && kp[a] <= hi[a] + 1e-12);
            }
        }
        assert_eq!(f.reconstruction.len(), 20);
        assert!(matches!(forward(&p, &cloud(5, 3)), Err(ModelError::ShapeMismatch(_))));
    }

    #[test]
    fn permutation_equivariance() {
        let p = init_params(5, 12, 3).unwrap();
        let c = cloud(64, 4);
        let mut perm: Vec<usize> = (0..64).collect();
        perm.reverse();
        perm.swap(3, 40);
        let pc = c.select(&perm);
        let a = forward(&p, &c).unwrap();
        let b = forward(&p, &pc).unwrap();
        for (x, y) in a.keypoints.positions().iter().zip(b.keypoints.positions()) {
            for ax in 0..3 {
                assert!((x[ax] - y[ax]).abs() < 1e-9);
            }
        }
        for (x, y) in a.reconstruction.iter().zip(&b.reconstruction) {
            for ax in 0..3 {
                assert!((x[ax] - y[ax]).abs() < 1e-9);
            }
        }
        let permuted = a.w.permute_columns(&perm);
        for (x, y) in permuted.as_array().iter().zip(b.w.as_array().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_is_linear_in_upstream() {
        let p = init_params(3, 8, 5).unwrap();
        let c = cloud(20, 6);
        let f = forward(&p, &c).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let gw = Array2::from_shape_simple_fn((3, 20), || rng.random_range(-1.0..1.0));
        let gr: Vec<Point3> = (0..8).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect();

        let zero = backward(&p, &f, &Array2::zeros((3, 20)), &vec![[0.0; 3]; 8]).unwrap();
        assert!(zero.to_flat().iter().all(|&v| v == 0.0));

        let g1 = backward(&p, &f, &gw, &gr).unwrap();
        let g2 = backward(&p, &f, &(&gw * 2.0), &gr.iter().map(|v| v.map(|x| 2.0 * x)).collect::<Vec<_>>()).unwrap();
        for (a, b) in g1.to_flat().iter().zip(g2.to_flat()) {
            assert_eq!(2.0 * a, b);
        }
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut p = init_params(3, 8, 5).unwrap();
        let c = cloud(20, 6);
        let f = forward(&p, &c).unwrap();
        p.layers_mut()[0].b[0] += 1.0;
        let err = backward(&p, &f, &Array2::zeros((3, 20)), &[]).unwrap_err();
        assert!(matches!(err, ModelError::StaleCache { .. }));
    }

    #[test]
    fn flat_round_trip() {
        let p = init_params(3, 4, 2).unwrap();
        let mut q = init_params(3, 4, 99).unwrap();
        q.set_flat(&p.to_flat()).unwrap();
        assert_eq!(p.to_flat(), q.to_flat());
        assert!(q.set_flat(&[0.0]).is_err());
    }
}
