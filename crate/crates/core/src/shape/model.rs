//! Gaussian and kernel-density shape models over aligned signed distance vectors.
//!
//! Both kinds share a principal subspace `V` (d × m, orthonormal columns)
//! around the mean `mu`. Directions outside the subspace are penalized with
//! variance `lambda_perp`.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};
use crate::shape::align::ShapeSample;

const MODULE: &str = "shape";

/// Relative eigenvalue cut-off below which covariance directions count as empty.
const RANK_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Gaussian,
    Kde,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Gaussian => "gaussian",
            ModelKind::Kde => "kde",
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gaussian" => Ok(ModelKind::Gaussian),
            "kde" => Ok(ModelKind::Kde),
            other => Err(Error::invalid(
                MODULE,
                format!("unknown model kind {other:?} (expected gaussian or kde)"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    kind: ModelKind,
    dims: [usize; 3],
    n_samples: usize,
    mu: Vec<f64>,
    /// Column-major d × m.
    modes: Vec<f64>,
    eigenvalues: Vec<f64>,
    lambda_perp: f64,
    /// N × m, one projected training coordinate per row (KDE only).
    kernel_samples: Option<Vec<f64>>,
    sigma: Option<f64>,
}

impl ShapeModel {
    /// Assembles a model, checking every structural invariant.
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        kind: ModelKind,
        dims: [usize; 3],
        n_samples: usize,
        mu: Vec<f64>,
        modes: Vec<f64>,
        eigenvalues: Vec<f64>,
        lambda_perp: f64,
        kernel_samples: Option<Vec<f64>>,
        sigma: Option<f64>,
    ) -> Result<Self> {
        let d = dims.iter().product::<usize>();
        let m = eigenvalues.len();
        if d == 0 || mu.len() != d {
            return Err(Error::invalid(
                MODULE,
                format!("mean has {} entries, canonical grid {dims:?} needs {d}", mu.len()),
            ));
        }
        if modes.len() != d * m {
            return Err(Error::invalid(
                MODULE,
                format!("mode matrix has {} entries, expected {d} x {m}", modes.len()),
            ));
        }
        if mu.iter().chain(&modes).any(|v| !v.is_finite()) {
            return Err(Error::invalid(MODULE, "non-finite mean or mode entry"));
        }
        if eigenvalues.iter().any(|&e| !(e > 0.0 && e.is_finite()))
            || eigenvalues.windows(2).any(|w| w[0] < w[1])
        {
            return Err(Error::invalid(
                MODULE,
                "eigenvalues must be positive, finite and descending",
            ));
        }
        if !(lambda_perp > 0.0 && lambda_perp.is_finite()) {
            return Err(Error::invalid(
                MODULE,
                format!("lambda_perp must be positive, got {lambda_perp}"),
            ));
        }
        if let Some(s) = sigma {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::invalid(MODULE, format!("sigma must be positive, got {s}")));
            }
        }
        match (&kernel_samples, kind) {
            (Some(ks), _) => {
                if n_samples == 0 || ks.len() != n_samples * m || ks.iter().any(|v| !v.is_finite()) {
                    return Err(Error::invalid(
                        MODULE,
                        format!("kernel samples must be {n_samples} x {m} finite values"),
                    ));
                }
            }
            (None, ModelKind::Kde) => {
                return Err(Error::invalid(MODULE, "kde model needs kernel samples"));
            }
            (None, ModelKind::Gaussian) => {}
        }
        if kind == ModelKind::Kde && sigma.is_none() {
            return Err(Error::invalid(MODULE, "kde model needs a bandwidth"));
        }
        Ok(ShapeModel {
            kind,
            dims,
            n_samples,
            mu,
            modes,
            eigenvalues,
            lambda_perp,
            kernel_samples,
            sigma,
        })
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Shape vector length.
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    /// Number of retained modes.
    pub fn rank(&self) -> usize {
        self.eigenvalues.len()
    }

    /// Number of training shapes the model was fitted on.
    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn mean(&self) -> &[f64] {
        &self.mu
    }

    pub fn mode(&self, k: usize) -> &[f64] {
        let d = self.dim();
        &self.modes[k * d..(k + 1) * d]
    }

    /// All modes, column-major.
    pub fn modes(&self) -> &[f64] {
        &self.modes
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn lambda_perp(&self) -> f64 {
        self.lambda_perp
    }

    pub fn sigma(&self) -> Option<f64> {
        self.sigma
    }

    /// Projected training coordinates, N × m row-major.
    pub fn kernel_samples(&self) -> Option<&[f64]> {
        self.kernel_samples.as_deref()
    }

    fn check_dim(&self, z: &[f64]) -> Result<()> {
        if z.len() != self.dim() {
            return Err(Error::invalid(
                MODULE,
                format!("shape vector has {} entries, model expects {}", z.len(), self.dim()),
            ));
        }
        Ok(())
    }

    /// Subspace coordinates `Vᵀ(z−μ)` and the residual `(I−VVᵀ)(z−μ)`.
    fn split(&self, z: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut r: Vec<f64> = z.iter().zip(&self.mu).map(|(a, b)| a - b).collect();
        let coords: Vec<f64> = (0..self.rank()).map(|k| dot(self.mode(k), &r)).collect();
        for (k, &c) in coords.iter().enumerate() {
            axpy(-c, self.mode(k), &mut r);
        }
        (coords, r)
    }

    fn lift(&self, coords: &[f64], out: &mut [f64]) {
        for (k, &c) in coords.iter().enumerate() {
            axpy(c, self.mode(k), out);
        }
    }

    /// Negative log-density of `z` under the model (up to a constant).
    pub fn energy(&self, z: &[f64]) -> Result<f64> {
        self.check_dim(z)?;
        let (coords, perp) = self.split(z);
        let perp_term = dot(&perp, &perp) / (2.0 * self.lambda_perp);
        Ok(match self.kind {
            ModelKind::Gaussian => {
                let inside: f64 = coords
                    .iter()
                    .zip(&self.eigenvalues)
                    .map(|(c, e)| c * c / e)
                    .sum();
                0.5 * inside + perp_term
            }
            ModelKind::Kde => {
                let logits = self.kernel_logits(&coords);
                let n = logits.len() as f64;
                n.ln() - log_sum_exp(&logits) + perp_term
            }
        })
    }

    /// Analytic gradient of [`ShapeModel::energy`].
    pub fn gradient(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let (coords, perp) = self.split(z);
        let mut g: Vec<f64> = perp.iter().map(|v| v / self.lambda_perp).collect();
        let sub: Vec<f64> = match self.kind {
            ModelKind::Gaussian => coords.iter().zip(&self.eigenvalues).map(|(c, e)| c / e).collect(),
            ModelKind::Kde => {
                let w = self.kernel_weights(&coords);
                let bary = self.weighted_barycenter(&w);
                let s2 = self.sigma.unwrap().powi(2);
                coords.iter().zip(&bary).map(|(c, b)| (c - b) / s2).collect()
            }
        };
        self.lift(&sub, &mut g);
        Ok(g)
    }

    /// Denoised version of `z`: its subspace projection (Gaussian) or the
    /// kernel-weighted average of training coordinates (KDE), lifted back.
    pub fn reconstruct(&self, z: &[f64]) -> Result<Vec<f64>> {
        self.check_dim(z)?;
        let (coords, _) = self.split(z);
        let target = match self.kind {
            ModelKind::Gaussian => coords,
            ModelKind::Kde => {
                let w = self.kernel_weights(&coords);
                self.weighted_barycenter(&w)
            }
        };
        let mut out = self.mu.clone();
        self.lift(&target, &mut out);
        Ok(out)
    }

    fn kernel_logits(&self, coords: &[f64]) -> Vec<f64> {
        let m = self.rank();
        let ks = self.kernel_samples.as_deref().unwrap_or(&[]);
        let s2 = self.sigma.unwrap_or(1.0).powi(2);
        (0..self.n_samples)
            .map(|i| {
                let zi = &ks[i * m..(i + 1) * m];
                -sq_dist(coords, zi) / (2.0 * s2)
            })
            .collect()
    }

    /// Normalized kernel weights (softmax of the logits).
    fn kernel_weights(&self, coords: &[f64]) -> Vec<f64> {
        let logits = self.kernel_logits(coords);
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let w: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let total: f64 = w.iter().sum();
        w.into_iter().map(|v| v / total).collect()
    }

    fn weighted_barycenter(&self, w: &[f64]) -> Vec<f64> {
        let m = self.rank();
        let ks = self.kernel_samples.as_deref().unwrap_or(&[]);
        let mut out = vec![0.0; m];
        for (i, wi) in w.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(&ks[i * m..(i + 1) * m]) {
                *o += wi * v;
            }
        }
        out
    }
}

/// Fits a Gaussian model with up to `modes` principal directions.
///
/// The covariance uses the population normalization `1/N`. Directions with
/// (numerically) zero variance are dropped, so the returned model may carry
/// fewer modes than requested. `lambda_perp` defaults to half the smallest
/// retained eigenvalue (1.0 when no mode survives).
pub fn fit_gaussian_prior(
    samples: &[ShapeSample],
    modes: usize,
    lambda_perp: Option<f64>,
) -> Result<ShapeModel> {
    let basis = principal_subspace(samples, modes)?;
    let lambda_perp = resolve_lambda_perp(lambda_perp, &basis.eigenvalues)?;
    ShapeModel::new(
        ModelKind::Gaussian,
        basis.dims,
        samples.len(),
        basis.mu,
        basis.modes,
        basis.eigenvalues,
        lambda_perp,
        None,
        None,
    )
}

/// Fits a kernel density model in the principal subspace. Without an explicit
/// `sigma`, the bandwidth is the mean nearest-neighbour distance of the
/// projected training shapes.
pub fn fit_kde_prior(
    samples: &[ShapeSample],
    modes: usize,
    lambda_perp: Option<f64>,
    sigma: Option<f64>,
) -> Result<ShapeModel> {
    let basis = principal_subspace(samples, modes)?;
    let lambda_perp = resolve_lambda_perp(lambda_perp, &basis.eigenvalues)?;
    let m = basis.eigenvalues.len();
    let d = basis.mu.len();
    let n = samples.len();
    let mut coords = Vec::with_capacity(n * m);
    for s in samples {
        let r: Vec<f64> = s.z.iter().zip(&basis.mu).map(|(a, b)| a - b).collect();
        coords.extend((0..m).map(|k| dot(&basis.modes[k * d..(k + 1) * d], &r)));
    }
    let sigma = match sigma {
        Some(s) if !(s > 0.0 && s.is_finite()) => {
            return Err(Error::invalid(MODULE, format!("sigma must be positive, got {s}")))
        }
        Some(s) => s,
        None => {
            let nn: f64 = (0..n)
                .map(|i| {
                    (0..n)
                        .filter(|&j| j != i)
                        .map(|j| sq_dist(&coords[i * m..(i + 1) * m], &coords[j * m..(j + 1) * m]))
                        .fold(f64::INFINITY, f64::min)
                        .sqrt()
                })
                .sum();
            let s = nn / n as f64;
            if !(s > 0.0) {
                return Err(Error::invalid(
                    MODULE,
                    "training shapes coincide in the model subspace; kernel bandwidth would be zero",
                ));
            }
            s
        }
    };
    ShapeModel::new(
        ModelKind::Kde,
        basis.dims,
        n,
        basis.mu,
        basis.modes,
        basis.eigenvalues,
        lambda_perp,
        Some(coords),
        Some(sigma),
    )
}

fn resolve_lambda_perp(given: Option<f64>, eigenvalues: &[f64]) -> Result<f64> {
    match given {
        Some(l) if l > 0.0 && l.is_finite() => Ok(l),
        Some(l) => Err(Error::invalid(MODULE, format!("lambda_perp must be positive, got {l}"))),
        None => Ok(eigenvalues.last().map_or(1.0, |e| 0.5 * e)),
    }
}

struct Subspace {
    dims: [usize; 3],
    mu: Vec<f64>,
    modes: Vec<f64>,
    eigenvalues: Vec<f64>,
}

fn principal_subspace(samples: &[ShapeSample], modes: usize) -> Result<Subspace> {
    let n = samples.len();
    if n < 2 {
        return Err(Error::invalid(
            MODULE,
            format!("need at least 2 training shapes, got {n}"),
        ));
    }
    let dims = samples[0].dims;
    let d = samples[0].z.len();
    if let Some(bad) = samples.iter().position(|s| s.dims != dims || s.z.len() != d) {
        return Err(Error::invalid(
            MODULE,
            format!("training shape {bad} does not match the canonical grid of shape 0"),
        ));
    }
    if dims.iter().product::<usize>() != d {
        return Err(Error::invalid(MODULE, "shape vector length does not match its grid"));
    }
    if modes > n - 1 || modes > d {
        return Err(Error::invalid(
            MODULE,
            format!("cannot fit {modes} modes from {n} shapes of dimension {d}"),
        ));
    }

    let mut mu = vec![0.0; d];
    for s in samples {
        for (m, v) in mu.iter_mut().zip(&s.z) {
            *m += v;
        }
    }
    mu.iter_mut().for_each(|m| *m /= n as f64);
    let centered: Vec<Vec<f64>> = samples
        .iter()
        .map(|s| s.z.iter().zip(&mu).map(|(a, b)| a - b).collect())
        .collect();

    // N x N Gram matrix of the centred samples; its eigenpairs lift to the
    // d x d covariance eigenpairs through the data matrix.
    let gram = DMatrix::from_fn(n, n, |i, j| dot(&centered[i], &centered[j]) / n as f64);
    let eig = SymmetricEigen::new(gram);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));

    let magnitude = samples.iter().map(|s| dot(&s.z, &s.z)).sum::<f64>() / n as f64;
    let floor = RANK_TOL * magnitude.max(f64::MIN_POSITIVE);

    let mut basis: Vec<f64> = Vec::with_capacity(modes * d);
    let mut eigenvalues = Vec::with_capacity(modes);
    for &k in order.iter().take(modes) {
        let ev = eig.eigenvalues[k];
        if !(ev > floor) {
            break;
        }
        let mut v = vec![0.0; d];
        for (i, c) in centered.iter().enumerate() {
            axpy(eig.eigenvectors[(i, k)], c, &mut v);
        }
        // modified Gram-Schmidt against the accepted modes, then normalize
        for j in 0..eigenvalues.len() {
            let prev = &basis[j * d..(j + 1) * d];
            let c = dot(prev, &v);
            axpy(-c, prev, &mut v);
        }
        let norm = dot(&v, &v).sqrt();
        if !(norm > 0.0) {
            break;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.extend_from_slice(&v);
        eigenvalues.push(ev);
    }
    Ok(Subspace {
        dims,
        mu,
        modes: basis,
        eigenvalues,
    })
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let top = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    top + v.iter().map(|x| (x - top).exp()).sum::<f64>().ln()
}
