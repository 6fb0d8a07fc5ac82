//! Continuous max-flow segmentation.
//!
//! The solver maximizes the total source flow `∫ p_s` subject to
//! `p_s ≤ c_s`, `p_t ≤ c_t`, `|p| ≤ α` and flow conservation
//! `div p − p_s + p_t = 0`, using the augmented Lagrangian
//!
//! ```text
//! L_c = ∫ p_s + ∫ λ (div p − p_s + p_t) − c/2 ‖div p − p_s + p_t‖²
//! ```
//!
//! The multiplier `λ` converges to the relaxed labeling (1 = foreground) of
//! the dual min-cut problem
//!
//! ```text
//! min_λ ∫ (1 − λ) c_s + λ c_t + α |∇λ|
//! ```
//!
//! so `c_s` is the cost of excluding a voxel and `c_t` the cost of including it.

use std::io::Write;
use std::time::Instant;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::volume::{backward_diff, divergence_into, gradient, Grid, VectorField3D, Volume3D};

const MODULE: &str = "cmf";

/// Terminal capacities and the spatial flow bound, all on one grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CapacityField {
    cs: Volume3D,
    ct: Volume3D,
    alpha: Volume3D,
}

impl CapacityField {
    pub fn new(cs: Volume3D, ct: Volume3D, alpha: Volume3D) -> Result<Self> {
        cs.grid().ensure_same(ct.grid(), "sink capacity")?;
        cs.grid().ensure_same(alpha.grid(), "flow bound")?;
        for (vol, name) in [(&cs, "source capacity"), (&ct, "sink capacity"), (&alpha, "flow bound")] {
            if let Some(i) = vol.data().iter().position(|&v| v < 0.0) {
                return Err(Error::invalid(
                    MODULE,
                    format!("{name} is negative ({}) at voxel {i}", vol.data()[i]),
                ));
            }
        }
        Ok(CapacityField { cs, ct, alpha })
    }

    pub fn grid(&self) -> &Grid {
        self.cs.grid()
    }

    pub fn source(&self) -> &Volume3D {
        &self.cs
    }

    pub fn sink(&self) -> &Volume3D {
        &self.ct
    }

    pub fn alpha(&self) -> &Volume3D {
        &self.alpha
    }

    /// Exchanges the roles of source and sink.
    pub fn swapped(&self) -> CapacityField {
        CapacityField {
            cs: self.ct.clone(),
            ct: self.cs.clone(),
            alpha: self.alpha.clone(),
        }
    }

    /// Multiplies every capacity by `k > 0`.
    pub fn scaled(&self, k: f64) -> Result<CapacityField> {
        if !(k.is_finite() && k > 0.0) {
            return Err(Error::invalid(MODULE, format!("scale must be positive, got {k}")));
        }
        CapacityField::new(
            self.cs.map(|v| v * k)?,
            self.ct.map(|v| v * k)?,
            self.alpha.map(|v| v * k)?,
        )
    }
}

/// Edge-stopping modulation of the flow bound: `g = 1 / (1 + (|∇I| / κ)²)`.
#[derive(Debug, Clone, Copy)]
pub struct EdgeWeighting<'a> {
    pub intensity: &'a Volume3D,
    pub kappa: f64,
}

#[derive(Debug, Clone, Copy)]
pub struct CapacityParams<'a> {
    /// Base spatial flow bound (TV weight).
    pub alpha0: f64,
    pub edge: Option<EdgeWeighting<'a>>,
    /// Shape probability map `s(x)` in [0,1].
    pub shape: Option<&'a Volume3D>,
    /// Weight of the shape term.
    pub beta: f64,
    /// Probability clamp keeping the negative logs finite.
    pub eps: f64,
}

impl Default for CapacityParams<'_> {
    fn default() -> Self {
        CapacityParams {
            alpha0: 0.5,
            edge: None,
            shape: None,
            beta: 0.0,
            eps: 1e-6,
        }
    }
}

/// Negative-log-likelihood capacities from a foreground probability map.
///
/// `c_s = −ln(1 − p) + β s` is the cost of leaving a voxel out and
/// `c_t = −ln p + β(1 − s)` the cost of taking it in, with `p` clamped to
/// `[eps, 1 − eps]` and `s ≡ ½` when no shape map is supplied.
pub fn build_capacities(prob: &Volume3D, params: &CapacityParams<'_>) -> Result<CapacityField> {
    let CapacityParams {
        alpha0,
        edge,
        shape,
        beta,
        eps,
    } = *params;
    if !(alpha0.is_finite() && alpha0 >= 0.0) {
        return Err(Error::invalid(MODULE, format!("alpha0 must be ≥ 0, got {alpha0}")));
    }
    if !(beta.is_finite() && beta >= 0.0) {
        return Err(Error::invalid(MODULE, format!("beta must be ≥ 0, got {beta}")));
    }
    if !(eps > 0.0 && eps < 0.5) {
        return Err(Error::invalid(MODULE, format!("eps must lie in (0, 0.5), got {eps}")));
    }
    check_unit_interval(prob, "probability map")?;
    if let Some(s) = shape {
        prob.grid().ensure_same(s.grid(), "shape map")?;
        check_unit_interval(s, "shape map")?;
    }

    let grid = *prob.grid();
    let n = grid.len();
    let mut cs = Vec::with_capacity(n);
    let mut ct = Vec::with_capacity(n);
    for (idx, &p) in prob.data().iter().enumerate() {
        let p = p.clamp(eps, 1.0 - eps);
        let s = shape.map_or(0.5, |s| s.data()[idx]);
        cs.push(-(1.0 - p).ln() + beta * s);
        ct.push(-p.ln() + beta * (1.0 - s));
    }

    let alpha = match edge {
        None => vec![alpha0; n],
        Some(EdgeWeighting { intensity, kappa }) => {
            grid.ensure_same(intensity.grid(), "edge intensity")?;
            if !(kappa.is_finite() && kappa > 0.0) {
                return Err(Error::invalid(MODULE, format!("kappa must be positive, got {kappa}")));
            }
            let g = gradient(intensity);
            (0..n)
                .map(|i| {
                    let r = g.norm_at(i) / kappa;
                    alpha0 / (1.0 + r * r)
                })
                .collect()
        }
    };

    CapacityField::new(
        Volume3D::new(grid, cs)?,
        Volume3D::new(grid, ct)?,
        Volume3D::new(grid, alpha)?,
    )
}

fn check_unit_interval(vol: &Volume3D, what: &str) -> Result<()> {
    match vol.data().iter().position(|&v| !(0.0..=1.0).contains(&v)) {
        None => Ok(()),
        Some(i) => Err(Error::invalid(
            MODULE,
            format!("{what} must lie in [0,1], voxel {i} has {}", vol.data()[i]),
        )),
    }
}

/// Voxelwise projection onto the Euclidean ball of radius `alpha(x)`.
pub fn project_onto_ball(p: &VectorField3D, alpha: &Volume3D) -> Result<VectorField3D> {
    p.grid().ensure_same(alpha.grid(), "flow bound")?;
    if let Some(i) = alpha.data().iter().position(|&a| a < 0.0) {
        return Err(Error::invalid(MODULE, format!("negative flow bound at voxel {i}")));
    }
    let mut comps = p.components().clone();
    let [x, y, z] = &mut comps;
    for (idx, &a) in alpha.data().iter().enumerate() {
        let (nx, ny, nz) = project(x[idx], y[idx], z[idx], a);
        x[idx] = nx;
        y[idx] = ny;
        z[idx] = nz;
    }
    Ok(VectorField3D::from_parts(*p.grid(), comps))
}

#[inline(always)]
fn project(x: f64, y: f64, z: f64, alpha: f64) -> (f64, f64, f64) {
    let n2 = x * x + y * y + z * z;
    if n2 > alpha * alpha {
        let s = alpha / n2.sqrt();
        (x * s, y * s, z * s)
    } else {
        (x, y, z)
    }
}

/// Convex set bounding the spatial flow at each voxel.
///
/// The choice fixes which total variation the dual labeling pays:
/// `Componentwise` (`|p_i| ≤ α`) yields the anisotropic `Σ_i α |∂_i u|`,
/// the exact continuous counterpart of a 6-connected graph cut, while
/// `Euclidean` (`‖p‖₂ ≤ α`) yields the isotropic `α ‖∇u‖₂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum FlowBound {
    #[default]
    Componentwise,
    Euclidean,
}

impl FlowBound {
    #[inline(always)]
    fn project(self, x: f64, y: f64, z: f64, alpha: f64) -> (f64, f64, f64) {
        match self {
            FlowBound::Componentwise => (
                x.clamp(-alpha, alpha),
                y.clamp(-alpha, alpha),
                z.clamp(-alpha, alpha),
            ),
            FlowBound::Euclidean => project(x, y, z, alpha),
        }
    }

    /// Dual norm of the bound applied to a gradient vector.
    #[inline]
    pub fn tv_norm(self, g: [f64; 3]) -> f64 {
        match self {
            FlowBound::Componentwise => g[0].abs() + g[1].abs() + g[2].abs(),
            FlowBound::Euclidean => (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt(),
        }
    }

    /// Whether `v` lies in the set of radius `alpha`, up to `slack`.
    pub fn contains(self, v: [f64; 3], alpha: f64, slack: f64) -> bool {
        match self {
            FlowBound::Componentwise => v.iter().all(|c| c.abs() <= alpha + slack),
            FlowBound::Euclidean => (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt() <= alpha + slack,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            FlowBound::Componentwise => "componentwise",
            FlowBound::Euclidean => "euclidean",
        }
    }
}

impl std::str::FromStr for FlowBound {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "componentwise" | "anisotropic" => Ok(FlowBound::Componentwise),
            "euclidean" | "isotropic" => Ok(FlowBound::Euclidean),
            other => Err(Error::invalid(MODULE, format!("unknown flow bound {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CmfConfig {
    /// Augmented Lagrangian penalty weight.
    pub c: f64,
    /// Step size of the spatial-flow ascent on a unit-spacing grid. The
    /// solver multiplies it by the squared smallest spacing, which keeps the
    /// step stable when the difference operators scale with `1/h`.
    pub gamma: f64,
    pub max_iters: usize,
    /// Stop once the mean absolute multiplier change per voxel drops below this.
    pub tol: f64,
    /// Cut level applied to the relaxed labeling.
    pub threshold: f64,
    pub bound: FlowBound,
}

impl Default for CmfConfig {
    fn default() -> Self {
        CmfConfig {
            c: 0.35,
            gamma: 0.11,
            max_iters: 300,
            tol: 1e-4,
            threshold: 0.5,
            bound: FlowBound::Componentwise,
        }
    }
}

impl CmfConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        if !positive(self.c) {
            return Err(Error::invalid(MODULE, format!("c must be > 0, got {}", self.c)));
        }
        if !positive(self.gamma) {
            return Err(Error::invalid(MODULE, format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !positive(self.tol) {
            return Err(Error::invalid(MODULE, format!("tol must be > 0, got {}", self.tol)));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::invalid(
                MODULE,
                format!("threshold must lie in (0,1), got {}", self.threshold),
            ));
        }
        Ok(())
    }
}

/// Primal-dual state: source, sink and spatial flows plus the multiplier.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowState {
    pub ps: Volume3D,
    pub pt: Volume3D,
    pub p: VectorField3D,
    pub lambda: Volume3D,
}

impl FlowState {
    /// Labels each voxel by its cheaper terminal and saturates both terminal
    /// flows at `min(c_s, c_t)`; the spatial flow starts at zero.
    pub fn initial(caps: &CapacityField) -> FlowState {
        let grid = *caps.grid();
        let (cs, ct) = (caps.cs.data(), caps.ct.data());
        let sat: Vec<f64> = cs.iter().zip(ct).map(|(a, b)| a.min(*b)).collect();
        let lambda = cs
            .iter()
            .zip(ct)
            .map(|(a, b)| if a > b { 1.0 } else { 0.0 })
            .collect();
        FlowState {
            ps: Volume3D::from_parts(grid, sat.clone()),
            pt: Volume3D::from_parts(grid, sat),
            p: VectorField3D::zeros(grid),
            lambda: Volume3D::from_parts(grid, lambda),
        }
    }

    /// All-zero flows with a uniform multiplier.
    pub fn uniform(grid: Grid, lambda: f64) -> FlowState {
        FlowState {
            ps: Volume3D::zeros(grid),
            pt: Volume3D::zeros(grid),
            p: VectorField3D::zeros(grid),
            lambda: Volume3D::filled(grid, lambda),
        }
    }

    fn ensure_grid(&self, grid: &Grid) -> Result<()> {
        grid.ensure_same(self.ps.grid(), "source flow")?;
        grid.ensure_same(self.pt.grid(), "sink flow")?;
        grid.ensure_same(self.p.grid(), "spatial flow")?;
        grid.ensure_same(self.lambda.grid(), "multiplier")
    }
}

/// The quantity whose gradient drives the spatial flow: `div p − F` with
/// `F = p_s − p_t + λ/c`.
#[inline(always)]
fn flow_drive(divp: f64, ps: f64, pt: f64, lambda: f64, c: f64) -> f64 {
    divp - (ps - pt + lambda / c)
}

struct Workspace {
    drive: Vec<f64>,
}

impl Workspace {
    /// Fresh workspace with the divergence and drive computed from `state`.
    fn prepare(state: &FlowState, c: f64) -> Workspace {
        let grid = *state.p.grid();
        let mut divp = vec![0.0; grid.len()];
        let [px, py, pz] = state.p.components();
        divergence_into(&grid, [px, py, pz], &mut divp);
        let (ps, pt, lambda) = (state.ps.data(), state.pt.data(), state.lambda.data());
        let mut drive = vec![0.0; grid.len()];
        drive
            .par_chunks_mut(grid.plane())
            .enumerate()
            .for_each(|(k, row)| {
                let base = k * grid.plane();
                for (l, out) in row.iter_mut().enumerate() {
                    let i = base + l;
                    *out = flow_drive(divp[i], ps[i], pt[i], lambda[i], c);
                }
            });
        Workspace { drive }
    }
}

/// One sweep of the augmented Lagrangian scheme; returns the residual.
///
/// Expects `ws` to hold `div p` and the drive for the current state and
/// leaves them valid for the updated state.
fn sweep(state: &mut FlowState, caps: &CapacityField, cfg: &CmfConfig, ws: &mut Workspace) -> Result<f64> {
    let grid = *caps.grid();
    let [nx, ny, nz] = grid.dims;
    let plane = grid.plane();
    let inv = grid.spacing.map(|s| 1.0 / s);
    let h = grid.spacing.iter().copied().fold(f64::INFINITY, f64::min);
    let (c, gamma, bound) = (cfg.c, cfg.gamma * h * h, cfg.bound);

    // (1) spatial flow: gradient ascent on the augmented term, then projection.
    {
        let drive = &ws.drive;
        let alpha = caps.alpha.data();
        let [px, py, pz] = state.p.components_mut();
        px.par_chunks_mut(plane)
            .zip(py.par_chunks_mut(plane))
            .zip(pz.par_chunks_mut(plane))
            .enumerate()
            .for_each(|(k, ((px, py), pz))| {
                let base = k * plane;
                for j in 0..ny {
                    for i in 0..nx {
                        let l = i + nx * j;
                        let idx = base + l;
                        let g = drive[idx];
                        let dx = if i + 1 < nx { (drive[idx + 1] - g) * inv[0] } else { 0.0 };
                        let dy = if j + 1 < ny { (drive[idx + nx] - g) * inv[1] } else { 0.0 };
                        let dz = if k + 1 < nz { (drive[idx + plane] - g) * inv[2] } else { 0.0 };
                        let (x, y, z) = bound.project(
                            px[l] + gamma * dx,
                            py[l] + gamma * dy,
                            pz[l] + gamma * dz,
                            alpha[idx],
                        );
                        px[l] = x;
                        py[l] = y;
                        pz[l] = z;
                    }
                }
            });
    }

    // (2)-(4) terminal flows and multiplier, voxelwise, with div p of the
    // updated spatial flow computed on the fly; the drive for the next sweep
    // is refreshed in the same pass.
    let [qx, qy, qz] = state.p.components();
    let (cs, ct) = (caps.cs.data(), caps.ct.data());
    let partials: Vec<(f64, Option<usize>)> = state
        .ps
        .data_mut()
        .par_chunks_mut(plane)
        .zip(state.pt.data_mut().par_chunks_mut(plane))
        .zip(state.lambda.data_mut().par_chunks_mut(plane))
        .zip(ws.drive.par_chunks_mut(plane))
        .enumerate()
        .map(|(k, (((ps, pt), lam), drive))| {
            let base = k * plane;
            let mut sum = 0.0;
            let mut bad = None;
            for l in 0..ps.len() {
                let idx = base + l;
                let (i, j) = (l % nx, l / nx);
                let d = backward_diff(qx, idx, i, nx, 1) * inv[0]
                    + backward_diff(qy, idx, j, ny, nx) * inv[1]
                    + backward_diff(qz, idx, k, nz, plane) * inv[2];
                let s = cs[idx].min(d + pt[l] + (1.0 - lam[l]) / c);
                let t = ct[idx].min(s - d + lam[l] / c);
                let err = c * (d - s + t);
                let u = lam[l] - err;
                if !u.is_finite() && bad.is_none() {
                    bad = Some(idx);
                }
                ps[l] = s;
                pt[l] = t;
                lam[l] = u;
                drive[l] = flow_drive(d, s, t, u, c);
                sum += err.abs();
            }
            (sum, bad)
        })
        .collect();

    let mut total = 0.0;
    for (sum, bad) in partials {
        if let Some(index) = bad {
            return Err(Error::NonFinite {
                module: MODULE,
                index,
                what: "multiplier update",
            });
        }
        total += sum;
    }
    Ok(total / grid.len() as f64)
}

/// Performs one iteration on `state`, returning the new state and the mean
/// absolute multiplier change.
pub fn step(state: FlowState, caps: &CapacityField, cfg: &CmfConfig) -> Result<(FlowState, f64)> {
    cfg.validate()?;
    state.ensure_grid(caps.grid())?;
    let mut state = state;
    let mut ws = Workspace::prepare(&state, cfg.c);
    let residual = sweep(&mut state, caps, cfg, &mut ws)?;
    Ok((state, residual))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub index: usize,
    pub residual: f64,
    pub elapsed_ms: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CmfReport {
    pub iters: usize,
    pub final_residual: f64,
    pub converged: bool,
    /// Cut energy of the thresholded labeling.
    pub primal_energy: f64,
    pub history: Vec<IterRecord>,
}

impl CmfReport {
    /// Writes one tab-separated line per iteration: index, residual, elapsed ms.
    pub fn write_log(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "iter\tresidual\telapsed_ms")?;
        for r in &self.history {
            writeln!(out, "{}\t{:.9e}\t{:.3}", r.index, r.residual, r.elapsed_ms)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct CmfSolution {
    /// Relaxed labeling clamped to [0,1].
    pub lambda: Volume3D,
    /// `lambda` thresholded at the configured level.
    pub mask: Volume3D,
    pub state: FlowState,
    pub report: CmfReport,
}

/// Runs the solver from [`FlowState::initial`] until the residual falls
/// below `tol` or `max_iters` sweeps have been made. Hitting the iteration
/// limit is reported, not treated as an error.
pub fn solve_cmf(caps: &CapacityField, cfg: &CmfConfig) -> Result<CmfSolution> {
    cfg.validate()?;
    let start = Instant::now();
    let mut state = FlowState::initial(caps);
    let mut ws = Workspace::prepare(&state, cfg.c);
    let mut history = Vec::with_capacity(cfg.max_iters);
    let mut residual = f64::INFINITY;
    let mut converged = false;
    for index in 0..cfg.max_iters {
        residual = sweep(&mut state, caps, cfg, &mut ws)?;
        history.push(IterRecord {
            index,
            residual,
            elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
        });
        if residual < cfg.tol {
            converged = true;
            break;
        }
    }
    let lambda = state.lambda.map(|v| v.clamp(0.0, 1.0))?;
    let mask = threshold_mask(&lambda, cfg.threshold)?;
    let primal_energy = primal_energy(caps, &mask, cfg.bound)?;
    Ok(CmfSolution {
        lambda,
        mask,
        state,
        report: CmfReport {
            iters: history.len(),
            final_residual: residual,
            converged,
            primal_energy,
            history,
        },
    })
}

/// Binary mask: 1 where `lambda ≥ level`.
pub fn threshold_mask(lambda: &Volume3D, level: f64) -> Result<Volume3D> {
    if !(level > 0.0 && level < 1.0) {
        return Err(Error::invalid(MODULE, format!("threshold must lie in (0,1), got {level}")));
    }
    Ok(Volume3D::from_parts(
        *lambda.grid(),
        lambda
            .data()
            .iter()
            .map(|&v| if v >= level { 1.0 } else { 0.0 })
            .collect(),
    ))
}

/// `∫ (1 − u) c_s + u c_t + α |∇u| dx` for a labeling `u`, with the
/// forward-difference gradient measured in the dual norm of `bound` and
/// voxel-volume weighting.
pub fn primal_energy(caps: &CapacityField, labels: &Volume3D, bound: FlowBound) -> Result<f64> {
    caps.grid().ensure_same(labels.grid(), "labeling")?;
    let grad = gradient(labels);
    let [gx, gy, gz] = grad.components();
    let (cs, ct, alpha) = (caps.cs.data(), caps.ct.data(), caps.alpha.data());
    let sum: f64 = labels
        .data()
        .iter()
        .enumerate()
        .map(|(i, &u)| {
            (1.0 - u) * cs[i] + u * ct[i] + alpha[i] * bound.tv_norm([gx[i], gy[i], gz[i]])
        })
        .sum();
    Ok(sum * caps.grid().voxel_volume())
}
