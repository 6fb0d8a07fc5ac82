//! Dense scalar and vector fields on a regular 3D grid, together with the
//! forward-difference gradient and its negative adjoint, the divergence.
//!
//! Samples are stored x-fastest: voxel `(i, j, k)` lives at
//! `i + nx * (j + ny * k)`. Every module (including the oracle) uses this
//! linearization so voxel indices are comparable across the crate.

use rayon::prelude::*;

use crate::error::{Error, Result};

const MODULE: &str = "volume";

/// Grid geometry shared by every field: voxel counts and physical spacing (mm).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&n| n == 0) {
            return Err(Error::invalid(
                MODULE,
                format!("dimensions must be positive, got {dims:?}"),
            ));
        }
        if spacing.iter().any(|&s| !(s.is_finite() && s > 0.0)) {
            return Err(Error::invalid(
                MODULE,
                format!("spacing must be finite and positive, got {spacing:?}"),
            ));
        }
        Ok(Grid { dims, spacing })
    }

    /// Unit-spacing grid.
    pub fn unit(dims: [usize; 3]) -> Result<Self> {
        Grid::new(dims, [1.0; 3])
    }

    pub fn len(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of samples in one z-slice.
    pub fn plane(&self) -> usize {
        self.dims[0] * self.dims[1]
    }

    #[inline]
    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.dims[0] * (j + self.dims[1] * k)
    }

    #[inline]
    pub fn coords(&self, idx: usize) -> [usize; 3] {
        let [nx, ny, _] = self.dims;
        [idx % nx, (idx / nx) % ny, idx / (nx * ny)]
    }

    pub fn voxel_volume(&self) -> f64 {
        self.spacing.iter().product()
    }

    pub(crate) fn ensure_same(&self, other: &Grid, what: &str) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::invalid(
                MODULE,
                format!(
                    "grid mismatch for {what}: {:?}/{:?} vs {:?}/{:?}",
                    self.dims, self.spacing, other.dims, other.spacing
                ),
            ))
        }
    }
}

/// A scalar field on a [`Grid`].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume3D {
    grid: Grid,
    data: Vec<f64>,
}

impl Volume3D {
    /// Wraps `data`, checking its length and that every sample is finite.
    pub fn new(grid: Grid, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "data length {} does not match dims {:?} ({} voxels)",
                    data.len(),
                    grid.dims,
                    grid.len()
                ),
            ));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                module: MODULE,
                index,
                what: "volume sample",
            });
        }
        Ok(Volume3D { grid, data })
    }

    pub fn filled(grid: Grid, value: f64) -> Self {
        assert!(value.is_finite(), "fill value must be finite");
        Volume3D {
            grid,
            data: vec![value; grid.len()],
        }
    }

    pub fn zeros(grid: Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(grid: Grid, mut f: impl FnMut(usize, usize, usize) -> f64) -> Result<Self> {
        let [nx, ny, nz] = grid.dims;
        let mut data = Vec::with_capacity(grid.len());
        for k in 0..nz {
            for j in 0..ny {
                for i in 0..nx {
                    data.push(f(i, j, k));
                }
            }
        }
        Volume3D::new(grid, data)
    }

    /// Internal constructor for data already known to be valid.
    pub(crate) fn from_parts(grid: Grid, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), grid.len());
        Volume3D { grid, data }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn dims(&self) -> [usize; 3] {
        self.grid.dims
    }

    pub fn spacing(&self) -> [f64; 3] {
        self.grid.spacing
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> f64 {
        self.data[self.grid.index(i, j, k)]
    }

    /// Applies `f` to every sample. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Volume3D> {
        Volume3D::new(self.grid, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// True if every sample is exactly 0 or 1.
    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub(crate) fn ensure_binary(&self, module: &'static str, what: &str) -> Result<()> {
        match self.data.iter().position(|&v| v != 0.0 && v != 1.0) {
            None => Ok(()),
            Some(idx) => Err(Error::invalid(
                module,
                format!(
                    "{what} must be binary, voxel {idx} has value {}",
                    self.data[idx]
                ),
            )),
        }
    }

    pub fn count_nonzero(&self) -> usize {
        self.data.iter().filter(|&&v| v != 0.0).count()
    }

    /// Trilinear sample at a continuous voxel coordinate.
    ///
    /// Coordinates outside the grid are clamped to it and the clamped
    /// distance (in voxels) is added, which extends signed distance fields
    /// linearly beyond the grid and is harmless for bounded fields that are
    /// constant near the border.
    pub fn sample_extended(&self, pos: [f64; 3]) -> f64 {
        let mut clamped = [0.0; 3];
        let mut outside = 0.0;
        for a in 0..3 {
            let hi = (self.grid.dims[a] - 1) as f64;
            let c = pos[a].clamp(0.0, hi);
            outside += (pos[a] - c) * (pos[a] - c);
            clamped[a] = c;
        }
        self.sample_clamped(clamped) + outside.sqrt()
    }

    /// Trilinear sample; coordinates are clamped to the grid.
    pub fn sample_clamped(&self, pos: [f64; 3]) -> f64 {
        let mut lo = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.grid.dims[a];
            let c = pos[a].clamp(0.0, (n - 1) as f64);
            let base = (c.floor() as usize).min(n.saturating_sub(2));
            lo[a] = base;
            frac[a] = if n > 1 { c - base as f64 } else { 0.0 };
        }
        let hi = |a: usize| (lo[a] + 1).min(self.grid.dims[a] - 1);
        let mut acc = 0.0;
        for corner in 0..8 {
            let mut w = 1.0;
            let mut ijk = [0usize; 3];
            for a in 0..3 {
                if corner >> a & 1 == 1 {
                    w *= frac[a];
                    ijk[a] = hi(a);
                } else {
                    w *= 1.0 - frac[a];
                    ijk[a] = lo[a];
                }
            }
            if w != 0.0 {
                acc += w * self.get(ijk[0], ijk[1], ijk[2]);
            }
        }
        acc
    }
}

/// A 3-vector field on a [`Grid`], stored as three component arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField3D {
    grid: Grid,
    comps: [Vec<f64>; 3],
}

impl VectorField3D {
    pub fn new(grid: Grid, comps: [Vec<f64>; 3]) -> Result<Self> {
        for (a, c) in comps.iter().enumerate() {
            if c.len() != grid.len() {
                return Err(Error::invalid(
                    MODULE,
                    format!(
                        "component {a} has length {} but the grid has {} voxels",
                        c.len(),
                        grid.len()
                    ),
                ));
            }
            if let Some(index) = c.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    module: MODULE,
                    index,
                    what: "vector component",
                });
            }
        }
        Ok(VectorField3D { grid, comps })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.len();
        VectorField3D {
            grid,
            comps: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        }
    }

    pub(crate) fn from_parts(grid: Grid, comps: [Vec<f64>; 3]) -> Self {
        VectorField3D { grid, comps }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn component(&self, axis: usize) -> &[f64] {
        &self.comps[axis]
    }

    pub fn components(&self) -> &[Vec<f64>; 3] {
        &self.comps
    }

    pub(crate) fn components_mut(&mut self) -> &mut [Vec<f64>; 3] {
        &mut self.comps
    }

    pub fn into_components(self) -> [Vec<f64>; 3] {
        self.comps
    }

    /// Euclidean norm of the vector at voxel `idx`.
    pub fn norm_at(&self, idx: usize) -> f64 {
        let [x, y, z] = &self.comps;
        (x[idx] * x[idx] + y[idx] * y[idx] + z[idx] * z[idx]).sqrt()
    }

    /// Sum over voxels of the componentwise product with `other`.
    pub fn dot(&self, other: &VectorField3D) -> f64 {
        (0..3)
            .map(|a| {
                self.comps[a]
                    .iter()
                    .zip(&other.comps[a])
                    .map(|(x, y)| x * y)
                    .sum::<f64>()
            })
            .sum()
    }
}

/// Forward-difference gradient with Neumann boundary (zero on the last slice
/// along each axis), divided by the spacing.
pub fn gradient(vol: &Volume3D) -> VectorField3D {
    let grid = *vol.grid();
    let n = grid.len();
    let mut comps = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
    {
        let [gx, gy, gz] = &mut comps;
        gradient_into(&grid, vol.data(), [gx, gy, gz]);
    }
    VectorField3D::from_parts(grid, comps)
}

/// Backward-difference divergence, the exact negative adjoint of [`gradient`].
pub fn divergence(field: &VectorField3D) -> Volume3D {
    let grid = *field.grid();
    let mut out = vec![0.0; grid.len()];
    let [px, py, pz] = field.components();
    divergence_into(&grid, [px, py, pz], &mut out);
    Volume3D::from_parts(grid, out)
}

pub(crate) fn gradient_into(grid: &Grid, u: &[f64], out: [&mut [f64]; 3]) {
    let [nx, ny, nz] = grid.dims;
    let plane = grid.plane();
    let inv = grid.spacing.map(|s| 1.0 / s);
    let [gx, gy, gz] = out;
    gx.par_chunks_mut(plane)
        .zip(gy.par_chunks_mut(plane))
        .zip(gz.par_chunks_mut(plane))
        .enumerate()
        .for_each(|(k, ((gx, gy), gz))| {
            let base = k * plane;
            for j in 0..ny {
                for i in 0..nx {
                    let l = i + nx * j;
                    let idx = base + l;
                    let c = u[idx];
                    gx[l] = if i + 1 < nx { (u[idx + 1] - c) * inv[0] } else { 0.0 };
                    gy[l] = if j + 1 < ny { (u[idx + nx] - c) * inv[1] } else { 0.0 };
                    gz[l] = if k + 1 < nz { (u[idx + plane] - c) * inv[2] } else { 0.0 };
                }
            }
        });
}

/// One-axis backward difference matching the Neumann forward gradient.
#[inline(always)]
pub(crate) fn backward_diff(q: &[f64], idx: usize, pos: usize, n: usize, stride: usize) -> f64 {
    if n == 1 {
        0.0
    } else if pos == 0 {
        q[idx]
    } else if pos + 1 == n {
        -q[idx - stride]
    } else {
        q[idx] - q[idx - stride]
    }
}

pub(crate) fn divergence_into(grid: &Grid, p: [&[f64]; 3], out: &mut [f64]) {
    let [nx, ny, nz] = grid.dims;
    let plane = grid.plane();
    let inv = grid.spacing.map(|s| 1.0 / s);
    let [px, py, pz] = p;
    out.par_chunks_mut(plane).enumerate().for_each(|(k, row)| {
        let base = k * plane;
        for j in 0..ny {
            for i in 0..nx {
                let l = i + nx * j;
                let idx = base + l;
                row[l] = backward_diff(px, idx, i, nx, 1) * inv[0]
                    + backward_diff(py, idx, j, ny, nx) * inv[1]
                    + backward_diff(pz, idx, k, nz, plane) * inv[2];
            }
        }
    });
}

/// Trilinear resampling onto `target_dims`.
///
/// Both grids are normalized to the unit cube with corner samples aligned,
/// so target voxel `t` along an axis reads source coordinate
/// `t * (n_src - 1) / (n_tgt - 1)`. Spacing is rescaled so the physical
/// extent is preserved.
pub fn resample_trilinear(vol: &Volume3D, target_dims: [usize; 3]) -> Result<Volume3D> {
    let src = vol.dims();
    if target_dims.iter().any(|&n| n == 0) {
        return Err(Error::invalid(
            MODULE,
            format!("target dimensions must be positive, got {target_dims:?}"),
        ));
    }
    let mut scale = [0.0; 3];
    let mut spacing = vol.spacing();
    for a in 0..3 {
        let (ns, nt) = (src[a], target_dims[a]);
        if ns == nt {
            scale[a] = 1.0;
            continue;
        }
        if ns < 2 {
            return Err(Error::invalid(
                MODULE,
                format!("cannot interpolate along axis {a}: source has {ns} sample(s)"),
            ));
        }
        if nt == 1 {
            scale[a] = 0.0;
            spacing[a] *= ns as f64;
        } else {
            scale[a] = (ns - 1) as f64 / (nt - 1) as f64;
            spacing[a] *= scale[a];
        }
    }
    let grid = Grid::new(target_dims, spacing)?;
    let [nx, ny, _] = target_dims;
    let plane = nx * ny;
    let mut data = vec![0.0; grid.len()];
    data.par_chunks_mut(plane).enumerate().for_each(|(k, row)| {
        for j in 0..ny {
            for i in 0..nx {
                let pos = [
                    i as f64 * scale[0],
                    j as f64 * scale[1],
                    k as f64 * scale[2],
                ];
                row[i + nx * j] = vol.sample_clamped(pos);
            }
        }
    });
    Volume3D::new(grid, data)
}
