//! Pose normalization between a mask's own grid and the canonical shape grid.
//!
//! Only translation and isotropic scale are normalized: the foreground
//! centroid goes to the canonical centre and the foreground volume becomes a
//! fixed fraction of the canonical grid. Distances are in voxel units of the
//! respective grid.

use crate::error::{Error, Result};
use crate::shape::sdf::mask_to_sdf;
use crate::volume::{Grid, Volume3D};

const MODULE: &str = "shape";

/// Default canonical grid edge length.
pub const CANONICAL_EDGE: usize = 32;
/// Fraction of the canonical grid occupied by an aligned shape.
pub const FILL_FRACTION: f64 = 0.05;

/// How a source shape was mapped onto the canonical grid.
///
/// A source voxel position `x` lands at `center + scale * (x - centroid)`
/// in canonical voxel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlignmentRecord {
    /// Foreground centroid in source voxel coordinates.
    pub centroid: [f64; 3],
    /// Source grid dimensions.
    pub source_dims: [usize; 3],
    /// Isotropic source-to-canonical scale factor.
    pub scale: f64,
}

impl AlignmentRecord {
    /// Translation (source voxels) that moves the centroid to the source grid centre.
    pub fn shift(&self) -> [f64; 3] {
        std::array::from_fn(|a| center(self.source_dims)[a] - self.centroid[a])
    }

    fn to_canonical(&self, canon: [usize; 3], x: [f64; 3]) -> [f64; 3] {
        let c = center(canon);
        std::array::from_fn(|a| c[a] + self.scale * (x[a] - self.centroid[a]))
    }

    fn to_source(&self, canon: [usize; 3], y: [f64; 3]) -> [f64; 3] {
        let c = center(canon);
        std::array::from_fn(|a| self.centroid[a] + (y[a] - c[a]) / self.scale)
    }
}

/// A signed distance shape on the canonical grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeSample {
    pub z: Vec<f64>,
    pub dims: [usize; 3],
    pub record: AlignmentRecord,
}

impl ShapeSample {
    pub fn to_volume(&self) -> Result<Volume3D> {
        Volume3D::new(Grid::unit(self.dims)?, self.z.clone())
    }
}

fn center(dims: [usize; 3]) -> [f64; 3] {
    std::array::from_fn(|a| (dims[a] as f64 - 1.0) / 2.0)
}

/// Aligns a signed distance volume (negative inside) onto a canonical grid.
pub fn align_shape(sdf: &Volume3D, canonical_dims: [usize; 3]) -> Result<ShapeSample> {
    let canon = Grid::unit(canonical_dims)?;
    let g = sdf.grid();
    let mut count = 0usize;
    let mut sum = [0.0; 3];
    for (idx, &v) in sdf.data().iter().enumerate() {
        if v < 0.0 {
            count += 1;
            let c = g.coords(idx);
            for a in 0..3 {
                sum[a] += c[a] as f64;
            }
        }
    }
    if count == 0 {
        return Err(Error::invalid(MODULE, "shape has no foreground voxels"));
    }
    let record = AlignmentRecord {
        centroid: sum.map(|s| s / count as f64),
        source_dims: g.dims,
        scale: (FILL_FRACTION * canon.len() as f64 / count as f64).cbrt(),
    };

    resample_aligned(sdf, canonical_dims, record)
}

/// Resamples `sdf` onto the canonical grid under a given pose, then
/// re-thresholds and recomputes an exact signed distance.
pub fn align_with_record(
    sdf: &Volume3D,
    canonical_dims: [usize; 3],
    record: AlignmentRecord,
) -> Result<ShapeSample> {
    if !(record.scale > 0.0 && record.scale.is_finite()) {
        return Err(Error::invalid(MODULE, "alignment scale must be positive"));
    }
    resample_aligned(sdf, canonical_dims, AlignmentRecord {
        source_dims: sdf.dims(),
        ..record
    })
}

fn resample_aligned(sdf: &Volume3D, canonical_dims: [usize; 3], record: AlignmentRecord) -> Result<ShapeSample> {
    let canon = Grid::unit(canonical_dims)?;
    let resampled: Vec<f64> = (0..canon.len())
        .map(|idx| {
            let y = canon.coords(idx).map(|c| c as f64);
            let x = record.to_source(canonical_dims, y);
            let v = sdf.sample_extended(x) * record.scale;
            if v < 0.0 {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mask = Volume3D::new(canon, resampled)?;
    let n = mask.count_nonzero();
    if n == 0 || n == canon.len() {
        return Err(Error::invalid(
            MODULE,
            format!("aligned shape is degenerate ({n} of {} voxels inside)", canon.len()),
        ));
    }
    let z = mask_to_sdf(&mask)?.into_data();
    Ok(ShapeSample {
        z,
        dims: canonical_dims,
        record,
    })
}

/// Mask → signed distance → aligned sample.
pub fn align_mask(mask: &Volume3D, canonical_dims: [usize; 3]) -> Result<ShapeSample> {
    align_shape(&mask_to_sdf(mask)?, canonical_dims)
}

/// Soft foreground map on `target` from a canonical signed distance `z`,
/// mapped back through `record`: `1 / (1 + exp(phi / width))`.
pub fn shape_probability_map(
    z: &[f64],
    canonical_dims: [usize; 3],
    record: &AlignmentRecord,
    target: &Grid,
    width: f64,
) -> Result<Volume3D> {
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid(MODULE, format!("width must be positive, got {width}")));
    }
    if !(record.scale > 0.0 && record.scale.is_finite()) {
        return Err(Error::invalid(MODULE, "alignment scale must be positive"));
    }
    let phi = Volume3D::new(Grid::unit(canonical_dims)?, z.to_vec())?;
    let data = (0..target.len())
        .map(|idx| {
            let x = target.coords(idx).map(|c| c as f64);
            let y = record.to_canonical(canonical_dims, x);
            logistic(-phi.sample_extended(y) / record.scale / width)
        })
        .collect();
    Volume3D::new(*target, data)
}

/// Soft disagreement `Σ u(1 − s) + (1 − u)s` between a binary mask and the
/// shape map of `z` under `record`, summed over the mask's bounding box
/// grown by `margin` voxels.
fn pose_mismatch(
    mask: &Volume3D,
    phi: &Volume3D,
    record: &AlignmentRecord,
    width: f64,
    bbox: &([usize; 3], [usize; 3]),
) -> f64 {
    let canon = phi.dims();
    let (lo, hi) = bbox;
    let mut sum = 0.0;
    for k in lo[2]..=hi[2] {
        for j in lo[1]..=hi[1] {
            for i in lo[0]..=hi[0] {
                let y = record.to_canonical(canon, [i as f64, j as f64, k as f64]);
                let s = logistic(-phi.sample_extended(y) / record.scale / width);
                let u = mask.get(i, j, k);
                sum += u * (1.0 - s) + (1.0 - u) * s;
            }
        }
    }
    sum
}

/// Adjusts translation and scale of `record` so that the shape map of `z`
/// best overlaps `mask` (pattern search on centroid and log-scale). The
/// search stays within a factor 1.5 of the starting scale and moves the
/// centroid by at most a quarter of the mask's extent per axis.
pub fn refine_alignment(
    mask: &Volume3D,
    z: &[f64],
    canonical_dims: [usize; 3],
    record: AlignmentRecord,
    width: f64,
) -> Result<AlignmentRecord> {
    mask.ensure_binary(MODULE, "mask")?;
    if !(width > 0.0 && width.is_finite()) {
        return Err(Error::invalid(MODULE, format!("width must be positive, got {width}")));
    }
    let phi = Volume3D::new(Grid::unit(canonical_dims)?, z.to_vec())?;
    let g = mask.grid();
    let (mut lo, mut hi) = ([usize::MAX; 3], [0usize; 3]);
    for (idx, &v) in mask.data().iter().enumerate() {
        if v == 1.0 {
            let c = g.coords(idx);
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a]);
            }
        }
    }
    if lo[0] == usize::MAX {
        return Err(Error::invalid(MODULE, "mask has no foreground voxels"));
    }
    const MARGIN: usize = 4;
    let bbox = (
        lo.map(|v| v.saturating_sub(MARGIN)),
        std::array::from_fn(|a| (hi[a] + MARGIN).min(g.dims[a] - 1)),
    );
    let start = AlignmentRecord {
        source_dims: g.dims,
        ..record
    };
    let reach: [f64; 3] = std::array::from_fn(|a| (hi[a] - lo[a] + 1) as f64 / 4.0);
    let admissible = |r: &AlignmentRecord| {
        (r.scale / start.scale).ln().abs() <= 1.5f64.ln()
            && (0..3).all(|a| (r.centroid[a] - start.centroid[a]).abs() <= reach[a])
    };
    let mut best = start;
    let mut best_cost = pose_mismatch(mask, &phi, &best, width, &bbox);
    let (mut shift_step, mut scale_step) = (1.0, 0.04);
    while shift_step >= 0.125 {
        let mut improved = false;
        for param in 0..4 {
            for dir in [1.0, -1.0] {
                let mut cand = best;
                if param < 3 {
                    cand.centroid[param] += dir * shift_step;
                } else {
                    cand.scale *= (dir * scale_step).exp();
                }
                if !admissible(&cand) {
                    continue;
                }
                let cost = pose_mismatch(mask, &phi, &cand, width, &bbox);
                if cost < best_cost {
                    best = cand;
                    best_cost = cost;
                    improved = true;
                    break;
                }
            }
        }
        if !improved {
            shift_step /= 2.0;
            scale_step /= 2.0;
        }
    }
    Ok(best)
}

pub(crate) fn logistic(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}
