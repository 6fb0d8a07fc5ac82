//! Exact Euclidean signed distance of binary masks, in voxel units.
//!
//! A foreground voxel gets minus its distance to the nearest background
//! voxel centre, a background voxel plus its distance to the nearest
//! foreground voxel centre. Both sides are measured between voxel centres,
//! so `sdf(mask) == -sdf(complement)` holds exactly.

use crate::error::{Error, Result};
use crate::volume::{Grid, Volume3D};

const MODULE: &str = "shape";

/// Signed distance transform of a binary mask (negative inside).
pub fn mask_to_sdf(mask: &Volume3D) -> Result<Volume3D> {
    mask.ensure_binary(MODULE, "mask")?;
    let fg = mask.count_nonzero();
    if fg == 0 || fg == mask.len() {
        return Err(Error::invalid(
            MODULE,
            "signed distance needs both foreground and background voxels",
        ));
    }
    let grid = *mask.grid();
    let inside: Vec<bool> = mask.data().iter().map(|&v| v != 0.0).collect();
    // distance from foreground voxels to the background, and vice versa
    let to_background = squared_edt(&grid, |i| !inside[i]);
    let to_foreground = squared_edt(&grid, |i| inside[i]);
    let data = (0..grid.len())
        .map(|i| {
            if inside[i] {
                -to_background[i].sqrt()
            } else {
                to_foreground[i].sqrt()
            }
        })
        .collect();
    Volume3D::new(grid, data)
}

/// Squared distance (voxel units) from every voxel to the nearest voxel
/// where `site` holds; separable lower-envelope transform, one pass per axis.
pub(crate) fn squared_edt(grid: &Grid, site: impl Fn(usize) -> bool) -> Vec<f64> {
    let mut d: Vec<f64> = (0..grid.len())
        .map(|i| if site(i) { 0.0 } else { f64::INFINITY })
        .collect();
    let [nx, ny, nz] = grid.dims;
    let strides = [1, nx, nx * ny];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let mut env = Envelope::default();
    for axis in 0..3 {
        let n = grid.dims[axis];
        let stride = strides[axis];
        let (oa, ob) = match axis {
            0 => ((ny, strides[1]), (nz, strides[2])),
            1 => ((nx, strides[0]), (nz, strides[2])),
            _ => ((nx, strides[0]), (ny, strides[1])),
        };
        for a in 0..oa.0 {
            for b in 0..ob.0 {
                let start = a * oa.1 + b * ob.1;
                line.clear();
                line.extend((0..n).map(|q| d[start + q * stride]));
                out.resize(n, 0.0);
                env.transform(&line, &mut out);
                for q in 0..n {
                    d[start + q * stride] = out[q];
                }
            }
        }
    }
    d
}

/// Lower envelope of parabolas `(q - v)² + f(v)`, skipping infinite sites.
#[derive(Default)]
struct Envelope {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Envelope {
    fn transform(&mut self, f: &[f64], out: &mut [f64]) {
        self.v.clear();
        self.z.clear();
        for (q, &fq) in f.iter().enumerate() {
            if !fq.is_finite() {
                continue;
            }
            loop {
                let Some(&p) = self.v.last() else {
                    break;
                };
                let s = ((fq + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q - p) as f64);
                if s <= *self.z.last().unwrap() {
                    self.v.pop();
                    self.z.pop();
                } else {
                    self.v.push(q);
                    self.z.push(s);
                    break;
                }
            }
            if self.v.is_empty() {
                self.v.push(q);
                self.z.push(f64::NEG_INFINITY);
            }
        }
        if self.v.is_empty() {
            out.fill(f64::INFINITY);
            return;
        }
        let mut k = 0;
        for (q, o) in out.iter_mut().enumerate() {
            while k + 1 < self.v.len() && self.z[k + 1] < q as f64 {
                k += 1;
            }
            let p = self.v[k];
            let dq = q as f64 - p as f64;
            *o = dq * dq + f[p];
        }
    }
}
