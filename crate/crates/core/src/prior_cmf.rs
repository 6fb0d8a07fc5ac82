//! Segmentation alternating between a max-flow solve and the shape model.
//!
//! Outer iteration 0 is a plain solve. Every later iteration aligns the
//! current mask, reconstructs it through the model, turns the reconstruction
//! into a soft shape map `s` and re-solves with the capacity bias
//! `β s` (cost of excluding) / `β (1 − s)` (cost of including).

use crate::cmf::{build_capacities, primal_energy, solve_cmf, CapacityParams, CmfConfig, CmfReport, CmfSolution};
use crate::error::{Error, Result};
use crate::shape::{
    align_shape, align_with_record, mask_to_sdf, refine_alignment, shape_probability_map, ShapeModel,
    ShapeSample,
};
use crate::volume::Volume3D;

const MODULE: &str = "prior_cmf";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PriorCmfConfig {
    pub outer_iters: usize,
    /// Weight of the shape term in the capacities.
    pub beta: f64,
    /// Logistic width (voxels) of the shape probability map.
    pub width: f64,
    /// Rounds of pose refinement (translation + scale) per shape fit.
    pub pose_rounds: usize,
    /// Base flow bound.
    pub alpha0: f64,
    /// Probability clamp for the negative logs.
    pub eps: f64,
    pub cmf: CmfConfig,
}

impl Default for PriorCmfConfig {
    fn default() -> Self {
        PriorCmfConfig {
            outer_iters: 3,
            beta: 3.0,
            width: 0.35,
            pose_rounds: 2,
            alpha0: CapacityParams::default().alpha0,
            eps: CapacityParams::default().eps,
            cmf: CmfConfig::default(),
        }
    }
}

impl PriorCmfConfig {
    pub fn validate(&self) -> Result<()> {
        if self.outer_iters == 0 {
            return Err(Error::invalid(MODULE, "outer_iters must be ≥ 1"));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::invalid(MODULE, format!("beta must be ≥ 0, got {}", self.beta)));
        }
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(Error::invalid(MODULE, format!("width must be > 0, got {}", self.width)));
        }
        self.cmf.validate()
    }

    /// True when the shape model can never influence the result.
    pub fn is_plain(&self) -> bool {
        self.beta == 0.0 || self.outer_iters == 1
    }

    fn params<'a>(&self, shape: Option<&'a Volume3D>) -> CapacityParams<'a> {
        CapacityParams {
            alpha0: self.alpha0,
            edge: None,
            shape,
            beta: if shape.is_some() { self.beta } else { 0.0 },
            eps: self.eps,
        }
    }
}

/// Energies after one outer iteration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuterRecord {
    pub iter: usize,
    /// Cut energy of the mask under the capacities it was solved with.
    pub cut_energy: f64,
    /// Shape-model energy of the aligned mask.
    pub shape_energy: f64,
    /// `Σ u(1 − s) + (1 − u)s` between the mask and its own reconstruction.
    pub disagreement: f64,
    /// Data-only cut energy plus `β ·` disagreement.
    pub objective: f64,
    pub cmf_iters: usize,
    pub foreground: usize,
}

#[derive(Debug, Clone)]
pub struct PriorSolution {
    pub mask: Volume3D,
    /// Result of the last inner solve.
    pub last: CmfSolution,
    /// Result of the prior-free solve of iteration 0.
    pub plain: Volume3D,
    /// Convergence reports of the earlier inner solves, oldest first;
    /// `last.report` completes the sequence.
    pub earlier: Vec<CmfReport>,
    /// One record per outer iteration; empty when the prior was never consulted.
    pub trace: Vec<OuterRecord>,
}

/// Segments `prob` with the shape prior in the loop.
///
/// With `beta = 0` or a single outer iteration the model is never used and
/// the result is the plain solve, bit for bit.
pub fn segment_with_prior(prob: &Volume3D, model: &ShapeModel, cfg: &PriorCmfConfig) -> Result<PriorSolution> {
    cfg.validate()?;
    let plain_caps = build_capacities(prob, &cfg.params(None))?;
    let first = solve_cmf(&plain_caps, &cfg.cmf)?;
    if cfg.is_plain() {
        return Ok(PriorSolution {
            mask: first.mask.clone(),
            plain: first.mask.clone(),
            last: first,
            earlier: Vec::new(),
            trace: Vec::new(),
        });
    }
    let plain = first.mask.clone();
    let mut trace = Vec::with_capacity(cfg.outer_iters);
    let mut earlier = Vec::with_capacity(cfg.outer_iters - 1);
    let mut current = first;
    for iter in 0..cfg.outer_iters {
        let mask = &current.mask;
        let fg = mask.count_nonzero();
        if fg == 0 || fg == mask.len() {
            return Err(Error::invalid(
                MODULE,
                format!(
                    "segmentation after outer iteration {iter} is {}; the probability map holds no detectable object",
                    if fg == 0 { "empty" } else { "the whole grid" }
                ),
            ));
        }
        let fit = fit_shape(mask, model, cfg.width, cfg.pose_rounds)?;
        let shape_energy = model.energy(&fit.sample.z)?;
        let s = fit.map;
        let disagreement = disagreement(mask, &s);
        trace.push(OuterRecord {
            iter,
            cut_energy: current.report.primal_energy,
            shape_energy,
            disagreement,
            objective: primal_energy(&plain_caps, mask, cfg.cmf.bound)? + cfg.beta * disagreement,
            cmf_iters: current.report.iters,
            foreground: fg,
        });
        if iter + 1 == cfg.outer_iters {
            break;
        }
        let caps = build_capacities(prob, &cfg.params(Some(&s)))?;
        let next = solve_cmf(&caps, &cfg.cmf)?;
        earlier.push(std::mem::replace(&mut current, next).report);
    }
    Ok(PriorSolution {
        mask: current.mask.clone(),
        plain,
        last: current,
        earlier,
        trace,
    })
}

/// A mask explained by the shape model.
#[derive(Debug, Clone)]
pub struct ShapeFit {
    /// The mask aligned under the final pose.
    pub sample: ShapeSample,
    /// Model reconstruction of `sample.z`.
    pub reconstruction: Vec<f64>,
    /// Soft shape map of the reconstruction on the mask's grid.
    pub map: Volume3D,
}

/// Aligns `mask` by its moments, then alternates model reconstruction with
/// pose refinement so that the reconstruction overlaps the mask best.
pub fn fit_shape(mask: &Volume3D, model: &ShapeModel, width: f64, pose_rounds: usize) -> Result<ShapeFit> {
    let dims = model.dims();
    let sdf = mask_to_sdf(mask)?;
    let mut sample = align_shape(&sdf, dims)?;
    let mut reconstruction = model.reconstruct(&sample.z)?;
    for _ in 0..pose_rounds {
        let record = refine_alignment(mask, &reconstruction, dims, sample.record, width)?;
        sample = align_with_record(&sdf, dims, record)?;
        reconstruction = model.reconstruct(&sample.z)?;
    }
    let map = shape_probability_map(&reconstruction, dims, &sample.record, mask.grid(), width)?;
    Ok(ShapeFit {
        sample,
        reconstruction,
        map,
    })
}

fn disagreement(mask: &Volume3D, s: &Volume3D) -> f64 {
    let sum: f64 = mask
        .data()
        .iter()
        .zip(s.data())
        .map(|(&u, &s)| u * (1.0 - s) + (1.0 - u) * s)
        .sum();
    sum * mask.grid().voxel_volume()
}
