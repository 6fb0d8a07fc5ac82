//! Statistical shape priors over signed distance representations of masks.

mod align;
mod file;
mod model;
mod sdf;

pub use align::{
    align_mask, align_shape, align_with_record, refine_alignment, shape_probability_map, AlignmentRecord, ShapeSample, CANONICAL_EDGE,
    FILL_FRACTION,
};
pub(crate) use align::logistic;
pub use file::{decode_model, encode_model, load_model, save_model};
pub use model::{fit_gaussian_prior, fit_kde_prior, ModelKind, ShapeModel};
pub use sdf::mask_to_sdf;
