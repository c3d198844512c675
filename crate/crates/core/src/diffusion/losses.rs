//! Reconstruction objectives for rendered observations: RGB, semantic-patch,
//! and masked depth.

use super::DiffusionError;
use crate::image::ImageBuf;
use crate::scene::Observation;

/// Mean squared error over all RGB entries of one view.
pub fn loss_rgb(rendered: &Observation, target: &Observation) -> Result<f64, DiffusionError> {
    if !rendered.rgb.same_shape(&target.rgb) {
        return Err(DiffusionError::ShapeMismatch(format!(
            "rgb {}x{} vs {}x{}",
            rendered.rgb.width, rendered.rgb.height, target.rgb.width, target.rgb.height
        )));
    }
    let n = rendered.rgb.data.len();
    if n == 0 {
        return Ok(0.0);
    }
    let sse: f64 = rendered
        .rgb
        .data
        .iter()
        .zip(&target.rgb.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sse / n as f64)
}

/// Mean over patches of `‖S(u_j) - f_j‖²` where `S` is the rendered feature
/// map and `u_j = (col, row)` the patch centers.
pub fn loss_sem(rendered_sem: &ImageBuf, centers: &[(usize, usize)], features: &[Vec<f64>]) -> Result<f64, DiffusionError> {
    if centers.is_empty() {
        return Err(DiffusionError::EmptyPatchSet);
    }
    if centers.len() != features.len() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "{} centers vs {} features",
            centers.len(),
            features.len()
        )));
    }
    let mut total = 0.0;
    for (&(col, row), f) in centers.iter().zip(features) {
        if col >= rendered_sem.width || row >= rendered_sem.height {
            return Err(DiffusionError::CenterOutOfBounds(col, row));
        }
        if f.len() != rendered_sem.channels {
            return Err(DiffusionError::ShapeMismatch(format!(
                "feature dim {} vs map channels {}",
                f.len(),
                rendered_sem.channels
            )));
        }
        total += rendered_sem
            .px(col, row)
            .iter()
            .zip(f)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / centers.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthLoss {
    pub value: f64,
    /// Set when the mask selects no pixel; `value` is then 0.
    pub no_valid_pixels: bool,
}

/// Masked ℓ1: `Σ m |d̂ - d| / Σ m`.
pub fn loss_depth(rendered: &[f64], target: &[f64], mask: &[f64]) -> Result<DepthLoss, DiffusionError> {
    if rendered.len() != target.len() || rendered.len() != mask.len() {
        return Err(DiffusionError::ShapeMismatch(format!(
            "depth {} / {} / mask {}",
            rendered.len(),
            target.len(),
            mask.len()
        )));
    }
    let msum: f64 = mask.iter().sum();
    if msum <= 0.0 {
        return Ok(DepthLoss {
            value: 0.0,
            no_valid_pixels: true,
        });
    }
    let num: f64 = rendered
        .iter()
        .zip(target)
        .zip(mask)
        .map(|((a, b), m)| m * (a - b).abs())
        .sum();
    Ok(DepthLoss {
        value: num / msum,
        no_valid_pixels: false,
    })
}
