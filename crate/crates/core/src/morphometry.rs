//! Jacobian-determinant maps and the masked distances between them.
//!
//! A map's entry at voxel v is the local volume-change ratio of a
//! transformation: 1 = no change, < 1 = contraction (atrophy),
//! > 1 = expansion. Map distances are mean squared differences over a
//! dilated brain mask, and the intensity baseline deliberately uses the same
//! functional form on min-max-normalized intensities.

use crate::error::{Error, Result};
use crate::volume::{Grid3, Mask3, Volume3};

/// Per-voxel Jacobian determinant of a displacement field.
#[derive(Debug, Clone)]
pub struct VbmMap {
    grid: Grid3,
    data: Vec<f64>,
}

impl VbmMap {
    pub fn new(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "map data length {} does not match grid ({} voxels)",
                data.len(),
                grid.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "map contains non-finite values".to_string(),
            ));
        }
        Ok(VbmMap { grid, data })
    }

    /// Used by `jacobian_map`, whose output is finite by construction.
    pub(crate) fn new_unchecked(grid: Grid3, data: Vec<f64>) -> Self {
        VbmMap { grid, data }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Voxels with determinant <= 0: folding of the source transformation.
    /// Reported, never clamped.
    pub fn non_positive_count(&self) -> usize {
        self.data.iter().filter(|&&d| d <= 0.0).count()
    }

    /// View the map as a scalar volume (for NIfTI serialization / overlay).
    pub fn to_volume(&self) -> Volume3 {
        Volume3::new(self.grid, self.data.clone()).expect("map data is finite")
    }

    pub fn from_volume(v: &Volume3) -> VbmMap {
        VbmMap {
            grid: *v.grid(),
            data: v.data().to_vec(),
        }
    }
}

/// Masked squared Euclidean distance between two maps:
/// mean over masked voxels of the squared determinant difference.
pub fn vbm_distance(ji: &VbmMap, jj: &VbmMap, mask: &Mask3) -> Result<f64> {
    ji.grid().ensure_matches(jj.grid(), "vbm_distance(ji, jj)")?;
    ji.grid().ensure_matches(mask.grid(), "vbm_distance(map, mask)")?;
    mask.ensure_nonempty()?;
    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..ji.data.len() {
        if mask.data()[i] {
            let d = ji.data[i] - jj.data[i];
            acc += d * d;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}

fn masked_min_max(v: &Volume3, mask: &Mask3) -> (f64, f64) {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..v.data().len() {
        if mask.data()[i] {
            lo = lo.min(v.data()[i]);
            hi = hi.max(v.data()[i]);
        }
    }
    (lo, hi)
}

/// Intensity baseline: min-max normalize each volume inside the mask, then
/// take the mean masked squared intensity difference.
pub fn intensity_distance(a: &Volume3, b: &Volume3, mask: &Mask3) -> Result<f64> {
    a.grid().ensure_matches(b.grid(), "intensity_distance(a, b)")?;
    a.grid()
        .ensure_matches(mask.grid(), "intensity_distance(volume, mask)")?;
    mask.ensure_nonempty()?;

    let (a_lo, a_hi) = masked_min_max(a, mask);
    let (b_lo, b_hi) = masked_min_max(b, mask);
    if a_hi <= a_lo {
        return Err(Error::DegenerateInput(
            "first volume is constant inside the mask".to_string(),
        ));
    }
    if b_hi <= b_lo {
        return Err(Error::DegenerateInput(
            "second volume is constant inside the mask".to_string(),
        ));
    }
    let a_range = a_hi - a_lo;
    let b_range = b_hi - b_lo;

    let mut acc = 0.0;
    let mut count = 0usize;
    for i in 0..a.data().len() {
        if mask.data()[i] {
            let d = (a.data()[i] - a_lo) / a_range - (b.data()[i] - b_lo) / b_range;
            acc += d * d;
            count += 1;
        }
    }
    Ok(acc / count as f64)
}
