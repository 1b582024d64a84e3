//! 3D scalar volumes and binary masks on a regular voxel grid.
//!
//! Data is stored row-major with x fastest: `index = x + nx*(y + ny*z)`,
//! matching the on-disk NIfTI layout. Image sampling clamps out-of-grid
//! coordinates to the boundary voxel layer so warps that slightly exceed the
//! grid do not introduce dark halos.

use crate::error::{Error, Result};

/// A regular 3-D voxel grid: voxel counts and physical spacing in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Grid3 {
    pub dims: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
}

impl Grid3 {
    pub fn new(dims: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Self> {
        if dims.0 < 2 || dims.1 < 2 || dims.2 < 2 {
            return Err(Error::InvalidArgument(format!(
                "grid dims must all be >= 2, got {:?}",
                dims
            )));
        }
        for s in [spacing.0, spacing.1, spacing.2] {
            if !s.is_finite() || s <= 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "grid spacing must be finite and > 0, got {:?}",
                    spacing
                )));
            }
        }
        Ok(Grid3 { dims, spacing })
    }

    /// Cubic grid with isotropic spacing.
    pub fn isotropic(n: usize, spacing: f64) -> Result<Self> {
        Grid3::new((n, n, n), (spacing, spacing, spacing))
    }

    /// Number of voxels.
    pub fn len(&self) -> usize {
        self.dims.0 * self.dims.1 * self.dims.2
    }

    pub fn is_empty(&self) -> bool {
        false // dims are >= 2 by construction
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims.0 * (y + self.dims.1 * z)
    }

    /// Hard error if `other` is not the same grid. `what` names the operands.
    pub fn ensure_matches(&self, other: &Grid3, what: &str) -> Result<()> {
        if self != other {
            return Err(Error::GridMismatch(format!(
                "{what}: {:?} @ {:?} mm vs {:?} @ {:?} mm",
                self.dims, self.spacing, other.dims, other.spacing
            )));
        }
        Ok(())
    }
}

/// A 3-D scalar image. All values are finite after construction.
#[derive(Debug, Clone)]
pub struct Volume3 {
    grid: Grid3,
    data: Vec<f64>,
    /// Raw qform/sform header bytes carried opaquely through file round-trips.
    pub(crate) nifti_meta: Option<crate::nifti::SpatialMeta>,
}

impl Volume3 {
    pub fn new(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "volume data length {} does not match grid {:?} ({} voxels)",
                data.len(),
                grid.dims,
                grid.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "volume contains non-finite values".to_string(),
            ));
        }
        Ok(Volume3 {
            grid,
            data,
            nifti_meta: None,
        })
    }

    /// Volume filled with a constant value.
    pub fn constant(grid: Grid3, value: f64) -> Result<Self> {
        Volume3::new(grid, vec![value; grid.len()])
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Minimum and maximum value over the whole volume.
    pub fn min_max(&self) -> (f64, f64) {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Trilinear interpolation at a continuous voxel coordinate.
    ///
    /// Coordinates outside the grid are clamped to the boundary voxel layer;
    /// values at exact grid points are reproduced bit-exactly.
    pub fn sample_trilinear(&self, p: [f64; 3]) -> Result<f64> {
        if !p.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite sample coordinate {:?}",
                p
            )));
        }
        Ok(sample_clamped(&self.data, &self.grid, p[0], p[1], p[2]))
    }
}

/// Trilinear sampling with boundary clamping. Caller guarantees finite
/// coordinates.
#[inline]
pub(crate) fn sample_clamped(data: &[f64], grid: &Grid3, x: f64, y: f64, z: f64) -> f64 {
    let (nx, ny, nz) = grid.dims;
    let x = x.clamp(0.0, (nx - 1) as f64);
    let y = y.clamp(0.0, (ny - 1) as f64);
    let z = z.clamp(0.0, (nz - 1) as f64);

    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let z0 = z.floor() as usize;
    let x1 = (x0 + 1).min(nx - 1);
    let y1 = (y0 + 1).min(ny - 1);
    let z1 = (z0 + 1).min(nz - 1);

    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let fz = z - z0 as f64;

    let idx = |i: usize, j: usize, k: usize| i + nx * (j + ny * k);

    let c000 = data[idx(x0, y0, z0)];
    let c100 = data[idx(x1, y0, z0)];
    let c010 = data[idx(x0, y1, z0)];
    let c110 = data[idx(x1, y1, z0)];
    let c001 = data[idx(x0, y0, z1)];
    let c101 = data[idx(x1, y0, z1)];
    let c011 = data[idx(x0, y1, z1)];
    let c111 = data[idx(x1, y1, z1)];

    let c00 = c000 * (1.0 - fx) + c100 * fx;
    let c10 = c010 * (1.0 - fx) + c110 * fx;
    let c01 = c001 * (1.0 - fx) + c101 * fx;
    let c11 = c011 * (1.0 - fx) + c111 * fx;

    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;

    c0 * (1.0 - fz) + c1 * fz
}

/// A binary voxel mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    grid: Grid3,
    data: Vec<bool>,
}

impl Mask3 {
    pub fn new(grid: Grid3, data: Vec<bool>) -> Result<Self> {
        if data.len() != grid.len() {
            return Err(Error::InvalidArgument(format!(
                "mask data length {} does not match grid ({} voxels)",
                data.len(),
                grid.len()
            )));
        }
        Ok(Mask3 { grid, data })
    }

    pub fn empty(grid: Grid3) -> Self {
        Mask3 {
            grid,
            data: vec![false; grid.len()],
        }
    }

    /// Mask of voxels where `v > threshold`.
    pub fn from_threshold(v: &Volume3, threshold: f64) -> Self {
        Mask3 {
            grid: *v.grid(),
            data: v.data().iter().map(|&x| x > threshold).collect(),
        }
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, z: usize) -> bool {
        self.data[self.grid.index(x, y, z)]
    }

    /// Number of set voxels.
    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    /// Error unless the mask covers at least one voxel.
    pub fn ensure_nonempty(&self) -> Result<()> {
        if self.count() == 0 {
            return Err(Error::InvalidArgument(
                "mask selects no voxels".to_string(),
            ));
        }
        Ok(())
    }

    /// Voxel-wise union of two masks on the same grid.
    pub fn union(&self, other: &Mask3) -> Result<Mask3> {
        self.grid.ensure_matches(&other.grid, "mask union")?;
        Ok(Mask3 {
            grid: self.grid,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| a || b)
                .collect(),
        })
    }

    /// Morphological dilation with a Euclidean ball of the given radius in
    /// voxels. Radius 0 returns the mask unchanged.
    pub fn dilate(&self, radius_voxels: usize) -> Mask3 {
        if radius_voxels == 0 {
            return self.clone();
        }
        let r = radius_voxels as i64;
        let r2 = r * r;
        let mut ball = Vec::new();
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    if dx * dx + dy * dy + dz * dz <= r2 {
                        ball.push((dx, dy, dz));
                    }
                }
            }
        }

        let (nx, ny, nz) = self.grid.dims;
        let mut out = vec![false; self.data.len()];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    if !self.data[self.grid.index(x, y, z)] {
                        continue;
                    }
                    for &(dx, dy, dz) in &ball {
                        let xi = x as i64 + dx;
                        let yi = y as i64 + dy;
                        let zi = z as i64 + dz;
                        if xi >= 0
                            && xi < nx as i64
                            && yi >= 0
                            && yi < ny as i64
                            && zi >= 0
                            && zi < nz as i64
                        {
                            out[self.grid.index(xi as usize, yi as usize, zi as usize)] = true;
                        }
                    }
                }
            }
        }
        Mask3 {
            grid: self.grid,
            data: out,
        }
    }
}
