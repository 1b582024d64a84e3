//! Symmetric multi-resolution nonlinear registration.
//!
//! A demons-style SSD optimizer run symmetrically: both inputs are warped by
//! half-fields toward a mid-way image living on the common grid. Updates are
//! derived from symmetric intensity forces, smoothed (fluid-like), composed
//! into the half-fields, and the accumulated fields smoothed again
//! (diffusion-like). The returned forward/backward fields are built from the
//! half-fields and their fixed-point inverses, which makes the pair
//! inverse-consistent by construction up to the solver tolerance.
//!
//! Swapping the two inputs exactly swaps the returned fields: every step of
//! the update is antisymmetric in the intensity difference.

use crate::error::{Error, Result};
use crate::field::{compose, invert, jacobian_map, warp, DisplacementField3};
use crate::volume::{Grid3, Volume3};

/// Hyperparameters of the symmetric demons solver.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RegistrationParams {
    /// Multi-resolution pyramid depth; level 0 is full resolution.
    pub levels: usize,
    /// Iteration budget per level, coarsest first. Length must equal `levels`.
    pub iters_per_level: Vec<usize>,
    /// Gaussian sigma (voxels) applied to each force update.
    pub update_smoothing_sigma: f64,
    /// Gaussian sigma (voxels) applied to the accumulated half-fields.
    pub field_smoothing_sigma: f64,
    /// Step length scale in (0, 2].
    pub step_scale: f64,
    /// Stop a level when the relative SSD decrease falls below this.
    pub convergence_tol: f64,
}

impl Default for RegistrationParams {
    fn default() -> Self {
        RegistrationParams {
            levels: 3,
            iters_per_level: vec![100, 60, 30],
            update_smoothing_sigma: 1.0,
            field_smoothing_sigma: 1.5,
            step_scale: 1.0,
            convergence_tol: 1e-4,
        }
    }
}

impl RegistrationParams {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1 {
            return Err(Error::InvalidArgument("levels must be >= 1".into()));
        }
        if self.iters_per_level.len() != self.levels {
            return Err(Error::InvalidArgument(format!(
                "iters_per_level has {} entries for {} levels",
                self.iters_per_level.len(),
                self.levels
            )));
        }
        if self.iters_per_level.iter().any(|&i| i < 1) {
            return Err(Error::InvalidArgument(
                "iters_per_level entries must be >= 1".into(),
            ));
        }
        for (name, s) in [
            ("update_smoothing_sigma", self.update_smoothing_sigma),
            ("field_smoothing_sigma", self.field_smoothing_sigma),
        ] {
            if !s.is_finite() || s < 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "{name} must be finite and >= 0, got {s}"
                )));
            }
        }
        if !(self.step_scale > 0.0 && self.step_scale <= 2.0) {
            return Err(Error::InvalidArgument(format!(
                "step_scale must be in (0, 2], got {}",
                self.step_scale
            )));
        }
        if !self.convergence_tol.is_finite() || self.convergence_tol < 0.0 {
            return Err(Error::InvalidArgument(
                "convergence_tol must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Registration output: inverse-consistent field pair plus run metadata.
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Maps the first input onto the second: `warp(a, forward) ≈ b`.
    pub forward: DisplacementField3,
    /// Maps the second input onto the first: `warp(b, backward) ≈ a`.
    pub backward: DisplacementField3,
    /// Mean squared intensity difference at the mid-way space before any
    /// optimization (full resolution, normalized intensities).
    pub initial_ssd: f64,
    /// Mean squared intensity difference after the final level.
    pub final_ssd: f64,
    /// Iterations actually run per level, coarsest first.
    pub iterations_per_level: Vec<usize>,
    /// Accepted SSD trace per level, coarsest first; entry 0 is the SSD
    /// before the first update of that level.
    pub ssd_history: Vec<Vec<f64>>,
    /// Voxels with non-positive Jacobian determinant across both returned
    /// fields (0 means no folding).
    pub folding_voxels: usize,
}

// ---------------------------------------------------------------------------
// smoothing / pyramid helpers
// ---------------------------------------------------------------------------

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let radius = (3.0 * sigma).ceil() as usize;
    let mut k = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        k.push((-0.5 * d * d / (sigma * sigma)).exp());
    }
    let sum: f64 = k.iter().sum();
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable Gaussian smoothing of a scalar lane. The kernel is renormalized
/// where it overhangs the grid, so constant data stays constant everywhere.
fn smooth_scalar(data: &[f64], grid: &Grid3, kernel: &[f64]) -> Vec<f64> {
    if kernel.len() == 1 {
        return data.to_vec();
    }
    let (nx, ny, nz) = grid.dims;
    let radius = kernel.len() / 2;
    let mut cur = data.to_vec();
    let mut next = vec![0.0; data.len()];

    for axis in 0..3 {
        let n = [nx, ny, nz][axis];
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let pos = [x, y, z][axis];
                    let mut acc = 0.0;
                    let mut wsum = 0.0;
                    let lo = pos.saturating_sub(radius);
                    let hi = (pos + radius).min(n - 1);
                    for t in lo..=hi {
                        let w = kernel[t + radius - pos];
                        let (sx, sy, sz) = match axis {
                            0 => (t, y, z),
                            1 => (x, t, z),
                            _ => (x, y, t),
                        };
                        acc += w * cur[sx + nx * (sy + ny * sz)];
                        wsum += w;
                    }
                    next[x + nx * (y + ny * z)] = acc / wsum;
                }
            }
        }
        std::mem::swap(&mut cur, &mut next);
    }
    cur
}

pub(crate) fn smooth_field(f: &DisplacementField3, sigma: f64) -> DisplacementField3 {
    if sigma <= 0.0 {
        return f.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let grid = *f.grid();
    let n = grid.len();
    let mut out = vec![0.0; 3 * n];
    let mut lane = vec![0.0; n];
    for c in 0..3 {
        for i in 0..n {
            lane[i] = f.data()[3 * i + c];
        }
        let smoothed = smooth_scalar(&lane, &grid, &kernel);
        for i in 0..n {
            out[3 * i + c] = smoothed[i];
        }
    }
    DisplacementField3::new(grid, out).expect("smoothing preserves finiteness")
}

/// 2×2×2 block-average downsampling; odd trailing samples clamp.
fn downsample2(v: &Volume3) -> Volume3 {
    let (nx, ny, nz) = v.grid().dims;
    let (mx, my, mz) = (nx.div_ceil(2), ny.div_ceil(2), nz.div_ceil(2));
    let grid = Grid3::new(
        (mx, my, mz),
        (
            v.grid().spacing.0 * 2.0,
            v.grid().spacing.1 * 2.0,
            v.grid().spacing.2 * 2.0,
        ),
    )
    .expect("downsampled grid stays valid");
    let mut out = Vec::with_capacity(grid.len());
    for z in 0..mz {
        for y in 0..my {
            for x in 0..mx {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let sx = (2 * x + dx).min(nx - 1);
                            let sy = (2 * y + dy).min(ny - 1);
                            let sz = (2 * z + dz).min(nz - 1);
                            acc += v.data()[sx + nx * (sy + ny * sz)];
                        }
                    }
                }
                out.push(acc / 8.0);
            }
        }
    }
    Volume3::new(grid, out).expect("averaging preserves finiteness")
}

/// Upsample a half-field one pyramid step: trilinear interpolation at the
/// block-centered coarse coordinate, displacement doubled.
fn upsample_field(f: &DisplacementField3, fine: Grid3) -> DisplacementField3 {
    let coarse = f.grid();
    let (cnx, cny, cnz) = coarse.dims;
    let (nx, ny, nz) = fine.dims;
    let mut out = vec![0.0; 3 * fine.len()];
    let clamp_sample = |p: [f64; 3]| -> [f64; 3] {
        let x = p[0].clamp(0.0, (cnx - 1) as f64);
        let y = p[1].clamp(0.0, (cny - 1) as f64);
        let z = p[2].clamp(0.0, (cnz - 1) as f64);
        f.sample_zero_ext([x, y, z])
    };
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let u = clamp_sample([
                    (x as f64 - 0.5) / 2.0,
                    (y as f64 - 0.5) / 2.0,
                    (z as f64 - 0.5) / 2.0,
                ]);
                out[3 * i] = 2.0 * u[0];
                out[3 * i + 1] = 2.0 * u[1];
                out[3 * i + 2] = 2.0 * u[2];
                i += 1;
            }
        }
    }
    DisplacementField3::new(fine, out).expect("upsampling preserves finiteness")
}

/// Force the outermost voxel layers of a field smoothly to zero so the
/// zero-extension used by composition and inversion stays continuous at the
/// grid faces. The ramp width shrinks with the grid so coarse pyramid
/// levels keep their interior.
fn apply_boundary_taper(f: &mut [f64], grid: &Grid3) {
    const RAMP: [f64; 3] = [0.0, 0.4, 0.8];
    let (nx, ny, nz) = grid.dims;
    let min_dim = nx.min(ny).min(nz);
    let width = (min_dim / 8).clamp(1, RAMP.len());
    let w = |p: usize, n: usize| -> f64 {
        let edge = p.min(n - 1 - p);
        if edge < width {
            RAMP[edge]
        } else {
            1.0
        }
    };
    let mut i = 0usize;
    for z in 0..nz {
        let wz = w(z, nz);
        for y in 0..ny {
            let wyz = w(y, ny) * wz;
            for x in 0..nx {
                let weight = w(x, nx) * wyz;
                if weight != 1.0 {
                    f[3 * i] *= weight;
                    f[3 * i + 1] *= weight;
                    f[3 * i + 2] *= weight;
                }
                i += 1;
            }
        }
    }
}

/// Central-difference gradient (one-sided at the boundary), interleaved.
fn gradient_interleaved(data: &[f64], grid: &Grid3) -> Vec<f64> {
    let (nx, ny, nz) = grid.dims;
    let idx = |x: usize, y: usize, z: usize| x + nx * (y + ny * z);
    let mut out = vec![0.0; 3 * grid.len()];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gx = if x == 0 {
                    data[idx(1, y, z)] - data[idx(0, y, z)]
                } else if x == nx - 1 {
                    data[idx(nx - 1, y, z)] - data[idx(nx - 2, y, z)]
                } else {
                    (data[idx(x + 1, y, z)] - data[idx(x - 1, y, z)]) * 0.5
                };
                let gy = if y == 0 {
                    data[idx(x, 1, z)] - data[idx(x, 0, z)]
                } else if y == ny - 1 {
                    data[idx(x, ny - 1, z)] - data[idx(x, ny - 2, z)]
                } else {
                    (data[idx(x, y + 1, z)] - data[idx(x, y - 1, z)]) * 0.5
                };
                let gz = if z == 0 {
                    data[idx(x, y, 1)] - data[idx(x, y, 0)]
                } else if z == nz - 1 {
                    data[idx(x, y, nz - 1)] - data[idx(x, y, nz - 2)]
                } else {
                    (data[idx(x, y, z + 1)] - data[idx(x, y, z - 1)]) * 0.5
                };
                out[3 * i] = gx;
                out[3 * i + 1] = gy;
                out[3 * i + 2] = gz;
                i += 1;
            }
        }
    }
    out
}

fn mean_squared_difference(a: &Volume3, b: &Volume3) -> f64 {
    let mut acc = 0.0;
    for (&p, &q) in a.data().iter().zip(b.data()) {
        let d = p - q;
        acc += d * d;
    }
    acc / a.data().len() as f64
}

/// Min-max normalize a volume to [0, 1]; constant input is degenerate.
fn normalize_unit(v: &Volume3, which: &str) -> Result<Volume3> {
    let (lo, hi) = v.min_max();
    if hi <= lo {
        return Err(Error::DegenerateInput(format!(
            "{which} volume is constant (value {lo}); nothing to register"
        )));
    }
    let range = hi - lo;
    Volume3::new(
        *v.grid(),
        v.data().iter().map(|&x| (x - lo) / range).collect(),
    )
}

// ---------------------------------------------------------------------------
// the solver
// ---------------------------------------------------------------------------

const INVERT_ITERS: usize = 50;
const INVERT_TOL: f64 = 1e-6;
const MAX_STEP_HALVINGS: usize = 4;

/// Register `a` and `b` symmetrically, returning the inverse-consistent
/// forward (a→b) and backward (b→a) displacement fields.
///
/// Both volumes are min-max normalized internally. The accepted SSD is
/// non-increasing within each level; updates that would raise it trigger
/// step halving and, if that fails, end the level.
pub fn register_symmetric(
    a: &Volume3,
    b: &Volume3,
    params: &RegistrationParams,
) -> Result<RegistrationResult> {
    params.validate()?;
    a.grid().ensure_matches(b.grid(), "register_symmetric(a, b)")?;

    let a0 = normalize_unit(a, "first")?;
    let b0 = normalize_unit(b, "second")?;
    let initial_ssd = mean_squared_difference(&a0, &b0);

    // Pyramids, finest first. Clamp depth so the coarsest level keeps at
    // least 4 voxels per axis.
    let min_dim = [a0.grid().dims.0, a0.grid().dims.1, a0.grid().dims.2]
        .into_iter()
        .min()
        .unwrap();
    let mut max_levels = 1;
    let mut d = min_dim;
    while d / 2 >= 4 && max_levels < params.levels {
        d /= 2;
        max_levels += 1;
    }
    let levels = max_levels;
    let iters_schedule = &params.iters_per_level[params.levels - levels..];

    let mut pyr_a = vec![a0];
    let mut pyr_b = vec![b0];
    for _ in 1..levels {
        pyr_a.push(downsample2(pyr_a.last().unwrap()));
        pyr_b.push(downsample2(pyr_b.last().unwrap()));
    }

    let coarsest_grid = *pyr_a.last().unwrap().grid();
    let mut h_a = DisplacementField3::zeros(coarsest_grid);
    let mut h_b = DisplacementField3::zeros(coarsest_grid);

    let mut ssd_history = Vec::with_capacity(levels);
    let mut iterations_per_level = Vec::with_capacity(levels);
    let mut final_ssd = initial_ssd;

    for level in (0..levels).rev() {
        let a_l = &pyr_a[level];
        let b_l = &pyr_b[level];
        let grid_l = *a_l.grid();
        if *h_a.grid() != grid_l {
            h_a = upsample_field(&h_a, grid_l);
            h_b = upsample_field(&h_b, grid_l);
        }

        let mut warped_a = warp(a_l, &h_a)?;
        let mut warped_b = warp(b_l, &h_b)?;
        let mut ssd = mean_squared_difference(&warped_a, &warped_b);
        let level_initial = ssd;
        let mut trace = vec![ssd];
        let mut step = params.step_scale;
        let mut iters_done = 0usize;
        // Line-search tolerance: re-smoothing the accumulated field can
        // nudge the SSD up by a hair near equilibrium; such steps are still
        // accepted so diffusion keeps spreading displacement through flat
        // regions.
        let slack = params.convergence_tol * level_initial.max(f64::MIN_POSITIVE);
        let mut stalled = 0usize;

        let budget = iters_schedule[levels - 1 - level];
        'iter: for _ in 0..budget {
            let g_a = gradient_interleaved(warped_a.data(), &grid_l);
            let g_b = gradient_interleaved(warped_b.data(), &grid_l);

            // Symmetric demons force: antisymmetric under input swap.
            let n = grid_l.len();
            let mut u = vec![0.0; 3 * n];
            for i in 0..n {
                let d = warped_a.data()[i] - warped_b.data()[i];
                let jx = 0.5 * (g_a[3 * i] + g_b[3 * i]);
                let jy = 0.5 * (g_a[3 * i + 1] + g_b[3 * i + 1]);
                let jz = 0.5 * (g_a[3 * i + 2] + g_b[3 * i + 2]);
                let denom = jx * jx + jy * jy + jz * jz + d * d;
                if denom > 1e-12 {
                    let s = d / denom;
                    u[3 * i] = s * jx;
                    u[3 * i + 1] = s * jy;
                    u[3 * i + 2] = s * jz;
                }
            }
            let u = smooth_field(
                &DisplacementField3::new(grid_l, u)?,
                params.update_smoothing_sigma,
            );

            let mut accepted = false;
            for _ in 0..=MAX_STEP_HALVINGS {
                let half = 0.5 * step;
                let delta_a = DisplacementField3::new(
                    grid_l,
                    u.data().iter().map(|&v| -half * v).collect(),
                )?;
                let delta_b = DisplacementField3::new(
                    grid_l,
                    u.data().iter().map(|&v| half * v).collect(),
                )?;
                let cand_a = smooth_field(&compose(&h_a, &delta_a)?, params.field_smoothing_sigma);
                let cand_b = smooth_field(&compose(&h_b, &delta_b)?, params.field_smoothing_sigma);
                let wa = warp(a_l, &cand_a)?;
                let wb = warp(b_l, &cand_b)?;
                let cand_ssd = mean_squared_difference(&wa, &wb);
                if cand_ssd <= ssd + slack {
                    let improvement = ssd - cand_ssd;
                    h_a = cand_a;
                    h_b = cand_b;
                    warped_a = wa;
                    warped_b = wb;
                    ssd = cand_ssd;
                    step = (step * 1.2).min(params.step_scale);
                    trace.push(ssd);
                    iters_done += 1;
                    accepted = true;
                    if improvement <= slack {
                        stalled += 1;
                        if stalled >= 3 {
                            break 'iter; // converged at this level
                        }
                    } else {
                        stalled = 0;
                    }
                    break;
                }
                step *= 0.5;
            }
            if !accepted {
                break; // no step length improves the match at this level
            }
        }

        ssd_history.push(trace);
        iterations_per_level.push(iters_done);
        final_ssd = ssd;
    }

    // Decay the final half-fields to zero at the grid faces: repeated
    // smoothing leaks small displacements outward, and the zero-extension
    // used by composition and inversion must stay continuous there or the
    // returned fields pick up spurious boundary folding.
    apply_boundary_taper(h_a.data_mut(), a.grid());
    apply_boundary_taper(h_b.data_mut(), a.grid());

    let h_b_inv = invert(&h_b, INVERT_ITERS, INVERT_TOL);
    let h_a_inv = invert(&h_a, INVERT_ITERS, INVERT_TOL);
    let forward = compose(&h_a, &h_b_inv.field)?;
    let backward = compose(&h_b, &h_a_inv.field)?;

    let folding_voxels =
        jacobian_map(&forward).non_positive_count() + jacobian_map(&backward).non_positive_count();

    Ok(RegistrationResult {
        forward,
        backward,
        initial_ssd,
        final_ssd,
        iterations_per_level,
        ssd_history,
        folding_voxels,
    })
}

/// Mean residual displacement magnitude of `compose(forward, backward)` over
/// the grid; 0 for perfectly inverse-consistent pairs.
pub fn check_inverse_consistency(
    forward: &DisplacementField3,
    backward: &DisplacementField3,
) -> Result<f64> {
    forward
        .grid()
        .ensure_matches(backward.grid(), "check_inverse_consistency")?;
    Ok(compose(forward, backward)?.mean_magnitude())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Small spherical blob with a soft edge.
    fn sphere_volume(g: Grid3, center: [f64; 3], radius: f64) -> Volume3 {
        let (nx, ny, nz) = g.dims;
        let mut data = Vec::with_capacity(g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let r = ((x as f64 - center[0]).powi(2)
                        + (y as f64 - center[1]).powi(2)
                        + (z as f64 - center[2]).powi(2))
                    .sqrt();
                    // smooth edge of ~1.5 voxels
                    let v = 1.0 / (1.0 + ((r - radius) / 0.8).exp());
                    data.push(v);
                }
            }
        }
        Volume3::new(g, data).unwrap()
    }

    fn quick_params() -> RegistrationParams {
        RegistrationParams {
            levels: 3,
            iters_per_level: vec![40, 25, 15],
            ..Default::default()
        }
    }

    #[test]
    fn params_validation_catches_bad_values() {
        let mut p = RegistrationParams::default();
        p.iters_per_level = vec![10, 10];
        assert!(p.validate().is_err());
        let mut p = RegistrationParams::default();
        p.step_scale = 0.0;
        assert!(p.validate().is_err());
        let mut p = RegistrationParams::default();
        p.step_scale = 2.5;
        assert!(p.validate().is_err());
    }

    #[test]
    fn self_registration_yields_zero_field() {
        let g = Grid3::isotropic(24, 1.0).unwrap();
        let v = sphere_volume(g, [11.5, 11.5, 11.5], 7.0);
        let r = register_symmetric(&v, &v, &quick_params()).unwrap();
        assert!(r.forward.mean_magnitude() < 0.05);
        assert!(r.backward.mean_magnitude() < 0.05);
        assert_eq!(r.final_ssd, 0.0);
    }

    #[test]
    fn constant_volume_is_degenerate() {
        let g = Grid3::isotropic(16, 1.0).unwrap();
        let flat = Volume3::constant(g, 1.0).unwrap();
        let v = sphere_volume(g, [7.5, 7.5, 7.5], 4.0);
        assert!(matches!(
            register_symmetric(&flat, &v, &quick_params()),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn grid_mismatch_is_rejected() {
        let g1 = Grid3::isotropic(16, 1.0).unwrap();
        let g2 = Grid3::isotropic(18, 1.0).unwrap();
        let v1 = sphere_volume(g1, [7.5, 7.5, 7.5], 4.0);
        let v2 = sphere_volume(g2, [8.5, 8.5, 8.5], 4.0);
        assert!(matches!(
            register_symmetric(&v1, &v2, &quick_params()),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn recovers_translation_inside_object() {
        let g = Grid3::isotropic(32, 1.0).unwrap();
        let a = sphere_volume(g, [15.5, 15.5, 15.5], 9.0);
        let shift = DisplacementField3::constant(g, [2.0, 0.0, 0.0]).unwrap();
        let b = warp(&a, &shift).unwrap();

        let r = register_symmetric(&a, &b, &quick_params()).unwrap();
        // mean error of the recovered displacement against (2,0,0), inside
        // the sphere
        let mut err = 0.0;
        let mut n = 0usize;
        for z in 0..32 {
            for y in 0..32 {
                for x in 0..32 {
                    let rr = ((x as f64 - 15.5).powi(2)
                        + (y as f64 - 15.5).powi(2)
                        + (z as f64 - 15.5).powi(2))
                    .sqrt();
                    if rr < 8.0 {
                        let u = r.forward.vector_at(g.index(x, y, z));
                        err += ((u[0] - 2.0).powi(2) + u[1].powi(2) + u[2].powi(2)).sqrt();
                        n += 1;
                    }
                }
            }
        }
        let mean_err = err / n as f64;
        assert!(mean_err < 0.25, "mean displacement error {mean_err}");
        assert!(r.final_ssd < r.initial_ssd);
    }

    #[test]
    fn ssd_trace_is_monotone_within_levels() {
        let g = Grid3::isotropic(24, 1.0).unwrap();
        let a = sphere_volume(g, [11.5, 11.5, 11.5], 6.0);
        let shift = DisplacementField3::constant(g, [1.5, 0.5, 0.0]).unwrap();
        let b = warp(&a, &shift).unwrap();
        let r = register_symmetric(&a, &b, &quick_params()).unwrap();
        let tol = quick_params().convergence_tol;
        for trace in &r.ssd_history {
            let slack = tol * trace[0].max(f64::MIN_POSITIVE);
            for w in trace.windows(2) {
                assert!(
                    w[1] <= w[0] + slack,
                    "SSD increased beyond the line-search tolerance: {w:?}"
                );
            }
            assert!(trace.last().unwrap() <= &trace[0]);
        }
        assert!(r.final_ssd <= r.initial_ssd);
    }

    #[test]
    fn swapping_inputs_swaps_the_fields_bitwise() {
        let g = Grid3::isotropic(20, 1.0).unwrap();
        let a = sphere_volume(g, [9.0, 9.5, 9.5], 5.0);
        let shift = DisplacementField3::constant(g, [1.0, 0.0, 0.5]).unwrap();
        let b = warp(&a, &shift).unwrap();

        let p = RegistrationParams {
            levels: 2,
            iters_per_level: vec![15, 10],
            ..Default::default()
        };
        let ab = register_symmetric(&a, &b, &p).unwrap();
        let ba = register_symmetric(&b, &a, &p).unwrap();
        assert_eq!(ab.forward.data(), ba.backward.data());
        assert_eq!(ab.backward.data(), ba.forward.data());
        assert_eq!(ab.final_ssd, ba.final_ssd);
    }

    #[test]
    fn inverse_consistency_trivial_cases() {
        let g = Grid3::isotropic(12, 1.0).unwrap();
        let z = DisplacementField3::zeros(g);
        assert_eq!(check_inverse_consistency(&z, &z).unwrap(), 0.0);

        let t = DisplacementField3::constant(g, [1.0, 0.0, 0.0]).unwrap();
        let tinv = DisplacementField3::constant(g, [-1.0, 0.0, 0.0]).unwrap();
        // exact inverses away from the zero-extended boundary band
        let res = compose(&t, &tinv).unwrap();
        for z in 0..12 {
            for y in 0..12 {
                for x in 2..10 {
                    let v = res.vector_at(g.index(x, y, z));
                    assert!(v[0].abs() < 1e-12 && v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn registered_pair_is_inverse_consistent() {
        let g = Grid3::isotropic(24, 1.0).unwrap();
        let a = sphere_volume(g, [11.5, 11.5, 11.5], 6.5);
        let shift = DisplacementField3::constant(g, [1.5, 0.0, 0.0]).unwrap();
        let b = warp(&a, &shift).unwrap();
        let r = register_symmetric(&a, &b, &quick_params()).unwrap();
        let resid = check_inverse_consistency(&r.forward, &r.backward).unwrap();
        assert!(resid < 0.2, "inverse-consistency residual {resid}");
        assert_eq!(r.folding_voxels, 0);
    }
}
