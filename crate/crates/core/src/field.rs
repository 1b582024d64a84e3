//! Dense displacement fields: warping, composition, inversion and the
//! per-voxel Jacobian determinant.
//!
//! Fields follow the pull-back convention throughout: the output voxel at
//! `x` takes its value from the source image at `x + U(x)`. Displacements
//! are stored in voxel units, interleaved per voxel `(u1, u2, u3)`.

use crate::error::{Error, Result};
use crate::morphometry::VbmMap;
use crate::volume::{sample_clamped, Grid3, Volume3};

/// A per-voxel 3-vector displacement field in voxel units.
#[derive(Debug, Clone)]
pub struct DisplacementField3 {
    grid: Grid3,
    data: Vec<f64>,
}

impl DisplacementField3 {
    pub fn new(grid: Grid3, data: Vec<f64>) -> Result<Self> {
        if data.len() != 3 * grid.len() {
            return Err(Error::InvalidArgument(format!(
                "field data length {} does not match grid ({} voxels × 3)",
                data.len(),
                grid.len()
            )));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidArgument(
                "field contains non-finite components".to_string(),
            ));
        }
        Ok(DisplacementField3 { grid, data })
    }

    /// The zero (identity) field.
    pub fn zeros(grid: Grid3) -> Self {
        DisplacementField3 {
            grid,
            data: vec![0.0; 3 * grid.len()],
        }
    }

    /// A constant translation field.
    pub fn constant(grid: Grid3, u: [f64; 3]) -> Result<Self> {
        let mut data = Vec::with_capacity(3 * grid.len());
        for _ in 0..grid.len() {
            data.extend_from_slice(&u);
        }
        DisplacementField3::new(grid, data)
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn vector_at(&self, voxel: usize) -> [f64; 3] {
        [
            self.data[3 * voxel],
            self.data[3 * voxel + 1],
            self.data[3 * voxel + 2],
        ]
    }

    /// Trilinear field-value interpolation with zero extension outside the
    /// grid (fields decay to zero at the volume boundary).
    pub fn sample_zero_ext(&self, p: [f64; 3]) -> [f64; 3] {
        let (nx, ny, nz) = self.grid.dims;
        let x0f = p[0].floor();
        let y0f = p[1].floor();
        let z0f = p[2].floor();
        let fx = p[0] - x0f;
        let fy = p[1] - y0f;
        let fz = p[2] - z0f;
        let x0 = x0f as i64;
        let y0 = y0f as i64;
        let z0 = z0f as i64;

        let mut acc = [0.0f64; 3];
        for dz in 0..2i64 {
            let wz = if dz == 0 { 1.0 - fz } else { fz };
            if wz == 0.0 {
                continue;
            }
            let z = z0 + dz;
            if z < 0 || z >= nz as i64 {
                continue;
            }
            for dy in 0..2i64 {
                let wy = if dy == 0 { 1.0 - fy } else { fy };
                if wy == 0.0 {
                    continue;
                }
                let y = y0 + dy;
                if y < 0 || y >= ny as i64 {
                    continue;
                }
                for dx in 0..2i64 {
                    let wx = if dx == 0 { 1.0 - fx } else { fx };
                    if wx == 0.0 {
                        continue;
                    }
                    let x = x0 + dx;
                    if x < 0 || x >= nx as i64 {
                        continue;
                    }
                    let w = wx * wy * wz;
                    let i = 3 * (x as usize + nx * (y as usize + ny * z as usize));
                    acc[0] += w * self.data[i];
                    acc[1] += w * self.data[i + 1];
                    acc[2] += w * self.data[i + 2];
                }
            }
        }
        acc
    }

    /// Mean Euclidean displacement magnitude over the grid.
    pub fn mean_magnitude(&self) -> f64 {
        let n = self.grid.len();
        let mut acc = 0.0;
        for i in 0..n {
            let v = self.vector_at(i);
            acc += (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
        }
        acc / n as f64
    }
}

/// Warp a volume with a displacement field (pull-back): the output at `x`
/// is `v` sampled at `x + U(x)`, with boundary clamping.
pub fn warp(v: &Volume3, f: &DisplacementField3) -> Result<Volume3> {
    v.grid().ensure_matches(f.grid(), "warp(volume, field)")?;
    let grid = *v.grid();
    let (nx, ny, nz) = grid.dims;
    let data = v.data();
    let mut out = vec![0.0; grid.len()];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let u = f.vector_at(i);
                out[i] = sample_clamped(
                    data,
                    &grid,
                    x as f64 + u[0],
                    y as f64 + u[1],
                    z as f64 + u[2],
                );
                i += 1;
            }
        }
    }
    Volume3::new(grid, out)
}

/// Per-voxel determinant of `I + ∂U/∂x` (row i = gradient of component i).
///
/// Gradients are taken with respect to the voxel index: central differences
/// on interior voxels, one-sided at the boundary. Non-positive determinants
/// are kept as-is; callers count them to detect folding.
pub fn jacobian_map(f: &DisplacementField3) -> VbmMap {
    let grid = *f.grid();
    let (nx, ny, nz) = grid.dims;
    let data = f.data();
    let mut out = vec![0.0; grid.len()];

    // d/d(axis) of component c at voxel (x,y,z)
    let deriv = |c: usize, x: usize, y: usize, z: usize, axis: usize| -> f64 {
        let (n, pos) = match axis {
            0 => (nx, x),
            1 => (ny, y),
            _ => (nz, z),
        };
        let at = |x: usize, y: usize, z: usize| data[3 * (x + nx * (y + ny * z)) + c];
        let shifted = |p: usize| match axis {
            0 => at(p, y, z),
            1 => at(x, p, z),
            _ => at(x, y, p),
        };
        if pos == 0 {
            shifted(1) - shifted(0)
        } else if pos == n - 1 {
            shifted(n - 1) - shifted(n - 2)
        } else {
            (shifted(pos + 1) - shifted(pos - 1)) * 0.5
        }
    };

    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let mut m = [[0.0f64; 3]; 3];
                for (c, row) in m.iter_mut().enumerate() {
                    for (axis, g) in row.iter_mut().enumerate() {
                        *g = deriv(c, x, y, z, axis);
                    }
                    row[c] += 1.0;
                }
                out[i] = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
                    - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
                    + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
                i += 1;
            }
        }
    }
    VbmMap::new_unchecked(grid, out)
}

/// Composition `(f ∘ g)(x) = g(x) + f(x + g(x))`.
///
/// Warping with the result equals warping with `f` first, then `g`:
/// `warp(v, compose(f, g)) == warp(warp(v, f), g)` up to interpolation.
pub fn compose(f: &DisplacementField3, g: &DisplacementField3) -> Result<DisplacementField3> {
    f.grid().ensure_matches(g.grid(), "compose(f, g)")?;
    let grid = *f.grid();
    let (nx, ny, nz) = grid.dims;
    let mut out = vec![0.0; 3 * grid.len()];
    let mut i = 0usize;
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let gv = g.vector_at(i);
                let fv = f.sample_zero_ext([
                    x as f64 + gv[0],
                    y as f64 + gv[1],
                    z as f64 + gv[2],
                ]);
                out[3 * i] = gv[0] + fv[0];
                out[3 * i + 1] = gv[1] + fv[1];
                out[3 * i + 2] = gv[2] + fv[2];
                i += 1;
            }
        }
    }
    DisplacementField3::new(grid, out)
}

/// Outcome of a fixed-point field inversion.
#[derive(Debug, Clone)]
pub struct InversionResult {
    pub field: DisplacementField3,
    /// Whether the mean update norm fell below the tolerance.
    pub converged: bool,
    pub iterations: usize,
    /// Mean update norm (voxels) of the returned iterate.
    pub mean_update: f64,
}

/// Approximate inverse of a displacement field by fixed-point iteration
/// `v_{k+1}(x) = -f(x + v_k(x))`, starting from `v_0 = -f`.
///
/// Stops when the mean update norm drops below `tol` or after `iters`
/// iterations, returning the best iterate seen. Non-convergence is reported
/// in the result, not as an error.
pub fn invert(f: &DisplacementField3, iters: usize, tol: f64) -> InversionResult {
    let grid = *f.grid();
    let (nx, ny, nz) = grid.dims;
    let n = grid.len();

    let mut cur: Vec<f64> = f.data().iter().map(|v| -v).collect();
    let mut best = cur.clone();
    let mut best_update = f64::INFINITY;
    let mut converged = false;
    let mut iterations = 0;

    for _ in 0..iters {
        iterations += 1;
        let cur_field = DisplacementField3 { grid, data: cur };
        let mut next = vec![0.0; 3 * n];
        let mut update_acc = 0.0;
        let mut i = 0usize;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let v = cur_field.vector_at(i);
                    let fv = f.sample_zero_ext([
                        x as f64 + v[0],
                        y as f64 + v[1],
                        z as f64 + v[2],
                    ]);
                    let nv = [-fv[0], -fv[1], -fv[2]];
                    let d = [nv[0] - v[0], nv[1] - v[1], nv[2] - v[2]];
                    update_acc += (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
                    next[3 * i] = nv[0];
                    next[3 * i + 1] = nv[1];
                    next[3 * i + 2] = nv[2];
                    i += 1;
                }
            }
        }
        let mean_update = update_acc / n as f64;
        cur = next;
        if mean_update < best_update {
            best_update = mean_update;
            best.copy_from_slice(&cur);
        }
        if mean_update < tol {
            converged = true;
            break;
        }
    }

    InversionResult {
        field: DisplacementField3 { grid, data: best },
        converged,
        iterations,
        mean_update: if best_update.is_finite() {
            best_update
        } else {
            0.0
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn grid(n: usize) -> Grid3 {
        Grid3::isotropic(n, 1.0).unwrap()
    }

    fn random_volume(g: Grid3, seed: u64) -> Volume3 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Volume3::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    /// Smooth low-frequency field with amplitude `amp` voxels.
    fn smooth_field(g: Grid3, amp: f64, seed: u64) -> DisplacementField3 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let (nx, ny, nz) = g.dims;
        let ph: Vec<f64> = (0..9).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        let mut data = Vec::with_capacity(3 * g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (xf, yf, zf) = (
                        x as f64 / nx as f64,
                        y as f64 / ny as f64,
                        z as f64 / nz as f64,
                    );
                    for c in 0..3 {
                        let v = (std::f64::consts::TAU * xf + ph[3 * c]).sin()
                            * (std::f64::consts::TAU * yf + ph[3 * c + 1]).cos()
                            * (std::f64::consts::TAU * zf + ph[3 * c + 2]).sin();
                        data.push(amp * v);
                    }
                }
            }
        }
        DisplacementField3::new(g, data).unwrap()
    }

    #[test]
    fn warp_with_zero_field_is_identity() {
        let g = grid(6);
        let v = random_volume(g, 3);
        let w = warp(&v, &DisplacementField3::zeros(g)).unwrap();
        assert_eq!(w.data(), v.data());
    }

    #[test]
    fn warp_with_unit_translation_shifts_pattern() {
        let g = grid(5);
        let mut data = vec![0.0; g.len()];
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..5 {
                    data[g.index(x, y, z)] = x as f64;
                }
            }
        }
        let v = Volume3::new(g, data).unwrap();
        let f = DisplacementField3::constant(g, [1.0, 0.0, 0.0]).unwrap();
        let w = warp(&v, &f).unwrap();
        // out(x) = v(x+1); last column clamps.
        for z in 0..5 {
            for y in 0..5 {
                for x in 0..4 {
                    assert_eq!(w.at(x, y, z), (x + 1) as f64);
                }
                assert_eq!(w.at(4, y, z), 4.0);
            }
        }
    }

    #[test]
    fn warp_matches_per_voxel_sampling_oracle() {
        let g = grid(6);
        let v = random_volume(g, 5);
        let f = smooth_field(g, 1.3, 6);
        let w = warp(&v, &f).unwrap();
        let mut i = 0;
        for z in 0..6 {
            for y in 0..6 {
                for x in 0..6 {
                    let u = f.vector_at(i);
                    let expect = v
                        .sample_trilinear([x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]])
                        .unwrap();
                    assert_eq!(w.at(x, y, z), expect);
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn warp_is_linear_in_the_volume() {
        let g = grid(5);
        let v1 = random_volume(g, 10);
        let v2 = random_volume(g, 11);
        let f = smooth_field(g, 0.9, 12);
        let (a, b) = (2.5, -0.75);
        let mixed = Volume3::new(
            g,
            v1.data()
                .iter()
                .zip(v2.data())
                .map(|(&p, &q)| a * p + b * q)
                .collect(),
        )
        .unwrap();
        let w_mixed = warp(&mixed, &f).unwrap();
        let w1 = warp(&v1, &f).unwrap();
        let w2 = warp(&v2, &f).unwrap();
        for i in 0..g.len() {
            let expect = a * w1.data()[i] + b * w2.data()[i];
            assert!((w_mixed.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn jacobian_of_zero_field_is_one_exactly() {
        let g = grid(5);
        let j = jacobian_map(&DisplacementField3::zeros(g));
        assert!(j.data().iter().all(|&d| d == 1.0));
    }

    #[test]
    fn jacobian_of_translation_is_one() {
        let g = grid(5);
        let f = DisplacementField3::constant(g, [1.7, -2.3, 0.4]).unwrap();
        let j = jacobian_map(&f);
        assert!(j.data().iter().all(|&d| (d - 1.0).abs() < 1e-14));
    }

    #[test]
    fn jacobian_of_linear_field_is_exact() {
        // U(x) = 0.1·x → det(I + 0.1·I) = 1.1³ = 1.331, exact for central
        // and one-sided differences alike.
        let g = grid(8);
        let (nx, ny, nz) = g.dims;
        let mut data = Vec::with_capacity(3 * g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    data.push(0.1 * x as f64);
                    data.push(0.1 * y as f64);
                    data.push(0.1 * z as f64);
                }
            }
        }
        let f = DisplacementField3::new(g, data).unwrap();
        let j = jacobian_map(&f);
        for &d in j.data() {
            assert!((d - 1.331).abs() < 1e-9, "det {d}");
        }
    }

    #[test]
    fn jacobian_of_affine_field_matches_closed_form() {
        // U(x) = A·x with a non-diagonal A: interior det equals det(I+A).
        let g = grid(7);
        let a = [[0.05, 0.02, -0.01], [0.0, -0.04, 0.03], [0.01, 0.0, 0.06]];
        let (nx, ny, nz) = g.dims;
        let mut data = Vec::with_capacity(3 * g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    for row in &a {
                        data.push(row[0] * p[0] + row[1] * p[1] + row[2] * p[2]);
                    }
                }
            }
        }
        let f = DisplacementField3::new(g, data).unwrap();
        let j = jacobian_map(&f);
        let m = [
            [1.0 + a[0][0], a[0][1], a[0][2]],
            [a[1][0], 1.0 + a[1][1], a[1][2]],
            [a[2][0], a[2][1], 1.0 + a[2][2]],
        ];
        let expect = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
        for &d in j.data() {
            assert!((d - expect).abs() < 1e-12, "det {d} vs {expect}");
        }
    }

    #[test]
    fn jacobian_of_sinusoid_matches_analytic_within_truncation_bound() {
        // U_c(x) = A·sin(ω·x_c + φ_c): ∇U is diagonal with entries
        // A·ω·cos(ω·x_c + φ_c); central-difference truncation error is
        // bounded by A·ω³/6 per entry.
        let g = grid(16);
        let (nx, ny, nz) = g.dims;
        let amp = 0.5;
        let omega = std::f64::consts::TAU / 16.0;
        let phases = [0.3, 1.1, 2.0];
        let mut data = Vec::with_capacity(3 * g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let p = [x as f64, y as f64, z as f64];
                    for c in 0..3 {
                        data.push(amp * (omega * p[c] + phases[c]).sin());
                    }
                }
            }
        }
        let f = DisplacementField3::new(g, data).unwrap();
        let j = jacobian_map(&f);

        // det error ≤ ~3·(1+d)²·grad_err for diagonal Jacobians; be generous.
        let grad_err = amp * omega.powi(3) / 6.0;
        let bound = 10.0 * grad_err;
        let mut i = 0;
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    // interior voxels only: one-sided boundary stencils are O(h)
                    if x > 0 && x < nx - 1 && y > 0 && y < ny - 1 && z > 0 && z < nz - 1 {
                        let p = [x as f64, y as f64, z as f64];
                        let mut expect = 1.0;
                        for c in 0..3 {
                            expect *= 1.0 + amp * omega * (omega * p[c] + phases[c]).cos();
                        }
                        let got = j.data()[i];
                        assert!(
                            (got - expect).abs() < bound,
                            "voxel ({x},{y},{z}): {got} vs {expect}"
                        );
                    }
                    i += 1;
                }
            }
        }
    }

    #[test]
    fn jacobian_mean_is_one_for_divergence_free_field() {
        // Curl field U = ∇×(0,0,ψ) = (∂ψ/∂y, -∂ψ/∂x, 0) has zero divergence;
        // for small amplitude the mean determinant stays 1 within 1e-3.
        let g = grid(16);
        let (nx, ny, nz) = g.dims;
        let om = std::f64::consts::TAU / 16.0;
        let mut data = Vec::with_capacity(3 * g.len());
        for _z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let (xf, yf) = (x as f64, y as f64);
                    // ψ = A sin(ω x) sin(ω y), compact in the periodic sense
                    let a = 0.3;
                    data.push(a * om * (om * xf).sin() * (om * yf).cos());
                    data.push(-a * om * (om * xf).cos() * (om * yf).sin());
                    data.push(0.0);
                }
            }
        }
        let f = DisplacementField3::new(g, data).unwrap();
        let j = jacobian_map(&f);
        let mean: f64 = j.data().iter().sum::<f64>() / j.data().len() as f64;
        assert!((mean - 1.0).abs() < 1e-3, "mean det {mean}");
    }

    #[test]
    fn compose_with_zero_is_identity() {
        let g = grid(6);
        let f = smooth_field(g, 1.0, 21);
        let z = DisplacementField3::zeros(g);
        let c = compose(&z, &f).unwrap();
        // compose(zero, g) = g exactly: zero-field samples contribute nothing
        for i in 0..c.data().len() {
            assert_eq!(c.data()[i], f.data()[i]);
        }
    }

    #[test]
    fn compose_of_translations_adds_in_the_interior() {
        let g = grid(8);
        let a = DisplacementField3::constant(g, [1.0, 0.5, 0.0]).unwrap();
        let b = DisplacementField3::constant(g, [0.5, 0.25, 1.0]).unwrap();
        let c = compose(&a, &b).unwrap();
        // Zero extension bends values near faces the sample crosses; check
        // voxels whose sampled location stays inside.
        for z in 0..6 {
            for y in 0..7 {
                for x in 0..6 {
                    let i = g.index(x, y, z);
                    assert_eq!(c.vector_at(i), [1.5, 0.75, 1.0], "voxel ({x},{y},{z})");
                }
            }
        }
    }

    #[test]
    fn compose_matches_double_warp_oracle() {
        // Smooth volume so interpolation error is small.
        let g = grid(12);
        let (nx, ny, nz) = g.dims;
        let mut data = Vec::with_capacity(g.len());
        for z in 0..nz {
            for y in 0..ny {
                for x in 0..nx {
                    let r = ((x as f64 - 5.5).powi(2)
                        + (y as f64 - 5.5).powi(2)
                        + (z as f64 - 5.5).powi(2))
                    .sqrt();
                    data.push((-r * r / 18.0).exp());
                }
            }
        }
        let v = Volume3::new(g, data).unwrap();
        let f = smooth_field(g, 0.8, 31);
        let gfield = smooth_field(g, 0.8, 32);
        let via_compose = warp(&v, &compose(&f, &gfield).unwrap()).unwrap();
        let via_double = warp(&warp(&v, &f).unwrap(), &gfield).unwrap();
        let n = via_compose.data().len() as f64;
        let mut max_dev = 0.0f64;
        let mut mean_dev = 0.0;
        for (&p, &q) in via_compose.data().iter().zip(via_double.data()) {
            max_dev = max_dev.max((p - q).abs());
            mean_dev += (p - q).abs() / n;
        }
        // the double warp interpolates twice; agreement is limited by the
        // volume's curvature
        assert!(max_dev < 0.06, "max deviation {max_dev}");
        assert!(mean_dev < 0.01, "mean deviation {mean_dev}");
    }

    #[test]
    fn invert_zero_is_zero() {
        let g = grid(6);
        let r = invert(&DisplacementField3::zeros(g), 10, 1e-8);
        assert!(r.converged);
        assert!(r.field.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn invert_translation_is_negated_in_the_interior() {
        let g = grid(10);
        let f = DisplacementField3::constant(g, [2.0, 0.0, 0.0]).unwrap();
        let r = invert(&f, 30, 1e-10);
        // Zero extension distorts a boundary band of width |a|+1.
        for z in 0..10 {
            for y in 0..10 {
                for x in 3..7 {
                    let v = r.field.vector_at(g.index(x, y, z));
                    assert!((v[0] + 2.0).abs() < 1e-12, "voxel ({x},{y},{z}): {v:?}");
                    assert!(v[1].abs() < 1e-12 && v[2].abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn invert_residual_is_small_for_smooth_field() {
        let g = grid(12);
        let f = smooth_field(g, 1.0, 41);
        let inv = invert(&f, 50, 1e-7);
        let residual = compose(&f, &inv.field).unwrap();
        assert!(
            residual.mean_magnitude() < 0.05,
            "mean residual {}",
            residual.mean_magnitude()
        );
    }
}
