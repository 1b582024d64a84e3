//! Synthetic brain phantoms with analytically known progression.
//!
//! A phantom is an intensity-graded ellipsoidal cortex ring around a central
//! ventricle cavity. Progression is an exact radial pull-back map applied
//! per interval: either the cavity expands (ventricle_expansion) or the
//! outer ring contracts (cortical_thinning), with the fractional volume
//! change per interval given by `rate`. All three time-points are evaluated
//! analytically from the composed maps, so the recorded ground-truth fields
//! are exact, and i.i.d. Gaussian intensity noise is added per time-point.
//!
//! Everything is driven by a single seed; identical spec + seed reproduces
//! the phantom bit-for-bit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::field::DisplacementField3;
use crate::simulation::TemplateRecord;
use crate::volume::{Grid3, Mask3, Volume3};

/// Progression archetype of a phantom subject.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Archetype {
    VentricleExpansion,
    CorticalThinning,
}

impl Archetype {
    pub fn as_str(&self) -> &'static str {
        match self {
            Archetype::VentricleExpansion => "ventricle_expansion",
            Archetype::CorticalThinning => "cortical_thinning",
        }
    }
}

impl std::str::FromStr for Archetype {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ventricle_expansion" => Ok(Archetype::VentricleExpansion),
            "cortical_thinning" => Ok(Archetype::CorticalThinning),
            other => Err(Error::InvalidArgument(format!(
                "unknown archetype '{other}'"
            ))),
        }
    }
}

/// Parameters of one synthetic subject.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub grid: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub archetype: Archetype,
    /// Fractional volume change of the archetype's structure per interval.
    pub rate: f64,
    /// Seeds shape jitter and intensity noise.
    pub seed: u64,
    /// Standard deviation of the additive intensity noise, absolute units.
    pub noise_sigma: f64,
    /// Disease stage at study entry, in units of intervals already elapsed:
    /// the time-a anatomy is the base advanced by this much progression, so
    /// the archetype is visible cross-sectionally, not only longitudinally.
    pub stage_intervals: f64,
}

/// A generated subject: the template record (volumes only; registered
/// artifacts are derived later against an atlas), the exact ground-truth
/// pull-back fields for both intervals, and the noise-free brain support.
#[derive(Debug, Clone)]
pub struct Phantom {
    pub record: TemplateRecord,
    pub truth_ab: DisplacementField3,
    pub truth_bc: DisplacementField3,
    pub support: Mask3,
    pub archetype: Archetype,
    pub rate: f64,
}

// Intensity levels and geometry in normalized ellipsoidal radius
// (1.0 = outer cortical surface).
const I_CAVITY: f64 = 0.08;
const I_TISSUE: f64 = 0.55;
const I_CORTEX: f64 = 0.78;
const R_CAVITY: f64 = 0.42;
const R_CORTEX_INNER: f64 = 0.82;
const OUTER_FRACTION: f64 = 0.30; // outer semi-axis as a fraction of each dim
const EDGE_WIDTH_VOXELS: f64 = 1.2;
const SUPPORT_THRESHOLD: f64 = 0.02;

/// Smoothstep rising 0→1 across [t - w/2, t + w/2].
fn rise(rho: f64, t: f64, w: f64) -> f64 {
    let s = ((rho - t) / w + 0.5).clamp(0.0, 1.0);
    s * s * (3.0 - 2.0 * s)
}

struct PhantomShape {
    center: [f64; 3],
    semi_axes: [f64; 3],
    edge_w: f64,
}

impl PhantomShape {
    fn rho(&self, p: [f64; 3]) -> f64 {
        let dx = (p[0] - self.center[0]) / self.semi_axes[0];
        let dy = (p[1] - self.center[1]) / self.semi_axes[1];
        let dz = (p[2] - self.center[2]) / self.semi_axes[2];
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    fn intensity(&self, rho: f64) -> f64 {
        I_CAVITY + (I_TISSUE - I_CAVITY) * rise(rho, R_CAVITY, self.edge_w)
            + (I_CORTEX - I_TISSUE) * rise(rho, R_CORTEX_INNER, self.edge_w)
            - I_CORTEX * rise(rho, 1.0, self.edge_w)
    }

    /// Radial scale window of the archetype's pull-back map. Plateaus cover
    /// every isosurface the map has to move exactly over the supported
    /// stage + interval budget.
    fn window(&self, rho: f64, archetype: Archetype) -> f64 {
        match archetype {
            // plateau past the largest cavity isosurface, decayed before
            // the cortex band
            Archetype::VentricleExpansion => 1.0 - rise(rho, 0.70, 0.24),
            // plateau over the outer surface, zero near the cavity and
            // decayed before the grid boundary
            Archetype::CorticalThinning => rise(rho, 0.73, 0.14) - rise(rho, 1.25, 0.20),
        }
    }

    /// One application of the interval pull-back map (exact, continuous).
    fn advance(&self, p: [f64; 3], archetype: Archetype, scale: f64) -> [f64; 3] {
        let rho = self.rho(p);
        let s = (1.0 / scale - 1.0) * self.window(rho, archetype);
        [
            p[0] + s * (p[0] - self.center[0]),
            p[1] + s * (p[1] - self.center[1]),
            p[2] + s * (p[2] - self.center[2]),
        ]
    }
}

fn interval_scale(archetype: Archetype, rate: f64) -> f64 {
    match archetype {
        Archetype::VentricleExpansion => (1.0 + rate).cbrt(),
        Archetype::CorticalThinning => (1.0 - rate).cbrt(),
    }
}

/// Build one phantom subject.
pub fn generate_phantom(id: &str, spec: &PhantomSpec) -> Result<Phantom> {
    if !(0.0..=0.3).contains(&spec.rate) || !spec.rate.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "phantom rate must be in [0, 0.3], got {}",
            spec.rate
        )));
    }
    if !spec.noise_sigma.is_finite() || spec.noise_sigma < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "noise_sigma must be >= 0, got {}",
            spec.noise_sigma
        )));
    }
    let grid = Grid3::new(spec.grid, spec.spacing)?;
    let (nx, ny, nz) = grid.dims;

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut jitter = |lo: f64, hi: f64| lo + (hi - lo) * rng.random::<f64>();
    let semi_axes = [
        OUTER_FRACTION * nx as f64 * jitter(0.97, 1.03),
        OUTER_FRACTION * ny as f64 * jitter(0.97, 1.03),
        OUTER_FRACTION * nz as f64 * jitter(0.97, 1.03),
    ];
    let center = [
        (nx as f64 - 1.0) / 2.0 + jitter(-1.0, 1.0),
        (ny as f64 - 1.0) / 2.0 + jitter(-1.0, 1.0),
        (nz as f64 - 1.0) / 2.0 + jitter(-1.0, 1.0),
    ];
    let mean_axis = (semi_axes[0] + semi_axes[1] + semi_axes[2]) / 3.0;
    let shape = PhantomShape {
        center,
        semi_axes,
        edge_w: EDGE_WIDTH_VOXELS / mean_axis,
    };
    let scale = interval_scale(spec.archetype, spec.rate);
    let stage_scale = scale.powf(spec.stage_intervals);

    let n = grid.len();
    let mut data_a = Vec::with_capacity(n);
    let mut data_b = Vec::with_capacity(n);
    let mut data_c = Vec::with_capacity(n);
    let mut truth = Vec::with_capacity(3 * n);
    let mut support = Vec::with_capacity(n);

    // The subject's anatomy at time t is the base profile pulled back by
    // the entry-stage map after t exact interval advances.
    let eval = |p: [f64; 3]| -> f64 {
        let staged = shape.advance(p, spec.archetype, stage_scale);
        shape.intensity(shape.rho(staged))
    };
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                let p = [x as f64, y as f64, z as f64];
                let ia = eval(p);
                // exact pull-back composition: b samples a at one advance,
                // c at two
                let p1 = shape.advance(p, spec.archetype, scale);
                let ib = eval(p1);
                let p2 = shape.advance(p1, spec.archetype, scale);
                let ic = eval(p2);
                data_a.push(ia);
                data_b.push(ib);
                data_c.push(ic);
                truth.extend_from_slice(&[p1[0] - p[0], p1[1] - p[1], p1[2] - p[2]]);
                support.push(ia > SUPPORT_THRESHOLD);
            }
        }
    }

    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma)
            .map_err(|e| Error::InvalidArgument(format!("noise distribution: {e}")))?;
        for data in [&mut data_a, &mut data_b, &mut data_c] {
            for v in data.iter_mut() {
                *v += normal.sample(&mut rng);
            }
        }
    }

    let truth_field = DisplacementField3::new(grid, truth)?;
    let record = TemplateRecord::new(
        id,
        Volume3::new(grid, data_a)?,
        Volume3::new(grid, data_b)?,
        Volume3::new(grid, data_c)?,
        12.0,
        12.0,
    )?;

    Ok(Phantom {
        record,
        // both intervals apply the same analytic map
        truth_ab: truth_field.clone(),
        truth_bc: truth_field,
        support: Mask3::new(grid, support)?,
        archetype: spec.archetype,
        rate: spec.rate,
    })
}

/// The neutral atlas volume: the un-jittered, noise-free base phantom.
pub fn generate_atlas(grid: (usize, usize, usize), spacing: (f64, f64, f64)) -> Result<Volume3> {
    let g = Grid3::new(grid, spacing)?;
    let (nx, ny, nz) = g.dims;
    let semi_axes = [
        OUTER_FRACTION * nx as f64,
        OUTER_FRACTION * ny as f64,
        OUTER_FRACTION * nz as f64,
    ];
    let mean_axis = (semi_axes[0] + semi_axes[1] + semi_axes[2]) / 3.0;
    let shape = PhantomShape {
        center: [
            (nx as f64 - 1.0) / 2.0,
            (ny as f64 - 1.0) / 2.0,
            (nz as f64 - 1.0) / 2.0,
        ],
        semi_axes,
        edge_w: EDGE_WIDTH_VOXELS / mean_axis,
    };
    let mut data = Vec::with_capacity(g.len());
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                data.push(shape.intensity(shape.rho([x as f64, y as f64, z as f64])));
            }
        }
    }
    Volume3::new(g, data)
}

/// Configuration of the default phantom population.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomPopulationConfig {
    pub subjects: usize,
    pub grid: (usize, usize, usize),
    pub spacing: (f64, f64, f64),
    pub rate_min: f64,
    pub rate_max: f64,
    /// Noise sigma as a fraction of the phantom's dynamic range.
    pub noise_fraction: f64,
    /// Range of per-subject entry stages, in intervals.
    pub stage_min: f64,
    pub stage_max: f64,
    pub seed: u64,
}

impl Default for PhantomPopulationConfig {
    fn default() -> Self {
        PhantomPopulationConfig {
            subjects: 20,
            grid: (64, 64, 64),
            spacing: (2.0, 2.0, 2.0),
            rate_min: 0.02,
            rate_max: 0.10,
            noise_fraction: 0.02,
            stage_min: 0.5,
            stage_max: 2.5,
            seed: 20240101,
        }
    }
}

fn splitmix64(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

/// Generate the two-archetype population: subjects alternate archetypes and
/// each archetype's rates sit on an evenly spaced grid in
/// [rate_min, rate_max]. Ids are `s01`, `s02`, ... so lexicographic order
/// equals generation order.
pub fn generate_population(cfg: &PhantomPopulationConfig) -> Result<Vec<Phantom>> {
    if cfg.subjects == 0 {
        return Err(Error::InvalidArgument("population must be non-empty".into()));
    }
    if cfg.rate_max < cfg.rate_min {
        return Err(Error::InvalidArgument(format!(
            "rate range [{}, {}] is inverted",
            cfg.rate_min, cfg.rate_max
        )));
    }
    let noise_sigma = cfg.noise_fraction * I_CORTEX;
    let per_archetype = [(cfg.subjects + 1) / 2, cfg.subjects / 2];
    let rate_at = |j: usize, m: usize| {
        if m <= 1 {
            cfg.rate_min
        } else {
            cfg.rate_min + (cfg.rate_max - cfg.rate_min) * j as f64 / (m - 1) as f64
        }
    };

    let mut phantoms = Vec::with_capacity(cfg.subjects);
    let mut archetype_index = [0usize; 2];
    for i in 0..cfg.subjects {
        let which = i % 2;
        let archetype = if which == 0 {
            Archetype::VentricleExpansion
        } else {
            Archetype::CorticalThinning
        };
        let seed = splitmix64(cfg.seed.wrapping_add(i as u64));
        let stage_u = splitmix64(seed ^ 0xC0FFEE) as f64 / u64::MAX as f64;
        let spec = PhantomSpec {
            grid: cfg.grid,
            spacing: cfg.spacing,
            archetype,
            rate: rate_at(archetype_index[which], per_archetype[which]),
            seed,
            noise_sigma,
            stage_intervals: cfg.stage_min + (cfg.stage_max - cfg.stage_min) * stage_u,
        };
        archetype_index[which] += 1;
        let id = format!("s{:02}", i + 1);
        phantoms.push(generate_phantom(&id, &spec)?);
    }
    Ok(phantoms)
}

/// Evaluation mask: union of all subjects' noise-free supports, dilated.
pub fn population_mask(phantoms: &[Phantom], dilation_radius: usize) -> Result<Mask3> {
    let mut mask = phantoms
        .first()
        .ok_or_else(|| Error::InvalidArgument("population must be non-empty".into()))?
        .support
        .clone();
    for p in &phantoms[1..] {
        mask = mask.union(&p.support)?;
    }
    Ok(mask.dilate(dilation_radius))
}
