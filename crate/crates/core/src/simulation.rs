//! Template weighting and follow-up synthesis.
//!
//! Distances between the target and every template are normalized, combined
//! with relative weights, and used twice: to drop all but the k nearest
//! templates, and to weight the surviving templates' follow-up deformations
//! in an exponential-kernel average. The predicted follow-up volume is the
//! target's latest scan resampled with the averaged field.

use crate::error::{Error, Result};
use crate::field::{compose, jacobian_map, warp, DisplacementField3};
use crate::morphometry::{intensity_distance, vbm_distance, VbmMap};
use crate::registration::{register_symmetric, RegistrationParams};
use crate::volume::{Mask3, Volume3};

/// Which distance column drives template selection and weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightingMode {
    /// Longitudinal map distance (serial a→b deformation).
    Long,
    /// Cross-sectional map distance (atlas→subject deformation).
    Cross,
    /// α·long + (1−α)·cross on normalized columns.
    Combined,
    /// Intensity baseline on the latest scans.
    Intensity,
}

impl WeightingMode {
    pub const ALL: [WeightingMode; 4] = [
        WeightingMode::Long,
        WeightingMode::Cross,
        WeightingMode::Combined,
        WeightingMode::Intensity,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            WeightingMode::Long => "long",
            WeightingMode::Cross => "cross",
            WeightingMode::Combined => "combined",
            WeightingMode::Intensity => "intensity",
        }
    }
}

impl std::str::FromStr for WeightingMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "long" => Ok(WeightingMode::Long),
            "cross" => Ok(WeightingMode::Cross),
            "combined" => Ok(WeightingMode::Combined),
            "intensity" => Ok(WeightingMode::Intensity),
            other => Err(Error::InvalidArgument(format!(
                "unknown weighting mode '{other}' (expected long, cross, combined or intensity)"
            ))),
        }
    }
}

impl std::fmt::Display for WeightingMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// How template follow-up fields are moved into the target frame before
/// averaging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transport {
    /// Average the fields directly on the shared grid (all inputs are
    /// affinely pre-aligned to one atlas space). The default.
    Identity,
    /// Conjugate each template's field through a deformable registration
    /// between the target's and the template's latest scans.
    Deformable,
}

/// Pipeline-level simulation parameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    /// Weight of the longitudinal column in combined mode; the
    /// cross-sectional weight is 1 − alpha.
    pub alpha: f64,
    /// Neighbor count; `None` selects max(1, round(N/4)) at run time.
    pub k: Option<usize>,
    /// Exponential kernel density of the field average.
    pub g: f64,
    /// Brain-mask dilation radius in voxels, applied by the pipeline before
    /// any distance is computed.
    pub dilation_radius: usize,
    pub transport: Transport,
    /// Maximum allowed imbalance between serial acquisition intervals.
    pub interval_tolerance_months: f64,
    pub registration: RegistrationParams,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            alpha: 0.5,
            k: None,
            g: 0.5,
            dilation_radius: 3,
            transport: Transport::Identity,
            interval_tolerance_months: 3.0,
            registration: RegistrationParams::default(),
        }
    }
}

impl SimulationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) || !self.alpha.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "alpha must be in [0, 1], got {}",
                self.alpha
            )));
        }
        if let Some(k) = self.k {
            if k < 1 {
                return Err(Error::InvalidArgument("k must be >= 1".into()));
            }
        }
        if !self.g.is_finite() || self.g <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "kernel density g must be > 0, got {}",
                self.g
            )));
        }
        if !self.interval_tolerance_months.is_finite() || self.interval_tolerance_months < 0.0 {
            return Err(Error::InvalidArgument(
                "interval_tolerance_months must be >= 0".into(),
            ));
        }
        self.registration.validate()
    }

    /// Effective neighbor count for a population of `n` templates.
    pub fn effective_k(&self, n: usize) -> usize {
        self.k.unwrap_or_else(|| ((n as f64 / 4.0).round() as usize).max(1))
    }
}

/// Artifacts derived from one template's volumes by registration.
#[derive(Debug, Clone)]
pub struct TemplateDerived {
    /// Longitudinal forward field a→b.
    pub t_ab: DisplacementField3,
    /// Longitudinal forward field b→c (the quantity averaged by Eq.-style
    /// kernel weighting).
    pub t_bc: DisplacementField3,
    /// Cross-sectional forward field atlas→b.
    pub t_mb: DisplacementField3,
    pub j_ab: VbmMap,
    pub j_mb: VbmMap,
}

/// One template subject: three serial volumes at time-points a < b < c with
/// b−a ≈ c−b, plus registration-derived fields and maps once computed.
#[derive(Debug, Clone)]
pub struct TemplateRecord {
    pub subject_id: String,
    pub vol_a: Volume3,
    pub vol_b: Volume3,
    pub vol_c: Volume3,
    pub interval_ab_months: f64,
    pub interval_bc_months: f64,
    pub derived: Option<TemplateDerived>,
}

impl TemplateRecord {
    pub fn new(
        subject_id: impl Into<String>,
        vol_a: Volume3,
        vol_b: Volume3,
        vol_c: Volume3,
        interval_ab_months: f64,
        interval_bc_months: f64,
    ) -> Result<Self> {
        vol_a
            .grid()
            .ensure_matches(vol_b.grid(), "template volumes a/b")?;
        vol_a
            .grid()
            .ensure_matches(vol_c.grid(), "template volumes a/c")?;
        Ok(TemplateRecord {
            subject_id: subject_id.into(),
            vol_a,
            vol_b,
            vol_c,
            interval_ab_months,
            interval_bc_months,
            derived: None,
        })
    }

    /// Run the three registrations and both Jacobian maps for this subject.
    pub fn derive(&mut self, atlas: &Volume3, params: &RegistrationParams) -> Result<()> {
        let d = compute_template_derived(self, atlas, params)
            .map_err(|e| e.for_subject(&self.subject_id))?;
        self.derived = Some(d);
        Ok(())
    }

    pub fn ensure_interval_balance(&self, tolerance_months: f64) -> Result<()> {
        if (self.interval_ab_months - self.interval_bc_months).abs() > tolerance_months {
            return Err(Error::InvalidArgument(format!(
                "subject '{}': serial intervals {} and {} months differ by more than {} months",
                self.subject_id,
                self.interval_ab_months,
                self.interval_bc_months,
                tolerance_months
            )));
        }
        Ok(())
    }
}

/// Registrations + maps for a template record; pure function of the volumes.
pub fn compute_template_derived(
    rec: &TemplateRecord,
    atlas: &Volume3,
    params: &RegistrationParams,
) -> Result<TemplateDerived> {
    let ab = register_symmetric(&rec.vol_a, &rec.vol_b, params)?;
    let bc = register_symmetric(&rec.vol_b, &rec.vol_c, params)?;
    let mb = register_symmetric(atlas, &rec.vol_b, params)?;
    let j_ab = jacobian_map(&ab.forward);
    let j_mb = jacobian_map(&mb.forward);
    Ok(TemplateDerived {
        t_ab: ab.forward,
        t_bc: bc.forward,
        t_mb: mb.forward,
        j_ab,
        j_mb,
    })
}

/// The target patient: exactly two prior volumes.
#[derive(Debug, Clone)]
pub struct TargetPair {
    pub subject_id: String,
    pub vol_a: Volume3,
    pub vol_b: Volume3,
    pub interval_ab_months: f64,
}

/// The target's own registration-derived artifacts.
#[derive(Debug, Clone)]
pub struct TargetArtifacts {
    pub t_ab: DisplacementField3,
    pub t_mb: DisplacementField3,
    pub j_ab: VbmMap,
    pub j_mb: VbmMap,
}

/// Register the target's serial pair and the atlas against its latest scan.
pub fn derive_target(
    target: &TargetPair,
    atlas: &Volume3,
    params: &RegistrationParams,
) -> Result<TargetArtifacts> {
    target
        .vol_a
        .grid()
        .ensure_matches(target.vol_b.grid(), "target volumes a/b")?;
    let ab = register_symmetric(&target.vol_a, &target.vol_b, params)
        .map_err(|e| e.for_subject(&target.subject_id))?;
    let mb = register_symmetric(atlas, &target.vol_b, params)
        .map_err(|e| e.for_subject(&target.subject_id))?;
    let j_ab = jacobian_map(&ab.forward);
    let j_mb = jacobian_map(&mb.forward);
    Ok(TargetArtifacts {
        t_ab: ab.forward,
        t_mb: mb.forward,
        j_ab,
        j_mb,
    })
}

/// One row of the distance table, in ascending subject-id order.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DistanceRow {
    pub subject_id: String,
    pub d_long: f64,
    pub d_cross: f64,
    pub d_long_norm: f64,
    pub d_cross_norm: f64,
    pub d_combined: f64,
    pub selected: bool,
    /// Kernel weight; 0 for dropped templates, weights sum to 1.
    pub weight: f64,
}

/// Per-template distances, normalized columns, selection and weights.
///
/// In intensity mode both raw columns carry the intensity distance; the
/// normalized and combined columns follow from it.
#[derive(Debug, Clone)]
pub struct DistanceTable {
    pub mode: WeightingMode,
    pub alpha: f64,
    pub rows: Vec<DistanceRow>,
}

impl DistanceTable {
    pub fn selected_ids(&self) -> Vec<String> {
        self.rows
            .iter()
            .filter(|r| r.selected)
            .map(|r| r.subject_id.clone())
            .collect()
    }

    /// CSV export: subject_id, d_long, d_cross, d_long_norm, d_cross_norm,
    /// d_combined, selected, weight.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::Io {
                path: path.to_path_buf(),
                source: std::io::Error::other(e),
            })?;
        w.write_record([
            "subject_id",
            "d_long",
            "d_cross",
            "d_long_norm",
            "d_cross_norm",
            "d_combined",
            "selected",
            "weight",
        ])
        .map_err(|e| csv_err(path, e))?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.as_str(),
                &format!("{}", r.d_long),
                &format!("{}", r.d_cross),
                &format!("{}", r.d_long_norm),
                &format!("{}", r.d_cross_norm),
                &format!("{}", r.d_combined),
                if r.selected { "1" } else { "0" },
                &format!("{}", r.weight),
            ])
            .map_err(|e| csv_err(path, e))?;
        }
        w.flush().map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

fn csv_err(path: &std::path::Path, e: csv::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source: std::io::Error::other(e),
    }
}

/// Zero-mean normalization: subtract the mean, then divide by the maximum
/// absolute deviation, so results lie in [−1, 1] with at least one endpoint
/// attained. Constant input maps to all zeros.
pub fn normalize_distances(d: &[f64]) -> Result<Vec<f64>> {
    if d.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalization needs at least 2 values, got {}",
            d.len()
        )));
    }
    let mean = d.iter().sum::<f64>() / d.len() as f64;
    let dev: Vec<f64> = d.iter().map(|&x| x - mean).collect();
    let max_abs = dev.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
    if max_abs == 0.0 {
        return Ok(vec![0.0; d.len()]);
    }
    Ok(dev.into_iter().map(|x| x / max_abs).collect())
}

/// Elementwise α·long + (1−α)·cross.
pub fn combine_distances(
    d_long_norm: &[f64],
    d_cross_norm: &[f64],
    alpha: f64,
) -> Result<Vec<f64>> {
    if d_long_norm.len() != d_cross_norm.len() {
        return Err(Error::InvalidArgument(format!(
            "column lengths differ: {} vs {}",
            d_long_norm.len(),
            d_cross_norm.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!(
            "alpha must be in [0, 1], got {alpha}"
        )));
    }
    let beta = 1.0 - alpha;
    Ok(d_long_norm
        .iter()
        .zip(d_cross_norm)
        .map(|(&l, &c)| alpha * l + beta * c)
        .collect())
}

/// Indices of the k smallest distances; ties break by ascending index, and
/// callers keep their tables in ascending subject-id order.
pub fn select_neighbors(d_combined: &[f64], k: usize) -> Result<Vec<usize>> {
    if k < 1 || k > d_combined.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} out of range for population of {}",
            d_combined.len()
        )));
    }
    let mut order: Vec<usize> = (0..d_combined.len()).collect();
    order.sort_by(|&i, &j| {
        d_combined[i]
            .partial_cmp(&d_combined[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(i.cmp(&j))
    });
    order.truncate(k);
    Ok(order)
}

/// Exponential kernel weights `exp(−D′/g)`, shifted by the minimum before
/// exponentiation (the shift cancels in the normalization) and normalized to
/// sum to 1.
pub fn kernel_weights(d_combined_selected: &[f64], g: f64) -> Result<Vec<f64>> {
    if d_combined_selected.is_empty() {
        return Err(Error::InvalidArgument(
            "empty selection for kernel weighting".into(),
        ));
    }
    if !g.is_finite() || g <= 0.0 {
        return Err(Error::InvalidArgument(format!(
            "kernel density g must be > 0, got {g}"
        )));
    }
    let min = d_combined_selected
        .iter()
        .fold(f64::INFINITY, |m, &x| m.min(x));
    let raw: Vec<f64> = d_combined_selected
        .iter()
        .map(|&d| (-(d - min) / g).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    Ok(raw.into_iter().map(|w| w / sum).collect())
}

/// Per-voxel weighted mean of the selected templates' follow-up fields with
/// `exp(−D′/g)` weights. A single field is returned bit-exactly.
pub fn average_followup_field(
    fields: &[&DisplacementField3],
    d_combined_selected: &[f64],
    g: f64,
) -> Result<DisplacementField3> {
    if fields.is_empty() {
        return Err(Error::InvalidArgument(
            "empty selection for field averaging".into(),
        ));
    }
    if fields.len() != d_combined_selected.len() {
        return Err(Error::InvalidArgument(format!(
            "{} fields but {} distances",
            fields.len(),
            d_combined_selected.len()
        )));
    }
    let grid = *fields[0].grid();
    for f in fields.iter().skip(1) {
        grid.ensure_matches(f.grid(), "average_followup_field")?;
    }
    let weights = kernel_weights(d_combined_selected, g)?;

    let mut out = vec![0.0; 3 * grid.len()];
    for (f, &w) in fields.iter().zip(&weights) {
        for (o, &v) in out.iter_mut().zip(f.data()) {
            *o += w * v;
        }
    }
    DisplacementField3::new(grid, out)
}

/// Everything `simulate_followup` produces: the predicted follow-up volume,
/// the averaged field that generated it, and the full distance table.
#[derive(Debug, Clone)]
pub struct SimulationOutput {
    pub predicted: Volume3,
    pub field: DisplacementField3,
    pub table: DistanceTable,
}

/// End-to-end follow-up simulation for a target with two prior volumes.
///
/// Registers the target's serial pair and the atlas against its latest scan,
/// computes the per-template distance column for the requested weighting
/// mode, normalizes, combines, drops all but the k nearest templates,
/// averages their follow-up fields with exponential kernel weights, and
/// resamples the target's latest scan with the averaged field.
///
/// `mask` must already be the dilated brain mask; the pipeline layers apply
/// `SimulationConfig::dilation_radius` when constructing it.
pub fn simulate_followup(
    target: &TargetPair,
    templates: &[TemplateRecord],
    atlas: &Volume3,
    mask: &Mask3,
    cfg: &SimulationConfig,
    mode: WeightingMode,
) -> Result<SimulationOutput> {
    cfg.validate()?;
    let artifacts = derive_target(target, atlas, &cfg.registration)?;

    // Templates missing derived artifacts are computed on the fly.
    let mut computed: Vec<Option<TemplateDerived>> = Vec::with_capacity(templates.len());
    for rec in templates {
        if rec.derived.is_some() {
            computed.push(None);
        } else {
            let d = compute_template_derived(rec, atlas, &cfg.registration)
                .map_err(|e| e.for_subject(&rec.subject_id))?;
            computed.push(Some(d));
        }
    }
    let derived: Vec<&TemplateDerived> = templates
        .iter()
        .zip(&computed)
        .map(|(rec, c)| c.as_ref().or(rec.derived.as_ref()).unwrap())
        .collect();
    let refs: Vec<&TemplateRecord> = templates.iter().collect();

    simulate_with_artifacts(target, &artifacts, &refs, &derived, mask, cfg, mode)
}

/// Simulation core with all registrations already available. Used by
/// `simulate_followup` and by the leave-one-out harness, which shares
/// derived artifacts across folds and modes.
#[allow(clippy::too_many_arguments)]
pub fn simulate_with_artifacts(
    target: &TargetPair,
    target_artifacts: &TargetArtifacts,
    templates: &[&TemplateRecord],
    derived: &[&TemplateDerived],
    mask: &Mask3,
    cfg: &SimulationConfig,
    mode: WeightingMode,
) -> Result<SimulationOutput> {
    cfg.validate()?;
    if templates.is_empty() {
        return Err(Error::InvalidArgument(
            "template population is empty".into(),
        ));
    }
    if templates.len() != derived.len() {
        return Err(Error::InvalidArgument(format!(
            "{} templates but {} derived artifact sets",
            templates.len(),
            derived.len()
        )));
    }
    let grid = *target.vol_b.grid();
    grid.ensure_matches(mask.grid(), "target volume vs mask")?;
    mask.ensure_nonempty()?;
    for rec in templates {
        grid.ensure_matches(rec.vol_b.grid(), "target vs template volumes")?;
        rec.ensure_interval_balance(cfg.interval_tolerance_months)?;
        if (rec.interval_ab_months - target.interval_ab_months).abs()
            > cfg.interval_tolerance_months
        {
            return Err(Error::InvalidArgument(format!(
                "template '{}' interval {} months does not match target interval {} months",
                rec.subject_id, rec.interval_ab_months, target.interval_ab_months
            )));
        }
    }

    let n = templates.len();
    let k = cfg.effective_k(n);
    if k > n {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the template population size {n}"
        )));
    }

    // Ascending subject-id order makes kNN tie-breaking deterministic.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| templates[i].subject_id.cmp(&templates[j].subject_id));

    let mut d_long = Vec::with_capacity(n);
    let mut d_cross = Vec::with_capacity(n);
    for &i in &order {
        match mode {
            WeightingMode::Intensity => {
                let d = intensity_distance(&target.vol_b, &templates[i].vol_b, mask)
                    .map_err(|e| e.for_subject(&templates[i].subject_id))?;
                d_long.push(d);
                d_cross.push(d);
            }
            _ => {
                d_long.push(
                    vbm_distance(&target_artifacts.j_ab, &derived[i].j_ab, mask)
                        .map_err(|e| e.for_subject(&templates[i].subject_id))?,
                );
                d_cross.push(
                    vbm_distance(&target_artifacts.j_mb, &derived[i].j_mb, mask)
                        .map_err(|e| e.for_subject(&templates[i].subject_id))?,
                );
            }
        }
    }

    // A single-template population has no spread to normalize over.
    let (long_norm, cross_norm) = if n == 1 {
        (vec![0.0], vec![0.0])
    } else {
        (normalize_distances(&d_long)?, normalize_distances(&d_cross)?)
    };
    let combined = match mode {
        WeightingMode::Long => long_norm.clone(),
        WeightingMode::Cross => cross_norm.clone(),
        WeightingMode::Intensity => long_norm.clone(),
        WeightingMode::Combined => combine_distances(&long_norm, &cross_norm, cfg.alpha)?,
    };

    let selected = select_neighbors(&combined, k)?;
    let selected_combined: Vec<f64> = selected.iter().map(|&i| combined[i]).collect();
    let weights = kernel_weights(&selected_combined, cfg.g)?;

    // Transport the selected templates' follow-up fields into the target
    // frame, then kernel-average them.
    let mut transported: Vec<DisplacementField3> = Vec::with_capacity(selected.len());
    for &sel in &selected {
        let rec = &templates[order[sel]];
        let t_bc = &derived[order[sel]].t_bc;
        let field = match cfg.transport {
            Transport::Identity => t_bc.clone(),
            Transport::Deformable => {
                let reg = register_symmetric(&target.vol_b, &rec.vol_b, &cfg.registration)
                    .map_err(|e| e.for_subject(&rec.subject_id))?;
                // conjugation: forward ∘ t_bc ∘ backward, as coordinate maps
                compose(&reg.forward, &compose(t_bc, &reg.backward)?)?
            }
        };
        transported.push(field);
    }
    let refs: Vec<&DisplacementField3> = transported.iter().collect();
    let field = average_followup_field(&refs, &selected_combined, cfg.g)?;
    let predicted = warp(&target.vol_b, &field)?;

    let mut rows = Vec::with_capacity(n);
    for (pos, &i) in order.iter().enumerate() {
        let sel_pos = selected.iter().position(|&s| s == pos);
        rows.push(DistanceRow {
            subject_id: templates[i].subject_id.clone(),
            d_long: d_long[pos],
            d_cross: d_cross[pos],
            d_long_norm: long_norm[pos],
            d_cross_norm: cross_norm[pos],
            d_combined: combined[pos],
            selected: sel_pos.is_some(),
            weight: sel_pos.map_or(0.0, |p| weights[p]),
        });
    }

    Ok(SimulationOutput {
        predicted,
        field,
        table: DistanceTable {
            mode,
            alpha: cfg.alpha,
            rows,
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Grid3;
    use rand::{Rng, SeedableRng};

    #[test]
    fn normalize_symmetric_triple() {
        let got = normalize_distances(&[2.0, 4.0, 6.0]).unwrap();
        assert_eq!(got, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn normalize_constant_is_all_zeros() {
        assert_eq!(normalize_distances(&[5.0, 5.0, 5.0]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn normalize_skewed_triple_stays_in_range() {
        // mean 19/3, max |deviation| = 19/3
        let got = normalize_distances(&[0.0, 9.0, 10.0]).unwrap();
        assert!((got[0] + 1.0).abs() < 1e-12);
        assert!((got[1] - 8.0 / 19.0).abs() < 1e-12);
        assert!((got[2] - 11.0 / 19.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_short_input() {
        assert!(normalize_distances(&[1.0]).is_err());
    }

    #[test]
    fn normalize_has_zero_mean_and_unit_max_abs() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        for _ in 0..100 {
            let n = 2 + (rng.random::<u32>() % 20) as usize;
            let d: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 100.0).collect();
            let got = normalize_distances(&d).unwrap();
            let mean: f64 = got.iter().sum::<f64>() / n as f64;
            let max_abs = got.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!(mean.abs() < 1e-12);
            if d.iter().any(|&x| (x - d[0]).abs() > 0.0) {
                assert!((max_abs - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn combine_boundary_weights() {
        let long = vec![-1.0, 0.25, 1.0];
        let cross = vec![1.0, -0.5, 0.0];
        assert_eq!(combine_distances(&long, &cross, 1.0).unwrap(), long);
        assert_eq!(combine_distances(&long, &cross, 0.0).unwrap(), cross);
        let half = combine_distances(&[-1.0, 1.0], &[1.0, -1.0], 0.5).unwrap();
        assert_eq!(half, vec![0.0, 0.0]);
        assert!(combine_distances(&long, &cross[..2], 0.5).is_err());
    }

    #[test]
    fn select_neighbors_basics() {
        let d = vec![0.3, -0.2, 0.9];
        assert_eq!(select_neighbors(&d, 1).unwrap(), vec![1]);
        assert_eq!(select_neighbors(&d, 3).unwrap(), vec![1, 0, 2]);
        assert!(select_neighbors(&d, 0).is_err());
        assert!(select_neighbors(&d, 4).is_err());
    }

    #[test]
    fn select_neighbors_ties_break_by_index() {
        let d = vec![0.5, 0.1, 0.1, 0.5];
        assert_eq!(select_neighbors(&d, 3).unwrap(), vec![1, 2, 0]);
    }

    #[test]
    fn select_neighbors_matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = 1 + (rng.random::<u32>() % 30) as usize;
            let d: Vec<f64> = (0..n).map(|_| (rng.random::<f64>() * 8.0).round()).collect();
            let k = 1 + (rng.random::<u32>() as usize % n);
            let got = select_neighbors(&d, k).unwrap();

            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&i, &j| d[i].partial_cmp(&d[j]).unwrap().then(i.cmp(&j)));
            assert_eq!(got, idx[..k].to_vec());
        }
    }

    #[test]
    fn select_neighbors_invariant_under_monotone_transform() {
        let d = vec![0.7, -0.3, 0.1, 0.5, -0.9];
        let t: Vec<f64> = d.iter().map(|&x: &f64| (3.0 * x).exp()).collect();
        assert_eq!(
            select_neighbors(&d, 3).unwrap(),
            select_neighbors(&t, 3).unwrap()
        );
    }

    #[test]
    fn kernel_weights_match_scalar_oracle() {
        // D′ = [0, 0.5], g = 0.5 → [1, e^{-1}] / (1 + e^{-1})
        let w = kernel_weights(&[0.0, 0.5], 0.5).unwrap();
        let e1 = (-1.0f64).exp();
        assert!((w[0] - 1.0 / (1.0 + e1)).abs() < 1e-12);
        assert!((w[1] - e1 / (1.0 + e1)).abs() < 1e-12);
        assert!((w[0] - 0.7311).abs() < 1e-4);
        assert!((w[1] - 0.2689).abs() < 1e-4);
    }

    #[test]
    fn kernel_weights_sum_to_one_and_shift_invariant() {
        let d = vec![-0.8, 0.1, 0.4, 1.0];
        let w = kernel_weights(&d, 0.5).unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(w.iter().all(|&x| x > 0.0));
        let shifted: Vec<f64> = d.iter().map(|&x| x + 123.0).collect();
        let w2 = kernel_weights(&shifted, 0.5).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    fn tiny_field(g: Grid3, seed: u64) -> DisplacementField3 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        DisplacementField3::new(
            g,
            (0..3 * g.len())
                .map(|_| rng.random::<f64>() * 2.0 - 1.0)
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn single_field_average_is_bit_exact() {
        let g = Grid3::isotropic(4, 1.0).unwrap();
        let f = tiny_field(g, 4);
        let avg = average_followup_field(&[&f], &[0.37], 0.5).unwrap();
        assert_eq!(avg.data(), f.data());
    }

    #[test]
    fn equal_distances_average_to_midpoint() {
        let g = Grid3::isotropic(4, 1.0).unwrap();
        let f1 = tiny_field(g, 5);
        let f2 = tiny_field(g, 6);
        let avg = average_followup_field(&[&f1, &f2], &[0.2, 0.2], 0.5).unwrap();
        for i in 0..avg.data().len() {
            let expect = 0.5 * (f1.data()[i] + f2.data()[i]);
            assert!((avg.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn averaged_field_stays_in_convex_hull() {
        let g = Grid3::isotropic(4, 1.0).unwrap();
        let fields = [tiny_field(g, 7), tiny_field(g, 8), tiny_field(g, 9)];
        let refs: Vec<&DisplacementField3> = fields.iter().collect();
        let avg = average_followup_field(&refs, &[0.1, 0.4, -0.2], 0.5).unwrap();
        for i in 0..avg.data().len() {
            let lo = fields.iter().map(|f| f.data()[i]).fold(f64::INFINITY, f64::min);
            let hi = fields
                .iter()
                .map(|f| f.data()[i])
                .fold(f64::NEG_INFINITY, f64::max);
            assert!(avg.data()[i] >= lo - 1e-12 && avg.data()[i] <= hi + 1e-12);
        }
    }

    #[test]
    fn average_rejects_empty_and_mismatched_inputs() {
        let g = Grid3::isotropic(4, 1.0).unwrap();
        let f = tiny_field(g, 10);
        assert!(average_followup_field(&[], &[], 0.5).is_err());
        assert!(average_followup_field(&[&f], &[0.1, 0.2], 0.5).is_err());
        let g2 = Grid3::isotropic(5, 1.0).unwrap();
        let f2 = tiny_field(g2, 11);
        assert!(matches!(
            average_followup_field(&[&f, &f2], &[0.0, 0.0], 0.5),
            Err(Error::GridMismatch(_))
        ));
    }

    #[test]
    fn config_validation() {
        let mut cfg = SimulationConfig::default();
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.effective_k(20), 5);
        assert_eq!(cfg.effective_k(2), 1);
        cfg.alpha = 1.5;
        assert!(cfg.validate().is_err());
        cfg.alpha = 0.5;
        cfg.g = 0.0;
        assert!(cfg.validate().is_err());
        cfg.g = 0.5;
        cfg.k = Some(0);
        assert!(cfg.validate().is_err());
    }
}
