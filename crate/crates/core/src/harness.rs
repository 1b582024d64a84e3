//! Leave-one-out evaluation of the simulation pipeline.
//!
//! Each subject in turn is removed from the population, its follow-up is
//! simulated from its two prior volumes under every requested weighting
//! mode, and three image distances are recorded: prediction vs. real
//! follow-up (`p_b`), prediction vs. the serially registered prior scan
//! (`p_ra`), and that registered scan vs. the real follow-up (`real`, the
//! registration error floor). Folds run in parallel and aggregate in
//! subject-id order, so reruns are bit-reproducible.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::warp;
use crate::morphometry::intensity_distance;
use crate::simulation::{
    compute_template_derived, normalize_distances, simulate_with_artifacts, SimulationConfig,
    TargetArtifacts, TargetPair, TemplateDerived, TemplateRecord, WeightingMode,
};
use crate::volume::{Mask3, Volume3};

/// The three masked image distances of one fold.
///
/// `registered_b` must be the subject's prior scan warped by its serial
/// registration onto the real follow-up.
pub fn evaluate_pair(
    predicted: &Volume3,
    real_c: &Volume3,
    registered_b: &Volume3,
    mask: &Mask3,
) -> Result<(f64, f64, f64)> {
    let p_b = intensity_distance(predicted, real_c, mask)?;
    let p_ra = intensity_distance(predicted, registered_b, mask)?;
    let real = intensity_distance(registered_b, real_c, mask)?;
    Ok((p_b, p_ra, real))
}

/// One CSV row of a leave-one-out run.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LooRow {
    pub subject_id: String,
    pub mode: WeightingMode,
    pub p_b: f64,
    pub p_ra: f64,
    /// Registration error floor; identical across modes for one subject.
    pub real: f64,
    pub p_b_rescaled: f64,
    pub p_ra_rescaled: f64,
    /// 1-based plotting rank: subjects ordered by the intensity-mode `p_b`.
    pub sort_rank: usize,
}

/// Selected template ids of one (subject, mode) fold.
#[derive(Debug, Clone)]
pub struct LooSelection {
    pub subject_id: String,
    pub mode: WeightingMode,
    pub selected: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct LooResult {
    /// Rows grouped by mode (in call order), subjects in ascending id order.
    pub rows: Vec<LooRow>,
    pub selections: Vec<LooSelection>,
    pub modes: Vec<WeightingMode>,
}

impl LooResult {
    pub fn rows_for_mode(&self, mode: WeightingMode) -> Vec<&LooRow> {
        self.rows.iter().filter(|r| r.mode == mode).collect()
    }

    /// CSV export: subject_id, mode, p_b, p_ra, real, p_b_rescaled,
    /// p_ra_rescaled, sort_rank.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let io = |e: std::io::Error| Error::Io {
            path: path.to_path_buf(),
            source: e,
        };
        let mut w = csv::Writer::from_path(path).map_err(|e| io(std::io::Error::other(e)))?;
        w.write_record([
            "subject_id",
            "mode",
            "p_b",
            "p_ra",
            "real",
            "p_b_rescaled",
            "p_ra_rescaled",
            "sort_rank",
        ])
        .map_err(|e| io(std::io::Error::other(e)))?;
        for r in &self.rows {
            w.write_record([
                r.subject_id.as_str(),
                r.mode.as_str(),
                &format!("{}", r.p_b),
                &format!("{}", r.p_ra),
                &format!("{}", r.real),
                &format!("{}", r.p_b_rescaled),
                &format!("{}", r.p_ra_rescaled),
                &format!("{}", r.sort_rank),
            ])
            .map_err(|e| io(std::io::Error::other(e)))?;
        }
        w.flush().map_err(io)
    }

    /// Plain-text plot data: `<prefix>_pb.dat` and `<prefix>_pra.dat` hold
    /// the rescaled per-mode curves with subjects in rank order, and
    /// `<prefix>_floor.dat` the raw p_b / p_ra / real triple of the first
    /// mode for the registration-error comparison.
    pub fn write_plot_data(&self, prefix: &std::path::Path) -> Result<()> {
        let ranked = {
            let first = self.modes[0];
            let mut subj: Vec<&LooRow> = self.rows.iter().filter(|r| r.mode == first).collect();
            subj.sort_by_key(|r| r.sort_rank);
            subj.iter().map(|r| r.subject_id.clone()).collect::<Vec<_>>()
        };

        for (suffix, pick) in [("pb", 0usize), ("pra", 1usize)] {
            let path = prefix.with_file_name(format!(
                "{}_{suffix}.dat",
                prefix.file_name().unwrap_or_default().to_string_lossy()
            ));
            let mut out = String::new();
            out.push_str("# rank subject");
            for m in &self.modes {
                out.push(' ');
                out.push_str(m.as_str());
            }
            out.push('\n');
            for (rank, id) in ranked.iter().enumerate() {
                out.push_str(&format!("{} {}", rank + 1, id));
                for m in &self.modes {
                    let row = self
                        .rows
                        .iter()
                        .find(|r| r.mode == *m && &r.subject_id == id)
                        .expect("row exists for every (subject, mode)");
                    let v = if pick == 0 {
                        row.p_b_rescaled
                    } else {
                        row.p_ra_rescaled
                    };
                    out.push_str(&format!(" {v}"));
                }
                out.push('\n');
            }
            std::fs::write(&path, out).map_err(|e| Error::Io {
                path: path.clone(),
                source: e,
            })?;
        }

        let path = prefix.with_file_name(format!(
            "{}_floor.dat",
            prefix.file_name().unwrap_or_default().to_string_lossy()
        ));
        let mut out = String::from("# rank subject p_b p_ra real\n");
        let first = self.modes[0];
        for (rank, id) in ranked.iter().enumerate() {
            let row = self
                .rows
                .iter()
                .find(|r| r.mode == first && &r.subject_id == id)
                .expect("row exists");
            out.push_str(&format!(
                "{} {} {} {} {}\n",
                rank + 1,
                id,
                row.p_b,
                row.p_ra,
                row.real
            ));
        }
        std::fs::write(&path, out).map_err(|e| Error::Io {
            path,
            source: e,
        })
    }
}

struct FoldOutcome {
    subject_id: String,
    per_mode: Vec<(WeightingMode, f64, f64, Vec<String>)>, // (mode, p_b, p_ra, selected)
    real: f64,
}

/// Run the leave-one-out protocol over a derived template population.
///
/// Templates missing derived artifacts are registered first (in parallel).
/// For each fold the target's own artifacts are its precomputed serial and
/// cross-sectional registrations; its record never enters the fold's
/// template set.
pub fn run_loo(
    templates: &[TemplateRecord],
    atlas: &Volume3,
    mask: &Mask3,
    cfg: &SimulationConfig,
    modes: &[WeightingMode],
) -> Result<LooResult> {
    cfg.validate()?;
    if templates.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "leave-one-out needs at least 3 subjects, got {}",
            templates.len()
        )));
    }
    if modes.is_empty() {
        return Err(Error::InvalidArgument("no weighting modes requested".into()));
    }
    let k = cfg.effective_k(templates.len() - 1);
    if k > templates.len() - 1 {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds the per-fold population size {}",
            templates.len() - 1
        )));
    }

    // Derive missing artifacts once, in parallel, aggregated by index.
    let computed: Vec<Option<TemplateDerived>> = templates
        .par_iter()
        .map(|rec| -> Result<Option<TemplateDerived>> {
            if rec.derived.is_some() {
                Ok(None)
            } else {
                compute_template_derived(rec, atlas, &cfg.registration)
                    .map(Some)
                    .map_err(|e| e.for_subject(&rec.subject_id))
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let derived: Vec<&TemplateDerived> = templates
        .iter()
        .zip(&computed)
        .map(|(rec, c)| c.as_ref().or(rec.derived.as_ref()).unwrap())
        .collect();

    let mut outcomes: Vec<FoldOutcome> = (0..templates.len())
        .into_par_iter()
        .map(|s| -> Result<FoldOutcome> {
            let rec = &templates[s];
            let target = TargetPair {
                subject_id: rec.subject_id.clone(),
                vol_a: rec.vol_a.clone(),
                vol_b: rec.vol_b.clone(),
                interval_ab_months: rec.interval_ab_months,
            };
            let artifacts = TargetArtifacts {
                t_ab: derived[s].t_ab.clone(),
                t_mb: derived[s].t_mb.clone(),
                j_ab: derived[s].j_ab.clone(),
                j_mb: derived[s].j_mb.clone(),
            };
            // identity exclusion: the fold's template set omits index s
            let fold_templates: Vec<&TemplateRecord> = templates
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != s)
                .map(|(_, r)| r)
                .collect();
            let fold_derived: Vec<&TemplateDerived> = derived
                .iter()
                .enumerate()
                .filter(|(i, _)| *i != s)
                .map(|(_, d)| *d)
                .collect();

            let registered_b = warp(&rec.vol_b, &derived[s].t_bc)
                .map_err(|e| e.for_subject(&rec.subject_id))?;
            let real = intensity_distance(&registered_b, &rec.vol_c, mask)
                .map_err(|e| e.for_subject(&rec.subject_id))?;

            let mut per_mode = Vec::with_capacity(modes.len());
            for &mode in modes {
                let out = simulate_with_artifacts(
                    &target,
                    &artifacts,
                    &fold_templates,
                    &fold_derived,
                    mask,
                    cfg,
                    mode,
                )
                .map_err(|e| e.for_subject(&rec.subject_id))?;
                let (p_b, p_ra, _) =
                    evaluate_pair(&out.predicted, &rec.vol_c, &registered_b, mask)
                        .map_err(|e| e.for_subject(&rec.subject_id))?;
                per_mode.push((mode, p_b, p_ra, out.table.selected_ids()));
            }
            Ok(FoldOutcome {
                subject_id: rec.subject_id.clone(),
                per_mode,
                real,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    outcomes.sort_by(|a, b| a.subject_id.cmp(&b.subject_id));

    // Plot ranks come from the intensity-mode p_b column when present.
    let rank_mode = if modes.contains(&WeightingMode::Intensity) {
        WeightingMode::Intensity
    } else {
        modes[0]
    };
    let rank_col: Vec<f64> = outcomes
        .iter()
        .map(|o| {
            o.per_mode
                .iter()
                .find(|(m, ..)| *m == rank_mode)
                .map(|(_, p_b, ..)| *p_b)
                .expect("rank mode was simulated")
        })
        .collect();
    let mut rank_order: Vec<usize> = (0..outcomes.len()).collect();
    rank_order.sort_by(|&i, &j| {
        rank_col[i]
            .partial_cmp(&rank_col[j])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(outcomes[i].subject_id.cmp(&outcomes[j].subject_id))
    });
    let mut rank_of_subject = vec![0usize; outcomes.len()];
    for (rank, &i) in rank_order.iter().enumerate() {
        rank_of_subject[i] = rank + 1;
    }

    let mut rows = Vec::with_capacity(outcomes.len() * modes.len());
    let mut selections = Vec::with_capacity(outcomes.len() * modes.len());
    for &mode in modes {
        let p_b_col: Vec<f64> = outcomes
            .iter()
            .map(|o| o.per_mode.iter().find(|(m, ..)| *m == mode).unwrap().1)
            .collect();
        let p_ra_col: Vec<f64> = outcomes
            .iter()
            .map(|o| o.per_mode.iter().find(|(m, ..)| *m == mode).unwrap().2)
            .collect();
        let p_b_rescaled = normalize_distances(&p_b_col)?;
        let p_ra_rescaled = normalize_distances(&p_ra_col)?;
        for (i, o) in outcomes.iter().enumerate() {
            let (_, p_b, p_ra, selected) =
                o.per_mode.iter().find(|(m, ..)| *m == mode).unwrap();
            rows.push(LooRow {
                subject_id: o.subject_id.clone(),
                mode,
                p_b: *p_b,
                p_ra: *p_ra,
                real: o.real,
                p_b_rescaled: p_b_rescaled[i],
                p_ra_rescaled: p_ra_rescaled[i],
                sort_rank: rank_of_subject[i],
            });
            selections.push(LooSelection {
                subject_id: o.subject_id.clone(),
                mode,
                selected: selected.clone(),
            });
        }
    }

    Ok(LooResult {
        rows,
        selections,
        modes: modes.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_atlas, generate_population, population_mask, PhantomPopulationConfig};
    use crate::registration::RegistrationParams;
    use crate::volume::Grid3;
    use rand::{Rng, SeedableRng};

    fn small_cfg() -> SimulationConfig {
        SimulationConfig {
            k: Some(1),
            registration: RegistrationParams {
                levels: 2,
                iters_per_level: vec![20, 10],
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn evaluate_pair_trivial_cases() {
        let g = Grid3::isotropic(6, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let v1 = Volume3::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let v2 = Volume3::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap();
        let mask = Mask3::new(g, vec![true; g.len()]).unwrap();

        let (p_b, _, _) = evaluate_pair(&v2, &v2, &v1, &mask).unwrap();
        assert_eq!(p_b, 0.0);
        let (_, p_ra, _) = evaluate_pair(&v1, &v2, &v1, &mask).unwrap();
        assert_eq!(p_ra, 0.0);
    }

    #[test]
    fn evaluate_pair_matches_three_distance_calls() {
        let g = Grid3::isotropic(5, 1.0).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let mut vols = Vec::new();
        for _ in 0..3 {
            vols.push(
                Volume3::new(g, (0..g.len()).map(|_| rng.random::<f64>()).collect()).unwrap(),
            );
        }
        let mask = Mask3::new(g, (0..g.len()).map(|i| i % 2 == 0).collect()).unwrap();
        let (p_b, p_ra, real) = evaluate_pair(&vols[0], &vols[1], &vols[2], &mask).unwrap();
        assert_eq!(p_b, intensity_distance(&vols[0], &vols[1], &mask).unwrap());
        assert_eq!(p_ra, intensity_distance(&vols[0], &vols[2], &mask).unwrap());
        assert_eq!(real, intensity_distance(&vols[2], &vols[1], &mask).unwrap());
    }

    #[test]
    fn loo_rejects_tiny_populations() {
        let cfg = PhantomPopulationConfig {
            subjects: 2,
            grid: (16, 16, 16),
            ..Default::default()
        };
        let pop = generate_population(&cfg).unwrap();
        let recs: Vec<TemplateRecord> = pop.into_iter().map(|p| p.record).collect();
        let atlas = generate_atlas((16, 16, 16), (2.0, 2.0, 2.0)).unwrap();
        let mask = Mask3::new(*atlas.grid(), vec![true; atlas.grid().len()]).unwrap();
        assert!(matches!(
            run_loo(&recs, &atlas, &mask, &small_cfg(), &[WeightingMode::Long]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn loo_contract_on_a_small_phantom_population() {
        let pop_cfg = PhantomPopulationConfig {
            subjects: 4,
            grid: (32, 32, 32),
            noise_fraction: 0.01,
            ..Default::default()
        };
        let pop = generate_population(&pop_cfg).unwrap();
        let mask = population_mask(&pop, 2).unwrap();
        let recs: Vec<TemplateRecord> = pop.into_iter().map(|p| p.record).collect();
        let atlas = generate_atlas(pop_cfg.grid, pop_cfg.spacing).unwrap();

        let cfg = small_cfg();
        let modes = [WeightingMode::Long, WeightingMode::Intensity];
        let res = run_loo(&recs, &atlas, &mask, &cfg, &modes).unwrap();

        // fold count × modes
        assert_eq!(res.rows.len(), 4 * 2);
        // the excluded subject never appears in its own fold's selection
        for sel in &res.selections {
            assert!(!sel.selected.contains(&sel.subject_id));
            assert_eq!(sel.selected.len(), 1); // k = 1
        }
        // REAL identical across modes per subject
        for id in ["s01", "s02", "s03", "s04"] {
            let reals: Vec<f64> = res
                .rows
                .iter()
                .filter(|r| r.subject_id == id)
                .map(|r| r.real)
                .collect();
            assert!(reals.windows(2).all(|w| w[0] == w[1]));
        }
        // rescaled columns are zero-mean with max |v| = 1 per mode
        for &mode in &modes {
            let col: Vec<f64> = res
                .rows_for_mode(mode)
                .iter()
                .map(|r| r.p_b_rescaled)
                .collect();
            let mean = col.iter().sum::<f64>() / col.len() as f64;
            assert!(mean.abs() < 1e-12);
            let max_abs = col.iter().fold(0.0f64, |m, &x| m.max(x.abs()));
            assert!((max_abs - 1.0).abs() < 1e-12);
        }
        // ranks are a permutation of 1..=n
        let mut ranks: Vec<usize> = res
            .rows_for_mode(WeightingMode::Long)
            .iter()
            .map(|r| r.sort_rank)
            .collect();
        ranks.sort_unstable();
        assert_eq!(ranks, vec![1, 2, 3, 4]);

        // determinism: a second run is identical
        let res2 = run_loo(&recs, &atlas, &mask, &cfg, &modes).unwrap();
        for (a, b) in res.rows.iter().zip(&res2.rows) {
            assert_eq!(a.subject_id, b.subject_id);
            assert_eq!(a.p_b, b.p_b);
            assert_eq!(a.p_ra, b.p_ra);
            assert_eq!(a.real, b.real);
        }
    }

    #[test]
    fn rescaled_columns_preserve_order() {
        // rank correlation 1 between raw and rescaled columns
        let raw = vec![0.4, 0.1, 0.9, 0.3];
        let rescaled = normalize_distances(&raw).unwrap();
        let mut order_raw: Vec<usize> = (0..raw.len()).collect();
        order_raw.sort_by(|&i, &j| raw[i].partial_cmp(&raw[j]).unwrap());
        let mut order_rescaled: Vec<usize> = (0..raw.len()).collect();
        order_rescaled.sort_by(|&i, &j| rescaled[i].partial_cmp(&rescaled[j]).unwrap());
        assert_eq!(order_raw, order_rescaled);
    }
}
