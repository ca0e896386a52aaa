//! Metrics and histogram analytics: RMSE, cumulative dose-volume histograms,
//! and the multi-model comparison report.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::model::Model;
use crate::volume::{GridGeometry, GridRef, PlanBundle, StructureMask};

/// Root mean square error over paired dose vectors, Gy.
pub fn rmse(pred: &[f64], truth: &[f64]) -> Result<f64> {
    if pred.len() != truth.len() || pred.is_empty() {
        return Err(Error::Eval(format!(
            "rmse needs equal non-empty lengths, got {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let mut sum = 0.0;
    for (p, t) in pred.iter().zip(truth) {
        let d = p - t;
        sum += d * d;
    }
    Ok((sum / pred.len() as f64).sqrt())
}

/// Cumulative dose-volume histogram samples for one structure:
/// `volume_pct[i]` is the percentage of the structure receiving at least
/// `dose_gy[i]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DvhCurve {
    pub structure: String,
    pub dose_gy: Vec<f64>,
    pub volume_pct: Vec<f64>,
}

/// `n` thresholds from 0 to `1.1 * prescription` inclusive, so the curve
/// provably reaches zero for any physical dose.
pub fn default_bins(prescription_dose: f64, n: usize) -> Vec<f64> {
    let top = 1.1 * prescription_dose;
    (0..n)
        .map(|i| top * i as f64 / (n - 1) as f64)
        .collect()
}

pub const DEFAULT_CDVH_BINS: usize = 100;

/// CDVH of `dose` over the voxels selected by `mask` (both on the dose
/// grid), with inclusive `>=` at each threshold.
pub fn cdvh(dose: &[f64], mask: &[bool], structure: &str, bins: &[f64]) -> Result<DvhCurve> {
    if dose.len() != mask.len() {
        return Err(Error::Eval(format!(
            "dose ({}) and mask ({}) lengths differ",
            dose.len(),
            mask.len()
        )));
    }
    if bins.is_empty() || bins.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Eval("bins must be ascending and non-empty".into()));
    }
    let selected: Vec<f64> = dose
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&d, _)| d)
        .collect();
    if selected.is_empty() {
        return Err(Error::EmptyMask(structure.to_string()));
    }
    let n = selected.len() as f64;
    let volume_pct = bins
        .iter()
        .map(|&t| {
            let count = selected.iter().filter(|&&d| d >= t).count();
            100.0 * count as f64 / n
        })
        .collect();
    Ok(DvhCurve {
        structure: structure.to_string(),
        dose_gy: bins.to_vec(),
        volume_pct,
    })
}

/// Mean absolute vertical gap between two curves on identical bins.
pub fn cdvh_mean_abs_gap(a: &DvhCurve, b: &DvhCurve) -> Result<f64> {
    if a.dose_gy != b.dose_gy {
        return Err(Error::Eval("curves have different bins".into()));
    }
    let n = a.volume_pct.len() as f64;
    Ok(a.volume_pct
        .iter()
        .zip(&b.volume_pct)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Carries a CT-grid mask onto the dose grid: each dose voxel takes the mask
/// value of its nearest CT voxel. Dose-grid masks pass through unchanged.
pub fn mask_on_dose_grid(
    mask: &StructureMask,
    ct: &GridGeometry,
    dose: &GridGeometry,
) -> Vec<bool> {
    match mask.grid_ref {
        GridRef::Dose => mask.values.clone(),
        GridRef::Ct => dose
            .voxel_centers()
            .iter()
            .map(|&p| mask.values[ct.flat_index(ct.world_to_nearest_index(p))])
            .collect(),
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlanCurves {
    pub plan: String,
    pub curves: Vec<DvhCurve>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelReport {
    pub name: String,
    pub kind: String,
    pub config: serde_json::Value,
    /// One RMSE per test plan, in plan order, Gy.
    pub per_plan_rmse: Vec<f64>,
    pub mean_rmse: f64,
    /// Mean absolute PTV-CDVH gap to truth, percent points, averaged over
    /// bins and plans.
    pub mean_ptv_cdvh_gap: f64,
    pub cdvh: Vec<PlanCurves>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub graph: GraphConfig,
    pub plans: Vec<String>,
    pub truth_cdvh: Vec<PlanCurves>,
    pub models: Vec<ModelReport>,
}

/// Evaluates every model on every test plan: per-plan RMSE, mean RMSE, and
/// CDVH curves for truth and predictions on all structures (CT-grid masks
/// are carried over by nearest-voxel lookup).
pub fn compare_models(
    models: &[(&str, &Model)],
    plans: &[(&str, &PlanBundle)],
    graph_cfg: &GraphConfig,
) -> Result<EvalReport> {
    if models.is_empty() {
        return Err(Error::Usage("no models to evaluate".into()));
    }
    if plans.is_empty() {
        return Err(Error::Usage("no test plans".into()));
    }

    // Truth curves per plan.
    let mut truth_cdvh = Vec::with_capacity(plans.len());
    let mut truth_values: Vec<Vec<f64>> = Vec::with_capacity(plans.len());
    for (plan_name, plan) in plans {
        let truth = plan
            .dose_truth()
            .map_err(|e| Error::Eval(format!("plan '{plan_name}': {e}")))?;
        let values: Vec<f64> = truth.values.iter().map(|&v| f64::from(v)).collect();
        let bins = default_bins(plan.prescription_dose, DEFAULT_CDVH_BINS);
        let mut curves = Vec::new();
        for mask in &plan.structures {
            let dose_mask = mask_on_dose_grid(mask, &plan.ct.geom, &plan.dose_geom);
            curves.push(cdvh(&values, &dose_mask, &mask.name, &bins)?);
        }
        truth_cdvh.push(PlanCurves {
            plan: plan_name.to_string(),
            curves,
        });
        truth_values.push(values);
    }

    let mut model_reports = Vec::with_capacity(models.len());
    for (model_name, model) in models {
        let mut per_plan_rmse = Vec::with_capacity(plans.len());
        let mut cdvh_per_plan = Vec::with_capacity(plans.len());
        let mut gap_sum = 0.0;
        for (pi, (plan_name, plan)) in plans.iter().enumerate() {
            let pred = model.predict(plan, Some(graph_cfg)).map_err(|e| {
                Error::Incompatible {
                    model: model_name.to_string(),
                    plan: plan_name.to_string(),
                    detail: e.to_string(),
                }
            })?;
            per_plan_rmse.push(rmse(&pred, &truth_values[pi])?);
            let bins = default_bins(plan.prescription_dose, DEFAULT_CDVH_BINS);
            let mut curves = Vec::new();
            for mask in &plan.structures {
                let dose_mask = mask_on_dose_grid(mask, &plan.ct.geom, &plan.dose_geom);
                curves.push(cdvh(&pred, &dose_mask, &mask.name, &bins)?);
            }
            let ptv_pred = curves
                .iter()
                .find(|c| c.structure == "PTV")
                .ok_or_else(|| Error::Eval("plan without PTV curve".into()))?;
            let ptv_truth = truth_cdvh[pi]
                .curves
                .iter()
                .find(|c| c.structure == "PTV")
                .expect("truth curves include PTV");
            gap_sum += cdvh_mean_abs_gap(ptv_pred, ptv_truth)?;
            cdvh_per_plan.push(PlanCurves {
                plan: plan_name.to_string(),
                curves,
            });
        }
        let mean_rmse = per_plan_rmse.iter().sum::<f64>() / per_plan_rmse.len() as f64;
        model_reports.push(ModelReport {
            name: model_name.to_string(),
            kind: model.kind().to_string(),
            config: model.config_value(),
            per_plan_rmse,
            mean_rmse,
            mean_ptv_cdvh_gap: gap_sum / plans.len() as f64,
            cdvh: cdvh_per_plan,
        });
    }

    Ok(EvalReport {
        graph: *graph_cfg,
        plans: plans.iter().map(|(n, _)| n.to_string()).collect(),
        truth_cdvh,
        models: model_reports,
    })
}

/// Writes `metrics.json`; byte-identical for identical reports.
pub fn write_metrics_json(report: &EvalReport, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(report)
        .map_err(|e| Error::format(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes one `cdvh_<source>_<structure>.csv` per source ("truth" or a model
/// name) and structure, averaging the per-plan curves bin-wise. Requires
/// identical bins across plans (uniform prescriptions).
pub fn write_cdvh_csvs(report: &EvalReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut jobs: Vec<(String, &[PlanCurves])> = vec![("truth".to_string(), &report.truth_cdvh)];
    for m in &report.models {
        jobs.push((m.name.clone(), &m.cdvh));
    }
    for (source, plans) in jobs {
        // structure -> (bins, per-bin sums, plan count)
        let mut acc: BTreeMap<String, (Vec<f64>, Vec<f64>, usize)> = BTreeMap::new();
        for plan_curves in plans {
            for curve in &plan_curves.curves {
                let entry = acc.entry(curve.structure.clone()).or_insert_with(|| {
                    (curve.dose_gy.clone(), vec![0.0; curve.volume_pct.len()], 0)
                });
                if entry.0 != curve.dose_gy {
                    return Err(Error::Eval(format!(
                        "structure '{}' has mismatched bins across plans; \
                         cannot average CDVH curves",
                        curve.structure
                    )));
                }
                for (s, v) in entry.1.iter_mut().zip(&curve.volume_pct) {
                    *s += v;
                }
                entry.2 += 1;
            }
        }
        for (structure, (bins, sums, count)) in acc {
            let path = dir.join(format!("cdvh_{source}_{structure}.csv"));
            let mut text = String::from("dose_gy,volume_pct\n");
            for (b, s) in bins.iter().zip(&sums) {
                text.push_str(&format!("{:.6},{:.6}\n", b, s / count as f64));
            }
            fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        }
    }
    Ok(())
}
