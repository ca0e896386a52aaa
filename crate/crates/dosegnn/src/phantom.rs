//! Deterministic synthetic treatment plans with an analytic ground-truth
//! dose.
//!
//! Each case is a body ellipsoid (0 HU) in air (-1000 HU) with a spherical
//! PTV (+80 HU) and optional OAR spheres (-40 HU), imaged on a CT grid, plus
//! a dose volume on a separate, deliberately mismatched grid (different
//! origin, spacing, and size). The dose is
//!
//! ```text
//! D(p) = Rx * (1 + a*cos(theta)) / (1 + a) * exp(-max(0, r - R) / tau)
//! ```
//!
//! with `r` the distance from the PTV center, `theta` the polar angle
//! against +z (defined as 0 at `r = 0`), `R` the PTV radius, `a` the angular
//! amplitude, and `tau` the falloff length. Distance and angle to the PTV
//! center are therefore sufficient statistics of the field, so predictors
//! that can exploit them have headroom over purely image-driven baselines.
//!
//! Generation is a pure function of `(config, case_index)` via the splitmix
//! stream in [`crate::rng`], so regenerating a case is byte-identical.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{child_seed, streams, SplitMix64};
use crate::volume::{
    read_bundle, write_bundle, GridGeometry, GridRef, PlanBundle, StructureMask, VoxelGrid,
};

const HU_AIR: f32 = -1000.0;
const HU_BODY: f32 = 0.0;
const HU_OAR: f32 = -40.0;
const HU_PTV: f32 = 80.0;

/// Body ellipsoid semi-axes as a fraction of the CT physical extent.
const BODY_FRACTION: f64 = 0.45;
/// PTV centers are drawn within this fraction of the dose-grid span around
/// its center.
const PTV_REGION_FRACTION: f64 = 0.2;
/// OAR radii relative to a draw from `ptv_radius_range`.
const OAR_RADIUS_FRACTION: f64 = 0.5;
/// Minimum clearance between sphere surfaces, mm.
const SPHERE_CLEARANCE: f64 = 2.0;
const MAX_PLACEMENT_TRIES: usize = 100;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomConfig {
    pub seed: u64,
    pub ct_dims: [usize; 3],
    pub dose_dims: [usize; 3],
    pub ct_spacing: [f64; 3],
    pub dose_spacing: [f64; 3],
    /// Requested half-range of the random dose-origin offset per axis, mm.
    /// The realized offset is additionally limited by the slack the dose
    /// grid has inside the CT extent.
    pub dose_origin_jitter: f64,
    pub ptv_radius_range: [f64; 2],
    pub prescription_dose: f64,
    pub falloff_tau: f64,
    pub angular_amplitude: f64,
    pub n_oars: usize,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        PhantomConfig {
            seed: 0,
            ct_dims: [48, 48, 48],
            dose_dims: [20, 20, 20],
            ct_spacing: [1.0, 1.0, 1.0],
            dose_spacing: [2.5, 2.5, 2.5],
            dose_origin_jitter: 3.0,
            ptv_radius_range: [8.0, 14.0],
            prescription_dose: 60.0,
            falloff_tau: 8.0,
            angular_amplitude: 0.3,
            n_oars: 2,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.ct_spacing[a] > 0.0) || !(self.dose_spacing[a] > 0.0) {
                return Err(Error::InvalidConfig("spacing must be positive".into()));
            }
            if self.ct_dims[a] == 0 || self.dose_dims[a] == 0 {
                return Err(Error::InvalidConfig("dims must be >= 1".into()));
            }
        }
        if !(0.0..1.0).contains(&self.angular_amplitude) {
            return Err(Error::InvalidConfig(format!(
                "angular_amplitude must be in [0, 1), got {}",
                self.angular_amplitude
            )));
        }
        if !(self.falloff_tau > 0.0) {
            return Err(Error::InvalidConfig("falloff_tau must be positive".into()));
        }
        if !(self.prescription_dose > 0.0) {
            return Err(Error::InvalidConfig(
                "prescription_dose must be positive".into(),
            ));
        }
        if !(self.ptv_radius_range[0] > 0.0)
            || self.ptv_radius_range[1] < self.ptv_radius_range[0]
        {
            return Err(Error::InvalidConfig(format!(
                "ptv_radius_range must be 0 < lo <= hi, got {:?}",
                self.ptv_radius_range
            )));
        }
        if !(self.dose_origin_jitter >= 0.0) {
            return Err(Error::InvalidConfig("jitter must be >= 0".into()));
        }
        // The dose voxel-center box must fit inside the CT physical extent
        // for at least the centered placement; otherwise dose samples would
        // fall outside the imaged volume.
        let ct = self.ct_geometry();
        let (ct_lo, ct_hi) = ct.physical_bounds();
        for a in 0..3 {
            let span = (self.dose_dims[a] - 1) as f64 * self.dose_spacing[a];
            if ct_hi[a] - ct_lo[a] < span {
                return Err(Error::InvalidConfig(format!(
                    "dose grid cannot fit inside CT extent on axis {a}: \
                     dose center span {span} mm exceeds CT extent {} mm",
                    ct_hi[a] - ct_lo[a]
                )));
            }
        }
        Ok(())
    }

    /// CT geometry; the CT origin anchors the world frame at zero.
    pub fn ct_geometry(&self) -> GridGeometry {
        GridGeometry {
            origin: [0.0; 3],
            spacing: self.ct_spacing,
            dims: self.ct_dims,
        }
    }
}

/// Seeded ground-truth parameters of a case, for diagnostics and tests.
#[derive(Debug, Clone)]
pub struct PhantomTruth {
    pub ptv_center: [f64; 3],
    pub ptv_radius: f64,
    pub oar_centers: Vec<[f64; 3]>,
    pub oar_radii: Vec<f64>,
    pub dose_origin: [f64; 3],
}

/// Analytic dose at world point `p`, in Gy.
pub fn analytic_dose(
    p: [f64; 3],
    ptv_center: [f64; 3],
    ptv_radius: f64,
    cfg: &PhantomConfig,
) -> f64 {
    let dx = p[0] - ptv_center[0];
    let dy = p[1] - ptv_center[1];
    let dz = p[2] - ptv_center[2];
    let r = (dx * dx + dy * dy + dz * dz).sqrt();
    let cos_theta = if r == 0.0 { 1.0 } else { dz / r };
    let a = cfg.angular_amplitude;
    let angular = (1.0 + a * cos_theta) / (1.0 + a);
    let falloff = (-((r - ptv_radius).max(0.0)) / cfg.falloff_tau).exp();
    cfg.prescription_dose * angular * falloff
}

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    (dx * dx + dy * dy + dz * dz).sqrt()
}

/// A sphere of radius `r` at `c` fits inside the body ellipsoid
/// (`center`, `semi`) with margin: conservative containment test.
fn sphere_in_ellipsoid(c: [f64; 3], r: f64, center: [f64; 3], semi: [f64; 3]) -> bool {
    let mut norm2 = 0.0;
    let mut min_semi = f64::INFINITY;
    for a in 0..3 {
        let t = (c[a] - center[a]) / semi[a];
        norm2 += t * t;
        min_semi = min_semi.min(semi[a]);
    }
    norm2.sqrt() + r / min_semi <= 0.95
}

pub fn generate_phantom(cfg: &PhantomConfig, case_index: u64) -> Result<PlanBundle> {
    generate_phantom_detailed(cfg, case_index).map(|(bundle, _)| bundle)
}

pub fn generate_phantom_detailed(
    cfg: &PhantomConfig,
    case_index: u64,
) -> Result<(PlanBundle, PhantomTruth)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(child_seed(
        child_seed(cfg.seed, streams::PHANTOM),
        case_index,
    ));

    let ct_geom = cfg.ct_geometry();
    let (ct_lo, ct_hi) = ct_geom.physical_bounds();

    // Dose origin: centered placement plus jitter, limited per axis to the
    // slack that keeps every dose voxel center inside the CT extent.
    let mut dose_origin = [0.0; 3];
    for a in 0..3 {
        let span = (cfg.dose_dims[a] - 1) as f64 * cfg.dose_spacing[a];
        let lo = ct_lo[a];
        let hi = ct_hi[a] - span;
        let mid = 0.5 * (lo + hi);
        let half = cfg.dose_origin_jitter.min(0.5 * (hi - lo));
        dose_origin[a] = mid + rng.uniform(-half, half);
    }
    let dose_geom = GridGeometry {
        origin: dose_origin,
        spacing: cfg.dose_spacing,
        dims: cfg.dose_dims,
    };

    // Body ellipsoid.
    let mut body_center = [0.0; 3];
    let mut body_semi = [0.0; 3];
    for a in 0..3 {
        body_center[a] = 0.5 * (ct_lo[a] + ct_hi[a]);
        body_semi[a] = BODY_FRACTION * (ct_hi[a] - ct_lo[a]);
    }

    // PTV sphere near the dose-grid center, inside the body.
    let ptv_radius = rng.uniform(cfg.ptv_radius_range[0], cfg.ptv_radius_range[1]);
    let (dose_clo, dose_chi) = dose_geom.center_bounds();
    let mut ptv_center = None;
    for _ in 0..MAX_PLACEMENT_TRIES {
        let mut c = [0.0; 3];
        for a in 0..3 {
            let mid = 0.5 * (dose_clo[a] + dose_chi[a]);
            let half = PTV_REGION_FRACTION * (dose_chi[a] - dose_clo[a]);
            c[a] = mid + rng.uniform(-half, half);
        }
        if sphere_in_ellipsoid(c, ptv_radius, body_center, body_semi) {
            ptv_center = Some(c);
            break;
        }
    }
    let ptv_center = ptv_center.ok_or_else(|| {
        Error::InvalidConfig(format!(
            "could not place a PTV of radius {ptv_radius:.1} mm inside the body \
             after {MAX_PLACEMENT_TRIES} tries; enlarge the CT or shrink ptv_radius_range"
        ))
    })?;

    // OAR spheres: placed just outside the PTV within the dose falloff
    // region, pulled back toward the body center when they would poke out.
    // Overlap between OARs is avoided on a best-effort basis; on exhausted
    // tries the last candidate is accepted (masks stay distinct either way).
    let (ct_clo, ct_chi) = ct_geom.center_bounds();
    let mut oar_centers: Vec<[f64; 3]> = Vec::with_capacity(cfg.n_oars);
    let mut oar_radii: Vec<f64> = Vec::with_capacity(cfg.n_oars);
    for _ in 0..cfg.n_oars {
        let r = OAR_RADIUS_FRACTION * rng.uniform(cfg.ptv_radius_range[0], cfg.ptv_radius_range[1]);
        let mut chosen = None;
        for attempt in 0..MAX_PLACEMENT_TRIES {
            let u = rng.uniform(-1.0, 1.0);
            let phi = rng.uniform(0.0, std::f64::consts::TAU);
            let s = (1.0 - u * u).max(0.0).sqrt();
            let dir = [s * phi.cos(), s * phi.sin(), u];
            let rad =
                ptv_radius + r + SPHERE_CLEARANCE + rng.uniform(0.0, cfg.falloff_tau);
            let mut c = [0.0; 3];
            for a in 0..3 {
                c[a] = ptv_center[a] + rad * dir[a];
            }
            // Keep the center inside 90% of the body ellipsoid.
            let mut norm2 = 0.0;
            for a in 0..3 {
                let t = (c[a] - body_center[a]) / body_semi[a];
                norm2 += t * t;
            }
            let norm = norm2.sqrt();
            if norm > 0.9 {
                for a in 0..3 {
                    c[a] = body_center[a] + (c[a] - body_center[a]) * (0.9 / norm);
                }
            }
            for a in 0..3 {
                c[a] = c[a].clamp(ct_clo[a], ct_chi[a]);
            }
            let clear_of_ptv = dist(c, ptv_center) >= ptv_radius + r;
            let clear_of_oars = oar_centers
                .iter()
                .zip(&oar_radii)
                .all(|(oc, or)| dist(c, *oc) >= r + or);
            if (clear_of_ptv && clear_of_oars) || attempt == MAX_PLACEMENT_TRIES - 1 {
                chosen = Some(c);
                break;
            }
        }
        oar_centers.push(chosen.expect("loop always chooses"));
        oar_radii.push(r);
    }

    // CT volume and masks on the CT grid.
    let n_ct = ct_geom.num_voxels();
    let mut hu = vec![HU_AIR; n_ct];
    let mut ptv_mask = vec![false; n_ct];
    let mut oar_masks = vec![vec![false; n_ct]; cfg.n_oars];
    let mut flat = 0usize;
    for z in 0..cfg.ct_dims[2] {
        let wz = z as f64 * cfg.ct_spacing[2];
        for y in 0..cfg.ct_dims[1] {
            let wy = y as f64 * cfg.ct_spacing[1];
            for x in 0..cfg.ct_dims[0] {
                let p = [x as f64 * cfg.ct_spacing[0], wy, wz];
                let mut in_body = 0.0;
                for a in 0..3 {
                    let t = (p[a] - body_center[a]) / body_semi[a];
                    in_body += t * t;
                }
                if in_body <= 1.0 {
                    hu[flat] = HU_BODY;
                }
                for (i, (oc, or)) in oar_centers.iter().zip(&oar_radii).enumerate() {
                    if dist(p, *oc) <= *or {
                        hu[flat] = HU_OAR;
                        oar_masks[i][flat] = true;
                    }
                }
                if dist(p, ptv_center) <= ptv_radius {
                    hu[flat] = HU_PTV;
                    ptv_mask[flat] = true;
                }
                flat += 1;
            }
        }
    }

    // Ground-truth dose on the dose grid.
    let dose_values: Vec<f32> = dose_geom
        .voxel_centers()
        .iter()
        .map(|&p| analytic_dose(p, ptv_center, ptv_radius, cfg) as f32)
        .collect();

    let mut structures = vec![StructureMask {
        name: "PTV".into(),
        grid_ref: GridRef::Ct,
        values: ptv_mask,
    }];
    for (i, mask) in oar_masks.into_iter().enumerate() {
        structures.push(StructureMask {
            name: format!("OAR_{i}"),
            grid_ref: GridRef::Ct,
            values: mask,
        });
    }

    let bundle = PlanBundle::new(
        VoxelGrid::new(ct_geom, hu, "HU")?,
        dose_geom,
        Some(VoxelGrid::new(dose_geom, dose_values, "Gy")?),
        structures,
        cfg.prescription_dose,
    )?;
    let truth = PhantomTruth {
        ptv_center,
        ptv_radius,
        oar_centers,
        oar_radii,
        dose_origin,
    };
    Ok((bundle, truth))
}

pub fn generate_dataset(cfg: &PhantomConfig, count: usize) -> Result<Vec<PlanBundle>> {
    if count == 0 {
        return Err(Error::InvalidConfig("dataset count must be >= 1".into()));
    }
    (0..count as u64).map(|i| generate_phantom(cfg, i)).collect()
}

// --- dataset directory layout ------------------------------------------------

#[derive(Serialize, Deserialize)]
struct DatasetManifest {
    seed: u64,
    count: usize,
    config: PhantomConfig,
    cases: Vec<String>,
}

/// Writes `case_0000/...` bundle directories plus `dataset.json`.
pub fn write_dataset(dir: &Path, cfg: &PhantomConfig, bundles: &[PlanBundle]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut cases = Vec::with_capacity(bundles.len());
    for (i, bundle) in bundles.iter().enumerate() {
        let name = format!("case_{i:04}");
        write_bundle(bundle, &dir.join(&name))?;
        cases.push(name);
    }
    let manifest = DatasetManifest {
        seed: cfg.seed,
        count: bundles.len(),
        config: cfg.clone(),
        cases,
    };
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap())
        .map_err(|e| Error::io(&path, e))?;
    Ok(())
}

/// Loads every case listed in `dataset.json`, in manifest order. Returns the
/// case names alongside the bundles.
pub fn load_dataset(dir: &Path) -> Result<Vec<(String, PlanBundle)>> {
    let path = dir.join("dataset.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&path, e.to_string()))?;
    manifest
        .cases
        .iter()
        .map(|name| Ok((name.clone(), read_bundle(&dir.join(name))?)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        PhantomConfig::default().validate().unwrap();
    }

    #[test]
    fn dose_at_ptv_center_is_prescription() {
        let cfg = PhantomConfig::default();
        let c = [10.0, 20.0, 30.0];
        assert_eq!(analytic_dose(c, c, 10.0, &cfg), cfg.prescription_dose);
    }

    #[test]
    fn dose_at_radius_plus_tau_matches_closed_form() {
        let mut cfg = PhantomConfig::default();
        cfg.angular_amplitude = 0.0;
        let c = [0.0; 3];
        let radius = 10.0;
        let p = [radius + cfg.falloff_tau, 0.0, 0.0];
        let expected = cfg.prescription_dose * (-1.0f64).exp();
        assert!((analytic_dose(p, c, radius, &cfg) - expected).abs() < 1e-12);
    }

    #[test]
    fn dose_positive_and_radially_non_increasing() {
        let cfg = PhantomConfig::default();
        let c = [24.0, 24.0, 24.0];
        let radius = 10.0;
        // Sample rays in several directions.
        let dirs = [
            [1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0],
            [0.0, 0.0, -1.0],
            [0.577, 0.577, 0.577],
            [-0.707, 0.707, 0.0],
        ];
        for d in dirs {
            let mut last = f64::INFINITY;
            for step in 0..60 {
                let t = step as f64 * 0.5;
                let p = [c[0] + t * d[0], c[1] + t * d[1], c[2] + t * d[2]];
                let dose = analytic_dose(p, c, radius, &cfg);
                assert!(dose > 0.0);
                assert!(dose <= last + 1e-12);
                last = dose;
            }
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let mut cfg = PhantomConfig::default();
        cfg.seed = 42;
        let a = generate_phantom(&cfg, 3).unwrap();
        let b = generate_phantom(&cfg, 3).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.ct.values), bits(&b.ct.values));
        assert_eq!(
            bits(&a.dose.as_ref().unwrap().values),
            bits(&b.dose.as_ref().unwrap().values)
        );
        assert_eq!(a.dose_geom, b.dose_geom);
        assert_eq!(a.ptv_center, b.ptv_center);
        // Different case index gives a different phantom.
        let c = generate_phantom(&cfg, 4).unwrap();
        assert_ne!(a.dose_geom.origin, c.dose_geom.origin);
    }

    #[test]
    fn grids_are_mismatched_and_contained() {
        let mut cfg = PhantomConfig::default();
        cfg.seed = 7;
        for i in 0..5 {
            let (bundle, truth) = generate_phantom_detailed(&cfg, i).unwrap();
            assert_ne!(bundle.ct.geom.origin, bundle.dose_geom.origin);
            assert_ne!(bundle.ct.geom.spacing, bundle.dose_geom.spacing);
            assert_ne!(bundle.ct.geom.dims, bundle.dose_geom.dims);
            // Every dose voxel center sits inside the CT physical extent.
            let (lo, hi) = bundle.ct.geom.physical_bounds();
            let (dlo, dhi) = bundle.dose_geom.center_bounds();
            for a in 0..3 {
                assert!(dlo[a] >= lo[a] && dhi[a] <= hi[a]);
            }
            // PTV mask centroid within one CT spacing of the seeded center.
            let d = dist(bundle.ptv_center, truth.ptv_center);
            assert!(
                d <= bundle.ct.geom.spacing.iter().cloned().fold(0.0, f64::max),
                "centroid drifted {d} mm from seeded center"
            );
        }
    }

    #[test]
    fn dataset_count_and_dose_bounded_by_prescription() {
        let mut cfg = PhantomConfig::default();
        cfg.seed = 7;
        let bundles = generate_dataset(&cfg, 20).unwrap();
        assert_eq!(bundles.len(), 20);
        for b in &bundles {
            assert!(b.ptv().count_true() > 0);
            let max = b
                .dose
                .as_ref()
                .unwrap()
                .values
                .iter()
                .cloned()
                .fold(f32::MIN, f32::max);
            assert!(f64::from(max) <= cfg.prescription_dose + 1e-6);
        }
        assert_eq!(generate_dataset(&cfg, 1).unwrap().len(), 1);
    }

    #[test]
    fn grid_values_match_analytic_dose() {
        let mut cfg = PhantomConfig::default();
        cfg.seed = 13;
        let (bundle, truth) = generate_phantom_detailed(&cfg, 0).unwrap();
        let dose = bundle.dose.as_ref().unwrap();
        for (flat, p) in bundle.dose_geom.voxel_centers().iter().enumerate() {
            let expected = analytic_dose(*p, truth.ptv_center, truth.ptv_radius, &cfg) as f32;
            assert_eq!(dose.values[flat].to_bits(), expected.to_bits());
        }
    }

    #[test]
    fn unfittable_dose_grid_is_rejected() {
        let mut cfg = PhantomConfig::default();
        cfg.dose_dims = [60, 20, 20]; // 147.5 mm span vs 48 mm CT extent
        assert!(matches!(cfg.validate(), Err(Error::InvalidConfig(_))));
    }
}
