//! Regular-grid volumetric data: grids with independent origin, spacing and
//! size, structure masks, and the on-disk plan bundle format.
//!
//! Geometry conventions: voxel coordinates refer to voxel *centers*; grids
//! are axis-aligned; flat storage is x-fastest, `flat = x + nx*(y + ny*z)`.
//! Values are 32-bit floats on disk and in memory; numeric work upcasts to
//! 64-bit.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Origin (mm, center of voxel `(0,0,0)`), per-axis spacing (mm) and voxel
/// counts of a regular axis-aligned grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridGeometry {
    pub origin: [f64; 3],
    pub spacing: [f64; 3],
    pub dims: [usize; 3],
}

impl GridGeometry {
    pub fn new(origin: [f64; 3], spacing: [f64; 3], dims: [usize; 3]) -> Result<Self> {
        let g = GridGeometry {
            origin,
            spacing,
            dims,
        };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        for a in 0..3 {
            if !(self.spacing[a] > 0.0) || !self.spacing[a].is_finite() {
                return Err(Error::InvalidGrid(format!(
                    "spacing must be positive and finite, got {} on axis {a}",
                    self.spacing[a]
                )));
            }
            if self.dims[a] == 0 {
                return Err(Error::InvalidGrid(format!("dims must be >= 1 on axis {a}")));
            }
            if !self.origin[a].is_finite() {
                return Err(Error::InvalidGrid(format!("origin not finite on axis {a}")));
            }
        }
        Ok(())
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    /// Flat index of `(x, y, z)`, x-fastest.
    pub fn flat_index(&self, idx: [usize; 3]) -> usize {
        idx[0] + self.dims[0] * (idx[1] + self.dims[1] * idx[2])
    }

    pub fn unflatten(&self, flat: usize) -> [usize; 3] {
        let x = flat % self.dims[0];
        let rest = flat / self.dims[0];
        [x, rest % self.dims[1], rest / self.dims[1]]
    }

    /// World position (mm) of the center of the voxel at `idx`.
    pub fn index_to_world(&self, idx: [usize; 3]) -> Result<[f64; 3]> {
        let mut p = [0.0; 3];
        for a in 0..3 {
            if idx[a] >= self.dims[a] {
                return Err(Error::IndexOutOfRange {
                    axis: a,
                    index: idx[a],
                    dim: self.dims[a],
                });
            }
            p[a] = self.origin[a] + idx[a] as f64 * self.spacing[a];
        }
        Ok(p)
    }

    /// Index of the voxel whose center is nearest to `p`, clamped into the
    /// grid. Ties at `.5` round half away from zero.
    pub fn world_to_nearest_index(&self, p: [f64; 3]) -> [usize; 3] {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let r = ((p[a] - self.origin[a]) / self.spacing[a]).round();
            let clamped = r.max(0.0).min((self.dims[a] - 1) as f64);
            idx[a] = clamped as usize;
        }
        idx
    }

    /// Centers of all voxels in flat (x-fastest) order.
    pub fn voxel_centers(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.num_voxels());
        for z in 0..self.dims[2] {
            let wz = self.origin[2] + z as f64 * self.spacing[2];
            for y in 0..self.dims[1] {
                let wy = self.origin[1] + y as f64 * self.spacing[1];
                for x in 0..self.dims[0] {
                    out.push([self.origin[0] + x as f64 * self.spacing[0], wy, wz]);
                }
            }
        }
        out
    }

    /// Bounding box of voxel centers: `[origin, origin + (dims-1)*spacing]`.
    pub fn center_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let mut hi = [0.0; 3];
        for a in 0..3 {
            hi[a] = self.origin[a] + (self.dims[a] - 1) as f64 * self.spacing[a];
        }
        (self.origin, hi)
    }

    /// Physical bounding box including voxel half-widths.
    pub fn physical_bounds(&self) -> ([f64; 3], [f64; 3]) {
        let (clo, chi) = self.center_bounds();
        let mut lo = [0.0; 3];
        let mut hi = [0.0; 3];
        for a in 0..3 {
            lo[a] = clo[a] - 0.5 * self.spacing[a];
            hi[a] = chi[a] + 0.5 * self.spacing[a];
        }
        (lo, hi)
    }
}

/// A scalar field on a regular grid. `unit` is a free-form label ("HU" for
/// CT, "Gy" for dose).
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelGrid {
    pub geom: GridGeometry,
    pub values: Vec<f32>,
    pub unit: String,
}

impl VoxelGrid {
    pub fn new(geom: GridGeometry, values: Vec<f32>, unit: impl Into<String>) -> Result<Self> {
        geom.validate()?;
        if values.len() != geom.num_voxels() {
            return Err(Error::InvalidGrid(format!(
                "values length {} does not match dims {:?} ({} voxels)",
                values.len(),
                geom.dims,
                geom.num_voxels()
            )));
        }
        Ok(VoxelGrid {
            geom,
            values,
            unit: unit.into(),
        })
    }

    pub fn value_at(&self, idx: [usize; 3]) -> f32 {
        self.values[self.geom.flat_index(idx)]
    }
}

/// Which grid of a plan a mask is defined on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GridRef {
    Ct,
    Dose,
}

impl std::fmt::Display for GridRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            GridRef::Ct => write!(f, "ct"),
            GridRef::Dose => write!(f, "dose"),
        }
    }
}

/// Boolean mask of one anatomical structure on the CT or dose grid.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureMask {
    pub name: String,
    pub grid_ref: GridRef,
    pub values: Vec<bool>,
}

impl StructureMask {
    pub fn count_true(&self) -> usize {
        self.values.iter().filter(|&&v| v).count()
    }
}

/// Unweighted mean of the world coordinates of the mask's true voxels.
pub fn mask_centroid(mask: &StructureMask, geom: &GridGeometry) -> Result<[f64; 3]> {
    if mask.values.len() != geom.num_voxels() {
        return Err(Error::InvalidGrid(format!(
            "mask '{}' length {} does not match grid ({} voxels)",
            mask.name,
            mask.values.len(),
            geom.num_voxels()
        )));
    }
    let mut sum = [0.0f64; 3];
    let mut n = 0usize;
    let mut flat = 0usize;
    for z in 0..geom.dims[2] {
        for y in 0..geom.dims[1] {
            for x in 0..geom.dims[0] {
                if mask.values[flat] {
                    sum[0] += geom.origin[0] + x as f64 * geom.spacing[0];
                    sum[1] += geom.origin[1] + y as f64 * geom.spacing[1];
                    sum[2] += geom.origin[2] + z as f64 * geom.spacing[2];
                    n += 1;
                }
                flat += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptyMask(mask.name.clone()));
    }
    Ok([sum[0] / n as f64, sum[1] / n as f64, sum[2] / n as f64])
}

/// One treatment case: CT, dose geometry (with ground-truth values unless the
/// bundle is inference-only), structure masks, prescription.
///
/// `ptv_center` is always recomputed from the PTV mask on construction, so a
/// stored bundle cannot drift from its mask.
#[derive(Debug, Clone)]
pub struct PlanBundle {
    pub ct: VoxelGrid,
    pub dose_geom: GridGeometry,
    /// Ground-truth dose; `None` for inference-only bundles.
    pub dose: Option<VoxelGrid>,
    pub structures: Vec<StructureMask>,
    pub prescription_dose: f64,
    pub ptv_center: [f64; 3],
}

impl PlanBundle {
    pub fn new(
        ct: VoxelGrid,
        dose_geom: GridGeometry,
        dose: Option<VoxelGrid>,
        structures: Vec<StructureMask>,
        prescription_dose: f64,
    ) -> Result<Self> {
        dose_geom.validate()?;
        if let Some(d) = &dose {
            if d.geom != dose_geom {
                return Err(Error::Bundle(
                    "dose values geometry differs from dose geometry".into(),
                ));
            }
        }
        if !(prescription_dose > 0.0) {
            return Err(Error::Bundle(format!(
                "prescription dose must be positive, got {prescription_dose}"
            )));
        }
        let mut names = HashSet::new();
        for s in &structures {
            if !names.insert(s.name.clone()) {
                return Err(Error::Bundle(format!("duplicate structure '{}'", s.name)));
            }
            let geom = match s.grid_ref {
                GridRef::Ct => &ct.geom,
                GridRef::Dose => &dose_geom,
            };
            if s.values.len() != geom.num_voxels() {
                return Err(Error::Bundle(format!(
                    "mask '{}' length {} does not match {} grid",
                    s.name,
                    s.values.len(),
                    s.grid_ref
                )));
            }
        }
        let n_ptv = structures.iter().filter(|s| s.name == "PTV").count();
        if n_ptv != 1 {
            return Err(Error::Bundle(format!(
                "expected exactly one structure named 'PTV', found {n_ptv}"
            )));
        }
        let ptv = structures.iter().find(|s| s.name == "PTV").unwrap();
        let ptv_grid = match ptv.grid_ref {
            GridRef::Ct => &ct.geom,
            GridRef::Dose => &dose_geom,
        };
        let ptv_center = mask_centroid(ptv, ptv_grid)?;
        Ok(PlanBundle {
            ct,
            dose_geom,
            dose,
            structures,
            prescription_dose,
            ptv_center,
        })
    }

    pub fn ptv(&self) -> &StructureMask {
        self.structures
            .iter()
            .find(|s| s.name == "PTV")
            .expect("validated at construction")
    }

    pub fn grid_of(&self, mask: &StructureMask) -> &GridGeometry {
        match mask.grid_ref {
            GridRef::Ct => &self.ct.geom,
            GridRef::Dose => &self.dose_geom,
        }
    }

    /// Ground-truth dose values, or an error for inference-only bundles.
    pub fn dose_truth(&self) -> Result<&VoxelGrid> {
        self.dose
            .as_ref()
            .ok_or_else(|| Error::Bundle("bundle has no ground-truth dose".into()))
    }
}

// --- on-disk bundle format -------------------------------------------------
//
// A bundle is a directory with a `plan.json` manifest plus raw arrays:
// volumes as little-endian f32 in flat x-fastest order, masks as bytes 0/1.

#[derive(Serialize, Deserialize)]
struct ManifestGrid {
    origin: [f64; 3],
    spacing: [f64; 3],
    dims: [usize; 3],
    #[serde(skip_serializing_if = "Option::is_none")]
    file: Option<String>,
    unit: String,
}

#[derive(Serialize, Deserialize)]
struct ManifestStructure {
    name: String,
    grid: GridRef,
    file: String,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    ct: ManifestGrid,
    dose: ManifestGrid,
    structures: Vec<ManifestStructure>,
    prescription_dose: f64,
}

fn check_file_name(path: &Path, name: &str) -> Result<()> {
    if name.is_empty() || name.contains('/') || name.contains('\\') || name.starts_with('.') {
        return Err(Error::format(path, format!("unsafe file reference '{name}'")));
    }
    Ok(())
}

pub fn write_f32_raw(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_f32_raw(path: &Path, expected_len: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len * 4 {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected_len * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_mask_raw(path: &Path, values: &[bool]) -> Result<()> {
    let bytes: Vec<u8> = values.iter().map(|&b| b as u8).collect();
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn read_mask_raw(path: &Path, expected_len: usize) -> Result<Vec<bool>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_len {
        return Err(Error::format(
            path,
            format!("expected {} bytes, found {}", expected_len, bytes.len()),
        ));
    }
    bytes
        .iter()
        .map(|&b| match b {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::format(path, format!("mask byte {other} is not 0/1"))),
        })
        .collect()
}

/// Writes a bundle directory; reading it back reproduces identical float bit
/// patterns.
pub fn write_bundle(bundle: &PlanBundle, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        ct: ManifestGrid {
            origin: bundle.ct.geom.origin,
            spacing: bundle.ct.geom.spacing,
            dims: bundle.ct.geom.dims,
            file: Some("ct.f32".into()),
            unit: bundle.ct.unit.clone(),
        },
        dose: ManifestGrid {
            origin: bundle.dose_geom.origin,
            spacing: bundle.dose_geom.spacing,
            dims: bundle.dose_geom.dims,
            file: bundle.dose.as_ref().map(|_| "dose.f32".to_string()),
            unit: bundle
                .dose
                .as_ref()
                .map(|d| d.unit.clone())
                .unwrap_or_else(|| "Gy".into()),
        },
        structures: bundle
            .structures
            .iter()
            .map(|s| ManifestStructure {
                name: s.name.clone(),
                grid: s.grid_ref,
                file: format!("{}.u8", s.name),
            })
            .collect(),
        prescription_dose: bundle.prescription_dose,
    };
    let manifest_path = dir.join("plan.json");
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::format(&manifest_path, e.to_string()))?;
    fs::write(&manifest_path, json).map_err(|e| Error::io(&manifest_path, e))?;

    write_f32_raw(&dir.join("ct.f32"), &bundle.ct.values)?;
    if let Some(dose) = &bundle.dose {
        write_f32_raw(&dir.join("dose.f32"), &dose.values)?;
    }
    for s in &bundle.structures {
        check_file_name(dir, &format!("{}.u8", s.name))?;
        write_mask_raw(&dir.join(format!("{}.u8", s.name)), &s.values)?;
    }
    Ok(())
}

/// Reads a bundle directory written by [`write_bundle`] (or by hand in the
/// same layout).
pub fn read_bundle(dir: &Path) -> Result<PlanBundle> {
    let manifest_path = dir.join("plan.json");
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::format(&manifest_path, e.to_string()))?;

    let ct_geom = GridGeometry::new(manifest.ct.origin, manifest.ct.spacing, manifest.ct.dims)?;
    let ct_file = manifest
        .ct
        .file
        .as_deref()
        .ok_or_else(|| Error::format(&manifest_path, "ct entry has no file"))?;
    check_file_name(&manifest_path, ct_file)?;
    let ct_values = read_f32_raw(&dir.join(ct_file), ct_geom.num_voxels())?;
    let ct = VoxelGrid::new(ct_geom, ct_values, manifest.ct.unit.clone())?;

    let dose_geom = GridGeometry::new(
        manifest.dose.origin,
        manifest.dose.spacing,
        manifest.dose.dims,
    )?;
    let dose = match &manifest.dose.file {
        Some(file) => {
            check_file_name(&manifest_path, file)?;
            let values = read_f32_raw(&dir.join(file), dose_geom.num_voxels())?;
            Some(VoxelGrid::new(dose_geom, values, manifest.dose.unit.clone())?)
        }
        None => None,
    };

    let mut structures = Vec::with_capacity(manifest.structures.len());
    for s in &manifest.structures {
        check_file_name(&manifest_path, &s.file)?;
        let geom = match s.grid {
            GridRef::Ct => &ct.geom,
            GridRef::Dose => &dose_geom,
        };
        let values = read_mask_raw(&dir.join(&s.file), geom.num_voxels())?;
        structures.push(StructureMask {
            name: s.name.clone(),
            grid_ref: s.grid,
            values,
        });
    }

    PlanBundle::new(ct, dose_geom, dose, structures, manifest.prescription_dose)
}

/// Writes a predicted dose volume (`pred.f32` + `pred.json` geometry echo).
pub fn write_prediction(
    dir: &Path,
    geom: &GridGeometry,
    values_gy: &[f64],
    config_echo: serde_json::Value,
) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let f32_values: Vec<f32> = values_gy.iter().map(|&v| v as f32).collect();
    let pred_path = dir.join("pred.f32");
    write_f32_raw(&pred_path, &f32_values)?;
    let meta = serde_json::json!({
        "origin": geom.origin,
        "spacing": geom.spacing,
        "dims": geom.dims,
        "unit": "Gy",
        "file": "pred.f32",
        "config": config_echo,
    });
    let meta_path = dir.join("pred.json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta).unwrap())
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(pred_path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    fn geom(origin: [f64; 3], spacing: [f64; 3], dims: [usize; 3]) -> GridGeometry {
        GridGeometry::new(origin, spacing, dims).unwrap()
    }

    #[test]
    fn index_to_world_examples() {
        let g = geom([0.0, 0.0, 0.0], [2.0, 2.0, 2.0], [8, 8, 8]);
        assert_eq!(g.index_to_world([2, 3, 4]).unwrap(), [4.0, 6.0, 8.0]);

        let g = geom([-5.0, 0.0, 1.0], [1.0, 1.0, 1.0], [4, 4, 4]);
        assert_eq!(g.index_to_world([0, 0, 0]).unwrap(), [-5.0, 0.0, 1.0]);

        let g = geom([0.0, 0.0, 0.0], [1.5, 2.5, 3.0], [4, 4, 4]);
        assert_eq!(g.index_to_world([1, 1, 1]).unwrap(), [1.5, 2.5, 3.0]);
    }

    #[test]
    fn index_to_world_names_failing_axis() {
        let g = geom([0.0; 3], [1.0; 3], [4, 5, 6]);
        match g.index_to_world([0, 5, 0]) {
            Err(Error::IndexOutOfRange { axis, index, dim }) => {
                assert_eq!((axis, index, dim), (1, 5, 5));
            }
            other => panic!("expected IndexOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn nearest_index_examples() {
        let g = geom([0.0; 3], [2.0; 3], [10, 10, 10]);
        assert_eq!(g.world_to_nearest_index([4.9, 0.0, 0.0]), [2, 0, 0]);
        // Far outside clamps to the border.
        let g1 = geom([0.0; 3], [1.0; 3], [10, 10, 10]);
        assert_eq!(g1.world_to_nearest_index([-100.0, 0.0, 0.0]), [0, 0, 0]);
        assert_eq!(g1.world_to_nearest_index([100.0, 0.0, 0.0]), [9, 0, 0]);
        // Exactly between centers rounds up (half away from zero).
        assert_eq!(g.world_to_nearest_index([1.0, 0.0, 0.0]), [1, 0, 0]);
    }

    #[test]
    fn nearest_index_round_trips_voxel_centers() {
        let g = geom([-7.0, 3.0, 0.25], [0.5, 1.25, 2.0], [9, 7, 5]);
        for z in 0..5 {
            for y in 0..7 {
                for x in 0..9 {
                    let p = g.index_to_world([x, y, z]).unwrap();
                    assert_eq!(g.world_to_nearest_index(p), [x, y, z]);
                }
            }
        }
    }

    #[test]
    fn voxel_centers_examples_and_order() {
        let g = geom([3.0, 3.0, 3.0], [1.0; 3], [1, 1, 1]);
        assert_eq!(g.voxel_centers(), vec![[3.0, 3.0, 3.0]]);

        let g = geom([0.0; 3], [1.0; 3], [2, 1, 1]);
        assert_eq!(g.voxel_centers(), vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]]);

        // Random grid matches the per-index loop in flat order.
        let mut rng = SplitMix64::new(11);
        let g = geom(
            [rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0), rng.uniform(-10.0, 10.0)],
            [rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0), rng.uniform(0.5, 3.0)],
            [12, 12, 12],
        );
        let centers = g.voxel_centers();
        assert_eq!(centers.len(), g.num_voxels());
        for flat in 0..g.num_voxels() {
            let idx = g.unflatten(flat);
            assert_eq!(g.flat_index(idx), flat);
            assert_eq!(centers[flat], g.index_to_world(idx).unwrap());
        }
    }

    #[test]
    fn centroid_examples() {
        let g = geom([0.0; 3], [2.0; 3], [3, 3, 3]);
        let mut values = vec![false; g.num_voxels()];
        values[g.flat_index([1, 1, 1])] = true;
        let m = StructureMask {
            name: "PTV".into(),
            grid_ref: GridRef::Ct,
            values,
        };
        assert_eq!(mask_centroid(&m, &g).unwrap(), [2.0, 2.0, 2.0]);

        let g = geom([0.0; 3], [1.0; 3], [3, 1, 1]);
        let m = StructureMask {
            name: "PTV".into(),
            grid_ref: GridRef::Ct,
            values: vec![true, false, true],
        };
        assert_eq!(mask_centroid(&m, &g).unwrap(), [1.0, 0.0, 0.0]);
    }

    #[test]
    fn centroid_of_random_sphere_matches_direct_sum() {
        let g = geom([-5.0, -5.0, -5.0], [1.0; 3], [11, 11, 11]);
        let center = [0.5, -1.0, 2.0];
        let r = 3.5;
        let centers = g.voxel_centers();
        let values: Vec<bool> = centers
            .iter()
            .map(|p| {
                let d2: f64 = (0..3).map(|a| (p[a] - center[a]).powi(2)).sum();
                d2 <= r * r
            })
            .collect();
        let m = StructureMask {
            name: "S".into(),
            grid_ref: GridRef::Ct,
            values: values.clone(),
        };
        let got = mask_centroid(&m, &g).unwrap();
        let mut sum = [0.0; 3];
        let mut n = 0;
        for (p, &inside) in centers.iter().zip(&values) {
            if inside {
                for a in 0..3 {
                    sum[a] += p[a];
                }
                n += 1;
            }
        }
        for a in 0..3 {
            assert!((got[a] - sum[a] / n as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn centroid_empty_mask_errors() {
        let g = geom([0.0; 3], [1.0; 3], [2, 2, 2]);
        let m = StructureMask {
            name: "PTV".into(),
            grid_ref: GridRef::Ct,
            values: vec![false; 8],
        };
        assert!(matches!(mask_centroid(&m, &g), Err(Error::EmptyMask(_))));
    }

    #[test]
    fn centroid_translation_equivariance_exact() {
        let g0 = geom([0.0; 3], [1.0; 3], [6, 6, 6]);
        let mut rng = SplitMix64::new(21);
        let values: Vec<bool> = (0..g0.num_voxels()).map(|_| rng.next_f64() < 0.3).collect();
        let m = StructureMask {
            name: "S".into(),
            grid_ref: GridRef::Ct,
            values,
        };
        if m.count_true() == 0 {
            return;
        }
        let c0 = mask_centroid(&m, &g0).unwrap();
        let t = [13.0, -7.0, 2.0];
        let g1 = geom(t, [1.0; 3], [6, 6, 6]);
        let c1 = mask_centroid(&m, &g1).unwrap();
        for a in 0..3 {
            assert_eq!(c1[a], c0[a] + t[a]);
        }
    }

    #[test]
    fn bundle_requires_exactly_one_ptv() {
        let g = geom([0.0; 3], [1.0; 3], [2, 2, 2]);
        let ct = VoxelGrid::new(g, vec![0.0; 8], "HU").unwrap();
        let err = PlanBundle::new(ct, g, None, vec![], 60.0);
        assert!(matches!(err, Err(Error::Bundle(_))));
    }

    #[test]
    fn bundle_roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let ct_geom = geom([0.0; 3], [1.0; 3], [4, 4, 4]);
        let dose_geom = geom([0.25, 0.5, -0.75], [1.5; 3], [2, 3, 2]);
        // Exercise odd bit patterns: subnormals, negative zero, exact halves.
        let mut rng = SplitMix64::new(5);
        let mut ct_values: Vec<f32> = (0..64).map(|_| rng.uniform(-1000.0, 80.0) as f32).collect();
        ct_values[0] = -0.0;
        ct_values[1] = f32::MIN_POSITIVE / 2.0;
        let dose_values: Vec<f32> = (0..12).map(|_| rng.uniform(0.0, 66.0) as f32).collect();
        let mut ptv = vec![false; 64];
        ptv[21] = true;
        ptv[22] = true;
        let bundle = PlanBundle::new(
            VoxelGrid::new(ct_geom, ct_values.clone(), "HU").unwrap(),
            dose_geom,
            Some(VoxelGrid::new(dose_geom, dose_values.clone(), "Gy").unwrap()),
            vec![StructureMask {
                name: "PTV".into(),
                grid_ref: GridRef::Ct,
                values: ptv,
            }],
            60.0,
        )
        .unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let loaded = read_bundle(dir.path()).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&loaded.ct.values), bits(&ct_values));
        assert_eq!(bits(&loaded.dose.as_ref().unwrap().values), bits(&dose_values));
        assert_eq!(loaded.ptv_center, bundle.ptv_center);
        assert_eq!(loaded.prescription_dose, 60.0);
    }

    #[test]
    fn inference_only_bundle_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let ct_geom = geom([0.0; 3], [1.0; 3], [3, 3, 3]);
        let dose_geom = geom([0.5; 3], [2.0; 3], [1, 1, 1]);
        let mut ptv = vec![false; 27];
        ptv[13] = true;
        let bundle = PlanBundle::new(
            VoxelGrid::new(ct_geom, vec![0.0; 27], "HU").unwrap(),
            dose_geom,
            None,
            vec![StructureMask {
                name: "PTV".into(),
                grid_ref: GridRef::Ct,
                values: ptv,
            }],
            60.0,
        )
        .unwrap();
        write_bundle(&bundle, dir.path()).unwrap();
        let loaded = read_bundle(dir.path()).unwrap();
        assert!(loaded.dose.is_none());
        assert!(loaded.dose_truth().is_err());
    }

    #[test]
    fn mask_rejects_non_binary_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.u8");
        std::fs::write(&path, [0u8, 1, 2]).unwrap();
        assert!(read_mask_raw(&path, 3).is_err());
    }
}
