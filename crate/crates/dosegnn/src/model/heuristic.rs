//! Baseline predictors for mismatched grids.
//!
//! Variant 1 greedily resamples the CT onto the dose geometry by nearest
//! voxel center (producing a distorted volume), then runs the image encoder
//! plus a scalar readout per dose voxel. Variant 2 encodes the original CT
//! voxels and averages the embeddings of each dose voxel's k nearest CT
//! voxel centers before the readout. Neither sees the dose-node geometric
//! features; they are pure image pipelines.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Adjacency, Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::{child_seed, streams, SplitMix64};
use crate::volume::{GridGeometry, PlanBundle, VoxelGrid};

use super::encoder::{
    encoder_forward, gather_patches, init_encoder, EncoderConfig, EncoderLayout,
};
use super::params::{init_mlp, mlp_forward, MlpLayout, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeuristicConfig {
    /// 1 = greedy resample, 2 = k-nearest embedding average.
    pub variant: u8,
    pub encoder: EncoderConfig,
    /// Neighbor count for variant 2.
    pub k: usize,
    pub readout_hidden: Vec<usize>,
}

impl HeuristicConfig {
    pub fn variant1(encoder: EncoderConfig) -> Self {
        HeuristicConfig {
            variant: 1,
            encoder,
            k: 8,
            readout_hidden: vec![64],
        }
    }

    pub fn variant2(encoder: EncoderConfig, k: usize) -> Self {
        HeuristicConfig {
            variant: 2,
            encoder,
            k,
            readout_hidden: vec![64],
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        if self.variant != 1 && self.variant != 2 {
            return Err(Error::InvalidConfig(format!(
                "heuristic variant must be 1 or 2, got {}",
                self.variant
            )));
        }
        if self.variant == 2 && self.k == 0 {
            return Err(Error::InvalidConfig("k must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct HeuristicLayout {
    enc: EncoderLayout,
    readout: MlpLayout,
}

#[derive(Debug, Clone)]
pub struct HeuristicModel {
    pub config: HeuristicConfig,
    pub params: ParamSet,
    layout: HeuristicLayout,
}

/// Per-plan immutable inputs for a heuristic forward pass.
pub enum HeuristicPlanData {
    V1 {
        /// CT resampled onto the dose geometry; static per plan.
        patches: Vec<f64>,
        n_dose: usize,
    },
    V2 {
        /// Sorted union of all k-NN CT flat indices.
        union_flats: Vec<u32>,
        /// Rows = dose voxels, entries = ordinals into `union_flats`.
        adjacency: Arc<Adjacency>,
        n_dose: usize,
    },
}

impl HeuristicModel {
    pub fn init(config: HeuristicConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = SplitMix64::new(child_seed(seed, streams::INIT));
        let mut params = ParamSet::new();
        let enc = init_encoder(&config.encoder, &mut params, &mut rng)?;
        let readout = init_mlp(
            &mut params,
            &mut rng,
            "out",
            config.encoder.embed_dim,
            &config.readout_hidden,
            1,
        );
        Ok(HeuristicModel {
            config,
            params,
            layout: HeuristicLayout { enc, readout },
        })
    }

    pub fn prepare(&self, plan: &PlanBundle) -> Result<HeuristicPlanData> {
        let n_dose = plan.dose_geom.num_voxels();
        match self.config.variant {
            1 => {
                let distorted = resample_greedy(&plan.ct, &plan.dose_geom)?;
                let flats: Vec<u32> = (0..n_dose as u32).collect();
                let patches = gather_patches(&distorted, &flats, self.config.encoder.patch_size);
                Ok(HeuristicPlanData::V1 { patches, n_dose })
            }
            2 => {
                let lists = knn_ct_indices(&plan.ct.geom, &plan.dose_geom, self.config.k)?;
                let mut union_flats: Vec<u32> = lists.iter().flatten().copied().collect();
                union_flats.sort_unstable();
                union_flats.dedup();
                let mut indices = Vec::with_capacity(n_dose * self.config.k);
                let mut offsets = Vec::with_capacity(n_dose + 1);
                offsets.push(0);
                for list in &lists {
                    for flat in list {
                        let ordinal = union_flats.binary_search(flat).expect("member of union");
                        indices.push(ordinal as u32);
                    }
                    offsets.push(indices.len());
                }
                let adjacency = Arc::new(Adjacency::new(union_flats.len(), offsets, indices)?);
                Ok(HeuristicPlanData::V2 {
                    union_flats,
                    adjacency,
                    n_dose,
                })
            }
            other => Err(Error::InvalidConfig(format!("bad variant {other}"))),
        }
    }

    /// Prediction in prescription-normalized units, shape `(n_dose, 1)`.
    pub fn forward_normalized(
        &self,
        tape: &mut Tape,
        leaves: &[Tensor],
        plan: &PlanBundle,
        data: &HeuristicPlanData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        match data {
            HeuristicPlanData::V1 { patches, n_dose } => {
                let x = tape.leaf(&[*n_dose, cfg.encoder.patch_len()], patches.clone(), false)?;
                let emb = encoder_forward(tape, leaves, &cfg.encoder, &self.layout.enc, x, *n_dose)?;
                mlp_forward(tape, leaves, &self.layout.readout, emb, false)
            }
            HeuristicPlanData::V2 {
                union_flats,
                adjacency,
                ..
            } => {
                let patches = gather_patches(&plan.ct, union_flats, cfg.encoder.patch_size);
                let x = tape.leaf(
                    &[union_flats.len(), cfg.encoder.patch_len()],
                    patches,
                    false,
                )?;
                let emb = encoder_forward(
                    tape,
                    leaves,
                    &cfg.encoder,
                    &self.layout.enc,
                    x,
                    union_flats.len(),
                )?;
                let avg = tape.csr_mean(emb, Arc::clone(adjacency))?;
                mlp_forward(tape, leaves, &self.layout.readout, avg, false)
            }
        }
    }

    /// Predicted dose in Gy, flat dose-grid order.
    pub fn predict(&self, plan: &PlanBundle) -> Result<Vec<f64>> {
        let data = self.prepare(plan)?;
        let mut tape = Tape::new();
        let leaves = self.params.leaves(&mut tape, false)?;
        let out = self.forward_normalized(&mut tape, &leaves, plan, &data)?;
        let rx = plan.prescription_dose;
        Ok(tape.value(out).iter().map(|v| v * rx).collect())
    }
}

/// Nearest-voxel resampling of `ct` onto `target` geometry. Out-of-extent
/// targets take the clamped border value.
pub fn resample_greedy(ct: &VoxelGrid, target: &GridGeometry) -> Result<VoxelGrid> {
    let values: Vec<f32> = target
        .voxel_centers()
        .iter()
        .map(|&p| {
            let idx = ct.geom.world_to_nearest_index(p);
            ct.values[ct.geom.flat_index(idx)]
        })
        .collect();
    VoxelGrid::new(*target, values, ct.unit.clone())
}

/// For every dose voxel center, the k nearest CT voxel centers by world
/// distance, ties broken by smaller flat index. Exact: expands a cubic index
/// window until the k-th candidate provably beats everything outside.
pub fn knn_ct_indices(
    ct: &GridGeometry,
    dose: &GridGeometry,
    k: usize,
) -> Result<Vec<Vec<u32>>> {
    if k == 0 {
        return Err(Error::InvalidConfig("k must be >= 1".into()));
    }
    if ct.num_voxels() < k {
        return Err(Error::InvalidConfig(format!(
            "k = {k} exceeds the {} CT voxels",
            ct.num_voxels()
        )));
    }
    let dims = ct.dims;
    let centers = dose.voxel_centers();
    let mut out = Vec::with_capacity(centers.len());
    for p in centers {
        let base = ct.world_to_nearest_index(p);
        let mut radius = 1usize;
        let list = loop {
            let lo = [
                base[0].saturating_sub(radius),
                base[1].saturating_sub(radius),
                base[2].saturating_sub(radius),
            ];
            let hi = [
                (base[0] + radius).min(dims[0] - 1),
                (base[1] + radius).min(dims[1] - 1),
                (base[2] + radius).min(dims[2] - 1),
            ];
            let mut candidates: Vec<(f64, u32)> = Vec::new();
            for z in lo[2]..=hi[2] {
                let wz = ct.origin[2] + z as f64 * ct.spacing[2];
                for y in lo[1]..=hi[1] {
                    let wy = ct.origin[1] + y as f64 * ct.spacing[1];
                    for x in lo[0]..=hi[0] {
                        let wx = ct.origin[0] + x as f64 * ct.spacing[0];
                        let dx = wx - p[0];
                        let dy = wy - p[1];
                        let dz = wz - p[2];
                        let d2 = dx * dx + dy * dy + dz * dz;
                        candidates.push((d2, (x + dims[0] * (y + dims[1] * z)) as u32));
                    }
                }
            }
            let whole_grid = (0..3).all(|a| lo[a] == 0 && hi[a] == dims[a] - 1);
            if candidates.len() >= k {
                candidates
                    .sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
                // Anything outside the window is at least this far away on
                // some axis (infinite where the window hits the grid edge).
                let mut outside = f64::INFINITY;
                for a in 0..3 {
                    if lo[a] > 0 {
                        let plane = ct.origin[a] + (lo[a] - 1) as f64 * ct.spacing[a];
                        outside = outside.min((p[a] - plane) * (p[a] - plane));
                    }
                    if hi[a] < dims[a] - 1 {
                        let plane = ct.origin[a] + (hi[a] + 1) as f64 * ct.spacing[a];
                        outside = outside.min((plane - p[a]) * (plane - p[a]));
                    }
                }
                if whole_grid || candidates[k - 1].0 < outside {
                    break candidates[..k].iter().map(|&(_, f)| f).collect::<Vec<u32>>();
                }
            } else if whole_grid {
                unreachable!("k was checked against the grid size");
            }
            radius += 1;
        };
        out.push(list);
    }
    Ok(out)
}

/// Quadratic reference for [`knn_ct_indices`], same tie rule.
pub fn brute_force_knn(ct: &GridGeometry, dose: &GridGeometry, k: usize) -> Result<Vec<Vec<u32>>> {
    if k == 0 || ct.num_voxels() < k {
        return Err(Error::InvalidConfig("bad k".into()));
    }
    let ct_centers = ct.voxel_centers();
    Ok(dose
        .voxel_centers()
        .iter()
        .map(|p| {
            let mut all: Vec<(f64, u32)> = ct_centers
                .iter()
                .enumerate()
                .map(|(f, c)| {
                    let dx = c[0] - p[0];
                    let dy = c[1] - p[1];
                    let dz = c[2] - p[2];
                    (dx * dx + dy * dy + dz * dz, f as u32)
                })
                .collect();
            all.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
            all[..k].iter().map(|&(_, f)| f).collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{GridRef, StructureMask};

    fn grid(origin: [f64; 3], spacing: [f64; 3], dims: [usize; 3]) -> GridGeometry {
        GridGeometry::new(origin, spacing, dims).unwrap()
    }

    fn random_ct(rng: &mut SplitMix64, geom: GridGeometry) -> VoxelGrid {
        let values: Vec<f32> = (0..geom.num_voxels())
            .map(|_| rng.uniform(-1000.0, 80.0) as f32)
            .collect();
        VoxelGrid::new(geom, values, "HU").unwrap()
    }

    #[test]
    fn resample_identity_is_bit_exact() {
        let mut rng = SplitMix64::new(3);
        let ct = random_ct(&mut rng, grid([0.7, -2.0, 3.3], [0.9, 1.1, 1.3], [6, 5, 4]));
        let out = resample_greedy(&ct, &ct.geom).unwrap();
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.values), bits(&ct.values));
    }

    #[test]
    fn resample_outside_takes_border_value() {
        let ct_geom = grid([0.0; 3], [1.0; 3], [2, 2, 2]);
        let ct = VoxelGrid::new(
            ct_geom,
            vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
            "HU",
        )
        .unwrap();
        let target = grid([10.0, 0.0, 0.0], [1.0; 3], [1, 1, 1]);
        let out = resample_greedy(&ct, &target).unwrap();
        // Clamps to x=1, y=0, z=0 -> flat 1.
        assert_eq!(out.values[0], 2.0);
    }

    #[test]
    fn resample_matches_per_voxel_loop_on_random_geometry() {
        let mut rng = SplitMix64::new(14);
        for _ in 0..10 {
            let ct_geom = grid(
                [rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0)],
                [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)],
                [5, 6, 7],
            );
            let ct = random_ct(&mut rng, ct_geom);
            let target = grid(
                [rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0), rng.uniform(-8.0, 8.0)],
                [rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.0), rng.uniform(0.8, 3.0)],
                [4, 3, 5],
            );
            let out = resample_greedy(&ct, &target).unwrap();
            for (flat, p) in target.voxel_centers().iter().enumerate() {
                let idx = ct.geom.world_to_nearest_index(*p);
                assert_eq!(out.values[flat], ct.value_at(idx));
            }
        }
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = SplitMix64::new(25);
        for trial in 0..15 {
            let ct = grid(
                [rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)],
                [rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0), rng.uniform(0.5, 2.0)],
                [
                    2 + rng.next_index(7),
                    2 + rng.next_index(7),
                    2 + rng.next_index(7),
                ],
            );
            let dose = grid(
                [rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0), rng.uniform(-6.0, 6.0)],
                [rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0), rng.uniform(1.0, 3.0)],
                [3, 3, 3],
            );
            let k = 1 + rng.next_index(8.min(ct.num_voxels()));
            let fast = knn_ct_indices(&ct, &dose, k).unwrap();
            let slow = brute_force_knn(&ct, &dose, k).unwrap();
            assert_eq!(fast, slow, "trial {trial}, k {k}");
        }
    }

    #[test]
    fn knn_tie_prefers_smaller_flat_index() {
        // Dose voxel equidistant from all 8 corners of a unit cell.
        let ct = grid([0.0; 3], [1.0; 3], [2, 2, 2]);
        let dose = grid([0.5; 3], [1.0; 3], [1, 1, 1]);
        let lists = knn_ct_indices(&ct, &dose, 3).unwrap();
        assert_eq!(lists[0], vec![0, 1, 2]);
    }

    #[test]
    fn k_larger_than_ct_errors() {
        let ct = grid([0.0; 3], [1.0; 3], [2, 1, 1]);
        let dose = grid([0.0; 3], [1.0; 3], [1, 1, 1]);
        assert!(knn_ct_indices(&ct, &dose, 3).is_err());
    }

    fn matched_plan(seed: u64) -> PlanBundle {
        let mut rng = SplitMix64::new(seed);
        let geom = grid([0.0; 3], [1.0; 3], [6, 6, 6]);
        let ct = random_ct(&mut rng, geom);
        let mut ptv = vec![false; 216];
        ptv[108] = true;
        PlanBundle::new(
            ct,
            geom,
            None,
            vec![StructureMask {
                name: "PTV".into(),
                grid_ref: GridRef::Ct,
                values: ptv,
            }],
            60.0,
        )
        .unwrap()
    }

    #[test]
    fn h1_equals_h2_with_k1_on_matched_geometry() {
        // Same encoder/readout parameters, CT node set == dose voxel set.
        let enc = EncoderConfig {
            patch_size: 3,
            embed_dim: 8,
            mlp_hidden: vec![8],
            ..EncoderConfig::default()
        };
        let h1 = HeuristicModel::init(HeuristicConfig::variant1(enc.clone()), 77).unwrap();
        let mut h2 = HeuristicModel::init(HeuristicConfig::variant2(enc, 1), 77).unwrap();
        h2.params = h1.params.clone();
        let plan = matched_plan(50);
        let p1 = h1.predict(&plan).unwrap();
        let p2 = h2.predict(&plan).unwrap();
        assert_eq!(p1.len(), p2.len());
        for (a, b) in p1.iter().zip(&p2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn constant_ct_gives_constant_h1_prediction() {
        let geom = grid([0.0; 3], [1.0; 3], [5, 5, 5]);
        let ct = VoxelGrid::new(geom, vec![0.0; 125], "HU").unwrap();
        let mut ptv = vec![false; 125];
        ptv[62] = true;
        let plan = PlanBundle::new(
            ct,
            grid([0.4, 0.1, 0.2], [1.5; 3], [3, 3, 3]),
            None,
            vec![StructureMask {
                name: "PTV".into(),
                grid_ref: GridRef::Ct,
                values: ptv,
            }],
            60.0,
        )
        .unwrap();
        let enc = EncoderConfig {
            patch_size: 3,
            embed_dim: 8,
            mlp_hidden: vec![8],
            ..EncoderConfig::default()
        };
        let h1 = HeuristicModel::init(HeuristicConfig::variant1(enc), 3).unwrap();
        let pred = h1.predict(&plan).unwrap();
        for v in &pred {
            assert_eq!(*v, pred[0]);
        }
    }

    #[test]
    fn identical_embeddings_average_to_same_vector_for_any_k() {
        // Constant CT -> identical embeddings; h2 output must not depend on k.
        let geom = grid([0.0; 3], [1.0; 3], [6, 6, 6]);
        let ct = VoxelGrid::new(geom, vec![40.0; 216], "HU").unwrap();
        let mut ptv = vec![false; 216];
        ptv[108] = true;
        let plan = PlanBundle::new(
            ct,
            grid([0.3; 3], [2.0; 3], [2, 2, 2]),
            None,
            vec![StructureMask {
                name: "PTV".into(),
                grid_ref: GridRef::Ct,
                values: ptv,
            }],
            60.0,
        )
        .unwrap();
        let enc = EncoderConfig {
            patch_size: 3,
            embed_dim: 8,
            mlp_hidden: vec![8],
            ..EncoderConfig::default()
        };
        let h2a = HeuristicModel::init(HeuristicConfig::variant2(enc.clone(), 1), 5).unwrap();
        let mut h2b = HeuristicModel::init(HeuristicConfig::variant2(enc, 6), 5).unwrap();
        h2b.params = h2a.params.clone();
        let pa = h2a.predict(&plan).unwrap();
        let pb = h2b.predict(&plan).unwrap();
        for (a, b) in pa.iter().zip(&pb) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
