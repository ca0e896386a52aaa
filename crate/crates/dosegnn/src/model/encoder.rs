//! CT patch extraction and the base image encoders (MLP and small 3D conv).
//!
//! A CT node's image context is the cube of `patch_size**3` voxels around
//! it, edge-clamped at grid boundaries and normalized from Hounsfield units
//! so air maps to 0 and PTV contrast lands near 1.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_chunks_mut;
use crate::rng::SplitMix64;
use crate::volume::VoxelGrid;

use super::params::{init_mlp, mlp_forward, MlpLayout, ParamSet};

/// `(HU + 1000) / 1080`: air (-1000) -> 0, PTV (+80) -> 1.
pub fn hu_normalize(hu: f64) -> f64 {
    (hu + 1000.0) / 1080.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mlp,
    Cnn3d,
}

impl std::str::FromStr for EncoderKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(EncoderKind::Mlp),
            "cnn3d" => Ok(EncoderKind::Cnn3d),
            other => Err(Error::Usage(format!("unknown encoder '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    /// Odd cube side, voxels.
    pub patch_size: usize,
    /// Node embedding width; even, and divisible by 4 when paired with the
    /// positional encoder.
    pub embed_dim: usize,
    pub mlp_hidden: Vec<usize>,
    pub cnn_kernels: usize,
    pub cnn_kernel_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            kind: EncoderKind::Mlp,
            patch_size: 5,
            embed_dim: 64,
            mlp_hidden: vec![128, 64],
            cnn_kernels: 8,
            cnn_kernel_size: 3,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.patch_size % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "patch_size must be odd, got {}",
                self.patch_size
            )));
        }
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(Error::InvalidConfig(format!(
                "embed_dim must be even and >= 4, got {}",
                self.embed_dim
            )));
        }
        if self.kind == EncoderKind::Cnn3d && self.cnn_kernel_size > self.patch_size {
            return Err(Error::InvalidConfig(format!(
                "cnn kernel {} larger than patch {}",
                self.cnn_kernel_size, self.patch_size
            )));
        }
        if self.kind == EncoderKind::Cnn3d && self.cnn_kernels == 0 {
            return Err(Error::InvalidConfig("cnn_kernels must be >= 1".into()));
        }
        Ok(())
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.patch_size
    }
}

/// Parameter indices of one encoder inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub enum EncoderLayout {
    Mlp(MlpLayout),
    Cnn {
        kernels: usize,
        kernel_bias: usize,
        fc: MlpLayout,
    },
}

pub fn init_encoder(
    cfg: &EncoderConfig,
    ps: &mut ParamSet,
    rng: &mut SplitMix64,
) -> Result<EncoderLayout> {
    cfg.validate()?;
    match cfg.kind {
        EncoderKind::Mlp => Ok(EncoderLayout::Mlp(init_mlp(
            ps,
            rng,
            "enc",
            cfg.patch_len(),
            &cfg.mlp_hidden,
            cfg.embed_dim,
        ))),
        EncoderKind::Cnn3d => {
            let k = cfg.cnn_kernel_size;
            let kvol = k * k * k;
            let kernels = ps.add_uniform_fans(
                rng,
                "enc.kernels",
                vec![cfg.cnn_kernels, k, k, k],
                kvol,
                cfg.cnn_kernels * kvol,
            );
            let kernel_bias = ps.add_zeros("enc.kbias", vec![cfg.cnn_kernels]);
            let out_side = cfg.patch_size - k + 1;
            let flat = cfg.cnn_kernels * out_side * out_side * out_side;
            let fc = init_mlp(ps, rng, "enc.fc", flat, &[], cfg.embed_dim);
            Ok(EncoderLayout::Cnn {
                kernels,
                kernel_bias,
                fc,
            })
        }
    }
}

/// Encodes pre-gathered patches `(n, patch_len)` into `(n, embed_dim)`.
pub fn encoder_forward(
    tape: &mut Tape,
    leaves: &[Tensor],
    cfg: &EncoderConfig,
    layout: &EncoderLayout,
    patches: Tensor,
    n: usize,
) -> Result<Tensor> {
    match layout {
        EncoderLayout::Mlp(mlp) => mlp_forward(tape, leaves, mlp, patches, false),
        EncoderLayout::Cnn {
            kernels,
            kernel_bias,
            fc,
        } => {
            let p = cfg.patch_size;
            let cube = tape.reshape(patches, &[n, p, p, p])?;
            let conv = tape.conv3d_valid(cube, leaves[*kernels], leaves[*kernel_bias])?;
            let act = tape.relu(conv);
            let out_side = p - cfg.cnn_kernel_size + 1;
            let flat_dim = cfg.cnn_kernels * out_side * out_side * out_side;
            let flat = tape.reshape(act, &[n, flat_dim])?;
            mlp_forward(tape, leaves, fc, flat, false)
        }
    }
}

/// Normalized cube of half-width `(p-1)/2` around `center_idx`, edge-clamped,
/// in `(z, y, x)` order with x fastest.
pub fn extract_patch(ct: &VoxelGrid, center_idx: [usize; 3], p: usize) -> Vec<f64> {
    let mut out = vec![0.0; p * p * p];
    gather_patch_into(ct, center_idx, p, &mut out);
    out
}

fn gather_patch_into(ct: &VoxelGrid, center_idx: [usize; 3], p: usize, out: &mut [f64]) {
    let half = (p as isize - 1) / 2;
    let dims = ct.geom.dims;
    let clamp = |v: isize, dim: usize| v.clamp(0, dim as isize - 1) as usize;
    let mut o = 0usize;
    for dz in -half..=half {
        let z = clamp(center_idx[2] as isize + dz, dims[2]);
        for dy in -half..=half {
            let y = clamp(center_idx[1] as isize + dy, dims[1]);
            let row_base = dims[0] * (y + dims[1] * z);
            for dx in -half..=half {
                let x = clamp(center_idx[0] as isize + dx, dims[0]);
                out[o] = hu_normalize(f64::from(ct.values[x + row_base]));
                o += 1;
            }
        }
    }
}

/// Gathers patches for the given CT flat indices into an `(n, p^3)` matrix.
pub fn gather_patches(ct: &VoxelGrid, flats: &[u32], p: usize) -> Vec<f64> {
    let plen = p * p * p;
    let mut out = vec![0.0; flats.len() * plen];
    for_chunks_mut(&mut out, 512 * plen, |start, slice| {
        let i0 = start / plen;
        for (i, patch) in slice.chunks_exact_mut(plen).enumerate() {
            let idx = ct.geom.unflatten(flats[i0 + i] as usize);
            gather_patch_into(ct, idx, p, patch);
        }
    });
    out
}

/// Embeddings of the given CT nodes, `(n, embed_dim)` row-major, without
/// gradient tracking. Row `i` is `encoder(extract_patch(node i))`.
pub fn encode_ct_nodes(
    cfg: &EncoderConfig,
    layout: &EncoderLayout,
    params: &ParamSet,
    ct: &VoxelGrid,
    flats: &[u32],
) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let leaves = params.leaves(&mut tape, false)?;
    let patches = gather_patches(ct, flats, cfg.patch_size);
    let x = tape.leaf(&[flats.len(), cfg.patch_len()], patches, false)?;
    let out = encoder_forward(&mut tape, &leaves, cfg, layout, x, flats.len())?;
    Ok(tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::GridGeometry;

    fn ct_with(values: Vec<f32>, dims: [usize; 3]) -> VoxelGrid {
        VoxelGrid::new(
            GridGeometry::new([0.0; 3], [1.0; 3], dims).unwrap(),
            values,
            "HU",
        )
        .unwrap()
    }

    #[test]
    fn constant_ct_gives_constant_normalized_patch() {
        let ct = ct_with(vec![80.0; 125], [5, 5, 5]);
        let patch = extract_patch(&ct, [2, 2, 2], 3);
        for v in patch {
            assert!((v - (80.0 + 1000.0) / 1080.0).abs() < 1e-12);
        }
    }

    #[test]
    fn corner_patch_replicates_border() {
        let mut values = vec![0.0f32; 27];
        values[0] = -1000.0; // corner voxel
        let ct = ct_with(values, [3, 3, 3]);
        let patch = extract_patch(&ct, [0, 0, 0], 3);
        // The clamped (-1,-1,-1) offset replicates the corner value.
        assert_eq!(patch[0], hu_normalize(-1000.0));
        // Center of the patch is the corner voxel itself.
        assert_eq!(patch[13], hu_normalize(-1000.0));
    }

    #[test]
    fn interior_patch_matches_triple_loop() {
        let mut rng = SplitMix64::new(4);
        let values: Vec<f32> = (0..343).map(|_| rng.uniform(-1000.0, 80.0) as f32).collect();
        let ct = ct_with(values.clone(), [7, 7, 7]);
        let center = [3usize, 3, 3];
        let p = 5usize;
        let got = extract_patch(&ct, center, p);
        let mut o = 0;
        for dz in -2i64..=2 {
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let x = (center[0] as i64 + dx) as usize;
                    let y = (center[1] as i64 + dy) as usize;
                    let z = (center[2] as i64 + dz) as usize;
                    let expected = hu_normalize(f64::from(ct.value_at([x, y, z])));
                    assert_eq!(got[o], expected);
                    o += 1;
                }
            }
        }
    }

    #[test]
    fn zero_weight_encoder_outputs_bias_rows() {
        let cfg = EncoderConfig {
            patch_size: 3,
            embed_dim: 8,
            mlp_hidden: vec![6],
            ..EncoderConfig::default()
        };
        let mut rng = SplitMix64::new(5);
        let mut ps = ParamSet::new();
        let layout = init_encoder(&cfg, &mut ps, &mut rng).unwrap();
        let EncoderLayout::Mlp(mlp) = &layout else {
            unreachable!()
        };
        for idx in &mlp.weights {
            for v in ps.data_mut(*idx).iter_mut() {
                *v = 0.0;
            }
        }
        for v in ps.data_mut(*mlp.biases.last().unwrap()).iter_mut() {
            *v = 0.5;
        }
        let mut rng2 = SplitMix64::new(6);
        let values: Vec<f32> = (0..64).map(|_| rng2.uniform(-500.0, 80.0) as f32).collect();
        let ct = ct_with(values, [4, 4, 4]);
        let emb = encode_ct_nodes(&cfg, &layout, &ps, &ct, &[0, 21, 43]).unwrap();
        assert_eq!(emb.len(), 3 * 8);
        assert!(emb.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn identical_patches_give_identical_rows_and_batch_equals_loop() {
        let cfg = EncoderConfig {
            patch_size: 3,
            embed_dim: 8,
            mlp_hidden: vec![10],
            ..EncoderConfig::default()
        };
        let mut rng = SplitMix64::new(11);
        let mut ps = ParamSet::new();
        let layout = init_encoder(&cfg, &mut ps, &mut rng).unwrap();
        // Constant CT: every patch identical.
        let ct = ct_with(vec![0.0; 216], [6, 6, 6]);
        let flats: Vec<u32> = vec![43, 86, 129];
        let batch = encode_ct_nodes(&cfg, &layout, &ps, &ct, &flats).unwrap();
        assert_eq!(&batch[0..8], &batch[8..16]);
        assert_eq!(&batch[0..8], &batch[16..24]);
        // Batch equals per-node encoding.
        for (i, &f) in flats.iter().enumerate() {
            let single = encode_ct_nodes(&cfg, &layout, &ps, &ct, &[f]).unwrap();
            assert_eq!(&batch[i * 8..(i + 1) * 8], &single[..]);
        }
    }

    #[test]
    fn cnn_encoder_runs_and_matches_loop() {
        let cfg = EncoderConfig {
            kind: EncoderKind::Cnn3d,
            patch_size: 5,
            embed_dim: 8,
            cnn_kernels: 4,
            cnn_kernel_size: 3,
            ..EncoderConfig::default()
        };
        let mut rng = SplitMix64::new(21);
        let mut ps = ParamSet::new();
        let layout = init_encoder(&cfg, &mut ps, &mut rng).unwrap();
        let values: Vec<f32> = (0..512).map(|_| rng.uniform(-1000.0, 80.0) as f32).collect();
        let ct = ct_with(values, [8, 8, 8]);
        let flats: Vec<u32> = vec![100, 200, 300];
        let batch = encode_ct_nodes(&cfg, &layout, &ps, &ct, &flats).unwrap();
        assert_eq!(batch.len(), 3 * 8);
        for (i, &f) in flats.iter().enumerate() {
            let single = encode_ct_nodes(&cfg, &layout, &ps, &ct, &[f]).unwrap();
            assert_eq!(&batch[i * 8..(i + 1) * 8], &single[..]);
        }
    }

    #[test]
    fn even_patch_size_rejected() {
        let cfg = EncoderConfig {
            patch_size: 4,
            ..EncoderConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
