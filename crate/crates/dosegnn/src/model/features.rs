//! Dose-node features and their sinusoidal positional encoding.
//!
//! Each dose voxel carries two geometric features relative to the PTV
//! center: Euclidean distance `r` (mm) and the polar angle `theta` in
//! `[0, pi]` of the offset against +z, with `theta = 0` at `r = 0`. Both are
//! fed raw (mm, radians) to the encoder.

use crate::error::{Error, Result};
use crate::volume::GridGeometry;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DoseNodeFeatures {
    /// `r = |p - ptv_center|`, mm.
    pub distance: f64,
    /// `theta = arccos((p - ptv_center) . z / r)`, radians in `[0, pi]`.
    pub angle: f64,
}

impl DoseNodeFeatures {
    pub fn of(p: [f64; 3], ptv_center: [f64; 3]) -> Self {
        let dx = p[0] - ptv_center[0];
        let dy = p[1] - ptv_center[1];
        let dz = p[2] - ptv_center[2];
        let r = (dx * dx + dy * dy + dz * dz).sqrt();
        let angle = if r == 0.0 {
            0.0
        } else {
            (dz / r).clamp(-1.0, 1.0).acos()
        };
        DoseNodeFeatures { distance: r, angle }
    }
}

/// Features of every dose voxel center, flat order.
pub fn dose_node_features(dose: &GridGeometry, ptv_center: [f64; 3]) -> Vec<DoseNodeFeatures> {
    dose.voxel_centers()
        .into_iter()
        .map(|p| DoseNodeFeatures::of(p, ptv_center))
        .collect()
}

/// Sinusoidal encoding of one scalar into `half` values (`half` even):
/// `out[2j] = sin(x / base^(2j/half))`, `out[2j+1] = cos(x / base^(2j/half))`.
fn encode_scalar(x: f64, base: f64, half: usize, out: &mut [f64]) {
    for j in 0..half / 2 {
        let freq = base.powf(2.0 * j as f64 / half as f64);
        let arg = x / freq;
        out[2 * j] = arg.sin();
        out[2 * j + 1] = arg.cos();
    }
}

/// Encodes distance and angle into a `d`-vector: each feature sinusoidally
/// fills `d/2` entries, distance half first. `d` must be divisible by 4.
pub fn positional_encode(f: &DoseNodeFeatures, d: usize, base: f64) -> Result<Vec<f64>> {
    if d % 4 != 0 || d == 0 {
        return Err(Error::InvalidConfig(format!(
            "positional encoding dim must be divisible by 4, got {d}"
        )));
    }
    let mut out = vec![0.0; d];
    encode_scalar(f.distance, base, d / 2, &mut out[..d / 2]);
    encode_scalar(f.angle, base, d / 2, &mut out[d / 2..]);
    Ok(out)
}

/// Row-major `(n, d)` encoding of all features.
pub fn positional_encode_all(
    feats: &[DoseNodeFeatures],
    d: usize,
    base: f64,
) -> Result<Vec<f64>> {
    let mut out = vec![0.0; feats.len() * d];
    for (f, row) in feats.iter().zip(out.chunks_exact_mut(d)) {
        if d % 4 != 0 || d == 0 {
            return Err(Error::InvalidConfig(format!(
                "positional encoding dim must be divisible by 4, got {d}"
            )));
        }
        encode_scalar(f.distance, base, d / 2, &mut row[..d / 2]);
        encode_scalar(f.angle, base, d / 2, &mut row[d / 2..]);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::volume::GridGeometry;
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn feature_examples() {
        let c = [5.0, 5.0, 5.0];
        let f = DoseNodeFeatures::of([5.0, 5.0, 15.0], c);
        assert_eq!(f.distance, 10.0);
        assert_eq!(f.angle, 0.0);

        let f = DoseNodeFeatures::of([15.0, 5.0, 5.0], c);
        assert_eq!(f.distance, 10.0);
        assert!((f.angle - FRAC_PI_2).abs() < 1e-12);

        let f = DoseNodeFeatures::of(c, c);
        assert_eq!(f.distance, 0.0);
        assert_eq!(f.angle, 0.0);
    }

    #[test]
    fn features_follow_flat_order() {
        let g = GridGeometry::new([0.0; 3], [2.0; 3], [3, 2, 2]).unwrap();
        let c = [1.0, 1.0, 1.0];
        let feats = dose_node_features(&g, c);
        let centers = g.voxel_centers();
        assert_eq!(feats.len(), centers.len());
        for (f, p) in feats.iter().zip(&centers) {
            assert_eq!(*f, DoseNodeFeatures::of(*p, c));
        }
    }

    #[test]
    fn zero_features_encode_as_alternating_sin_cos() {
        let f = DoseNodeFeatures {
            distance: 0.0,
            angle: 0.0,
        };
        let pe = positional_encode(&f, 16, 10000.0).unwrap();
        for (i, v) in pe.iter().enumerate() {
            if i % 2 == 0 {
                assert_eq!(*v, 0.0, "sin(0) at {i}");
            } else {
                assert_eq!(*v, 1.0, "cos(0) at {i}");
            }
        }
    }

    #[test]
    fn output_length_and_range() {
        let mut rng = SplitMix64::new(8);
        for _ in 0..200 {
            let f = DoseNodeFeatures {
                distance: rng.uniform(0.0, 300.0),
                angle: rng.uniform(0.0, std::f64::consts::PI),
            };
            let d = 4 * (1 + rng.next_index(16));
            let pe = positional_encode(&f, d, 10000.0).unwrap();
            assert_eq!(pe.len(), d);
            assert!(pe.iter().all(|v| (-1.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn dim_not_divisible_by_four_errors() {
        let f = DoseNodeFeatures {
            distance: 1.0,
            angle: 0.5,
        };
        assert!(positional_encode(&f, 6, 10000.0).is_err());
        assert!(positional_encode(&f, 0, 10000.0).is_err());
    }

    #[test]
    fn batch_encoding_matches_single() {
        let g = GridGeometry::new([-3.0, 0.0, 2.0], [1.5; 3], [3, 3, 3]).unwrap();
        let c = [0.0, 2.0, 4.0];
        let feats = dose_node_features(&g, c);
        let all = positional_encode_all(&feats, 12, 10000.0).unwrap();
        for (i, f) in feats.iter().enumerate() {
            let one = positional_encode(f, 12, 10000.0).unwrap();
            assert_eq!(&all[i * 12..(i + 1) * 12], &one[..]);
        }
    }
}
