//! Named, shaped parameter storage shared by all predictors.
//!
//! Parameters live outside any tape; each forward pass re-registers them as
//! leaves. Creation order is fixed by the model layout, which makes
//! initialization draws, Adam state, checksums, and the JSON serialization
//! deterministic.

use serde::Deserialize;
use serde_json::{Map, Value};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    entries: Vec<Param>,
}

impl ParamSet {
    pub fn new() -> Self {
        ParamSet::default()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    pub fn data_mut(&mut self, idx: usize) -> &mut Vec<f64> {
        &mut self.entries[idx].data
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.entries.iter()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f64>) -> usize {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push(Param {
            name: name.into(),
            shape,
            data,
        });
        self.entries.len() - 1
    }

    /// Uniform init in +-sqrt(6 / (fan_in + fan_out)), drawn row-major.
    pub fn add_uniform_fans(
        &mut self,
        rng: &mut SplitMix64,
        name: impl Into<String>,
        shape: Vec<usize>,
        fan_in: usize,
        fan_out: usize,
    ) -> usize {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.uniform(-limit, limit)).collect();
        self.add(name, shape, data)
    }

    /// Weight matrix `(rows, cols)` with fans = dims.
    pub fn add_weight(
        &mut self,
        rng: &mut SplitMix64,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
    ) -> usize {
        self.add_uniform_fans(rng, name, vec![rows, cols], rows, cols)
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, shape: Vec<usize>) -> usize {
        let n: usize = shape.iter().product();
        self.add(name, shape, vec![0.0; n])
    }

    /// Registers every parameter on `tape`, in index order.
    pub fn leaves(&self, tape: &mut Tape, requires_grad: bool) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|p| tape.leaf(&p.shape, p.data.clone(), requires_grad))
            .collect()
    }

    /// FNV-1a over names, shapes, and little-endian value bytes.
    pub fn checksum(&self) -> String {
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x1000_0000_01b3);
            }
        };
        for p in &self.entries {
            eat(p.name.as_bytes());
            for &s in &p.shape {
                eat(&(s as u64).to_le_bytes());
            }
            for &v in &p.data {
                eat(&v.to_le_bytes());
            }
        }
        format!("{hash:016x}")
    }

    /// JSON object keyed by parameter name. Keys serialize sorted, values
    /// round-trip exactly (shortest decimal that recovers the same float).
    pub fn to_json(&self) -> Value {
        let mut map = Map::new();
        for p in &self.entries {
            map.insert(
                p.name.clone(),
                serde_json::json!({ "shape": p.shape, "data": p.data }),
            );
        }
        Value::Object(map)
    }

    /// Overwrites values from the JSON produced by [`ParamSet::to_json`].
    /// The layout (names and shapes) must already match.
    pub fn load_json(&mut self, value: &Value) -> Result<()> {
        #[derive(Deserialize)]
        struct Entry {
            shape: Vec<usize>,
            data: Vec<f64>,
        }
        let obj = value
            .as_object()
            .ok_or_else(|| Error::InvalidConfig("params must be a JSON object".into()))?;
        if obj.len() != self.entries.len() {
            return Err(Error::InvalidConfig(format!(
                "expected {} parameters, file has {}",
                self.entries.len(),
                obj.len()
            )));
        }
        for p in &mut self.entries {
            let raw = obj.get(&p.name).ok_or_else(|| {
                Error::InvalidConfig(format!("parameter '{}' missing from file", p.name))
            })?;
            let entry: Entry = serde_json::from_value(raw.clone())
                .map_err(|e| Error::InvalidConfig(format!("parameter '{}': {e}", p.name)))?;
            if entry.shape != p.shape {
                return Err(Error::InvalidConfig(format!(
                    "parameter '{}' has shape {:?}, expected {:?}",
                    p.name, entry.shape, p.shape
                )));
            }
            p.data = entry.data;
        }
        Ok(())
    }
}

/// Indices of one MLP's weights and biases inside a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct MlpLayout {
    pub weights: Vec<usize>,
    pub biases: Vec<usize>,
}

/// Registers an MLP `in_dim -> hidden... -> out_dim` under `prefix`.
pub fn init_mlp(
    ps: &mut ParamSet,
    rng: &mut SplitMix64,
    prefix: &str,
    in_dim: usize,
    hidden: &[usize],
    out_dim: usize,
) -> MlpLayout {
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    let mut d_in = in_dim;
    for (i, &h) in hidden.iter().chain(std::iter::once(&out_dim)).enumerate() {
        weights.push(ps.add_weight(rng, format!("{prefix}.w{i}"), d_in, h));
        biases.push(ps.add_zeros(format!("{prefix}.b{i}"), vec![h]));
        d_in = h;
    }
    MlpLayout { weights, biases }
}

/// Forward pass: ReLU after every layer except the last, which is linear
/// unless `relu_output`.
pub fn mlp_forward(
    tape: &mut Tape,
    leaves: &[Tensor],
    layout: &MlpLayout,
    x: Tensor,
    relu_output: bool,
) -> Result<Tensor> {
    let n_layers = layout.weights.len();
    let mut h = x;
    for i in 0..n_layers {
        h = tape.linear(h, leaves[layout.weights[i]], leaves[layout.biases[i]])?;
        if i + 1 < n_layers || relu_output {
            h = tape.relu(h);
        }
    }
    Ok(h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn glorot_bounds_and_determinism() {
        let mut rng = SplitMix64::new(1);
        let mut ps = ParamSet::new();
        let w = ps.add_weight(&mut rng, "w", 10, 20);
        let limit = (6.0 / 30.0f64).sqrt();
        for &v in &ps.get(w).data {
            assert!(v.abs() < limit);
        }
        let mut rng2 = SplitMix64::new(1);
        let mut ps2 = ParamSet::new();
        ps2.add_weight(&mut rng2, "w", 10, 20);
        assert_eq!(ps.get(0).data, ps2.get(0).data);
    }

    #[test]
    fn json_roundtrip_is_exact() {
        let mut rng = SplitMix64::new(9);
        let mut ps = ParamSet::new();
        ps.add_weight(&mut rng, "a", 3, 4);
        ps.add_zeros("b", vec![4]);
        // Awkward values survive the decimal round-trip.
        ps.data_mut(1)[0] = 0.1 + 0.2;
        ps.data_mut(1)[1] = 1.0 / 3.0;
        ps.data_mut(1)[2] = -1e-300;
        let json = ps.to_json();
        let text = serde_json::to_string(&json).unwrap();
        let parsed: Value = serde_json::from_str(&text).unwrap();
        let mut restored = ps.clone();
        for v in restored.data_mut(0).iter_mut() {
            *v = 0.0;
        }
        restored.load_json(&parsed).unwrap();
        for idx in 0..ps.len() {
            let a = &ps.get(idx).data;
            let b = &restored.get(idx).data;
            assert_eq!(
                a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
        }
        assert_eq!(ps.checksum(), restored.checksum());
    }

    #[test]
    fn mlp_shapes_and_zero_weight_bias_output() {
        let mut rng = SplitMix64::new(3);
        let mut ps = ParamSet::new();
        let layout = init_mlp(&mut ps, &mut rng, "m", 5, &[7], 2);
        // Zero the weights; output becomes the bias of the last layer.
        for idx in &layout.weights {
            for v in ps.data_mut(*idx).iter_mut() {
                *v = 0.0;
            }
        }
        for v in ps.data_mut(layout.biases[1]).iter_mut() {
            *v = 0.25;
        }
        let mut tape = Tape::new();
        let leaves = ps.leaves(&mut tape, false).unwrap();
        let x = tape.leaf(&[3, 5], vec![1.0; 15], false).unwrap();
        let y = mlp_forward(&mut tape, &leaves, &layout, x, false).unwrap();
        assert_eq!(tape.shape(y), &[3, 2]);
        assert_eq!(tape.value(y), &[0.25; 6]);
    }
}
