use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::tensor::Tensor;
use crate::NnError;

/// Handle to one parameter tensor inside a [`ParamSet`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, t: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)` (fan_in = rows).
    pub fn add_normal(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = 1.0 / (rows as f64).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let data = (0..rows * cols).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::from_vec(rows, cols, data))
    }

    pub fn add_zeros(&mut self, name: impl Into<String>, rows: usize, cols: usize) -> ParamId {
        self.add(name, Tensor::zeros(rows, cols))
    }

    pub fn add_filled(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        value: f64,
    ) -> ParamId {
        self.add(name, Tensor::from_vec(rows, cols, vec![value; rows * cols]))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    /// Total scalar parameter count.
    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Round every parameter to `f32` precision, the precision checkpoints keep.
    pub fn round_to_f32(&mut self) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v = f64::from(*v as f32);
            }
        }
    }

    /// Checkpoint JSON: layer names, shapes and row-major values as `f32`
    /// printed with 9 significant digits (enough to round-trip `f32` exactly).
    pub fn to_checkpoint_json(&self) -> String {
        let layers: Vec<CheckpointLayerOut<'_>> = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(name, t)| CheckpointLayerOut {
                name,
                shape: [t.rows, t.cols],
                data: t.data.iter().map(|&v| f32_raw(v)).collect(),
            })
            .collect();
        serde_json::to_string(&layers).expect("checkpoint serialization")
    }

    pub fn from_checkpoint_json(s: &str) -> Result<Self, NnError> {
        let layers: Vec<CheckpointLayerIn> =
            serde_json::from_str(s).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let mut set = ParamSet::new();
        for l in layers {
            if l.shape[0] * l.shape[1] != l.data.len() {
                return Err(NnError::Checkpoint(format!(
                    "layer {} has shape {:?} but {} values",
                    l.name,
                    l.shape,
                    l.data.len()
                )));
            }
            let data = l.data.into_iter().map(|v| f64::from(v as f32)).collect();
            set.add(l.name, Tensor::from_vec(l.shape[0], l.shape[1], data));
        }
        Ok(set)
    }

    /// Copy values from `other`, requiring identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<(), NnError> {
        if self.names != other.names {
            return Err(NnError::Checkpoint("parameter names differ".into()));
        }
        for (dst, src) in self.tensors.iter_mut().zip(&other.tensors) {
            if dst.shape() != src.shape() {
                return Err(NnError::Checkpoint("parameter shapes differ".into()));
            }
            dst.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

fn f32_raw(v: f64) -> Box<RawValue> {
    let x = v as f32;
    let s = if x == 0.0 {
        "0".to_string()
    } else {
        format!("{x:.8e}")
    };
    RawValue::from_string(s).expect("formatted float is valid JSON")
}

#[derive(Serialize)]
struct CheckpointLayerOut<'a> {
    name: &'a str,
    shape: [usize; 2],
    data: Vec<Box<RawValue>>,
}

#[derive(Deserialize)]
struct CheckpointLayerIn {
    name: String,
    shape: [usize; 2],
    data: Vec<f64>,
}

/// Gradients aligned with a [`ParamSet`].
#[derive(Debug, Clone)]
pub struct Grads {
    pub tensors: Vec<Tensor>,
}

impl Grads {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            tensors: params
                .tensors()
                .iter()
                .map(|t| Tensor::zeros(t.rows, t.cols))
                .collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.add_assign(b);
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for v in &mut t.data {
                *v *= s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale so the global L2 norm is at most `max_norm`.
    pub fn clip_global_norm(&mut self, max_norm: f64) {
        let n = self.global_norm();
        if n > max_norm && n.is_finite() {
            self.scale(max_norm / n);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn checkpoint_round_trips_at_f32_precision() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = ParamSet::new();
        p.add_normal("a.w", 5, 7, &mut rng);
        p.add_zeros("a.b", 1, 7);
        p.round_to_f32();
        let s = p.to_checkpoint_json();
        let q = ParamSet::from_checkpoint_json(&s).unwrap();
        assert_eq!(p, q);
        assert_eq!(s, q.to_checkpoint_json());
    }

    #[test]
    fn checkpoint_rejects_bad_shape() {
        let s = r#"[{"name":"x","shape":[2,2],"data":[1.0]}]"#;
        assert!(ParamSet::from_checkpoint_json(s).is_err());
    }
}
