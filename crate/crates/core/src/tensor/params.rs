use std::collections::BTreeMap;
use std::ops::Index;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{Graph, Tensor, Var};

/// Named parameters in a stable (sorted) order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x100_0000_01b3)
    })
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.params.insert(name.into(), value);
    }

    /// Adds a parameter drawn from `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`. The
    /// stream depends only on `seed` and `name`, so a parameter initializes
    /// identically whatever else the store holds.
    pub fn init_uniform(&mut self, name: &str, shape: Vec<usize>, fan_in: usize, seed: u64) {
        self.init_uniform_bound(name, shape, (1.0 / fan_in.max(1) as f64).sqrt(), seed);
    }

    /// Adds a parameter drawn from `U(-bound, bound)`, keyed like [`Self::init_uniform`].
    pub fn init_uniform_bound(&mut self, name: &str, shape: Vec<usize>, bound: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(name.as_bytes()));
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor { shape, data });
    }

    pub fn init_const(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(
            name,
            Tensor {
                shape,
                data: vec![value; n],
            },
        );
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::len).sum()
    }

    /// Registers every parameter as a gradient-carrying leaf of `g`.
    pub fn bind(&self, g: &Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.param(v.clone())))
                .collect(),
        }
    }

    /// Same as [`ParamStore::bind`] but as constants, for inference.
    pub fn bind_frozen(&self, g: &Graph) -> BoundParams {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), g.constant(v.clone())))
                .collect(),
        }
    }
}

/// Parameter name to graph leaf.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients of every bound parameter after [`Graph::backward`].
    pub fn grads(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter_map(|(k, &v)| g.grad(v).map(|t| (k.clone(), t)))
            .collect()
    }
}

impl Index<&str> for BoundParams {
    type Output = Var;

    fn index(&self, name: &str) -> &Var {
        self.vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` is not registered"))
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("checkpoint json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("checkpoint parameter `{0}` has inconsistent shape")]
    BadShape(String),
    #[error("unsupported checkpoint format `{0}`")]
    Format(String),
}

pub const CHECKPOINT_FORMAT: &str = "inkpairs-checkpoint-v1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub config_hash: String,
    pub rng_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct StoredParam {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    header: CheckpointHeader,
    config: serde_json::Value,
    params: BTreeMap<String, StoredParam>,
}

/// Parameters plus the configuration that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    /// Model configuration as JSON, so a checkpoint can rebuild its model.
    pub config: serde_json::Value,
    pub params: ParamStore,
}

impl Checkpoint {
    /// Sorted keys and shortest round-trip float formatting, so identical
    /// parameters always produce identical bytes and reload bit-exactly.
    pub fn to_bytes(&self) -> Vec<u8> {
        let file = CheckpointFile {
            header: self.header.clone(),
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|(k, v)| {
                    (
                        k.clone(),
                        StoredParam {
                            shape: v.shape().to_vec(),
                            data: v.data().to_vec(),
                        },
                    )
                })
                .collect(),
        };
        serde_json::to_vec(&file).expect("checkpoint serialization")
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let file: CheckpointFile = serde_json::from_slice(bytes)?;
        if file.header.format != CHECKPOINT_FORMAT {
            return Err(CheckpointError::Format(file.header.format));
        }
        let mut params = ParamStore::new();
        for (name, p) in file.params {
            let t = Tensor::new(p.shape, p.data)
                .map_err(|_| CheckpointError::BadShape(name.clone()))?;
            params.insert(name, t);
        }
        Ok(Self {
            header: file.header,
            config: file.config,
            params,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_name_keyed() {
        let mut a = ParamStore::new();
        a.init_uniform("layer.w", vec![3, 4], 3, 11);
        let mut b = ParamStore::new();
        b.init_uniform("other", vec![5], 5, 11);
        b.init_uniform("layer.w", vec![3, 4], 3, 11);
        assert_eq!(a.get("layer.w"), b.get("layer.w"));
        let bound = (1.0f64 / 3.0).sqrt();
        assert!(a
            .get("layer.w")
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let mut p = ParamStore::new();
        p.init_uniform("a", vec![2, 3], 2, 1);
        p.insert(
            "b",
            Tensor::vector(vec![0.1 + 0.2, -1e-300, 12345.678901234567]),
        );
        let ck = Checkpoint {
            header: CheckpointHeader {
                format: CHECKPOINT_FORMAT.into(),
                config_hash: "abc".into(),
                rng_seed: 9,
            },
            config: serde_json::json!({"c": 1}),
            params: p,
        };
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn checkpoint_rejects_bad_shape() {
        let text = br#"{"header":{"format":"inkpairs-checkpoint-v1","config_hash":"x","rng_seed":0},"config":null,"params":{"w":{"shape":[2,2],"data":[1.0]}}}"#;
        assert!(matches!(
            Checkpoint::from_bytes(text),
            Err(CheckpointError::BadShape(_))
        ));
    }
}
