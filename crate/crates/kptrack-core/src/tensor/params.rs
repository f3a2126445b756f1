use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};

/// Named parameter store. BTreeMap keeps iteration order stable, which
/// makes optimizer sweeps and checkpoint bytes deterministic.
#[derive(Clone, Debug, Default)]
pub struct Params {
    map: BTreeMap<String, Tensor>,
}

impl Params {
    pub fn new() -> Self {
        Params {
            map: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.map.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.map.get_mut(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.map.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    /// Weight matrix initialized uniform in (-1/sqrt(fan_in), 1/sqrt(fan_in))
    /// where fan_in is the row count of an `x . W` weight.
    pub fn init_matrix(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let bound = 1.0 / (rows as f32).sqrt();
        let data: Vec<f32> = (0..rows * cols)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        self.insert(name, Tensor::new(rows, cols, data).expect("sized above"));
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Tensor::zeros(rows, cols));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(
            name,
            Tensor::new(rows, cols, vec![1.0; rows * cols]).expect("sized above"),
        );
    }

    /// Flips trainability for every parameter whose name starts with
    /// `prefix`. Returns how many parameters matched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, flag: bool) -> usize {
        let mut n = 0;
        for (name, t) in self.map.iter_mut() {
            if name.starts_with(prefix) {
                t.set_requires_grad(flag);
                n += 1;
            }
        }
        n
    }

    pub fn set_all_trainable(&mut self, flag: bool) {
        for (name, t) in self.map.iter_mut() {
            // meta.* entries are bookkeeping, never optimized.
            if !name.starts_with("meta.") {
                t.set_requires_grad(flag);
            }
        }
    }

    pub fn zero_grads(&mut self) {
        for t in self.map.values_mut() {
            t.clear_grad();
        }
    }

    /// Total number of scalar values across non-meta parameters.
    pub fn scalar_count(&self) -> usize {
        self.map
            .iter()
            .filter(|(n, _)| !n.starts_with("meta."))
            .map(|(_, t)| t.numel())
            .sum()
    }
}

/// Fully-connected stack: matmul + bias per layer, ReLU between layers,
/// no activation after the last. Parameter names are
/// `{prefix}.l{i}.weight` / `{prefix}.l{i}.bias`.
#[derive(Clone, Debug)]
pub struct MlpSpec {
    pub prefix: String,
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(prefix: impl Into<String>, widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Contract(
                "mlp needs at least input and output widths".into(),
            ));
        }
        Ok(MlpSpec {
            prefix: prefix.into(),
            widths,
        })
    }

    pub fn init(&self, params: &mut Params, rng: &mut ChaCha8Rng) {
        for i in 0..self.widths.len() - 1 {
            let (wi, wo) = (self.widths[i], self.widths[i + 1]);
            params.init_matrix(&format!("{}.l{i}.weight", self.prefix), wi, wo, rng);
            params.init_zeros(&format!("{}.l{i}.bias", self.prefix), 1, wo);
        }
    }

    /// Applies the stack to `x` of shape `[n, widths[0]]`. Width mismatch
    /// surfaces as a shape error from the underlying matmul.
    pub fn forward(&self, g: &mut Graph, params: &Params, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.widths.len() - 2;
        for i in 0..=last {
            let w = g.param(params, &format!("{}.l{i}.weight", self.prefix))?;
            let b = g.param(params, &format!("{}.l{i}.bias", self.prefix))?;
            h = g.matmul(h, w)?;
            h = g.add_row_bias(h, b)?;
            if i != last {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }
}
