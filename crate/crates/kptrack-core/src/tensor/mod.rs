//! Minimal tape-based autograd over dense 2-D f32 tensors.
//!
//! Every differentiable computation is recorded on a [`Graph`]: forward
//! values are computed eagerly at node creation, `backward` walks the tape
//! in reverse and accumulates gradients. Parameters live in a [`Params`]
//! store keyed by name; gradients flow back onto the owning [`Tensor`]
//! via `export_grads`, so repeated backward passes accumulate additively.

mod checkpoint;
pub mod check;
mod graph;
mod optim;
mod params;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use graph::{ConvGeom, Graph, MixPlan, NodeId};
pub use optim::AdamState;
pub use params::{MlpSpec, Params};

use crate::error::{Error, Result};

/// Dense row-major 2-D tensor. Rank-1 data is stored as a single row.
#[derive(Clone, Debug)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Contract(format!(
                "tensor data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(Tensor {
            rows,
            cols,
            data,
            grad: None,
            requires_grad: true,
        })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![0.0; rows * cols],
            grad: None,
            requires_grad: true,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn numel(&self) -> usize {
        self.rows * self.cols
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn grad(&self) -> Option<&[f32]> {
        self.grad.as_deref()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    /// Adds `delta` into the stored gradient, allocating zeros on first use.
    pub fn accumulate_grad(&mut self, delta: &[f32]) -> Result<()> {
        if delta.len() != self.numel() {
            return Err(Error::Contract(format!(
                "gradient length {} does not match tensor numel {}",
                delta.len(),
                self.numel()
            )));
        }
        let g = self.grad.get_or_insert_with(|| vec![0.0; self.data.len()]);
        for (gi, di) in g.iter_mut().zip(delta) {
            *gi += di;
        }
        Ok(())
    }

    pub fn clear_grad(&mut self) {
        self.grad = None;
    }
}
