//! Dense f32 tensors, named parameters, and the reverse-mode tape used to
//! train the detector and its adapters.
//!
//! Storage (parameters, gradients, optimizer state, checkpoints) is f32.
//! The [`Tape`] evaluates its recorded graph in f64 and rounds back to f32
//! when gradients are accumulated into a [`ParamStore`].

mod checkpoint;
mod gradcheck;
mod optim;
mod tape;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{grad_check, grad_check_sampled};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub(crate) use tape::{log_sum_exp, softmax_in_place};

use std::collections::HashMap;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f32>>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn from_rows(rows: &[&[f32]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Contract("ragged rows".into()));
        }
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::new(&[rows.len(), cols], data)
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    /// `(rows, cols)` view used by the tape: scalars are 1×1 and vectors are
    /// single rows.
    pub fn matrix_dims(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [] => Ok((1, 1)),
            [n] => Ok((1, *n)),
            [m, n] => Ok((*m, *n)),
            other => Err(Error::Contract(format!(
                "expected at most 2 dimensions, got {other:?}"
            ))),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn get2(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.shape[1] + col]
    }

    /// Plain matrix product without gradient recording.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = match self.shape.as_slice() {
            [m, k] => (*m, *k),
            _ => return Err(Error::shape("matmul", &self.shape, &other.shape)),
        };
        let (k2, n) = match other.shape.as_slice() {
            [k2, n] => (*k2, *n),
            _ => return Err(Error::shape("matmul", &self.shape, &other.shape)),
        };
        if k != k2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                for (o, b) in row.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::new(&[m, n], out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
    trainable: bool,
}

impl Parameter {
    pub fn new(name: impl Into<String>, mut tensor: Tensor, trainable: bool) -> Self {
        tensor.requires_grad = trainable;
        if !trainable {
            tensor.grad = None;
        }
        Self {
            name: name.into(),
            tensor,
            trainable,
        }
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Freezing drops any stale gradient so it can never reach the optimizer.
    pub fn set_trainable(&mut self, trainable: bool) {
        self.trainable = trainable;
        self.tensor.requires_grad = trainable;
        if !trainable {
            self.tensor.grad = None;
        }
    }
}

/// Flat, ordered parameter tree keyed by hierarchical dotted names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor, trainable: bool) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter::new(name, tensor, trainable));
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Parameter)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.set_trainable(false);
        }
    }

    pub fn unfreeze_all(&mut self) {
        for p in &mut self.params {
            p.set_trainable(true);
        }
    }

    /// Multiplies every accumulated gradient by `factor` (batch averaging).
    pub fn scale_grads(&mut self, factor: f32) {
        for p in &mut self.params {
            if let Some(g) = p.tensor.grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= factor);
            }
        }
    }

    /// Global L2 norm of the accumulated gradients.
    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .filter_map(|p| p.tensor.grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|&v| (v as f64) * (v as f64))
            .sum::<f64>()
            .sqrt()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            records: self
                .params
                .iter()
                .map(|p| (p.name.clone(), p.tensor.shape.clone(), p.tensor.data.clone()))
                .collect(),
        }
    }

    /// Overwrites values of every parameter named in the checkpoint. Every
    /// parameter in the store must be present with an identical shape.
    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, shape, data) in &ckpt.records {
            let id = self
                .id(name)
                .ok_or_else(|| Error::Format(format!("unknown parameter `{name}` in checkpoint")))?;
            let p = &mut self.params[id.0];
            if &p.tensor.shape != shape {
                return Err(Error::shape("load_checkpoint", &p.tensor.shape, shape));
            }
            p.tensor.data.copy_from_slice(data);
            seen[id.0] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Format(format!(
                "checkpoint lacks parameter `{}`",
                self.params[missing].name
            )));
        }
        Ok(())
    }
}
