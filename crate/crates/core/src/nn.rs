//! Linear layers that can carry a low-rank adapter, and a small MLP built
//! from them.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::lora::{Adaptable, LoraAdapter};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    /// Gaussian with standard deviation `gain / sqrt(d_in)`.
    Scaled(f32),
}

/// `y = x·Wᵀ + b` with `W: [d_out, d_in]`, plus `(α/r)·(x·Aᵀ)·Bᵀ` when an
/// unmerged adapter is attached.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub d_in: usize,
    pub d_out: usize,
    pub adapter: Option<LoraAdapter>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
        init: Init,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let data = match init {
            Init::Zeros => vec![0.0; d_in * d_out],
            Init::Scaled(gain) => {
                let std = gain / (d_in as f32).sqrt();
                let normal = Normal::new(0.0f32, std).map_err(|e| Error::Config(e.to_string()))?;
                (0..d_in * d_out).map(|_| normal.sample(rng)).collect()
            }
        };
        let weight = store.add(format!("{name}.weight"), Tensor::new(&[d_out, d_in], data)?, true)?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]), true)?)
        } else {
            None
        };
        Ok(Self {
            name: name.to_owned(),
            weight,
            bias,
            d_in,
            d_out,
            adapter: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let mut y = tape.matmul_nt(x, w)?;
        if let Some(ad) = self.adapter.as_ref().filter(|a| !a.merged()) {
            let a = tape.param(store, ad.a);
            let b = tape.param(store, ad.b);
            let down = tape.matmul_nt(x, a)?;
            let up = tape.matmul_nt(down, b)?;
            let up = tape.scale(up, ad.scaling() as f64);
            y = tape.add(y, up)?;
        }
        if let Some(bias) = self.bias {
            let b = tape.param(store, bias);
            y = tape.add_row(y, b)?;
        }
        Ok(y)
    }
}

/// Fully connected network with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub store: ParamStore,
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// `widths = [d_in, hidden.., d_out]`; layers are named `{prefix}.{i}`.
    pub fn new(prefix: &str, widths: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::Config("an MLP needs at least an input and an output width".into()));
        }
        let mut store = ParamStore::new();
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(&mut store, &format!("{prefix}.{i}"), w[0], w[1], true, Init::Scaled(1.0), rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { store, layers })
    }

    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(tape, &self.store, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Forward pass on a batch of rows without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant_tensor(x)?;
        let y = self.forward(&mut tape, xv)?;
        Ok(tape.to_tensor(y))
    }
}

impl Adaptable for Mlp {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        (&mut self.store, self.layers.iter_mut().collect())
    }

    fn layers(&self) -> Vec<&Linear> {
        self.layers.iter().collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    #[test]
    fn linear_shapes_and_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 3, 2, true, Init::Zeros, &mut rng).unwrap();
        store.get_mut(lin.bias.unwrap()).tensor.data_mut().copy_from_slice(&[1.0, -1.0]);
        let mut tape = Tape::new();
        let x = tape.constant(4, 3, vec![0.5; 12]).unwrap();
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.dims(y), (4, 2));
        assert!(tape.value(y).chunks(2).all(|r| r == [1.0, -1.0]));
    }

    #[test]
    fn mlp_names_are_hierarchical() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mlp = Mlp::new("net", &[4, 8, 2], &mut rng).unwrap();
        let names: Vec<_> = mlp.store.iter().map(|(_, p)| p.name.clone()).collect();
        assert_eq!(names, ["net.0.weight", "net.0.bias", "net.1.weight", "net.1.bias"]);
    }
}
