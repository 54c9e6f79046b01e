//! Low-rank adapters.
//!
//! An adapted layer computes `W·x + (α/r)·B·(A·x)` where `W: [d_out, d_in]`
//! stays frozen and only `A: [r, d_in]` and `B: [d_out, r]` train. `B`
//! starts at zero, so injection leaves the model's function unchanged.
//! Adapters can be merged into `W` for deployment and unmerged again.

use glob::Pattern;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::tensor::{Checkpoint, ParamId, ParamStore, Tensor};

/// Names of the header records in an adapter-only checkpoint.
const META_RANK: &str = "__lora__.rank";
const META_ALPHA: &str = "__lora__.alpha";
const META_INIT_SCALE: &str = "__lora__.init_scale";
const META_SELECTOR: &str = "__lora__.selector";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    pub rank: usize,
    pub alpha: f32,
    /// `|`-separated glob patterns over weight parameter names,
    /// e.g. `head.*.weight|neck.proj.weight`.
    pub selector: String,
    pub init_scale: f32,
    pub seed: u64,
}

impl AdapterConfig {
    /// Unit scaling (`α = r`) and `A ~ N(0, 0.02²)`.
    pub fn new(rank: usize, selector: impl Into<String>) -> Self {
        Self {
            rank,
            alpha: rank as f32,
            selector: selector.into(),
            init_scale: 0.02,
            seed: 0,
        }
    }

    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 {
            return Err(Error::Config("adapter rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::Config(format!("adapter alpha must be > 0, got {}", self.alpha)));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::Config(format!("init_scale must be >= 0, got {}", self.init_scale)));
        }
        Selector::parse(&self.selector).map(|_| ())
    }
}

/// Predicate over parameter name paths.
#[derive(Debug, Clone)]
pub struct Selector {
    patterns: Vec<Pattern>,
}

impl Selector {
    pub fn parse(spec: &str) -> Result<Self> {
        let patterns = spec
            .split('|')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| Pattern::new(s).map_err(|e| Error::Config(format!("selector `{s}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if patterns.is_empty() {
            return Err(Error::Config("empty adapter selector".into()));
        }
        Ok(Self { patterns })
    }

    pub fn matches(&self, name: &str) -> bool {
        self.patterns.iter().any(|p| p.matches(name))
    }
}

/// Factor pair attached to one linear layer. `a`, `b` and `base` index the
/// owning model's [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub a: ParamId,
    pub b: ParamId,
    pub base: ParamId,
    pub rank: usize,
    pub alpha: f32,
    merged: bool,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f32 {
        self.alpha / self.rank as f32
    }

    pub fn merged(&self) -> bool {
        self.merged
    }

    /// `(α/r)·B·A`, accumulated in f64.
    fn delta(&self, store: &ParamStore) -> Vec<f64> {
        let a = &store.get(self.a).tensor;
        let b = &store.get(self.b).tensor;
        let (d_out, r) = (b.shape()[0], b.shape()[1]);
        let d_in = a.shape()[1];
        let s = self.scaling() as f64;
        let mut out = vec![0.0f64; d_out * d_in];
        for i in 0..d_out {
            for p in 0..r {
                let bv = b.data()[i * r + p] as f64;
                if bv == 0.0 {
                    continue;
                }
                for j in 0..d_in {
                    out[i * d_in + j] += bv * a.data()[p * d_in + j] as f64;
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// Folds the adapter into the base weight: `W' = W + (α/r)·B·A`.
    /// The forward pass then skips the low-rank path.
    pub fn merge(&mut self, store: &mut ParamStore) -> Result<Tensor> {
        if self.merged {
            return Err(Error::State("adapter is already merged".into()));
        }
        let delta = self.delta(store);
        let w = &mut store.get_mut(self.base).tensor;
        for (x, d) in w.data_mut().iter_mut().zip(&delta) {
            if *d != 0.0 {
                *x = (*x as f64 + d) as f32;
            }
        }
        self.merged = true;
        let mut out = w.clone();
        out.grad = None;
        out.requires_grad = false;
        Ok(out)
    }

    pub fn unmerge(&mut self, store: &mut ParamStore) -> Result<Tensor> {
        if !self.merged {
            return Err(Error::State("adapter is not merged".into()));
        }
        let delta = self.delta(store);
        let w = &mut store.get_mut(self.base).tensor;
        for (x, d) in w.data_mut().iter_mut().zip(&delta) {
            if *d != 0.0 {
                *x = (*x as f64 - d) as f32;
            }
        }
        self.merged = false;
        let mut out = w.clone();
        out.grad = None;
        out.requires_grad = false;
        Ok(out)
    }
}

/// A model whose linear layers can receive adapters.
pub trait Adaptable {
    fn store(&self) -> &ParamStore;
    fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Linear>);
    fn layers(&self) -> Vec<&Linear>;
}

/// Attaches a fresh adapter to every layer whose weight name matches the
/// selector, then freezes everything except the new factors.
///
/// Returns the names of the adapted layers.
pub fn inject<M: Adaptable>(model: &mut M, cfg: &AdapterConfig) -> Result<Vec<String>> {
    cfg.validate()?;
    let selector = Selector::parse(&cfg.selector)?;
    let (store, layers) = model.parts_mut();

    let mut targets: Vec<&mut Linear> = layers
        .into_iter()
        .filter(|l| selector.matches(&store.get(l.weight).name))
        .collect();
    if targets.is_empty() {
        return Err(Error::Config(format!(
            "adapter selector `{}` matches no layer",
            cfg.selector
        )));
    }
    for layer in &targets {
        let limit = layer.d_in.min(layer.d_out);
        if cfg.rank > limit {
            return Err(Error::Rank {
                rank: cfg.rank,
                limit,
                layer: layer.name.clone(),
            });
        }
        if layer.adapter.is_some() {
            return Err(Error::State(format!("layer `{}` already has an adapter", layer.name)));
        }
        if store.get(layer.weight).tensor.shape().len() != 2 {
            return Err(Error::Config(format!("`{}` is not a 2-D weight", layer.name)));
        }
    }

    store.freeze_all();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0f32, cfg.init_scale).map_err(|e| Error::Config(e.to_string()))?;
    let mut names = Vec::with_capacity(targets.len());
    for layer in targets.iter_mut() {
        let a_data = (0..cfg.rank * layer.d_in).map(|_| normal.sample(&mut rng)).collect();
        let a = store.add(
            format!("{}.lora_a", layer.name),
            Tensor::new(&[cfg.rank, layer.d_in], a_data)?,
            true,
        )?;
        let b = store.add(
            format!("{}.lora_b", layer.name),
            Tensor::zeros(&[layer.d_out, cfg.rank]),
            true,
        )?;
        layer.adapter = Some(LoraAdapter {
            a,
            b,
            base: layer.weight,
            rank: cfg.rank,
            alpha: cfg.alpha,
            merged: false,
        });
        names.push(layer.name.clone());
    }
    Ok(names)
}

pub fn merge_all<M: Adaptable>(model: &mut M) -> Result<()> {
    let (store, layers) = model.parts_mut();
    for layer in layers {
        if let Some(ad) = layer.adapter.as_mut() {
            ad.merge(store)?;
        }
    }
    Ok(())
}

pub fn unmerge_all<M: Adaptable>(model: &mut M) -> Result<()> {
    let (store, layers) = model.parts_mut();
    for layer in layers {
        if let Some(ad) = layer.adapter.as_mut() {
            ad.unmerge(store)?;
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub trainable: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn fraction(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.trainable as f64 / self.total as f64
        }
    }
}

/// Counts scalars; `trainable` covers only trainable-flagged parameters.
pub fn trainable_count(store: &ParamStore) -> ParamCount {
    store.iter().fold(ParamCount { trainable: 0, total: 0 }, |acc, (_, p)| {
        let n = p.tensor.numel();
        ParamCount {
            trainable: acc.trainable + if p.trainable() { n } else { 0 },
            total: acc.total + n,
        }
    })
}

/// `Σ r·(d_in + d_out)` over the adapted layers.
pub fn adapter_budget<M: Adaptable>(model: &M) -> usize {
    model
        .layers()
        .iter()
        .filter_map(|l| l.adapter.as_ref().map(|a| a.rank * (l.d_in + l.d_out)))
        .sum()
}

/// Parameter ids of every adapter factor in the model.
pub fn adapter_params<M: Adaptable>(model: &M) -> Vec<ParamId> {
    model
        .layers()
        .iter()
        .filter_map(|l| l.adapter.as_ref())
        .flat_map(|a| [a.a, a.b])
        .collect()
}

/// Adapter-only checkpoint: the A/B factors plus header records carrying
/// rank, alpha, init scale and the selector (one UTF-8 byte per element).
pub fn adapter_checkpoint<M: Adaptable>(model: &M, cfg: &AdapterConfig) -> Checkpoint {
    let store = model.store();
    let mut records = vec![
        (META_RANK.to_owned(), vec![1], vec![cfg.rank as f32]),
        (META_ALPHA.to_owned(), vec![1], vec![cfg.alpha]),
        (META_INIT_SCALE.to_owned(), vec![1], vec![cfg.init_scale]),
        (
            META_SELECTOR.to_owned(),
            vec![cfg.selector.len()],
            cfg.selector.bytes().map(f32::from).collect(),
        ),
    ];
    for id in adapter_params(model) {
        let p = store.get(id);
        records.push((p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()));
    }
    Checkpoint { records }
}

/// Reads the header of an adapter-only checkpoint.
pub fn adapter_config_from_checkpoint(ckpt: &Checkpoint) -> Result<AdapterConfig> {
    let scalar = |name: &str| -> Result<f32> {
        match ckpt.get(name) {
            Some((_, [v])) => Ok(*v),
            _ => Err(Error::Format(format!("adapter checkpoint lacks `{name}`"))),
        }
    };
    let selector_bytes = ckpt
        .get(META_SELECTOR)
        .ok_or_else(|| Error::Format(format!("adapter checkpoint lacks `{META_SELECTOR}`")))?
        .1
        .iter()
        .map(|&v| {
            if (0.0..=255.0).contains(&v) && v.fract() == 0.0 {
                Ok(v as u8)
            } else {
                Err(Error::Format(format!("selector byte {v} out of range")))
            }
        })
        .collect::<Result<Vec<u8>>>()?;
    let selector = String::from_utf8(selector_bytes).map_err(|e| Error::Format(e.to_string()))?;
    Ok(AdapterConfig {
        rank: scalar(META_RANK)? as usize,
        alpha: scalar(META_ALPHA)?,
        selector,
        init_scale: scalar(META_INIT_SCALE)?,
        seed: 0,
    })
}

/// Injects adapters described by an adapter-only checkpoint and loads the
/// stored factors.
pub fn load_adapters<M: Adaptable>(model: &mut M, ckpt: &Checkpoint) -> Result<AdapterConfig> {
    let cfg = adapter_config_from_checkpoint(ckpt)?;
    inject(model, &cfg)?;
    let ids = adapter_params(model);
    let (store, _) = model.parts_mut();
    for id in ids {
        let p = store.get_mut(id);
        let (shape, data) = ckpt
            .get(&p.name)
            .ok_or_else(|| Error::Format(format!("adapter checkpoint lacks `{}`", p.name)))?;
        if shape != p.tensor.shape() {
            return Err(Error::shape("load_adapters", p.tensor.shape(), shape));
        }
        p.tensor.data_mut().copy_from_slice(data);
    }
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use rand::Rng;

    use super::*;
    use crate::nn::{Init, Mlp};
    use crate::tensor::{AdamW, AdamWConfig, Tape};

    fn identity_layer(a: &[f32], b: &[f32]) -> (ParamStore, Linear) {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let mut lin = Linear::new(&mut store, "fc", 2, 2, false, Init::Zeros, &mut rng).unwrap();
        store
            .get_mut(lin.weight)
            .tensor
            .data_mut()
            .copy_from_slice(Tensor::eye(2).data());
        let a = store.add("fc.lora_a", Tensor::new(&[1, 2], a.to_vec()).unwrap(), true).unwrap();
        let b = store.add("fc.lora_b", Tensor::new(&[2, 1], b.to_vec()).unwrap(), true).unwrap();
        lin.adapter = Some(LoraAdapter {
            a,
            b,
            base: lin.weight,
            rank: 1,
            alpha: 1.0,
            merged: false,
        });
        (store, lin)
    }

    #[test]
    fn hand_computed_adapted_forward() {
        let (store, lin) = identity_layer(&[1.0, 2.0], &[3.0, 4.0]);
        let mut tape = Tape::new();
        let x = tape.constant(1, 2, vec![1.0, 0.0]).unwrap();
        let y = lin.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), &[4.0, 4.0]);
    }

    #[test]
    fn hand_computed_merge() {
        let (mut store, mut lin) = identity_layer(&[1.0, 2.0], &[3.0, 4.0]);
        let merged = lin.adapter.as_mut().unwrap().merge(&mut store).unwrap();
        assert_eq!(merged.data(), &[4.0, 6.0, 4.0, 9.0]);
        assert!(lin.adapter.as_ref().unwrap().merged());
    }

    #[test]
    fn double_merge_is_a_state_error() {
        let (mut store, mut lin) = identity_layer(&[1.0, 2.0], &[3.0, 4.0]);
        let ad = lin.adapter.as_mut().unwrap();
        ad.merge(&mut store).unwrap();
        assert!(matches!(ad.merge(&mut store), Err(Error::State(_))));
        ad.unmerge(&mut store).unwrap();
        assert!(matches!(ad.unmerge(&mut store), Err(Error::State(_))));
    }

    #[test]
    fn zero_adapter_merge_is_bitwise_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new("net", &[6, 5, 3], &mut rng).unwrap();
        let before = mlp.store.clone();
        inject(&mut mlp, &AdapterConfig::new(2, "net.*")).unwrap();
        merge_all(&mut mlp).unwrap();
        for l in &mlp.layers {
            let a: Vec<u32> = before.get(l.weight).tensor.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = mlp.store.get(l.weight).tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn selector_without_match_is_a_config_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new("body", &[4, 4, 2], &mut rng).unwrap();
        let err = inject(&mut mlp, &AdapterConfig::new(1, "head.*")).unwrap_err();
        assert!(matches!(err, Error::Config(_)), "{err}");
    }

    #[test]
    fn oversized_rank_is_a_rank_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new("net", &[4, 8, 2], &mut rng).unwrap();
        let before = mlp.store.clone();
        let err = inject(&mut mlp, &AdapterConfig::new(3, "net.*")).unwrap_err();
        assert!(matches!(err, Error::Rank { rank: 3, limit: 2, .. }), "{err}");
        assert_eq!(mlp.store, before, "failed injection must not mutate the model");
    }

    #[test]
    fn injection_freezes_base_and_counts_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new("net", &[32, 64, 10], &mut rng).unwrap();
        let base_total = trainable_count(&mlp.store).total;
        inject(&mut mlp, &AdapterConfig::new(4, "net.0.weight")).unwrap();
        let count = trainable_count(&mlp.store);
        assert_eq!(count.trainable, 4 * (32 + 64));
        assert_eq!(count.trainable, 384);
        assert_eq!(count.total, base_total + 384);
        assert_eq!(adapter_budget(&mlp), 384);
        for l in &mlp.layers {
            assert!(!mlp.store.get(l.weight).trainable());
        }
    }

    #[test]
    fn square_layer_break_even() {
        // 2·d·r ≥ d² exactly when r ≥ d/2.
        let d = 16;
        for r in 1..=d {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let mut store = ParamStore::new();
            let lin = Linear::new(&mut store, "sq", d, d, false, Init::Scaled(1.0), &mut rng).unwrap();
            let mut mlp = Mlp { store, layers: vec![lin] };
            inject(&mut mlp, &AdapterConfig::new(r, "sq.weight")).unwrap();
            let t = trainable_count(&mlp.store).trainable;
            assert_eq!(t, 2 * d * r);
            assert_eq!(t >= d * d, r >= d / 2);
        }
    }

    #[test]
    fn fully_frozen_model_has_no_trainable_parameters() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut mlp = Mlp::new("net", &[3, 3], &mut rng).unwrap();
        mlp.store.freeze_all();
        assert_eq!(trainable_count(&mlp.store).trainable, 0);
    }

    #[test]
    fn training_updates_only_adapters() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut mlp = Mlp::new("net", &[6, 8, 3], &mut rng).unwrap();
        inject(&mut mlp, &AdapterConfig::new(2, "net.*")).unwrap();
        let frozen: Vec<(ParamId, Vec<u32>)> = mlp
            .store
            .iter()
            .filter(|(_, p)| !p.trainable())
            .map(|(id, p)| (id, p.tensor.data().iter().map(|v| v.to_bits()).collect()))
            .collect();
        let x: Vec<f64> = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut opt = AdamW::new(AdamWConfig { lr: 1e-2, ..Default::default() });
        let mut grads_seen = Vec::new();
        for _ in 0..3 {
            mlp.store.zero_grad();
            let mut tape = Tape::new();
            let xv = tape.constant(4, 6, x.clone()).unwrap();
            let y = mlp.forward(&mut tape, xv).unwrap();
            let loss = tape.cross_entropy(y, &[0, 1, 2, 0]).unwrap();
            tape.backward(loss, &mut mlp.store).unwrap();
            let a_grad_norm: f32 = adapter_params(&mlp)
                .iter()
                .map(|&id| mlp.store.get(id).tensor.grad.as_ref().unwrap().iter().map(|g| g.abs()).sum::<f32>())
                .sum();
            grads_seen.push(a_grad_norm);
            opt.step(&mut mlp.store).unwrap();
        }
        assert!(grads_seen.iter().skip(1).all(|&g| g > 0.0));
        for (id, bits) in frozen {
            let now: Vec<u32> = mlp.store.get(id).tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(now, bits);
            assert!(mlp.store.get(id).tensor.grad.is_none());
        }
    }

    #[test]
    fn adapter_checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mlp = Mlp::new("net", &[6, 8, 3], &mut rng).unwrap();
        let fresh = mlp.clone();
        let cfg = AdapterConfig {
            alpha: 3.0,
            ..AdapterConfig::new(2, "net.0.*|net.1.weight")
        };
        inject(&mut mlp, &cfg).unwrap();
        for id in adapter_params(&mlp) {
            for v in mlp.store.get_mut(id).tensor.data_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        let bytes = adapter_checkpoint(&mlp, &cfg).to_bytes().unwrap();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut restored = fresh;
        let back = load_adapters(&mut restored, &ckpt).unwrap();
        assert_eq!(back.rank, 2);
        assert_eq!(back.alpha, 3.0);
        assert_eq!(back.selector, cfg.selector);
        let x = Tensor::new(&[2, 6], (0..12).map(|i| i as f32 * 0.1 - 0.5).collect()).unwrap();
        assert_eq!(mlp.predict(&x).unwrap(), restored.predict(&x).unwrap());
    }
}
