use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

use super::{ParamId, ParamStore, Tape, Var};

/// Compares tape gradients against central finite differences over every
/// coordinate of every trainable parameter.
///
/// Returns `max |analytic - numeric| / max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(f: F, store: &mut ParamStore, eps: f32) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    grad_check_sampled(f, store, eps, usize::MAX, 0)
}

/// Like [`grad_check`] but probes at most `per_param` randomly chosen
/// coordinates of each trainable parameter.
pub fn grad_check_sampled<F>(
    f: F,
    store: &mut ParamStore,
    eps: f32,
    per_param: usize,
    seed: u64,
) -> Result<f64>
where
    F: Fn(&mut Tape, &ParamStore) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {eps}")));
    }
    let analytic = {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        check_finite(tape.scalar(loss))?;
        let grads = tape.gradients(loss)?;
        let ids: Vec<ParamId> = store.iter().filter(|(_, p)| p.trainable()).map(|(id, _)| id).collect();
        ids.into_iter()
            .map(|id| {
                let var = tape.param(store, id);
                let n = store.get(id).tensor.numel();
                let g = grads.get(var).map_or_else(|| vec![0.0; n], <[f64]>::to_vec);
                (id, g)
            })
            .collect::<Vec<_>>()
    };

    let eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new();
        let loss = f(&mut tape, store)?;
        check_finite(tape.scalar(loss))
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for (id, grad) in analytic {
        let n = grad.len();
        let coords: Vec<usize> = if per_param >= n {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, per_param).into_vec();
            c.sort_unstable();
            c
        };
        for k in coords {
            let original = store.get(id).tensor.data()[k];
            let plus = original + eps;
            let minus = original - eps;
            store.get_mut(id).tensor.data_mut()[k] = plus;
            let f_plus = eval(store);
            store.get_mut(id).tensor.data_mut()[k] = minus;
            let f_minus = eval(store);
            store.get_mut(id).tensor.data_mut()[k] = original;
            let numeric = (f_plus? - f_minus?) / (plus as f64 - minus as f64);
            let a = grad[k];
            let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn check_finite(v: f64) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("objective evaluated to {v}")))
    }
}
