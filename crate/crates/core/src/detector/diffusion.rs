//! Forward noising of box sets and the deterministic sampling schedule.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

use super::Box4;

/// Minimum box side after clamping.
pub const MIN_SIDE: f64 = 1e-4;

/// Cosine ᾱ schedule: `ᾱ_t = f(t)/f(0)`, `f(t) = cos²(((t/T)+s)/(1+s)·π/2)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CosineSchedule {
    pub steps: usize,
    pub offset: f64,
}

impl CosineSchedule {
    pub fn new(steps: usize) -> Self {
        Self { steps, offset: 0.008 }
    }

    fn f(&self, t: f64) -> f64 {
        let x = (t / self.steps as f64 + self.offset) / (1.0 + self.offset) * std::f64::consts::FRAC_PI_2;
        x.cos().powi(2)
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            return 1.0;
        }
        (self.f(t as f64) / self.f(0.0)).clamp(0.0, 1.0)
    }

    /// Descending `(t, t_next)` pairs over `n` sampling steps; the last
    /// pair has `t_next = None`.
    pub fn sampling_pairs(&self, n: usize) -> Vec<(usize, Option<usize>)> {
        let n = n.max(1);
        let top = self.steps as f64 - 1.0;
        // linspace(-1, T-1, n+1), truncated toward zero like an int cast
        let mut times: Vec<i64> = (0..=n)
            .map(|i| (-1.0 + (top + 1.0) * i as f64 / n as f64) as i64)
            .collect();
        times.reverse();
        times
            .windows(2)
            .map(|w| (w[0].max(0) as usize, (w[1] >= 0).then_some(w[1] as usize)))
            .collect()
    }
}

pub fn to_signal(b: &Box4, scale: f64) -> Box4 {
    b.map(|v| (v * 2.0 - 1.0) * scale)
}

/// Inverse of [`to_signal`] after clamping to `[-scale, scale]`, with the
/// box sides floored at [`MIN_SIDE`].
pub fn from_signal(s: &Box4, scale: f64) -> Box4 {
    let mut b = s.map(|v| (v.clamp(-scale, scale) / scale + 1.0) / 2.0);
    b[2] = b[2].max(MIN_SIDE);
    b[3] = b[3].max(MIN_SIDE);
    b
}

pub fn random_box(rng: &mut impl Rng) -> Box4 {
    [
        rng.random_range(0.0..1.0),
        rng.random_range(0.0..1.0),
        rng.random_range(0.05..0.5),
        rng.random_range(0.05..0.5),
    ]
}

/// Ground truth once, then uniform random boxes up to `n`. Repeated copies
/// would be indistinguishable to the head while only one can be matched.
pub fn pad_boxes(gt: &[Box4], n: usize, rng: &mut impl Rng) -> Result<Vec<Box4>> {
    if gt.len() > n {
        return Err(Error::Contract(format!(
            "{} ground-truth boxes exceed {n} proposals",
            gt.len()
        )));
    }
    let mut out = Vec::with_capacity(n);
    out.extend_from_slice(gt);
    while out.len() < n {
        out.push(random_box(rng));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct Corrupted {
    /// Unclamped signal-space sample `x_t`.
    pub signal: Vec<Box4>,
    /// `x_t` clamped and mapped back to normalized cx,cy,w,h.
    pub boxes: Vec<Box4>,
}

/// `x_t = √ᾱ_t·x₀ + √(1−ᾱ_t)·ε` in signal space.
pub fn corrupt_boxes(
    padded: &[Box4],
    t: usize,
    schedule: &CosineSchedule,
    scale: f64,
    rng: &mut impl Rng,
) -> Result<Corrupted> {
    if t > schedule.steps {
        return Err(Error::Contract(format!(
            "diffusion step {t} outside 0..={}",
            schedule.steps
        )));
    }
    if padded.is_empty() {
        return Err(Error::Contract("cannot corrupt an empty box set".into()));
    }
    let ab = schedule.alpha_bar(t);
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let signal: Vec<Box4> = padded
        .iter()
        .map(|b| {
            let x0 = to_signal(b, scale);
            x0.map(|v| {
                let eps: f64 = StandardNormal.sample(rng);
                sa * v + sn * eps
            })
        })
        .collect();
    let boxes = signal.iter().map(|s| from_signal(s, scale)).collect();
    Ok(Corrupted { signal, boxes })
}
