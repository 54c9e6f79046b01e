//! Desk-scale diffusion box detector.
//!
//! Training corrupts padded ground-truth boxes with the cosine noise
//! schedule and learns to recover them; inference starts from Gaussian
//! noise in signal space and refines the proposals over a few
//! deterministic sampling steps.
//!
//! The backbone embeds non-overlapping patches and mixes them with a
//! residual two-layer MLP. The head pools each proposal from the feature
//! grid by bilinear sampling, lets proposals attend to one another, then
//! splits into classification and box-regression branches.

pub mod diffusion;
pub mod hungarian;
pub mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::Adaptable;
use crate::nn::{Init, Linear};
use crate::tensor::{Checkpoint, ParamStore, Tape, Tensor, Var};

use diffusion::{corrupt_boxes, from_signal, pad_boxes, CosineSchedule};
pub use hungarian::hungarian_match;
pub use loss::{giou, set_loss, LossWeights};

/// Normalized `[cx, cy, w, h]`.
pub type Box4 = [f64; 4];

/// Hidden weights of the head. The output projections are left alone
/// because their width (classes + 1, or 4) caps the admissible rank.
pub const HEAD_SELECTOR: &str = "head.fc1.weight|head.cross.*.weight|head.attn.*.weight|head.fc2.weight|head.cls.fc.weight|head.reg.fc.weight";

/// Layers adapted by default: every hidden weight of backbone and head.
pub const DEFAULT_SELECTOR: &str = "backbone.*.weight|head.fc1.weight|head.cross.*.weight|head.attn.*.weight|head.fc2.weight|head.cls.fc.weight|head.reg.fc.weight";

const TIME_FEATURES: usize = 8;
const POS_FEATURES: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_proposals: usize,
    pub diffusion_steps: usize,
    pub sampling_steps: usize,
    pub signal_scale: f64,
    pub n_classes: usize,
    pub score_threshold: f64,
    pub max_detections: usize,
    pub loss: LossWeights,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            patch_size: 8,
            channels: 3,
            embed_dim: 128,
            hidden_dim: 128,
            n_proposals: 50,
            diffusion_steps: 1000,
            sampling_steps: 4,
            signal_scale: 2.0,
            n_classes: 3,
            score_threshold: 0.05,
            max_detections: 300,
            loss: LossWeights::default(),
        }
    }
}

impl DetectorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image size {} is not divisible by patch size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.sampling_steps == 0 || self.sampling_steps > self.diffusion_steps {
            return Err(Error::Config(format!(
                "sampling steps must lie in 1..={}, got {}",
                self.diffusion_steps, self.sampling_steps
            )));
        }
        if self.n_proposals == 0 || self.n_classes == 0 || self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("proposal, class and width counts must be positive".into()));
        }
        if !(self.signal_scale > 0.0) {
            return Err(Error::Config("signal scale must be positive".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    fn head_in(&self) -> usize {
        4 * self.embed_dim + 4 + TIME_FEATURES
    }
}

/// Boxes with class ids and, for predictions, confidence scores.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub boxes: Vec<Box4>,
    pub classes: Vec<u32>,
    pub scores: Option<Vec<f64>>,
}

impl BoxSet {
    pub fn new(boxes: Vec<Box4>, classes: Vec<u32>) -> Self {
        Self {
            boxes,
            classes,
            scores: None,
        }
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    /// cx, cy ∈ [0,1], w, h ∈ (0,1], scores (if any) in [0,1] and sorted
    /// descending.
    pub fn is_valid(&self) -> bool {
        let boxes_ok = self.boxes.iter().all(|b| {
            (0.0..=1.0).contains(&b[0]) && (0.0..=1.0).contains(&b[1]) && b[2] > 0.0 && b[2] <= 1.0 && b[3] > 0.0 && b[3] <= 1.0
        });
        let scores_ok = self.scores.as_ref().is_none_or(|s| {
            s.len() == self.boxes.len()
                && s.iter().all(|v| (0.0..=1.0).contains(v))
                && s.windows(2).all(|w| w[0] >= w[1])
        });
        boxes_ok && scores_ok && self.classes.len() == self.boxes.len()
    }
}

/// Per-proposal head outputs recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadOutput {
    /// `N×(n_classes+1)`, background last.
    pub logits: Var,
    /// `N×4` signal-space deltas.
    pub deltas: Var,
    /// `N×4` predicted `x₀` in signal space.
    pub x0_signal: Var,
    /// `N×4` predicted normalized boxes (unclamped).
    pub boxes: Var,
}

#[derive(Debug, Clone)]
struct Layers {
    patch_embed: Linear,
    mix1: Linear,
    mix2: Linear,
    fc1: Linear,
    cross_q: Linear,
    cross_k: Linear,
    cross_v: Linear,
    cross_o: Linear,
    attn_q: Linear,
    attn_k: Linear,
    attn_v: Linear,
    attn_o: Linear,
    fc2: Linear,
    cls_fc: Linear,
    cls_out: Linear,
    reg_fc: Linear,
    reg_out: Linear,
}

impl Layers {
    fn all(&self) -> [&Linear; 17] {
        [
            &self.patch_embed,
            &self.mix1,
            &self.mix2,
            &self.fc1,
            &self.cross_q,
            &self.cross_k,
            &self.cross_v,
            &self.cross_o,
            &self.attn_q,
            &self.attn_k,
            &self.attn_v,
            &self.attn_o,
            &self.fc2,
            &self.cls_fc,
            &self.cls_out,
            &self.reg_fc,
            &self.reg_out,
        ]
    }

    fn all_mut(&mut self) -> [&mut Linear; 17] {
        [
            &mut self.patch_embed,
            &mut self.mix1,
            &mut self.mix2,
            &mut self.fc1,
            &mut self.cross_q,
            &mut self.cross_k,
            &mut self.cross_v,
            &mut self.cross_o,
            &mut self.attn_q,
            &mut self.attn_k,
            &mut self.attn_v,
            &mut self.attn_o,
            &mut self.fc2,
            &mut self.cls_fc,
            &mut self.cls_out,
            &mut self.reg_fc,
            &mut self.reg_out,
        ]
    }
}

#[derive(Debug, Clone)]
pub struct Detector {
    pub config: DetectorConfig,
    pub store: ParamStore,
    schedule: CosineSchedule,
    layers: Layers,
}

impl Detector {
    pub fn new(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, h) = (config.embed_dim, config.hidden_dim);
        let c = config.n_classes + 1;
        let mut lin = |name: &str, d_in: usize, d_out: usize, bias: bool, init: Init| Linear::new(&mut store, name, d_in, d_out, bias, init, &mut rng);
        let layers = Layers {
            patch_embed: lin("backbone.patch_embed", config.patch_dim(), d, false, Init::Scaled(1.0))?,
            mix1: lin("backbone.mix.0", d, d, false, Init::Scaled(2f32.sqrt()))?,
            mix2: lin("backbone.mix.1", d, d, false, Init::Scaled(0.5))?,
            fc1: lin("head.fc1", config.head_in(), h, true, Init::Scaled(2f32.sqrt()))?,
            cross_q: lin("head.cross.q", h, h, false, Init::Scaled(1.0))?,
            cross_k: lin("head.cross.k", d + POS_FEATURES, h, false, Init::Scaled(1.0))?,
            cross_v: lin("head.cross.v", d + POS_FEATURES, h, false, Init::Scaled(1.0))?,
            cross_o: lin("head.cross.o", h, h, true, Init::Scaled(0.5))?,
            attn_q: lin("head.attn.q", h, h, false, Init::Scaled(1.0))?,
            attn_k: lin("head.attn.k", h, h, false, Init::Scaled(1.0))?,
            attn_v: lin("head.attn.v", h, h, false, Init::Scaled(1.0))?,
            attn_o: lin("head.attn.o", h, h, true, Init::Scaled(0.5))?,
            fc2: lin("head.fc2", h, h, true, Init::Scaled(2f32.sqrt()))?,
            cls_fc: lin("head.cls.fc", h, h, true, Init::Scaled(2f32.sqrt()))?,
            cls_out: lin("head.cls.out", h, c, true, Init::Scaled(0.1))?,
            reg_fc: lin("head.reg.fc", h, h, true, Init::Scaled(2f32.sqrt()))?,
            reg_out: lin("head.reg.out", h, 4, true, Init::Zeros)?,
        };
        Ok(Self {
            schedule: CosineSchedule::new(config.diffusion_steps),
            config,
            store,
            layers,
        })
    }

    pub fn schedule(&self) -> &CosineSchedule {
        &self.schedule
    }

    pub fn checkpoint(&self) -> Checkpoint {
        self.store.to_checkpoint()
    }

    pub fn load_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.store.load_checkpoint(ckpt)
    }

    /// Flattens an `H×W×C` image into `G²` rows of `p·p·C` patch pixels,
    /// rows in raster order of the patch grid.
    pub fn patchify(&self, image: &Tensor) -> Result<Tensor> {
        let cfg = &self.config;
        let expected = [cfg.image_size, cfg.image_size, cfg.channels];
        if image.shape() != expected {
            return Err(Error::shape("backbone", &expected, image.shape()));
        }
        let (g, p, ch) = (cfg.grid(), cfg.patch_size, cfg.channels);
        let row_len = cfg.image_size * ch;
        let mut out = Vec::with_capacity(g * g * cfg.patch_dim());
        for gy in 0..g {
            for gx in 0..g {
                for py in 0..p {
                    let start = (gy * p + py) * row_len + gx * p * ch;
                    out.extend_from_slice(&image.data()[start..start + p * ch]);
                }
            }
        }
        Tensor::new(&[g * g, cfg.patch_dim()], out)
    }

    /// Feature grid `G²×embed_dim`, rows in raster order.
    pub fn backbone_forward(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let patches = self.patchify(image)?;
        let x = tape.constant_tensor(&patches)?;
        let l = &self.layers;
        let f0 = l.patch_embed.forward(tape, &self.store, x)?;
        let h = l.mix1.forward(tape, &self.store, f0)?;
        let h = tape.relu(h);
        let h = l.mix2.forward(tape, &self.store, h)?;
        tape.add(f0, h)
    }

    /// Bilinear sampling weights of one point per box over the `G×G` grid.
    fn sampling_matrix(&self, points: &[(f64, f64)]) -> Vec<f64> {
        let g = self.config.grid();
        let mut s = vec![0.0; points.len() * g * g];
        let top = (g - 1) as f64;
        for (i, &(px, py)) in points.iter().enumerate() {
            let u = (px * g as f64 - 0.5).clamp(0.0, top);
            let v = (py * g as f64 - 0.5).clamp(0.0, top);
            let (x0, y0) = ((u.floor() as usize).min(g.saturating_sub(2)), (v.floor() as usize).min(g.saturating_sub(2)));
            let (fx, fy) = (u - x0 as f64, v - y0 as f64);
            let row = &mut s[i * g * g..(i + 1) * g * g];
            let x1 = (x0 + 1).min(g - 1);
            let y1 = (y0 + 1).min(g - 1);
            row[y0 * g + x0] += (1.0 - fx) * (1.0 - fy);
            row[y0 * g + x1] += fx * (1.0 - fy);
            row[y1 * g + x0] += (1.0 - fx) * fy;
            row[y1 * g + x1] += fx * fy;
        }
        s
    }

    fn time_features(&self, t: usize) -> [f64; TIME_FEATURES] {
        let tau = t as f64 / self.config.diffusion_steps as f64;
        let mut out = [0.0; TIME_FEATURES];
        for k in 0..TIME_FEATURES / 2 {
            let phase = std::f64::consts::PI * tau * (1 << k) as f64;
            out[2 * k] = phase.sin();
            out[2 * k + 1] = phase.cos();
        }
        out
    }

    /// Sinusoidal encoding of each patch centre, `G²×POS_FEATURES`.
    fn position_features(&self) -> Vec<f64> {
        let g = self.config.grid();
        let mut out = Vec::with_capacity(g * g * POS_FEATURES);
        for gy in 0..g {
            for gx in 0..g {
                let (x, y) = ((gx as f64 + 0.5) / g as f64, (gy as f64 + 0.5) / g as f64);
                for k in 0..POS_FEATURES / 4 {
                    let f = std::f64::consts::PI * (1 << k) as f64;
                    out.extend([(f * x).sin(), (f * x).cos(), (f * y).sin(), (f * y).cos()]);
                }
            }
        }
        out
    }

    /// One refinement of `N` proposals given in signal space. The proposals
    /// are clamped to `[-scale, scale]` before use.
    pub fn denoise_step(&self, tape: &mut Tape, features: Var, proposals: &[Box4], t: usize) -> Result<HeadOutput> {
        let cfg = &self.config;
        let scale = cfg.signal_scale;
        let g2 = cfg.grid() * cfg.grid();
        if tape.dims(features) != (g2, cfg.embed_dim) {
            let (r, c) = tape.dims(features);
            return Err(Error::shape("denoise_step", &[g2, cfg.embed_dim], &[r, c]));
        }
        if proposals.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite proposal box".into()));
        }
        let n = proposals.len();
        let clamped: Vec<Box4> = proposals.iter().map(|b| b.map(|v| v.clamp(-scale, scale))).collect();
        let boxes: Vec<Box4> = clamped.iter().map(|s| from_signal(s, scale)).collect();

        let mut pooled = Vec::with_capacity(4);
        for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
            let pts: Vec<(f64, f64)> = boxes
                .iter()
                .map(|b| {
                    let (x1, y1) = (b[0] - b[2] / 2.0, b[1] - b[3] / 2.0);
                    ((x1 + ox * b[2]).clamp(0.0, 1.0), (y1 + oy * b[3]).clamp(0.0, 1.0))
                })
                .collect();
            let s = tape.constant(n, g2, self.sampling_matrix(&pts))?;
            pooled.push(tape.matmul(s, features)?);
        }
        let box_feat = tape.constant(n, 4, clamped.iter().flat_map(|b| b.map(|v| v / scale)).collect())?;
        let tf = self.time_features(t);
        let time = tape.constant(n, TIME_FEATURES, (0..n).flat_map(|_| tf).collect())?;
        pooled.push(box_feat);
        pooled.push(time);
        let x = tape.concat_cols(&pooled)?;

        let l = &self.layers;
        let st = &self.store;
        let h1 = l.fc1.forward(tape, st, x)?;
        let h1 = tape.relu(h1);

        // Proposals attend over the whole feature grid.
        let pos = tape.constant(g2, POS_FEATURES, self.position_features())?;
        let located = tape.concat_cols(&[features, pos])?;
        let q = l.cross_q.forward(tape, st, h1)?;
        let k = l.cross_k.forward(tape, st, located)?;
        let v = l.cross_v.forward(tape, st, located)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (cfg.hidden_dim as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, v)?;
        let seen = l.cross_o.forward(tape, st, ctx)?;
        let h1 = tape.add(h1, seen)?;

        let q = l.attn_q.forward(tape, st, h1)?;
        let k = l.attn_k.forward(tape, st, h1)?;
        let v = l.attn_v.forward(tape, st, h1)?;
        let scores = tape.matmul_nt(q, k)?;
        let scores = tape.scale(scores, 1.0 / (cfg.hidden_dim as f64).sqrt());
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, v)?;
        let mixed = l.attn_o.forward(tape, st, ctx)?;
        let h2 = tape.add(h1, mixed)?;

        let h3 = l.fc2.forward(tape, st, h2)?;
        let h3 = tape.relu(h3);

        let c = l.cls_fc.forward(tape, st, h3)?;
        let c = tape.relu(c);
        let logits = l.cls_out.forward(tape, st, c)?;

        let r = l.reg_fc.forward(tape, st, h3)?;
        let r = tape.relu(r);
        let deltas = l.reg_out.forward(tape, st, r)?;

        let base = tape.constant(n, 4, clamped.iter().flatten().copied().collect())?;
        let x0_signal = tape.add(base, deltas)?;
        let boxes = tape.scale(x0_signal, 0.5 / scale);
        let boxes = tape.add_scalar(boxes, 0.5);
        Ok(HeadOutput {
            logits,
            deltas,
            x0_signal,
            boxes,
        })
    }

    /// Records the denoising loss of one image: pad, corrupt at a random
    /// step, refine once, and score against the ground truth.
    pub fn training_loss(&self, tape: &mut Tape, image: &Tensor, gt: &BoxSet, rng: &mut impl Rng) -> Result<Var> {
        self.training_loss_draws(tape, image, gt, 1, rng)
    }

    /// Mean of `draws` independent corruptions of one image, sharing one
    /// backbone pass.
    pub fn training_loss_draws(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        gt: &BoxSet,
        draws: usize,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        if draws == 0 {
            return Err(Error::Config("at least one corruption draw is needed".into()));
        }
        let cfg = &self.config;
        let features = self.backbone_forward(tape, image)?;
        let mut total: Option<Var> = None;
        for _ in 0..draws {
            let padded = pad_boxes(&gt.boxes, cfg.n_proposals, rng)?;
            let t = rng.random_range(0..cfg.diffusion_steps);
            let noisy = corrupt_boxes(&padded, t, &self.schedule, cfg.signal_scale, rng)?;
            let out = self.denoise_step(tape, features, &noisy.signal, t)?;
            let loss = set_loss(tape, out.logits, out.boxes, gt, &cfg.loss)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, loss)?,
                None => loss,
            });
        }
        let total = total.expect("at least one draw");
        Ok(tape.scale(total, 1.0 / draws as f64))
    }

    /// Samples proposals from noise and refines them with deterministic
    /// (η = 0) updates. Emits one detection per (proposal, class) whose
    /// probability reaches the score threshold, sorted by score and capped
    /// at `max_detections`.
    pub fn infer(&self, image: &Tensor, seed: u64) -> Result<BoxSet> {
        let cfg = &self.config;
        let scale = cfg.signal_scale;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x: Vec<Box4> = (0..cfg.n_proposals)
            .map(|_| std::array::from_fn(|_| StandardNormal.sample(&mut rng)))
            .collect();

        let mut tape = Tape::new();
        let features = self.backbone_forward(&mut tape, image)?;
        let mut last = None;
        for (t, next) in self.schedule.sampling_pairs(cfg.sampling_steps) {
            let out = self.denoise_step(&mut tape, features, &x, t)?;
            let x0: Vec<Box4> = tape
                .value(out.x0_signal)
                .chunks(4)
                .map(|c| std::array::from_fn(|k| c[k].clamp(-scale, scale)))
                .collect();
            if let Some(tn) = next {
                let ab = self.schedule.alpha_bar(t);
                let ab_next = self.schedule.alpha_bar(tn);
                let (ra, rm1) = ((1.0 / ab).sqrt(), (1.0 / ab - 1.0).sqrt());
                x = x
                    .iter()
                    .zip(&x0)
                    .map(|(xt, x0)| {
                        std::array::from_fn(|k| {
                            let eps = (ra * xt[k] - x0[k]) / rm1;
                            x0[k] * ab_next.sqrt() + (1.0 - ab_next).sqrt() * eps
                        })
                    })
                    .collect();
            }
            last = Some((out, x0));
        }
        let (out, x0) = last.expect("at least one sampling step");

        let k = cfg.n_classes + 1;
        let mut dets: Vec<(f64, Box4, u32)> = Vec::new();
        for (i, row) in tape.value(out.logits).chunks(k).enumerate() {
            let mut p = row.to_vec();
            crate::tensor::softmax_in_place(&mut p);
            let b = from_signal(&x0[i], scale);
            for (c, &score) in p[..cfg.n_classes].iter().enumerate() {
                if score >= cfg.score_threshold {
                    dets.push((score, b, c as u32));
                }
            }
        }
        dets.sort_by(|a, b| b.0.total_cmp(&a.0));
        dets.truncate(cfg.max_detections);
        Ok(BoxSet {
            boxes: dets.iter().map(|d| d.1).collect(),
            classes: dets.iter().map(|d| d.2).collect(),
            scores: Some(dets.iter().map(|d| d.0).collect()),
        })
    }
}

impl Adaptable for Detector {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn parts_mut(&mut self) -> (&mut ParamStore, Vec<&mut Linear>) {
        (&mut self.store, self.layers.all_mut().into_iter().collect())
    }

    fn layers(&self) -> Vec<&Linear> {
        self.layers.all().into_iter().collect()
    }
}
