//! Procedural scenes of flat coloured shapes on a textured background.

use std::sync::Arc;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{Annotation, Category, DatasetIndex, ImageRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Density {
    /// Objects scattered uniformly without overlap.
    Sparse,
    /// Objects packed around a few cluster centres.
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_images: usize,
    pub image_size: u32,
    pub objects_per_image: (usize, usize),
    /// Object side as a fraction of the image side.
    pub object_scale: (f64, f64),
    pub n_classes: usize,
    /// Added to every channel of every pixel, in intensity units.
    pub brightness_shift: f64,
    pub density: Density,
    pub seed: u64,
    /// First image and annotation id; lets pools from one profile stay
    /// disjoint.
    pub first_id: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self::source(0)
    }
}

impl SynthConfig {
    /// Sparse scenes with few, large objects at neutral brightness.
    pub fn source(seed: u64) -> Self {
        Self {
            n_images: 300,
            image_size: 64,
            objects_per_image: (1, 4),
            object_scale: (0.18, 0.4),
            n_classes: 3,
            brightness_shift: 0.0,
            density: Density::Sparse,
            seed,
            first_id: 1,
        }
    }

    /// Dense scenes with more, smaller objects and a brightness shift.
    pub fn target(seed: u64) -> Self {
        Self {
            n_images: 240,
            objects_per_image: (3, 7),
            object_scale: (0.12, 0.25),
            brightness_shift: 0.25,
            density: Density::Dense,
            ..Self::source(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.object_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 0.5) {
            return Err(Error::Config(format!("object scale range {lo}..{hi} must lie in (0, 0.5]")));
        }
        let (a, b) = self.objects_per_image;
        if a > b {
            return Err(Error::Config(format!("objects per image range {a}..{b} is empty")));
        }
        if self.n_classes == 0 || self.n_classes > PALETTE.len() {
            return Err(Error::Config(format!("class count must lie in 1..={}", PALETTE.len())));
        }
        if self.image_size < 8 {
            return Err(Error::Config("image size must be at least 8".into()));
        }
        if !self.brightness_shift.is_finite() || self.brightness_shift.abs() > 0.3 {
            return Err(Error::Config("brightness shift must lie in [-0.3, 0.3]".into()));
        }
        if self.first_id == 0 {
            return Err(Error::Config("first id must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
    Triangle,
    Cross,
    Ring,
    Diamond,
}

const SHAPES: [Shape; 6] = [
    Shape::Rect,
    Shape::Ellipse,
    Shape::Triangle,
    Shape::Cross,
    Shape::Ring,
    Shape::Diamond,
];

// Capped at 0.65 so that a +0.3 shift never saturates.
const PALETTE: [[f64; 3]; 6] = [
    [0.65, 0.15, 0.12],
    [0.12, 0.58, 0.18],
    [0.15, 0.22, 0.65],
    [0.62, 0.58, 0.10],
    [0.55, 0.12, 0.60],
    [0.10, 0.55, 0.60],
];

const CLASS_NAMES: [&str; 6] = ["rect", "ellipse", "triangle", "cross", "ring", "diamond"];

/// Whether the unit-square point `(u, v)` lies inside the shape.
fn inside(shape: Shape, u: f64, v: f64) -> bool {
    let (x, y) = (u - 0.5, v - 0.5);
    match shape {
        Shape::Rect => true,
        Shape::Ellipse => x * x + y * y <= 0.25,
        Shape::Triangle => x.abs() <= v / 2.0,
        Shape::Cross => x.abs() <= 0.17 || y.abs() <= 0.17,
        Shape::Ring => {
            let r2 = x * x + y * y;
            (0.09..=0.25).contains(&r2)
        }
        Shape::Diamond => x.abs() + y.abs() <= 0.5,
    }
}

fn overlap(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = ((a[0] + a[2]).min(b[0] + b[2]) - a[0].max(b[0])).max(0.0);
    let ih = ((a[1] + a[3]).min(b[1] + b[3]) - a[1].max(b[1])).max(0.0);
    iw * ih / (a[2] * a[3]).min(b[2] * b[3])
}

fn place(cfg: &SynthConfig, rng: &mut ChaCha8Rng, centres: &[(f64, f64)], placed: &[[f64; 4]]) -> Option<[f64; 4]> {
    let s = cfg.image_size as f64;
    let max_overlap = match cfg.density {
        Density::Sparse => 0.0,
        Density::Dense => 0.25,
    };
    for _ in 0..50 {
        let w = (rng.random_range(cfg.object_scale.0..=cfg.object_scale.1) * s).max(2.0);
        let h = (w * rng.random_range(0.75..=1.33)).clamp(2.0, 0.5 * s);
        let (x, y) = match cfg.density {
            Density::Sparse => (rng.random_range(0.0..=s - w), rng.random_range(0.0..=s - h)),
            Density::Dense => {
                let (cx, cy) = centres[rng.random_range(0..centres.len())];
                let spread = 0.22 * s;
                (
                    (cx + rng.random_range(-spread..=spread) - w / 2.0).clamp(0.0, s - w),
                    (cy + rng.random_range(-spread..=spread) - h / 2.0).clamp(0.0, s - h),
                )
            }
        };
        let b = [x, y, w, h];
        if placed.iter().all(|p| overlap(p, &b) <= max_overlap) {
            return Some(b);
        }
    }
    None
}

fn background(size: u32, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.26..0.34));
    let (fx, fy): (f64, f64) = (rng.random_range(0.05..0.2), rng.random_range(0.05..0.2));
    let (px, py): (f64, f64) = (rng.random_range(0.0..6.3), rng.random_range(0.0..6.3));
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let wave = 0.04 * ((x as f64 * fx + px).sin() + (y as f64 * fy + py).sin()) / 2.0;
            let grain = rng.random_range(-0.025..0.025);
            out.push(tint.map(|t| t + wave + grain));
        }
    }
    out
}

/// Generates a dataset with in-memory pixels. File names point at PPM
/// files as written by [`DatasetIndex::save_dir`].
pub fn synth_generate(cfg: &SynthConfig) -> Result<DatasetIndex> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let size = cfg.image_size;
    let categories: Vec<Category> = (0..cfg.n_classes)
        .map(|c| Category {
            id: c as u32 + 1,
            name: CLASS_NAMES[c].to_owned(),
        })
        .collect();
    let mut images = Vec::with_capacity(cfg.n_images);
    let mut annotations = Vec::new();
    let mut next_ann = cfg.first_id;

    for k in 0..cfg.n_images {
        let id = cfg.first_id + k as u64;
        let n_obj = rng.random_range(cfg.objects_per_image.0..=cfg.objects_per_image.1);
        let s = size as f64;
        let centres: Vec<(f64, f64)> = (0..rng.random_range(1..=2))
            .map(|_| (rng.random_range(0.25 * s..0.75 * s), rng.random_range(0.25 * s..0.75 * s)))
            .collect();
        let mut pixels = background(size, &mut rng);
        let mut placed: Vec<[f64; 4]> = Vec::with_capacity(n_obj);
        let mut classes = Vec::with_capacity(n_obj);
        while placed.len() < n_obj {
            // Relax the layout when a crowded scene runs out of room.
            let b = place(cfg, &mut rng, &centres, &placed).unwrap_or_else(|| {
                let w = cfg.object_scale.0 * s;
                [rng.random_range(0.0..=s - w), rng.random_range(0.0..=s - w), w, w]
            });
            placed.push(b);
            classes.push(rng.random_range(0..cfg.n_classes));
        }

        for (b, &c) in placed.iter().zip(&classes) {
            let shape = SHAPES[c];
            let colour = PALETTE[c];
            let shade = rng.random_range(-0.04..0.04);
            let [x0, y0, w, h] = *b;
            for py in (y0.floor() as u32)..((y0 + h).ceil() as u32).min(size) {
                for px in (x0.floor() as u32)..((x0 + w).ceil() as u32).min(size) {
                    let u = (px as f64 + 0.5 - x0) / w;
                    let v = (py as f64 + 0.5 - y0) / h;
                    if (0.0..=1.0).contains(&u) && (0.0..=1.0).contains(&v) && inside(shape, u, v) {
                        pixels[(py * size + px) as usize] = colour.map(|ch| ch + shade);
                    }
                }
            }
            annotations.push(Annotation {
                id: next_ann,
                image_id: id,
                category_id: c as u32 + 1,
                bbox: *b,
                area: w * h,
                iscrowd: 0,
            });
            next_ann += 1;
        }

        let img = RgbImage::from_fn(size, size, |x, y| {
            let p = pixels[(y * size + x) as usize];
            Rgb(p.map(|v| ((v + cfg.brightness_shift).clamp(0.0, 1.0) * 255.0).round() as u8))
        });
        images.push(ImageRecord {
            id,
            file_name: format!("img_{id:06}.ppm"),
            width: size,
            height: size,
            pixels: Some(Arc::new(img)),
        });
    }
    DatasetIndex::new(images, annotations, categories)
}
