//! COCO-schema dataset index, synthetic scene generation and seeded
//! few-shot episode sampling.

mod episode;
mod synth;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::Path;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::detector::BoxSet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use episode::{sample_k_shot, split, EpisodeSpec, Split};
pub use synth::{synth_generate, Density, SynthConfig};

/// Name of the annotation file inside a dataset directory.
pub const ANNOTATION_FILE: &str = "annotations.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: u64,
    #[serde(default)]
    pub file_name: String,
    pub width: u32,
    pub height: u32,
    #[serde(skip)]
    pub pixels: Option<Arc<RgbImage>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u32,
    /// `[x, y, w, h]` in pixels, top-left origin.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: u32,
    pub name: String,
}

/// Validated image/annotation/category index. Images are kept sorted by
/// id and categories by id; construction fails on any dangling reference
/// or out-of-bounds box.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct DatasetIndex {
    images: Vec<ImageRecord>,
    annotations: Vec<Annotation>,
    categories: Vec<Category>,
    #[serde(skip)]
    by_image: HashMap<u64, Vec<usize>>,
}

#[derive(Deserialize)]
struct RawIndex {
    images: Vec<ImageRecord>,
    annotations: Vec<Annotation>,
    categories: Vec<Category>,
}

impl DatasetIndex {
    pub fn new(mut images: Vec<ImageRecord>, annotations: Vec<Annotation>, mut categories: Vec<Category>) -> Result<Self> {
        images.sort_by_key(|i| i.id);
        categories.sort_by_key(|c| c.id);
        if let Some(w) = images.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Contract(format!("duplicate image id {}", w[0].id)));
        }
        if let Some(w) = categories.windows(2).find(|w| w[0].id == w[1].id) {
            return Err(Error::Contract(format!("duplicate category id {}", w[0].id)));
        }
        let dims: HashMap<u64, (u32, u32)> = images.iter().map(|i| (i.id, (i.width, i.height))).collect();
        let cats: HashSet<u32> = categories.iter().map(|c| c.id).collect();
        let mut seen = HashSet::new();
        let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
        for (k, a) in annotations.iter().enumerate() {
            let fail = |reason: String| Error::Integrity {
                annotation_id: a.id,
                reason,
            };
            if !seen.insert(a.id) {
                return Err(fail("duplicate annotation id".into()));
            }
            let Some(&(w, h)) = dims.get(&a.image_id) else {
                return Err(fail(format!("image_id {} does not resolve", a.image_id)));
            };
            if !cats.contains(&a.category_id) {
                return Err(fail(format!("category_id {} does not resolve", a.category_id)));
            }
            let [x, y, bw, bh] = a.bbox;
            if !a.bbox.iter().all(|v| v.is_finite()) || bw <= 0.0 || bh <= 0.0 {
                return Err(fail(format!("bbox {:?} has non-positive size", a.bbox)));
            }
            let tol = 1e-6;
            if x < -tol || y < -tol || x + bw > w as f64 + tol || y + bh > h as f64 + tol {
                return Err(fail(format!("bbox {:?} exceeds image bounds {w}x{h}", a.bbox)));
            }
            by_image.entry(a.image_id).or_default().push(k);
        }
        Ok(Self {
            images,
            annotations,
            categories,
            by_image,
        })
    }

    pub fn images(&self) -> &[ImageRecord] {
        &self.images
    }

    pub fn annotations(&self) -> &[Annotation] {
        &self.annotations
    }

    pub fn categories(&self) -> &[Category] {
        &self.categories
    }

    pub fn image(&self, id: u64) -> Option<&ImageRecord> {
        self.images.binary_search_by_key(&id, |i| i.id).ok().map(|k| &self.images[k])
    }

    pub fn annotations_of(&self, image_id: u64) -> impl Iterator<Item = &Annotation> {
        self.by_image
            .get(&image_id)
            .into_iter()
            .flatten()
            .map(|&k| &self.annotations[k])
    }

    /// Category ids present in an image, ascending.
    pub fn classes_of(&self, image_id: u64) -> BTreeSet<u32> {
        self.annotations_of(image_id).map(|a| a.category_id).collect()
    }

    /// Number of images containing each category.
    pub fn images_per_class(&self) -> BTreeMap<u32, usize> {
        let mut out: BTreeMap<u32, usize> = self.categories.iter().map(|c| (c.id, 0)).collect();
        for img in &self.images {
            for c in self.classes_of(img.id) {
                *out.entry(c).or_default() += 1;
            }
        }
        out
    }

    /// Contiguous detector class index of a category (its rank among the
    /// sorted category ids).
    pub fn class_index(&self, category_id: u32) -> Option<u32> {
        self.categories
            .binary_search_by_key(&category_id, |c| c.id)
            .ok()
            .map(|k| k as u32)
    }

    pub fn category_id(&self, class_index: u32) -> Option<u32> {
        self.categories.get(class_index as usize).map(|c| c.id)
    }

    /// Keeps the listed images and all of their annotations; categories
    /// are kept whole.
    pub fn subset(&self, image_ids: &BTreeSet<u64>) -> Result<Self> {
        if let Some(missing) = image_ids.iter().find(|&&id| self.image(id).is_none()) {
            return Err(Error::Contract(format!("image {missing} is not in the dataset")));
        }
        let images = self.images.iter().filter(|i| image_ids.contains(&i.id)).cloned().collect();
        let annotations = self
            .annotations
            .iter()
            .filter(|a| image_ids.contains(&a.image_id))
            .cloned()
            .collect();
        Self::new(images, annotations, self.categories.clone())
    }

    /// Normalized `cx, cy, w, h` ground truth with contiguous class ids.
    pub fn ground_truth(&self, image_id: u64) -> Result<BoxSet> {
        let img = self
            .image(image_id)
            .ok_or_else(|| Error::Contract(format!("image {image_id} is not in the dataset")))?;
        let (w, h) = (img.width as f64, img.height as f64);
        let mut set = BoxSet::default();
        for a in self.annotations_of(image_id) {
            let [x, y, bw, bh] = a.bbox;
            set.boxes.push([(x + bw / 2.0) / w, (y + bh / 2.0) / h, bw / w, bh / h]);
            set.classes.push(self.class_index(a.category_id).expect("validated category"));
        }
        Ok(set)
    }

    /// `H×W×3` tensor with intensities in `[0, 1]`.
    pub fn image_tensor(&self, image_id: u64) -> Result<Tensor> {
        let img = self
            .image(image_id)
            .ok_or_else(|| Error::Contract(format!("image {image_id} is not in the dataset")))?;
        let px = img
            .pixels
            .as_ref()
            .ok_or_else(|| Error::State(format!("pixels of image {image_id} are not loaded")))?;
        let data = px.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
        Tensor::new(&[px.height() as usize, px.width() as usize, 3], data)
    }

    pub fn to_coco_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("dataset index serializes")
    }

    /// Writes `annotations.json` plus one PPM per image with pixels.
    pub fn save_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for img in &self.images {
            if let Some(px) = &img.pixels {
                let path = dir.join(&img.file_name);
                px.save_with_format(&path, image::ImageFormat::Pnm)
                    .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            }
        }
        let path = dir.join(ANNOTATION_FILE);
        std::fs::write(&path, self.to_coco_json()).map_err(|e| Error::io(&path, e))
    }

    /// Reads `annotations.json` and every referenced image.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let path = dir.join(ANNOTATION_FILE);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let mut ds = load_coco_json(&bytes)?;
        for img in &mut ds.images {
            let path = dir.join(&img.file_name);
            let px = image::open(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?
                .into_rgb8();
            if (px.width(), px.height()) != (img.width, img.height) {
                return Err(Error::Contract(format!(
                    "{} is {}x{}, annotations say {}x{}",
                    path.display(),
                    px.width(),
                    px.height(),
                    img.width,
                    img.height
                )));
            }
            img.pixels = Some(Arc::new(px));
        }
        Ok(ds)
    }
}

/// Parses a COCO JSON document; unknown fields are ignored.
pub fn load_coco_json(bytes: &[u8]) -> Result<DatasetIndex> {
    let raw: RawIndex = serde_json::from_slice(bytes).map_err(|e| Error::Parse {
        offset: byte_offset(bytes, e.line(), e.column()),
        message: e.to_string(),
    })?;
    DatasetIndex::new(raw.images, raw.annotations, raw.categories)
}

fn byte_offset(bytes: &[u8], line: usize, column: usize) -> usize {
    if line == 0 {
        return 0;
    }
    let line_start = bytes
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == b'\n')
        .nth(line.saturating_sub(2))
        .map_or(0, |(k, _)| k + 1);
    let start = if line == 1 { 0 } else { line_start };
    (start + column.saturating_sub(1)).min(bytes.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "info": {"year": 2024},
        "images": [{"id": 1, "file_name": "a.ppm", "width": 64, "height": 48, "license": 3}],
        "annotations": [{"id": 10, "image_id": 1, "category_id": 2, "bbox": [4, 5, 10, 20], "area": 200, "iscrowd": 0}],
        "categories": [{"id": 2, "name": "plane", "supercategory": "vehicle"}]
    }"#;

    #[test]
    fn minimal_document() {
        let ds = load_coco_json(MINIMAL.as_bytes()).unwrap();
        assert_eq!(
            (ds.images().len(), ds.annotations().len(), ds.categories().len()),
            (1, 1, 1)
        );
        let gt = ds.ground_truth(1).unwrap();
        assert_eq!(gt.classes, vec![0]);
        assert_eq!(gt.boxes, vec![[9.0 / 64.0, 15.0 / 48.0, 10.0 / 64.0, 20.0 / 48.0]]);
    }

    #[test]
    fn dangling_image_names_annotation() {
        let doc = MINIMAL.replace("\"image_id\": 1", "\"image_id\": 999");
        match load_coco_json(doc.as_bytes()) {
            Err(Error::Integrity { annotation_id, reason }) => {
                assert_eq!(annotation_id, 10);
                assert!(reason.contains("999"));
            }
            other => panic!("expected integrity error, got {other:?}"),
        }
    }

    #[test]
    fn dangling_category_names_annotation() {
        let doc = MINIMAL.replace("\"category_id\": 2", "\"category_id\": 7");
        assert!(matches!(
            load_coco_json(doc.as_bytes()),
            Err(Error::Integrity { annotation_id: 10, .. })
        ));
    }

    #[test]
    fn box_outside_image() {
        let doc = MINIMAL.replace("[4, 5, 10, 20]", "[60, 5, 10, 20]");
        assert!(matches!(load_coco_json(doc.as_bytes()), Err(Error::Integrity { .. })));
        let doc = MINIMAL.replace("[4, 5, 10, 20]", "[4, 5, 0, 20]");
        assert!(matches!(load_coco_json(doc.as_bytes()), Err(Error::Integrity { .. })));
    }

    #[test]
    fn malformed_json_reports_byte_offset() {
        let doc = b"{\n  \"images\": [,]\n}";
        match load_coco_json(doc) {
            Err(Error::Parse { offset, .. }) => assert_eq!(doc[offset], b','),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn json_round_trip() {
        let ds = load_coco_json(MINIMAL.as_bytes()).unwrap();
        let again = load_coco_json(ds.to_coco_json().as_bytes()).unwrap();
        assert_eq!(ds, again);
    }

    #[test]
    fn directory_round_trip_keeps_pixels() {
        let cfg = SynthConfig {
            n_images: 3,
            ..SynthConfig::source(0)
        };
        let ds = synth_generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        ds.save_dir(dir.path()).unwrap();
        let back = DatasetIndex::load_dir(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn subset_rejects_unknown_images() {
        let ds = load_coco_json(MINIMAL.as_bytes()).unwrap();
        assert!(ds.subset(&BTreeSet::from([2])).is_err());
        assert_eq!(ds.subset(&BTreeSet::from([1])).unwrap(), ds);
    }
}
