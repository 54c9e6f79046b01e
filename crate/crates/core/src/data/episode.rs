use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::DatasetIndex;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeSpec {
    pub k: usize,
    pub seed: u64,
    pub class_ids: Vec<u32>,
}

impl EpisodeSpec {
    /// Every category of `ds`.
    pub fn all_classes(ds: &DatasetIndex, k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            class_ids: ds.categories().iter().map(|c| c.id).collect(),
        }
    }

    pub fn validate(&self, ds: &DatasetIndex) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("shots per class must be at least 1".into()));
        }
        if self.class_ids.is_empty() {
            return Err(Error::Config("episode has no classes".into()));
        }
        if let Some(c) = self.class_ids.iter().find(|&&c| ds.class_index(c).is_none()) {
            return Err(Error::Config(format!("class {c} is not in the dataset")));
        }
        Ok(())
    }
}

/// Greedy seeded k-shot sampling. Classes are visited in ascending id;
/// for each, images containing it are drawn in a seeded random order until
/// `k` selected images contain the class. An image counts toward every
/// class it contains, and all of its annotations are kept.
pub fn sample_k_shot(ds: &DatasetIndex, spec: &EpisodeSpec) -> Result<DatasetIndex> {
    spec.validate(ds)?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let classes: BTreeSet<u32> = spec.class_ids.iter().copied().collect();
    let image_classes: BTreeMap<u64, BTreeSet<u32>> = ds.images().iter().map(|i| (i.id, ds.classes_of(i.id))).collect();
    let mut chosen: BTreeSet<u64> = BTreeSet::new();

    for &c in &classes {
        let with_class: Vec<u64> = image_classes
            .iter()
            .filter(|(_, cs)| cs.contains(&c))
            .map(|(&id, _)| id)
            .collect();
        if with_class.len() < spec.k {
            return Err(Error::Coverage {
                class_id: c,
                available: with_class.len(),
                required: spec.k,
            });
        }
        let mut have = with_class.iter().filter(|id| chosen.contains(id)).count();
        let mut pool: Vec<u64> = with_class.into_iter().filter(|id| !chosen.contains(id)).collect();
        pool.shuffle(&mut rng);
        for id in pool {
            if have >= spec.k {
                break;
            }
            chosen.insert(id);
            have += 1;
        }
    }
    ds.subset(&chosen)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: DatasetIndex,
    pub val: DatasetIndex,
}

/// Seeded image-level split with `round(n · val_fraction)` images on the
/// validation side. Images are grouped by their rarest class and each
/// group is spread evenly over both sides.
pub fn split(ds: &DatasetIndex, val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!("split fraction {val_fraction} must lie in (0, 1)")));
    }
    let n = ds.images().len();
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val == n {
        return Err(Error::Config(format!(
            "splitting {n} images at {val_fraction} leaves one side empty"
        )));
    }

    let freq = ds.images_per_class();
    let mut groups: BTreeMap<(usize, u32), Vec<u64>> = BTreeMap::new();
    for img in ds.images() {
        let key = ds
            .classes_of(img.id)
            .into_iter()
            .map(|c| (freq[&c], c))
            .min()
            .unwrap_or((usize::MAX, u32::MAX));
        groups.entry(key).or_default().push(img.id);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order = Vec::with_capacity(n);
    for ids in groups.values_mut() {
        ids.shuffle(&mut rng);
        order.extend_from_slice(ids);
    }

    // Systematic selection: exactly n_val positions, evenly spaced.
    let mut val = BTreeSet::new();
    let mut train = BTreeSet::new();
    for (i, id) in order.into_iter().enumerate() {
        if (i + 1) * n_val / n > i * n_val / n {
            val.insert(id);
        } else {
            train.insert(id);
        }
    }
    Ok(Split {
        train: ds.subset(&train)?,
        val: ds.subset(&val)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, Annotation, Category, ImageRecord, SynthConfig};

    fn single_class_dataset(per_class: usize, classes: u32) -> DatasetIndex {
        let mut images = Vec::new();
        let mut anns = Vec::new();
        for c in 1..=classes {
            for j in 0..per_class {
                let id = images.len() as u64 + 1;
                images.push(ImageRecord {
                    id,
                    file_name: String::new(),
                    width: 10,
                    height: 10,
                    pixels: None,
                });
                for r in 0..=(j % 2) {
                    anns.push(Annotation {
                        id: anns.len() as u64 + 1,
                        image_id: id,
                        category_id: c,
                        bbox: [r as f64, 1.0, 2.0, 2.0],
                        area: 4.0,
                        iscrowd: 0,
                    });
                }
            }
        }
        let cats = (1..=classes).map(|c| Category { id: c, name: format!("c{c}") }).collect();
        DatasetIndex::new(images, anns, cats).unwrap()
    }

    #[test]
    fn disjoint_classes_give_exactly_k_each() {
        let ds = single_class_dataset(5, 3);
        let ep = sample_k_shot(&ds, &EpisodeSpec::all_classes(&ds, 2, 0)).unwrap();
        assert_eq!(ep.images().len(), 6);
        assert!(ep.images_per_class().values().all(|&n| n == 2));
    }

    #[test]
    fn sampling_is_seeded() {
        let ds = synth_generate(&SynthConfig::target(0)).unwrap();
        let spec = EpisodeSpec::all_classes(&ds, 5, 11);
        assert_eq!(sample_k_shot(&ds, &spec).unwrap(), sample_k_shot(&ds, &spec).unwrap());
    }

    #[test]
    fn insufficient_images_name_the_class() {
        let ds = single_class_dataset(3, 2);
        match sample_k_shot(&ds, &EpisodeSpec::all_classes(&ds, 4, 0)) {
            Err(Error::Coverage {
                class_id,
                available,
                required,
            }) => assert_eq!((class_id, available, required), (1, 3, 4)),
            other => panic!("expected coverage error, got {other:?}"),
        }
    }

    #[test]
    fn episode_spec_validation() {
        let ds = single_class_dataset(3, 2);
        assert!(sample_k_shot(&ds, &EpisodeSpec { k: 0, seed: 0, class_ids: vec![1] }).is_err());
        assert!(sample_k_shot(&ds, &EpisodeSpec { k: 1, seed: 0, class_ids: vec![] }).is_err());
        assert!(sample_k_shot(&ds, &EpisodeSpec { k: 1, seed: 0, class_ids: vec![9] }).is_err());
    }

    #[test]
    fn half_split_of_ten() {
        let ds = single_class_dataset(5, 2);
        let s = split(&ds, 0.5, 3).unwrap();
        assert_eq!((s.train.images().len(), s.val.images().len()), (5, 5));
        let a: BTreeSet<u64> = s.train.images().iter().map(|i| i.id).collect();
        let b: BTreeSet<u64> = s.val.images().iter().map(|i| i.id).collect();
        assert!(a.is_disjoint(&b));
        let all: BTreeSet<u64> = ds.images().iter().map(|i| i.id).collect();
        assert_eq!(&a | &b, all);
    }

    #[test]
    fn split_errors() {
        let ds = single_class_dataset(2, 1);
        assert!(matches!(split(&ds, 0.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, 1.0, 0), Err(Error::Config(_))));
        assert!(matches!(split(&ds, 0.1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn split_retains_classes_on_default_sets() {
        for ds in [
            synth_generate(&SynthConfig::source(0)).unwrap(),
            synth_generate(&SynthConfig::target(0)).unwrap(),
        ] {
            let s = split(&ds, 0.2, 0).unwrap();
            for side in [&s.train, &s.val] {
                assert!(side.images_per_class().values().all(|&n| n > 0));
            }
        }
    }
}
