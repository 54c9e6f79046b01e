//! Acceptance run: one PASS/FAIL line per criterion, non-zero exit if any
//! enforced criterion fails. The k=1 ordering check is reported only.

mod common;

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lodet::data::{synth_generate, SynthConfig};
use lodet::detector::hungarian::{assignment_cost, hungarian_match};
use lodet::detector::{Box4, BoxSet, Detector, DetectorConfig, DEFAULT_SELECTOR, HEAD_SELECTOR};
use lodet::eval::{evaluate, IOU_THRESHOLD, MAX_DETECTIONS};
use lodet::lora::{adapter_params, inject, merge_all, trainable_count, AdapterConfig, Selector};
use lodet::nn::Mlp;
use lodet::pipeline::{
    aggregate, train, trend, write_table, Cell, ExperimentPlan, LrSchedule, Samples, Strategy, TrainConfig, Workspace,
};
use lodet::tensor::{grad_check, AdamWConfig, Tape, Tensor};

type Check = Result<(bool, String), Box<dyn std::error::Error>>;

struct Report {
    filter: Vec<String>,
    hard_failures: Vec<&'static str>,
}

impl Report {
    fn run(&mut self, name: &'static str, soft: bool, f: impl FnOnce() -> Check) {
        if !self.filter.is_empty() && !self.filter.iter().any(|f| name.contains(f.as_str())) {
            return;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(f)) {
            Ok(Ok(o)) => o,
            Ok(Err(e)) => (false, format!("error: {e}")),
            Err(p) => {
                let msg = p
                    .downcast_ref::<String>()
                    .cloned()
                    .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                    .unwrap_or_default();
                (false, format!("panic: {msg}"))
            }
        };
        let (pass, detail) = outcome;
        let tag = match (pass, soft) {
            (true, _) => "PASS",
            (false, false) => "FAIL",
            (false, true) => "FAIL (soft, not enforced)",
        };
        let line = format!("[{tag}] {name}: {detail} [{:.1}s]\n", start.elapsed().as_secs_f64());
        let mut out = std::io::stdout().lock();
        out.write_all(line.as_bytes()).unwrap();
        out.flush().unwrap();
        if !pass && !soft {
            self.hard_failures.push(name);
        }
    }
}

fn info(text: &str) {
    let mut out = std::io::stdout().lock();
    out.write_all(format!("       {text}\n").as_bytes()).unwrap();
}

fn random_image(cfg: &DetectorConfig, rng: &mut impl Rng) -> Tensor {
    let n = cfg.image_size * cfg.image_size * cfg.channels;
    Tensor::new(
        &[cfg.image_size, cfg.image_size, cfg.channels],
        (0..n).map(|_| rng.random_range(0.0..1.0)).collect(),
    )
    .unwrap()
}

fn random_normal(rng: &mut impl Rng, n: usize, std: f32) -> Vec<f32> {
    use rand_distr::{Distribution, Normal};
    let d = Normal::new(0.0f32, std).unwrap();
    (0..n).map(|_| d.sample(rng)).collect()
}

/// Features, logits and boxes of one refinement, flattened.
fn head_outputs(det: &Detector, image: &Tensor, props: &[Box4], t: usize) -> Vec<f64> {
    let mut tape = Tape::new();
    let f = det.backbone_forward(&mut tape, image).unwrap();
    let out = det.denoise_step(&mut tape, f, props, t).unwrap();
    let mut v = tape.value(f).to_vec();
    v.extend_from_slice(tape.value(out.logits));
    v.extend_from_slice(tape.value(out.boxes));
    v
}

fn zero_init_identity() -> Check {
    let start = Instant::now();
    let base = Detector::new(DetectorConfig::default(), 11)?;
    let adapted: Vec<Detector> = [4, 8, 32, 128]
        .iter()
        .map(|&r| {
            let mut d = base.clone();
            let mut cfg = AdapterConfig::new(r, DEFAULT_SELECTOR);
            cfg.seed = r as u64;
            inject(&mut d, &cfg).map(|_| d)
        })
        .collect::<lodet::Result<_>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for i in 0..100 {
        let img = random_image(&base.config, &mut rng);
        let props: Vec<Box4> = (0..base.config.n_proposals)
            .map(|_| std::array::from_fn(|_| rng.random_range(-2.0..2.0)))
            .collect();
        let t = rng.random_range(0..base.config.diffusion_steps);
        let a = head_outputs(&base, &img, &props, t);
        let b = head_outputs(&adapted[i % 4], &img, &props, t);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst <= 1e-7 && secs < 10.0,
        format!("max |adapted - base| = {worst:e} over 100 inputs, ranks 4/8/32/128 (limit 1e-7, {secs:.1}s of 10s)"),
    ))
}

fn merge_equivalence() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    let mut draws = 0;
    for &r in &[4usize, 8, 32, 128] {
        for _ in 0..100 {
            let d_in = rng.random_range(r..=r + 48);
            let d_out = rng.random_range(r..=r + 48);
            let mut mlp = Mlp::new("fc", &[d_in, d_out], &mut rng)?;
            let mut cfg = AdapterConfig::new(r, "fc.0.weight");
            cfg.alpha = rng.random_range(1.0..=2.0 * r as f32);
            cfg.seed = rng.random();
            inject(&mut mlp, &cfg)?;
            let b = mlp.store.id("fc.0.lora_b").expect("adapter factor B");
            let values = random_normal(&mut rng, d_out * r, 0.1);
            mlp.store.get_mut(b).tensor.data_mut().copy_from_slice(&values);
            let x = Tensor::new(&[3, d_in], random_normal(&mut rng, 3 * d_in, 1.0))?;
            let adapted = mlp.predict(&x)?;
            merge_all(&mut mlp)?;
            let merged = mlp.predict(&x)?;
            let num: f64 = adapted
                .data()
                .iter()
                .zip(merged.data())
                .map(|(a, m)| ((a - m) as f64).powi(2))
                .sum();
            let den: f64 = adapted.data().iter().map(|a| (*a as f64).powi(2)).sum();
            worst = worst.max((num / den).sqrt());
            draws += 1;
        }
    }
    Ok((
        worst < 1e-5,
        format!("worst relative error {worst:e} over {draws} draws, 100 per rank (limit 1e-5)"),
    ))
}

fn tiny_target(n: usize) -> lodet::Result<Samples> {
    let ds = synth_generate(&SynthConfig {
        n_images: n,
        ..SynthConfig::target(9)
    })?;
    Samples::new(&ds)
}

fn one_epoch(det: &mut Detector, samples: &Samples) -> lodet::Result<()> {
    let cfg = TrainConfig {
        epochs: 1,
        batch_size: 2,
        optimizer: AdamWConfig {
            lr: 1e-3,
            ..Default::default()
        },
        grad_clip: Some(1.0),
        schedule: LrSchedule::Constant,
        draws: 1,
        eval_interval: 1,
        seed: 0,
    };
    train(det, samples, &cfg, |_, _| Ok(0.0)).map(|_| ())
}

fn snapshot(det: &Detector, skip: &BTreeSet<usize>) -> Vec<(String, Vec<f32>)> {
    det.store
        .iter()
        .filter(|(id, _)| !skip.contains(&id.index()))
        .map(|(_, p)| (p.name.clone(), p.tensor.data().to_vec()))
        .collect()
}

fn gradient_isolation() -> Check {
    let samples = tiny_target(4)?;
    let mut details = Vec::new();
    let mut ok = true;

    // Stand-in for the pretrained model: a fresh detector has a zero, frozen
    // regression output that would block every gradient upstream of it.
    let mut pretrained = Detector::new(DetectorConfig::default(), 5)?;
    pretrained.store.unfreeze_all();
    one_epoch(&mut pretrained, &samples)?;

    let mut baseline = pretrained.clone();
    let before = snapshot(&baseline, &BTreeSet::new());
    one_epoch(&mut baseline, &samples)?;
    let changed = snapshot(&baseline, &BTreeSet::new())
        .iter()
        .zip(&before)
        .filter(|(a, b)| a.1 != b.1)
        .count();
    ok &= changed > 0;
    details.push(format!("baseline step changed {changed}/{} tensors", before.len()));

    for strategy in [Strategy::LoraDirect, Strategy::LoraAfterFt] {
        let mut det = match strategy {
            Strategy::LoraAfterFt => baseline.clone(),
            _ => pretrained.clone(),
        };
        inject(&mut det, &AdapterConfig::new(4, DEFAULT_SELECTOR))?;
        let adapters: BTreeSet<usize> = adapter_params(&det).iter().map(|id| id.index()).collect();
        let before = snapshot(&det, &adapters);
        one_epoch(&mut det, &samples)?;
        let after = snapshot(&det, &adapters);
        let unchanged = before == after;

        det.store.zero_grad();
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let loss = det.training_loss(&mut tape, &samples.images[0], &samples.targets[0], &mut rng)?;
        tape.backward(loss, &mut det.store)?;
        let zero: Vec<String> = adapter_params(&det)
            .iter()
            .filter(|&&id| {
                !det.store
                    .get(id)
                    .tensor
                    .grad
                    .as_ref()
                    .is_some_and(|g| g.iter().any(|&v| v != 0.0))
            })
            .map(|&id| det.store.get(id).name.clone())
            .collect();
        let total = adapters.len();
        let nonzero = total - zero.len();
        if !zero.is_empty() {
            info(&format!("{strategy}: zero adapter gradients in {}", zero.join(", ")));
        }
        ok &= unchanged && nonzero == total;
        details.push(format!(
            "{strategy}: {} base tensors bitwise {}, {nonzero}/{total} adapter grads nonzero",
            before.len(),
            if unchanged { "unchanged" } else { "CHANGED" }
        ));
    }
    Ok((ok, details.join("; ")))
}

fn trainable_reduction() -> Check {
    let mut ok = true;
    let mut details = Vec::new();
    for (label, selector) in [("head layers", HEAD_SELECTOR), ("default selector", DEFAULT_SELECTOR)] {
        let mut det = Detector::new(DetectorConfig::default(), 0)?;
        let sel = Selector::parse(selector)?;
        let r = 4;
        let expected: usize = det
            .store
            .iter()
            .filter(|(_, p)| sel.matches(&p.name) && p.tensor.shape().len() == 2)
            .map(|(_, p)| r * (p.tensor.shape()[0] + p.tensor.shape()[1]))
            .sum();
        let layers = inject(&mut det, &AdapterConfig::new(r, selector))?;
        let count = trainable_count(&det.store);
        let fraction = count.trainable as f64 / count.total as f64;
        ok &= count.trainable == expected && fraction < 0.10;
        details.push(format!(
            "{label}: {} layers, {} trainable of {} ({:.2}%), expected sum r(d_in+d_out) = {expected}",
            layers.len(),
            count.trainable,
            count.total,
            fraction * 100.0
        ));
    }
    Ok((ok, details.join("; ")))
}

fn autodiff() -> Check {
    let start = Instant::now();
    let cfg = DetectorConfig {
        image_size: 16,
        patch_size: 4,
        embed_dim: 8,
        hidden_dim: 16,
        n_proposals: 3,
        n_classes: 2,
        ..DetectorConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let img = random_image(&cfg, &mut rng);
    let gt = BoxSet::new(vec![[0.3, 0.4, 0.2, 0.3], [0.7, 0.6, 0.25, 0.2]], vec![0, 1]);
    let mut base = Detector::new(cfg.clone(), 6)?;
    // Move the zero-initialized regression output off zero.
    let reg = base.store.id("head.reg.out.weight").expect("regression output");
    let n = base.store.get(reg).tensor.numel();
    let values = random_normal(&mut rng, n, 0.1);
    base.store.get_mut(reg).tensor.data_mut().copy_from_slice(&values);

    let mut adapted = base.clone();
    inject(&mut adapted, &AdapterConfig::new(2, DEFAULT_SELECTOR))?;
    for id in adapter_params(&adapted) {
        let n = adapted.store.get(id).tensor.numel();
        let values = random_normal(&mut rng, n, 0.1);
        adapted.store.get_mut(id).tensor.data_mut().copy_from_slice(&values);
    }

    let mut worst = 0.0f64;
    let mut coords = 0;
    for (det, seeds) in [(&base, [1u64, 2, 3]), (&adapted, [4, 5, 6])] {
        for seed in seeds {
            let mut store = det.store.clone();
            coords += store.iter().filter(|(_, p)| p.trainable()).map(|(_, p)| p.tensor.numel()).sum::<usize>();
            let err = grad_check(
                |tape, store| {
                    let mut d = det.clone();
                    d.store = store.clone();
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    d.training_loss(tape, &img, &gt, &mut rng)
                },
                &mut store,
                1e-4,
            )?;
            worst = worst.max(err);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        worst < 1e-3 && secs < 120.0,
        format!(
            "worst relative error {worst:e} over {coords} coordinates, 3 proposals / 2 gt, base and adapted (limit 1e-3, {secs:.1}s of 120s)"
        ),
    ))
}

fn brute_force_assignment(cost: &[Vec<f64>]) -> f64 {
    let (n, m) = (cost.len(), cost[0].len());
    if n > m {
        let t: Vec<Vec<f64>> = (0..m).map(|j| (0..n).map(|i| cost[i][j]).collect()).collect();
        return brute_force_assignment(&t);
    }
    fn go(cost: &[Vec<f64>], row: usize, used: &mut Vec<bool>, acc: f64, best: &mut f64) {
        if row == cost.len() {
            *best = best.min(acc);
            return;
        }
        for j in 0..used.len() {
            if !used[j] {
                used[j] = true;
                go(cost, row + 1, used, acc + cost[row][j], best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(cost, 0, &mut vec![false; m], 0.0, &mut best);
    best
}

fn hungarian_optimality() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut mismatches = 0;
    for trial in 0..1000 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        // Integer costs keep every sum exact.
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| rng.random_range(0..50) as f64 - if trial % 2 == 0 { 0.0 } else { 25.0 }).collect())
            .collect();
        let pairs = hungarian_match(&cost)?;
        let rows: BTreeSet<usize> = pairs.iter().map(|p| p.0).collect();
        let cols: BTreeSet<usize> = pairs.iter().map(|p| p.1).collect();
        let injective = pairs.len() == n.min(m) && rows.len() == pairs.len() && cols.len() == pairs.len();
        if !injective || assignment_cost(&cost, &pairs) != brute_force_assignment(&cost) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mismatches == 0 && secs < 30.0,
        format!("{mismatches} mismatches against exhaustive search on 1000 matrices, n,m <= 6 ({secs:.1}s of 30s)"),
    ))
}

fn ref_iou(a: &Box4, b: &Box4) -> f64 {
    let (ax0, ax1) = (a[0] - a[2] / 2.0, a[0] + a[2] / 2.0);
    let (ay0, ay1) = (a[1] - a[3] / 2.0, a[1] + a[3] / 2.0);
    let (bx0, bx1) = (b[0] - b[2] / 2.0, b[0] + b[2] / 2.0);
    let (by0, by1) = (b[1] - b[3] / 2.0, b[1] + b[3] / 2.0);
    let w = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let h = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = w * h;
    inter / ((ax1 - ax0) * (ay1 - ay0) + (bx1 - bx0) * (by1 - by0) - inter)
}

/// Straightforward COCO-style reference: per-image top-`cap` by score,
/// greedy matching per class, 101 recall thresholds.
fn reference_map(
    dets: &BTreeMap<u64, BoxSet>,
    gts: &BTreeMap<u64, BoxSet>,
    classes: &[u32],
    cap: usize,
) -> (BTreeMap<u32, f64>, f64) {
    let mut scored: BTreeMap<u32, Vec<(f64, bool)>> = BTreeMap::new();
    let mut n_gt: BTreeMap<u32, usize> = BTreeMap::new();
    for (id, gt) in gts {
        for &c in &gt.classes {
            *n_gt.entry(c).or_default() += 1;
        }
        let d = &dets[id];
        let scores = d.scores.as_ref().unwrap();
        let mut order: Vec<usize> = (0..d.boxes.len()).collect();
        order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap());
        order.truncate(cap);
        for &c in classes {
            let mut used = vec![false; gt.boxes.len()];
            for &i in order.iter().filter(|&&i| d.classes[i] == c) {
                let mut best: Option<usize> = None;
                let mut best_iou = IOU_THRESHOLD;
                for j in 0..gt.boxes.len() {
                    if used[j] || gt.classes[j] != c {
                        continue;
                    }
                    let v = ref_iou(&d.boxes[i], &gt.boxes[j]);
                    if v >= best_iou && best.is_none_or(|_| v > best_iou) {
                        best = Some(j);
                        best_iou = v;
                    }
                }
                if let Some(j) = best {
                    used[j] = true;
                }
                scored.entry(c).or_default().push((scores[i], best.is_some()));
            }
        }
    }
    let mut per_class = BTreeMap::new();
    let mut present = Vec::new();
    for &c in classes {
        let g = n_gt.get(&c).copied().unwrap_or(0);
        let mut list = scored.remove(&c).unwrap_or_default();
        if g == 0 {
            if !list.is_empty() {
                per_class.insert(c, 0.0);
            }
            continue;
        }
        list.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        let mut points = Vec::new();
        let mut tp = 0.0;
        for (k, &(_, hit)) in list.iter().enumerate() {
            if hit {
                tp += 1.0;
            }
            points.push((tp / g as f64, tp / (k + 1) as f64));
        }
        let ap = (0..=100)
            .map(|i| {
                let r = i as f64 * 0.01;
                points.iter().filter(|p| p.0 >= r).map(|p| p.1).fold(0.0, f64::max)
            })
            .sum::<f64>()
            / 101.0;
        per_class.insert(c, ap);
        present.push(ap);
    }
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    (per_class, map)
}

fn random_box(rng: &mut impl Rng) -> Box4 {
    [
        rng.random_range(0.1..0.9),
        rng.random_range(0.1..0.9),
        rng.random_range(0.05..0.4),
        rng.random_range(0.05..0.4),
    ]
}

fn random_instance(rng: &mut impl Rng) -> (BTreeMap<u64, BoxSet>, BTreeMap<u64, BoxSet>, Vec<u32>) {
    let n_classes = rng.random_range(1..=3u32);
    let classes: Vec<u32> = (0..n_classes).collect();
    let (mut dets, mut gts) = (BTreeMap::new(), BTreeMap::new());
    for id in 0..rng.random_range(1..=3u64) {
        let n_gt = rng.random_range(0..=4);
        let gt_boxes: Vec<Box4> = (0..n_gt).map(|_| random_box(rng)).collect();
        let gt_classes: Vec<u32> = (0..n_gt).map(|_| rng.random_range(0..n_classes)).collect();
        let mut d: Vec<(f64, Box4, u32)> = (0..rng.random_range(0..=8))
            .map(|_| {
                let score = rng.random_range(0.0..1.0);
                if n_gt > 0 && rng.random_bool(0.6) {
                    let j = rng.random_range(0..n_gt);
                    let g = gt_boxes[j];
                    let jitter = rng.random_range(0.0..0.3);
                    let b = [
                        g[0] + jitter * g[2] * rng.random_range(-1.0..1.0),
                        g[1] + jitter * g[3] * rng.random_range(-1.0..1.0),
                        g[2] * rng.random_range(0.7..1.3),
                        g[3] * rng.random_range(0.7..1.3),
                    ];
                    let c = if rng.random_bool(0.8) { gt_classes[j] } else { rng.random_range(0..n_classes) };
                    (score, b, c)
                } else {
                    (score, random_box(rng), rng.random_range(0..n_classes))
                }
            })
            .collect();
        d.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap());
        dets.insert(
            id,
            BoxSet {
                boxes: d.iter().map(|x| x.1).collect(),
                classes: d.iter().map(|x| x.2).collect(),
                scores: Some(d.iter().map(|x| x.0).collect()),
            },
        );
        gts.insert(id, BoxSet::new(gt_boxes, gt_classes));
    }
    (dets, gts, classes)
}

fn cap_instance(n_fp: usize) -> (BTreeMap<u64, BoxSet>, BTreeMap<u64, BoxSet>) {
    let mut boxes = Vec::new();
    let mut classes = Vec::new();
    let mut scores = Vec::new();
    for i in 0..n_fp {
        boxes.push([0.15, 0.15, 0.1, 0.1]);
        classes.push((i % 2) as u32);
        scores.push(0.99 - i as f64 * 1e-3);
    }
    boxes.push([0.6, 0.6, 0.2, 0.2]);
    classes.push(0);
    scores.push(0.001);
    let dets = BTreeMap::from([(
        1,
        BoxSet {
            boxes,
            classes,
            scores: Some(scores),
        },
    )]);
    let gts = BTreeMap::from([(1, BoxSet::new(vec![[0.6, 0.6, 0.2, 0.2]], vec![0]))]);
    (dets, gts)
}

fn evaluator_oracle() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst = 0.0f64;
    let mut key_mismatch = 0;
    for _ in 0..1000 {
        let (dets, gts, classes) = random_instance(&mut rng);
        let cap = if rng.random_bool(0.5) { rng.random_range(1..=6) } else { MAX_DETECTIONS };
        let got = evaluate(&dets, &gts, &classes, IOU_THRESHOLD, cap)?;
        let (per_class, map) = reference_map(&dets, &gts, &classes, cap);
        if !got.per_class_ap.keys().eq(per_class.keys()) {
            key_mismatch += 1;
            continue;
        }
        worst = worst.max((got.map50 - map).abs());
        for (c, ap) in &per_class {
            worst = worst.max((got.per_class_ap[c] - ap).abs());
        }
    }

    // The true positive is the lowest-scoring detection of the image: it
    // counts with 300 detections and drops out with 301. False positives
    // alternate classes, so class 0 ranks it 151st.
    let mut boundary = Vec::new();
    for n_fp in [299, 300] {
        let (dets, gts) = cap_instance(n_fp);
        let got = evaluate(&dets, &gts, &[0, 1], IOU_THRESHOLD, MAX_DETECTIONS)?.map50;
        let (_, reference) = reference_map(&dets, &gts, &[0, 1], MAX_DETECTIONS);
        boundary.push((n_fp + 1, got, reference));
    }
    let boundary_ok = (boundary[0].1 - 1.0 / 151.0).abs() < 1e-12
        && boundary[1].1 == 0.0
        && boundary.iter().all(|b| (b.1 - b.2).abs() < 1e-12);
    Ok((
        worst <= 1e-9 && key_mismatch == 0 && boundary_ok,
        format!(
            "max |evaluate - reference| = {worst:e} over 1000 instances, {key_mismatch} class-set mismatches; cap 300: {} dets -> mAP {:.6}, {} dets -> mAP {:.6}",
            boundary[0].0, boundary[0].1, boundary[1].0, boundary[1].1
        ),
    ))
}

fn sampler_protocol(ws: &Workspace) -> Check {
    let pool = ws.episode_pool()?;
    let pool_ids: BTreeSet<u64> = pool.images().iter().map(|i| i.id).collect();
    let mut ok = true;
    let mut details = Vec::new();
    for k in [1usize, 5, 10, 50] {
        let mut subsets = BTreeSet::new();
        let mut min_count = usize::MAX;
        for seed in 0..5u64 {
            let ep = ws.episode(k, seed)?;
            let again = ws.episode(k, seed)?;
            ok &= ep.to_coco_json() == again.to_coco_json();
            let ids: Vec<u64> = ep.images().iter().map(|i| i.id).collect();
            ok &= ids.iter().all(|id| pool_ids.contains(id));
            for cat in pool.categories() {
                let count = ids
                    .iter()
                    .filter(|&&id| ep.annotations().iter().any(|a| a.image_id == id && a.category_id == cat.id))
                    .count();
                min_count = min_count.min(count);
                ok &= count >= k;
            }
            subsets.insert(ids);
        }
        ok &= subsets.len() == 5;
        details.push(format!("k={k}: min per-class images {min_count}, {} distinct of 5", subsets.len()));
    }
    Ok((ok, format!("{}; repeated draws byte-identical", details.join(", "))))
}

fn end_to_end(ws: &Workspace) -> Check {
    let start = Instant::now();
    let pre = ws.pretrain()?;
    let secs = start.elapsed().as_secs_f64();
    let mut ok = pre.best_val_map50 >= 0.5 && secs < 1800.0;
    info(&format!(
        "pretrain: best source val mAP50 {:.4} at epoch {} in {secs:.0}s (need >= 0.5 within 1800s)",
        pre.best_val_map50, pre.best_epoch
    ));
    let cells = [
        Cell::new(Strategy::BaselineFt, None, 5, 0)?,
        Cell::new(Strategy::LoraDirect, Some(4), 5, 0)?,
        Cell::new(Strategy::LoraAfterFt, Some(4), 5, 0)?,
    ];
    for cell in cells {
        let r = ws.run(&cell)?;
        let ratio = r.final_train_loss / r.source_train_loss;
        ok &= r.seconds < 600.0 && ratio < 0.5;
        let stage = if cell.strategy == Strategy::LoraAfterFt {
            format!(", stage-2 alone {:.3} -> {:.3}", r.initial_train_loss, r.final_train_loss)
        } else {
            String::new()
        };
        info(&format!(
            "{cell}: {:.0}s, train loss {:.3} -> {:.3} (ratio {ratio:.3}){stage}, test mAP50 {:.4}",
            r.seconds, r.source_train_loss, r.final_train_loss, r.test_map50
        ));
    }
    Ok((ok, "pretrain val mAP >= 0.5 in < 30 min; k=5 cells < 10 min with final loss < 50% of initial".into()))
}

fn low_shot_trend(ws_root: &std::path::Path) -> Check {
    let plan = ExperimentPlan {
        shots: vec![1],
        ..ExperimentPlan::default()
    };
    let ranks = plan.ranks.clone();
    let ws = Workspace::new(ws_root, plan)?;
    let start = Instant::now();
    ws.run_grid(false)?;
    let table = aggregate(&ws, false)?;
    write_table(&ws, &table)?;
    let rows = trend(&table, &ranks);
    for r in &rows {
        let label = r.rank.map_or("mean".to_string(), |k| format!("r={k}"));
        info(&format!(
            "k=1 {label}: lora_after_ft {:.4} vs lora_direct {:.4} ({:+.2} points)",
            r.lora_after_ft,
            r.lora_direct,
            r.margin * 100.0
        ));
    }
    let mean = rows.iter().find(|r| r.rank.is_none()).ok_or("no mean trend row")?;
    Ok((
        mean.holds,
        format!(
            "k=1, 5 seeds, mean over ranks: lora_after_ft {} lora_direct by {:+.2} points ({:.0}s)",
            if mean.holds { ">=" } else { "<" },
            mean.margin * 100.0,
            start.elapsed().as_secs_f64()
        ),
    ))
}

fn reproducibility() -> Check {
    let mut tables = Vec::new();
    for _ in 0..2 {
        let dir = tempfile::tempdir()?;
        let ws = Workspace::new(dir.path(), common::small_plan())?;
        ws.pretrain()?;
        ws.run_grid(false)?;
        let table = aggregate(&ws, false)?;
        write_table(&ws, &table)?;
        tables.push(std::fs::read(dir.path().join("table.csv"))?);
    }
    let rows = tables[0].iter().filter(|&&b| b == b'\n').count();
    Ok((
        tables[0] == tables[1] && rows > 1,
        format!("two runs of a small plan: table.csv {} bytes, {rows} lines, identical: {}", tables[0].len(), tables[0] == tables[1]),
    ))
}

fn main() {
    let started = Instant::now();
    // Optional arguments select criteria by name substring.
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut report = Report {
        filter,
        hard_failures: Vec::new(),
    };
    report.run("LoRA zero-init identity", false, zero_init_identity);
    report.run("merge equivalence", false, merge_equivalence);
    report.run("gradient isolation", false, gradient_isolation);
    report.run("trainable-parameter reduction", false, trainable_reduction);
    report.run("autodiff correctness", false, autodiff);
    report.run("Hungarian optimality", false, hungarian_optimality);
    report.run("evaluator oracle equivalence", false, evaluator_oracle);

    let dir = tempfile::tempdir().expect("temporary results directory");
    let ws = Workspace::new(dir.path(), ExperimentPlan::default()).expect("default plan is valid");
    report.run("sampler protocol", false, || sampler_protocol(&ws));
    report.run("end-to-end smoke", false, || end_to_end(&ws));
    report.run("low-shot adapter ordering", true, || low_shot_trend(dir.path()));
    report.run("reproducibility", false, reproducibility);

    let elapsed = Duration::from_secs(started.elapsed().as_secs());
    if report.hard_failures.is_empty() {
        println!("acceptance: all enforced criteria passed in {elapsed:?}");
    } else {
        println!("acceptance: {} failed: {}", report.hard_failures.len(), report.hard_failures.join(", "));
        std::process::exit(1);
    }
}
