#![allow(dead_code)]

use mprkit::nn::{bce_loss, build_25d_model, Layer, LayerCache, LayerSpec, Mode, ModelState, Tensor};
use mprkit::seed;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-4;
/// Gradients below this magnitude are compared absolutely. Central
/// differences of an O(1) loss carry ~1e-11 of round-off at this step, so
/// exactly-zero gradients (conv biases feeding batch norm) need the floor.
pub const REL_FLOOR: f64 = 1e-5;

#[derive(Debug, Default, Clone, Copy)]
pub struct GradReport {
    pub max_rel: f64,
    pub checked: usize,
    /// Coordinates whose ±ε evaluations straddle a ReLU or max-pool kink.
    pub skipped: usize,
}

impl GradReport {
    pub fn merge(&mut self, o: GradReport) {
        self.max_rel = self.max_rel.max(o.max_rel);
        self.checked += o.checked;
        self.skipped += o.skipped;
    }

    fn record(&mut self, analytic: f64, numeric: f64) {
        self.max_rel = self.max_rel.max(rel_err(analytic, numeric));
        self.checked += 1;
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

fn same_branch(a: &LayerCache, b: &LayerCache) -> bool {
    match (a, b) {
        (LayerCache::Relu { active: x }, LayerCache::Relu { active: y }) => x == y,
        (LayerCache::MaxPool { argmax: x, .. }, LayerCache::MaxPool { argmax: y, .. }) => x == y,
        _ => true,
    }
}

/// `Σ r ⊙ layer(x)` against central differences, over every input and
/// parameter coordinate.
pub fn check_layer(layer: &Layer, x: &Tensor, mode: Mode, rng: &mut ChaCha8Rng) -> GradReport {
    let (y, cache) = layer.forward(x, mode);
    let r: Vec<f64> = (0..y.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let objective = |l: &Layer, x: &Tensor| {
        let (y, c) = l.forward(x, mode);
        (y.data.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>(), c)
    };
    let mut pgrads: Vec<Vec<f64>> = layer.params().iter().map(|p| vec![0.0; p.len()]).collect();
    let dx = layer.backward(&cache, &Tensor::new(y.shape.clone(), r.clone()), &mut pgrads);

    let mut rep = GradReport::default();
    let mut xp = x.clone();
    for i in 0..x.len() {
        let orig = xp.data[i];
        xp.data[i] = orig + FD_EPS;
        let (fp, cp) = objective(layer, &xp);
        xp.data[i] = orig - FD_EPS;
        let (fm, cm) = objective(layer, &xp);
        xp.data[i] = orig;
        if !same_branch(&cp, &cm) {
            rep.skipped += 1;
            continue;
        }
        rep.record(dx.data[i], (fp - fm) / (2.0 * FD_EPS));
    }
    let mut lp = layer.clone();
    for (t, g) in pgrads.iter().enumerate() {
        for (i, &gi) in g.iter().enumerate() {
            let orig = lp.params_mut()[t][i];
            lp.params_mut()[t][i] = orig + FD_EPS;
            let (fp, _) = objective(&lp, x);
            lp.params_mut()[t][i] = orig - FD_EPS;
            let (fm, _) = objective(&lp, x);
            lp.params_mut()[t][i] = orig;
            rep.record(gi, (fp - fm) / (2.0 * FD_EPS));
        }
    }
    rep
}

fn param_mut(m: &mut ModelState, t: usize, i: usize) -> &mut f64 {
    &mut m.params_mut().nth(t).unwrap()[i]
}

/// Train-mode BCE of the full model against central differences on
/// `n_params` random parameter and `n_inputs` random input coordinates.
pub fn check_model(
    model: &mut ModelState,
    batch: &Tensor,
    labels: &[f64],
    n_params: usize,
    n_inputs: usize,
    rng: &mut ChaCha8Rng,
) -> GradReport {
    let (logits, tape) = model.forward_tape(batch, Mode::Train).unwrap();
    let (_, dlogits) = bce_loss(&logits, labels);
    let grads = model.backward(&tape, &dlogits);
    let eval = |m: &ModelState, b: &Tensor| {
        let (logits, tape) = m.forward_tape(b, Mode::Train).unwrap();
        (bce_loss(&logits, labels).0, tape)
    };
    let mut rep = GradReport::default();
    let sizes = model.param_shapes();
    for _ in 0..n_params {
        let t = rng.random_range(0..sizes.len());
        let i = rng.random_range(0..sizes[t]);
        let orig = *param_mut(model, t, i);
        *param_mut(model, t, i) = orig + FD_EPS;
        let (fp, tp) = eval(model, batch);
        *param_mut(model, t, i) = orig - FD_EPS;
        let (fm, tm) = eval(model, batch);
        *param_mut(model, t, i) = orig;
        if !tp.same_branches(&tm) {
            rep.skipped += 1;
            continue;
        }
        rep.record(grads.tensors[t][i], (fp - fm) / (2.0 * FD_EPS));
    }
    let mut b = batch.clone();
    for _ in 0..n_inputs {
        let i = rng.random_range(0..b.len());
        let orig = b.data[i];
        b.data[i] = orig + FD_EPS;
        let (fp, tp) = eval(model, &b);
        b.data[i] = orig - FD_EPS;
        let (fm, tm) = eval(model, &b);
        b.data[i] = orig;
        if !tp.same_branches(&tm) {
            rep.skipped += 1;
            continue;
        }
        rep.record(grads.input.data[i], (fp - fm) / (2.0 * FD_EPS));
    }
    rep
}

pub fn randomized(spec: LayerSpec, rng: &mut rand_chacha::ChaCha8Rng) -> Layer {
    let mut l = Layer::from_spec(spec);
    for p in l.params_mut() {
        for v in p.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    if let Layer::BatchNorm { running_mean, running_var, .. } = &mut l {
        for (m, v) in running_mean.iter_mut().zip(running_var.iter_mut()) {
            *m = rng.random_range(-0.5..0.5);
            *v = rng.random_range(0.5..2.0);
        }
    }
    l
}

pub fn layer_cases() -> Vec<(LayerSpec, Vec<usize>, Mode)> {
    vec![
        (LayerSpec::Conv3x3 { cin: 2, cout: 3 }, vec![2, 2, 6, 5], Mode::Train),
        (LayerSpec::BatchNorm { channels: 3 }, vec![4, 3, 3, 4], Mode::Train),
        (LayerSpec::BatchNorm { channels: 3 }, vec![2, 3, 3, 4], Mode::Eval),
        (LayerSpec::Relu, vec![2, 3, 4, 4], Mode::Train),
        (LayerSpec::MaxPool2, vec![2, 2, 6, 6], Mode::Train),
        (LayerSpec::MaxPool2, vec![1, 1, 5, 7], Mode::Train),
        (LayerSpec::Flatten, vec![2, 3, 2, 2], Mode::Train),
        (LayerSpec::Dense { inputs: 12, outputs: 5 }, vec![3, 12], Mode::Train),
    ]
}

/// Every layer type, 20 random parameter/input draws each.
pub fn layer_suite() -> Vec<(LayerSpec, Mode, GradReport)> {
    layer_cases()
        .into_iter()
        .map(|(spec, shape, mode)| {
            let mut total = GradReport::default();
            for draw in 0..20u64 {
                let mut rng = seed::rng(&[0x6AD, draw]);
                let layer = randomized(spec, &mut rng);
                let x = random_tensor(&mut rng, shape.clone());
                total.merge(check_layer(&layer, &x, mode, &mut rng));
            }
            (spec, mode, total)
        })
        .collect()
}

/// The full 2.5D model on `[2, 64, 32]` inputs, 20 draws.
pub fn model_suite() -> GradReport {
    let mut total = GradReport::default();
    for draw in 0..20u64 {
        let mut rng = seed::rng(&[0xF011, draw]);
        let mut model = build_25d_model([2, 64, 32], draw).unwrap();
        let batch = random_tensor(&mut rng, vec![2, 2, 64, 32]);
        total.merge(check_model(&mut model, &batch, &[1.0, 0.0], 20, 10, &mut rng));
    }
    total
}

pub mod geometry {
    use mprkit::phantom::{generate_phantom, Grid, LesionRecord, PhantomSpec};
    use mprkit::reformat::{build_frames, cylinder_mask, extract_mpr, rotate_view, MprStack};

    pub const H: usize = 32;
    pub const SPACING: f64 = 0.5;

    pub fn tube_spec(diameter_reduction: f64, curvature: f64) -> PhantomSpec {
        PhantomSpec {
            diameter_reduction,
            curvature,
            noise_sigma_hu: 0.0,
            grid: Grid { dims: [49, 49, 96], spacing_mm: 0.5 },
            ..Default::default()
        }
    }

    /// Worst deviation from the analytic disk `lumen · [d ≤ r0]` over the
    /// pixels more than one pixel away from the disk edge, and the number of
    /// such pixels, across every slice of a healthy straight tube.
    pub fn straight_tube_disk_deviation() -> (f64, usize) {
        let spec = tube_spec(0.0, 0.0);
        let (vol, cl, _) = generate_phantom(&spec, 0).unwrap();
        let frames = build_frames(&cl).unwrap();
        let lesion = LesionRecord {
            patient_id: "P".into(),
            branch_id: "B".into(),
            lesion_id: "L".into(),
            start_idx: 5,
            end_idx: cl.len() - 6,
            stenosis_grade: 0.0,
            significant: false,
            revascularised: false,
        };
        let stack = extract_mpr(&vol, &cl, &frames, &lesion, H, SPACING).unwrap();
        let r0 = spec.healthy_radius_mm;
        let c = (H / 2) as f64;
        let (mut worst, mut n) = (0.0f64, 0usize);
        for l in 0..stack.len() {
            for i in 0..H {
                for j in 0..H {
                    let d = ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() * SPACING;
                    if (d - r0).abs() <= SPACING {
                        continue;
                    }
                    let want = if d <= r0 { spec.lumen_hu } else { spec.background_hu };
                    worst = worst.max((stack.at(l, i, j) - want).abs());
                    n += 1;
                }
            }
        }
        (worst, n)
    }

    pub fn inside_cylinder(i: usize, j: usize) -> bool {
        let c = (H / 2) as f64;
        ((i as f64 - c).powi(2) + (j as f64 - c).powi(2)).sqrt() < c
    }

    fn mean_abs_inside(a: &MprStack, b: &MprStack) -> f64 {
        let (mut sum, mut n) = (0.0, 0usize);
        for l in 0..a.len() {
            for i in 0..H {
                for j in 0..H {
                    if inside_cylinder(i, j) {
                        sum += (a.at(l, i, j) - b.at(l, i, j)).abs();
                        n += 1;
                    }
                }
            }
        }
        sum / n as f64
    }

    /// Largest (over k = 1..17) mean absolute difference inside the cylinder
    /// between rotating the masked stack by k·20° and resampling with frames
    /// spun by the same angle, relative to the stack's dynamic range.
    pub fn rotation_vs_resampling(spec: &PhantomSpec) -> f64 {
        let (vol, cl, rec) = generate_phantom(spec, 0).unwrap();
        let frames = build_frames(&cl).unwrap();
        let base = cylinder_mask(&extract_mpr(&vol, &cl, &frames, &rec, H, SPACING).unwrap()).unwrap();
        let range = base.dynamic_range();
        (1..18)
            .map(|k| {
                let rotated = rotate_view(&base, k).unwrap();
                let angle = (k as f64 * 20.0).to_radians();
                let direct = extract_mpr(&vol, &cl, &frames.rotated(angle), &rec, H, SPACING).unwrap();
                mean_abs_inside(&rotated, &direct) / range
            })
            .fold(0.0, f64::max)
    }
}

pub mod cohorts {
    use mprkit::labels::{assemble_dataset, AssembleOptions, Branch, DatasetManifest, LesionEntry, Patient};
    use mprkit::phantom::{generate_cohort, CohortOptions, Grid, LesionCount};
    use std::path::Path;

    /// 95 patients, 345 single-lesion branches; the first 85 lesions are
    /// significant and the first 93 branches revascularised. No files.
    pub fn counts_matched_manifest() -> DatasetManifest {
        let mut next = 0usize;
        let patients = (0..95)
            .map(|p| {
                let n = if p < 60 { 4 } else { 3 };
                let branches = (0..n)
                    .map(|b| {
                        let i = next;
                        next += 1;
                        let branch_id = format!("P{p:03}-B{b:02}");
                        Branch {
                            centerline: format!("vessels/{branch_id}-centerline.json"),
                            volume: format!("vessels/{branch_id}.json"),
                            revascularised: i < 93,
                            lesions: vec![LesionEntry {
                                lesion_id: format!("{branch_id}-L0"),
                                start_idx: 10,
                                end_idx: 73,
                                stenosis_grade: if i < 85 { 0.7 } else { 0.2 },
                            }],
                            branch_id,
                        }
                    })
                    .collect();
                Patient { patient_id: format!("P{p:03}"), branches }
            })
            .collect();
        DatasetManifest { patients }
    }

    /// Small noise-free vessels, cheap enough to reformat hundreds of.
    pub fn tiny_cohort(n_patients: usize, lesions: usize, seed: u64) -> CohortOptions {
        CohortOptions {
            n_patients,
            lesions: LesionCount::Total(lesions),
            seed,
            grid: Grid { dims: [24, 24, 64], spacing_mm: 0.5 },
            noise_sigma_hu: 0.0,
            ..Default::default()
        }
    }

    pub fn tiny_assembly(n_views: usize) -> AssembleOptions {
        AssembleOptions { n_views, slice_size: 16, ..Default::default() }
    }

    /// Samples produced from a generated 95-patient / 345-lesion cohort.
    pub fn expansion_count(dir: &Path, n_views: usize) -> (usize, usize) {
        let m = generate_cohort(&tiny_cohort(95, 345, 11), dir).unwrap();
        let (samples, summary) = assemble_dataset(&m, dir, &tiny_assembly(n_views)).unwrap();
        assert_eq!(summary.samples, samples.len());
        (m.n_lesions(), samples.len())
    }
}

pub mod oracles {
    use mprkit::eval::{compute_metrics, roc_auc, ConfusionCounts, SplitPlan};
    use rand::Rng;
    use std::collections::{BTreeMap, BTreeSet};

    /// P(s⁺ > s⁻) + ½·P(s⁺ = s⁻) over all positive/negative pairs.
    pub fn pair_auc(labels: &[bool], scores: &[f64]) -> f64 {
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &yi) in labels.iter().enumerate() {
            for (j, &yj) in labels.iter().enumerate() {
                if yi && !yj {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        wins += 1.0;
                    } else if scores[i] == scores[j] {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    /// Random two-class instance with `n ≤ max_n`; half of the instances
    /// draw scores from a coarse grid so ties are frequent.
    pub fn random_instance(rng: &mut impl Rng, max_n: usize) -> (Vec<bool>, Vec<f64>) {
        loop {
            let n = rng.random_range(2..=max_n);
            let coarse = rng.random::<bool>();
            let labels: Vec<bool> = (0..n).map(|_| rng.random()).collect();
            let scores =
                (0..n).map(|_| if coarse { f64::from(rng.random_range(0..6u8)) / 5.0 } else { rng.random() }).collect();
            if labels.iter().any(|&y| y) && labels.iter().any(|&y| !y) {
                return (labels, scores);
            }
        }
    }

    /// Largest |roc_auc − pair_auc| over `instances` random draws.
    pub fn auc_oracle_max_err(instances: usize, seed: u64) -> f64 {
        let mut rng = mprkit::seed::rng(&[seed]);
        (0..instances)
            .map(|_| {
                let (y, s) = random_instance(&mut rng, 50);
                (roc_auc(&y, &s).unwrap() - pair_auc(&y, &s)).abs()
            })
            .fold(0.0, f64::max)
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-4
    }

    /// Labels/scores with a given confusion matrix at threshold 0.5.
    pub fn from_counts(c: ConfusionCounts) -> (Vec<bool>, Vec<f64>) {
        let mut y = Vec::new();
        let mut s = Vec::new();
        for (n, label, score) in [(c.tp, true, 0.9), (c.fp, false, 0.8), (c.tn, false, 0.1), (c.fn_, true, 0.2)] {
            y.extend(std::iter::repeat_n(label, n));
            s.extend(std::iter::repeat_n(score, n));
        }
        (y, s)
    }

    /// Worked confusion cases; panics on the first mismatch.
    pub fn check_hand_cases() {
        let (y, s) = from_counts(ConfusionCounts { tp: 2, fp: 1, tn: 3, fn_: 2 });
        let m = compute_metrics(&y, &s, 0.5).unwrap();
        assert!(close(m.accuracy, 0.625), "{m:?}");
        assert!(close(m.sensitivity, 0.5), "{m:?}");
        assert!(close(m.specificity, 0.75), "{m:?}");
        assert!(close(m.f1, 0.5714), "{m:?}");
        assert!(close(m.mcc, 0.2582), "{m:?}");

        let y = [true, false, true, false, false];
        let perfect = compute_metrics(&y, &[0.9, 0.1, 0.8, 0.3, 0.2], 0.5).unwrap();
        assert_eq!(
            (perfect.auc, perfect.accuracy, perfect.f1, perfect.sensitivity, perfect.specificity, perfect.mcc),
            (Some(1.0), 1.0, 1.0, 1.0, 1.0, 1.0)
        );

        // all-negative predictions zero a factor of the MCC denominator
        let none = compute_metrics(&y, &[0.4, 0.1, 0.3, 0.2, 0.0], 0.5).unwrap();
        assert_eq!((none.sensitivity, none.specificity, none.mcc, none.f1), (0.0, 1.0, 0.0, 0.0));
        let all = compute_metrics(&y, &[0.9; 5], 0.5).unwrap();
        assert_eq!((all.sensitivity, all.specificity, all.mcc), (1.0, 0.0, 0.0));

        let worst = compute_metrics(&y, &[0.1, 0.9, 0.2, 0.8, 0.7], 0.5).unwrap();
        assert_eq!((worst.auc, worst.mcc, worst.accuracy), (Some(0.0), -1.0, 0.0));

        assert_eq!(roc_auc(&[true, false], &[0.3, 0.3]).unwrap(), 0.5);
        assert!(roc_auc(&[true, true], &[0.3, 0.4]).is_err());
        assert!(compute_metrics(&[], &[], 0.5).is_err());
    }

    /// Disjointness, per-repetition partition and fold sizes of a plan.
    pub fn check_plan(ids: &[String], plan: &SplitPlan) {
        let all: BTreeSet<&str> = ids.iter().map(String::as_str).collect();
        assert_eq!(plan.splits.len(), plan.k * plan.reps);
        let mut tested: BTreeMap<&str, usize> = BTreeMap::new();
        for rep in 0..plan.reps {
            let mut seen = BTreeSet::new();
            for s in plan.splits.iter().filter(|s| s.repetition == rep) {
                let train: BTreeSet<&str> = s.train_patients.iter().map(String::as_str).collect();
                let test: BTreeSet<&str> = s.test_patients.iter().map(String::as_str).collect();
                assert!(train.is_disjoint(&test), "rep {rep} fold {}", s.fold);
                assert_eq!(train.union(&test).copied().collect::<BTreeSet<_>>(), all);
                let (lo, hi) = (all.len() / plan.k, all.len().div_ceil(plan.k));
                assert!((lo..=hi).contains(&test.len()));
                for p in test {
                    assert!(seen.insert(p), "{p} tested twice in rep {rep}");
                    *tested.entry(p).or_default() += 1;
                }
            }
            assert_eq!(seen.len(), all.len());
        }
        assert!(tested.values().all(|&n| n == plan.reps));
        let seeds: BTreeSet<u64> = plan.splits.iter().map(|s| s.init_seed).collect();
        assert_eq!(seeds.len(), plan.splits.len());
    }
}
