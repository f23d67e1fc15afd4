//! Group decoder: matching against brute force, group construction
//! properties, relabelling, inference and loss identities.

mod common;

use common::{brute_force_assignment, random, semantic_inference_loop, FD_STEP};
use cotr::decoder::*;
use cotr::encoder::images_to_value;
use cotr::pipeline::{Dataset, Model, RunConfig};
use cotr::scene::{CategoryTable, ClassDistributionSpec, EMPTY};
use cotr::tensor::{NdValue, ParamStore, Tape};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn default_table() -> CategoryTable {
    ClassDistributionSpec::default_long_tail(1.0).category_table()
}

#[test]
fn hungarian_equals_exhaustive_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..100 {
        let rows = rng.random_range(1..=6);
        let cols = rng.random_range(1..=rows);
        let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(-3.0..3.0)).collect();
        let a = hungarian_match(&cost, rows, cols).unwrap();
        let mut used = a.clone();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), cols);
        let got = assignment_cost(&cost, cols, &a);
        assert!((got - brute_force_assignment(&cost, rows, cols)).abs() < 1e-12);
    }
}

#[test]
fn hungarian_beats_random_permutations() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (rows, cols) = (9, 6);
    let cost: Vec<f64> = (0..rows * cols).map(|_| rng.random_range(0.0..1.0)).collect();
    let best = assignment_cost(&cost, cols, &hungarian_match(&cost, rows, cols).unwrap());
    let mut perm: Vec<usize> = (0..rows).collect();
    for _ in 0..1000 {
        perm.shuffle(&mut rng);
        assert!(best <= assignment_cost(&cost, cols, &perm[..cols]) + 1e-12);
    }
}

#[test]
fn hungarian_rejects_too_many_segments() {
    assert!(matches!(hungarian_match(&[0.0; 6], 2, 3), Err(DecoderError::Matching(_))));
    assert_eq!(hungarian_match(&[5.0, 0.0, 0.0, 0.0, 5.0, 0.0, 0.0, 0.0, 5.0].map(|c: f64| -c), 3, 3).unwrap(), [0, 1, 2]);
}

fn check_spec(spec: &SemanticGroupSpec, hist: &[u64]) {
    spec.validate().unwrap();
    let t = &spec.categories;
    let k = spec.k();
    assert_eq!(spec.groups[0].labels, [FOREGROUND, BACKGROUND, EMPTY_LABEL]);
    let mut finest: Vec<String> = (0..t.len()).map(|c| t.name(c as u16).to_string()).collect();
    finest.push(EMPTY_LABEL.into());
    assert_eq!(spec.groups[k - 1].labels, finest);
    let middle = k - 2;
    for fg in [true, false] {
        let b = if fg { &spec.thresholds.foreground } else { &spec.thresholds.background };
        // ranges tile (0, inf) without overlap
        let mut r: Vec<(f64, f64)> = (0..middle).map(|n| GroupThresholds::range(b, n)).collect();
        r.sort_by(|x, y| x.0.total_cmp(&y.0).then(x.1.total_cmp(&y.1)));
        if middle > 0 {
            assert_eq!(r[0].0, 0.0);
            assert_eq!(r[middle - 1].1, f64::INFINITY);
            assert!(r.windows(2).all(|w| w[0].1 == w[1].0));
        }
    }
    for c in 0..t.len() {
        let slots: Vec<usize> = (1..k - 1).filter(|&g| spec.groups[g].relabel[c] != 0).collect();
        if middle == 0 {
            continue;
        }
        assert_eq!(slots.len(), 1, "{} in {slots:?}", t.name(c as u16));
        let b = if t.is_foreground(c as u16) { &spec.thresholds.foreground } else { &spec.thresholds.background };
        let (lo, hi) = GroupThresholds::range(b, slots[0] - 1);
        let n = hist[c] as f64;
        if n == 0.0 {
            assert_eq!(slots[0], k - 2);
            assert!(spec.zero_count.contains(&(c as u16)));
        } else {
            assert!(lo < n && n <= hi);
        }
    }
}

fn histogram_and_k() -> impl Strategy<Value = (Vec<u64>, usize, Option<(Vec<f64>, Vec<f64>)>)> {
    (prop::collection::vec(prop_oneof![1 => Just(0u64), 6 => 1u64..100_000], 8), 2usize..=7, any::<bool>()).prop_flat_map(
        |(h, k, explicit)| {
            let m = k - 2;
            let bounds = || prop::collection::vec(1.0f64..200_000.0, m.saturating_sub(1)).prop_map(|mut v| {
                v.sort_by(f64::total_cmp);
                v
            });
            let th = if explicit { (bounds(), bounds()).prop_map(Some).boxed() } else { Just(None).boxed() };
            (Just(h), Just(k), th)
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn built_groups_satisfy_every_invariant((hist, k, th) in histogram_and_k()) {
        let t = default_table();
        let th = th.map(|(foreground, background)| GroupThresholds { foreground, background });
        let spec = build_semantic_groups(&hist, &t, k, th).unwrap();
        check_spec(&spec, &hist);
        prop_assert_eq!(SemanticGroupSpec::from_kv(&spec.to_kv()).unwrap(), spec);
    }
}

fn motorcycle_table() -> CategoryTable {
    CategoryTable::new([("road", false), ("car", true), ("truck", true), ("motorcycle", true), ("bicycle", true)])
}

#[test]
fn two_wheeler_group_is_reproduced() {
    let hist = [50_000, 1000, 800, 50, 40];
    let th = GroupThresholds { foreground: vec![425.0], background: vec![100.0] };
    let spec = build_semantic_groups(&hist, &motorcycle_table(), 4, Some(th)).unwrap();
    assert_eq!(spec.groups[1].labels, ["others", "road", "car", "truck", "empty"]);
    assert_eq!(spec.groups[2].labels, ["others", "motorcycle", "bicycle", "empty"]);
    // a car voxel under the two-wheeler group is `others`
    assert_eq!(spec.groups[2].label_of(1).unwrap(), 0);
    assert_eq!(spec.groups[2].label_of(EMPTY).unwrap(), 3);
    // the median split on the foreground counts lands on the same boundary
    let median = build_semantic_groups(&[1000, 800, 50, 40], &CategoryTable::new([("car", true), ("truck", true), ("motorcycle", true), ("bicycle", true)]), 4, None).unwrap();
    assert_eq!(median.groups[1].labels, ["others", "car", "truck", "empty"]);
    assert_eq!(median.groups[2].labels, ["others", "motorcycle", "bicycle", "empty"]);
}

#[test]
fn relabel_properties() {
    let t = default_table();
    let hist = [9000, 4000, 2500, 900, 300, 120, 40, 10];
    let spec = build_semantic_groups(&hist, &t, 5, None).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut labels: Vec<u16> = (0..t.len() as u16).chain([EMPTY]).collect();
    labels.extend((0..500).map(|_| if rng.random_bool(0.2) { EMPTY } else { rng.random_range(0..t.len() as u16) }));

    // identity on category ids; EMPTY becomes the group's trailing `empty` slot
    let finest = spec.finest();
    let same: Vec<u16> = labels.iter().map(|&l| if l == EMPTY { finest.empty_label() } else { l }).collect();
    assert_eq!(relabel_for_group(&labels, finest).unwrap(), same);

    let coarse = relabel_for_group(&labels, &spec.groups[0]).unwrap();
    let collapsed: Vec<u16> =
        labels.iter().map(|&l| if l == EMPTY { 2 } else if t.is_foreground(l) { 0 } else { 1 }).collect();
    assert_eq!(coarse, collapsed);

    for g in &spec.groups {
        let out = relabel_for_group(&labels, g).unwrap();
        let mut hit = vec![false; g.n_labels()];
        out.iter().for_each(|&l| hit[l as usize] = true);
        let has_others = g.labels[0] == OTHERS;
        let others_used = g.relabel.contains(&0);
        for (i, h) in hit.iter().enumerate() {
            let expected = !(has_others && i == 0) || others_used;
            assert_eq!(*h, expected, "label {} of {:?}", g.labels[i], g.labels);
        }
    }
}

#[test]
fn inference_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let spec = SemanticGroupSpec::single(&default_table());
    let width = spec.finest().n_labels() + 1;
    for _ in 0..20 {
        let nq = rng.random_range(1..8);
        let cls = NdValue::from_fn([nq, width], |_| rng.random_range(-3.0..3.0));
        let masks = NdValue::from_fn([nq, 40], |_| rng.random_range(-4.0..4.0));
        assert_eq!(semantic_inference(&cls, &masks, spec.finest()), semantic_inference_loop(&cls, &masks, spec.finest()));
    }
}

fn toy_prediction(t: &mut Tape, rng: &mut ChaCha8Rng, nq: usize, width: usize, v: usize) -> GroupPrediction {
    let class_logits = t.leaf(random(&[nq, width], rng));
    let mask_logits = t.leaf(random(&[nq, v], rng));
    GroupPrediction { group: 0, class_logits, mask_logits }
}

#[test]
fn mask_cls_loss_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let segs = Segments::from_labels(&[0, 2, 2, 1], 3);
    let w = MaskClsWeights::default();
    let cls = random(&[3, 4], &mut rng);
    let masks = random(&[3, 4], &mut rng);
    let eval = |c: &NdValue, m: &NdValue| {
        let mut t = Tape::new();
        let p = GroupPrediction { group: 0, class_logits: t.leaf(c.clone()), mask_logits: t.leaf(m.clone()) };
        let (l, a) = mask_cls_loss(&mut t, &p, &segs, &w, None).unwrap();
        let g = t.backward(l.total).unwrap();
        let gc = g.get(p.class_logits).unwrap().to_vec();
        let gm = g.get(p.mask_logits).unwrap().to_vec();
        (l.class * w.class + l.bce * w.bce + l.dice * w.dice, a, gc, gm)
    };
    let (_, assignment, gc, gm) = eval(&cls, &masks);
    for (which, grad) in [(0, &gc), (1, &gm)] {
        for i in 0..12 {
            let bump = |d: f64| {
                let (mut c, mut m) = (cls.clone(), masks.clone());
                [&mut c, &mut m][which].data_mut()[i] += d;
                let (l, a, _, _) = eval(&c, &m);
                assert_eq!(a, assignment);
                l
            };
            let fd = (bump(FD_STEP) - bump(-FD_STEP)) / (2.0 * FD_STEP);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-8);
            assert!(rel < 1e-4, "entry {which}/{i}: fd {fd} ad {}", grad[i]);
        }
    }
}

#[test]
fn uniform_class_logits_give_log_width() {
    let segs = Segments::from_labels(&[0, 1, 3, 3], 4);
    let mut t = Tape::new();
    let p = GroupPrediction {
        group: 0,
        class_logits: t.leaf(NdValue::zeros([5, 5])),
        mask_logits: t.leaf(NdValue::zeros([5, 4])),
    };
    let (l, _) = mask_cls_loss(&mut t, &p, &segs, &MaskClsWeights::default(), None).unwrap();
    assert!((l.class - 5f64.ln()).abs() < 1e-12);
    // at zero logits the mask BCE is ln 2 per voxel
    assert!((l.bce - 2f64.ln()).abs() < 1e-12);
}

#[test]
fn group_loss_is_linear_in_groups() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let spec = SemanticGroupSpec::single(&CategoryTable::new([("a", true), ("b", false)]));
    let labels = vec![vec![0u16, 1, 2, 2, 0, 1]];
    let w = MaskClsWeights::default();
    let mut t = Tape::new();
    let p = toy_prediction(&mut t, &mut rng, 4, 4, 6);
    let q = GroupPrediction { group: 0, class_logits: p.class_logits, mask_logits: p.mask_logits };
    let (one, _) = group_losses(&mut t, &[p], &labels, &spec, &w, None).unwrap();
    let r = GroupPrediction { group: 0, class_logits: q.class_logits, mask_logits: q.mask_logits };
    let (two, _) = group_losses(&mut t, &[q, r], &labels, &spec, &w, None).unwrap();
    assert!((t.value(two).item() - 2.0 * t.value(one).item()).abs() < 1e-12);
}

#[test]
fn every_group_sends_gradient_into_the_volumes() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let table = default_table();
    let spec = build_semantic_groups(&[9000, 4000, 2500, 900, 300, 120, 40, 10], &table, 4, None).unwrap();
    let cfg = DecoderConfig { layers: 1, queries: 10, dim: 8, heads: 2, samples: 2, ffn_hidden: 8, ..DecoderConfig::default() };
    let mut store = ParamStore::new();
    let dec = GroupDecoder::new(&cfg, &spec, 4, &mut store, &mut rng).unwrap();
    for v in store.values_mut() {
        // wake the zero-initialised projections
        for x in v.data_mut() {
            *x += rng.random_range(-0.3..0.3);
        }
    }
    let labels: Vec<u16> = (0..32).map(|_| if rng.random_bool(0.3) { EMPTY } else { rng.random_range(0..8) }).collect();
    let group_labels: Vec<Vec<u16>> = spec.groups.iter().map(|g| relabel_for_group(&labels, g).unwrap()).collect();
    let oc = random(&[4, 2, 2, 2], &mut rng);
    let o = random(&[4, 4, 4, 2], &mut rng);
    for g in 0..spec.k() {
        let mut t = Tape::new();
        let (ocv, ov) = (t.leaf(oc.clone()), t.leaf(o.clone()));
        let preds = dec.forward(&mut t, &store, ocv, ov, &[g]).unwrap();
        let (l, _) = group_losses(&mut t, &preds, &group_labels, &spec, &cfg.weights, None).unwrap();
        let grads = t.backward(l).unwrap();
        for v in [ocv, ov] {
            assert!(grads.get(v).unwrap().iter().any(|&x| x != 0.0), "group {g}");
        }
    }
}

#[test]
fn uniform_depth_logits_give_log_sixteen() {
    let mut t = Tape::new();
    let seg = t.leaf(NdValue::zeros([6, 3]));
    let depth = t.leaf(NdValue::zeros([10, 16]));
    let dt: Vec<usize> = (0..10).map(|i| if i % 3 == 0 { 16 } else { i }).collect();
    let (s, d) = auxiliary_losses(&mut t, seg, &[0, 1, 2, 0, 3, 3], 3, depth, &dt, 16).unwrap();
    assert!((t.value(d).item() - 16f64.ln()).abs() < 1e-12);
    assert!((t.value(s).item() - 3f64.ln()).abs() < 1e-12);
}

fn small_cfg(k: usize) -> RunConfig {
    RunConfig { groups: k, ..RunConfig::default() }
}

#[test]
fn inference_cost_does_not_depend_on_k() {
    let data = Dataset::generate(&small_cfg(4)).unwrap();
    let images = images_to_value(&data.scenes[0].views).unwrap();
    let mut totals = Vec::new();
    for k in [1, 2, 4, 6] {
        let model = Model::for_dataset(&small_cfg(k), &data).unwrap();
        let (_, stats) = model.predict_labels(&images).unwrap();
        totals.push(stats.total);
    }
    assert!(totals.windows(2).all(|w| w[0] == w[1]), "{totals:?}");
}

#[test]
fn inference_reads_only_the_finest_group() {
    let cfg = small_cfg(4);
    let data = Dataset::generate(&cfg).unwrap();
    let mut model = Model::for_dataset(&cfg, &data).unwrap();
    let before = model.predict(&data.scenes[0]).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(18);
    for g in 0..3 {
        for p in ["queries", "reference", "class.w", "class.b"] {
            let id = model.store.find(&format!("decoder.g{g}.{p}")).unwrap();
            let v = model.store.value_mut(id);
            *v = random(v.shape(), &mut rng);
        }
    }
    assert_eq!(model.predict(&data.scenes[0]).unwrap(), before);
}

#[test]
fn total_loss_uses_unit_ten_unit_weights() {
    let cfg = RunConfig::default();
    assert_eq!((cfg.loss.depth, cfg.loss.seg, cfg.loss.mask_cls), (1.0, 10.0, 1.0));
    let data = Dataset::generate(&cfg).unwrap();
    let model = Model::for_dataset(&cfg, &data).unwrap();
    let p = model.prepare(&data.scenes[0]).unwrap();
    let mut t = Tape::new();
    let (_, b) = model.loss(&mut t, &p).unwrap();
    assert!((b.total - (b.depth + 10.0 * b.seg + b.mask_cls)).abs() < 1e-9 * b.total);
    assert!((b.mask_cls - b.groups.iter().sum::<f64>()).abs() < 1e-9 * b.mask_cls);
}
