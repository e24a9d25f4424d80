use boostdet::anchors::{assign, generate, AnchorConfig, AssignConfig, LevelShape};
use boostdet::boxes::{iou, iou_grad, BBox};
use boostdet::numcore::gradcheck::{finite_diff_check, DEFAULT_STEP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use boostdet::losses::{
    fast_iou_loss, focal_loss, improved_iou_loss, iou_pred_loss, per_sample_cls_loss, rcnn_reg_loss, total_loss,
    weighted_ce_loss, ClsLossKind, FiouConfig, FocalConfig, LossComponents, LossWeights,
};
use boostdet::boxes::{encode, Delta};
use boostdet::numcore::{channel_norm_forward, linear_forward, sgd_step, Grid, LayerParams, SgdConfig};
use boostdet::postprocess::{coco_ap, coco_iou_thresholds, nms, Detection, GroundTruth, NmsConfig, SceneResult};
use boostdet::fusion::ScoreTriple;
use boostdet::reweighting::{br_weights, BrConfig, BrSample};
use boostdet::synthdata::{background_channel, generate_dataset, generate_scene, sample_scene_spec, DatasetConfig};
use proptest::prelude::*;

fn arb_box() -> impl Strategy<Value = BBox<f64>> {
    (0.0..60.0f64, 0.0..60.0f64, 0.5..30.0f64, 0.5..30.0f64).prop_map(|(x, y, w, h)| BBox::from([x, y, x + w, y + h]))
}

fn grid(h: usize, w: usize, c: usize, v: Vec<f64>) -> Grid<f64> {
    Grid::from_vec(h, w, c, v).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn linear_forward_is_linear(
        a in -3.0..3.0f64,
        x in prop::collection::vec(-2.0..2.0f64, 12),
        y in prop::collection::vec(-2.0..2.0f64, 12),
        w in prop::collection::vec(-1.0..1.0f64, 15),
    ) {
        let p = LayerParams::new("l", 3, 5, w, vec![0.0; 5]).unwrap();
        let gx = grid(2, 2, 3, x.clone());
        let gy = grid(2, 2, 3, y.clone());
        let mixed = grid(2, 2, 3, x.iter().zip(&y).map(|(u, v)| a * u + v).collect());
        let fx = linear_forward(&gx, &p).unwrap();
        let fy = linear_forward(&gy, &p).unwrap();
        let fm = linear_forward(&mixed, &p).unwrap();
        for ((m, u), v) in fm.values().iter().zip(fx.values()).zip(fy.values()) {
            prop_assert!((m - (a * u + v)).abs() < 1e-12);
        }
    }

    #[test]
    fn channel_norm_standardizes_groups(v in prop::collection::vec(-50.0..50.0f64, 8), groups in prop::sample::select(vec![1usize, 2, 4])) {
        let g = 8 / groups;
        for grp in 0..groups {
            let xs = &v[grp * g..(grp + 1) * g];
            let mean = xs.iter().sum::<f64>() / g as f64;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / g as f64;
            prop_assume!(var > 10.0);
        }
        let out = channel_norm_forward(&grid(1, 1, 8, v), groups, &LayerParams::affine("n", 8)).unwrap();
        for grp in 0..groups {
            let ys = &out.values()[grp * g..(grp + 1) * g];
            let mean = ys.iter().sum::<f64>() / g as f64;
            let var = ys.iter().map(|y| (y - mean).powi(2)).sum::<f64>() / g as f64;
            prop_assert!(mean.abs() <= 1e-9);
            prop_assert!((var - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn sgd_with_zero_lr_is_identity(w in prop::collection::vec(-1.0..1.0f64, 6), gr in prop::collection::vec(-5.0..5.0f64, 6)) {
        let mut p = LayerParams::new("l", 3, 2, w.clone(), vec![0.1, -0.2]).unwrap();
        p.grad_weights.copy_from_slice(&gr);
        let cfg = SgdConfig { learning_rate: 0.0, ..SgdConfig::default() };
        sgd_step(&mut p, &cfg).unwrap();
        prop_assert_eq!(&p.weights, &w);
        prop_assert_eq!(&p.biases, &vec![0.1, -0.2]);
    }

    #[test]
    fn losses_are_non_negative(
        p in 0.0..=1.0f64,
        y in 0u8..=1,
        gt in arb_box(),
        anchor in arb_box(),
        d in prop::array::uniform4(-1.0..1.0f64),
        eta in 0.0..4.0f64,
    ) {
        prop_assert!(focal_loss(p, y, &FocalConfig::default()).unwrap().0 >= 0.0);
        let pred = Delta::new(d[0], d[1], d[2], d[3]);
        let base = improved_iou_loss(&pred, &gt, &anchor).unwrap();
        let fast = fast_iou_loss(&pred, &gt, &anchor, &FiouConfig { eta }).unwrap();
        prop_assert!(base.value >= 0.0 && fast.value >= 0.0);
        // g^eta <= 1 shrinks the loss
        prop_assert!(fast.value <= base.value + 1e-15);
        prop_assert!(iou_pred_loss(p, base.iou).0 >= 0.0);
        let target = encode(&gt, &anchor).unwrap();
        prop_assert!(rcnn_reg_loss(&[(pred, target)]).value >= 0.0);
    }

    #[test]
    fn focal_is_monotone(a in 0.001..0.999f64, b in 0.001..0.999f64) {
        prop_assume!((a - b).abs() > 1e-6);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let cfg = FocalConfig::default();
        prop_assert!(focal_loss(lo, 1, &cfg).unwrap().0 > focal_loss(hi, 1, &cfg).unwrap().0);
        prop_assert!(focal_loss(lo, 0, &cfg).unwrap().0 < focal_loss(hi, 0, &cfg).unwrap().0);
    }

    #[test]
    fn total_loss_is_linear_in_each_component(c in prop::array::uniform5(0.0..3.0f64), k in 0usize..5, bump in 0.0..2.0f64) {
        let w = LossWeights::default();
        let comps = |v: [f64; 5]| LossComponents { obj_rpn: v[0], loc_rpn: v[1], iou_rpn: v[2], reg: v[3], cls: v[4] };
        let lam = [w.obj_rpn, w.loc_rpn, w.iou_rpn, w.reg, w.cls];
        let mut moved = c;
        moved[k] += bump;
        let diff = total_loss(&comps(moved), &w).unwrap() - total_loss(&comps(c), &w).unwrap();
        prop_assert!((diff - lam[k] * bump).abs() < 1e-12);
    }

    #[test]
    fn omega_zero_weights_are_exactly_one(
        samples in prop::collection::vec((0.0..=1.0f64, 0.01..5.0f64, any::<bool>()), 1..40),
        normalize in any::<bool>(),
    ) {
        let s: Vec<_> = samples.iter().map(|&(p, l, fg)| BrSample { prior: p, is_foreground: fg, cls_loss: l }).collect();
        let w = br_weights(&s, &BrConfig { omega: 0.0, normalize }).unwrap();
        prop_assert!(w.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn omega_zero_weighted_ce_equals_plain_ce(
        rows in prop::collection::vec((prop::array::uniform4(0.01..1.0f64), 0usize..4), 1..20),
    ) {
        let probs: Vec<Vec<f64>> = rows.iter().map(|(r, _)| { let s: f64 = r.iter().sum(); r.iter().map(|v| v / s).collect() }).collect();
        let labels: Vec<usize> = rows.iter().map(|(_, l)| *l).collect();
        let s: Vec<_> = probs.iter().zip(&labels).map(|(p, &l)| BrSample { prior: 0.3, is_foreground: l < 3, cls_loss: -p[l].ln() }).collect();
        let w = br_weights(&s, &BrConfig { omega: 0.0, normalize: true }).unwrap();
        let weighted = weighted_ce_loss(&probs, &labels, &w).unwrap();
        let plain: f64 = per_sample_cls_loss(&probs, &labels, &ClsLossKind::CrossEntropy).unwrap().iter().sum::<f64>() * (1.0 / probs.len() as f64);
        prop_assert_eq!(weighted.value.to_bits(), plain.to_bits());
    }

    #[test]
    fn reweighted_values_stay_positive(
        samples in prop::collection::vec((0.001..0.999f64, 0.01..5.0f64, any::<bool>()), 1..40),
        omega in 0.0..3.0f64,
    ) {
        let s: Vec<_> = samples.iter().map(|&(p, l, fg)| BrSample { prior: p, is_foreground: fg, cls_loss: l }).collect();
        let w = br_weights(&s, &BrConfig { omega, normalize: true }).unwrap();
        prop_assert!(w.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn nms_keeps_no_overlapping_pair(
        boxes in prop::collection::vec(arb_box(), 1..40),
        scores in prop::collection::vec(0.0..1.0f64, 40),
        classes in prop::collection::vec(0usize..3, 40),
        thr in 0.1..0.9f64,
    ) {
        let n = boxes.len();
        let cfg = NmsConfig { iou_threshold: thr, max_keep: 100 };
        let kept = nms(&boxes, &scores[..n], Some(&classes[..n]), &cfg);
        for (i, &a) in kept.iter().enumerate() {
            for &b in &kept[i + 1..] {
                if classes[a] == classes[b] {
                    prop_assert!(iou(&boxes[a], &boxes[b]) <= thr);
                }
            }
        }
        let warped: Vec<f64> = scores[..n].iter().map(|s| (5.0 * s).tanh() * 3.0 - 1.0).collect();
        prop_assert_eq!(kept, nms(&boxes, &warped, Some(&classes[..n]), &cfg));
    }

    #[test]
    fn ap_is_bounded_and_duplicates_never_help(
        gts in prop::collection::vec(arb_box(), 1..4),
        noise in prop::collection::vec((prop::array::uniform4(-3.0..3.0f64), 0.0..1.0f64), 1..6),
        dup_score in 0.0..1.0f64,
    ) {
        let ground_truths: Vec<GroundTruth<f64>> = gts.iter().map(|b| GroundTruth { bbox: *b, class_id: 0 }).collect();
        let detections: Vec<Detection<f64>> = noise
            .iter()
            .enumerate()
            .map(|(i, (d, s))| {
                let g = gts[i % gts.len()].to_array();
                Detection { bbox: BBox::from([g[0] + d[0], g[1] + d[1], g[2] + d[2].abs() + 0.1, g[3] + d[3].abs() + 0.1]), class_id: 0, score: ScoreTriple::fused(*s, *s) }
            })
            .collect();
        let thr = coco_iou_thresholds();
        let base = coco_ap(&[SceneResult { detections: detections.clone(), ground_truths: ground_truths.clone() }], &thr);
        prop_assert!((0.0..=1.0).contains(&base.ap));
        // a duplicate of the top detection can only match a GT already claimed
        let top = detections.iter().max_by(|a, b| a.score.fused.total_cmp(&b.score.fused)).unwrap();
        let mut more = detections.clone();
        more.push(Detection { score: ScoreTriple::fused(dup_score.min(top.score.fused), dup_score.min(top.score.fused)), ..*top });
        let with_dup = coco_ap(&[SceneResult { detections: more, ground_truths }], &thr);
        prop_assert!(with_dup.ap <= base.ap + 1e-12);
        prop_assert!(with_dup.ap50 <= base.ap50 + 1e-12);
    }
}

#[test]
fn anchor_count_matches_level_sum() {
    let cfg = AnchorConfig::default();
    let shapes = [LevelShape { height: 8, width: 8 }, LevelShape { height: 4, width: 4 }, LevelShape { height: 2, width: 2 }];
    let anchors = generate::<f64>(&shapes, &cfg).unwrap();
    let expected: usize = shapes.iter().map(|s| s.height * s.width * cfg.anchors_per_cell()).sum();
    assert_eq!(anchors.len(), expected);
    assert_eq!(expected, (64 + 16 + 4) * 9);
    let boxes: Vec<BBox<f64>> = anchors.iter().map(|a| a.bbox).collect();
    let a = assign(&boxes, &[BBox::from([3.0, 3.0, 20.0, 17.0])], &AssignConfig::default()).unwrap();
    assert_eq!(a.num_positives() + a.num_negatives(), boxes.len());
}

#[test]
fn generator_is_bitwise_deterministic() {
    let cfg = DatasetConfig { n_scenes: 12, ..DatasetConfig::default() };
    let a = generate_dataset(&cfg).unwrap();
    let b = generate_dataset(&cfg).unwrap();
    for (x, y) in a.scenes.iter().zip(&b.scenes) {
        assert_eq!(x.spec, y.spec);
        let bits = |g: &Grid<f64>| g.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&x.grid), bits(&y.grid));
    }
}

#[test]
fn every_ground_truth_is_reachable_by_an_anchor() {
    let cfg = DatasetConfig { n_scenes: 300, vagueness_mix: 1.0, ..DatasetConfig::default() };
    let anchors = cfg.anchor_boxes().unwrap();
    let ds = generate_dataset(&cfg).unwrap();
    let mut n = 0;
    for s in &ds.scenes {
        for g in &s.ground_truths {
            let best = anchors.iter().map(|a| iou(a, &g.bbox)).fold(0.0f64, f64::max);
            assert!(best >= 0.5, "gt {:?} best anchor iou {best}", g.bbox);
            n += 1;
        }
    }
    assert!(n >= 300);
}

#[test]
fn class_signatures_are_orthonormal() {
    // With zero noise and zero vagueness a covered cell equals its class signature.
    let cfg = DatasetConfig::default();
    let anchors = cfg.anchor_boxes().unwrap();
    let mut sigs: Vec<Vec<f64>> = Vec::new();
    for class in 0..cfg.num_classes {
        let mut spec = sample_scene_spec(&cfg, 0, &anchors);
        spec.objects.truncate(1);
        spec.objects[0].class_id = class;
        spec.objects[0].vagueness = 0.0;
        spec.objects[0].occluder = false;
        let scene = generate_scene(&spec).unwrap();
        let b = spec.objects[0].bbox;
        let (r, c) = (((b.y1 + b.y2) / 2.0) as usize, ((b.x1 + b.x2) / 2.0) as usize);
        // remove the noise by rounding: signal entries are 0 or 1, noise sigma 0.1
        let cell: Vec<f64> = scene.grid.cell(r, c).iter().map(|v| v.round()).collect();
        sigs.push(cell);
    }
    let mut bg = vec![0.0; cfg.channels];
    bg[background_channel(cfg.num_classes)] = 1.0;
    sigs.push(bg);
    for (i, a) in sigs.iter().enumerate() {
        for (j, b) in sigs.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            assert_eq!(dot, if i == j { 1.0 } else { 0.0 }, "signatures {i} and {j}");
        }
    }
}

#[test]
fn iou_grad_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut checked = 0;
    while checked < 1000 {
        let mut draw = || {
            let (x, y) = (rng.random_range(0.0..20.0), rng.random_range(0.0..20.0));
            BBox::from([x, y, x + rng.random_range(0.5..15.0), y + rng.random_range(0.5..15.0)])
        };
        let (p, f) = (draw(), draw());
        // stay away from kinks: edges must not coincide and the boxes must overlap
        let (pa, fa): ([f64; 4], [f64; 4]) = (p.to_array(), f.to_array());
        let near_edge = pa.iter().any(|a| fa.iter().any(|b| (a - b).abs() < 1e-2));
        if near_edge || iou(&p, &f) < 1e-3 {
            continue;
        }
        let g = iou_grad(&p, &f);
        let r = finite_diff_check(|x: &[f64]| iou(&BBox::from([x[0], x[1], x[2], x[3]]), &f), &pa, &g, DEFAULT_STEP).unwrap();
        assert!(r.max_relative_error <= 1e-4, "{p:?} vs {f:?}: {r:?}");
        checked += 1;
    }
}
