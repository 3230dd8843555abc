mod common;

use std::collections::BTreeSet;

use lada::dataset::{
    merge_boxes, parse_scene_name, sample_protocol, split_train_val, BBox, Domain, ImageRecord,
};
use lada::metrics::{average_precision, evaluate, Detection, GroundTruth};
use lada::trainer::{filter_pseudo_labels, generate_mask, lr_schedule, TrainConfig};
use proptest::prelude::*;

fn det(id: &str, score: f64, b: [f64; 4]) -> Detection {
    Detection {
        image_id: id.into(),
        bbox: BBox::from_corners(0, b),
        score,
    }
}

fn corners() -> impl Strategy<Value = [f64; 4]> {
    (0u32..40, 0u32..40, 1u32..20, 1u32..20)
        .prop_map(|(x, y, w, h)| [x as f64, y as f64, (x + w) as f64, (y + h) as f64])
}

fn scenario() -> impl Strategy<Value = (GroundTruth, Vec<Detection>)> {
    let image = (
        prop::collection::vec(corners(), 0..4),
        prop::collection::vec((corners(), 0.01f64..1.0), 0..6),
    );
    (corners(), prop::collection::vec(image, 1..5)).prop_map(|(first, mut imgs)| {
        imgs[0].0.push(first);
        let mut gts = GroundTruth::new();
        let mut dets = Vec::new();
        for (i, (g, d)) in imgs.into_iter().enumerate() {
            let id = format!("i{i}");
            gts.insert(
                id.clone(),
                g.into_iter().map(|b| BBox::from_corners(0, b)).collect(),
            );
            dets.extend(d.into_iter().map(|(b, s)| det(&id, s, b)));
        }
        (gts, dets)
    })
}

fn records(n: usize) -> Vec<ImageRecord> {
    (0..n)
        .map(|i| common::record(&format!("r{i:05}"), vec![], Domain::Target, 8))
        .collect()
}

fn ids(rs: &[ImageRecord]) -> BTreeSet<String> {
    rs.iter().map(|r| r.image_id.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn filter_partitions_every_detection(
        scores in prop::collection::vec(prop_oneof![0.0f64..1.0, Just(0.05), Just(0.8)], 0..12),
    ) {
        let ds: Vec<Detection> = scores.iter().map(|&s| det("u", s, [0.0, 0.0, 4.0, 4.0])).collect();
        let p = filter_pseudo_labels("u", &ds, 0.8, 0.05).unwrap();
        prop_assert_eq!(p.positives.len() + p.discarded + p.below_lower, scores.len());
        prop_assert!(p.positives.iter().all(|d| d.score > 0.8));
        prop_assert_eq!(p.is_reliable_background, scores.iter().all(|&s| s < 0.05));
        prop_assert_eq!(p.usable, !p.positives.is_empty() || p.is_reliable_background);
        prop_assert!(!(p.is_reliable_background && !p.positives.is_empty()));
        prop_assert_eq!(p.usable_with(true), p.usable);
        prop_assert_eq!(p.usable_with(false), !p.positives.is_empty());
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn ap_is_bounded_and_ignores_score_scale((gts, dets) in scenario(), k in 0.05f64..1.0) {
        let report = evaluate(&dets, &gts).unwrap();
        prop_assert!((0.0..=1.0).contains(&report.map_50_95));
        prop_assert!(report.map_50_95 <= report.map_50 + 1e-12);
        let scaled: Vec<Detection> = dets.iter().map(|d| Detection { score: d.score * k, ..d.clone() }).collect();
        prop_assert_eq!(evaluate(&scaled, &gts).unwrap(), report);
    }

    #[test]
    fn duplicating_a_detection_never_raises_ap((gts, dets) in scenario(), pick in any::<prop::sample::Index>()) {
        // With one box in the image the copy can only be a false positive.
        let single: Vec<&Detection> = dets.iter().filter(|d| gts[&d.image_id].len() == 1).collect();
        prop_assume!(!single.is_empty());
        let mut dup = dets.clone();
        let mut copy = single[pick.index(single.len())].clone();
        copy.score *= 0.999;
        dup.push(copy);
        for t in [0.5, 0.75] {
            prop_assert!(average_precision(&dup, &gts, t).unwrap() <= average_precision(&dets, &gts, t).unwrap() + 1e-12);
        }
    }

    #[test]
    fn perfect_detections_score_one((gts, _) in scenario()) {
        let dets: Vec<Detection> = gts
            .iter()
            .flat_map(|(id, bs)| bs.iter().map(move |b| Detection { image_id: id.clone(), bbox: *b, score: 1.0 }))
            .collect();
        prop_assert_eq!(evaluate(&dets, &gts).unwrap().map_50_95, 1.0);
    }

    #[test]
    fn splits_partition_deterministically(n in 20usize..400, seed in any::<u64>(), val in 0.01f64..0.3) {
        let recs = records(n);
        let (train, hold) = split_train_val(&recs, val, seed).unwrap();
        let again = split_train_val(&recs, val, seed).unwrap();
        prop_assert_eq!(ids(&train.records), ids(&again.0.records));
        prop_assert!(ids(&train.records).is_disjoint(&ids(&hold.records)));
        prop_assert_eq!(train.len() + hold.len(), n);

        let (lab, unl) = sample_protocol(&train, 0.03, seed).unwrap();
        let (lab2, _) = sample_protocol(&train, 0.03, seed).unwrap();
        prop_assert_eq!(ids(&lab.records), ids(&lab2.records));
        prop_assert!(ids(&lab.records).is_disjoint(&ids(&unl.records)));
        let union: BTreeSet<String> = ids(&lab.records).union(&ids(&unl.records)).cloned().collect();
        prop_assert_eq!(union, ids(&train.records));
        prop_assert_eq!(lab.len(), (3 * train.len() + 50) / 100);
    }

    #[test]
    fn merging_twice_changes_nothing(bs in prop::collection::vec((corners(), 0u32..3), 0..8)) {
        let boxes: Vec<BBox> = bs.into_iter().map(|(b, c)| BBox::from_corners(c, b)).collect();
        let once = merge_boxes(&boxes);
        prop_assert_eq!(merge_boxes(&once), once.clone());
        let classes: BTreeSet<u32> = boxes.iter().map(|b| b.class_id).collect();
        prop_assert_eq!(once.len(), classes.len());
    }

    #[test]
    fn mask_covers_the_requested_share(h in 1usize..200, w in 1usize..200, block in 1usize..48, seed in any::<u64>()) {
        let m = generate_mask(h, w, block, 0.5, seed).unwrap();
        let n = h.div_ceil(block) * w.div_ceil(block);
        prop_assert_eq!(m.masked_blocks(), n.div_ceil(2));
        prop_assert_eq!(generate_mask(h, w, block, 0.5, seed).unwrap(), m);
    }

    #[test]
    fn learning_rate_stays_within_schedule(step in 0usize..5000, spe in 1usize..500) {
        let cfg = TrainConfig::default();
        let lr = lr_schedule(step, spe, &cfg);
        prop_assert!(lr >= 0.0 && lr <= cfg.base_lr + 1e-15);
        if step >= cfg.lr_decay_epoch * spe {
            prop_assert!((lr - cfg.base_lr * cfg.lr_decay_factor).abs() < 1e-15);
        }
    }

    #[test]
    fn scene_names_roundtrip(
        (y, m, d) in (2015u32..2023, 1u32..13, 1u32..29),
        name in "[A-Za-z0-9]{1,10}",
        cam in "[a-z]{1,6}",
        dir in prop::sample::select(vec!["n", "e", "s", "w", "ne", "sw"]),
    ) {
        let s = format!("{y}{m:02}{d:02}_{name}_{cam}-{dir}-mobo-c");
        let meta = parse_scene_name(&s).unwrap();
        prop_assert_eq!(meta.rejoin(), s);
    }
}
