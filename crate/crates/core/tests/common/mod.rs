#![allow(dead_code)]

use image::{Rgb, RgbImage};
use lada::dataset::{parse_scene_name, BBox, Domain, ImageRecord, LabelStatus, Manifest};
use lada::detector::{DetectorConfig, DetectorParams};
use lada::imagery::MemoryImages;
use lada::trainer::TrainConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn record(id: &str, boxes: Vec<BBox>, domain: Domain, size: u32) -> ImageRecord {
    let scene = match domain {
        Domain::Source => "20160604_FIRE_rm-n-mobo-c",
        Domain::Target => "20170711_FIRE_bl-e-mobo-c",
    };
    ImageRecord {
        image_id: id.to_string(),
        scene: parse_scene_name(scene).unwrap(),
        width: size,
        height: size,
        boxes,
        domain,
        label_status: LabelStatus::Labeled,
        hidden_gt: None,
    }
}

/// Noisy 8×8 images, most with one bright square and a matching box.
pub fn mini_set(
    n: usize,
    prefix: &str,
    domain: Domain,
    seed: u64,
    images: &mut MemoryImages,
) -> Vec<ImageRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let tint = if domain == Domain::Source { 0 } else { 60 };
    (0..n)
        .map(|i| {
            let mut img = RgbImage::from_fn(8, 8, |_, _| {
                let v: u8 = rng.gen_range(20..90);
                Rgb([v, v.saturating_add(tint), v])
            });
            let mut boxes = vec![];
            if rng.gen_bool(0.7) {
                let s = rng.gen_range(3..=5u32);
                let (x0, y0) = (rng.gen_range(0..=8 - s), rng.gen_range(0..=8 - s));
                for y in y0..y0 + s {
                    for x in x0..x0 + s {
                        img.put_pixel(x, y, Rgb([230, 225, 220]));
                    }
                }
                boxes.push(BBox::from_corners(
                    0,
                    [x0 as f64, y0 as f64, (x0 + s) as f64, (y0 + s) as f64],
                ));
            }
            let id = format!("{prefix}{i:03}");
            images.insert(id.clone(), img);
            record(&id, boxes, domain, 8)
        })
        .collect()
}

pub fn manifest(records: Vec<ImageRecord>, name: &str) -> Manifest {
    Manifest::new(records, name, 0, None).unwrap()
}

/// Withholds the boxes of every record, as a protocol split does.
pub fn unlabel(mut records: Vec<ImageRecord>) -> Vec<ImageRecord> {
    for r in &mut records {
        r.hidden_gt = Some(std::mem::take(&mut r.boxes));
        r.label_status = LabelStatus::Unlabeled;
    }
    records
}

pub fn mini_params(seed: u64) -> DetectorParams {
    DetectorParams::init(DetectorConfig::miniature(), seed).unwrap()
}

/// Stage-2 data on 8×8 images: labeled source, labeled target, unlabeled target.
pub struct MiniBench {
    pub images: MemoryImages,
    pub source: Manifest,
    pub target_labeled: Manifest,
    pub target_unlabeled: Manifest,
}

pub fn mini_bench(seed: u64) -> MiniBench {
    let mut images = MemoryImages::default();
    let source = mini_set(12, "s", Domain::Source, seed, &mut images);
    let tl = mini_set(4, "tl", Domain::Target, seed + 1, &mut images);
    let tu = mini_set(20, "tu", Domain::Target, seed + 2, &mut images);
    MiniBench {
        images,
        source: manifest(source, "source"),
        target_labeled: manifest(tl, "target_labeled"),
        target_unlabeled: manifest(unlabel(tu), "target_unlabeled"),
    }
}

/// Small-batch settings for the 8×8 benchmark.
pub fn mini_config(seed: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        unlabeled_ratio: 0.5,
        mask_block: 4,
        base_lr: 0.01,
        warmup_epochs: 0.0,
        grad_clip: 10.0,
        seed,
        ..TrainConfig::default()
    }
}
