//! Source-only training followed by teacher–student adaptation on the
//! synthetic benchmark, scored on held-out target images after each stage.
//!
//! `cargo run --release --example two_stage_training` takes a few minutes on one core.

use lada::dataset::{sample_protocol, split_train_val, Domain, Manifest};
use lada::detector::{DetectorConfig, DetectorParams};
use lada::synth::generate_benchmark;
use lada::trainer::{
    evaluate_model, train_stage1, train_stage2, MetricsLog, Stage2Data, TrainConfig,
};

fn main() -> lada::Result<()> {
    let seed = 2;
    let bench = generate_benchmark(600, 600, seed)?;
    let by_domain = |d: Domain| {
        bench
            .manifest
            .records
            .iter()
            .filter(|r| r.domain == d)
            .cloned()
            .collect::<Vec<_>>()
    };
    let source = Manifest::new(by_domain(Domain::Source), "source", seed, None)?;
    let (target_train, target_val) = split_train_val(&by_domain(Domain::Target), 0.05, seed)?;
    let (labeled, unlabeled) = sample_protocol(&target_train, 0.03, seed)?;
    println!(
        "source {}, target labeled {}, unlabeled {}, val {}",
        source.len(),
        labeled.len(),
        unlabeled.len(),
        target_val.len()
    );

    let stage1 = TrainConfig {
        seed,
        epochs: 4,
        lr_decay_epoch: 3,
        ..TrainConfig::toy()
    };
    let init = DetectorParams::init(DetectorConfig::toy(), seed)?;
    let student = train_stage1(&source, &bench.images, init, &stage1, None, &mut ())?;
    let before = evaluate_model(&student, &target_val, &bench.images)?;
    println!("source only: target mAP@0.5 {:.3}", before.map_50);

    let stage2 = TrainConfig {
        epochs: 3,
        lr_decay_epoch: 2,
        warmup_epochs: 0.0,
        ..stage1
    };
    let data = Stage2Data {
        source_labeled: &source,
        target_labeled: &labeled,
        target_unlabeled: &unlabeled,
        target_val: Some(&target_val),
    };
    let mut log = MetricsLog::in_memory();
    let out = train_stage2(data, &bench.images, &student, &stage2, &mut log)?;
    for e in &log.epochs {
        println!(
            "epoch {}: total {:.3}, masked {:.3}, {} pseudo boxes, {} background, {} unusable, teacher mAP@0.5 {:.3}",
            e.epoch,
            e.total,
            e.mic,
            e.pseudo_positive_boxes,
            e.reliable_background,
            e.unusable,
            e.val_map_50.unwrap_or(f64::NAN)
        );
    }
    let after = evaluate_model(&out.teacher, &target_val, &bench.images)?;
    println!(
        "adapted teacher: target mAP@0.5 {:.3} (mAP {:.3})",
        after.map_50, after.map_50_95
    );
    Ok(())
}
