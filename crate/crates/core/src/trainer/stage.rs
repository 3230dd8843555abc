use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::batch::{compose_batch, EpochSampler};
use super::config::TrainConfig;
use super::loss::LossBreakdown;
use super::mask::{apply_mask, generate_mask};
use super::optim::Sgd;
use super::pseudo::filter_pseudo_labels;
use super::schedule::lr_schedule;
use super::step::{composite_step, PreparedBatch};
use crate::dataset::{Domain, ImageRecord, LabelStatus, Manifest};
use crate::detector::{forward_detector, DetectorParams, Supervision};
use crate::error::{Error, Result};
use crate::imagery::ImageSource;
use crate::metrics::{evaluate, ground_truth_from_manifest, Detection, EvalReport};
use crate::tensor::Tensor;

/// Log entry of one optimisation step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub stage: u8,
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: LossBreakdown,
    pub pseudo_positive_boxes: usize,
    pub reliable_background: usize,
    pub unusable: usize,
}

/// Per-epoch summary written to the metrics log.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub stage: u8,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub sup: f64,
    pub mic: f64,
    pub adversarial: f64,
    pub consistency: f64,
    pub total: f64,
    pub pseudo_positive_boxes: usize,
    pub pseudo_positive_images: usize,
    pub reliable_background: usize,
    pub unusable: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map_50: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub val_map_50_95: Option<f64>,
}

/// Receives progress from the training loops.
pub trait TrainObserver {
    fn on_step(
        &mut self,
        _record: &StepRecord,
        _student: &DetectorParams,
        _teacher: Option<&DetectorParams>,
    ) {
    }
    fn on_epoch(&mut self, _metrics: &EpochMetrics) {}
    /// Called once per epoch in stage 2 when no unlabeled image was usable.
    fn on_starvation(&mut self, _epoch: usize, _unusable: usize) {}
}

impl TrainObserver for () {}

/// Writes epoch metrics as JSON lines and keeps every step in memory.
pub struct MetricsLog {
    out: Option<BufWriter<File>>,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochMetrics>,
    pub warnings: Vec<String>,
}

impl MetricsLog {
    pub fn in_memory() -> Self {
        MetricsLog {
            out: None,
            steps: Vec::new(),
            epochs: Vec::new(),
            warnings: Vec::new(),
        }
    }

    pub fn to_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        Ok(MetricsLog {
            out: Some(BufWriter::new(f)),
            ..Self::in_memory()
        })
    }
}

impl TrainObserver for MetricsLog {
    fn on_step(&mut self, record: &StepRecord, _: &DetectorParams, _: Option<&DetectorParams>) {
        self.steps.push(record.clone());
    }

    fn on_epoch(&mut self, m: &EpochMetrics) {
        if let Some(out) = self.out.as_mut() {
            let _ = serde_json::to_writer(&mut *out, m);
            let _ = out.write_all(b"\n");
            let _ = out.flush();
        }
        self.epochs.push(m.clone());
    }

    fn on_starvation(&mut self, epoch: usize, unusable: usize) {
        self.warnings.push(format!(
            "epoch {epoch}: every unlabeled image was unusable ({unusable} skipped)"
        ));
    }
}

/// Images on which predictions are made, in batches of `batch`.
pub fn predict(
    params: &DetectorParams,
    manifest: &Manifest,
    images: &dyn ImageSource,
    batch: usize,
) -> Result<Vec<Detection>> {
    let mut out = Vec::new();
    for chunk in manifest.records.chunks(batch.max(1)) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let x = images.load_batch(&refs)?;
        let res = forward_detector(params, &x)?;
        for (r, dets) in chunk.iter().zip(res.detections) {
            out.extend(dets.iter().map(|d| d.to_detection(&r.image_id)));
        }
    }
    Ok(out)
}

/// mAP of `params` on `manifest` against its (visible or withheld) ground truth.
pub fn evaluate_model(
    params: &DetectorParams,
    manifest: &Manifest,
    images: &dyn ImageSource,
) -> Result<EvalReport> {
    let dets = predict(params, manifest, images, 16)?;
    evaluate(&dets, &ground_truth_from_manifest(manifest))
}

/// Mean per-image supervised loss over a labeled manifest, with anchor and
/// ROI sampling drawn from `seed`.
pub fn supervised_loss(
    params: &DetectorParams,
    manifest: &Manifest,
    images: &dyn ImageSource,
    seed: u64,
) -> Result<f64> {
    if manifest.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = TrainConfig::default().weights();
    let mut sum = 0.0;
    for chunk in manifest.records.chunks(16) {
        let refs: Vec<&ImageRecord> = chunk.iter().collect();
        let batch = PreparedBatch {
            images: images.load_batch(&refs)?,
            supervision: chunk.iter().map(labeled_boxes).collect::<Result<_>>()?,
            labeled: vec![true; chunk.len()],
            domains: chunk.iter().map(|r| r.domain).collect(),
        };
        sum += composite_step(params, &batch, &weights, 0.0, false, None, &mut rng)?
            .breakdown
            .sup;
    }
    Ok(sum / manifest.len() as f64)
}

fn labeled_boxes(r: &ImageRecord) -> Result<Supervision> {
    if r.label_status != LabelStatus::Labeled {
        return Err(Error::Config(format!("{} is not labeled", r.image_id)));
    }
    Ok(Supervision::Boxes(r.boxes.clone()))
}

struct EpochAcc {
    m: EpochMetrics,
}

impl EpochAcc {
    fn new(stage: u8, epoch: usize) -> Self {
        EpochAcc {
            m: EpochMetrics {
                stage,
                epoch,
                ..Default::default()
            },
        }
    }

    fn add(&mut self, rec: &StepRecord, positive_images: usize) {
        let m = &mut self.m;
        m.steps += 1;
        m.lr = rec.lr;
        m.sup += rec.loss.sup;
        m.mic += rec.loss.mic;
        m.adversarial += rec.loss.adversarial();
        m.consistency += rec.loss.consistency();
        m.total += rec.loss.total;
        m.pseudo_positive_boxes += rec.pseudo_positive_boxes;
        m.pseudo_positive_images += positive_images;
        m.reliable_background += rec.reliable_background;
        m.unusable += rec.unusable;
    }

    fn finish(
        mut self,
        val: Option<(&DetectorParams, &Manifest, &dyn ImageSource)>,
    ) -> Result<EpochMetrics> {
        let k = self.m.steps.max(1) as f64;
        for v in [
            &mut self.m.sup,
            &mut self.m.mic,
            &mut self.m.adversarial,
            &mut self.m.consistency,
            &mut self.m.total,
        ] {
            *v /= k;
        }
        if let Some((p, m, src)) = val {
            let r = evaluate_model(p, m, src)?;
            self.m.val_map_50 = Some(r.map_50);
            self.m.val_map_50_95 = Some(r.map_50_95);
        }
        Ok(self.m)
    }
}

fn steps_per_epoch(pool: usize, per_step: usize, cap: usize) -> usize {
    let full = pool.div_ceil(per_step.max(1)).max(1);
    if cap == 0 {
        full
    } else {
        full.min(cap)
    }
}

/// Supervised training on labeled records; returns the final parameters.
pub fn train_stage1(
    source: &Manifest,
    images: &dyn ImageSource,
    init: DetectorParams,
    cfg: &TrainConfig,
    val: Option<&Manifest>,
    obs: &mut dyn TrainObserver,
) -> Result<DetectorParams> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config(
            "stage 1 needs a non-empty source manifest".into(),
        ));
    }
    let sup: Vec<Supervision> = source
        .records
        .iter()
        .map(labeled_boxes)
        .collect::<Result<_>>()?;
    let mut params = init;
    let mut opt = Sgd::new(
        params.tensors().len(),
        cfg.momentum,
        cfg.weight_decay,
        cfg.grad_clip,
    );
    let mut sampler = EpochSampler::new(source.len(), cfg.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4531);
    let per_step = cfg.batch_size.min(source.len());
    let spe = steps_per_epoch(source.len(), per_step, cfg.max_steps_per_epoch);
    let weights = cfg.weights();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAcc::new(1, epoch);
        for _ in 0..spe {
            let idx = sampler.take(per_step);
            let recs: Vec<&ImageRecord> = idx.iter().map(|&i| &source.records[i]).collect();
            let batch = PreparedBatch {
                images: images.load_batch(&recs)?,
                supervision: idx.iter().map(|&i| sup[i].clone()).collect(),
                labeled: vec![true; idx.len()],
                domains: recs.iter().map(|r| r.domain).collect(),
            };
            let lr = lr_schedule(step, spe, cfg);
            let out = composite_step(
                &params,
                &batch,
                &weights,
                cfg.da_rate,
                false,
                None,
                &mut rng,
            )?;
            opt.step(&mut params, &out.grads, lr);
            let rec = StepRecord {
                stage: 1,
                epoch,
                step,
                lr,
                loss: out.breakdown,
                pseudo_positive_boxes: 0,
                reliable_background: 0,
                unusable: 0,
            };
            obs.on_step(&rec, &params, None);
            acc.add(&rec, 0);
            step += 1;
        }
        let m = acc.finish(val.map(|v| (&params, v, images)))?;
        obs.on_epoch(&m);
    }
    Ok(params)
}

/// Inputs of the adaptation stage.
#[derive(Clone, Copy, Debug)]
pub struct Stage2Data<'a> {
    pub source_labeled: &'a Manifest,
    pub target_labeled: &'a Manifest,
    pub target_unlabeled: &'a Manifest,
    /// Evaluated with the teacher after every epoch when present.
    pub target_val: Option<&'a Manifest>,
}

/// Student and teacher after adaptation.
#[derive(Clone, Debug)]
pub struct Stage2Outcome {
    pub student: DetectorParams,
    pub teacher: DetectorParams,
}

fn mix(seed: u64, a: u64, b: u64) -> u64 {
    let mut z =
        seed ^ a.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ b.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Teacher–student adaptation from a stage-1 initialisation.
///
/// Each step mixes labeled source/target images with block-masked unlabeled
/// images. The teacher labels the unmasked originals, the student is trained
/// on the composite objective, then the teacher takes one moving-average step
/// towards the student every `ema_period` steps.
pub fn train_stage2(
    data: Stage2Data,
    images: &dyn ImageSource,
    init: &DetectorParams,
    cfg: &TrainConfig,
    obs: &mut dyn TrainObserver,
) -> Result<Stage2Outcome> {
    cfg.validate()?;
    let labeled: Vec<&ImageRecord> = data
        .source_labeled
        .records
        .iter()
        .chain(&data.target_labeled.records)
        .collect();
    let unlabeled: Vec<&ImageRecord> = data.target_unlabeled.records.iter().collect();
    let mut composer = compose_batch(
        labeled.len(),
        unlabeled.len(),
        cfg.batch_size,
        cfg.unlabeled_ratio,
        cfg.seed,
    )?;
    let sup: Vec<Supervision> = labeled
        .iter()
        .map(|r| labeled_boxes(r))
        .collect::<Result<_>>()?;

    let mut student = init.clone();
    student.set_counters(0, 0);
    let mut teacher = student.clone();
    let mut opt = Sgd::new(
        student.tensors().len(),
        cfg.momentum,
        cfg.weight_decay,
        cfg.grad_clip,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4532);
    let spe = steps_per_epoch(
        unlabeled.len(),
        composer.n_unlabeled,
        cfg.max_steps_per_epoch,
    );
    let weights = cfg.weights();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut acc = EpochAcc::new(2, epoch);
        let mut usable_seen = 0usize;
        for _ in 0..spe {
            let mb = composer.next().expect("endless composer");
            let lrecs: Vec<&ImageRecord> = mb.labeled.iter().map(|&i| labeled[i]).collect();
            let urecs: Vec<&ImageRecord> = mb.unlabeled.iter().map(|&i| unlabeled[i]).collect();
            let originals = images.load_batch(&urecs)?;
            let teacher_out = forward_detector(&teacher, &originals)?;

            let mut items: Vec<Tensor> = Vec::with_capacity(cfg.batch_size);
            let mut supervision = Vec::with_capacity(cfg.batch_size);
            let mut is_labeled = Vec::with_capacity(cfg.batch_size);
            let mut domains = Vec::with_capacity(cfg.batch_size);
            for (&i, r) in mb.labeled.iter().zip(&lrecs) {
                items.push(images.load(r)?);
                supervision.push(sup[i].clone());
                is_labeled.push(true);
                domains.push(r.domain);
            }
            let (mut positives, mut positive_images, mut background, mut unusable) = (0, 0, 0, 0);
            for (slot, (r, dets)) in urecs.iter().zip(&teacher_out.detections).enumerate() {
                let dets: Vec<Detection> =
                    dets.iter().map(|d| d.to_detection(&r.image_id)).collect();
                let pl = filter_pseudo_labels(&r.image_id, &dets, cfg.tau_u, cfg.tau_l)?;
                let original = originals.batch_item(slot);
                let (_, _, h, w) = originals.dims4();
                let mask = generate_mask(
                    h,
                    w,
                    cfg.mask_block,
                    cfg.mask_ratio,
                    mix(cfg.seed, step as u64, slot as u64),
                )?;
                items.push(apply_mask(&original, &mask)?);
                if pl.usable_with(cfg.background_pseudo_labels) {
                    usable_seen += 1;
                    positives += pl.positives.len();
                    positive_images += usize::from(!pl.positives.is_empty());
                    background += usize::from(pl.positives.is_empty());
                    supervision.push(Supervision::Boxes(
                        pl.positives.into_iter().map(|d| d.bbox).collect(),
                    ));
                } else {
                    unusable += 1;
                    supervision.push(Supervision::None);
                }
                is_labeled.push(false);
                domains.push(Domain::Target);
            }
            let batch = PreparedBatch {
                images: Tensor::stack(&items)?,
                supervision,
                labeled: is_labeled,
                domains,
            };
            let lr = lr_schedule(step, spe, cfg);
            let out = composite_step(
                &student,
                &batch,
                &weights,
                cfg.da_rate,
                true,
                None,
                &mut rng,
            )?;
            opt.step(&mut student, &out.grads, lr);
            if (step + 1) % cfg.ema_period == 0 {
                teacher.blend_from(&student, cfg.ema_decay)?;
            }
            let rec = StepRecord {
                stage: 2,
                epoch,
                step,
                lr,
                loss: out.breakdown,
                pseudo_positive_boxes: positives,
                reliable_background: background,
                unusable,
            };
            obs.on_step(&rec, &student, Some(&teacher));
            acc.add(&rec, positive_images);
            step += 1;
        }
        if usable_seen == 0 {
            obs.on_starvation(epoch, acc.m.unusable);
        }
        let m = acc.finish(data.target_val.map(|v| (&teacher, v, images)))?;
        obs.on_epoch(&m);
    }
    Ok(Stage2Outcome { student, teacher })
}
