//! Box overlap, greedy detection matching and COCO-style mAP.
//!
//! Matching follows the COCO convention: detections of one class are visited
//! in descending score order (ties keep input order) and each claims the
//! unmatched ground-truth box of the same image with the highest IoU at or
//! above the threshold. AP is the mean of the interpolated precision at the
//! 101 recall points `0.00, 0.01, …, 1.00`. Detections on images without
//! ground truth are false positives.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{BBox, Manifest};
use crate::error::{Error, Result};

/// A scored predicted box.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub score: f64,
}

/// Ground-truth boxes per image id; background images map to an empty list.
pub type GroundTruth = BTreeMap<String, Vec<BBox>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map_50_95: f64,
    pub map_50: f64,
    pub per_threshold_ap: Vec<(f64, f64)>,
}

/// IoU thresholds `0.50, 0.55, …, 0.95`.
pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| (50 + 5 * i) as f64 / 100.0).collect()
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    iou_corners(&a.corners(), &b.corners())
}

pub(crate) fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

pub fn ground_truth_from_manifest(manifest: &Manifest) -> GroundTruth {
    manifest
        .records
        .iter()
        .map(|r| (r.image_id.clone(), r.ground_truth().to_vec()))
        .collect()
}

/// Mean over ground-truth classes of the per-class 101-point AP.
pub fn average_precision(dets: &[Detection], gts: &GroundTruth, iou_threshold: f64) -> Result<f64> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Config(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let classes: BTreeSet<u32> = gts.values().flatten().map(|b| b.class_id).collect();
    if classes.is_empty() {
        return Err(Error::NoGroundTruth);
    }
    let total: f64 = classes
        .iter()
        .map(|&c| class_ap(dets, gts, c, iou_threshold))
        .sum();
    Ok(total / classes.len() as f64)
}

fn class_ap(dets: &[Detection], gts: &GroundTruth, class_id: u32, thr: f64) -> f64 {
    let mut order: Vec<&Detection> = dets
        .iter()
        .filter(|d| d.bbox.class_id == class_id)
        .collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score));
    let class_gts: HashMap<&str, Vec<&BBox>> = gts
        .iter()
        .map(|(id, boxes)| {
            (
                id.as_str(),
                boxes.iter().filter(|b| b.class_id == class_id).collect(),
            )
        })
        .collect();
    let npos: usize = class_gts.values().map(Vec::len).sum();
    let mut taken: HashMap<&str, Vec<bool>> = class_gts
        .iter()
        .map(|(k, v)| (*k, vec![false; v.len()]))
        .collect();

    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut recall = Vec::with_capacity(order.len());
    let mut precision = Vec::with_capacity(order.len());
    let start = thr.min(1.0 - 1e-10);
    for d in order {
        let mut matched = false;
        if let (Some(g), Some(used)) = (
            class_gts.get(d.image_id.as_str()),
            taken.get_mut(d.image_id.as_str()),
        ) {
            let mut best = start;
            let mut best_j = None;
            for (j, gt) in g.iter().enumerate() {
                if used[j] {
                    continue;
                }
                let v = iou(&d.bbox, gt);
                if v < best {
                    continue;
                }
                best = v;
                best_j = Some(j);
            }
            if let Some(j) = best_j {
                used[j] = true;
                matched = true;
            }
        }
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        recall.push(tp as f64 / npos as f64);
        precision.push(tp as f64 / (tp + fp) as f64);
    }
    interpolated_ap(&recall, &precision)
}

/// 101-point interpolated AP from a cumulative PR sequence.
pub(crate) fn interpolated_ap(recall: &[f64], precision: &[f64]) -> f64 {
    let mut envelope = precision.to_vec();
    for i in (1..envelope.len()).rev() {
        if envelope[i] > envelope[i - 1] {
            envelope[i - 1] = envelope[i];
        }
    }
    let mut sum = 0.0;
    for k in 0..=100 {
        let r = k as f64 / 100.0;
        let idx = recall.partition_point(|&v| v < r);
        if idx < envelope.len() {
            sum += envelope[idx];
        }
    }
    sum / 101.0
}

pub fn evaluate(dets: &[Detection], gts: &GroundTruth) -> Result<EvalReport> {
    let per_threshold_ap = iou_thresholds()
        .into_iter()
        .map(|t| average_precision(dets, gts, t).map(|ap| (t, ap)))
        .collect::<Result<Vec<_>>>()?;
    let map_50_95 =
        per_threshold_ap.iter().map(|(_, ap)| ap).sum::<f64>() / per_threshold_ap.len() as f64;
    Ok(EvalReport {
        map_50_95,
        map_50: per_threshold_ap[0].1,
        per_threshold_ap,
    })
}

pub fn save_detections(dets: &[Detection], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for d in dets {
        serde_json::to_writer(&mut out, d)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_detections(path: impl AsRef<Path>) -> Result<Vec<Detection>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let loc = format!("{}:{}", path.display(), i + 1);
        let d: Detection =
            serde_json::from_str(&line).map_err(|e| Error::schema(&loc, e.to_string()))?;
        if !(0.0..=1.0).contains(&d.score) || !d.bbox.is_valid() {
            return Err(Error::schema(loc, "score outside [0, 1] or invalid box"));
        }
        out.push(d);
    }
    Ok(out)
}
