//! Anchor generation, box encoding and non-maximum suppression.
//!
//! Boxes here are plain `[x1, y1, x2, y2]` corner arrays in image pixels.

use super::config::DetectorConfig;
use crate::metrics::iou_corners;

pub type Corners = [f64; 4];

/// Largest log-scale change a decoded delta may apply.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub const RPN_DELTA_WEIGHTS: [f64; 4] = [1.0, 1.0, 1.0, 1.0];
pub const ROI_DELTA_WEIGHTS: [f64; 4] = [10.0, 10.0, 5.0, 5.0];

/// Anchors of one pyramid level, ordered `a · H · W + y · W + x` to match the
/// flattened `[A, H, W]` objectness layout.
pub fn level_anchors(
    cfg: &DetectorConfig,
    level: usize,
    height: usize,
    width: usize,
) -> Vec<Corners> {
    let stride = cfg.strides[level] as f64;
    let mut shapes = Vec::with_capacity(cfg.num_anchors());
    for &s in &cfg.anchor_scales {
        for &r in &cfg.anchor_ratios {
            let base = cfg.anchor_size_factor * stride * s;
            shapes.push((base / r.sqrt(), base * r.sqrt()));
        }
    }
    let mut out = Vec::with_capacity(shapes.len() * height * width);
    for (w, h) in shapes {
        for y in 0..height {
            for x in 0..width {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                out.push([cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]);
            }
        }
    }
    out
}

fn center_size(b: &Corners) -> (f64, f64, f64, f64) {
    let w = b[2] - b[0];
    let h = b[3] - b[1];
    (b[0] + 0.5 * w, b[1] + 0.5 * h, w, h)
}

/// Regression target that moves `reference` onto `target`.
pub fn encode(reference: &Corners, target: &Corners, weights: [f64; 4]) -> [f64; 4] {
    let (rx, ry, rw, rh) = center_size(reference);
    let (tx, ty, tw, th) = center_size(target);
    [
        weights[0] * (tx - rx) / rw,
        weights[1] * (ty - ry) / rh,
        weights[2] * (tw / rw).ln(),
        weights[3] * (th / rh).ln(),
    ]
}

/// Inverse of [`encode`], with the size change clamped.
pub fn decode(reference: &Corners, deltas: [f64; 4], weights: [f64; 4]) -> Corners {
    let (rx, ry, rw, rh) = center_size(reference);
    let dx = deltas[0] / weights[0];
    let dy = deltas[1] / weights[1];
    let dw = (deltas[2] / weights[2]).min(MAX_LOG_SCALE);
    let dh = (deltas[3] / weights[3]).min(MAX_LOG_SCALE);
    let cx = rx + dx * rw;
    let cy = ry + dy * rh;
    let w = rw * dw.exp();
    let h = rh * dh.exp();
    [cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0]
}

pub fn clip(b: &Corners, width: f64, height: f64) -> Corners {
    [
        b[0].clamp(0.0, width),
        b[1].clamp(0.0, height),
        b[2].clamp(0.0, width),
        b[3].clamp(0.0, height),
    ]
}

pub fn side(b: &Corners) -> f64 {
    ((b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0)).sqrt()
}

/// Greedy NMS; returns kept indices in descending score order (ties by index).
pub fn nms(boxes: &[Corners], scores: &[f64], threshold: f64, limit: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.len() >= limit {
            break;
        }
        if keep
            .iter()
            .all(|&k| iou_corners(&boxes[k], &boxes[i]) <= threshold)
        {
            keep.push(i);
        }
    }
    keep
}

/// Pyramid level for pooling a box: boxes of side ~`4 · stride_l` go to level `l`.
pub fn roi_level(b: &Corners, strides: &[usize]) -> usize {
    let s = side(b).max(1e-6);
    let level = ((s / (4.0 * strides[0] as f64)).log2() + 0.5).floor();
    level.clamp(0.0, (strides.len() - 1) as f64) as usize
}
