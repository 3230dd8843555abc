use serde::{Deserialize, Serialize};

use super::boxes::{self, Corners};
use super::config::DetectorConfig;
use super::coord::{coord_conv, CoordMode};
use super::params::{Bound, DetectorParams};
use crate::autograd::{sigmoid, Graph, RoiSample, Var};
use crate::dataset::BBox;
use crate::error::{Error, Result};
use crate::metrics::Detection;
use crate::tensor::Tensor;

/// Pyramid feature maps in ascending stride order.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
    pub strides: Vec<usize>,
}

/// A region proposal with its objectness probability.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Proposal {
    pub bbox: Corners,
    pub score: f64,
}

/// A predicted box with a class score in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub bbox: BBox,
    pub score: f64,
}

impl ScoredBox {
    pub fn to_detection(&self, image_id: &str) -> Detection {
        Detection {
            image_id: image_id.to_string(),
            bbox: self.bbox,
            score: self.score,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DetectorOutput {
    /// Per image.
    pub proposals: Vec<Vec<Proposal>>,
    /// Per image, in descending score order.
    pub detections: Vec<Vec<ScoredBox>>,
    pub features: FeaturePyramid,
}

/// Graph nodes of the backbone, pyramid and proposal head.
pub(crate) struct Trunk {
    pub levels: Vec<Var>,
    pub rpn_logits: Vec<Var>,
    pub rpn_deltas: Vec<Var>,
    pub image_hw: (usize, usize),
}

/// Checks an `[N, C, H, W]` image batch against the config.
pub fn check_images(cfg: &DetectorConfig, images: &Tensor) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::Shape(format!(
            "expected a non-empty [N, C, H, W] batch, got {s:?}"
        )));
    }
    if s[1] != cfg.in_channels {
        return Err(Error::Shape(format!(
            "expected {} channels, got {}",
            cfg.in_channels, s[1]
        )));
    }
    let top = cfg.top_stride();
    if s[2] == 0 || s[3] == 0 || !s[2].is_multiple_of(top) || !s[3].is_multiple_of(top) {
        return Err(Error::Shape(format!(
            "image size {}×{} is not a positive multiple of stride {top}",
            s[2], s[3]
        )));
    }
    Ok(())
}

fn mode(cfg: &DetectorConfig, placed: bool) -> CoordMode {
    match (placed, cfg.coord_channels) {
        (false, _) => CoordMode::Off,
        (true, true) => CoordMode::Active,
        (true, false) => CoordMode::Zeroed,
    }
}

fn conv(
    g: &mut Graph,
    p: &Bound,
    name: &str,
    x: Var,
    stride: usize,
    pad: usize,
    m: CoordMode,
) -> Result<Var> {
    let w = p.var(&format!("{name}.weight"));
    let b = p.var(&format!("{name}.bias"));
    coord_conv(g, x, w, Some(b), stride, pad, m)
}

pub(crate) fn trunk(g: &mut Graph, p: &Bound, images: Var) -> Result<Trunk> {
    let cfg = p.config().clone();
    let (_, _, h, w) = g.value(images).dims4();
    let off = CoordMode::Off;

    let mut c = images;
    let mut stages = Vec::with_capacity(cfg.strides.len());
    for s in 0..cfg.strides[0].trailing_zeros() as usize {
        c = conv(g, p, &format!("backbone.0.down{s}"), c, 2, 1, off)?;
        c = g.relu(c);
    }
    c = conv(g, p, "backbone.0.refine", c, 1, 1, off)?;
    c = g.relu(c);
    stages.push(c);
    for l in 1..cfg.strides.len() {
        c = conv(g, p, &format!("backbone.{l}.down0"), c, 2, 1, off)?;
        c = g.relu(c);
        c = conv(g, p, &format!("backbone.{l}.refine"), c, 1, 1, off)?;
        c = g.relu(c);
        stages.push(c);
    }

    let lat_mode = mode(&cfg, cfg.coord_placement.fpn_lateral);
    let out_mode = mode(&cfg, cfg.coord_placement.fpn_output);
    let rpn_mode = mode(&cfg, cfg.coord_placement.rpn_head);
    let n = stages.len();
    let mut merged: Vec<Var> = Vec::with_capacity(n);
    let mut above: Option<Var> = None;
    for l in (0..n).rev() {
        let mut m = conv(g, p, &format!("fpn.lateral.{l}"), stages[l], 1, 0, lat_mode)?;
        if let Some(up) = above {
            let up = g.upsample2x(up);
            m = g.add(m, up)?;
        }
        above = Some(m);
        merged.push(m);
    }
    merged.reverse();
    let mut levels = Vec::with_capacity(n);
    let mut rpn_logits = Vec::with_capacity(n);
    let mut rpn_deltas = Vec::with_capacity(n);
    for (l, &m) in merged.iter().enumerate() {
        let f = conv(g, p, &format!("fpn.output.{l}"), m, 1, 1, out_mode)?;
        let t = conv(g, p, "rpn.conv", f, 1, 1, rpn_mode)?;
        let t = g.relu(t);
        rpn_logits.push(conv(g, p, "rpn.objectness", t, 1, 0, off)?);
        rpn_deltas.push(conv(g, p, "rpn.deltas", t, 1, 0, off)?);
        levels.push(f);
    }
    Ok(Trunk {
        levels,
        rpn_logits,
        rpn_deltas,
        image_hw: (h, w),
    })
}

/// Decoded, clipped and suppressed proposals for every image of the batch.
pub(crate) fn proposals(g: &Graph, cfg: &DetectorConfig, t: &Trunk) -> Vec<Vec<Proposal>> {
    let (ih, iw) = t.image_hw;
    let n = g.value(t.levels[0]).dims4().0;
    let a = cfg.num_anchors();
    let mut out = vec![Vec::new(); n];
    let level_anchors: Vec<Vec<Corners>> = t
        .rpn_logits
        .iter()
        .enumerate()
        .map(|(l, &v)| {
            let (_, _, h, w) = g.value(v).dims4();
            boxes::level_anchors(cfg, l, h, w)
        })
        .collect();
    for (i, props) in out.iter_mut().enumerate() {
        let mut cand: Vec<Corners> = Vec::new();
        let mut scores: Vec<f64> = Vec::new();
        for (l, anchors) in level_anchors.iter().enumerate() {
            let (_, _, h, w) = g.value(t.rpn_logits[l]).dims4();
            let hw = h * w;
            let logits = &g.value(t.rpn_logits[l]).data()[i * a * hw..(i + 1) * a * hw];
            let deltas = &g.value(t.rpn_deltas[l]).data()[i * 4 * a * hw..(i + 1) * 4 * a * hw];
            let mut order: Vec<usize> = (0..logits.len()).collect();
            order.sort_by(|&x, &y| logits[y].total_cmp(&logits[x]).then(x.cmp(&y)));
            order.truncate(cfg.rpn_pre_nms_top_n);
            for j in order {
                let (ai, pos) = (j / hw, j % hw);
                let d = [0, 1, 2, 3].map(|k| deltas[(ai * 4 + k) * hw + pos]);
                let b = boxes::clip(
                    &boxes::decode(&anchors[j], d, boxes::RPN_DELTA_WEIGHTS),
                    iw as f64,
                    ih as f64,
                );
                if b[2] - b[0] > 1e-3 && b[3] - b[1] > 1e-3 {
                    cand.push(b);
                    scores.push(sigmoid(logits[j]));
                }
            }
        }
        let keep = boxes::nms(
            &cand,
            &scores,
            cfg.rpn_nms_threshold,
            cfg.rpn_post_nms_top_n,
        );
        *props = keep
            .into_iter()
            .map(|k| Proposal {
                bbox: cand[k],
                score: scores[k],
            })
            .collect();
    }
    out
}

pub(crate) fn roi_samples(cfg: &DetectorConfig, per_image: &[Vec<Corners>]) -> Vec<RoiSample> {
    per_image
        .iter()
        .enumerate()
        .flat_map(|(i, rois)| {
            rois.iter().map(move |b| RoiSample {
                batch: i,
                level: boxes::roi_level(b, &cfg.strides),
                bbox: *b,
            })
        })
        .collect()
}

/// Pooled ROI features `[R, C·P·P]` and the ROI head outputs `(cls [R, K+1], deltas [R, 4])`.
pub(crate) fn roi_head(
    g: &mut Graph,
    p: &Bound,
    levels: &[Var],
    rois: &[RoiSample],
) -> Result<(Var, Var, Var)> {
    let cfg = p.config();
    let strides: Vec<f64> = cfg.strides.iter().map(|&s| s as f64).collect();
    let pooled = g.roi_align(levels, &strides, rois, cfg.roi_pool, cfg.roi_sampling)?;
    let flat_len = cfg.fpn_channels * cfg.roi_pool * cfg.roi_pool;
    let flat = g.reshape(pooled, &[rois.len(), flat_len])?;
    let hid = g.linear(flat, p.var("roi.fc.weight"), Some(p.var("roi.fc.bias")))?;
    let hid = g.relu(hid);
    let cls = g.linear(hid, p.var("roi.cls.weight"), Some(p.var("roi.cls.bias")))?;
    let deltas = g.linear(hid, p.var("roi.bbox.weight"), Some(p.var("roi.bbox.bias")))?;
    Ok((flat, cls, deltas))
}

/// Softmax scores, class-wise NMS and the per-image detection cap.
pub(crate) fn postprocess(
    cfg: &DetectorConfig,
    rois: &[RoiSample],
    cls: &Tensor,
    deltas: &Tensor,
    n_images: usize,
    image_hw: (usize, usize),
) -> Vec<Vec<ScoredBox>> {
    let k1 = cfg.num_classes + 1;
    let (ih, iw) = image_hw;
    let mut per_image: Vec<Vec<(usize, Corners, f64)>> = vec![Vec::new(); n_images];
    for (r, roi) in rois.iter().enumerate() {
        let row = &cls.data()[r * k1..(r + 1) * k1];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
        let d: [f64; 4] = deltas.data()[r * 4..r * 4 + 4]
            .try_into()
            .expect("four deltas");
        let b = boxes::clip(
            &boxes::decode(&roi.bbox, d, boxes::ROI_DELTA_WEIGHTS),
            iw as f64,
            ih as f64,
        );
        if b[2] - b[0] <= 1e-3 || b[3] - b[1] <= 1e-3 {
            continue;
        }
        for (k, &v) in row.iter().enumerate().skip(1) {
            let score = ((v - m).exp() / z).clamp(0.0, 1.0);
            if score > cfg.det_score_threshold {
                per_image[roi.batch].push((k - 1, b, score));
            }
        }
    }
    per_image
        .into_iter()
        .map(|cands| {
            let mut kept: Vec<(usize, Corners, f64)> = Vec::new();
            for class in 0..cfg.num_classes {
                let of: Vec<&(usize, Corners, f64)> =
                    cands.iter().filter(|c| c.0 == class).collect();
                let bx: Vec<Corners> = of.iter().map(|c| c.1).collect();
                let sc: Vec<f64> = of.iter().map(|c| c.2).collect();
                for k in boxes::nms(&bx, &sc, cfg.det_nms_threshold, cfg.det_max_per_image) {
                    kept.push(*of[k]);
                }
            }
            kept.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
            kept.truncate(cfg.det_max_per_image);
            kept.into_iter()
                .map(|(class, b, score)| ScoredBox {
                    bbox: BBox::from_corners(class as u32, b),
                    score,
                })
                .collect()
        })
        .collect()
}

/// Inference pass: proposals, final detections and pyramid features.
pub fn forward_detector(params: &DetectorParams, images: &Tensor) -> Result<DetectorOutput> {
    let cfg = params.config();
    check_images(cfg, images)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let t = trunk(&mut g, &p, x)?;
    let n = images.shape()[0];
    let props = proposals(&g, cfg, &t);
    let boxes_only: Vec<Vec<Corners>> = props
        .iter()
        .map(|v| v.iter().map(|p| p.bbox).collect())
        .collect();
    let rois = roi_samples(cfg, &boxes_only);
    let detections = if rois.is_empty() {
        vec![Vec::new(); n]
    } else {
        let (_, cls, deltas) = roi_head(&mut g, &p, &t.levels, &rois)?;
        postprocess(cfg, &rois, g.value(cls), g.value(deltas), n, t.image_hw)
    };
    let features = FeaturePyramid {
        levels: t.levels.iter().map(|&v| g.value(v).clone()).collect(),
        strides: cfg.strides.clone(),
    };
    Ok(DetectorOutput {
        proposals: props,
        detections,
        features,
    })
}

/// Raw RPN objectness logits per level, `[N, A, H, W]`.
pub fn objectness_maps(params: &DetectorParams, images: &Tensor) -> Result<Vec<Tensor>> {
    check_images(params.config(), images)?;
    let mut g = Graph::new();
    let p = params.bind(&mut g, false);
    let x = g.constant(images.clone());
    let t = trunk(&mut g, &p, x)?;
    Ok(t.rpn_logits.iter().map(|&v| g.value(v).clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_images(n: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::new(
            &[n, c, h, w],
            (0..n * c * h * w)
                .map(|_| rng.gen_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn pyramid_sizes_halve_per_level() {
        let mut cfg = DetectorConfig::toy();
        cfg.backbone_widths = vec![2, 2, 2, 2];
        cfg.fpn_channels = 2;
        cfg.rpn_pre_nms_top_n = 8;
        let p = DetectorParams::init(cfg, 0).unwrap();
        let out = forward_detector(&p, &random_images(1, 3, 256, 256, 1)).unwrap();
        let sizes: Vec<_> = out
            .features
            .levels
            .iter()
            .map(|t| t.shape().to_vec())
            .collect();
        assert_eq!(
            sizes,
            vec![
                vec![1, 2, 64, 64],
                vec![1, 2, 32, 32],
                vec![1, 2, 16, 16],
                vec![1, 2, 8, 8]
            ]
        );
    }

    #[test]
    fn batch_of_two_and_finite_outputs() {
        let p = DetectorParams::init(DetectorConfig::toy(), 0).unwrap();
        let out = forward_detector(&p, &random_images(2, 3, 64, 64, 2)).unwrap();
        assert_eq!(out.proposals.len(), 2);
        assert_eq!(out.detections.len(), 2);
        assert!(out
            .features
            .levels
            .iter()
            .all(|t| t.shape()[0] == 2 && t.is_finite()));
        for d in out.detections.iter().flatten() {
            assert!((0.0..=1.0).contains(&d.score) && d.bbox.is_valid());
        }
        assert!(out.proposals.iter().all(|p| p.len() <= 32 && !p.is_empty()));
    }

    #[test]
    fn inference_is_bit_identical_across_calls() {
        let p = DetectorParams::init(DetectorConfig::toy(), 4).unwrap();
        let x = random_images(1, 3, 64, 64, 5);
        let a = forward_detector(&p, &x).unwrap();
        let b = forward_detector(&p, &x).unwrap();
        assert_eq!(a.detections, b.detections);
        assert_eq!(a.proposals, b.proposals);
        assert_eq!(a.features, b.features);
    }

    #[test]
    fn rejects_sizes_not_divisible_by_top_stride() {
        let p = DetectorParams::init(DetectorConfig::toy(), 0).unwrap();
        assert!(matches!(
            forward_detector(&p, &random_images(1, 3, 60, 64, 0)),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            forward_detector(&p, &random_images(1, 1, 64, 64, 0)),
            Err(Error::Shape(_))
        ));
    }

    /// Places a random patch at `(oy, ox)` in an otherwise empty image, far
    /// enough from the border that no receptive field reaches the padding.
    fn patch_image(oy: usize, ox: usize) -> Tensor {
        const S: usize = 128;
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tensor::zeros(&[1, 3, S, S]);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    t.data_mut()[(c * S + oy + y) * S + ox + x] = rng.gen_range(-1.0..1.0);
                }
            }
        }
        t
    }

    fn shift_gap(params: &DetectorParams) -> f64 {
        let a = objectness_maps(params, &patch_image(56, 56)).unwrap();
        let b = objectness_maps(params, &patch_image(56, 64)).unwrap();
        let mut worst = 0.0f64;
        for (l, (ta, tb)) in a.iter().zip(&b).enumerate() {
            let (_, na, h, w) = ta.dims4();
            let shift = 8 / params.config().strides[l];
            for c in 0..na {
                for y in 0..h {
                    for x in 0..w - shift {
                        let va = ta.data()[(c * h + y) * w + x];
                        let vb = tb.data()[(c * h + y) * w + x + shift];
                        worst = worst.max((va - vb).abs());
                    }
                }
            }
        }
        worst
    }

    #[test]
    fn zeroed_coordinates_keep_objectness_shift_equivariant() {
        let mut cfg = DetectorConfig::miniature();
        cfg.coord_channels = false;
        let p = DetectorParams::init(cfg, 3).unwrap();
        assert!(shift_gap(&p) < 1e-12);
    }

    #[test]
    fn active_coordinates_break_shift_equivariance() {
        let p = DetectorParams::init(DetectorConfig::miniature(), 3).unwrap();
        assert!(shift_gap(&p) > 1e-6);
    }
}
