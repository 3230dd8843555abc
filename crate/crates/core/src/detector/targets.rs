//! Training targets and the differentiable loss terms of one batch.
//!
//! All discrete choices of a training step (which anchors and regions are
//! sampled and what they are matched to) are collected in a [`TrainPlan`].
//! Replaying a step with a stored plan makes the loss a smooth function of the
//! parameters, which is what finite-difference checks need.

use rand::seq::index::sample;
use rand::Rng;

use super::boxes::{self, Corners};
use super::discriminator::{discriminate_domain, DomainLogits};
use super::model::{proposals, roi_head, roi_samples, trunk, Proposal};
use super::params::Bound;
use crate::autograd::{Graph, Var};
use crate::dataset::{BBox, Domain};
use crate::error::{Error, Result};
use crate::metrics::iou_corners;
use crate::tensor::Tensor;

/// Smooth-L1 transition point used by both box regressors.
pub const SMOOTH_L1_BETA: f64 = 1.0 / 9.0;

/// What an image contributes to the detection loss.
#[derive(Clone, Debug, PartialEq)]
pub enum Supervision {
    /// Fully annotated; an empty list is a background image.
    Boxes(Vec<BBox>),
    /// No detection loss (the image still feeds domain terms).
    None,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSample {
    pub level: usize,
    /// Index into the level's `[A, H, W]` layout.
    pub index: usize,
    pub positive: bool,
    pub deltas: [f64; 4],
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoiTarget {
    pub bbox: Corners,
    /// 0 is background; `c + 1` is class `c`.
    pub label: usize,
    /// Regression target for foreground regions.
    pub deltas: Option<[f64; 4]>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePlan {
    pub supervised: bool,
    pub anchors: Vec<AnchorSample>,
    pub rois: Vec<RoiTarget>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub images: Vec<ImagePlan>,
}

fn sample_sorted<R: Rng>(rng: &mut R, pool: &[usize], k: usize) -> Vec<usize> {
    let k = k.min(pool.len());
    let mut picked: Vec<usize> = sample(rng, pool.len(), k)
        .into_iter()
        .map(|i| pool[i])
        .collect();
    picked.sort_unstable();
    picked
}

fn best_match(b: &Corners, gts: &[Corners]) -> (f64, usize) {
    gts.iter()
        .enumerate()
        .map(|(j, g)| (iou_corners(b, g), j))
        .fold(
            (0.0, usize::MAX),
            |acc, x| if x.0 > acc.0 { x } else { acc },
        )
}

fn plan_anchors<R: Rng>(
    cfg: &super::DetectorConfig,
    anchors: &[Vec<Corners>],
    gts: &[Corners],
    rng: &mut R,
) -> Vec<AnchorSample> {
    let flat: Vec<(usize, usize, &Corners)> = anchors
        .iter()
        .enumerate()
        .flat_map(|(l, v)| v.iter().enumerate().map(move |(i, a)| (l, i, a)))
        .collect();
    let matches: Vec<(f64, usize)> = flat.iter().map(|(_, _, a)| best_match(a, gts)).collect();
    let mut positive = vec![false; flat.len()];
    for (k, &(v, _)) in matches.iter().enumerate() {
        positive[k] = v >= cfg.rpn_fg_iou;
    }
    // every ground-truth box keeps its best anchors, even below the threshold
    let mut forced: Vec<Option<usize>> = vec![None; flat.len()];
    for (j, g) in gts.iter().enumerate() {
        let ious: Vec<f64> = flat.iter().map(|(_, _, a)| iou_corners(a, g)).collect();
        let best = ious.iter().cloned().fold(0.0, f64::max);
        if best > 0.0 {
            for (k, &v) in ious.iter().enumerate() {
                if v == best {
                    positive[k] = true;
                    forced[k].get_or_insert(j);
                }
            }
        }
    }
    let pos: Vec<usize> = (0..flat.len()).filter(|&k| positive[k]).collect();
    let neg: Vec<usize> = (0..flat.len())
        .filter(|&k| !positive[k] && matches[k].0 < cfg.rpn_bg_iou)
        .collect();
    let cap = (cfg.rpn_batch_per_image as f64 * cfg.rpn_positive_fraction) as usize;
    let pos = sample_sorted(rng, &pos, cap);
    let neg = sample_sorted(rng, &neg, cfg.rpn_batch_per_image - pos.len());
    let mut out: Vec<AnchorSample> = Vec::with_capacity(pos.len() + neg.len());
    for k in pos {
        let (l, i, a) = flat[k];
        let j = if matches[k].0 >= cfg.rpn_fg_iou {
            matches[k].1
        } else {
            forced[k].unwrap_or(matches[k].1)
        };
        out.push(AnchorSample {
            level: l,
            index: i,
            positive: true,
            deltas: boxes::encode(a, &gts[j], boxes::RPN_DELTA_WEIGHTS),
        });
    }
    for k in neg {
        let (l, i, _) = flat[k];
        out.push(AnchorSample {
            level: l,
            index: i,
            positive: false,
            deltas: [0.0; 4],
        });
    }
    out
}

fn plan_rois<R: Rng>(
    cfg: &super::DetectorConfig,
    props: &[Proposal],
    gt: &[BBox],
    rng: &mut R,
) -> Vec<RoiTarget> {
    let gts: Vec<Corners> = gt.iter().map(BBox::corners).collect();
    let cands: Vec<Corners> = props
        .iter()
        .map(|p| p.bbox)
        .chain(gts.iter().copied())
        .collect();
    let matches: Vec<(f64, usize)> = cands.iter().map(|c| best_match(c, &gts)).collect();
    let fg: Vec<usize> = (0..cands.len())
        .filter(|&k| matches[k].0 >= cfg.roi_fg_iou)
        .collect();
    let bg: Vec<usize> = (0..cands.len())
        .filter(|&k| matches[k].0 < cfg.roi_fg_iou)
        .collect();
    let cap = (cfg.roi_batch_per_image as f64 * cfg.roi_positive_fraction) as usize;
    let fg = sample_sorted(rng, &fg, cap);
    let bg = sample_sorted(rng, &bg, cfg.roi_batch_per_image - fg.len());
    let mut out = Vec::with_capacity(fg.len() + bg.len());
    for k in fg {
        let j = matches[k].1;
        out.push(RoiTarget {
            bbox: cands[k],
            label: gt[j].class_id as usize + 1,
            deltas: Some(boxes::encode(&cands[k], &gts[j], boxes::ROI_DELTA_WEIGHTS)),
        });
    }
    for k in bg {
        out.push(RoiTarget {
            bbox: cands[k],
            label: 0,
            deltas: None,
        });
    }
    out
}

/// Samples anchors and regions for every image.
pub fn build_plan<R: Rng>(
    cfg: &super::DetectorConfig,
    anchors: &[Vec<Corners>],
    props: &[Vec<Proposal>],
    supervision: &[Supervision],
    rng: &mut R,
) -> TrainPlan {
    let images = props
        .iter()
        .zip(supervision)
        .map(|(p, s)| match s {
            Supervision::Boxes(gt) => {
                let gts: Vec<Corners> = gt.iter().map(BBox::corners).collect();
                ImagePlan {
                    supervised: true,
                    anchors: plan_anchors(cfg, anchors, &gts, rng),
                    rois: plan_rois(cfg, p, gt, rng),
                }
            }
            Supervision::None => ImagePlan {
                supervised: false,
                anchors: Vec::new(),
                rois: p
                    .iter()
                    .take(cfg.roi_batch_per_image)
                    .map(|q| RoiTarget {
                        bbox: q.bbox,
                        label: 0,
                        deltas: None,
                    })
                    .collect(),
            },
        })
        .collect();
    TrainPlan { images }
}

/// What a batch should produce besides the detection losses.
#[derive(Clone, Debug)]
pub struct BatchRequest<'a> {
    pub supervision: &'a [Supervision],
    /// Detection-loss group of each image; the loss of image `i` is added to
    /// `det_sums[group[i]]`.
    pub group: &'a [usize],
    pub n_groups: usize,
    /// When present, adversarial and consistency terms are built with these
    /// domain labels (source 0, target 1).
    pub domains: Option<&'a [Domain]>,
    pub reversal: f64,
}

/// Summed loss nodes of one batch.
#[derive(Debug)]
pub struct BatchTerms {
    /// Per group: the sum over its images of the per-image detection loss.
    pub det_sums: Vec<Option<Var>>,
    /// Sums over images of the image-level and instance-level adversarial losses.
    pub adv_img: Option<Var>,
    pub adv_ins: Option<Var>,
    /// Sums over images of the image-level and instance-level consistency losses.
    pub cons_img: Option<Var>,
    pub cons_ins: Option<Var>,
    /// Discriminator outputs the alignment terms were built from.
    pub domain_logits: Option<DomainLogits>,
    /// Image index of every row of `domain_logits.ins`.
    pub roi_image: Vec<usize>,
    pub plan: TrainPlan,
}

fn add_terms(g: &mut Graph, parts: &[Var]) -> Result<Option<Var>> {
    if parts.is_empty() {
        return Ok(None);
    }
    let terms: Vec<(Var, f64)> = parts.iter().map(|&v| (v, 1.0)).collect();
    g.combine(&terms).map(Some)
}

/// Builds every loss node of a batch.
///
/// Per-image detection loss: RPN objectness BCE and box smooth-L1 over the
/// sampled anchors, plus ROI cross-entropy and box smooth-L1 over the sampled
/// regions, each divided by that image's sample count. When `plan` is `None`
/// a fresh plan is drawn from the current proposals with `rng`.
pub fn batch_terms<R: Rng>(
    g: &mut Graph,
    p: &Bound,
    images: Var,
    req: &BatchRequest,
    plan: Option<TrainPlan>,
    rng: &mut R,
) -> Result<BatchTerms> {
    let cfg = p.config().clone();
    let n = g.value(images).dims4().0;
    if req.supervision.len() != n
        || req.group.len() != n
        || req.domains.is_some_and(|d| d.len() != n)
    {
        return Err(Error::Shape(format!(
            "batch of {n} images needs one entry per image"
        )));
    }
    if req.group.iter().any(|&k| k >= req.n_groups) {
        return Err(Error::Shape("loss group out of range".into()));
    }
    let t = trunk(g, p, images)?;
    let anchors: Vec<Vec<Corners>> = t
        .rpn_logits
        .iter()
        .enumerate()
        .map(|(l, &v)| {
            let (_, _, h, w) = g.value(v).dims4();
            boxes::level_anchors(&cfg, l, h, w)
        })
        .collect();
    let plan = match plan {
        Some(pl) => {
            if pl.images.len() != n {
                return Err(Error::Shape("plan does not match the batch".into()));
            }
            pl
        }
        None => {
            let props = proposals(g, &cfg, &t);
            build_plan(&cfg, &anchors, &props, req.supervision, rng)
        }
    };

    // RPN terms, one weighted reduction per (level, group).
    let a = cfg.num_anchors();
    let mut det_parts: Vec<Vec<Var>> = vec![Vec::new(); req.n_groups];
    for l in 0..cfg.strides.len() {
        let shape = g.shape(t.rpn_logits[l]).to_vec();
        let hw = shape[2] * shape[3];
        let per_img = a * hw;
        for grp in 0..req.n_groups {
            let mut targets = Tensor::zeros(&shape);
            let mut weights = Tensor::zeros(&shape);
            let dshape = g.shape(t.rpn_deltas[l]).to_vec();
            let mut dtargets = Tensor::zeros(&dshape);
            let mut dweights = Tensor::zeros(&dshape);
            let mut any = false;
            let mut any_pos = false;
            for (i, ip) in plan.images.iter().enumerate() {
                if req.group[i] != grp || !ip.supervised || ip.anchors.is_empty() {
                    continue;
                }
                let norm = 1.0 / ip.anchors.len() as f64;
                for s in ip.anchors.iter().filter(|s| s.level == l) {
                    any = true;
                    let off = i * per_img + s.index;
                    targets.data_mut()[off] = if s.positive { 1.0 } else { 0.0 };
                    weights.data_mut()[off] = norm;
                    if s.positive {
                        any_pos = true;
                        let (ai, pos) = (s.index / hw, s.index % hw);
                        for k in 0..4 {
                            let doff = i * 4 * per_img + (ai * 4 + k) * hw + pos;
                            dtargets.data_mut()[doff] = s.deltas[k];
                            dweights.data_mut()[doff] = norm;
                        }
                    }
                }
            }
            if any {
                det_parts[grp].push(g.bce_with_logits(t.rpn_logits[l], targets, weights)?);
            }
            if any_pos {
                det_parts[grp].push(g.smooth_l1(
                    t.rpn_deltas[l],
                    dtargets,
                    dweights,
                    SMOOTH_L1_BETA,
                )?);
            }
        }
    }

    // ROI stage over the concatenated regions of all images.
    let roi_boxes: Vec<Vec<Corners>> = plan
        .images
        .iter()
        .map(|ip| ip.rois.iter().map(|r| r.bbox).collect())
        .collect();
    let rois = roi_samples(&cfg, &roi_boxes);
    let row_image: Vec<usize> = rois.iter().map(|r| r.batch).collect();
    let mut adv_img = None;
    let mut adv_ins = None;
    let mut cons_img = None;
    let mut cons_ins = None;
    let mut domain_logits = None;
    let mut pooled = None;
    if !rois.is_empty() {
        let (flat, cls, deltas) = roi_head(g, p, &t.levels, &rois)?;
        pooled = Some(flat);
        let labels: Vec<usize> = plan
            .images
            .iter()
            .flat_map(|ip| ip.rois.iter().map(|r| r.label))
            .collect();
        let targets: Vec<Option<[f64; 4]>> = plan
            .images
            .iter()
            .flat_map(|ip| ip.rois.iter().map(|r| r.deltas))
            .collect();
        for grp in 0..req.n_groups {
            let mut w = vec![0.0; rois.len()];
            let mut dt = Tensor::zeros(&[rois.len(), 4]);
            let mut dw = Tensor::zeros(&[rois.len(), 4]);
            let mut any_fg = false;
            for (r, &i) in row_image.iter().enumerate() {
                let ip = &plan.images[i];
                if req.group[i] != grp || !ip.supervised {
                    continue;
                }
                let norm = 1.0 / ip.rois.len() as f64;
                w[r] = norm;
                if let Some(d) = targets[r] {
                    any_fg = true;
                    dt.data_mut()[r * 4..r * 4 + 4].copy_from_slice(&d);
                    dw.data_mut()[r * 4..r * 4 + 4]
                        .iter_mut()
                        .for_each(|v| *v = norm);
                }
            }
            if w.iter().any(|&v| v != 0.0) {
                det_parts[grp].push(g.softmax_cross_entropy(cls, labels.clone(), w)?);
            }
            if any_fg {
                det_parts[grp].push(g.smooth_l1(deltas, dt, dw, SMOOTH_L1_BETA)?);
            }
        }
    }
    let det_sums = det_parts
        .iter()
        .map(|parts| add_terms(g, parts))
        .collect::<Result<Vec<_>>>()?;

    if let (Some(domains), Some(pooled)) = (req.domains, pooled) {
        let label = |d: Domain| if d == Domain::Target { 1.0 } else { 0.0 };
        let logits = discriminate_domain(g, p, &t.levels, pooled, req.reversal)?;

        let mut img_parts = Vec::new();
        let mut means = Vec::new();
        for map in [logits.img_low, logits.img_high] {
            let (_, _, h, w) = g.value(map).dims4();
            let plane = h * w;
            let targets: Vec<f64> = domains
                .iter()
                .flat_map(|&d| std::iter::repeat_n(label(d), plane))
                .collect();
            let targets = Tensor::new(g.shape(map), targets)?;
            let weights = Tensor::full(g.shape(map), 0.5 / plane as f64);
            img_parts.push(g.bce_with_logits(map, targets, weights)?);
            means.push(g.spatial_mean(map));
        }
        adv_img = add_terms(g, &img_parts)?;

        let r = row_image.len();
        let mut counts = vec![0usize; n];
        for &i in &row_image {
            counts[i] += 1;
        }
        let row_w: Vec<f64> = row_image.iter().map(|&i| 1.0 / counts[i] as f64).collect();
        let targets: Vec<f64> = row_image.iter().map(|&i| label(domains[i])).collect();
        adv_ins = Some(g.bce_with_logits(
            logits.ins,
            Tensor::new(&[r, 1], targets)?,
            Tensor::new(&[r, 1], row_w)?,
        )?);

        let mut ci = Vec::with_capacity(n);
        let mut cr = Vec::new();
        for i in 0..n {
            let mut onehot = Tensor::zeros(&[n, 1]);
            onehot.data_mut()[i] = 1.0;
            let lo = g.weighted_sum(means[0], onehot.clone())?;
            let hi = g.weighted_sum(means[1], onehot)?;
            let d = g.combine(&[(lo, 1.0), (hi, -1.0)])?;
            ci.push(g.square(d));
            if counts[i] > 0 {
                let avg = g.combine(&[(lo, 0.5), (hi, 0.5)])?;
                let diff = g.sub_scalar(logits.ins, avg)?;
                let sq = g.square(diff);
                let w: Vec<f64> = row_image
                    .iter()
                    .map(|&j| if j == i { 1.0 / counts[i] as f64 } else { 0.0 })
                    .collect();
                cr.push(g.weighted_sum(sq, Tensor::new(&[r, 1], w)?)?);
            }
        }
        cons_img = add_terms(g, &ci)?;
        cons_ins = add_terms(g, &cr)?;
        domain_logits = Some(logits);
    }

    Ok(BatchTerms {
        det_sums,
        adv_img,
        adv_ins,
        cons_img,
        cons_ins,
        domain_logits,
        roi_image: row_image,
        plan,
    })
}
