use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Detection;

/// Teacher detections of one unlabeled image after thresholding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelSet {
    pub image_id: String,
    /// Detections scoring strictly above `tau_u`.
    pub positives: Vec<Detection>,
    /// Every detection scores strictly below `tau_l` (including no detections at all).
    pub is_reliable_background: bool,
    pub usable: bool,
    /// Detections in `[tau_l, tau_u]`, dropped.
    pub discarded: usize,
    /// Detections strictly below `tau_l`.
    pub below_lower: usize,
}

/// Dual-threshold filter of teacher outputs.
pub fn filter_pseudo_labels(
    image_id: &str,
    dets: &[Detection],
    tau_u: f64,
    tau_l: f64,
) -> Result<PseudoLabelSet> {
    if !(tau_l < tau_u) {
        return Err(Error::Config(format!(
            "tau_l ({tau_l}) must be below tau_u ({tau_u})"
        )));
    }
    let mut positives = Vec::new();
    let mut discarded = 0;
    let mut below_lower = 0;
    for d in dets {
        if d.score > tau_u {
            positives.push(d.clone());
        } else if d.score >= tau_l {
            discarded += 1;
        } else {
            below_lower += 1;
        }
    }
    let is_reliable_background = positives.is_empty() && discarded == 0;
    Ok(PseudoLabelSet {
        image_id: image_id.to_string(),
        usable: !positives.is_empty() || is_reliable_background,
        positives,
        is_reliable_background,
        discarded,
        below_lower,
    })
}

impl PseudoLabelSet {
    /// Usability when background mining may be switched off.
    pub fn usable_with(&self, background_labels: bool) -> bool {
        !self.positives.is_empty() || (background_labels && self.is_reliable_background)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::BBox;

    fn dets(scores: &[f64]) -> Vec<Detection> {
        scores
            .iter()
            .map(|&s| Detection {
                image_id: "u".into(),
                bbox: BBox::new(0, 5.0, 5.0, 2.0, 2.0),
                score: s,
            })
            .collect()
    }

    #[test]
    fn mixed_scores_keep_only_confident_boxes() {
        let p = filter_pseudo_labels("u", &dets(&[0.9, 0.5, 0.03]), 0.8, 0.05).unwrap();
        assert_eq!(p.positives.len(), 1);
        assert_eq!(p.positives[0].score, 0.9);
        assert!(!p.is_reliable_background && p.usable);
        assert_eq!((p.discarded, p.below_lower), (1, 1));
    }

    #[test]
    fn empty_output_is_reliable_background() {
        let p = filter_pseudo_labels("u", &[], 0.8, 0.05).unwrap();
        assert!(p.is_reliable_background && p.usable);
        assert!(!p.usable_with(false));
    }

    #[test]
    fn mid_band_only_is_unusable() {
        let p = filter_pseudo_labels("u", &dets(&[0.5]), 0.8, 0.05).unwrap();
        assert!(p.positives.is_empty() && !p.is_reliable_background && !p.usable);
    }

    #[test]
    fn thresholds_are_strict() {
        let p = filter_pseudo_labels("u", &dets(&[0.8, 0.05]), 0.8, 0.05).unwrap();
        assert!(p.positives.is_empty() && !p.is_reliable_background);
        assert_eq!((p.discarded, p.below_lower), (2, 0));
        let q = filter_pseudo_labels("u", &dets(&[0.049_999]), 0.8, 0.05).unwrap();
        assert!(q.is_reliable_background);
        assert!(filter_pseudo_labels("u", &[], 0.5, 0.5).is_err());
    }
}
