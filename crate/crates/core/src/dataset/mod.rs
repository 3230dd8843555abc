//! Scene naming, domain splits, labeled-fraction protocols, the merged-box
//! labeling policy, and manifest files.

mod io;
mod merge;
mod scene;
mod split;

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{export_coco, import_coco, load_manifest, save_manifest};
pub use merge::merge_boxes;
pub use scene::{parse_scene_name, SceneMeta};
pub use split::{
    classify_domain, round_half_up_count, sample_protocol, split_train_val, DomainRule,
};

/// Scene directories whose previously published labels form the source domain.
pub const SOURCE_SCENES: [&str; 9] = [
    "20160604_FIRE_rm-n-mobo-c",
    "20160604_FIRE_smer-tcs3-mobo-c",
    "20160619_FIRE_lp-e-iqeye",
    "20160619_FIRE_om-e-mobo-c",
    "20160619_FIRE_pi-s-mobo-c",
    "20160711_FIRE_ml-n-mobo-c",
    "20160718_FIRE_lp-n-iqeye",
    "20160718_FIRE_mg-s-iqeye",
    "20160718_FIRE_mw-e-mobo-c",
];

/// Camera names of the source domain when domains are defined per camera.
pub const SOURCE_CAMERAS: [&str; 9] = [
    "rm-n-mobo-c",
    "smer-tcs3-mobo-c",
    "lp-e-iqeye",
    "om-e-mobo-c",
    "pi-s-mobo-c",
    "ml-n-mobo-c",
    "lp-n-iqeye",
    "mg-s-iqeye",
    "mw-e-mobo-c",
];

/// The labeled-target fractions of the three benchmark protocols.
pub const PROTOCOL_FRACTIONS: [f64; 3] = [0.005, 0.01, 0.03];

/// Ground-truth box in center format: class index, center, width, height (pixels).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub class_id: u32,
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(class_id: u32, cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox {
            class_id,
            cx,
            cy,
            w,
            h,
        }
    }

    pub fn from_corners(class_id: u32, [x1, y1, x2, y2]: [f64; 4]) -> Self {
        BBox {
            class_id,
            cx: (x1 + x2) / 2.0,
            cy: (y1 + y2) / 2.0,
            w: x2 - x1,
            h: y2 - y1,
        }
    }

    /// `[x1, y1, x2, y2]`
    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && [self.cx, self.cy, self.w, self.h]
                .iter()
                .all(|v| v.is_finite())
    }

    /// Clips the box to `[0, width] × [0, height]`; `None` if nothing remains.
    pub fn clamp_to(&self, width: f64, height: f64) -> Option<BBox> {
        let [x1, y1, x2, y2] = self.corners();
        let c = [
            x1.clamp(0.0, width),
            y1.clamp(0.0, height),
            x2.clamp(0.0, width),
            y2.clamp(0.0, height),
        ];
        let b = BBox::from_corners(self.class_id, c);
        b.is_valid().then_some(b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelStatus {
    Labeled,
    Unlabeled,
}

/// One image with its domain, label status and annotations.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub image_id: String,
    pub scene: SceneMeta,
    pub width: u32,
    pub height: u32,
    pub boxes: Vec<BBox>,
    pub domain: Domain,
    pub label_status: LabelStatus,
    /// Ground truth withheld from training on unlabeled records; evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hidden_gt: Option<Vec<BBox>>,
}

impl ImageRecord {
    /// Visible boxes for labeled records, withheld boxes for unlabeled ones.
    pub fn ground_truth(&self) -> &[BBox] {
        match self.label_status {
            LabelStatus::Labeled => &self.boxes,
            LabelStatus::Unlabeled => self.hidden_gt.as_deref().unwrap_or(&[]),
        }
    }

    pub fn is_foreground(&self) -> bool {
        !self.ground_truth().is_empty()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.image_id.is_empty() {
            return Err("empty image_id".into());
        }
        if self.width == 0 || self.height == 0 {
            return Err(format!("{}: zero image size", self.image_id));
        }
        if self.label_status == LabelStatus::Unlabeled && !self.boxes.is_empty() {
            return Err(format!("{}: unlabeled record carries boxes", self.image_id));
        }
        let all = self.boxes.iter().chain(self.hidden_gt.iter().flatten());
        for b in all {
            if !b.is_valid() {
                return Err(format!("{}: invalid box {b:?}", self.image_id));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestCounts {
    pub total: usize,
    pub labeled: usize,
    pub unlabeled: usize,
    pub foreground: usize,
    pub background: usize,
}

/// A collection of records plus the split metadata that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub records: Vec<ImageRecord>,
    pub split_name: String,
    pub seed: u64,
    pub protocol: Option<f64>,
}

impl Manifest {
    /// Builds a manifest, rejecting duplicate ids and invalid records.
    pub fn new(
        records: Vec<ImageRecord>,
        split_name: impl Into<String>,
        seed: u64,
        protocol: Option<f64>,
    ) -> Result<Self> {
        let m = Manifest {
            records,
            split_name: split_name.into(),
            seed,
            protocol,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::with_capacity(self.records.len());
        for (i, r) in self.records.iter().enumerate() {
            r.validate()
                .map_err(|m| Error::schema(format!("record {i}"), m))?;
            if !seen.insert(r.image_id.as_str()) {
                return Err(Error::schema(
                    format!("record {i}"),
                    format!("duplicate image_id {:?}", r.image_id),
                ));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn counts(&self) -> ManifestCounts {
        let mut c = ManifestCounts {
            total: self.records.len(),
            ..Default::default()
        };
        for r in &self.records {
            match r.label_status {
                LabelStatus::Labeled => c.labeled += 1,
                LabelStatus::Unlabeled => c.unlabeled += 1,
            }
            if r.is_foreground() {
                c.foreground += 1;
            } else {
                c.background += 1;
            }
        }
        c
    }

    /// Replaces every record's boxes (visible and withheld) by their merged form.
    pub fn merged(&self) -> Manifest {
        let mut out = self.clone();
        for r in &mut out.records {
            r.boxes = merge_boxes(&r.boxes);
            if let Some(h) = r.hidden_gt.as_mut() {
                *h = merge_boxes(h);
            }
        }
        out
    }
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;

    pub fn record(id: &str, boxes: Vec<BBox>) -> ImageRecord {
        ImageRecord {
            image_id: id.to_string(),
            scene: parse_scene_name("20170711_FIRE_bl-e-mobo-c").unwrap(),
            width: 64,
            height: 64,
            boxes,
            domain: Domain::Target,
            label_status: LabelStatus::Labeled,
            hidden_gt: None,
        }
    }

    pub fn records(n: usize) -> Vec<ImageRecord> {
        (0..n)
            .map(|i| {
                let boxes = if i % 2 == 0 {
                    vec![BBox::new(0, 10.0, 20.0, 4.0, 6.0)]
                } else {
                    vec![]
                };
                record(&format!("img{i:05}"), boxes)
            })
            .collect()
    }
}
