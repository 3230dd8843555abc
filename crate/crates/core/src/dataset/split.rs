use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Domain, ImageRecord, LabelStatus, Manifest, SceneMeta};
use crate::error::{Error, Result};

/// How a scene is assigned to the source domain.
#[derive(Clone, Debug)]
pub enum DomainRule {
    /// Match the full directory name.
    SceneName(HashSet<String>),
    /// Match only the camera name.
    CameraName(HashSet<String>),
}

impl DomainRule {
    pub fn scenes<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        DomainRule::SceneName(names.into_iter().map(Into::into).collect())
    }

    pub fn cameras<I: IntoIterator<Item = S>, S: Into<String>>(names: I) -> Self {
        DomainRule::CameraName(names.into_iter().map(Into::into).collect())
    }

    fn is_empty(&self) -> bool {
        match self {
            DomainRule::SceneName(s) | DomainRule::CameraName(s) => s.is_empty(),
        }
    }
}

pub fn classify_domain(meta: &SceneMeta, rule: &DomainRule) -> Result<Domain> {
    if rule.is_empty() {
        return Err(Error::Config("source scene set is empty".into()));
    }
    let hit = match rule {
        DomainRule::SceneName(s) => s.contains(&meta.raw),
        DomainRule::CameraName(s) => s.contains(&meta.camera_name),
    };
    Ok(if hit { Domain::Source } else { Domain::Target })
}

/// `round(fraction · n)` with halves rounded up, exact for fractions with at
/// most six decimal places.
pub fn round_half_up_count(fraction: f64, n: usize) -> usize {
    let ppm = (fraction * 1e6).round() as u128;
    ((ppm * n as u128 + 500_000) / 1_000_000) as usize
}

fn shuffled_indices(n: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx
}

/// Splits `records` into `(chosen, rest)` where `chosen` holds `count`
/// uniformly drawn records. Both halves keep input order.
fn draw(records: &[ImageRecord], count: usize, seed: u64) -> (Vec<ImageRecord>, Vec<ImageRecord>) {
    let mut pick = vec![false; records.len()];
    for &i in shuffled_indices(records.len(), seed).iter().take(count) {
        pick[i] = true;
    }
    let mut chosen = Vec::with_capacity(count);
    let mut rest = Vec::with_capacity(records.len() - count);
    for (r, p) in records.iter().zip(pick) {
        if p {
            chosen.push(r.clone());
        } else {
            rest.push(r.clone());
        }
    }
    (chosen, rest)
}

/// Random train/validation partition with `round(val_fraction · n)` validation records.
pub fn split_train_val(
    records: &[ImageRecord],
    val_fraction: f64,
    seed: u64,
) -> Result<(Manifest, Manifest)> {
    if records.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config(format!(
            "val_fraction must lie in (0, 1), got {val_fraction}"
        )));
    }
    let n_val = round_half_up_count(val_fraction, records.len());
    let (val, train) = draw(records, n_val, seed);
    Ok((
        Manifest::new(train, "train", seed, None)?,
        Manifest::new(val, "val", seed, None)?,
    ))
}

/// Draws the labeled subset of a labeled-fraction protocol from a train pool.
///
/// Unlabeled records lose their visible boxes; the boxes move to `hidden_gt`.
pub fn sample_protocol(train: &Manifest, fraction: f64, seed: u64) -> Result<(Manifest, Manifest)> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Config(format!(
            "protocol fraction must lie in (0, 1), got {fraction}"
        )));
    }
    if train.is_empty() {
        return Err(Error::EmptyManifest);
    }
    let n_labeled = round_half_up_count(fraction, train.len());
    let (mut labeled, mut unlabeled) = draw(&train.records, n_labeled, seed);
    for r in &mut labeled {
        if r.label_status == LabelStatus::Unlabeled {
            r.boxes = r.hidden_gt.take().unwrap_or_default();
        }
        r.label_status = LabelStatus::Labeled;
    }
    for r in &mut unlabeled {
        if r.label_status == LabelStatus::Labeled {
            r.hidden_gt = Some(std::mem::take(&mut r.boxes));
        }
        r.label_status = LabelStatus::Unlabeled;
    }
    Ok((
        Manifest::new(
            labeled,
            format!("{}_labeled", train.split_name),
            seed,
            Some(fraction),
        )?,
        Manifest::new(
            unlabeled,
            format!("{}_unlabeled", train.split_name),
            seed,
            Some(fraction),
        )?,
    ))
}
