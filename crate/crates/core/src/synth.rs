//! Procedural smoke scenes with a horizon-bounded location prior and two
//! rendering styles that act as source and target domains.

use chrono::{Duration, NaiveDate};
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{parse_scene_name, BBox, Domain, ImageRecord, LabelStatus, Manifest};
use crate::error::{Error, Result};
use crate::imagery::MemoryImages;

/// Global colour transform applied after a scene is composed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DomainStyle {
    /// Multiplier on deviations from mid-grey.
    pub contrast: f64,
    /// Blend weight towards `haze_color`.
    pub haze: f64,
    pub haze_color: [f64; 3],
    /// Rotation about the grey axis, degrees.
    pub hue_shift: f64,
    pub noise: f64,
}

impl DomainStyle {
    pub fn source() -> Self {
        DomainStyle {
            contrast: 1.0,
            haze: 0.0,
            haze_color: [0.5, 0.5, 0.5],
            hue_shift: 0.0,
            noise: 0.02,
        }
    }

    /// Low-contrast, hazy, hue-rotated rendering.
    pub fn target() -> Self {
        DomainStyle {
            contrast: 0.55,
            haze: 0.35,
            haze_color: [0.78, 0.66, 0.52],
            hue_shift: 60.0,
            noise: 0.03,
        }
    }

    fn apply(&self, rgb: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.hue_shift.to_radians().sin_cos();
        // Rodrigues rotation about (1,1,1)/√3.
        let k = (1.0 - c) / 3.0;
        let r3 = s / 3f64.sqrt();
        let m = [
            [c + k, k - r3, k + r3],
            [k + r3, c + k, k - r3],
            [k - r3, k + r3, c + k],
        ];
        let mut out = [0.0; 3];
        for (o, row) in out.iter_mut().zip(m) {
            let v: f64 = row.iter().zip(rgb).map(|(a, b)| a * b).sum();
            let v = (v - 0.5) * self.contrast + 0.5;
            *o = v;
        }
        for (o, h) in out.iter_mut().zip(self.haze_color) {
            *o = (1.0 - self.haze) * *o + self.haze * h;
        }
        out
    }
}

/// Parameters of one family of generated scenes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: u32,
    pub height: u32,
    /// Plumes never originate above `horizon_fraction × height`.
    pub horizon_fraction: f64,
    /// Relative widening of a plume from base to top.
    pub expansion: f64,
    pub base_width: (f64, f64),
    pub plume_height: (f64, f64),
    pub foreground_probability: f64,
    pub max_clouds: u32,
    pub style: DomainStyle,
}

impl SceneSpec {
    pub fn new(domain: Domain) -> Self {
        SceneSpec {
            width: 64,
            height: 64,
            horizon_fraction: 0.35,
            expansion: 1.6,
            base_width: (5.0, 10.0),
            plume_height: (12.0, 26.0),
            foreground_probability: 0.5,
            max_clouds: 2,
            style: match domain {
                Domain::Source => DomainStyle::source(),
                Domain::Target => DomainStyle::target(),
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.width >= 16
            && self.height >= 16
            && (0.0..1.0).contains(&self.horizon_fraction)
            && (0.0..=1.0).contains(&self.foreground_probability)
            && self.base_width.0 > 0.0
            && self.base_width.0 <= self.base_width.1
            && self.plume_height.0 > 0.0
            && self.plume_height.0 <= self.plume_height.1
            && self.plume_height.1 < self.height as f64 * (1.0 - self.horizon_fraction)
            && self.expansion >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid scene spec {self:?}")))
        }
    }

    pub fn horizon_y(&self) -> f64 {
        self.horizon_fraction * self.height as f64
    }
}

/// Plume placement in pixel coordinates; the base is the bottom centre.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plume {
    pub base_x: f64,
    pub base_y: f64,
    pub base_width: f64,
    pub height: f64,
    pub drift: f64,
}

const ALPHA_VISIBLE: f64 = 0.08;
const SMOKE: [f64; 3] = [0.86, 0.86, 0.88];

fn hash01(seed: u64, a: i64, b: i64) -> f64 {
    let mut z = seed
        ^ (a as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15)
        ^ (b as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    ((z ^ (z >> 31)) >> 11) as f64 / (1u64 << 53) as f64
}

/// Bilinear value noise on a lattice of `cell` pixels.
fn value_noise(seed: u64, x: f64, y: f64, cell: f64) -> f64 {
    let (gx, gy) = (x / cell, y / cell);
    let (x0, y0) = (gx.floor(), gy.floor());
    let (tx, ty) = (gx - x0, gy - y0);
    let (i, j) = (x0 as i64, y0 as i64);
    let a = hash01(seed, i, j);
    let b = hash01(seed, i + 1, j);
    let c = hash01(seed, i, j + 1);
    let d = hash01(seed, i + 1, j + 1);
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    top + (bottom - top) * ty
}

fn background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let horizon = spec.horizon_y() + rng.gen_range(-2.0..2.0);
    let tex_seed: u64 = rng.gen();
    let sky_top = [
        rng.gen_range(0.30..0.45),
        rng.gen_range(0.45..0.60),
        rng.gen_range(0.70..0.85),
    ];
    let sky_low = [0.75, 0.80, 0.86];
    let ground = [
        rng.gen_range(0.30..0.42),
        rng.gen_range(0.32..0.42),
        rng.gen_range(0.18..0.26),
    ];
    let ridge_phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
    let mut px = vec![[0.0; 3]; w * h];
    for y in 0..h {
        for x in 0..w {
            let (xf, yf) = (x as f64 + 0.5, y as f64 + 0.5);
            let ridge = horizon + 1.5 * (xf * 0.15 + ridge_phase).sin();
            let p = &mut px[y * w + x];
            if yf < ridge {
                let t = (yf / ridge.max(1.0)).clamp(0.0, 1.0);
                for c in 0..3 {
                    p[c] = sky_top[c] + (sky_low[c] - sky_top[c]) * t;
                }
            } else {
                let n = 0.6 * value_noise(tex_seed, xf, yf, 6.0)
                    + 0.4 * value_noise(tex_seed ^ 1, xf, yf, 2.5);
                let depth = ((yf - ridge) / (h as f64 - ridge).max(1.0)).clamp(0.0, 1.0);
                for c in 0..3 {
                    p[c] = ground[c] * (0.7 + 0.6 * n) * (0.8 + 0.3 * depth);
                }
            }
        }
    }
    let clouds = rng.gen_range(0..=spec.max_clouds);
    for _ in 0..clouds {
        let cx = rng.gen_range(0.0..w as f64);
        let cy = rng.gen_range(2.0..(horizon - 3.0).max(3.0));
        let (rx, ry) = (rng.gen_range(5.0..12.0), rng.gen_range(1.5..3.0));
        let a = rng.gen_range(0.3..0.6);
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let k = a * (1.0 - (dx * dx + dy * dy)).max(0.0);
                for v in px[y * w + x].iter_mut() {
                    *v = (1.0 - k) * *v + k * 0.95;
                }
            }
        }
    }
    px
}

/// Terrain texture with no vertical structure.
fn flat_background(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let tex_seed: u64 = rng.gen();
    let ground = [
        rng.gen_range(0.30..0.42),
        rng.gen_range(0.32..0.42),
        rng.gen_range(0.18..0.26),
    ];
    let mut px = vec![[0.0; 3]; w * h];
    for (i, p) in px.iter_mut().enumerate() {
        let (xf, yf) = ((i % w) as f64 + 0.5, (i / w) as f64 + 0.5);
        let n =
            0.6 * value_noise(tex_seed, xf, yf, 6.0) + 0.4 * value_noise(tex_seed ^ 1, xf, yf, 2.5);
        for c in 0..3 {
            p[c] = ground[c] * (0.75 + 0.5 * n);
        }
    }
    px
}

/// Opacity of a plume at every pixel: stacked soft ellipses widening upwards.
pub fn plume_alpha(spec: &SceneSpec, plume: &Plume, tex_seed: u64) -> Vec<f64> {
    let (w, h) = (spec.width as usize, spec.height as usize);
    let puffs = 7;
    let mut transmit = vec![1.0; w * h];
    for k in 0..puffs {
        let t = k as f64 / (puffs - 1) as f64;
        let rx = 0.5 * plume.base_width * (1.0 + spec.expansion * t);
        let ry = (plume.height / puffs as f64) * (0.9 + 0.6 * t);
        let cy = plume.base_y - ry.min(plume.height * 0.5) - t * (plume.height - 2.0 * ry).max(0.0);
        let cx = plume.base_x + plume.drift * t * t * plume.height;
        let a = 0.65 - 0.25 * t;
        for y in 0..h {
            for x in 0..w {
                let dx = (x as f64 + 0.5 - cx) / rx;
                let dy = (y as f64 + 0.5 - cy) / ry;
                let r2 = dx * dx + dy * dy;
                if r2 < 1.0 {
                    let wisp = 0.75
                        + 0.5
                            * value_noise(
                                tex_seed,
                                x as f64 - plume.base_x + 64.0,
                                y as f64 - plume.base_y + 64.0,
                                3.0,
                            );
                    let ak = (a * (1.0 - r2) * wisp).min(0.95);
                    transmit[y * w + x] *= 1.0 - ak;
                }
            }
        }
    }
    transmit.into_iter().map(|t| 1.0 - t).collect()
}

/// Tight box around the visible part of an opacity map.
pub fn alpha_box(alpha: &[f64], width: usize) -> Option<[f64; 4]> {
    let mut b: Option<[usize; 4]> = None;
    for (i, &a) in alpha.iter().enumerate() {
        if a > ALPHA_VISIBLE {
            let (x, y) = (i % width, i / width);
            let e = b.get_or_insert([x, y, x, y]);
            e[0] = e[0].min(x);
            e[1] = e[1].min(y);
            e[2] = e[2].max(x);
            e[3] = e[3].max(y);
        }
    }
    b.map(|[x0, y0, x1, y1]| [x0 as f64, y0 as f64, (x1 + 1) as f64, (y1 + 1) as f64])
}

fn sample_plume(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Plume {
    let height = rng.gen_range(spec.plume_height.0..=spec.plume_height.1);
    let lowest = spec.height as f64 - 1.0;
    let highest = (spec.horizon_y() + 0.5 * height + 1.0).min(lowest);
    Plume {
        base_x: rng.gen_range(6.0..spec.width as f64 - 6.0),
        base_y: rng.gen_range(highest..=lowest),
        base_width: rng.gen_range(spec.base_width.0..=spec.base_width.1),
        height,
        drift: rng.gen_range(-0.25..0.25),
    }
}

fn finish(spec: &SceneSpec, px: &[[f64; 3]], rng: &mut ChaCha8Rng) -> RgbImage {
    let w = spec.width as usize;
    RgbImage::from_fn(spec.width, spec.height, |x, y| {
        let v = spec.style.apply(px[y as usize * w + x as usize]);
        Rgb(v.map(|c| {
            let n = spec.style.noise * (rng.gen::<f64>() - 0.5) * 2.0;
            ((c + n).clamp(0.0, 1.0) * 255.0).round() as u8
        }))
    })
}

fn composite(px: &mut [[f64; 3]], alpha: &[f64], color: [f64; 3]) {
    for (p, &a) in px.iter_mut().zip(alpha) {
        for c in 0..3 {
            p[c] = (1.0 - a) * p[c] + a * color[c];
        }
    }
}

/// A rendered scene and its tight plume box, if any.
#[derive(Clone, Debug)]
pub struct Scene {
    pub image: RgbImage,
    pub boxes: Vec<BBox>,
    pub plume: Option<Plume>,
}

/// Renders one scene; identical `(spec, seed)` give identical pixels and boxes.
pub fn generate_scene(spec: &SceneSpec, seed: u64) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut px = background(spec, &mut rng);
    let mut boxes = Vec::new();
    let mut placed = None;
    if rng.gen_bool(spec.foreground_probability) {
        let horizon = spec.horizon_y();
        loop {
            let plume = sample_plume(spec, &mut rng);
            let tex_seed: u64 = rng.gen();
            let alpha = plume_alpha(spec, &plume, tex_seed);
            let Some(b) = alpha_box(&alpha, spec.width as usize) else {
                continue;
            };
            let bbox = BBox::from_corners(0, b);
            if bbox.cy < horizon || bbox.w < 2.0 || bbox.h < 2.0 {
                continue;
            }
            let shade = rng.gen_range(0.9..1.05);
            composite(&mut px, &alpha, SMOKE.map(|c| (c * shade).min(1.0)));
            boxes.push(bbox);
            placed = Some(plume);
            break;
        }
    }
    let image = finish(spec, &px, &mut rng);
    Ok(Scene {
        image,
        boxes,
        plume: placed,
    })
}

/// Images of one synthetic domain grouped into scenes of `per_scene` frames.
#[derive(Clone, Debug)]
pub struct SynthSet {
    pub manifest: Manifest,
    pub images: MemoryImages,
}

fn domain_tag(domain: Domain) -> (&'static str, &'static str) {
    match domain {
        Domain::Source => ("SynthSource", "s"),
        Domain::Target => ("SynthTarget", "t"),
    }
}

/// Scene directory name of the `i`-th synthetic scene of a domain.
pub fn scene_name(domain: Domain, i: usize) -> String {
    let (fire, cam) = domain_tag(domain);
    let date = NaiveDate::from_ymd_opt(2016, 6, 4).expect("valid date") + Duration::days(i as i64);
    format!("{}_{fire}_{cam}{i}-n-mobo-c", date.format("%Y%m%d"))
}

fn seed_for(seed: u64, domain: Domain, i: usize) -> u64 {
    let d = match domain {
        Domain::Source => 0x5352_4300,
        Domain::Target => 0x5447_5400,
    };
    (seed.wrapping_mul(0x1000_0000_01b3) ^ d).wrapping_add(i as u64 * 0x9e37_79b9)
}

/// Generates `n` labeled images of one domain.
pub fn generate_domain(domain: Domain, n: usize, per_scene: usize, seed: u64) -> Result<SynthSet> {
    let spec = SceneSpec::new(domain);
    let (fire, _) = domain_tag(domain);
    let mut images = MemoryImages::default();
    let mut records = Vec::with_capacity(n);
    for i in 0..n {
        let scene = generate_scene(&spec, seed_for(seed, domain, i))?;
        let image_id = format!("{}_{i:05}", fire.to_lowercase());
        records.push(ImageRecord {
            image_id: image_id.clone(),
            scene: parse_scene_name(&scene_name(domain, i / per_scene.max(1)))?,
            width: spec.width,
            height: spec.height,
            boxes: scene.boxes,
            domain,
            label_status: LabelStatus::Labeled,
            hidden_gt: None,
        });
        images.insert(image_id, scene.image);
    }
    let manifest = Manifest::new(
        records,
        format!("synth_{}", fire.to_lowercase()),
        seed,
        None,
    )?;
    Ok(SynthSet { manifest, images })
}

/// Source and target sets in one manifest and image store.
pub fn generate_benchmark(n_source: usize, n_target: usize, seed: u64) -> Result<SynthSet> {
    let src = generate_domain(Domain::Source, n_source, 50, seed)?;
    let tgt = generate_domain(Domain::Target, n_target, 50, seed)?;
    let mut images = src.images;
    images.images.extend(tgt.images.images);
    let mut records = src.manifest.records;
    records.extend(tgt.manifest.records);
    Ok(SynthSet {
        manifest: Manifest::new(records, "synth", seed, None)?,
        images,
    })
}

/// Vertical bands of the two-class position probe, as base-y ranges.
pub const PROBE_BANDS: [(f64, f64); 2] = [(40.0, 46.0), (64.0, 70.0)];
pub const PROBE_SIZE: (u32, u32) = (64, 96);

/// Scenes whose class is determined only by which band the plume base
/// falls in; shape, style and background statistics do not depend on position.
pub fn generate_position_probe(n: usize, seed: u64) -> Result<SynthSet> {
    let spec = SceneSpec {
        width: PROBE_SIZE.0,
        height: PROBE_SIZE.1,
        horizon_fraction: 0.0,
        max_clouds: 0,
        foreground_probability: 1.0,
        ..SceneSpec::new(Domain::Source)
    };
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5052_4f42);
    let mut images = MemoryImages::default();
    let mut records = Vec::with_capacity(n);
    let shape_seed = 17;
    for i in 0..n {
        let class_id = (i % 2) as u32;
        let band = PROBE_BANDS[class_id as usize];
        let plume = Plume {
            base_x: rng.gen_range(14.0..50.0f64).round(),
            base_y: rng.gen_range(band.0..band.1).round(),
            base_width: 7.0,
            height: 18.0,
            drift: 0.0,
        };
        let mut px = flat_background(&spec, &mut rng);
        let alpha = plume_alpha(&spec, &plume, shape_seed);
        let b = alpha_box(&alpha, spec.width as usize).expect("plume inside the canvas");
        composite(&mut px, &alpha, SMOKE);
        let image_id = format!("probe_{i:05}");
        records.push(ImageRecord {
            image_id: image_id.clone(),
            scene: parse_scene_name(&scene_name(Domain::Source, 900 + i / 50))?,
            width: spec.width,
            height: spec.height,
            boxes: vec![BBox::from_corners(class_id, b)],
            domain: Domain::Source,
            label_status: LabelStatus::Labeled,
            hidden_gt: None,
        });
        images.insert(image_id, finish(&spec, &px, &mut rng));
    }
    Ok(SynthSet {
        manifest: Manifest::new(records, "position_probe", seed, None)?,
        images,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(img: &RgbImage) -> [f64; 3] {
        let n = (img.width() * img.height()) as f64;
        let mut mean = [0.0; 3];
        for p in img.pixels() {
            for c in 0..3 {
                mean[c] += p[c] as f64 / n;
            }
        }
        let luma: Vec<f64> = img
            .pixels()
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
            .collect();
        let m = luma.iter().sum::<f64>() / n;
        let sd = (luma.iter().map(|v| (v - m).powi(2)).sum::<f64>() / n).sqrt();
        [mean[0] - mean[2], mean[1] - mean[2], sd]
    }

    #[test]
    fn generation_is_deterministic() {
        for d in [Domain::Source, Domain::Target] {
            let spec = SceneSpec::new(d);
            for seed in 0..20 {
                let a = generate_scene(&spec, seed).unwrap();
                let b = generate_scene(&spec, seed).unwrap();
                assert_eq!(a.image, b.image);
                assert_eq!(a.boxes, b.boxes);
            }
        }
    }

    #[test]
    fn boxes_lie_below_the_horizon_and_half_are_background() {
        let spec = SceneSpec::new(Domain::Source);
        let mut background = 0;
        for seed in 0..1000 {
            let s = generate_scene(&spec, seed).unwrap();
            match s.boxes.as_slice() {
                [] => background += 1,
                [b] => {
                    assert!(b.cy >= spec.horizon_y(), "seed {seed}: {b:?}");
                    assert!(s.plume.unwrap().base_y >= spec.horizon_y());
                    assert!(b.is_valid());
                }
                _ => panic!("more than one plume"),
            }
        }
        assert!(
            (background as f64 / 1000.0 - 0.5).abs() <= 0.05,
            "{background}"
        );
    }

    #[test]
    fn box_is_tight_around_visible_smoke() {
        let spec = SceneSpec::new(Domain::Source);
        let plume = Plume {
            base_x: 30.0,
            base_y: 55.0,
            base_width: 8.0,
            height: 20.0,
            drift: 0.1,
        };
        let alpha = plume_alpha(&spec, &plume, 3);
        let [x0, y0, x1, y1] = alpha_box(&alpha, 64).unwrap();
        let w = 64;
        let visible = |x: usize, y: usize| alpha[y * w + x] > ALPHA_VISIBLE;
        for (xs, ys) in [
            (
                vec![x0 as usize],
                (y0 as usize..y1 as usize).collect::<Vec<_>>(),
            ),
            (vec![x1 as usize - 1], (y0 as usize..y1 as usize).collect()),
        ] {
            assert!(ys.iter().any(|&y| visible(xs[0], y)));
        }
        assert!((x0 as usize..x1 as usize).any(|x| visible(x, y0 as usize)));
        assert!((x0 as usize..x1 as usize).any(|x| visible(x, y1 as usize - 1)));
        assert!(y1 <= 55.5 + 1.0);
    }

    #[test]
    fn styles_are_separable_from_pixel_statistics() {
        let render = |d: Domain, s: u64| generate_scene(&SceneSpec::new(d), s).unwrap().image;
        let mut centroid = [[0.0; 3]; 2];
        for (k, d) in [Domain::Source, Domain::Target].into_iter().enumerate() {
            for s in 0..50 {
                let f = features(&render(d, 10_000 + s));
                for c in 0..3 {
                    centroid[k][c] += f[c] / 50.0;
                }
            }
        }
        let mut correct = 0;
        for (k, d) in [Domain::Source, Domain::Target].into_iter().enumerate() {
            for s in 0..100 {
                let f = features(&render(d, s));
                let dist = |c: &[f64; 3]| (0..3).map(|i| (f[i] - c[i]).powi(2)).sum::<f64>();
                let guess = usize::from(dist(&centroid[1]) < dist(&centroid[0]));
                correct += usize::from(guess == k);
            }
        }
        assert!(correct as f64 / 200.0 > 0.9, "{correct}/200");
    }

    #[test]
    fn scene_names_parse_and_sets_have_records() {
        let set = generate_benchmark(6, 4, 1).unwrap();
        assert_eq!(set.manifest.len(), 10);
        assert_eq!(set.images.images.len(), 10);
        let meta = &set.manifest.records[0].scene;
        assert_eq!(meta.fire_name, "SynthSource");
        assert_eq!(meta.camera_name, "s0-n-mobo-c");
        assert_eq!(set.manifest.records[7].domain, Domain::Target);
    }

    #[test]
    fn probe_classes_differ_only_in_band() {
        let set = generate_position_probe(40, 0).unwrap();
        for r in &set.manifest.records {
            let b = r.boxes[0];
            let other = set
                .manifest
                .records
                .iter()
                .find(|o| o.boxes[0].class_id != b.class_id)
                .unwrap()
                .boxes[0];
            assert!((b.w - other.w).abs() < 1e-9 && (b.h - other.h).abs() < 1e-9);
            let band = PROBE_BANDS[b.class_id as usize];
            let bottom = b.corners()[3];
            assert!(bottom >= band.0 - 2.0 && bottom <= band.1 + 2.0, "{b:?}");
        }
    }
}
