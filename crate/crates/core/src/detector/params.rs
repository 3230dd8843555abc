use std::collections::HashMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::config::DetectorConfig;
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Named parameter tensors of one detector instance.
///
/// Student and teacher are two instances built from the same config, so they
/// can be zipped parameter by parameter. Two counters record how the tensors
/// have been modified: `grad_updates` for optimizer steps and `ema_updates`
/// for moving-average blends.
#[derive(Clone, Debug)]
pub struct DetectorParams {
    config: DetectorConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
    grad_updates: u64,
    ema_updates: u64,
}

/// Parameters bound as leaves of a [`Graph`].
pub struct Bound<'a> {
    params: &'a DetectorParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.params.index[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.params.config
    }
}

/// `(name, shape, init std)` of every parameter, in a fixed order.
fn layout(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>, f64)> {
    let mut out = Vec::new();
    let conv = |out: &mut Vec<_>, name: String, o: usize, i: usize, k: usize, std: Option<f64>| {
        let std = std.unwrap_or_else(|| (2.0 / (i * k * k) as f64).sqrt());
        out.push((format!("{name}.weight"), vec![o, i, k, k], std));
        out.push((format!("{name}.bias"), vec![o], 0.0));
    };
    let coord = |on: bool| if on { 2 } else { 0 };

    let stem_convs = cfg.strides[0].trailing_zeros() as usize;
    let mut c_in = cfg.in_channels;
    for s in 0..stem_convs {
        conv(
            &mut out,
            format!("backbone.0.down{s}"),
            cfg.backbone_widths[0],
            c_in,
            3,
            None,
        );
        c_in = cfg.backbone_widths[0];
    }
    conv(
        &mut out,
        "backbone.0.refine".into(),
        cfg.backbone_widths[0],
        c_in,
        3,
        None,
    );
    for l in 1..cfg.strides.len() {
        let (prev, w) = (cfg.backbone_widths[l - 1], cfg.backbone_widths[l]);
        conv(&mut out, format!("backbone.{l}.down0"), w, prev, 3, None);
        conv(&mut out, format!("backbone.{l}.refine"), w, w, 3, None);
    }

    let f = cfg.fpn_channels;
    let cp = cfg.coord_placement;
    for l in 0..cfg.strides.len() {
        conv(
            &mut out,
            format!("fpn.lateral.{l}"),
            f,
            cfg.backbone_widths[l] + coord(cp.fpn_lateral),
            1,
            None,
        );
        conv(
            &mut out,
            format!("fpn.output.{l}"),
            f,
            f + coord(cp.fpn_output),
            3,
            None,
        );
    }

    let a = cfg.num_anchors();
    conv(
        &mut out,
        "rpn.conv".into(),
        f,
        f + coord(cp.rpn_head),
        3,
        None,
    );
    conv(&mut out, "rpn.objectness".into(), a, f, 1, Some(0.01));
    conv(&mut out, "rpn.deltas".into(), 4 * a, f, 1, Some(0.01));

    let pooled = f * cfg.roi_pool * cfg.roi_pool;
    let fc = |out: &mut Vec<_>, name: &str, o: usize, i: usize, std: f64| {
        out.push((format!("{name}.weight"), vec![o, i], std));
        out.push((format!("{name}.bias"), vec![o], 0.0));
    };
    fc(
        &mut out,
        "roi.fc",
        cfg.roi_hidden,
        pooled,
        (2.0 / pooled as f64).sqrt(),
    );
    fc(
        &mut out,
        "roi.cls",
        cfg.num_classes + 1,
        cfg.roi_hidden,
        0.01,
    );
    fc(&mut out, "roi.bbox", 4, cfg.roi_hidden, 0.001);

    let dh = cfg.disc_hidden;
    for level in ["img_low", "img_high"] {
        conv(&mut out, format!("disc.{level}.0"), dh, f, 3, None);
        conv(&mut out, format!("disc.{level}.1"), 1, dh, 1, Some(0.01));
    }
    fc(
        &mut out,
        "disc.ins.0",
        dh,
        pooled,
        (2.0 / pooled as f64).sqrt(),
    );
    fc(&mut out, "disc.ins.1", 1, dh, 0.01);
    out
}

impl DetectorParams {
    /// He-initialised parameters; deterministic in `seed`.
    pub fn init(config: DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape, std) in layout(&config) {
            let n: usize = shape.iter().product();
            let data = (0..n)
                .map(|_| {
                    if std == 0.0 {
                        0.0
                    } else {
                        std * rng.sample::<f64, _>(StandardNormal)
                    }
                })
                .collect();
            names.push(name);
            tensors.push(Tensor::new(&shape, data)?);
        }
        Self::from_parts(config, names, tensors)
    }

    /// Rebuilds parameters from named tensors, checking them against the config layout.
    pub fn from_parts(
        config: DetectorConfig,
        names: Vec<String>,
        tensors: Vec<Tensor>,
    ) -> Result<Self> {
        config.validate()?;
        let expected = layout(&config);
        if expected.len() != names.len() || names.len() != tensors.len() {
            return Err(Error::Structure(format!(
                "expected {} parameters, got {} names / {} tensors",
                expected.len(),
                names.len(),
                tensors.len()
            )));
        }
        for ((en, es, _), (n, t)) in expected.iter().zip(names.iter().zip(&tensors)) {
            if en != n || es.as_slice() != t.shape() {
                return Err(Error::Structure(format!(
                    "parameter {n} {:?} does not match {en} {es:?}",
                    t.shape()
                )));
            }
            if !t.is_finite() {
                return Err(Error::Structure(format!(
                    "parameter {n} holds non-finite values"
                )));
            }
        }
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Ok(DetectorParams {
            config,
            names,
            tensors,
            index,
            grad_updates: 0,
            ema_updates: 0,
        })
    }

    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn grad_updates(&self) -> u64 {
        self.grad_updates
    }

    pub fn ema_updates(&self) -> u64 {
        self.ema_updates
    }

    pub(crate) fn set_counters(&mut self, grad_updates: u64, ema_updates: u64) {
        self.grad_updates = grad_updates;
        self.ema_updates = ema_updates;
    }

    /// Adds every tensor to `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound<'_> {
        let vars = self
            .tensors
            .iter()
            .map(|t| g.leaf(t.clone(), trainable))
            .collect();
        Bound { params: self, vars }
    }

    /// Errors unless `other` has the same names and shapes in the same order.
    pub fn check_same_structure(&self, other: &DetectorParams) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Structure("parameter names differ".into()));
        }
        for (n, (a, b)) in self
            .names
            .iter()
            .zip(self.tensors.iter().zip(&other.tensors))
        {
            if a.shape() != b.shape() {
                return Err(Error::Structure(format!(
                    "{n}: {:?} vs {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(())
    }

    /// Optimizer write access; counts as one gradient update.
    pub fn apply_update(&mut self, mut f: impl FnMut(usize, &mut Tensor)) {
        for (i, t) in self.tensors.iter_mut().enumerate() {
            f(i, t);
        }
        self.grad_updates += 1;
    }

    /// `self ← decay·self + (1 − decay)·other`, elementwise. Counts as one EMA update.
    pub fn blend_from(&mut self, other: &DetectorParams, decay: f64) -> Result<()> {
        self.check_same_structure(other)?;
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::Config(format!(
                "EMA decay must lie in [0, 1], got {decay}"
            )));
        }
        for (t, s) in self.tensors.iter_mut().zip(&other.tensors) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = decay * *a + (1.0 - decay) * b;
            }
        }
        self.ema_updates += 1;
        Ok(())
    }

    /// Element `k` of the flattened parameter vector, as `(tensor, offset)`.
    pub fn locate(&self, mut k: usize) -> Option<(usize, usize)> {
        for (i, t) in self.tensors.iter().enumerate() {
            if k < t.len() {
                return Some((i, k));
            }
            k -= t.len();
        }
        None
    }

    pub fn scalar(&self, k: usize) -> f64 {
        let (i, off) = self.locate(k).expect("parameter index in range");
        self.tensors[i].data()[off]
    }

    /// Direct write of one scalar, for finite-difference probes. Not counted as an update.
    pub fn set_scalar(&mut self, k: usize, value: f64) {
        let (i, off) = self.locate(k).expect("parameter index in range");
        self.tensors[i].data_mut()[off] = value;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_finite() {
        let a = DetectorParams::init(DetectorConfig::toy(), 3).unwrap();
        let b = DetectorParams::init(DetectorConfig::toy(), 3).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert!(a.tensors().iter().all(Tensor::is_finite));
        a.check_same_structure(&b).unwrap();
    }

    #[test]
    fn coordinate_inputs_widen_fpn_and_rpn_weights() {
        let p = DetectorParams::init(DetectorConfig::toy(), 0).unwrap();
        assert_eq!(
            p.get("fpn.lateral.0.weight").unwrap().shape(),
            &[16, 10, 1, 1]
        );
        assert_eq!(p.get("rpn.conv.weight").unwrap().shape(), &[16, 18, 3, 3]);
        assert_eq!(
            p.get("backbone.0.down0.weight").unwrap().shape(),
            &[8, 3, 3, 3]
        );
        let mut cfg = DetectorConfig::toy();
        cfg.coord_placement = super::super::CoordPlacement::NONE;
        let q = DetectorParams::init(cfg, 0).unwrap();
        assert_eq!(q.get("rpn.conv.weight").unwrap().shape(), &[16, 16, 3, 3]);
        assert!(p.check_same_structure(&q).is_err());
    }

    #[test]
    fn blend_counts_and_rejects_mismatch() {
        let mut t = DetectorParams::init(DetectorConfig::miniature(), 0).unwrap();
        let s = DetectorParams::init(DetectorConfig::miniature(), 1).unwrap();
        t.blend_from(&s, 0.0).unwrap();
        assert_eq!(t.tensors(), s.tensors());
        assert_eq!((t.grad_updates(), t.ema_updates()), (0, 1));
        let other = DetectorParams::init(DetectorConfig::toy(), 0).unwrap();
        assert!(matches!(
            t.blend_from(&other, 0.9),
            Err(Error::Structure(_))
        ));
    }
}
