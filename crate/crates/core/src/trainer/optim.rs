use crate::detector::DetectorParams;
use crate::tensor::Tensor;

/// SGD with momentum and coupled weight decay:
/// `v ← μ·v + (g + wd·θ)`, `θ ← θ − lr·v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Global gradient-norm limit; 0 disables clipping.
    pub grad_clip: f64,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(n_params: usize, momentum: f64, weight_decay: f64, grad_clip: f64) -> Self {
        Sgd {
            momentum,
            weight_decay,
            grad_clip,
            velocity: vec![None; n_params],
        }
    }

    /// Applies one update; parameters without a gradient are left untouched.
    /// Returns the gradient norm before clipping.
    pub fn step(&mut self, params: &mut DetectorParams, grads: &[Option<Tensor>], lr: f64) -> f64 {
        let norm = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let scale = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let (mu, wd) = (self.momentum, self.weight_decay);
        let velocity = &mut self.velocity;
        params.apply_update(|i, t| {
            let Some(g) = &grads[i] else { return };
            let v = velocity[i].get_or_insert_with(|| vec![0.0; t.len()]);
            for ((p, vv), &gg) in t.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                let d = scale * gg + wd * *p;
                *vv = mu * *vv + d;
                *p -= lr * *vv;
            }
        });
        norm
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::DetectorConfig;

    #[test]
    fn plain_step_follows_the_update_rule() {
        let mut p = DetectorParams::init(DetectorConfig::miniature(), 0).unwrap();
        let before = p.tensors()[0].clone();
        let grads: Vec<Option<Tensor>> = p
            .tensors()
            .iter()
            .enumerate()
            .map(|(i, t)| (i == 0).then(|| Tensor::full(t.shape(), 1.0)))
            .collect();
        let mut opt = Sgd::new(grads.len(), 0.9, 0.1, 0.0);
        opt.step(&mut p, &grads, 0.5);
        for (a, b) in before.data().iter().zip(p.tensors()[0].data()) {
            assert!((b - (a - 0.5 * (1.0 + 0.1 * a))).abs() < 1e-15);
        }
        assert_eq!(
            p.tensors()[1],
            DetectorParams::init(DetectorConfig::miniature(), 0)
                .unwrap()
                .tensors()[1]
        );
        assert_eq!(p.grad_updates(), 1);
        let mid = p.tensors()[0].clone();
        opt.step(&mut p, &grads, 0.5);
        for ((a, m), b) in before
            .data()
            .iter()
            .zip(mid.data())
            .zip(p.tensors()[0].data())
        {
            let v1 = 1.0 + 0.1 * a;
            let v2 = 0.9 * v1 + 1.0 + 0.1 * m;
            assert!((b - (m - 0.5 * v2)).abs() < 1e-14);
        }
    }
}
