//! Gradient reversal and the alignment terms of one mixed batch.

use lada::autograd::Graph;
use lada::dataset::{BBox, Domain};
use lada::detector::{DetectorConfig, DetectorParams, Supervision};
use lada::synth::{generate_scene, SceneSpec};
use lada::tensor::Tensor;
use lada::trainer::{composite_step, PreparedBatch, TrainConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> lada::Result<()> {
    // A reversal layer is the identity going forward and flips the sign going back.
    let mut g = Graph::new();
    let x = g.leaf(Tensor::scalar(1.5), true);
    let r = g.grad_reverse(x, 0.5);
    let y = g.square(r);
    let grads = g.backward(y)?;
    println!(
        "y = {:.2}, dy/dx through reversal = {:.2}",
        g.value(y).item(),
        grads.get(x).unwrap().item()
    );

    let mut images = Vec::new();
    let mut supervision = Vec::new();
    let mut domains = Vec::new();
    for (i, domain) in [Domain::Source, Domain::Source, Domain::Target]
        .into_iter()
        .enumerate()
    {
        let scene = generate_scene(&SceneSpec::new(domain), i as u64)?;
        images.push(lada::imagery::to_tensor(&scene.image));
        supervision.push(Supervision::Boxes(scene.boxes.clone()));
        domains.push(domain);
    }
    supervision[2] = Supervision::Boxes(vec![BBox::from_corners(0, [20.0, 30.0, 34.0, 50.0])]);
    let batch = PreparedBatch {
        images: Tensor::stack(&images)?,
        supervision,
        labeled: vec![true, true, false],
        domains,
    };

    let params = DetectorParams::init(DetectorConfig::toy(), 0)?;
    let cfg = TrainConfig::default();
    for adapt in [false, true] {
        let out = composite_step(
            &params,
            &batch,
            &cfg.weights(),
            cfg.da_rate,
            adapt,
            None,
            &mut ChaCha8Rng::seed_from_u64(0),
        )?;
        let l = out.breakdown;
        let disc = params
            .names()
            .iter()
            .zip(&out.grads)
            .filter(|(n, g)| n.starts_with("disc.") && g.is_some())
            .count();
        println!(
            "adapt {adapt:>5}: sup {:.3} masked {:.3} adv img/ins {:.3}/{:.3} cons img/ins {:.4}/{:.4} total {:.3}, {disc} discriminator tensors with gradients",
            l.sup, l.mic, l.adv_img, l.adv_ins, l.cons_img, l.cons_ins, l.total
        );
    }
    Ok(())
}
