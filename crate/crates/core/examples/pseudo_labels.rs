//! The teacher's dual-threshold filter on a few score profiles.

use lada::dataset::BBox;
use lada::metrics::Detection;
use lada::trainer::filter_pseudo_labels;

fn main() -> lada::Result<()> {
    let (tau_u, tau_l) = (0.8, 0.05);
    let cases: [(&str, &[f64]); 5] = [
        ("confident", &[0.93, 0.4, 0.01]),
        ("quiet", &[0.03, 0.01]),
        ("empty", &[]),
        ("ambiguous", &[0.5, 0.02]),
        ("on the lower edge", &[0.05]),
    ];
    for (name, scores) in cases {
        let dets: Vec<Detection> = scores
            .iter()
            .map(|&score| Detection {
                image_id: name.into(),
                bbox: BBox::new(0, 20.0, 20.0, 8.0, 12.0),
                score,
            })
            .collect();
        let p = filter_pseudo_labels(name, &dets, tau_u, tau_l)?;
        println!(
            "{name:>18}: {} positive, {} discarded, {} below, background {}, usable {}",
            p.positives.len(),
            p.discarded,
            p.below_lower,
            p.is_reliable_background,
            p.usable
        );
    }
    Ok(())
}
