//! Hold out target validation images, then draw the labeled share for each protocol.

use lada::dataset::{sample_protocol, split_train_val, Domain};
use lada::synth::generate_domain;

fn main() -> lada::Result<()> {
    let target = generate_domain(Domain::Target, 2000, 50, 3)?;
    let (train, val) = split_train_val(&target.manifest.records, 0.05, 11)?;
    println!("target: {} train, {} validation", train.len(), val.len());

    for percent in [0.5, 1.0, 3.0] {
        let (labeled, unlabeled) = sample_protocol(&train, percent / 100.0, 11)?;
        let (again, _) = sample_protocol(&train, percent / 100.0, 11)?;
        let same = labeled
            .records
            .iter()
            .zip(&again.records)
            .all(|(a, b)| a.image_id == b.image_id);
        let hidden = unlabeled
            .records
            .iter()
            .filter(|r| r.hidden_gt.is_some())
            .count();
        println!(
            "{percent:>3}%: {:>3} labeled, {} unlabeled ({hidden} with withheld boxes), reproducible: {same}",
            labeled.len(),
            unlabeled.len()
        );
    }
    Ok(())
}
