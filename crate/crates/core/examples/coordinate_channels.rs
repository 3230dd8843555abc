//! Position-dependent classes: the same plume is class 0 high in the frame and
//! class 1 low in the frame. A detector with coordinate channels can tell them
//! apart; with the channels zeroed it has to rely on context alone.
//!
//! `cargo run --release --example coordinate_channels`

use lada::detector::{make_coord_grid, DetectorConfig, DetectorParams};
use lada::synth::{generate_position_probe, PROBE_BANDS};
use lada::trainer::{evaluate_model, supervised_loss, train_stage1, TrainConfig};

fn main() -> lada::Result<()> {
    let grid = make_coord_grid(3, 4)?;
    println!(
        "coordinate grid for a 3×4 map:\n  x {:?}\n  y {:?}",
        grid.x_ch, grid.y_ch
    );
    println!("class bands (plume base row): {PROBE_BANDS:?}");

    let set = generate_position_probe(64, 1)?;
    let cfg = TrainConfig {
        epochs: 30,
        lr_decay_epoch: 30,
        seed: 1,
        ..TrainConfig::toy()
    };
    for coords in [true, false] {
        let dc = DetectorConfig {
            num_classes: 2,
            coord_channels: coords,
            ..DetectorConfig::shallow()
        };
        let init = DetectorParams::init(dc, 1)?;
        let trained = train_stage1(&set.manifest, &set.images, init, &cfg, None, &mut ())?;
        let loss = supervised_loss(&trained, &set.manifest, &set.images, 7)?;
        let map = evaluate_model(&trained, &set.manifest, &set.images)?.map_50;
        println!(
            "coordinates {:>5}: training loss {loss:.3}, mAP@0.5 {map:.3}",
            if coords { "on" } else { "off" }
        );
    }
    Ok(())
}
