//! Renders a small source/target benchmark to a directory and prints what it wrote.
//!
//! `cargo run --example synth_benchmark -- /tmp/bench`

use std::path::PathBuf;

use lada::dataset::{save_manifest, Domain};
use lada::synth::generate_benchmark;

fn main() -> lada::Result<()> {
    let out = std::env::args()
        .nth(1)
        .map(PathBuf::from)
        .unwrap_or_else(|| std::env::temp_dir().join("lada_bench"));
    let set = generate_benchmark(60, 60, 7)?;
    let img_dir = out.join("images");
    std::fs::create_dir_all(&img_dir).expect("output directory");
    for (id, img) in &set.images.images {
        let p = img_dir.join(format!("{id}.png"));
        img.save(&p).expect("png write");
    }
    save_manifest(&set.manifest, out.join("manifest.jsonl"))?;

    for domain in [Domain::Source, Domain::Target] {
        let recs: Vec<_> = set
            .manifest
            .records
            .iter()
            .filter(|r| r.domain == domain)
            .collect();
        let fg = recs.iter().filter(|r| r.is_foreground()).count();
        let scenes: std::collections::BTreeSet<_> =
            recs.iter().map(|r| r.scene.raw.as_str()).collect();
        println!(
            "{domain:?}: {} images in {} scenes, {fg} with smoke",
            recs.len(),
            scenes.len()
        );
    }
    let first = &set.manifest.records[0];
    println!(
        "e.g. {} from {} ({:?}): {:?}",
        first.image_id, first.scene.raw, first.scene.date, first.boxes
    );
    println!("wrote {}", out.display());
    Ok(())
}
