//! Masks half of the 8-pixel blocks of a synthetic frame and saves both versions.
//! Masked pixels are zero after normalisation, so they render as mid grey.

use image::RgbImage;
use lada::dataset::Domain;
use lada::synth::{generate_scene, SceneSpec};
use lada::trainer::{apply_mask, generate_mask};

fn main() -> lada::Result<()> {
    let scene = generate_scene(&SceneSpec::new(Domain::Target), 4)?;
    let (w, h) = scene.image.dimensions();
    let mask = generate_mask(h as usize, w as usize, 8, 0.5, 4)?;
    for r in 0..mask.rows {
        let row: String = (0..mask.cols)
            .map(|c| {
                if mask.masked[r * mask.cols + c] {
                    '#'
                } else {
                    '.'
                }
            })
            .collect();
        println!("{row}");
    }
    println!(
        "{} of {} blocks, {} pixels",
        mask.masked_blocks(),
        mask.rows * mask.cols,
        mask.masked_area()
    );

    let x = lada::imagery::to_tensor(&scene.image);
    let masked = apply_mask(&x, &mask)?;
    let plane = (w * h) as usize;
    let out = RgbImage::from_fn(w, h, |px, py| {
        let i = py as usize * w as usize + px as usize;
        image::Rgb(std::array::from_fn(|c| {
            ((masked.data()[c * plane + i] * 0.25 + 0.5) * 255.0)
                .round()
                .clamp(0.0, 255.0) as u8
        }))
    });
    let dir = std::env::temp_dir();
    scene
        .image
        .save(dir.join("lada_original.png"))
        .expect("png write");
    out.save(dir.join("lada_masked.png")).expect("png write");
    println!(
        "saved lada_original.png and lada_masked.png to {}",
        dir.display()
    );
    Ok(())
}
