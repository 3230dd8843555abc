//! Image loading and normalisation.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use image::RgbImage;

use crate::dataset::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MEAN: f64 = 0.5;
const STD: f64 = 0.25;

/// `[3, H, W]` tensor with every channel mapped to `(v / 255 − 0.5) / 0.25`.
pub fn to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = (p[c] as f64 / 255.0 - MEAN) / STD;
        }
    }
    Tensor::new(&[3, h, w], data).expect("image shape")
}

/// Where training and evaluation code fetches pixels for a record.
pub trait ImageSource {
    fn load(&self, record: &ImageRecord) -> Result<Tensor>;

    /// `[N, 3, H, W]` batch of the given records.
    fn load_batch(&self, records: &[&ImageRecord]) -> Result<Tensor> {
        let items = records
            .iter()
            .map(|r| self.load(r))
            .collect::<Result<Vec<_>>>()?;
        Tensor::stack(&items)
    }
}

/// PNG files named `<image_id>.png` under one directory.
#[derive(Clone, Debug)]
pub struct DirImages {
    pub root: PathBuf,
}

impl DirImages {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        DirImages { root: root.into() }
    }

    pub fn path_of(&self, image_id: &str) -> PathBuf {
        self.root.join(format!("{image_id}.png"))
    }
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

impl ImageSource for DirImages {
    fn load(&self, record: &ImageRecord) -> Result<Tensor> {
        let path = self.path_of(&record.image_id);
        let img = read_png(&path)?;
        if (img.width(), img.height()) != (record.width, record.height) {
            return Err(Error::Image {
                path,
                message: format!(
                    "size {}×{} differs from manifest {}×{}",
                    img.width(),
                    img.height(),
                    record.width,
                    record.height
                ),
            });
        }
        Ok(to_tensor(&img))
    }
}

/// Decoded images kept in memory, keyed by image id.
#[derive(Clone, Debug, Default)]
pub struct MemoryImages {
    pub images: HashMap<String, RgbImage>,
}

impl MemoryImages {
    pub fn insert(&mut self, image_id: impl Into<String>, img: RgbImage) {
        self.images.insert(image_id.into(), img);
    }
}

impl ImageSource for MemoryImages {
    fn load(&self, record: &ImageRecord) -> Result<Tensor> {
        self.images
            .get(&record.image_id)
            .map(to_tensor)
            .ok_or_else(|| Error::Image {
                path: PathBuf::from(&record.image_id),
                message: "image not in memory store".into(),
            })
    }
}
