use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BBox, ImageRecord, Manifest};
use crate::error::{Error, Result};

/// Optional first line of a manifest file carrying the split metadata.
#[derive(Serialize, Deserialize)]
struct HeaderLine {
    manifest: ManifestHeader,
}

#[derive(Serialize, Deserialize)]
struct ManifestHeader {
    split_name: String,
    seed: u64,
    protocol: Option<f64>,
}

/// Writes a manifest as JSON lines: one metadata header, then one record per line.
pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = HeaderLine {
        manifest: ManifestHeader {
            split_name: manifest.split_name.clone(),
            seed: manifest.seed,
            protocol: manifest.protocol,
        },
    };
    let write_err = |e| Error::io(path, e);
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n").map_err(write_err)?;
    for r in &manifest.records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(write_err)?;
    }
    out.flush().map_err(write_err)
}

/// Reads a JSON-lines manifest. The metadata header line is optional; without
/// it the split name defaults to the file stem.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut header: Option<ManifestHeader> = None;
    let mut records = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let loc = || format!("{}:{}", path.display(), i + 1);
        if line.trim().is_empty() {
            continue;
        }
        if i == 0 && line.trim_start().starts_with("{\"manifest\"") {
            let h: HeaderLine =
                serde_json::from_str(&line).map_err(|e| Error::schema(loc(), e.to_string()))?;
            header = Some(h.manifest);
            continue;
        }
        let r: ImageRecord =
            serde_json::from_str(&line).map_err(|e| Error::schema(loc(), e.to_string()))?;
        r.validate().map_err(|m| Error::schema(loc(), m))?;
        records.push(r);
    }
    let header = header.unwrap_or_else(|| ManifestHeader {
        split_name: path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default(),
        seed: 0,
        protocol: None,
    });
    let m = Manifest {
        records,
        split_name: header.split_name,
        seed: header.seed,
        protocol: header.protocol,
    };
    m.validate().map_err(|e| match e {
        Error::Schema { location, message } => {
            Error::schema(format!("{}: {location}", path.display()), message)
        }
        other => other,
    })?;
    Ok(m)
}

#[derive(Serialize, Deserialize)]
struct CocoFile {
    images: Vec<CocoImage>,
    annotations: Vec<CocoAnnotation>,
    categories: Vec<CocoCategory>,
}

#[derive(Serialize, Deserialize)]
struct CocoImage {
    id: u64,
    file_name: String,
    width: u32,
    height: u32,
}

#[derive(Serialize, Deserialize)]
struct CocoAnnotation {
    id: u64,
    image_id: u64,
    category_id: u64,
    bbox: [f64; 4],
    area: f64,
    iscrowd: u8,
}

#[derive(Serialize, Deserialize)]
struct CocoCategory {
    id: u64,
    name: String,
    supercategory: String,
}

/// Category name for a class index; class 0 is smoke.
fn category_name(class_id: u32) -> String {
    if class_id == 0 {
        "smoke".to_string()
    } else {
        format!("class_{class_id}")
    }
}

/// Writes the visible boxes of a manifest as COCO detection JSON.
///
/// Image ids are 1-based record positions; category ids are `class_id + 1`;
/// boxes are converted to top-left `[x, y, w, h]`.
pub fn export_coco(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut images = Vec::with_capacity(manifest.len());
    let mut annotations = Vec::new();
    let mut classes = BTreeSet::new();
    for (i, r) in manifest.records.iter().enumerate() {
        let image_id = i as u64 + 1;
        images.push(CocoImage {
            id: image_id,
            file_name: format!("{}.png", r.image_id),
            width: r.width,
            height: r.height,
        });
        for b in &r.boxes {
            classes.insert(b.class_id);
            let [x1, y1, _, _] = b.corners();
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id,
                category_id: b.class_id as u64 + 1,
                bbox: [x1, y1, b.w, b.h],
                area: b.area(),
                iscrowd: 0,
            });
        }
    }
    let categories = classes
        .into_iter()
        .map(|c| CocoCategory {
            id: c as u64 + 1,
            name: category_name(c),
            supercategory: "fire".into(),
        })
        .collect();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    serde_json::to_writer(
        &mut out,
        &CocoFile {
            images,
            annotations,
            categories,
        },
    )?;
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads COCO detection JSON back into `(file stem, boxes)` pairs in image order.
pub fn import_coco(path: impl AsRef<Path>) -> Result<Vec<(String, Vec<BBox>)>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let coco: CocoFile = serde_json::from_reader(BufReader::new(file))
        .map_err(|e| Error::schema(path.display().to_string(), e.to_string()))?;
    let mut out: Vec<(u64, String, Vec<BBox>)> = coco
        .images
        .iter()
        .map(|im| {
            let stem = im
                .file_name
                .strip_suffix(".png")
                .unwrap_or(&im.file_name)
                .to_string();
            (im.id, stem, Vec::new())
        })
        .collect();
    for a in &coco.annotations {
        let slot = out
            .iter_mut()
            .find(|(id, _, _)| *id == a.image_id)
            .ok_or_else(|| Error::schema(format!("annotation {}", a.id), "unknown image_id"))?;
        if a.category_id == 0 {
            return Err(Error::schema(
                format!("annotation {}", a.id),
                "category ids start at 1",
            ));
        }
        let [x, y, w, h] = a.bbox;
        slot.2.push(BBox::new(
            (a.category_id - 1) as u32,
            x + w / 2.0,
            y + h / 2.0,
            w,
            h,
        ));
    }
    Ok(out.into_iter().map(|(_, s, b)| (s, b)).collect())
}
