//! COCO-style mAP over IoU 0.50:0.95 for a handful of hand-made detections.

use lada::dataset::BBox;
use lada::metrics::{evaluate, iou, Detection, GroundTruth};

fn main() -> lada::Result<()> {
    let mut gts = GroundTruth::new();
    gts.insert(
        "a".into(),
        vec![BBox::from_corners(0, [10.0, 10.0, 30.0, 40.0])],
    );
    gts.insert(
        "b".into(),
        vec![BBox::from_corners(0, [5.0, 20.0, 25.0, 30.0])],
    );
    gts.insert("c".into(), vec![]);

    let det = |id: &str, score, c| Detection {
        image_id: id.into(),
        bbox: BBox::from_corners(0, c),
        score,
    };
    let dets = vec![
        det("a", 0.95, [11.0, 12.0, 30.0, 41.0]),
        det("b", 0.80, [8.0, 20.0, 25.0, 33.0]),
        det("c", 0.60, [0.0, 0.0, 9.0, 9.0]),
    ];
    for d in &dets[..2] {
        println!(
            "{}: IoU {:.3}",
            d.image_id,
            iou(&d.bbox, &gts[&d.image_id][0])
        );
    }
    let r = evaluate(&dets, &gts)?;
    for (t, ap) in &r.per_threshold_ap {
        println!("AP@{t:.2} = {ap:.3}");
    }
    println!(
        "mAP@0.5 = {:.3}, mAP@[.5:.95] = {:.3}",
        r.map_50, r.map_50_95
    );
    Ok(())
}
