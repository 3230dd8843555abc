//! One enclosing box per class and image.

use lada::dataset::{merge_boxes, BBox};

fn main() {
    let boxes = vec![
        BBox::from_corners(0, [10.0, 40.0, 18.0, 52.0]),
        BBox::from_corners(0, [15.0, 30.0, 24.0, 45.0]),
        BBox::from_corners(1, [50.0, 50.0, 60.0, 58.0]),
    ];
    let merged = merge_boxes(&boxes);
    for b in &merged {
        println!("class {} -> {:?}", b.class_id, b.corners());
    }
    assert_eq!(merge_boxes(&merged), merged);
}
