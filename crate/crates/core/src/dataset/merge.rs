use std::collections::BTreeMap;

use super::BBox;

/// Collapses all boxes of each class into the single rectangle enclosing them.
///
/// Output is ordered by class id. A class with a single box keeps it unchanged.
pub fn merge_boxes(boxes: &[BBox]) -> Vec<BBox> {
    let mut groups: BTreeMap<u32, Vec<&BBox>> = BTreeMap::new();
    for b in boxes {
        groups.entry(b.class_id).or_default().push(b);
    }
    groups
        .into_iter()
        .map(|(class_id, members)| {
            if let [only] = members.as_slice() {
                return **only;
            }
            let mut ext = [
                f64::INFINITY,
                f64::INFINITY,
                f64::NEG_INFINITY,
                f64::NEG_INFINITY,
            ];
            for b in members {
                let [x1, y1, x2, y2] = b.corners();
                ext[0] = ext[0].min(x1);
                ext[1] = ext[1].min(y1);
                ext[2] = ext[2].max(x2);
                ext[3] = ext[3].max(y2);
            }
            BBox::from_corners(class_id, ext)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn merges_two_boxes_into_their_union_rectangle() {
        let a = BBox::from_corners(0, [0.0, 0.0, 10.0, 10.0]);
        let b = BBox::from_corners(0, [20.0, 0.0, 30.0, 10.0]);
        let m = merge_boxes(&[a, b]);
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].corners(), [0.0, 0.0, 30.0, 10.0]);
    }

    #[test]
    fn single_box_and_empty_input() {
        let a = BBox::new(2, 3.3, 4.4, 1.1, 2.2);
        assert_eq!(merge_boxes(&[a]), vec![a]);
        assert!(merge_boxes(&[]).is_empty());
    }

    #[test]
    fn classes_are_merged_separately() {
        let boxes = [
            BBox::from_corners(1, [0.0, 0.0, 2.0, 2.0]),
            BBox::from_corners(0, [5.0, 5.0, 6.0, 6.0]),
            BBox::from_corners(1, [4.0, 1.0, 8.0, 3.0]),
        ];
        let m = merge_boxes(&boxes);
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].class_id, 0);
        assert_eq!(m[1].corners(), [0.0, 0.0, 8.0, 3.0]);
    }
}
