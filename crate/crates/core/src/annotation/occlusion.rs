//! Exact box-occlusion ratios.

use super::{BBox, FrameAnnotation};

pub const NUM_OCCLUSION_BUCKETS: usize = 5;

/// Fraction of `object`'s area covered by the union of `occluders`.
///
/// The union is measured exactly by sweeping the distinct x-coordinates of
/// the clipped occluders and merging the covering y-intervals per slab.
pub fn occlusion_ratio(object: &BBox, occluders: &[BBox]) -> f64 {
    let clipped: Vec<[f64; 4]> = occluders
        .iter()
        .filter_map(|o| {
            let x1 = o.x1.max(object.x1);
            let x2 = o.x2.min(object.x2);
            let y1 = o.y1.max(object.y1);
            let y2 = o.y2.min(object.y2);
            (x1 < x2 && y1 < y2).then_some([x1, y1, x2, y2])
        })
        .collect();
    if clipped.is_empty() {
        return 0.0;
    }
    let mut xs: Vec<f64> = clipped.iter().flat_map(|r| [r[0], r[2]]).collect();
    xs.sort_by(f64::total_cmp);
    xs.dedup();

    let mut covered = 0.0;
    let mut spans: Vec<(f64, f64)> = Vec::new();
    for w in xs.windows(2) {
        let (a, b) = (w[0], w[1]);
        spans.clear();
        spans.extend(clipped.iter().filter(|r| r[0] <= a && r[2] >= b).map(|r| (r[1], r[3])));
        if spans.is_empty() {
            continue;
        }
        spans.sort_by(|p, q| p.0.total_cmp(&q.0));
        let mut len = 0.0;
        let (mut lo, mut hi) = spans[0];
        for &(s, e) in &spans[1..] {
            if s > hi {
                len += hi - lo;
                lo = s;
                hi = e;
            } else {
                hi = hi.max(e);
            }
        }
        len += hi - lo;
        covered += len * (b - a);
    }
    (covered / object.area()).clamp(0.0, 1.0)
}

/// Bucket index for `[0,.2) [.2,.4) [.4,.6) [.6,.8) [.8,1]`.
pub fn occlusion_bucket(ratio: f64) -> usize {
    const EDGES: [f64; 4] = [0.2, 0.4, 0.6, 0.8];
    EDGES.iter().take_while(|&&e| ratio >= e).count()
}

/// Occlusion ratio of instance `index`'s object box by every hand box in
/// the frame and the object boxes of the other instances.
pub fn instance_occlusion(frame: &FrameAnnotation, index: usize) -> f64 {
    let target = &frame.instances[index];
    let occluders: Vec<BBox> = frame
        .hand_boxes()
        .map(|h| h.bbox)
        .chain(
            frame
                .instances
                .iter()
                .enumerate()
                .filter(|&(k, _)| k != index)
                .map(|(_, i)| i.object_box),
        )
        .collect();
    occlusion_ratio(&target.object_box, &occluders)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn full_and_empty() {
        let o = bb(0.0, 0.0, 1.0, 1.0);
        assert_eq!(occlusion_ratio(&o, &[o]), 1.0);
        assert_eq!(occlusion_ratio(&o, &[]), 0.0);
    }

    #[test]
    fn overlapping_occluders_counted_once() {
        let o = bb(0.0, 0.0, 0.2, 0.2);
        let r = occlusion_ratio(&o, &[bb(0.0, 0.0, 0.1, 0.1), bb(0.05, 0.0, 0.15, 0.1)]);
        assert!((r - 0.375).abs() < 1e-12);
    }

    #[test]
    fn bucket_edges() {
        assert_eq!(occlusion_bucket(0.0), 0);
        assert_eq!(occlusion_bucket(0.1999), 0);
        assert_eq!(occlusion_bucket(0.2), 1);
        assert_eq!(occlusion_bucket(0.4), 2);
        assert_eq!(occlusion_bucket(0.6), 3);
        assert_eq!(occlusion_bucket(0.8), 4);
        assert_eq!(occlusion_bucket(1.0), 4);
    }
}
