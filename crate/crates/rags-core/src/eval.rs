//! Rotated-BEV IoU and average-precision evaluation.

use serde::{Deserialize, Serialize};

use crate::scene::Box3D;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(flatten)]
    pub box3d: Box3D,
    /// Confidence in [0, 1].
    pub score: f64,
}

/// Shoelace area of a convex polygon.
fn polygon_area(poly: &[[f64; 2]]) -> f64 {
    if poly.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..poly.len() {
        let p = poly[i];
        let q = poly[(i + 1) % poly.len()];
        acc += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * acc.abs()
}

/// Sutherland-Hodgman clip of `subject` against convex `clip` (CCW).
fn clip_polygon(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut output: Vec<[f64; 2]> = subject.to_vec();
    for i in 0..clip.len() {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        // Inside = left of edge a->b for a CCW clip polygon.
        let inside =
            |p: &[f64; 2]| (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]) >= 0.0;
        let input = std::mem::take(&mut output);
        for j in 0..input.len() {
            let cur = input[j];
            let prev = input[(j + input.len() - 1) % input.len()];
            let cur_in = inside(&cur);
            let prev_in = inside(&prev);
            if cur_in != prev_in {
                // Edge crossing: intersection of prev->cur with a->b.
                let d1 = (b[0] - a[0]) * (prev[1] - a[1]) - (b[1] - a[1]) * (prev[0] - a[0]);
                let d2 = (b[0] - a[0]) * (cur[1] - a[1]) - (b[1] - a[1]) * (cur[0] - a[0]);
                let t = d1 / (d1 - d2);
                output.push([
                    prev[0] + t * (cur[0] - prev[0]),
                    prev[1] + t * (cur[1] - prev[1]),
                ]);
            }
            if cur_in {
                output.push(cur);
            }
        }
    }
    output
}

/// Intersection-over-union of two yawed box footprints.
pub fn rotated_iou_bev(a: &Box3D, b: &Box3D) -> f64 {
    let pa = a.footprint_corners();
    let pb = b.footprint_corners();
    let inter = polygon_area(&clip_polygon(&pa, &pb));
    let area_a = a.size[0] * a.size[1];
    let area_b = b.size[0] * b.size[1];
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy scored matching and all-point PR interpolation for one class.
///
/// Detections are sorted by descending score (ties keep input order); each
/// detection matches the unmatched ground truth of its class with the
/// highest IoU at or above the threshold. AP is the area under the
/// precision-recall curve with the precision envelope taken over all points.
pub fn average_precision(
    detections: &[Detection],
    ground_truth: &[Box3D],
    iou_threshold: f64,
    class_id: u32,
) -> f64 {
    let gts: Vec<&Box3D> = ground_truth
        .iter()
        .filter(|g| g.class_id == class_id)
        .collect();
    if gts.is_empty() {
        return 0.0;
    }
    let mut dets: Vec<&Detection> = detections
        .iter()
        .filter(|d| d.box3d.class_id == class_id)
        .collect();
    dets.sort_by(|x, y| {
        y.score
            .partial_cmp(&x.score)
            .unwrap_or(std::cmp::Ordering::Equal)
    });

    let mut matched = vec![false; gts.len()];
    let mut tp = Vec::with_capacity(dets.len());
    for det in &dets {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in gts.iter().enumerate() {
            if matched[gi] {
                continue;
            }
            let iou = rotated_iou_bev(&det.box3d, gt);
            if iou >= iou_threshold && best.map_or(true, |(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        match best {
            Some((gi, _)) => {
                matched[gi] = true;
                tp.push(true);
            }
            None => tp.push(false),
        }
    }

    // Cumulative precision/recall points.
    let n_gt = gts.len() as f64;
    let mut points = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (rank, &is_tp) in tp.iter().enumerate() {
        if is_tp {
            hits += 1;
        }
        let precision = hits as f64 / (rank + 1) as f64;
        let recall = hits as f64 / n_gt;
        points.push((recall, precision));
    }
    // All-point interpolation: integrate recall steps against the running
    // max precision to the right.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for i in 0..points.len() {
        let (recall, _) = points[i];
        if recall > prev_recall {
            let envelope = points[i..]
                .iter()
                .map(|&(_, p)| p)
                .fold(0.0f64, f64::max);
            ap += (recall - prev_recall) * envelope;
            prev_recall = recall;
        }
    }
    ap
}

/// Unweighted mean AP over the classes present in the ground truth.
/// `thresholds` maps class_id to its IoU threshold; classes without an
/// entry fall back to `default_threshold`.
pub fn map_over_classes(
    detections: &[Detection],
    ground_truth: &[Box3D],
    thresholds: &[(u32, f64)],
    default_threshold: f64,
) -> f64 {
    let mut classes: Vec<u32> = ground_truth.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let total: f64 = classes
        .iter()
        .map(|&c| {
            let thresh = thresholds
                .iter()
                .find(|(tc, _)| *tc == c)
                .map_or(default_threshold, |(_, t)| *t);
            average_precision(detections, ground_truth, thresh, c)
        })
        .sum();
    total / classes.len() as f64
}

/// Region hook: retain boxes whose BEV center passes the mask. Official
/// benchmark region constants are not replicated; callers supply their own
/// predicate.
pub fn filter_region<F: Fn(&Box3D) -> bool>(boxes: &[Box3D], mask: F) -> Vec<Box3D> {
    boxes.iter().filter(|b| mask(b)).copied().collect()
}
