//! Exact Hausdorff distance between pixel sets.
//!
//! All-pairs search with the early-break rule: while scanning for the nearest
//! neighbour of a point, stop as soon as a distance below the running maximum
//! is found, since that point can no longer raise the directed distance.
//! Points of one set that also belong to the other have distance zero and
//! are skipped through a membership mask when one is available.

use crate::data::ClassMap;

pub type Point = (i32, i32);

fn sq_dist(a: Point, b: Point) -> i64 {
    let dr = i64::from(a.0 - b.0);
    let dc = i64::from(a.1 - b.1);
    dr * dr + dc * dc
}

/// Directed distance `sup_{a∈from} inf_{b∈to} d(a, b)`, squared. `to_mask`
/// optionally answers membership in `to` in constant time.
fn directed_sq(from: &[Point], to: &[Point], to_mask: Option<&dyn Fn(Point) -> bool>) -> i64 {
    let mut cmax = 0i64;
    for &a in from {
        if let Some(contains) = to_mask {
            if contains(a) {
                continue;
            }
        }
        let mut cmin = i64::MAX;
        for &b in to {
            let d = sq_dist(a, b);
            if d < cmax {
                cmin = d;
                break;
            }
            cmin = cmin.min(d);
        }
        if cmin > cmax {
            cmax = cmin;
        }
    }
    cmax
}

/// Symmetric Hausdorff distance, `None` when either set is empty.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Option<f64> {
    if a.is_empty() || b.is_empty() {
        return None;
    }
    let d = directed_sq(a, b, None).max(directed_sq(b, a, None));
    Some((d as f64).sqrt())
}

pub fn class_points(map: &ClassMap, class: u8) -> Vec<Point> {
    let mut pts = Vec::new();
    for r in 0..map.height {
        for c in 0..map.width {
            if map.get(r, c) == class {
                pts.push((r as i32, c as i32));
            }
        }
    }
    pts
}

/// Hausdorff distance between the `class` regions of two maps of equal size.
pub fn hausdorff_class(pred: &ClassMap, gt: &ClassMap, class: u8) -> Option<f64> {
    let p = class_points(pred, class);
    let g = class_points(gt, class);
    if p.is_empty() || g.is_empty() {
        return None;
    }
    let in_pred = |pt: Point| pred.get(pt.0 as usize, pt.1 as usize) == class;
    let in_gt = |pt: Point| gt.get(pt.0 as usize, pt.1 as usize) == class;
    let d = directed_sq(&g, &p, Some(&in_pred)).max(directed_sq(&p, &g, Some(&in_gt)));
    Some((d as f64).sqrt())
}
