//! Brute-force reference implementations shared by the integration tests.
#![allow(dead_code)]

use autodiff::Tensor;
use coperception::geometry::{Rect, Se2};
use coperception::perception::{detection_order, Detection};
use coperception::scene::{GridConfig, HitPoint, Scene};

/// First object met by marching the ray in `step` increments, as
/// `(distance, object)`.
pub fn ray_march(scene: &Scene, origin: (f64, f64), dir: (f64, f64), max_range: f64, step: f64) -> Option<(f64, usize)> {
    let n = (max_range / step).floor() as usize;
    (1..=n).find_map(|k| {
        let t = k as f64 * step;
        let (x, y) = (origin.0 + t * dir.0, origin.1 + t * dir.1);
        scene
            .objects
            .iter()
            .position(|o| inside(&o.rect, x, y))
            .map(|i| (t, i))
    })
}

pub fn inside(r: &Rect, x: f64, y: f64) -> bool {
    let (hw, hl) = (0.5 * r.width, 0.5 * r.length);
    x >= r.cx - hw && x <= r.cx + hw && y >= r.cy - hl && y <= r.cy + hl
}

/// Length of the ray's chord through `r`, by dense sampling.
pub fn chord(r: &Rect, origin: (f64, f64), dir: (f64, f64), max_range: f64, step: f64) -> f64 {
    let n = (max_range / step).floor() as usize;
    (1..=n)
        .filter(|&k| {
            let t = k as f64 * step;
            inside(r, origin.0 + t * dir.0, origin.1 + t * dir.1)
        })
        .count() as f64
        * step
}

/// Axis-aligned intersection area from interval overlaps.
pub fn overlap_area(a: &Rect, b: &Rect) -> f64 {
    let ix = (a.cx + 0.5 * a.width).min(b.cx + 0.5 * b.width) - (a.cx - 0.5 * a.width).max(b.cx - 0.5 * b.width);
    let iy = (a.cy + 0.5 * a.length).min(b.cy + 0.5 * b.length) - (a.cy - 0.5 * a.length).max(b.cy - 0.5 * b.length);
    ix.max(0.0) * iy.max(0.0)
}

/// Occupancy by testing every cell and band against every point.
pub fn brute_binning(points: &[HitPoint], ego: &Se2, grid: &GridConfig) -> Tensor {
    let n = grid.size;
    let res = grid.resolution;
    let mut out = Tensor::zeros([n, n, grid.channels]);
    for r in 0..n {
        for c in 0..n {
            let (cx, cy) = grid.cell_center(r, c);
            for p in points {
                let (s, co) = ego.yaw.sin_cos();
                let (dx, dy) = (p.x - ego.x, p.y - ego.y);
                let (ex, ey) = (co * dx + s * dy, -s * dx + co * dy);
                let hit = ex >= cx - 0.5 * res && ex < cx + 0.5 * res && ey >= cy - 0.5 * res && ey < cy + 0.5 * res;
                if hit {
                    for band in 0..grid.channels {
                        if band == 0 || p.height > band as f64 * grid.band_height {
                            out.set(&[r, c, band], 1.0);
                        }
                    }
                }
            }
        }
    }
    out
}

/// Whether `kept` is exactly the greedy suppression result of `input`: every
/// survivor clears all higher-ranked survivors and every suppressed box
/// overlaps one of them above the threshold.
pub fn nms_is_consistent(input: &[Detection], kept: &[Detection], threshold: f64) -> bool {
    let mut sorted = input.to_vec();
    sorted.sort_by(detection_order);
    let mut survivors: Vec<Detection> = Vec::new();
    for d in &sorted {
        let is_kept = kept.contains(d);
        let blocked = survivors.iter().any(|s| s.rect.iou(&d.rect) > threshold);
        if is_kept == blocked {
            return false;
        }
        if is_kept {
            survivors.push(*d);
        }
    }
    survivors == kept
}

/// Average precision by recomputing the greedy matching from scratch for
/// every prefix of the ranking and integrating the interpolated precision
/// over each distinct recall level.
pub fn exhaustive_ap(dets: &[Vec<Detection>], gts: &[Vec<Rect>], thr: f64) -> f64 {
    let total: usize = gts.iter().map(Vec::len).sum();
    if total == 0 {
        return 0.0;
    }
    let mut pool: Vec<(usize, Detection)> = dets
        .iter()
        .enumerate()
        .flat_map(|(f, ds)| ds.iter().map(move |d| (f, *d)))
        .collect();
    pool.sort_by(|a, b| detection_order(&a.1, &b.1).then(a.0.cmp(&b.0)));
    let mut points = Vec::new();
    for k in 1..=pool.len() {
        let mut used: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
        let mut tp = 0;
        for (f, d) in &pool[..k] {
            let mut best: Option<(usize, f64)> = None;
            for (i, g) in gts[*f].iter().enumerate() {
                let iou = g.iou(&d.rect);
                if !used[*f][i] && iou >= thr && best.map_or(true, |(_, b)| iou > b) {
                    best = Some((i, iou));
                }
            }
            if let Some((i, _)) = best {
                used[*f][i] = true;
                tp += 1;
            }
        }
        points.push((tp as f64 / total as f64, tp as f64 / k as f64));
    }
    let mut levels: Vec<f64> = points.iter().map(|p| p.0).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    let mut prev = 0.0;
    let mut ap = 0.0;
    for v in levels {
        let best = points
            .iter()
            .filter(|p| p.0 >= v)
            .map(|p| p.1)
            .fold(0.0, f64::max);
        ap += (v - prev) * best;
        prev = v;
    }
    ap
}
