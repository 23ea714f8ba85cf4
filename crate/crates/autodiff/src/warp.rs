//! Rigid resampling of HWC grids.
//!
//! Grid coordinates are measured in voxels relative to the grid center:
//! cell `(row, col)` has its center at `(col + 0.5 - W/2, row + 0.5 - H/2)`,
//! with columns along x and rows along y.

use std::sync::Arc;

/// Planar rigid motion in voxel units, mapping source-grid coordinates to
/// destination-grid coordinates: `q = R(yaw) p + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid2 {
    pub cos: f64,
    pub sin: f64,
    pub tx: f64,
    pub ty: f64,
}

impl Rigid2 {
    pub const IDENTITY: Rigid2 = Rigid2 {
        cos: 1.0,
        sin: 0.0,
        tx: 0.0,
        ty: 0.0,
    };

    pub fn new(yaw: f64, tx: f64, ty: f64) -> Self {
        Self {
            cos: yaw.cos(),
            sin: yaw.sin(),
            tx,
            ty,
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self { tx, ty, ..Self::IDENTITY }
    }

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        (
            self.cos * x - self.sin * y + self.tx,
            self.sin * x + self.cos * y + self.ty,
        )
    }

    pub fn apply_inverse(&self, x: f64, y: f64) -> (f64, f64) {
        let (dx, dy) = (x - self.tx, y - self.ty);
        (self.cos * dx + self.sin * dy, -self.sin * dx + self.cos * dy)
    }

    pub fn inverse(&self) -> Self {
        let (tx, ty) = self.apply_inverse(0.0, 0.0);
        Self {
            cos: self.cos,
            sin: -self.sin,
            tx,
            ty,
        }
    }
}

/// Sparse bilinear sampling matrix: for every destination cell, up to four
/// `(source cell, weight)` taps. The warp is linear in the sampled grid, so the
/// same taps drive both the forward pass and its transpose.
#[derive(Debug, Clone)]
pub(crate) struct WarpTaps {
    /// `starts[d]..starts[d + 1]` indexes the taps of destination cell `d`.
    starts: Vec<u32>,
    src: Vec<u32>,
    weight: Vec<f64>,
}

impl WarpTaps {
    pub(crate) fn bilinear(h: usize, w: usize, transform: &Rigid2) -> Arc<Self> {
        let mut starts = Vec::with_capacity(h * w + 1);
        let mut src = Vec::with_capacity(h * w * 4);
        let mut weight = Vec::with_capacity(h * w * 4);
        let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
        for r in 0..h {
            for c in 0..w {
                starts.push(src.len() as u32);
                let qx = c as f64 + 0.5 - hw;
                let qy = r as f64 + 0.5 - hh;
                let (px, py) = transform.apply_inverse(qx, qy);
                let cs = px + hw - 0.5;
                let rs = py + hh - 0.5;
                let (c0, r0) = (cs.floor(), rs.floor());
                let (fc, fr) = (cs - c0, rs - r0);
                for (dr, wr) in [(0.0, 1.0 - fr), (1.0, fr)] {
                    for (dc, wc) in [(0.0, 1.0 - fc), (1.0, fc)] {
                        let wt = wr * wc;
                        let (sr, sc) = (r0 + dr, c0 + dc);
                        if wt == 0.0 || sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64
                        {
                            continue;
                        }
                        src.push((sr as usize * w + sc as usize) as u32);
                        weight.push(wt);
                    }
                }
            }
        }
        starts.push(src.len() as u32);
        Arc::new(Self {
            starts,
            src,
            weight,
        })
    }

    pub(crate) fn forward(&self, input: &[f64], channels: usize) -> Vec<f64> {
        let cells = self.starts.len() - 1;
        let mut out = vec![0.0; cells * channels];
        for d in 0..cells {
            let dst = &mut out[d * channels..(d + 1) * channels];
            for t in self.starts[d] as usize..self.starts[d + 1] as usize {
                let s = self.src[t] as usize * channels;
                let wt = self.weight[t];
                for (o, v) in dst.iter_mut().zip(&input[s..s + channels]) {
                    *o += wt * v;
                }
            }
        }
        out
    }

    pub(crate) fn backward(&self, grad_out: &[f64], channels: usize, grad_in: &mut [f64]) {
        let cells = self.starts.len() - 1;
        for d in 0..cells {
            let g = &grad_out[d * channels..(d + 1) * channels];
            for t in self.starts[d] as usize..self.starts[d + 1] as usize {
                let s = self.src[t] as usize * channels;
                let wt = self.weight[t];
                for (gi, go) in grad_in[s..s + channels].iter_mut().zip(g) {
                    *gi += wt * go;
                }
            }
        }
    }
}

/// Nearest-neighbor resampling of an HWC grid (no differentiation); cells that
/// map outside the source read zero. Used for binary occupancy grids.
pub fn nearest_warp(data: &[f64], h: usize, w: usize, c: usize, transform: &Rigid2) -> Vec<f64> {
    let mut out = vec![0.0; h * w * c];
    let (hh, hw) = (h as f64 / 2.0, w as f64 / 2.0);
    for r in 0..h {
        for col in 0..w {
            let (px, py) = transform.apply_inverse(col as f64 + 0.5 - hw, r as f64 + 0.5 - hh);
            let sc = (px + hw - 0.5).round();
            let sr = (py + hh - 0.5).round();
            if sr < 0.0 || sc < 0.0 || sr >= h as f64 || sc >= w as f64 {
                continue;
            }
            let s = (sr as usize * w + sc as usize) * c;
            let d = (r * w + col) * c;
            out[d..d + c].copy_from_slice(&data[s..s + c]);
        }
    }
    out
}
