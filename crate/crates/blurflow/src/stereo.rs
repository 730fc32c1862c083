//! Disparity bootstrap: ZNCC block matching with a four-path semi-global
//! smoothing pass, left-right consistency masking and subpixel refinement.

use rayon::prelude::*;

use crate::types::{DisparityMap, Image};
use crate::{Error, Result};

const PATCH_RADIUS: usize = 4; // 9x9 windows
const ZNCC_MIN_VARIANCE: f64 = 1e-8;
const SGM_P1: f64 = 0.05;
const SGM_P2: f64 = 0.4;
const INVALID_COST: f64 = 2.0;

/// Dense cost volume: 1 - ZNCC over 9x9 windows, in [0, 2].
/// `sign = -1` matches left against right (right is left shifted by -d);
/// `sign = +1` matches right against left.
fn cost_volume(base: &Image, other: &Image, max_disp: usize, sign: i64) -> Vec<f64> {
    let (h, w) = (base.height, base.width);
    let r = PATCH_RADIUS as i64;
    let costs: Vec<Vec<f64>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![INVALID_COST; w * (max_disp + 1)];
            let yy = y as i64;
            if yy < r || yy + r >= h as i64 {
                return row;
            }
            for x in r..w as i64 - r {
                for d in 0..=max_disp as i64 {
                    let ox = x + sign * d;
                    if ox < r || ox + r >= w as i64 {
                        continue;
                    }
                    // ZNCC over the window.
                    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for dy in -r..=r {
                        for dx in -r..=r {
                            let a = base.get((x + dx) as usize, (yy + dy) as usize, 0);
                            let b = other.get((ox + dx) as usize, (yy + dy) as usize, 0);
                            sa += a;
                            sb += b;
                            saa += a * a;
                            sbb += b * b;
                            sab += a * b;
                        }
                    }
                    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
                    let va = saa - sa * sa / n;
                    let vb = sbb - sb * sb / n;
                    if va < ZNCC_MIN_VARIANCE || vb < ZNCC_MIN_VARIANCE {
                        continue;
                    }
                    let zncc = (sab - sa * sb / n) / (va * vb).sqrt();
                    row[x as usize * (max_disp + 1) + d as usize] = 1.0 - zncc;
                }
            }
            row
        })
        .collect();
    let mut flat = vec![INVALID_COST; h * w * (max_disp + 1)];
    for (y, row) in costs.into_iter().enumerate() {
        flat[y * w * (max_disp + 1)..(y + 1) * w * (max_disp + 1)].copy_from_slice(&row);
    }
    flat
}

/// Four-path semi-global aggregation (horizontal and vertical sweeps).
fn sgm_aggregate(cost: &[f64], h: usize, w: usize, nd: usize) -> Vec<f64> {
    let mut total = vec![0.0f64; h * w * nd];
    // Path directions: (dx, dy).
    for (dx, dy) in [(1i64, 0i64), (-1, 0), (0, 1), (0, -1)] {
        let mut path = vec![0.0f64; h * w * nd];
        let xs: Vec<usize> = if dx > 0 { (0..w).collect() } else { (0..w).rev().collect() };
        let ys: Vec<usize> = if dy > 0 { (0..h).collect() } else { (0..h).rev().collect() };
        for &y in &ys {
            for &x in &xs {
                let idx = (y * w + x) * nd;
                let px = x as i64 - dx;
                let py = y as i64 - dy;
                if px < 0 || py < 0 || px >= w as i64 || py >= h as i64 {
                    path[idx..idx + nd].copy_from_slice(&cost[idx..idx + nd]);
                    continue;
                }
                let pidx = (py as usize * w + px as usize) * nd;
                let prev: Vec<f64> = path[pidx..pidx + nd].to_vec();
                let prev_min = prev.iter().cloned().fold(f64::INFINITY, f64::min);
                for d in 0..nd {
                    let mut best = prev[d];
                    if d > 0 {
                        best = best.min(prev[d - 1] + SGM_P1);
                    }
                    if d + 1 < nd {
                        best = best.min(prev[d + 1] + SGM_P1);
                    }
                    best = best.min(prev_min + SGM_P2);
                    path[idx + d] = cost[idx + d] + best - prev_min;
                }
            }
        }
        for (t, p) in total.iter_mut().zip(&path) {
            *t += p;
        }
    }
    total
}

/// Winner-take-all with parabolic subpixel refinement; pixels whose raw
/// cost at the winner is invalid stay invalid.
fn decide(cost: &[f64], agg: &[f64], h: usize, w: usize, nd: usize) -> DisparityMap {
    let mut map = DisparityMap::invalid(h, w);
    for y in 0..h {
        for x in 0..w {
            let idx = (y * w + x) * nd;
            let s = &agg[idx..idx + nd];
            let mut best = 0;
            for d in 1..nd {
                if s[d] < s[best] {
                    best = d;
                }
            }
            if cost[idx + best] >= INVALID_COST {
                continue;
            }
            let mut d = best as f64;
            if best > 0 && best + 1 < nd {
                let (c0, c1, c2) = (s[best - 1], s[best], s[best + 1]);
                let denom = c0 - 2.0 * c1 + c2;
                if denom > 1e-12 {
                    let off = 0.5 * (c0 - c2) / denom;
                    if off.abs() <= 0.5 {
                        d += off;
                    }
                }
            }
            map.set(x, y, d.max(0.0));
        }
    }
    map
}

/// Block-matching disparity with semi-global smoothing and left-right
/// consistency masking. Inconsistent or textureless pixels are invalid.
pub fn init_disparity(left: &Image, right: &Image, max_disp: usize) -> Result<DisparityMap> {
    if !left.same_shape(right) {
        return Err(Error::DimensionMismatch("stereo pair differs in shape".into()));
    }
    if max_disp >= left.width {
        return Err(Error::InvalidInput(format!(
            "max_disp {max_disp} must be below the image width {}",
            left.width
        )));
    }
    let (h, w) = (left.height, left.width);
    let nd = max_disp + 1;
    let gl = left.to_gray();
    let gr = right.to_gray();

    let cost_l = cost_volume(&gl, &gr, max_disp, -1);
    let agg_l = sgm_aggregate(&cost_l, h, w, nd);
    let mut disp_l = decide(&cost_l, &agg_l, h, w, nd);

    let cost_r = cost_volume(&gr, &gl, max_disp, 1);
    let agg_r = sgm_aggregate(&cost_r, h, w, nd);
    let disp_r = decide(&cost_r, &agg_r, h, w, nd);

    for y in 0..h {
        for x in 0..w {
            if !disp_l.is_valid(x, y) {
                continue;
            }
            let d = disp_l.at(x, y);
            let xr = x as i64 - d.round() as i64;
            let consistent = xr >= 0
                && (xr as usize) < w
                && disp_r.is_valid(xr as usize, y)
                && (disp_r.at(xr as usize, y) - d).abs() <= 1.0;
            if !consistent {
                disp_l.set(x, y, crate::types::INVALID_DISPARITY);
            }
        }
    }
    Ok(disp_l)
}

/// Fill invalid pixels with the nearest valid disparity (scanline fill
/// then column fill); used to densify the bootstrap before clustering and
/// plane fitting.
pub fn fill_invalid(map: &DisparityMap) -> DisparityMap {
    let (h, w) = (map.height, map.width);
    let mut out = map.clone();
    for y in 0..h {
        // Left-to-right then right-to-left propagation.
        let mut last = f64::NAN;
        for x in 0..w {
            if out.is_valid(x, y) {
                last = out.at(x, y);
            } else if last.is_finite() {
                out.set(x, y, last);
            }
        }
        let mut last = f64::NAN;
        for x in (0..w).rev() {
            if out.is_valid(x, y) {
                last = out.at(x, y);
            } else if last.is_finite() {
                out.set(x, y, last);
            }
        }
    }
    // Column fill for rows that were entirely invalid.
    for x in 0..w {
        let mut last = f64::NAN;
        for y in 0..h {
            if out.is_valid(x, y) {
                last = out.at(x, y);
            } else if last.is_finite() {
                out.set(x, y, last);
            }
        }
        let mut last = f64::NAN;
        for y in (0..h).rev() {
            if out.is_valid(x, y) {
                last = out.at(x, y);
            } else if last.is_finite() {
                out.set(x, y, last);
            }
        }
    }
    out
}
