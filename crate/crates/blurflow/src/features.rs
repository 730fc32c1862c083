//! Sparse correspondences and rigid-motion hypotheses: Harris-style
//! corners, ZNCC matching with mutual consistency and subpixel refinement,
//! and greedy sequential 3-point RANSAC with a Procrustes solver.

use nalgebra::{Matrix3, Vector3};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::geometry::RigidMotion;
use crate::types::Image;

const MATCH_RADIUS: usize = 5; // 11x11 ZNCC patches
const MIN_ZNCC: f64 = 0.55;

/// Harris corner detection with non-maximum suppression; returns up to
/// `max_corners` positions sorted by response.
pub fn harris_corners(img: &Image, max_corners: usize, nms_radius: usize) -> Vec<(usize, usize)> {
    let g = img.to_gray();
    let (h, w) = (g.height, g.width);
    if h < 8 || w < 8 {
        return Vec::new();
    }
    let mut ix = vec![0.0; h * w];
    let mut iy = vec![0.0; h * w];
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            ix[y * w + x] = (g.get(x + 1, y, 0) - g.get(x - 1, y, 0)) * 0.5;
            iy[y * w + x] = (g.get(x, y + 1, 0) - g.get(x, y - 1, 0)) * 0.5;
        }
    }
    let mut response = vec![0.0f64; h * w];
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
            for dy in -2i64..=2 {
                for dx in -2i64..=2 {
                    let i = ((y as i64 + dy) * w as i64 + x as i64 + dx) as usize;
                    sxx += ix[i] * ix[i];
                    syy += iy[i] * iy[i];
                    sxy += ix[i] * iy[i];
                }
            }
            response[y * w + x] = sxx * syy - sxy * sxy - 0.04 * (sxx + syy).powi(2);
        }
    }
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    let r = nms_radius as i64;
    for y in 2..h - 2 {
        for x in 2..w - 2 {
            let v = response[y * w + x];
            if v <= 1e-10 {
                continue;
            }
            let mut is_max = true;
            'nms: for dy in -r..=r {
                for dx in -r..=r {
                    let (sx, sy) = (x as i64 + dx, y as i64 + dy);
                    if sx >= 0 && sy >= 0 && (sx as usize) < w && (sy as usize) < h {
                        let other = response[sy as usize * w + sx as usize];
                        if other > v || (other == v && (sy, sx) < (y as i64, x as i64)) {
                            is_max = false;
                            break 'nms;
                        }
                    }
                }
            }
            if is_max {
                candidates.push((x, y, v));
            }
        }
    }
    candidates.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap().then((a.1, a.0).cmp(&(b.1, b.0))));
    candidates.truncate(max_corners);
    candidates.into_iter().map(|(x, y, _)| (x, y)).collect()
}

fn zncc_at(a: &Image, ax: i64, ay: i64, b: &Image, bx: i64, by: i64) -> Option<f64> {
    let r = MATCH_RADIUS as i64;
    if ax < r || ay < r || ax + r >= a.width as i64 || ay + r >= a.height as i64 {
        return None;
    }
    if bx < r || by < r || bx + r >= b.width as i64 || by + r >= b.height as i64 {
        return None;
    }
    let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for dy in -r..=r {
        for dx in -r..=r {
            let va = a.get((ax + dx) as usize, (ay + dy) as usize, 0);
            let vb = b.get((bx + dx) as usize, (by + dy) as usize, 0);
            sa += va;
            sb += vb;
            saa += va * va;
            sbb += vb * vb;
            sab += va * vb;
        }
    }
    let n = ((2 * r + 1) * (2 * r + 1)) as f64;
    let va = saa - sa * sa / n;
    let vb = sbb - sb * sb / n;
    if va < 1e-10 || vb < 1e-10 {
        return None;
    }
    Some((sab - sa * sb / n) / (va * vb).sqrt())
}

/// Best match of patch at `p` in image `b` within a search window, with
/// parabolic subpixel refinement. Returns (position, zncc).
fn best_match(
    a: &Image,
    p: (usize, usize),
    b: &Image,
    search_x: (i64, i64),
    search_y: (i64, i64),
) -> Option<((f64, f64), f64)> {
    let (px, py) = (p.0 as i64, p.1 as i64);
    let mut best: Option<(i64, i64, f64)> = None;
    for dy in search_y.0..=search_y.1 {
        for dx in search_x.0..=search_x.1 {
            if let Some(z) = zncc_at(a, px, py, b, px + dx, py + dy) {
                if best.map_or(true, |(_, _, bz)| z > bz) {
                    best = Some((dx, dy, z));
                }
            }
        }
    }
    let (dx, dy, z) = best?;
    if z < MIN_ZNCC {
        return None;
    }
    // Separable parabolic refinement from the neighbouring scores.
    let score = |ddx: i64, ddy: i64| zncc_at(a, px, py, b, px + dx + ddx, py + dy + ddy);
    let refine = |m1: Option<f64>, p1: Option<f64>| -> f64 {
        match (m1, p1) {
            (Some(a_), Some(b_)) => {
                let denom = 2.0 * z - a_ - b_;
                if denom > 1e-12 {
                    (0.5 * (b_ - a_) / denom).clamp(-0.5, 0.5)
                } else {
                    0.0
                }
            }
            _ => 0.0,
        }
    };
    let ox = refine(score(-1, 0), score(1, 0));
    let oy = refine(score(0, -1), score(0, 1));
    Some((((px + dx) as f64 + ox, (py + dy) as f64 + oy), z))
}

/// Mutually consistent sparse matches from `a` to `b` with subpixel
/// refinement. Search bounds are signed pixel offsets.
pub fn sparse_matches(
    a: &Image,
    b: &Image,
    search_x: (i64, i64),
    search_y: (i64, i64),
    max_corners: usize,
) -> Vec<((f64, f64), (f64, f64))> {
    let ga = a.to_gray();
    let gb = b.to_gray();
    let corners = harris_corners(&ga, max_corners, 4);
    let mut out = Vec::new();
    for (cx, cy) in corners {
        let Some(((mx, my), _)) = best_match(&ga, (cx, cy), &gb, search_x, search_y) else {
            continue;
        };
        // Mutual check: match back and require agreement within 1 px.
        let back = best_match(
            &gb,
            (mx.round() as usize, my.round() as usize),
            &ga,
            (-search_x.1, -search_x.0),
            (-search_y.1, -search_y.0),
        );
        let Some(((bx, by), _)) = back else { continue };
        if (bx - cx as f64).abs() <= 1.0 && (by - cy as f64).abs() <= 1.0 {
            out.push(((cx as f64, cy as f64), (mx, my)));
        }
    }
    out
}

/// Least-squares rigid motion X' = R X - t from paired points (Kabsch).
pub fn procrustes(pairs: &[(Vector3<f64>, Vector3<f64>)]) -> Option<RigidMotion> {
    if pairs.len() < 3 {
        return None;
    }
    let n = pairs.len() as f64;
    let ca = pairs.iter().map(|(a, _)| a).sum::<Vector3<f64>>() / n;
    let cb = pairs.iter().map(|(_, b)| b).sum::<Vector3<f64>>() / n;
    let mut h = Matrix3::zeros();
    for (a, b) in pairs {
        h += (a - ca) * (b - cb).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let d = (v * u.transpose()).determinant();
    let r = v * Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, d.signum())) * u.transpose();
    // X' = R X + t0 with t0 = cb - R ca; our convention stores t = -t0.
    Some(RigidMotion {
        r,
        t: r * ca - cb,
    })
}

/// One recovered motion with the indices of its supporting pairs.
#[derive(Debug, Clone)]
pub struct MotionHypothesis {
    pub motion: RigidMotion,
    pub inliers: Vec<usize>,
}

/// Greedy sequential RANSAC over 3D point pairs: fit the dominant rigid
/// motion with a 3-point Procrustes solver, remove its inliers, repeat.
/// The first hypothesis is the background/ego motion.
pub fn ransac_motions(
    pairs: &[(Vector3<f64>, Vector3<f64>)],
    max_objects: usize,
    threshold: f64,
    seed: u64,
) -> Vec<MotionHypothesis> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut remaining: Vec<usize> = (0..pairs.len()).collect();
    let mut out = Vec::new();
    // A hypothesis supported only by its own minimal sample is noise.
    let min_support = 6.min(pairs.len().max(3));
    while out.len() < max_objects && remaining.len() >= min_support {
        let mut best_inliers: Vec<usize> = Vec::new();
        for _ in 0..250 {
            let mut idx = [0usize; 3];
            for slot in &mut idx {
                *slot = remaining[rng.gen_range(0..remaining.len())];
            }
            if idx[0] == idx[1] || idx[1] == idx[2] || idx[0] == idx[2] {
                continue;
            }
            let sample: Vec<_> = idx.iter().map(|&i| pairs[i]).collect();
            let Some(m) = procrustes(&sample) else { continue };
            let inliers: Vec<usize> = remaining
                .iter()
                .copied()
                .filter(|&i| (m.apply(&pairs[i].0) - pairs[i].1).norm() < threshold)
                .collect();
            if inliers.len() > best_inliers.len() {
                best_inliers = inliers;
            }
        }
        if best_inliers.len() < min_support {
            break;
        }
        // Refit on all inliers, then re-collect supporters.
        let sample: Vec<_> = best_inliers.iter().map(|&i| pairs[i]).collect();
        let Some(motion) = procrustes(&sample) else { break };
        let inliers: Vec<usize> = remaining
            .iter()
            .copied()
            .filter(|&i| (motion.apply(&pairs[i].0) - pairs[i].1).norm() < threshold)
            .collect();
        if inliers.len() < min_support {
            break;
        }
        remaining.retain(|i| !inliers.contains(i));
        out.push(MotionHypothesis { motion, inliers });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::Texture;
    use approx::assert_abs_diff_eq;

    fn random_points(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-3.0..3.0),
                    rng.gen_range(-2.0..2.0),
                    rng.gen_range(4.0..12.0),
                )
            })
            .collect()
    }

    fn test_motion(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> RigidMotion {
        RigidMotion::from_axis_angle(axis, angle, t)
    }

    #[test]
    fn procrustes_recovers_exact_motion() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let m = test_motion(
                Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
                rng.gen_range(-0.3..0.3),
                Vector3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)),
            );
            let pts = random_points(&mut rng, 12);
            let pairs: Vec<_> = pts.iter().map(|p| (*p, m.apply(p))).collect();
            let got = procrustes(&pairs).unwrap();
            assert!((got.r - m.r).norm() < 1e-6);
            assert!((got.t - m.t).norm() < 1e-6);
        }
    }

    #[test]
    fn identity_motion_recovered() {
        let mut rng = ChaCha8Rng::seed_from_u64(32);
        let pts = random_points(&mut rng, 8);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, *p)).collect();
        let got = procrustes(&pairs).unwrap();
        assert!((got.r - Matrix3::identity()).norm() < 1e-9);
        assert!(got.t.norm() < 1e-9);
    }

    #[test]
    fn ransac_single_motion_all_inliers() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let m = test_motion(Vector3::new(0.0, 1.0, 0.0), 0.05, Vector3::new(0.3, 0.0, -0.1));
        let pts = random_points(&mut rng, 40);
        let pairs: Vec<_> = pts.iter().map(|p| (*p, m.apply(p))).collect();
        let hyps = ransac_motions(&pairs, 4, 0.05, 1);
        assert_eq!(hyps.len(), 1);
        assert_eq!(hyps[0].inliers.len(), 40);
        assert!((hyps[0].motion.r - m.r).norm() < 1e-6);
        assert!((hyps[0].motion.t - m.t).norm() < 1e-6);
    }

    #[test]
    fn ransac_two_motions_split() {
        let mut rng = ChaCha8Rng::seed_from_u64(34);
        let m1 = test_motion(Vector3::new(0.0, 1.0, 0.0), 0.02, Vector3::new(0.2, 0.0, 0.0));
        let m2 = test_motion(Vector3::new(1.0, 0.0, 0.0), -0.04, Vector3::new(-0.3, 0.1, 0.2));
        let pts = random_points(&mut rng, 100);
        let pairs: Vec<_> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| {
                if i < 70 {
                    (*p, m1.apply(p))
                } else {
                    (*p, m2.apply(p))
                }
            })
            .collect();
        let hyps = ransac_motions(&pairs, 4, 0.05, 2);
        assert!(hyps.len() >= 2, "found {} motions", hyps.len());
        // The dominant motion comes first; check the inlier partition.
        let correct1 = hyps[0].inliers.iter().filter(|&&i| i < 70).count();
        let correct2 = hyps[1].inliers.iter().filter(|&&i| i >= 70).count();
        assert!(correct1 as f64 >= 0.95 * hyps[0].inliers.len() as f64);
        assert!(correct2 as f64 >= 0.95 * hyps[1].inliers.len() as f64);
        assert!(hyps[0].inliers.len() >= 66);
        assert!(hyps[1].inliers.len() >= 28);
    }

    #[test]
    fn matches_image_to_itself() {
        let tex = Texture::new(11, vec![3.0, 7.0]);
        let img = Image::from_fn(40, 60, 1, |x, y, c| tex.sample(x as f64, y as f64, c));
        let matches = sparse_matches(&img, &img, (-4, 4), (-4, 4), 50);
        assert!(!matches.is_empty());
        // Matches land on the same pixel up to subpixel-refinement noise.
        for ((x, y), (mx, my)) in matches {
            assert_abs_diff_eq!(x, mx, epsilon = 0.2);
            assert_abs_diff_eq!(y, my, epsilon = 0.2);
        }
    }

    #[test]
    fn known_translation_recovered() {
        let tex = Texture::new(12, vec![3.0, 7.0]);
        let a = Image::from_fn(40, 60, 1, |x, y, c| tex.sample(x as f64, y as f64, c));
        let b = Image::from_fn(40, 60, 1, |x, y, c| tex.sample(x as f64 + 3.0, y as f64, c));
        let matches = sparse_matches(&a, &b, (-6, 6), (-3, 3), 60);
        assert!(matches.len() >= 5);
        let mut dx: Vec<f64> = matches.iter().map(|((x, _), (mx, _))| mx - x).collect();
        dx.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let median = dx[dx.len() / 2];
        assert!((median - -3.0).abs() <= 0.5, "median dx {median}");
    }

    #[test]
    fn uniform_images_give_no_matches() {
        let img = Image::from_fn(40, 60, 1, |_, _, _| 0.5);
        assert!(sparse_matches(&img, &img, (-4, 4), (-4, 4), 50).is_empty());
    }
}
