//! Superpixel partition of the reference image (SLIC-style clustering with
//! a disparity feature), adjacency and boundary extraction, semantic-prior
//! ingestion and object-label initialization.

use crate::geometry::SceneModel;
use crate::types::{DisparityMap, Image};
use crate::{Error, Result};

/// Contiguous superpixel partition with adjacency and shared boundaries.
#[derive(Debug, Clone)]
pub struct SuperpixelPartition {
    pub height: usize,
    pub width: usize,
    /// Superpixel id per pixel, ids contiguous in 0..num_superpixels().
    pub labels: Vec<u32>,
    /// Pixel list (x, y) per superpixel.
    pub pixels: Vec<Vec<(u16, u16)>>,
    /// Edges (i, j) with i < j and the pixels shared along the boundary:
    /// every pixel of either side with a 4-neighbor on the other side.
    pub edges: Vec<(u32, u32, Vec<(u16, u16)>)>,
    /// Per superpixel: (neighbor id, edge index) sorted by neighbor.
    pub neighbors: Vec<Vec<(u32, u32)>>,
}

impl SuperpixelPartition {
    pub fn num_superpixels(&self) -> usize {
        self.pixels.len()
    }

    #[inline]
    pub fn label_at(&self, x: usize, y: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    pub fn boundary(&self, i: u32, j: u32) -> Option<&[(u16, u16)]> {
        let (a, b) = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.0, e.1).cmp(&(a, b)))
            .ok()
            .map(|idx| self.edges[idx].2.as_slice())
    }

    /// Build a partition from a label map with contiguous ids 0..count.
    pub fn from_label_map(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        if labels.len() != height * width {
            return Err(Error::DimensionMismatch("label map size".into()));
        }
        let count = labels.iter().copied().max().map_or(0, |m| m as usize + 1);
        let p = Self::from_labels(height, width, labels, count);
        if p.pixels.iter().any(Vec::is_empty) {
            return Err(Error::InvalidInput("superpixel ids are not contiguous".into()));
        }
        Ok(p)
    }

    /// Rebuild pixel lists, edges and neighbor tables from the label map.
    fn from_labels(height: usize, width: usize, labels: Vec<u32>, count: usize) -> Self {
        let mut pixels = vec![Vec::new(); count];
        for y in 0..height {
            for x in 0..width {
                pixels[labels[y * width + x] as usize].push((x as u16, y as u16));
            }
        }
        let mut boundary_sets: std::collections::BTreeMap<(u32, u32), std::collections::BTreeSet<(u16, u16)>> =
            std::collections::BTreeMap::new();
        for y in 0..height {
            for x in 0..width {
                let a = labels[y * width + x];
                for (nx, ny) in [(x + 1, y), (x, y + 1)] {
                    if nx >= width || ny >= height {
                        continue;
                    }
                    let b = labels[ny * width + nx];
                    if a != b {
                        let key = (a.min(b), a.max(b));
                        let set = boundary_sets.entry(key).or_default();
                        set.insert((x as u16, y as u16));
                        set.insert((nx as u16, ny as u16));
                    }
                }
            }
        }
        let edges: Vec<(u32, u32, Vec<(u16, u16)>)> = boundary_sets
            .into_iter()
            .map(|((i, j), set)| (i, j, set.into_iter().collect()))
            .collect();
        let mut neighbors = vec![Vec::new(); count];
        for (idx, (i, j, _)) in edges.iter().enumerate() {
            neighbors[*i as usize].push((*j, idx as u32));
            neighbors[*j as usize].push((*i, idx as u32));
        }
        for n in &mut neighbors {
            n.sort_unstable();
        }
        SuperpixelPartition {
            height,
            width,
            labels,
            pixels,
            edges,
            neighbors,
        }
    }
}

/// Binary semantic prior: true marks potentially moving foreground.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SemanticMask {
    pub height: usize,
    pub width: usize,
    pub fg: Vec<bool>,
}

impl SemanticMask {
    pub fn new(height: usize, width: usize) -> Self {
        SemanticMask {
            height,
            width,
            fg: vec![false; height * width],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> bool {
        self.fg[y * self.width + x]
    }

    /// Morphological dilation with a square structuring element.
    pub fn dilate(&self, radius: usize) -> SemanticMask {
        let r = radius as i64;
        let mut out = SemanticMask::new(self.height, self.width);
        for y in 0..self.height as i64 {
            for x in 0..self.width as i64 {
                'search: for dy in -r..=r {
                    for dx in -r..=r {
                        let (sx, sy) = (x + dx, y + dy);
                        if sx >= 0
                            && sy >= 0
                            && (sx as usize) < self.width
                            && (sy as usize) < self.height
                            && self.at(sx as usize, sy as usize)
                        {
                            out.fg[y as usize * self.width + x as usize] = true;
                            break 'search;
                        }
                    }
                }
            }
        }
        out
    }
}

/// Allowed object labels for a superpixel, from the semantic prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelPrior {
    /// Background only: object 0.
    Background,
    /// Any moving object: objects 1..num_objects.
    Foreground,
}

impl LabelPrior {
    pub fn allowed(&self, num_objects: usize) -> Vec<usize> {
        match self {
            LabelPrior::Background => vec![0],
            LabelPrior::Foreground => (1..num_objects).collect(),
        }
    }
}

/// SLIC-style clustering on (x, y, intensity, disparity) features from a
/// regular seed grid, followed by a connected-component cleanup that
/// enforces 4-connected contiguity.
///
/// Spatial distances are measured in units of the seed cell size, the
/// intensity difference has weight 1 and the disparity difference weight 2,
/// so depth edges dominate texture. Invalid disparities contribute nothing
/// to the distance.
pub fn build_superpixels(
    img: &Image,
    disparity: &DisparityMap,
    target_count: usize,
) -> Result<SuperpixelPartition> {
    if target_count < 4 {
        return Err(Error::InvalidInput(format!(
            "target_count must be >= 4, got {target_count}"
        )));
    }
    let (h, w) = (img.height, img.width);
    if disparity.height != h || disparity.width != w {
        return Err(Error::DimensionMismatch("disparity does not match the image".into()));
    }
    let cell = ((h * w) as f64 / target_count as f64).sqrt();
    if cell < 1.0 || h < 2 || w < 2 {
        return Err(Error::InvalidInput(format!(
            "image {h}x{w} smaller than the seed grid for {target_count} superpixels"
        )));
    }
    let gray = img.to_gray();
    let gx = (w as f64 / cell).round().max(1.0) as usize;
    let gy = (h as f64 / cell).round().max(1.0) as usize;

    #[derive(Clone)]
    struct Center {
        x: f64,
        y: f64,
        i: f64,
        d: f64,
        d_valid: bool,
    }
    let mut centers = Vec::new();
    for cy in 0..gy {
        for cx in 0..gx {
            let x = ((cx as f64 + 0.5) * w as f64 / gx as f64).min(w as f64 - 1.0);
            let y = ((cy as f64 + 0.5) * h as f64 / gy as f64).min(h as f64 - 1.0);
            let (xi, yi) = (x as usize, y as usize);
            centers.push(Center {
                x,
                y,
                i: gray.get(xi, yi, 0),
                d: disparity.at(xi, yi),
                d_valid: disparity.is_valid(xi, yi),
            });
        }
    }

    let mut labels = vec![0u32; h * w];
    let search = (2.0 * cell).ceil() as i64;
    for _iter in 0..10 {
        let mut best = vec![f64::INFINITY; h * w];
        for (ci, c) in centers.iter().enumerate() {
            let x0 = ((c.x as i64) - search).max(0) as usize;
            let x1 = ((c.x as i64) + search).min(w as i64 - 1) as usize;
            let y0 = ((c.y as i64) - search).max(0) as usize;
            let y1 = ((c.y as i64) + search).min(h as i64 - 1) as usize;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let dx = (x as f64 - c.x) / cell;
                    let dy = (y as f64 - c.y) / cell;
                    let di = gray.get(x, y, 0) - c.i;
                    let mut dist = dx * dx + dy * dy + di * di;
                    if c.d_valid && disparity.is_valid(x, y) {
                        let dd = 2.0 * (disparity.at(x, y) - c.d);
                        dist += dd * dd;
                    }
                    let idx = y * w + x;
                    if dist < best[idx] {
                        best[idx] = dist;
                        labels[idx] = ci as u32;
                    }
                }
            }
        }
        // Recompute centers.
        let mut acc = vec![(0.0f64, 0.0f64, 0.0f64, 0.0f64, 0usize, 0usize); centers.len()];
        for y in 0..h {
            for x in 0..w {
                let a = &mut acc[labels[y * w + x] as usize];
                a.0 += x as f64;
                a.1 += y as f64;
                a.2 += gray.get(x, y, 0);
                if disparity.is_valid(x, y) {
                    a.3 += disparity.at(x, y);
                    a.5 += 1;
                }
                a.4 += 1;
            }
        }
        for (c, a) in centers.iter_mut().zip(&acc) {
            if a.4 > 0 {
                c.x = a.0 / a.4 as f64;
                c.y = a.1 / a.4 as f64;
                c.i = a.2 / a.4 as f64;
                if a.5 > 0 {
                    c.d = a.3 / a.5 as f64;
                    c.d_valid = true;
                } else {
                    c.d_valid = false;
                }
            }
        }
    }

    let relabeled = enforce_connectivity(&labels, h, w, (cell * cell) as usize / 8);
    let count = relabeled.iter().copied().max().unwrap_or(0) as usize + 1;
    Ok(SuperpixelPartition::from_labels(h, w, relabeled, count))
}

/// Split the label map into 4-connected components, then absorb components
/// smaller than `min_size` into the adjacent component with the longest
/// shared boundary. Returns contiguous ids.
fn enforce_connectivity(labels: &[u32], h: usize, w: usize, min_size: usize) -> Vec<u32> {
    let mut comp = vec![u32::MAX; h * w];
    let mut sizes = Vec::new();
    let mut n = 0u32;
    for start in 0..h * w {
        if comp[start] != u32::MAX {
            continue;
        }
        let mut queue = std::collections::VecDeque::from([start]);
        comp[start] = n;
        let mut size = 0usize;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            for (nx, ny) in [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ] {
                if nx < w && ny < h {
                    let j = ny * w + nx;
                    if comp[j] == u32::MAX && labels[j] == labels[i] {
                        comp[j] = n;
                        queue.push_back(j);
                    }
                }
            }
        }
        sizes.push(size);
        n += 1;
    }

    // Merge undersized components, smallest first.
    let mut order: Vec<u32> = (0..n).collect();
    order.sort_by_key(|&c| sizes[c as usize]);
    let mut merged_into: Vec<u32> = (0..n).collect();
    let resolve = |mut c: u32, merged: &[u32]| {
        while merged[c as usize] != c {
            c = merged[c as usize];
        }
        c
    };
    for &c in &order {
        if sizes[c as usize] >= min_size.max(1) {
            continue;
        }
        // Count boundary contact per neighboring component.
        let mut contact: std::collections::BTreeMap<u32, usize> = std::collections::BTreeMap::new();
        for i in 0..h * w {
            if resolve(comp[i], &merged_into) != c {
                continue;
            }
            let (y, x) = (i / w, i % w);
            for (nx, ny) in [
                (x.wrapping_sub(1), y),
                (x + 1, y),
                (x, y.wrapping_sub(1)),
                (x, y + 1),
            ] {
                if nx < w && ny < h {
                    let other = resolve(comp[ny * w + nx], &merged_into);
                    if other != c {
                        *contact.entry(other).or_insert(0) += 1;
                    }
                }
            }
        }
        if let Some((&target, _)) = contact.iter().max_by_key(|(id, n)| (**n, std::cmp::Reverse(**id))) {
            merged_into[c as usize] = target;
            sizes[target as usize] += sizes[c as usize];
        }
    }

    // Contiguous renumbering in first-appearance order.
    let mut remap: std::collections::BTreeMap<u32, u32> = std::collections::BTreeMap::new();
    let mut out = vec![0u32; h * w];
    let mut next = 0u32;
    for i in 0..h * w {
        let c = resolve(comp[i], &merged_into);
        let id = *remap.entry(c).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
        out[i] = id;
    }
    out
}

/// Object-label prior per superpixel from the semantic mask: a superpixel
/// is foreground when a strict majority of its pixels are, ties go to
/// background.
pub fn init_labels(
    partition: &SuperpixelPartition,
    mask: &SemanticMask,
    num_objects: usize,
) -> Result<Vec<LabelPrior>> {
    if num_objects < 2 {
        return Err(Error::InvalidInput("num_objects must be >= 2".into()));
    }
    if mask.height != partition.height || mask.width != partition.width {
        return Err(Error::DimensionMismatch("semantic mask does not match the partition".into()));
    }
    Ok(partition
        .pixels
        .iter()
        .map(|pixels| {
            let fg = pixels
                .iter()
                .filter(|&&(x, y)| mask.at(x as usize, y as usize))
                .count();
            if 2 * fg > pixels.len() {
                LabelPrior::Foreground
            } else {
                LabelPrior::Background
            }
        })
        .collect())
}

/// Binary map of pixels whose superpixel is labelled as a moving object.
pub fn moving_mask(model: &SceneModel) -> SemanticMask {
    let p = &model.partition;
    let mut mask = SemanticMask::new(p.height, p.width);
    for y in 0..p.height {
        for x in 0..p.width {
            mask.fg[y * p.width + x] = model.labels[p.label_at(x, y) as usize] != 0;
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Plane, RigidMotion};
    use std::sync::Arc;

    fn check_axioms(p: &SuperpixelPartition) {
        // Coverage and disjointness.
        let total: usize = p.pixels.iter().map(Vec::len).sum();
        assert_eq!(total, p.height * p.width);
        let mut seen = vec![false; p.height * p.width];
        for (i, pixels) in p.pixels.iter().enumerate() {
            assert!(!pixels.is_empty(), "superpixel {i} empty");
            for &(x, y) in pixels {
                let idx = y as usize * p.width + x as usize;
                assert!(!seen[idx]);
                seen[idx] = true;
                assert_eq!(p.label_at(x as usize, y as usize), i as u32);
            }
        }
        // Adjacency symmetry and non-empty boundaries.
        for (i, j, b) in &p.edges {
            assert!(i < j);
            assert!(!b.is_empty());
            assert_eq!(p.boundary(*i, *j), p.boundary(*j, *i));
        }
        // Contiguity: each superpixel is 4-connected.
        for (i, pixels) in p.pixels.iter().enumerate() {
            let set: std::collections::HashSet<(u16, u16)> = pixels.iter().copied().collect();
            let mut stack = vec![pixels[0]];
            let mut visited = std::collections::HashSet::from([pixels[0]]);
            while let Some((x, y)) = stack.pop() {
                for (nx, ny) in [
                    (x.wrapping_sub(1), y),
                    (x + 1, y),
                    (x, y.wrapping_sub(1)),
                    (x, y + 1),
                ] {
                    if set.contains(&(nx, ny)) && visited.insert((nx, ny)) {
                        stack.push((nx, ny));
                    }
                }
            }
            assert_eq!(visited.len(), pixels.len(), "superpixel {i} disconnected");
        }
    }

    #[test]
    fn uniform_image_quadrants() {
        let img = Image::from_fn(32, 32, 1, |_, _, _| 0.5);
        let disp = DisparityMap::invalid(32, 32);
        let p = build_superpixels(&img, &disp, 4).unwrap();
        check_axioms(&p);
        assert!(p.num_superpixels() >= 4 && p.num_superpixels() <= 6);
        let mean = (32 * 32) / p.num_superpixels();
        for pixels in &p.pixels {
            assert!(pixels.len() > mean / 3, "cells should be near-equal");
        }
    }

    #[test]
    fn two_tone_split_boundary() {
        let img = Image::from_fn(16, 32, 1, |x, _, _| if x < 16 { 0.1 } else { 0.9 });
        let disp = DisparityMap::invalid(16, 32);
        let p = build_superpixels(&img, &disp, 4).unwrap();
        check_axioms(&p);
        // Pixels on either side of the tone edge must carry different ids,
        // i.e. the partition boundary tracks the edge within 1 px.
        for y in 0..16 {
            assert_ne!(p.label_at(14, y), p.label_at(17, y));
        }
    }

    #[test]
    fn disparity_edge_dominates() {
        let img = Image::from_fn(16, 32, 1, |_, _, _| 0.5);
        let mut disp = DisparityMap::invalid(16, 32);
        for y in 0..16 {
            for x in 0..32 {
                disp.set(x, y, if y < 8 { 4.0 } else { 10.0 });
            }
        }
        let p = build_superpixels(&img, &disp, 8).unwrap();
        check_axioms(&p);
        for x in 0..32 {
            assert_ne!(p.label_at(x, 6), p.label_at(x, 9));
        }
    }

    #[test]
    fn axioms_on_random_input() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let img = Image::from_fn(24, 40, 3, |_, _, _| rng.gen());
        let mut disp = DisparityMap::invalid(24, 40);
        for y in 0..24 {
            for x in 0..40 {
                if rng.gen::<f64>() > 0.2 {
                    disp.set(x, y, rng.gen_range(1.0..10.0));
                }
            }
        }
        let p = build_superpixels(&img, &disp, 12).unwrap();
        check_axioms(&p);
    }

    #[test]
    fn too_small_image_errors() {
        let img = Image::new(2, 2, 1);
        let disp = DisparityMap::invalid(2, 2);
        assert!(build_superpixels(&img, &disp, 16).is_err());
        assert!(build_superpixels(&img, &disp, 3).is_err());
    }

    fn toy_partition() -> SuperpixelPartition {
        // Two 4x2 halves.
        let labels = vec![0, 0, 1, 1, 0, 0, 1, 1];
        SuperpixelPartition::from_label_map(2, 4, labels).unwrap()
    }

    #[test]
    fn label_prior_majority() {
        let p = toy_partition();
        let all_bg = SemanticMask::new(2, 4);
        let priors = init_labels(&p, &all_bg, 3).unwrap();
        assert!(priors.iter().all(|&pr| pr == LabelPrior::Background));
        assert_eq!(priors[0].allowed(3), vec![0]);

        let mut all_fg = SemanticMask::new(2, 4);
        all_fg.fg.iter_mut().for_each(|v| *v = true);
        let priors = init_labels(&p, &all_fg, 3).unwrap();
        assert!(priors.iter().all(|&pr| pr == LabelPrior::Foreground));
        assert_eq!(priors[0].allowed(3), vec![1, 2]);

        // 3 of 4 pixels foreground in superpixel 0: strict majority.
        let mut m = SemanticMask::new(2, 4);
        m.fg[0] = true;
        m.fg[1] = true;
        m.fg[4] = true;
        let priors = init_labels(&p, &m, 2).unwrap();
        assert_eq!(priors[0], LabelPrior::Foreground);
        assert_eq!(priors[1], LabelPrior::Background);

        // Exactly half: ties go to background.
        let mut m = SemanticMask::new(2, 4);
        m.fg[0] = true;
        m.fg[1] = true;
        let priors = init_labels(&p, &m, 2).unwrap();
        assert_eq!(priors[0], LabelPrior::Background);
    }

    #[test]
    fn moving_mask_from_labels() {
        let p = Arc::new(toy_partition());
        let mut model = SceneModel {
            partition: p.clone(),
            planes: vec![Plane::fronto(10.0); 2],
            labels: vec![0, 0],
            motions: vec![RigidMotion::identity(), RigidMotion::identity()],
        };
        assert!(moving_mask(&model).fg.iter().all(|&v| !v));
        model.labels[1] = 1;
        let mask = moving_mask(&model);
        for &(x, y) in &p.pixels[1] {
            assert!(mask.at(x as usize, y as usize));
        }
        for &(x, y) in &p.pixels[0] {
            assert!(!mask.at(x as usize, y as usize));
        }
    }

    #[test]
    fn dilate_grows_mask() {
        let mut m = SemanticMask::new(5, 5);
        m.fg[12] = true; // center
        let d = m.dilate(1);
        assert_eq!(d.fg.iter().filter(|&&v| v).count(), 9);
    }
}
