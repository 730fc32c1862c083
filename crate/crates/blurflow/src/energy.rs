//! The joint energy: brightness/feature/blur data terms, the four scene
//! flow smoothness terms, the total-variation regularizer and their sum.

use std::collections::BTreeMap;

use nalgebra::Matrix3;

use crate::blur::build_kernel;
use crate::geometry::{
    project_homography, warp, FrameAssignment, FrameLayout, Plane, RigidMotion, SceneModel,
    WarpTarget,
};
use crate::types::{truncated_l1, CameraRig, EnergyParams, Image};
use crate::Result;

/// Sparse feature matches per warp direction: reference pixel and its
/// measured position in the target image.
#[derive(Debug, Clone, Default)]
pub struct FeatureCorrespondences {
    pub per_target: BTreeMap<WarpTarget, Vec<((f64, f64), (f64, f64))>>,
}

impl FeatureCorrespondences {
    pub fn empty() -> Self {
        Self::default()
    }

    pub fn total_len(&self) -> usize {
        self.per_target.values().map(Vec::len).sum()
    }
}

/// Every term of the energy, individually and summed.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub data_brightness: f64,
    pub data_features: f64,
    pub data_blur: f64,
    pub smooth_depth: f64,
    pub smooth_orientation: f64,
    pub smooth_label_depth: f64,
    pub smooth_label_motion: f64,
    pub tv: f64,
    pub total: f64,
}

impl EnergyBreakdown {
    pub fn csv_header() -> &'static str {
        "data_brightness,data_features,data_blur,smooth_depth,smooth_orientation,smooth_label_depth,smooth_label_motion,tv,total"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.data_brightness,
            self.data_features,
            self.data_blur,
            self.smooth_depth,
            self.smooth_orientation,
            self.smooth_label_depth,
            self.smooth_label_motion,
            self.tv,
            self.total
        )
    }
}

/// Everything the energy evaluation needs besides the model.
pub struct EnergyInputs<'a> {
    pub rig: &'a CameraRig,
    pub layout: &'a FrameLayout,
    /// Current latent estimates, layout order.
    pub latents: &'a [Image],
    /// Observed blurred frames, layout order.
    pub blurred: &'a [Image],
    pub correspondences: &'a FeatureCorrespondences,
    pub params: &'a EnergyParams,
    pub kernel_radius: usize,
}

/// Brightness constancy over the warp targets: sum of per-channel absolute
/// differences between the reference latent and each warped counterpart,
/// restricted to validly warped pixels.
pub fn data_brightness(model: &SceneModel, inp: &EnergyInputs) -> Result<f64> {
    let reference = &inp.latents[inp.layout.reference_index()];
    let mut sum = 0.0;
    for &target in WarpTarget::all(inp.layout.two_frame_mode()) {
        let img = &inp.latents[inp.layout.target_index(target)];
        let (warped, mask) = warp(img, model, target, inp.rig)?;
        for y in 0..reference.height {
            for x in 0..reference.width {
                if mask[y * reference.width + x] {
                    for c in 0..reference.channels {
                        sum += (reference.get(x, y, c) - warped.get(x, y, c)).abs();
                    }
                }
            }
        }
    }
    Ok(inp.params.theta1 * sum)
}

/// Truncated reprojection error of the sparse feature matches.
pub fn data_features(model: &SceneModel, inp: &EnergyInputs) -> Result<f64> {
    let mut sum = 0.0;
    for (&target, matches) in &inp.correspondences.per_target {
        let hs = model.homographies(target, inp.rig)?;
        let p = &model.partition;
        for &((x, y), (mx, my)) in matches {
            let xi = (x.round() as i64).clamp(0, p.width as i64 - 1) as usize;
            let yi = (y.round() as i64).clamp(0, p.height as i64 - 1) as usize;
            let i = p.label_at(xi, yi) as usize;
            let (wx, wy, w) = project_homography(&hs[i], x, y);
            let err = if w.abs() <= 1e-12 {
                inp.params.alpha1
            } else {
                ((wx - mx).powi(2) + (wy - my).powi(2)).sqrt()
            };
            sum += truncated_l1(err, inp.params.alpha1);
        }
    }
    Ok(inp.params.theta2 * sum)
}

/// Squared gradient-domain residual between re-blurred latents and the
/// observations, over all frames and both derivative filters. The frame
/// assignment is derived from the model itself.
pub fn data_blur(model: &SceneModel, inp: &EnergyInputs) -> Result<f64> {
    let assign = FrameAssignment::from_model(model, inp.rig, inp.layout)?;
    data_blur_with_assignment(model, &assign, inp)
}

/// As [`data_blur`] but under a frozen frame assignment.
pub fn data_blur_with_assignment(
    model: &SceneModel,
    assign: &FrameAssignment,
    inp: &EnergyInputs,
) -> Result<f64> {
    let mut sum = 0.0;
    for m in 0..inp.layout.num_frames() {
        let img = &inp.latents[m];
        let (fwd, bwd) = assign.frame_flows(model, inp.rig, m, img.height, img.width)?;
        let op = build_kernel(&fwd, &bwd, inp.params.tau, inp.kernel_radius)?;
        let est = op.apply(img)?;
        sum += gradient_residual_energy(&est, &inp.blurred[m]);
    }
    Ok(inp.params.theta3 * sum)
}

/// `sum_d ||d(a) - d(b)||^2` for forward-difference derivative filters with
/// replicate boundary.
pub fn gradient_residual_energy(a: &Image, b: &Image) -> f64 {
    debug_assert!(a.same_shape(b));
    let (h, w, ch) = (a.height, a.width, a.channels);
    let r = |x: usize, y: usize, c: usize| a.get(x, y, c) - b.get(x, y, c);
    let mut sum = 0.0;
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                if x + 1 < w {
                    sum += (r(x + 1, y, c) - r(x, y, c)).powi(2);
                }
                if y + 1 < h {
                    sum += (r(x, y + 1, c) - r(x, y, c)).powi(2);
                }
            }
        }
    }
    sum
}

/// Depth compatibility of adjacent superpixels: truncated disparity
/// difference per shared boundary pixel.
pub fn smooth_depth(model: &SceneModel, rig: &CameraRig, params: &EnergyParams) -> f64 {
    let p = &model.partition;
    let mut sum = 0.0;
    for (i, j, boundary) in &p.edges {
        let (pi, pj) = (&model.planes[*i as usize], &model.planes[*j as usize]);
        for &(x, y) in boundary {
            let d = pi.disparity_at(x as f64, y as f64, rig) - pj.disparity_at(x as f64, y as f64, rig);
            sum += truncated_l1(d, params.alpha2);
        }
    }
    params.theta4 * sum
}

fn cos_similarity(a: &Plane, b: &Plane) -> f64 {
    let denom = a.n.norm() * b.n.norm();
    if denom == 0.0 {
        return 0.0;
    }
    (a.n.dot(&b.n) / denom).abs()
}

/// Orientation compatibility of adjacent superpixels.
pub fn smooth_orientation(model: &SceneModel, params: &EnergyParams) -> f64 {
    let mut sum = 0.0;
    for (i, j, _) in &model.partition.edges {
        let c = cos_similarity(&model.planes[*i as usize], &model.planes[*j as usize]);
        sum += truncated_l1(1.0 - c, params.alpha3);
    }
    params.theta5 * sum
}

/// Motion similarity inside the label-boundary terms.
pub fn motion_similarity(a: &RigidMotion, b: &RigidMotion, params: &EnergyParams) -> f64 {
    params.theta_r * ((a.r.transpose() * b.r).trace() - 1.0) / 2.0
        + params.theta_t * (-(a.t - b.t).norm()).exp()
}

/// The two label-boundary terms: boundaries between different objects are
/// penalized unless a depth discontinuity (first term) or dissimilar
/// motion (second term) supports them. Both vanish when labels agree.
pub fn smooth_label_terms(model: &SceneModel, rig: &CameraRig, params: &EnergyParams) -> (f64, f64) {
    let p = &model.partition;
    let (mut s3, mut s4) = (0.0, 0.0);
    for (i, j, boundary) in &p.edges {
        let (i, j) = (*i as usize, *j as usize);
        if model.labels[i] == model.labels[j] {
            continue;
        }
        let cos = cos_similarity(&model.planes[i], &model.planes[j]);
        let nb = boundary.len() as f64;
        let mut omega_sq = 0.0;
        for &(x, y) in boundary {
            let d = model.planes[i].disparity_at(x as f64, y as f64, rig)
                - model.planes[j].disparity_at(x as f64, y as f64, rig);
            omega_sq += d * d;
        }
        s3 += (-params.lambda / nb * omega_sq).exp() * cos;
        let g = motion_similarity(
            &model.motions[model.labels[i]],
            &model.motions[model.labels[j]],
            params,
        );
        let g_sum = nb * g;
        s4 += (-params.lambda / nb * g_sum).exp() * cos;
    }
    (params.w_label_depth * s3, params.w_label_motion * s4)
}

/// Total variation with forward differences and replicate boundary,
/// summed over images and channels. The gradient magnitude is the l1 norm
/// of the components, matching the component-wise dual projection of the
/// latent solver so that solver descent and this term agree.
pub fn tv(images: &[Image]) -> f64 {
    let mut sum = 0.0;
    for img in images {
        let (h, w, ch) = (img.height, img.width, img.channels);
        for y in 0..h {
            for x in 0..w {
                for c in 0..ch {
                    let gx = if x + 1 < w { img.get(x + 1, y, c) - img.get(x, y, c) } else { 0.0 };
                    let gy = if y + 1 < h { img.get(x, y + 1, c) - img.get(x, y, c) } else { 0.0 };
                    sum += gx.abs() + gy.abs();
                }
            }
        }
    }
    sum
}

/// Evaluate every term of the energy.
pub fn total_energy(model: &SceneModel, inp: &EnergyInputs) -> Result<EnergyBreakdown> {
    let assign = FrameAssignment::from_model(model, inp.rig, inp.layout)?;
    total_energy_with_assignment(model, &assign, inp)
}

/// Evaluate every term under a frozen frame assignment (the blur data term
/// is the only assignment-dependent one).
pub fn total_energy_with_assignment(
    model: &SceneModel,
    assign: &FrameAssignment,
    inp: &EnergyInputs,
) -> Result<EnergyBreakdown> {
    let data_brightness = data_brightness(model, inp)?;
    let data_features = data_features(model, inp)?;
    let data_blur = data_blur_with_assignment(model, assign, inp)?;
    let smooth_depth = smooth_depth(model, inp.rig, inp.params);
    let smooth_orientation = smooth_orientation(model, inp.params);
    let (smooth_label_depth, smooth_label_motion) = smooth_label_terms(model, inp.rig, inp.params);
    let tv = tv(inp.latents);
    let total = data_brightness
        + data_features
        + data_blur
        + smooth_depth
        + smooth_orientation
        + smooth_label_depth
        + smooth_label_motion
        + tv;
    Ok(EnergyBreakdown {
        data_brightness,
        data_features,
        data_blur,
        smooth_depth,
        smooth_orientation,
        smooth_label_depth,
        smooth_label_motion,
        tv,
        total,
    })
}

/// Assemble per-superpixel target homographies for a proposed plane and
/// label under fixed motions.
pub fn proposal_homographies(
    plane: &Plane,
    label: usize,
    motions: &[RigidMotion],
    rig: &CameraRig,
    targets: &[WarpTarget],
) -> Result<Vec<Matrix3<f64>>> {
    targets
        .iter()
        .map(|t| crate::geometry::homography(&rig.k, &t.motion(&motions[label], rig), plane))
        .collect()
}
