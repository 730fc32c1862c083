//! Piecewise-planar scene geometry: planes, rigid motions, plane-induced
//! homographies, flow/disparity synthesis and warps to the five target
//! images of a three-frame stereo window.

use std::sync::Arc;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::superpixels::SuperpixelPartition;
use crate::types::{bilinear_sample, CameraRig, DisparityMap, FlowField, Image};
use crate::{Error, Result};

/// Scene plane in inverse-depth-scaled normal form: `n . X = 1` for 3D
/// points `X` on the plane, reference camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Plane {
    pub n: Vector3<f64>,
}

impl Plane {
    pub fn new(n: Vector3<f64>) -> Self {
        Plane { n }
    }

    /// Fronto-parallel plane at depth `z`.
    pub fn fronto(z: f64) -> Self {
        Plane {
            n: Vector3::new(0.0, 0.0, 1.0 / z),
        }
    }

    /// Disparity induced by this plane at pixel (x, y):
    /// `d = fx * baseline * (n . K^-1 x~)`.
    pub fn disparity_at(&self, x: f64, y: f64, rig: &CameraRig) -> f64 {
        let ray = rig.k_inv() * Vector3::new(x, y, 1.0);
        rig.fx() * rig.baseline * self.n.dot(&ray)
    }

    /// Plane parameters from the affine disparity model `d = a*x + b*y + c`
    /// (pixel coordinates), inverting `d = fx * B * (n . K^-1 x~)`:
    /// `a = fb*n0/fx`, `b = fb*n1/fy`, `c = fb*(n2 - n0*cx/fx - n1*cy/fy)`.
    pub fn from_disparity_coeffs(a: f64, b: f64, c: f64, rig: &CameraRig) -> Self {
        let fb = rig.fx() * rig.baseline;
        let n0 = a * rig.fx() / fb;
        let n1 = b * rig.fy() / fb;
        let n2 = c / fb + (a * rig.cx() + b * rig.cy()) / fb;
        Plane {
            n: Vector3::new(n0, n1, n2),
        }
    }
}

/// Rigid motion acting on camera-space points as `X' = R * X - t`, the
/// convention under which a plane `n` induces the homography
/// `K (R - t n^T) K^-1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidMotion {
    pub r: Matrix3<f64>,
    pub t: Vector3<f64>,
}

impl RigidMotion {
    pub fn identity() -> Self {
        RigidMotion {
            r: Matrix3::identity(),
            t: Vector3::zeros(),
        }
    }

    pub fn new(r: Matrix3<f64>, t: Vector3<f64>) -> Self {
        RigidMotion { r, t }
    }

    /// Rotation about `axis` by `angle` radians plus translation.
    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, t: Vector3<f64>) -> Self {
        let r = if angle.abs() < 1e-300 || axis.norm() == 0.0 {
            Matrix3::identity()
        } else {
            nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
                .into_inner()
        };
        RigidMotion { r, t }
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.r * x - self.t
    }

    pub fn inverse(&self) -> Self {
        // X = R^T (X' + t) = R^T X' - (-R^T t)
        RigidMotion {
            r: self.r.transpose(),
            t: -(self.r.transpose() * self.t),
        }
    }

    /// `self` after `first`: applies `first`, then `self`.
    pub fn compose(&self, first: &RigidMotion) -> Self {
        RigidMotion {
            r: self.r * first.r,
            t: self.r * first.t + self.t,
        }
    }

    /// Transform a plane along with the points: points satisfying
    /// `n . X = 1` map to points satisfying `n' . X' = 1`.
    pub fn transform_plane(&self, p: &Plane) -> Result<Plane> {
        let denom = 1.0 - p.n.dot(&(self.r.transpose() * self.t));
        if denom.abs() < 1e-12 {
            return Err(Error::InvalidInput(
                "plane passes through the camera center after motion".into(),
            ));
        }
        Ok(Plane::new(self.r * p.n / denom))
    }

    pub fn is_rotation_valid(&self) -> bool {
        let rt_r = self.r.transpose() * self.r;
        (rt_r - Matrix3::identity()).norm() < 1e-9 && (self.r.determinant() - 1.0).abs() < 1e-9
    }
}

/// The five warp directions from the reference image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum WarpTarget {
    /// Same time, right view.
    Stereo,
    /// Same view, next frame.
    FlowF,
    /// Same view, previous frame.
    FlowB,
    /// Right view, next frame.
    CrossF,
    /// Right view, previous frame.
    CrossB,
}

impl WarpTarget {
    /// Targets available for a given temporal window. Two-frame inputs
    /// have no backward frame.
    pub fn all(two_frame: bool) -> &'static [WarpTarget] {
        if two_frame {
            &[WarpTarget::Stereo, WarpTarget::FlowF, WarpTarget::CrossF]
        } else {
            &[
                WarpTarget::Stereo,
                WarpTarget::FlowF,
                WarpTarget::FlowB,
                WarpTarget::CrossF,
                WarpTarget::CrossB,
            ]
        }
    }

    /// Composite rigid motion from the reference frame to this target,
    /// given the object motion and the stereo baseline.
    pub fn motion(&self, object: &RigidMotion, rig: &CameraRig) -> RigidMotion {
        let stereo = RigidMotion::new(Matrix3::identity(), Vector3::new(rig.baseline, 0.0, 0.0));
        match self {
            WarpTarget::Stereo => stereo,
            WarpTarget::FlowF => *object,
            WarpTarget::FlowB => object.inverse(),
            WarpTarget::CrossF => stereo.compose(object),
            WarpTarget::CrossB => stereo.compose(&object.inverse()),
        }
    }
}

/// Plane-induced homography `K (R - t n^T) K^-1`, normalized so the (3,3)
/// entry is 1 when nonzero.
pub fn homography(k: &Matrix3<f64>, motion: &RigidMotion, plane: &Plane) -> Result<Matrix3<f64>> {
    let k_inv = k.try_inverse().ok_or(Error::SingularCamera)?;
    let mut h = k * (motion.r - motion.t * plane.n.transpose()) * k_inv;
    if h[(2, 2)].abs() > 1e-300 {
        h /= h[(2, 2)];
    }
    Ok(h)
}

/// Perspective division of `H x~`.
#[inline]
pub fn project_homography(h: &Matrix3<f64>, x: f64, y: f64) -> (f64, f64, f64) {
    let p = h * Vector3::new(x, y, 1.0);
    (p.x / p.z, p.y / p.z, p.z)
}

/// Dense flow field of a homography over an image domain:
/// `u(x) = x - pi(H x~)`, so the warp target coordinate is `x* = x - u(x)`.
pub fn flow_from_homography(h: &Matrix3<f64>, height: usize, width: usize) -> Result<FlowField> {
    let mut flow = FlowField::zeros(height, width);
    for y in 0..height {
        for x in 0..width {
            let (px, py, w) = project_homography(h, x as f64, y as f64);
            if w.abs() <= 1e-12 {
                return Err(Error::DegenerateHomography { x, y, w });
            }
            flow.set(x, y, x as f64 - px, y as f64 - py);
        }
    }
    Ok(flow)
}

/// Disparity map induced by a plane under the rig. Non-positive disparities
/// are flagged invalid rather than erroring.
pub fn disparity_from_plane(
    plane: &Plane,
    rig: &CameraRig,
    height: usize,
    width: usize,
) -> DisparityMap {
    let mut map = DisparityMap::invalid(height, width);
    for y in 0..height {
        for x in 0..width {
            let d = plane.disparity_at(x as f64, y as f64, rig);
            if d > 0.0 {
                map.set(x, y, d);
            }
        }
    }
    map
}

/// Superpixel-planar scene model: a plane per superpixel, an object label
/// per superpixel, a rigid motion per object. Object 0 is the background.
#[derive(Debug, Clone)]
pub struct SceneModel {
    pub partition: Arc<SuperpixelPartition>,
    pub planes: Vec<Plane>,
    pub labels: Vec<usize>,
    pub motions: Vec<RigidMotion>,
}

impl SceneModel {
    pub fn validate(&self) -> Result<()> {
        let n = self.partition.num_superpixels();
        if self.planes.len() != n || self.labels.len() != n {
            return Err(Error::DimensionMismatch(
                "planes/labels do not match the superpixel count".into(),
            ));
        }
        if self.motions.is_empty() {
            return Err(Error::InvalidInput("at least the background motion is required".into()));
        }
        for (i, &l) in self.labels.iter().enumerate() {
            if l >= self.motions.len() {
                return Err(Error::InvalidInput(format!(
                    "superpixel {i} references missing object {l}"
                )));
            }
        }
        Ok(())
    }

    /// Homography of superpixel `i` toward a warp target.
    pub fn homography_for(
        &self,
        i: usize,
        target: WarpTarget,
        rig: &CameraRig,
    ) -> Result<Matrix3<f64>> {
        let motion = target.motion(&self.motions[self.labels[i]], rig);
        homography(&rig.k, &motion, &self.planes[i])
    }

    /// All per-superpixel homographies for one target.
    pub fn homographies(&self, target: WarpTarget, rig: &CameraRig) -> Result<Vec<Matrix3<f64>>> {
        (0..self.planes.len())
            .map(|i| self.homography_for(i, target, rig))
            .collect()
    }

    /// Reference-frame flow fields for a temporal target.
    pub fn reference_flow(&self, target: WarpTarget, rig: &CameraRig) -> Result<FlowField> {
        let hs = self.homographies(target, rig)?;
        let p = &self.partition;
        let mut flow = FlowField::zeros(p.height, p.width);
        for y in 0..p.height {
            for x in 0..p.width {
                let i = p.label_at(x, y) as usize;
                let (px, py, w) = project_homography(&hs[i], x as f64, y as f64);
                if w.abs() <= 1e-12 {
                    return Err(Error::DegenerateHomography { x, y, w });
                }
                flow.set(x, y, x as f64 - px, y as f64 - py);
            }
        }
        Ok(flow)
    }

    /// Reference-frame disparity from the per-superpixel planes.
    pub fn reference_disparity(&self, rig: &CameraRig) -> DisparityMap {
        let p = &self.partition;
        let mut map = DisparityMap::invalid(p.height, p.width);
        for y in 0..p.height {
            for x in 0..p.width {
                let i = p.label_at(x, y) as usize;
                let d = self.planes[i].disparity_at(x as f64, y as f64, rig);
                if d > 0.0 {
                    map.set(x, y, d);
                }
            }
        }
        map
    }
}

/// Backward-warp `img` (the target-view image) onto the reference grid for
/// one warp target. Pixels whose warp lands outside the target domain are
/// masked invalid.
pub fn warp(
    img: &Image,
    model: &SceneModel,
    target: WarpTarget,
    rig: &CameraRig,
) -> Result<(Image, Vec<bool>)> {
    let p = &model.partition;
    let hs = model.homographies(target, rig)?;
    let ch = img.channels;
    let rows: Vec<(Vec<f64>, Vec<bool>)> = (0..p.height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; p.width * ch];
            let mut mask = vec![false; p.width];
            let mut sample = vec![0.0; ch];
            for x in 0..p.width {
                let i = p.label_at(x, y) as usize;
                let (px, py, w) = project_homography(&hs[i], x as f64, y as f64);
                if w.abs() <= 1e-12 {
                    continue;
                }
                if px >= 0.0 && py >= 0.0 && px <= (img.width - 1) as f64 && py <= (img.height - 1) as f64
                {
                    bilinear_sample(img, px, py, &mut sample);
                    row[x * ch..(x + 1) * ch].copy_from_slice(&sample);
                    mask[x] = true;
                }
            }
            (row, mask)
        })
        .collect();
    let mut out = Image::new(p.height, p.width, ch);
    let mut mask = vec![false; p.height * p.width];
    for (y, (row, m)) in rows.into_iter().enumerate() {
        out.data[y * p.width * ch..(y + 1) * p.width * ch].copy_from_slice(&row);
        mask[y * p.width..(y + 1) * p.width].copy_from_slice(&m);
    }
    Ok((out, mask))
}

/// Per-pixel warp coordinates toward a target, with validity (the warp
/// lands inside a `height x width` target domain).
pub fn warp_coordinates(
    model: &SceneModel,
    target: WarpTarget,
    rig: &CameraRig,
    target_height: usize,
    target_width: usize,
) -> Result<(Vec<(f64, f64)>, Vec<bool>)> {
    let p = &model.partition;
    let hs = model.homographies(target, rig)?;
    let mut coords = vec![(0.0, 0.0); p.height * p.width];
    let mut valid = vec![false; p.height * p.width];
    for y in 0..p.height {
        for x in 0..p.width {
            let i = p.label_at(x, y) as usize;
            let (px, py, w) = project_homography(&hs[i], x as f64, y as f64);
            let idx = y * p.width + x;
            if w.abs() > 1e-12
                && px >= 0.0
                && py >= 0.0
                && px <= (target_width - 1) as f64
                && py <= (target_height - 1) as f64
            {
                coords[idx] = (px, py);
                valid[idx] = true;
            }
        }
    }
    Ok((coords, valid))
}

/// Identity of one frame in the stereo window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameId {
    pub right: bool,
    /// Temporal offset from the reference frame: -1, 0 or +1.
    pub time: i32,
}

/// Frame ordering of the input/output image sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLayout {
    pub times: Vec<i32>,
}

impl FrameLayout {
    pub fn three_frame() -> Self {
        FrameLayout {
            times: vec![-1, 0, 1],
        }
    }

    pub fn two_frame() -> Self {
        FrameLayout { times: vec![0, 1] }
    }

    pub fn two_frame_mode(&self) -> bool {
        self.times.len() == 2
    }

    pub fn num_frames(&self) -> usize {
        2 * self.times.len()
    }

    pub fn frames(&self) -> Vec<FrameId> {
        let mut out = Vec::new();
        for &right in &[false, true] {
            for &time in &self.times {
                out.push(FrameId { right, time });
            }
        }
        out
    }

    pub fn index(&self, frame: FrameId) -> usize {
        let t = self
            .times
            .iter()
            .position(|&x| x == frame.time)
            .expect("time present in layout");
        (frame.right as usize) * self.times.len() + t
    }

    pub fn reference_index(&self) -> usize {
        self.index(FrameId {
            right: false,
            time: 0,
        })
    }

    /// Index of the frame a warp target points at.
    pub fn target_index(&self, target: WarpTarget) -> usize {
        let (right, time) = match target {
            WarpTarget::Stereo => (true, 0),
            WarpTarget::FlowF => (false, 1),
            WarpTarget::FlowB => (false, -1),
            WarpTarget::CrossF => (true, 1),
            WarpTarget::CrossB => (true, -1),
        };
        self.index(FrameId { right, time })
    }
}

/// Stereo shift as a rigid motion: `X_right = X_left - (b, 0, 0)`.
pub fn stereo_motion(rig: &CameraRig) -> RigidMotion {
    RigidMotion::new(Matrix3::identity(), Vector3::new(rig.baseline, 0.0, 0.0))
}

/// Motion of an object expressed in one view, mapping time f to f+1 under
/// constant velocity. The right-view motion is the stereo conjugate.
pub fn motion_in_view(step: &RigidMotion, right: bool, rig: &CameraRig) -> RigidMotion {
    if right {
        let s = stereo_motion(rig);
        s.compose(step).compose(&s.inverse())
    } else {
        *step
    }
}

/// A reference-frame plane expressed at (view, time) for an object moving
/// by `step` per frame.
pub fn plane_at_frame(
    plane: &Plane,
    step: &RigidMotion,
    frame: FrameId,
    rig: &CameraRig,
) -> Result<Plane> {
    let mut pl = *plane;
    match frame.time {
        1 => pl = step.transform_plane(&pl)?,
        -1 => pl = step.inverse().transform_plane(&pl)?,
        0 => {}
        t => {
            return Err(Error::InvalidInput(format!("unsupported frame time {t}")));
        }
    }
    if frame.right {
        pl = stereo_motion(rig).transform_plane(&pl)?;
    }
    Ok(pl)
}

/// Composite motion from reference coordinates to (view, time).
pub fn motion_to_frame(step: &RigidMotion, frame: FrameId, rig: &CameraRig) -> RigidMotion {
    let mut m = match frame.time {
        1 => *step,
        -1 => step.inverse(),
        _ => RigidMotion::identity(),
    };
    if frame.right {
        m = stereo_motion(rig).compose(&m);
    }
    m
}

/// Bidirectional per-pixel flows at a frame for a single proposal
/// (plane, object step), evaluated at the given pixels. In two-frame mode
/// the backward flow is the reflection of the forward flow.
pub fn proposal_flows_at(
    plane: &Plane,
    step: &RigidMotion,
    frame: FrameId,
    rig: &CameraRig,
    two_frame: bool,
    pixels: &[(u16, u16)],
) -> Result<Vec<(f64, f64, f64, f64)>> {
    let pl = plane_at_frame(plane, step, frame, rig)?;
    let o = motion_in_view(step, frame.right, rig);
    let h_fwd = homography(&rig.k, &o, &pl)?;
    let h_bwd = if two_frame {
        None
    } else {
        Some(homography(&rig.k, &o.inverse(), &pl)?)
    };
    let mut out = Vec::with_capacity(pixels.len());
    for &(x, y) in pixels {
        let (px, py, hw) = project_homography(&h_fwd, x as f64, y as f64);
        if hw.abs() <= 1e-12 {
            return Err(Error::DegenerateHomography { x: x as usize, y: y as usize, w: hw });
        }
        let (u, v) = (x as f64 - px, y as f64 - py);
        let (ub, vb) = match &h_bwd {
            None => (-u, -v),
            Some(hb) => {
                let (px, py, hw) = project_homography(hb, x as f64, y as f64);
                if hw.abs() <= 1e-12 {
                    return Err(Error::DegenerateHomography { x: x as usize, y: y as usize, w: hw });
                }
                (x as f64 - px, y as f64 - py)
            }
        };
        out.push((u, v, ub, vb));
    }
    Ok(out)
}

/// Frozen per-frame superpixel assignment. The reference frame keeps the
/// partition's own labels; other frames are forward-mapped through the
/// per-superpixel homographies with a disparity z-buffer, holes filled by
/// nearest assignment.
#[derive(Debug, Clone)]
pub struct FrameAssignment {
    pub layout: FrameLayout,
    /// Per frame: superpixel id per pixel.
    pub label_maps: Vec<Vec<u32>>,
}

impl FrameAssignment {
    pub fn from_model(model: &SceneModel, rig: &CameraRig, layout: &FrameLayout) -> Result<Self> {
        let p = &model.partition;
        let (h, w) = (p.height, p.width);
        let n_sp = p.num_superpixels();
        let mut label_maps = Vec::new();

        for frame in layout.frames() {
            let labels = if !frame.right && frame.time == 0 {
                p.labels.clone()
            } else {
                let mut ref_to_frame = Vec::with_capacity(n_sp);
                let mut planes_at = Vec::with_capacity(n_sp);
                for i in 0..n_sp {
                    let step = &model.motions[model.labels[i]];
                    ref_to_frame.push(homography(
                        &rig.k,
                        &motion_to_frame(step, frame, rig),
                        &model.planes[i],
                    )?);
                    planes_at.push(plane_at_frame(&model.planes[i], step, frame, rig)?);
                }
                let mut assigned = vec![u32::MAX; h * w];
                let mut zbuf = vec![f64::NEG_INFINITY; h * w];
                for y in 0..h {
                    for x in 0..w {
                        let i = p.label_at(x, y) as usize;
                        let (px, py, hw) = project_homography(&ref_to_frame[i], x as f64, y as f64);
                        if hw.abs() <= 1e-12 {
                            continue;
                        }
                        let tx = px.round() as i64;
                        let ty = py.round() as i64;
                        if tx < 0 || ty < 0 || tx >= w as i64 || ty >= h as i64 {
                            continue;
                        }
                        let d = planes_at[i].disparity_at(px, py, rig);
                        let idx = ty as usize * w + tx as usize;
                        if d > zbuf[idx] {
                            zbuf[idx] = d;
                            assigned[idx] = i as u32;
                        }
                    }
                }
                fill_nearest(&mut assigned, h, w);
                assigned
            };
            label_maps.push(labels);
        }
        Ok(FrameAssignment {
            layout: layout.clone(),
            label_maps,
        })
    }

    /// Pixels assigned to each superpixel in one frame.
    pub fn pixels_of(&self, frame_idx: usize, n_sp: usize, width: usize) -> Vec<Vec<(u16, u16)>> {
        let mut out = vec![Vec::new(); n_sp];
        for (i, &l) in self.label_maps[frame_idx].iter().enumerate() {
            out[l as usize].push(((i % width) as u16, (i / width) as u16));
        }
        out
    }

    /// Dense bidirectional flows of a model at one frame under this
    /// assignment.
    pub fn frame_flows(
        &self,
        model: &SceneModel,
        rig: &CameraRig,
        frame_idx: usize,
        h: usize,
        w: usize,
    ) -> Result<(FlowField, FlowField)> {
        let frame = self.layout.frames()[frame_idx];
        let two_frame = self.layout.two_frame_mode();
        let n_sp = model.planes.len();
        let mut h_fwd = Vec::with_capacity(n_sp);
        let mut h_bwd = Vec::with_capacity(n_sp);
        for i in 0..n_sp {
            let step = &model.motions[model.labels[i]];
            let pl = plane_at_frame(&model.planes[i], step, frame, rig)?;
            let o = motion_in_view(step, frame.right, rig);
            h_fwd.push(homography(&rig.k, &o, &pl)?);
            if !two_frame {
                h_bwd.push(homography(&rig.k, &o.inverse(), &pl)?);
            }
        }
        let labels = &self.label_maps[frame_idx];
        let mut fwd = FlowField::zeros(h, w);
        let mut bwd = FlowField::zeros(h, w);
        for y in 0..h {
            for x in 0..w {
                let i = labels[y * w + x] as usize;
                let (px, py, hw) = project_homography(&h_fwd[i], x as f64, y as f64);
                if hw.abs() <= 1e-12 {
                    return Err(Error::DegenerateHomography { x, y, w: hw });
                }
                let (u, v) = (x as f64 - px, y as f64 - py);
                fwd.set(x, y, u, v);
                if two_frame {
                    bwd.set(x, y, -u, -v);
                } else {
                    let (px, py, hw) = project_homography(&h_bwd[i], x as f64, y as f64);
                    if hw.abs() <= 1e-12 {
                        return Err(Error::DegenerateHomography { x, y, w: hw });
                    }
                    bwd.set(x, y, x as f64 - px, y as f64 - py);
                }
            }
        }
        Ok((fwd, bwd))
    }

    /// Disparity map of a model at one frame under this assignment.
    pub fn frame_disparity(
        &self,
        model: &SceneModel,
        rig: &CameraRig,
        frame_idx: usize,
        h: usize,
        w: usize,
    ) -> Result<DisparityMap> {
        let frame = self.layout.frames()[frame_idx];
        let n_sp = model.planes.len();
        let mut planes_at = Vec::with_capacity(n_sp);
        for i in 0..n_sp {
            let step = &model.motions[model.labels[i]];
            planes_at.push(plane_at_frame(&model.planes[i], step, frame, rig)?);
        }
        let labels = &self.label_maps[frame_idx];
        let mut map = DisparityMap::invalid(h, w);
        for y in 0..h {
            for x in 0..w {
                let i = labels[y * w + x] as usize;
                let d = planes_at[i].disparity_at(x as f64, y as f64, rig);
                if d > 0.0 {
                    map.set(x, y, d);
                }
            }
        }
        Ok(map)
    }
}

/// Multi-source nearest fill of unassigned (`u32::MAX`) cells, 4-connected,
/// deterministic scan order.
pub(crate) fn fill_nearest(labels: &mut [u32], h: usize, w: usize) {
    let mut queue: std::collections::VecDeque<usize> = (0..h * w)
        .filter(|&i| labels[i] != u32::MAX)
        .collect();
    if queue.is_empty() {
        for l in labels.iter_mut() {
            *l = 0;
        }
        return;
    }
    while let Some(i) = queue.pop_front() {
        let (y, x) = (i / w, i % w);
        let l = labels[i];
        let push = |j: usize, queue: &mut std::collections::VecDeque<usize>, labels: &mut [u32]| {
            if labels[j] == u32::MAX {
                labels[j] = l;
                queue.push_back(j);
            }
        };
        if x > 0 {
            push(i - 1, &mut queue, labels);
        }
        if x + 1 < w {
            push(i + 1, &mut queue, labels);
        }
        if y > 0 {
            push(i - w, &mut queue, labels);
        }
        if y + 1 < h {
            push(i + w, &mut queue, labels);
        }
    }
}
