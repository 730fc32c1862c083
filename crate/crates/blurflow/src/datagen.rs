//! Synthetic stereo blurred-sequence generator: procedurally textured
//! planar scenes rendered at high temporal resolution, averaged into
//! blurred frames, with analytically exact ground-truth flows,
//! disparities, masks and scene parameters.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;

use crate::geometry::{homography, FrameLayout, Plane, RigidMotion, SceneModel};
use crate::superpixels::{SemanticMask, SuperpixelPartition};
use crate::types::{CameraRig, DisparityMap, FlowField, Image};
use crate::{Error, Result};

/// One planar foreground object.
#[derive(Debug, Clone)]
pub struct ObjectSpec {
    /// Image-space rectangle (x0, y0, width, height) at the reference frame.
    pub rect: (f64, f64, f64, f64),
    pub plane: Plane,
    /// Camera-frame rigid step from frame m to m+1.
    pub motion: RigidMotion,
}

/// Full description of a synthetic scene.
#[derive(Debug, Clone)]
pub struct SceneSpec {
    pub height: usize,
    pub width: usize,
    pub rig: CameraRig,
    pub background: Plane,
    /// Ego-motion step: the apparent rigid motion of static geometry.
    pub camera_motion: RigidMotion,
    pub objects: Vec<ObjectSpec>,
    pub tau: f64,
    /// Latent frames per half-exposure; 2N+1 renders are averaged.
    pub n_sub: usize,
    pub channels: usize,
    pub texture_seed: u64,
    /// Lattice spacings of the value-noise octaves, pixels.
    pub texture_scales: Vec<f64>,
    pub semantic_dilation: usize,
}

impl SceneSpec {
    /// The desk-scale default: 96x160, background at 10 m, one 60x40 px
    /// object at 5 m moving 6 px/frame, camera translating 2 px/frame.
    pub fn default_scene() -> Self {
        let rig = CameraRig::new(100.0, 100.0, 80.0, 48.0, 0.5).unwrap();
        SceneSpec {
            height: 96,
            width: 160,
            rig,
            background: Plane::fronto(10.0),
            // 2 px/frame apparent background flow: t_x = 2 * 10 / 100.
            camera_motion: RigidMotion::new(Matrix3::identity(), Vector3::new(0.2, 0.0, 0.0)),
            objects: vec![ObjectSpec {
                rect: (50.0, 28.0, 60.0, 40.0),
                plane: Plane::fronto(5.0),
                // 6 px/frame apparent: t_x = 6 * 5 / 100.
                motion: RigidMotion::new(Matrix3::identity(), Vector3::new(0.3, 0.0, 0.0)),
            }],
            tau: 0.23,
            n_sub: 20,
            channels: 3,
            texture_seed: 7,
            texture_scales: vec![5.0, 11.0, 23.0],
            semantic_dilation: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 0.5) {
            return Err(Error::InvalidInput(format!("tau must be in (0, 0.5], got {}", self.tau)));
        }
        if self.n_sub < 1 {
            return Err(Error::InvalidInput("n_sub must be >= 1".into()));
        }
        for (k, obj) in self.objects.iter().enumerate() {
            let d_obj = obj.plane.disparity_at(
                obj.rect.0 + obj.rect.2 / 2.0,
                obj.rect.1 + obj.rect.3 / 2.0,
                &self.rig,
            );
            let d_bg = self.background.disparity_at(
                obj.rect.0 + obj.rect.2 / 2.0,
                obj.rect.1 + obj.rect.3 / 2.0,
                &self.rig,
            );
            if d_obj <= d_bg {
                return Err(Error::InvalidInput(format!(
                    "object {k} is behind the background (disparity {d_obj:.2} <= {d_bg:.2})"
                )));
            }
        }
        Ok(())
    }

    /// Flat key=value form, the on-disk scene description.
    pub fn to_key_values(&self) -> BTreeMap<String, String> {
        let mut kv = BTreeMap::new();
        kv.insert("height".into(), self.height.to_string());
        kv.insert("width".into(), self.width.to_string());
        kv.insert("fx".into(), self.rig.fx().to_string());
        kv.insert("fy".into(), self.rig.fy().to_string());
        kv.insert("cx".into(), self.rig.cx().to_string());
        kv.insert("cy".into(), self.rig.cy().to_string());
        kv.insert("baseline".into(), self.rig.baseline.to_string());
        kv.insert("background_depth".into(), (1.0 / self.background.n.z).to_string());
        kv.insert("camera_tx".into(), self.camera_motion.t.x.to_string());
        kv.insert("camera_ty".into(), self.camera_motion.t.y.to_string());
        kv.insert("camera_tz".into(), self.camera_motion.t.z.to_string());
        kv.insert("tau".into(), self.tau.to_string());
        kv.insert("n_sub".into(), self.n_sub.to_string());
        kv.insert("channels".into(), self.channels.to_string());
        kv.insert("texture_seed".into(), self.texture_seed.to_string());
        kv.insert(
            "texture_scales".into(),
            self.texture_scales
                .iter()
                .map(|s| s.to_string())
                .collect::<Vec<_>>()
                .join(" "),
        );
        kv.insert("semantic_dilation".into(), self.semantic_dilation.to_string());
        kv.insert("num_objects".into(), self.objects.len().to_string());
        for (k, obj) in self.objects.iter().enumerate() {
            kv.insert(
                format!("object{k}_rect"),
                format!("{} {} {} {}", obj.rect.0, obj.rect.1, obj.rect.2, obj.rect.3),
            );
            kv.insert(format!("object{k}_depth"), (1.0 / obj.plane.n.z).to_string());
            kv.insert(
                format!("object{k}_t"),
                format!("{} {} {}", obj.motion.t.x, obj.motion.t.y, obj.motion.t.z),
            );
        }
        kv
    }

    /// Parse the flat key=value form; missing keys fall back to the
    /// default scene.
    pub fn from_key_values(kv: &BTreeMap<String, String>) -> Result<Self> {
        let mut spec = SceneSpec::default_scene();
        let parse_f = |key: &str, kv: &BTreeMap<String, String>| -> Result<Option<f64>> {
            kv.get(key)
                .map(|v| v.parse::<f64>().map_err(|_| Error::Config(format!("bad float for {key}: {v}"))))
                .transpose()
        };
        let parse_u = |key: &str, kv: &BTreeMap<String, String>| -> Result<Option<usize>> {
            kv.get(key)
                .map(|v| v.parse::<usize>().map_err(|_| Error::Config(format!("bad integer for {key}: {v}"))))
                .transpose()
        };
        if let Some(v) = parse_u("height", kv)? {
            spec.height = v;
        }
        if let Some(v) = parse_u("width", kv)? {
            spec.width = v;
        }
        let fx = parse_f("fx", kv)?.unwrap_or(spec.rig.fx());
        let fy = parse_f("fy", kv)?.unwrap_or(spec.rig.fy());
        let cx = parse_f("cx", kv)?.unwrap_or(spec.rig.cx());
        let cy = parse_f("cy", kv)?.unwrap_or(spec.rig.cy());
        let baseline = parse_f("baseline", kv)?.unwrap_or(spec.rig.baseline);
        spec.rig = CameraRig::new(fx, fy, cx, cy, baseline)?;
        if let Some(z) = parse_f("background_depth", kv)? {
            spec.background = Plane::fronto(z);
        }
        let ct = Vector3::new(
            parse_f("camera_tx", kv)?.unwrap_or(spec.camera_motion.t.x),
            parse_f("camera_ty", kv)?.unwrap_or(spec.camera_motion.t.y),
            parse_f("camera_tz", kv)?.unwrap_or(spec.camera_motion.t.z),
        );
        spec.camera_motion = RigidMotion::new(Matrix3::identity(), ct);
        if let Some(v) = parse_f("tau", kv)? {
            spec.tau = v;
        }
        if let Some(v) = parse_u("n_sub", kv)? {
            spec.n_sub = v;
        }
        if let Some(v) = parse_u("channels", kv)? {
            spec.channels = v;
        }
        if let Some(v) = parse_u("texture_seed", kv)? {
            spec.texture_seed = v as u64;
        }
        if let Some(v) = kv.get("texture_scales") {
            spec.texture_scales = v
                .split_whitespace()
                .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad texture_scales: {v}"))))
                .collect::<Result<_>>()?;
        }
        if let Some(v) = parse_u("semantic_dilation", kv)? {
            spec.semantic_dilation = v;
        }
        if let Some(n) = parse_u("num_objects", kv)? {
            let mut objects = Vec::new();
            for k in 0..n {
                let rect_str = kv
                    .get(&format!("object{k}_rect"))
                    .ok_or_else(|| Error::Config(format!("missing object{k}_rect")))?;
                let vals: Vec<f64> = rect_str
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad rect: {rect_str}"))))
                    .collect::<Result<_>>()?;
                if vals.len() != 4 {
                    return Err(Error::Config(format!("object{k}_rect needs 4 numbers")));
                }
                let depth = parse_f(&format!("object{k}_depth"), kv)?.unwrap_or(5.0);
                let t_str = kv
                    .get(&format!("object{k}_t"))
                    .ok_or_else(|| Error::Config(format!("missing object{k}_t")))?;
                let tv: Vec<f64> = t_str
                    .split_whitespace()
                    .map(|s| s.parse::<f64>().map_err(|_| Error::Config(format!("bad object t: {t_str}"))))
                    .collect::<Result<_>>()?;
                if tv.len() != 3 {
                    return Err(Error::Config(format!("object{k}_t needs 3 numbers")));
                }
                objects.push(ObjectSpec {
                    rect: (vals[0], vals[1], vals[2], vals[3]),
                    plane: Plane::fronto(depth),
                    motion: RigidMotion::new(Matrix3::identity(), Vector3::new(tv[0], tv[1], tv[2])),
                });
            }
            spec.objects = objects;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// Band-limited value noise shared by all surfaces at the reference frame.
/// Evaluated analytically at continuous coordinates, so warped rendering
/// has no resampling error.
#[derive(Debug, Clone)]
pub struct Texture {
    seed: u64,
    scales: Vec<f64>,
}

impl Texture {
    pub fn new(seed: u64, scales: Vec<f64>) -> Self {
        Texture { seed, scales }
    }

    fn hash(&self, ix: i64, iy: i64, octave: usize, channel: usize) -> f64 {
        let mut h = self
            .seed
            .wrapping_mul(0x9E3779B97F4A7C15)
            .wrapping_add((ix as u64).wrapping_mul(0xBF58476D1CE4E5B9))
            .wrapping_add((iy as u64).wrapping_mul(0x94D049BB133111EB))
            .wrapping_add((octave as u64).wrapping_mul(0xD6E8FEB86659FD93))
            .wrapping_add((channel as u64).wrapping_mul(0xFF51AFD7ED558CCD));
        h ^= h >> 33;
        h = h.wrapping_mul(0xC4CEB9FE1A85EC53);
        h ^= h >> 33;
        (h >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Smooth noise in [0.15, 0.85].
    pub fn sample(&self, x: f64, y: f64, channel: usize) -> f64 {
        let mut v = 0.0;
        let w = 1.0 / self.scales.len() as f64;
        for (o, &s) in self.scales.iter().enumerate() {
            let fx = x / s;
            let fy = y / s;
            let x0 = fx.floor();
            let y0 = fy.floor();
            let tx = smooth_step(fx - x0);
            let ty = smooth_step(fy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            let v00 = self.hash(x0, y0, o, channel);
            let v10 = self.hash(x0 + 1, y0, o, channel);
            let v01 = self.hash(x0, y0 + 1, o, channel);
            let v11 = self.hash(x0 + 1, y0 + 1, o, channel);
            v += w
                * (v00 * (1.0 - tx) * (1.0 - ty)
                    + v10 * tx * (1.0 - ty)
                    + v01 * (1.0 - tx) * ty
                    + v11 * tx * ty);
        }
        0.15 + 0.7 * v
    }
}

#[inline]
fn smooth_step(t: f64) -> f64 {
    // Cosine easing keeps the lattice interpolation band-limited.
    0.5 * (1.0 - (std::f64::consts::PI * t).cos())
}

/// Everything the generator knows about the scene, frame by frame.
#[derive(Debug, Clone)]
pub struct GroundTruthBundle {
    pub layout: FrameLayout,
    pub blurred: Vec<Image>,
    pub latents: Vec<Image>,
    /// Reference-frame forward/backward flow.
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub disparity_m: DisparityMap,
    pub disparity_m1: DisparityMap,
    pub moving_mask: SemanticMask,
    pub semantic_prior: SemanticMask,
    /// Surface id per reference pixel: 0 background, k >= 1 objects.
    pub object_map: Vec<u32>,
    /// Per surface (0 = background): plane and per-step motion.
    pub planes: Vec<Plane>,
    pub motions: Vec<RigidMotion>,
    /// Bidirectional flows of every frame, layout order.
    pub frame_flows: Vec<(FlowField, FlowField)>,
}

impl GroundTruthBundle {
    /// Assemble the ground-truth scene model on a given partition by
    /// majority vote of the per-pixel object map.
    pub fn model_on(&self, partition: std::sync::Arc<SuperpixelPartition>) -> SceneModel {
        let mut planes = Vec::new();
        let mut labels = Vec::new();
        for pixels in &partition.pixels {
            let mut counts = vec![0usize; self.planes.len()];
            for &(x, y) in pixels {
                counts[self.object_map[y as usize * partition.width + x as usize] as usize] += 1;
            }
            let obj = counts
                .iter()
                .enumerate()
                .max_by_key(|(i, c)| (**c, std::cmp::Reverse(*i)))
                .map(|(i, _)| i)
                .unwrap_or(0);
            planes.push(self.planes[obj]);
            labels.push(obj);
        }
        SceneModel {
            partition,
            planes,
            labels,
            motions: self.motions.clone(),
        }
    }
}

struct SurfaceState {
    plane: Plane,
    motion: RigidMotion,
    rect: Option<(f64, f64, f64, f64)>,
}

/// Interpolated motion at continuous time `t` frames from the reference,
/// constant velocity: rotation angle and translation scale linearly.
fn motion_at(m: &RigidMotion, t: f64) -> RigidMotion {
    let rot = nalgebra::Rotation3::from_matrix(&m.r);
    let scaled = nalgebra::Rotation3::identity().slerp(&rot, t);
    RigidMotion {
        r: scaled.into_inner(),
        t: m.t * t,
    }
}

/// Homography from reference coordinates to (view, time t) for a surface.
fn surface_homography(
    surface: &SurfaceState,
    rig: &CameraRig,
    right: bool,
    t: f64,
) -> Result<Matrix3<f64>> {
    let mut motion = motion_at(&surface.motion, t);
    if right {
        let stereo = RigidMotion::new(Matrix3::identity(), Vector3::new(rig.baseline, 0.0, 0.0));
        motion = stereo.compose(&motion);
    }
    homography(&rig.k, &motion, &surface.plane)
}

/// Render the scene at continuous time `t` (frames from the reference) in
/// one view. Surfaces are composited front to back; object membership is
/// tested in reference coordinates through the inverse homography.
pub fn render_frame(spec: &SceneSpec, texture: &Texture, t: f64, right: bool) -> Result<Image> {
    let mut surfaces: Vec<SurfaceState> = spec
        .objects
        .iter()
        .map(|o| SurfaceState {
            plane: o.plane,
            motion: o.motion,
            rect: Some(o.rect),
        })
        .collect();
    // Near-to-far by disparity at the reference.
    surfaces.sort_by(|a, b| {
        let da = a.plane.disparity_at(spec.rig.cx(), spec.rig.cy(), &spec.rig);
        let db = b.plane.disparity_at(spec.rig.cx(), spec.rig.cy(), &spec.rig);
        db.partial_cmp(&da).unwrap()
    });
    surfaces.push(SurfaceState {
        plane: spec.background,
        motion: spec.camera_motion,
        rect: None,
    });

    let inv: Vec<Matrix3<f64>> = surfaces
        .iter()
        .map(|s| {
            surface_homography(s, &spec.rig, right, t)?
                .try_inverse()
                .ok_or(Error::SingularCamera)
        })
        .collect::<Result<_>>()?;

    let rows: Vec<Vec<f64>> = (0..spec.height)
        .into_par_iter()
        .map(|y| {
            let mut row = vec![0.0; spec.width * spec.channels];
            for x in 0..spec.width {
                for (s, surface) in surfaces.iter().enumerate() {
                    let p = inv[s] * Vector3::new(x as f64, y as f64, 1.0);
                    let (rx, ry) = (p.x / p.z, p.y / p.z);
                    let hit = match surface.rect {
                        Some((x0, y0, w, h)) => {
                            rx >= x0 && rx <= x0 + w - 1.0 && ry >= y0 && ry <= y0 + h - 1.0
                        }
                        None => true,
                    };
                    if hit {
                        for c in 0..spec.channels {
                            row[x * spec.channels + c] = texture.sample(rx, ry, c);
                        }
                        break;
                    }
                }
            }
            row
        })
        .collect();
    let mut img = Image::new(spec.height, spec.width, spec.channels);
    for (y, row) in rows.into_iter().enumerate() {
        img.data[y * spec.width * spec.channels..(y + 1) * spec.width * spec.channels]
            .copy_from_slice(&row);
    }
    Ok(img)
}

/// Per-pixel surface id at (view, integer time f), front-most wins.
fn object_map_at(spec: &SceneSpec, right: bool, f: f64) -> Result<Vec<u32>> {
    // Surface ids: 0 = background, k = object k-1 + 1.
    let mut ids: Vec<(u32, SurfaceState)> = spec
        .objects
        .iter()
        .enumerate()
        .map(|(k, o)| {
            (
                (k + 1) as u32,
                SurfaceState {
                    plane: o.plane,
                    motion: o.motion,
                    rect: Some(o.rect),
                },
            )
        })
        .collect();
    ids.sort_by(|a, b| {
        let da = a.1.plane.disparity_at(spec.rig.cx(), spec.rig.cy(), &spec.rig);
        let db = b.1.plane.disparity_at(spec.rig.cx(), spec.rig.cy(), &spec.rig);
        db.partial_cmp(&da).unwrap()
    });
    let inv: Vec<Matrix3<f64>> = ids
        .iter()
        .map(|(_, s)| {
            surface_homography(s, &spec.rig, right, f)?
                .try_inverse()
                .ok_or(Error::SingularCamera)
        })
        .collect::<Result<_>>()?;
    let mut map = vec![0u32; spec.height * spec.width];
    for y in 0..spec.height {
        for x in 0..spec.width {
            for (s, (id, surface)) in ids.iter().enumerate() {
                let p = inv[s] * Vector3::new(x as f64, y as f64, 1.0);
                let (rx, ry) = (p.x / p.z, p.y / p.z);
                let (x0, y0, w, h) = surface.rect.unwrap();
                if rx >= x0 && rx <= x0 + w - 1.0 && ry >= y0 && ry <= y0 + h - 1.0 {
                    map[y * spec.width + x] = *id;
                    break;
                }
            }
        }
    }
    Ok(map)
}

/// Flows of the surface map at (view, time f) toward f+1 (forward) and
/// f-1 (backward).
fn flows_at(spec: &SceneSpec, map: &[u32], right: bool, f: f64) -> Result<(FlowField, FlowField)> {
    let surfaces: Vec<SurfaceState> = std::iter::once(SurfaceState {
        plane: spec.background,
        motion: spec.camera_motion,
        rect: None,
    })
    .chain(spec.objects.iter().map(|o| SurfaceState {
        plane: o.plane,
        motion: o.motion,
        rect: Some(o.rect),
    }))
    .collect();

    // H(ref -> v, f) and H(ref -> v, f +/- 1); flow = x - pi(H_next H_f^-1 x).
    let mut h_step_fwd = Vec::new();
    let mut h_step_bwd = Vec::new();
    for s in &surfaces {
        let h_f = surface_homography(s, &spec.rig, right, f)?;
        let h_inv = h_f.try_inverse().ok_or(Error::SingularCamera)?;
        let h_next = surface_homography(s, &spec.rig, right, f + 1.0)?;
        let h_prev = surface_homography(s, &spec.rig, right, f - 1.0)?;
        h_step_fwd.push(h_next * h_inv);
        h_step_bwd.push(h_prev * h_inv);
    }
    let mut fwd = FlowField::zeros(spec.height, spec.width);
    let mut bwd = FlowField::zeros(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let s = map[y * spec.width + x] as usize;
            for (h, field) in [(&h_step_fwd[s], &mut fwd), (&h_step_bwd[s], &mut bwd)] {
                let p = h * Vector3::new(x as f64, y as f64, 1.0);
                if p.z.abs() <= 1e-12 {
                    return Err(Error::DegenerateHomography { x, y, w: p.z });
                }
                field.set(x, y, x as f64 - p.x / p.z, y as f64 - p.y / p.z);
            }
        }
    }
    Ok((fwd, bwd))
}

/// Disparity of the mapped surfaces at (view = left, time f).
fn disparity_at_time(spec: &SceneSpec, map: &[u32], f: f64) -> Result<DisparityMap> {
    let mut planes = vec![spec.background];
    planes.extend(spec.objects.iter().map(|o| o.plane));
    let motions: Vec<RigidMotion> = std::iter::once(spec.camera_motion)
        .chain(spec.objects.iter().map(|o| o.motion))
        .collect();
    let mut at_f = Vec::new();
    for (p, m) in planes.iter().zip(&motions) {
        at_f.push(motion_at(m, f).transform_plane(p)?);
    }
    let mut out = DisparityMap::invalid(spec.height, spec.width);
    for y in 0..spec.height {
        for x in 0..spec.width {
            let s = map[y * spec.width + x] as usize;
            let d = at_f[s].disparity_at(x as f64, y as f64, &spec.rig);
            if d > 0.0 {
                out.set(x, y, d);
            }
        }
    }
    Ok(out)
}

/// Render, average and annotate the full three-frame stereo window.
pub fn generate(spec: &SceneSpec) -> Result<GroundTruthBundle> {
    spec.validate()?;
    let layout = FrameLayout::three_frame();
    let texture = Texture::new(spec.texture_seed, spec.texture_scales.clone());
    let n = spec.n_sub as i64;

    let mut blurred = Vec::new();
    let mut latents = Vec::new();
    for frame in layout.frames() {
        let f = frame.time as f64;
        let subs: Vec<Image> = (-n..=n)
            .into_par_iter()
            .map(|k| render_frame(spec, &texture, f + spec.tau * k as f64 / n as f64, frame.right))
            .collect::<Result<_>>()?;
        blurred.push(crate::blur::synthesize_blur(&subs)?);
        latents.push(subs[n as usize].clone());
    }

    let object_map = object_map_at(spec, false, 0.0)?;
    let (flow_fwd, flow_bwd) = flows_at(spec, &object_map, false, 0.0)?;
    let disparity_m = disparity_at_time(spec, &object_map, 0.0)?;
    let map_m1 = object_map_at(spec, false, 1.0)?;
    let disparity_m1 = disparity_at_time(spec, &map_m1, 1.0)?;

    // Moving = any object whose step differs from the ego step.
    let moving: Vec<bool> = std::iter::once(false)
        .chain(spec.objects.iter().map(|o| {
            (o.motion.r - spec.camera_motion.r).norm() > 1e-12
                || (o.motion.t - spec.camera_motion.t).norm() > 1e-12
        }))
        .collect();
    let mut moving_mask = SemanticMask::new(spec.height, spec.width);
    for (i, &id) in object_map.iter().enumerate() {
        moving_mask.fg[i] = moving[id as usize];
    }
    let semantic_prior = moving_mask.dilate(spec.semantic_dilation);

    let mut frame_flows = Vec::new();
    for frame in layout.frames() {
        let map = if !frame.right && frame.time == 0 {
            object_map.clone()
        } else {
            object_map_at(spec, frame.right, frame.time as f64)?
        };
        frame_flows.push(flows_at(spec, &map, frame.right, frame.time as f64)?);
    }

    let planes: Vec<Plane> = std::iter::once(spec.background)
        .chain(spec.objects.iter().map(|o| o.plane))
        .collect();
    let motions: Vec<RigidMotion> = std::iter::once(spec.camera_motion)
        .chain(spec.objects.iter().map(|o| o.motion))
        .collect();

    Ok(GroundTruthBundle {
        layout,
        blurred,
        latents,
        flow_fwd,
        flow_bwd,
        disparity_m,
        disparity_m1,
        moving_mask,
        semantic_prior,
        object_map,
        planes,
        motions,
        frame_flows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blur::build_kernel;
    use approx::assert_abs_diff_eq;

    fn tiny_scene() -> SceneSpec {
        let mut spec = SceneSpec::default_scene();
        spec.height = 48;
        spec.width = 80;
        spec.rig = CameraRig::new(100.0, 100.0, 40.0, 24.0, 0.5).unwrap();
        spec.objects[0].rect = (26.0, 14.0, 30.0, 20.0);
        spec.n_sub = 8;
        spec.channels = 1;
        spec
    }

    #[test]
    fn static_scene_blur_equals_latent() {
        let mut spec = tiny_scene();
        spec.camera_motion = RigidMotion::identity();
        spec.objects[0].motion = RigidMotion::identity();
        let bundle = generate(&spec).unwrap();
        for (b, l) in bundle.blurred.iter().zip(&bundle.latents) {
            assert!(b.rmse(l) < 1e-12);
        }
        assert!(bundle.flow_fwd.u.iter().all(|&v| v.abs() < 1e-12));
        assert!(bundle.moving_mask.fg.iter().all(|&v| !v));
    }

    #[test]
    fn middle_subframe_is_latent() {
        let spec = tiny_scene();
        let texture = Texture::new(spec.texture_seed, spec.texture_scales.clone());
        let latent = render_frame(&spec, &texture, 0.0, false).unwrap();
        let bundle = generate(&spec).unwrap();
        let ref_idx = bundle.layout.reference_index();
        assert!(bundle.latents[ref_idx].rmse(&latent) < 1e-15);
    }

    #[test]
    fn zero_motion_renders_identical_frames() {
        let mut spec = tiny_scene();
        spec.camera_motion = RigidMotion::identity();
        spec.objects[0].motion = RigidMotion::identity();
        let texture = Texture::new(spec.texture_seed, spec.texture_scales.clone());
        let a = render_frame(&spec, &texture, -0.5, false).unwrap();
        let b = render_frame(&spec, &texture, 0.4, false).unwrap();
        assert!(a.rmse(&b) < 1e-15);
    }

    #[test]
    fn subframe_shift_matches_motion() {
        // Two adjacent sub-frames of a translating plane shift by
        // motion / (2N) px; check via the cross-correlation peak.
        let mut spec = tiny_scene();
        spec.objects.clear();
        // 4 px/frame apparent background motion.
        spec.camera_motion = RigidMotion::new(Matrix3::identity(), Vector3::new(0.4, 0.0, 0.0));
        let texture = Texture::new(spec.texture_seed, spec.texture_scales.clone());
        let step = spec.tau / spec.n_sub as f64; // frames between sub-frames
        let a = render_frame(&spec, &texture, 0.0, false).unwrap();
        let b = render_frame(&spec, &texture, step, false).unwrap();
        // Expected shift in px: 4 * step; the image moves right by -u.
        let expect = -4.0 * step;
        // Parabolic fit around the best integer shift of squared error.
        let sad = |shift: f64| -> f64 {
            let mut s = 0.0;
            for y in 4..spec.height - 4 {
                for x in 4..spec.width - 4 {
                    let mut out = [0.0];
                    crate::types::bilinear_sample(&b, x as f64 + shift, y as f64, &mut out);
                    s += (a.get(x, y, 0) - out[0]).powi(2);
                }
            }
            s
        };
        // The error at the true shift must beat neighbours half a pixel off.
        let e_true = sad(-expect);
        assert!(e_true < sad(-expect + 0.5));
        assert!(e_true < sad(-expect - 0.5));
        assert!(e_true < sad(0.5));
    }

    #[test]
    fn gt_flows_roundtrip_through_homography() {
        let spec = tiny_scene();
        let bundle = generate(&spec).unwrap();
        // Background pixels: flow must equal the homography-induced flow of
        // the background plane under the ego motion, exactly.
        let h = homography(&spec.rig.k, &spec.camera_motion, &spec.background).unwrap();
        let flow = crate::geometry::flow_from_homography(&h, spec.height, spec.width).unwrap();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if bundle.object_map[y * spec.width + x] == 0 {
                    let (u, v) = bundle.flow_fwd.at(x, y);
                    let (wu, wv) = flow.at(x, y);
                    assert_abs_diff_eq!(u, wu, epsilon = 1e-12);
                    assert_abs_diff_eq!(v, wv, epsilon = 1e-12);
                }
            }
        }
    }

    #[test]
    fn depth_ordering_invariant() {
        let spec = tiny_scene();
        let bundle = generate(&spec).unwrap();
        for y in 0..spec.height {
            for x in 0..spec.width {
                if bundle.object_map[y * spec.width + x] != 0 {
                    let d_obj = bundle.disparity_m.at(x, y);
                    let d_bg = spec.background.disparity_at(x as f64, y as f64, &spec.rig);
                    assert!(d_obj > d_bg);
                }
            }
        }
    }

    #[test]
    fn determinism_under_seed() {
        let spec = tiny_scene();
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        for (x, y) in a.blurred.iter().zip(&b.blurred) {
            assert_eq!(x.data, y.data);
        }
        assert_eq!(a.flow_fwd.u, b.flow_fwd.u);
    }

    #[test]
    fn blur_model_equivalence_on_tiny_scene() {
        // The 2N+1 frame average against the streak-kernel application of
        // the latent, with ground-truth flows.
        let spec = tiny_scene();
        let bundle = generate(&spec).unwrap();
        let ref_idx = bundle.layout.reference_index();
        let (fwd, bwd) = &bundle.frame_flows[ref_idx];
        let op = build_kernel(fwd, bwd, spec.tau, 64).unwrap();
        let est = op.apply(&bundle.latents[ref_idx]).unwrap();
        let rmse = est.rmse(&bundle.blurred[ref_idx]);
        assert!(rmse <= 5e-3, "blur-model equivalence rmse {rmse}");
    }

    #[test]
    fn scene_spec_kv_roundtrip() {
        let spec = SceneSpec::default_scene();
        let kv = spec.to_key_values();
        let back = SceneSpec::from_key_values(&kv).unwrap();
        assert_eq!(back.height, spec.height);
        assert_eq!(back.objects.len(), 1);
        assert_abs_diff_eq!(back.objects[0].motion.t.x, 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(back.tau, 0.23, epsilon = 1e-12);
    }

    #[test]
    fn object_behind_background_rejected() {
        let mut spec = tiny_scene();
        spec.objects[0].plane = Plane::fronto(20.0);
        assert!(generate(&spec).is_err());
    }
}
