//! Shared domain types: image containers, flow and disparity fields, the
//! calibrated rig and the energy weights.

use nalgebra::{Matrix3, Vector3};

use crate::{Error, Result};

/// Disparity value marking pixels with no valid measurement.
pub const INVALID_DISPARITY: f64 = -1.0;

/// Dense intensity field in `[0, 1]`, row-major, channel-interleaved.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 3, "channels must be 1 or 3");
        Image {
            height,
            width,
            channels,
            data: vec![0.0; height * width * channels],
        }
    }

    pub fn from_fn<F: FnMut(usize, usize, usize) -> f64>(
        height: usize,
        width: usize,
        channels: usize,
        mut f: F,
    ) -> Self {
        let mut img = Image::new(height, width, channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    img.data[(y * width + x) * channels + c] = f(x, y, c);
                }
            }
        }
        img
    }

    #[inline]
    pub fn idx(&self, x: usize, y: usize, c: usize) -> usize {
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width && self.channels == other.channels
    }

    /// Mean over channels, as a single-channel image.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        Image::from_fn(self.height, self.width, 1, |x, y, _| {
            (0..self.channels).map(|c| self.get(x, y, c)).sum::<f64>() / self.channels as f64
        })
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    pub fn rmse(&self, other: &Image) -> f64 {
        assert!(self.same_shape(other));
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        (sum / self.data.len() as f64).sqrt()
    }
}

/// Sample `img` at a subpixel coordinate with bilinear interpolation.
/// Coordinates outside the domain are clamped to the border, so the
/// operation is total. Returns one value per channel.
pub fn bilinear_sample(img: &Image, x: f64, y: f64, out: &mut [f64]) {
    debug_assert_eq!(out.len(), img.channels);
    let xc = x.clamp(0.0, (img.width - 1) as f64);
    let yc = y.clamp(0.0, (img.height - 1) as f64);
    let x0 = xc.floor() as usize;
    let y0 = yc.floor() as usize;
    let x1 = (x0 + 1).min(img.width - 1);
    let y1 = (y0 + 1).min(img.height - 1);
    let fx = xc - x0 as f64;
    let fy = yc - y0 as f64;
    for c in 0..img.channels {
        let v00 = img.get(x0, y0, c);
        let v10 = img.get(x1, y0, c);
        let v01 = img.get(x0, y1, c);
        let v11 = img.get(x1, y1, c);
        out[c] = v00 * (1.0 - fx) * (1.0 - fy)
            + v10 * fx * (1.0 - fy)
            + v01 * (1.0 - fx) * fy
            + v11 * fx * fy;
    }
}

/// Truncated l1 penalty: `min(|x|, alpha)`.
#[inline]
pub fn truncated_l1(x: f64, alpha: f64) -> f64 {
    debug_assert!(alpha >= 0.0);
    x.abs().min(alpha)
}

/// Per-pixel 2D displacement field, in pixels.
///
/// The stored displacement follows the homography-flow convention used
/// throughout this crate: for a pixel `x`, the matching position in the
/// target image is `x* = x - u(x)`. Blur streaks extend along `+u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub height: usize,
    pub width: usize,
    pub u: Vec<f64>,
    pub v: Vec<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField {
            height,
            width,
            u: vec![0.0; height * width],
            v: vec![0.0; height * width],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> (f64, f64) {
        let i = y * self.width + x;
        (self.u[i], self.v[i])
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, u: f64, v: f64) {
        let i = y * self.width + x;
        self.u[i] = u;
        self.v[i] = v;
    }
}

/// Per-pixel horizontal stereo shift in pixels. Invalid pixels carry
/// [`INVALID_DISPARITY`].
#[derive(Debug, Clone, PartialEq)]
pub struct DisparityMap {
    pub height: usize,
    pub width: usize,
    pub d: Vec<f64>,
}

impl DisparityMap {
    pub fn invalid(height: usize, width: usize) -> Self {
        DisparityMap {
            height,
            width,
            d: vec![INVALID_DISPARITY; height * width],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize) -> f64 {
        self.d[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.d[y * self.width + x] = v;
    }

    #[inline]
    pub fn is_valid(&self, x: usize, y: usize) -> bool {
        self.d[y * self.width + x] >= 0.0
    }
}

/// Calibrated rectified stereo rig: shared intrinsics and baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraRig {
    pub k: Matrix3<f64>,
    pub baseline: f64,
}

impl CameraRig {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, baseline: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && baseline > 0.0) {
            return Err(Error::InvalidInput(format!(
                "rig needs positive focals and baseline, got fx={fx} fy={fy} b={baseline}"
            )));
        }
        Ok(CameraRig {
            k: Matrix3::new(fx, 0.0, cx, 0.0, fy, cy, 0.0, 0.0, 1.0),
            baseline,
        })
    }

    #[inline]
    pub fn fx(&self) -> f64 {
        self.k[(0, 0)]
    }
    #[inline]
    pub fn fy(&self) -> f64 {
        self.k[(1, 1)]
    }
    #[inline]
    pub fn cx(&self) -> f64 {
        self.k[(0, 2)]
    }
    #[inline]
    pub fn cy(&self) -> f64 {
        self.k[(1, 2)]
    }

    pub fn k_inv(&self) -> Matrix3<f64> {
        self.k.try_inverse().expect("intrinsics are invertible")
    }

    /// Back-project pixel (x, y) at depth `z` into camera coordinates.
    pub fn backproject(&self, x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(
            (x - self.cx()) * z / self.fx(),
            (y - self.cy()) * z / self.fy(),
            z,
        )
    }

    /// Project a camera-space point to pixel coordinates.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx() * p.x / p.z + self.cx(),
            self.fy() * p.y / p.z + self.cy(),
        )
    }

    /// Depth for a given disparity: `z = fx * baseline / d`.
    pub fn depth_from_disparity(&self, d: f64) -> f64 {
        self.fx() * self.baseline / d
    }
}

/// All scalar weights and step sizes of the joint energy.
///
/// `eta = 0` means "choose automatically from the operator norm".
#[derive(Debug, Clone, PartialEq)]
pub struct EnergyParams {
    pub theta1: f64,
    pub theta2: f64,
    pub theta3: f64,
    pub theta4: f64,
    pub theta5: f64,
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub theta_r: f64,
    pub theta_t: f64,
    /// Weight of the label-boundary term gated by depth discontinuities.
    pub w_label_depth: f64,
    /// Weight of the label-boundary term gated by motion similarity.
    pub w_label_motion: f64,
    pub gamma: f64,
    pub eta: f64,
    pub tau: f64,
    pub n_latent: usize,
    pub outer_iters: usize,
}

impl Default for EnergyParams {
    /// Weights from the reference grid search, stated on the 0..255
    /// intensity scale. See [`EnergyParams::unit_scale`] for the
    /// equivalent weights on [0, 1] images.
    fn default() -> Self {
        EnergyParams {
            theta1: 0.7,
            theta2: 5.5,
            theta3: 0.7,
            theta4: 0.37,
            theta5: 17.0,
            lambda: 0.13,
            alpha1: 3.39,
            alpha2: 2.5,
            alpha3: 0.25,
            theta_r: 0.05,
            theta_t: 0.1,
            w_label_depth: 1.0,
            w_label_motion: 1.0,
            gamma: 250.0,
            eta: 0.0,
            tau: 0.23,
            n_latent: 20,
            outer_iters: 3,
        }
    }
}

impl EnergyParams {
    /// Default weights rebalanced for intensities in [0, 1].
    ///
    /// The reference weights were tuned on 0..255 images. Dividing
    /// intensities by 255 scales the l1 intensity terms (brightness, TV)
    /// by 1/255, the quadratic blur term by 1/255^2 and leaves the
    /// pixel-geometry terms unchanged. Multiplying each weight by its
    /// term's scale factor (and normalising so the TV weight stays 1)
    /// preserves the relative balance of every term.
    pub fn unit_scale() -> Self {
        let base = EnergyParams::default();
        EnergyParams {
            theta2: base.theta2 / 255.0,
            theta3: base.theta3 * 255.0,
            theta4: base.theta4 / 255.0,
            theta5: base.theta5 / 255.0,
            w_label_depth: 1.0 / 255.0,
            w_label_motion: 1.0 / 255.0,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [
            ("theta1", self.theta1),
            ("theta2", self.theta2),
            ("theta3", self.theta3),
            ("theta4", self.theta4),
            ("theta5", self.theta5),
            ("lambda", self.lambda),
            ("alpha1", self.alpha1),
            ("alpha2", self.alpha2),
            ("alpha3", self.alpha3),
            ("theta_r", self.theta_r),
            ("theta_t", self.theta_t),
            ("w_label_depth", self.w_label_depth),
            ("w_label_motion", self.w_label_motion),
        ];
        for (name, v) in weights {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidInput(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::InvalidInput(format!("gamma must be > 0, got {}", self.gamma)));
        }
        if !(self.eta >= 0.0) {
            return Err(Error::InvalidInput(format!("eta must be >= 0, got {}", self.eta)));
        }
        if !(self.tau > 0.0 && self.tau <= 0.5) {
            return Err(Error::InvalidInput(format!("tau must be in (0, 0.5], got {}", self.tau)));
        }
        if self.n_latent < 1 {
            return Err(Error::InvalidInput("n_latent must be >= 1".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn bilinear_exact_on_grid() {
        let img = Image::from_fn(6, 8, 1, |x, y, _| (x as f64 * 0.1 + y as f64 * 0.01) % 1.0);
        let mut out = [0.0];
        bilinear_sample(&img, 5.0, 3.0, &mut out);
        assert_abs_diff_eq!(out[0], img.get(5, 3, 0), epsilon = 1e-15);
    }

    #[test]
    fn bilinear_midpoint() {
        let mut img = Image::new(1, 2, 1);
        img.set(0, 0, 0, 0.2);
        img.set(1, 0, 0, 0.4);
        let mut out = [0.0];
        bilinear_sample(&img, 0.5, 0.0, &mut out);
        assert_abs_diff_eq!(out[0], 0.3, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_border_clamp() {
        let img = Image::from_fn(4, 4, 1, |x, y, _| if x == 0 && y == 0 { 0.7 } else { 0.1 });
        let mut out = [0.0];
        bilinear_sample(&img, -2.0, -2.0, &mut out);
        assert_abs_diff_eq!(out[0], 0.7, epsilon = 1e-15);
    }

    #[test]
    fn bilinear_linear_along_axis() {
        let img = Image::from_fn(3, 5, 1, |x, _, _| 0.1 * x as f64);
        let mut out = [0.0];
        for t in [0.25, 0.5, 0.75, 1.3, 3.9] {
            bilinear_sample(&img, t, 1.0, &mut out);
            assert_abs_diff_eq!(out[0], 0.1 * t, epsilon = 1e-12);
        }
    }

    #[test]
    fn truncated_l1_cases() {
        assert_eq!(truncated_l1(5.0, 3.0), 3.0);
        assert_eq!(truncated_l1(-1.0, 3.0), 1.0);
        assert_eq!(truncated_l1(0.0, 3.0), 0.0);
    }

    #[test]
    fn params_validate() {
        assert!(EnergyParams::default().validate().is_ok());
        assert!(EnergyParams::unit_scale().validate().is_ok());
        let bad = EnergyParams {
            tau: 0.7,
            ..EnergyParams::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rig_accessors() {
        let rig = CameraRig::new(100.0, 100.0, 80.0, 48.0, 0.5).unwrap();
        assert_eq!(rig.fx(), 100.0);
        assert_eq!(rig.depth_from_disparity(5.0), 10.0);
        let p = rig.backproject(90.0, 48.0, 10.0);
        let (px, py) = rig.project(&p);
        assert_abs_diff_eq!(px, 90.0, epsilon = 1e-12);
        assert_abs_diff_eq!(py, 48.0, epsilon = 1e-12);
        assert!(CameraRig::new(0.0, 1.0, 0.0, 0.0, 0.5).is_err());
    }
}
