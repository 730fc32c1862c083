//! Evaluation metrics: PSNR, flow/disparity outlier rates and
//! moving-object segmentation precision/recall/F-measure.

use crate::superpixels::SemanticMask;
use crate::types::{DisparityMap, FlowField, Image};
use crate::{Error, Result};

/// PSNR in dB against a peak of 1.0; identical images cap at 99 dB.
pub fn psnr(est: &Image, gt: &Image) -> Result<f64> {
    if !est.same_shape(gt) {
        return Err(Error::DimensionMismatch("psnr inputs differ in shape".into()));
    }
    let mse: f64 = est
        .data
        .iter()
        .zip(&gt.data)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / est.data.len() as f64;
    if mse <= 0.0 {
        return Ok(99.0);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(99.0))
}

/// Percentage of valid pixels whose endpoint error exceeds 3 px AND 5% of
/// the ground-truth magnitude.
pub fn flow_outlier_rate(est: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<f64> {
    if est.height != gt.height || est.width != gt.width {
        return Err(Error::DimensionMismatch("flow fields differ in shape".into()));
    }
    let mut n = 0usize;
    let mut outliers = 0usize;
    for i in 0..est.u.len() {
        if !valid[i] {
            continue;
        }
        n += 1;
        let du = est.u[i] - gt.u[i];
        let dv = est.v[i] - gt.v[i];
        let err = (du * du + dv * dv).sqrt();
        let mag = (gt.u[i] * gt.u[i] + gt.v[i] * gt.v[i]).sqrt();
        if err > 3.0 && err > 0.05 * mag {
            outliers += 1;
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty valid mask".into()));
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

/// Disparity outlier rate under the same 3 px AND 5% rule; pixels invalid
/// in the ground truth are skipped, pixels invalid only in the estimate
/// count as outliers.
pub fn disparity_outlier_rate(est: &DisparityMap, gt: &DisparityMap) -> Result<f64> {
    if est.height != gt.height || est.width != gt.width {
        return Err(Error::DimensionMismatch("disparity maps differ in shape".into()));
    }
    let mut n = 0usize;
    let mut outliers = 0usize;
    for y in 0..gt.height {
        for x in 0..gt.width {
            if !gt.is_valid(x, y) {
                continue;
            }
            n += 1;
            if !est.is_valid(x, y) {
                outliers += 1;
                continue;
            }
            let err = (est.at(x, y) - gt.at(x, y)).abs();
            if err > 3.0 && err > 0.05 * gt.at(x, y) {
                outliers += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::InvalidInput("empty valid mask".into()));
    }
    Ok(100.0 * outliers as f64 / n as f64)
}

/// Pixel-wise precision, recall and F-measure of a moving-object mask.
/// Degenerate denominators yield 0.
pub fn segmentation_prf(est: &SemanticMask, gt: &SemanticMask) -> Result<(f64, f64, f64)> {
    if est.height != gt.height || est.width != gt.width {
        return Err(Error::DimensionMismatch("masks differ in shape".into()));
    }
    let (mut tp, mut fp, mut fn_) = (0usize, 0usize, 0usize);
    for (e, g) in est.fg.iter().zip(&gt.fg) {
        match (e, g) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => {}
        }
    }
    let p = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
    let r = if tp + fn_ == 0 { 0.0 } else { tp as f64 / (tp + fn_) as f64 };
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * r * p / (r + p) };
    Ok((p, r, f))
}

/// All metrics of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// PSNR per image, layout order (left frames then right frames).
    pub psnr: Vec<f64>,
    pub psnr_left: f64,
    pub psnr_right: f64,
    pub flow_outlier_fwd: f64,
    pub flow_outlier_bwd: f64,
    pub disp_outlier_m: f64,
    pub disp_outlier_m1: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

impl MetricsReport {
    pub fn csv_header(num_frames: usize) -> String {
        let mut cols: Vec<String> = (0..num_frames).map(|i| format!("psnr_{i}")).collect();
        cols.extend(
            [
                "psnr_left",
                "psnr_right",
                "flow_outlier_fwd",
                "flow_outlier_bwd",
                "disp_outlier_m",
                "disp_outlier_m1",
                "precision",
                "recall",
                "f_measure",
            ]
            .map(String::from),
        );
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let mut cols: Vec<String> = self.psnr.iter().map(|v| format!("{v:.6}")).collect();
        for v in [
            self.psnr_left,
            self.psnr_right,
            self.flow_outlier_fwd,
            self.flow_outlier_bwd,
            self.disp_outlier_m,
            self.disp_outlier_m1,
            self.precision,
            self.recall,
            self.f_measure,
        ] {
            cols.push(format!("{v:.6}"));
        }
        cols.join(",")
    }

    pub fn summary(&self) -> String {
        format!(
            "PSNR left/right: {:.2}/{:.2} dB | flow outliers fwd/bwd: {:.2}%/{:.2}% | \
             disparity outliers m/m+1: {:.2}%/{:.2}% | segmentation P/R/F: {:.3}/{:.3}/{:.3}",
            self.psnr_left,
            self.psnr_right,
            self.flow_outlier_fwd,
            self.flow_outlier_bwd,
            self.disp_outlier_m,
            self.disp_outlier_m1,
            self.precision,
            self.recall,
            self.f_measure
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn psnr_formula_cases() {
        let a = Image::from_fn(4, 4, 1, |_, _, _| 0.5);
        assert_eq!(psnr(&a, &a).unwrap(), 99.0);

        // MSE 0.01 -> 20 dB.
        let mut b = a.clone();
        for v in &mut b.data {
            *v += 0.1;
        }
        assert_abs_diff_eq!(psnr(&a, &b).unwrap(), 20.0, epsilon = 1e-9);

        // MSE 1e-3 -> 30 dB.
        let mut c = a.clone();
        for v in &mut c.data {
            *v += 1e-3f64.sqrt();
        }
        assert_abs_diff_eq!(psnr(&a, &c).unwrap(), 30.0, epsilon = 1e-9);

        let odd = Image::new(3, 4, 1);
        assert!(psnr(&a, &odd).is_err());
    }

    #[test]
    fn psnr_decreases_with_mse() {
        let a = Image::from_fn(4, 4, 1, |_, _, _| 0.5);
        let mut prev = 99.0;
        for amp in [0.01, 0.05, 0.1, 0.2] {
            let mut b = a.clone();
            for v in &mut b.data {
                *v += amp;
            }
            let p = psnr(&a, &b).unwrap();
            assert!(p < prev);
            prev = p;
        }
    }

    #[test]
    fn outlier_and_rule() {
        let h = 1;
        let w = 3;
        let mut gt = FlowField::zeros(h, w);
        let mut est = FlowField::zeros(h, w);
        // Pixel 0: exact. Pixel 1: error 4 px on 100 px magnitude -> not an
        // outlier (4 < 5). Pixel 2: error 4 px on 10 px -> outlier.
        gt.set(1, 0, 100.0, 0.0);
        est.set(1, 0, 104.0, 0.0);
        gt.set(2, 0, 10.0, 0.0);
        est.set(2, 0, 14.0, 0.0);
        let rate = flow_outlier_rate(&est, &gt, &[true, true, true]).unwrap();
        assert_abs_diff_eq!(rate, 100.0 / 3.0, epsilon = 1e-9);

        // est == gt -> 0%.
        assert_eq!(flow_outlier_rate(&gt, &gt, &[true, true, true]).unwrap(), 0.0);
        assert!(flow_outlier_rate(&gt, &gt, &[false, false, false]).is_err());
    }

    #[test]
    fn outlier_monotone_under_error_inflation() {
        let mut gt = FlowField::zeros(2, 4);
        for y in 0..2 {
            for x in 0..4 {
                gt.set(x, y, (x as f64) * 5.0, 0.0);
            }
        }
        let valid = vec![true; 8];
        let mut prev = 0.0;
        for scale in [0.0, 2.0, 4.0, 8.0] {
            let mut est = gt.clone();
            for (i, u) in est.u.iter_mut().enumerate() {
                *u += scale * (1.0 + (i % 3) as f64);
            }
            let rate = flow_outlier_rate(&est, &gt, &valid).unwrap();
            assert!(rate >= prev);
            prev = rate;
        }
    }

    #[test]
    fn disparity_outlier_cases() {
        let mut gt = DisparityMap::invalid(1, 4);
        let mut est = DisparityMap::invalid(1, 4);
        gt.set(0, 0, 10.0);
        est.set(0, 0, 10.0); // exact
        gt.set(1, 0, 100.0);
        est.set(1, 0, 104.0); // 4 px, 4% -> fine
        gt.set(2, 0, 10.0);
        est.set(2, 0, 14.0); // outlier
        // Pixel 3 invalid in gt -> skipped entirely.
        let rate = disparity_outlier_rate(&est, &gt).unwrap();
        assert_abs_diff_eq!(rate, 100.0 / 3.0, epsilon = 1e-9);
    }

    #[test]
    fn prf_cases() {
        let mut gt = SemanticMask::new(2, 6);
        let mut est = SemanticMask::new(2, 6);
        // Perfect mask.
        for i in 0..5 {
            gt.fg[i] = true;
            est.fg[i] = true;
        }
        assert_eq!(segmentation_prf(&est, &gt).unwrap(), (1.0, 1.0, 1.0));

        // tp=8, fp=2, fn=2 -> 0.8 everywhere.
        let mut gt = SemanticMask::new(2, 6);
        let mut est = SemanticMask::new(2, 6);
        for i in 0..10 {
            gt.fg[i] = true;
        }
        for i in 2..12 {
            est.fg[i] = true;
        }
        let (p, r, f) = segmentation_prf(&est, &gt).unwrap();
        assert_abs_diff_eq!(p, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(r, 0.8, epsilon = 1e-12);
        assert_abs_diff_eq!(f, 0.8, epsilon = 1e-12);

        // All-zero estimate against a nonempty gt.
        let empty = SemanticMask::new(2, 6);
        assert_eq!(segmentation_prf(&empty, &gt).unwrap(), (0.0, 0.0, 0.0));
    }

    #[test]
    fn f_measure_bounds() {
        let mut gt = SemanticMask::new(1, 10);
        let mut est = SemanticMask::new(1, 10);
        for i in 0..6 {
            gt.fg[i] = true;
        }
        for i in 4..9 {
            est.fg[i] = true;
        }
        let (p, r, f) = segmentation_prf(&est, &gt).unwrap();
        assert!(f <= 2.0 * p.min(r) + 1e-12);
        assert!(f >= p.min(r).min(2.0 * p * r / (p + r)) - 1e-12);
        assert!((f == 0.0) == (p * r == 0.0));
    }
}
