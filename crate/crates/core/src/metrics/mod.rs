//! Evaluation metrics: average keypoint distance, missing keypoint rate,
//! a Fréchet distance over locally learned features, and PSNR.

mod features;
mod fid;
mod locate;

pub use features::{FeatureActs, FeatureNet, FeatureTrainConfig};
pub use fid::{fid, FeatureStats};
pub use locate::{locate_keypoints, LocatorConfig};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// Keypoints in pixel units; `None` marks a missing / occluded point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeypointSet {
    pub points: Vec<Option<[f64; 2]>>,
}

impl KeypointSet {
    pub fn new(points: Vec<Option<[f64; 2]>>) -> Self {
        Self { points }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn visible_count(&self) -> usize {
        self.points.iter().filter(|p| p.is_some()).count()
    }
}

fn check_matched(gt: &[KeypointSet], pred: &[KeypointSet]) -> Result<()> {
    if gt.len() != pred.len() {
        return Err(Error::InvalidInput(format!(
            "{} ground-truth frames vs {} predicted",
            gt.len(),
            pred.len()
        )));
    }
    for (i, (a, b)) in gt.iter().zip(pred).enumerate() {
        if a.len() != b.len() {
            return Err(Error::InvalidInput(format!(
                "frame {i}: {} vs {} keypoints",
                a.len(),
                b.len()
            )));
        }
    }
    Ok(())
}

/// Average keypoint distance: mean Euclidean distance over every keypoint
/// visible in both sequences.
pub fn akd(gt: &[KeypointSet], pred: &[KeypointSet]) -> Result<f64> {
    check_matched(gt, pred)?;
    let mut total = 0.0;
    let mut count = 0usize;
    for (a, b) in gt.iter().zip(pred) {
        for (p, q) in a.points.iter().zip(&b.points) {
            if let (Some(p), Some(q)) = (p, q) {
                total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
                count += 1;
            }
        }
    }
    if count == 0 {
        return Err(Error::UndefinedMetric("AKD: no co-visible keypoints".into()));
    }
    Ok(total / count as f64)
}

/// Missing keypoint rate: fraction of ground-truth-visible keypoints that
/// are missing in the prediction.
pub fn mkr(gt: &[KeypointSet], pred: &[KeypointSet]) -> Result<f64> {
    check_matched(gt, pred)?;
    let mut visible = 0usize;
    let mut missing = 0usize;
    for (a, b) in gt.iter().zip(pred) {
        for (p, q) in a.points.iter().zip(&b.points) {
            if p.is_some() {
                visible += 1;
                if q.is_none() {
                    missing += 1;
                }
            }
        }
    }
    if visible == 0 {
        return Err(Error::UndefinedMetric("MKR: no visible ground-truth keypoints".into()));
    }
    Ok(missing as f64 / visible as f64)
}

/// Reported in place of +∞ for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// Peak signal-to-noise ratio in dB for images in `[0, 1]`.
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(Error::Shape(format!(
            "psnr: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let n = a.data().len() as f64;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(points: &[Option<[f64; 2]>]) -> KeypointSet {
        KeypointSet::new(points.to_vec())
    }

    #[test]
    fn akd_examples() {
        let gt = vec![set(&[Some([0.0, 0.0]), Some([10.0, 10.0])])];
        assert_eq!(akd(&gt, &gt).unwrap(), 0.0);
        let pred = vec![set(&[Some([3.0, 0.0]), Some([10.0, 14.0])])];
        assert!((akd(&gt, &pred).unwrap() - 3.5).abs() < 1e-12);
        let shifted = vec![set(&[Some([3.0, 4.0]), Some([13.0, 14.0])])];
        assert!((akd(&gt, &shifted).unwrap() - 5.0).abs() < 1e-12);
    }

    #[test]
    fn akd_ignores_points_missing_on_either_side() {
        let gt = vec![set(&[Some([0.0, 0.0]), None, Some([1.0, 1.0])])];
        let pred = vec![set(&[Some([0.0, 2.0]), Some([5.0, 5.0]), None])];
        assert_eq!(akd(&gt, &pred).unwrap(), 2.0);
        let none = vec![set(&[None, None, None])];
        assert!(matches!(akd(&gt, &none), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn mkr_examples() {
        let gt = vec![set(&[Some([0.0, 0.0]), Some([1.0, 0.0]), Some([2.0, 0.0]), Some([3.0, 0.0]), None])];
        assert_eq!(mkr(&gt, &gt).unwrap(), 0.0);
        let mut one_missing = gt.clone();
        one_missing[0].points[2] = None;
        assert_eq!(mkr(&gt, &one_missing).unwrap(), 0.25);
        let all_missing = vec![set(&[None; 5])];
        assert_eq!(mkr(&gt, &all_missing).unwrap(), 1.0);
        assert!(matches!(mkr(&all_missing, &gt), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn metrics_reject_mismatched_counts() {
        let a = vec![set(&[Some([0.0, 0.0])])];
        let b = vec![set(&[Some([0.0, 0.0]), None])];
        assert!(akd(&a, &b).is_err());
        assert!(mkr(&a, &[]).is_err());
    }

    #[test]
    fn psnr_examples() {
        let a = Image::filled(4, 4, [0.5, 0.5, 0.5]);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
        let b = Image::filled(4, 4, [0.6, 0.6, 0.6]);
        assert!((psnr(&a, &b).unwrap() - 20.0).abs() < 1e-9);
        assert_eq!(psnr(&a, &b).unwrap(), psnr(&b, &a).unwrap());
        assert!(psnr(&a, &Image::filled(2, 4, [0.0; 3])).is_err());
    }
}
