//! Keypoint locator for synthetic frames. Every keypoint of the synthetic
//! figure carries a marker in a reserved color, so locating it reduces to a
//! color-window centroid.

use serde::{Deserialize, Serialize};

use super::KeypointSet;
use crate::image::Image;
use crate::synthdata::MARKER_COLORS;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocatorConfig {
    /// Max per-channel deviation from the marker color.
    pub tolerance: f64,
    /// Fewer matching pixels than this reports the keypoint as missing.
    pub min_pixels: usize,
}

impl Default for LocatorConfig {
    fn default() -> Self {
        Self {
            tolerance: 0.3,
            min_pixels: 1,
        }
    }
}

/// Locates each marker; coordinates are in pixel units (pixel centers at
/// `i + 0.5`).
pub fn locate_keypoints(image: &Image, cfg: &LocatorConfig) -> KeypointSet {
    let mut sums = [[0.0f64; 3]; MARKER_COLORS.len()];
    for y in 0..image.height() {
        for x in 0..image.width() {
            let px = image.pixel(y, x);
            for (k, color) in MARKER_COLORS.iter().enumerate() {
                let dev = (0..3).map(|c| (px[c] - color[c]).abs()).fold(0.0, f64::max);
                if dev <= cfg.tolerance {
                    sums[k][0] += x as f64 + 0.5;
                    sums[k][1] += y as f64 + 0.5;
                    sums[k][2] += 1.0;
                }
            }
        }
    }
    KeypointSet::new(
        sums.iter()
            .map(|s| {
                if s[2] >= cfg.min_pixels.max(1) as f64 {
                    Some([s[0] / s[2], s[1] / s[2]])
                } else {
                    None
                }
            })
            .collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn finds_square_marker_centroid() {
        let mut img = Image::filled(10, 10, [0.1, 0.1, 0.1]);
        for y in 2..5 {
            for x in 6..9 {
                img.set_pixel(y, x, MARKER_COLORS[3]);
            }
        }
        let kp = locate_keypoints(&img, &LocatorConfig::default());
        assert_eq!(kp.points[3], Some([7.5, 3.5]));
        assert_eq!(kp.visible_count(), 1);
    }
}
