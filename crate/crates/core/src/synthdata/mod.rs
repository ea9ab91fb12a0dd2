//! Deterministic articulated stick-figure videos with exact keypoints.
//!
//! Every keypoint is drawn with a small marker in a reserved color, which
//! makes keypoints recoverable from any rendered or generated frame.

mod dataset;
mod motion;

pub use dataset::{export_dataset, load_dataset, synthesize_dataset, Dataset, DatasetConfig, Manifest, Sequence, SequenceEntry};
pub use motion::{MotionKind, MotionProgram};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::condition::{PoseFrame, OCCLUDED};
use crate::error::{Error, Result};
use crate::image::Image;

pub const NUM_KEYPOINTS: usize = 8;

pub const KEYPOINT_NAMES: [&str; NUM_KEYPOINTS] = [
    "head", "pelvis", "l_elbow", "r_elbow", "l_hand", "r_hand", "l_foot", "r_foot",
];

const fn rgb8(r: u8, g: u8, b: u8) -> [f64; 3] {
    [r as f64 / 255.0, g as f64 / 255.0, b as f64 / 255.0]
}

/// Marker color per keypoint, in [`KEYPOINT_NAMES`] order. Body and
/// background colors are drawn from ranges that stay clear of these.
pub const MARKER_COLORS: [[f64; 3]; NUM_KEYPOINTS] = [
    rgb8(255, 255, 255),
    rgb8(255, 255, 0),
    rgb8(255, 0, 0),
    rgb8(0, 255, 0),
    rgb8(255, 0, 255),
    rgb8(0, 255, 255),
    rgb8(0, 0, 255),
    rgb8(255, 128, 0),
];

/// Geometry (fractions of the frame side) and colors of the figure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FigureSpec {
    pub size: usize,
    pub torso: f64,
    pub neck: f64,
    pub head_radius: f64,
    pub upper_arm: f64,
    pub forearm: f64,
    pub thigh: f64,
    pub shin: f64,
    pub thickness: f64,
    /// Marker half-width in pixels.
    pub marker_half: f64,
    pub body_color: [f64; 3],
    pub background: [f64; 3],
    pub floor: [f64; 3],
    /// Phase of the floor stripe texture.
    pub texture_seed: u64,
}

impl FigureSpec {
    pub fn new(size: usize) -> Self {
        Self {
            size,
            torso: 0.2,
            neck: 0.04,
            head_radius: 0.07,
            upper_arm: 0.13,
            forearm: 0.12,
            thigh: 0.15,
            shin: 0.15,
            thickness: 0.07,
            marker_half: (size as f64 / 32.0).max(1.0) * 1.5,
            body_color: rgb8(150, 120, 110),
            background: rgb8(30, 35, 50),
            floor: rgb8(60, 55, 45),
            texture_seed: 0,
        }
    }

    /// Body color drawn from a range disjoint from markers and background.
    pub fn random_body(size: usize, rng: &mut impl Rng) -> Self {
        let mut spec = Self::new(size);
        spec.body_color = [0; 3].map(|_| f64::from(rng.random_range(100u8..=170)) / 255.0);
        spec
    }

    /// Same geometry and body, background and floor derived from `seed`.
    pub fn with_backdrop(&self, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_bac0);
        let mut spec = self.clone();
        spec.background = [0; 3].map(|_| f64::from(rng.random_range(5u8..=60)) / 255.0);
        spec.floor = [0; 3].map(|_| f64::from(rng.random_range(35u8..=85)) / 255.0);
        spec.texture_seed = rng.random_range(0..4);
        spec
    }

    fn validate(&self) -> Result<()> {
        let lengths = [
            self.torso,
            self.neck,
            self.head_radius,
            self.upper_arm,
            self.forearm,
            self.thigh,
            self.shin,
            self.thickness,
            self.marker_half,
        ];
        if lengths.iter().any(|&v| !(v > 0.0)) || self.size < 8 {
            return Err(Error::InvalidInput("figure lengths must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmPose {
    /// Upper-arm angle from straight down, positive toward +x.
    pub shoulder: f64,
    /// Forearm angle relative to the upper arm.
    pub elbow: f64,
    /// Arm is drawn behind the torso.
    pub behind: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LegPose {
    pub hip: f64,
    pub knee: f64,
}

/// Joint parameters of one frame. Index 0 of `arms`/`legs` is the "left"
/// limb (its keypoints carry the `l_` markers).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    /// Pelvis offset from the frame center, fractions of the side.
    pub pelvis: [f64; 2],
    /// Torso lean from vertical, positive toward +x.
    pub torso: f64,
    pub arms: [ArmPose; 2],
    pub legs: [LegPose; 2],
}

impl PoseParams {
    pub fn standing() -> Self {
        Self {
            pelvis: [0.0, 0.08],
            torso: 0.0,
            arms: [
                ArmPose {
                    shoulder: 0.35,
                    elbow: 0.1,
                    behind: false,
                },
                ArmPose {
                    shoulder: -0.35,
                    elbow: -0.1,
                    behind: false,
                },
            ],
            legs: [LegPose { hip: 0.15, knee: 0.0 }, LegPose { hip: -0.15, knee: 0.0 }],
        }
    }

    /// Reflection about the vertical center line (limb labels are kept).
    pub fn mirrored(&self) -> Self {
        let mut m = *self;
        m.pelvis[0] = -m.pelvis[0];
        m.torso = -m.torso;
        for a in &mut m.arms {
            a.shoulder = -a.shoulder;
            a.elbow = -a.elbow;
        }
        for l in &mut m.legs {
            l.hip = -l.hip;
            l.knee = -l.knee;
        }
        m
    }

    pub fn validate(&self) -> Result<()> {
        use std::f64::consts::PI;
        let ok = self.torso.abs() <= 0.7
            && self.arms.iter().all(|a| a.shoulder.abs() <= PI && a.elbow.abs() <= 2.6)
            && self.legs.iter().all(|l| l.hip.abs() <= 1.6 && l.knee.abs() <= 2.6)
            && self.pelvis.iter().all(|v| v.abs() <= 0.3);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidInput(format!("pose outside articulation limits: {self:?}")))
        }
    }
}

type Pt = [f64; 2];

fn along(from: Pt, len: f64, angle: f64) -> Pt {
    [from[0] + len * angle.sin(), from[1] + len * angle.cos()]
}

fn seg_dist(p: Pt, a: Pt, b: Pt) -> f64 {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let (cx, cy) = (a[0] + t * dx, a[1] + t * dy);
    ((p[0] - cx).powi(2) + (p[1] - cy).powi(2)).sqrt()
}

/// Joint positions in centered pixel coordinates (origin at frame center).
struct Skeleton {
    pelvis: Pt,
    neck: Pt,
    head: Pt,
    elbows: [Pt; 2],
    hands: [Pt; 2],
    knees: [Pt; 2],
    feet: [Pt; 2],
}

impl Skeleton {
    fn new(spec: &FigureSpec, pose: &PoseParams) -> Self {
        let s = spec.size as f64;
        let pelvis = [pose.pelvis[0] * s, pose.pelvis[1] * s];
        let up_dir = |from: Pt, len: f64| [from[0] + len * pose.torso.sin(), from[1] - len * pose.torso.cos()];
        let neck = up_dir(pelvis, spec.torso * s);
        let head = up_dir(neck, (spec.neck + spec.head_radius) * s);
        let elbows = pose.arms.map(|a| along(neck, spec.upper_arm * s, a.shoulder));
        let hands = [0, 1].map(|i| along(elbows[i], spec.forearm * s, pose.arms[i].shoulder + pose.arms[i].elbow));
        let knees = pose.legs.map(|l| along(pelvis, spec.thigh * s, l.hip));
        let feet = [0, 1].map(|i| along(knees[i], spec.shin * s, pose.legs[i].hip + pose.legs[i].knee));
        Self {
            pelvis,
            neck,
            head,
            elbows,
            hands,
            knees,
            feet,
        }
    }

    fn keypoints(&self) -> [Pt; NUM_KEYPOINTS] {
        [
            self.head,
            self.pelvis,
            self.elbows[0],
            self.elbows[1],
            self.hands[0],
            self.hands[1],
            self.feet[0],
            self.feet[1],
        ]
    }
}

/// Rasterizes one frame and returns it with the exact keypoints used to draw it.
pub fn render_figure(spec: &FigureSpec, pose: &PoseParams) -> Result<(Image, PoseFrame)> {
    spec.validate()?;
    pose.validate()?;
    let size = spec.size;
    let s = size as f64;
    let half = s / 2.0;
    let sk = Skeleton::new(spec, pose);
    let radius = spec.thickness * s / 2.0;
    let torso_radius = radius * 1.5;
    let head_radius = spec.head_radius * s;

    let margin = 1.0;
    let inside = |p: Pt, r: f64| {
        p.iter().all(|&v| v - r >= -half + margin && v + r <= half - margin)
    };
    let mut extremes: Vec<(Pt, f64)> = vec![(sk.head, head_radius)];
    for p in sk.keypoints().iter().chain(&sk.knees) {
        extremes.push((*p, radius.max(spec.marker_half)));
    }
    if let Some((p, _)) = extremes.iter().find(|(p, r)| !inside(*p, *r)) {
        return Err(Error::InvalidInput(format!(
            "figure out of frame: joint at ({:.1}, {:.1}) px from center",
            p[0], p[1]
        )));
    }

    // Arms flagged `behind` hide their keypoints when they overlap the torso.
    let occluded: Vec<bool> = (0..NUM_KEYPOINTS)
        .map(|k| {
            let arm = match k {
                2 | 4 => 0,
                3 | 5 => 1,
                _ => return false,
            };
            let p = sk.keypoints()[k];
            pose.arms[arm].behind
                && seg_dist(p, sk.pelvis, sk.neck) <= torso_radius + spec.marker_half
        })
        .collect();

    let mut capsules: Vec<(Pt, Pt, f64)> = Vec::new();
    for i in 0..2 {
        capsules.push((sk.pelvis, sk.knees[i], radius));
        capsules.push((sk.knees[i], sk.feet[i], radius));
    }
    let arm = |i: usize| [(sk.neck, sk.elbows[i], radius), (sk.elbows[i], sk.hands[i], radius)];
    for i in 0..2 {
        if pose.arms[i].behind {
            capsules.extend(arm(i));
        }
    }
    capsules.push((sk.pelvis, sk.neck, torso_radius));
    capsules.push((sk.neck, sk.head, radius));
    for i in 0..2 {
        if !pose.arms[i].behind {
            capsules.extend(arm(i));
        }
    }

    let floor_row = (0.88 * s) as usize;
    let mut img = Image::filled(size, size, spec.background);
    for y in 0..size {
        for x in 0..size {
            let p = [x as f64 + 0.5 - half, y as f64 + 0.5 - half];
            let mut color = if y >= floor_row {
                let mut f = spec.floor;
                if (y as u64 + spec.texture_seed).is_multiple_of(4) {
                    f = f.map(|v| v + 12.0 / 255.0);
                }
                f
            } else {
                spec.background
            };
            for &(a, b, r) in &capsules {
                if seg_dist(p, a, b) <= r {
                    color = spec.body_color;
                }
            }
            let dh = ((p[0] - sk.head[0]).powi(2) + (p[1] - sk.head[1]).powi(2)).sqrt();
            if dh <= head_radius {
                color = spec.body_color;
            }
            for (k, kp) in sk.keypoints().iter().enumerate() {
                if !occluded[k]
                    && (p[0] - kp[0]).abs() <= spec.marker_half
                    && (p[1] - kp[1]).abs() <= spec.marker_half
                {
                    color = MARKER_COLORS[k];
                }
            }
            img.set_pixel(y, x, color);
        }
    }
    img.quantize_8bit();

    let points = sk
        .keypoints()
        .iter()
        .zip(&occluded)
        .map(|(p, &occ)| {
            if occ {
                OCCLUDED
            } else {
                [(p[0] + half) / s, (p[1] + half) / s]
            }
        })
        .collect();
    Ok((img, PoseFrame::new(points)?))
}

/// Renders a full motion program; the backdrop comes from `seed`.
pub fn generate_sequence(spec: &FigureSpec, program: &MotionProgram, seed: u64) -> Result<Vec<(Image, PoseFrame)>> {
    let spec = spec.with_backdrop(seed);
    program
        .frames()
        .iter()
        .map(|pose| render_figure(&spec, pose))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn render_is_deterministic_and_markers_sit_on_keypoints() {
        let spec = FigureSpec::new(32);
        let pose = PoseParams::standing();
        let (a, pa) = render_figure(&spec, &pose).unwrap();
        let (b, pb) = render_figure(&spec, &pose).unwrap();
        assert_eq!(a, b);
        assert_eq!(pa, pb);
        for (k, p) in pa.points().iter().enumerate() {
            assert!(pa.is_visible(k));
            let (x, y) = ((p[0] * 32.0) as usize, (p[1] * 32.0) as usize);
            let px = a.pixel(y, x);
            assert_ne!(px, spec.background);
            assert_ne!(px, spec.floor);
            assert_eq!(px, MARKER_COLORS[k]);
        }
    }

    #[test]
    fn mirrored_pose_gives_mirrored_frame() {
        let spec = FigureSpec::new(32);
        let mut pose = PoseParams::standing();
        pose.pelvis[0] = 0.05;
        pose.torso = 0.2;
        pose.arms[0].shoulder = 1.4;
        pose.legs[1].knee = -0.8;
        let (img, kp) = render_figure(&spec, &pose).unwrap();
        let (mimg, mkp) = render_figure(&spec, &pose.mirrored()).unwrap();
        assert_eq!(mimg, img.flip_horizontal());
        for (p, q) in kp.points().iter().zip(mkp.points()) {
            assert!((q[0] - (1.0 - p[0])).abs() < 1e-12);
            assert!((q[1] - p[1]).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_frame_pose_is_rejected() {
        let spec = FigureSpec::new(32);
        let mut pose = PoseParams::standing();
        pose.pelvis = [0.28, 0.28];
        assert!(matches!(render_figure(&spec, &pose), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn arm_behind_torso_is_occluded() {
        let spec = FigureSpec::new(32);
        let mut pose = PoseParams::standing();
        pose.arms[1] = ArmPose {
            shoulder: 0.3,
            elbow: 0.1,
            behind: true,
        };
        let (img, kp) = render_figure(&spec, &pose).unwrap();
        assert!(!kp.is_visible(5));
        assert!(img.data().chunks(3).all(|px| px != MARKER_COLORS[5]));
    }
}
