//! Driving-pose condition: normalized keypoint frames and the per-keypoint
//! MLP that turns them into the condition token sequence.

use std::fs;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Bound, Linear, ParamStore};
use crate::tensor::Tensor;

/// Coordinate pair marking an occluded or undetected keypoint.
pub const OCCLUDED: [f64; 2] = [-1.0, -1.0];

/// `n` keypoints in normalized `[0, 1]` image coordinates (x right, y down),
/// with [`OCCLUDED`] for missing points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 2]>", into = "Vec<[f64; 2]>")]
pub struct PoseFrame {
    points: Vec<[f64; 2]>,
}

impl PoseFrame {
    pub fn new(points: Vec<[f64; 2]>) -> Result<Self> {
        for (i, p) in points.iter().enumerate() {
            let visible = (0.0..=1.0).contains(&p[0]) && (0.0..=1.0).contains(&p[1]);
            if !visible && *p != OCCLUDED {
                return Err(Error::InvalidInput(format!(
                    "keypoint {i} = {p:?} is neither in [0,1] nor the (-1,-1) sentinel"
                )));
            }
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn is_visible(&self, i: usize) -> bool {
        self.points[i] != OCCLUDED
    }

    pub fn visible(&self) -> impl Iterator<Item = [f64; 2]> + '_ {
        self.points.iter().copied().filter(|p| *p != OCCLUDED)
    }

    /// Pixel-unit coordinates, `None` for occluded points.
    pub fn denormalize(&self, width: usize, height: usize) -> Vec<Option<[f64; 2]>> {
        self.points
            .iter()
            .map(|&p| (p != OCCLUDED).then(|| [p[0] * width as f64, p[1] * height as f64]))
            .collect()
    }
}

impl TryFrom<Vec<[f64; 2]>> for PoseFrame {
    type Error = Error;
    fn try_from(points: Vec<[f64; 2]>) -> Result<Self> {
        PoseFrame::new(points)
    }
}

impl From<PoseFrame> for Vec<[f64; 2]> {
    fn from(p: PoseFrame) -> Self {
        p.points
    }
}

/// One record of a driving-pose file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub frame: usize,
    pub points: PoseFrame,
}

/// Reads a JSON array of `{"frame": i, "points": [[x, y], ...]}` records,
/// returned in frame order.
pub fn read_pose_file(path: &Path) -> Result<Vec<PoseFrame>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<PoseRecord> =
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))?;
    records.sort_by_key(|r| r.frame);
    for (i, r) in records.iter().enumerate() {
        if r.frame != i {
            return Err(Error::InvalidInput(format!(
                "{}: frame numbers must run 0..{} without gaps",
                path.display(),
                records.len()
            )));
        }
    }
    Ok(records.into_iter().map(|r| r.points).collect())
}

pub fn write_pose_file(path: &Path, poses: &[PoseFrame]) -> Result<()> {
    let records: Vec<PoseRecord> = poses
        .iter()
        .enumerate()
        .map(|(frame, p)| PoseRecord {
            frame,
            points: p.clone(),
        })
        .collect();
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Divides pixel coordinates by the image side lengths. `None` entries are
/// occluded and become the sentinel.
pub fn normalize_keypoints(raw: &[Option<[f64; 2]>], width: usize, height: usize) -> Result<PoseFrame> {
    let (w, h) = (width as f64, height as f64);
    let points = raw
        .iter()
        .enumerate()
        .map(|(i, p)| match p {
            None => Ok(OCCLUDED),
            Some([x, y]) => {
                if !(0.0..=w).contains(x) || !(0.0..=h).contains(y) {
                    Err(Error::InvalidInput(format!(
                        "keypoint {i} at ({x}, {y}) lies outside the {width}x{height} image"
                    )))
                } else {
                    Ok([x / w, y / h])
                }
            }
        })
        .collect::<Result<Vec<_>>>()?;
    PoseFrame::new(points)
}

/// Encoded condition: `n` tokens of width `n_c`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ConditionSequence {
    pub n: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ConditionSequence {
    pub fn token(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }
}

/// Three fully connected layers applied to each keypoint row, weights
/// shared across keypoints: `2 → 64 → 128 → n_c`, ReLU between layers.
#[derive(Clone, Debug)]
pub struct PoseEncoder {
    pub keypoints: usize,
    pub width: usize,
    layers: [Linear; 3],
}

impl PoseEncoder {
    pub const HIDDEN: [usize; 2] = [64, 128];

    pub fn new(store: &mut ParamStore, rng: &mut impl Rng, keypoints: usize, width: usize) -> Self {
        let [h1, h2] = Self::HIDDEN;
        Self {
            keypoints,
            width,
            layers: [
                Linear::new(store, rng, "cond.fc1", 2, h1),
                Linear::new(store, rng, "cond.fc2", h1, h2),
                Linear::new(store, rng, "cond.fc3", h2, width),
            ],
        }
    }

    pub fn check(&self, pose: &PoseFrame) -> Result<()> {
        if pose.len() != self.keypoints {
            return Err(Error::InvalidInput(format!(
                "pose has {} keypoints, model expects {}",
                pose.len(),
                self.keypoints
            )));
        }
        Ok(())
    }

    /// Condition tokens for a batch of poses, `[b·n, n_c]`.
    pub fn graph(&self, g: &mut Graph, p: &Bound, poses: &[&PoseFrame]) -> Var {
        let coords: Vec<f64> = poses.iter().flat_map(|f| f.points().iter().flatten().copied()).collect();
        let rows = coords.len() / 2;
        let mut h = g.constant(Tensor::new(&[rows, 2], coords).unwrap());
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, p, h);
            if i < 2 {
                h = g.relu(h);
            }
        }
        h
    }

    pub fn encode(&self, store: &ParamStore, pose: &PoseFrame) -> Result<ConditionSequence> {
        self.check(pose)?;
        let mut g = Graph::new();
        let p = g.bind(store, false);
        let out = self.graph(&mut g, &p, &[pose]);
        Ok(ConditionSequence {
            n: pose.len(),
            width: self.width,
            data: g.value(out).data().to_vec(),
        })
    }
}

/// Encodes one pose frame with the given encoder parameters.
pub fn encode_pose(pose: &PoseFrame, encoder: &PoseEncoder, store: &ParamStore) -> Result<ConditionSequence> {
    encoder.encode(store, pose)
}
