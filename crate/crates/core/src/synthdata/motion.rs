use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::PoseParams;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionKind {
    ArmRaise,
    LegLift,
    TorsoSway,
    Wave,
}

impl MotionKind {
    pub const ALL: [MotionKind; 4] = [
        MotionKind::ArmRaise,
        MotionKind::LegLift,
        MotionKind::TorsoSway,
        MotionKind::Wave,
    ];

    /// Class label used by the feature classifier.
    pub fn class(self) -> usize {
        Self::ALL.iter().position(|&k| k == self).unwrap()
    }
}

/// A sequence of joint-parameter frames.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionProgram {
    kind: MotionKind,
    frames: Vec<PoseParams>,
}

impl MotionProgram {
    pub fn new(kind: MotionKind, frames: Vec<PoseParams>) -> Result<Self> {
        if frames.len() < 2 {
            return Err(Error::InvalidInput("a motion program needs at least 2 frames".into()));
        }
        for f in &frames {
            f.validate()?;
        }
        Ok(Self { kind, frames })
    }

    pub fn kind(&self) -> MotionKind {
        self.kind
    }

    pub fn frames(&self) -> &[PoseParams] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Random instance of `kind` with `t` frames. One full cycle of the
    /// movement spans the sequence, starting from a random phase.
    pub fn synthesize(kind: MotionKind, t: usize, rng: &mut impl Rng) -> Result<Self> {
        let phase0 = rng.random_range(0.0..2.0 * PI);
        let amp = rng.random_range(0.75..1.0);
        let side = rng.random_range(0..2usize);
        let sign = if side == 0 { 1.0 } else { -1.0 };
        let mut base = PoseParams::standing();
        base.pelvis[0] = rng.random_range(-0.06..0.06);
        let frames = (0..t)
            .map(|f| {
                let phi = phase0 + 2.0 * PI * f as f64 / t as f64;
                let rise = 0.5 * (1.0 - phi.cos()); // 0..1
                let mut p = base;
                match kind {
                    MotionKind::ArmRaise => {
                        p.arms[side].shoulder = sign * (0.35 + amp * 2.3 * rise);
                        p.arms[side].elbow = sign * 0.1;
                        if amp > 0.85 {
                            let other = 1 - side;
                            p.arms[other].shoulder = -sign * (0.35 + amp * 1.2 * rise);
                        }
                    }
                    MotionKind::LegLift => {
                        p.legs[side].hip = sign * (0.15 + amp * 1.1 * rise);
                        p.legs[side].knee = -sign * amp * 1.4 * rise;
                        p.arms[side].shoulder = sign * (0.35 + 0.5 * rise);
                        p.pelvis[1] = 0.08 - 0.02 * rise;
                    }
                    MotionKind::TorsoSway => {
                        let s = phi.sin();
                        p.torso = amp * 0.35 * s;
                        p.pelvis[0] = base.pelvis[0] + 0.03 * s;
                        // The swinging arm passes behind the torso.
                        let arm = 1 - side;
                        let swing = -sign * 0.35 + sign * amp * 1.0 * rise;
                        p.arms[arm].shoulder = swing;
                        p.arms[arm].elbow = sign * 0.3 * rise;
                        p.arms[arm].behind = true;
                        p.arms[side].shoulder = sign * (0.35 + 0.6 * rise);
                    }
                    MotionKind::Wave => {
                        p.arms[side].shoulder = sign * 2.4;
                        p.arms[side].elbow = sign * (0.2 + amp * 0.9 * rise);
                        p.legs[side].hip = sign * (0.15 + 0.1 * rise);
                    }
                }
                p
            })
            .collect();
        Self::new(kind, frames)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{generate_sequence, FigureSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn programs_stay_in_frame_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let spec = FigureSpec::new(32);
        for trial in 0..40 {
            for kind in MotionKind::ALL {
                let prog = MotionProgram::synthesize(kind, 16, &mut rng).unwrap();
                assert_eq!(prog.len(), 16);
                generate_sequence(&spec, &prog, trial).unwrap();
            }
        }
    }

    #[test]
    fn rejects_short_programs() {
        assert!(MotionProgram::new(MotionKind::Wave, vec![PoseParams::standing()]).is_err());
    }

    #[test]
    fn torso_sway_exercises_occlusion() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = FigureSpec::new(32);
        let mut occluded = 0;
        for seed in 0..10 {
            let prog = MotionProgram::synthesize(MotionKind::TorsoSway, 16, &mut rng).unwrap();
            for (_, pose) in generate_sequence(&spec, &prog, seed).unwrap() {
                occluded += (0..pose.len()).filter(|&k| !pose.is_visible(k)).count();
            }
        }
        assert!(occluded > 0);
    }
}
