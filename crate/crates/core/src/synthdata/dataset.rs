use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{generate_sequence, FigureSpec, MotionKind, MotionProgram, KEYPOINT_NAMES};
use crate::condition::{read_pose_file, write_pose_file, PoseFrame};
use crate::error::{Error, Result};
use crate::image::Image;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub image_size: usize,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub frames: usize,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            train_sequences: 60,
            test_sequences: 10,
            frames: 16,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub id: String,
    pub kind: MotionKind,
    pub seed: u64,
    pub frames: Vec<Image>,
    pub poses: Vec<PoseFrame>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: Manifest,
    pub train: Vec<Sequence>,
    pub test: Vec<Sequence>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceEntry {
    pub id: String,
    pub kind: MotionKind,
    pub seed: u64,
    pub frames: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: DatasetConfig,
    pub keypoints: Vec<String>,
    pub splits: BTreeMap<String, Vec<SequenceEntry>>,
    pub counts: BTreeMap<String, usize>,
}

fn make_sequence(id: String, size: usize, frames: usize, rng: &mut ChaCha8Rng, kind: MotionKind) -> Result<Sequence> {
    let program = MotionProgram::synthesize(kind, frames, rng)?;
    let spec = FigureSpec::random_body(size, rng);
    let seed: u64 = rng.random();
    let rendered = generate_sequence(&spec, &program, seed)?;
    let (mut frames, poses): (Vec<Image>, Vec<PoseFrame>) = rendered.into_iter().unzip();
    frames.iter_mut().for_each(Image::quantize_8bit);
    Ok(Sequence {
        id,
        kind,
        seed,
        frames,
        poses,
    })
}

fn entries(seqs: &[Sequence]) -> Vec<SequenceEntry> {
    seqs.iter()
        .map(|s| SequenceEntry {
            id: s.id.clone(),
            kind: s.kind,
            seed: s.seed,
            frames: s.frames.len(),
        })
        .collect()
}

/// Generates every sequence in memory. Motion classes cycle so that each
/// split stays balanced.
pub fn synthesize_dataset(cfg: &DatasetConfig) -> Result<Dataset> {
    if cfg.frames < 2 {
        return Err(Error::Config("need at least 2 frames per sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |prefix: &str, count: usize| -> Result<Vec<Sequence>> {
        (0..count)
            .map(|i| {
                let kind = MotionKind::ALL[i % MotionKind::ALL.len()];
                make_sequence(format!("{prefix}{i:04}"), cfg.image_size, cfg.frames, &mut rng, kind)
            })
            .collect()
    };
    let train = split("train", cfg.train_sequences)?;
    let test = split("test", cfg.test_sequences)?;
    let mut splits = BTreeMap::new();
    splits.insert("train".to_string(), entries(&train));
    splits.insert("test".to_string(), entries(&test));
    let mut counts = BTreeMap::new();
    counts.insert("train".to_string(), train.len());
    counts.insert("test".to_string(), test.len());
    counts.insert(
        "frames".to_string(),
        (train.len() + test.len()) * cfg.frames,
    );
    Ok(Dataset {
        manifest: Manifest {
            config: cfg.clone(),
            keypoints: KEYPOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            splits,
            counts,
        },
        train,
        test,
    })
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::json(path.display().to_string(), e))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
}

/// Writes `<root>/<split>/<seq_id>/frame_%04d.png`, `poses.json` per
/// sequence, and `<root>/manifest.json`.
pub fn export_dataset(dataset: &Dataset, root: &Path, force: bool) -> Result<Manifest> {
    let manifest_path = root.join("manifest.json");
    if manifest_path.exists() && !force {
        return Err(Error::WouldOverwrite(manifest_path));
    }
    for (split, seqs) in [("train", &dataset.train), ("test", &dataset.test)] {
        for seq in seqs.iter() {
            let dir = root.join(split).join(&seq.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (i, frame) in seq.frames.iter().enumerate() {
                frame.save_png(&dir.join(format!("frame_{i:04}.png")))?;
            }
            write_pose_file(&dir.join("poses.json"), &seq.poses)?;
        }
    }
    write_json(&manifest_path, &dataset.manifest)?;
    Ok(dataset.manifest.clone())
}

/// Reads a dataset written by [`export_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest_path = root.join("manifest.json");
    if !manifest_path.exists() {
        return Err(Error::MissingArtifact {
            path: manifest_path,
            hint: "run `make-data` first".into(),
        });
    }
    let manifest: Manifest = read_json(&manifest_path)?;
    let load_split = |split: &str| -> Result<Vec<Sequence>> {
        let Some(list) = manifest.splits.get(split) else {
            return Ok(Vec::new());
        };
        list.iter()
            .map(|entry| {
                let dir = root.join(split).join(&entry.id);
                let frames = (0..entry.frames)
                    .map(|i| Image::load_png(&dir.join(format!("frame_{i:04}.png"))))
                    .collect::<Result<Vec<_>>>()?;
                let poses = read_pose_file(&dir.join("poses.json"))?;
                if poses.len() != frames.len() {
                    return Err(Error::InvalidInput(format!(
                        "{}: {} frames but {} pose records",
                        dir.display(),
                        frames.len(),
                        poses.len()
                    )));
                }
                Ok(Sequence {
                    id: entry.id.clone(),
                    kind: entry.kind,
                    seed: entry.seed,
                    frames,
                    poses,
                })
            })
            .collect()
    };
    let train = load_split("train")?;
    let test = load_split("test")?;
    Ok(Dataset {
        manifest,
        train,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            image_size: 32,
            train_sequences: 3,
            test_sequences: 1,
            frames: 4,
            seed: 9,
        }
    }

    #[test]
    fn export_import_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = synthesize_dataset(&small()).unwrap();
        let manifest = export_dataset(&ds, dir.path(), false).unwrap();
        assert_eq!(manifest.counts["train"], 3);
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back, ds);
        let pngs = walk_pngs(dir.path());
        assert_eq!(pngs, manifest.counts["frames"]);
        assert!(matches!(
            export_dataset(&ds, dir.path(), false),
            Err(Error::WouldOverwrite(_))
        ));
        export_dataset(&ds, dir.path(), true).unwrap();
    }

    fn walk_pngs(root: &Path) -> usize {
        let mut n = 0;
        for entry in fs::read_dir(root).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                n += walk_pngs(&path);
            } else if path.extension().is_some_and(|e| e == "png") {
                n += 1;
            }
        }
        n
    }

    #[test]
    fn default_config_counts() {
        let cfg = DatasetConfig::default();
        assert_eq!((cfg.train_sequences, cfg.test_sequences, cfg.frames), (60, 10, 16));
    }

    #[test]
    fn seeds_change_pixels_not_programs() {
        let a = synthesize_dataset(&small()).unwrap();
        let mut cfg = small();
        cfg.seed = 10;
        let b = synthesize_dataset(&cfg).unwrap();
        assert_ne!(a.train[0].frames[0], b.train[0].frames[0]);
        assert_eq!(synthesize_dataset(&small()).unwrap(), a);
    }
}
