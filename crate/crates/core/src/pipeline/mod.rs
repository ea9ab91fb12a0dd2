//! Commands behind the CLI: dataset generation, two-stage training with
//! resumable checkpoints, animation and evaluation.

mod checkpoint;
mod config;
mod eval;

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::Checkpoint;
pub use config::{GenerationConfig, Paths, RunConfig};
pub use eval::{evaluate_frames, foreground_crop, foreground_psnr, list_frames, load_frames, EvalReport};

use crate::codec::{quantize, CodecModel, FramePairs, QuantizedGrid, Stage1Log, Stage1Trainer};
use crate::condition::{encode_pose, read_pose_file, PoseFrame};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::FeatureNet;
use crate::rng::run_rng;
use crate::scrabble::{build_bag, index_histogram, HistogramRecord};
use crate::synthdata::{export_dataset, load_dataset, synthesize_dataset, Dataset, Manifest};
use crate::tensor::Tensor;
use crate::transformer::{GenerationStep, Policy, Stage2Data, Stage2Log, Stage2Trainer, TransformerModel};

pub const FEATURES_FILE: &str = "features.ckpt";
pub const STAGE1_FILE: &str = "stage1.ckpt";
pub const STAGE2_FILE: &str = "stage2.ckpt";
pub const STAGE1_LOG: &str = "stage1_loss.csv";
pub const STAGE2_LOG: &str = "stage2_loss.csv";
pub const LOCK_FILE: &str = ".lock";

const FEATURE_SEED_SALT: u64 = 0x5eed_f00d;

/// Exclusive ownership of a run directory for the lifetime of the value.
#[derive(Debug)]
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub fn cmd_make_data(cfg: &RunConfig, force: bool) -> Result<Manifest> {
    let dataset = synthesize_dataset(&cfg.data)?;
    export_dataset(&dataset, &cfg.paths.data_dir, force)
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let data = load_dataset(&cfg.paths.data_dir)?;
    if data.manifest.config != cfg.data {
        return Err(Error::Config(format!(
            "dataset in {} was generated with different data settings; rerun `make-data --force`",
            cfg.paths.data_dir.display()
        )));
    }
    Ok(data)
}

fn require(path: PathBuf, hint: &str) -> Result<PathBuf> {
    if path.exists() {
        Ok(path)
    } else {
        Err(Error::MissingArtifact {
            path,
            hint: hint.to_string(),
        })
    }
}

fn fresh_feature_net(cfg: &RunConfig) -> FeatureNet {
    let mut rng = run_rng(cfg.data.seed ^ FEATURE_SEED_SALT);
    FeatureNet::new(cfg.codec.image_size, cfg.feature_classes(), &mut rng)
}

/// Trains the motion-class feature network on the training split.
pub fn train_feature_net(cfg: &RunConfig, data: &Dataset) -> Result<(FeatureNet, f64)> {
    let mut net = fresh_feature_net(cfg);
    let samples: Vec<(&Image, usize)> = data
        .train
        .iter()
        .flat_map(|s| s.frames.iter().map(move |f| (f, s.kind.class())))
        .collect();
    let mut rng = run_rng(cfg.data.seed ^ FEATURE_SEED_SALT ^ 1);
    let loss = net.train(&samples, &cfg.features, &mut rng)?;
    Ok((net, loss))
}

pub fn load_feature_net(cfg: &RunConfig) -> Result<FeatureNet> {
    let path = require(cfg.paths.run_dir.join(FEATURES_FILE), "run `train --stage 1` first")?;
    let ck = Checkpoint::load_expecting(&path, "features", &cfg.features_hash())?;
    let mut net = fresh_feature_net(cfg);
    ck.load_store("feat", &mut net.store).map_err(|e| with_path(e, &path))?;
    Ok(net)
}

fn with_path(e: Error, path: &Path) -> Error {
    match e {
        Error::Checkpoint { detail, .. } => Error::Checkpoint {
            path: path.to_path_buf(),
            detail,
        },
        other => other,
    }
}

fn blank_codec(cfg: &RunConfig, perceptual: FeatureNet) -> Result<CodecModel> {
    CodecModel::new(cfg.codec.clone(), perceptual, &mut run_rng(cfg.stage1.seed))
}

fn stage1_checkpoint(cfg: &RunConfig, t: &Stage1Trainer, last: Option<&Stage1Log>) -> Checkpoint {
    let mut ck = Checkpoint::new("stage1", t.step, cfg.stage1_hash(), cfg.to_toml());
    ck.put_store("gen", &t.model.gen);
    ck.put_store("disc", &t.model.disc);
    ck.put_store("feat", &t.model.perceptual.store);
    ck.put_adam("adam_gen", &t.opt_gen, &t.model.gen);
    ck.put_adam("adam_disc", &t.opt_disc, &t.model.disc);
    let used: Vec<f64> = t.last_used.iter().map(|&s| s as f64).collect();
    ck.put("last_used", Tensor::new(&[used.len()], used).expect("1-d shape"));
    if let Some(log) = last {
        ck.meta = serde_json::to_value(log).unwrap_or_default();
    }
    ck
}

fn restore_stage1(cfg: &RunConfig, ck: &Checkpoint, path: &Path) -> Result<Stage1Trainer> {
    let mut model = blank_codec(cfg, fresh_feature_net(cfg))?;
    let load = |ck: &Checkpoint, model: &mut CodecModel| -> Result<(crate::nn::Adam, crate::nn::Adam, Vec<u64>)> {
        ck.load_store("gen", &mut model.gen)?;
        ck.load_store("disc", &mut model.disc)?;
        ck.load_store("feat", &mut model.perceptual.store)?;
        let g = ck.load_adam("adam_gen", &model.gen)?;
        let d = ck.load_adam("adam_disc", &model.disc)?;
        let used = ck
            .get("last_used")
            .filter(|t| t.numel() == cfg.codec.codebook_size)
            .ok_or_else(|| Error::Checkpoint {
                path: PathBuf::new(),
                detail: "last_used missing or mis-sized".into(),
            })?
            .data()
            .iter()
            .map(|&v| v as u64)
            .collect();
        Ok((g, d, used))
    };
    let (opt_gen, opt_disc, last_used) = load(ck, &mut model).map_err(|e| with_path(e, path))?;
    let mut t = Stage1Trainer::new(model, cfg.stage1.clone());
    t.opt_gen = opt_gen;
    t.opt_disc = opt_disc;
    t.last_used = last_used;
    t.step = ck.step;
    Ok(t)
}

/// Codec of a finished (or partially trained) stage-1 run.
pub fn load_codec(cfg: &RunConfig) -> Result<CodecModel> {
    let path = require(cfg.paths.run_dir.join(STAGE1_FILE), "run `train --stage 1` first")?;
    let ck = Checkpoint::load_expecting(&path, "stage1", &cfg.stage1_hash())?;
    Ok(restore_stage1(cfg, &ck, &path)?.model)
}

fn blank_transformer(cfg: &RunConfig) -> Result<TransformerModel> {
    TransformerModel::new(cfg.transformer.clone(), &mut run_rng(cfg.stage2.seed))
}

pub fn load_transformer(cfg: &RunConfig) -> Result<TransformerModel> {
    let path = require(cfg.paths.run_dir.join(STAGE2_FILE), "run `train --stage 2` first")?;
    let ck = Checkpoint::load_expecting(&path, "stage2", &cfg.stage2_hash())?;
    let mut model = blank_transformer(cfg)?;
    ck.load_store("tf", &mut model.store).map_err(|e| with_path(e, &path))?;
    Ok(model)
}

/// Append-only CSV loss log. On resume, rows past the checkpoint step are
/// dropped so the log matches the restored state.
struct LossLog {
    file: File,
}

impl LossLog {
    fn open(path: &Path, header: &[&str], resume_step: Option<u64>) -> Result<Self> {
        let mut kept = Vec::new();
        if let (Some(step), true) = (resume_step, path.exists()) {
            let f = File::open(path).map_err(|e| Error::io(path, e))?;
            for line in BufReader::new(f).lines().skip(1) {
                let line = line.map_err(|e| Error::io(path, e))?;
                let row_step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if row_step.is_some_and(|s| s <= step) {
                    kept.push(line);
                }
            }
        }
        let mut file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut text = header.join(",");
        text.push('\n');
        for line in kept {
            text.push_str(&line);
            text.push('\n');
        }
        file.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(Self { file })
    }

    fn row(&mut self, values: &[String]) -> Result<()> {
        writeln!(self.file, "{}", values.join(",")).map_err(|e| Error::io("loss log", e))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: u8,
    /// Completed optimizer steps.
    pub step: u64,
    /// Step the run resumed from, if a checkpoint existed.
    pub resumed_from: Option<u64>,
    pub checkpoint: PathBuf,
    /// Last logged losses, if any step ran in this invocation.
    pub last: serde_json::Value,
}

pub fn cmd_train(stage: u8, cfg: &RunConfig) -> Result<TrainSummary> {
    cmd_train_until(stage, cfg, None)
}

/// Like [`cmd_train`], but stops (with a checkpoint) once `until` steps are
/// complete. A later call resumes from there.
pub fn cmd_train_until(stage: u8, cfg: &RunConfig, until: Option<u64>) -> Result<TrainSummary> {
    cfg.validate()?;
    match stage {
        1 => {
            let _lock = RunLock::acquire(&cfg.paths.run_dir)?;
            train_stage1(cfg, until)
        }
        2 => {
            require(cfg.paths.run_dir.join(STAGE1_FILE), "run `train --stage 1` first")?;
            let _lock = RunLock::acquire(&cfg.paths.run_dir)?;
            train_stage2(cfg, until)
        }
        other => Err(Error::InvalidInput(format!("stage must be 1 or 2, got {other}"))),
    }
}

fn ensure_feature_net(cfg: &RunConfig, data: &Dataset) -> Result<FeatureNet> {
    let path = cfg.paths.run_dir.join(FEATURES_FILE);
    if path.exists() {
        return load_feature_net(cfg);
    }
    let (net, loss) = train_feature_net(cfg, data)?;
    log::info!("feature net trained, final loss {loss:.4}");
    let mut ck = Checkpoint::new("features", cfg.features.steps as u64, cfg.features_hash(), cfg.to_toml());
    ck.put_store("feat", &net.store);
    ck.meta = serde_json::json!({ "loss": loss });
    ck.save(&path)?;
    Ok(net)
}

fn train_stage1(cfg: &RunConfig, until: Option<u64>) -> Result<TrainSummary> {
    let data = load_data(cfg)?;
    let ck_path = cfg.paths.run_dir.join(STAGE1_FILE);
    let (mut trainer, resumed_from) = if ck_path.exists() {
        let ck = Checkpoint::load_expecting(&ck_path, "stage1", &cfg.stage1_hash())?;
        (restore_stage1(cfg, &ck, &ck_path)?, Some(ck.step))
    } else {
        let features = ensure_feature_net(cfg, &data)?;
        (Stage1Trainer::new(blank_codec(cfg, features)?, cfg.stage1.clone()), None)
    };
    let mut header = vec!["step", "lr"];
    header.extend(crate::codec::Stage1Losses::default().components().iter().map(|(k, _)| *k));
    header.extend(["grad_norm", "reseeded"]);
    let mut log = LossLog::open(&cfg.paths.run_dir.join(STAGE1_LOG), &header, resumed_from)?;
    let pairs = FramePairs::new(data.train.iter().map(|s| s.frames.clone()).collect())?;
    let mut last = serde_json::Value::Null;
    let stop = until.map_or(cfg.stage1.steps, |u| u.min(cfg.stage1.steps));
    while trainer.step < stop {
        let entry = &trainer.step(&pairs)?;
        let t = &trainer;
        let mut row = vec![entry.step.to_string(), format!("{:.6e}", entry.lr)];
        row.extend(entry.losses.components().iter().map(|(_, v)| format!("{v:.6e}")));
        row.push(format!("{:.6e}", entry.grad_norm));
        row.push(entry.reseeded.to_string());
        log.row(&row)?;
        if entry.step % cfg.checkpoint_every == 0 || entry.step == t.config.steps {
            stage1_checkpoint(cfg, t, Some(entry)).save(&ck_path)?;
            log::info!("stage 1 step {}: total loss {:.4}", entry.step, entry.losses.total);
        }
        last = serde_json::to_value(entry).unwrap_or_default();
    }
    if !ck_path.exists() || stop < cfg.stage1.steps {
        stage1_checkpoint(cfg, &trainer, None).save(&ck_path)?;
    }
    Ok(TrainSummary {
        stage: 1,
        step: trainer.step,
        resumed_from,
        checkpoint: ck_path,
        last,
    })
}

/// Stage-2 training examples built from the training split.
pub fn stage2_data(cfg: &RunConfig, codec: &CodecModel, data: &Dataset) -> Result<Stage2Data> {
    let seqs: Vec<(&[Image], &[PoseFrame])> = data
        .train
        .iter()
        .map(|s| (s.frames.as_slice(), s.poses.as_slice()))
        .collect();
    Stage2Data::new(codec, &seqs, cfg.stage2.target)
}

fn stage2_checkpoint(cfg: &RunConfig, t: &Stage2Trainer, last: Option<&Stage2Log>) -> Checkpoint {
    let mut ck = Checkpoint::new("stage2", t.step, cfg.stage2_hash(), cfg.to_toml());
    ck.put_store("tf", &t.model.store);
    ck.put_adam("adam", &t.opt, &t.model.store);
    if let Some(log) = last {
        ck.meta = serde_json::to_value(log).unwrap_or_default();
    }
    ck
}

fn train_stage2(cfg: &RunConfig, until: Option<u64>) -> Result<TrainSummary> {
    let data = load_data(cfg)?;
    let codec = load_codec(cfg)?;
    let ck_path = cfg.paths.run_dir.join(STAGE2_FILE);
    let mut trainer = Stage2Trainer::new(blank_transformer(cfg)?, cfg.stage2.clone());
    let resumed_from = if ck_path.exists() {
        let ck = Checkpoint::load_expecting(&ck_path, "stage2", &cfg.stage2_hash())?;
        ck.load_store("tf", &mut trainer.model.store).map_err(|e| with_path(e, &ck_path))?;
        trainer.opt = ck.load_adam("adam", &trainer.model.store).map_err(|e| with_path(e, &ck_path))?;
        trainer.step = ck.step;
        Some(ck.step)
    } else {
        None
    };
    let header = ["step", "lr", "loss", "accuracy", "violations", "grad_norm"];
    let mut log = LossLog::open(&cfg.paths.run_dir.join(STAGE2_LOG), &header, resumed_from)?;
    let s2 = stage2_data(cfg, &codec, &data)?;
    let mut last = serde_json::Value::Null;
    let stop = until.map_or(cfg.stage2.steps, |u| u.min(cfg.stage2.steps));
    while trainer.step < stop {
        let e = &trainer.step(&s2)?;
        let t = &trainer;
        log.row(&[
            e.step.to_string(),
            format!("{:.6e}", e.lr),
            format!("{:.6e}", e.loss),
            format!("{:.4}", e.accuracy),
            e.violations.to_string(),
            format!("{:.6e}", e.grad_norm),
        ])?;
        if e.step % cfg.checkpoint_every == 0 || e.step == t.config.steps {
            stage2_checkpoint(cfg, t, Some(e)).save(&ck_path)?;
            log::info!("stage 2 step {}: loss {:.4}, accuracy {:.3}", e.step, e.loss, e.accuracy);
        }
        last = serde_json::to_value(e).unwrap_or_default();
    }
    if !ck_path.exists() || stop < cfg.stage2.steps {
        stage2_checkpoint(cfg, &trainer, None).save(&ck_path)?;
    }
    Ok(TrainSummary {
        stage: 2,
        step: trainer.step,
        resumed_from,
        checkpoint: ck_path,
        last,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame: usize,
    /// Generated index grid, row-major.
    pub indices: Vec<usize>,
    pub steps: Vec<GenerationStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimationTrace {
    /// Latent grid `(h, w)`.
    pub grid: (usize, usize),
    pub source_indices: Vec<usize>,
    /// Distinct source indices, ascending.
    pub bag: Vec<usize>,
    pub frames: Vec<FrameTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Animation {
    pub frames: Vec<Image>,
    pub trace: AnimationTrace,
}

/// Encodes `source` once, then for every driving pose generates an index
/// grid from the source bag and decodes it.
pub fn animate(
    codec: &CodecModel,
    transformer: &TransformerModel,
    source: &Image,
    poses: &[PoseFrame],
    policy: Policy,
    rng: &mut impl Rng,
) -> Result<Animation> {
    if transformer.arch.seq_len != codec.arch.seq_len() || transformer.arch.codebook_size != codec.arch.codebook_size {
        return Err(Error::Config("transformer and codec checkpoints do not fit together".into()));
    }
    if let Some(p) = poses.iter().find(|p| p.len() != transformer.arch.keypoints) {
        return Err(Error::InvalidInput(format!(
            "pose has {} keypoints, checkpoint expects {}",
            p.len(),
            transformer.arch.keypoints
        )));
    }
    let codebook = codec.codebook();
    let z = codec.encode(source)?;
    let zq = quantize(&z, &codebook)?;
    let bag = build_bag(&zq, &codebook)?;
    let mut frames = Vec::with_capacity(poses.len());
    let mut traces = Vec::with_capacity(poses.len());
    for (i, pose) in poses.iter().enumerate() {
        let cond = encode_pose(pose, &transformer.pose, &transformer.store)?;
        let gen = transformer.generate(&zq.indices, &cond, policy, rng)?;
        let grid = QuantizedGrid::from_indices(zq.h, zq.w, gen.indices.clone(), &codebook)?;
        frames.push(codec.decode(&grid)?);
        traces.push(FrameTrace {
            frame: i,
            indices: gen.indices,
            steps: gen.trace,
        });
    }
    Ok(Animation {
        frames,
        trace: AnimationTrace {
            grid: (zq.h, zq.w),
            source_indices: zq.indices.clone(),
            bag: bag.member_indices().to_vec(),
            frames: traces,
        },
    })
}

fn check_source_image(cfg: &RunConfig, img: &Image) -> Result<()> {
    let s = cfg.codec.image_size;
    if img.height() != s || img.width() != s {
        return Err(Error::InvalidInput(format!(
            "source image is {}x{}, model expects {s}x{s}",
            img.width(),
            img.height()
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnimateSummary {
    pub frames: Vec<PathBuf>,
    pub trace: PathBuf,
}

pub fn cmd_animate(cfg: &RunConfig, source: &Path, poses: &Path, out_dir: &Path, force: bool) -> Result<AnimateSummary> {
    let trace_path = out_dir.join("trace.json");
    if trace_path.exists() && !force {
        return Err(Error::WouldOverwrite(trace_path));
    }
    let codec = load_codec(cfg)?;
    let transformer = load_transformer(cfg)?;
    let image = Image::load_png(source)?;
    check_source_image(cfg, &image)?;
    let poses = read_pose_file(poses)?;
    let mut rng = run_rng(cfg.generation.seed);
    let anim = animate(&codec, &transformer, &image, &poses, cfg.generation.policy, &mut rng)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut paths = Vec::with_capacity(anim.frames.len());
    for (i, f) in anim.frames.iter().enumerate() {
        let p = out_dir.join(format!("frame_{i:04}.png"));
        f.save_png(&p)?;
        paths.push(p);
    }
    let text = serde_json::to_string(&anim.trace).map_err(|e| Error::json("animation trace", e))?;
    fs::write(&trace_path, text).map_err(|e| Error::io(&trace_path, e))?;
    Ok(AnimateSummary {
        frames: paths,
        trace: trace_path,
    })
}

/// Scores two frame directories. FID fields are filled only when a trained
/// feature network exists for `cfg`.
pub fn cmd_eval(cfg: &RunConfig, generated_dir: &Path, reference_dir: &Path) -> Result<EvalReport> {
    let generated = load_frames(generated_dir)?;
    let reference = load_frames(reference_dir)?;
    let features = match load_feature_net(cfg) {
        Ok(net) => Some(net),
        Err(Error::MissingArtifact { .. }) => None,
        Err(e) => return Err(e),
    };
    evaluate_frames(&generated, &reference, features.as_ref())
}

/// Index histogram of each image under `codec`.
pub fn image_histograms(codec: &CodecModel, images: &[(String, Image)]) -> Result<Vec<HistogramRecord>> {
    let codebook = codec.codebook();
    images
        .iter()
        .map(|(label, img)| {
            let zq = quantize(&codec.encode(img)?, &codebook)?;
            Ok(HistogramRecord {
                label: label.clone(),
                counts: index_histogram(&zq.indices, codebook.len())?,
            })
        })
        .collect()
}

const BAR_HEIGHT: usize = 48;
const BAR_GAP: usize = 4;

/// Bar chart with one panel per record, one column per codebook entry.
pub fn render_histograms(records: &[HistogramRecord]) -> Result<Image> {
    let m = records.first().map_or(0, |r| r.counts.len());
    if m == 0 || records.iter().any(|r| r.counts.len() != m) {
        return Err(Error::InvalidInput("histograms must be non-empty and equally sized".into()));
    }
    let height = records.len() * (BAR_HEIGHT + BAR_GAP) + BAR_GAP;
    let mut img = Image::filled(height, m, [1.0; 3]);
    for (r, rec) in records.iter().enumerate() {
        let top = BAR_GAP + r * (BAR_HEIGHT + BAR_GAP);
        let max = rec.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
        for (k, &c) in rec.counts.iter().enumerate() {
            let bar = ((c as f64 / max) * BAR_HEIGHT as f64).round() as usize;
            for y in 0..BAR_HEIGHT {
                let colour = if y >= BAR_HEIGHT - bar { [0.15, 0.3, 0.7] } else { [0.93; 3] };
                img.set_pixel(top + y, k, colour);
            }
        }
    }
    Ok(img)
}

/// Writes `<out>.json` with the histogram of every image and `<out>.png`
/// with the bar chart.
pub fn cmd_plot_histograms(cfg: &RunConfig, images: &[PathBuf], out: &Path) -> Result<Vec<HistogramRecord>> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images given".into()));
    }
    let codec = load_codec(cfg)?;
    let loaded = images
        .iter()
        .map(|p| {
            let img = Image::load_png(p)?;
            check_source_image(cfg, &img)?;
            Ok((p.display().to_string(), img))
        })
        .collect::<Result<Vec<_>>>()?;
    let records = image_histograms(&codec, &loaded)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json_path = out.with_extension("json");
    let text = serde_json::to_string_pretty(&records).map_err(|e| Error::json("histograms", e))?;
    fs::write(&json_path, text).map_err(|e| Error::io(&json_path, e))?;
    render_histograms(&records)?.save_png(&out.with_extension("png"))?;
    Ok(records)
}
