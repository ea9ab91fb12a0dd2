//! Stage-2 data preparation and optimization loop.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{LossReport, RoiConfig, Stage2Batch, TransformerModel};
use crate::autograd::Graph;
use crate::codec::{quantize, CodecModel, LatentGrid};
use crate::condition::PoseFrame;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Adam;
use crate::rng::step_rng;
use crate::scrabble::{scrabble_indices, Bag};

/// Which index sequence the transformer learns to emit.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetKind {
    /// Nearest source-bag member of each raw target latent pixel.
    Patchwork,
    /// Directly quantized target indices; may contain out-of-bag codes.
    Quantized,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Config {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    /// Linear warm-up length in steps.
    pub warmup: u64,
    /// `None` trains without RoI weighting.
    pub roi: Option<RoiConfig>,
    pub target: TargetKind,
    pub seed: u64,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 8,
            lr: 1e-3,
            warmup: 500,
            roi: Some(RoiConfig::default()),
            target: TargetKind::Patchwork,
            seed: 0,
        }
    }
}

/// Learning rate at `step`: linear ramp to `base` over `warmup` steps, then
/// linear decay reaching 0 at `total`.
pub fn lr_at(step: u64, base: f64, warmup: u64, total: u64) -> f64 {
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else if total <= warmup {
        base
    } else {
        base * (total.saturating_sub(step)) as f64 / (total - warmup) as f64
    }
}

/// One sequence encoded by the frozen codec.
#[derive(Clone, Debug)]
pub struct CodedSequence {
    pub latents: Vec<LatentGrid>,
    pub indices: Vec<Vec<usize>>,
    pub poses: Vec<PoseFrame>,
}

/// A `(source indices, driving pose, target indices)` training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Triplet {
    pub source: Vec<usize>,
    pub pose: PoseFrame,
    pub target: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct Stage2Data {
    pub sequences: Vec<CodedSequence>,
    codec: CodecModel,
    target: TargetKind,
}

impl Stage2Data {
    /// Encodes every frame once with the frozen codec.
    pub fn new(codec: &CodecModel, sequences: &[(&[Image], &[PoseFrame])], target: TargetKind) -> Result<Self> {
        let codebook = codec.codebook();
        let mut coded = Vec::with_capacity(sequences.len());
        for (frames, poses) in sequences {
            if frames.len() != poses.len() || frames.is_empty() {
                return Err(Error::InvalidInput(format!(
                    "sequence with {} frames and {} poses",
                    frames.len(),
                    poses.len()
                )));
            }
            let refs: Vec<&Image> = frames.iter().collect();
            let mut latents = Vec::with_capacity(refs.len());
            for chunk in refs.chunks(16) {
                latents.extend(codec.encode_batch(chunk)?);
            }
            let indices = latents
                .iter()
                .map(|z| quantize(z, &codebook).map(|q| q.indices))
                .collect::<Result<Vec<_>>>()?;
            coded.push(CodedSequence {
                latents,
                indices,
                poses: poses.to_vec(),
            });
        }
        if coded.is_empty() {
            return Err(Error::InvalidInput("no sequences for stage 2".into()));
        }
        Ok(Self {
            sequences: coded,
            codec: codec.clone(),
            target,
        })
    }

    pub fn codec(&self) -> &CodecModel {
        &self.codec
    }

    /// Source frame `s` driving towards frame `t` of sequence `seq`.
    pub fn triplet(&self, seq: usize, s: usize, t: usize) -> Result<Triplet> {
        let cs = &self.sequences[seq];
        let source = cs.indices[s].clone();
        let target = match self.target {
            TargetKind::Quantized => cs.indices[t].clone(),
            TargetKind::Patchwork => {
                let codebook = self.codec.codebook();
                let side = self.codec.arch.latent_side();
                let bag = Bag::from_indices(source.iter().copied(), &codebook, (side, side))?;
                scrabble_indices(&cs.latents[t], &bag, &codebook)
            }
        };
        Ok(Triplet {
            source,
            pose: cs.poses[t].clone(),
            target,
        })
    }

    pub fn sample(&self, rng: &mut impl Rng) -> Result<Triplet> {
        let seq = rng.random_range(0..self.sequences.len());
        let n = self.sequences[seq].indices.len();
        let s = rng.random_range(0..n);
        let t = rng.random_range(0..n);
        self.triplet(seq, s, t)
    }

    /// Every `(sequence, source, target)` combination.
    pub fn all_pairs(&self) -> Vec<(usize, usize, usize)> {
        let mut out = Vec::new();
        for (i, seq) in self.sequences.iter().enumerate() {
            let n = seq.indices.len();
            for s in 0..n {
                for t in 0..n {
                    out.push((i, s, t));
                }
            }
        }
        out
    }
}

fn batch_of(triplets: &[Triplet]) -> Stage2Batch<'_> {
    Stage2Batch {
        sources: triplets.iter().map(|t| t.source.as_slice()).collect(),
        poses: triplets.iter().map(|t| &t.pose).collect(),
        targets: triplets.iter().map(|t| t.target.as_slice()).collect(),
    }
}

/// Teacher-forced next-index accuracy over the given pairs.
pub fn teacher_forced_accuracy(model: &TransformerModel, data: &Stage2Data, pairs: &[(usize, usize, usize)]) -> Result<LossReport> {
    let mut total = LossReport::default();
    for chunk in pairs.chunks(16) {
        let triplets = chunk
            .iter()
            .map(|&(q, s, t)| data.triplet(q, s, t))
            .collect::<Result<Vec<_>>>()?;
        let r = model.training_loss(&batch_of(&triplets), None)?;
        total.weighted_sum += r.weighted_sum;
        total.counted += r.counted;
        total.violations += r.violations;
        total.correct += r.correct;
    }
    total.mean = total.weighted_sum / total.counted.max(1) as f64;
    Ok(total)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage2Log {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
    pub accuracy: f64,
    pub violations: usize,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Stage2Trainer {
    pub model: TransformerModel,
    pub config: Stage2Config,
    pub opt: Adam,
    pub step: u64,
}

impl Stage2Trainer {
    pub fn new(model: TransformerModel, config: Stage2Config) -> Self {
        let opt = Adam::new(&model.store);
        Self {
            model,
            config,
            opt,
            step: 0,
        }
    }

    pub fn step(&mut self, data: &Stage2Data) -> Result<Stage2Log> {
        let mut rng: ChaCha8Rng = step_rng(self.config.seed, self.step);
        let triplets = (0..self.config.batch)
            .map(|_| data.sample(&mut rng))
            .collect::<Result<Vec<_>>>()?;
        let batch = batch_of(&triplets);
        let mut g = Graph::new();
        let p = g.bind(&self.model.store, true);
        let (loss, report) = self.model.loss_graph(&mut g, &p, &batch, self.config.roi.as_ref())?;
        if !report.mean.is_finite() {
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite stage-2 loss {}", report.mean),
            });
        }
        let grads = g.backward(loss);
        let lr = lr_at(self.step, self.config.lr, self.config.warmup, self.config.steps);
        let backup = (self.model.store.clone(), self.opt.clone());
        let grad_norm = self.opt.update(&mut self.model.store, &p.grads(&grads), lr);
        if !grad_norm.is_finite() || !self.model.store.all_finite() {
            (self.model.store, self.opt) = backup;
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite parameters after update (gradient norm {grad_norm}, loss {})", report.mean),
            });
        }
        self.step += 1;
        Ok(Stage2Log {
            step: self.step,
            lr,
            loss: report.mean,
            accuracy: report.accuracy(),
            violations: report.violations,
            grad_norm,
        })
    }

    pub fn run(&mut self, data: &Stage2Data, mut on_step: impl FnMut(&Stage2Trainer, &Stage2Log) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let log = self.step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}
