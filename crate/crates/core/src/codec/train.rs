//! Stage-1 optimization loop.

use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{discriminator_pass, stage1_pass, LossWeights, Stage1Losses};
use super::CodecModel;
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Adam;
use crate::rng::step_rng;
use crate::tensor::Tensor;

/// Frames grouped by sequence; pairs are drawn within one sequence.
#[derive(Clone, Debug)]
pub struct FramePairs {
    sequences: Vec<Vec<Image>>,
}

impl FramePairs {
    pub fn new(sequences: Vec<Vec<Image>>) -> Result<Self> {
        let sequences: Vec<Vec<Image>> = sequences.into_iter().filter(|s| !s.is_empty()).collect();
        if sequences.is_empty() {
            return Err(Error::InvalidInput("no frames to train on".into()));
        }
        Ok(Self { sequences })
    }

    pub fn sequences(&self) -> &[Vec<Image>] {
        &self.sequences
    }

    pub fn frame_count(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    /// Picks a sequence uniformly, then two frames of it uniformly and
    /// independently.
    pub fn sample(&self, rng: &mut impl Rng) -> (&Image, &Image) {
        let seq = &self.sequences[rng.random_range(0..self.sequences.len())];
        let a = rng.random_range(0..seq.len());
        let b = rng.random_range(0..seq.len());
        (&seq[a], &seq[b])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub steps: u64,
    /// Frame pairs per step.
    pub batch: usize,
    pub lr: f64,
    /// The learning rate decays linearly to 0 from this step on.
    pub decay_after: u64,
    pub weights: LossWeights,
    /// Generator steps before the adversarial terms switch on.
    pub adv_warmup: u64,
    /// Entries unused for this many steps are re-seeded.
    pub dead_code_steps: u64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch: 8,
            lr: 2e-3,
            decay_after: 10_000,
            weights: LossWeights::default(),
            adv_warmup: 10_000,
            dead_code_steps: 2_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage1Log {
    pub step: u64,
    pub lr: f64,
    pub losses: Stage1Losses,
    pub grad_norm: f64,
    /// Codebook entries re-seeded after this step.
    pub reseeded: usize,
}

/// Owns the codec and both optimizers.
#[derive(Clone, Debug)]
pub struct Stage1Trainer {
    pub model: CodecModel,
    pub config: Stage1Config,
    pub opt_gen: Adam,
    pub opt_disc: Adam,
    /// Number of completed steps.
    pub step: u64,
    /// Step at which each codebook entry was last selected.
    pub last_used: Vec<u64>,
}

impl Stage1Trainer {
    pub fn new(model: CodecModel, config: Stage1Config) -> Self {
        let opt_gen = Adam::new(&model.gen);
        let opt_disc = Adam::new(&model.disc);
        let last_used = vec![0; model.arch.codebook_size];
        Self {
            model,
            config,
            opt_gen,
            opt_disc,
            step: 0,
            last_used,
        }
    }

    /// Overwrites the codebook with distinct encoder outputs of the first
    /// batch, so that every entry starts inside the data manifold.
    fn init_codebook(&mut self, latents: &Tensor, rng: &mut impl Rng) {
        let (rows, c) = latents.rows_cols();
        let m = self.model.arch.codebook_size;
        let picks: Vec<usize> = if rows >= m {
            sample(rng, rows, m).into_vec()
        } else {
            (0..m).map(|_| rng.random_range(0..rows)).collect()
        };
        for (k, r) in picks.into_iter().enumerate() {
            let mut v = latents.data()[r * c..(r + 1) * c].to_vec();
            if rows < m {
                v.iter_mut().for_each(|x| *x += rng.random_range(-1e-3..1e-3));
            }
            self.model.set_codebook_entry(k, &v);
        }
    }

    fn reseed_dead(&mut self, latents: &Tensor, rng: &mut impl Rng) -> usize {
        let (rows, c) = latents.rows_cols();
        let cb = self.model.codebook_id();
        let cb_slot = self
            .model
            .gen
            .iter()
            .position(|(name, _)| name == "codebook")
            .expect("codebook registered");
        let mut count = 0;
        for k in 0..self.last_used.len() {
            if self.step - self.last_used[k] < self.config.dead_code_steps {
                continue;
            }
            let r = rng.random_range(0..rows);
            let v = latents.data()[r * c..(r + 1) * c].to_vec();
            self.model.set_codebook_entry(k, &v);
            for moment in [&mut self.opt_gen.m[cb_slot], &mut self.opt_gen.v[cb_slot]] {
                moment.data_mut()[k * c..(k + 1) * c].fill(0.0);
            }
            self.last_used[k] = self.step;
            count += 1;
        }
        debug_assert_eq!(self.model.gen.get(cb).dim(0), self.last_used.len());
        count
    }

    /// Learning rate of the next step.
    pub fn lr(&self) -> f64 {
        let (s, d, n) = (self.step, self.config.decay_after, self.config.steps);
        if s < d || n <= d {
            self.config.lr
        } else {
            self.config.lr * n.saturating_sub(s) as f64 / (n - d) as f64
        }
    }

    fn sample_batch<'a>(&self, data: &'a FramePairs, rng: &mut impl Rng) -> (Vec<&'a Image>, Vec<&'a Image>) {
        (0..self.config.batch).map(|_| data.sample(rng)).unzip()
    }

    /// One optimizer step. On non-finite losses or parameters the model is
    /// left at its previous state and a divergence error is returned.
    pub fn step(&mut self, data: &FramePairs) -> Result<Stage1Log> {
        let mut rng: ChaCha8Rng = step_rng(self.config.seed, self.step);
        let (xs, xt) = self.sample_batch(data, &mut rng);
        if self.step == 0 {
            let latents = self.model.encode_batch(&xs)?;
            let c = self.model.arch.code_dim;
            let flat: Vec<f64> = latents.into_iter().flat_map(|z| z.data).collect();
            let rows = flat.len() / c;
            self.init_codebook(&Tensor::new(&[rows, c], flat)?, &mut rng);
        }
        let adv_on = self.config.weights.adversarial > 0.0 && self.step >= self.config.adv_warmup;
        let pass = stage1_pass(&self.model, &xs, &xt, &self.config.weights, adv_on)?;
        let mut losses = pass.losses.clone();
        losses.check_finite(self.step)?;
        let grads = pass.g.backward(pass.total);
        let gen_grads = pass.params.grads(&grads);
        let backup = (self.model.clone(), self.opt_gen.clone(), self.opt_disc.clone());
        let lr = self.lr();
        let grad_norm = self.opt_gen.update(&mut self.model.gen, &gen_grads, lr);
        if adv_on {
            let (g, p, d) = discriminator_pass(&self.model, &pass.reals, &pass.fakes);
            losses.discriminator = g.value(d).item();
            let dg = g.backward(d);
            self.opt_disc.update(&mut self.model.disc, &p.grads(&dg), lr);
        }
        if !grad_norm.is_finite() || !self.model.gen.all_finite() || !self.model.disc.all_finite() {
            (self.model, self.opt_gen, self.opt_disc) = backup;
            return Err(Error::Divergence {
                step: self.step,
                detail: format!("non-finite parameters after update (gradient norm {grad_norm}); losses {losses:?}"),
            });
        }
        losses.check_finite(self.step)?;
        for &k in &pass.indices {
            self.last_used[k] = self.step;
        }
        self.step += 1;
        let reseeded = self.reseed_dead(&pass.latents, &mut rng);
        Ok(Stage1Log {
            step: self.step,
            lr,
            losses,
            grad_norm,
            reseeded,
        })
    }

    /// Runs until `config.steps` steps are complete, reporting each step.
    pub fn run(&mut self, data: &FramePairs, mut on_step: impl FnMut(&Stage1Trainer, &Stage1Log) -> Result<()>) -> Result<()> {
        while self.step < self.config.steps {
            let log = self.step(data)?;
            on_step(self, &log)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tests::micro_arch;
    use crate::metrics::FeatureNet;
    use rand::SeedableRng;

    fn setup(seed: u64) -> (Stage1Trainer, FramePairs) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = micro_arch();
        let feat = FeatureNet::new(arch.image_size, 2, &mut rng);
        let model = CodecModel::new(arch, feat, &mut rng).unwrap();
        let frames: Vec<Image> = (0..3)
            .map(|i| {
                let mut img = Image::filled(8, 8, [0.1, 0.2, 0.3]);
                for y in 0..8 {
                    img.set_pixel(y, (i * 3 + y) % 8, [0.9, 0.8, 0.1]);
                }
                img
            })
            .collect();
        let config = Stage1Config {
            steps: 60,
            batch: 2,
            lr: 5e-3,
            adv_warmup: 30,
            dead_code_steps: 10,
            seed,
            ..Stage1Config::default()
        };
        (Stage1Trainer::new(model, config), FramePairs::new(vec![frames]).unwrap())
    }

    #[test]
    fn learning_rate_holds_then_decays_linearly() {
        let (mut t, _) = setup(0);
        t.config.steps = 10;
        t.config.decay_after = 6;
        let lrs: Vec<f64> = (0..10)
            .map(|s| {
                t.step = s;
                t.lr() / t.config.lr
            })
            .collect();
        assert_eq!(lrs, [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 0.75, 0.5, 0.25]);
    }

    #[test]
    fn first_step_is_reproducible() {
        let (mut a, data) = setup(3);
        let (mut b, _) = setup(3);
        let la = a.step(&data).unwrap();
        let lb = b.step(&data).unwrap();
        assert_eq!(la.losses.total.to_bits(), lb.losses.total.to_bits());
    }

    #[test]
    fn overfit_decreases_loss_and_resume_is_seamless() {
        let (mut t, data) = setup(5);
        let mut totals = Vec::new();
        let mut snapshot = None;
        t.run(&data, |tr, log| {
            totals.push(log.losses.reconstruction);
            if log.step == 40 {
                snapshot = Some(tr.clone());
            }
            Ok(())
        })
        .unwrap();
        let head: f64 = totals[..10].iter().sum::<f64>() / 10.0;
        let tail: f64 = totals[totals.len() - 10..].iter().sum::<f64>() / 10.0;
        assert!(tail < head, "reconstruction did not decrease: {head} -> {tail}");
        // A copy resumed at step 40 replays the remaining steps exactly.
        let mut resumed = snapshot.unwrap();
        let mut replay = Vec::new();
        resumed
            .run(&data, |_, log| {
                replay.push(log.losses.reconstruction);
                Ok(())
            })
            .unwrap();
        assert_eq!(replay, totals[40..].to_vec());
    }

    #[test]
    fn dead_entries_are_reseeded() {
        let (mut t, data) = setup(9);
        let mut total = 0;
        for _ in 0..12 {
            total += t.step(&data).unwrap().reseeded;
        }
        assert!(total > 0);
        assert!(t.model.gen.all_finite());
    }
}
