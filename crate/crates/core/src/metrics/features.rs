//! Small conv classifier trained on synthetic motion classes. Its hidden
//! activations serve as the perceptual-loss feature space and its 64-wide
//! penultimate layer as the embedding for the Fréchet distance.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::{Adam, Bound, Conv2d, Linear, ParamStore};
use crate::tensor::Tensor;

pub const EMBED_DIM: usize = 64;

#[derive(Clone, Debug)]
pub struct FeatureNet {
    pub image_size: usize,
    pub classes: usize,
    pub store: ParamStore,
    convs: [Conv2d; 3],
    fc: Linear,
    head: Linear,
}

/// Intermediate activations of one forward pass.
pub struct FeatureActs {
    /// Post-activation conv maps, finest first.
    pub maps: Vec<Var>,
    /// `[b, 64]` penultimate embedding.
    pub embedding: Var,
    /// `[b, classes]`.
    pub logits: Var,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
}

impl Default for FeatureTrainConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch: 16,
            lr: 2e-3,
        }
    }
}

impl FeatureNet {
    pub fn new(image_size: usize, classes: usize, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let convs = [
            Conv2d::new(&mut store, rng, "feat.c1", 3, 16, 3, 1, 1),
            Conv2d::new(&mut store, rng, "feat.c2", 16, 32, 4, 2, 1),
            Conv2d::new(&mut store, rng, "feat.c3", 32, 32, 4, 2, 1),
        ];
        let fc = Linear::new(&mut store, rng, "feat.fc", 32, EMBED_DIM);
        let head = Linear::new(&mut store, rng, "feat.head", EMBED_DIM, classes.max(1));
        Self {
            image_size,
            classes,
            store,
            convs,
            fc,
            head,
        }
    }

    /// `x: [b, 3, S, S]`.
    pub fn graph(&self, g: &mut Graph, p: &Bound, x: Var) -> FeatureActs {
        let batch = g.shape(x)[0];
        let mut h = x;
        let mut maps = Vec::with_capacity(3);
        for conv in &self.convs {
            h = conv.forward(g, p, h);
            h = g.leaky_relu(h, 0.2);
            maps.push(h);
        }
        let s = g.shape(h).to_vec();
        let hw = s[2] * s[3];
        let rows = g.nchw_to_rows(h);
        let mut pool = vec![0.0; batch * batch * hw];
        for b in 0..batch {
            for p in 0..hw {
                pool[b * batch * hw + b * hw + p] = 1.0 / hw as f64;
            }
        }
        let pool = g.constant(Tensor::new(&[batch, batch * hw], pool).unwrap());
        let pooled = g.matmul(pool, rows);
        let e = self.fc.forward(g, p, pooled);
        let embedding = g.relu(e);
        let logits = self.head.forward(g, p, embedding);
        FeatureActs {
            maps,
            embedding,
            logits,
        }
    }

    fn input(&self, images: &[&Image]) -> Result<Tensor> {
        let resized: Vec<Image> = images
            .iter()
            .map(|img| img.resize(self.image_size, self.image_size))
            .collect();
        let refs: Vec<&Image> = resized.iter().collect();
        Image::batch_tensor(&refs)
    }

    /// 64-dimensional embeddings; inputs are resized to the training size.
    pub fn embed(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let x = g.constant(self.input(images)?);
        let acts = self.graph(&mut g, &p, x);
        Ok(g.value(acts.embedding)
            .data()
            .chunks(EMBED_DIM)
            .map(<[f64]>::to_vec)
            .collect())
    }

    pub fn predict(&self, images: &[&Image]) -> Result<Vec<usize>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let x = g.constant(self.input(images)?);
        let acts = self.graph(&mut g, &p, x);
        Ok(g.value(acts.logits)
            .data()
            .chunks(self.classes)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best })
                    .0
            })
            .collect())
    }

    /// Supervised training on `(image, class)` pairs; returns the mean loss
    /// of the final 10% of steps.
    pub fn train(&mut self, samples: &[(&Image, usize)], cfg: &FeatureTrainConfig, rng: &mut impl Rng) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::InvalidInput("no training samples for feature net".into()));
        }
        if let Some((_, c)) = samples.iter().find(|(_, c)| *c >= self.classes) {
            return Err(Error::InvalidInput(format!("class {c} out of {}", self.classes)));
        }
        let mut opt = Adam::new(&self.store);
        let mut order: Vec<usize> = (0..samples.len()).collect();
        let mut cursor = order.len();
        let tail = (cfg.steps / 10).max(1);
        let mut tail_loss = 0.0;
        for step in 0..cfg.steps {
            let mut batch = Vec::with_capacity(cfg.batch);
            while batch.len() < cfg.batch.min(samples.len()) {
                if cursor == order.len() {
                    order.shuffle(rng);
                    cursor = 0;
                }
                batch.push(order[cursor]);
                cursor += 1;
            }
            let imgs: Vec<&Image> = batch.iter().map(|&i| samples[i].0).collect();
            let targets: Vec<usize> = batch.iter().map(|&i| samples[i].1).collect();
            let mut g = Graph::new();
            let p = g.bind(&self.store, true);
            let x = g.constant(self.input(&imgs)?);
            let acts = self.graph(&mut g, &p, x);
            let allowed = vec![true; batch.len() * self.classes];
            let weights = vec![1.0 / batch.len() as f64; batch.len()];
            let loss = g.masked_cross_entropy(acts.logits, &allowed, &targets, &weights);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step: step as u64,
                    detail: "feature net loss is not finite".into(),
                });
            }
            if step + tail >= cfg.steps {
                tail_loss += value / tail as f64;
            }
            let grads = g.backward(loss);
            opt.update(&mut self.store, &p.grads(&grads), cfg.lr);
        }
        Ok(tail_loss)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn learns_to_separate_two_colors() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut net = FeatureNet::new(8, 2, &mut rng);
        let red = Image::filled(8, 8, [0.9, 0.1, 0.1]);
        let blue = Image::filled(8, 8, [0.1, 0.1, 0.9]);
        let samples = vec![(&red, 0), (&blue, 1)];
        let cfg = FeatureTrainConfig {
            steps: 150,
            batch: 2,
            lr: 5e-3,
        };
        let loss = net.train(&samples, &cfg, &mut rng).unwrap();
        assert!(loss < 0.1, "loss {loss}");
        assert_eq!(net.predict(&[&red, &blue]).unwrap(), vec![0, 1]);
        let e = net.embed(&[&red]).unwrap();
        assert_eq!(e[0].len(), EMBED_DIM);
    }
}
