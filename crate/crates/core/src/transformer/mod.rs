//! Decoder-only transformer that predicts target index sequences from the
//! source indices and the pose condition, under the four-block attention
//! mask and bag-constrained logits.

mod train;

pub use train::{lr_at, teacher_forced_accuracy, CodedSequence, Stage2Config, Stage2Data, Stage2Log, Stage2Trainer, TargetKind, Triplet};

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::condition::{ConditionSequence, PoseEncoder, PoseFrame};
use crate::error::{Error, Result};
use crate::nn::{uniform_init, Bound, LayerNorm, Linear, ParamId, ParamStore};
use crate::scrabble::Bag;
use crate::tensor::Tensor;

/// `(2l+n) × (2l+n)` attention permissions, row-major; `true` = may attend.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub l: usize,
    pub n: usize,
    size: usize,
    data: Vec<bool>,
}

impl AttentionMask {
    pub fn size(&self) -> usize {
        self.size
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.size + j]
    }

    pub fn row(&self, i: usize) -> &[bool] {
        &self.data[i * self.size..(i + 1) * self.size]
    }

    /// Top-left `len × len` block, the mask of a sequence cut after `len`
    /// tokens.
    pub fn truncated(&self, len: usize) -> Vec<bool> {
        assert!(len <= self.size);
        (0..len).flat_map(|i| self.row(i)[..len].iter().copied()).collect()
    }
}

/// Block structure over the layout `[s_1..s_l, c_1..c_n, t_[s], t_1..t_{l−1}]`:
/// source and condition tokens see each other only (A all-true, B all-false),
/// target tokens see all of them (C) and earlier targets (D lower-triangular).
pub fn build_attention_mask(l: usize, n: usize) -> Result<AttentionMask> {
    if l == 0 || n == 0 {
        return Err(Error::InvalidInput(format!("mask needs l >= 1 and n >= 1, got l={l}, n={n}")));
    }
    let ctx = l + n;
    let size = 2 * l + n;
    let mut data = vec![false; size * size];
    for i in 0..size {
        for j in 0..size {
            data[i * size + j] = if i < ctx {
                j < ctx
            } else {
                j < ctx || j <= i
            };
        }
    }
    Ok(AttentionMask { l, n, size, data })
}

/// Sets logits of indices outside the bag to −∞.
pub fn constrain_logits(v: &[f64], bag: &Bag) -> Vec<f64> {
    assert_eq!(v.len(), bag.codebook_size(), "logit width != codebook size");
    v.iter()
        .enumerate()
        .map(|(k, &x)| if bag.contains(k) { x } else { f64::NEG_INFINITY })
        .collect()
}

/// Softmax that gives exactly zero probability to −∞ logits.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let mx = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    assert!(mx > f64::NEG_INFINITY, "softmax of an all −∞ vector");
    let e: Vec<f64> = v
        .iter()
        .map(|&x| if x == f64::NEG_INFINITY { 0.0 } else { (x - mx).exp() })
        .collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

/// Membership mask of the distinct values of `source`.
pub fn source_mask(source: &[usize], m: usize) -> Vec<bool> {
    let mut mask = vec![false; m];
    for &k in source {
        mask[k] = true;
    }
    mask
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoiConfig {
    /// Weight of foreground cells.
    pub w_fg: f64,
    /// Bounding-box dilation in latent cells.
    pub pad: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        Self { w_fg: 5.0, pad: 1 }
    }
}

/// Per-cell loss weights: `w_fg` inside the dilated bounding box of the
/// visible keypoints, 1 elsewhere, all 1 when nothing is visible.
pub fn roi_weights(pose: &PoseFrame, grid: (usize, usize), cfg: &RoiConfig) -> Vec<f64> {
    let (h, w) = grid;
    let mut weights = vec![1.0; h * w];
    let cell = |v: f64, n: usize| ((v * n as f64).floor().max(0.0) as usize).min(n - 1);
    let mut bbox: Option<[usize; 4]> = None;
    for [x, y] in pose.visible() {
        let (cx, cy) = (cell(x, w), cell(y, h));
        bbox = Some(match bbox {
            None => [cy, cy, cx, cx],
            Some([y0, y1, x0, x1]) => [y0.min(cy), y1.max(cy), x0.min(cx), x1.max(cx)],
        });
    }
    if let Some([y0, y1, x0, x1]) = bbox {
        let (y0, x0) = (y0.saturating_sub(cfg.pad), x0.saturating_sub(cfg.pad));
        let (y1, x1) = ((y1 + cfg.pad).min(h - 1), (x1 + cfg.pad).min(w - 1));
        for y in y0..=y1 {
            for x in x0..=x1 {
                weights[y * w + x] = cfg.w_fg;
            }
        }
    }
    weights
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransformerArch {
    /// Tokens per image, `l`.
    pub seq_len: usize,
    /// Condition tokens, `n`.
    pub keypoints: usize,
    pub codebook_size: usize,
    /// Model width `n_c`.
    pub width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
}

impl Default for TransformerArch {
    fn default() -> Self {
        Self {
            seq_len: 256,
            keypoints: 8,
            codebook_size: 256,
            width: 128,
            blocks: 4,
            heads: 4,
            ff_mult: 4,
        }
    }
}

impl TransformerArch {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.keypoints == 0 || self.codebook_size < 2 {
            return Err(Error::Config("transformer needs seq_len, keypoints >= 1 and codebook_size >= 2".into()));
        }
        if self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        Ok(())
    }

    pub fn total_len(&self) -> usize {
        2 * self.seq_len + self.keypoints
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Decoding policy for [`TransformerModel::generate`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Policy {
    Greedy,
    TopK { k: usize, temperature: f64 },
}

impl Default for Policy {
    fn default() -> Self {
        Policy::TopK { k: 5, temperature: 1.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationStep {
    pub position: usize,
    pub chosen: usize,
    /// Up to five most probable `(index, probability)` pairs of the
    /// constrained distribution.
    pub top: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    pub indices: Vec<usize>,
    pub trace: Vec<GenerationStep>,
}

/// One teacher-forced batch.
#[derive(Clone, Debug)]
pub struct Stage2Batch<'a> {
    pub sources: Vec<&'a [usize]>,
    pub poses: Vec<&'a PoseFrame>,
    pub targets: Vec<&'a [usize]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    /// `Σ w · −ln p(target)` over counted positions.
    pub weighted_sum: f64,
    /// `weighted_sum` divided by the total weight.
    pub mean: f64,
    /// Positions that entered the loss.
    pub counted: usize,
    /// Positions whose target lies outside the source bag.
    pub violations: usize,
    /// Counted positions where the constrained argmax equals the target.
    pub correct: usize,
}

impl LossReport {
    pub fn accuracy(&self) -> f64 {
        if self.counted == 0 {
            0.0
        } else {
            self.correct as f64 / self.counted as f64
        }
    }
}

#[derive(Clone, Debug)]
pub struct TransformerModel {
    pub arch: TransformerArch,
    pub store: ParamStore,
    pub pose: PoseEncoder,
    src_emb: ParamId,
    tgt_emb: ParamId,
    start: ParamId,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    mask: AttentionMask,
}

impl TransformerModel {
    pub fn new(arch: TransformerArch, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let (m, w) = (arch.codebook_size, arch.width);
        let mut store = ParamStore::new();
        let pose = PoseEncoder::new(&mut store, rng, arch.keypoints, w);
        let init = 0.05;
        let src_emb = store.add("tf.src_emb", uniform_init(rng, &[m, w], init));
        let tgt_emb = store.add("tf.tgt_emb", uniform_init(rng, &[m, w], init));
        let start = store.add("tf.start", uniform_init(rng, &[1, w], init));
        let pos = store.add("tf.pos", uniform_init(rng, &[arch.total_len(), w], init));
        let blocks = (0..arch.blocks)
            .map(|i| {
                let name = |s: &str| format!("tf.block{i}.{s}");
                Block {
                    ln1: LayerNorm::new(&mut store, &name("ln1"), w),
                    q: Linear::new(&mut store, rng, &name("q"), w, w),
                    k: Linear::new(&mut store, rng, &name("k"), w, w),
                    v: Linear::new(&mut store, rng, &name("v"), w, w),
                    o: Linear::new(&mut store, rng, &name("o"), w, w),
                    ln2: LayerNorm::new(&mut store, &name("ln2"), w),
                    fc1: Linear::new(&mut store, rng, &name("fc1"), w, arch.ff_mult * w),
                    fc2: Linear::new(&mut store, rng, &name("fc2"), arch.ff_mult * w, w),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "tf.ln_f", w);
        let head = Linear::new(&mut store, rng, "tf.head", w, m);
        let mask = build_attention_mask(arch.seq_len, arch.keypoints)?;
        Ok(Self {
            arch,
            store,
            pose,
            src_emb,
            tgt_emb,
            start,
            pos,
            blocks,
            ln_f,
            head,
            mask,
        })
    }

    pub fn src_emb_id(&self) -> ParamId {
        self.src_emb
    }

    pub fn tgt_emb_id(&self) -> ParamId {
        self.tgt_emb
    }

    pub fn start_id(&self) -> ParamId {
        self.start
    }

    pub fn mask(&self) -> &AttentionMask {
        &self.mask
    }

    fn check_indices(&self, what: &str, idx: &[usize]) -> Result<()> {
        if let Some(&bad) = idx.iter().find(|&&k| k >= self.arch.codebook_size) {
            return Err(Error::InvalidInput(format!(
                "{what} index {bad} outside [0, {})",
                self.arch.codebook_size
            )));
        }
        Ok(())
    }

    fn check_source(&self, source: &[usize]) -> Result<()> {
        if source.len() != self.arch.seq_len {
            return Err(Error::InvalidInput(format!(
                "source has {} tokens, model expects {}",
                source.len(),
                self.arch.seq_len
            )));
        }
        self.check_indices("source", source)
    }

    /// Logit rows `[B·slots, m]` for `B` samples that share a prefix length;
    /// `slots = min(prefix + 1, l)`. `cond` holds `B·n` condition rows.
    pub fn logits_graph(&self, g: &mut Graph, p: &Bound, sources: &[&[usize]], cond: Var, prefixes: &[&[usize]]) -> Var {
        let (l, n) = (self.arch.seq_len, self.arch.keypoints);
        let batch = sources.len();
        let slots = (prefixes[0].len() + 1).min(l);
        let len = l + n + slots;
        let mut parts = Vec::with_capacity(batch * 4);
        let start = p.var(self.start);
        for b in 0..batch {
            parts.push(g.gather_rows(p.var(self.src_emb), sources[b]));
            let rows: Vec<usize> = (b * n..(b + 1) * n).collect();
            parts.push(g.gather_rows(cond, &rows));
            parts.push(start);
            if slots > 1 {
                parts.push(g.gather_rows(p.var(self.tgt_emb), &prefixes[b][..slots - 1]));
            }
        }
        let x = g.concat_rows(&parts);
        let pos_rows: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let pos = g.gather_rows(p.var(self.pos), &pos_rows);
        let mut x = g.add(x, pos);
        let mask = Arc::new(self.mask.truncated(len));
        for blk in &self.blocks {
            let h = blk.ln1.forward(g, p, x);
            let q = blk.q.forward(g, p, h);
            let k = blk.k.forward(g, p, h);
            let v = blk.v.forward(g, p, h);
            let a = g.attention(q, k, v, batch, len, self.arch.heads, &mask);
            let a = blk.o.forward(g, p, a);
            x = g.add(x, a);
            let h = blk.ln2.forward(g, p, x);
            let h = blk.fc1.forward(g, p, h);
            let h = g.gelu(h);
            let h = blk.fc2.forward(g, p, h);
            x = g.add(x, h);
        }
        let out_rows: Vec<usize> = (0..batch)
            .flat_map(|b| (0..slots).map(move |j| b * len + l + n + j))
            .collect();
        let t = g.gather_rows(x, &out_rows);
        let t = self.ln_f.forward(g, p, t);
        self.head.forward(g, p, t)
    }

    /// Condition tokens of `pose` under this model's pose encoder.
    pub fn encode_condition(&self, pose: &PoseFrame) -> Result<ConditionSequence> {
        self.pose.encode(&self.store, pose)
    }

    fn check_cond(&self, cond: &ConditionSequence) -> Result<()> {
        if cond.n != self.arch.keypoints || cond.width != self.arch.width {
            return Err(Error::InvalidInput(format!(
                "condition is {}x{}, model expects {}x{}",
                cond.n, cond.width, self.arch.keypoints, self.arch.width
            )));
        }
        Ok(())
    }

    /// Logits `[min(prefix + 1, l), m]`; row `j` predicts target `j`.
    pub fn forward(&self, source: &[usize], cond: &ConditionSequence, prefix: &[usize]) -> Result<Tensor> {
        self.check_source(source)?;
        self.check_cond(cond)?;
        if prefix.len() > self.arch.seq_len {
            return Err(Error::InvalidInput(format!(
                "prefix of {} tokens exceeds l = {}",
                prefix.len(),
                self.arch.seq_len
            )));
        }
        self.check_indices("prefix", prefix)?;
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let c = g.constant(Tensor::new(&[cond.n, cond.width], cond.data.clone())?);
        let out = self.logits_graph(&mut g, &p, &[source], c, &[prefix]);
        Ok(g.value(out).clone())
    }

    fn check_batch(&self, batch: &Stage2Batch) -> Result<()> {
        if batch.sources.is_empty()
            || batch.sources.len() != batch.poses.len()
            || batch.sources.len() != batch.targets.len()
        {
            return Err(Error::InvalidInput("stage-2 batch parts differ in length or are empty".into()));
        }
        for (s, (t, pose)) in batch.sources.iter().zip(batch.targets.iter().zip(&batch.poses)) {
            self.check_source(s)?;
            if t.len() != self.arch.seq_len {
                return Err(Error::InvalidInput(format!("target has {} tokens", t.len())));
            }
            self.check_indices("target", t)?;
            self.pose.check(pose)?;
        }
        Ok(())
    }

    /// Builds the teacher-forced loss. The returned variable is the weighted
    /// mean, i.e. the weighted sum divided by the sum of the weights.
    pub fn loss_graph(
        &self,
        g: &mut Graph,
        p: &Bound,
        batch: &Stage2Batch,
        roi: Option<&RoiConfig>,
    ) -> Result<(Var, LossReport)> {
        self.check_batch(batch)?;
        let (l, m) = (self.arch.seq_len, self.arch.codebook_size);
        let side = (l as f64).sqrt().round() as usize;
        let grid = if side * side == l { (side, side) } else { (1, l) };
        let cond = self.pose.graph(g, p, &batch.poses);
        let logits = self.logits_graph(g, p, &batch.sources, cond, &batch.targets);
        let rows = batch.sources.len() * l;
        let mut allowed = Vec::with_capacity(rows * m);
        let mut weights = Vec::with_capacity(rows);
        let mut targets = Vec::with_capacity(rows);
        let mut report = LossReport::default();
        for b in 0..batch.sources.len() {
            let mask = source_mask(batch.sources[b], m);
            let w = match roi {
                Some(cfg) => roi_weights(batch.poses[b], grid, cfg),
                None => vec![1.0; l],
            };
            for j in 0..l {
                let t = batch.targets[b][j];
                if mask[t] {
                    weights.push(w[j]);
                    report.counted += 1;
                } else {
                    weights.push(0.0);
                    report.violations += 1;
                }
                targets.push(t);
                allowed.extend_from_slice(&mask);
            }
        }
        let ld = g.value(logits).data();
        for r in 0..rows {
            if weights[r] == 0.0 && !allowed[r * m + targets[r]] {
                continue;
            }
            let row = &ld[r * m..(r + 1) * m];
            let al = &allowed[r * m..(r + 1) * m];
            if argmax_allowed(row, al) == targets[r] {
                report.correct += 1;
            }
        }
        let ce = g.masked_cross_entropy(logits, &allowed, &targets, &weights);
        let total: f64 = weights.iter().sum();
        let loss = g.scale(ce, if total > 0.0 { 1.0 / total } else { 1.0 });
        report.weighted_sum = g.value(ce).item();
        report.mean = g.value(loss).item();
        Ok((loss, report))
    }

    /// Teacher-forced loss value; see [`LossReport`].
    pub fn training_loss(&self, batch: &Stage2Batch, roi: Option<&RoiConfig>) -> Result<LossReport> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        Ok(self.loss_graph(&mut g, &p, batch, roi)?.1)
    }

    /// Autoregressive decoding from the start token; every emitted index is
    /// drawn from the constrained distribution, hence lies in the source bag.
    pub fn generate(&self, source: &[usize], cond: &ConditionSequence, policy: Policy, rng: &mut impl Rng) -> Result<Generation> {
        self.check_source(source)?;
        self.check_cond(cond)?;
        if let Policy::TopK { k, temperature } = policy {
            if k == 0 || temperature.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
                return Err(Error::InvalidInput("top-k needs k >= 1 and temperature > 0".into()));
            }
        }
        let (l, m) = (self.arch.seq_len, self.arch.codebook_size);
        let mask = source_mask(source, m);
        let mut prefix: Vec<usize> = Vec::with_capacity(l);
        let mut trace = Vec::with_capacity(l);
        let mut g0 = Graph::new();
        let p0 = g0.bind(&self.store, false);
        let c = g0.constant(Tensor::new(&[cond.n, cond.width], cond.data.clone())?);
        for j in 0..l {
            // Reuse the bound parameters; truncate the tape back to them.
            let mut g = std::mem::take(&mut g0);
            let base = g.len();
            let out = self.logits_graph(&mut g, &p0, &[source], c, &[&prefix]);
            let row = &g.value(out).data()[j * m..(j + 1) * m];
            let constrained: Vec<f64> = row
                .iter()
                .zip(&mask)
                .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
                .collect();
            g.truncate(base);
            g0 = g;
            let (chosen, top) = pick(&constrained, policy, rng);
            trace.push(GenerationStep {
                position: j,
                chosen,
                top,
            });
            prefix.push(chosen);
        }
        Ok(Generation { indices: prefix, trace })
    }
}

fn argmax_allowed(row: &[f64], allowed: &[bool]) -> usize {
    let mut best = (usize::MAX, f64::NEG_INFINITY);
    for (k, (&v, &ok)) in row.iter().zip(allowed).enumerate() {
        if ok && (best.0 == usize::MAX || v > best.1) {
            best = (k, v);
        }
    }
    best.0
}

/// Indices of finite entries sorted by decreasing value, ties by index.
fn ranked(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).filter(|&k| v[k] > f64::NEG_INFINITY).collect();
    idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]).then(a.cmp(&b)));
    idx
}

fn pick(constrained: &[f64], policy: Policy, rng: &mut impl Rng) -> (usize, Vec<(usize, f64)>) {
    let order = ranked(constrained);
    match policy {
        Policy::Greedy => {
            let probs = softmax(constrained);
            let top = order.iter().take(5).map(|&k| (k, probs[k])).collect();
            (order[0], top)
        }
        Policy::TopK { k, temperature } => {
            let scaled: Vec<f64> = constrained.iter().map(|&v| v / temperature).collect();
            let probs = softmax(&scaled);
            let top = order.iter().take(5).map(|&i| (i, probs[i])).collect();
            let keep = &order[..k.min(order.len())];
            let z: f64 = keep.iter().map(|&i| probs[i]).sum();
            let mut u = rng.random::<f64>() * z;
            let mut chosen = keep[keep.len() - 1];
            for &i in keep {
                if u < probs[i] {
                    chosen = i;
                    break;
                }
                u -= probs[i];
            }
            (chosen, top)
        }
    }
}

#[cfg(test)]
mod tests;
