//! Quantizing image codec: conv encoder, learnable codebook, conv decoder,
//! and the patch discriminator used for the adversarial term.

mod loss;
mod train;

pub use loss::{stage1_losses, straight_through, vq_terms, LossWeights, Stage1Losses, VqTerms};
pub use train::{FramePairs, Stage1Config, Stage1Log, Stage1Trainer};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::metrics::FeatureNet;
use crate::nn::{uniform_init, Bound, Conv2d, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Architecture hyperparameters of the codec.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecArch {
    /// Square input side length in pixels.
    pub image_size: usize,
    /// Number of stride-2 downsampling stages `d`; latent side is `image_size / 2^d`.
    pub depth: usize,
    /// Conv widths per resolution level, finest first; length `depth + 1`.
    pub channels: Vec<usize>,
    /// Code vector dimension `c_q`.
    pub code_dim: usize,
    /// Number of codebook entries `m`.
    pub codebook_size: usize,
    /// Widths of the two stride-2 discriminator convs.
    pub disc_channels: [usize; 2],
}

impl Default for CodecArch {
    fn default() -> Self {
        Self {
            image_size: 64,
            depth: 2,
            channels: vec![32, 64, 64],
            code_dim: 64,
            codebook_size: 256,
            disc_channels: [32, 64],
        }
    }
}

impl CodecArch {
    pub fn latent_side(&self) -> usize {
        self.image_size >> self.depth
    }

    /// Sequence length `l = h · w` of one image.
    pub fn seq_len(&self) -> usize {
        self.latent_side() * self.latent_side()
    }

    pub fn validate(&self) -> Result<()> {
        if self.codebook_size < 2 || self.code_dim < 1 {
            return Err(Error::Config("need codebook_size >= 2 and code_dim >= 1".into()));
        }
        if self.channels.len() != self.depth + 1 {
            return Err(Error::Config(format!(
                "channels must list depth + 1 = {} widths",
                self.depth + 1
            )));
        }
        if self.depth == 0 || !self.image_size.is_multiple_of(1 << self.depth) {
            return Err(Error::Config(format!(
                "image_size {} not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        Ok(())
    }
}

/// Learnable `m × c_q` table of code vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    entries: Tensor,
}

impl Codebook {
    pub fn new(entries: Tensor) -> Result<Self> {
        if entries.shape().len() != 2 {
            return Err(Error::Shape("codebook must be m x c_q".into()));
        }
        let (m, c) = entries.rows_cols();
        if m < 2 || c < 1 {
            return Err(Error::InvalidInput(format!("codebook {m}x{c}: need m >= 2, c_q >= 1")));
        }
        if !entries.is_finite() {
            return Err(Error::InvalidInput("codebook has non-finite entries".into()));
        }
        Ok(Self { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.entries.dim(1)
    }

    pub fn entry(&self, k: usize) -> &[f64] {
        let c = self.dim();
        &self.entries.data()[k * c..(k + 1) * c]
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    /// Gathers entries for a list of indices into a flat `len × c_q` buffer.
    pub fn lookup(&self, indices: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(indices.len() * self.dim());
        for &k in indices {
            out.extend_from_slice(self.entry(k));
        }
        out
    }
}

/// Read access shared by every `h × w × c` feature grid.
pub trait FeatureGrid {
    fn dims(&self) -> (usize, usize, usize);
    fn values(&self) -> &[f64];

    fn pixel(&self, p: usize) -> &[f64] {
        let c = self.dims().2;
        &self.values()[p * c..(p + 1) * c]
    }
}

/// Continuous encoder output, row-major `h × w × c_q`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
}

impl LatentGrid {
    pub fn new(h: usize, w: usize, c: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != h * w * c {
            return Err(Error::Shape(format!(
                "latent grid {h}x{w}x{c} needs {} values, got {}",
                h * w * c,
                data.len()
            )));
        }
        Ok(Self { h, w, c, data })
    }

    pub fn len(&self) -> usize {
        self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl FeatureGrid for LatentGrid {
    fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

/// Encoder output snapped onto codebook entries.
#[derive(Clone, Debug, PartialEq)]
pub struct QuantizedGrid {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub data: Vec<f64>,
    pub indices: Vec<usize>,
}

impl QuantizedGrid {
    /// Rebuilds the grid from indices alone.
    pub fn from_indices(h: usize, w: usize, indices: Vec<usize>, codebook: &Codebook) -> Result<Self> {
        if indices.len() != h * w {
            return Err(Error::Shape(format!("{} indices for a {h}x{w} grid", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&k| k >= codebook.len()) {
            return Err(Error::InvalidInput(format!(
                "index {bad} outside codebook of size {}",
                codebook.len()
            )));
        }
        Ok(Self {
            h,
            w,
            c: codebook.dim(),
            data: codebook.lookup(&indices),
            indices,
        })
    }

    pub fn as_latent(&self) -> LatentGrid {
        LatentGrid {
            h: self.h,
            w: self.w,
            c: self.c,
            data: self.data.clone(),
        }
    }
}

impl FeatureGrid for QuantizedGrid {
    fn dims(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.c)
    }
    fn values(&self) -> &[f64] {
        &self.data
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest candidate (squared L2); earlier candidates win ties,
/// so candidates must be supplied in increasing index order.
pub(crate) fn nearest(v: &[f64], codebook: &Codebook, candidates: impl Iterator<Item = usize>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for k in candidates {
        let d = sq_dist(v, codebook.entry(k));
        match best {
            Some((_, bd)) if d >= bd => {}
            _ => best = Some((k, d)),
        }
    }
    best.map(|(k, _)| k)
}

/// Replaces every latent pixel with its nearest codebook entry.
pub fn quantize<G: FeatureGrid>(z: &G, codebook: &Codebook) -> Result<QuantizedGrid> {
    let (h, w, c) = z.dims();
    if c != codebook.dim() {
        return Err(Error::Shape(format!(
            "latent width {c} != code dim {}",
            codebook.dim()
        )));
    }
    let indices: Vec<usize> = (0..h * w)
        .map(|p| nearest(z.pixel(p), codebook, 0..codebook.len()).expect("codebook nonempty"))
        .collect();
    Ok(QuantizedGrid {
        h,
        w,
        c,
        data: codebook.lookup(&indices),
        indices,
    })
}

#[derive(Clone, Debug)]
struct Encoder {
    input: Conv2d,
    down: Vec<Conv2d>,
    mid: Vec<Conv2d>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct Decoder {
    input: Conv2d,
    mid: Vec<Conv2d>,
    up: Vec<Conv2d>,
    out: Conv2d,
}

#[derive(Clone, Debug)]
struct Discriminator {
    c1: Conv2d,
    c2: Conv2d,
    out: Conv2d,
}

const LEAK: f64 = 0.2;

/// Encoder `E`, decoder `G`, codebook `q`, discriminator `D` and the frozen
/// perceptual feature network.
#[derive(Clone, Debug)]
pub struct CodecModel {
    pub arch: CodecArch,
    /// Encoder, decoder and codebook parameters.
    pub gen: ParamStore,
    pub disc: ParamStore,
    pub perceptual: FeatureNet,
    codebook: ParamId,
    enc: Encoder,
    dec: Decoder,
    dsc: Discriminator,
}

impl CodecModel {
    pub fn new(arch: CodecArch, perceptual: FeatureNet, rng: &mut impl Rng) -> Result<Self> {
        arch.validate()?;
        let ch = &arch.channels;
        let d = arch.depth;
        let mut gen = ParamStore::new();
        let enc = Encoder {
            input: Conv2d::new(&mut gen, rng, "enc.in", 3, ch[0], 3, 1, 1),
            down: (0..d)
                .map(|i| Conv2d::new(&mut gen, rng, &format!("enc.down{i}"), ch[i], ch[i + 1], 4, 2, 1))
                .collect(),
            mid: (0..d)
                .map(|i| Conv2d::new(&mut gen, rng, &format!("enc.mid{i}"), ch[i + 1], ch[i + 1], 3, 1, 1))
                .collect(),
            out: Conv2d::new(&mut gen, rng, "enc.out", ch[d], arch.code_dim, 1, 1, 0),
        };
        let dec = Decoder {
            input: Conv2d::new(&mut gen, rng, "dec.in", arch.code_dim, ch[d], 3, 1, 1),
            mid: (0..d)
                .map(|i| {
                    let c = ch[d - i];
                    Conv2d::new(&mut gen, rng, &format!("dec.mid{i}"), c, c, 3, 1, 1)
                })
                .collect(),
            up: (0..d)
                .map(|i| Conv2d::new(&mut gen, rng, &format!("dec.up{i}"), ch[d - i], ch[d - i - 1], 3, 1, 1))
                .collect(),
            out: Conv2d::new(&mut gen, rng, "dec.out", ch[0], 3, 3, 1, 1),
        };
        let codebook = gen.add(
            "codebook",
            uniform_init(rng, &[arch.codebook_size, arch.code_dim], 1.0 / arch.codebook_size as f64),
        );
        let mut disc = ParamStore::new();
        let [d1, d2] = arch.disc_channels;
        let dsc = Discriminator {
            c1: Conv2d::new(&mut disc, rng, "disc.c1", 3, d1, 4, 2, 1),
            c2: Conv2d::new(&mut disc, rng, "disc.c2", d1, d2, 4, 2, 1),
            out: Conv2d::new(&mut disc, rng, "disc.out", d2, 1, 3, 1, 1),
        };
        Ok(Self {
            arch,
            gen,
            disc,
            perceptual,
            codebook,
            enc,
            dec,
            dsc,
        })
    }

    pub fn codebook_id(&self) -> ParamId {
        self.codebook
    }

    pub fn codebook(&self) -> Codebook {
        Codebook {
            entries: self.gen.get(self.codebook).clone(),
        }
    }

    pub fn set_codebook_entry(&mut self, k: usize, v: &[f64]) {
        let c = self.arch.code_dim;
        self.gen.get_mut(self.codebook).data_mut()[k * c..(k + 1) * c].copy_from_slice(v);
    }

    /// `x: [b, 3, H, W]` → latent rows `[b·h·w, c_q]`, row-major per image.
    pub fn encoder_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = self.enc.input.forward(g, p, x);
        h = g.leaky_relu(h, LEAK);
        for (down, mid) in self.enc.down.iter().zip(&self.enc.mid) {
            h = down.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
            h = mid.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
        }
        let z = self.enc.out.forward(g, p, h);
        g.nchw_to_rows(z)
    }

    /// Latent rows `[b·h·w, c_q]` → images `[b, 3, H, W]` (unclamped).
    pub fn decoder_graph(&self, g: &mut Graph, p: &Bound, rows: Var, batch: usize) -> Var {
        let s = self.arch.latent_side();
        let z = g.rows_to_nchw(rows, [batch, self.arch.code_dim, s, s]);
        let mut h = self.dec.input.forward(g, p, z);
        h = g.leaky_relu(h, LEAK);
        for (mid, up) in self.dec.mid.iter().zip(&self.dec.up) {
            h = mid.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
            h = g.upsample2x(h);
            h = up.forward(g, p, h);
            h = g.leaky_relu(h, LEAK);
        }
        self.dec.out.forward(g, p, h)
    }

    /// Patch logits `[b, 1, H/4, W/4]`.
    pub fn discriminator_graph(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let mut h = self.dsc.c1.forward(g, p, x);
        h = g.leaky_relu(h, LEAK);
        h = self.dsc.c2.forward(g, p, h);
        h = g.leaky_relu(h, LEAK);
        self.dsc.out.forward(g, p, h)
    }

    fn check_image(&self, image: &Image) -> Result<()> {
        let s = self.arch.image_size;
        if image.height() != s || image.width() != s {
            return Err(Error::InvalidInput(format!(
                "image is {}x{}, codec expects {s}x{s}",
                image.height(),
                image.width()
            )));
        }
        Ok(())
    }

    /// Encodes a batch of images into latent grids.
    pub fn encode_batch(&self, images: &[&Image]) -> Result<Vec<LatentGrid>> {
        for img in images {
            self.check_image(img)?;
        }
        let mut g = Graph::new();
        let p = g.bind(&self.gen, false);
        let x = g.constant(Image::batch_tensor(images)?);
        let rows = self.encoder_graph(&mut g, &p, x);
        let s = self.arch.latent_side();
        let per = s * s * self.arch.code_dim;
        Ok(g.value(rows)
            .data()
            .chunks(per)
            .map(|chunk| LatentGrid {
                h: s,
                w: s,
                c: self.arch.code_dim,
                data: chunk.to_vec(),
            })
            .collect())
    }

    pub fn encode(&self, image: &Image) -> Result<LatentGrid> {
        Ok(self.encode_batch(&[image])?.remove(0))
    }

    /// Decodes feature grids into images clamped to `[0, 1]`.
    pub fn decode_batch<G: FeatureGrid>(&self, grids: &[&G]) -> Result<Vec<Image>> {
        let s = self.arch.latent_side();
        let mut data = Vec::new();
        for grid in grids {
            let dims = grid.dims();
            if dims != (s, s, self.arch.code_dim) {
                return Err(Error::Shape(format!(
                    "grid {dims:?} does not match codec latent {s}x{s}x{}",
                    self.arch.code_dim
                )));
            }
            data.extend_from_slice(grid.values());
        }
        if grids.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let p = g.bind(&self.gen, false);
        let rows = g.constant(Tensor::new(&[grids.len() * s * s, self.arch.code_dim], data)?);
        let out = self.decoder_graph(&mut g, &p, rows, grids.len());
        let size = self.arch.image_size;
        g.value(out)
            .data()
            .chunks(3 * size * size)
            .map(|chw| Image::from_chw(size, size, chw))
            .collect()
    }

    pub fn decode<G: FeatureGrid>(&self, grid: &G) -> Result<Image> {
        Ok(self.decode_batch(&[grid])?.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn micro_arch() -> CodecArch {
        CodecArch {
            image_size: 8,
            depth: 2,
            channels: vec![4, 4, 4],
            code_dim: 3,
            codebook_size: 4,
            disc_channels: [4, 4],
        }
    }

    fn codebook(rows: &[[f64; 2]]) -> Codebook {
        Codebook::new(Tensor::new(&[rows.len(), 2], rows.iter().flatten().copied().collect()).unwrap()).unwrap()
    }

    #[test]
    fn quantize_exact_match_and_tie_rule() {
        let cb = codebook(&[[9.0, 9.0], [5.0, 5.0], [1.0, 0.0], [3.0, 3.0], [-1.0, 0.0]]);
        let z = LatentGrid::new(1, 2, 2, vec![5.0, 5.0, 0.0, 0.0]).unwrap();
        let q = quantize(&z, &cb).unwrap();
        assert_eq!(q.indices, vec![1, 2]);
        assert_eq!(&q.data[..2], &[5.0, 5.0]);
    }

    use proptest::prelude::*;

    fn small_ints(len: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec((-3i32..=3).prop_map(f64::from), len)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn quantize_picks_first_minimum((m, cells, table, z) in (2usize..8, 1usize..6)
            .prop_flat_map(|(m, cells)| (Just(m), Just(cells), small_ints(m * 2), small_ints(cells * 2))))
        {
            let cb = Codebook::new(Tensor::new(&[m, 2], table.clone()).unwrap()).unwrap();
            let grid = LatentGrid::new(1, cells, 2, z.clone()).unwrap();
            let q = quantize(&grid, &cb).unwrap();
            for (p, &k) in q.indices.iter().enumerate() {
                let d = |j: usize| (0..2).map(|c| (z[p * 2 + c] - table[j * 2 + c]).powi(2)).sum::<f64>();
                let best = (0..m).map(d).fold(f64::INFINITY, f64::min);
                let first = (0..m).find(|&j| d(j) == best).unwrap();
                prop_assert_eq!(k, first);
                prop_assert_eq!(&q.data[p * 2..p * 2 + 2], cb.entry(k));
            }
        }
    }

    #[test]
    fn quantize_rejects_width_mismatch() {
        let cb = codebook(&[[0.0, 0.0], [1.0, 1.0]]);
        let z = LatentGrid::new(1, 1, 3, vec![0.0; 3]).unwrap();
        assert!(matches!(quantize(&z, &cb), Err(Error::Shape(_))));
    }

    #[test]
    fn codebook_rejects_degenerate_tables() {
        assert!(Codebook::new(Tensor::zeros(&[1, 2])).is_err());
        assert!(Codebook::new(Tensor::new(&[2, 1], vec![0.0, f64::NAN]).unwrap()).is_err());
    }

    fn model(arch: CodecArch) -> CodecModel {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let fnet = FeatureNet::new(arch.image_size, 2, &mut rng);
        CodecModel::new(arch, fnet, &mut rng).unwrap()
    }

    #[test]
    fn encode_decode_shapes() {
        let arch = CodecArch {
            image_size: 64,
            depth: 2,
            channels: vec![4, 4, 4],
            code_dim: 64,
            codebook_size: 8,
            disc_channels: [4, 4],
        };
        let m = model(arch);
        let img = Image::filled(64, 64, [0.0; 3]);
        let z = m.encode(&img).unwrap();
        assert_eq!((z.h, z.w, z.c), (16, 16, 64));
        assert!(z.data.iter().all(|v| v.is_finite()));
        assert_eq!(m.encode(&img).unwrap(), z);
        let x = m.decode(&z).unwrap();
        assert_eq!((x.height(), x.width()), (64, 64));
        assert!(x.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(m.decode(&z).unwrap(), x);
    }

    #[test]
    fn encode_rejects_wrong_size() {
        let m = model(micro_arch());
        assert!(matches!(
            m.encode(&Image::filled(6, 8, [0.0; 3])),
            Err(Error::InvalidInput(_))
        ));
        let bad = LatentGrid::new(3, 3, 3, vec![0.0; 27]).unwrap();
        assert!(matches!(m.decode(&bad), Err(Error::Shape(_))));
    }

    #[test]
    fn arch_validation() {
        let mut a = micro_arch();
        a.image_size = 10;
        assert!(a.validate().is_err());
        let mut a = micro_arch();
        a.channels.pop();
        assert!(a.validate().is_err());
    }
}
