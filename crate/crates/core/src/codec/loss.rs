//! Stage-1 objective: patchwork reconstruction in both directions,
//! codebook and commitment terms, perceptual distance and hinge GAN terms.

use serde::{Deserialize, Serialize};

use super::{nearest, Codebook, CodecModel, LatentGrid};
use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::nn::Bound;
use crate::scrabble::{scrabble_indices, Bag};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Commitment coefficient β.
    pub beta: f64,
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            beta: 0.25,
            perceptual: 0.2,
            adversarial: 0.1,
        }
    }
}

/// Scalar values of every stage-1 term. `total` is the generator objective
/// actually optimized (adversarial term included only when active).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Stage1Losses {
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub discriminator: f64,
    pub total: f64,
}

impl Stage1Losses {
    pub fn components(&self) -> [(&'static str, f64); 7] {
        [
            ("reconstruction", self.reconstruction),
            ("codebook", self.codebook),
            ("commitment", self.commitment),
            ("perceptual", self.perceptual),
            ("adversarial", self.adversarial),
            ("discriminator", self.discriminator),
            ("total", self.total),
        ]
    }

    pub(crate) fn check_finite(&self, step: u64) -> Result<()> {
        let bad: Vec<String> = self
            .components()
            .iter()
            .filter(|(_, v)| !v.is_finite())
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Divergence {
                step,
                detail: format!("non-finite stage-1 loss: {}", bad.join(", ")),
            })
        }
    }
}

/// `gather(codebook, indices) + (z_ref − sg(z_ref))`: forward value equals
/// the selected entries exactly; the upstream gradient reaches both the
/// selected entries and `z_ref` unchanged.
pub fn straight_through(g: &mut Graph, z_ref: Var, codebook: Var, indices: &[usize]) -> Var {
    let q = g.gather_rows(codebook, indices);
    let sg = g.detach(z_ref);
    let delta = g.sub(z_ref, sg);
    g.add(q, delta)
}

pub struct VqTerms {
    /// `mean ‖sg(z) − q‖²`, per latent pixel.
    pub codebook_loss: Var,
    /// `β · mean ‖z − sg(q)‖²`.
    pub commitment: Var,
    pub indices: Vec<usize>,
}

/// Quantizes the rows of `z: [N, c_q]` against `frozen` and builds the
/// codebook and commitment terms. `codebook` is the graph variable holding
/// the same entries as `frozen`; stop-gradient operands are read from
/// `frozen`, which lets a finite-difference check perturb `codebook` alone.
pub fn vq_terms(g: &mut Graph, z: Var, codebook: Var, frozen: &Codebook, beta: f64) -> VqTerms {
    let (n, c) = g.value(z).rows_cols();
    let indices: Vec<usize> = {
        let zd = g.value(z).data();
        (0..n)
            .map(|r| nearest(&zd[r * c..(r + 1) * c], frozen, 0..frozen.len()).expect("nonempty codebook"))
            .collect()
    };
    let q = g.gather_rows(codebook, &indices);
    let zs = g.detach(z);
    let d = g.sub(zs, q);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    let codebook_loss = g.scale(s, 1.0 / n as f64);
    let qf = g.constant(Tensor::new(&[n, c], frozen.lookup(&indices)).unwrap());
    let d = g.sub(z, qf);
    let sq = g.mul(d, d);
    let s = g.sum(sq);
    let commitment = g.scale(s, beta / n as f64);
    VqTerms {
        codebook_loss,
        commitment,
        indices,
    }
}

fn l1_mean(g: &mut Graph, a: Var, b: Var) -> Var {
    let d = g.sub(a, b);
    let d = g.abs(d);
    g.mean(d)
}

/// One generator forward pass over a batch of frame pairs.
pub(crate) struct Stage1Pass {
    pub g: Graph,
    pub params: Bound,
    pub total: Var,
    pub losses: Stage1Losses,
    /// Decoder outputs `[2b, 3, H, W]` ordered `[x̂_t.., x̂_s..]`.
    pub fakes: Tensor,
    /// Matching targets `[x_t.., x_s..]`.
    pub reals: Tensor,
    /// Encoder rows `[2b·l, c_q]` ordered `[z_s.., z_t..]`.
    pub latents: Tensor,
    /// Direct quantization indices, same order as `latents`.
    pub indices: Vec<usize>,
}

/// Patchwork indices for every pair in both directions, plus the matching
/// reference-row permutation. Output order: `[ẑ_t.., ẑ_s..]`.
fn patchwork_plan(latents: &Tensor, indices: &[usize], codebook: &Codebook, b: usize, side: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    let l = side * side;
    let c = codebook.dim();
    let zd = latents.data();
    let mut perm = Vec::with_capacity(2 * b * l);
    let mut patch = Vec::with_capacity(2 * b * l);
    for (ref_img, bag_img) in (0..b).map(|i| (b + i, i)).chain((0..b).map(|i| (i, b + i))) {
        let bag = Bag::from_indices(indices[bag_img * l..(bag_img + 1) * l].iter().copied(), codebook, (side, side))?;
        let z_ref = LatentGrid::new(side, side, c, zd[ref_img * l * c..(ref_img + 1) * l * c].to_vec())?;
        patch.extend(scrabble_indices(&z_ref, &bag, codebook));
        perm.extend(ref_img * l..(ref_img + 1) * l);
    }
    Ok((perm, patch))
}

pub(crate) fn stage1_pass(
    model: &CodecModel,
    xs: &[&Image],
    xt: &[&Image],
    w: &LossWeights,
    adversarial: bool,
) -> Result<Stage1Pass> {
    if xs.is_empty() || xs.len() != xt.len() {
        return Err(Error::InvalidInput(format!(
            "need matching nonempty source/target batches, got {} and {}",
            xs.len(),
            xt.len()
        )));
    }
    for img in xs.iter().chain(xt) {
        model.check_image(img)?;
    }
    let b = xs.len();
    let side = model.arch.latent_side();
    let inputs: Vec<&Image> = xs.iter().chain(xt).copied().collect();
    let targets: Vec<&Image> = xt.iter().chain(xs).copied().collect();
    let mut g = Graph::new();
    let params = g.bind(&model.gen, true);
    let x = g.constant(Image::batch_tensor(&inputs)?);
    let z = model.encoder_graph(&mut g, &params, x);
    let frozen = model.codebook();
    let cb = params.var(model.codebook_id());
    let vq = vq_terms(&mut g, z, cb, &frozen, w.beta);
    let latents = g.value(z).clone();
    let (perm, patch) = patchwork_plan(&latents, &vq.indices, &frozen, b, side)?;
    let z_ref = g.gather_rows(z, &perm);
    let st = straight_through(&mut g, z_ref, cb, &patch);
    let out = model.decoder_graph(&mut g, &params, st, 2 * b);
    let reals = Image::batch_tensor(&targets)?;
    let tgt = g.constant(reals.clone());
    let recon = l1_mean(&mut g, out, tgt);

    let pf = g.bind(&model.perceptual.store, false);
    let fake_acts = model.perceptual.graph(&mut g, &pf, out);
    let real_acts = model.perceptual.graph(&mut g, &pf, tgt);
    let mut perceptual = None;
    for (&fm, &rm) in fake_acts.maps.iter().zip(&real_acts.maps) {
        let term = l1_mean(&mut g, fm, rm);
        perceptual = Some(match perceptual {
            None => term,
            Some(acc) => g.add(acc, term),
        });
    }
    let perceptual = perceptual.expect("feature net has conv maps");

    let mut total = g.add(recon, vq.codebook_loss);
    total = g.add(total, vq.commitment);
    let wp = g.scale(perceptual, w.perceptual);
    total = g.add(total, wp);
    let mut adv_value = 0.0;
    if adversarial {
        let pd = g.bind(&model.disc, false);
        let logits = model.discriminator_graph(&mut g, &pd, out);
        let m = g.mean(logits);
        let adv = g.scale(m, -1.0);
        adv_value = g.value(adv).item();
        let wa = g.scale(adv, w.adversarial);
        total = g.add(total, wa);
    }
    let losses = Stage1Losses {
        reconstruction: g.value(recon).item(),
        codebook: g.value(vq.codebook_loss).item(),
        commitment: g.value(vq.commitment).item(),
        perceptual: g.value(perceptual).item(),
        adversarial: adv_value,
        discriminator: 0.0,
        total: g.value(total).item(),
    };
    let fakes = g.value(out).clone();
    Ok(Stage1Pass {
        g,
        params,
        total,
        losses,
        fakes,
        reals,
        latents,
        indices: vq.indices,
    })
}

/// Hinge loss `mean relu(1 − D(x)) + mean relu(1 + D(x̂))` with trainable
/// discriminator parameters.
pub(crate) fn discriminator_pass(model: &CodecModel, reals: &Tensor, fakes: &Tensor) -> (Graph, Bound, Var) {
    let mut g = Graph::new();
    let p = g.bind(&model.disc, true);
    let r = g.constant(reals.clone());
    let f = g.constant(fakes.clone());
    let dr = model.discriminator_graph(&mut g, &p, r);
    let df = model.discriminator_graph(&mut g, &p, f);
    let nr = g.scale(dr, -1.0);
    let nr = g.add_scalar(nr, 1.0);
    let hr = g.relu(nr);
    let lr = g.mean(hr);
    let pf = g.add_scalar(df, 1.0);
    let hf = g.relu(pf);
    let lf = g.mean(hf);
    let loss = g.add(lr, lf);
    (g, p, loss)
}

/// Evaluates every stage-1 term (adversarial terms included) for source and
/// target frames drawn from the same sequences.
pub fn stage1_losses(model: &CodecModel, xs: &[&Image], xt: &[&Image], w: &LossWeights) -> Result<Stage1Losses> {
    let pass = stage1_pass(model, xs, xt, w, true)?;
    let (g, _, d) = discriminator_pass(model, &pass.reals, &pass.fakes);
    let mut losses = pass.losses;
    losses.discriminator = g.value(d).item();
    losses.check_finite(0)?;
    Ok(losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::tests::micro_arch;
    use crate::metrics::FeatureNet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noise_image(rng: &mut impl Rng, s: usize) -> Image {
        Image::new(s, s, (0..s * s * 3).map(|_| rng.random_range(0.0..1.0)).collect()).unwrap()
    }

    fn micro_model(rng: &mut ChaCha8Rng) -> CodecModel {
        let arch = micro_arch();
        let feat = FeatureNet::new(arch.image_size, 2, rng);
        CodecModel::new(arch, feat, rng).unwrap()
    }

    #[test]
    fn straight_through_copies_upstream_gradient() {
        let mut g = Graph::new();
        let z = g.param(Tensor::new(&[1, 3], vec![0.3, -0.2, 0.9]).unwrap());
        let cb = g.param(Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap());
        let st = straight_through(&mut g, z, cb, &[1]);
        assert_eq!(g.value(st).data(), &[1.0, 1.0, 1.0]);
        let upstream = Tensor::new(&[1, 3], vec![0.5, -2.0, 7.0]).unwrap();
        let grads = g.backward_with(st, upstream.clone());
        assert_eq!(grads.get(z).unwrap().data(), upstream.data());
        assert_eq!(grads.get(cb).unwrap().data(), &[0.0, 0.0, 0.0, 0.5, -2.0, 7.0]);
    }

    #[test]
    fn commitment_matches_formula_on_single_pixel() {
        let frozen = Codebook::new(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 1.0]).unwrap()).unwrap();
        let mut g = Graph::new();
        let z = g.param(Tensor::new(&[1, 2], vec![1.0, 2.0]).unwrap());
        let cb = g.param(frozen.entries().clone());
        let vq = vq_terms(&mut g, z, cb, &frozen, 0.25);
        assert_eq!(vq.indices, vec![1]);
        // ‖(1,2) − (1,1)‖² = 1
        assert!((g.value(vq.commitment).item() - 0.25).abs() < 1e-15);
        assert!((g.value(vq.codebook_loss).item() - 1.0).abs() < 1e-15);
        let mut grads = g.backward(vq.commitment);
        assert_eq!(grads.take(z).unwrap().data(), &[0.0, 0.5]);
        assert!(grads.get(cb).is_none());
    }

    /// Reconstruction through the decoder plus codebook and commitment terms
    /// on a 2×2 latent grid with m = 4, differentiated w.r.t. the codebook.
    fn codebook_objective(model: &CodecModel, x: &Image, live: Tensor, frozen: &Codebook) -> (f64, Tensor) {
        let mut g = Graph::new();
        let p = g.bind(&model.gen, false);
        let xin = g.constant(Image::batch_tensor(&[x]).unwrap());
        let z = model.encoder_graph(&mut g, &p, xin);
        let cb = g.param(live);
        let vq = vq_terms(&mut g, z, cb, frozen, 0.25);
        let st = straight_through(&mut g, z, cb, &vq.indices);
        let out = model.decoder_graph(&mut g, &p, st, 1);
        let tgt = g.constant(Image::batch_tensor(&[x]).unwrap());
        let recon = l1_mean(&mut g, out, tgt);
        let mut total = g.add(recon, vq.codebook_loss);
        total = g.add(total, vq.commitment);
        let value = g.value(total).item();
        let mut grads = g.backward(total);
        (value, grads.take(cb).unwrap())
    }

    #[test]
    fn codebook_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let model = micro_model(&mut rng);
        assert_eq!(model.arch.latent_side(), 2);
        let x = noise_image(&mut rng, 8);
        // Spread entries so every entry sits near some latent pixel.
        let z = model.encode(&x).unwrap();
        let mut entries = z.data.clone();
        for v in entries.iter_mut() {
            *v += rng.random_range(-0.05..0.05);
        }
        let frozen = Codebook::new(Tensor::new(&[4, 3], entries).unwrap()).unwrap();
        let (_, analytic) = codebook_objective(&model, &x, frozen.entries().clone(), &frozen);
        let eps = 1e-6;
        let mut worst: f64 = 0.0;
        for i in 0..frozen.entries().numel() {
            let mut plus = frozen.entries().clone();
            plus.data_mut()[i] += eps;
            let mut minus = frozen.entries().clone();
            minus.data_mut()[i] -= eps;
            let fp = codebook_objective(&model, &x, plus, &frozen).0;
            let fm = codebook_objective(&model, &x, minus, &frozen).0;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic.data()[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            worst = worst.max(rel);
        }
        assert!(worst <= 1e-3, "worst relative error {worst}");
    }

    #[test]
    fn all_terms_finite_and_hinge_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let model = micro_model(&mut rng);
        let a = noise_image(&mut rng, 8);
        let b = noise_image(&mut rng, 8);
        let losses = stage1_losses(&model, &[&a, &b], &[&b, &a], &LossWeights::default()).unwrap();
        for (name, v) in losses.components() {
            assert!(v.is_finite(), "{name}");
        }
        assert!(losses.discriminator >= 0.0);
        assert!(losses.reconstruction >= 0.0 && losses.perceptual >= 0.0);
    }

    #[test]
    fn patchwork_plan_uses_the_other_frame_bag() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let model = micro_model(&mut rng);
        let a = noise_image(&mut rng, 8);
        let c = noise_image(&mut rng, 8);
        let pass = stage1_pass(&model, &[&a], &[&c], &LossWeights::default(), false).unwrap();
        let (_, patch) = patchwork_plan(&pass.latents, &pass.indices, &model.codebook(), 1, 2).unwrap();
        let (src, tgt) = pass.indices.split_at(4);
        assert!(patch[..4].iter().all(|k| src.contains(k)));
        assert!(patch[4..].iter().all(|k| tgt.contains(k)));
    }

    #[test]
    fn mismatched_batches_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = micro_model(&mut rng);
        let a = noise_image(&mut rng, 8);
        assert!(stage1_losses(&model, &[&a], &[], &LossWeights::default()).is_err());
        let big = noise_image(&mut rng, 16);
        assert!(stage1_losses(&model, &[&big], &[&big], &LossWeights::default()).is_err());
    }
}
