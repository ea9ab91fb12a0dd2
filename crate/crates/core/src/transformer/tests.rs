use super::*;
use crate::codec::Codebook;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub(crate) fn micro_arch() -> TransformerArch {
    TransformerArch {
        seq_len: 4,
        keypoints: 2,
        codebook_size: 8,
        width: 8,
        blocks: 1,
        heads: 2,
        ff_mult: 2,
    }
}

fn pose2(a: [f64; 2], b: [f64; 2]) -> PoseFrame {
    PoseFrame::new(vec![a, b]).unwrap()
}

fn codebook(m: usize) -> Codebook {
    Codebook::new(Tensor::new(&[m, 1], (0..m).map(|k| k as f64).collect()).unwrap()).unwrap()
}

#[test]
fn mask_small_example() {
    let m = build_attention_mask(2, 1).unwrap();
    let rows: Vec<String> = (0..5)
        .map(|i| (0..5).map(|j| if m.get(i, j) { '1' } else { '0' }).collect())
        .collect();
    assert_eq!(rows, ["11100", "11100", "11100", "11110", "11111"]);
    assert!(build_attention_mask(0, 1).is_err());
}

#[test]
fn mask_blocks_and_row_sums_for_random_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for _ in 0..20 {
        let l = rng.random_range(1..=64);
        let n = rng.random_range(1..=16);
        let m = build_attention_mask(l, n).unwrap();
        let ctx = l + n;
        for i in 0..m.size() {
            let sum = m.row(i).iter().filter(|&&b| b).count();
            if i < ctx {
                assert_eq!(sum, ctx);
                assert!((ctx..m.size()).all(|j| !m.get(i, j)), "block B");
            } else {
                assert_eq!(sum, ctx + (i - ctx) + 1);
            }
        }
    }
}

#[test]
fn constrain_and_softmax_examples() {
    let bag = Bag::from_indices([0, 2], &codebook(4), (1, 2)).unwrap();
    let c = constrain_logits(&[1.0, 2.0, 3.0, 4.0], &bag);
    assert_eq!(c, vec![1.0, f64::NEG_INFINITY, 3.0, f64::NEG_INFINITY]);
    let p = softmax(&c);
    let z = 1f64.exp() + 3f64.exp();
    assert_eq!(p[1], 0.0);
    assert_eq!(p[3], 0.0);
    assert!((p[0] - 1f64.exp() / z).abs() < 1e-15 && (p[0] - 0.119).abs() < 1e-3);
    assert!((p[2] - 3f64.exp() / z).abs() < 1e-15 && (p[2] - 0.881).abs() < 1e-3);
    let full = Bag::from_indices(0..4, &codebook(4), (2, 2)).unwrap();
    assert_eq!(constrain_logits(&[1.0, 2.0, 3.0, 4.0], &full), vec![1.0, 2.0, 3.0, 4.0]);
}

#[test]
fn roi_examples() {
    let cfg = RoiConfig::default();
    let none = PoseFrame::new(vec![crate::condition::OCCLUDED; 3]).unwrap();
    assert_eq!(roi_weights(&none, (4, 4), &cfg), vec![1.0; 16]);
    let full = pose2([0.0, 0.0], [1.0, 1.0]);
    assert_eq!(roi_weights(&full, (4, 4), &cfg), vec![5.0; 16]);
    let center = PoseFrame::new(vec![[0.5, 0.5]]).unwrap();
    let w = roi_weights(&center, (4, 4), &cfg);
    for y in 0..4 {
        for x in 0..4 {
            let inside = (1..=3).contains(&y) && (1..=3).contains(&x);
            assert_eq!(w[y * 4 + x], if inside { 5.0 } else { 1.0 }, "cell ({y},{x})");
        }
    }
}

fn micro_model(seed: u64) -> TransformerModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    TransformerModel::new(micro_arch(), &mut rng).unwrap()
}

#[test]
fn forward_shapes_and_validation() {
    let model = micro_model(1);
    let cond = model.encode_condition(&pose2([0.2, 0.3], [0.5, 0.5])).unwrap();
    let src = [1, 2, 3, 1];
    assert_eq!(model.forward(&src, &cond, &[]).unwrap().shape(), &[1, 8]);
    assert_eq!(model.forward(&src, &cond, &[1, 2]).unwrap().shape(), &[3, 8]);
    assert_eq!(model.forward(&src, &cond, &[1, 2, 3, 1]).unwrap().shape(), &[4, 8]);
    assert!(model.forward(&[1, 2, 3, 8], &cond, &[]).is_err());
    assert!(model.forward(&src, &cond, &[9]).is_err());
    assert!(model.forward(&src[..3], &cond, &[]).is_err());
}

#[test]
fn causality_is_exact() {
    let model = micro_model(2);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cond = model.encode_condition(&pose2([0.1, 0.9], [0.6, 0.4])).unwrap();
    for _ in 0..30 {
        let src: Vec<usize> = (0..4).map(|_| rng.random_range(0..8)).collect();
        let prefix: Vec<usize> = (0..4).map(|_| rng.random_range(0..8)).collect();
        let base = model.forward(&src, &cond, &prefix).unwrap();
        let j = rng.random_range(0..4);
        let mut changed = prefix.clone();
        changed[j] = (changed[j] + 1 + rng.random_range(0..7)) % 8;
        let out = model.forward(&src, &cond, &changed).unwrap();
        for r in 0..=j.min(3) {
            assert_eq!(base.data()[r * 8..(r + 1) * 8], out.data()[r * 8..(r + 1) * 8], "row {r}, perturbed {j}");
        }
    }
}

#[test]
fn source_and_start_token_influence_predictions() {
    let mut model = micro_model(4);
    let cond = model.encode_condition(&pose2([0.1, 0.2], [0.3, 0.4])).unwrap();
    let base = model.forward(&[1, 2, 3, 4], &cond, &[5, 6, 7]).unwrap();
    let other = model.forward(&[1, 2, 0, 4], &cond, &[5, 6, 7]).unwrap();
    assert_ne!(base, other);
    let first = model.forward(&[1, 2, 3, 4], &cond, &[]).unwrap();
    let start = model.start_id();
    model.store.get_mut(start).data_mut()[0] += 0.5;
    let moved = model.forward(&[1, 2, 3, 4], &cond, &[]).unwrap();
    assert_ne!(first, moved);
}

fn triplet_batch<'a>(src: &'a [usize], pose: &'a PoseFrame, tgt: &'a [usize]) -> Stage2Batch<'a> {
    Stage2Batch {
        sources: vec![src],
        poses: vec![pose],
        targets: vec![tgt],
    }
}

#[test]
fn uniform_logits_give_log_bag_size_and_roi_is_linear() {
    let mut model = micro_model(5);
    let head_w = model.store.find("tf.head.w").unwrap();
    model.store.get_mut(head_w).data_mut().fill(0.0);
    let pose = pose2([0.3, 0.3], crate::condition::OCCLUDED);
    let src = [1, 2, 3, 1];
    let tgt = [3, 3, 1, 2];
    let r = model.training_loss(&triplet_batch(&src, &pose, &tgt), None).unwrap();
    assert_eq!(r.counted, 4);
    assert!((r.weighted_sum / 4.0 - 3f64.ln()).abs() < 1e-12);
    let roi = RoiConfig { w_fg: 5.0, pad: 0 };
    let a = model.training_loss(&triplet_batch(&src, &pose, &tgt), Some(&roi)).unwrap();
    // A pose covering the grid puts every cell at w_fg, so doubling w_fg
    // doubles every weight.
    let cover = pose2([0.0, 0.0], [1.0, 1.0]);
    let a_full = model.training_loss(&triplet_batch(&src, &cover, &tgt), Some(&roi)).unwrap();
    let doubled = RoiConfig { w_fg: 10.0, pad: 0 };
    let b_full = model.training_loss(&triplet_batch(&src, &cover, &tgt), Some(&doubled)).unwrap();
    assert!((b_full.weighted_sum - 2.0 * a_full.weighted_sum).abs() < 1e-12);
    assert!((b_full.mean - a_full.mean).abs() < 1e-12);
    assert!((r.mean - 3f64.ln()).abs() < 1e-12);
    assert!(a.weighted_sum > r.weighted_sum);
}

#[test]
fn out_of_bag_targets_are_excluded_and_counted() {
    let model = micro_model(6);
    let pose = pose2([0.3, 0.3], [0.5, 0.5]);
    let r = model
        .training_loss(&triplet_batch(&[1, 1, 2, 2], &pose, &[1, 7, 2, 6]), None)
        .unwrap();
    assert_eq!((r.counted, r.violations), (2, 2));
    assert!(r.weighted_sum.is_finite());
}

#[test]
fn perfect_predictions_have_zero_loss() {
    let mut model = micro_model(7);
    let pose = pose2([0.3, 0.3], [0.5, 0.5]);
    // A singleton bag makes every constrained prediction certain.
    let r = model
        .training_loss(&triplet_batch(&[4, 4, 4, 4], &pose, &[4, 4, 4, 4]), None)
        .unwrap();
    assert_eq!(r.weighted_sum, 0.0);
    assert_eq!(r.accuracy(), 1.0);
    let head_b = model.store.find("tf.head.b").unwrap();
    model.store.get_mut(head_b).data_mut()[4] = 1e3;
    let r = model
        .training_loss(&triplet_batch(&[4, 1, 4, 4], &pose, &[4, 4, 4, 4]), None)
        .unwrap();
    assert!(r.weighted_sum < 1e-12);
}

/// Loss as a function of the embedding tables and start token.
fn loss_at(model: &TransformerModel, batch: &Stage2Batch) -> (f64, Vec<Tensor>) {
    let mut g = Graph::new();
    let p = g.bind(&model.store, true);
    let roi = RoiConfig { w_fg: 3.0, pad: 0 };
    let (loss, _) = model.loss_graph(&mut g, &p, batch, Some(&roi)).unwrap();
    let grads = g.backward(loss);
    let all = p.grads(&grads);
    let ids = [model.src_emb_id(), model.tgt_emb_id(), model.start_id()];
    let names = ["tf.src_emb", "tf.tgt_emb", "tf.start"];
    let out = ids
        .iter()
        .zip(names)
        .map(|(_, name)| {
            let slot = model.store.iter().position(|(n, _)| n == name).unwrap();
            all[slot].clone().unwrap()
        })
        .collect();
    (g.value(loss).item(), out)
}

#[test]
fn embedding_and_start_token_gradients_match_central_differences() {
    let model = micro_model(8);
    let p1 = pose2([0.2, 0.7], crate::condition::OCCLUDED);
    let p2 = pose2([0.9, 0.1], [0.4, 0.4]);
    let (s1, t1) = ([0usize, 3, 5, 3], [5usize, 0, 3, 3]);
    let (s2, t2) = ([1usize, 2, 6, 7], [7usize, 7, 1, 2]);
    let batch = Stage2Batch {
        sources: vec![&s1, &s2],
        poses: vec![&p1, &p2],
        targets: vec![&t1, &t2],
    };
    let (_, analytic) = loss_at(&model, &batch);
    let ids = [model.src_emb_id(), model.tgt_emb_id(), model.start_id()];
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    for (id, grad) in ids.iter().zip(&analytic) {
        for i in 0..grad.numel() {
            let mut plus = model.clone();
            plus.store.get_mut(*id).data_mut()[i] += eps;
            let mut minus = model.clone();
            minus.store.get_mut(*id).data_mut()[i] -= eps;
            let numeric = (loss_at(&plus, &batch).0 - loss_at(&minus, &batch).0) / (2.0 * eps);
            let a = grad.data()[i];
            let scale = a.abs().max(numeric.abs());
            if scale < 1e-9 {
                continue;
            }
            worst = worst.max((a - numeric).abs() / scale);
        }
    }
    assert!(worst <= 1e-3, "worst relative error {worst}");
}

#[test]
fn generation_stays_in_bag_and_greedy_is_stepwise_argmax() {
    let model = micro_model(9);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let cond = model.encode_condition(&pose2([0.5, 0.5], [0.2, 0.8])).unwrap();
    for _ in 0..20 {
        let src: Vec<usize> = (0..4).map(|_| rng.random_range(0..8)).collect();
        let gen = model.generate(&src, &cond, Policy::default(), &mut rng).unwrap();
        assert!(gen.indices.iter().all(|k| src.contains(k)));
    }
    let src = [2, 5, 5, 2];
    let gen = model.generate(&src, &cond, Policy::Greedy, &mut rng).unwrap();
    let bag = Bag::from_indices(src, &codebook(8), (2, 2)).unwrap();
    for j in 0..4 {
        let logits = model.forward(&src, &cond, &gen.indices[..j]).unwrap();
        let row = constrain_logits(&logits.data()[j * 8..(j + 1) * 8], &bag);
        let best = (0..8).fold(0, |b, k| if row[k] > row[b] { k } else { b });
        assert_eq!(gen.indices[j], best);
        assert_eq!(gen.trace[j].chosen, best);
        let p: f64 = gen.trace[j].top.iter().map(|(_, p)| p).sum();
        assert!((p - 1.0).abs() < 1e-12, "two-member bag: top list covers all mass");
    }
    let single = model.generate(&[3, 3, 3, 3], &cond, Policy::default(), &mut rng).unwrap();
    assert_eq!(single.indices, vec![3; 4]);
    let mut r1 = ChaCha8Rng::seed_from_u64(1);
    let mut r2 = ChaCha8Rng::seed_from_u64(1);
    assert_eq!(
        model.generate(&[0, 1, 2, 3], &cond, Policy::default(), &mut r1).unwrap(),
        model.generate(&[0, 1, 2, 3], &cond, Policy::default(), &mut r2).unwrap()
    );
}

#[test]
fn schedule_warms_up_then_decays_to_zero() {
    let lrs: Vec<f64> = (0..=10).map(|s| lr_at(s, 1.0, 4, 10)).collect();
    assert_eq!(&lrs[..4], &[0.25, 0.5, 0.75, 1.0]);
    for w in lrs[3..].windows(2) {
        assert!(w[1] <= w[0]);
    }
    assert_eq!(lrs[10], 0.0);
    assert!((lrs[7] - 0.5).abs() < 1e-12);
}

#[test]
fn repeated_triplet_is_memorized() {
    let model = micro_model(11);
    let cfg = Stage2Config {
        steps: 150,
        batch: 1,
        lr: 1e-2,
        warmup: 10,
        roi: None,
        target: TargetKind::Quantized,
        seed: 0,
    };
    let mut trainer = Stage2Trainer::new(model, cfg);
    let pose = pose2([0.4, 0.6], [0.5, 0.5]);
    let src = [1usize, 2, 3, 4];
    let tgt = [4usize, 4, 2, 1];
    let mut first = None;
    let mut last = 0.0;
    let mut g_opt = trainer.opt.clone();
    for step in 0..150 {
        let mut g = Graph::new();
        let p = g.bind(&trainer.model.store, true);
        let (loss, report) = trainer
            .model
            .loss_graph(&mut g, &p, &triplet_batch(&src, &pose, &tgt), None)
            .unwrap();
        first.get_or_insert(report.mean);
        last = report.mean;
        let grads = g.backward(loss);
        g_opt.update(&mut trainer.model.store, &p.grads(&grads), lr_at(step, 1e-2, 10, 150));
    }
    assert!(last < 0.05 * first.unwrap(), "{first:?} -> {last}");
}

mod props {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn mask_entries_follow_blocks(l in 1usize..40, n in 1usize..12) {
            let m = build_attention_mask(l, n).unwrap();
            let ctx = l + n;
            for i in 0..2 * l + n {
                for j in 0..2 * l + n {
                    let expect = j < ctx || (i >= ctx && j <= i);
                    prop_assert_eq!(m.get(i, j), expect, "entry ({}, {})", i, j);
                }
            }
        }
    }
}
