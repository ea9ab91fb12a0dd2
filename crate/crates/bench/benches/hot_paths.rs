use criterion::{criterion_group, criterion_main, Criterion};
use qscraft::codec::{quantize, Codebook, LatentGrid};
use qscraft::condition::PoseFrame;
use qscraft::scrabble::{scrabble_patchwork, Bag};
use qscraft::tensor::Tensor;
use qscraft::transformer::{build_attention_mask, Policy, TransformerArch, TransformerModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::hint::black_box;

fn random_codebook(rng: &mut ChaCha8Rng, m: usize, c: usize) -> Codebook {
    Codebook::new(Tensor::new(&[m, c], (0..m * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).unwrap()
}

fn random_grid(rng: &mut ChaCha8Rng, side: usize, c: usize) -> LatentGrid {
    LatentGrid::new(side, side, c, (0..side * side * c).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn bench_quantize(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let codebook = random_codebook(&mut rng, 256, 64);
    let z = random_grid(&mut rng, 16, 64);
    c.bench_function("quantize 16x16 m=256 c=64", |b| b.iter(|| quantize(black_box(&z), &codebook).unwrap()));
}

fn bench_scrabble(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let codebook = random_codebook(&mut rng, 256, 64);
    let src = quantize(&random_grid(&mut rng, 16, 64), &codebook).unwrap();
    let bag = Bag::from_indices(src.indices.iter().copied(), &codebook, (16, 16)).unwrap();
    let z = random_grid(&mut rng, 16, 64);
    c.bench_function("scrabble 16x16 c=64", |b| b.iter(|| scrabble_patchwork(black_box(&z), &bag).unwrap()));
}

fn bench_mask(c: &mut Criterion) {
    c.bench_function("attention mask l=256 n=8", |b| b.iter(|| build_attention_mask(black_box(256), 8).unwrap()));
}

fn bench_transformer(c: &mut Criterion) {
    let arch = TransformerArch {
        seq_len: 64,
        keypoints: 8,
        codebook_size: 128,
        width: 64,
        blocks: 2,
        heads: 4,
        ff_mult: 4,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = TransformerModel::new(arch, &mut rng).unwrap();
    let src: Vec<usize> = (0..64).map(|_| rng.random_range(0..128)).collect();
    let pose = PoseFrame::new((0..8).map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)]).collect()).unwrap();
    let cond = model.encode_condition(&pose).unwrap();
    let mut group = c.benchmark_group("transformer l=64");
    group.sample_size(10);
    group.bench_function("forward full prefix", |b| b.iter(|| model.forward(&src, &cond, black_box(&src)).unwrap()));
    group.bench_function("greedy generation", |b| {
        b.iter(|| model.generate(&src, &cond, Policy::Greedy, &mut rng).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_quantize, bench_scrabble, bench_mask, bench_transformer);
criterion_main!(benches);
