//! Hot-path benchmarks: the dense kernel, a full encoder forward pass, the
//! ranking metrics, text scoring, and training-time image augmentation.

use criterion::{black_box, criterion_group, criterion_main, Criterion, Throughput};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use omae_core::data::{augment, AugmentCfg};
use omae_core::metrics::{bleu, roc_auc_binary};
use omae_core::nn::Params;
use omae_core::rng::rng_from;
use omae_core::vit::{encode, init_encoder, patchify};
use omae_core::{Tape, ViTConfig};

fn bench_matmul(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 64usize;
    let a: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let b: Vec<f32> = (0..n * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut g = c.benchmark_group("matmul");
    g.throughput(Throughput::Elements((n * n * n) as u64));
    g.bench_function("f32_64x64x64", |bch| {
        bch.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let x = tape.constant(a.clone(), vec![n, n]).unwrap();
            let y = tape.constant(b.clone(), vec![n, n]).unwrap();
            let z = tape.matmul(x, y).unwrap();
            black_box(tape.data(z)[0])
        })
    });
    g.finish();
}

fn bench_encoder_forward(c: &mut Criterion) {
    let cfg = ViTConfig::desk();
    let mut params = Params::new();
    let mut rng = rng_from(1, &[]);
    init_encoder(&mut params, &cfg, &mut rng).unwrap();
    let img: Vec<f32> = (0..cfg.in_channels * cfg.image_size * cfg.image_size)
        .map(|i| (i % 255) as f32 / 255.0 - 0.5)
        .collect();
    let tokens =
        patchify(&img, cfg.in_channels, cfg.image_size, cfg.image_size, cfg.patch_size).unwrap();
    c.bench_function("encoder_forward_desk", |bch| {
        bch.iter(|| {
            let mut tape: Tape<f32> = Tape::new();
            let bound = params.bind(&mut tape).unwrap();
            let toks = tape
                .constant(tokens.clone(), vec![1, cfg.num_patches(), cfg.patch_dim()])
                .unwrap();
            let (pooled, _) = encode(&mut tape, &bound, &cfg, toks).unwrap();
            black_box(tape.data(pooled)[0])
        })
    });
}

fn bench_auroc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let n = 10_000usize;
    let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.gen_bool(0.3))).collect();
    let mut g = c.benchmark_group("auroc");
    g.throughput(Throughput::Elements(n as u64));
    g.bench_function("10k_scores", |bch| {
        bch.iter(|| black_box(roc_auc_binary(&scores, &labels).unwrap()));
    });
    g.finish();
}

fn bench_bleu(c: &mut Criterion) {
    let pred = "extensive drusen with pigment epithelial changes in the central macula and \
                scattered hard exudates along the superior arcade suggesting intermediate age \
                related macular degeneration";
    let refs = [
        "extensive drusen with pigment changes in the central macula and hard exudates along \
         the superior arcade consistent with intermediate age related macular degeneration",
        "drusen and pigment epithelial changes with scattered exudates suggesting macular \
         degeneration",
    ];
    c.bench_function("bleu4_long_sentence", |bch| {
        bch.iter(|| black_box(bleu(pred, &refs, 4).unwrap()));
    });
}

fn bench_augment(c: &mut Criterion) {
    let (ch, h, w) = (3usize, 256usize, 256usize);
    let img: Vec<u8> = (0..ch * h * w).map(|i| (i * 31 % 251) as u8).collect();
    let cfg = AugmentCfg::default();
    c.bench_function("augment_256_to_224", |bch| {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        bch.iter(|| black_box(augment(&img, ch, h, w, &cfg, &mut rng).unwrap()));
    });
}

criterion_group!(
    benches,
    bench_matmul,
    bench_encoder_forward,
    bench_auroc,
    bench_bleu,
    bench_augment
);
criterion_main!(benches);
