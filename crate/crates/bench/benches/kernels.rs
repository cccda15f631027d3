use criterion::{black_box, criterion_group, criterion_main, Criterion};
use dovmm::autodiff::{Graph, Tensor};
use dovmm::data::synthetic::{generate_range, FamilyId, SyntheticFamily};
use dovmm::data::SampleShape;
use dovmm::decoder::DecoderTrainer;
use dovmm::encoder::{PretrainConfig, ToyEncoder};
use dovmm::stats::paired_ttest_one_tailed;
use dovmm::{DecoderTrainConfig, EmbeddingProvider};

fn ramp(rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols).map(|i| ((i * 7919) % 101) as f64 / 101.0 - 0.5).collect();
    Tensor::new(vec![rows, cols], data).unwrap()
}

fn matmul(c: &mut Criterion) {
    let (a, b) = (ramp(128, 256), ramp(256, 128));
    c.bench_function("matmul 128x256x128 forward+backward", |bench| {
        bench.iter(|| {
            let mut g = Graph::new();
            let x = g.leaf(a.clone());
            let w = g.leaf(b.clone());
            let y = g.matmul(x, w).unwrap();
            let s = g.sum(y).unwrap();
            black_box(g.backward(s).unwrap());
        })
    });
}

fn toy_and_decoder(c: &mut Criterion) {
    let data = generate_range(&SyntheticFamily::new(FamilyId::Blobs, 1), 0, 256, SampleShape::default()).unwrap();
    let enc = ToyEncoder::init(PretrainConfig::default()).unwrap();
    let batch: Vec<&[f64]> = data.samples()[..64].iter().map(|s| s.values.as_slice()).collect();
    c.bench_function("toy embed 64 samples", |bench| {
        bench.iter(|| black_box(enc.embed_batch(&batch).unwrap()))
    });

    let cfg = DecoderTrainConfig {
        epochs: 1,
        ..Default::default()
    };
    let mut group = c.benchmark_group("decoder");
    group.sample_size(10);
    group.bench_function("one epoch on 256 samples", |bench| {
        bench.iter(|| {
            let mut trainer = DecoderTrainer::new(&enc, &data, &cfg).unwrap();
            black_box(trainer.train_epoch(&enc, &data).unwrap())
        })
    });
    group.finish();
}

fn ttest(c: &mut Criterion) {
    let a: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64 * 0.37).sin()).collect();
    let b: Vec<f64> = (0..50).map(|i| 1.1 + (i as f64 * 0.53).cos()).collect();
    c.bench_function("paired t-test K=50", |bench| {
        bench.iter(|| black_box(paired_ttest_one_tailed(&a, &b, 0.05).unwrap()))
    });
}

criterion_group!(benches, matmul, toy_and_decoder, ttest);
criterion_main!(benches);
