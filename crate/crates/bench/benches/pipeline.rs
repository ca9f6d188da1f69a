use criterion::{black_box, criterion_group, criterion_main, Criterion};
use homad::geometry::{dlt_solve, similarity_about_center, warp_image, FillMode, ImageFrame};
use homad::model::ExecProfile;
use homad::scorers::memory::kcenter_greedy;
use homad::scorers::{NormalModel, ScorerConfig, ScorerKind};
use homad::synthesis::{render_toy_sample, ToyDatasetSpec};
use homad::{Backbone, BackboneId, Image};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn toy_images(n: usize) -> Vec<Image> {
    let spec = ToyDatasetSpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    (0..n)
        .map(|_| render_toy_sample(&spec.classes[0], spec.size, None, &mut rng).0)
        .collect()
}

fn geometry(c: &mut Criterion) {
    let src = [[0.0, 0.0], [127.0, 0.0], [127.0, 127.0], [0.0, 127.0]];
    let dst = [[3.0, 5.0], [120.0, 2.0], [125.0, 121.0], [6.0, 119.0]];
    c.bench_function("dlt_solve", |b| b.iter(|| dlt_solve(black_box(&src), black_box(&dst)).unwrap()));

    let img = toy_images(1).remove(0);
    let frame = ImageFrame::of(&img).unwrap();
    let h = similarity_about_center(17.0, 1.05, 3.0, -2.0, &frame);
    c.bench_function("warp_image_128_reflect", |b| {
        b.iter(|| warp_image(black_box(&img), &h, FillMode::Reflection).unwrap())
    });
}

fn features(c: &mut Criterion) {
    let img = toy_images(1).remove(0);
    let bb = Backbone::pretrained(BackboneId::CompactCnn, None).unwrap();
    let taps = BackboneId::CompactCnn.default_taps();
    c.bench_function("compact_cnn_extract_128", |b| {
        b.iter(|| bb.extract_features(black_box(&img), &taps).unwrap())
    });
}

fn scoring(c: &mut Criterion) {
    let imgs = toy_images(24);
    let bb = Backbone::pretrained(BackboneId::CompactCnn, None).unwrap();
    let cfg = ScorerConfig::default();
    let (train, test) = imgs.split_at(20);
    let mut g = c.benchmark_group("padim");
    g.sample_size(10);
    g.bench_function("fit_20", |b| {
        b.iter(|| NormalModel::fit(ScorerKind::Padim, &bb, train, &cfg, ExecProfile::Serial).unwrap())
    });
    let model = NormalModel::fit(ScorerKind::Padim, &bb, train, &cfg, ExecProfile::Serial).unwrap();
    g.bench_function("score_4", |b| {
        b.iter(|| model.score_all(&bb, black_box(test), ExecProfile::Serial).unwrap())
    });
    g.finish();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let dim = 64;
    let pts: Vec<f32> = (0..2000 * dim).map(|_| rng.gen()).collect();
    c.bench_function("kcenter_greedy_2000x64_to_200", |b| {
        b.iter(|| kcenter_greedy(black_box(&pts), dim, 200, 0))
    });
}

criterion_group!(benches, geometry, features, scoring);
criterion_main!(benches);
