use criterion::{criterion_group, criterion_main, Criterion};
use facekd_core::distill::{total_loss, train_step, Sgd};
use facekd_core::harness::{build_models, generate_dataset, FaceSample, Preset, RunConfig};

fn train_step_bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("train step, batch 4");
    group.sample_size(10);
    let mut base = RunConfig::default();
    base.data.identities = 4;
    base.data.samples = 1;
    let samples = generate_dataset(&base.data_spec()).unwrap();
    let batch: Vec<_> = samples.iter().collect();
    for preset in [Preset::Scratch, Preset::Baseline, Preset::Full] {
        let cfg = preset.apply(&base);
        let models = build_models(&cfg, None).unwrap();
        let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
        let loss =
            |s: &FaceSample| total_loss(&s.image, s.label, &s.landmarks, &models, &cfg.objective);
        group.bench_function(preset.to_string(), |bench| {
            bench.iter(|| {
                train_step(&models.registry, &mut sgd, &batch, 1e-3, (0, 0), &loss).unwrap()
            })
        });
    }
    group.finish();
}

criterion_group!(benches, train_step_bench);
criterion_main!(benches);
