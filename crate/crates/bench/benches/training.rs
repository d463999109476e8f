use criterion::{criterion_group, criterion_main, Criterion};
use layerdiff_bench::stacks;
use layerdiff_core::bucket::{pack, unpack};
use layerdiff_core::dit::{DitModel, DitSample, DitTrainer};
use layerdiff_core::pipeline::RunConfig;
use layerdiff_core::prompt::{tokenize, Vocab};
use layerdiff_core::synth::gen_corpus;
use layerdiff_core::vae::train_vae;

fn packing(c: &mut Criterion) {
    let batch = stacks(4, 3, 8, 8, 8);
    c.bench_function("pack/4x3x8x8x8", |bench| bench.iter(|| pack(&batch).unwrap()));
    let packed = pack(&batch).unwrap();
    c.bench_function("unpack/4x3x8x8x8", |bench| bench.iter(|| unpack(&packed).unwrap()));
}

fn vae_step(c: &mut Criterion) {
    let config = RunConfig::desk();
    let corpus = gen_corpus(&config.corpus_config()).unwrap();
    let images: Vec<_> = corpus.samples[0].design.slots().into_iter().cloned().collect();
    let mut settings = config.vae_settings();
    settings.steps = 1;
    let mut g = c.benchmark_group("vae");
    g.sample_size(10);
    g.bench_function("desk_train_step", |bench| {
        bench.iter(|| train_vae(&images, config.vae_config(), &settings, |_| {}).unwrap())
    });
    g.finish();
}

fn dit_step(c: &mut Criterion) {
    let config = RunConfig::desk();
    let corpus = gen_corpus(&config.corpus_config()).unwrap();
    let vocab = Vocab::grammar();
    let samples: Vec<DitSample> = corpus
        .samples
        .iter()
        .take(2)
        .map(|s| {
            let slots = s.design.slots().len();
            DitSample {
                latents: layerdiff_bench::random_array(&[slots, config.vae.d, 8, 8], 9),
                prompt: tokenize(&s.bundle, &vocab).unwrap(),
            }
        })
        .collect();
    let model = DitModel::new(config.dit_config(vocab.len()), 0).unwrap();
    let mut trainer = DitTrainer::new(model, config.dit_settings());
    let mut g = c.benchmark_group("dit");
    g.sample_size(10);
    g.bench_function("desk_train_step", |bench| bench.iter(|| trainer.train_step(&samples).unwrap()));
    g.finish();
}

criterion_group!(benches, packing, vae_step, dit_step);
criterion_main!(benches);
