use criterion::{black_box, criterion_group, criterion_main, BenchmarkId, Criterion};
use metaevent::data::{generate_corpus, CorpusSpec, Example};
use metaevent::encoder::{EncoderConfig, EventModel};
use metaevent::meta::Objective;
use metaevent::objective::{EventBatch, EventObjective, LossConfig, MMDConfig};
use metaevent::Execution;

fn batch_gradient(c: &mut Criterion) {
    let corpus = generate_corpus(&CorpusSpec {
        num_event_types: 5,
        examples_per_type: 10,
        ..CorpusSpec::default()
    })
    .expect("corpus");
    let model = EventModel::new(
        EncoderConfig {
            num_layers: 1,
            num_heads: 2,
            hidden_dim: 32,
            ffn_dim: 64,
            vocab_size: corpus.vocab.len(),
            ..EncoderConfig::default()
        },
        &corpus.vocab,
    )
    .expect("model");
    let params = model.with_head(&model.init_params(0), 5);
    let examples: Vec<Example> = corpus.pool.values().flat_map(|v| v[..5].to_vec()).collect();
    let classes = examples.iter().map(|e| e.label).collect();
    let batch = EventBatch::new(examples, classes).expect("batch");

    let mut group = c.benchmark_group("batch_gradient_25x5way");
    for (name, execution) in [("sequential", Execution::Sequential), ("parallel", Execution::Parallel)] {
        let objective = EventObjective::new(&model, LossConfig::default(), MMDConfig::default(), execution);
        group.bench_with_input(BenchmarkId::from_parameter(name), &batch, |b, batch| {
            b.iter(|| objective.value_and_grad(black_box(&params), black_box(batch)).expect("gradient"))
        });
    }
    group.finish();
}

criterion_group!(benches, batch_gradient);
criterion_main!(benches);
