//! Hot-path benchmarks: marginal inference, masked attention, and the
//! whole per-record forward pass.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use segsyn::autodiff::Graph;
use segsyn::config::Config;
use segsyn::data::{LabelVocab, Polarity, SentenceRecord, TokenVocab};
use segsyn::latent::{tree_marginals, MttVariant};
use segsyn::matrix::Matrix;
use segsyn::model::{Model, RecordInputs};
use segsyn::params::ParamStore;

fn random_instance(n: usize, seed: u64) -> (Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edge = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                edge.set(i, j, rng.gen_range(0.05..5.0));
            }
        }
    }
    let phi = Matrix::from_vec(n, 1, (0..n).map(|_| rng.gen_range(0.05..5.0)).collect());
    (edge, phi)
}

fn bench_tree_marginals(c: &mut Criterion) {
    let mut group = c.benchmark_group("tree_marginals");
    for n in [6usize, 12, 24] {
        let (edge, phi) = random_instance(n, 11);
        group.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| {
                let g = Graph::new();
                tree_marginals(
                    &g,
                    g.constant(edge.clone()),
                    g.constant(phi.clone()),
                    MttVariant::FirstRow,
                )
                .unwrap()
                .marginals
                .value()
            })
        });
    }
    group.finish();
}

fn bench_masked_softmax(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 64;
    let x = Matrix::from_vec(n, n, (0..n * n).map(|_| rng.gen_range(-3.0..3.0)).collect());
    let mut mask = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            if rng.gen_bool(0.5) || i == j {
                mask.set(i, j, 1.0);
            }
        }
    }
    c.bench_function("masked_softmax_64x64", |b| {
        b.iter(|| {
            let g = Graph::new();
            g.masked_softmax(g.constant(x.clone()), &mask).unwrap().value()
        })
    });
}

fn three_clause_record() -> SentenceRecord {
    SentenceRecord {
        tokens: [
            "battery", "is", "great", "but", "screen", "was", "awful", "while", "camera", "seems",
            "okay",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        aspect_from: 4,
        aspect_to: 4,
        polarity: Polarity::Negative,
        dep_head: vec![3, 3, 0, 7, 7, 7, 3, 11, 11, 11, 3],
        dep_label: [
            "nsubj", "cop", "root", "cc", "nsubj", "cop", "conj", "cc", "nsubj", "cop", "conj",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect(),
        constituency: "(S (CL (NP battery) (VP is great)) but (CL (NP screen) (VP was awful)) \
                       while (CL (NP camera) (VP seems okay)))"
            .into(),
    }
}

fn bench_forward(c: &mut Criterion) {
    let record = three_clause_record();
    let records = std::slice::from_ref(&record);
    let vocab = TokenVocab::from_records(records);
    let labels = LabelVocab::from_records(records);
    let cfg = Config::default();
    let l = cfg.l;
    let model = Model {
        cfg,
        vocab_size: vocab.len(),
        n_labels: labels.len(),
    };
    let inputs = RecordInputs::build(&record, &vocab, &labels, l).unwrap();
    let mut store = ParamStore::new(0);
    {
        let g = Graph::new();
        model.forward(&g, &mut store, &inputs).unwrap();
    }
    c.bench_function("forward_11_tokens_d32", |b| {
        b.iter(|| {
            let g = Graph::new();
            model.forward(&g, &mut store, &inputs).unwrap().prediction()
        })
    });
    c.bench_function("forward_backward_11_tokens_d32", |b| {
        b.iter(|| {
            let g = Graph::new();
            let fwd = model.forward(&g, &mut store, &inputs).unwrap();
            let loss = model.loss_for(&g, &fwd, inputs.label).unwrap();
            g.backward(loss.total).unwrap();
            g.export_grads(&mut store);
            loss.total.scalar_value()
        })
    });
}

criterion_group!(benches, bench_tree_marginals, bench_masked_softmax, bench_forward);
criterion_main!(benches);
