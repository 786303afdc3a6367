use criterion::{criterion_group, criterion_main, Criterion};
use layerfuse::probes::{init_probe, ProbeConfig, ProbeLayout, HeadCount};
use layerfuse::reprstore::{LayerScheme, TokenSet};
use layerfuse::synthgen::{generate_planted, SynthSpec};
use layerfuse::trainer::{evaluate, DataView};
use layerfuse::{par, RngStream};

fn eval_pass(c: &mut Criterion) {
    let spec = SynthSpec {
        n_train: 4096,
        ..SynthSpec::planted(3, layerfuse::reprstore::TokenKind::Ap, 0)
    };
    let store = generate_planted(&spec).unwrap();
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    let probe = init_probe(&layout, &mut RngStream::new(0, "init")).unwrap();
    let view = DataView::full(&store, "train").unwrap();

    let mut group = c.benchmark_group("evaluate_4096");
    group.sample_size(10);
    group.bench_function("one_worker", |b| {
        b.iter(|| par::with_workers(Some(1), || evaluate(&probe, &store, &view, true).unwrap()))
    });
    group.bench_function("default_pool", |b| {
        b.iter(|| par::with_workers(None, || evaluate(&probe, &store, &view, true).unwrap()))
    });
    group.finish();
}

criterion_group!(benches, eval_pass);
criterion_main!(benches);
