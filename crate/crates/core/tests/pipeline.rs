use layerfuse::probes::{HeadCount, ProbeConfig, ProbeLayout};
use layerfuse::reprstore::{assemble_batch, read_store, write_store, LayerScheme, TokenKind, TokenSet};
use layerfuse::synthgen::{generate_mixed_width, generate_planted, generate_separable, SynthSpec};
use layerfuse::trainer::{evaluate, train, DataView, Hyper, SplitSpec, TrainPlan};
use layerfuse::probes::count_params;

fn splits(store: &layerfuse::reprstore::FeatureStore) -> SplitSpec {
    SplitSpec {
        train: DataView::full(store, "train").unwrap(),
        val: None,
    }
}

fn hyper(lr: f64, wd: f64) -> Hyper {
    Hyper {
        lr,
        weight_decay: wd,
        attn_dropout: 0.0,
    }
}

#[test]
fn separable_linear_cls_converges() {
    let spec = SynthSpec {
        num_classes: 2,
        ..SynthSpec::separable(1)
    };
    let store = generate_separable(&spec).unwrap();
    let layout = ProbeLayout::resolve(&ProbeConfig::linear_cls(), &store.meta).unwrap();
    let plan = TrainPlan::new(spec.n_train, hyper(0.01, 1e-4), 0).unwrap();
    let (probe, history) = train(&layout, &plan, &store, &splits(&store)).unwrap();
    assert_eq!(history.train_loss.len(), plan.epochs);
    assert_eq!(history.train_bal_acc.len(), plan.epochs);
    assert_eq!(history.val_bal_acc.len(), plan.epochs);
    assert_eq!(*history.train_bal_acc.last().unwrap(), 1.0);
    assert!(*history.train_loss.last().unwrap() < 0.05);
    let test = DataView::full(&store, "test").unwrap();
    assert_eq!(evaluate(&probe, &store, &test, false).unwrap().balanced_accuracy(2).unwrap(), 1.0);
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let store = generate_separable(&SynthSpec::separable(2)).unwrap();
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    let plan = TrainPlan::new(400, hyper(0.0, 0.0), 4).unwrap();
    let (trained, _) = train(&layout, &plan, &store, &splits(&store)).unwrap();
    let fresh = layerfuse::probes::init_probe(&layout, &mut layerfuse::RngStream::new(4, "init")).unwrap();
    assert_eq!(trained.params(), fresh.params());
}

#[test]
fn training_is_deterministic() {
    let store = generate_planted(&SynthSpec {
        n_train: 200,
        n_val: 50,
        n_test: 50,
        ..SynthSpec::planted(2, TokenKind::Cls, 3)
    })
    .unwrap();
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    let spec = SplitSpec {
        train: DataView::full(&store, "train").unwrap(),
        val: Some(DataView::full(&store, "val").unwrap()),
    };
    let plan = TrainPlan::new(200, Hyper { lr: 0.01, weight_decay: 1e-3, attn_dropout: 0.1 }, 8).unwrap();
    let (a, ha) = train(&layout, &plan, &store, &spec).unwrap();
    let (b, hb) = train(&layout, &plan, &store, &spec).unwrap();
    assert_eq!(a, b);
    assert_eq!(ha.train_loss, hb.train_loss);
    assert_eq!(ha.val_bal_acc, hb.val_bal_acc);
    let other = TrainPlan { seed: 9, ..plan };
    let (c, _) = train(&layout, &other, &store, &spec).unwrap();
    assert_ne!(a, c);
}

#[test]
fn evaluation_does_not_depend_on_worker_count() {
    let store = generate_separable(&SynthSpec { n_train: 700, ..SynthSpec::separable(5) }).unwrap();
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    let probe = layerfuse::probes::init_probe(&layout, &mut layerfuse::RngStream::new(0, "init")).unwrap();
    let view = DataView::full(&store, "train").unwrap();
    let one = layerfuse::par::with_workers(Some(1), || evaluate(&probe, &store, &view, true).unwrap());
    let many = layerfuse::par::with_workers(Some(4), || evaluate(&probe, &store, &view, true).unwrap());
    assert_eq!(one.preds, many.preds);
    assert_eq!(one.attention, many.attention);
}

#[test]
fn mixed_width_store_trains_end_to_end() {
    let spec = SynthSpec {
        num_layers: 2,
        dims: vec![8, 16],
        ..SynthSpec::separable(6)
    };
    let store = generate_mixed_width(&spec).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixed.lfr");
    write_store(&store, &path).unwrap();
    let store = read_store(&path).unwrap();

    let batch = assemble_batch(&store, "train", &[0, 1, 2], &[1, 2], TokenSet::CLS_AP).unwrap();
    let (b, r, d) = batch.h.dims3().unwrap();
    assert_eq!((b, r, d), (3, 4, 16));
    for bi in 0..b {
        for (ri, tag) in batch.rows.iter().enumerate() {
            let row = &batch.h.data()[(bi * r + ri) * d..(bi * r + ri + 1) * d];
            if tag.layer == 1 {
                assert!(row[8..].iter().all(|&x| x == 0.0));
            }
            let norm: f64 = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-5);
        }
    }

    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto);
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    assert_eq!(layout.d_model, 16);
    let plan = TrainPlan::new(spec.n_train, hyper(0.01, 1e-4), 1).unwrap();
    let (a, _) = train(&layout, &plan, &store, &splits(&store)).unwrap();
    let (b2, _) = train(&layout, &plan, &store, &splits(&store)).unwrap();
    assert_eq!(a, b2);
    assert_eq!(a.num_params(), count_params(cfg.kind, 16, 2, spec.num_classes));
    let test = DataView::full(&store, "test").unwrap();
    assert!(evaluate(&a, &store, &test, false).unwrap().balanced_accuracy(4).unwrap() >= 0.99);
}

#[test]
fn planted_slot_is_the_only_informative_one() {
    let spec = SynthSpec {
        n_train: 600,
        n_val: 0,
        n_test: 400,
        ..SynthSpec::planted(3, TokenKind::Ap, 21)
    };
    let store = generate_planted(&spec).unwrap();
    let test = DataView::full(&store, "test").unwrap();
    for layer in 1..=spec.num_layers {
        for (kind, tokens) in [(TokenKind::Cls, TokenSet::CLS), (TokenKind::Ap, TokenSet { cls: false, ap: true, patch: false })] {
            let cfg = ProbeConfig::linear_concat(LayerScheme::Custom(vec![layer]), tokens);
            let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
            let plan = TrainPlan::new(spec.n_train, hyper(0.01, 1e-4), 0).unwrap();
            let (probe, _) = train(&layout, &plan, &store, &splits(&store)).unwrap();
            let acc = evaluate(&probe, &store, &test, false).unwrap().balanced_accuracy(4).unwrap();
            if layer == 3 && kind == TokenKind::Ap {
                assert!(acc >= 0.95, "planted slot scored {acc}");
            } else {
                assert!((acc - 0.25).abs() <= 0.1, "{kind}@{layer} scored {acc}");
            }
        }
    }
}
