mod common;

use layerfuse::diffcore::{weighted_ce, Param, Tensor};
use layerfuse::probes::{init_probe, HeadCount, Probe, ProbeConfig, ProbeLayout};
use layerfuse::reprstore::{assemble_rows, LayerScheme, TokenSet};
use layerfuse::RngStream;

fn fusion() -> ProbeConfig {
    ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Auto)
}

#[test]
fn attentive_fusion_gradients() {
    let store = common::toy_store();
    for seed in 0..5 {
        for dropout in [0.0, 0.3] {
            let err = common::probe_gradcheck_scaled(&store, &fusion(), dropout, seed, 1.0, 1e-4);
            assert!(err < 1e-4, "seed {seed} dropout {dropout}: {err:e}");
        }
    }
}

#[test]
fn all_token_gradients() {
    let store = common::toy_store();
    for seed in 0..5 {
        for dropout in [0.0, 0.3] {
            let err = common::probe_gradcheck_scaled(&store, &ProbeConfig::aat(), dropout, seed, 1.0, 1e-4);
            assert!(err < 1e-4, "seed {seed} dropout {dropout}: {err:e}");
        }
    }
}

#[test]
fn linear_concat_gradients() {
    let store = common::toy_store();
    for seed in 0..5 {
        let cfg = ProbeConfig::linear_concat(LayerScheme::All, TokenSet::CLS_AP);
        let err = common::probe_gradcheck(&store, &cfg, 0.0, seed);
        assert!(err < 1e-6, "seed {seed}: {err:e}");
    }
}

fn layout_and_batch(cfg: &ProbeConfig) -> (ProbeLayout, Tensor, Vec<u32>) {
    let store = common::toy_store();
    let layout = ProbeLayout::resolve(cfg, &store.meta).unwrap();
    let batch = assemble_rows(&store, "train", &[0, 1, 2, 3], &layout.rows, layout.d_model).unwrap();
    (layout, batch.h, batch.labels)
}

fn scaled_probe(layout: &ProbeLayout, seed: u64) -> Probe {
    let template = init_probe(layout, &mut RngStream::new(seed, "init")).unwrap();
    common::rebuild(layout, &common::random_params(template.params(), 0.5, seed))
}

#[test]
fn attention_rows_sum_to_one() {
    let (layout, h, _) = layout_and_batch(&fusion());
    let probe = scaled_probe(&layout, 3);
    let out = probe.forward(&h, false, None).unwrap();
    let attn = out.attn.unwrap();
    for row in attn.data().chunks(layout.num_rows()) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(row.iter().all(|&a| a >= 0.0));
    }
}

#[test]
fn permuting_rows_permutes_attention_only() {
    let (layout, h, _) = layout_and_batch(&fusion());
    let probe = scaled_probe(&layout, 5);
    let (b, r, d) = h.dims3().unwrap();
    let perm: Vec<usize> = (0..r).rev().collect();
    let mut permuted = vec![0.0; b * r * d];
    for bi in 0..b {
        for (new, &old) in perm.iter().enumerate() {
            permuted[(bi * r + new) * d..(bi * r + new + 1) * d]
                .copy_from_slice(&h.data()[(bi * r + old) * d..(bi * r + old + 1) * d]);
        }
    }
    let hp = Tensor::from_vec(&[b, r, d], permuted).unwrap();
    let a = probe.forward(&h, false, None).unwrap();
    let p = probe.forward(&hp, false, None).unwrap();
    for (x, y) in a.logits.data().iter().zip(p.logits.data()) {
        assert!((x - y).abs() < 1e-12);
    }
    let (aa, pa) = (a.attn.unwrap(), p.attn.unwrap());
    let m = layout.num_heads;
    for bh in 0..b * m {
        for (new, &old) in perm.iter().enumerate() {
            assert!((pa.data()[bh * r + new] - aa.data()[bh * r + old]).abs() < 1e-12);
        }
    }
}

#[test]
fn single_row_has_unit_weight_and_no_query_gradient() {
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::Last, TokenSet::CLS, HeadCount::Auto);
    let (layout, h, labels) = layout_and_batch(&cfg);
    assert_eq!(layout.num_rows(), 1);
    let probe = scaled_probe(&layout, 7);
    let out = probe.forward(&h, false, None).unwrap();
    assert!(out.attn.as_ref().unwrap().data().iter().all(|&a| a == 1.0));
    let (_, dlogits) = weighted_ce(&out.logits, &labels, &[1.0, 1.0, 1.0]).unwrap();
    let grads = probe.backward(&out.cache, &dlogits).unwrap();
    for (p, g) in probe.params().iter().zip(&grads) {
        if ["query", "w_query", "b_query", "w_key", "b_key"].contains(&p.name.as_str()) {
            assert!(g.data().iter().all(|&x| x == 0.0), "{} has gradient", p.name);
        }
    }
}

#[test]
fn linear_cls_equals_single_row_concat() {
    let (cls_layout, h, labels) = layout_and_batch(&ProbeConfig::linear_cls());
    let concat_cfg = ProbeConfig::linear_concat(LayerScheme::Last, TokenSet::CLS);
    let (concat_layout, h2, _) = layout_and_batch(&concat_cfg);
    assert_eq!(h, h2);
    let a = scaled_probe(&cls_layout, 9);
    let b = common::rebuild(&concat_layout, a.params());
    let oa = a.forward(&h, false, None).unwrap();
    let ob = b.forward(&h, false, None).unwrap();
    assert_eq!(oa.logits, ob.logits);
    let (_, d) = weighted_ce(&oa.logits, &labels, &[1.0, 2.0, 1.0]).unwrap();
    assert_eq!(a.backward(&oa.cache, &d).unwrap(), b.backward(&ob.cache, &d).unwrap());
}

/// Scalar-by-scalar evaluation of the probe, keys including their bias.
fn scalar_logits(params: &[Param], h: &[Vec<f64>], heads: usize) -> Vec<f64> {
    let get = |name: &str| params.iter().find(|p| p.name == name).unwrap().value.clone();
    let (query, wk, bk, wv, bv, wq, bq) = (get("query"), get("w_key"), get("b_key"), get("w_val"), get("b_val"), get("w_query"), get("b_query"));
    let (wo, bo, gain, nbias, wc, bc) = (get("w_out"), get("b_out"), get("norm_gain"), get("norm_bias"), get("w_clf"), get("b_clf"));
    let d = query.len();
    let w = 2 * d;
    let dh = w / heads;
    let k = bc.len();
    let at = |t: &Tensor, i: usize, j: usize, cols: usize| t.data()[i * cols + j];
    let mut concat = vec![0.0; w];
    for m in 0..heads {
        let mut qv = vec![0.0; dh];
        for j in 0..dh {
            let c = m * dh + j;
            qv[j] = bq.data()[c] + (0..d).map(|i| query.data()[i] * at(&wq, i, c, w)).sum::<f64>();
        }
        let mut scores = vec![];
        let mut values = vec![];
        for row in h {
            let mut s = 0.0;
            let mut v = vec![0.0; dh];
            for j in 0..dh {
                let c = m * dh + j;
                let key = bk.data()[c] + (0..d).map(|i| row[i] * at(&wk, i, c, w)).sum::<f64>();
                s += qv[j] * key;
                v[j] = bv.data()[c] + (0..d).map(|i| row[i] * at(&wv, i, c, w)).sum::<f64>();
            }
            scores.push(s / (dh as f64).sqrt());
            values.push(v);
        }
        let mx = scores.iter().cloned().fold(f64::MIN, f64::max);
        let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..dh {
            concat[m * dh + j] = (0..h.len()).map(|r| e[r] / z * values[r][j]).sum();
        }
    }
    let zv: Vec<f64> = (0..d)
        .map(|j| bo.data()[j] + (0..w).map(|i| concat[i] * at(&wo, i, j, d)).sum::<f64>())
        .collect();
    let mean = zv.iter().sum::<f64>() / d as f64;
    let sd = (zv.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64).sqrt();
    let fused: Vec<f64> = (0..d).map(|j| gain.data()[j] * (zv[j] - mean) / (sd + 1e-6) + nbias.data()[j]).collect();
    (0..k)
        .map(|c| bc.data()[c] + (0..d).map(|j| fused[j] * at(&wc, j, c, k)).sum::<f64>())
        .collect()
}

#[test]
fn forward_matches_scalar_evaluation() {
    let store = layerfuse::synthgen::generate_separable(&layerfuse::synthgen::SynthSpec {
        num_layers: 1,
        dims: vec![4],
        num_classes: 3,
        noise_std: 0.4,
        ..layerfuse::synthgen::SynthSpec::separable(2)
    })
    .unwrap();
    let cfg = ProbeConfig::attentive_fusion(LayerScheme::All, TokenSet::CLS_AP, HeadCount::Fixed(2));
    let layout = ProbeLayout::resolve(&cfg, &store.meta).unwrap();
    assert_eq!((layout.num_rows(), layout.num_heads, layout.d_model), (2, 2, 4));
    let probe = scaled_probe(&layout, 13);
    let batch = assemble_rows(&store, "train", &[5], &layout.rows, 4).unwrap();
    let rows: Vec<Vec<f64>> = batch.h.data().chunks(4).map(|c| c.to_vec()).collect();
    let expected = scalar_logits(probe.params(), &rows, 2);
    let got = probe.forward(&batch.h, false, None).unwrap().logits;
    for (g, e) in got.data().iter().zip(&expected) {
        assert!((g - e).abs() < 1e-10, "{g} vs {e}");
    }
}

#[test]
fn eval_mode_ignores_dropout_setting() {
    let (layout, h, _) = layout_and_batch(&fusion());
    let probe = scaled_probe(&layout, 17);
    let mut other = probe.clone();
    other.set_attn_dropout(0.3);
    let a = probe.forward(&h, false, None).unwrap().logits;
    let b = other.forward(&h, false, Some(&mut RngStream::new(1, "dropout"))).unwrap().logits;
    assert_eq!(a, b);
}
