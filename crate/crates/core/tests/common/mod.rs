#![allow(dead_code)]

use layerfuse::diffcore::{finite_difference_check, weighted_ce, GradCheck, Param, Tensor};
use layerfuse::probes::{AttentiveProbe, LinearProbe, Probe, ProbeConfig, ProbeLayout};
use layerfuse::reprstore::{assemble_rows, FeatureStore, TokenSet};
use layerfuse::synthgen::{generate_separable, SynthSpec};
use layerfuse::RngStream;

/// B=4, L=3, P=6, d=8, K=3 with CLS, AP and PATCH tokens on every layer.
pub fn toy_store() -> FeatureStore {
    let spec = SynthSpec {
        n_train: 4,
        n_val: 0,
        n_test: 3,
        num_layers: 3,
        dims: vec![8],
        num_patches: 6,
        tokens: TokenSet { cls: true, ap: true, patch: true },
        num_classes: 3,
        signal_strength: 1.0,
        noise_std: 0.5,
        ..SynthSpec::separable(11)
    };
    generate_separable(&spec).unwrap()
}

pub fn rebuild(layout: &ProbeLayout, params: &[Param]) -> Probe {
    if layout.config.kind.is_attentive() {
        Probe::Attentive(AttentiveProbe::from_params(layout, params.to_vec()).unwrap())
    } else {
        Probe::Linear(LinearProbe::from_params(layout, params.to_vec()).unwrap())
    }
}

/// Parameters drawn at `scale` so every gradient is well away from zero.
pub fn random_params(template: &[Param], scale: f64, seed: u64) -> Vec<Param> {
    let mut rng = RngStream::new(seed, "test-params");
    template
        .iter()
        .map(|p| {
            let data = (0..p.value.len()).map(|_| scale * rng.normal()).collect();
            Param::new(p.name.clone(), Tensor::from_vec(p.value.shape(), data).unwrap())
        })
        .collect()
}

/// Max relative finite-difference error of the probe's full graph under
/// class-weighted cross-entropy. Dropout masks replay from a fixed stream.
pub fn probe_gradcheck(store: &FeatureStore, cfg: &ProbeConfig, dropout: f64, seed: u64) -> f64 {
    probe_gradcheck_scaled(store, cfg, dropout, seed, 0.3, 1e-5)
}

pub fn probe_gradcheck_scaled(store: &FeatureStore, cfg: &ProbeConfig, dropout: f64, seed: u64, scale: f64, step: f64) -> f64 {
    let mut layout = ProbeLayout::resolve(cfg, &store.meta).unwrap();
    layout.config.attn_dropout = dropout;
    let idx: Vec<usize> = (0..4).collect();
    let batch = assemble_rows(store, "train", &idx, &layout.rows, layout.d_model).unwrap();
    let template = layerfuse::probes::init_probe(&layout, &mut RngStream::new(seed, "init")).unwrap();
    let mut params = random_params(template.params(), scale, seed);
    let weights = [0.7, 1.3, 1.1];
    let loss_fn = |ps: &[Param]| {
        let probe = rebuild(&layout, ps);
        let mut rng = RngStream::new(seed, "mask");
        let out = probe.forward(&batch.h, dropout > 0.0, Some(&mut rng))?;
        let (loss, dlogits) = weighted_ce(&out.logits, &batch.labels, &weights)?;
        let grads = probe.backward(&out.cache, &dlogits)?;
        Ok((loss, grads))
    };
    finite_difference_check(loss_fn, &mut params, GradCheck { max_coords: 100_000, step, ..GradCheck::default() }).unwrap()
}
