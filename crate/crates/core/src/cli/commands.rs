use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::{
    CkaArgs, Cli, Command, DataArgs, EvalArgs, GridArgs, HeatmapArgs, HyperArgs, ParamsArgs, Preset, ProbeArgs,
    SeedArgs, SynthArgs, TrainArgs,
};
use crate::analysis::{
    accuracy_gain, emit_report, layer_similarity_curve, to_json_string, write_json, Bandwidth, HeatmapMatrix,
    HistorySummary, Provenance, ReportFiles, RunReport,
};
use crate::error::{Error, Result};
use crate::probes::{count_params, read_checkpoint, write_checkpoint, Checkpoint, HeadCount, Probe, ProbeConfig, ProbeKind, ProbeLayout};
use crate::reprstore::{read_store, write_store, FeatureStore, LayerScheme, TokenKind, TokenSet};
use crate::synthgen::{generate_mixed_width, generate_planted, generate_separable, SynthSpec};
use crate::trainer::{
    evaluate, grid_search, resolve_schedule, seed_study, train, DataView, GridSpace, Hyper, Leaderboard, SplitSpec,
    TrainHistory, TrainPlan,
};

/// Runs one parsed invocation.
pub fn run(cli: Cli) -> Result<()> {
    let args = serde_json::to_value(&cli.command)?;
    match &cli.command {
        Command::Synth(a) => cmd_synth(a, args),
        Command::Train(a) => cmd_train(a, args),
        Command::Gridsearch(a) => cmd_gridsearch(a, args),
        Command::Eval(a) => cmd_eval(a, args),
        Command::Heatmap(a) => cmd_heatmap(a, args),
        Command::Cka(a) => cmd_cka(a, args),
        Command::Params(a) => cmd_params(a),
        Command::Seedstudy(a) => cmd_seedstudy(a, args),
    }
}

/// `4733962` → `4,733,962`.
pub fn group_thousands(n: usize) -> String {
    let digits = n.to_string();
    let mut out = String::new();
    for (i, ch) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(ch);
    }
    out
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn cmd_synth(a: &SynthArgs, args: serde_json::Value) -> Result<()> {
    let (spec, preset) = match &a.spec {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Config(format!("spec {}: {e}", path.display())))?;
            let preset = if spec.planted_layer.is_some() { Preset::Planted } else { a.preset };
            (spec, preset)
        }
        None => {
            let mut spec = match a.preset {
                Preset::Planted => SynthSpec::planted(a.layer, a.kind.parse()?, a.seed),
                Preset::Separable => SynthSpec::separable(a.seed),
                Preset::MixedWidth => SynthSpec {
                    num_layers: 2,
                    dims: vec![8, 16],
                    ..SynthSpec::separable(a.seed)
                },
            };
            if let Some(v) = a.layers {
                spec.num_layers = v;
            }
            if let Some(v) = &a.dims {
                spec.dims = v.clone();
            }
            if let Some(v) = &a.tokens {
                spec.tokens = v.parse()?;
            }
            if let Some(v) = a.patches {
                spec.num_patches = v;
            }
            if let Some(v) = a.classes {
                spec.num_classes = v;
            }
            if let Some(v) = a.n_train {
                spec.n_train = v;
            }
            if let Some(v) = a.n_val {
                spec.n_val = v;
            }
            if let Some(v) = a.n_test {
                spec.n_test = v;
            }
            if let Some(v) = a.signal {
                spec.signal_strength = v;
            }
            if let Some(v) = a.noise {
                spec.noise_std = v;
            }
            if let Some(v) = a.imbalance {
                spec.imbalance_ratio = v;
            }
            (spec, a.preset)
        }
    };
    let store = match preset {
        Preset::Planted => generate_planted(&spec)?,
        Preset::Separable => generate_separable(&spec)?,
        Preset::MixedWidth => generate_mixed_width(&spec)?,
    };
    write_store(&store, &a.out)?;
    #[derive(Serialize)]
    struct Sidecar<'a> {
        provenance: Provenance,
        spec: &'a SynthSpec,
    }
    let mut sidecar = a.out.clone().into_os_string();
    sidecar.push(".json");
    write_json(
        PathBuf::from(sidecar),
        &Sidecar {
            provenance: Provenance::new("synth", spec.seed, args),
            spec: &spec,
        },
    )?;
    println!(
        "wrote {} ({} layers, splits {:?})",
        a.out.display(),
        store.meta.num_layers,
        store.meta.splits
    );
    Ok(())
}

/// Builds the probe configuration named on the command line.
pub(crate) fn probe_config(p: &ProbeArgs) -> Result<ProbeConfig> {
    let heads: HeadCount = p.heads.parse()?;
    match p.probe.trim().to_ascii_lowercase().as_str() {
        "aat" => Ok(ProbeConfig::aat()),
        "hybrid" => Ok(ProbeConfig::hybrid()),
        other => {
            let kind: ProbeKind = other.parse()?;
            let layers: LayerScheme = p.layers.parse()?;
            let tokens: TokenSet = p.tokens.parse()?;
            Ok(match kind {
                ProbeKind::LinearCls => ProbeConfig::linear_cls(),
                ProbeKind::LinearConcat => ProbeConfig::linear_concat(layers, tokens),
                ProbeKind::AttentiveFusion => ProbeConfig::attentive_fusion(layers, tokens, heads),
                ProbeKind::AttentiveTokens => ProbeConfig {
                    kind,
                    layers,
                    tokens,
                    heads,
                    attn_dropout: 0.0,
                    pinned_weight_decay: None,
                    pinned_dropout: None,
                },
            })
        }
    }
}

struct Loaded {
    store: FeatureStore,
    spec: SplitSpec,
    test: Option<DataView>,
}

fn load_data(d: &DataArgs) -> Result<Loaded> {
    let store = read_store(&d.features)?;
    let pick = |explicit: &Option<String>, default: &str| -> Result<Option<DataView>> {
        match explicit {
            Some(name) => Ok(Some(DataView::full(&store, name)?)),
            None if store.splits.contains_key(default) => Ok(Some(DataView::full(&store, default)?)),
            None => Ok(None),
        }
    };
    let train = DataView::full(&store, &d.train_split)?;
    let val = pick(&d.val_split, "val")?;
    let test = pick(&d.test_split, "test")?;
    Ok(Loaded {
        spec: SplitSpec { train, val },
        test,
        store,
    })
}

fn plan_for(layout: &ProbeLayout, h: &HyperArgs, n_train: usize, seed: u64) -> Result<TrainPlan> {
    let hyper = Hyper {
        lr: h.lr,
        weight_decay: layout.config.pinned_weight_decay.unwrap_or(h.wd),
        attn_dropout: layout.config.pinned_dropout.unwrap_or(h.dropout),
    };
    TrainPlan::with_schedule(resolve_schedule(n_train, h.batch_size, h.epochs)?, hyper, seed)
}

fn read_baseline(path: &Path) -> Result<f64> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    v.get("test_bal_acc")
        .and_then(|x| x.as_f64())
        .ok_or_else(|| Error::Config(format!("baseline {} has no numeric test_bal_acc", path.display())))
}

struct Outcome<'a> {
    provenance: Provenance,
    layout: &'a ProbeLayout,
    plan: &'a TrainPlan,
    probe: &'a Probe,
    history: &'a TrainHistory,
}

/// Writes `probe.lfpb`, `report.json`, `history.csv` and, for attentive
/// probes with a test split, `heatmap.csv`.
fn finish_run(o: Outcome<'_>, data: &Loaded, baseline: Option<&PathBuf>, out: &Path) -> Result<RunReport> {
    create_dir(out)?;
    let k = o.layout.num_classes;
    let (test_bal_acc, heatmap) = match &data.test {
        Some(view) => {
            let ev = evaluate(o.probe, &data.store, view, true)?;
            let hm = ev.attention.as_ref().map(|a| a.finish()).transpose()?;
            (Some(ev.balanced_accuracy(k)?), hm)
        }
        None => (None, None),
    };
    let baseline_bal_acc = baseline.map(|p| read_baseline(p)).transpose()?;
    let gain_pp = match (test_bal_acc, baseline_bal_acc) {
        (Some(m), Some(b)) => Some(accuracy_gain(m, b)),
        _ => None,
    };
    let report = RunReport {
        provenance: o.provenance.clone(),
        config: o.layout.config.clone(),
        label: o.layout.config.label(),
        plan: Some(o.plan.clone()),
        seed: o.plan.seed,
        num_layers: o.layout.num_layers,
        layers: o.layout.layers.clone(),
        num_rows: o.layout.num_rows(),
        d_model: o.layout.d_model,
        num_heads: o.layout.num_heads,
        head_fallback: o.layout.head_fallback,
        score_entries: o.layout.score_entries(),
        param_count: o.probe.num_params(),
        test_bal_acc,
        baseline_bal_acc,
        gain_pp,
        history: Some(HistorySummary::from_history(o.history)),
    };
    write_checkpoint(
        out.join("probe.lfpb"),
        &Checkpoint {
            probe: o.probe.clone(),
            seed: o.plan.seed,
            provenance: serde_json::json!({ "provenance": o.provenance, "plan": o.plan }),
        },
    )?;
    emit_report(
        out,
        &ReportFiles {
            report: Some(report.clone()),
            history: Some(o.history.clone()),
            heatmap,
            cka: vec![],
        },
    )?;
    Ok(report)
}

fn print_summary(r: &RunReport) {
    let acc = r.test_bal_acc.map(|v| format!("{v:.4}")).unwrap_or_else(|| "n/a".into());
    print!(
        "{}: {} heads, {} params, test balanced accuracy {}",
        r.label,
        r.num_heads,
        group_thousands(r.param_count),
        acc
    );
    if let Some(g) = r.gain_pp {
        print!(", gain {g:+.2} pp");
    }
    println!();
}

fn cmd_train(a: &TrainArgs, args: serde_json::Value) -> Result<()> {
    let data = load_data(&a.data)?;
    let layout = ProbeLayout::resolve(&probe_config(&a.probe)?, &data.store.meta)?;
    let plan = plan_for(&layout, &a.hyper, data.spec.train.indices.len(), a.seed)?;
    let (probe, history) = train(&layout, &plan, &data.store, &data.spec)?;
    let report = finish_run(
        Outcome {
            provenance: Provenance::new("train", a.seed, args),
            layout: probe.layout(),
            plan: &plan,
            probe: &probe,
            history: &history,
        },
        &data,
        a.baseline.as_ref(),
        &a.out,
    )?;
    print_summary(&report);
    Ok(())
}

fn cmd_gridsearch(a: &GridArgs, args: serde_json::Value) -> Result<()> {
    let data = load_data(&a.data)?;
    let layout = ProbeLayout::resolve(&probe_config(&a.probe)?, &data.store.meta)?;
    let space = GridSpace::for_layout(&layout);
    let outcome = grid_search(&layout, &space, &data.store, &a.data.train_split, a.seed, a.workers)?;
    let provenance = Provenance::new("gridsearch", a.seed, args);
    let eval_data = Loaded {
        spec: outcome.split.clone(),
        test: data.test.clone(),
        store: data.store,
    };
    let report = finish_run(
        Outcome {
            provenance: provenance.clone(),
            layout: &outcome.layout,
            plan: &outcome.plan,
            probe: &outcome.probe,
            history: &outcome.history,
        },
        &eval_data,
        a.baseline.as_ref(),
        &a.out,
    )?;
    #[derive(Serialize)]
    struct Board<'a> {
        provenance: Provenance,
        #[serde(flatten)]
        leaderboard: &'a Leaderboard,
    }
    write_json(
        a.out.join("leaderboard.json"),
        &Board {
            provenance,
            leaderboard: &outcome.leaderboard,
        },
    )?;
    let best = outcome.leaderboard.best();
    println!(
        "{} cells; winner lr={} wd={} dropout={} (val balanced accuracy {:.4})",
        outcome.leaderboard.cells.len(),
        best.lr,
        best.wd,
        best.dropout,
        best.val_bal_acc.unwrap_or(f64::NAN)
    );
    print_summary(&report);
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    provenance: Provenance,
    label: String,
    split: String,
    param_count: usize,
    test_bal_acc: f64,
    baseline_bal_acc: Option<f64>,
    gain_pp: Option<f64>,
}

fn cmd_eval(a: &EvalArgs, args: serde_json::Value) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    let store = read_store(&a.features)?;
    let layout = ckpt.probe.layout();
    layout.check_store(&store, &a.split)?;
    let ev = evaluate(&ckpt.probe, &store, &DataView::full(&store, &a.split)?, false)?;
    let acc = ev.balanced_accuracy(layout.num_classes)?;
    let baseline = match (&a.baseline, a.baseline_acc) {
        (Some(p), _) => Some(read_baseline(p)?),
        (None, Some(v)) => Some(v),
        (None, None) => None,
    };
    let report = EvalReport {
        provenance: Provenance::new("eval", ckpt.seed, args),
        label: layout.config.label(),
        split: a.split.clone(),
        param_count: ckpt.probe.num_params(),
        test_bal_acc: acc,
        baseline_bal_acc: baseline,
        gain_pp: baseline.map(|b| accuracy_gain(acc, b)),
    };
    let text = to_json_string(&report)?;
    if let Some(dir) = &a.out {
        create_dir(dir)?;
        let p = dir.join("eval.json");
        fs::write(&p, &text).map_err(|e| Error::io(&p, e))?;
    }
    print!("{text}");
    Ok(())
}

fn cmd_heatmap(a: &HeatmapArgs, args: serde_json::Value) -> Result<()> {
    let ckpt = read_checkpoint(&a.checkpoint)?;
    if !ckpt.probe.layout().config.kind.is_attentive() {
        return Err(Error::Config("heatmaps need an attentive probe checkpoint".into()));
    }
    let store = read_store(&a.features)?;
    ckpt.probe.layout().check_store(&store, &a.split)?;
    let ev = evaluate(&ckpt.probe, &store, &DataView::full(&store, &a.split)?, true)?;
    let heatmap = ev
        .attention
        .ok_or_else(|| Error::Data(format!("split '{}' is empty", a.split)))?
        .finish()?;
    emit_report(
        &a.out,
        &ReportFiles {
            heatmap: Some(heatmap.clone()),
            ..Default::default()
        },
    )?;
    #[derive(Serialize)]
    struct Out {
        provenance: Provenance,
        heatmap: HeatmapMatrix,
    }
    write_json(
        a.out.join("heatmap.json"),
        &Out {
            provenance: Provenance::new("heatmap", ckpt.seed, args),
            heatmap: heatmap.clone(),
        },
    )?;
    let (kind, layer) = heatmap.argmax();
    print!("{}", heatmap.to_csv());
    println!("argmax: {kind}@{layer}");
    Ok(())
}

fn cmd_cka(a: &CkaArgs, args: serde_json::Value) -> Result<()> {
    let store = read_store(&a.features)?;
    let bw = if a.absolute {
        Bandwidth::Absolute(a.bandwidth)
    } else {
        Bandwidth::MedianFraction(a.bandwidth)
    };
    let mut curves = Vec::new();
    for k in &a.kind {
        let kind: TokenKind = k.parse()?;
        curves.push((kind, layer_similarity_curve(&store, &a.split, kind, a.reference, bw, a.seed)?));
    }
    let written = emit_report(
        &a.out,
        &ReportFiles {
            cka: curves.clone(),
            ..Default::default()
        },
    )?;
    #[derive(Serialize)]
    struct Out {
        provenance: Provenance,
        bandwidth: Bandwidth,
        reference_layer: usize,
        curves: Vec<(TokenKind, Vec<f64>)>,
    }
    write_json(
        a.out.join("cka.json"),
        &Out {
            provenance: Provenance::new("cka", a.seed, args),
            bandwidth: bw,
            reference_layer: a.reference.unwrap_or(store.meta.num_layers),
            curves,
        },
    )?;
    for p in written {
        print!("{}", fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
    }
    Ok(())
}

fn cmd_params(a: &ParamsArgs) -> Result<()> {
    let kind = match a.probe.trim().to_ascii_lowercase().as_str() {
        "aat" | "hybrid" => ProbeKind::AttentiveTokens,
        other => other.parse()?,
    };
    if a.d == 0 || a.classes == 0 || a.num_layers == 0 {
        return Err(Error::Config("--d, --classes and --num-layers must be positive".into()));
    }
    println!("{}", group_thousands(count_params(kind, a.d, a.num_layers, a.classes)));
    Ok(())
}

fn cmd_seedstudy(a: &SeedArgs, args: serde_json::Value) -> Result<()> {
    let data = load_data(&a.data)?;
    let test = data
        .test
        .clone()
        .ok_or_else(|| Error::Config("seed study needs a test split (--test-split)".into()))?;
    let layout = ProbeLayout::resolve(&probe_config(&a.probe)?, &data.store.meta)?;
    let plan = plan_for(&layout, &a.hyper, data.spec.train.indices.len(), a.seeds[0])?;
    let study = seed_study(&layout, &plan, &data.store, &data.spec, &test, &a.seeds, a.workers)?;
    create_dir(&a.out)?;
    #[derive(Serialize)]
    struct Out<'a> {
        provenance: Provenance,
        label: String,
        #[serde(flatten)]
        study: &'a crate::trainer::SeedStudy,
    }
    write_json(
        a.out.join("seedstudy.json"),
        &Out {
            provenance: Provenance::new("seedstudy", a.seeds[0], args),
            label: layout.config.label(),
            study: &study,
        },
    )?;
    for r in &study.runs {
        println!("seed {}: {:.4}", r.seed, r.test_bal_acc);
    }
    println!("mean {:.4}, std {:.4}", study.mean, study.std);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(0), "0");
        assert_eq!(group_thousands(999), "999");
        assert_eq!(group_thousands(1000), "1,000");
        assert_eq!(group_thousands(4_733_962), "4,733,962");
    }
}
