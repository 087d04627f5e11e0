//! One PASS/FAIL line per acceptance criterion. Exits non-zero if any fails.

mod common;

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::{fd_layer, gate_case, layer_fd, max_grad_error, objective_error, oracle_gate, probe, run_gate_k, small_spec};
use moe_ensemble::analyzer::{improvement_table, read_points_file, Selector};
use moe_ensemble::checkpoint::{adapt_checkpoint_be, adapt_vmoe_checkpoint, Checkpoint};
use moe_ensemble::experiment::{run_experiment, run_sweep_rows, ExperimentConfig, SweepConfig, SweepRow};
use moe_ensemble::losses::LossMode;
use moe_ensemble::metrics::{ece, ensemble_flops, flops_estimate, forward_flops, kl, kl_diversity, nll_error, EvalAccumulator};
use moe_ensemble::model::{build_model, BeInit, ForwardOptions, Model, ModelSpec, PredictionBundle, Variant};
use moe_ensemble::moe_layers::{
    be_as_moe_view, be_dense_forward, be_graph, expert_graph, split_members, tile, untile, BatchEnsembleDense, ExpertMLP, ExpertVars,
    InitScheme, MoeMode,
};
use moe_ensemble::numerics::{dense, softmax_rows, Rng, Tensor};
use moe_ensemble::par::ExecPolicy;
use moe_ensemble::routing::Phase;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within(start: Instant, limit: Duration) -> Result<Duration, String> {
    let t = start.elapsed();
    ensure(t < limit, || format!("took {t:.1?}, limit {limit:?}"))?;
    Ok(t)
}

fn repo_path(rel: &str) -> std::path::PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn routing_oracle() -> Check {
    let start = Instant::now();
    let mut rng = Rng::new(2024);
    for i in 0..10_000 {
        let c = gate_case(&mut rng, i % 2 == 1);
        let (gi, gw) = run_gate_k(&c);
        let (oi, ow) = oracle_gate(&c);
        ensure(gi == oi, || format!("instance {i}: indices {gi:?} vs {oi:?}"))?;
        let diff = gw.iter().zip(&ow).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        ensure(diff <= 1e-12, || format!("instance {i}: weights differ by {diff:.3e}"))?;
    }
    let t = within(start, Duration::from_secs(5))?;
    Ok(format!("10000 instances in {t:.2?}"))
}

fn gradient_fidelity() -> Check {
    let start = Instant::now();
    let mut worst: Vec<(&str, f64)> = Vec::new();
    let mut rng = Rng::new(7);

    let ps = [rng.gaussian(&[3, 4]), rng.gaussian(&[4, 5]), rng.gaussian(&[5])];
    worst.push(("dense", max_grad_error(&ps, |g, v| {
        let y = dense(g, v[0], v[1], Some(v[2]))?;
        probe(g, y, 1)
    })));
    let ps = [rng.gaussian(&[3, 6])];
    worst.push(("softmax", max_grad_error(&ps, |g, v| {
        let y = g.softmax(v[0])?;
        probe(g, y, 2)
    })));
    let e = ExpertMLP::init_with(3, 5, 4, InitScheme::Lecun, &mut rng);
    let ps = [rng.gaussian(&[4, 3]), e.w1, e.b1, e.w2, e.b2];
    worst.push(("expert_mlp", max_grad_error(&ps, |g, v| {
        let ev = ExpertVars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
        let y = expert_graph(g, v[0], &ev, None)?;
        probe(g, y, 3)
    })));
    let moe = fd_layer(10, 4, 1, 2, MoeMode::Moe);
    worst.push(("moe", layer_fd(&moe, &Rng::new(11).gaussian(&[5, 4]), 10)));
    let pbe = fd_layer(20, 4, 2, 1, MoeMode::Pbe);
    worst.push(("pbe", layer_fd(&pbe, &tile(&Rng::new(21).gaussian(&[3, 4]), 2), 20)));
    let mh = fd_layer(40, 4, 1, 2, MoeMode::Multihead);
    worst.push(("multihead", layer_fd(&mh, &Rng::new(41).gaussian(&[4, 4]), 40)));
    let ps = [rng.gaussian(&[6, 4]), rng.gaussian(&[4, 5]), rng.gaussian(&[3, 4]), rng.gaussian(&[3, 5])];
    worst.push(("batch_ensemble", max_grad_error(&ps, |g, v| {
        let y = be_graph(g, v[0], v[1], v[2], v[3])?;
        probe(g, y, 4)
    })));
    for (name, variant, m) in [("total_loss vmoe", Variant::Vmoe, 1), ("total_loss pbe", Variant::Pbe, 2), ("total_loss be", Variant::Be, 2)] {
        let mut spec = small_spec(variant, m);
        if variant == Variant::Pbe {
            spec.k = 1;
        }
        let model = build_model(&spec, &mut Rng::new(5)).map_err(|e| e.to_string())?;
        worst.push((name, objective_error(&model, LossMode::MemberAvg, 0.1)));
    }

    for (name, err) in &worst {
        ensure(*err < 1e-4, || format!("{name}: rel error {err:.3e}"))?;
    }
    let t = within(start, Duration::from_secs(60))?;
    let max = worst.iter().map(|w| w.1).fold(0.0, f64::max);
    Ok(format!("{} checks, max rel error {max:.2e}, {t:.2?}", worst.len()))
}

fn be_view_equivalence() -> Check {
    let mut rng = Rng::new(99);
    let mut max = 0.0f64;
    for _ in 0..100 {
        let (d, l, m, b) = (1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(6), 1 + rng.index(4));
        let be = BatchEnsembleDense { u: rng.gaussian(&[d, l]), r: rng.gaussian(&[m, d]), s: rng.gaussian(&[m, l]) };
        let h = rng.gaussian(&[m * b, d]);
        let dense = be_dense_forward(&h, &be).map_err(|e| e.to_string())?;
        let view = be_as_moe_view(&be).forward(&h).map_err(|e| e.to_string())?;
        max = max.max(dense.max_abs_diff(&view));
    }
    ensure(max <= 1e-12, || format!("max diff {max:.3e}"))?;
    Ok(format!("100 instances, max diff {max:.1e}"))
}

fn adapted(base: &Model, variant: Variant, m: usize) -> Model {
    adapt_vmoe_checkpoint(&Checkpoint::from_model(base).unwrap(), variant, m).unwrap().into_model()
}

fn structural_reductions() -> Check {
    let base = build_model(&ModelSpec::tiny(Variant::Vmoe, 5).with_k(2), &mut Rng::new(1)).unwrap();
    let x = Rng::new(2).gaussian(&[6, 8, 8, 3]);
    let rng = Rng::new(3);

    let pbe1 = adapted(&base, Variant::Pbe, 1);
    for opts in [ForwardOptions::eval(), ForwardOptions::train()] {
        ensure(pbe1.predict(&x, &rng, opts).unwrap() == base.predict(&x, &rng, opts).unwrap(), || "pbe(M=1) differs from vmoe".into())?;
    }

    let mut ot = adapted(&base, Variant::OnlyTiling, 2);
    ot.spec.noise_multiplier = 0.0;
    let quiet = ot.predict(&x, &rng, ForwardOptions::eval()).unwrap();
    let kl0 = kl_diversity(&quiet.member_probs).unwrap();
    ensure(kl0 == Some(0.0), || format!("only_tiling without noise has KL {kl0:?}"))?;

    let mut r = Rng::new(4);
    for _ in 0..50 {
        let (rows, cols, m) = (1 + r.index(5), 1 + r.index(4), 1 + r.index(4));
        let t0 = r.gaussian(&[rows, cols]);
        let t = tile(&t0, m);
        ensure(untile(&t, m).unwrap() == t0, || "untile(tile(x)) != x".into())?;
        ensure(split_members(&t, m).unwrap().iter().all(|p| *p == t0), || "split member differs".into())?;
    }

    let vit = build_model(&ModelSpec::tiny(Variant::Vit, 5), &mut Rng::new(5)).unwrap();
    let be = adapt_checkpoint_be(&Checkpoint::from_model(&vit).unwrap(), 2, BeInit::Gaussian, &mut Rng::new(6)).unwrap().into_model();
    for model in [adapted(&base, Variant::Pbe, 2), adapted(&base, Variant::OnlyTiling, 2), be] {
        for phase in [Phase::Eval, Phase::Train] {
            let deferred = ForwardOptions { phase, dropout: false, naive_tiling: false };
            let naive = ForwardOptions { naive_tiling: true, ..deferred };
            ensure(model.predict(&x, &rng, deferred).unwrap() == model.predict(&x, &rng, naive).unwrap(), || {
                format!("{} deferred != naive ({phase:?})", model.spec.variant.name())
            })?;
        }
    }
    Ok("pbe(M=1)==vmoe, KL(only_tiling, sigma 0)=0, tile round-trips, deferred==naive".into())
}

fn sweep(name: &str, out: &Path) -> Result<Vec<SweepRow>, String> {
    let mut s = SweepConfig::load(&repo_path(&format!("configs/{name}"))).map_err(|e| e.to_string())?;
    s.base.output_dir = out.to_path_buf();
    let rows = run_sweep_rows(&s, ExecPolicy::Parallel).map_err(|e| e.to_string())?;
    Ok(rows.into_iter().map(|(_, _, r)| r).collect())
}

fn ablation_trend() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep("ablation.json", dir.path())?;
    let find = |v: &str| rows.iter().find(|r| r.variant == v).ok_or_else(|| format!("no {v} row"));
    let (pbe, ot, op) = (find("pbe")?, find("only_tiling")?, find("only_partitioning")?);
    ensure(pbe.seeds == 5, || format!("{} seeds", pbe.seeds))?;
    ensure(pbe.metric < ot.metric && pbe.metric < op.metric, || {
        format!("NLL pbe {:.4}, only_tiling {:.4}, only_partitioning {:.4}", pbe.metric, ot.metric, op.metric)
    })?;
    let (kp, ko) = (pbe.kl_diversity.unwrap_or(0.0), ot.kl_diversity.unwrap_or(f64::INFINITY));
    ensure(kp > 10.0 * ko, || format!("KL pbe {kp:.4e} vs only_tiling {ko:.4e} ({:.2}x)", kp / ko))?;
    let t = within(start, Duration::from_secs(600))?;
    Ok(format!(
        "NLL pbe {:.4} < only_tiling {:.4}, only_partitioning {:.4}; KL ratio {:.1}x; {t:.0?}",
        pbe.metric,
        ot.metric,
        op.metric,
        kp / ko
    ))
}

fn deep_ensemble_trend() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let rows = sweep("deep_ensemble_grid.json", dir.path())?;
    let mut parts = Vec::new();
    for k in [1, 2] {
        let at = |m: usize| {
            rows.iter().find(|r| r.k == Some(k) && r.m == m).ok_or_else(|| format!("no K={k} M={m} row"))
        };
        let (one, two) = (at(1)?, at(2)?);
        ensure(one.seeds == 5 && two.seeds == 5, || "expected 5 seeds".into())?;
        ensure(two.metric <= one.metric, || format!("K={k}: NLL M=1 {:.4} < M=2 {:.4}", one.metric, two.metric))?;
        parts.push(format!("K={k}: {:.4} -> {:.4}", one.metric, two.metric));
    }
    let t = within(start, Duration::from_secs(900))?;
    Ok(format!("{}; {t:.0?}", parts.join(", ")))
}

fn flops_ratios() -> Check {
    for preset in ["S/32", "B/32", "B/16", "L/32", "L/16", "H/14"] {
        let single = flops_estimate(&ModelSpec::preset(preset).unwrap(), 1, 1, true).unwrap();
        for m in 1..=4 {
            let e = ensemble_flops(single, m);
            ensure(e == single * m as f64, || format!("{preset}: M={m} cost {e} vs {}", single * m as f64))?;
        }
    }
    let mut spec = ModelSpec::preset("L/16").unwrap().with_k(2).with_m(2);
    spec.variant = Variant::Pbe;
    let saving = forward_flops(&spec).unwrap().tiling_saving();
    ensure((0.42..=0.52).contains(&saving), || format!("L/16 saving {saving:.4}"))?;
    Ok(format!("ensemble cost exactly M x single; L/16 deferred saving {:.2}%", 100.0 * saving))
}

fn analyzer_reproduction() -> Check {
    let points = read_points_file(&repo_path("data/paper_results.csv")).map_err(|e| e.to_string())?;
    let selector = Selector { variant: Some("vit".into()), k: None, m: None };
    let rows = improvement_table(&points, &selector, "H/14").map_err(|e| e.to_string())?;
    let pbe: Vec<_> = rows.iter().filter(|r| r.comparison.starts_with("pbe")).collect();
    let want = [("S/32", 9.82), ("B/32", 9.53), ("L/32", 3.76), ("L/16", 5.38), ("H/14", 4.27)];
    ensure(pbe.len() == want.len(), || format!("{} pbe rows", pbe.len()))?;
    for (row, (fam, w)) in pbe.iter().zip(want) {
        ensure(row.family == fam, || format!("family order: {} vs {fam}", row.family))?;
        ensure((row.raw_pct - w).abs() <= 0.2, || format!("{fam}: raw {:.2}% vs {w}%", row.raw_pct))?;
    }
    ensure(pbe.windows(2).all(|w| w[0].normalized_pct < w[1].normalized_pct), || "normalized column not increasing".into())?;
    let h = pbe.last().unwrap();
    ensure(h.normalized_pct == h.raw_pct && (h.raw_pct - 4.27).abs() <= 0.2, || format!("H/14 normalized {:.2}%", h.normalized_pct))?;
    let raw: Vec<String> = pbe.iter().map(|r| format!("{:.2}", r.raw_pct)).collect();
    Ok(format!("raw ({})%, normalized increasing to {:.2}%", raw.join(", "), h.normalized_pct))
}

fn metric_units() -> Check {
    let mut rng = Rng::new(11);
    let n = 100_000;
    let probs = softmax_rows(&rng.gaussian(&[n, 4]).scale(2.0)).unwrap();
    let u = rng.uniform(&[n]);
    let labels: Vec<usize> = (0..n)
        .map(|i| {
            let mut acc = 0.0;
            for (j, p) in probs.row(i).iter().enumerate() {
                acc += p;
                if u.data()[i] < acc {
                    return j;
                }
            }
            3
        })
        .collect();
    let e = ece(&probs, &labels, 15).unwrap();
    ensure(e < 0.01, || format!("calibrated ECE {e:.4}"))?;

    let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.6, 0.4]]);
    let hand_ece = ece(&p, &[0, 1], 15).unwrap();
    ensure((hand_ece - 0.35).abs() < 1e-4, || format!("hand ECE {hand_ece}"))?;
    let (nll, err) = nll_error(&p, &[0, 1]).unwrap();
    let want = -(0.9f64.ln() + 0.4f64.ln()) / 2.0;
    ensure((nll - want).abs() < 1e-4 && err == 50.0, || format!("hand NLL {nll}, error {err}"))?;
    let k = kl(&[0.5, 0.5], &[0.25, 0.75]);
    ensure((k - 0.1438).abs() < 1e-4, || format!("hand KL {k}"))?;

    for batch in 0..1000 {
        let (m, b, c) = (1 + rng.index(4), 1 + rng.index(16), 2 + rng.index(5));
        let members: Vec<Tensor> = (0..m).map(|_| softmax_rows(&rng.gaussian(&[b, c]).scale(3.0)).unwrap()).collect();
        let bundle = PredictionBundle::from_members(&members).unwrap();
        let y: Vec<usize> = (0..b).map(|_| rng.index(c)).collect();
        let mut acc = EvalAccumulator::new(m);
        acc.update(&bundle, &y).unwrap();
        ensure(acc.nll() <= acc.mean_member_nll() + 1e-12, || format!("batch {batch}: ensemble NLL above member mean"))?;
    }
    Ok(format!("calibrated ECE {e:.4}; hand ECE/NLL/KL match; ensemble NLL <= member mean on 1000 batches"))
}

fn determinism() -> Check {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::load(&repo_path("configs/tiny_pbe.json")).map_err(|e| e.to_string())?;
    cfg.output_dir = a.path().to_path_buf();
    run_experiment(&cfg, ExecPolicy::Parallel).map_err(|e| e.to_string())?;
    cfg.output_dir = b.path().to_path_buf();
    run_experiment(&cfg, ExecPolicy::Parallel).map_err(|e| e.to_string())?;
    let mut files = vec!["summary.csv".to_string()];
    for r in 0..cfg.repetitions {
        files.push(format!("seed_{r}/model.ckpt"));
        files.push(format!("seed_{r}/upstream.ckpt"));
    }
    for f in &files {
        let (x, y) = (fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?, fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?);
        ensure(x == y, || format!("{f} differs between runs"))?;
    }
    Ok(format!("{} files byte-identical", files.len()))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("routing oracle equivalence", routing_oracle),
        ("gradient fidelity", gradient_fidelity),
        ("BE as MoE view equivalence", be_view_equivalence),
        ("structural reductions", structural_reductions),
        ("ablation trend", ablation_trend),
        ("deep-ensemble trend", deep_ensemble_trend),
        ("FLOPs ratios", flops_ratios),
        ("analyzer reproduction", analyzer_reproduction),
        ("metric unit checks", metric_units),
        ("determinism", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
