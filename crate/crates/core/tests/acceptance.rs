//! Acceptance report: one PASS/FAIL line per criterion. Runs as a plain
//! binary (`harness = false`). Failed criteria are reported, not hidden; set
//! `WEAKSHOT_ACCEPTANCE_STRICT=1` to also turn them into a non-zero exit.

mod common;

use std::collections::BTreeMap;
use std::time::Instant;

use weakshot_core::detnet::MaskAttach;
use weakshot_core::evalkit::curve_csv;
use weakshot_core::simnet::assign_weights;
use weakshot_core::synthdata::{generate_corpus, CorpusConfig};
use weakshot_core::trainer::{initial_phase, mask_mass, refine_phase, run_pipeline, similarity_eval, Dataset, EvalContext, TrainingConfig, TrainingState, Weighting};

const SEEDS: [u64; 3] = [222, 223, 224];

struct Report {
    failed: usize,
    started: Instant,
}

impl Report {
    fn line(&mut self, name: &str, ok: bool, detail: String) {
        if !ok {
            self.failed += 1;
        }
        println!("{} {name}: {detail} [{:.0}s]", if ok { "PASS" } else { "FAIL" }, self.started.elapsed().as_secs_f64());
    }
}

#[derive(Debug, Clone, Copy)]
struct RunSummary {
    first_map: f64,
    final_map: f64,
    final_recall: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    v[v.len() / 2]
}

fn main() {
    let mut rep = Report { failed: 0, started: Instant::now() };

    let t = Instant::now();
    let oracles = [common::check_mil(1000, 1), common::check_ngwp(1000, 2), common::check_simloss(1000, 3), common::check_ap(1000, 4)];
    let ok = oracles.iter().all(|o| o.passed(1e-12)) && t.elapsed().as_secs() < 60;
    let detail = oracles.iter().map(|o| format!("{} n={} err={:.1e} mismatches={}", o.name, o.instances, o.max_abs_err, o.exact_mismatches)).collect::<Vec<_>>().join("; ");
    rep.line("math oracles", ok, detail);

    let t = Instant::now();
    let grads = common::gradient_suite();
    let ok = grads.iter().all(|g| g.max_rel_err < 1e-4) && t.elapsed().as_secs() < 300;
    rep.line("gradient suite", ok, grads.iter().map(|g| format!("{} {:.1e}", g.name, g.max_rel_err)).collect::<Vec<_>>().join("; "));

    let (corpus, held) = generate_corpus(&CorpusConfig::default()).expect("default corpus");
    let data = Dataset::from_corpus(&corpus).expect("dataset");
    let ctx = EvalContext::new(&held);
    let cfg = TrainingConfig::default();

    let mut inv = common::invariant_sweep(1000, 5);
    let st = TrainingState::new(cfg.clone(), &data).expect("state");
    let first_ones = data.source.iter().all(|s| {
        let (sup, neg) = st.supervision(s, true);
        neg == 1.0 && sup.iter().all(|b| b.weight == 1.0)
    }) && data.target.iter().all(|s| st.supervision(s, false).0.is_empty());
    inv.push(("first-iteration weights all 1", first_ones));
    let ok = inv.iter().all(|i| i.1);
    rep.line("invariant suite", ok, inv.iter().map(|(n, h)| format!("{n}={h}")).collect::<Vec<_>>().join("; "));

    let ones = assign_weights(&[1.0; 64], 8);
    let ident = assign_weights(&[1.0, 0.0, 0.0, 1.0], 2);
    rep.line("weight fixed cases", ones.iter().all(|&w| w == 1.0) && ident == [0.5, 0.5], format!("A=1 -> {:?}; identity -> {ident:?}", &ones[..2]));

    let t = Instant::now();
    let frac = common::outlier_trials(200, 6);
    rep.line("outlier suppression", frac >= 0.95 && t.elapsed().as_secs() < 300, format!("outlier lowest in {:.1}% of 200 trials", 100.0 * frac));

    let s1 = cfg.step1_loss(1.0, 2.0, 3.0);
    let s2 = cfg.step2_loss(2.0, 1.0);
    let ok = s1 == 1.0 + 1.0 * 2.0 + 0.1 * 3.0 && s2 == 2.0 + 0.1 * 1.0 && (s1 - 3.3).abs() < 1e-15 && (s2 - 2.1).abs() < 1e-15;
    rep.line("loss coefficients", ok, format!("step1 {s1} step2 {s2} (alpha {} beta {} gamma {})", cfg.alpha, cfg.beta, cfg.gamma));

    // End to end. Configs that differ only in weighting share their first
    // iteration exactly, so three initial phases serve six ablations.
    let e2e = Instant::now();
    let mut runs: BTreeMap<&str, Vec<RunSummary>> = BTreeMap::new();
    let mut sim_f1 = None;
    let mut full_csv = None;
    let mut masses = Vec::new();
    for seed in SEEDS {
        for (mask, attach, variants) in [
            (true, MaskAttach::BMinus1, vec![("full", Weighting::Simnet), ("mask-only", Weighting::Uniform)]),
            (true, MaskAttach::BMinus2, vec![("mask-b2", Weighting::Uniform)]),
            (false, MaskAttach::BMinus1, vec![("sim-only", Weighting::Simnet), ("cosine", Weighting::Cosine), ("plain", Weighting::Uniform)]),
        ] {
            let mut c = cfg.clone();
            c.seed = seed;
            c.use_mask = mask;
            c.attach = attach;
            let init = initial_phase(&c, &data, &ctx).expect("initial phase");
            if mask && attach == MaskAttach::BMinus1 {
                let base = mask_mass(&init.state, &data.source_val).expect("mask");
                let novel = mask_mass(&init.state, &data.test).expect("mask");
                masses.push((base, novel));
            }
            for (name, weighting) in variants {
                let want_f1 = seed == 222 && name == "full";
                let out = refine_phase(init.clone(), weighting, &ctx, |st, rec| {
                    if want_f1 && rec.metrics.iteration == st.cfg.iterations {
                        sim_f1 = Some(similarity_eval(st, 0.5, 64)?);
                    }
                    Ok(())
                })
                .expect("refinement");
                let m = out.metrics();
                println!("  seed {seed} {name}: mAP by iteration {:?}", m.iter().map(|x| format!("{:.3}", x.map)).collect::<Vec<_>>());
                if seed == 222 && name == "full" {
                    full_csv = Some(curve_csv(&m));
                }
                runs.entry(name).or_default().push(RunSummary {
                    first_map: m[1].map,
                    final_map: m.last().expect("records").map,
                    final_recall: m.last().expect("records").candidate_recall,
                });
            }
        }
    }

    let (base, novel) = match &sim_f1 {
        Some(rows) => (rows[0].1.f1, rows[1].1.f1),
        None => (0.0, 0.0),
    };
    rep.line("similarity generalisation", base >= 0.8 && novel >= 0.8 && (base - novel).abs() <= 0.05, format!("base F1 {base:.3}, novel F1 {novel:.3}"));

    // Module invariant rather than a headline criterion, reported alongside.
    let fmt = |v: &[(f64, f64)]| v.iter().map(|(i, o)| format!("{i:.3}/{o:.3}")).collect::<Vec<_>>().join(" ");
    let base: Vec<(f64, f64)> = masses.iter().map(|m| m.0).collect();
    let novel: Vec<(f64, f64)> = masses.iter().map(|m| m.1).collect();
    let mean = |v: &[(f64, f64)]| v.iter().fold((0.0, 0.0), |a, m| (a.0 + m.0 / v.len() as f64, a.1 + m.1 / v.len() as f64));
    let (bi, bo) = mean(&base);
    rep.line(
        "mask mass inside > outside (source_val)",
        bi > bo,
        format!("inside/outside per seed, base on source_val {}; novel on test {}", fmt(&base), fmt(&novel)),
    );

    let full222 = runs["full"][0];
    rep.line(
        "iteration gain (seed 222)",
        full222.final_map >= full222.first_map + 0.02,
        format!("iteration 1 mAP {:.4}, iteration {} mAP {:.4}", full222.first_map, cfg.iterations, full222.final_map),
    );

    let med = |name: &str, f: fn(&RunSummary) -> f64| median(runs[name].iter().map(f).collect());
    let fin = |r: &RunSummary| r.final_map;
    let (full, mask_only, sim_only, plain, b2, cosine) = (med("full", fin), med("mask-only", fin), med("sim-only", fin), med("plain", fin), med("mask-b2", fin), med("cosine", fin));
    let medians = format!("medians full {full:.4} mask-only {mask_only:.4} sim-only {sim_only:.4} plain {plain:.4} mask-b2 {b2:.4} cosine {cosine:.4}");
    rep.line("ablation: full > mask-only > plain", full > mask_only && mask_only > plain, medians.clone());
    rep.line("ablation: full > sim-only > plain", full > sim_only && sim_only > plain, medians.clone());
    rep.line("ablation: mask B-1 >= mask B-2", mask_only >= b2, medians.clone());
    let rec = |r: &RunSummary| r.final_recall;
    let (rm, rn) = (med("full", rec), med("sim-only", rec));
    rep.line("candidate recall with mask > without", rm > rn, format!("median recall with mask {rm:.4}, without {rn:.4}"));
    rep.line("similarity weighting > cosine weighting", sim_only > cosine, medians);
    let minutes = e2e.elapsed().as_secs_f64() / 60.0;
    rep.line("end-to-end runtime", minutes < 45.0, format!("{minutes:.1} min for {} seeds", SEEDS.len()));

    let mut c = cfg.clone();
    c.seed = 222;
    let again = curve_csv(&run_pipeline(&c, &data, &ctx).expect("pipeline").metrics());
    let first = full_csv.unwrap_or_default();
    rep.line("determinism", first.as_bytes() == again.as_bytes(), format!("{} bytes, identical={}", again.len(), first == again));

    println!("{} failed, total {:.0}s", rep.failed, rep.started.elapsed().as_secs_f64());
    if rep.failed > 0 && std::env::var_os("WEAKSHOT_ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}
