//! Acceptance criteria A1-A10, one `PASS`/`FAIL` line each.
//!
//! Lines are written straight to stdout so they survive output capture.
//! Criteria listed in [`KNOWN_FAILURES`] may print `FAIL` without failing
//! the test; every other criterion must pass.

#[path = "../collapse.rs"]
mod collapse;
#[path = "../gradients.rs"]
mod gradients;
#[path = "../oracles.rs"]
mod oracles;
#[path = "../training.rs"]
mod training;

#[path = "../common/mod.rs"]
mod common;

use std::io::Write;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use h3trans::config::RunConfig;
use h3trans::evaluator::{hr_at_k, ndcg_at_k, Metric, RankResult};
use h3trans::graph::MultiDomainGraph;
use h3trans::model::{hyper_i_refine, hyper_u_refine, AblationVariant, HyperUVars, Refinement};
use h3trans::numeric::{AttentionVars, Tape};
use h3trans::pipeline::{synthesize_prefix, train_and_evaluate, AblationReport, AblationRun};
use h3trans::retrieval::{build_hyperedges_i, RetrievalConfig};
use h3trans::trainer::TrainConfig;
use rand::Rng;

/// Criteria expected to print FAIL; kept in step with the README.
const KNOWN_FAILURES: &[&str] = &["A5"];

const HR_K: usize = 20;

struct Outcome {
    id: &'static str,
    pass: bool,
    detail: String,
}

fn report(o: &Outcome) {
    let tag = if o.pass { "PASS" } else { "FAIL" };
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{tag} {} {}", o.id, o.detail);
    let _ = out.flush();
}

/// Run `checks`, requiring all to pass within `budget`.
fn timed_suite(id: &'static str, what: &str, budget: Duration, checks: &[(&str, fn())]) -> Outcome {
    let start = Instant::now();
    let mut failed = Vec::new();
    for (name, f) in checks {
        if catch_unwind(AssertUnwindSafe(f)).is_err() {
            failed.push(*name);
        }
    }
    let elapsed = start.elapsed();
    let within = elapsed < budget;
    let detail = format!(
        "{what}: {}/{} checks ok{}; {:.1}s (budget {}s)",
        checks.len() - failed.len(),
        checks.len(),
        if failed.is_empty() {
            String::new()
        } else {
            format!(", failed {failed:?}")
        },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    Outcome {
        id,
        pass: failed.is_empty() && within,
        detail,
    }
}

fn a1() -> Outcome {
    timed_suite(
        "A1",
        "finite differences (primitives < 1e-4, end-to-end < 1e-3)",
        Duration::from_secs(30),
        &[
            ("matmul/add/sub/scale", gradients::matmul_add_sub_scale),
            ("shape ops", gradients::shape_ops),
            ("indexing ops", gradients::indexing_ops),
            (
                "nonlinearities",
                gradients::elementwise_and_row_nonlinearities,
            ),
            (
                "attention",
                gradients::composed_attention_with_and_without_bias,
            ),
            ("grouped attention", gradients::grouped_attention_kernel),
            ("end-to-end", gradients::end_to_end_every_variant),
        ],
    )
}

fn a2() -> Outcome {
    timed_suite(
        "A2",
        "oracle equivalence",
        Duration::from_secs(30),
        &[
            ("distances", oracles::distances_match_floyd_warshall),
            (
                "path candidates",
                oracles::path_candidates_match_enumeration,
            ),
            (
                "embedding top-k",
                oracles::embedding_top_k_matches_full_argsort,
            ),
            ("ranks", oracles::ranks_match_sorting),
            ("metrics", oracles::metrics_match_recount),
            (
                "evaluation",
                oracles::evaluation_matches_brute_force_recount,
            ),
            ("k-core", oracles::k_core_matches_peeling_oracle),
            ("binarized k-core", oracles::binarized_fixture_core),
        ],
    )
}

fn a3_checks() {
    for seed in 0..20u64 {
        let mut r = common::rng(seed);
        let (users, t, k) = (
            r.random_range(2..15),
            r.random_range(1..5),
            r.random_range(1..8),
        );
        let ds = common::random_dataset(users, 12, t, 3, seed);
        let mut g = MultiDomainGraph::build(&ds);
        g.build_hyperedges_u();
        let reps = common::rand_tensor(g.user_count() + g.item_count(), 4, seed);
        build_hyperedges_i(
            &mut g,
            Some(&reps),
            &RetrievalConfig {
                k,
                ..RetrievalConfig::default()
            },
            &mut r,
        );
        assert_eq!(g.user_node_count(), users * t);
        assert!(g.hyperedges_u().iter().all(|e| e.nodes.len() == t));
        for (&(item, _), e) in g.hyperedges_i() {
            assert!(e.nodes.len() <= k + 1);
            assert_eq!(e.nodes[0], h3trans::graph::NodeId::Item(item));
        }

        let mut tape = Tape::new();
        let x = tape.constant(common::rand_tensor(6, 9, seed).map(|v| v * 30.0));
        let y = tape.softmax_rows(x);
        for row in 0..6 {
            assert!((tape.value(y).row(row).iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }

        let results: Vec<RankResult> = (0..50)
            .map(|u| RankResult {
                user: u,
                domain: 0,
                held_out_item: 0,
                rank: r.random_range(1..40),
                candidates: 40,
            })
            .collect();
        let mut prev = 0.0;
        for k in 1..=40 {
            let hr = hr_at_k(&results, k).unwrap();
            assert!(hr >= prev && ndcg_at_k(&results, k).unwrap() <= hr);
            prev = hr;
        }
    }
}

fn a3() -> Outcome {
    timed_suite(
        "A3",
        "structural invariants over 20 random worlds",
        Duration::from_secs(60),
        &[("invariants", a3_checks)],
    )
}

fn a4() -> Outcome {
    timed_suite(
        "A4",
        "collapse checks",
        Duration::from_secs(60),
        &[
            ("zero bias", collapse::zero_distance_bias_equals_unbiased),
            (
                "empty candidates",
                collapse::empty_candidate_sets_equal_no_item_refinement,
            ),
            (
                "dense reference",
                collapse::vanilla_on_one_domain_matches_dense_reference,
            ),
            (
                "identity hyper-u",
                collapse::identity_user_attention_without_items_is_vanilla_on_one_domain,
            ),
        ],
    )
}

fn a8() -> Outcome {
    timed_suite(
        "A8",
        "ln(1 + N_neg) within 1e-12 for N_neg in {1, 64}",
        Duration::from_secs(10),
        &[(
            "closed form",
            training::equal_scores_give_log_one_plus_negatives,
        )],
    )
}

fn a9() -> Outcome {
    timed_suite(
        "A9",
        "bitwise logs and checkpoints; resume equals uninterrupted",
        Duration::from_secs(60),
        &[
            ("determinism", training::identical_seeds_train_identically),
            ("resume", training::resumed_training_matches_uninterrupted),
        ],
    )
}

// ---- benchmark runs shared by A5-A7 ----

fn benchmark() -> RunConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/benchmark.cfg");
    RunConfig::load(&path).unwrap()
}

/// Train and evaluate each variant on each seed; returns the time spent
/// per variant.
fn run_cells(
    cfg: &RunConfig,
    domains: usize,
    variants: &[AblationVariant],
    report: &mut AblationReport,
) -> Vec<Duration> {
    let mut spent = vec![Duration::ZERO; variants.len()];
    for &seed in &cfg.ablate.seeds {
        let split = synthesize_prefix(&cfg.gen, seed, domains).unwrap();
        for (n, &variant) in variants.iter().enumerate() {
            let start = Instant::now();
            let model = cfg.model.clone().with_variant(variant);
            let train = TrainConfig {
                seed,
                ..cfg.train.clone()
            };
            let (_, table) = train_and_evaluate(&split, &model, &train, &cfg.eval).unwrap();
            report.runs.push(AblationRun {
                variant,
                domains,
                seed,
                table,
            });
            spent[n] += start.elapsed();
        }
    }
    spent
}

fn hr(
    report: &AblationReport,
    variant: AblationVariant,
    domains: usize,
    domain: usize,
) -> (f64, f64) {
    report
        .mean_se(variant, domains, domain, None, Metric::HR, Some(HR_K))
        .unwrap()
}

fn a5(report: &AblationReport, t: usize, elapsed: Duration) -> Outcome {
    use AblationVariant::{EHIplus, HUplus, Vanilla};
    let mut ordered = 0;
    let mut cells = Vec::new();
    for m in 0..t {
        let (v, h, e) = (
            hr(report, Vanilla, t, m).0,
            hr(report, HUplus, t, m).0,
            hr(report, EHIplus, t, m).0,
        );
        let ok = v < h && h < e && e >= 1.10 * v;
        ordered += ok as usize;
        cells.push(format!("d{m} V={v:.4} HU+={h:.4} EHI+={e:.4}"));
    }
    let within = elapsed < Duration::from_secs(600);
    Outcome {
        id: "A5",
        pass: ordered >= 2 && within,
        detail: format!(
            "HR@{HR_K} Vanilla < HUplus < EHIplus and EHIplus >= 1.10 x Vanilla on {ordered}/{t} domains (need 2); {}; {:.0}s",
            cells.join(", "),
            elapsed.as_secs_f64()
        ),
    }
}

fn a6(report: &AblationReport, t: usize, elapsed: Duration) -> Outcome {
    let points: Vec<(f64, f64)> = (1..=t)
        .map(|tp| hr(report, AblationVariant::EHIplus, tp, 0))
        .collect();
    let trend = points
        .windows(2)
        .all(|w| w[1].0 >= w[0].0 - w[0].1.max(w[1].1));
    let within = elapsed < Duration::from_secs(900);
    let shown: Vec<String> = points
        .iter()
        .enumerate()
        .map(|(i, (m, se))| format!("T'={} {m:.4}+-{se:.4}", i + 1))
        .collect();
    Outcome {
        id: "A6",
        pass: trend && within,
        detail: format!(
            "EHIplus domain-0 HR@{HR_K} nondecreasing within 1 SE: {}; {:.0}s",
            shown.join(" -> "),
            elapsed.as_secs_f64()
        ),
    }
}

/// Seed-averaged HR@K pooled over every domain and the given groups.
fn pooled(report: &AblationReport, variant: AblationVariant, t: usize, groups: [u8; 2]) -> f64 {
    let runs: Vec<&AblationRun> = report
        .runs
        .iter()
        .filter(|r| r.variant == variant && r.domains == t)
        .collect();
    let mut total = 0.0;
    for r in &runs {
        let (mut hits, mut n) = (0.0, 0.0);
        for m in 0..t {
            for g in groups {
                let c = r.table.count(m, Some(g)) as f64;
                hits += r
                    .table
                    .get(m, Some(g), Metric::HR, Some(HR_K))
                    .unwrap_or(0.0)
                    * c;
                n += c;
            }
        }
        total += hits / n;
    }
    total / runs.len() as f64
}

fn a7(report: &AblationReport, t: usize) -> Outcome {
    use AblationVariant::{EHIplus, Vanilla};
    let gain =
        |groups| pooled(report, EHIplus, t, groups) / pooled(report, Vanilla, t, groups) - 1.0;
    let (low, high) = (gain([1, 2]), gain([4, 5]));
    Outcome {
        id: "A7",
        pass: low >= high,
        detail: format!(
            "EHIplus gain over Vanilla, HR@{HR_K}: G1+G2 {:+.1}% vs G4+G5 {:+.1}%",
            100.0 * low,
            100.0 * high
        ),
    }
}

// ---- A10 ----

fn min_time(reps: usize, mut f: impl FnMut()) -> f64 {
    (0..reps)
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_secs_f64()
        })
        .fold(f64::INFINITY, f64::min)
}

fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

fn attention_weights(tape: &mut Tape, d: usize) -> AttentionVars {
    let mut w = (0..4).map(|s| tape.constant(common::rand_tensor(d, d, 100 + s)));
    AttentionVars {
        wq: w.next().unwrap(),
        wk: w.next().unwrap(),
        wv: w.next().unwrap(),
        wo: w.next().unwrap(),
    }
}

fn a10() -> Outcome {
    let (d, heads, users, items) = (32, 4, 128, 128);
    let ts = [2usize, 4, 8, 16];
    let hu: Vec<f64> = ts
        .iter()
        .map(|&t| {
            let h = common::rand_tensor(users * t, d, 1);
            let groups: Vec<Vec<usize>> =
                (0..users).map(|u| (u * t..(u + 1) * t).collect()).collect();
            min_time(7, || {
                let mut tape = Tape::new();
                let x = tape.constant(h.clone());
                let w = attention_weights(&mut tape, d);
                hyper_u_refine(&mut tape, x, &groups, HyperUVars::Attention(w), heads).unwrap();
            })
        })
        .collect();
    let ks = [5usize, 10, 20, 40];
    let hi: Vec<f64> = ks
        .iter()
        .map(|&k| {
            let pool = items + 64;
            let h = common::rand_tensor(pool, d, 2);
            let mut r = common::rng(k as u64);
            let refinements: Vec<Refinement> = (0..items)
                .map(|row| Refinement {
                    row,
                    similar_rows: (0..k).map(|_| r.random_range(items..pool)).collect(),
                    buckets: None,
                })
                .collect();
            min_time(7, || {
                let mut tape = Tape::new();
                let x = tape.constant(h.clone());
                let w = attention_weights(&mut tape, d);
                hyper_i_refine(&mut tape, x, &refinements, None, w, heads).unwrap();
            })
        })
        .collect();
    let xs = |v: &[usize]| v.iter().map(|&x| x as f64).collect::<Vec<_>>();
    let (su, si) = (slope(&xs(&ts), &hu), slope(&xs(&ks), &hi));
    Outcome {
        id: "A10",
        pass: su <= 2.3 && si <= 2.3,
        detail: format!("log-log slope: hyper_u_refine over T {su:.2}, hyper_i_refine over k {si:.2} (limit 2.3)"),
    }
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    for f in [a1, a2, a3, a4, a8, a9] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }

    let cfg = benchmark();
    let t = cfg.gen.domains;
    let mut runs = AblationReport::default();
    let spent = run_cells(
        &cfg,
        t,
        &[
            AblationVariant::Vanilla,
            AblationVariant::HUplus,
            AblationVariant::EHIplus,
        ],
        &mut runs,
    );
    let o = a5(&runs, t, spent.iter().sum());
    report(&o);
    outcomes.push(o);

    // The T' = T point is shared with A5.
    let mut sweep = spent[2];
    for tp in 1..t {
        sweep += run_cells(&cfg, tp, &[AblationVariant::EHIplus], &mut runs)[0];
    }
    let o = a6(&runs, t, sweep);
    report(&o);
    outcomes.push(o);
    let o = a7(&runs, t);
    report(&o);
    outcomes.push(o);

    let o = a10();
    report(&o);
    outcomes.push(o);

    let unexpected: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.pass && !KNOWN_FAILURES.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let known: Vec<&str> = outcomes
        .iter()
        .filter(|o| !o.pass && KNOWN_FAILURES.contains(&o.id))
        .map(|o| o.id)
        .collect();
    let _ = writeln!(
        std::io::stdout(),
        "acceptance: {} of {} criteria pass; known failures {known:?}",
        outcomes.iter().filter(|o| o.pass).count(),
        outcomes.len()
    );
    assert!(unexpected.is_empty(), "unexpected failures: {unexpected:?}");
}
