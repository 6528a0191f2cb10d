//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

mod common;

use std::time::Instant;

use attnlab::dataset::{EmbeddingKind, GenMode};
use attnlab::experiment::{
    generate_dataset, run_experiment, ExperimentConfig, ExperimentName, ExperimentReport, HeadChoice,
    InstanceSpec, DEFAULT_SEED,
};
use attnlab::graph::GraphSet;
use attnlab::rng::{self, derive_seed};
use attnlab::selftest;
use attnlab::svm::{build_constraints, solve_graph_svm, MatrixSubspace, SvmOptions, SvmStatus};
use attnlab::attention::LossKind;
use rand::Rng;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome { passed, detail: detail.into() }
}

fn experiment(name: ExperimentName) -> ExperimentReport {
    run_experiment(&ExperimentConfig::new(name)).expect("experiment runs")
}

fn checks_line(r: &ExperimentReport) -> String {
    r.checks
        .iter()
        .map(|c| format!("{} {:.4} (limit {})", c.name, c.value, c.threshold))
        .collect::<Vec<_>>()
        .join(", ")
}

fn cyclic_global() -> Outcome {
    let r = experiment(ExperimentName::CyclicGlobal);
    outcome(r.passed(), checks_line(&r))
}

fn acyclic_global() -> Outcome {
    let r = experiment(ExperimentName::AcyclicGlobal);
    outcome(r.passed(), checks_line(&r))
}

fn descent() -> Outcome {
    let v = selftest::descent_violations(20, 500, derive_seed(DEFAULT_SEED, 103)).unwrap();
    outcome(v == 0, format!("{v} violations in 20 x 500 steps"))
}

fn convexity() -> Outcome {
    let chord = selftest::chord_excess(1000, derive_seed(DEFAULT_SEED, 104)).unwrap();
    let gap = selftest::strict_midpoint_gap(100, derive_seed(DEFAULT_SEED, 105)).unwrap();
    let strict_ok = gap.is_some_and(|g| g >= 1e-8);
    outcome(
        chord <= 1e-9 && strict_ok,
        format!("max chord excess {chord:.2e} (<= 1e-9), min midpoint gap {gap:?} (>= 1e-8)"),
    )
}

fn negative_correlation() -> Outcome {
    let x = selftest::max_svm_inner_product(200, derive_seed(DEFAULT_SEED, 106)).unwrap();
    outcome(x < 0.0, format!("max <grad, W_svm> over 200 draws {x:.3e}"))
}

fn svm_correctness() -> Outcome {
    let seed = derive_seed(DEFAULT_SEED, 107);
    let opts = SvmOptions::default();
    let (mut solved, mut eq, mut slack, mut kkt, mut ortho) = (0, 0f64, f64::INFINITY, 0f64, 0f64);
    let (mut oracle_runs, mut oracle_err) = (0, 0f64);
    let mut oracle_fail = 0;
    for i in 0..200u64 {
        let s = derive_seed(seed, i);
        let mut r = rng::seeded(derive_seed(s, 7));
        let k = r.random_range(3..=6usize);
        let d = r.random_range(k..=k + 2);
        let spec = InstanceSpec {
            k,
            d,
            n: r.random_range(2..=6),
            t: r.random_range(2..=5),
            mode: if i % 3 == 0 { GenMode::Acyclic } else { GenMode::Cyclic },
            embedding: EmbeddingKind::UnitSphere,
            head: HeadChoice::None,
            noise: 0.0,
            loss: LossKind::Log,
            seed: s,
        };
        let ds = generate_dataset::<f64>(&spec).unwrap();
        let c = build_constraints(&GraphSet::from_dataset(&ds));
        let sol = solve_graph_svm(&c, &ds.embedding, &opts);
        if sol.status != SvmStatus::Solved {
            continue;
        }
        solved += 1;
        eq = eq.max(sol.max_equality_violation());
        if let Some(m) = sol.min_inequality_slack() {
            slack = slack.min(m);
        }
        kkt = kkt.max(sol.kkt_residual);
        let fin = MatrixSubspace::span(&c.equalities, &ds.embedding);
        ortho = ortho.max(fin.project(&sol.w).frob_norm());
        if c.len() <= 20 && d <= 6 {
            oracle_runs += 1;
            match common::brute_force_svm(&c, &ds.embedding) {
                Some(w) => oracle_err = oracle_err.max((&w - &sol.w).frob_norm()),
                None => oracle_fail += 1,
            }
        }
    }
    let passed = solved == 200
        && eq <= 1e-6
        && slack >= -1e-6
        && kkt <= 1e-5
        && oracle_runs > 0
        && oracle_fail == 0
        && oracle_err <= 1e-5
        && ortho <= 1e-8;
    outcome(
        passed,
        format!(
            "{solved}/200 solved, eq {eq:.1e}, margin slack {slack:.1e}, kkt {kkt:.1e}, \
             oracle diff {oracle_err:.1e} on {oracle_runs} ({oracle_fail} infeasible), \
             |proj_fin W_svm| {ortho:.1e}"
        ),
    )
}

fn feasibility() -> Outcome {
    let rate = selftest::certificate_rate(100, derive_seed(DEFAULT_SEED, 108)).unwrap();
    let r = experiment(ExperimentName::Feasibility);
    outcome(
        rate == 1.0 && r.passed(),
        format!("certificate rate {rate}, {}", checks_line(&r)),
    )
}

fn reduction() -> Outcome {
    let g = selftest::reduction_gap(50, derive_seed(DEFAULT_SEED, 109)).unwrap();
    outcome(g <= 1e-6, format!("max |W_joint - sum W_k| {g:.2e} (<= 1e-6)"))
}

fn gradients() -> Outcome {
    let e = selftest::gradient_check(50, derive_seed(DEFAULT_SEED, 110), false).unwrap();
    let g = selftest::reduced_gradient_gap(50, derive_seed(DEFAULT_SEED, 111)).unwrap();
    outcome(
        e < 1e-5 && g <= 1e-12,
        format!("max relative error {e:.2e} (< 1e-5), reduced path gap {g:.2e} (<= 1e-12)"),
    )
}

fn scc_oracle() -> Outcome {
    let bad = selftest::scc_mismatches(500, derive_seed(DEFAULT_SEED, 112));
    outcome(bad == 0, format!("{bad} mismatches in 500 graphs"))
}

fn rate_bound() -> Outcome {
    let r = experiment(ExperimentName::RateCheck);
    let worst = r.summary.get("max_gap_over_bound").copied().unwrap_or(f64::NAN);
    outcome(r.passed(), format!("{}, max gap/bound {worst:.3}", checks_line(&r)))
}

fn reg_path() -> Outcome {
    let r = experiment(ExperimentName::RegPath);
    outcome(r.passed(), checks_line(&r))
}

fn zero_svm_stasis() -> Outcome {
    let x = selftest::zero_svm_drift(6, 500, derive_seed(DEFAULT_SEED, 113)).unwrap();
    outcome(x <= 1e-9, format!("max drift of the S_fin-orthogonal part {x:.2e} (<= 1e-9)"))
}

fn local_convergence() -> Outcome {
    let sq = experiment(ExperimentName::LocalSquared);
    let ce = experiment(ExperimentName::LocalCe);
    outcome(
        sq.passed(),
        format!("squared: {}; cross-entropy (informational): {}", checks_line(&sq), checks_line(&ce)),
    )
}

fn main() {
    let criteria: [Criterion; 14] = [
        ("cyclic global convergence", cyclic_global),
        ("acyclic convergence", acyclic_global),
        ("sufficient descent", descent),
        ("convexity", convexity),
        ("negative correlation", negative_correlation),
        ("svm correctness", svm_correctness),
        ("feasibility", feasibility),
        ("reduction", reduction),
        ("gradient correctness", gradients),
        ("scc oracle", scc_oracle),
        ("rate bound", rate_bound),
        ("regularization path", reg_path),
        ("zero-svm stasis", zero_svm_stasis),
        ("local convergence", local_convergence),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let o = f();
        let secs = start.elapsed().as_secs_f64();
        println!(
            "[{}] {:>2} {name}: {} ({secs:.1} s)",
            if o.passed { "PASS" } else { "FAIL" },
            i + 1,
            o.detail
        );
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
