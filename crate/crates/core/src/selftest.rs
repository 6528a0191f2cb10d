//! Small-size property suite: gradients, descent, convexity, SVM optimality,
//! component oracle, orthogonality, decoupling and the zero-SVM invariant.

use std::time::Instant;

use rand::Rng;
use serde::Serialize;

use crate::attention::{LossKind, Objective, Scoring};
use crate::dataset::{
    make_embeddings, make_head, Dataset, EmbeddingKind, GenMode, HeadKind, Sample,
};
use crate::error::Result;
use crate::experiment::{HeadChoice, Instance, InstanceSpec};
use crate::graph::{scc, TokenPriorityGraph};
use crate::linalg::Matrix;
use crate::rng::{self, derive_seed};
use crate::svm::{
    build_constraints, check_feasibility, solve_graph_svm, solve_per_last_token, verify,
    MatrixSubspace, SvmOptions, SvmStatus, PRIMAL_TOL,
};

#[derive(Clone, Copy, Debug, Default)]
pub struct SelftestOptions {
    pub seed: u64,
    /// Flips the sign of the largest analytic gradient entry before the gradient
    /// check, which must then fail.
    pub corrupt_gradient: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct SelftestReport {
    pub results: Vec<PropertyResult>,
    pub elapsed_ms: f64,
}

impl SelftestReport {
    pub fn passed(&self) -> bool {
        self.results.iter().all(|r| r.passed)
    }
}

fn gaussian_matrix(d: usize, scale: f64, rng: &mut rng::SeededRng) -> Matrix<f64> {
    Matrix::from_vec(d, d, rng::gaussian_vec(rng, d * d)).scaled(scale)
}

fn small_spec(seed: u64, mode: GenMode, head: HeadChoice, loss: LossKind) -> InstanceSpec {
    InstanceSpec {
        k: 5,
        d: 6,
        n: 5,
        t: 4,
        mode,
        embedding: EmbeddingKind::UnitSphere,
        head,
        noise: 0.3,
        loss,
        seed,
    }
}

/// Central differences of `obj` at `w` with step `h`.
pub fn finite_difference_grad(obj: &Objective<f64>, w: &Matrix<f64>, h: f64) -> Result<Matrix<f64>> {
    let d = w.rows();
    let mut g = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let mut p = w.clone();
            p[(i, j)] += h;
            let mut m = w.clone();
            m[(i, j)] -= h;
            g[(i, j)] = (obj.loss(&p)? - obj.loss(&m)?) / (2.0 * h);
        }
    }
    Ok(g)
}

/// `‖a - b‖_F / max(‖b‖_F, 1e-8)`.
pub fn relative_error(a: &Matrix<f64>, b: &Matrix<f64>) -> f64 {
    (a - b).frob_norm() / b.frob_norm().max(1e-8)
}

fn flip_largest(g: &mut Matrix<f64>) {
    let idx = (0..g.as_slice().len())
        .max_by(|&a, &b| g.as_slice()[a].abs().total_cmp(&g.as_slice()[b].abs()))
        .expect("non-empty gradient");
    g.as_mut_slice()[idx] = -g.as_slice()[idx];
}

/// Largest relative gradient error over random `(W, dataset, loss)` draws.
pub fn gradient_check(draws: usize, seed: u64, corrupt: bool) -> Result<f64> {
    let variants = [
        (LossKind::Log, HeadChoice::Tied),
        (LossKind::Log, HeadChoice::None),
        (LossKind::Squared, HeadChoice::Tied),
        (LossKind::Squared, HeadChoice::General),
        (LossKind::CrossEntropy, HeadChoice::General),
        (LossKind::CrossEntropy, HeadChoice::Tied),
    ];
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let s = derive_seed(seed, i as u64);
        let (loss, head) = variants[i % variants.len()];
        let inst = Instance::<f64>::generate(&small_spec(s, GenMode::Cyclic, head, loss))?;
        let w = gaussian_matrix(inst.objective.dim(), 0.5, &mut rng::seeded(derive_seed(s, 9)));
        let mut g = inst.objective.grad(&w)?;
        if corrupt {
            flip_largest(&mut g);
        }
        let fd = finite_difference_grad(&inst.objective, &w, 1e-5)?;
        worst = worst.max(relative_error(&g, &fd));
    }
    Ok(worst)
}

/// Largest `‖∇_reduced - ∇‖_F` for log loss with indicator scores.
pub fn reduced_gradient_gap(draws: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..draws {
        let s = derive_seed(seed, i as u64);
        let head = if i % 2 == 0 { HeadChoice::Tied } else { HeadChoice::None };
        let inst = Instance::<f64>::generate(&small_spec(s, GenMode::Cyclic, head, LossKind::Log))?;
        let w = gaussian_matrix(inst.objective.dim(), 1.0, &mut rng::seeded(derive_seed(s, 9)));
        let a = inst.objective.grad(&w)?;
        let b = inst.objective.grad_log_reduced(&w)?;
        worst = worst.max((&a - &b).frob_norm());
    }
    Ok(worst)
}

/// Count of steps of `W ← W - ∇L/L` (log loss, tied head) violating
/// `L(τ+1) - L(τ) <= -(η/2)‖∇L(τ)‖² + 1e-10`.
pub fn descent_violations(instances: usize, steps: usize, seed: u64) -> Result<usize> {
    let mut violations = 0;
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let mode = if i % 2 == 0 { GenMode::Cyclic } else { GenMode::Acyclic };
        let inst = Instance::<f64>::generate(&small_spec(s, mode, HeadChoice::Tied, LossKind::Log))?;
        let obj = &inst.objective;
        let eta = 1.0 / obj.lipschitz_log();
        let mut w = gaussian_matrix(obj.dim(), 0.5, &mut rng::seeded(derive_seed(s, 9)));
        let (mut loss, mut grad) = obj.loss_and_grad(&w)?;
        for _ in 0..steps {
            w.axpy(-eta, &grad);
            let (next_loss, next_grad) = obj.loss_and_grad(&w)?;
            let gn = grad.frob_norm();
            if next_loss - loss > -0.5 * eta * gn * gn + 1e-10 {
                violations += 1;
            }
            (loss, grad) = (next_loss, next_grad);
        }
    }
    Ok(violations)
}

/// Worst chord excess `L(λA + (1-λ)B) - λL(A) - (1-λ)L(B)` (log loss, tied head).
pub fn chord_excess(triples: usize, seed: u64) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    let per_instance = 50;
    for i in 0..triples.div_ceil(per_instance) {
        let s = derive_seed(seed, i as u64);
        let inst = Instance::<f64>::generate(&small_spec(s, GenMode::Cyclic, HeadChoice::Tied, LossKind::Log))?;
        let obj = &inst.objective;
        let mut r = rng::seeded(derive_seed(s, 9));
        for _ in 0..per_instance.min(triples - i * per_instance) {
            let scale = 0.5 + 2.5 * r.random::<f64>();
            let a = gaussian_matrix(obj.dim(), scale, &mut r);
            let b = gaussian_matrix(obj.dim(), scale, &mut r);
            let lam: f64 = r.random_range(0.01..0.99);
            let mut mid = a.scaled(lam);
            mid.axpy(1.0 - lam, &b);
            let excess = obj.loss(&mid)? - lam * obj.loss(&a)? - (1.0 - lam) * obj.loss(&b)?;
            worst = worst.max(excess);
        }
    }
    Ok(worst)
}

/// Smallest midpoint gap of `L̄` for pairs in `S_fin` at least 0.1 apart, over
/// cyclic instances with a non-trivial finite component. `None` if no instance had one.
pub fn strict_midpoint_gap(pairs: usize, seed: u64) -> Result<Option<f64>> {
    let mut best: Option<f64> = None;
    let mut done = 0;
    let mut i = 0u64;
    while done < pairs && i < 10 * pairs as u64 + 50 {
        let s = derive_seed(seed, i);
        i += 1;
        let inst = Instance::<f64>::generate(&small_spec(s, GenMode::Cyclic, HeadChoice::Tied, LossKind::Log))?;
        if inst.fin.dim() == 0 || inst.cyclic.is_empty() {
            continue;
        }
        let mut r = rng::seeded(derive_seed(s, 9));
        let pick = |r: &mut rng::SeededRng| {
            let v = gaussian_matrix(inst.fin.matrix_dim(), 1.0, r);
            inst.fin.project(&v)
        };
        let a = pick(&mut r);
        let b = pick(&mut r);
        if (&a - &b).frob_norm() < 0.1 {
            continue;
        }
        let mut mid = a.scaled(0.5);
        mid.axpy(0.5, &b);
        let gap = 0.5 * inst.cyclic.loss(&a)? + 0.5 * inst.cyclic.loss(&b)? - inst.cyclic.loss(&mid)?;
        best = Some(best.map_or(gap, |g: f64| g.min(gap)));
        done += 1;
    }
    Ok(best)
}

/// Largest `⟨∇L(W), W^svm⟩` over random finite `W` on instances with `W^svm ≠ 0`.
pub fn max_svm_inner_product(draws: usize, seed: u64) -> Result<f64> {
    let mut worst = f64::NEG_INFINITY;
    let per_instance = 20;
    let mut done = 0;
    let mut i = 0u64;
    while done < draws {
        let s = derive_seed(seed, i);
        i += 1;
        let mode = if i.is_multiple_of(2) { GenMode::Cyclic } else { GenMode::Acyclic };
        let inst = Instance::<f64>::generate(&small_spec(s, mode, HeadChoice::Tied, LossKind::Log))?;
        if inst.svm.status != SvmStatus::Solved || inst.svm.w.frob_norm() < 1e-9 {
            continue;
        }
        let mut r = rng::seeded(derive_seed(s, 9));
        for _ in 0..per_instance.min(draws - done) {
            let scale = 0.1 + 4.0 * r.random::<f64>();
            let w = gaussian_matrix(inst.objective.dim(), scale, &mut r);
            worst = worst.max(inst.objective.grad(&w)?.frob_inner(&inst.svm.w));
            done += 1;
        }
    }
    Ok(worst)
}

/// Reachability by Floyd–Warshall; `reach[i][j]` for node positions.
pub fn transitive_closure(n: usize, edges: &[(usize, usize)]) -> Vec<Vec<bool>> {
    let mut reach = vec![vec![false; n]; n];
    for (i, row) in reach.iter_mut().enumerate() {
        row[i] = true;
    }
    for &(a, b) in edges {
        reach[a][b] = true;
    }
    for k in 0..n {
        for i in 0..n {
            if reach[i][k] {
                let via = reach[k].clone();
                for (cell, r) in reach[i].iter_mut().zip(via) {
                    *cell |= r;
                }
            }
        }
    }
    reach
}

/// Number of random graphs (up to 12 nodes) whose components disagree with
/// mutual reachability.
pub fn scc_mismatches(graphs: usize, seed: u64) -> usize {
    let mut bad = 0;
    for g in 0..graphs {
        let mut r = rng::seeded(derive_seed(seed, g as u64));
        let n = r.random_range(1..=12usize);
        let p: f64 = r.random_range(0.05..0.5);
        let mut tpg = TokenPriorityGraph::new(0);
        let mut edges = Vec::new();
        for i in 0..n {
            tpg.add_node(i);
            for j in 0..n {
                if i != j && r.random::<f64>() < p {
                    tpg.add_edge(i, j);
                    edges.push((i, j));
                }
            }
        }
        let reach = transitive_closure(n, &edges);
        let dec = scc(&tpg);
        let ok = (0..n).all(|i| {
            (0..n).all(|j| {
                let same = dec.component_of(i) == dec.component_of(j);
                same == (reach[i][j] && reach[j][i])
            })
        });
        if !ok {
            bad += 1;
        }
    }
    bad
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct SvmAudit {
    pub instances: usize,
    pub solved: usize,
    pub max_equality_violation: f64,
    pub min_slack: f64,
    pub max_kkt: f64,
    /// Largest `‖Π_{S_fin} W^svm‖_F`.
    pub max_fin_component: f64,
}

/// Solves the graph SVM on random instances and collects residuals.
pub fn svm_audit(instances: usize, seed: u64) -> Result<SvmAudit> {
    let mut a = SvmAudit {
        min_slack: f64::INFINITY,
        ..SvmAudit::default()
    };
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let mut r = rng::seeded(derive_seed(s, 7));
        let k = r.random_range(3..=7usize);
        let d = r.random_range(k..=k + 3);
        let spec = InstanceSpec {
            k,
            d,
            n: r.random_range(2..=8),
            t: r.random_range(2..=6),
            mode: if i % 3 == 0 { GenMode::Acyclic } else { GenMode::Cyclic },
            head: HeadChoice::None,
            ..small_spec(s, GenMode::Cyclic, HeadChoice::None, LossKind::Log)
        };
        let ds = crate::experiment::generate_dataset::<f64>(&spec)?;
        let graphs = crate::graph::GraphSet::from_dataset(&ds);
        let c = build_constraints(&graphs);
        let sol = solve_graph_svm(&c, &ds.embedding, &SvmOptions::default());
        a.instances += 1;
        if sol.status != SvmStatus::Solved {
            continue;
        }
        a.solved += 1;
        a.max_equality_violation = a.max_equality_violation.max(sol.max_equality_violation());
        if let Some(sl) = sol.min_inequality_slack() {
            a.min_slack = a.min_slack.min(sl);
        }
        a.max_kkt = a.max_kkt.max(sol.kkt_residual);
        let fin = MatrixSubspace::span(&c.equalities, &ds.embedding);
        a.max_fin_component = a.max_fin_component.max(fin.project(&sol.w).frob_norm());
    }
    Ok(a)
}

/// Largest `‖W_joint - Σ_k W_k‖_F` on orthonormal-embedding instances.
pub fn reduction_gap(instances: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let spec = InstanceSpec {
            k: 6,
            d: 8,
            embedding: EmbeddingKind::Orthonormal,
            ..small_spec(s, GenMode::Cyclic, HeadChoice::None, LossKind::Log)
        };
        let spec = InstanceSpec {
            mode: if i % 2 == 0 { GenMode::Cyclic } else { GenMode::Acyclic },
            ..spec
        };
        let ds = crate::experiment::generate_dataset::<f64>(&spec)?;
        let graphs = crate::graph::GraphSet::from_dataset(&ds);
        let c = build_constraints(&graphs);
        let opts = SvmOptions::default();
        let joint = solve_graph_svm(&c, &ds.embedding, &opts);
        let split = solve_per_last_token(&c, &ds.embedding, &opts)?;
        worst = worst.max((&joint.w - &split.joint.w).frob_norm());
    }
    Ok(worst)
}

/// Fraction of random full-row-rank instances (`d >= K`) whose explicit
/// certificate verifies.
pub fn certificate_rate(instances: usize, seed: u64) -> Result<f64> {
    let mut ok = 0;
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let mut r = rng::seeded(derive_seed(s, 7));
        let k = r.random_range(2..=8usize);
        let d = r.random_range(k..=k + 4);
        let spec = InstanceSpec {
            k,
            d,
            n: r.random_range(2..=10),
            t: r.random_range(2..=6),
            ..small_spec(s, GenMode::Cyclic, HeadChoice::None, LossKind::Log)
        };
        let ds = crate::experiment::generate_dataset::<f64>(&spec)?;
        let c = build_constraints(&crate::graph::GraphSet::from_dataset(&ds));
        let f = check_feasibility(&c, &ds.embedding, &SvmOptions::default());
        if f.method == crate::svm::FeasibilityMethod::Certificate
            && f.certificate.as_ref().is_some_and(|w| verify(&c, &ds.embedding, w))
        {
            ok += 1;
        }
    }
    Ok(ok as f64 / instances as f64)
}

/// A dataset where every graph is one component: each query token sees all of
/// `0..m` and every token in there is a label.
pub fn single_component_dataset(m: usize, d: usize, seed: u64) -> Result<Dataset<f64>> {
    let e = make_embeddings::<f64>(m, d, EmbeddingKind::UnitSphere, derive_seed(seed, 0))?;
    let head = make_head(&e, HeadKind::Tied, 0.0, 0)?;
    let mut samples = Vec::new();
    for last in 0..m {
        for label in 0..m {
            let mut tokens: Vec<usize> = (0..m).filter(|&t| t != last).collect();
            let shift = label % tokens.len().max(1);
            tokens.rotate_left(shift);
            tokens.push(last);
            samples.push(Sample::new(tokens, label));
        }
    }
    Dataset::new(e, Some(head), samples, seed)
}

/// Largest drift of `Π_{S_fin⊥} W` along GD from a random start on a dataset
/// whose graphs are single components (so `W^svm = 0`).
pub fn zero_svm_drift(instances: usize, steps: usize, seed: u64) -> Result<f64> {
    let mut worst: f64 = 0.0;
    for i in 0..instances {
        let s = derive_seed(seed, i as u64);
        let ds = single_component_dataset(3 + i % 3, 6, s)?;
        let graphs = crate::graph::GraphSet::from_dataset(&ds);
        let c = build_constraints(&graphs);
        let fin = MatrixSubspace::span(&c.equalities, &ds.embedding);
        let obj = Objective::new(&ds, LossKind::Log, Scoring::Head)?;
        let eta = 1.0 / obj.lipschitz_log();
        let mut w = gaussian_matrix(ds.dim(), 1.0, &mut rng::seeded(derive_seed(s, 9)));
        let perp0 = fin.project_out(&w);
        for _ in 0..steps {
            let g = obj.grad(&w)?;
            w.axpy(-eta, &g);
            worst = worst.max((&fin.project_out(&w) - &perp0).frob_norm());
        }
    }
    Ok(worst)
}

fn record(results: &mut Vec<PropertyResult>, name: &'static str, passed: bool, detail: String) {
    results.push(PropertyResult { name, passed, detail });
}

pub fn run_selftest(opts: &SelftestOptions) -> SelftestReport {
    let start = Instant::now();
    let seed = opts.seed;
    let mut results = Vec::new();
    let mut push = |name: &'static str, outcome: Result<(bool, String)>| match outcome {
        Ok((passed, detail)) => record(&mut results, name, passed, detail),
        Err(e) => record(&mut results, name, false, format!("error: {e}")),
    };

    push(
        "gradient",
        gradient_check(12, derive_seed(seed, 1), opts.corrupt_gradient)
            .map(|e| (e < 1e-5, format!("max relative error {e:.3e}"))),
    );
    push(
        "gradient-canary",
        gradient_check(3, derive_seed(seed, 1), true)
            .map(|e| (e >= 1e-5, format!("corrupted gradient error {e:.3e} (must be detected)"))),
    );
    push(
        "reduced-gradient",
        reduced_gradient_gap(10, derive_seed(seed, 2)).map(|g| (g <= 1e-12, format!("max gap {g:.3e}"))),
    );
    push(
        "descent",
        descent_violations(5, 200, derive_seed(seed, 3)).map(|v| (v == 0, format!("{v} violations"))),
    );
    push(
        "convexity",
        chord_excess(200, derive_seed(seed, 4)).map(|x| (x <= 1e-9, format!("max chord excess {x:.3e}"))),
    );
    push(
        "strict-convexity",
        strict_midpoint_gap(20, derive_seed(seed, 5)).map(|g| match g {
            Some(g) => (g >= 1e-8, format!("min midpoint gap {g:.3e}")),
            None => (false, "no cyclic instance found".into()),
        }),
    );
    push(
        "negative-correlation",
        max_svm_inner_product(50, derive_seed(seed, 6))
            .map(|x| (x < 0.0, format!("max <grad, W_svm> {x:.3e}"))),
    );
    push(
        "svm-kkt",
        svm_audit(40, derive_seed(seed, 7)).map(|a| {
            let ok = a.solved == a.instances
                && a.max_equality_violation <= PRIMAL_TOL
                && a.min_slack >= -PRIMAL_TOL
                && a.max_kkt <= 1e-5;
            (
                ok,
                format!(
                    "{}/{} solved, eq {:.1e}, slack {:.1e}, kkt {:.1e}",
                    a.solved, a.instances, a.max_equality_violation, a.min_slack, a.max_kkt
                ),
            )
        }),
    );
    push(
        "orthogonality",
        svm_audit(40, derive_seed(seed, 8)).map(|a| {
            (a.max_fin_component <= 1e-8, format!("max |proj_fin W_svm| {:.1e}", a.max_fin_component))
        }),
    );
    push("scc-oracle", {
        let bad = scc_mismatches(200, derive_seed(seed, 9));
        Ok((bad == 0, format!("{bad} mismatches in 200 graphs")))
    });
    push(
        "reduction",
        reduction_gap(10, derive_seed(seed, 10)).map(|g| (g <= 1e-6, format!("max gap {g:.3e}"))),
    );
    push(
        "feasibility-certificate",
        certificate_rate(20, derive_seed(seed, 11)).map(|r| (r == 1.0, format!("verified rate {r}"))),
    );
    push(
        "zero-svm-stasis",
        zero_svm_drift(3, 200, derive_seed(seed, 12)).map(|x| (x <= 1e-9, format!("max drift {x:.3e}"))),
    );

    SelftestReport {
        results,
        elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closure_of_a_cycle() {
        let r = transitive_closure(3, &[(0, 1), (1, 2), (2, 0)]);
        assert!(r.iter().flatten().all(|&b| b));
        let r = transitive_closure(3, &[(0, 1)]);
        assert!(r[0][1] && !r[1][0] && !r[0][2]);
    }

    #[test]
    fn single_component_graphs() {
        let ds = single_component_dataset(4, 6, 1).unwrap();
        let g = crate::graph::GraphSet::from_dataset(&ds);
        for (_, a) in g.iter() {
            assert_eq!(a.scc.num_components(), 1);
        }
    }
}
