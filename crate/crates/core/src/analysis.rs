//! Convergence diagnostics: correlations, the rate bound, pseudo token-priority
//! graphs and the sweep experiments built on top of the pipeline.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::attention::{softmax, Objective, SeqSpec, TrainRecord};
use crate::dataset::{Dataset, TokenIndexSets};
use crate::error::{Error, Result};
use crate::graph::{GraphSet, PairRelation, TokenPriorityGraph};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Default probability above which a token counts as selected.
pub const DEFAULT_EPSILON: f64 = 1e-3;

/// Frobenius cosine `⟨W, W_ref⟩ / (‖W‖ ‖W_ref‖)`.
pub fn correlation<T: Scalar>(w: &Matrix<T>, w_ref: &Matrix<T>) -> Result<T> {
    crate::attention::cosine(w, w_ref).ok_or(Error::ZeroMatrix)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RateBoundInputs {
    /// Normalized margin between label-component and suppressed tokens
    /// (`+∞` when nothing is suppressed).
    pub xi: f64,
    pub e_max: f64,
    pub w_fin_norm: f64,
    pub t_max: usize,
}

/// `ξ = min_i min_{t ∈ R_i, t' ∈ R̄_i} (x_t - x_t')ᵀ W^svm x̄_i / ‖W^svm‖`.
pub fn margin_xi<T: Scalar>(
    dataset: &Dataset<T>,
    sets: &[TokenIndexSets],
    w_svm: &Matrix<T>,
) -> f64 {
    let norm = w_svm.frob_norm();
    if norm == T::zero() {
        return f64::INFINITY;
    }
    let e = &dataset.embedding;
    let mut xi = f64::INFINITY;
    for (s, set) in dataset.samples.iter().zip(sets) {
        let v = w_svm.matvec(e.embedding(s.last()));
        let h: Vec<T> = s.tokens.iter().map(|&t| linalg::dot(e.embedding(t), &v)).collect();
        for &t in &set.r {
            for &u in &set.r_bar {
                xi = xi.min(((h[t] - h[u]) / norm).as_f64());
            }
        }
    }
    xi
}

impl RateBoundInputs {
    pub fn new<T: Scalar>(
        dataset: &Dataset<T>,
        sets: &[TokenIndexSets],
        w_svm: &Matrix<T>,
        w_fin: &Matrix<T>,
    ) -> Self {
        Self {
            xi: margin_xi(dataset, sets, w_svm),
            e_max: dataset.embedding.e_max().as_f64(),
            w_fin_norm: w_fin.frob_norm().as_f64(),
            t_max: dataset.t_max(),
        }
    }
}

/// `T exp(2‖W^fin‖ e_max²)/τ + (‖W^fin‖² + ln(τ)²/ξ²) / (2 Σ_{j<τ} η_j)`.
pub fn rate_bound(inputs: &RateBoundInputs, tau: usize, eta_sum: f64) -> f64 {
    assert!(tau >= 1, "rate bound needs tau >= 1");
    let tau_f = tau as f64;
    let first = inputs.t_max as f64 * (2.0 * inputs.w_fin_norm * inputs.e_max.powi(2)).exp() / tau_f;
    let log_term = if inputs.xi.is_infinite() {
        0.0
    } else {
        tau_f.ln().powi(2) / inputs.xi.powi(2)
    };
    first + (inputs.w_fin_norm.powi(2) + log_term) / (2.0 * eta_sum)
}

/// Graphs rebuilt from what a trained model attends to: in every sample each token
/// with probability at least `epsilon` gets an edge to every token of the sequence.
/// Also returns the pseudo label of each sample (the token ID with the largest
/// aggregated probability, ties to the smaller ID).
pub fn pseudo_tpgs<T: Scalar>(
    w: &Matrix<T>,
    dataset: &Dataset<T>,
    epsilon: f64,
) -> (GraphSet, Vec<usize>) {
    let e = &dataset.embedding;
    let eps = T::of(epsilon);
    let mut graphs: BTreeMap<usize, TokenPriorityGraph> = BTreeMap::new();
    let mut labels = Vec::with_capacity(dataset.n());
    for s in &dataset.samples {
        let x = e.gather(&s.tokens);
        let probs = softmax(&x.matvec(&w.matvec(e.embedding(s.last()))));
        let g = graphs
            .entry(s.last())
            .or_insert_with(|| TokenPriorityGraph::new(s.last()));
        let mut mass: BTreeMap<usize, T> = BTreeMap::new();
        for (&t, &p) in s.tokens.iter().zip(&probs) {
            *mass.entry(t).or_insert(T::zero()) += p;
            g.add_node(t);
            if p >= eps {
                for &u in &s.tokens {
                    g.add_edge(t, u);
                }
            }
        }
        let label = mass
            .iter()
            .fold(None, |best: Option<(usize, T)>, (&t, &m)| match best {
                Some((_, bm)) if bm >= m => best,
                _ => Some((t, m)),
            })
            .map(|(t, _)| t)
            .expect("non-empty sample");
        labels.push(label);
    }
    (GraphSet::from_graphs(graphs), labels)
}

/// Index sets of every sample relative to the pseudo labels.
pub fn pseudo_index_sets<T: Scalar>(
    dataset: &Dataset<T>,
    graphs: &GraphSet,
    labels: &[usize],
) -> Result<Vec<TokenIndexSets>> {
    let samples: Vec<_> = dataset
        .samples
        .iter()
        .zip(labels)
        .map(|(s, &y)| crate::dataset::Sample::new(s.tokens.clone(), y))
        .collect();
    crate::dataset::index_sets(&samples, graphs)
}

/// Reduced sequences (positions in `R_i`) for samples with `R_i ≠ O_i`, keeping the
/// original labels.
pub fn reduced_specs<T: Scalar>(dataset: &Dataset<T>, sets: &[TokenIndexSets]) -> Vec<SeqSpec> {
    dataset
        .samples
        .iter()
        .zip(sets)
        .filter(|(_, set)| set.r.len() > set.o.len())
        .map(|(s, set)| SeqSpec {
            tokens: set.r.iter().map(|&t| s.tokens[t]).collect(),
            query: s.last(),
            label: s.label,
        })
        .collect()
}

/// Objective restricted to the reduced sequences, normalized by the full `n`.
pub fn reduced_objective<T: Scalar>(
    dataset: &Dataset<T>,
    sets: &[TokenIndexSets],
    template: &Objective<T>,
) -> Result<Objective<T>> {
    Objective::from_sequences(
        dataset,
        &reduced_specs(dataset, sets),
        dataset.n(),
        template.loss_kind(),
        template.scoring(),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub final_corr: Option<f64>,
    pub mean_corr: Option<f64>,
    pub final_dist: Option<f64>,
    pub final_loss: f64,
    pub loss_gap: Option<f64>,
    /// Recorded steps where the loss went up.
    pub loss_increases: usize,
    /// Least-squares slope of `‖W‖` against the iteration over the second half.
    pub norm_slope: f64,
    pub zero_gradient: bool,
}

pub fn convergence_report(recs: &[TrainRecord], loss_inf: Option<f64>) -> ConvergenceReport {
    let last = recs.last();
    let corrs: Vec<f64> = recs.iter().filter_map(|r| r.corr_svm).collect();
    let tail = &recs[recs.len() / 2..];
    let norm_slope = if tail.len() >= 2 {
        let n = tail.len() as f64;
        let mx = tail.iter().map(|r| r.iter as f64).sum::<f64>() / n;
        let my = tail.iter().map(|r| r.w_norm).sum::<f64>() / n;
        let sxy: f64 = tail.iter().map(|r| (r.iter as f64 - mx) * (r.w_norm - my)).sum();
        let sxx: f64 = tail.iter().map(|r| (r.iter as f64 - mx).powi(2)).sum();
        if sxx > 0.0 {
            sxy / sxx
        } else {
            0.0
        }
    } else {
        0.0
    };
    ConvergenceReport {
        final_corr: last.and_then(|r| r.corr_svm),
        mean_corr: (!corrs.is_empty()).then(|| corrs.iter().sum::<f64>() / corrs.len() as f64),
        final_dist: last.and_then(|r| r.dist_fin),
        final_loss: last.map_or(f64::NAN, |r| r.loss),
        loss_gap: loss_inf.and_then(|li| last.map(|r| r.loss - li)),
        loss_increases: recs.windows(2).filter(|w| w[1].loss > w[0].loss).count(),
        norm_slope,
        zero_gradient: recs.iter().all(|r| r.grad_norm == 0.0),
    }
}

/// Overlap between the selected tokens of each sample (aggregated probability at
/// least `epsilon`) and the label-component tokens it contains, as
/// `|selected ∩ C_y| / |selected ∪ C_y|`, averaged over samples. Equals 1 exactly
/// when attention keeps the label component and suppresses everything else.
pub fn label_component_retention<T: Scalar>(
    w: &Matrix<T>,
    dataset: &Dataset<T>,
    graphs: &GraphSet,
    epsilon: f64,
) -> Result<f64> {
    let e = &dataset.embedding;
    let mut total = 0.0;
    for (i, s) in dataset.samples.iter().enumerate() {
        let g = graphs.get(s.last()).ok_or(Error::GraphMismatch {
            sample: i,
            token: s.last(),
        })?;
        let x = e.gather(&s.tokens);
        let probs = softmax(&x.matvec(&w.matvec(e.embedding(s.last()))));
        let mut mass: BTreeMap<usize, T> = BTreeMap::new();
        for (&t, &p) in s.tokens.iter().zip(&probs) {
            *mass.entry(t).or_insert(T::zero()) += p;
        }
        let mut union = 0usize;
        let mut both = 0usize;
        for (&t, &m) in &mass {
            let member = t == s.label || g.scc.relation(s.label, t)? == PairRelation::SameScc;
            let selected = m >= T::of(epsilon);
            union += usize::from(member || selected);
            both += usize::from(member && selected);
        }
        total += both as f64 / union.max(1) as f64;
    }
    Ok(total / dataset.n() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_embeddings, make_head, EmbeddingKind, HeadKind, Sample};

    #[test]
    fn rate_bound_without_margin_term() {
        let inputs = RateBoundInputs {
            xi: f64::INFINITY,
            e_max: 1.0,
            w_fin_norm: 0.0,
            t_max: 4,
        };
        assert!((rate_bound(&inputs, 10, 1.0) - 0.4).abs() < 1e-15);
    }

    #[test]
    fn rate_bound_decreases_for_constant_steps() {
        let inputs = RateBoundInputs {
            xi: 0.3,
            e_max: 1.0,
            w_fin_norm: 0.7,
            t_max: 4,
        };
        let eta = 0.25;
        let mut prev = f64::INFINITY;
        for exp in 0..=40 {
            let tau = (100.0 * 10f64.powf(exp as f64 / 10.0)) as usize;
            let b = rate_bound(&inputs, tau, eta * tau as f64);
            assert!(b <= prev);
            prev = b;
        }
    }

    #[test]
    fn zero_weights_retain_everything() {
        let e = make_embeddings::<f64>(4, 4, EmbeddingKind::Orthonormal, 0).unwrap();
        let h = make_head(&e, HeadKind::Tied, 0.0, 0).unwrap();
        let ds = Dataset::new(e, Some(h), vec![Sample::new(vec![0, 1, 2], 1)], 0).unwrap();
        let (g, labels) = pseudo_tpgs(&Matrix::zeros(4, 4), &ds, DEFAULT_EPSILON);
        let g2 = &g.get(2).unwrap().graph;
        assert_eq!(g2.edge_count(), 6);
        assert_eq!(labels, vec![0]);
    }

    #[test]
    fn correlation_bounds() {
        let a = Matrix::<f64>::from_vec(2, 2, vec![1.0, 2.0, 0.0, -1.0]);
        assert!((correlation(&a, &a).unwrap() - 1.0).abs() < 1e-15);
        assert!((correlation(&a.scaled(-1.0), &a).unwrap() + 1.0).abs() < 1e-15);
        assert!(correlation(&a, &Matrix::zeros(2, 2)).is_err());
    }
}
