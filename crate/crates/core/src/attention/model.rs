use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, EmbeddingTable};
use crate::error::{Error, Result};
use crate::graph::{CyclicSplit, ReducedSample};
use crate::linalg::{self, Matrix};
use crate::scalar::Scalar;

/// Smallest admissible argument of the log loss.
pub const LOG_GUARD: f64 = 1e-300;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    /// `ℓ(u) = -log u`.
    Log,
    /// `ℓ(u) = (1 - u)²`.
    Squared,
    /// Negative log-likelihood of `softmax(C Xᵀ s)` at the label.
    #[serde(rename = "ce", alias = "cross_entropy")]
    CrossEntropy,
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "log" => Ok(Self::Log),
            "squared" => Ok(Self::Squared),
            "ce" | "cross_entropy" => Ok(Self::CrossEntropy),
            other => Err(Error::Config(format!("unknown loss `{other}`"))),
        }
    }
}

impl LossKind {
    /// `ℓ(u)` for the scalar losses.
    pub fn value<T: Scalar>(self, u: T) -> T {
        match self {
            Self::Log => -u.ln(),
            Self::Squared => (T::one() - u).powi(2),
            Self::CrossEntropy => panic!("cross-entropy is not a function of the score"),
        }
    }

    /// `ℓ'(u)` for the scalar losses.
    pub fn derivative<T: Scalar>(self, u: T) -> T {
        match self {
            Self::Log => -u.recip(),
            Self::Squared => -(T::one() - u) * T::of(2.0),
            Self::CrossEntropy => panic!("cross-entropy is not a function of the score"),
        }
    }

    /// `(M0, M1)`: Lipschitz constant of `ℓ'` and bound on `|ℓ'|` over `[u_min, 1]`
    /// (the squared-loss constants hold on all of `[0, 1]`).
    pub fn smoothness(self, u_min: f64) -> Option<(f64, f64)> {
        match self {
            Self::Log => Some((u_min.powi(-2), u_min.recip())),
            Self::Squared => Some((2.0, 2.0)),
            Self::CrossEntropy => None,
        }
    }
}

/// How the score of a sequence is read off the attention output.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scoring {
    /// `γ_t = c_yᵀ x_t` through the classifier head.
    Head,
    /// `γ_t = 1[x_t = y]`: total attention mass on label occurrences, no head needed.
    Masked,
}

impl Scoring {
    pub fn default_for<T>(dataset: &Dataset<T>) -> Self {
        if dataset.head.is_some() {
            Self::Head
        } else {
            Self::Masked
        }
    }
}

/// Softmax with max-subtraction.
pub fn softmax<T: Scalar>(logits: &[T]) -> Vec<T> {
    let m = logits.iter().copied().fold(T::neg_infinity(), T::max);
    let mut out: Vec<T> = logits.iter().map(|&h| (h - m).exp()).collect();
    let z: T = out.iter().copied().sum();
    out.iter_mut().for_each(|p| *p /= z);
    out
}

fn logsumexp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let m = xs.clone().fold(T::neg_infinity(), T::max);
    if m == T::neg_infinity() {
        return m;
    }
    m + xs.map(|x| (x - m).exp()).sum::<T>().ln()
}

/// `probs = S(X W x̄)` and `output = Xᵀ probs`.
pub fn forward<T: Scalar>(x: &Matrix<T>, w: &Matrix<T>, xbar: &[T]) -> (Vec<T>, Vec<T>) {
    let probs = softmax(&x.matvec(&w.matvec(xbar)));
    let output = x.tr_matvec(&probs);
    (probs, output)
}

#[derive(Clone, Debug)]
struct Seq<T> {
    tokens: Vec<usize>,
    x: Matrix<T>,
    xbar: Vec<T>,
    label: usize,
    gamma: Vec<T>,
    /// Set when `γ` is the 0/1 indicator of label positions; enables the stable
    /// log-domain evaluation of the log loss.
    indicator: Option<Vec<bool>>,
}

/// Empirical risk `(1/n) Σ ℓ(γ_iᵀ S(X_i W x̄_i))` over a list of sequences.
#[derive(Clone, Debug)]
pub struct Objective<T> {
    seqs: Vec<Seq<T>>,
    head: Option<Matrix<T>>,
    loss: LossKind,
    scoring: Scoring,
    normalizer: T,
    e_max: T,
    d: usize,
}

/// One sequence for [`Objective::from_sequences`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct SeqSpec {
    pub tokens: Vec<usize>,
    pub query: usize,
    pub label: usize,
}

impl From<&ReducedSample> for SeqSpec {
    fn from(r: &ReducedSample) -> Self {
        Self {
            tokens: r.tokens.clone(),
            query: r.query,
            label: r.label,
        }
    }
}

impl<T: Scalar> Objective<T> {
    /// Loss over every sample of the dataset.
    pub fn new(dataset: &Dataset<T>, loss: LossKind, scoring: Scoring) -> Result<Self> {
        let specs: Vec<SeqSpec> = dataset
            .samples
            .iter()
            .map(|s| SeqSpec {
                tokens: s.tokens.clone(),
                query: s.last(),
                label: s.label,
            })
            .collect();
        Self::from_sequences(dataset, &specs, dataset.n(), loss, scoring)
    }

    /// `L̄`: loss over the reduced sequences, normalized by the full sample count.
    pub fn cyclic(
        dataset: &Dataset<T>,
        split: &CyclicSplit,
        loss: LossKind,
        scoring: Scoring,
    ) -> Result<Self> {
        let specs: Vec<SeqSpec> = split.samples.iter().map(SeqSpec::from).collect();
        Self::from_sequences(dataset, &specs, split.n_total, loss, scoring)
    }

    pub fn from_sequences(
        dataset: &Dataset<T>,
        specs: &[SeqSpec],
        normalizer: usize,
        loss: LossKind,
        scoring: Scoring,
    ) -> Result<Self> {
        let head = match (scoring, loss, &dataset.head) {
            (_, LossKind::CrossEntropy, None) | (Scoring::Head, _, None) => {
                return Err(Error::Config("this loss/scoring needs a classifier head".into()))
            }
            (_, _, h) => h.as_ref().map(|h| h.matrix().clone()),
        };
        if normalizer == 0 {
            return Err(Error::InvalidDims("normalizer must be positive".into()));
        }
        let e = &dataset.embedding;
        let seqs = specs
            .iter()
            .map(|s| Self::make_seq(e, head.as_ref(), scoring, s))
            .collect();
        Ok(Self {
            seqs,
            head,
            loss,
            scoring,
            normalizer: T::of_usize(normalizer),
            e_max: e.e_max(),
            d: e.dim(),
        })
    }

    fn make_seq(
        e: &EmbeddingTable<T>,
        head: Option<&Matrix<T>>,
        scoring: Scoring,
        spec: &SeqSpec,
    ) -> Seq<T> {
        let x = e.gather(&spec.tokens);
        let gamma: Vec<T> = match (scoring, head) {
            (Scoring::Head, Some(c)) => x.matvec(c.row(spec.label)),
            _ => spec
                .tokens
                .iter()
                .map(|&t| if t == spec.label { T::one() } else { T::zero() })
                .collect(),
        };
        let tol = T::tol(1e-10);
        let indicator = gamma
            .iter()
            .zip(&spec.tokens)
            .all(|(&g, &t)| {
                let target = if t == spec.label { T::one() } else { T::zero() };
                (g - target).abs() <= tol
            })
            .then(|| spec.tokens.iter().map(|&t| t == spec.label).collect());
        Seq {
            tokens: spec.tokens.clone(),
            x,
            xbar: e.embedding(spec.query).to_vec(),
            label: spec.label,
            gamma,
            indicator,
        }
    }

    pub fn loss_kind(&self) -> LossKind {
        self.loss
    }

    pub fn scoring(&self) -> Scoring {
        self.scoring
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn t_max(&self) -> usize {
        self.seqs.iter().map(|s| s.tokens.len()).max().unwrap_or(0)
    }

    /// True when every score vector is a label indicator (tied head or masking).
    pub fn has_indicator_scores(&self) -> bool {
        self.seqs.iter().all(|s| s.indicator.is_some())
    }

    fn logits(seq: &Seq<T>, w: &Matrix<T>) -> Vec<T> {
        seq.x.matvec(&w.matvec(&seq.xbar))
    }

    /// Attention probabilities for every sequence.
    pub fn probs(&self, w: &Matrix<T>) -> Vec<Vec<T>> {
        self.seqs.iter().map(|s| softmax(&Self::logits(s, w))).collect()
    }

    /// Scores `γ_iᵀ s_i`.
    pub fn scores(&self, w: &Matrix<T>) -> Vec<T> {
        self.seqs
            .iter()
            .map(|s| linalg::dot(&s.gamma, &softmax(&Self::logits(s, w))))
            .collect()
    }

    /// Per-sequence loss and `∂ℓ/∂h` (derivative with respect to the logits).
    fn sample_terms(&self, idx: usize, seq: &Seq<T>, w: &Matrix<T>) -> Result<(T, Vec<T>)> {
        let h = Self::logits(seq, w);
        let s = softmax(&h);
        match self.loss {
            LossKind::Log if seq.indicator.is_some() => {
                let ind = seq.indicator.as_ref().expect("checked");
                let lse_o = logsumexp(h.iter().zip(ind).filter(|(_, &b)| b).map(|(&v, _)| v));
                if lse_o == T::neg_infinity() {
                    return Err(Error::DomainError {
                        sample: idx,
                        value: 0.0,
                    });
                }
                // -log u = log(1 + Σ_{t∉O} exp(h_t - lse_O)), accurate when u ≈ 1.
                let ratio: T = h
                    .iter()
                    .zip(ind)
                    .filter(|(_, &b)| !b)
                    .map(|(&v, _)| (v - lse_o).exp())
                    .sum();
                let value = ratio.ln_1p();
                let rest: T = s.iter().zip(ind).filter(|(_, &b)| !b).map(|(&p, _)| p).sum();
                let dh = h
                    .iter()
                    .zip(ind)
                    .zip(&s)
                    .map(|((&v, &b), &p)| if b { -(v - lse_o).exp() * rest } else { p })
                    .collect();
                Ok((value, dh))
            }
            LossKind::Log | LossKind::Squared => {
                let u = linalg::dot(&seq.gamma, &s);
                if self.loss == LossKind::Log && u <= T::of(LOG_GUARD) {
                    return Err(Error::DomainError {
                        sample: idx,
                        value: u.as_f64(),
                    });
                }
                let dl = self.loss.derivative(u);
                let dh = s
                    .iter()
                    .zip(&seq.gamma)
                    .map(|(&p, &g)| dl * p * (g - u))
                    .collect();
                Ok((self.loss.value(u), dh))
            }
            LossKind::CrossEntropy => {
                let c = self.head.as_ref().expect("checked at construction");
                let out = seq.x.tr_matvec(&s);
                let z = c.matvec(&out);
                let lse = logsumexp(z.iter().copied());
                let value = lse - z[seq.label];
                let mut r: Vec<T> = z.iter().map(|&v| (v - lse).exp()).collect();
                r[seq.label] -= T::one();
                // ∂/∂s = X Cᵀ (p - e_y)
                let g = seq.x.matvec(&c.tr_matvec(&r));
                let sg = linalg::dot(&s, &g);
                let dh = s.iter().zip(&g).map(|(&p, &gt)| p * (gt - sg)).collect();
                Ok((value, dh))
            }
        }
    }

    pub fn loss(&self, w: &Matrix<T>) -> Result<T> {
        let mut total = T::zero();
        for (i, seq) in self.seqs.iter().enumerate() {
            total += self.sample_terms(i, seq, w)?.0;
        }
        Ok(total / self.normalizer)
    }

    pub fn loss_and_grad(&self, w: &Matrix<T>) -> Result<(T, Matrix<T>)> {
        let mut total = T::zero();
        let mut grad = Matrix::zeros(self.d, self.d);
        for (i, seq) in self.seqs.iter().enumerate() {
            let (value, dh) = self.sample_terms(i, seq, w)?;
            total += value;
            let q = seq.x.tr_matvec(&dh);
            accumulate_outer(&mut grad, &q, &seq.xbar);
        }
        let inv = self.normalizer.recip();
        Ok((total * inv, grad.scaled(inv)))
    }

    pub fn grad(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        Ok(self.loss_and_grad(w)?.1)
    }

    /// Log loss with indicator scores: `(1/n) Σ_i Σ_{t∉O_i} s_it (x_it - e_{y_i}) x̄_iᵀ`.
    /// The label embedding is read from the first label position.
    pub fn grad_log_reduced(&self, w: &Matrix<T>) -> Result<Matrix<T>> {
        if self.loss != LossKind::Log || !self.has_indicator_scores() {
            return Err(Error::Config(
                "the reduced gradient needs log loss with indicator scores".into(),
            ));
        }
        let mut grad = Matrix::zeros(self.d, self.d);
        for seq in &self.seqs {
            let ind = seq.indicator.as_ref().expect("checked");
            let Some(pos) = ind.iter().position(|&b| b) else {
                continue;
            };
            let ey = seq.x.row(pos).to_vec();
            let s = softmax(&Self::logits(seq, w));
            let mut q = vec![T::zero(); self.d];
            for (t, &b) in ind.iter().enumerate() {
                if !b {
                    let diff = linalg::sub(seq.x.row(t), &ey);
                    linalg::axpy(s[t], &diff, &mut q);
                }
            }
            accumulate_outer(&mut grad, &q, &seq.xbar);
        }
        Ok(grad.scaled(self.normalizer.recip()))
    }

    /// `2 e_max⁴ √T_max`, the smoothness constant of the log loss with indicator scores.
    pub fn lipschitz_log(&self) -> T {
        T::of(2.0) * self.e_max.powi(4) * T::of_usize(self.t_max()).sqrt()
    }

    /// `(1/n) Σ (M0 ‖c_y‖ ‖X‖ + 3 M1) ‖c_y‖ ‖x̄‖² ‖X‖³` with spectral norms.
    /// Under masked scoring `‖γ‖` takes the place of `‖c_y‖‖X‖`.
    pub fn lipschitz_general(&self, m0: T, m1: T) -> T {
        let mut total = T::zero();
        for seq in &self.seqs {
            let xn = seq.x.spectral_norm();
            let xb2 = linalg::norm(&seq.xbar).powi(2);
            let cy = match (&self.head, self.scoring) {
                (Some(c), Scoring::Head) => linalg::norm(c.row(seq.label)),
                _ => linalg::norm(&seq.gamma) / xn.max(T::min_positive_value()),
            };
            total += (m0 * cy * xn + T::of(3.0) * m1) * cy * xb2 * xn.powi(3);
        }
        total / self.normalizer
    }

    /// A step-size bound for plain gradient descent when one is available.
    pub fn lipschitz(&self) -> Option<T> {
        match self.loss {
            LossKind::Log if self.has_indicator_scores() => Some(self.lipschitz_log()),
            LossKind::Squared => Some(self.lipschitz_general(T::of(2.0), T::of(2.0))),
            _ => None,
        }
    }
}

fn accumulate_outer<T: Scalar>(m: &mut Matrix<T>, u: &[T], v: &[T]) {
    let d = v.len();
    let data = m.as_mut_slice();
    for (p, &up) in u.iter().enumerate() {
        if up == T::zero() {
            continue;
        }
        let row = &mut data[p * d..(p + 1) * d];
        for (r, &vq) in row.iter_mut().zip(v) {
            *r += up * vq;
        }
    }
}

/// `2 e_max⁴ √T_max` for the dataset.
pub fn lipschitz_log<T: Scalar>(dataset: &Dataset<T>) -> T {
    T::of(2.0) * dataset.embedding.e_max().powi(4) * T::of_usize(dataset.t_max()).sqrt()
}

/// `(1/n) Σ (M0 ‖c_y‖ ‖X‖ + 3 M1) ‖c_y‖ ‖x̄‖² ‖X‖³` for the dataset and its head.
pub fn lipschitz_general<T: Scalar>(dataset: &Dataset<T>, m0: T, m1: T) -> Result<T> {
    let head = dataset
        .head
        .as_ref()
        .ok_or_else(|| Error::Config("general Lipschitz bound needs a head".into()))?;
    let mut total = T::zero();
    for s in &dataset.samples {
        let x = dataset.embedding.gather(&s.tokens);
        let xn = x.spectral_norm();
        let cy = linalg::norm(head.row(s.label));
        let xb = linalg::norm(dataset.embedding.embedding(s.last()));
        total += (m0 * cy * xn + T::of(3.0) * m1) * cy * xb * xb * xn.powi(3);
    }
    Ok(total / T::of_usize(dataset.n()))
}

/// Attention mass aggregated per token ID for every sample.
pub fn eval_masked<T: Scalar>(w: &Matrix<T>, dataset: &Dataset<T>) -> Vec<BTreeMap<usize, T>> {
    dataset
        .samples
        .iter()
        .map(|s| {
            let x = dataset.embedding.gather(&s.tokens);
            let (probs, _) = forward(&x, w, dataset.embedding.embedding(s.last()));
            let mut agg = BTreeMap::new();
            for (&t, &p) in s.tokens.iter().zip(&probs) {
                *agg.entry(t).or_insert(T::zero()) += p;
            }
            agg
        })
        .collect()
}

/// `L̄` on the cyclic subdataset (zero when it is empty).
pub fn loss_bar<T: Scalar>(cyclic: &Objective<T>, w: &Matrix<T>) -> Result<T> {
    cyclic.loss(w)
}

/// Infimum of the full loss: `(|Ī|/n) ℓ(1) + L̄(W^fin)`. Both scalar losses vanish at 1.
pub fn loss_inf<T: Scalar>(cyclic: &Objective<T>, w_fin: &Matrix<T>) -> Result<T> {
    cyclic.loss(w_fin)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_embeddings, make_head, EmbeddingKind, HeadKind, Sample};

    fn dataset(samples: Vec<Sample>) -> Dataset<f64> {
        let e = make_embeddings(4, 5, EmbeddingKind::UnitSphere, 3).unwrap();
        let h = make_head(&e, HeadKind::Tied, 0.0, 0).unwrap();
        Dataset::new(e, Some(h), samples, 0).unwrap()
    }

    #[test]
    fn zero_weights_give_uniform_attention() {
        let ds = dataset(vec![Sample::new(vec![0, 1, 2, 3], 2)]);
        let obj = Objective::new(&ds, LossKind::Log, Scoring::Head).unwrap();
        let w = Matrix::zeros(5, 5);
        for p in &obj.probs(&w)[0] {
            assert!((p - 0.25).abs() < 1e-15);
        }
        assert!((obj.loss(&w).unwrap() - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn all_label_sample_has_zero_loss_and_gradient() {
        let ds = dataset(vec![Sample::new(vec![1, 1, 1], 1)]);
        let obj = Objective::new(&ds, LossKind::Log, Scoring::Head).unwrap();
        let w = Matrix::identity(5);
        let (l, g) = obj.loss_and_grad(&w).unwrap();
        assert!(l.abs() < 1e-12);
        assert!(g.max_abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariance() {
        let h: [f64; 3] = [0.3, -1.0, 2.0];
        let a = softmax(&h);
        let b = softmax(&h.map(|x| x + 100.0));
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_constants() {
        let ds = dataset(vec![Sample::new(vec![0, 1, 2, 3], 2)]);
        assert!((lipschitz_log(&ds) - 4.0).abs() < 1e-12);
        let one = dataset(vec![Sample::new(vec![2], 2)]);
        assert!((lipschitz_log(&one) - 2.0).abs() < 1e-12);
        assert_eq!(lipschitz_general(&ds, 0.0, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn masked_aggregation_counts_repeats() {
        let ds = dataset(vec![Sample::new(vec![0, 3, 0, 1], 0)]);
        let agg = eval_masked(&Matrix::zeros(5, 5), &ds);
        assert!((agg[0][&0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn loss_kinds_parse() {
        assert_eq!("ce".parse::<LossKind>().unwrap(), LossKind::CrossEntropy);
        assert!("hinge".parse::<LossKind>().is_err());
    }
}
