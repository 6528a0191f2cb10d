//! Token embeddings, classifier heads, next-token datasets and their token index sets.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphSet, PairRelation};
use crate::linalg::{self, Matrix};
use crate::rng::{self, derive_seed};
use crate::scalar::Scalar;

/// Cutoff on singular values for the full-row-rank check.
pub const RANK_CUTOFF: f64 = 1e-10;
const MAX_EMBEDDING_DRAWS: usize = 16;
const MAX_HEAD_DRAWS: usize = 64;
const ARGMAX_MARGIN: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbeddingKind {
    Orthonormal,
    UnitSphere,
}

/// Vocabulary embedding matrix `E` (row `k` is `e_k`).
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable<T> {
    kind: EmbeddingKind,
    matrix: Matrix<T>,
}

impl<T: Scalar> EmbeddingTable<T> {
    /// Wraps `matrix`, checking unit rows and (for `Orthonormal`) `E Eᵀ = I`.
    pub fn new(kind: EmbeddingKind, matrix: Matrix<T>) -> Result<Self> {
        if matrix.rows() == 0 || matrix.cols() == 0 {
            return Err(Error::InvalidDims("empty embedding table".into()));
        }
        for k in 0..matrix.rows() {
            let nk = linalg::norm(matrix.row(k));
            if (nk - T::one()).abs() > T::tol(1e-12) {
                return Err(Error::SchemaViolation {
                    path: format!("embeddings[{k}]"),
                    message: format!("row norm {nk} is not 1"),
                });
            }
        }
        let table = Self { kind, matrix };
        if kind == EmbeddingKind::Orthonormal {
            if table.vocab_size() > table.dim() {
                return Err(Error::InvalidDims(format!(
                    "orthonormal table needs K <= d, got K={} d={}",
                    table.vocab_size(),
                    table.dim()
                )));
            }
            let dev = table.orthonormality_defect();
            if dev > T::tol(1e-10) {
                return Err(Error::NotOrthonormal(dev.as_f64()));
            }
        }
        Ok(table)
    }

    pub fn kind(&self) -> EmbeddingKind {
        self.kind
    }

    pub fn vocab_size(&self) -> usize {
        self.matrix.rows()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    #[inline]
    pub fn embedding(&self, token: usize) -> &[T] {
        self.matrix.row(token)
    }

    /// Largest embedding norm.
    pub fn e_max(&self) -> T {
        (0..self.vocab_size())
            .map(|k| linalg::norm(self.embedding(k)))
            .fold(T::zero(), T::max)
    }

    /// `max |E Eᵀ - I|` entrywise.
    pub fn orthonormality_defect(&self) -> T {
        let g = self.matrix.gram_rows();
        (&g - &Matrix::identity(self.vocab_size())).max_abs()
    }

    pub fn is_full_row_rank(&self) -> bool {
        self.vocab_size() <= self.dim()
            && linalg::rank(&self.matrix, T::tol(RANK_CUTOFF)) == self.vocab_size()
    }

    /// Stacks the embeddings of `tokens` into a `T x d` matrix.
    pub fn gather(&self, tokens: &[usize]) -> Matrix<T> {
        let d = self.dim();
        let mut data = Vec::with_capacity(tokens.len() * d);
        for &t in tokens {
            data.extend_from_slice(self.embedding(t));
        }
        Matrix::from_vec(tokens.len(), d, data)
    }
}

/// Draws a `K x d` embedding table. Orthonormal rows come from Gram-Schmidt on
/// Gaussian rows; unit-sphere rows are normalized Gaussians, redrawn while the
/// table is rank deficient (only checked when `K <= d`).
pub fn make_embeddings<T: Scalar>(
    vocab: usize,
    dim: usize,
    kind: EmbeddingKind,
    seed: u64,
) -> Result<EmbeddingTable<T>> {
    if vocab == 0 || dim == 0 {
        return Err(Error::InvalidDims(format!("K={vocab} d={dim}")));
    }
    if kind == EmbeddingKind::Orthonormal && vocab > dim {
        return Err(Error::InvalidDims(format!(
            "orthonormal embeddings need K <= d, got K={vocab} d={dim}"
        )));
    }
    for attempt in 0..MAX_EMBEDDING_DRAWS {
        let mut rng = rng::seeded(derive_seed(seed, attempt as u64));
        let rows: Vec<Vec<T>> = (0..vocab).map(|_| rng::gaussian_vec(&mut rng, dim)).collect();
        let rows = match kind {
            EmbeddingKind::Orthonormal => {
                let basis = linalg::orthonormalize(rows, T::tol(RANK_CUTOFF));
                if basis.len() < vocab {
                    continue;
                }
                basis
            }
            EmbeddingKind::UnitSphere => rows
                .into_iter()
                .map(|mut r| {
                    let n = linalg::norm(&r);
                    r.iter_mut().for_each(|x| *x /= n);
                    r
                })
                .collect(),
        };
        let table = EmbeddingTable {
            kind,
            matrix: Matrix::from_rows(&rows).expect("rows share the embedding dimension"),
        };
        if vocab <= dim && !table.is_full_row_rank() {
            continue;
        }
        return Ok(table);
    }
    Err(Error::RankDeficient(format!(
        "{MAX_EMBEDDING_DRAWS} draws of a {vocab}x{dim} table"
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// `C Eᵀ = I`.
    Tied,
    /// `argmax_k c_yᵀ e_k = y` for every `y`.
    GeneralArgmax,
}

/// Fixed linear classifier head `C` (row `y` is `c_y`).
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead<T> {
    kind: HeadKind,
    matrix: Matrix<T>,
}

impl<T: Scalar> ClassifierHead<T> {
    pub fn new(kind: HeadKind, matrix: Matrix<T>, embedding: &EmbeddingTable<T>) -> Result<Self> {
        if matrix.shape() != embedding.matrix().shape() {
            return Err(Error::InvalidDims(format!(
                "head shape {:?} does not match embeddings {:?}",
                matrix.shape(),
                embedding.matrix().shape()
            )));
        }
        if !matrix.is_finite() {
            return Err(Error::SchemaViolation {
                path: "head.C".into(),
                message: "non-finite entry".into(),
            });
        }
        let head = Self { kind, matrix };
        match kind {
            HeadKind::Tied => {
                let dev = head.tied_defect(embedding);
                if dev > T::tol(1e-10) {
                    return Err(Error::SchemaViolation {
                        path: "head.C".into(),
                        message: format!("tied head has |C Eᵀ - I| = {dev}"),
                    });
                }
            }
            HeadKind::GeneralArgmax => {
                if head.argmax_margin(embedding) < T::of(ARGMAX_MARGIN) {
                    return Err(Error::SchemaViolation {
                        path: "head.C".into(),
                        message: "argmax condition violated".into(),
                    });
                }
            }
        }
        Ok(head)
    }

    pub fn kind(&self) -> HeadKind {
        self.kind
    }

    pub fn matrix(&self) -> &Matrix<T> {
        &self.matrix
    }

    #[inline]
    pub fn row(&self, label: usize) -> &[T] {
        self.matrix.row(label)
    }

    /// Rescales each row so the label scores `c_yᵀ e_y` equal 1, as for the tied
    /// head. Needs positive label scores; the argmax condition is preserved.
    pub fn with_unit_label_scores(&self, embedding: &EmbeddingTable<T>) -> Result<Self> {
        let mut matrix = self.matrix.clone();
        for y in 0..matrix.rows() {
            let score = linalg::dot(self.row(y), embedding.embedding(y));
            if score <= T::zero() {
                return Err(Error::SchemaViolation {
                    path: format!("head.C[{y}]"),
                    message: format!("label score {score} is not positive"),
                });
            }
            for v in matrix.row_mut(y) {
                *v /= score;
            }
        }
        Self::new(self.kind, matrix, embedding)
    }

    /// Largest row norm `max_k ‖c_k‖`.
    pub fn max_row_norm(&self) -> T {
        (0..self.matrix.rows())
            .map(|k| linalg::norm(self.row(k)))
            .fold(T::zero(), T::max)
    }

    /// Max entry of `|C Eᵀ - I|`.
    pub fn tied_defect(&self, embedding: &EmbeddingTable<T>) -> T {
        let ce = self.matrix.matmul(&embedding.matrix().transpose());
        (&ce - &Matrix::identity(ce.rows())).max_abs()
    }

    /// `min_y (c_yᵀe_y - max_{k≠y} c_yᵀe_k)`.
    pub fn argmax_margin(&self, embedding: &EmbeddingTable<T>) -> T {
        let ce = self.matrix.matmul(&embedding.matrix().transpose());
        let k = ce.rows();
        (0..k)
            .map(|y| {
                let best_other = (0..k)
                    .filter(|&j| j != y)
                    .map(|j| ce[(y, j)])
                    .fold(T::neg_infinity(), T::max);
                ce[(y, y)] - best_other
            })
            .fold(T::infinity(), T::min)
    }
}

/// `C = (E Eᵀ)⁻¹ E`, the row-space solution of `C Eᵀ = I`.
pub fn tied_head_matrix<T: Scalar>(embedding: &EmbeddingTable<T>) -> Result<Matrix<T>> {
    if !embedding.is_full_row_rank() {
        return Err(Error::RankDeficient("embedding table".into()));
    }
    let gram = embedding.matrix().gram_rows();
    let inv = linalg::inverse(&gram).ok_or_else(|| Error::RankDeficient("E Eᵀ".into()))?;
    Ok(inv.matmul(embedding.matrix()))
}

pub fn make_head<T: Scalar>(
    embedding: &EmbeddingTable<T>,
    kind: HeadKind,
    noise: T,
    seed: u64,
) -> Result<ClassifierHead<T>> {
    let tied = tied_head_matrix(embedding)?;
    match kind {
        HeadKind::Tied => Ok(ClassifierHead { kind, matrix: tied }),
        HeadKind::GeneralArgmax => {
            let (k, d) = tied.shape();
            for attempt in 0..MAX_HEAD_DRAWS {
                let mut rng = rng::seeded(derive_seed(seed, attempt as u64));
                let z = Matrix::from_vec(k, d, rng::gaussian_vec(&mut rng, k * d));
                let mut c = tied.clone();
                c.axpy(noise, &z);
                let head = ClassifierHead { kind, matrix: c };
                if head.argmax_margin(embedding) >= T::of(ARGMAX_MARGIN) {
                    return Ok(head);
                }
            }
            Err(Error::ArgmaxUnreachable(MAX_HEAD_DRAWS))
        }
    }
}

/// One input sequence of token IDs and its next-token label.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub label: usize,
}

impl Sample {
    pub fn new(tokens: Vec<usize>, label: usize) -> Self {
        assert!(!tokens.is_empty(), "sample needs at least one token");
        Self { tokens, label }
    }

    /// The query (last) token.
    #[inline]
    pub fn last(&self) -> usize {
        *self.tokens.last().expect("non-empty sample")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// The label occurs among the input tokens.
    pub fn is_realizable(&self) -> bool {
        self.tokens.contains(&self.label)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenMode {
    /// Label drawn uniformly from the sequence.
    Cyclic,
    /// Label is the highest-priority token present under one random total order.
    Acyclic,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub embedding: EmbeddingTable<T>,
    /// `None` for vocabularies larger than the embedding dimension, which are scored
    /// by aggregating attention mass per token instead of through a head.
    pub head: Option<ClassifierHead<T>>,
    pub samples: Vec<Sample>,
    pub seed: u64,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        embedding: EmbeddingTable<T>,
        head: Option<ClassifierHead<T>>,
        samples: Vec<Sample>,
        seed: u64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidDims("dataset needs at least one sample".into()));
        }
        let k = embedding.vocab_size();
        for (i, s) in samples.iter().enumerate() {
            if s.tokens.is_empty() {
                return Err(Error::SchemaViolation {
                    path: format!("samples[{i}].tokens"),
                    message: "empty sequence".into(),
                });
            }
            if let Some(t) = s.tokens.iter().position(|&x| x >= k) {
                return Err(Error::SchemaViolation {
                    path: format!("samples[{i}].tokens[{t}]"),
                    message: format!("token {} >= K={k}", s.tokens[t]),
                });
            }
            if s.label >= k {
                return Err(Error::SchemaViolation {
                    path: format!("samples[{i}].label"),
                    message: format!("label {} >= K={k}", s.label),
                });
            }
        }
        Ok(Self {
            embedding,
            head,
            samples,
            seed,
        })
    }

    pub fn n(&self) -> usize {
        self.samples.len()
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.vocab_size()
    }

    pub fn dim(&self) -> usize {
        self.embedding.dim()
    }

    pub fn t_max(&self) -> usize {
        self.samples.iter().map(Sample::len).max().unwrap_or(0)
    }

    /// Indices of samples whose label is absent from the input.
    pub fn non_realizable(&self) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| !s.is_realizable())
            .map(|(i, _)| i)
            .collect()
    }

    pub fn with_samples(&self, samples: Vec<Sample>) -> Result<Self> {
        Self::new(self.embedding.clone(), self.head.clone(), samples, self.seed)
    }
}

/// Draws `n` sequences of length `len` with i.i.d. uniform tokens.
pub fn gen_dataset<T: Scalar>(
    embedding: &EmbeddingTable<T>,
    head: Option<&ClassifierHead<T>>,
    n: usize,
    len: usize,
    mode: GenMode,
    seed: u64,
) -> Result<Dataset<T>> {
    use rand::seq::SliceRandom;
    use rand::Rng;

    if n == 0 || len == 0 {
        return Err(Error::InvalidDims(format!("n={n} T={len}")));
    }
    let k = embedding.vocab_size();
    let mut rng = rng::seeded(seed);
    let mut priority: Vec<usize> = (0..k).collect();
    if mode == GenMode::Acyclic {
        priority.shuffle(&mut rng);
    }
    let samples = (0..n)
        .map(|_| {
            let tokens: Vec<usize> = (0..len).map(|_| rng.random_range(0..k)).collect();
            let label = match mode {
                GenMode::Cyclic => tokens[rng.random_range(0..len)],
                GenMode::Acyclic => *tokens
                    .iter()
                    .max_by_key(|&&t| priority[t])
                    .expect("non-empty sequence"),
            };
            Sample { tokens, label }
        })
        .collect();
    Dataset::new(embedding.clone(), head.cloned(), samples, seed)
}

/// Position sets of one sample (0-based positions).
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TokenIndexSets {
    /// Positions holding the label.
    pub o: Vec<usize>,
    pub o_bar: Vec<usize>,
    /// `o` plus positions whose token shares the label's component.
    pub r: Vec<usize>,
    pub r_bar: Vec<usize>,
}

pub fn index_sets(samples: &[Sample], graphs: &GraphSet) -> Result<Vec<TokenIndexSets>> {
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let g = graphs.get(s.last()).ok_or(Error::GraphMismatch {
                sample: i,
                token: s.last(),
            })?;
            let mut sets = TokenIndexSets::default();
            for (t, &x) in s.tokens.iter().enumerate() {
                if x == s.label {
                    sets.o.push(t);
                    sets.r.push(t);
                    continue;
                }
                sets.o_bar.push(t);
                if g.scc.relation(s.label, x)? == PairRelation::SameScc {
                    sets.r.push(t);
                } else {
                    sets.r_bar.push(t);
                }
            }
            Ok(sets)
        })
        .collect()
}

#[derive(Serialize, Deserialize)]
struct HeadFile {
    kind: HeadKind,
    #[serde(rename = "C")]
    c: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct DatasetFile {
    #[serde(rename = "K")]
    k: usize,
    d: usize,
    kind: EmbeddingKind,
    embeddings: Vec<Vec<f64>>,
    head: Option<HeadFile>,
    samples: Vec<Sample>,
    seed: u64,
}

fn to_rows<T: Scalar>(m: &Matrix<T>) -> Vec<Vec<f64>> {
    m.to_rows()
        .into_iter()
        .map(|r| r.into_iter().map(Scalar::as_f64).collect())
        .collect()
}

fn from_rows<T: Scalar>(rows: &[Vec<f64>], k: usize, d: usize, path: &str) -> Result<Matrix<T>> {
    if rows.len() != k {
        return Err(Error::SchemaViolation {
            path: path.into(),
            message: format!("expected {k} rows, found {}", rows.len()),
        });
    }
    if let Some(i) = rows.iter().position(|r| r.len() != d) {
        return Err(Error::SchemaViolation {
            path: format!("{path}[{i}]"),
            message: format!("expected {d} entries, found {}", rows[i].len()),
        });
    }
    let data = rows.iter().flatten().map(|&x| T::of(x)).collect();
    Ok(Matrix::from_vec(k, d, data))
}

pub fn dataset_to_json<T: Scalar>(dataset: &Dataset<T>) -> Result<String> {
    let file = DatasetFile {
        k: dataset.vocab_size(),
        d: dataset.dim(),
        kind: dataset.embedding.kind(),
        embeddings: to_rows(dataset.embedding.matrix()),
        head: dataset.head.as_ref().map(|h| HeadFile {
            kind: h.kind(),
            c: to_rows(h.matrix()),
        }),
        samples: dataset.samples.clone(),
        seed: dataset.seed,
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

pub fn dataset_from_json<T: Scalar>(text: &str) -> Result<Dataset<T>> {
    let file: DatasetFile = serde_json::from_str(text)?;
    let e = from_rows(&file.embeddings, file.k, file.d, "embeddings")?;
    let embedding = EmbeddingTable::new(file.kind, e)?;
    let head = match file.head {
        Some(h) => {
            let c = from_rows(&h.c, file.k, file.d, "head.C")?;
            Some(ClassifierHead::new(h.kind, c, &embedding)?)
        }
        None => None,
    };
    let dataset = Dataset::new(embedding, head, file.samples, file.seed)?;
    let bad = dataset.non_realizable();
    if !bad.is_empty() {
        log::warn!(
            "{} sample(s) do not contain their label (first: {})",
            bad.len(),
            bad[0]
        );
    }
    Ok(dataset)
}

pub fn save_dataset<T: Scalar>(dataset: &Dataset<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, dataset_to_json(dataset)?)?;
    Ok(())
}

pub fn load_dataset<T: Scalar>(path: impl AsRef<Path>) -> Result<Dataset<T>> {
    dataset_from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::is_acyclic;

    #[test]
    fn orthonormal_table_is_orthonormal() {
        let e = make_embeddings::<f64>(3, 3, EmbeddingKind::Orthonormal, 11).unwrap();
        assert!(e.orthonormality_defect() < 1e-12);
        assert!(matches!(
            make_embeddings::<f64>(4, 3, EmbeddingKind::Orthonormal, 0),
            Err(Error::InvalidDims(_))
        ));
    }

    #[test]
    fn single_unit_row() {
        let e = make_embeddings::<f64>(1, 4, EmbeddingKind::UnitSphere, 7).unwrap();
        assert!((linalg::norm(e.embedding(0)) - 1.0).abs() < 1e-12);
        assert!((e.e_max() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn large_vocabulary_skips_rank_check() {
        let e = make_embeddings::<f64>(40, 4, EmbeddingKind::UnitSphere, 3).unwrap();
        assert!(!e.is_full_row_rank());
        assert!(tied_head_matrix(&e).is_err());
    }

    #[test]
    fn tied_head_gives_identity_scores() {
        let e = make_embeddings::<f64>(4, 6, EmbeddingKind::Orthonormal, 2).unwrap();
        let h = make_head(&e, HeadKind::Tied, 0.0, 0).unwrap();
        assert!((h.matrix() - e.matrix()).max_abs() < 1e-12);

        let e = make_embeddings::<f64>(5, 7, EmbeddingKind::UnitSphere, 2).unwrap();
        let h = make_head(&e, HeadKind::Tied, 0.0, 0).unwrap();
        let ce = h.matrix().matmul(&e.matrix().transpose());
        assert!((&ce - &Matrix::identity(5)).frob_norm() <= 1e-10);
    }

    #[test]
    fn general_head_keeps_argmax() {
        let e = make_embeddings::<f64>(4, 4, EmbeddingKind::UnitSphere, 9).unwrap();
        let h = make_head(&e, HeadKind::GeneralArgmax, 0.1, 4).unwrap();
        for y in 0..4 {
            let scores: Vec<f64> = (0..4).map(|k| linalg::dot(h.row(y), e.embedding(k))).collect();
            let best = (0..4)
                .max_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap())
                .unwrap();
            assert_eq!(best, y);
        }
    }

    #[test]
    fn generation_is_deterministic_and_realizable() {
        let e = make_embeddings::<f64>(6, 8, EmbeddingKind::UnitSphere, 1).unwrap();
        let a = gen_dataset(&e, None, 6, 4, GenMode::Cyclic, 42).unwrap();
        let b = gen_dataset(&e, None, 6, 4, GenMode::Cyclic, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.samples.iter().all(Sample::is_realizable));
        let c = gen_dataset(&e, None, 20, 5, GenMode::Acyclic, 3).unwrap();
        assert!(is_acyclic(&GraphSet::from_dataset(&c)));
    }

    #[test]
    fn all_label_sample_index_sets() {
        let e = make_embeddings::<f64>(3, 3, EmbeddingKind::Orthonormal, 0).unwrap();
        let ds = Dataset::new(e, None, vec![Sample::new(vec![1, 1, 1], 1)], 0).unwrap();
        let sets = index_sets(&ds.samples, &GraphSet::from_dataset(&ds)).unwrap();
        assert_eq!(sets[0].o, vec![0, 1, 2]);
        assert_eq!(sets[0].r, vec![0, 1, 2]);
        assert!(sets[0].o_bar.is_empty() && sets[0].r_bar.is_empty());
    }

    #[test]
    fn missing_graph_is_reported() {
        let samples = vec![Sample::new(vec![0, 1], 0)];
        let other = GraphSet::from_samples(&[Sample::new(vec![0, 2], 0)]);
        assert!(matches!(
            index_sets(&samples, &other),
            Err(Error::GraphMismatch { sample: 0, token: 1 })
        ));
    }

    #[test]
    fn out_of_range_token_names_sample() {
        let e = make_embeddings::<f64>(3, 3, EmbeddingKind::Orthonormal, 0).unwrap();
        let err = Dataset::new(
            e,
            None,
            vec![Sample::new(vec![0], 0), Sample::new(vec![1, 5], 1)],
            0,
        )
        .unwrap_err();
        match err {
            Error::SchemaViolation { path, .. } => assert_eq!(path, "samples[1].tokens[1]"),
            other => panic!("unexpected {other}"),
        }
    }
}
