use attnlab::attention::{softmax, LossKind};
use attnlab::dataset::{index_sets, EmbeddingKind, GenMode};
use attnlab::experiment::{generate_dataset, HeadChoice, InstanceSpec};
use attnlab::graph::{scc, GraphSet, TokenPriorityGraph};
use attnlab::svm::{build_constraints, MatrixSubspace};
use attnlab::Matrix;
use proptest::prelude::*;

fn spec_strategy() -> impl Strategy<Value = InstanceSpec> {
    (2usize..7, 0usize..3, 1usize..8, 2usize..6, any::<bool>(), any::<u64>()).prop_map(
        |(k, extra, n, t, cyclic, seed)| InstanceSpec {
            k,
            d: k + extra,
            n,
            t,
            mode: if cyclic { GenMode::Cyclic } else { GenMode::Acyclic },
            embedding: EmbeddingKind::UnitSphere,
            head: HeadChoice::None,
            noise: 0.0,
            loss: LossKind::Log,
            seed,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_is_a_distribution(logits in prop::collection::vec(-50.0f64..50.0, 1..12)) {
        let p = softmax(&logits);
        let total: f64 = p.iter().sum();
        prop_assert!((total - 1.0).abs() < 1e-12);
        prop_assert!(p.iter().all(|&x| x >= 0.0));
        let top = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let i = logits.iter().position(|&x| x == top).unwrap();
        prop_assert!(p.iter().all(|&x| x <= p[i] + 1e-15));
    }

    #[test]
    fn components_partition_the_nodes(
        n in 1usize..10,
        edges in prop::collection::vec((0usize..10, 0usize..10), 0..30),
    ) {
        let mut g = TokenPriorityGraph::new(0);
        for i in 0..n {
            g.add_node(i);
        }
        for (a, b) in edges {
            if a < n && b < n && a != b {
                g.add_edge(a, b);
            }
        }
        let dec = scc(&g);
        let mut seen: Vec<usize> = dec.components().iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        // Every edge goes within a component or down the condensation.
        for (a, b) in g.edges() {
            let (ca, cb) = (dec.component_of(a).unwrap(), dec.component_of(b).unwrap());
            prop_assert!(ca == cb || dec.component_reachable(ca, cb));
            prop_assert!(ca == cb || !dec.component_reachable(cb, ca));
        }
    }

    #[test]
    fn index_sets_split_every_position(spec in spec_strategy()) {
        let ds = generate_dataset::<f64>(&spec).unwrap();
        let g = GraphSet::from_dataset(&ds);
        let sets = index_sets(&ds.samples, &g).unwrap();
        for (s, set) in ds.samples.iter().zip(&sets) {
            prop_assert_eq!(set.o.len() + set.o_bar.len(), s.len());
            prop_assert_eq!(set.r.len() + set.r_bar.len(), s.len());
            prop_assert!(!set.o.is_empty());
            prop_assert!(set.o.iter().all(|p| set.r.contains(p)));
        }
    }

    #[test]
    fn projection_is_idempotent_and_orthogonal(spec in spec_strategy(), scale in 0.1f64..5.0) {
        let ds = generate_dataset::<f64>(&spec).unwrap();
        let c = build_constraints(&GraphSet::from_dataset(&ds));
        let fin = MatrixSubspace::span(&c.equalities, &ds.embedding);
        let d = ds.dim();
        let w = Matrix::from_vec(d, d, (0..d * d).map(|i| scale * ((i * 37 % 11) as f64 - 5.0)).collect());
        let p = fin.project(&w);
        let pp = fin.project(&p);
        prop_assert!((&p - &pp).frob_norm() < 1e-9);
        prop_assert!(p.frob_inner(&fin.project_out(&w)).abs() < 1e-9 * (1.0 + w.frob_norm().powi(2)));
    }

    #[test]
    fn generation_is_deterministic(spec in spec_strategy()) {
        let a = generate_dataset::<f64>(&spec).unwrap();
        let b = generate_dataset::<f64>(&spec).unwrap();
        prop_assert_eq!(a, b);
    }
}
