//! Token-priority graphs, their strongly connected components and the cyclic
//! subdataset.
//!
//! For every last token `k` the graph `G^(k)` holds an edge `y -> x` for each
//! sample ending in `k` with label `y` and input token `x != y`. Priorities between
//! nodes are read off the condensation: `i => j` when `j` is reachable from `i`
//! but not conversely, `i ≍ j` when both lie in one component.

use std::collections::{BTreeMap, BTreeSet};

use serde::Serialize;

use crate::dataset::{Dataset, Sample, TokenIndexSets};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Directed graph over token IDs for one last token.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct TokenPriorityGraph {
    last_token: usize,
    nodes: BTreeSet<usize>,
    edges: BTreeMap<usize, BTreeSet<usize>>,
}

impl TokenPriorityGraph {
    pub fn new(last_token: usize) -> Self {
        Self {
            last_token,
            ..Self::default()
        }
    }

    pub fn last_token(&self) -> usize {
        self.last_token
    }

    pub fn add_node(&mut self, node: usize) {
        self.nodes.insert(node);
    }

    /// Adds `from -> to`; self-loops only register the node.
    pub fn add_edge(&mut self, from: usize, to: usize) {
        self.nodes.insert(from);
        self.nodes.insert(to);
        if from != to {
            self.edges.entry(from).or_default().insert(to);
        }
    }

    pub fn nodes(&self) -> &BTreeSet<usize> {
        &self.nodes
    }

    pub fn successors(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.get(&node).into_iter().flatten().copied()
    }

    pub fn has_edge(&self, from: usize, to: usize) -> bool {
        self.edges.get(&from).is_some_and(|s| s.contains(&to))
    }

    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges
            .iter()
            .flat_map(|(&from, tos)| tos.iter().map(move |&to| (from, to)))
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeSet::len).sum()
    }
}

/// Builds `G^(k)` for every last token `k` present in `samples`.
pub fn build_tpgs(samples: &[Sample]) -> BTreeMap<usize, TokenPriorityGraph> {
    let mut graphs: BTreeMap<usize, TokenPriorityGraph> = BTreeMap::new();
    for sample in samples {
        let k = sample.last();
        let g = graphs
            .entry(k)
            .or_insert_with(|| TokenPriorityGraph::new(k));
        g.add_node(sample.label);
        for &x in &sample.tokens {
            g.add_edge(sample.label, x);
        }
    }
    graphs
}

/// Fixed-size bitset over component indices.
#[derive(Clone, Debug, PartialEq, Eq)]
struct BitSet(Vec<u64>);

impl BitSet {
    fn new(len: usize) -> Self {
        Self(vec![0; len.div_ceil(64)])
    }

    fn insert(&mut self, i: usize) {
        self.0[i / 64] |= 1 << (i % 64);
    }

    fn contains(&self, i: usize) -> bool {
        self.0[i / 64] & (1 << (i % 64)) != 0
    }

    fn union_with(&mut self, other: &Self) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a |= b;
        }
    }
}

/// Relation between two distinct nodes of one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum PairRelation {
    /// `i => j`: `j` reachable from `i`, `i` not reachable from `j`.
    StrictPriority,
    /// `i ≍ j`: same strongly connected component.
    SameScc,
    Unrelated,
}

/// Strongly connected components of one graph plus its condensation.
#[derive(Clone, Debug)]
pub struct SccDecomposition {
    /// Components in Tarjan emission order (reverse topological: sinks first).
    components: Vec<Vec<usize>>,
    comp_of: BTreeMap<usize, usize>,
    condensation: Vec<BTreeSet<usize>>,
    levels: Vec<usize>,
    reach: Vec<BitSet>,
}

/// Tarjan's algorithm, iterative so deep chains cannot overflow the stack.
pub fn scc(graph: &TokenPriorityGraph) -> SccDecomposition {
    let nodes: Vec<usize> = graph.nodes().iter().copied().collect();
    let local: BTreeMap<usize, usize> = nodes.iter().enumerate().map(|(i, &n)| (n, i)).collect();
    let adj: Vec<Vec<usize>> = nodes
        .iter()
        .map(|&n| graph.successors(n).map(|s| local[&s]).collect())
        .collect();
    let m = nodes.len();

    const UNVISITED: usize = usize::MAX;
    let mut index = vec![UNVISITED; m];
    let mut lowlink = vec![0usize; m];
    let mut on_stack = vec![false; m];
    let mut stack: Vec<usize> = Vec::new();
    let mut next_index = 0;
    let mut comps_local: Vec<Vec<usize>> = Vec::new();

    for root in 0..m {
        if index[root] != UNVISITED {
            continue;
        }
        // (node, position of the next successor to visit)
        let mut call: Vec<(usize, usize)> = vec![(root, 0)];
        index[root] = next_index;
        lowlink[root] = next_index;
        next_index += 1;
        stack.push(root);
        on_stack[root] = true;

        while let Some(&mut (v, ref mut pos)) = call.last_mut() {
            if *pos < adj[v].len() {
                let w = adj[v][*pos];
                *pos += 1;
                if index[w] == UNVISITED {
                    index[w] = next_index;
                    lowlink[w] = next_index;
                    next_index += 1;
                    stack.push(w);
                    on_stack[w] = true;
                    call.push((w, 0));
                } else if on_stack[w] {
                    lowlink[v] = lowlink[v].min(index[w]);
                }
                continue;
            }
            call.pop();
            if let Some(&(parent, _)) = call.last() {
                lowlink[parent] = lowlink[parent].min(lowlink[v]);
            }
            if lowlink[v] == index[v] {
                let mut comp = Vec::new();
                loop {
                    let w = stack.pop().expect("tarjan stack underflow");
                    on_stack[w] = false;
                    comp.push(w);
                    if w == v {
                        break;
                    }
                }
                comps_local.push(comp);
            }
        }
    }

    let mut comp_of_local = vec![0usize; m];
    for (c, comp) in comps_local.iter().enumerate() {
        for &v in comp {
            comp_of_local[v] = c;
        }
    }
    let nc = comps_local.len();
    let mut condensation = vec![BTreeSet::new(); nc];
    for v in 0..m {
        for &w in &adj[v] {
            let (cv, cw) = (comp_of_local[v], comp_of_local[w]);
            if cv != cw {
                condensation[cv].insert(cw);
            }
        }
    }
    // Successor components are always emitted earlier, so one forward pass suffices.
    let mut levels = vec![1usize; nc];
    let mut reach: Vec<BitSet> = Vec::with_capacity(nc);
    for c in 0..nc {
        let mut r = BitSet::new(nc);
        r.insert(c);
        for &s in &condensation[c] {
            debug_assert!(s < c, "condensation edge against emission order");
            levels[c] = levels[c].max(levels[s] + 1);
            r.union_with(&reach[s]);
        }
        reach.push(r);
    }

    let components: Vec<Vec<usize>> = comps_local
        .into_iter()
        .map(|c| {
            let mut ids: Vec<usize> = c.into_iter().map(|v| nodes[v]).collect();
            ids.sort_unstable();
            ids
        })
        .collect();
    let comp_of = nodes
        .iter()
        .enumerate()
        .map(|(v, &n)| (n, comp_of_local[v]))
        .collect();
    SccDecomposition {
        components,
        comp_of,
        condensation,
        levels,
        reach,
    }
}

impl SccDecomposition {
    pub fn components(&self) -> &[Vec<usize>] {
        &self.components
    }

    pub fn num_components(&self) -> usize {
        self.components.len()
    }

    pub fn component_of(&self, node: usize) -> Option<usize> {
        self.comp_of.get(&node).copied()
    }

    /// Edges between component indices.
    pub fn condensation(&self) -> &[BTreeSet<usize>] {
        &self.condensation
    }

    /// Longest-path layer of a component; sinks sit at level 1.
    pub fn level(&self, component: usize) -> usize {
        self.levels[component]
    }

    pub fn contains(&self, node: usize) -> bool {
        self.comp_of.contains_key(&node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = usize> + '_ {
        self.comp_of.keys().copied()
    }

    /// True when component `to` is reachable from component `from` (reflexive).
    pub fn component_reachable(&self, from: usize, to: usize) -> bool {
        self.reach[from].contains(to)
    }

    pub fn relation(&self, i: usize, j: usize) -> Result<PairRelation> {
        if i == j {
            return Err(Error::Config(format!("relation of node {i} with itself")));
        }
        let ci = self.component_of(i).ok_or(Error::UnknownNode(i))?;
        let cj = self.component_of(j).ok_or(Error::UnknownNode(j))?;
        Ok(if ci == cj {
            PairRelation::SameScc
        } else if self.component_reachable(ci, cj) && !self.component_reachable(cj, ci) {
            PairRelation::StrictPriority
        } else {
            PairRelation::Unrelated
        })
    }

    /// Integer priority per node: the level of its component.
    pub fn priority_assignment(&self) -> BTreeMap<usize, usize> {
        self.comp_of
            .iter()
            .map(|(&n, &c)| (n, self.levels[c]))
            .collect()
    }

    pub fn all_singletons(&self) -> bool {
        self.components.iter().all(|c| c.len() == 1)
    }
}

/// A token-priority graph together with its decomposition.
#[derive(Clone, Debug)]
pub struct AnalyzedGraph {
    pub graph: TokenPriorityGraph,
    pub scc: SccDecomposition,
}

/// All graphs of a dataset keyed by last token.
#[derive(Clone, Debug, Default)]
pub struct GraphSet {
    graphs: BTreeMap<usize, AnalyzedGraph>,
}

impl GraphSet {
    pub fn from_graphs(graphs: BTreeMap<usize, TokenPriorityGraph>) -> Self {
        let graphs = graphs
            .into_iter()
            .map(|(k, graph)| {
                let scc = scc(&graph);
                (k, AnalyzedGraph { graph, scc })
            })
            .collect();
        Self { graphs }
    }

    pub fn from_samples(samples: &[Sample]) -> Self {
        Self::from_graphs(build_tpgs(samples))
    }

    pub fn from_dataset<T: Scalar>(dataset: &Dataset<T>) -> Self {
        Self::from_samples(&dataset.samples)
    }

    pub fn get(&self, last_token: usize) -> Option<&AnalyzedGraph> {
        self.graphs.get(&last_token)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &AnalyzedGraph)> {
        self.graphs.iter().map(|(&k, g)| (k, g))
    }

    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    pub fn total_components(&self) -> usize {
        self.graphs.values().map(|g| g.scc.num_components()).sum()
    }
}

/// True iff every component of every graph is a singleton.
pub fn is_acyclic(graphs: &GraphSet) -> bool {
    graphs.iter().all(|(_, g)| g.scc.all_singletons())
}

/// A sample restricted to the positions sharing the label's component. The query
/// token is the original last token, which may itself have been removed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ReducedSample {
    pub tokens: Vec<usize>,
    pub query: usize,
    pub label: usize,
    /// Index of the originating sample.
    pub source: usize,
}

#[derive(Clone, Debug, Serialize)]
pub struct CyclicSplit {
    /// Reduced samples for every index in `idx_i`, in order.
    pub samples: Vec<ReducedSample>,
    pub idx_i: Vec<usize>,
    pub idx_ibar: Vec<usize>,
    /// Size of the full dataset; losses over the subdataset are normalized by it.
    pub n_total: usize,
}

impl CyclicSplit {
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

pub fn cyclic_split_from_sets(samples: &[Sample], sets: &[TokenIndexSets]) -> CyclicSplit {
    let mut split = CyclicSplit {
        samples: Vec::new(),
        idx_i: Vec::new(),
        idx_ibar: Vec::new(),
        n_total: samples.len(),
    };
    for (i, (sample, set)) in samples.iter().zip(sets).enumerate() {
        if set.r.len() > set.o.len() {
            split.idx_i.push(i);
            split.samples.push(ReducedSample {
                tokens: set.r.iter().map(|&t| sample.tokens[t]).collect(),
                query: sample.last(),
                label: sample.label,
                source: i,
            });
        } else {
            split.idx_ibar.push(i);
        }
    }
    split
}

/// Cyclic subdataset: each sample keeps only the positions in its label's component.
pub fn cyclic_split<T: Scalar>(dataset: &Dataset<T>, graphs: &GraphSet) -> Result<CyclicSplit> {
    let sets = crate::dataset::index_sets(&dataset.samples, graphs)?;
    Ok(cyclic_split_from_sets(&dataset.samples, &sets))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn graph(edges: &[(usize, usize)]) -> TokenPriorityGraph {
        let mut g = TokenPriorityGraph::new(0);
        for &(a, b) in edges {
            g.add_edge(a, b);
        }
        g
    }

    #[test]
    fn build_rule_on_tiny_samples() {
        let g = build_tpgs(&[Sample::new(vec![1, 2, 3], 1)]);
        let g3 = &g[&3];
        assert_eq!(g3.edges().collect::<Vec<_>>(), vec![(1, 2), (1, 3)]);

        let g = build_tpgs(&[Sample::new(vec![2, 2], 2)]);
        assert_eq!(g[&2].nodes().iter().copied().collect::<Vec<_>>(), vec![2]);
        assert_eq!(g[&2].edge_count(), 0);

        let k = 5;
        let g = build_tpgs(&[Sample::new(vec![1, 2, k], 1), Sample::new(vec![2, 1, k], 2)]);
        let d = scc(&g[&k]);
        assert!(g[&k].has_edge(1, 2) && g[&k].has_edge(2, 1));
        assert_eq!(d.relation(1, 2).unwrap(), PairRelation::SameScc);
    }

    #[test]
    fn singleton_and_two_cycle() {
        let mut g = TokenPriorityGraph::new(5);
        g.add_node(5);
        let d = scc(&g);
        assert_eq!(d.components(), &[vec![5]]);
        assert_eq!(d.level(0), 1);

        let d = scc(&graph(&[(1, 2), (2, 1)]));
        assert_eq!(d.components(), &[vec![1, 2]]);
        assert_eq!(d.relation(2, 1).unwrap(), PairRelation::SameScc);
    }

    #[test]
    fn chain_relations_use_reachability() {
        let d = scc(&graph(&[(1, 2), (2, 3)]));
        assert_eq!(d.relation(1, 3).unwrap(), PairRelation::StrictPriority);
        assert_eq!(d.relation(3, 1).unwrap(), PairRelation::Unrelated);
        let m = d.priority_assignment();
        assert_eq!((m[&1], m[&2], m[&3]), (3, 2, 1));
        assert!(matches!(d.relation(1, 9), Err(Error::UnknownNode(9))));
    }

    #[test]
    fn isolated_nodes_are_unrelated() {
        let mut g = TokenPriorityGraph::new(0);
        g.add_node(1);
        g.add_node(2);
        let d = scc(&g);
        assert_eq!(d.relation(1, 2).unwrap(), PairRelation::Unrelated);
        assert_eq!(d.relation(2, 1).unwrap(), PairRelation::Unrelated);
    }

    #[test]
    fn single_component_levels_are_equal() {
        let d = scc(&graph(&[(1, 2), (2, 3), (3, 4), (4, 1)]));
        let m = d.priority_assignment();
        assert_eq!(d.num_components(), 1);
        assert!(m.values().all(|&v| v == m[&1]));
    }

    #[test]
    fn acyclicity_of_graph_sets() {
        assert!(is_acyclic(&GraphSet::default()));
        let mut map = BTreeMap::new();
        map.insert(0, graph(&[(1, 2), (2, 1)]));
        assert!(!is_acyclic(&GraphSet::from_graphs(map)));
    }

    #[test]
    fn deep_chain_does_not_recurse() {
        let edges: Vec<(usize, usize)> = (0..5_000).map(|i| (i, i + 1)).collect();
        let d = scc(&graph(&edges));
        assert_eq!(d.num_components(), 5_001);
        assert_eq!(d.priority_assignment()[&0], 5_001);
    }
}
