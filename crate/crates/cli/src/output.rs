use std::fmt::Write as _;

use attnlab::graph::GraphSet;
use attnlab::svm::{build_constraints, solve_graph_svm, subspaces, SvmOptions};
use attnlab::Dataset64;
use serde_json::{json, Value};

pub fn graphs_json(graphs: &GraphSet) -> Value {
    let list: Vec<Value> = graphs
        .iter()
        .map(|(k, a)| {
            let levels: serde_json::Map<String, Value> = a
                .scc
                .priority_assignment()
                .into_iter()
                .map(|(node, level)| (node.to_string(), json!(level)))
                .collect();
            json!({
                "last_token": k,
                "nodes": a.graph.nodes(),
                "edges": a.graph.edges().map(|(i, j)| [i, j]).collect::<Vec<_>>(),
                "components": a.scc.components(),
                "levels": levels,
            })
        })
        .collect();
    json!({ "graphs": list, "total_components": graphs.total_components() })
}

/// One cluster per graph; nodes of a component share a fill color index.
pub fn graphs_dot(graphs: &GraphSet) -> String {
    let mut out = String::from("digraph tpg {\n  node [shape=circle, colorscheme=set312, style=filled];\n");
    for (k, a) in graphs.iter() {
        let _ = writeln!(out, "  subgraph cluster_{k} {{\n    label=\"last token {k}\";");
        for node in a.graph.nodes() {
            let comp = a.scc.component_of(*node).unwrap_or(0);
            let _ = writeln!(
                out,
                "    \"{k}:{node}\" [label=\"{node}\", fillcolor={}];",
                comp % 12 + 1
            );
        }
        for (i, j) in a.graph.edges() {
            let _ = writeln!(out, "    \"{k}:{i}\" -> \"{k}:{j}\";");
        }
        out.push_str("  }\n");
    }
    out.push_str("}\n");
    out
}

pub fn svm_json(ds: &Dataset64, opts: &SvmOptions) -> Value {
    let graphs = GraphSet::from_dataset(ds);
    let c = build_constraints(&graphs);
    let sol = solve_graph_svm(&c, &ds.embedding, opts);
    let sub = subspaces(&graphs, &ds.embedding);
    json!({
        "W": sol.w.to_rows(),
        "norm": sol.norm(),
        "status": sol.status,
        "residuals": sol.summary(),
        "subspace_dims": {
            "fin": sub.fin.dim(),
            "active": sub.active.dim(),
            "svm": sub.svm.dim(),
        },
        "constraints": {
            "equalities": c.equalities.len(),
            "inequalities": c.inequalities.len(),
        },
    })
}
