use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use super::DerivedArch;
use crate::error::Result;
use crate::searchspace::predecessor_label;

fn node_id(kind: &str, label: &str) -> String {
    format!("\"{kind}:{label}\"")
}

/// Graphviz rendering of `arch`, one cluster per cell kind. Edges carry the
/// comma-separated operation names and the edge importance to three
/// decimals; intermediate nodes without surviving inputs or outputs are
/// omitted. The output depends only on `arch`.
pub fn export_dot(arch: &DerivedArch) -> String {
    let mut s = String::from("digraph arch {\n  rankdir=LR;\n");
    for cell in &arch.cells {
        let kind = cell.kind.name();
        let _ = writeln!(s, "  subgraph cluster_{kind} {{\n    label=\"{kind}\";");
        let fed: BTreeSet<usize> = cell.edges.iter().map(|e| e.node).collect();
        let used: BTreeSet<usize> = cell.edges.iter().filter(|e| e.pred >= 2).map(|e| e.pred - 2).collect();
        let mut labels = vec![predecessor_label(0), predecessor_label(1)];
        labels.extend(fed.union(&used).map(|&m| predecessor_label(m + 2)));
        labels.push("output".into());
        for l in &labels {
            let _ = writeln!(s, "    {} [label=\"{l}\"];", node_id(kind, l));
        }
        for e in &cell.edges {
            let _ = writeln!(
                s,
                "    {} -> {} [label=\"{} | {:.3}\"];",
                node_id(kind, &predecessor_label(e.pred)),
                node_id(kind, &predecessor_label(e.node + 2)),
                arch.op_names(e).join(","),
                e.importance
            );
        }
        for &m in &fed {
            let _ = writeln!(s, "    {} -> {};", node_id(kind, &predecessor_label(m + 2)), node_id(kind, "output"));
        }
        s.push_str("  }\n");
    }
    s.push_str("}\n");
    s
}

pub fn write_dot(arch: &DerivedArch, path: &Path) -> Result<()> {
    std::fs::write(path, export_dot(arch))?;
    Ok(())
}
