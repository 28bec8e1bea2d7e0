mod common;

use std::collections::{BTreeMap, BTreeSet};

use common::rand_tensor;
use hmnas_core::derive::{
    aggregate_importance, derive_heuristic, edge_importance_report, export_dot, from_masks, op_histogram,
    sample_random_arch, DiscreteNet, Level, Provenance,
};
use hmnas_core::numcore::{OpKind, Tensor};
use hmnas_core::searchspace::{BinaryMasks, CellKind, Mode, SearchSpaceSpec, Supernet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn small_spec() -> SearchSpaceSpec {
    SearchSpaceSpec {
        nodes_per_cell: 5,
        num_cells: 3,
        init_channels: 2,
        ops: vec![OpKind::SepConv3x3, OpKind::MaxPool3x3, OpKind::Identity],
        reduction_cells: vec![1],
        num_classes: 3,
        input_channels: 3,
        stem_multiplier: 1,
    }
}

fn random_masks(net: &Supernet, p: f64, seed: u64) -> BinaryMasks {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = BinaryMasks::ones(net);
    for t in m.alpha.iter_mut().chain(m.beta.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = if rng.gen_bool(p) { 1.0 } else { 0.0 });
    }
    m
}

fn randomise_arch(net: &mut Supernet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for t in net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-2.0..2.0));
    }
}

/// `(node, pred)` pairs in the fixed edge order: node `i` has `i + 2` predecessors.
fn edge_list(k: usize) -> Vec<(usize, usize)> {
    (0..k).flat_map(|i| (0..i + 2).map(move |j| (i, j))).collect()
}

#[test]
fn surviving_set_matches_set_construction() {
    let mut net = Supernet::build(small_spec(), 1).unwrap();
    randomise_arch(&mut net, 2);
    let n = 3;
    let edges = edge_list(2);
    for seed in 0..20 {
        let masks = random_masks(&net, 0.6, seed);
        let arch = from_masks(&net, &masks);
        assert_eq!(arch.provenance, Provenance::HierarchicalMasks);
        for (k, cell) in arch.cells.iter().enumerate() {
            let mut expected = BTreeSet::new();
            for (e, &(node, pred)) in edges.iter().enumerate() {
                for o in 0..n {
                    if masks.beta[k].data()[e] == 1.0 && masks.alpha[k].data()[e * n + o] == 1.0 {
                        expected.insert((node, pred, o));
                    }
                }
            }
            let got: BTreeSet<_> =
                cell.edges.iter().flat_map(|e| e.ops.iter().map(move |&o| (e.node, e.pred, o))).collect();
            assert_eq!(got, expected);
            assert!(cell.edges.iter().all(|e| !e.ops.is_empty()));

            // importance: exp(β) over surviving edges of the node, normalised
            for e in &cell.edges {
                let beta = net.arch.beta[k].data();
                let live: Vec<usize> = cell.edges.iter().filter(|f| f.node == e.node).map(|f| f.pred).collect();
                let off = edges.iter().position(|&(nd, _)| nd == e.node).unwrap();
                let z: f64 = live.iter().map(|&p| beta[off + p].exp()).sum();
                assert!((e.importance - beta[off + e.pred].exp() / z).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn edge_with_dead_ops_or_dead_edge_mask_is_dropped() {
    let net = Supernet::build(small_spec(), 3).unwrap();
    let mut masks = BinaryMasks::ones(&net);
    // edge 0: edge mask off, ops on
    masks.beta[0].data_mut()[0] = 0.0;
    // edge 1: edge mask on, every op off
    masks.alpha[0].data_mut()[3..6].fill(0.0);
    let arch = from_masks(&net, &masks);
    let normal = &arch.cells[0];
    assert!(normal.edges.iter().all(|e| e.node != 0));
    assert_eq!(normal.edges.len(), 3);
    assert_eq!(arch.cells[1].edges.len(), 5);
}

#[test]
fn heuristic_levels_rank_edges_differently() {
    let mut net = Supernet::build(small_spec(), 0).unwrap();
    for t in net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut()) {
        t.data_mut().fill(0.0);
    }
    // node 1 edges are 2, 3, 4 (preds c_{k-1}, c_{k-2}, node 0)
    let a = net.arch.alpha[0].data_mut();
    a[6..9].copy_from_slice(&[5.0, 0.0, 0.0]);
    a[9..12].copy_from_slice(&[0.1, 0.0, 0.0]);
    a[12..15].copy_from_slice(&[0.0, 0.0, 0.2]);
    // node 0: tie on the α row, op 0 kept
    a[0..3].copy_from_slice(&[0.2, 0.2, 0.1]);
    net.arch.beta[0].data_mut()[2..5].copy_from_slice(&[0.0, 1.0, 2.0]);

    let pick = |level| -> Vec<(usize, usize, Vec<usize>)> {
        derive_heuristic(&net, level).cells[0].edges.iter().map(|e| (e.node, e.pred, e.ops.clone())).collect()
    };
    // single: strongest op weights are 0.986 (pred 0), 0.379 (node 0), 0.356 (pred 1)
    assert_eq!(pick(Level::Single), vec![(0, 0, vec![0]), (0, 1, vec![0]), (1, 0, vec![0]), (1, 2, vec![2])]);
    // multi: β ranks node 0 then c_{k-2}
    assert_eq!(pick(Level::Multi), vec![(0, 0, vec![0]), (0, 1, vec![0]), (1, 1, vec![0]), (1, 2, vec![2])]);

    let multi = derive_heuristic(&net, Level::Multi);
    assert_eq!(multi.provenance, Provenance::HeuristicTop2);
    let imp: Vec<f64> = multi.cells[0].edges.iter().filter(|e| e.node == 1).map(|e| e.importance).collect();
    let z = 1f64.exp() + 2f64.exp();
    assert!((imp[0] - 1f64.exp() / z).abs() < 1e-12 && (imp[1] - 2f64.exp() / z).abs() < 1e-12);
    let single = derive_heuristic(&net, Level::Single);
    assert!(single.cells[0].edges.iter().all(|e| (e.importance - 0.5).abs() < 1e-15));
}

#[test]
fn random_architectures_are_uniform() {
    // micro space with two candidate ops: 2 edges × 2 ops → 4 architectures
    let spec = SearchSpaceSpec::micro(vec![OpKind::SepConv3x3, OpKind::MaxPool3x3], 2);
    let mut counts: BTreeMap<Vec<usize>, usize> = BTreeMap::new();
    let samples = 10_000;
    for seed in 0..samples {
        let arch = sample_random_arch(&spec, seed);
        assert_eq!(arch.provenance, Provenance::Random);
        let cell = &arch.cells[0];
        assert_eq!(cell.edges.len(), 2);
        *counts.entry(cell.edges.iter().map(|e| e.ops[0]).collect()).or_default() += 1;
    }
    assert_eq!(counts.len(), 4);
    let expected = samples as f64 / 4.0;
    let chi2: f64 = counts.values().map(|&c| (c as f64 - expected).powi(2) / expected).sum();
    // 3 degrees of freedom, p = 0.001
    assert!(chi2 < 16.266, "chi-square {chi2} counts {counts:?}");
}

#[test]
fn random_architectures_pick_two_edges_per_node() {
    let spec = small_spec();
    for seed in 0..50 {
        let arch = sample_random_arch(&spec, seed);
        assert_eq!(arch, sample_random_arch(&spec, seed));
        for cell in &arch.cells {
            for node in 0..2 {
                assert_eq!(cell.edges.iter().filter(|e| e.node == node).count(), 2);
            }
            assert!(cell.edges.iter().all(|e| e.ops.len() == 1));
        }
    }
}

#[test]
fn histogram_counts() {
    let net = Supernet::build(small_spec(), 5).unwrap();
    for seed in 0..10 {
        let arch = from_masks(&net, &random_masks(&net, 0.5, seed));
        for (h, cell) in op_histogram(&arch).iter().zip(&arch.cells) {
            assert_eq!(h.kind, cell.kind);
            let total: usize = h.edges_per_node.iter().sum();
            assert_eq!(total, cell.edges.len());
            assert_eq!(h.ops_per_edge.values().sum::<usize>(), cell.edges.len());
            assert_eq!(h.ops_per_edge.keys().copied().collect::<Vec<_>>(), vec![1, 2, 3]);
            for (&k, &c) in &h.ops_per_edge {
                assert_eq!(c, cell.edges.iter().filter(|e| e.ops.len() == k).count());
            }
        }
    }
}

#[test]
fn importance_report_and_aggregation() {
    let mut runs = Vec::new();
    let mut raw: BTreeMap<(CellKind, usize, usize), Vec<f64>> = BTreeMap::new();
    for seed in 0..5 {
        let mut net = Supernet::build(small_spec(), seed).unwrap();
        randomise_arch(&mut net, 100 + seed);
        let rep = edge_importance_report(&net);
        for r in &rep {
            let k = if r.kind == CellKind::Normal { 0 } else { 1 };
            let beta = net.arch.beta[k].data();
            for n in &r.nodes {
                let off = if n.node == 0 { 0 } else { 2 };
                let z: f64 = (0..n.node + 2).map(|j| beta[off + j].exp()).sum();
                assert!((n.mean - 1.0 / (n.node + 2) as f64).abs() < 1e-12);
                for &(pred, w) in &n.edges {
                    assert!((w - beta[off + pred].exp() / z).abs() < 1e-12);
                    raw.entry((r.kind, n.node, pred)).or_default().push(w);
                }
            }
        }
        runs.push(rep);
    }
    let agg = aggregate_importance(&runs);
    assert_eq!(agg.len(), raw.len());
    for s in agg {
        let v = &raw[&(s.kind, s.node, s.pred)];
        let mean = v.iter().sum::<f64>() / 5.0;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 4.0;
        assert!((s.mean - mean).abs() < 1e-15 && (s.std - var.sqrt()).abs() < 1e-15);
    }
}

/// Independent reading of the exported graph: `(cluster, from, to, ops, importance)`.
fn parse_edges(dot: &str) -> Vec<(String, String, String, String, String)> {
    let mut cluster = String::new();
    let mut out = Vec::new();
    for line in dot.lines().map(str::trim) {
        if let Some(rest) = line.strip_prefix("subgraph cluster_") {
            cluster = rest.trim_end_matches(" {").to_string();
        }
        if let Some((lhs, attrs)) = line.split_once(" [label=\"") {
            if let Some((from, to)) = lhs.split_once(" -> ") {
                let (ops, imp) = attrs.trim_end_matches("\"];").split_once(" | ").unwrap();
                let strip = |s: &str| s.trim_matches('"').split_once(':').unwrap().1.to_string();
                out.push((cluster.clone(), strip(from), strip(to), ops.to_string(), imp.to_string()));
            }
        }
    }
    out
}

#[test]
fn dot_export_round_trips_and_is_stable() {
    let mut net = Supernet::build(small_spec(), 6).unwrap();
    randomise_arch(&mut net, 7);
    let arch = from_masks(&net, &random_masks(&net, 0.7, 8));
    let dot = export_dot(&arch);
    assert_eq!(dot, export_dot(&arch.clone()));
    assert!(dot.starts_with("digraph"));

    let label = |p: usize| match p {
        0 => "c_{k-1}".to_string(),
        1 => "c_{k-2}".to_string(),
        m => (m - 2).to_string(),
    };
    let mut expected = Vec::new();
    for cell in &arch.cells {
        for e in &cell.edges {
            let ops: Vec<&str> = e.ops.iter().map(|&o| arch.ops[o].name()).collect();
            expected.push((
                cell.kind.name().to_string(),
                label(e.pred),
                label(e.node + 2),
                ops.join(","),
                format!("{:.3}", e.importance),
            ));
        }
    }
    assert_eq!(parse_edges(&dot), expected);
}

#[test]
fn empty_architecture_exports_only_inputs_and_output() {
    let net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::SepConv3x3], 2), 0).unwrap();
    let mut masks = BinaryMasks::ones(&net);
    masks.beta[0].data_mut().fill(0.0);
    let arch = from_masks(&net, &masks);
    assert!(arch.cells[0].edges.is_empty());
    let dot = export_dot(&arch);
    assert!(!dot.contains("->"));
    let nodes: Vec<&str> = dot.lines().filter(|l| l.contains("[label=")).collect();
    assert_eq!(nodes.len(), 3);
    assert!(dot.contains("c_{k-1}") && dot.contains("c_{k-2}") && dot.contains("\"output\""));
}

fn scramble_buffers(net: &mut Supernet, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for b in &mut net.weights.buffers {
        b.mean.iter_mut().for_each(|m| *m = rng.gen_range(-0.5..0.5));
        b.var.iter_mut().for_each(|v| *v = rng.gen_range(0.5..2.0));
    }
}

#[test]
fn fully_discrete_masks_match_explicit_network() {
    let mut net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::SepConv3x3, OpKind::AvgPool3x3], 3), 11).unwrap();
    randomise_arch(&mut net, 12);
    scramble_buffers(&mut net, 13);
    let x = rand_tensor(&[3, 3, 6, 6], 14);
    // one op per surviving edge: both edges (2 × 2 op choices) or a single edge (2 × 2)
    let mut settings: Vec<([f64; 2], Option<usize>, Option<usize>)> = Vec::new();
    for o0 in 0..2 {
        for o1 in 0..2 {
            settings.push(([1.0, 1.0], Some(o0), Some(o1)));
        }
        settings.push(([1.0, 0.0], Some(o0), None));
        settings.push(([0.0, 1.0], None, Some(o0)));
    }
    assert_eq!(settings.len(), 8);
    for (edge_mask, op0, op1) in settings {
        let mut alpha = vec![0.0; 4];
        op0.into_iter().for_each(|o| alpha[o] = 1.0);
        op1.into_iter().for_each(|o| alpha[2 + o] = 1.0);
        let mut masks = BinaryMasks::ones(&net);
        masks.beta[0] = Tensor::from_vec(edge_mask.to_vec());
        masks.alpha[0] = Tensor::new(vec![2, 2], alpha).unwrap();
        let arch = from_masks(&net, &masks);
        let discrete = DiscreteNet::new(&net, &arch, None).unwrap();
        for mode in [Mode::Eval, Mode::BatchStats] {
            let a = net.forward(&x, Some(&masks), mode).unwrap();
            let b = discrete.forward(&x, mode).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "{mode:?}: {}", a.max_abs_diff(&b));
        }
    }
}

#[test]
fn masked_supernet_matches_explicit_network_with_reductions() {
    let mut net = Supernet::build(small_spec(), 21).unwrap();
    randomise_arch(&mut net, 22);
    scramble_buffers(&mut net, 23);
    let x = rand_tensor(&[2, 3, 8, 8], 24);
    for seed in 0..4 {
        let mut masks = random_masks(&net, 0.6, 30 + seed);
        // an edge whose ops are all masked still takes a share of the edge
        // weights in the supernet; give each such edge one op
        for k in 0..2 {
            for e in 0..5 {
                if masks.beta[k].data()[e] == 1.0 && masks.alpha[k].data()[e * 3..e * 3 + 3].iter().all(|&v| v == 0.0) {
                    masks.alpha[k].data_mut()[e * 3] = 1.0;
                }
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in masks.w.iter_mut().flatten() {
            t.data_mut().iter_mut().for_each(|v| *v = if rng.gen_bool(0.8) { 1.0 } else { 0.0 });
        }
        let arch = from_masks(&net, &masks);
        // the conversion back keeps exactly the surviving edges and ops
        let round = arch.to_masks(&net);
        assert_eq!(from_masks(&net, &round).cells, arch.cells);
        let discrete = DiscreteNet::new(&net, &arch, Some(&masks)).unwrap();
        for mode in [Mode::Eval, Mode::BatchStats] {
            let a = net.forward(&x, Some(&masks), mode).unwrap();
            let b = discrete.forward(&x, mode).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10, "seed {seed} {mode:?}: {}", a.max_abs_diff(&b));
        }
    }
}

#[test]
fn heuristic_architecture_evaluates_through_masks() {
    let mut net = Supernet::build(small_spec(), 31).unwrap();
    randomise_arch(&mut net, 32);
    let arch = derive_heuristic(&net, Level::Multi);
    let masks = arch.to_masks(&net);
    let x = rand_tensor(&[2, 3, 8, 8], 33);
    let a = net.forward(&x, Some(&masks), Mode::BatchStats).unwrap();
    let b = DiscreteNet::new(&net, &arch, None).unwrap().forward(&x, Mode::BatchStats).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-10);
}

#[test]
fn untrained_importance_is_near_uniform() {
    let net = Supernet::build(SearchSpaceSpec::default(), 3).unwrap();
    for rep in edge_importance_report(&net) {
        for n in rep.nodes {
            let u = 1.0 / n.edges.len() as f64;
            assert!(n.edges.iter().all(|&(_, w)| (w - u).abs() < 1e-3));
            assert!((n.edges.iter().map(|e| e.1).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn full_and_heuristic_histograms() {
    let mut net = Supernet::build(SearchSpaceSpec::default(), 4).unwrap();
    let full = op_histogram(&from_masks(&net, &BinaryMasks::ones(&net)));
    for h in &full {
        assert_eq!(h.edges_per_node, vec![2, 3, 4, 5]);
        assert_eq!(h.ops_per_edge[&7], 14);
    }
    randomise_arch(&mut net, 5);
    for level in [Level::Single, Level::Multi] {
        for h in op_histogram(&derive_heuristic(&net, level)) {
            assert_eq!(h.edges_per_node, vec![2, 2, 2, 2]);
            assert_eq!(h.ops_per_edge[&1], 8);
            assert_eq!(h.ops_per_edge.values().sum::<usize>(), 8);
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn node_shift_leaves_importance_and_heuristic_unchanged(seed in 0u64..1000, node in 0usize..2, shift in -64i32..64) {
        let mut net = Supernet::build(small_spec(), 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // dyadic values keep the shifted logits exact
        for t in net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut()) {
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-64i32..64) as f64 / 32.0);
        }
        let before = (edge_importance_report(&net), derive_heuristic(&net, Level::Multi));
        let range = if node == 0 { 0..2 } else { 2..5 };
        for b in &mut net.arch.beta {
            b.data_mut()[range.clone()].iter_mut().for_each(|v| *v += shift as f64 / 4.0);
        }
        let after = (edge_importance_report(&net), derive_heuristic(&net, Level::Multi));
        let edges = |a: &hmnas_core::derive::DerivedArch| -> Vec<_> {
            a.cells.iter().flat_map(|c| c.edges.iter().map(|e| (e.node, e.pred, e.ops.clone()))).collect()
        };
        proptest::prop_assert_eq!(edges(&before.1), edges(&after.1));
        for (r0, r1) in before.0.iter().zip(&after.0) {
            for (n0, n1) in r0.nodes.iter().zip(&r1.nodes) {
                for (a, b) in n0.edges.iter().zip(&n1.edges) {
                    proptest::prop_assert!((a.1 - b.1).abs() < 1e-15);
                }
            }
        }
    }
}
