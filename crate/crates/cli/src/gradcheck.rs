//! Finite-difference validation of every differentiable building block.

use hmnas_core::numcore::{finite_diff_check_many, op_forward, BnStats, OpKind, OpSpec, Tape, Tensor, Var};
use hmnas_core::searchspace::{mixed_op_forward, node_forward, Binding, Mode, SearchSpaceSpec, Supernet};
use hmnas_core::seed::{self, tags};
use rand::Rng;

/// Maximum relative error accepted by the suite.
pub const TOLERANCE: f64 = 1e-4;
const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_error < TOLERANCE
    }
}

fn rand_tensor(shape: &[usize], seed: u64, stream: u64) -> Tensor {
    let mut rng = seed::rng(seed, tags::ORACLE.wrapping_mul(1000).wrapping_add(stream));
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape")
}

fn op_params(spec: &OpSpec, seed: u64) -> Vec<Tensor> {
    spec.param_shapes()
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let t = rand_tensor(&p.shape, seed, 100 + i as u64);
            if p.name.ends_with("gamma") {
                t.map(|v| 1.0 + 0.3 * v)
            } else {
                t
            }
        })
        .collect()
}

/// `Σ probe ⊙ y` turns a tensor output into a scalar with a generic gradient.
fn probe_sum(tape: &mut Tape, y: Var, probe: &Tensor) -> hmnas_core::Result<Var> {
    let r = tape.constant(probe.clone());
    let m = tape.mul(y, r)?;
    tape.sum(m)
}

fn check_op(kind: OpKind, stride: usize, seed: u64) -> hmnas_core::Result<f64> {
    let spec = OpSpec::new(kind, 2, stride);
    let mut inputs = vec![rand_tensor(&[2, 2, 5, 5], seed, 1)];
    inputs.extend(op_params(&spec, seed));
    let side = if stride == 2 { 3 } else { 5 };
    let probe = rand_tensor(&[2, 2, side, side], seed, 2);
    let bn = vec![BnStats::Batch; spec.num_bn()];
    finite_diff_check_many(
        |t, v| {
            let o = op_forward(t, &spec, v[0], &v[1..], &bn)?;
            probe_sum(t, o.out, &probe)
        },
        &inputs,
        STEP,
    )
}

fn check_mixed_op(seed: u64) -> hmnas_core::Result<f64> {
    let kinds = [OpKind::SepConv3x3, OpKind::MaxPool3x3, OpKind::Identity];
    let specs: Vec<OpSpec> = kinds.iter().map(|&k| OpSpec::new(k, 2, 1)).collect();
    let params: Vec<Vec<Tensor>> = specs.iter().enumerate().map(|(i, s)| op_params(s, seed * 10 + i as u64)).collect();
    let x = rand_tensor(&[2, 2, 4, 4], seed, 3);
    let alpha = rand_tensor(&[3], seed, 4);
    let probe = rand_tensor(&[2, 2, 4, 4], seed, 5);
    let mut inputs = vec![x, alpha];
    inputs.extend(params.iter().flatten().cloned());
    let counts: Vec<usize> = params.iter().map(Vec::len).collect();
    finite_diff_check_many(
        |t, v| {
            let mut offsets = vec![2];
            for c in &counts {
                offsets.push(offsets.last().unwrap() + c);
            }
            let y = mixed_op_forward(t, v[1], None, &[2, 2, 4, 4], false, |t, o| {
                let bn = vec![BnStats::Batch; specs[o].num_bn()];
                Ok(op_forward(t, &specs[o], v[0], &v[offsets[o]..offsets[o + 1]], &bn)?.out)
            })?;
            probe_sum(t, y, &probe)
        },
        &inputs,
        STEP,
    )
}

fn check_node(seed: u64) -> hmnas_core::Result<f64> {
    let inputs = vec![
        rand_tensor(&[2, 3, 3, 3], seed, 6),
        rand_tensor(&[2, 3, 3, 3], seed, 7),
        rand_tensor(&[2, 3, 3, 3], seed, 8),
        rand_tensor(&[3], seed, 9),
    ];
    let probe = rand_tensor(&[2, 3, 3, 3], seed, 10);
    finite_diff_check_many(
        |t, v| {
            let y = node_forward(t, &v[..3], v[3], None)?;
            probe_sum(t, y, &probe)
        },
        &inputs,
        STEP,
    )
}

fn check_batch_norm(seed: u64) -> hmnas_core::Result<f64> {
    let inputs = vec![
        rand_tensor(&[3, 3, 3, 3], seed, 11),
        rand_tensor(&[3], seed, 12).map(|v| 1.0 + 0.5 * v),
        rand_tensor(&[3], seed, 13),
    ];
    let probe = rand_tensor(&[3, 3, 3, 3], seed, 14);
    finite_diff_check_many(
        |t, v| {
            let y = t.batch_norm(v[0], Some(v[1]), Some(v[2]), BnStats::Batch)?;
            probe_sum(t, y, &probe)
        },
        &inputs,
        STEP,
    )
}

/// Cross-entropy of a micro supernet w.r.t. every weight and both logit sets.
fn check_micro_supernet(seed: u64) -> hmnas_core::Result<f64> {
    let mut net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::DilConv3x3, OpKind::AvgPool3x3], 3), seed)?;
    let mut rng = seed::rng(seed, tags::ORACLE);
    for p in &mut net.weights.params {
        let gamma = p.name.ends_with("gamma");
        p.value.data_mut().iter_mut().for_each(|v| {
            let r: f64 = rng.gen_range(-1.0..1.0);
            *v = if gamma { 1.0 + 0.3 * r } else { r };
        });
    }
    for t in net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let x = rand_tensor(&[4, 3, 4, 4], seed, 15);
    let labels = [0usize, 1, 2, 1];
    let mut inputs = vec![net.arch.alpha[0].clone(), net.arch.beta[0].clone()];
    inputs.extend(net.weights.params.iter().map(|p| p.value.clone()));
    finite_diff_check_many(
        |t, v| {
            let bind = Binding { params: v[2..].to_vec(), alpha: vec![v[0]], beta: vec![v[1]] };
            let input = t.constant(x.clone());
            let pass = net.forward_tape(t, &bind, None, input, Mode::BatchStats)?;
            t.cross_entropy(pass.logits, &labels)
        },
        &inputs,
        1e-6,
    )
}

/// Runs every check over `seeds` seeds, calling `report` as results arrive.
pub fn run_suite(seeds: u64, mut report: impl FnMut(&GradCheck)) -> hmnas_core::Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    let mut push = |name: String, seed: u64, err: f64| {
        let c = GradCheck { name, seed, max_rel_error: err };
        report(&c);
        out.push(c);
    };
    for seed in 0..seeds {
        for kind in OpKind::ALL {
            for stride in [1, 2] {
                push(format!("op {kind} stride {stride}"), seed, check_op(kind, stride, seed)?);
            }
        }
        push("mixed operation".into(), seed, check_mixed_op(seed)?);
        push("node combination".into(), seed, check_node(seed)?);
        push("batch norm".into(), seed, check_batch_norm(seed)?);
        push("micro supernet loss (w, alpha, beta)".into(), seed, check_micro_supernet(seed)?);
    }
    Ok(out)
}
