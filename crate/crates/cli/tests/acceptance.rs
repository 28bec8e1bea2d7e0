//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on failure.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use hmnas_cli::ablation::{run_ablation, AblationTable};
use hmnas_cli::config::ExperimentConfig;
use hmnas_cli::gradcheck::{run_suite, TOLERANCE};
use hmnas_cli::pipeline::{EvalEntry, EvalReport, Pipeline, Stage};
use hmnas_core::derive::{from_masks, DiscreteNet};
use hmnas_core::finetune::{finetune, initial_model, new_state, FinetuneConfig, InitMode};
use hmnas_core::masker::{binarize, straight_through_step, HierMasks, MaskTrainConfig, DEFAULT_TAU};
use hmnas_core::numcore::{OpKind, Tensor};
use hmnas_core::optim::{AdamState, Slot, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
use hmnas_core::searchspace::{ArchParams, BinaryMasks, Mode, SearchSpaceSpec, Supernet};
use hmnas_core::seed::{self, tags};
use hmnas_core::trainer::{evaluate, train_supernet, ProvenanceLog, TrainConfig, TrainState};
use rand::Rng;

type Outcome = Result<String, String>;

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = seed::rng(seed, tags::ORACLE);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn apply(cfg: &mut ExperimentConfig, lines: &str) {
    for kv in lines.lines().map(str::trim).filter(|l| !l.is_empty()) {
        cfg.apply_override(kv).unwrap_or_else(|e| panic!("{kv}: {e}"));
    }
}

/// One normal cell, one intermediate node, two candidate ops.
fn micro_config(seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::default();
    apply(
        &mut cfg,
        "dataset=synthetic:blobs2:0
         space.nodes_per_cell=4
         space.num_cells=1
         space.init_channels=4
         space.ops=sep_conv_3x3,max_pool_3x3
         space.reduction_cells=
         space.stem_multiplier=1
         train.epochs=12
         train.warmup_epochs=4
         train.w_lr=0.05
         masker.epochs=6
         masker.lr_decay_epoch=4
         finetune.epochs=6",
    );
    cfg.set_seed(seed);
    cfg
}

/// Two intermediate nodes and three ops on an eight-class task, so that edge
/// ranking matters and test errors are not all zero.
fn small_config(seed: u64) -> ExperimentConfig {
    let mut cfg = micro_config(seed);
    apply(
        &mut cfg,
        "dataset=synthetic:stripes8:0
         space.nodes_per_cell=5
         space.ops=sep_conv_3x3,max_pool_3x3,identity
         train.epochs=10
         finetune.epochs=5
         ablation.random_seeds=3",
    );
    cfg
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let results = run_suite(10, |_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed = results.iter().filter(|c| !c.passed()).count();
    let detail = format!(
        "{} checks over 10 seeds, worst {:.2e} ({}, seed {}), {secs:.1}s",
        results.len(),
        worst.max_rel_error,
        worst.name,
        worst.seed
    );
    if failed == 0 && worst.max_rel_error < TOLERANCE && secs < 120.0 {
        Ok(detail)
    } else {
        Err(format!("{failed} failed; {detail}"))
    }
}

fn criterion_2() -> Outcome {
    let spec = SearchSpaceSpec {
        nodes_per_cell: 5,
        num_cells: 3,
        init_channels: 4,
        ops: OpKind::ALL.to_vec(),
        reduction_cells: vec![1],
        num_classes: 3,
        input_channels: 3,
        stem_multiplier: 1,
    };
    let net = Supernet::build(spec, 7).map_err(|e| e.to_string())?;
    let ones = BinaryMasks::ones(&net);
    for b in 0..100u64 {
        let x = rand_tensor(&[2, 3, 8, 8], 1000 + b);
        let mode = [Mode::Eval, Mode::BatchStats, Mode::Train][b as usize % 3];
        let plain = net.forward(&x, None, mode).map_err(|e| e.to_string())?;
        let masked = net.forward(&x, Some(&ones), mode).map_err(|e| e.to_string())?;
        if !plain.bit_eq(&masked) {
            return Err(format!("batch {b} ({mode:?}) differs by {:e}", plain.max_abs_diff(&masked)));
        }
    }
    Ok("100 batches bit-identical across eval, batch-stat and train modes".into())
}

fn criterion_3() -> Outcome {
    // loss(m) = (m·w·x − y)², gradient taken at the binarised mask
    let (w, x, y, lr) = (0.8, 1.5, 0.2, 1e-3);
    let mut real = [0.3];
    let mut adam = AdamState::new([1]);
    let (mut m1, mut m2, mut expected) = (0.0, 0.0, real[0]);
    let mut worst: f64 = 0.0;
    for t in 1..=50 {
        let bin = binarize(&real, DEFAULT_TAU)[0];
        let g = 2.0 * (bin * w * x - y) * w * x;
        m1 = ADAM_BETA1 * m1 + (1.0 - ADAM_BETA1) * g;
        m2 = ADAM_BETA2 * m2 + (1.0 - ADAM_BETA2) * g * g;
        let mh = m1 / (1.0 - ADAM_BETA1.powi(t));
        let vh = m2 / (1.0 - ADAM_BETA2.powi(t));
        expected -= lr * mh / (vh.sqrt() + ADAM_EPS);
        straight_through_step(&mut adam, &mut [Slot { name: "m", value: &mut real, grad: &[g], update_mask: None }], lr)
            .map_err(|e| e.to_string())?;
        worst = worst.max((real[0] - expected).abs());
    }
    if worst > 1e-15 {
        return Err(format!("straight-through update off by {worst:e}"));
    }

    // a weight whose presence doubles the loss must be switched off
    let (w, x, y) = (1.0, 1.0, -1.0);
    let mut real = [MaskTrainConfig::default().mask_init];
    let mut adam = AdamState::new([1]);
    for step in 0..100 {
        let bin = binarize(&real, DEFAULT_TAU)[0];
        if bin == 0.0 {
            return Ok(format!("50 steps within {worst:.1e} of the reference update; harmful weight off after {step} steps"));
        }
        let g = [2.0 * (bin * w * x - y) * w * x];
        straight_through_step(&mut adam, &mut [Slot { name: "m", value: &mut real, grad: &g, update_mask: None }], 1e-4)
            .map_err(|e| e.to_string())?;
    }
    Err(format!("harmful weight still on after 100 steps (real mask {})", real[0]))
}

fn criterion_4() -> Outcome {
    let net = Supernet::build(SearchSpaceSpec::default(), 0).map_err(|e| e.to_string())?;
    let init = MaskTrainConfig::default().mask_init;
    let reference = HierMasks::init(&net, init, DEFAULT_TAU).project();
    for tau in [1e-4, 1e-3, 5e-3, 1e-2] {
        if HierMasks::init(&net, init, tau).project() != reference {
            return Err(format!("binarisation at tau {tau:e} differs"));
        }
    }
    Ok(format!("identical for tau in {{1e-4, 1e-3, 5e-3, 1e-2}}; everything kept: {}", reference == BinaryMasks::ones(&net)))
}

fn criterion_5() -> Outcome {
    let mut net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::SepConv3x3, OpKind::AvgPool3x3], 3), 11)
        .map_err(|e| e.to_string())?;
    let mut rng = seed::rng(12, tags::ORACLE);
    for t in net.arch.alpha.iter_mut().chain(net.arch.beta.iter_mut()) {
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
    }
    let x = rand_tensor(&[3, 3, 6, 6], 14);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    // per edge: dropped, or exactly one of the two ops; both edges dropped is excluded
    for choice in 0..9usize {
        let picks = [choice % 3, choice / 3];
        if picks == [0, 0] {
            continue;
        }
        let mut masks = BinaryMasks::ones(&net);
        let mut alpha = vec![0.0; 4];
        let mut beta = vec![0.0; 2];
        for (e, &p) in picks.iter().enumerate() {
            if p > 0 {
                beta[e] = 1.0;
                alpha[e * 2 + p - 1] = 1.0;
            }
        }
        masks.alpha[0] = Tensor::new(vec![2, 2], alpha).unwrap();
        masks.beta[0] = Tensor::from_vec(beta);
        let arch = from_masks(&net, &masks);
        let discrete = DiscreteNet::new(&net, &arch, None).map_err(|e| e.to_string())?;
        for mode in [Mode::Eval, Mode::BatchStats] {
            let a = net.forward(&x, Some(&masks), mode).map_err(|e| e.to_string())?;
            let b = discrete.forward(&x, mode).map_err(|e| e.to_string())?;
            worst = worst.max(a.max_abs_diff(&b));
        }
        count += 1;
    }
    if count == 8 && worst < 1e-10 {
        Ok(format!("{count} settings, max abs diff {worst:.1e}"))
    } else {
        Err(format!("{count} settings, max abs diff {worst:e}"))
    }
}

struct PipelineRun {
    report: EvalReport,
    oracle_errors: Vec<f64>,
}

/// Every non-degenerate architecture of a one-node, two-edge space: each edge
/// is dropped or keeps a non-empty subset of the ops.
fn enumerate_micro(net: &Supernet) -> Vec<BinaryMasks> {
    let n_ops = net.spec().ops.len();
    let per_edge = 1usize << n_ops;
    let mut out = Vec::new();
    for code in 0..per_edge * per_edge {
        let subsets = [code % per_edge, code / per_edge];
        if subsets == [0, 0] {
            continue;
        }
        let mut m = BinaryMasks::ones(net);
        let mut alpha = vec![0.0; 2 * n_ops];
        let mut beta = vec![0.0; 2];
        for (e, &s) in subsets.iter().enumerate() {
            beta[e] = if s > 0 { 1.0 } else { 0.0 };
            for o in 0..n_ops {
                alpha[e * n_ops + o] = ((s >> o) & 1) as f64;
            }
        }
        m.alpha[0] = Tensor::new(vec![2, n_ops], alpha).unwrap();
        m.beta[0] = Tensor::from_vec(beta);
        out.push(m);
    }
    out
}

/// Trains one fixed architecture from scratch with the pipeline's total weight-training budget.
fn train_oracle(p: &Pipeline, masks: &BinaryMasks, seed: u64) -> Result<f64, String> {
    let mut net = Supernet::build(p.spec.clone(), seed).map_err(|e| e.to_string())?;
    net.arch = ArchParams { alpha: net.arch.alpha.iter().map(|t| t.map(|_| 0.0)).collect(), beta: net.arch.beta.iter().map(|t| t.map(|_| 0.0)).collect() };
    let cfg = FinetuneConfig {
        epochs: p.cfg.train.epochs + p.cfg.finetune.epochs,
        init: InitMode::Random,
        target_loss: None,
        seed,
        ..p.cfg.finetune.clone()
    };
    let model = initial_model(&net, masks, &cfg).map_err(|e| e.to_string())?;
    let mut state = new_state(&model);
    let out = finetune(model, &p.data, &p.part, &cfg, &mut state, |_, _, _| Ok(())).map_err(|e| e.to_string())?;
    let (_, acc) = evaluate(&out.model.net, &p.data, &p.part.test, Some(&out.model.masks), cfg.batch_size)
        .map_err(|e| e.to_string())?;
    Ok(1.0 - acc)
}

fn micro_runs(root: &Path) -> Result<Vec<PipelineRun>, String> {
    let mut runs = Vec::new();
    for &s in &SEEDS {
        let p = Pipeline::new(micro_config(s), &root.join(format!("micro{s}"))).map_err(|e| e.to_string())?;
        let report = p.run(&Stage::ALL).map_err(|e| e.to_string())?.expect("eval stage");
        let template = Supernet::build(p.spec.clone(), s).map_err(|e| e.to_string())?;
        let oracle_errors = enumerate_micro(&template)
            .iter()
            .map(|m| train_oracle(&p, m, s))
            .collect::<Result<Vec<_>, _>>()?;
        runs.push(PipelineRun { report, oracle_errors });
    }
    Ok(runs)
}

fn criterion_6(runs: &[PipelineRun], secs: f64) -> Outcome {
    let gaps: Vec<f64> = runs
        .iter()
        .map(|r| r.report.final_model.error() - r.oracle_errors.iter().copied().fold(f64::INFINITY, f64::min))
        .collect();
    let per_seed: Vec<String> = runs
        .iter()
        .zip(&gaps)
        .map(|(r, g)| format!("{:.3}/{:+.3}", r.report.final_model.error(), g))
        .collect();
    let med = median(gaps);
    let detail = format!(
        "{} architectures enumerated; final error/gap to best per seed [{}]; median gap {:.2} pp; {secs:.0}s",
        runs[0].oracle_errors.len(),
        per_seed.join(" "),
        100.0 * med
    );
    if med <= 0.02 && secs < 1800.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

struct AblationRun {
    supernet: EvalEntry,
    table: AblationTable,
}

fn ablation_runs(root: &Path) -> Result<Vec<AblationRun>, String> {
    let mut runs = Vec::new();
    for &s in &SEEDS {
        let p = Pipeline::new(small_config(s), &root.join(format!("ablate{s}"))).map_err(|e| e.to_string())?;
        let sup = p.train_supernet().and_then(|ck| ck.supernet()).map_err(|e| e.to_string())?;
        let supernet = p.eval_entry(&sup, None).map_err(|e| e.to_string())?;
        let table = run_ablation(&p).map_err(|e| e.to_string())?;
        runs.push(AblationRun { supernet, table });
    }
    Ok(runs)
}

/// Arm (a) of the ablation is the full pipeline: searched masks, warm fine-tune.
fn criterion_7(runs: &[AblationRun]) -> Outcome {
    let kept: Vec<f64> = runs.iter().map(|r| r.table.arm("a").params[0] as f64 / r.supernet.params as f64).collect();
    let fewer = kept.iter().all(|&f| f < 1.0);
    let gaps: Vec<f64> = runs.iter().map(|r| r.table.arm("a").test_errors[0] - r.supernet.error()).collect();
    let med = median(gaps.clone());
    let detail = format!(
        "params kept [{}]; fine-tuned minus supernet error [{}]; median {:.2} pp",
        kept.iter().map(|f| format!("{f:.3}")).collect::<Vec<_>>().join(" "),
        gaps.iter().map(|g| format!("{g:+.3}")).collect::<Vec<_>>().join(" "),
        100.0 * med
    );
    if fewer && med <= 0.01 {
        Ok(detail)
    } else {
        Err(format!("strictly fewer params in every run: {fewer}; {detail}"))
    }
}

fn criterion_8(runs: &[AblationRun]) -> Outcome {
    let mut violations: BTreeMap<&str, usize> = BTreeMap::new();
    for (s, r) in SEEDS.iter().zip(runs) {
        let t = &r.table;
        let (a, b, c, d, e) = (t.arm("a"), t.arm("b"), t.arm("c"), t.arm("d"), t.arm("e"));
        let checks = [
            ("masks <= random arch", a.mean_error() <= d.mean_error()),
            ("warm <= random-init epochs", a.mean_epochs_to_target() <= e.mean_epochs_to_target()),
            ("multi <= single heuristic", b.mean_error() <= c.mean_error()),
        ];
        for (name, ok) in checks {
            *violations.entry(name).or_default() += usize::from(!ok);
        }
        println!(
            "    seed {s}: test error a {:.3} b {:.3} c {:.3} d {:.3} (supernet {:.3}); epochs to target a {} e {}",
            a.mean_error(),
            b.mean_error(),
            c.mean_error(),
            d.mean_error(),
            r.supernet.error(),
            a.mean_epochs_to_target(),
            e.mean_epochs_to_target()
        );
    }
    let detail = violations.iter().map(|(k, v)| format!("{k}: violated in {v}/5")).collect::<Vec<_>>().join("; ");
    if violations.values().all(|&v| v < 4) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9(root: &Path) -> Outcome {
    let first = root.join("micro0");
    let second = root.join("repeat0");
    Pipeline::new(micro_config(0), &second)
        .and_then(|p| p.run(&Stage::ALL))
        .map_err(|e| e.to_string())?;
    let mut names: Vec<String> = std::fs::read_dir(&first)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut other: Vec<String> = std::fs::read_dir(&second)
        .map_err(|e| e.to_string())?
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    other.sort();
    if names != other {
        return Err(format!("file sets differ: {names:?} vs {other:?}"));
    }
    for n in &names {
        if std::fs::read(first.join(n)).unwrap() != std::fs::read(second.join(n)).unwrap() {
            return Err(format!("{n} differs"));
        }
    }
    Ok(format!("{} files byte-identical ({})", names.len(), names.join(", ")))
}

fn criterion_10() -> Outcome {
    let defaults = TrainConfig::default();
    let cfg = TrainConfig { epochs: defaults.warmup_epochs + 3, batch_size: 64, w_lr: 0.05, ..defaults };
    let data = hmnas_core::data::Synthetic::Blobs(2).generate(5);
    let part = hmnas_core::data::Partition::new(data.len(), 0.2, cfg.train_fraction, 5).map_err(|e| e.to_string())?;
    let mut net = Supernet::build(SearchSpaceSpec::micro(vec![OpKind::SepConv3x3, OpKind::MaxPool3x3], 2), 5)
        .map_err(|e| e.to_string())?;
    let initial = net.arch.clone();
    let mut state = TrainState::new(&net);
    let mut prov = ProvenanceLog::default();
    let mut frozen_epochs = 0;
    let mut moved_after = false;
    train_supernet(&mut net, &data, &part, &cfg, &mut state, &mut prov, |net, s, _| {
        let same = net.arch.alpha.iter().zip(&initial.alpha).chain(net.arch.beta.iter().zip(&initial.beta)).all(|(a, b)| a.bit_eq(b));
        if s.epoch <= cfg.warmup_epochs && same {
            frozen_epochs = s.epoch;
        }
        moved_after |= s.epoch > cfg.warmup_epochs && !same;
        Ok(())
    })
    .map_err(|e| e.to_string())?;
    let w_clean = prov.weight_samples.iter().all(|i| part.train.binary_search(i).is_ok());
    let arch_clean = prov.arch_samples.iter().all(|i| part.val.binary_search(i).is_ok());
    let detail = format!(
        "alpha/beta bit-unchanged through epoch {frozen_epochs} of {} warm-up; updated afterwards: {moved_after}; \
         w saw {} train samples only: {w_clean}; alpha/beta saw {} val samples only: {arch_clean}",
        cfg.warmup_epochs,
        prov.weight_samples.len(),
        prov.arch_samples.len()
    );
    if frozen_epochs == cfg.warmup_epochs && moved_after && w_clean && arch_clean && prov.arch_batches > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn main() -> ExitCode {
    let root = tempfile::tempdir().expect("temp dir");
    let mut failed = 0;
    let mut report = |n: usize, name: &str, r: Outcome| {
        match &r {
            Ok(d) => println!("PASS criterion {n:>2} {name}: {d}"),
            Err(d) => println!("FAIL criterion {n:>2} {name}: {d}"),
        }
        failed += usize::from(r.is_err());
    };
    report(1, "gradient check", criterion_1());
    report(2, "all-ones masks are the identity", criterion_2());
    report(3, "straight-through update", criterion_3());
    report(4, "threshold robustness", criterion_4());
    report(5, "discrete equivalence", criterion_5());
    let start = Instant::now();
    match micro_runs(root.path()) {
        Ok(runs) => report(6, "search vs enumerated oracle", criterion_6(&runs, start.elapsed().as_secs_f64())),
        Err(e) => report(6, "search vs enumerated oracle", Err(e)),
    }
    match ablation_runs(root.path()) {
        Ok(runs) => {
            report(7, "parameter reduction and recovery", criterion_7(&runs));
            report(8, "ablation directions", criterion_8(&runs));
        }
        Err(e) => {
            report(7, "parameter reduction and recovery", Err(e.clone()));
            report(8, "ablation directions", Err(e));
        }
    }
    report(9, "determinism", criterion_9(root.path()));
    report(10, "warm-up freeze and split hygiene", criterion_10());
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
