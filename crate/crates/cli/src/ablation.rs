//! Ablation arms sharing one trained supernet and dataset.

use hmnas_core::derive::{derive_heuristic, sample_random_arch, DerivedArch, Level};
use hmnas_core::finetune::{finetune, initial_model, new_state, FinetuneConfig, InitMode};
use hmnas_core::searchspace::{BinaryMasks, Supernet};
use hmnas_core::seed::derive_seed;

use crate::error::Result;
use crate::metrics::write_table;
use crate::pipeline::{Pipeline, MASKS_CKPT, SUPERNET_CKPT};

pub const ABLATION_CSV: &str = "ablation.csv";
pub const HEADER: &str = "arm,description,runs,test_error_mean,test_error_std,params_mean,epochs_to_target_mean";

#[derive(Clone, Debug, PartialEq)]
pub struct ArmResult {
    pub arm: &'static str,
    pub description: &'static str,
    pub test_errors: Vec<f64>,
    pub params: Vec<usize>,
    pub epochs_to_target: Vec<usize>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation; zero for a single run.
fn std_dev(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

impl ArmResult {
    pub fn mean_error(&self) -> f64 {
        mean(&self.test_errors)
    }

    pub fn mean_epochs_to_target(&self) -> f64 {
        mean(&self.epochs_to_target.iter().map(|&e| e as f64).collect::<Vec<_>>())
    }

    fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.arm,
            self.description,
            self.test_errors.len(),
            self.mean_error(),
            std_dev(&self.test_errors),
            mean(&self.params.iter().map(|&p| p as f64).collect::<Vec<_>>()),
            self.mean_epochs_to_target()
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationTable {
    pub arms: Vec<ArmResult>,
    /// Architectures of arms (b), (c) and each run of (d), for inspection.
    pub heuristic_multi: DerivedArch,
    pub heuristic_single: DerivedArch,
    pub random: Vec<DerivedArch>,
}

impl AblationTable {
    pub fn arm(&self, id: &str) -> &ArmResult {
        self.arms.iter().find(|a| a.arm == id).expect("arm present")
    }
}

struct Run {
    error: f64,
    params: usize,
    epochs_to_target: usize,
}

fn finetune_and_test(p: &Pipeline, net: &Supernet, masks: &BinaryMasks, cfg: &FinetuneConfig) -> Result<Run> {
    let model = initial_model(net, masks, cfg)?;
    let mut state = new_state(&model);
    let out = finetune(model, &p.data, &p.part, cfg, &mut state, |_, _, _| Ok(()))?;
    let e = p.eval_entry(&out.model.net, Some(&out.model.masks))?;
    Ok(Run { error: e.error(), params: e.params, epochs_to_target: out.epochs_to_target.unwrap_or(cfg.epochs + 1) })
}

fn arm(id: &'static str, description: &'static str, runs: Vec<Run>) -> ArmResult {
    ArmResult {
        arm: id,
        description,
        test_errors: runs.iter().map(|r| r.error).collect(),
        params: runs.iter().map(|r| r.params).collect(),
        epochs_to_target: runs.iter().map(|r| r.epochs_to_target).collect(),
    }
}

/// Runs the five arms and writes `ablation.csv`. The mask stage is run first
/// when its checkpoint is missing.
pub fn run_ablation(p: &Pipeline) -> Result<AblationTable> {
    let sup = p.prerequisite(SUPERNET_CKPT, "ablate")?;
    if !p.path(MASKS_CKPT).exists() {
        p.search_mask()?;
    }
    let (net, masks, _) = p.derived_arch()?;
    let target = p.target_loss(&sup);
    let warm = p.finetune_config(target);
    let warm = FinetuneConfig { init: InitMode::Warm, ..warm };
    let cold = FinetuneConfig { init: InitMode::Random, ..warm.clone() };

    let a = finetune_and_test(p, &net, &masks, &warm)?;

    let heuristic_multi = derive_heuristic(&net, Level::Multi);
    let b = finetune_and_test(p, &net, &heuristic_multi.to_masks(&net), &warm)?;

    // β carries no information in the single-level encoding
    let mut flat = net.clone();
    flat.arch.beta.iter_mut().for_each(|b| b.data_mut().fill(0.0));
    let heuristic_single = derive_heuristic(&flat, Level::Single);
    let c = finetune_and_test(p, &flat, &heuristic_single.to_masks(&flat), &warm)?;

    let mut random = Vec::new();
    let mut d = Vec::new();
    for i in 0..p.cfg.ablation_random_seeds {
        let arch = sample_random_arch(&p.spec, derive_seed(p.cfg.seed, i as u64));
        d.push(finetune_and_test(p, &net, &arch.to_masks(&net), &warm)?);
        random.push(arch);
    }

    let e = finetune_and_test(p, &net, &masks, &cold)?;

    let table = AblationTable {
        arms: vec![
            arm("a", "multi-level + hierarchical masks", vec![a]),
            arm("b", "multi-level + heuristic top-2", vec![b]),
            arm("c", "single-level + heuristic top-2", vec![c]),
            arm("d", "random architecture", d),
            arm("e", "hierarchical masks + random-init fine-tune", vec![e]),
        ],
        heuristic_multi,
        heuristic_single,
        random,
    };
    let rows: Vec<String> = table.arms.iter().map(ArmResult::csv).collect();
    write_table(HEADER, &rows, &p.path(ABLATION_CSV))?;
    Ok(table)
}
