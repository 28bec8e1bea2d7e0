//! Stage orchestration: supernet training, mask search, fine-tuning,
//! derivation and evaluation, each reading and writing checkpoints in an
//! output directory.

use std::path::{Path, PathBuf};

use hmnas_core::data::{Dataset, Partition};
use hmnas_core::derive::{edge_importance_report, from_masks, op_histogram, write_dot, DerivedArch};
use hmnas_core::finetune::{finetune, initial_model, new_state, FinalModel, FinetuneConfig};
use hmnas_core::masker::{sparsity_report, train_masks, HierMasks, MaskState, SparsityReport};
use hmnas_core::searchspace::{predecessor_label, BinaryMasks, SearchSpaceSpec, Supernet};
use hmnas_core::trainer::{evaluate, train_supernet_until, ProvenanceLog, TrainState};

use crate::checkpoint::{load_checkpoint, save_checkpoint, write_atomic, Checkpoint, StageState, StageTag};
use crate::config::{ExperimentConfig, TargetLoss};
use crate::dataset::load_dataset;
use crate::error::{CliError, Result};
use crate::metrics::{render, write_metrics, write_table, MetricsRow};

pub const CONFIG_ECHO: &str = "config.resolved";
pub const SUPERNET_CKPT: &str = "supernet.ckpt";
pub const MASKS_CKPT: &str = "masks.ckpt";
pub const FINAL_CKPT: &str = "final.ckpt";
pub const SUPERNET_CSV: &str = "supernet_metrics.csv";
pub const MASKS_CSV: &str = "masks_metrics.csv";
pub const FINETUNE_CSV: &str = "finetune_metrics.csv";
pub const SPARSITY_CSV: &str = "sparsity.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const ARCH_DOT: &str = "arch.dot";
pub const IMPORTANCE_CSV: &str = "edge_importance.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    TrainSupernet,
    SearchMask,
    Finetune,
    Derive,
    Eval,
}

impl Stage {
    pub const ALL: [Stage; 5] = [Stage::TrainSupernet, Stage::SearchMask, Stage::Finetune, Stage::Derive, Stage::Eval];
}

/// Test-split loss, accuracy and parameter count of one model.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalEntry {
    pub loss: f64,
    pub accuracy: f64,
    pub params: usize,
}

impl EvalEntry {
    pub fn error(&self) -> f64 {
        1.0 - self.accuracy
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub supernet: EvalEntry,
    /// Masked supernet before fine-tuning.
    pub masked: EvalEntry,
    pub final_model: EvalEntry,
    pub sparsity: SparsityReport,
}

impl EvalReport {
    pub fn param_fraction(&self) -> f64 {
        self.final_model.params as f64 / self.supernet.params as f64
    }
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
    pub data: Dataset,
    pub part: Partition,
    pub spec: SearchSpaceSpec,
}

fn io_err(e: std::io::Error) -> hmnas_core::Error {
    hmnas_core::Error::Io(e)
}

impl Pipeline {
    /// Loads the dataset, fixes the split and echoes the resolved config into `out`.
    pub fn new(cfg: ExperimentConfig, out: &Path) -> Result<Self> {
        std::fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
        let data = load_dataset(&cfg.dataset)?;
        let spec = cfg.space.to_spec(data.channels, data.classes);
        spec.validate()?;
        if data.height < spec.min_input_side() || data.width < spec.min_input_side() {
            return Err(CliError::Config(format!(
                "dataset images are {}x{}, the search space needs at least {}",
                data.height,
                data.width,
                spec.min_input_side()
            )));
        }
        let part = Partition::new(data.len(), cfg.test_fraction, cfg.train.train_fraction, cfg.seed)?;
        let echo = out.join(CONFIG_ECHO);
        std::fs::write(&echo, cfg.to_text()).map_err(|e| CliError::io(&echo, e))?;
        Ok(Self { cfg, out: out.to_path_buf(), data, part, spec })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    /// A finished checkpoint from an earlier stage.
    pub fn prerequisite(&self, name: &str, needed_by: &str) -> Result<Checkpoint> {
        let path = self.path(name);
        if !path.exists() {
            return Err(CliError::Prerequisite(format!(
                "{needed_by} needs {} (run the earlier stage first)",
                path.display()
            )));
        }
        let ck = load_checkpoint(&path)?;
        if !ck.is_complete() {
            return Err(CliError::Prerequisite(format!(
                "{} is incomplete ({} of {} epochs); rerun its stage to resume",
                path.display(),
                ck.epochs_done,
                ck.epochs_total
            )));
        }
        Ok(ck)
    }

    /// Existing checkpoint of the stage being run, if it was produced by the same settings.
    fn resumable(&self, name: &str, fingerprint: &str) -> Result<Option<Checkpoint>> {
        let path = self.path(name);
        if !path.exists() {
            return Ok(None);
        }
        let ck = load_checkpoint(&path)?;
        if ck.fingerprint != fingerprint {
            return Err(CliError::Config(format!(
                "{} was produced with different settings; use a fresh output directory",
                path.display()
            )));
        }
        Ok(Some(ck))
    }

    pub fn target_loss(&self, supernet: &Checkpoint) -> f64 {
        match self.cfg.target_loss {
            TargetLoss::Fixed(v) => v,
            TargetLoss::Relative(r) => match &supernet.state {
                StageState::Supernet(ts) => r * ts.best_val_loss,
                _ => f64::NAN,
            },
        }
    }

    pub fn finetune_config(&self, target: f64) -> FinetuneConfig {
        FinetuneConfig { target_loss: Some(target), ..self.cfg.finetune.clone() }
    }

    pub fn train_supernet(&self) -> Result<Checkpoint> {
        self.train_supernet_until(usize::MAX)
    }

    /// Supernet training that stops after `stop_epoch` epochs; a later call
    /// resumes from the checkpoint.
    pub fn train_supernet_until(&self, stop_epoch: usize) -> Result<Checkpoint> {
        let fp = self.cfg.fingerprint(&["space.", "train."]);
        let cfg = &self.cfg.train;
        let (mut net, mut state, mut rows) = match self.resumable(SUPERNET_CKPT, &fp)? {
            Some(ck) => match ck.state.clone() {
                StageState::Supernet(s) => (ck.supernet()?, s, ck.metrics),
                _ => return Err(CliError::Config(format!("{SUPERNET_CKPT} holds a different stage"))),
            },
            None => {
                let net = Supernet::build(self.spec.clone(), self.cfg.seed)?;
                let state = TrainState::new(&net);
                (net, state, Vec::new())
            }
        };
        let params = net.count_params(None);
        let (ck_path, csv_path) = (self.path(SUPERNET_CKPT), self.path(SUPERNET_CSV));
        let spec = self.spec.clone();
        let snapshot = |net: &Supernet, state: &TrainState, rows: &[MetricsRow]| Checkpoint {
            stage: StageTag::Supernet,
            fingerprint: fp.clone(),
            epochs_done: state.epoch,
            epochs_total: cfg.epochs,
            spec: spec.clone(),
            arch: net.arch.clone(),
            weights: net.weights.clone(),
            state: StageState::Supernet(state.clone()),
            metrics: rows.to_vec(),
        };
        train_supernet_until(
            &mut net,
            &self.data,
            &self.part,
            cfg,
            stop_epoch,
            &mut state,
            &mut ProvenanceLog::default(),
            |net, state, m| {
                for (split, loss, acc) in [("train", m.train_loss, m.train_acc), ("val", m.val_loss, m.val_acc)] {
                    rows.push(MetricsRow {
                        stage: "supernet".into(),
                        epoch: m.epoch,
                        split: split.into(),
                        loss,
                        accuracy: acc,
                        lr: m.lr,
                        params,
                    });
                }
                write_atomic(&snapshot(net, state, &rows), &ck_path).map_err(io_err)?;
                std::fs::write(&csv_path, render(&rows)).map_err(io_err)
            },
        )?;
        let ck = snapshot(&net, &state, &rows);
        save_checkpoint(&ck, &ck_path)?;
        write_metrics(&rows, &csv_path)?;
        Ok(ck)
    }

    pub fn search_mask(&self) -> Result<Checkpoint> {
        let sup = self.prerequisite(SUPERNET_CKPT, "search-mask")?;
        let net = sup.supernet()?;
        let fp = self.cfg.fingerprint(&["space.", "train.", "masker."]);
        let cfg = &self.cfg.masker;
        let (mut masks, mut state, mut rows) = match self.resumable(MASKS_CKPT, &fp)? {
            Some(Checkpoint { state: StageState::Masks { masks, state }, metrics, .. }) => (masks, state, metrics),
            Some(_) => return Err(CliError::Config(format!("{MASKS_CKPT} holds a different stage"))),
            None => {
                let m = HierMasks::init(&net, cfg.mask_init, cfg.tau);
                let s = MaskState::new(&m);
                (m, s, Vec::new())
            }
        };
        let (ck_path, csv_path) = (self.path(MASKS_CKPT), self.path(MASKS_CSV));
        let snapshot = |masks: &HierMasks, state: &MaskState, rows: &[MetricsRow]| Checkpoint {
            stage: StageTag::Masks,
            fingerprint: fp.clone(),
            epochs_done: state.epoch,
            epochs_total: cfg.epochs,
            spec: sup.spec.clone(),
            arch: sup.arch.clone(),
            weights: sup.weights.clone(),
            state: StageState::Masks { masks: masks.clone(), state: state.clone() },
            metrics: rows.to_vec(),
        };
        let outcome = train_masks(&net, &self.data, &self.part, cfg, &mut masks, &mut state, |masks, state, m| {
            rows.push(MetricsRow {
                stage: "masks".into(),
                epoch: m.epoch,
                split: "train+val".into(),
                loss: m.loss,
                accuracy: m.accuracy,
                lr: m.lr_w_mask,
                params: m.params,
            });
            write_atomic(&snapshot(masks, state, &rows), &ck_path).map_err(io_err)?;
            std::fs::write(&csv_path, render(&rows)).map_err(io_err)
        })?;
        let ck = snapshot(&masks, &state, &rows);
        save_checkpoint(&ck, &ck_path)?;
        write_metrics(&rows, &csv_path)?;
        let r = sparsity_report(&net, &masks.project());
        write_table(
            "alpha,beta,w,params,degenerate",
            &[format!("{},{},{},{},{}", r.alpha, r.beta, r.w, r.params, outcome.degenerate)],
            &self.path(SPARSITY_CSV),
        )?;
        Ok(ck)
    }

    pub fn finetune(&self) -> Result<Checkpoint> {
        let sup = self.prerequisite(SUPERNET_CKPT, "finetune")?;
        let mk = self.prerequisite(MASKS_CKPT, "finetune")?;
        let StageState::Masks { masks, .. } = &mk.state else {
            return Err(CliError::Config(format!("{MASKS_CKPT} holds a different stage")));
        };
        let binary = masks.project();
        let target = self.target_loss(&sup);
        let cfg = self.finetune_config(target);
        let fp = self.cfg.fingerprint(&["space.", "train.", "masker.", "finetune."]);
        let (model, mut state, mut rows) = match self.resumable(FINAL_CKPT, &fp)? {
            Some(ck) => match ck.state.clone() {
                StageState::Final { masks, state, .. } => (FinalModel { net: ck.supernet()?, masks }, state, ck.metrics),
                _ => return Err(CliError::Config(format!("{FINAL_CKPT} holds a different stage"))),
            },
            None => {
                let model = initial_model(&sup.supernet()?, &binary, &cfg)?;
                let state = new_state(&model);
                (model, state, Vec::new())
            }
        };
        let params = model.net.count_params(Some(&model.masks));
        let (ck_path, csv_path) = (self.path(FINAL_CKPT), self.path(FINETUNE_CSV));
        let snapshot = |model: &FinalModel, state: &hmnas_core::finetune::FinetuneState, rows: &[MetricsRow]| Checkpoint {
            stage: StageTag::Final,
            fingerprint: fp.clone(),
            epochs_done: state.epoch,
            epochs_total: cfg.epochs,
            spec: model.net.spec().clone(),
            arch: model.net.arch.clone(),
            weights: model.net.weights.clone(),
            state: StageState::Final { masks: model.masks.clone(), state: state.clone(), target_loss: Some(target) },
            metrics: rows.to_vec(),
        };
        let outcome = finetune(model, &self.data, &self.part, &cfg, &mut state, |model, state, m| {
            for (split, loss, acc) in [("train", m.train_loss, m.train_acc), ("val", m.val_loss, m.val_acc)] {
                rows.push(MetricsRow {
                    stage: "finetune".into(),
                    epoch: m.epoch,
                    split: split.into(),
                    loss,
                    accuracy: acc,
                    lr: m.lr,
                    params,
                });
            }
            write_atomic(&snapshot(model, state, &rows), &ck_path).map_err(io_err)?;
            std::fs::write(&csv_path, render(&rows)).map_err(io_err)
        })?;
        let ck = snapshot(&outcome.model, &state, &rows);
        save_checkpoint(&ck, &ck_path)?;
        write_metrics(&rows, &csv_path)?;
        Ok(ck)
    }

    /// Architecture induced by the searched masks.
    pub fn derived_arch(&self) -> Result<(Supernet, BinaryMasks, DerivedArch)> {
        let sup = self.prerequisite(SUPERNET_CKPT, "derive")?;
        let mk = self.prerequisite(MASKS_CKPT, "derive")?;
        let StageState::Masks { masks, .. } = &mk.state else {
            return Err(CliError::Config(format!("{MASKS_CKPT} holds a different stage")));
        };
        let net = sup.supernet()?;
        let binary = masks.project();
        let arch = from_masks(&net, &binary);
        Ok((net, binary, arch))
    }

    /// Writes the graph export, histograms and edge importances.
    pub fn derive(&self) -> Result<DerivedArch> {
        let (net, _, arch) = self.derived_arch()?;
        write_dot(&arch, &self.path(ARCH_DOT))?;
        for h in op_histogram(&arch) {
            let kind = h.kind.name();
            let rows: Vec<String> = h.edges_per_node.iter().enumerate().map(|(n, c)| format!("{n},{c}")).collect();
            write_table("node_index,num_edges", &rows, &self.path(&format!("edges_per_node_{kind}.csv")))?;
            let rows: Vec<String> = h.ops_per_edge.iter().map(|(k, c)| format!("{k},{c}")).collect();
            write_table("num_ops,num_edges", &rows, &self.path(&format!("ops_per_edge_{kind}.csv")))?;
        }
        let mut rows = Vec::new();
        for rep in edge_importance_report(&net) {
            for n in &rep.nodes {
                for &(pred, w) in &n.edges {
                    rows.push(format!("{},{},{},{}", rep.kind.name(), n.node, predecessor_label(pred), w));
                }
            }
        }
        write_table("kind,node,predecessor,importance", &rows, &self.path(IMPORTANCE_CSV))?;
        Ok(arch)
    }

    pub fn eval_entry(&self, net: &Supernet, masks: Option<&BinaryMasks>) -> Result<EvalEntry> {
        let (loss, accuracy) = evaluate(net, &self.data, &self.part.test, masks, self.cfg.finetune.batch_size)?;
        Ok(EvalEntry { loss, accuracy, params: net.count_params(masks) })
    }

    pub fn eval(&self) -> Result<EvalReport> {
        let sup = self.prerequisite(SUPERNET_CKPT, "eval")?;
        let mk = self.prerequisite(MASKS_CKPT, "eval")?;
        let fin = self.prerequisite(FINAL_CKPT, "eval")?;
        let (StageState::Masks { masks, .. }, StageState::Final { masks: final_masks, .. }) = (&mk.state, &fin.state) else {
            return Err(CliError::Config("checkpoints hold unexpected stages".into()));
        };
        let net = sup.supernet()?;
        let binary = masks.project();
        let report = EvalReport {
            supernet: self.eval_entry(&net, None)?,
            masked: self.eval_entry(&net, Some(&binary))?,
            final_model: self.eval_entry(&fin.supernet()?, Some(final_masks))?,
            sparsity: sparsity_report(&net, &binary),
        };
        let row = |stage: &str, epoch: usize, e: &EvalEntry| MetricsRow {
            stage: stage.into(),
            epoch,
            split: "test".into(),
            loss: e.loss,
            accuracy: e.accuracy,
            lr: 0.0,
            params: e.params,
        };
        write_metrics(
            &[
                row("supernet", sup.epochs_done, &report.supernet),
                row("masked", mk.epochs_done, &report.masked),
                row("final", fin.epochs_done, &report.final_model),
            ],
            &self.path(EVAL_CSV),
        )?;
        Ok(report)
    }

    pub fn run(&self, stages: &[Stage]) -> Result<Option<EvalReport>> {
        let mut report = None;
        for stage in stages {
            match stage {
                Stage::TrainSupernet => {
                    self.train_supernet()?;
                }
                Stage::SearchMask => {
                    self.search_mask()?;
                }
                Stage::Finetune => {
                    self.finetune()?;
                }
                Stage::Derive => {
                    self.derive()?;
                }
                Stage::Eval => report = Some(self.eval()?),
            }
        }
        Ok(report)
    }
}
