//! `key = value` experiment configuration with dotted module scopes.

use std::collections::BTreeMap;
use std::path::Path;

use hmnas_core::finetune::{FinetuneConfig, InitMode};
use hmnas_core::masker::MaskTrainConfig;
use hmnas_core::numcore::OpKind;
use hmnas_core::searchspace::{default_reduction_cells, SearchSpaceSpec};
use hmnas_core::trainer::{SigmaSchedule, TrainConfig};

use crate::error::{CliError, Result};

/// Search-space settings; class and input-channel counts come from the dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceConfig {
    pub nodes_per_cell: usize,
    pub num_cells: usize,
    pub init_channels: usize,
    pub ops: Vec<OpKind>,
    /// `None` places reductions at a third and two thirds of the depth.
    pub reduction_cells: Option<Vec<usize>>,
    pub stem_multiplier: usize,
}

impl Default for SpaceConfig {
    fn default() -> Self {
        let s = SearchSpaceSpec::default();
        Self {
            nodes_per_cell: s.nodes_per_cell,
            num_cells: s.num_cells,
            init_channels: s.init_channels,
            ops: s.ops,
            reduction_cells: None,
            stem_multiplier: s.stem_multiplier,
        }
    }
}

impl SpaceConfig {
    pub fn to_spec(&self, input_channels: usize, num_classes: usize) -> SearchSpaceSpec {
        SearchSpaceSpec {
            nodes_per_cell: self.nodes_per_cell,
            num_cells: self.num_cells,
            init_channels: self.init_channels,
            ops: self.ops.clone(),
            reduction_cells: self.reduction_cells.clone().unwrap_or_else(|| default_reduction_cells(self.num_cells)),
            num_classes,
            input_channels,
            stem_multiplier: self.stem_multiplier,
        }
    }
}

/// Training loss that counts as "reached" when measuring epochs-to-target.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum TargetLoss {
    /// A multiple of the best supernet validation loss.
    Relative(f64),
    Fixed(f64),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    /// File path, or `synthetic:<task>:<seed>`.
    pub dataset: String,
    pub seed: u64,
    pub test_fraction: f64,
    pub space: SpaceConfig,
    pub train: TrainConfig,
    pub masker: MaskTrainConfig,
    pub finetune: FinetuneConfig,
    pub target_loss: TargetLoss,
    pub ablation_random_seeds: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic:blobs2:0".into(),
            seed: 0,
            test_fraction: 0.2,
            space: SpaceConfig::default(),
            train: TrainConfig::default(),
            masker: MaskTrainConfig::default(),
            finetune: FinetuneConfig::default(),
            target_loss: TargetLoss::Relative(1.1),
            ablation_random_seeds: 5,
        }
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(s)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn sigma_text(s: &SigmaSchedule) -> String {
    match s {
        SigmaSchedule::FinalThird => "final_third".into(),
        SigmaSchedule::Linear { horizon } => format!("linear:{horizon}"),
        SigmaSchedule::Always => "always".into(),
        SigmaSchedule::Never => "never".into(),
    }
}

fn parse_sigma(v: &str) -> std::result::Result<SigmaSchedule, String> {
    match v {
        "final_third" => Ok(SigmaSchedule::FinalThird),
        "always" => Ok(SigmaSchedule::Always),
        "never" => Ok(SigmaSchedule::Never),
        _ => match v.strip_prefix("linear:") {
            Some(h) => Ok(SigmaSchedule::Linear { horizon: num(h)? }),
            None => Err(format!("unknown schedule `{v}` (final_third, linear:<iters>, always, never)")),
        },
    }
}

impl ExperimentConfig {
    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let (t, m, f, s) = (&mut self.train, &mut self.masker, &mut self.finetune, &mut self.space);
        match key {
            "dataset" => self.dataset = v.to_string(),
            "seed" => self.seed = num(v)?,
            "test_fraction" => self.test_fraction = num(v)?,
            "ablation.random_seeds" => self.ablation_random_seeds = num(v)?,

            "space.nodes_per_cell" => s.nodes_per_cell = num(v)?,
            "space.num_cells" => s.num_cells = num(v)?,
            "space.init_channels" => s.init_channels = num(v)?,
            "space.ops" => s.ops = list(v).map_err(|_| format!("unknown operation in `{v}`"))?,
            "space.reduction_cells" => s.reduction_cells = if v == "auto" { None } else { Some(list(v)?) },
            "space.stem_multiplier" => s.stem_multiplier = num(v)?,

            "train.epochs" => t.epochs = num(v)?,
            "train.batch_size" => t.batch_size = num(v)?,
            "train.w_lr" => t.w_lr = num(v)?,
            "train.w_lr_min" => t.w_lr_min = num(v)?,
            "train.w_momentum" => t.w_momentum = num(v)?,
            "train.w_weight_decay" => t.w_weight_decay = num(v)?,
            "train.arch_lr" => t.arch_lr = num(v)?,
            "train.arch_weight_decay" => t.arch_weight_decay = num(v)?,
            "train.warmup_epochs" => t.warmup_epochs = num(v)?,
            "train.train_fraction" => t.train_fraction = num(v)?,
            "train.sigma" => t.sigma = parse_sigma(v)?,
            "train.grad_clip" => t.grad_clip = num(v)?,

            "masker.epochs" => m.epochs = num(v)?,
            "masker.batch_size" => m.batch_size = num(v)?,
            "masker.lr_w_mask" => m.lr_w_mask = num(v)?,
            "masker.lr_arch_mask" => m.lr_arch_mask = num(v)?,
            "masker.lr_decay_factor" => m.lr_decay_factor = num(v)?,
            "masker.lr_decay_epoch" => m.lr_decay_epoch = num(v)?,
            "masker.mask_init" => m.mask_init = num(v)?,
            "masker.tau" => m.tau = num(v)?,

            "finetune.epochs" => f.epochs = num(v)?,
            "finetune.batch_size" => f.batch_size = num(v)?,
            "finetune.lr" => f.lr = num(v)?,
            "finetune.lr_min" => f.lr_min = num(v)?,
            "finetune.momentum" => f.momentum = num(v)?,
            "finetune.weight_decay" => f.weight_decay = num(v)?,
            "finetune.grad_clip" => f.grad_clip = num(v)?,
            "finetune.init" => {
                f.init = match v {
                    "warm" => InitMode::Warm,
                    "random" => InitMode::Random,
                    _ => return Err(format!("expected `warm` or `random`, got `{v}`")),
                }
            }
            "finetune.target_loss" => {
                self.target_loss = match v.strip_prefix("relative:") {
                    Some(r) => TargetLoss::Relative(num(r)?),
                    None => TargetLoss::Fixed(num(v)?),
                }
            }
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let (t, m, f, s) = (&self.train, &self.masker, &self.finetune, &self.space);
        vec![
            ("dataset", self.dataset.clone()),
            ("seed", self.seed.to_string()),
            ("test_fraction", self.test_fraction.to_string()),
            ("space.nodes_per_cell", s.nodes_per_cell.to_string()),
            ("space.num_cells", s.num_cells.to_string()),
            ("space.init_channels", s.init_channels.to_string()),
            ("space.ops", join(&s.ops)),
            ("space.reduction_cells", s.reduction_cells.as_ref().map_or("auto".into(), |r| join(r))),
            ("space.stem_multiplier", s.stem_multiplier.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.batch_size", t.batch_size.to_string()),
            ("train.w_lr", t.w_lr.to_string()),
            ("train.w_lr_min", t.w_lr_min.to_string()),
            ("train.w_momentum", t.w_momentum.to_string()),
            ("train.w_weight_decay", t.w_weight_decay.to_string()),
            ("train.arch_lr", t.arch_lr.to_string()),
            ("train.arch_weight_decay", t.arch_weight_decay.to_string()),
            ("train.warmup_epochs", t.warmup_epochs.to_string()),
            ("train.train_fraction", t.train_fraction.to_string()),
            ("train.sigma", sigma_text(&t.sigma)),
            ("train.grad_clip", t.grad_clip.to_string()),
            ("masker.epochs", m.epochs.to_string()),
            ("masker.batch_size", m.batch_size.to_string()),
            ("masker.lr_w_mask", m.lr_w_mask.to_string()),
            ("masker.lr_arch_mask", m.lr_arch_mask.to_string()),
            ("masker.lr_decay_factor", m.lr_decay_factor.to_string()),
            ("masker.lr_decay_epoch", m.lr_decay_epoch.to_string()),
            ("masker.mask_init", m.mask_init.to_string()),
            ("masker.tau", m.tau.to_string()),
            ("finetune.epochs", f.epochs.to_string()),
            ("finetune.batch_size", f.batch_size.to_string()),
            ("finetune.lr", f.lr.to_string()),
            ("finetune.lr_min", f.lr_min.to_string()),
            ("finetune.momentum", f.momentum.to_string()),
            ("finetune.weight_decay", f.weight_decay.to_string()),
            ("finetune.grad_clip", f.grad_clip.to_string()),
            ("finetune.init", if f.init == InitMode::Warm { "warm" } else { "random" }.into()),
            (
                "finetune.target_loss",
                match self.target_loss {
                    TargetLoss::Relative(r) => format!("relative:{r}"),
                    TargetLoss::Fixed(v) => v.to_string(),
                },
            ),
            ("ablation.random_seeds", self.ablation_random_seeds.to_string()),
        ]
    }

    /// Resolved configuration in the input format; parses back to `self`.
    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Key/value lines of the settings that determine a stage's result.
    pub fn fingerprint(&self, prefixes: &[&str]) -> String {
        self.entries()
            .into_iter()
            .filter(|(k, _)| ["dataset", "seed", "test_fraction"].contains(k) || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    /// Applies one `key = value` assignment; `origin` names its source in errors.
    pub fn apply(&mut self, key: &str, value: &str, origin: &str) -> Result<()> {
        self.set(key, value)
            .map_err(|e| CliError::Config(format!("{origin}: key `{key}`: {e}")))?;
        if key == "seed" {
            self.propagate_seed();
        }
        Ok(())
    }

    /// `KEY=VALUE` from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("override `{assignment}` is not of the form key=value")))?;
        self.apply(k.trim(), v.trim(), "--stage-override")
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.propagate_seed();
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.masker.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    /// Checks every constraint; errors name the offending key and, when
    /// known, the line that set it.
    pub fn validate(&self, lines: &BTreeMap<String, String>) -> Result<()> {
        let at = |key: &str, msg: String| {
            let origin = lines.get(key).cloned().unwrap_or_else(|| "default".into());
            CliError::Config(format!("{origin}: key `{key}`: {msg}"))
        };
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(at("test_fraction", format!("must lie in (0, 1), got {}", self.test_fraction)));
        }
        if !(self.train.train_fraction > 0.0 && self.train.train_fraction < 1.0) {
            return Err(at("train.train_fraction", format!("must lie in (0, 1), got {}", self.train.train_fraction)));
        }
        if self.train.warmup_epochs > self.train.epochs {
            return Err(at("train.warmup_epochs", format!("exceeds train.epochs ({})", self.train.epochs)));
        }
        if self.space.ops.is_empty() {
            return Err(at("space.ops", "needs at least one operation".into()));
        }
        for (key, v) in [("train.batch_size", self.train.batch_size), ("masker.batch_size", self.masker.batch_size), ("finetune.batch_size", self.finetune.batch_size)] {
            if v == 0 {
                return Err(at(key, "must be positive".into()));
            }
        }
        if self.ablation_random_seeds == 0 {
            return Err(at("ablation.random_seeds", "must be positive".into()));
        }
        match self.target_loss {
            TargetLoss::Relative(r) if !(r > 0.0 && r.is_finite()) => {
                return Err(at("finetune.target_loss", format!("relative factor must be positive, got {r}")))
            }
            TargetLoss::Fixed(v) if !v.is_finite() => return Err(at("finetune.target_loss", "must be finite".into())),
            _ => {}
        }
        fn prefix(scope: &'static str) -> impl Fn(hmnas_core::Error) -> CliError {
            move |e| CliError::Config(format!("{scope}: {e}"))
        }
        self.train.validate().map_err(prefix("train"))?;
        self.masker.validate().map_err(prefix("masker"))?;
        self.finetune.validate().map_err(prefix("finetune"))?;
        self.space.to_spec(3, 2).validate().map_err(prefix("space"))?;
        Ok(())
    }
}

/// Parses configuration text; `source` prefixes line references in errors.
/// Returns the config and the origin of every key that was set.
pub fn parse_config_str(text: &str, source: &str) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
    let mut cfg = ExperimentConfig::default();
    let mut lines = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let origin = format!("{source}:{}", i + 1);
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Config(format!("{origin}: expected `key = value`, got `{line}`")))?;
        let key = k.trim();
        if lines.contains_key(key) {
            return Err(CliError::Config(format!("{origin}: key `{key}` set twice")));
        }
        cfg.apply(key, v.trim(), &origin)?;
        lines.insert(key.to_string(), origin);
    }
    Ok((cfg, lines))
}

pub fn parse_config(path: &Path) -> Result<(ExperimentConfig, BTreeMap<String, String>)> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config_str(&text, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        let (cfg, lines) = parse_config_str("", "t").unwrap();
        assert!(lines.is_empty());
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.masker.tau, 5e-3);
        assert_eq!(cfg.masker.mask_init, 1e-2);
        assert_eq!(cfg.train.warmup_epochs, 10);
        cfg.validate(&lines).unwrap();
    }

    #[test]
    fn comments_and_whitespace() {
        let (cfg, lines) = parse_config_str("# header\n  masker.tau = 0.001  # inline\n\nseed=7\n", "t").unwrap();
        assert_eq!(cfg.masker.tau, 1e-3);
        assert_eq!((cfg.seed, cfg.train.seed, cfg.masker.seed, cfg.finetune.seed), (7, 7, 7, 7));
        assert_eq!(lines["masker.tau"], "t:2");
    }

    #[test]
    fn errors_name_key_and_line() {
        let err = parse_config_str("seed = 1\nmasker.bogus = 3\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:2") && err.contains("masker.bogus") && err.contains("unknown key"), "{err}");
        let err = parse_config_str("train.epochs = ten\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:1") && err.contains("train.epochs"), "{err}");
        let err = parse_config_str("just words\n", "c.cfg").unwrap_err().to_string();
        assert!(err.contains("c.cfg:1"), "{err}");
    }

    #[test]
    fn out_of_range_fraction_is_a_constraint_error() {
        let (cfg, lines) = parse_config_str("\ntrain.train_fraction = 1.5\n", "c.cfg").unwrap();
        let err = cfg.validate(&lines).unwrap_err().to_string();
        assert!(err.contains("c.cfg:2") && err.contains("train.train_fraction"), "{err}");
    }

    #[test]
    fn resolved_echo_round_trips() {
        let text = "seed = 3\nspace.ops = sep_conv_3x3,max_pool_3x3\nspace.reduction_cells = 1\ntrain.sigma = linear:40\n\
                    finetune.target_loss = 0.25\nfinetune.init = random\ntrain.w_lr = 0.1\n";
        let (cfg, _) = parse_config_str(text, "t").unwrap();
        let (back, _) = parse_config_str(&cfg.to_text(), "echo").unwrap();
        assert_eq!(back, cfg);
        let (d, _) = parse_config_str(&ExperimentConfig::default().to_text(), "echo").unwrap();
        assert_eq!(d, ExperimentConfig::default());
    }

    #[test]
    fn overrides() {
        let mut cfg = ExperimentConfig::default();
        cfg.apply_override("train.epochs=3").unwrap();
        assert_eq!(cfg.train.epochs, 3);
        assert!(cfg.apply_override("train.epochs").is_err());
        assert!(cfg.apply_override("nope=1").is_err());
    }
}
