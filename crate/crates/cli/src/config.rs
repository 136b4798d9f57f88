//! Flat `key = value` run configuration. Every key is typed; unknown keys
//! are rejected. The resolved configuration is written back in the same
//! format so a run directory can be re-run as is.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use hymoe::backbone::ModelConfig;
use hymoe::training::TrainConfig;

use crate::error::CliError;

/// Every accepted key, in the order the resolved file lists them.
pub const KEYS: &[&str] = &[
    "dataset",
    "output_dir",
    "run_name",
    "dim",
    "max_len",
    "n_layers",
    "n_heads",
    "n_experts",
    "top_k",
    "d_ff",
    "router_hidden",
    "warmup_steps",
    "lb_weight",
    "dropout",
    "uniform_pffn",
    "force_alpha_zero",
    "freeze_alpha",
    "per_position",
    "seed",
    "epochs",
    "batch_size",
    "eval_batch_size",
    "lr",
    "beta1",
    "beta2",
    "eps",
    "clip_norm",
    "patience",
    "exclude_seen",
    "max_steps",
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub output_dir: Option<PathBuf>,
    pub run_name: Option<String>,
    /// Vocabulary size is a placeholder until a dataset is attached.
    pub model: ModelConfig,
    pub train: TrainConfig,
    explicit: BTreeSet<&'static str>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: None,
            run_name: None,
            model: ModelConfig::new(2, 50),
            train: TrainConfig::default(),
            explicit: BTreeSet::new(),
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T, String> {
    value
        .parse()
        .map_err(|_| format!("{key}: cannot parse {value:?} as {}", std::any::type_name::<T>()))
}

fn parse_bool(key: &str, value: &str) -> Result<bool, String> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(format!("{key}: expected true or false, got {value:?}")),
    }
}

impl RunConfig {
    #[cfg(test)]
    pub fn is_set(&self, key: &str) -> bool {
        self.explicit.contains(key)
    }

    /// Sets one key. Relative paths are taken relative to `base`.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<(), String> {
        let key = *KEYS
            .iter()
            .find(|k| **k == key)
            .ok_or_else(|| format!("unknown key {key:?}"))?;
        let value = value.trim();
        let path = |v: &str| match base {
            Some(b) if Path::new(v).is_relative() => b.join(v),
            _ => PathBuf::from(v),
        };
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "dataset" => self.dataset = Some(path(value)),
            "output_dir" => self.output_dir = Some(path(value)),
            "run_name" => {
                if value.is_empty() || value.contains(['/', '\\']) {
                    return Err(format!("run_name: {value:?} is not a plain directory name"));
                }
                self.run_name = Some(value.to_string());
            }
            "dim" => {
                let (d_ff, hidden) = (m.d_ff, m.router_hidden);
                m.set_dim(parse(key, value)?);
                // explicit widths survive a later dim
                if self.explicit.contains("d_ff") {
                    m.d_ff = d_ff;
                }
                if self.explicit.contains("router_hidden") {
                    m.router_hidden = hidden;
                }
            }
            "max_len" => m.max_len = parse(key, value)?,
            "n_layers" => m.n_layers = parse(key, value)?,
            "n_heads" => m.n_heads = parse(key, value)?,
            "n_experts" => m.n_experts = parse(key, value)?,
            "top_k" => m.top_k = parse(key, value)?,
            "d_ff" => m.d_ff = parse(key, value)?,
            "router_hidden" => m.router_hidden = parse(key, value)?,
            "warmup_steps" => m.warmup_steps = parse(key, value)?,
            "lb_weight" => m.lb_weight = parse(key, value)?,
            "dropout" => m.dropout = parse(key, value)?,
            "uniform_pffn" => m.uniform_pffn = parse_bool(key, value)?,
            "force_alpha_zero" => m.force_alpha_zero = parse_bool(key, value)?,
            "freeze_alpha" => m.freeze_alpha = parse_bool(key, value)?,
            "per_position" => m.per_position = parse_bool(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "epochs" => t.epochs = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "eval_batch_size" => t.eval_batch_size = parse(key, value)?,
            "lr" => t.adam.lr = parse(key, value)?,
            "beta1" => t.adam.beta1 = parse(key, value)?,
            "beta2" => t.adam.beta2 = parse(key, value)?,
            "eps" => t.adam.eps = parse(key, value)?,
            "clip_norm" => t.clip_norm = parse(key, value)?,
            "patience" => t.patience = parse(key, value)?,
            "exclude_seen" => t.exclude_seen = parse_bool(key, value)?,
            "max_steps" => {
                t.max_steps = match value {
                    "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            _ => unreachable!("key table and setter disagree on {key}"),
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment.
    pub fn apply_str(&mut self, text: &str, origin: &str, base: Option<&Path>) -> Result<(), CliError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("{origin}:{}: expected key = value, got {line:?}", i + 1)))?;
            self.set(key.trim(), value, base)
                .map_err(|e| CliError::Config(format!("{origin}:{}: {e}", i + 1)))?;
        }
        Ok(())
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        self.apply_str(&text, &path.display().to_string(), path.parent())
    }

    /// Applies `--set key=value` overrides.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<(), CliError> {
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("--set expects key=value, got {o:?}")))?;
            let cwd = std::env::current_dir().ok();
            self.set(key.trim(), value, cwd.as_deref())
                .map_err(|e| CliError::Config(format!("--set {o}: {e}")))?;
        }
        Ok(())
    }

    /// Copies the explicitly set model keys onto `target`.
    pub fn apply_model_keys(&self, target: &mut ModelConfig) {
        let m = &self.model;
        for key in &self.explicit {
            match *key {
                "dim" => {
                    target.dim = m.dim;
                    target.d_ff = m.d_ff;
                    target.router_hidden = m.router_hidden;
                }
                "max_len" => target.max_len = m.max_len,
                "n_layers" => target.n_layers = m.n_layers,
                "n_heads" => target.n_heads = m.n_heads,
                "n_experts" => target.n_experts = m.n_experts,
                "top_k" => target.top_k = m.top_k,
                "d_ff" => target.d_ff = m.d_ff,
                "router_hidden" => target.router_hidden = m.router_hidden,
                "warmup_steps" => target.warmup_steps = m.warmup_steps,
                "lb_weight" => target.lb_weight = m.lb_weight,
                "dropout" => target.dropout = m.dropout,
                "uniform_pffn" => target.uniform_pffn = m.uniform_pffn,
                "force_alpha_zero" => target.force_alpha_zero = m.force_alpha_zero,
                "freeze_alpha" => target.freeze_alpha = m.freeze_alpha,
                "per_position" => target.per_position = m.per_position,
                _ => {}
            }
        }
    }

    fn value_of(&self, key: &str) -> String {
        let m = &self.model;
        let t = &self.train;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        match key {
            "dataset" => path(&self.dataset),
            "output_dir" => path(&self.output_dir),
            "run_name" => self.run_name.clone().unwrap_or_default(),
            "dim" => m.dim.to_string(),
            "max_len" => m.max_len.to_string(),
            "n_layers" => m.n_layers.to_string(),
            "n_heads" => m.n_heads.to_string(),
            "n_experts" => m.n_experts.to_string(),
            "top_k" => m.top_k.to_string(),
            "d_ff" => m.d_ff.to_string(),
            "router_hidden" => m.router_hidden.to_string(),
            "warmup_steps" => m.warmup_steps.to_string(),
            "lb_weight" => m.lb_weight.to_string(),
            "dropout" => m.dropout.to_string(),
            "uniform_pffn" => m.uniform_pffn.to_string(),
            "force_alpha_zero" => m.force_alpha_zero.to_string(),
            "freeze_alpha" => m.freeze_alpha.to_string(),
            "per_position" => m.per_position.to_string(),
            "seed" => t.seed.to_string(),
            "epochs" => t.epochs.to_string(),
            "batch_size" => t.batch_size.to_string(),
            "eval_batch_size" => t.eval_batch_size.to_string(),
            "lr" => t.adam.lr.to_string(),
            "beta1" => t.adam.beta1.to_string(),
            "beta2" => t.adam.beta2.to_string(),
            "eps" => t.adam.eps.to_string(),
            "clip_norm" => t.clip_norm.to_string(),
            "patience" => t.patience.to_string(),
            "exclude_seen" => t.exclude_seen.to_string(),
            "max_steps" => t.max_steps.map_or("none".into(), |s| s.to_string()),
            _ => unreachable!("unknown key {key}"),
        }
    }

    /// Every key with its resolved value. Floats print in shortest
    /// round-trip form, so reading the text back gives identical values.
    pub fn to_conf(&self) -> String {
        let mut s = String::new();
        for key in KEYS {
            let v = self.value_of(key);
            if !v.is_empty() {
                let _ = writeln!(s, "{key} = {v}");
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_typed_values_and_comments() {
        let mut c = RunConfig::default();
        c.apply_str("# comment\n\ndim = 16 # trailing\ntop_k=1\nper_position = true\nlr = 0.01\nmax_steps = 30\n", "t", None)
            .unwrap();
        assert_eq!((c.model.dim, c.model.d_ff, c.model.router_hidden), (16, 64, 8));
        assert_eq!(c.model.top_k, 1);
        assert!(c.model.per_position);
        assert_eq!(c.train.adam.lr, 0.01);
        assert_eq!(c.train.max_steps, Some(30));
        assert!(c.is_set("dim") && !c.is_set("seed"));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let mut c = RunConfig::default();
        let err = c.apply_str("dim = 8\nlearning_rate = 1\n", "f.conf", None).unwrap_err();
        assert!(err.to_string().contains("f.conf:2") && err.to_string().contains("learning_rate"), "{err}");
        assert!(c.apply_str("dim = eight", "f", None).is_err());
        assert!(c.apply_str("per_position = maybe", "f", None).is_err());
        assert!(c.apply_str("just text", "f", None).is_err());
        assert!(c.apply_overrides(&["dim".into()]).is_err());
        assert!(c.apply_overrides(&["nope=1".into()]).is_err());
        assert!(matches!(c.apply_str("x = 1", "f", None), Err(CliError::Config(_))));
    }

    #[test]
    fn explicit_widths_survive_dim() {
        let mut c = RunConfig::default();
        c.apply_str("d_ff = 10\ndim = 32\n", "t", None).unwrap();
        assert_eq!((c.model.d_ff, c.model.router_hidden), (10, 16));
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut c = RunConfig::default();
        c.apply_str("dim = 24\nlr = 0.0003\nlb_weight = 0.1\nrun_name = x\ndataset = /tmp/d.json\n", "t", None)
            .unwrap();
        let text = c.to_conf();
        let mut back = RunConfig::default();
        back.apply_str(&text, "r", None).unwrap();
        assert_eq!(back.model, c.model);
        assert_eq!(back.train, c.train);
        assert_eq!(back.dataset, c.dataset);
        assert_eq!(back.to_conf(), text);
        assert!(text.contains("max_steps = none"));
    }

    #[test]
    fn relative_paths_follow_the_file() {
        let mut c = RunConfig::default();
        c.apply_str("dataset = data/x.json\n", "t", Some(Path::new("/cfg"))).unwrap();
        assert_eq!(c.dataset.as_deref(), Some(Path::new("/cfg/data/x.json")));
    }

    #[test]
    fn model_keys_copy_only_explicit_ones() {
        let mut c = RunConfig::default();
        c.apply_str("n_experts = 6\ntop_k = 3\n", "t", None).unwrap();
        let mut target = ModelConfig::new(9, 4);
        target.set_dim(8);
        c.apply_model_keys(&mut target);
        assert_eq!((target.n_experts, target.top_k, target.dim, target.max_len), (6, 3, 8, 4));
    }
}
