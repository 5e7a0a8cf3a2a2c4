//! Flat `key = value` configuration with dotted namespaces.
//!
//! Resolution order: built-in defaults, then the config file, then CLI
//! `--set key=value` overrides (flag wins). Every key records where its
//! final value came from, and `run.meta` reproduces that record.

use crate::apr::AprConfig;
use crate::attacks::{AttackMethod, AttackSpec};
use crate::error::{CapError, Result};
use crate::filter::FilterConfig;
use crate::objectives::{Metric, MetricCombo};
use crate::trainer::{Schedule, TrainAttack, TrainMode, TrainPlan};
use crate::vit::VitConfig;
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Default,
    File,
    Flag,
}

impl Source {
    pub fn name(&self) -> &'static str {
        match self {
            Source::Default => "default",
            Source::File => "file",
            Source::Flag => "flag",
        }
    }
}

/// Ordered key -> (value, source) map.
#[derive(Debug, Clone, Default)]
pub struct ConfigMap {
    entries: BTreeMap<String, (String, Source)>,
}

impl ConfigMap {
    /// All training keys at their built-in defaults.
    pub fn train_defaults() -> Self {
        let plan = TrainPlan::default();
        let mut m = ConfigMap::default();
        let mut d = |k: &str, v: String| m.set(k, v, Source::Default);
        d("mode", plan.mode.name().into());
        d("epochs", plan.epochs.to_string());
        d("batch_size", plan.batch_size.to_string());
        d("lr", plan.lr.to_string());
        d("schedule", "cosine".into());
        d("schedule.step_every", "20".into());
        d("schedule.step_factor", "0.1".into());
        d("weight_decay", plan.weight_decay.to_string());
        d("grad_clip", plan.grad_clip.to_string());
        d("beta", plan.beta.to_string());
        d("seed", plan.seed.to_string());
        d("eval_subset", plan.eval_subset.to_string());
        d("objective.outer", plan.combo.outer.name().into());
        d("objective.inner", plan.combo.inner.name().into());
        d("objective.adv_vs_label", plan.adv_vs_label.to_string());
        d("attack_train.epsilon", plan.attack_train.epsilon.to_string());
        d("attack_train.step_size", plan.attack_train.step_size.to_string());
        d("attack_train.steps", plan.attack_train.steps.to_string());
        d("attack_train.start_scale", plan.attack_train.start_scale.to_string());
        d("eval_attack.method", plan.eval_attack.method.name().into());
        d("eval_attack.epsilon", plan.eval_attack.epsilon.to_string());
        d("eval_attack.step_size", plan.eval_attack.step_size.to_string());
        d("eval_attack.steps", plan.eval_attack.steps.to_string());
        d("eval_attack.random_start", plan.eval_attack.random_start.to_string());
        d("apr.enabled", plan.apr.enabled.to_string());
        d("apr.beta_sur", plan.apr.beta_sur.to_string());
        d("apr.gamma", plan.apr.gamma.to_string());
        d("apr.lambda_soft", plan.apr.lambda_soft.to_string());
        d("apr.use_lr_as_eta", plan.apr.use_lr_as_eta.to_string());
        d("apr.per_layer_norm", plan.apr.per_layer_norm.to_string());
        d("filter.enabled", plan.filter_enabled.to_string());
        d("filter.window", plan.filter.window_size.to_string());
        d("filter.temperature", plan.filter.temperature.to_string());
        d("model.image_size", plan.model.image_size.to_string());
        d("model.patch_size", plan.model.patch_size.to_string());
        d("model.embed_dim", plan.model.embed_dim.to_string());
        d("model.num_heads", plan.model.num_heads.to_string());
        d("model.depth", plan.model.depth.to_string());
        d("model.mlp_ratio", plan.model.mlp_ratio.to_string());
        d("model.num_classes", plan.model.num_classes.to_string());
        m
    }

    pub fn set(&mut self, key: &str, value: String, source: Source) {
        self.entries.insert(key.to_string(), (value, source));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|(v, _)| v.as_str())
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &str, Source)> {
        self.entries.iter().map(|(k, (v, s))| (k.as_str(), v.as_str(), *s))
    }

    /// Merge `key = value` lines from a file. Unknown keys are rejected so
    /// typos fail loudly.
    pub fn load_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let text = std::fs::read_to_string(path.as_ref())?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(CapError::Config(format!(
                    "{}:{}: expected `key = value`, got {raw:?}",
                    path.as_ref().display(),
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim(), Source::File)?;
        }
        Ok(())
    }

    /// Apply one override, validating the key exists.
    pub fn apply(&mut self, key: &str, value: &str, source: Source) -> Result<()> {
        if !self.entries.contains_key(key) {
            return Err(CapError::Config(format!("unknown config key {key:?}")));
        }
        self.set(key, value.to_string(), source);
        Ok(())
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self
            .get(key)
            .ok_or_else(|| CapError::Config(format!("missing config key {key:?}")))?;
        raw.parse::<T>()
            .map_err(|e| CapError::Config(format!("bad value for {key}: {raw:?} ({e})")))
    }

    /// Materialize a training plan from the resolved keys.
    pub fn to_train_plan(&self) -> Result<TrainPlan> {
        let schedule = match self.get("schedule").unwrap_or("cosine") {
            "cosine" => Schedule::Cosine,
            "step" => Schedule::Step {
                every: self.parse("schedule.step_every")?,
                factor: self.parse("schedule.step_factor")?,
            },
            other => return Err(CapError::Config(format!("unknown schedule {other:?}"))),
        };
        let plan = TrainPlan {
            mode: TrainMode::parse(self.get("mode").unwrap_or("cap"))?,
            model: VitConfig {
                image_size: self.parse("model.image_size")?,
                patch_size: self.parse("model.patch_size")?,
                embed_dim: self.parse("model.embed_dim")?,
                num_heads: self.parse("model.num_heads")?,
                depth: self.parse("model.depth")?,
                mlp_ratio: self.parse("model.mlp_ratio")?,
                num_classes: self.parse("model.num_classes")?,
            },
            epochs: self.parse("epochs")?,
            batch_size: self.parse("batch_size")?,
            lr: self.parse("lr")?,
            schedule,
            weight_decay: self.parse("weight_decay")?,
            grad_clip: self.parse("grad_clip")?,
            beta: self.parse("beta")?,
            combo: MetricCombo {
                outer: Metric::parse(self.get("objective.outer").unwrap_or("se"))?,
                inner: Metric::parse(self.get("objective.inner").unwrap_or("kl"))?,
            },
            adv_vs_label: self.parse("objective.adv_vs_label")?,
            attack_train: TrainAttack {
                epsilon: self.parse("attack_train.epsilon")?,
                step_size: self.parse("attack_train.step_size")?,
                steps: self.parse("attack_train.steps")?,
                start_scale: self.parse("attack_train.start_scale")?,
            },
            eval_attack: AttackSpec {
                method: AttackMethod::parse(self.get("eval_attack.method").unwrap_or("pgd"))?,
                epsilon: self.parse("eval_attack.epsilon")?,
                step_size: self.parse("eval_attack.step_size")?,
                steps: self.parse("eval_attack.steps")?,
                momentum: 1.0,
                loss: crate::attacks::AttackLoss::Ce,
                random_start: self.parse("eval_attack.random_start")?,
            },
            eval_subset: self.parse("eval_subset")?,
            apr: AprConfig {
                enabled: self.parse("apr.enabled")?,
                beta_sur: self.parse("apr.beta_sur")?,
                gamma: self.parse("apr.gamma")?,
                use_lr_as_eta: self.parse("apr.use_lr_as_eta")?,
                lambda_soft: self.parse("apr.lambda_soft")?,
                per_layer_norm: self.parse("apr.per_layer_norm")?,
            },
            filter: FilterConfig {
                window_size: self.parse("filter.window")?,
                temperature: self.parse("filter.temperature")?,
            },
            filter_enabled: self.parse("filter.enabled")?,
            seed: self.parse("seed")?,
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build_the_default_plan() {
        let plan = ConfigMap::train_defaults().to_train_plan().unwrap();
        assert_eq!(plan, TrainPlan::default());
    }

    #[test]
    fn file_then_flag_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cap.conf");
        std::fs::write(
            &path,
            "# experiment\napr.gamma = 0.0002\nepochs = 5   # short run\nobjective.outer = kl\n",
        )
        .unwrap();
        let mut cfg = ConfigMap::train_defaults();
        cfg.load_file(&path).unwrap();
        cfg.apply("apr.gamma", "0.0005", Source::Flag).unwrap();

        let plan = cfg.to_train_plan().unwrap();
        assert_eq!(plan.apr.gamma, 0.0005, "flag shadows file");
        assert_eq!(plan.epochs, 5);
        assert_eq!(plan.combo.outer, Metric::Kl);

        let sources: std::collections::HashMap<&str, Source> =
            cfg.entries().map(|(k, _, s)| (k, s)).collect();
        assert_eq!(sources["apr.gamma"], Source::Flag);
        assert_eq!(sources["epochs"], Source::File);
        assert_eq!(sources["lr"], Source::Default);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut cfg = ConfigMap::train_defaults();
        assert!(cfg.apply("apr.gama", "0.1", Source::Flag).is_err());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.conf");
        std::fs::write(&path, "nonsense_key = 1\n").unwrap();
        assert!(cfg.load_file(&path).is_err());
    }
}
