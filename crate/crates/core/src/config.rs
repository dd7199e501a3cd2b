//! JSON run configuration: strict parsing (unknown keys rejected), dotted-path
//! overrides, the `WxAy` bit-width shorthand, and expansion of ablation axes
//! into config grids.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{synth_blobs, AugmentPolicy, Dataset, RecordLayout};
use crate::distill::{LossConfig, LossMode};
use crate::model::{ModelConfig, QuantPair};
use crate::quant::{
    GradientEstimator, QuantTarget, QuantizerFamily, QuantizerParams, QuantizerSpec,
    SurrogateRule,
};
use crate::train::{InitScheme, LrSchedule, OptimizerKind, TrainConfig};
use crate::{Error, Result};

/// One quantizer template; unset fields take per-side defaults when the
/// config is resolved (weights: v=-1, m=1; activations: v=0, m=1).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantizerTemplate {
    #[serde(default = "default_family")]
    pub family: QuantizerFamily,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub b: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub m: Option<f64>,
    #[serde(default)]
    pub params: QuantizerParams,
}

fn default_family() -> QuantizerFamily {
    QuantizerFamily::Uniform
}

impl Default for QuantizerTemplate {
    fn default() -> Self {
        QuantizerTemplate {
            family: QuantizerFamily::Uniform,
            b: None,
            v: None,
            m: None,
            params: QuantizerParams::default(),
        }
    }
}

impl QuantizerTemplate {
    fn resolve(&mut self, shorthand: Option<u32>, target: QuantTarget) -> Result<QuantizerSpec> {
        let bits = match (self.b, shorthand) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "bit-width given twice: both \"bits\" shorthand and explicit \"b\"".into(),
                ))
            }
            (Some(b), None) => b,
            (None, Some(b)) => b,
            (None, None) => {
                return Err(Error::Config(
                    "no bit-width: set \"bits\" (e.g. \"W2A2\") or per-quantizer \"b\"".into(),
                ))
            }
        };
        let (dv, dm) = match target {
            QuantTarget::Weights => (-1.0, 1.0),
            QuantTarget::Activations => (0.0, 1.0),
        };
        self.b = Some(bits);
        self.v = Some(self.v.unwrap_or(dv));
        self.m = Some(self.m.unwrap_or(dm));
        let mut spec = QuantizerSpec {
            family: self.family,
            bits,
            lower: self.v.unwrap(),
            upper: self.m.unwrap(),
            target,
            params: self.params.clone(),
        };
        spec.normalize()?;
        self.params = spec.params.clone();
        Ok(spec)
    }
}

/// Quantization section: bit widths (shorthand or explicit), the two
/// templates, and the shared gradient estimator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuantSection {
    /// `"W2A4"` expands to weight b=2, activation b=4.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bits: Option<String>,
    #[serde(default)]
    pub weight: QuantizerTemplate,
    #[serde(default)]
    pub activation: QuantizerTemplate,
    #[serde(default = "GradientEstimator::ste")]
    pub estimator: GradientEstimator,
}

fn parse_bits_shorthand(s: &str) -> Result<(u32, u32)> {
    let rest = s
        .strip_prefix('W')
        .ok_or_else(|| Error::Config(format!("bits shorthand {s:?} must look like \"W2A4\"")))?;
    let (w, a) = rest
        .split_once('A')
        .ok_or_else(|| Error::Config(format!("bits shorthand {s:?} must look like \"W2A4\"")))?;
    let parse = |part: &str| {
        part.parse::<u32>()
            .map_err(|_| Error::Config(format!("bits shorthand {s:?}: bad number {part:?}")))
    };
    Ok((parse(w)?, parse(a)?))
}

/// Dataset source for a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSection {
    /// Synthetic Gaussian blobs; the test split uses `data_seed + 1`.
    Blobs {
        classes: usize,
        dim: usize,
        train_per_class: usize,
        test_per_class: usize,
        spread: f64,
        #[serde(default)]
        data_seed: u64,
    },
    /// Binary record files (label byte + channel-planar pixels).
    Binary {
        train_path: PathBuf,
        test_path: PathBuf,
        classes: usize,
        channels: usize,
        height: usize,
        width: usize,
    },
}

impl DataSection {
    pub fn class_count(&self) -> usize {
        match self {
            DataSection::Blobs { classes, .. } | DataSection::Binary { classes, .. } => *classes,
        }
    }

    pub fn load(&self) -> Result<(Dataset, Dataset)> {
        match self {
            DataSection::Blobs { classes, dim, train_per_class, test_per_class, spread, data_seed } => {
                let train = synth_blobs(*train_per_class, *classes, *dim, *spread, *data_seed)?;
                let test = synth_blobs(*test_per_class, *classes, *dim, *spread, data_seed + 1)?;
                Ok((train, test))
            }
            DataSection::Binary { train_path, test_path, classes, channels, height, width } => {
                let layout =
                    RecordLayout { channels: *channels, height: *height, width: *width };
                let train = crate::data::load_binary_records(train_path, layout, *classes)?;
                let test = crate::data::load_binary_records(test_path, layout, *classes)?;
                Ok((train, test))
            }
        }
    }
}

/// Optimization knobs; seed, loss, and estimator live at the top level of
/// [`RunConfig`] and are folded in by [`RunConfig::train_config`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub optimizer: OptimizerKind,
    #[serde(default = "default_lr_schedule")]
    pub lr_schedule: LrSchedule,
    pub epochs: usize,
    pub batch_size: usize,
    #[serde(default)]
    pub init: InitScheme,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub augment: AugmentPolicy,
}

fn default_lr_schedule() -> LrSchedule {
    LrSchedule::Constant
}

fn default_true() -> bool {
    true
}

/// Full experiment description: the union of the model, quantizer, loss,
/// optimization, and data settings, plus seed and output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: ModelConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quant: Option<QuantSection>,
    pub loss: LossConfig,
    pub train: TrainSection,
    pub data: DataSection,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub teacher_checkpoints: Vec<PathBuf>,
    /// Loss mode used when this config drives teacher pretraining.
    #[serde(default = "default_pretrain_loss")]
    pub teacher_pretrain_loss: LossMode,
    /// Axis name -> value list; expanded by [`ablation_matrix`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ablate: Option<BTreeMap<String, Vec<Value>>>,
}

fn default_pretrain_loss() -> LossMode {
    LossMode::CeOnly
}

impl RunConfig {
    /// Canonicalize (expand shorthand, fill defaults) and validate. Idempotent.
    pub fn resolve(&mut self) -> Result<()> {
        if self.model.quant.is_some() {
            return Err(Error::Config(
                "model.quant is derived; configure quantizers via the top-level \"quant\" section"
                    .into(),
            ));
        }
        self.model.validate()?;
        self.loss.validate()?;
        if self.train.epochs == 0 {
            return Err(Error::Config("train.epochs must be at least 1".into()));
        }
        if self.train.batch_size == 0 {
            return Err(Error::Config("train.batch_size must be at least 1".into()));
        }
        if self.teacher_pretrain_loss != LossMode::CeOnly {
            return Err(Error::Config(
                "teacher_pretrain_loss: only ce_only is supported (pretraining has no teacher)"
                    .into(),
            ));
        }
        match &self.data {
            DataSection::Blobs { classes, dim, train_per_class, test_per_class, spread, .. } => {
                if *classes == 0
                    || *dim == 0
                    || *train_per_class == 0
                    || *test_per_class == 0
                    || !(*spread > 0.0)
                {
                    return Err(Error::Config("data: blob parameters must be positive".into()));
                }
            }
            DataSection::Binary { classes, channels, height, width, .. } => {
                if *classes == 0 || *channels == 0 || *height == 0 || *width == 0 {
                    return Err(Error::Config("data: record dimensions must be positive".into()));
                }
            }
        }
        if self.data.class_count() != self.model.num_classes {
            return Err(Error::Config(format!(
                "data has {} classes but the model expects {}",
                self.data.class_count(),
                self.model.num_classes
            )));
        }
        if let Some(quant) = &mut self.quant {
            let shorthand = match quant.bits.take() {
                Some(s) => {
                    let (w, a) = parse_bits_shorthand(&s)?;
                    (Some(w), Some(a))
                }
                None => (None, None),
            };
            quant.weight.resolve(shorthand.0, QuantTarget::Weights)?;
            quant.activation.resolve(shorthand.1, QuantTarget::Activations)?;
            quant.estimator.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// The student's model config with quantizer templates attached.
    pub fn student_model_config(&self) -> Result<ModelConfig> {
        let quant = self.quant.as_ref().ok_or_else(|| {
            Error::Config("qat needs a \"quant\" section describing the student".into())
        })?;
        let mut weight = quant.weight.clone();
        let mut activation = quant.activation.clone();
        let w_spec = weight.resolve(None, QuantTarget::Weights)?;
        let a_spec = activation.resolve(None, QuantTarget::Activations)?;
        let mut cfg = self.model.clone();
        cfg.quant = Some(QuantPair { weight: w_spec, activation: a_spec });
        Ok(cfg)
    }

    /// Assemble the library-level training config for the given loss mode.
    pub fn train_config(&self, loss: LossConfig) -> TrainConfig {
        TrainConfig {
            optimizer: self.train.optimizer.clone(),
            lr_schedule: self.train.lr_schedule.clone(),
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            loss,
            estimator: self
                .quant
                .as_ref()
                .map(|q| q.estimator.clone())
                .unwrap_or_else(GradientEstimator::ste),
            init: self.train.init,
            shuffle: self.train.shuffle,
            augment: self.train.augment,
        }
    }
}

/// Strict JSON parse followed by resolution; errors name unknown or missing
/// keys.
pub fn parse_config(path: &Path) -> Result<RunConfig> {
    parse_config_with_overrides(path, &[])
}

/// Parse with `key.path=value` overrides applied before validation;
/// later overrides win.
pub fn parse_config_with_overrides(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let mut value: Value =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("parse: {e}")))?;
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let mut config: RunConfig =
        serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
    config.resolve()?;
    Ok(config)
}

/// Serialize a resolved config; `parse` of the result reproduces it.
pub fn write_config(config: &RunConfig) -> String {
    serde_json::to_string_pretty(config).expect("config serializes")
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let parsed: Value = serde_json::from_str(raw).unwrap_or(Value::String(raw.to_string()));
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = node.as_object_mut().ok_or_else(|| {
            Error::Config(format!("override {path:?}: {part:?} is not an object"))
        })?;
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Ok(())
}

// ── Ablation matrix ─────────────────────────────────────────────────────

const AXES: &[&str] = &[
    "backward_estimator",
    "epochs",
    "forward_family",
    "init",
    "lambda",
    "loss_mode",
    "rho",
    "teacher_checkpoints",
    "teacher_pretrain_loss",
];

fn axis_apply(cfg: &mut RunConfig, axis: &str, value: &Value) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("axis {axis:?}: expected {what}, got {value}"));
    match axis {
        "loss_mode" => {
            cfg.loss.mode = serde_json::from_value(value.clone()).map_err(|_| bad("a loss mode"))?;
        }
        "lambda" => cfg.loss.lambda = value.as_f64().ok_or_else(|| bad("a number"))?,
        "rho" => cfg.loss.rho = value.as_f64().ok_or_else(|| bad("a number"))?,
        "init" => {
            cfg.train.init =
                serde_json::from_value(value.clone()).map_err(|_| bad("an init scheme"))?;
        }
        "epochs" => {
            cfg.train.epochs = value.as_u64().ok_or_else(|| bad("a positive integer"))? as usize;
        }
        "forward_family" => {
            let quant = cfg
                .quant
                .as_mut()
                .ok_or_else(|| Error::Config("forward_family axis needs a quant section".into()))?;
            let name = value.as_str().ok_or_else(|| bad("a family name"))?;
            let (w, a) = match name {
                "uniform" => (QuantizerFamily::Uniform, QuantizerFamily::Uniform),
                "dorefa" => (QuantizerFamily::DorefaWeight, QuantizerFamily::DorefaActivation),
                "pact" => (QuantizerFamily::DorefaWeight, QuantizerFamily::Pact),
                "lsq" => (QuantizerFamily::Lsq, QuantizerFamily::Lsq),
                other => {
                    return Err(Error::Config(format!(
                        "axis \"forward_family\": unknown family {other:?}"
                    )))
                }
            };
            quant.weight.family = w;
            quant.weight.params = QuantizerParams::default();
            quant.activation.family = a;
            quant.activation.params = QuantizerParams::default();
        }
        "backward_estimator" => {
            let quant = cfg.quant.as_mut().ok_or_else(|| {
                Error::Config("backward_estimator axis needs a quant section".into())
            })?;
            let name = value.as_str().ok_or_else(|| bad("an estimator name"))?;
            quant.estimator.rule = match name {
                "ste" => SurrogateRule::Ste,
                "additive" => SurrogateRule::AdditiveDiscretization,
                "ewgs" => SurrogateRule::EwgsMultiplicative,
                other => {
                    return Err(Error::Config(format!(
                        "axis \"backward_estimator\": unknown rule {other:?}"
                    )))
                }
            };
        }
        "teacher_checkpoints" => {
            cfg.teacher_checkpoints = match value {
                Value::String(s) => vec![PathBuf::from(s)],
                Value::Array(items) => items
                    .iter()
                    .map(|v| {
                        v.as_str()
                            .map(PathBuf::from)
                            .ok_or_else(|| bad("checkpoint path strings"))
                    })
                    .collect::<Result<_>>()?,
                _ => return Err(bad("a path or list of paths")),
            };
        }
        "teacher_pretrain_loss" => {
            cfg.teacher_pretrain_loss =
                serde_json::from_value(value.clone()).map_err(|_| bad("a loss mode"))?;
        }
        other => {
            return Err(Error::Config(format!(
                "unknown ablation axis {other:?} (known: {})",
                AXES.join(", ")
            )))
        }
    }
    Ok(())
}

fn value_slug(value: &Value) -> String {
    let raw = match value {
        Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    raw.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect()
}

/// Expand ablation axes over a base config: the Cartesian product in
/// deterministic order (axes sorted by name, values in given order, later
/// axes varying fastest). Each combination gets its own output subdirectory.
pub fn ablation_matrix(
    base: &RunConfig,
    axes: &BTreeMap<String, Vec<Value>>,
) -> Result<Vec<RunConfig>> {
    for (axis, values) in axes {
        if !AXES.contains(&axis.as_str()) {
            return Err(Error::Config(format!(
                "unknown ablation axis {axis:?} (known: {})",
                AXES.join(", ")
            )));
        }
        if values.is_empty() {
            return Err(Error::Config(format!("axis {axis:?} has no values")));
        }
    }
    let mut configs = vec![{
        let mut c = base.clone();
        c.ablate = None;
        c
    }];
    let mut slugs: Vec<String> = vec![String::new()];
    for (axis, values) in axes {
        let mut next_configs = Vec::with_capacity(configs.len() * values.len());
        let mut next_slugs = Vec::with_capacity(configs.len() * values.len());
        for (cfg, slug) in configs.iter().zip(&slugs) {
            for value in values {
                let mut c = cfg.clone();
                axis_apply(&mut c, axis, value)?;
                let part = format!("{axis}={}", value_slug(value));
                next_slugs.push(if slug.is_empty() {
                    part
                } else {
                    format!("{slug}_{part}")
                });
                next_configs.push(c);
            }
        }
        configs = next_configs;
        slugs = next_slugs;
    }
    for (cfg, slug) in configs.iter_mut().zip(&slugs) {
        if !slug.is_empty() {
            cfg.out_dir = base.out_dir.join(slug);
        }
        cfg.resolve()?;
    }
    Ok(configs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Arch;

    fn base_json() -> serde_json::Value {
        serde_json::json!({
            "seed": 0,
            "out_dir": "runs/test",
            "model": {
                "arch": { "mlp": { "widths": [2, 16, 16, 3] } },
                "num_classes": 3
            },
            "quant": {
                "bits": "W2A2",
                "estimator": { "rule": "additive", "mu": 0.5 }
            },
            "loss": { "mode": "sqakd" },
            "train": {
                "optimizer": { "kind": "sgd", "lr": 0.1, "momentum": 0.9 },
                "epochs": 4,
                "batch_size": 32
            },
            "data": {
                "kind": "blobs",
                "classes": 3,
                "dim": 2,
                "train_per_class": 10,
                "test_per_class": 5,
                "spread": 1.0
            }
        })
    }

    fn write_tmp(value: &serde_json::Value) -> (tempfile::TempDir, PathBuf) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
        (dir, path)
    }

    #[test]
    fn sqakd_mode_maps_to_kl_only() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();
        assert_eq!(cfg.loss.mode, LossMode::KlOnly);
    }

    #[test]
    fn bits_shorthand_expands() {
        let mut v = base_json();
        v["quant"]["bits"] = "W1A1".into();
        let (_d, path) = write_tmp(&v);
        let cfg = parse_config(&path).unwrap();
        let quant = cfg.quant.unwrap();
        assert_eq!(quant.weight.b, Some(1));
        assert_eq!(quant.activation.b, Some(1));
        assert_eq!(quant.bits, None);
    }

    #[test]
    fn shorthand_plus_explicit_b_is_rejected() {
        let mut v = base_json();
        v["quant"]["weight"] = serde_json::json!({ "b": 4 });
        let (_d, path) = write_tmp(&v);
        let err = parse_config(&path).unwrap_err().to_string();
        assert!(err.contains("twice"), "{err}");
    }

    #[test]
    fn negative_mu_is_rejected() {
        let mut v = base_json();
        v["quant"]["estimator"]["mu"] = (-1.0).into();
        let (_d, path) = write_tmp(&v);
        let err = parse_config(&path).unwrap_err().to_string();
        assert!(err.contains("non-negative"), "{err}");
    }

    #[test]
    fn unknown_key_is_named() {
        let mut v = base_json();
        v["typo_key"] = 1.into();
        let (_d, path) = write_tmp(&v);
        let err = parse_config(&path).unwrap_err().to_string();
        assert!(err.contains("typo_key"), "{err}");
    }

    #[test]
    fn nested_unknown_key_is_named() {
        let mut v = base_json();
        v["loss"]["rho_squared"] = true.into();
        let (_d, path) = write_tmp(&v);
        let err = parse_config(&path).unwrap_err().to_string();
        assert!(err.contains("rho_squared"), "{err}");
    }

    #[test]
    fn missing_required_key_errors() {
        let mut v = base_json();
        v.as_object_mut().unwrap().remove("train");
        let (_d, path) = write_tmp(&v);
        let err = parse_config(&path).unwrap_err().to_string();
        assert!(err.contains("train"), "{err}");
    }

    #[test]
    fn overrides_follow_dotted_paths_and_last_wins() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config_with_overrides(
            &path,
            &["loss.rho=2".into(), "loss.rho=8".into(), "train.epochs=9".into()],
        )
        .unwrap();
        assert_eq!(cfg.loss.rho, 8.0);
        assert_eq!(cfg.train.epochs, 9);
    }

    #[test]
    fn roundtrip_parse_of_written_config() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("resolved.json");
        std::fs::write(&out, write_config(&cfg)).unwrap();
        let re = parse_config(&out).unwrap();
        assert_eq!(cfg, re);
    }

    #[test]
    fn resolve_is_idempotent() {
        let (_d, path) = write_tmp(&base_json());
        let mut cfg = parse_config(&path).unwrap();
        let snapshot = cfg.clone();
        cfg.resolve().unwrap();
        assert_eq!(cfg, snapshot);
    }

    #[test]
    fn student_config_carries_templates() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();
        let student = cfg.student_model_config().unwrap();
        let pair = student.quant.unwrap();
        assert_eq!(pair.weight.bits, 2);
        assert_eq!(pair.weight.target, QuantTarget::Weights);
        assert_eq!(pair.weight.lower, -1.0);
        assert_eq!(pair.activation.lower, 0.0);
        assert!(matches!(student.arch, Arch::Mlp { .. }));
    }

    #[test]
    fn ablation_matrix_sizes_and_order() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();

        let empty = BTreeMap::new();
        let configs = ablation_matrix(&cfg, &empty).unwrap();
        assert_eq!(configs.len(), 1);
        assert_eq!(configs[0].out_dir, cfg.out_dir);

        let mut axes = BTreeMap::new();
        axes.insert("rho".to_string(), vec![1.0.into(), 4.0.into()]);
        let configs = ablation_matrix(&cfg, &axes).unwrap();
        assert_eq!(configs.len(), 2);
        assert_eq!(configs[0].loss.rho, 1.0);
        assert_eq!(configs[1].loss.rho, 4.0);
        assert!(configs[0].out_dir.ends_with("rho=1.0"));

        axes.insert(
            "loss_mode".to_string(),
            vec!["kl_only".into(), "combined".into()],
        );
        let configs = ablation_matrix(&cfg, &axes).unwrap();
        assert_eq!(configs.len(), 4);
        // Axes sorted by name: loss_mode before rho; rho varies fastest.
        assert_eq!(configs[0].loss.mode, LossMode::KlOnly);
        assert_eq!(configs[0].loss.rho, 1.0);
        assert_eq!(configs[1].loss.rho, 4.0);
        assert_eq!(configs[2].loss.mode, LossMode::Combined);
    }

    #[test]
    fn unknown_axis_is_rejected() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();
        let mut axes = BTreeMap::new();
        axes.insert("bogus".to_string(), vec![1.0.into()]);
        let err = ablation_matrix(&cfg, &axes).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
    }

    #[test]
    fn forward_family_axis_rewrites_both_templates() {
        let (_d, path) = write_tmp(&base_json());
        let cfg = parse_config(&path).unwrap();
        let mut axes = BTreeMap::new();
        axes.insert("forward_family".to_string(), vec!["dorefa".into(), "lsq".into()]);
        let configs = ablation_matrix(&cfg, &axes).unwrap();
        let q0 = configs[0].quant.as_ref().unwrap();
        assert_eq!(q0.weight.family, QuantizerFamily::DorefaWeight);
        assert_eq!(q0.activation.family, QuantizerFamily::DorefaActivation);
        let q1 = configs[1].quant.as_ref().unwrap();
        assert_eq!(q1.weight.family, QuantizerFamily::Lsq);
    }

    #[test]
    fn model_quant_inline_is_rejected() {
        let mut v = base_json();
        v["model"]["quant"] = serde_json::json!({
            "weight": { "family": "uniform", "b": 2 },
            "activation": { "family": "uniform", "b": 2 }
        });
        let (_d, path) = write_tmp(&v);
        assert!(parse_config(&path).is_err());
    }
}
