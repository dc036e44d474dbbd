//! Experiment configuration: TOML file plus `--set key.path=value` overrides.
//!
//! Every field has a default, so an empty file is a valid config. Unknown
//! keys are rejected at every level. See `configs/example.toml` for the
//! commented schema.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::data::SyntheticSpec;
use crate::codebook::{MlpSpec, ProjectorVariant};
use crate::error::{Error, Result};
use crate::trainer::TrainConfig;

/// Where images come from: a `GVQT` file or directory when `path` is set,
/// otherwise the synthetic generator.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
}

impl DataSource {
    fn synthetic(count: usize, seed: u64) -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec {
                count,
                seed,
                ..Default::default()
            },
        }
    }
}

impl Default for DataSource {
    fn default() -> Self {
        Self::synthetic(2048, 0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExportToggles {
    pub metrics_csv: bool,
    pub summary_json: bool,
    pub checkpoint: bool,
}

impl Default for ExportToggles {
    fn default() -> Self {
        Self {
            metrics_csv: true,
            summary_json: true,
            checkpoint: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub groups: Vec<usize>,
    pub multiples: Vec<usize>,
    pub projectors: Vec<ProjectorVariant>,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            groups: vec![1, 4, 16, 64],
            multiples: vec![1, 2, 4, 8, 16, 32],
            projectors: vec![
                ProjectorVariant::Linear,
                ProjectorVariant::Mlp(MlpSpec::default()),
                ProjectorVariant::LinearPlusMlp(MlpSpec::default()),
            ],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub output: PathBuf,
    pub train: TrainConfig,
    pub data: DataSource,
    pub eval: DataSource,
    pub eval_batch_size: usize,
    pub export: ExportToggles,
    pub sweep: SweepConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            output: PathBuf::from("gvq-out"),
            train: TrainConfig::default(),
            data: DataSource::default(),
            eval: DataSource::synthetic(256, 1000),
            eval_batch_size: 64,
            export: ExportToggles::default(),
            sweep: SweepConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if self.eval_batch_size == 0 {
            return Err(Error::config("eval_batch_size must be positive"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(format!("cannot render config: {e}")))
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let probe = format!("v = {raw}");
    match probe.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("key v"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

/// Applies `key.path=value`; the value is read as a TOML literal, falling back
/// to a bare string.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::config(format!("override {assignment:?} is not key=value")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("override key {key:?} has an empty segment")));
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| Error::config(format!("override key {key:?}: {p:?} is not a table")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Reads `path` (if any), applies overrides in order, and validates.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            text.parse::<toml::Table>()
                .map_err(|e| Error::config(format!("{}: {e}", p.display())))?
        }
        None => toml::Table::new(),
    };
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e| Error::config(format!("invalid config: {e}")))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::Mode;

    #[test]
    fn empty_config_is_all_defaults() {
        assert_eq!(load_config(None, &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn overrides_parse_literals_and_strings() {
        let cfg = load_config(
            None,
            &[
                "train.mode=group:4".into(),
                "train.epochs=2".into(),
                "train.optimizer.lr=0.001".into(),
                "data.synthetic.family=\"patches\"".into(),
                "sweep.groups=[1,2]".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.train.mode, Mode::Group(4));
        assert_eq!(cfg.train.epochs, 2);
        assert_eq!(cfg.train.optimizer.lr, 1e-3);
        assert_eq!(cfg.sweep.groups, vec![1, 2]);
    }

    #[test]
    fn unknown_keys_rejected() {
        for o in ["train.epochz=3", "bogus=1", "train.optimizer.momentum=0.9"] {
            assert!(matches!(load_config(None, &[o.into()]), Err(Error::Config(_))), "{o}");
        }
    }

    #[test]
    fn indivisible_groups_rejected() {
        let e = load_config(None, &["train.mode=group:7".into()]).unwrap_err();
        assert!(e.to_string().contains("must divide"), "{e}");
    }

    #[test]
    fn echo_round_trips() {
        let cfg = load_config(
            None,
            &[
                "train.projector={ mlp = { hidden = 16 } }".into(),
                "train.grad_clip=1.5".into(),
                "eval.path=\"x/y\"".into(),
            ],
        )
        .unwrap();
        let text = cfg.to_toml().unwrap();
        let back: ExperimentConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }
}
