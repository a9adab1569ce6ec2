//! Run configuration: presets, TOML files and `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::corpus::CorpusConfig;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelVariant};
use crate::probe::ProbeConfig;
use crate::seq_model::EncoderConfig;
use crate::train::TrainConfig;
use crate::vq::GumbelSchedule;

/// Named default sets. `Paper` is the full-size configuration; `Desk` scales
/// the model and schedule down so a four-variant ablation fits on one CPU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Desk,
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preset::Paper => "paper",
            Preset::Desk => "desk",
        })
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            _ => Err(Error::Config(format!("unknown preset {s:?} (expected paper or desk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub dataset: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Cross-run CSV that `eval` appends to; defaults to `out_dir/metrics.csv`.
    pub csv: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            dataset: None,
            checkpoint: None,
            out_dir: PathBuf::from("runs"),
            csv: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub seeds: Vec<u64>,
    pub variants: Vec<ModelVariant>,
    /// Worker processes; each runs one (variant, seed) pair.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            seeds: vec![0],
            variants: vec![ModelVariant::Baseline, ModelVariant::Pd, ModelVariant::Pss, ModelVariant::Full],
            jobs: 1,
        }
    }
}

/// Everything one invocation needs. `train.seed` is the run seed: it seeds
/// model initialization, batching, sampling and the probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub variant: ModelVariant,
    pub paths: Paths,
    pub corpus: CorpusConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    pub ablation: AblationConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let paper = RunConfig {
            preset,
            variant: ModelVariant::Baseline,
            paths: Paths::default(),
            corpus: CorpusConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            probe: ProbeConfig::default(),
            ablation: AblationConfig::default(),
        };
        match preset {
            Preset::Paper => paper,
            Preset::Desk => {
                let steps = 1000;
                RunConfig {
                    model: ModelConfig {
                        encoder: EncoderConfig {
                            model_dim: 32,
                            layers: 1,
                            ..EncoderConfig::default()
                        },
                        ..paper.model
                    },
                    train: TrainConfig {
                        steps,
                        batch_size: 32,
                        learning_rate: 1e-3,
                        codebook_lr_scale: 10.0,
                        gumbel: GumbelSchedule {
                            decay_steps: steps as f64 / 20.0,
                            ..GumbelSchedule::default()
                        },
                        dead_code_interval: steps / 20,
                        ..paper.train
                    },
                    probe: ProbeConfig {
                        epochs: 15,
                        ..paper.probe
                    },
                    ..paper
                }
            }
        }
    }

    /// Merges, in increasing precedence: the preset, `file`, then `overrides`
    /// (dotted `key=value` pairs, values in TOML syntax or bare strings).
    pub fn resolve(preset: Option<Preset>, file: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let file_table = match file {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => Table::new(),
        };
        let mut over = Table::new();
        for kv in overrides {
            let (key, raw) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
            set_path(&mut over, key.trim(), parse_value(raw.trim()))?;
        }
        let preset_name = over
            .get("preset")
            .or_else(|| file_table.get("preset"))
            .and_then(Value::as_str)
            .map(str::parse)
            .transpose()?;
        let preset = preset.or(preset_name).unwrap_or(Preset::Desk);

        let mut merged = Value::try_from(RunConfig::preset(preset))
            .map_err(|e| Error::Config(format!("preset serialization: {e}")))?;
        merge(&mut merged, Value::Table(file_table));
        merge(&mut merged, Value::Table(over));
        if let Value::Table(t) = &mut merged {
            t.insert("preset".into(), Value::String(preset.to_string()));
        }
        let cfg: RunConfig = merged.try_into().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.corpus.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        self.probe.validate()?;
        if self.ablation.seeds.is_empty() || self.ablation.variants.is_empty() || self.ablation.jobs == 0 {
            return Err(Error::Config("ablation needs seeds, variants and at least one job".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("config serialization: {e}")))
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn csv_path(&self) -> PathBuf {
        self.paths.csv.clone().unwrap_or_else(|| self.paths.out_dir.join("metrics.csv"))
    }
}

fn parse_value(raw: &str) -> Value {
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("just parsed"),
        Err(_) => Value::String(raw.to_string()),
    }
}

fn set_path(root: &mut Table, key: &str, value: Value) -> Result<()> {
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed key {key:?}")));
    }
    let mut node = root;
    for p in &parts[..parts.len() - 1] {
        let entry = node.entry(p.to_string()).or_insert_with(|| Value::Table(Table::new()));
        node = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("{key}: {p} is not a table")))?;
    }
    node.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_table() && v.is_table() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_roundtrip_through_toml() {
        for p in [Preset::Paper, Preset::Desk] {
            let cfg = RunConfig::preset(p);
            assert_eq!(RunConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
        }
    }

    #[test]
    fn paper_preset_keeps_table_values() {
        let cfg = RunConfig::preset(Preset::Paper);
        assert_eq!(cfg.model.encoder.model_dim, 256);
        assert_eq!(cfg.model.encoder.layers, 5);
        assert_eq!(cfg.model.encoder.latent_dim, 32);
        assert_eq!(cfg.model.encoder.latent_count, 30);
        assert_eq!(cfg.model.codebook_size, 200);
        assert_eq!(cfg.train.beta, 3e-6);
        assert_eq!(cfg.train.gamma, 3.0);
        assert_eq!(cfg.train.learning_rate, 8.61e-5);
        assert_eq!(cfg.model.encoder.dropout, 0.2);
    }

    #[test]
    fn precedence_flags_over_file_over_preset() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.toml");
        std::fs::write(&file, "[train]\nsteps = 4000\nbatch_size = 8\n").unwrap();
        let cfg = RunConfig::resolve(None, Some(&file), &["train.steps=8000".into()]).unwrap();
        assert_eq!(cfg.preset, Preset::Desk);
        assert_eq!(cfg.train.steps, 8000);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.learning_rate, 1e-3);

        let cfg = RunConfig::resolve(None, Some(&file), &["preset=paper".into(), "variant=full".into()]).unwrap();
        assert_eq!(cfg.preset, Preset::Paper);
        assert_eq!(cfg.variant, ModelVariant::Full);
        assert_eq!(cfg.train.steps, 4000);
        assert_eq!(cfg.model.encoder.model_dim, 256);
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::resolve(None, None, &["train.stepz=3".into()]).unwrap_err();
        assert!(err.to_string().contains("stepz"), "{err}");
        assert!(RunConfig::resolve(None, None, &["nonsense".into()]).is_err());
        assert!(RunConfig::resolve(None, None, &["preset=huge".into()]).is_err());
    }
}
