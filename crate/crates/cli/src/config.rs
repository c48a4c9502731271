//! Run configuration: one TOML file plus dotted-path overrides.

use std::path::{Path, PathBuf};

use kdfusion::dataset::GeneratorConfig;
use kdfusion::distillation::KdConfig;
use kdfusion::fusion::FusionConfig;
use kdfusion::training::{ModelConfig, PipelineConfig, TrainConfig};
use kdfusion::Modality;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "KDFUSION_CONFIG";

/// File locations. Relative `data_file` and `checkpoint_dir` resolve against
/// `output_dir`; a relative `output_dir` resolves against the working directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_file: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_file: "data/features.jsonl".into(),
            checkpoint_dir: "checkpoints".into(),
            output_dir: "runs/default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub teacher: Modality,
    pub data: GeneratorConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub kd: KdConfig,
    pub fusion: FusionConfig,
    pub paths: Paths,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::from_pipeline(PipelineConfig::default(), Paths::default())
    }
}

impl RunConfig {
    pub fn from_pipeline(p: PipelineConfig, paths: Paths) -> Self {
        Self {
            seed: p.seed,
            teacher: p.teacher,
            data: p.data,
            model: p.model,
            train: p.train,
            kd: p.kd,
            fusion: p.fusion,
            paths,
        }
    }

    pub fn pipeline(&self) -> PipelineConfig {
        PipelineConfig {
            seed: self.seed,
            teacher: self.teacher,
            data: self.data.clone(),
            model: self.model,
            train: self.train,
            kd: self.kd,
            fusion: self.fusion,
        }
    }

    pub fn output_dir(&self) -> &Path {
        &self.paths.output_dir
    }

    pub fn data_file(&self) -> PathBuf {
        self.paths.output_dir.join(&self.paths.data_file)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.paths
            .output_dir
            .join(&self.paths.checkpoint_dir)
            .join(format!("{name}.json"))
    }

    /// SHA-256 of the canonical TOML form of everything except `paths`, so
    /// the same experiment written to two directories shares a hash.
    pub fn hash(&self) -> String {
        let text = toml::to_string(&self.pipeline()).expect("config serializes");
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Command-line inputs that shape the config.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub config: Option<PathBuf>,
    pub sets: Vec<String>,
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

/// File (or defaults) → `--set` overrides → `--seed` / `--out-dir`.
pub fn load(o: &Overrides) -> Result<RunConfig, CliError> {
    let mut table = match &o.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                CliError::Usage(format!("cannot read config {}: {e}", path.display()))
            })?;
            text.parse::<toml::Table>()
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?
        }
        None => toml::Table::new(),
    };
    for set in &o.sets {
        apply_set(&mut table, set)?;
    }
    if let Some(seed) = o.seed {
        let v = toml::Value::Integer(seed as i64);
        table.insert("seed".into(), v.clone());
        table
            .entry("data")
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage("key data: expected a table".into()))?
            .insert("seed".into(), v);
    }
    if let Some(dir) = &o.out_dir {
        let paths = table
            .entry("paths")
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| CliError::Usage("key paths: expected a table".into()))?;
        paths.insert(
            "output_dir".into(),
            toml::Value::String(dir.display().to_string()),
        );
    }
    let cfg: RunConfig =
        serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| {
            let path = e.path().to_string();
            CliError::Usage(format!(
                "config key {path}: {}",
                crate::commands::first_line(e.inner())
            ))
        })?;
    cfg.pipeline().validate()?;
    Ok(cfg)
}

/// `a.b.c=value`; the value is parsed as TOML and taken as a bare string if
/// that fails.
fn apply_set(table: &mut toml::Table, set: &str) -> Result<(), CliError> {
    let (key, raw) = set
        .split_once('=')
        .ok_or_else(|| CliError::Usage(format!("--set expects key=value, got '{set}'")))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Usage(format!("--set: malformed key '{key}'")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = parts.split_last().expect("split yields at least one part");
    let mut node = table;
    for (i, p) in parents.iter().enumerate() {
        node = node
            .entry(*p)
            .or_insert_with(|| toml::Value::Table(Default::default()))
            .as_table_mut()
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "config key {}: expected a table",
                    parts[..=i].join(".")
                ))
            })?;
    }
    node.insert((*last).to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn with_sets(sets: &[&str]) -> Result<RunConfig, CliError> {
        load(&Overrides {
            sets: sets.iter().map(|s| s.to_string()).collect(),
            ..Default::default()
        })
    }

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
    }

    #[test]
    fn dotted_overrides() {
        let cfg = with_sets(&[
            "train.batch_size=16",
            "fusion.asf=false",
            "teacher=audio",
            "kd.alpha=0.5",
        ])
        .unwrap();
        assert_eq!(cfg.train.batch_size, 16);
        assert!(!cfg.fusion.asf);
        assert_eq!(cfg.teacher, Modality::Audio);
        assert_eq!(cfg.kd.alpha, 0.5);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
    }

    #[test]
    fn errors_name_the_key() {
        let msg = with_sets(&["train.batch_size=\"x\""])
            .unwrap_err()
            .to_string();
        assert!(msg.contains("train.batch_size"), "{msg}");
        let msg = with_sets(&["train.nope=1"]).unwrap_err().to_string();
        assert!(msg.contains("train"), "{msg}");
        assert!(with_sets(&["seed"]).is_err());
        assert!(with_sets(&["fusion.heads=5"]).is_err());
    }

    #[test]
    fn seed_flag_sets_both_seeds() {
        let cfg = load(&Overrides {
            seed: Some(3),
            ..Default::default()
        })
        .unwrap();
        assert_eq!((cfg.seed, cfg.data.seed), (3, 3));
    }

    #[test]
    fn paths_do_not_change_the_hash() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.paths.output_dir = "elsewhere".into();
        assert_eq!(a.hash(), b.hash());
    }
}
