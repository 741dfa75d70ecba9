//! Run configuration, config hashing and run manifests.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::envgen::WorldSpec;
use crate::error::{Error, Result};
use crate::eval::Variant;
use crate::irm_tv::TrainConfig;
use crate::model::ModelDims;

pub const DATASET_FILE: &str = "dataset.jsonl";

/// One experiment, read from a TOML file. Every table is optional.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub world: WorldSpec,
    pub model: ModelDims,
    pub train: TrainConfig,
    pub variant: Variant,
    /// Rows of the ablation table, in order.
    pub variants: Vec<Variant>,
    pub out_dir: PathBuf,
    pub seeds: Vec<u64>,
    /// Records written by `gen`.
    pub n_records: usize,
    /// Records edited per seed by `edit` and `ablate`.
    pub n_edits: usize,
    /// Edits accumulated before evaluation; 1 is one-step editing.
    pub t: usize,
    /// Dataset read by `edit` and `ablate`; defaults to the one `gen`
    /// writes into `out_dir`.
    pub dataset: Option<PathBuf>,
}

pub fn default_variants() -> Vec<Variant> {
    let mut v = Variant::ABLATIONS.to_vec();
    v.extend(Variant::LAMBDA_SWEEP.iter().map(|&c| Variant::FixedLambda(c)));
    v
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            world: WorldSpec::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
            variant: Variant::Full,
            variants: default_variants(),
            out_dir: PathBuf::from("runs/default"),
            seeds: vec![0, 1, 2, 3, 4],
            n_records: 200,
            n_edits: 20,
            t: 1,
            dataset: None,
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config {
            field: "config".into(),
            reason: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        let bad = |field: &str, reason: String| {
            Err(Error::Config {
                field: field.into(),
                reason,
            })
        };
        let (w, m) = (&self.world, &self.model);
        if (w.d_img, w.d_txt, w.n_values) != (m.d_img, m.d_txt, m.n_classes) {
            return bad(
                "model",
                format!(
                    "d_img/d_txt/n_classes ({}, {}, {}) must equal the world's d_img/d_txt/n_values ({}, {}, {})",
                    m.d_img, m.d_txt, m.n_classes, w.d_img, w.d_txt, w.n_values
                ),
            );
        }
        if self.seeds.is_empty() {
            return bad("seeds", "need at least one seed".into());
        }
        if self.variants.is_empty() {
            return bad("variants", "need at least one variant".into());
        }
        if self.n_records == 0 {
            return bad("n_records", "must be positive".into());
        }
        if self.t == 0 {
            return bad("t", "must be at least 1".into());
        }
        if self.n_edits < self.t {
            return bad("n_edits", format!("{} edits cannot cover T = {}", self.n_edits, self.t));
        }
        Ok(())
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.dataset.clone().unwrap_or_else(|| self.out_dir.join(DATASET_FILE))
    }

    /// SHA-256 of the resolved configuration, so equivalent files with
    /// different layout or omitted defaults hash alike.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&canonical))
    }
}

/// Parses `--seeds`: a comma list (`0,3,7`) or a half-open range (`0..5`).
pub fn parse_seeds(s: &str) -> Result<Vec<u64>> {
    let bad = || Error::Config {
        field: "seeds".into(),
        reason: format!("expected `a,b,c` or `lo..hi`, got `{s}`"),
    };
    let seeds: Vec<u64> = if let Some((lo, hi)) = s.split_once("..") {
        let lo: u64 = lo.trim().parse().map_err(|_| bad())?;
        let hi: u64 = hi.trim().parse().map_err(|_| bad())?;
        (lo..hi).collect()
    } else {
        s.split(',')
            .map(|p| p.trim().parse().map_err(|_| bad()))
            .collect::<Result<_>>()?
    };
    if seeds.is_empty() {
        return Err(bad());
    }
    Ok(seeds)
}

/// `manifest.<command>.json`, so commands sharing a directory keep their
/// own manifests.
pub fn manifest_file(command: &str) -> String {
    format!("manifest.{command}.json")
}

pub fn unix_now() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub version: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Paths relative to the output directory.
    pub artifacts: Vec<PathBuf>,
}

impl RunManifest {
    pub fn new(command: &str, config_hash: String, started_unix: u64) -> Self {
        RunManifest {
            command: command.into(),
            config_hash,
            version: env!("CARGO_PKG_VERSION").into(),
            started_unix,
            finished_unix: started_unix,
            artifacts: Vec::new(),
        }
    }

    /// Writes the manifest into `out_dir` after checking that every
    /// artifact exists. Artifacts under `out_dir` are recorded relative to
    /// it. The file appears atomically.
    pub fn write(mut self, out_dir: &Path) -> Result<PathBuf> {
        for a in &mut self.artifacts {
            let present = match a.strip_prefix(out_dir) {
                Ok(rel) => {
                    *a = rel.to_path_buf();
                    out_dir.join(&a).exists()
                }
                Err(_) => a.exists(),
            };
            if !present {
                return Err(Error::Config {
                    field: "manifest".into(),
                    reason: format!("artifact {} is missing", a.display()),
                });
            }
        }
        self.finished_unix = unix_now();
        let name = manifest_file(&self.command);
        let path = out_dir.join(&name);
        let tmp = out_dir.join(format!(".{name}.tmp"));
        fs::write(&tmp, serde_json::to_string_pretty(&self)?)?;
        fs::rename(&tmp, &path)?;
        Ok(path)
    }

    pub fn read(out_dir: &Path, command: &str) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(out_dir.join(manifest_file(command)))?)?)
    }
}
