//! Experiment files and fixed validation sets on disk.
//!
//! An experiment is a TOML document:
//!
//! ```toml
//! name = "lowlight-beta"
//! compare_against = ["lowlight-uniform"]
//!
//! [manifest]
//! task = "lowlight"
//! iterations = 5000
//!
//! [manifest.variant]
//! t_strategy = "beta"
//!
//! [sampler]
//! steps = 3
//! ```
//!
//! Every section and key is optional except `name`; unknown keys are errors.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pngio::{read_png, write_png};
use crate::sampler::SamplerOptions;
use crate::synthdata::{Pair, TaskKind};
use crate::trainer::TrainManifest;

/// Environment variable naming the directory that receives run outputs.
pub const OUTPUT_ROOT_ENV: &str = "RFR_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub name: String,
    #[serde(default)]
    pub manifest: TrainManifest,
    #[serde(default)]
    pub sampler: SamplerOptions,
    /// Defaults to `$RFR_OUTPUT_ROOT/<name>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub compare_against: Vec<String>,
}

impl ExperimentSpec {
    pub fn new(name: impl Into<String>, manifest: TrainManifest) -> Self {
        Self {
            name: name.into(),
            manifest,
            sampler: SamplerOptions::default(),
            output_dir: None,
            compare_against: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::config(format!(
                "invalid experiment name '{}'",
                self.name
            )));
        }
        self.manifest.validate()?;
        self.sampler.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    /// Explicit `output_dir`, else `<root>/<name>` with `root` from the
    /// environment or the default.
    pub fn resolve_output_dir(&self) -> PathBuf {
        self.output_dir
            .clone()
            .unwrap_or_else(|| output_root().join(&self.name))
    }
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

pub const VALSET_INDEX: &str = "index.csv";
pub const VALSET_INDEX_HEADER: &str = "id,task,seed";

/// Write pairs as `<id>_condition.png` / `<id>_target.png` plus an index.
/// A fourth condition channel (the inpainting mask) is stored as alpha.
pub fn export_valset(dir: &Path, task: TaskKind, pairs: &[Pair]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut index = format!("{VALSET_INDEX_HEADER}\n");
    for (id, p) in pairs.iter().enumerate() {
        write_png(&dir.join(format!("{id:04}_condition.png")), &p.condition)?;
        write_png(&dir.join(format!("{id:04}_target.png")), &p.target)?;
        index.push_str(&format!("{id},{},{}\n", task.name(), p.seed));
    }
    fs::write(dir.join(VALSET_INDEX), index)?;
    Ok(())
}

/// Read a set written by [`export_valset`]. Values come back quantized to 8 bits.
pub fn import_valset(dir: &Path) -> Result<(TaskKind, Vec<Pair>)> {
    let text = fs::read_to_string(dir.join(VALSET_INDEX))?;
    let mut lines = text.lines();
    if lines.next() != Some(VALSET_INDEX_HEADER) {
        return Err(Error::Format(format!(
            "{}: bad header",
            dir.join(VALSET_INDEX).display()
        )));
    }
    let mut task = None;
    let mut pairs = Vec::new();
    for line in lines.filter(|l| !l.trim().is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let [id, name, seed] = fields[..] else {
            return Err(Error::Format(format!("bad index row '{line}'")));
        };
        let parsed =
            TaskKind::parse(name).map_err(|_| Error::Format(format!("unknown task '{name}'")))?;
        if task.is_some_and(|t| t != parsed) {
            return Err(Error::Format("index mixes tasks".into()));
        }
        task = Some(parsed);
        let id: usize = id
            .parse()
            .map_err(|_| Error::Format(format!("bad id '{id}'")))?;
        let seed: u64 = seed
            .parse()
            .map_err(|_| Error::Format(format!("bad seed '{seed}'")))?;
        pairs.push(Pair {
            condition: read_png(&dir.join(format!("{id:04}_condition.png")))?,
            target: read_png(&dir.join(format!("{id:04}_target.png")))?,
            seed,
        });
    }
    let task = task.ok_or_else(|| Error::Format("empty validation index".into()))?;
    Ok((task, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::{validation_set, DegradeSpec};

    #[test]
    fn minimal_spec_uses_defaults() {
        let spec = ExperimentSpec::from_toml("name = \"base\"\n").unwrap();
        assert_eq!(spec.manifest, TrainManifest::default());
        assert_eq!(spec.sampler.steps, 3);
        assert!(spec.compare_against.is_empty());
    }

    #[test]
    fn nested_sections_and_rejections() {
        let text = r#"
name = "ll"
compare_against = ["other"]
[manifest]
task = "deblur"
iterations = 100
[manifest.variant]
t_strategy = "uniform"
[manifest.backbone]
base_width = 8
[sampler]
steps = 5
"#;
        let spec = ExperimentSpec::from_toml(text).unwrap();
        assert_eq!(spec.manifest.task, TaskKind::Deblur);
        assert_eq!(spec.manifest.backbone.base_width, 8);
        assert_eq!(spec.sampler.steps, 5);
        assert_eq!(
            ExperimentSpec::from_toml(&spec.to_toml().unwrap()).unwrap(),
            spec
        );
        assert!(ExperimentSpec::from_toml("name = \"x\"\ntypo = 3\n").is_err());
        assert!(ExperimentSpec::from_toml("name = \"x\"\n[manifest]\nlr_min = 1.0\n").is_err());
        assert!(ExperimentSpec::from_toml("name = \"x\"\n[sampler]\nsteps = 0\n").is_err());
        assert!(ExperimentSpec::from_toml("[manifest]\n").is_err());
    }

    #[test]
    fn explicit_output_dir_wins() {
        let mut spec = ExperimentSpec::new("run", TrainManifest::default());
        spec.output_dir = Some(PathBuf::from("/tmp/somewhere"));
        assert_eq!(spec.resolve_output_dir(), PathBuf::from("/tmp/somewhere"));
    }

    #[test]
    fn valset_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = validation_set(TaskKind::Inpaint, &DegradeSpec::default(), 3, 16, 0).unwrap();
        export_valset(dir.path(), TaskKind::Inpaint, &pairs).unwrap();
        let index = fs::read_to_string(dir.path().join(VALSET_INDEX)).unwrap();
        assert!(index.starts_with("id,task,seed\n"));
        let (task, back) = import_valset(dir.path()).unwrap();
        assert_eq!(task, TaskKind::Inpaint);
        assert_eq!(back.len(), 3);
        for (a, b) in pairs.iter().zip(&back) {
            assert_eq!(a.seed, b.seed);
            assert!(a.condition.max_abs_diff(&b.condition).unwrap() <= 0.5 / 255.0 + 1e-6);
            assert!(a.target.max_abs_diff(&b.target).unwrap() <= 0.5 / 255.0 + 1e-6);
            assert_eq!(a.mask(), b.mask());
        }
    }
}
