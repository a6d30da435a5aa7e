//! Experiment configuration, read from TOML.
//!
//! ```toml
//! seed = 7
//!
//! [world]                 # synthetic world; or `world_dir = "path"`
//! classes = 10
//! angular_margin = 1.4
//!
//! [engine]
//! beta = 0.3
//! capacity = 50
//!
//! [engine.score]
//! groups = 5
//!
//! [plan]
//! ordering = "random"
//!
//! [sweep]                 # optional: one run per ID:OOD ratio
//! ratios = [[1, 1], [1, 4]]
//!
//! [output]
//! dir = "out"
//! format = "csv"          # or "json-lines"
//! ```
//!
//! Unknown keys anywhere are errors. Relative paths are resolved against
//! the directory of the config file. The experiment seed also seeds world
//! generation, so `world.seed` is overwritten.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::EngineConfig;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckConfig;
use crate::io::{load_world, RecordFormat, WORLD_MANIFEST};
use crate::theorem::TheoremConfig;
use crate::world::{generate_world, StreamPlan, World, WorldSpec};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    /// Directory holding a saved world; excludes `world`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world_dir: Option<PathBuf>,
    /// Synthetic world settings; defaults apply when neither this nor
    /// `world_dir` is given.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub world: Option<WorldSpec>,
    pub engine: EngineConfig,
    pub plan: StreamPlan,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<RatioSweep>,
    pub output: OutputConfig,
    pub grad_check: GradCheckConfig,
    pub theorem: TheoremConfig,
}

/// Repeats a run once per `[id, ood]` ratio, each with a fresh engine.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatioSweep {
    pub ratios: Vec<[usize; 2]>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    pub format: RecordFormat,
    /// Also report metrics per stream phase.
    pub per_phase: bool,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    /// Reads, validates and resolves paths of a config file; also checks
    /// that a referenced world directory exists.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        if let Some(dir) = cfg.world_dir.as_mut() {
            resolve(dir);
            let manifest = dir.join(WORLD_MANIFEST);
            if !manifest.is_file() {
                return Err(Error::io(
                    manifest,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "world manifest not found"),
                ));
            }
        }
        if let Some(dir) = cfg.output.dir.as_mut() {
            resolve(dir);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.world.is_some() && self.world_dir.is_some() {
            return Err(Error::InvalidConfig("set either [world] or world_dir, not both".into()));
        }
        if let Some(spec) = &self.world {
            spec.validate()?;
        }
        self.engine.validate()?;
        self.grad_check.validate()?;
        if let Some(sweep) = &self.sweep {
            if sweep.ratios.is_empty() {
                return Err(Error::InvalidConfig("sweep needs at least one ratio".into()));
            }
            if sweep.ratios.iter().any(|r| r[0] == 0 && r[1] == 0) {
                return Err(Error::InvalidConfig("ratio 0:0 is not allowed".into()));
            }
        }
        Ok(())
    }

    /// The synthetic spec with the experiment seed applied.
    pub fn world_spec(&self) -> WorldSpec {
        WorldSpec {
            seed: self.seed,
            ..self.world.clone().unwrap_or_default()
        }
    }

    /// Loads `world_dir` or generates the synthetic world.
    pub fn build_world(&self) -> Result<World> {
        match &self.world_dir {
            Some(dir) => load_world(dir),
            None => generate_world(&self.world_spec()),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inversion::InitStrategy;
    use crate::world::Ordering;

    #[test]
    fn defaults_from_empty_file() {
        let cfg = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.engine.beta, 0.3);
        assert_eq!(cfg.engine.score.groups, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        for text in ["sed = 1", "[engine]\nbeta = 0.3\nbetta = 1", "[world]\nclasess = 3", "[output]\nfmt = \"csv\""] {
            let err = ExperimentConfig::from_toml(text).unwrap_err();
            assert!(matches!(err, Error::InvalidConfig(_)), "{text}");
            assert_eq!(err.exit_code(), 1);
        }
    }

    #[test]
    fn round_trip() {
        let text = r#"
            seed = 11
            [world]
            classes = 6
            ood_clusters = 3
            [engine]
            beta = 0.4
            buffer = false
            repermute = "per-batch"
            [engine.score]
            groups = 3
            tau = 0.05
            [engine.inversion]
            lambda = 0.5
            init = { random = { sigma = 0.1 } }
            [plan]
            id_ratio = 2
            [plan.ordering.temporal-shift]
            phases = [[0], [1, 2]]
            [sweep]
            ratios = [[1, 1], [1, 3]]
            [output]
            format = "json-lines"
            per_phase = true
            [theorem]
            trials = 10
            groups = [2, 4]
        "#;
        let cfg = ExperimentConfig::from_toml(text).unwrap();
        assert_eq!(cfg.world.as_ref().unwrap().classes, 6);
        assert_eq!(cfg.engine.inversion.init, InitStrategy::Random { sigma: 0.1 });
        assert_eq!(
            cfg.plan.ordering,
            Ordering::TemporalShift {
                phases: vec![vec![0], vec![1, 2]]
            }
        );
        let again = ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(again, cfg);
        let defaults = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&defaults.to_toml().unwrap()).unwrap(), defaults);
    }

    #[test]
    fn invalid_values_fail_validation() {
        assert!(ExperimentConfig::from_toml("[engine]\nbeta = 2.0").is_err());
        assert!(ExperimentConfig::from_toml("world_dir = \"w\"\n[world]\nclasses = 2").is_err());
        assert!(ExperimentConfig::from_toml("[sweep]\nratios = [[0, 0]]").is_err());
    }

    #[test]
    fn load_resolves_paths_and_checks_world_dir() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("exp.toml");
        std::fs::write(&path, "world_dir = \"missing\"\n").unwrap();
        let err = ExperimentConfig::load(&path).unwrap_err();
        assert_eq!(err.exit_code(), 2);

        std::fs::write(&path, "[output]\ndir = \"out\"\n").unwrap();
        let cfg = ExperimentConfig::load(&path).unwrap();
        assert_eq!(cfg.output.dir.unwrap(), dir.path().join("out"));
    }
}
