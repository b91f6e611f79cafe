//! Run configuration and manifests.

use std::path::{Path, PathBuf};

use gssm::ekf::EkfParams;
use gssm::error::{GssmError, Result};
use gssm::evaluation::EvalOptions;
use gssm::model::ModelConfig;
use gssm::synth::GeneratorSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingOptions {
    /// Steps between training samples of one pair.
    pub stride: usize,
    pub val_fraction: f64,
}

impl Default for TrainingOptions {
    fn default() -> Self {
        Self { stride: 10, val_fraction: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttributionOptions {
    pub references: usize,
    pub samples: usize,
    /// Training samples encoded for the reference clustering.
    pub reference_pool: usize,
    /// Steps between attributed time points.
    pub stride: usize,
    pub n_top: usize,
}

impl Default for AttributionOptions {
    fn default() -> Self {
        Self {
            references: gssm::attribution::DEFAULT_REFERENCES,
            samples: gssm::attribution::DEFAULT_SAMPLES,
            reference_pool: 2000,
            stride: 5,
            n_top: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Global seed; overrides the generator and model seeds.
    pub seed: u64,
    pub generator: GeneratorSpec,
    pub model: ModelConfig,
    pub ekf: EkfParams,
    /// Scale factors applied to the default EKF noise for tuning.
    pub ekf_grid: Vec<f64>,
    pub training: TrainingOptions,
    pub evaluation: EvalOptions,
    pub attribution: AttributionOptions,
    pub workers: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 131,
            generator: GeneratorSpec::default(),
            model: ModelConfig::default(),
            ekf: EkfParams::default(),
            ekf_grid: vec![0.25, 0.5, 1.0, 2.0, 4.0],
            training: TrainingOptions::default(),
            evaluation: EvalOptions::default(),
            attribution: AttributionOptions::default(),
            workers: None,
        }
    }
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let mut config = match path {
            Some(p) => serde_json::from_str::<RunConfig>(&std::fs::read_to_string(p)?)
                .map_err(|e| GssmError::Config(format!("{}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        config.apply_seed();
        Ok(config)
    }

    pub fn apply_seed(&mut self) {
        self.generator.seed = self.seed;
        self.model.seed = self.seed;
    }
}

#[derive(Debug, Serialize)]
pub struct Manifest<'a> {
    pub tool: &'static str,
    pub version: &'static str,
    pub command: &'a str,
    pub seed: u64,
    pub inputs: Vec<String>,
    pub config: &'a RunConfig,
}

/// Writes `manifest.json` into `dir`.
pub fn write_manifest(dir: &Path, command: &str, inputs: &[&PathBuf], config: &RunConfig) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let manifest = Manifest {
        tool: "gssm",
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: config.seed,
        inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
        config,
    };
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)? + "\n")?;
    Ok(())
}

/// Directory holding a file output.
pub fn parent_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_config_fills_defaults_and_propagates_seed() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        std::fs::write(&path, r#"{"seed": 9, "model": {"repr_dim": 8}, "evaluation": {"min_alert_steps": 3}}"#).unwrap();
        let config = RunConfig::load(Some(&path)).unwrap();
        assert_eq!((config.generator.seed, config.model.seed), (9, 9));
        assert_eq!(config.model.repr_dim, 8);
        assert_eq!(config.model.heads, ModelConfig::default().heads);
        assert_eq!(config.evaluation.min_alert_steps, 3);
        assert_eq!(config.training, TrainingOptions::default());
    }

    #[test]
    fn manifest_round_trips_config() {
        let dir = tempfile::tempdir().unwrap();
        let config = RunConfig::default();
        write_manifest(dir.path(), "synth", &[], &config).unwrap();
        let value: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
        assert_eq!(value["command"], "synth");
        let back: RunConfig = serde_json::from_value(value["config"].clone()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn parent_of_bare_file_is_cwd() {
        assert_eq!(parent_dir(Path::new("model.ckpt")), PathBuf::from("."));
        assert_eq!(parent_dir(Path::new("a/b.ckpt")), PathBuf::from("a"));
    }
}
