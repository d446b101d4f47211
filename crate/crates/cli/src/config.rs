//! Experiment configuration: one JSON document, overridable by dotted paths.

use std::path::Path;

use anyhow::{bail, Context, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use smd_core::denoiser::{DenoiserConfig, SmdHeadConfig};
use smd_core::forward::{make_schedule, NoiseSchedule, SigmaMode};
use smd_core::gmm::{Gaussian, GaussianMixture};
use smd_core::metrics::Theorem1Config;
use smd_core::sampling::SampleRun;
use smd_core::training::TrainConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleSection {
    #[serde(rename = "T")]
    pub total: usize,
    pub beta_min: f64,
    pub beta_max: f64,
    pub sigma_mode: SigmaMode,
}

impl Default for ScheduleSection {
    fn default() -> Self {
        // the common 1000-step range, rescaled so ᾱ_T is small at T = 100
        Self { total: 100, beta_min: 1e-3, beta_max: 0.2, sigma_mode: SigmaMode::Beta }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataKind {
    #[default]
    Grid,
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub kind: DataKind,
    pub grid_size: usize,
    pub spacing: f64,
    pub component_std: f64,
    /// Custom mixtures only.
    pub weights: Option<Vec<f64>>,
    pub means: Option<Vec<Vec<f64>>>,
    pub covs: Option<Vec<Vec<Vec<f64>>>>,
}

impl Default for DataSection {
    fn default() -> Self {
        Self { kind: DataKind::Grid, grid_size: 7, spacing: 2.0, component_std: 0.1, weights: None, means: None, covs: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Vanilla,
    #[default]
    Smd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub hidden_dims: Vec<usize>,
    pub time_embed_dim: usize,
    pub latent_dim: usize,
    pub latent_hidden: Vec<usize>,
    pub hyper_hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        let head = SmdHeadConfig::default();
        Self {
            kind: ModelKind::Smd,
            hidden_dims: vec![128, 128, 128],
            time_embed_dim: 16,
            latent_dim: head.latent_dim,
            latent_hidden: head.latent_hidden,
            hyper_hidden: head.hyper_hidden,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    pub n_outer: usize,
    pub n_inner: usize,
}

impl Default for MetricsSection {
    fn default() -> Self {
        Self { n_outer: 100, n_inner: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TheoremSection {
    pub lambda_values: Vec<f64>,
    pub weights: Vec<f64>,
    pub delta: Vec<f64>,
    pub base_means: Vec<Vec<f64>>,
    pub t: usize,
    /// β table of the schedule the bound is evaluated on.
    pub betas: Vec<f64>,
    pub n_outer: usize,
    pub n_inner: usize,
}

impl Default for TheoremSection {
    fn default() -> Self {
        let c = Theorem1Config::default();
        Self {
            lambda_values: c.lambda_values,
            weights: c.weights,
            delta: c.delta,
            base_means: c.base_means,
            t: c.t,
            betas: vec![0.1],
            n_outer: 2000,
            n_inner: 256,
        }
    }
}

impl TheoremSection {
    pub fn construction(&self) -> Theorem1Config {
        Theorem1Config {
            lambda_values: self.lambda_values.clone(),
            weights: self.weights.clone(),
            delta: self.delta.clone(),
            base_means: self.base_means.clone(),
            t: self.t,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Seeds model initialization and metric estimation.
    pub seed: u64,
    pub schedule: ScheduleSection,
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub sample: SampleRun,
    pub metrics: MetricsSection,
    pub theorem: TheoremSection,
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

/// Apply `a.b.c=value`; the value is parsed as JSON, falling back to a string.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment.split_once('=').with_context(|| format!("override `{assignment}` is not key=value"))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        bail!("override path `{path}` has an empty segment");
    }
    let mut node = root;
    for key in &keys[..keys.len() - 1] {
        let obj = node.as_object_mut().with_context(|| format!("`{path}`: `{key}` is not inside an object"))?;
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = node.as_object_mut().with_context(|| format!("`{path}` does not name an object field"))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

impl ExperimentConfig {
    /// Defaults, then the file (if any), then overrides, then `seed`.
    pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<Self> {
        let mut root = serde_json::to_value(Self::default())?;
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let file_value: Value = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            if !file_value.is_object() {
                bail!("{}: config must be a JSON object", path.display());
            }
            // deserialize the raw file first so unknown keys are reported against it
            serde_json::from_value::<Self>(file_value.clone()).with_context(|| format!("invalid config {}", path.display()))?;
            merge(&mut root, file_value);
        }
        for o in overrides {
            apply_override(&mut root, o)?;
        }
        if let Some(s) = seed {
            for path in ["seed", "train.seed", "sample.seed"] {
                apply_override(&mut root, &format!("{path}={s}"))?;
            }
        }
        let cfg: Self = serde_json::from_value(root).context("invalid config")?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule_obj().context("schedule")?;
        self.data_mixture().context("data")?;
        self.train.validate().context("train")?;
        let m = &self.model;
        if m.hidden_dims.is_empty() || m.hidden_dims.contains(&0) {
            bail!("model.hidden_dims must be non-empty with positive widths");
        }
        if m.time_embed_dim == 0 || !m.time_embed_dim.is_multiple_of(2) {
            bail!("model.time_embed_dim must be even and positive");
        }
        if m.kind == ModelKind::Smd && (m.latent_dim == 0 || m.latent_hidden.contains(&0) || m.hyper_hidden.contains(&0)) {
            bail!("model latent and hypernetwork dims must be positive");
        }
        if self.sample.n == 0 {
            bail!("sample.n must be >= 1");
        }
        if let Some(t) = self.sample.t_used {
            if t == 0 || t > self.schedule.total {
                bail!("sample.t_used must lie in 1..={}", self.schedule.total);
            }
        }
        if self.metrics.n_outer < 2 || self.metrics.n_inner == 0 {
            bail!("metrics.n_outer must be >= 2 and metrics.n_inner >= 1");
        }
        Ok(())
    }

    pub fn schedule_obj(&self) -> Result<NoiseSchedule> {
        let s = &self.schedule;
        Ok(make_schedule(s.total, s.beta_min, s.beta_max, s.sigma_mode)?)
    }

    pub fn data_mixture(&self) -> Result<GaussianMixture> {
        let d = &self.data;
        match d.kind {
            DataKind::Grid => Ok(GaussianMixture::grid(d.grid_size, d.spacing, d.component_std)?),
            DataKind::Custom => {
                let means = d.means.as_ref().context("custom data needs `means`")?;
                let k = means.len();
                let weights = d.weights.clone().unwrap_or_else(|| vec![1.0 / k as f64; k]);
                let comps = match &d.covs {
                    Some(covs) => {
                        if covs.len() != k {
                            bail!("custom data has {k} means but {} covariances", covs.len());
                        }
                        means
                            .iter()
                            .zip(covs)
                            .map(|(m, c)| {
                                let dim = m.len();
                                if c.len() != dim || c.iter().any(|r| r.len() != dim) {
                                    bail!("covariance is not {dim}x{dim}");
                                }
                                let flat: Vec<f64> = c.iter().flatten().copied().collect();
                                Ok(Gaussian::new(DVector::from_vec(m.clone()), DMatrix::from_row_slice(dim, dim, &flat))?)
                            })
                            .collect::<Result<Vec<_>>>()?
                    }
                    None => means
                        .iter()
                        .map(|m| Ok(Gaussian::isotropic(DVector::from_vec(m.clone()), d.component_std.powi(2))?))
                        .collect::<Result<Vec<_>>>()?,
                };
                Ok(GaussianMixture::new(weights, comps)?)
            }
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let m = &self.model;
        Ok(DenoiserConfig {
            data_dim: self.data_mixture()?.dim(),
            hidden_dims: m.hidden_dims.clone(),
            time_embed_dim: m.time_embed_dim,
            total_steps: self.schedule.total,
            smd: (m.kind == ModelKind::Smd).then(|| SmdHeadConfig {
                latent_dim: m.latent_dim,
                latent_hidden: m.latent_hidden.clone(),
                hyper_hidden: m.hyper_hidden.clone(),
            }),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn overrides_parse_json_and_nest() {
        let mut v = serde_json::json!({"train": {"n_eta": 1}});
        apply_override(&mut v, "train.n_eta=5").unwrap();
        apply_override(&mut v, "schedule.sigma_mode=beta_tilde").unwrap();
        assert_eq!(v["train"]["n_eta"], 5);
        assert_eq!(v["schedule"]["sigma_mode"], "beta_tilde");
        assert!(apply_override(&mut v, "novalue").is_err());
        assert!(apply_override(&mut v, "train..x=1").is_err());
    }

    #[test]
    fn defaults_resolve_and_unknown_keys_fail() {
        let cfg = ExperimentConfig::resolve(None, &[], Some(4)).unwrap();
        assert_eq!(cfg.train.seed, 4);
        assert_eq!(cfg.data_mixture().unwrap().len(), 49);
        let err = ExperimentConfig::resolve(None, &["train.n_etta=2".into()], None).unwrap_err();
        assert!(format!("{err:#}").contains("n_etta"), "{err:#}");
        assert!(ExperimentConfig::resolve(None, &["train.lr=-1".into()], None).is_err());
    }

    #[test]
    fn custom_data_section() {
        let cfg = ExperimentConfig::resolve(
            None,
            &[
                "data.kind=custom".into(),
                "data.means=[[-1.0],[1.0]]".into(),
                "data.covs=[[[0.5]],[[0.25]]]".into(),
                "data.weights=[0.3,0.7]".into(),
            ],
            None,
        )
        .unwrap();
        let m = cfg.data_mixture().unwrap();
        assert_eq!(m.dim(), 1);
        assert_eq!(m.weights(), &[0.3, 0.7]);
    }
}
