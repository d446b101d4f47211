//! Noise-prediction heads: the plain `ε_θ(x_t, t)` network and the soft
//! mixture variant, where a latent `z = g_ξ(η, x_t, t)` drives per-unit
//! scale/shift modulation `f_φ(z, t)` of the base network.

use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forward::NoiseSchedule;
use crate::nn::{load_checkpoint, save_checkpoint, time_embedding, Activation, GradBuf, Mlp, MlpSpec, ParamStore, Tape};
use crate::rng::SmdRng;

pub const BASE_PREFIX: &str = "eps";
pub const LATENT_PREFIX: &str = "latent";
pub const HYPER_PREFIX: &str = "hyper";

fn default_hidden() -> Vec<usize> {
    vec![128, 128, 128]
}

fn default_time_embed() -> usize {
    16
}

fn default_latent_dim() -> usize {
    8
}

fn default_aux_hidden() -> Vec<usize> {
    vec![64, 64]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SmdHeadConfig {
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    #[serde(default = "default_aux_hidden")]
    pub latent_hidden: Vec<usize>,
    #[serde(default = "default_aux_hidden")]
    pub hyper_hidden: Vec<usize>,
}

impl Default for SmdHeadConfig {
    fn default() -> Self {
        Self { latent_dim: default_latent_dim(), latent_hidden: default_aux_hidden(), hyper_hidden: default_aux_hidden() }
    }
}

/// Architecture description; also the JSON sidecar written next to checkpoints.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub data_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_time_embed")]
    pub time_embed_dim: usize,
    /// Number of training timesteps; time embeddings are features of `t / T`.
    pub total_steps: usize,
    /// Present for the soft mixture model.
    #[serde(default)]
    pub smd: Option<SmdHeadConfig>,
}

impl DenoiserConfig {
    pub fn base_spec(&self) -> MlpSpec {
        MlpSpec {
            input_dim: self.data_dim + self.time_embed_dim,
            hidden_dims: self.hidden_dims.clone(),
            output_dim: self.data_dim,
            activation: Activation::Silu,
            time_embed_dim: self.time_embed_dim,
        }
    }
}

/// Time-embedding table for `t = 0..=T`.
#[derive(Debug, Clone)]
struct Embeddings(Vec<DVector<f64>>);

impl Embeddings {
    fn new(total: usize, dim: usize) -> Result<Self> {
        (0..=total).map(|t| time_embedding(t, total, dim)).collect::<Result<Vec<_>>>().map(Self)
    }

    fn get(&self, t: usize) -> Result<&DVector<f64>> {
        self.0.get(t).ok_or(Error::StepOutOfRange { t, max: self.0.len() - 1 })
    }

    /// Stack `[top; temb(t_j)]` column by column.
    fn stack(&self, top: &DMatrix<f64>, ts: &[usize]) -> Result<DMatrix<f64>> {
        if top.ncols() != ts.len() {
            return Err(Error::Shape(format!("{} columns but {} timesteps", top.ncols(), ts.len())));
        }
        let dim = self.0[0].len();
        let rows = top.nrows();
        let mut out = DMatrix::zeros(rows + dim, ts.len());
        for (j, &t) in ts.iter().enumerate() {
            out.view_mut((0, j), (rows, 1)).copy_from(&top.column(j));
            out.view_mut((rows, j), (dim, 1)).copy_from(self.get(t)?);
        }
        Ok(out)
    }
}

fn column(v: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(v.len(), 1, v.as_slice())
}

fn to_vector(m: &DMatrix<f64>) -> DVector<f64> {
    DVector::from_column_slice(m.as_slice())
}

#[derive(Debug, Clone)]
pub struct VanillaDenoiser {
    pub config: DenoiserConfig,
    pub net: Mlp,
    pub params: ParamStore,
    emb: Embeddings,
}

#[derive(Debug, Clone)]
pub struct SmdDenoiser {
    pub config: DenoiserConfig,
    pub latent_dim: usize,
    pub base: Mlp,
    pub latent_net: Mlp,
    pub hyper_net: Mlp,
    /// θ, ξ and φ under the `eps/`, `latent/` and `hyper/` prefixes.
    pub params: ParamStore,
    emb: Embeddings,
}

/// Cached passes for a batched soft mixture forward.
#[derive(Debug, Clone)]
pub struct SmdTape {
    latent: Tape,
    hyper: Tape,
    base: Tape,
}

impl VanillaDenoiser {
    /// Random init; with `zero_last` the output layer starts at zero.
    pub fn new(config: DenoiserConfig, rng: &mut SmdRng, zero_last: bool) -> Result<Self> {
        let net = Mlp::new(config.base_spec(), BASE_PREFIX)?;
        let mut params = ParamStore::new();
        net.init(&mut params, rng, zero_last)?;
        Self::from_params(config, params)
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        if config.smd.is_some() {
            return Err(Error::InvalidArgument("config describes a soft mixture model".into()));
        }
        let net = Mlp::new(config.base_spec(), BASE_PREFIX)?;
        let emb = Embeddings::new(config.total_steps, config.time_embed_dim)?;
        Ok(Self { config, net, params, emb })
    }

    pub fn dim(&self) -> usize {
        self.config.data_dim
    }

    /// Batched `ε_θ`: `x` is `D × B`, one timestep per column.
    pub fn eps_batch(&self, x: &DMatrix<f64>, ts: &[usize]) -> Result<(DMatrix<f64>, Tape)> {
        let input = self.emb.stack(x, ts)?;
        self.net.forward(&self.params, &input, None)
    }

    pub fn backward(&self, tape: &Tape, d_eps: &DMatrix<f64>, grads: &mut GradBuf) -> Result<()> {
        self.net.backward(&self.params, tape, d_eps, grads).map(|_| ())
    }
}

pub fn predict_eps_vanilla(d: &VanillaDenoiser, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    if x_t.len() != d.dim() {
        return Err(Error::DimensionMismatch { expected: d.dim(), got: x_t.len() });
    }
    Ok(to_vector(&d.eps_batch(&column(x_t), &[t])?.0))
}

impl SmdDenoiser {
    /// Random init of all three networks. The modulation network's output
    /// layer starts at zero, so the fresh model coincides with its base.
    pub fn new(config: DenoiserConfig, rng: &mut SmdRng) -> Result<Self> {
        let head = config
            .smd
            .clone()
            .ok_or_else(|| Error::InvalidArgument("soft mixture model needs an `smd` section".into()))?;
        let (base, latent_net, hyper_net) = Self::nets(&config, &head)?;
        let mut params = ParamStore::new();
        base.init(&mut params, rng, false)?;
        latent_net.init(&mut params, rng, false)?;
        hyper_net.init(&mut params, rng, true)?;
        Self::from_params(config, params)
    }

    fn nets(config: &DenoiserConfig, head: &SmdHeadConfig) -> Result<(Mlp, Mlp, Mlp)> {
        let base_spec = config.base_spec();
        let te = config.time_embed_dim;
        let latent_spec = MlpSpec {
            input_dim: head.latent_dim + config.data_dim + te,
            hidden_dims: head.latent_hidden.clone(),
            output_dim: head.latent_dim,
            activation: Activation::Silu,
            time_embed_dim: te,
        };
        let hyper_spec = MlpSpec {
            input_dim: head.latent_dim + te,
            hidden_dims: head.hyper_hidden.clone(),
            output_dim: base_spec.modulation_dim(),
            activation: Activation::Silu,
            time_embed_dim: te,
        };
        Ok((
            Mlp::new(base_spec, BASE_PREFIX)?,
            Mlp::new(latent_spec, LATENT_PREFIX)?,
            Mlp::new(hyper_spec, HYPER_PREFIX)?,
        ))
    }

    pub fn from_params(config: DenoiserConfig, params: ParamStore) -> Result<Self> {
        let head = config
            .smd
            .clone()
            .ok_or_else(|| Error::InvalidArgument("soft mixture model needs an `smd` section".into()))?;
        let (base, latent_net, hyper_net) = Self::nets(&config, &head)?;
        let emb = Embeddings::new(config.total_steps, config.time_embed_dim)?;
        Ok(Self { latent_dim: head.latent_dim, config, base, latent_net, hyper_net, params, emb })
    }

    pub fn dim(&self) -> usize {
        self.config.data_dim
    }

    /// The base network `ε_θ` alone, as a plain denoiser.
    pub fn base_denoiser(&self) -> Result<VanillaDenoiser> {
        let mut params = ParamStore::new();
        for name in self.params.names().filter(|n| n.starts_with(BASE_PREFIX)) {
            let p = self.params.get(name).expect("listed name");
            params.insert(name, p.shape.clone(), p.value.clone())?;
        }
        let config = DenoiserConfig { smd: None, ..self.config.clone() };
        VanillaDenoiser::from_params(config, params)
    }

    /// Set every `f_φ` parameter to zero, so modulation vanishes everywhere.
    pub fn zero_modulation(&mut self) {
        let names: Vec<String> = self.params.names().filter(|n| n.starts_with(HYPER_PREFIX)).map(String::from).collect();
        for n in names {
            self.params.value_mut(&n).expect("listed name").iter_mut().for_each(|v| *v = 0.0);
        }
    }

    pub fn latent_batch(&self, eta: &DMatrix<f64>, x: &DMatrix<f64>, ts: &[usize]) -> Result<(DMatrix<f64>, Tape)> {
        if eta.nrows() != self.latent_dim || eta.ncols() != x.ncols() {
            return Err(Error::Shape(format!("η must be {}×{}", self.latent_dim, x.ncols())));
        }
        let mut top = DMatrix::zeros(self.latent_dim + x.nrows(), x.ncols());
        top.rows_mut(0, self.latent_dim).copy_from(eta);
        top.rows_mut(self.latent_dim, x.nrows()).copy_from(x);
        let input = self.emb.stack(&top, ts)?;
        self.latent_net.forward(&self.params, &input, None)
    }

    /// Batched `ε_{θ ∪ f_φ(g_ξ(η, x_t, t), t)}(x_t, t)`.
    pub fn eps_batch(&self, x: &DMatrix<f64>, ts: &[usize], eta: &DMatrix<f64>) -> Result<(DMatrix<f64>, SmdTape)> {
        let (z, latent) = self.latent_batch(eta, x, ts)?;
        let (modulation, hyper) = self.hyper_net.forward(&self.params, &self.emb.stack(&z, ts)?, None)?;
        let (eps, base) = self.base.forward(&self.params, &self.emb.stack(x, ts)?, Some(&modulation))?;
        Ok((eps, SmdTape { latent, hyper, base }))
    }

    /// Gradients of `⟨ε̂, d_eps⟩` flow into θ, φ and ξ.
    pub fn backward(&self, tape: &SmdTape, d_eps: &DMatrix<f64>, grads: &mut GradBuf) -> Result<()> {
        let base = self.base.backward(&self.params, &tape.base, d_eps, grads)?;
        let d_mod = base.modulation.expect("base pass is always modulated");
        let hyper = self.hyper_net.backward(&self.params, &tape.hyper, &d_mod, grads)?;
        let d_z = hyper.input.rows(0, self.latent_dim).into_owned();
        self.latent_net.backward(&self.params, &tape.latent, &d_z, grads)?;
        Ok(())
    }
}

pub fn sample_latent(d: &SmdDenoiser, eta: &DVector<f64>, x_t: &DVector<f64>, t: usize) -> Result<DVector<f64>> {
    if eta.len() != d.latent_dim {
        return Err(Error::DimensionMismatch { expected: d.latent_dim, got: eta.len() });
    }
    Ok(to_vector(&d.latent_batch(&column(eta), &column(x_t), &[t])?.0))
}

pub fn predict_eps_smd(d: &SmdDenoiser, x_t: &DVector<f64>, t: usize, eta: &DVector<f64>) -> Result<DVector<f64>> {
    if x_t.len() != d.dim() {
        return Err(Error::DimensionMismatch { expected: d.dim(), got: x_t.len() });
    }
    if eta.len() != d.latent_dim {
        return Err(Error::DimensionMismatch { expected: d.latent_dim, got: eta.len() });
    }
    Ok(to_vector(&d.eps_batch(&column(x_t), &[t], &column(eta))?.0))
}

/// `(x_t - β_t/√(1-ᾱ_t) ε̂) / √α_t`.
pub fn mean_from_eps(x_t: &DVector<f64>, t: usize, eps_hat: &DVector<f64>, s: &NoiseSchedule) -> Result<DVector<f64>> {
    s.check_step(t)?;
    if x_t.len() != eps_hat.len() {
        return Err(Error::DimensionMismatch { expected: x_t.len(), got: eps_hat.len() });
    }
    let coef = s.beta(t) / (1.0 - s.alpha_bar(t)).sqrt();
    Ok((x_t - eps_hat * coef) / s.alpha(t).sqrt())
}

#[derive(Debug, Clone)]
pub enum Model {
    Vanilla(VanillaDenoiser),
    Smd(SmdDenoiser),
}

impl Model {
    pub fn new(config: DenoiserConfig, rng: &mut SmdRng) -> Result<Self> {
        if config.smd.is_some() {
            SmdDenoiser::new(config, rng).map(Model::Smd)
        } else {
            VanillaDenoiser::new(config, rng, false).map(Model::Vanilla)
        }
    }

    pub fn config(&self) -> &DenoiserConfig {
        match self {
            Model::Vanilla(d) => &d.config,
            Model::Smd(d) => &d.config,
        }
    }

    pub fn params(&self) -> &ParamStore {
        match self {
            Model::Vanilla(d) => &d.params,
            Model::Smd(d) => &d.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        match self {
            Model::Vanilla(d) => &mut d.params,
            Model::Smd(d) => &mut d.params,
        }
    }

    pub fn dim(&self) -> usize {
        self.config().data_dim
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Model::Vanilla(_) => "vanilla",
            Model::Smd(_) => "smd",
        }
    }

    pub fn sidecar_path(checkpoint: &Path) -> PathBuf {
        let mut s = checkpoint.as_os_str().to_owned();
        s.push(".json");
        PathBuf::from(s)
    }

    /// Binary parameters at `path`, architecture JSON at `path.json`.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_checkpoint(self.params(), path)?;
        std::fs::write(Self::sidecar_path(path), serde_json::to_string_pretty(self.config())?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let config: DenoiserConfig = serde_json::from_str(&std::fs::read_to_string(Self::sidecar_path(path))?)?;
        let params = load_checkpoint(path)?;
        let model = if config.smd.is_some() {
            Model::Smd(SmdDenoiser::from_params(config, params)?)
        } else {
            Model::Vanilla(VanillaDenoiser::from_params(config, params)?)
        };
        model.check_params()?;
        Ok(model)
    }

    fn check_params(&self) -> Result<()> {
        let mut rng = crate::rng::seeded(0);
        let fresh = Model::new(self.config().clone(), &mut rng)?;
        for name in fresh.params().names() {
            let want = &fresh.params().get(name).expect("listed").shape;
            match self.params().get(name) {
                Some(p) if &p.shape == want => {}
                Some(p) => return Err(Error::Checkpoint(format!("{name}: shape {:?}, expected {want:?}", p.shape))),
                None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            }
        }
        if fresh.params().len() != self.params().len() {
            return Err(Error::Checkpoint("checkpoint has extra parameters".into()));
        }
        Ok(())
    }
}
