//! Dense SiLU networks with hand-written reverse mode and Adam.
//!
//! Batches are matrices with one example per column. Hidden layers can be
//! modulated per example as `h ← h ⊙ (1 + scale) + shift` after the
//! activation; the modulation is passed as one flat matrix whose rows are
//! `[scale_1, shift_1, scale_2, shift_2, ...]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::SmdRng;

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Param {
    fn new(shape: Vec<usize>, value: Vec<f64>) -> Self {
        let n = value.len();
        Self { shape, value, grad: vec![0.0; n], m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// Named parameter arrays with gradients and Adam moments.
///
/// Every change to parameter values bumps `version`; tapes remember the
/// version they were recorded at so a backward pass against updated weights is
/// caught.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Param>,
    version: u64,
    adam_steps: u64,
}

/// Gradient accumulator aligned with a store's entry order, so workers can
/// accumulate without touching the store.
#[derive(Debug, Clone)]
pub struct GradBuf(pub Vec<Vec<f64>>);

impl GradBuf {
    pub fn add(&mut self, other: &GradBuf) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= k);
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != value.len() {
            return Err(Error::Shape(format!("{name}: shape {shape:?} holds {n} values, got {}", value.len())));
        }
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument(format!("duplicate parameter {name}")));
        }
        self.entries.insert(name.to_string(), Param::new(shape, value));
        self.version += 1;
        Ok(())
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn adam_steps(&self) -> u64 {
        self.adam_steps
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.entries.values().map(|p| p.value.len()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.entries.get(name)
    }

    pub fn index_of(&self, name: &str) -> Result<usize> {
        self.entries
            .get_index_of(name)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown parameter {name}")))
    }

    fn value_at(&self, idx: usize) -> &Param {
        &self.entries[idx]
    }

    /// Mutable access to values; bumps the version.
    pub fn value_mut(&mut self, name: &str) -> Option<&mut Vec<f64>> {
        self.version += 1;
        self.entries.get_mut(name).map(|p| &mut p.value)
    }

    pub fn zero_grad(&mut self) {
        for p in self.entries.values_mut() {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_buf(&self) -> GradBuf {
        GradBuf(self.entries.values().map(|p| vec![0.0; p.value.len()]).collect())
    }

    pub fn accumulate(&mut self, buf: &GradBuf) {
        for (p, g) in self.entries.values_mut().zip(&buf.0) {
            for (a, b) in p.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    pub fn flat_values(&self) -> Vec<f64> {
        self.entries.values().flat_map(|p| p.value.iter().copied()).collect()
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        self.entries.values().flat_map(|p| p.grad.iter().copied()).collect()
    }

    pub fn set_flat_values(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_values() {
            return Err(Error::DimensionMismatch { expected: self.num_values(), got: flat.len() });
        }
        let mut off = 0;
        for p in self.entries.values_mut() {
            let n = p.value.len();
            p.value.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        self.version += 1;
        Ok(())
    }

    /// Copy values of every entry whose name starts with `prefix` from `other`.
    pub fn copy_prefix_from(&mut self, other: &ParamStore, prefix: &str) -> Result<()> {
        for (name, p) in self.entries.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            let src = other.get(name).ok_or_else(|| Error::InvalidArgument(format!("missing {name}")))?;
            if src.shape != p.shape {
                return Err(Error::Shape(format!("{name}: {:?} vs {:?}", src.shape, p.shape)));
            }
            p.value.clone_from(&src.value);
        }
        self.version += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Bias-corrected Adam update using the store's accumulated gradients.
/// `step_index` is 1-based.
pub fn adam_step(params: &mut ParamStore, cfg: AdamConfig, step_index: u64) {
    let k = step_index.max(1) as i32;
    let c1 = 1.0 - cfg.beta1.powi(k);
    let c2 = 1.0 - cfg.beta2.powi(k);
    for p in params.entries.values_mut() {
        for i in 0..p.value.len() {
            let g = p.grad[i];
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            let mhat = p.m[i] / c1;
            let vhat = p.v[i] / c2;
            p.value[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    params.adam_steps = step_index;
    params.version += 1;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    #[serde(default)]
    pub activation: Activation,
    pub time_embed_dim: usize,
}

impl MlpSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.time_embed_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument(format!("all network dims must be >= 1: {self:?}")));
        }
        Ok(())
    }

    /// Rows of the flat modulation matrix: `2 × width` per hidden layer.
    pub fn modulation_dim(&self) -> usize {
        self.hidden_dims.iter().map(|w| 2 * w).sum()
    }

    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut prev = self.input_dim;
        for &w in self.hidden_dims.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((w, prev));
            prev = w;
        }
        dims
    }
}

fn silu(x: f64) -> f64 {
    x / (1.0 + (-x).exp())
}

fn silu_grad(x: f64) -> f64 {
    let s = 1.0 / (1.0 + (-x).exp());
    s * (1.0 + x * (1.0 - s))
}

/// Activations cached by a forward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    version: u64,
    /// Input to each affine layer (after modulation for hidden inputs).
    inputs: Vec<DMatrix<f64>>,
    /// Hidden pre-activations.
    pre: Vec<DMatrix<f64>>,
    /// Hidden activations before modulation.
    act: Vec<DMatrix<f64>>,
    modulation: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone)]
pub struct BackwardOutput {
    pub input: DMatrix<f64>,
    pub modulation: Option<DMatrix<f64>>,
}

/// A network whose parameters live in a shared [`ParamStore`] under
/// `{prefix}/l{i}/w` (shape `[out, in]`, row-major) and `{prefix}/l{i}/b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub prefix: String,
}

impl Mlp {
    pub fn new(spec: MlpSpec, prefix: &str) -> Result<Self> {
        spec.validate()?;
        Ok(Self { spec, prefix: prefix.to_string() })
    }

    fn w_name(&self, i: usize) -> String {
        format!("{}/l{i}/w", self.prefix)
    }

    fn b_name(&self, i: usize) -> String {
        format!("{}/l{i}/b", self.prefix)
    }

    /// LeCun-normal weights, zero biases. With `zero_last` the output layer
    /// starts at exactly zero.
    pub fn init(&self, store: &mut ParamStore, rng: &mut SmdRng, zero_last: bool) -> Result<()> {
        let dims = self.spec.layer_dims();
        let last = dims.len() - 1;
        for (i, &(out, inp)) in dims.iter().enumerate() {
            let w = if zero_last && i == last {
                vec![0.0; out * inp]
            } else {
                let normal = Normal::new(0.0, (1.0 / inp as f64).sqrt()).expect("positive std");
                (0..out * inp).map(|_| normal.sample(rng)).collect()
            };
            store.insert(&self.w_name(i), vec![out, inp], w)?;
            store.insert(&self.b_name(i), vec![out], vec![0.0; out])?;
        }
        Ok(())
    }

    fn layer(&self, store: &ParamStore, i: usize) -> Result<(usize, usize, DMatrix<f64>, DVector<f64>)> {
        let wi = store.index_of(&self.w_name(i))?;
        let bi = store.index_of(&self.b_name(i))?;
        let w = store.value_at(wi);
        let (out, inp) = (w.shape[0], w.shape[1]);
        Ok((
            wi,
            bi,
            DMatrix::from_row_slice(out, inp, &w.value),
            DVector::from_column_slice(&store.value_at(bi).value),
        ))
    }

    pub fn forward(
        &self,
        store: &ParamStore,
        input: &DMatrix<f64>,
        modulation: Option<&DMatrix<f64>>,
    ) -> Result<(DMatrix<f64>, Tape)> {
        if input.nrows() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "{}: input has {} rows, expected {}",
                self.prefix,
                input.nrows(),
                self.spec.input_dim
            )));
        }
        let batch = input.ncols();
        if let Some(m) = modulation {
            if m.nrows() != self.spec.modulation_dim() || m.ncols() != batch {
                return Err(Error::Shape(format!(
                    "{}: modulation is {}x{}, expected {}x{batch}",
                    self.prefix,
                    m.nrows(),
                    m.ncols(),
                    self.spec.modulation_dim()
                )));
            }
        }
        let n_hidden = self.spec.hidden_dims.len();
        let mut tape = Tape {
            version: store.version(),
            inputs: Vec::with_capacity(n_hidden + 1),
            pre: Vec::with_capacity(n_hidden),
            act: Vec::with_capacity(n_hidden),
            modulation: modulation.cloned(),
        };
        let mut h = input.clone();
        let mut off = 0;
        for i in 0..=n_hidden {
            let (_, _, w, b) = self.layer(store, i)?;
            let mut a = &w * &h;
            for mut col in a.column_iter_mut() {
                col += &b;
            }
            tape.inputs.push(h);
            if i == n_hidden {
                return Ok((a, tape));
            }
            let u = a.map(silu);
            let width = u.nrows();
            h = match modulation {
                Some(m) => {
                    let mut out = u.clone();
                    for c in 0..batch {
                        for r in 0..width {
                            out[(r, c)] = u[(r, c)] * (1.0 + m[(off + r, c)]) + m[(off + width + r, c)];
                        }
                    }
                    out
                }
                None => u.clone(),
            };
            off += 2 * width;
            tape.pre.push(a);
            tape.act.push(u);
        }
        unreachable!("loop returns at the output layer")
    }

    /// Backpropagate `d_out` (output_dim × batch) through a recorded pass,
    /// accumulating parameter gradients into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        d_out: &DMatrix<f64>,
        grads: &mut GradBuf,
    ) -> Result<BackwardOutput> {
        if tape.version != store.version() {
            return Err(Error::StaleTape { recorded: tape.version, current: store.version() });
        }
        let n_hidden = self.spec.hidden_dims.len();
        let batch = tape.inputs[0].ncols();
        if d_out.nrows() != self.spec.output_dim || d_out.ncols() != batch {
            return Err(Error::Shape(format!("{}: output gradient has wrong shape", self.prefix)));
        }
        let mut d_mod = tape.modulation.as_ref().map(|m| DMatrix::zeros(m.nrows(), m.ncols()));
        let mut offsets = Vec::with_capacity(n_hidden);
        let mut off = 0;
        for w in &self.spec.hidden_dims {
            offsets.push(off);
            off += 2 * w;
        }

        let mut d_a = d_out.clone();
        for i in (0..=n_hidden).rev() {
            let (wi, bi, w, _) = self.layer(store, i)?;
            let dw = &d_a * tape.inputs[i].transpose();
            // dw is column-major; the store is row-major
            let gw = &mut grads.0[wi];
            let cols = dw.ncols();
            for r in 0..dw.nrows() {
                for c in 0..cols {
                    gw[r * cols + c] += dw[(r, c)];
                }
            }
            let gb = &mut grads.0[bi];
            for (r, g) in gb.iter_mut().enumerate() {
                *g += d_a.row(r).sum();
            }
            let d_h = w.transpose() * &d_a;
            if i == 0 {
                return Ok(BackwardOutput { input: d_h, modulation: d_mod });
            }
            let l = i - 1;
            let (pre, act) = (&tape.pre[l], &tape.act[l]);
            let width = pre.nrows();
            let mut d_u = d_h;
            if let (Some(m), Some(dm)) = (tape.modulation.as_ref(), d_mod.as_mut()) {
                let o = offsets[l];
                for c in 0..batch {
                    for r in 0..width {
                        let g = d_u[(r, c)];
                        dm[(o + width + r, c)] = g;
                        dm[(o + r, c)] = g * act[(r, c)];
                        d_u[(r, c)] = g * (1.0 + m[(o + r, c)]);
                    }
                }
            }
            d_a = d_u.zip_map(pre, |g, x| g * silu_grad(x));
        }
        unreachable!("loop returns at the input layer")
    }

    /// Single-example convenience wrapper around [`Mlp::forward`].
    pub fn forward_vec(
        &self,
        store: &ParamStore,
        input: &DVector<f64>,
        modulation: Option<&DVector<f64>>,
    ) -> Result<(DVector<f64>, Tape)> {
        let x = DMatrix::from_column_slice(input.len(), 1, input.as_slice());
        let m = modulation.map(|m| DMatrix::from_column_slice(m.len(), 1, m.as_slice()));
        let (out, tape) = self.forward(store, &x, m.as_ref())?;
        Ok((DVector::from_column_slice(out.as_slice()), tape))
    }
}

/// Sinusoidal features of `t/T`: `[sin(ω_i t/T)..., cos(ω_i t/T)...]` with
/// `ω_i = 1000^{i/(half-1)}`.
pub fn time_embedding(t: usize, total: usize, dim: usize) -> Result<DVector<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::InvalidArgument(format!("time embedding dim must be even and positive, got {dim}")));
    }
    if total == 0 {
        return Err(Error::InvalidArgument("time embedding needs T >= 1".into()));
    }
    let half = dim / 2;
    let u = t as f64 / total as f64;
    let mut e = DVector::zeros(dim);
    for i in 0..half {
        let w = if half == 1 { 1.0 } else { 1000f64.powf(i as f64 / (half - 1) as f64) };
        e[i] = (w * u).sin();
        e[half + i] = (w * u).cos();
    }
    Ok(e)
}

const MAGIC: &[u8; 4] = b"SMD1";
const FORMAT_VERSION: u32 = 1;
const ADAM_STEP_KEY: &str = "opt/step";

fn write_entry(w: &mut impl Write, name: &str, shape: &[usize], data: &[f64]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(shape.len() as u32).to_le_bytes())?;
    for &d in shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for x in data {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

/// Write parameters (and Adam state as `opt/m/*`, `opt/v/*`, `opt/step`
/// entries) in the binary checkpoint format.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    for (name, p) in &store.entries {
        write_entry(&mut w, name, &p.shape, &p.value)?;
    }
    for (name, p) in &store.entries {
        write_entry(&mut w, &format!("opt/m/{name}"), &p.shape, &p.m)?;
        write_entry(&mut w, &format!("opt/v/{name}"), &p.shape, &p.v)?;
    }
    write_entry(&mut w, ADAM_STEP_KEY, &[], &[store.adam_steps as f64])?;
    w.flush()?;
    Ok(())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let mut store = ParamStore::new();
    let mut moments: Vec<(String, Vec<f64>)> = Vec::new();
    loop {
        let name_len = match read_u32(&mut r) {
            Ok(n) => n as usize,
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let rank = read_u32(&mut r)? as usize;
        let shape = (0..rank).map(|_| read_u32(&mut r).map(|d| d as usize)).collect::<std::io::Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        r.read_exact(&mut bytes)?;
        let data: Vec<f64> = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if name == ADAM_STEP_KEY {
            store.adam_steps = data[0] as u64;
        } else if name.starts_with("opt/") {
            moments.push((name, data));
        } else {
            store.insert(&name, shape, data)?;
        }
    }
    for (name, data) in moments {
        let (slot, target) = if let Some(t) = name.strip_prefix("opt/m/") {
            (0, t)
        } else if let Some(t) = name.strip_prefix("opt/v/") {
            (1, t)
        } else {
            return Err(Error::Checkpoint(format!("unknown optimizer entry {name}")));
        };
        let p = store
            .entries
            .get_mut(target)
            .ok_or_else(|| Error::Checkpoint(format!("optimizer state for missing parameter {target}")))?;
        if p.value.len() != data.len() {
            return Err(Error::Checkpoint(format!("optimizer state size mismatch for {target}")));
        }
        if slot == 0 {
            p.m = data;
        } else {
            p.v = data;
        }
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn spec(inp: usize, hidden: &[usize], out: usize) -> MlpSpec {
        MlpSpec { input_dim: inp, hidden_dims: hidden.to_vec(), output_dim: out, activation: Activation::Silu, time_embed_dim: 2 }
    }

    fn net(inp: usize, hidden: &[usize], out: usize, seed: u64) -> (Mlp, ParamStore) {
        let mlp = Mlp::new(spec(inp, hidden, out), "net").unwrap();
        let mut store = ParamStore::new();
        mlp.init(&mut store, &mut seeded(seed), false).unwrap();
        (mlp, store)
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let (mlp, mut store) = net(3, &[4, 4], 2, 1);
        let n = store.num_values();
        store.set_flat_values(&vec![0.0; n]).unwrap();
        let m = DVector::zeros(16);
        let (out, _) = mlp.forward_vec(&store, &DVector::from_element(3, 0.7), Some(&m)).unwrap();
        assert!(out.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_modulation_is_identity() {
        let (mlp, store) = net(3, &[5, 6], 2, 2);
        let x = DMatrix::from_fn(3, 4, |r, c| (r as f64 - c as f64) * 0.3);
        let (a, _) = mlp.forward(&store, &x, None).unwrap();
        let (b, _) = mlp.forward(&store, &x, Some(&DMatrix::zeros(22, 4))).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn forward_matches_straight_line_evaluation() {
        let (mlp, store) = net(2, &[7, 5], 3, 3);
        for k in 0..10 {
            let x = [0.3 * k as f64 - 1.0, 0.8 - 0.1 * k as f64];
            // independent scalar loops over the row-major tables
            let mut h = x.to_vec();
            for i in 0..3 {
                let w = &store.get(&format!("net/l{i}/w")).unwrap();
                let b = &store.get(&format!("net/l{i}/b")).unwrap().value;
                let (out, inp) = (w.shape[0], w.shape[1]);
                let mut next = vec![0.0; out];
                for r in 0..out {
                    let s = b[r] + w.value[r * inp..(r + 1) * inp].iter().zip(&h).map(|(a, x)| a * x).sum::<f64>();
                    next[r] = if i < 2 { s / (1.0 + (-s).exp()) } else { s };
                }
                h = next;
            }
            let (got, _) = mlp.forward_vec(&store, &DVector::from_column_slice(&x), None).unwrap();
            for r in 0..3 {
                assert!((got[r] - h[r]).abs() <= 1e-12 * h[r].abs().max(1e-3));
            }
        }
    }

    fn loss(mlp: &Mlp, store: &ParamStore, x: &DMatrix<f64>, m: &DMatrix<f64>, g: &DMatrix<f64>) -> f64 {
        let (out, _) = mlp.forward(store, x, Some(m)).unwrap();
        out.component_mul(g).sum()
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
    }

    #[test]
    fn gradients_match_finite_differences() {
        let (mlp, mut store) = net(2, &[16, 16], 2, 4);
        let x = DMatrix::from_fn(2, 3, |r, c| 0.5 * r as f64 - 0.4 * c as f64 + 0.1);
        let m = DMatrix::from_fn(64, 3, |r, c| ((r * 7 + c * 3) % 11) as f64 * 0.05 - 0.25);
        let g = DMatrix::from_fn(2, 3, |r, c| 1.0 - 0.3 * r as f64 + 0.2 * c as f64);
        let (_, tape) = mlp.forward(&store, &x, Some(&m)).unwrap();
        let mut grads = store.grad_buf();
        let back = mlp.backward(&store, &tape, &g, &mut grads).unwrap();
        let analytic: Vec<f64> = grads.0.concat();
        let base = store.flat_values();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..base.len() {
            let mut p = base.clone();
            p[i] += h;
            store.set_flat_values(&p).unwrap();
            let up = loss(&mlp, &store, &x, &m, &g);
            p[i] -= 2.0 * h;
            store.set_flat_values(&p).unwrap();
            let down = loss(&mlp, &store, &x, &m, &g);
            worst = worst.max(rel((up - down) / (2.0 * h), analytic[i]));
        }
        store.set_flat_values(&base).unwrap();
        assert!(worst < 1e-5, "param grad rel err {worst}");

        let dm = back.modulation.unwrap();
        for r in 0..m.nrows() {
            for c in 0..m.ncols() {
                let mut mp = m.clone();
                mp[(r, c)] += h;
                let up = loss(&mlp, &store, &x, &mp, &g);
                mp[(r, c)] -= 2.0 * h;
                let down = loss(&mlp, &store, &x, &mp, &g);
                assert!(rel((up - down) / (2.0 * h), dm[(r, c)]) < 1e-5);
            }
        }
        for r in 0..2 {
            for c in 0..3 {
                let mut xp = x.clone();
                xp[(r, c)] += h;
                let up = loss(&mlp, &store, &xp, &m, &g);
                xp[(r, c)] -= 2.0 * h;
                let down = loss(&mlp, &store, &xp, &m, &g);
                assert!(rel((up - down) / (2.0 * h), back.input[(r, c)]) < 1e-5);
            }
        }
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let (mlp, store) = net(2, &[4], 2, 5);
        let x = DMatrix::from_element(2, 2, 0.5);
        let (_, tape) = mlp.forward(&store, &x, None).unwrap();
        let mut grads = store.grad_buf();
        let back = mlp.backward(&store, &tape, &DMatrix::zeros(2, 2), &mut grads).unwrap();
        assert!(grads.0.iter().flatten().all(|g| *g == 0.0));
        assert!(back.input.iter().all(|g| *g == 0.0));
    }

    #[test]
    fn stale_tape_is_rejected() {
        let (mlp, mut store) = net(2, &[4], 2, 6);
        let x = DMatrix::from_element(2, 1, 0.5);
        let (_, tape) = mlp.forward(&store, &x, None).unwrap();
        adam_step(&mut store, AdamConfig::with_lr(0.1), 1);
        let mut grads = store.grad_buf();
        assert!(matches!(
            mlp.backward(&store, &tape, &DMatrix::zeros(2, 1), &mut grads),
            Err(Error::StaleTape { .. })
        ));
    }

    #[test]
    fn shape_errors() {
        let (mlp, store) = net(2, &[4], 2, 7);
        assert!(mlp.forward(&store, &DMatrix::zeros(3, 1), None).is_err());
        assert!(mlp.forward(&store, &DMatrix::zeros(2, 1), Some(&DMatrix::zeros(7, 1))).is_err());
        assert!(Mlp::new(spec(0, &[4], 2), "x").is_err());
    }

    #[test]
    fn adam_behaviour() {
        let mut store = ParamStore::new();
        store.insert("p", vec![1], vec![1.0]).unwrap();
        adam_step(&mut store, AdamConfig::with_lr(0.1), 1);
        assert_eq!(store.get("p").unwrap().value[0], 1.0);

        store.entries[0].grad[0] = 1.0;
        adam_step(&mut store, AdamConfig::with_lr(0.1), 1);
        // hand-computed: m̂ = v̂ = 1, Δ = -0.1/(1+1e-8)
        assert!((store.get("p").unwrap().value[0] - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);

        let mut bowl = ParamStore::new();
        bowl.insert("x", vec![2], vec![3.0, -2.0]).unwrap();
        for k in 1..=500 {
            bowl.zero_grad();
            let v = bowl.get("x").unwrap().value.clone();
            bowl.entries[0].grad = vec![2.0 * (v[0] - 1.0), 2.0 * (v[1] + 0.5)];
            adam_step(&mut bowl, AdamConfig::with_lr(0.1), k as u64);
        }
        let v = &bowl.get("x").unwrap().value;
        assert!((v[0] - 1.0).abs() < 1e-6 && (v[1] + 0.5).abs() < 1e-6, "{v:?}");
    }

    #[test]
    fn time_embedding_properties() {
        let e = time_embedding(0, 100, 8).unwrap();
        assert!(e.rows(0, 4).iter().all(|v| *v == 0.0));
        assert!(e.rows(4, 4).iter().all(|v| *v == 1.0));
        assert!(time_embedding(3, 100, 7).is_err());
        let embs: Vec<_> = (1..=100).map(|t| time_embedding(t, 100, 16).unwrap()).collect();
        for (i, a) in embs.iter().enumerate() {
            assert!((a.norm() - 8f64.sqrt()).abs() < 1e-9);
            for b in &embs[i + 1..] {
                assert!((a - b).norm() > 0.0);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let (mlp, mut store) = net(3, &[5], 2, 8);
        let x = DMatrix::from_element(3, 2, 0.25);
        let (_, tape) = mlp.forward(&store, &x, None).unwrap();
        let mut grads = store.grad_buf();
        mlp.backward(&store, &tape, &DMatrix::from_element(2, 2, 1.0), &mut grads).unwrap();
        store.accumulate(&grads);
        adam_step(&mut store, AdamConfig::with_lr(1e-3), 1);
        let dir = std::env::temp_dir().join(format!("smd-ckpt-{}", std::process::id()));
        save_checkpoint(&store, &dir).unwrap();
        let loaded = load_checkpoint(&dir).unwrap();
        std::fs::remove_file(&dir).ok();
        assert_eq!(loaded.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
        for (a, b) in loaded.entries.values().zip(store.entries.values()) {
            assert_eq!(a.shape, b.shape);
            assert!(a.value.iter().zip(&b.value).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.m.iter().zip(&b.m).all(|(x, y)| x.to_bits() == y.to_bits()));
            assert!(a.v.iter().zip(&b.v).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(loaded.adam_steps(), 1);
    }
}
