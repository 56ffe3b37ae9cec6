//! Gaussian MLP policy and value function with hand-written backpropagation.
//!
//! Both networks read observations through a running mean/std normalizer.
//! Batches are matrices with one column per sample.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::charmodel::SignedPermutation;
use crate::error::{Error, Result};

pub const LOG_STD_MIN: f64 = -5.0;
pub const LOG_STD_MAX: f64 = 2.0;
const NORMALIZED_CLIP: f64 = 10.0;
const LN_2PI: f64 = 1.837_877_066_409_345_3;
const MAGIC: &[u8; 5] = b"GFPK1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyConfig {
    pub hidden: Vec<usize>,
    pub init_log_std: f64,
    pub hidden_gain: f64,
    /// Init gain of the mean output layer.
    pub output_gain: f64,
    pub value_output_gain: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        Self {
            hidden: vec![64, 64, 64],
            init_log_std: -1.6,
            hidden_gain: 1.0,
            output_gain: 1.0,
            value_output_gain: 1.0,
        }
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            w: DMatrix::zeros(outputs, inputs),
            b: DVector::zeros(outputs),
        }
    }

    fn orthogonal(inputs: usize, outputs: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let (r, c) = if outputs >= inputs {
            (outputs, inputs)
        } else {
            (inputs, outputs)
        };
        let a = DMatrix::from_fn(r, c, |_, _| rng.sample::<f64, _>(StandardNormal));
        let qr = a.qr();
        let mut q = qr.q();
        let rdiag = qr.r().diagonal();
        for (j, d) in rdiag.iter().enumerate() {
            if *d < 0.0 {
                q.column_mut(j).neg_mut();
            }
        }
        let w = if outputs >= inputs { q } else { q.transpose() };
        Self {
            w: w * gain,
            b: DVector::zeros(outputs),
        }
    }

    fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        let mut z = &self.w * x;
        for mut col in z.column_iter_mut() {
            col += &self.b;
        }
        z
    }
}

/// Multilayer perceptron with tanh hidden units and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn zeros(sizes: &[usize]) -> Self {
        Self {
            layers: sizes.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn orthogonal(sizes: &[usize], hidden_gain: f64, output_gain: f64, rng: &mut impl Rng) -> Self {
        let n = sizes.len() - 1;
        Self {
            layers: sizes
                .windows(2)
                .enumerate()
                .map(|(k, w)| {
                    let gain = if k + 1 == n { output_gain } else { hidden_gain };
                    Dense::orthogonal(w[0], w[1], gain, rng)
                })
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].w.nrows()
    }

    pub fn forward(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        self.forward_cached(x).0
    }

    /// Output and the input of every layer (post-activation).
    pub fn forward_cached(&self, x: &DMatrix<f64>) -> (DMatrix<f64>, Vec<DMatrix<f64>>) {
        let mut acts = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut z = layer.apply(&h);
            if k != last {
                z.apply(|v| *v = v.tanh());
            }
            acts.push(h);
            h = z;
        }
        (h, acts)
    }

    /// Parameter gradients given the upstream gradient on the output.
    pub fn backward(&self, acts: &[DMatrix<f64>], dout: DMatrix<f64>) -> Vec<Dense> {
        let mut grads = vec![];
        let mut d = dout;
        for k in (0..self.layers.len()).rev() {
            let a = &acts[k];
            let dw = &d * a.transpose();
            let db = d.column_sum();
            grads.push(Dense { w: dw, b: db });
            if k > 0 {
                let mut da = self.layers[k].w.transpose() * &d;
                da.zip_apply(a, |g, h| *g *= 1.0 - h * h);
                d = da;
            }
        }
        grads.reverse();
        grads
    }
}

/// Running observation statistics (parallel Welford).
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub count: f64,
    pub mean: DVector<f64>,
    /// Sum of squared deviations.
    pub m2: DVector<f64>,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0.0,
            mean: DVector::zeros(dim),
            m2: DVector::zeros(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn std(&self) -> DVector<f64> {
        if self.count < 2.0 {
            return DVector::from_element(self.dim(), 1.0);
        }
        self.m2.map(|m| (m / self.count).sqrt().max(1e-4))
    }

    /// Adds the columns of `batch`.
    pub fn update(&mut self, batch: &DMatrix<f64>) {
        let n = batch.ncols() as f64;
        if n == 0.0 {
            return;
        }
        let bmean = batch.column_mean();
        let mut bm2 = DVector::zeros(self.dim());
        for col in batch.column_iter() {
            let d = col - &bmean;
            bm2 += d.component_mul(&d);
        }
        let total = self.count + n;
        let delta = &bmean - &self.mean;
        self.mean += &delta * (n / total);
        self.m2 += bm2 + delta.component_mul(&delta) * (self.count * n / total);
        self.count = total;
    }

    /// Adds every column together with its mirrored copy.
    pub fn update_symmetric(&mut self, batch: &DMatrix<f64>, mirror: &SignedPermutation) {
        let mut both = DMatrix::zeros(batch.nrows(), 2 * batch.ncols());
        for (j, col) in batch.column_iter().enumerate() {
            both.set_column(2 * j, &col);
            for i in 0..col.len() {
                both[(i, 2 * j + 1)] = mirror.sign(i) * col[mirror.target(i)];
            }
        }
        self.update(&both);
    }

    pub fn normalize(&self, batch: &DMatrix<f64>) -> DMatrix<f64> {
        let std = self.std();
        let mut out = batch.clone();
        for mut col in out.column_iter_mut() {
            for i in 0..col.len() {
                col[i] = ((col[i] - self.mean[i]) / std[i]).clamp(-NORMALIZED_CLIP, NORMALIZED_CLIP);
            }
        }
        out
    }
}

/// Policy mean network, exploration log-std and value network.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub mean: Mlp,
    pub log_std: DVector<f64>,
    pub value: Mlp,
    pub normalizer: Normalizer,
}

/// Gradient with the same layout as [`PolicyParams`] (normalizer excluded).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradient {
    pub mean: Vec<Dense>,
    pub log_std: DVector<f64>,
    pub value: Vec<Dense>,
}

/// Upstream gradients of a scalar loss with respect to the network outputs.
#[derive(Debug, Clone, Default)]
pub struct OutputGradient {
    /// `act_dim × B`.
    pub mean: Option<DMatrix<f64>>,
    pub log_std: Option<DVector<f64>>,
    /// `1 × B`.
    pub value: Option<DMatrix<f64>>,
}

fn layers_flat(layers: &[Dense], out: &mut Vec<f64>) {
    for l in layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
}

fn layers_set(layers: &mut [Dense], v: &[f64], mut at: usize) -> usize {
    for l in layers {
        let n = l.w.len();
        l.w.as_mut_slice().copy_from_slice(&v[at..at + n]);
        at += n;
        let n = l.b.len();
        l.b.as_mut_slice().copy_from_slice(&v[at..at + n]);
        at += n;
    }
    at
}

impl PolicyParams {
    pub fn new(obs_dim: usize, act_dim: usize, config: &PolicyConfig, rng: &mut impl Rng) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(&config.hidden);
        sizes.push(act_dim);
        let mean = Mlp::orthogonal(&sizes, config.hidden_gain, config.output_gain, rng);
        *sizes.last_mut().unwrap() = 1;
        let value = Mlp::orthogonal(&sizes, config.hidden_gain, config.value_output_gain, rng);
        Self {
            mean,
            log_std: DVector::from_element(act_dim, config.init_log_std),
            value,
            normalizer: Normalizer::new(obs_dim),
        }
    }

    /// All-zero networks.
    pub fn zeros(obs_dim: usize, act_dim: usize, hidden: &[usize]) -> Self {
        let mut sizes = vec![obs_dim];
        sizes.extend(hidden);
        sizes.push(act_dim);
        let mean = Mlp::zeros(&sizes);
        *sizes.last_mut().unwrap() = 1;
        Self {
            mean,
            log_std: DVector::zeros(act_dim),
            value: Mlp::zeros(&sizes),
            normalizer: Normalizer::new(obs_dim),
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.mean.input_dim()
    }

    pub fn act_dim(&self) -> usize {
        self.mean.output_dim()
    }

    pub fn clamp_log_std(&mut self) {
        self.log_std.apply(|v| *v = v.clamp(LOG_STD_MIN, LOG_STD_MAX));
    }

    /// Trainable parameters as one vector (mean net, log-std, value net).
    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        layers_flat(&self.mean.layers, &mut v);
        v.extend(self.log_std.iter());
        layers_flat(&self.value.layers, &mut v);
        v
    }

    pub fn set_flat(&mut self, v: &[f64]) {
        let mut at = layers_set(&mut self.mean.layers, v, 0);
        let n = self.log_std.len();
        self.log_std.as_mut_slice().copy_from_slice(&v[at..at + n]);
        at += n;
        at = layers_set(&mut self.value.layers, v, at);
        debug_assert_eq!(at, v.len());
    }

    pub fn batch_mean(&self, obs: &DMatrix<f64>) -> DMatrix<f64> {
        self.mean.forward(&self.normalizer.normalize(obs))
    }

    pub fn batch_value(&self, obs: &DMatrix<f64>) -> DVector<f64> {
        let v = self.value.forward(&self.normalizer.normalize(obs));
        DVector::from_row_slice(v.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read_from(&mut f)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        fn u32le(w: &mut impl Write, v: usize) -> std::io::Result<()> {
            w.write_all(&(v as u32).to_le_bytes())
        }
        fn f64s<'a>(w: &mut impl Write, v: impl Iterator<Item = &'a f64>) -> std::io::Result<()> {
            for x in v {
                w.write_all(&x.to_le_bytes())?;
            }
            Ok(())
        }
        fn mlp(w: &mut impl Write, m: &Mlp) -> std::io::Result<()> {
            u32le(w, m.layers.len())?;
            for l in &m.layers {
                u32le(w, l.w.nrows())?;
                u32le(w, l.w.ncols())?;
                // row-major
                f64s(w, l.w.transpose().iter())?;
                f64s(w, l.b.iter())?;
            }
            Ok(())
        }
        w.write_all(MAGIC)?;
        mlp(w, &self.mean)?;
        u32le(w, self.log_std.len())?;
        f64s(w, self.log_std.iter())?;
        mlp(w, &self.value)?;
        u32le(w, self.normalizer.dim())?;
        f64s(w, std::iter::once(&self.normalizer.count))?;
        f64s(w, self.normalizer.mean.iter())?;
        f64s(w, self.normalizer.m2.iter())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        fn bad(msg: &str) -> Error {
            Error::Parse(format!("checkpoint: {msg}"))
        }
        fn u32le(r: &mut impl Read) -> Result<usize> {
            let mut b = [0u8; 4];
            r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(b) as usize)
        }
        fn f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
            if n > 1 << 28 {
                return Err(bad("implausible array length"));
            }
            let mut out = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                r.read_exact(&mut b).map_err(|_| bad("truncated"))?;
                out.push(f64::from_le_bytes(b));
            }
            Ok(out)
        }
        fn mlp(r: &mut impl Read) -> Result<Mlp> {
            let n = u32le(r)?;
            if n == 0 || n > 64 {
                return Err(bad("bad layer count"));
            }
            let mut layers = Vec::with_capacity(n);
            for _ in 0..n {
                let rows = u32le(r)?;
                let cols = u32le(r)?;
                let w = DMatrix::from_row_slice(rows, cols, &f64s(r, rows * cols)?);
                let b = DVector::from_vec(f64s(r, rows)?);
                layers.push(Dense { w, b });
            }
            for pair in layers.windows(2) {
                if pair[0].w.nrows() != pair[1].w.ncols() {
                    return Err(bad("layer shapes do not chain"));
                }
            }
            Ok(Mlp { layers })
        }
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let mean = mlp(r)?;
        let n = u32le(r)?;
        let log_std = DVector::from_vec(f64s(r, n)?);
        let value = mlp(r)?;
        let dim = u32le(r)?;
        let count = f64s(r, 1)?[0];
        let nmean = DVector::from_vec(f64s(r, dim)?);
        let m2 = DVector::from_vec(f64s(r, dim)?);
        if mean.output_dim() != log_std.len()
            || mean.input_dim() != dim
            || value.input_dim() != dim
            || value.output_dim() != 1
        {
            return Err(bad("inconsistent dimensions"));
        }
        Ok(Self {
            mean,
            log_std,
            value,
            normalizer: Normalizer {
                count,
                mean: nmean,
                m2,
            },
        })
    }
}

impl ParamGradient {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        let zero = |m: &Mlp| -> Vec<Dense> {
            m.layers
                .iter()
                .map(|l| Dense::zeros(l.w.ncols(), l.w.nrows()))
                .collect()
        };
        Self {
            mean: zero(&params.mean),
            log_std: DVector::zeros(params.log_std.len()),
            value: zero(&params.value),
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        let mut v = Vec::new();
        layers_flat(&self.mean, &mut v);
        v.extend(self.log_std.iter());
        layers_flat(&self.value, &mut v);
        v
    }

    pub fn add_assign(&mut self, o: &ParamGradient) {
        for (a, b) in self.mean.iter_mut().zip(&o.mean).chain(self.value.iter_mut().zip(&o.value)) {
            a.w += &b.w;
            a.b += &b.b;
        }
        self.log_std += &o.log_std;
    }
}

fn column(obs: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(obs.len(), 1, obs)
}

fn check_obs(params: &PolicyParams, n: usize) -> Result<()> {
    if n != params.obs_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.obs_dim(),
            got: n,
        });
    }
    Ok(())
}

pub fn mean_action(params: &PolicyParams, obs: &[f64]) -> Result<Vec<f64>> {
    check_obs(params, obs.len())?;
    Ok(params.batch_mean(&column(obs)).as_slice().to_vec())
}

pub fn value(params: &PolicyParams, obs: &[f64]) -> Result<f64> {
    check_obs(params, obs.len())?;
    Ok(params.batch_value(&column(obs))[0])
}

/// Diagonal Gaussian log density of `act` given the mean.
pub fn gaussian_log_prob(mean: &[f64], log_std: &[f64], act: &[f64]) -> f64 {
    mean.iter()
        .zip(log_std)
        .zip(act)
        .map(|((m, ls), a)| {
            let z = (a - m) / ls.exp();
            -0.5 * z * z - ls - 0.5 * LN_2PI
        })
        .sum()
}

pub fn log_prob(params: &PolicyParams, obs: &[f64], act: &[f64]) -> Result<f64> {
    let mean = mean_action(params, obs)?;
    if act.len() != mean.len() {
        return Err(Error::DimensionMismatch {
            expected: mean.len(),
            got: act.len(),
        });
    }
    Ok(gaussian_log_prob(&mean, params.log_std.as_slice(), act))
}

/// Derivatives of the log density with respect to the mean and the log-std.
pub fn log_prob_gradients(mean: &[f64], log_std: &[f64], act: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut dm = Vec::with_capacity(mean.len());
    let mut ds = Vec::with_capacity(mean.len());
    for ((m, ls), a) in mean.iter().zip(log_std).zip(act) {
        let sigma = ls.exp();
        let z = (a - m) / sigma;
        dm.push(z / sigma);
        ds.push(z * z - 1.0);
    }
    (dm, ds)
}

/// Draws `mean + exp(log_std) * eps` and returns it with its log density.
pub fn sample_action(params: &PolicyParams, obs: &[f64], rng: &mut impl Rng) -> Result<(Vec<f64>, f64)> {
    let mean = mean_action(params, obs)?;
    let act: Vec<f64> = mean
        .iter()
        .zip(params.log_std.iter())
        .map(|(m, ls)| m + ls.exp() * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = gaussian_log_prob(&mean, params.log_std.as_slice(), &act);
    Ok((act, lp))
}

/// Parameter gradient of a loss whose output gradients are `upstream`.
///
/// `obs` holds raw observations, one column per sample.
pub fn backward(params: &PolicyParams, obs: &DMatrix<f64>, upstream: &OutputGradient) -> Result<ParamGradient> {
    check_obs(params, obs.nrows())?;
    let b = obs.ncols();
    let mut grad = ParamGradient::zeros_like(params);
    let x = params.normalizer.normalize(obs);
    if let Some(dm) = &upstream.mean {
        if dm.nrows() != params.act_dim() || dm.ncols() != b {
            return Err(Error::ShapeMismatch(format!(
                "mean gradient is {}x{}, expected {}x{b}",
                dm.nrows(),
                dm.ncols(),
                params.act_dim()
            )));
        }
        let (_, acts) = params.mean.forward_cached(&x);
        grad.mean = params.mean.backward(&acts, dm.clone());
    }
    if let Some(ds) = &upstream.log_std {
        if ds.len() != params.act_dim() {
            return Err(Error::ShapeMismatch(format!(
                "log-std gradient has {} entries, expected {}",
                ds.len(),
                params.act_dim()
            )));
        }
        grad.log_std = ds.clone();
    }
    if let Some(dv) = &upstream.value {
        if dv.nrows() != 1 || dv.ncols() != b {
            return Err(Error::ShapeMismatch(format!(
                "value gradient is {}x{}, expected 1x{b}",
                dv.nrows(),
                dv.ncols()
            )));
        }
        let (_, acts) = params.value.forward_cached(&x);
        grad.value = params.value.backward(&acts, dv.clone());
    }
    Ok(grad)
}
