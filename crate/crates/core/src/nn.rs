//! A small neural kernel: dense stacks, a GRU cell, Adam and checkpoints.
//!
//! Forward passes return explicit caches; backward passes consume a cache and
//! accumulate into the parameter gradients, so a batch is processed by
//! running forward/backward per sample and stepping the optimizer once.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: expected {expected}, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("stale cache: parameters changed since the forward pass")]
    StaleCache,
    #[error("non-finite gradient in tensor {0}")]
    NonFinite(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, NnError>;

fn expect_len(expected: usize, got: usize) -> Result<()> {
    if expected == got {
        Ok(())
    } else {
        Err(NnError::Shape { expected, got })
    }
}

/// A parameter array with its gradient accumulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    #[serde(skip)]
    pub grad: Vec<f64>,
    /// Bumped by every optimizer step; caches remember it.
    #[serde(skip)]
    pub version: u64,
}

impl ParamTensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
            grad: vec![0.0; n],
            version: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn zero_grad(&mut self) {
        self.grad.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Anything that owns parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&ParamTensor>;
    fn params_mut(&mut self) -> Vec<&mut ParamTensor>;

    fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Affine layer `y = W x + b` with `W` stored row-major as `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub w: ParamTensor,
    pub b: ParamTensor,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Self {
            w: ParamTensor::zeros(&[output, input]),
            b: ParamTensor::zeros(&[output]),
        }
    }

    /// He-style uniform initialisation scaled by fan-in; zero bias.
    pub fn init<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        let mut d = Self::zeros(input, output);
        let bound = (6.0 / input as f64).sqrt();
        for w in &mut d.w.values {
            *w = rng.random_range(-bound..bound);
        }
        d
    }

    pub fn input(&self) -> usize {
        self.w.shape[1]
    }

    pub fn output(&self) -> usize {
        self.w.shape[0]
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let n = self.input();
        for (o, yo) in y.iter_mut().enumerate() {
            let row = &self.w.values[o * n..(o + 1) * n];
            *yo = self.b.values[o] + row.iter().zip(x).map(|(w, x)| w * x).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients for `dy` and returns `dx`.
    fn back(&mut self, x: &[f64], dy: &[f64]) -> Vec<f64> {
        let n = self.input();
        let mut dx = vec![0.0; n];
        for (o, &g) in dy.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            if !self.b.grad.is_empty() {
                self.b.grad[o] += g;
            }
            let row = &self.w.values[o * n..(o + 1) * n];
            let grow = &mut self.w.grad[o * n..(o + 1) * n];
            for i in 0..n {
                grow[i] += g * x[i];
                dx[i] += g * row[i];
            }
        }
        dx
    }
}

/// Layer widths of a multilayer perceptron, input first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
}

impl MlpSpec {
    pub fn new(widths: &[usize]) -> Self {
        assert!(widths.len() >= 2 && widths.iter().all(|&w| w >= 1), "bad widths {widths:?}");
        Self {
            widths: widths.to_vec(),
        }
    }
}

/// ReLU on hidden layers, linear output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    version: u64,
    /// Input to each layer.
    inputs: Vec<Vec<f64>>,
    /// Pre-activation of each hidden layer.
    pre: Vec<Vec<f64>>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Self {
        Self {
            layers: spec
                .widths
                .windows(2)
                .map(|w| Dense::init(w[0], w[1], rng))
                .collect(),
        }
    }

    pub fn zeros(spec: &MlpSpec) -> Self {
        Self {
            layers: spec.widths.windows(2).map(|w| Dense::zeros(w[0], w[1])).collect(),
        }
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].input()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("at least one layer").output()
    }

    fn version(&self) -> u64 {
        self.layers[0].w.version
    }

    /// Forward pass without a cache.
    pub fn infer(&self, x: &[f64]) -> Result<Vec<f64>> {
        expect_len(self.input_width(), x.len())?;
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.output()];
            layer.apply(&cur, &mut y);
            if k < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = y;
        }
        Ok(cur)
    }

    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        expect_len(self.input_width(), x.len())?;
        let mut cache = MlpCache {
            version: self.version(),
            inputs: Vec::with_capacity(self.layers.len()),
            pre: Vec::with_capacity(self.layers.len()),
        };
        let mut cur = x.to_vec();
        let last = self.layers.len() - 1;
        for (k, layer) in self.layers.iter().enumerate() {
            let mut y = vec![0.0; layer.output()];
            layer.apply(&cur, &mut y);
            cache.inputs.push(cur);
            if k < last {
                cache.pre.push(y.clone());
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            cur = y;
        }
        Ok((cur, cache))
    }

    /// Accumulates gradients and returns `dL/dx`.
    pub fn backward(&mut self, cache: &MlpCache, dy: &[f64]) -> Result<Vec<f64>> {
        if cache.version != self.version() {
            return Err(NnError::StaleCache);
        }
        expect_len(self.output_width(), dy.len())?;
        let mut grad = dy.to_vec();
        for k in (0..self.layers.len()).rev() {
            if k < self.layers.len() - 1 {
                for (g, &z) in grad.iter_mut().zip(&cache.pre[k]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            grad = self.layers[k].back(&cache.inputs[k], &grad);
        }
        Ok(grad)
    }
}

impl Parameterized for Mlp {
    fn params(&self) -> Vec<&ParamTensor> {
        self.layers.iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        self.layers.iter_mut().flat_map(|l| [&mut l.w, &mut l.b]).collect()
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gated recurrent unit:
/// `z = s(Wz x + Uz h + bz)`, `r = s(Wr x + Ur h + br)`,
/// `c = tanh(Wh x + Uh (r * h) + bh)`, `h' = (1 - z) h + z c`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gru {
    pub wz: Dense,
    pub uz: Dense,
    pub wr: Dense,
    pub ur: Dense,
    pub wh: Dense,
    pub uh: Dense,
}

#[derive(Debug, Clone)]
pub struct GruCache {
    version: u64,
    x: Vec<f64>,
    h: Vec<f64>,
    z: Vec<f64>,
    r: Vec<f64>,
    rh: Vec<f64>,
    c: Vec<f64>,
}

impl Gru {
    /// Only the input projections carry a bias.
    fn with(input: usize, hidden: usize, mut make: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut recur = |n| {
            let mut d: Dense = make(hidden, n);
            d.b = ParamTensor::zeros(&[0]);
            d
        };
        let (uz, ur, uh) = (recur(hidden), recur(hidden), recur(hidden));
        Self {
            wz: make(input, hidden),
            uz,
            wr: make(input, hidden),
            ur,
            wh: make(input, hidden),
            uh,
        }
    }

    pub fn init<R: Rng + ?Sized>(input: usize, hidden: usize, rng: &mut R) -> Self {
        Self::with(input, hidden, |i, o| Dense::init(i, o, rng))
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self::with(input, hidden, Dense::zeros)
    }

    pub fn input_width(&self) -> usize {
        self.wz.input()
    }

    pub fn hidden(&self) -> usize {
        self.wz.output()
    }

    fn version(&self) -> u64 {
        self.wz.w.version
    }

    fn mix(x_part: &Dense, h_part: &Dense, x: &[f64], h: &[f64]) -> Vec<f64> {
        let n = x_part.output();
        let mut a = vec![0.0; n];
        x_part.apply(x, &mut a);
        let hn = h_part.input();
        for (o, ao) in a.iter_mut().enumerate() {
            let row = &h_part.w.values[o * hn..(o + 1) * hn];
            *ao += row.iter().zip(h).map(|(w, h)| w * h).sum::<f64>();
        }
        a
    }

    fn check(&self, h: &[f64], x: &[f64]) -> Result<()> {
        expect_len(self.hidden(), h.len())?;
        expect_len(self.input_width(), x.len())
    }

    pub fn infer(&self, h: &[f64], x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(h, x)?.0)
    }

    pub fn forward(&self, h: &[f64], x: &[f64]) -> Result<(Vec<f64>, GruCache)> {
        self.check(h, x)?;
        let z: Vec<f64> = Self::mix(&self.wz, &self.uz, x, h).into_iter().map(sigmoid).collect();
        let r: Vec<f64> = Self::mix(&self.wr, &self.ur, x, h).into_iter().map(sigmoid).collect();
        let rh: Vec<f64> = r.iter().zip(h).map(|(r, h)| r * h).collect();
        let c: Vec<f64> = Self::mix(&self.wh, &self.uh, x, &rh).into_iter().map(f64::tanh).collect();
        let out = (0..h.len()).map(|i| (1.0 - z[i]) * h[i] + z[i] * c[i]).collect();
        let cache = GruCache {
            version: self.version(),
            x: x.to_vec(),
            h: h.to_vec(),
            z,
            r,
            rh,
            c,
        };
        Ok((out, cache))
    }

    /// Accumulates gradients and returns `(dL/dh, dL/dx)`.
    pub fn backward(&mut self, cache: &GruCache, dout: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        if cache.version != self.version() {
            return Err(NnError::StaleCache);
        }
        expect_len(self.hidden(), dout.len())?;
        let n = dout.len();
        let mut dh: Vec<f64> = (0..n).map(|i| dout[i] * (1.0 - cache.z[i])).collect();
        let dz: Vec<f64> = (0..n).map(|i| dout[i] * (cache.c[i] - cache.h[i])).collect();
        let dc: Vec<f64> = (0..n).map(|i| dout[i] * cache.z[i]).collect();
        let dza: Vec<f64> = (0..n).map(|i| dz[i] * cache.z[i] * (1.0 - cache.z[i])).collect();
        let dca: Vec<f64> = (0..n).map(|i| dc[i] * (1.0 - cache.c[i] * cache.c[i])).collect();

        let mut dx = self.wh.back(&cache.x, &dca);
        let drh = self.uh.back(&cache.rh, &dca);
        let dr: Vec<f64> = (0..n).map(|i| drh[i] * cache.h[i]).collect();
        for i in 0..n {
            dh[i] += drh[i] * cache.r[i];
        }
        let dra: Vec<f64> = (0..n).map(|i| dr[i] * cache.r[i] * (1.0 - cache.r[i])).collect();

        for (xp, hp, da) in [(&mut self.wz, &mut self.uz, &dza), (&mut self.wr, &mut self.ur, &dra)] {
            let dxp = xp.back(&cache.x, da);
            let dhp = hp.back(&cache.h, da);
            dx.iter_mut().zip(dxp).for_each(|(a, b)| *a += b);
            dh.iter_mut().zip(dhp).for_each(|(a, b)| *a += b);
        }
        Ok((dh, dx))
    }
}

impl Parameterized for Gru {
    fn params(&self) -> Vec<&ParamTensor> {
        [&self.wz, &self.uz, &self.wr, &self.ur, &self.wh, &self.uh]
            .into_iter()
            .flat_map(|d| [&d.w, &d.b])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<&mut ParamTensor> {
        [
            &mut self.wz,
            &mut self.uz,
            &mut self.wr,
            &mut self.ur,
            &mut self.wh,
            &mut self.uh,
        ]
        .into_iter()
        .flat_map(|d| [&mut d.w, &mut d.b])
        .collect()
    }
}

/// Adam with bias correction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update from the accumulated gradients, which are zeroed after.
    /// Rejects the step (leaving parameters untouched) if any gradient is
    /// not finite.
    pub fn step(&mut self, params: &mut [&mut ParamTensor]) -> Result<()> {
        for (i, p) in params.iter().enumerate() {
            if p.grad.iter().any(|g| !g.is_finite()) {
                return Err(NnError::NonFinite(i));
            }
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() {
            return Err(NnError::Shape {
                expected: self.m.len(),
                got: params.len(),
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (k, p) in params.iter_mut().enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                p.values[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
            p.zero_grad();
            p.version += 1;
        }
        Ok(())
    }
}

const MAGIC: &[u8; 4] = b"QRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Encodes tensors as: magic, version, tensor count, then per tensor its
/// rank, dims and little-endian f64 values.
pub fn encode_checkpoint(params: &[&ParamTensor]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        out.extend_from_slice(&(p.shape.len() as u32).to_le_bytes());
        for &d in &p.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
    }
    for p in params {
        for v in &p.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| NnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Vec<ParamTensor>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Checkpoint(format!(
            "version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let count = c.u32()? as usize;
    let mut shapes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        shapes.push(shape);
    }
    let mut out = Vec::with_capacity(shapes.len());
    for shape in shapes {
        let mut t = ParamTensor::zeros(&shape);
        for v in &mut t.values {
            *v = f64::from_le_bytes(c.take(8)?.try_into().unwrap());
        }
        out.push(t);
    }
    if c.pos != bytes.len() {
        return Err(NnError::Checkpoint("trailing bytes".into()));
    }
    Ok(out)
}

pub fn save_checkpoint(model: &impl Parameterized, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_checkpoint(&model.params());
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

/// Loads values into an existing model of the same architecture.
pub fn load_checkpoint(model: &mut impl Parameterized, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    restore(model, &bytes)
}

pub fn restore(model: &mut impl Parameterized, bytes: &[u8]) -> Result<()> {
    let loaded = decode_checkpoint(bytes)?;
    let mut params = model.params_mut();
    if loaded.len() != params.len() {
        return Err(NnError::Checkpoint(format!(
            "{} tensors in file, model has {}",
            loaded.len(),
            params.len()
        )));
    }
    for (i, (p, l)) in params.iter().zip(&loaded).enumerate() {
        if p.shape != l.shape {
            return Err(NnError::Checkpoint(format!(
                "tensor {i}: shape {:?} in file, model has {:?}",
                l.shape, p.shape
            )));
        }
    }
    for (p, l) in params.iter_mut().zip(loaded) {
        p.values = l.values;
        p.zero_grad();
        p.version += 1;
    }
    Ok(())
}

/// Outcome of [`gradient_check`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

/// Compares accumulated analytic gradients with central differences.
///
/// `loss(model, backprop)` must return the loss and, when `backprop` is set,
/// accumulate its gradient. At most `per_tensor` entries of each tensor are
/// probed, spread evenly.
pub fn gradient_check<M: Parameterized>(
    model: &mut M,
    mut loss: impl FnMut(&mut M, bool) -> f64,
    h: f64,
    per_tensor: usize,
) -> GradCheck {
    model.zero_grad();
    loss(model, true);
    let analytic: Vec<Vec<f64>> = model.params().iter().map(|p| p.grad.clone()).collect();
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (t, grads) in analytic.iter().enumerate() {
        let n = grads.len();
        let stride = (n / per_tensor.max(1)).max(1);
        for i in (0..n).step_by(stride) {
            let orig = model.params()[t].values[i];
            model.params_mut()[t].values[i] = orig + h;
            let plus = loss(model, false);
            model.params_mut()[t].values[i] = orig - h;
            let minus = loss(model, false);
            model.params_mut()[t].values[i] = orig;
            worst = worst.max(relative_error(grads[i], (plus - minus) / (2.0 * h)));
            checked += 1;
        }
    }
    model.zero_grad();
    GradCheck {
        max_rel_error: worst,
        checked,
    }
}
