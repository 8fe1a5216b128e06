//! Plain multilayer perceptrons with hand-written backpropagation and Adam.
//!
//! Hidden layers use a leaky rectifier with slope 0.01, the output layer is
//! linear. Batches are row-major `(samples × features)` matrices.
//!
//! Checkpoint layout (all integers and floats little-endian):
//!
//! ```text
//! magic    8 bytes   "WFRMLP01"
//! version  u32       1
//! n_dims   u32       number of layer widths (layers + 1)
//! dims     n_dims × u64
//! per layer, in order:
//!   weight  out × in  f64, row-major
//!   bias    out       f64
//! ```

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const MAGIC: &[u8; 8] = b"WFRMLP01";
const VERSION: u32 = 1;
const LEAK: f64 = 0.01;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("invalid architecture: {0}")]
    Architecture(String),
    #[error("input has {got} features, network expects {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out × in`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Layer {
    fn zeros_like(&self) -> Self {
        Self { weight: Array2::zeros(self.weight.raw_dim()), bias: Array1::zeros(self.bias.raw_dim()) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Layer>,
}

/// Parameter gradients, shaped like the network.
pub type Gradients = Vec<Layer>;

/// Activations kept from a forward pass for [`Mlp::backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `inputs[l]` feeds layer `l`; the last entry is the network output.
    pub activations: Vec<Array2<f64>>,
    /// Pre-activations of the hidden layers.
    pub pre: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &Array2<f64> {
        self.activations.last().expect("cache holds the output")
    }
}

fn leaky(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        LEAK * v
    }
}

fn leaky_slope(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        LEAK
    }
}

fn check_dims(dims: &[usize]) -> Result<(), NnError> {
    if dims.len() < 2 {
        return Err(NnError::Architecture("need at least an input and an output width".into()));
    }
    if dims.contains(&0) {
        return Err(NnError::Architecture("layer widths must be positive".into()));
    }
    Ok(())
}

/// Widths for a network with `layers` linear maps and `hidden` units per
/// hidden layer.
pub fn layer_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<usize> {
    let mut dims = vec![input];
    dims.extend(std::iter::repeat_n(hidden, layers.saturating_sub(1)));
    dims.push(output);
    dims
}

impl Mlp {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(dims: &[usize], seed: u64) -> Result<Self, NnError> {
        check_dims(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = dims
            .windows(2)
            .map(|w| {
                let bound = 1.0 / (w[0] as f64).sqrt();
                Layer {
                    weight: Array2::from_shape_simple_fn((w[1], w[0]), || rng.gen_range(-bound..bound)),
                    bias: Array1::zeros(w[1]),
                }
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn zeros(dims: &[usize]) -> Result<Self, NnError> {
        check_dims(dims)?;
        let layers =
            dims.windows(2).map(|w| Layer { weight: Array2::zeros((w[1], w[0])), bias: Array1::zeros(w[1]) }).collect();
        Ok(Self { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.bias.len()));
        dims
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.bias.len())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    /// Evaluates the network at `(x, t)`, with time appended as the last input.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>, NnError> {
        if x.len() + 1 != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: x.len() + 1 });
        }
        let mut input = Array2::zeros((1, x.len() + 1));
        for (dst, src) in input.iter_mut().zip(x.iter().chain(std::iter::once(&t))) {
            *dst = *src;
        }
        Ok(self.forward_batch(&input.view())?.row(0).to_vec())
    }

    pub fn forward_batch(&self, inputs: &ArrayView2<f64>) -> Result<Array2<f64>, NnError> {
        self.check_input(inputs)?;
        let last = self.layers.len() - 1;
        let mut a = inputs.to_owned();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = a.dot(&layer.weight.t());
            z += &layer.bias;
            if l < last {
                z.mapv_inplace(leaky);
            }
            a = z;
        }
        Ok(a)
    }

    pub fn forward_cached(&self, inputs: &ArrayView2<f64>) -> Result<ForwardCache, NnError> {
        self.check_input(inputs)?;
        let last = self.layers.len() - 1;
        let mut activations = vec![inputs.to_owned()];
        let mut pre = Vec::with_capacity(last);
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = activations[l].dot(&layer.weight.t());
            z += &layer.bias;
            if l < last {
                activations.push(z.mapv(leaky));
                pre.push(z);
            } else {
                activations.push(z);
            }
        }
        Ok(ForwardCache { activations, pre })
    }

    /// Parameter gradients of `Σ_n ⟨grad_out[n], output[n]⟩`; sample weights
    /// and loss normalization belong in `grad_out`.
    pub fn backward(&self, cache: &ForwardCache, grad_out: &ArrayView2<f64>) -> Gradients {
        let mut grads: Gradients = self.layers.iter().map(Layer::zeros_like).collect();
        let mut delta = grad_out.to_owned();
        for l in (0..self.layers.len()).rev() {
            grads[l].weight = delta.t().dot(&cache.activations[l]);
            grads[l].bias = delta.sum_axis(Axis(0));
            if l > 0 {
                let mut back = delta.dot(&self.layers[l].weight);
                Zip::from(&mut back).and(&cache.pre[l - 1]).for_each(|b, z| *b *= leaky_slope(*z));
                delta = back;
            }
        }
        grads
    }

    /// All parameters, layer by layer, weights (row-major) before biases.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            out.extend(l.weight.iter());
            out.extend(l.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.param_count() {
            return Err(NnError::Architecture(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                values.len()
            )));
        }
        let mut it = values.iter();
        for l in &mut self.layers {
            l.weight.iter_mut().for_each(|w| *w = *it.next().unwrap());
            l.bias.iter_mut().for_each(|b| *b = *it.next().unwrap());
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }

    fn check_input(&self, inputs: &ArrayView2<f64>) -> Result<(), NnError> {
        if inputs.ncols() != self.input_dim() {
            return Err(NnError::Dimension { expected: self.input_dim(), got: inputs.ncols() });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::with_capacity(16 + 8 * dims.len() + 8 * self.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for v in self.params() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, NnError> {
        let mut cur = Cursor { bytes, pos: 0 };
        if cur.take(8)? != MAGIC {
            return Err(NnError::Checkpoint("not a network checkpoint".into()));
        }
        let version = u32::from_le_bytes(cur.take(4)?.try_into().unwrap());
        if version != VERSION {
            return Err(NnError::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
        }
        let n = u32::from_le_bytes(cur.take(4)?.try_into().unwrap()) as usize;
        if n > 1024 {
            return Err(NnError::Checkpoint(format!("implausible layer count {n}")));
        }
        let mut dims = Vec::with_capacity(n);
        for _ in 0..n {
            let d = u64::from_le_bytes(cur.take(8)?.try_into().unwrap());
            dims.push(usize::try_from(d).map_err(|_| NnError::Checkpoint("width overflows".into()))?);
        }
        let mut net = Self::zeros(&dims).map_err(|e| NnError::Checkpoint(e.to_string()))?;
        let count = net.param_count();
        let raw =
            cur.take(count.checked_mul(8).ok_or_else(|| NnError::Checkpoint("parameter count overflows".into()))?)?;
        let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        net.set_params(&values)?;
        if cur.pos != bytes.len() {
            return Err(NnError::Checkpoint(format!("{} trailing bytes", bytes.len() - cur.pos)));
        }
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<(), NnError> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, NnError> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads a checkpoint and checks its widths.
    pub fn load_expecting(path: &Path, dims: &[usize]) -> Result<Self, NnError> {
        let net = Self::load(path)?;
        if net.dims() != dims {
            return Err(NnError::Checkpoint(format!(
                "{}: widths {:?}, expected {:?}",
                path.display(),
                net.dims(),
                dims
            )));
        }
        Ok(net)
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        let end = self.pos.checked_add(n).filter(|e| *e <= self.bytes.len());
        let Some(end) = end else {
            return Err(NnError::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        };
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Layer>,
    v: Vec<Layer>,
}

impl AdamState {
    pub fn new(net: &Mlp, config: AdamConfig) -> Self {
        let zeros: Vec<Layer> = net.layers.iter().map(Layer::zeros_like).collect();
        Self { config, step: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected Adam update of `net` in place.
    pub fn step(&mut self, net: &mut Mlp, grads: &Gradients) {
        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let c1 = 1.0 - beta1.powf(self.step as f64);
        let c2 = 1.0 - beta2.powf(self.step as f64);
        let update = |p: &mut f64, g: &f64, m: &mut f64, v: &mut f64| {
            *m = beta1 * *m + (1.0 - beta1) * g;
            *v = beta2 * *v + (1.0 - beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + eps);
        };
        for (((layer, g), m), v) in net.layers.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            Zip::from(&mut layer.weight).and(&g.weight).and(&mut m.weight).and(&mut v.weight).for_each(update);
            Zip::from(&mut layer.bias).and(&g.bias).and(&mut m.bias).and(&mut v.bias).for_each(update);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn init_is_deterministic() {
        let a = Mlp::new(&[3, 4, 2], 7).unwrap();
        let b = Mlp::new(&[3, 4, 2], 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.param_count(), 26);
        assert_ne!(a, Mlp::new(&[3, 4, 2], 8).unwrap());
        assert!(a.layers.iter().all(|l| l.bias.iter().all(|b| *b == 0.0)));
        let bound = 1.0 / 3f64.sqrt();
        assert!(a.layers[0].weight.iter().all(|w| w.abs() <= bound));
    }

    #[test]
    fn bad_dims() {
        assert!(Mlp::new(&[], 0).is_err());
        assert!(Mlp::new(&[3], 0).is_err());
        assert!(Mlp::new(&[3, 0, 1], 0).is_err());
        assert_eq!(layer_dims(3, 256, 5, 2), vec![3, 256, 256, 256, 256, 2]);
    }

    #[test]
    fn zero_and_identity_nets() {
        let z = Mlp::zeros(&[3, 5, 2]).unwrap();
        assert_eq!(z.forward(&[1.0, -2.0], 0.5).unwrap(), vec![0.0, 0.0]);

        let mut id = Mlp::zeros(&[3, 3]).unwrap();
        id.layers[0].weight = Array2::eye(3);
        assert_eq!(id.forward(&[1.5, -2.0], 0.25).unwrap(), vec![1.5, -2.0, 0.25]);
        assert!(id.forward(&[1.0], 0.0).is_err());
    }

    #[test]
    fn one_parameter_gradient() {
        // out = w·x, loss gradient 1 at the output → dL/dw = x.
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        net.layers[0].weight[[0, 0]] = 0.3;
        let x = array![[2.5]];
        let cache = net.forward_cached(&x.view()).unwrap();
        let g = net.backward(&cache, &array![[1.0]].view());
        assert_eq!(g[0].weight[[0, 0]], 2.5);
        assert_eq!(g[0].bias[0], 1.0);
        let g = net.backward(&cache, &array![[0.0]].view());
        assert_eq!(g[0].weight[[0, 0]], 0.0);
    }

    #[test]
    fn adam_first_step() {
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig::default());
        let grads = vec![Layer { weight: array![[0.5]], bias: array![-2.0] }];
        adam.step(&mut net, &grads);
        // After bias correction the first step is -lr·g/(|g| + ε').
        assert!((net.layers[0].weight[[0, 0]] + 1e-3).abs() < 1e-10);
        assert!((net.layers[0].bias[0] - 1e-3).abs() < 1e-10);

        let before = net.clone();
        let mut fresh = AdamState::new(&net, AdamConfig::default());
        let zero: Gradients = net.layers.iter().map(Layer::zeros_like).collect();
        fresh.step(&mut net, &zero);
        assert_eq!(net, before);
    }

    #[test]
    fn adam_minimizes_quadratic() {
        // f(w) = (w - 3)², starting from 0.
        let mut net = Mlp::zeros(&[1, 1]).unwrap();
        let mut adam = AdamState::new(&net, AdamConfig { lr: 1e-2, ..AdamConfig::default() });
        for _ in 0..5000 {
            let w = net.layers[0].weight[[0, 0]];
            let grads = vec![Layer { weight: array![[2.0 * (w - 3.0)]], bias: array![0.0] }];
            adam.step(&mut net, &grads);
        }
        assert!((net.layers[0].weight[[0, 0]] - 3.0).abs() < 1e-4);
    }

    #[test]
    fn checkpoint_roundtrip_and_corruption() {
        let net = Mlp::new(&[3, 8, 8, 2], 3).unwrap();
        let bytes = net.to_bytes();
        let back = Mlp::from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        let x = [0.3, -0.7];
        assert_eq!(back.forward(&x, 0.4).unwrap(), net.forward(&x, 0.4).unwrap());

        assert!(Mlp::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Mlp::from_bytes(&bytes[..10]).is_err());
        let mut wrong = bytes.clone();
        wrong[8] = 9;
        assert!(matches!(Mlp::from_bytes(&wrong), Err(NnError::Checkpoint(_))));
        let mut extra = bytes;
        extra.push(0);
        assert!(Mlp::from_bytes(&extra).is_err());

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.ckpt");
        net.save(&path).unwrap();
        assert_eq!(Mlp::load(&path).unwrap(), net);
        assert!(Mlp::load_expecting(&path, &[3, 8, 2]).is_err());
    }

    #[test]
    fn large_inputs_stay_finite() {
        let net = Mlp::new(&[4, 16, 16, 3], 1).unwrap();
        let out = net.forward(&[1e6, -1e6, 5e5], 1e6).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
