//! Masked dense and convolutional layers and the bias-free networks built from them.
//!
//! Each weighted layer holds a frozen weight tensor and, in masked modes, a
//! [`MaskState`]. The forward pass materializes the effective weights
//! `W ⊙ g(M)` once and keeps them in the cache for the backward pass. In
//! baseline mode the layer has no mask and its weights are trained directly.

use std::fmt;
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::init::{self, Distribution, ElusRule, FanMode, InitSpec, Scheme};
use crate::masking::{self, MaskMode, MaskState};
use crate::rng::{SeededRng, Stream};
use crate::tensor::{self, PoolIndex, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Elu,
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDense {
    /// `[fan_in, fan_out]`, frozen in masked modes.
    pub weights: Tensor,
    pub mask: Option<MaskState>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskedConv2D {
    /// `[kh, kw, c_in, c_out]`, frozen in masked modes.
    pub kernel: Tensor,
    pub mask: Option<MaskState>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Dense(MaskedDense),
    Conv(MaskedConv2D),
    MaxPool,
    Flatten,
}

impl Layer {
    fn weights(&self) -> Option<&Tensor> {
        match self {
            Layer::Dense(d) => Some(&d.weights),
            Layer::Conv(c) => Some(&c.kernel),
            _ => None,
        }
    }

    fn mask(&self) -> Option<&MaskState> {
        match self {
            Layer::Dense(d) => d.mask.as_ref(),
            Layer::Conv(c) => c.mask.as_ref(),
            _ => None,
        }
    }

    fn activation(&self) -> Activation {
        match self {
            Layer::Dense(d) => d.activation,
            Layer::Conv(c) => c.activation,
            _ => Activation::None,
        }
    }

    /// `W ⊙ g(M)`, or `W` itself for an unmasked layer.
    pub fn effective_weights(&self) -> Option<Tensor> {
        let w = self.weights()?;
        Some(match self.mask() {
            Some(m) => w
                .hadamard(&m.quantize())
                .expect("mask shape matches weights"),
            None => w.clone(),
        })
    }
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct Cache {
    generation: u64,
    entries: Vec<CacheEntry>,
}

#[derive(Debug, Clone)]
enum CacheEntry {
    Weighted {
        input: Tensor,
        effective: Tensor,
        pre_activation: Tensor,
    },
    Pool(PoolIndex),
    Flatten(Vec<usize>),
}

/// Gradients of one weighted layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrad {
    /// `∂L/∂(W ⊙ g(M))`.
    pub effective: Tensor,
    /// Gradient of the trainable tensor: scores (masked) or weights (baseline).
    pub param: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub layers: Vec<Layer>,
    /// Per-sample input shape, e.g. `[28, 28, 1]`.
    pub input_shape: Vec<usize>,
    pub alpha: f64,
    generation: u64,
}

impl Network {
    pub fn new(layers: Vec<Layer>, input_shape: Vec<usize>, alpha: f64) -> Result<Self> {
        let net = Self {
            layers,
            input_shape,
            alpha,
            generation: 0,
        };
        net.output_shape()?;
        match net.layers.iter().rev().find(|l| l.weights().is_some()) {
            Some(Layer::Dense(d)) if d.activation == Activation::None => Ok(net),
            _ => Err(Error::Invalid(
                "final weighted layer must be a dense logits layer without activation".into(),
            )),
        }
    }

    /// Per-sample output shape after checking that all layers compose.
    pub fn output_shape(&self) -> Result<Vec<usize>> {
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            shape = match (layer, shape.as_slice()) {
                (Layer::Dense(d), [n]) if *n == d.weights.shape()[0] => vec![d.weights.shape()[1]],
                (Layer::Conv(c), [h, w, ch]) if *ch == c.kernel.shape()[2] => {
                    vec![*h, *w, c.kernel.shape()[3]]
                }
                (Layer::MaxPool, [h, w, c]) if h % 2 == 0 && w % 2 == 0 => vec![h / 2, w / 2, *c],
                (Layer::Flatten, s) => vec![s.iter().product()],
                (_, s) => {
                    return Err(Error::shape(
                        "Network",
                        format!("layer {i} cannot take input of shape {s:?}"),
                    ))
                }
            };
            if let Some(m) = layer.mask() {
                if Some(m.scores.shape()) != layer.weights().map(|w| w.shape()) {
                    return Err(Error::shape(
                        "Network",
                        format!("layer {i}: scores/weights differ"),
                    ));
                }
            }
        }
        Ok(shape)
    }

    /// Number of frozen weights (the networks carry no biases).
    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.weights())
            .map(|w| w.len())
            .sum()
    }

    pub fn weight_shapes(&self) -> Vec<Vec<usize>> {
        self.layers
            .iter()
            .filter_map(|l| l.weights())
            .map(|w| w.shape().to_vec())
            .collect()
    }

    pub fn weights(&self) -> Vec<&Tensor> {
        self.layers.iter().filter_map(|l| l.weights()).collect()
    }

    pub fn is_masked(&self) -> bool {
        self.layers.iter().any(|l| l.mask().is_some())
    }

    /// Names `layer0`, `layer1`, ... of the weighted layers, with their kind.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.weights().is_some())
            .enumerate()
            .map(|(i, l)| match l {
                Layer::Conv(_) => format!("conv{i}"),
                _ => format!("dense{i}"),
            })
            .collect()
    }

    /// Current ternary masks; an unmasked layer reports all ones.
    pub fn masks(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter_map(|l| {
                let w = l.weights()?;
                Some(match l.mask() {
                    Some(m) => m.quantize(),
                    None => Tensor::full(w.shape().to_vec(), 1.0),
                })
            })
            .collect()
    }

    pub fn effective_weights(&self) -> Vec<Tensor> {
        self.layers
            .iter()
            .filter_map(|l| l.effective_weights())
            .collect()
    }

    /// Network-wide fraction of nonzero mask entries.
    pub fn remaining_ratio(&self) -> f64 {
        let (mut nz, mut total) = (0usize, 0usize);
        for m in self.masks() {
            nz += m.data().iter().filter(|&&v| v != 0.0).count();
            total += m.len();
        }
        nz as f64 / total as f64
    }

    /// SHA-256 over the bytes of every weight tensor.
    pub fn weights_digest(&self) -> [u8; 32] {
        let mut h = Sha256::new();
        for w in self.weights() {
            for v in w.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    /// Trainable tensors in layer order: scores when masked, weights otherwise.
    /// Taking them invalidates outstanding caches.
    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.generation += 1;
        self.layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(match &mut d.mask {
                    Some(m) => &mut m.scores,
                    None => &mut d.weights,
                }),
                Layer::Conv(c) => Some(match &mut c.mask {
                    Some(m) => &mut m.scores,
                    None => &mut c.kernel,
                }),
                _ => None,
            })
            .collect()
    }

    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.weight_shapes()
    }

    /// Copy of the network with masks folded into unmasked weights `W ⊙ g(M)`.
    pub fn to_unmasked(&self) -> Network {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::Dense(d) => Layer::Dense(MaskedDense {
                    weights: l.effective_weights().unwrap(),
                    mask: None,
                    activation: d.activation,
                }),
                Layer::Conv(c) => Layer::Conv(MaskedConv2D {
                    kernel: l.effective_weights().unwrap(),
                    mask: None,
                    activation: c.activation,
                }),
                other => other.clone(),
            })
            .collect();
        Network {
            layers,
            input_shape: self.input_shape.clone(),
            alpha: self.alpha,
            generation: 0,
        }
    }

    /// Replaces every weight tensor; shapes must match. Used to load exported networks.
    pub fn set_weights(&mut self, weights: Vec<Tensor>) -> Result<()> {
        let slots: Vec<&mut Tensor> = self
            .layers
            .iter_mut()
            .filter_map(|l| match l {
                Layer::Dense(d) => Some(&mut d.weights),
                Layer::Conv(c) => Some(&mut c.kernel),
                _ => None,
            })
            .collect();
        if slots.len() != weights.len() {
            return Err(Error::shape(
                "set_weights",
                format!("{} tensors for {} layers", weights.len(), slots.len()),
            ));
        }
        for (slot, w) in slots.into_iter().zip(weights) {
            if slot.shape() != w.shape() {
                return Err(Error::shape(
                    "set_weights",
                    format!("{:?} vs {:?}", slot.shape(), w.shape()),
                ));
            }
            *slot = w;
        }
        self.generation += 1;
        Ok(())
    }

    pub fn forward(&self, batch: &Tensor) -> Result<(Tensor, Cache)> {
        if batch.shape().get(1..) != Some(self.input_shape.as_slice()) {
            return Err(Error::shape(
                "forward",
                format!("batch {:?} vs input {:?}", batch.shape(), self.input_shape),
            ));
        }
        let mut x = batch.clone();
        let mut entries = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            match layer {
                Layer::Dense(_) | Layer::Conv(_) => {
                    let effective = layer.effective_weights().unwrap();
                    let z = match layer {
                        Layer::Dense(_) => tensor::matmul(&x, &effective)?,
                        _ => tensor::conv2d(&x, &effective)?,
                    };
                    let out = match layer.activation() {
                        Activation::Elu => tensor::elu(&z, self.alpha),
                        Activation::None => z.clone(),
                    };
                    entries.push(CacheEntry::Weighted {
                        input: x,
                        effective,
                        pre_activation: z,
                    });
                    x = out;
                }
                Layer::MaxPool => {
                    let (out, idx) = tensor::maxpool2(&x)?;
                    entries.push(CacheEntry::Pool(idx));
                    x = out;
                }
                Layer::Flatten => {
                    let shape = x.shape().to_vec();
                    let rest: usize = shape[1..].iter().product();
                    x = x.reshape([shape[0], rest])?;
                    entries.push(CacheEntry::Flatten(shape));
                }
            }
        }
        Ok((
            x,
            Cache {
                generation: self.generation,
                entries,
            },
        ))
    }

    /// Distance of `batch` from the points where the loss is not twice
    /// differentiable: the smallest `|z|` entering an ELU and the smallest gap
    /// between the two largest entries of any pooling window.
    pub fn kink_margin(&self, batch: &Tensor) -> Result<f64> {
        let (_, cache) = self.forward(batch)?;
        let mut margin = f64::INFINITY;
        let mut last_output: Option<Tensor> = None;
        for (layer, entry) in self.layers.iter().zip(&cache.entries) {
            match entry {
                CacheEntry::Weighted { pre_activation, .. } => {
                    if layer.activation() == Activation::Elu {
                        margin = pre_activation
                            .data()
                            .iter()
                            .fold(margin, |m, z| m.min(z.abs()));
                        last_output = Some(tensor::elu(pre_activation, self.alpha));
                    } else {
                        last_output = Some(pre_activation.clone());
                    }
                }
                CacheEntry::Pool(_) => {
                    let x = last_output.take().unwrap_or_else(|| batch.clone());
                    let s = x.shape().to_vec();
                    let (h, w, c) = (s[1], s[2], s[3]);
                    for b in 0..s[0] {
                        for y in (0..h).step_by(2) {
                            for xx in (0..w).step_by(2) {
                                for ch in 0..c {
                                    let mut v: Vec<f64> = [(0, 0), (0, 1), (1, 0), (1, 1)]
                                        .iter()
                                        .map(|(dy, dx)| {
                                            x.data()[((b * h + y + dy) * w + xx + dx) * c + ch]
                                        })
                                        .collect();
                                    v.sort_by(|a, b| b.total_cmp(a));
                                    margin = margin.min(v[0] - v[1]);
                                }
                            }
                        }
                    }
                    last_output = Some(tensor::maxpool2(&x)?.0);
                }
                CacheEntry::Flatten(_) => {
                    let x = last_output.take().unwrap_or_else(|| batch.clone());
                    let rest = x.len() / x.shape()[0];
                    last_output = Some(x.reshape([batch.shape()[0], rest])?);
                }
            }
        }
        Ok(margin)
    }

    /// Logits only, without keeping a cache.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        Ok(self.forward(batch)?.0)
    }

    /// Backpropagates `loss_grad = ∂L/∂logits`, returning one [`LayerGrad`]
    /// per weighted layer in layer order.
    pub fn backward(&self, cache: &Cache, loss_grad: &Tensor) -> Result<Vec<LayerGrad>> {
        if cache.generation != self.generation || cache.entries.len() != self.layers.len() {
            return Err(Error::StaleCache(
                "parameters changed since the forward pass".into(),
            ));
        }
        let first_weighted = self.layers.iter().position(|l| l.weights().is_some());
        let mut grads = Vec::new();
        let mut g = loss_grad.clone();
        for (i, (layer, entry)) in self.layers.iter().zip(&cache.entries).enumerate().rev() {
            match (layer, entry) {
                (
                    Layer::Dense(_) | Layer::Conv(_),
                    CacheEntry::Weighted {
                        input,
                        effective,
                        pre_activation,
                    },
                ) => {
                    let dz = match layer.activation() {
                        Activation::Elu => {
                            let alpha = self.alpha;
                            g.zip_map(pre_activation, "backward", |gv, z| {
                                gv * tensor::elu_grad_scalar(z, alpha)
                            })?
                        }
                        Activation::None => g,
                    };
                    let need_input_grad = Some(i) != first_weighted;
                    let (grad_eff, dx) = match layer {
                        Layer::Dense(_) => {
                            let ge = tensor::matmul_tn(input, &dz)?;
                            let dx = if need_input_grad {
                                Some(tensor::matmul_nt(&dz, effective)?)
                            } else {
                                None
                            };
                            (ge, dx)
                        }
                        _ => {
                            let (dx, ge) = tensor::conv2d_backward(input, effective, &dz)?;
                            (ge, Some(dx))
                        }
                    };
                    let param = match layer.mask() {
                        Some(_) => masking::ste_grad(&grad_eff, layer.weights().unwrap())?,
                        None => grad_eff.clone(),
                    };
                    grads.push(LayerGrad {
                        effective: grad_eff,
                        param,
                    });
                    match dx {
                        Some(dx) => g = dx,
                        None => break,
                    }
                }
                (Layer::MaxPool, CacheEntry::Pool(idx)) => g = tensor::maxpool2_backward(idx, &g)?,
                (Layer::Flatten, CacheEntry::Flatten(shape)) => g = g.reshape(shape.clone())?,
                _ => return Err(Error::StaleCache("cache does not match layers".into())),
            }
        }
        grads.reverse();
        Ok(grads)
    }
}

/// Layer of an architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv { filters: usize, kernel: usize },
    MaxPool,
    Flatten,
    Dense { units: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

const CIFAR_INPUT: [usize; 3] = [32, 32, 3];
const MNIST_INPUT: [usize; 3] = [28, 28, 1];

impl Architecture {
    /// One of `fcn`, `conv2`, `conv4`, `conv6`, `conv8`.
    pub fn named(name: &str) -> Result<Self> {
        let conv_blocks: &[usize] = match name {
            "fcn" => {
                return Ok(Self {
                    name: name.into(),
                    input_shape: MNIST_INPUT.to_vec(),
                    layers: vec![
                        LayerSpec::Flatten,
                        LayerSpec::Dense { units: 300 },
                        LayerSpec::Dense { units: 100 },
                        LayerSpec::Dense { units: 10 },
                    ],
                })
            }
            "conv2" => &[64],
            "conv4" => &[64, 128],
            "conv6" => &[64, 128, 256],
            "conv8" => &[64, 128, 256, 512],
            other => return Err(Error::UnknownArchitecture(other.into())),
        };
        let mut layers = Vec::new();
        for &f in conv_blocks {
            layers.push(LayerSpec::Conv {
                filters: f,
                kernel: 3,
            });
            layers.push(LayerSpec::Conv {
                filters: f,
                kernel: 3,
            });
            layers.push(LayerSpec::MaxPool);
        }
        layers.push(LayerSpec::Flatten);
        for units in [256, 256, 10] {
            layers.push(LayerSpec::Dense { units });
        }
        Ok(Self {
            name: name.into(),
            input_shape: CIFAR_INPUT.to_vec(),
            layers,
        })
    }

    /// Custom architecture from an input shape `HxWxC` (or `N`) and a
    /// comma-separated layer list such as `conv:16,pool,flatten,dense:32,dense:10`.
    pub fn custom(input: &str, layers: &str) -> Result<Self> {
        let input_shape = input
            .split('x')
            .map(|s| s.trim().parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Config(format!("bad input shape `{input}`: {e}")))?;
        let layers = layers
            .split(',')
            .map(|tok| {
                let tok = tok.trim();
                let (kind, arg) = tok.split_once(':').unwrap_or((tok, ""));
                let num = |s: &str| {
                    s.parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad layer `{tok}`")))
                };
                Ok(match kind {
                    "conv" => {
                        let (f, k) = arg.split_once('/').unwrap_or((arg, "3"));
                        LayerSpec::Conv {
                            filters: num(f)?,
                            kernel: num(k)?,
                        }
                    }
                    "pool" => LayerSpec::MaxPool,
                    "flatten" => LayerSpec::Flatten,
                    "dense" => LayerSpec::Dense { units: num(arg)? },
                    _ => return Err(Error::Config(format!("unknown layer `{tok}`"))),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            name: "custom".into(),
            input_shape,
            layers,
        })
    }

    /// Weight shape of every weighted layer, in order.
    pub fn weight_shapes(&self) -> Result<Vec<Vec<usize>>> {
        let mut shape = self.input_shape.clone();
        let mut out = Vec::new();
        for spec in &self.layers {
            shape = match (spec, shape.as_slice()) {
                (LayerSpec::Dense { units }, [n]) => {
                    out.push(vec![*n, *units]);
                    vec![*units]
                }
                (LayerSpec::Conv { filters, kernel }, [h, w, c]) if kernel % 2 == 1 => {
                    out.push(vec![*kernel, *kernel, *c, *filters]);
                    vec![*h, *w, *filters]
                }
                (LayerSpec::MaxPool, [h, w, c]) if h % 2 == 0 && w % 2 == 0 => {
                    vec![h / 2, w / 2, *c]
                }
                (LayerSpec::Flatten, s) => vec![s.iter().product()],
                (spec, s) => {
                    return Err(Error::shape(
                        "Architecture",
                        format!("{spec:?} cannot follow shape {s:?}"),
                    ))
                }
            };
        }
        Ok(out)
    }

    pub fn parameter_count(&self) -> Result<usize> {
        Ok(self
            .weight_shapes()?
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum())
    }
}

/// How the mask scores are initialized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskInit {
    XavierUniform,
    ElusUniform,
}

/// How the thresholds are chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ThresholdSpec {
    Fixed {
        tau_n: f64,
        tau_p: f64,
    },
    /// Per-layer symmetric thresholds zeroing this fraction of scores at initialization.
    InitialPruningRate(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    Signed,
    Binary,
    Baseline,
}

impl TrainMode {
    pub fn mask_mode(self) -> Option<MaskMode> {
        match self {
            TrainMode::Signed => Some(MaskMode::Signed),
            TrainMode::Binary => Some(MaskMode::Binary),
            TrainMode::Baseline => None,
        }
    }
}

/// Initialization settings shared by all layers of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkInit {
    pub scheme: Scheme,
    pub rule: ElusRule,
    pub distribution: Distribution,
    pub fan_mode: FanMode,
    pub scale: f64,
    /// Explicit `p0` for ELUS; derived from the thresholds when `None`.
    pub p0: Option<f64>,
    pub mask_init: MaskInit,
    pub thresholds: ThresholdSpec,
    pub mode: TrainMode,
    pub alpha: f64,
}

impl Default for NetworkInit {
    fn default() -> Self {
        Self {
            scheme: Scheme::Elus,
            rule: ElusRule::ScaledHe,
            distribution: Distribution::SignedConstant,
            fan_mode: FanMode::FanOut,
            scale: 3f64.sqrt(),
            p0: None,
            mask_init: MaskInit::XavierUniform,
            thresholds: ThresholdSpec::Fixed {
                tau_n: -0.01,
                tau_p: 0.01,
            },
            mode: TrainMode::Signed,
            alpha: 1.0,
        }
    }
}

/// Bound of Xavier-uniform scores for a weight shape.
pub fn xavier_bound(shape: &[usize]) -> f64 {
    let (fi, fo) = init::fans(shape);
    (6.0 / (fi + fo) as f64).sqrt()
}

fn layer_p0(cfg: &NetworkInit, shape: &[usize]) -> f64 {
    if let Some(p) = cfg.p0 {
        return p;
    }
    match cfg.thresholds {
        ThresholdSpec::InitialPruningRate(p) => p,
        ThresholdSpec::Fixed { tau_n, tau_p } => {
            let a = xavier_bound(shape);
            (((tau_p - tau_n) / 2.0) / a).clamp(0.0, 0.99)
        }
    }
}

/// Builds a network with frozen weights and fresh mask scores for `seed`.
///
/// Weighted layer `i` draws its weights from stream `(seed, Weights, i)` and
/// its scores from `(seed, Scores, i)`.
pub fn build_network(arch: &Architecture, cfg: &NetworkInit, seed: u64) -> Result<Network> {
    let shapes = arch.weight_shapes()?;
    let n_weighted = shapes.len();
    let mut layers = Vec::with_capacity(arch.layers.len());
    let mut wi = 0;
    for spec in &arch.layers {
        match spec {
            LayerSpec::MaxPool => layers.push(Layer::MaxPool),
            LayerSpec::Flatten => layers.push(Layer::Flatten),
            LayerSpec::Dense { .. } | LayerSpec::Conv { .. } => {
                let shape = &shapes[wi];
                let (fan_in, fan_out) = init::fans(shape);
                let p0 = layer_p0(cfg, shape);
                let wspec = InitSpec {
                    scheme: cfg.scheme,
                    rule: cfg.rule,
                    distribution: cfg.distribution,
                    fan_in,
                    fan_out,
                    fan_mode: cfg.fan_mode,
                    p0: if cfg.mode == TrainMode::Baseline {
                        0.0
                    } else {
                        p0
                    },
                    alpha: cfg.alpha,
                    scale: cfg.scale,
                };
                let mut wrng = SeededRng::split(seed, Stream::Weights, wi as u64);
                let weights = init::draw(&wspec, shape, &mut wrng)?;
                let mask = match cfg.mode.mask_mode() {
                    None => None,
                    Some(mode) => {
                        let mut srng = SeededRng::split(seed, Stream::Scores, wi as u64);
                        let bound = match cfg.mask_init {
                            MaskInit::XavierUniform => xavier_bound(shape),
                            MaskInit::ElusUniform => {
                                let s = InitSpec {
                                    scheme: Scheme::Elus,
                                    rule: ElusRule::Simplified,
                                    distribution: Distribution::Uniform,
                                    ..wspec
                                };
                                init::uniform_bound(init::target_variance(&s))
                            }
                        };
                        let scores = Tensor::from_fn(shape.clone(), |_| srng.symmetric(bound));
                        let (tau_n, tau_p) = match cfg.thresholds {
                            ThresholdSpec::Fixed { tau_n, tau_p } => (tau_n, tau_p),
                            ThresholdSpec::InitialPruningRate(p) => {
                                masking::thresholds_for_target(bound, p)?
                            }
                        };
                        Some(MaskState::new(scores, tau_n, tau_p, mode)?)
                    }
                };
                let last = wi + 1 == n_weighted;
                let activation = if last {
                    Activation::None
                } else {
                    Activation::Elu
                };
                layers.push(match spec {
                    LayerSpec::Conv { .. } => Layer::Conv(MaskedConv2D {
                        kernel: weights,
                        mask,
                        activation,
                    }),
                    _ => Layer::Dense(MaskedDense {
                        weights,
                        mask,
                        activation,
                    }),
                });
                wi += 1;
            }
        }
    }
    Network::new(layers, arch.input_shape.clone(), cfg.alpha)
}

/// Shorthand for [`build_network`] on a named architecture.
pub fn build_architecture(name: &str, cfg: &NetworkInit, seed: u64) -> Result<Network> {
    build_network(&Architecture::named(name)?, cfg, seed)
}

impl FromStr for TrainMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "signed" => Ok(TrainMode::Signed),
            "binary" => Ok(TrainMode::Binary),
            "baseline" => Ok(TrainMode::Baseline),
            other => Err(Error::Config(format!("unknown mode `{other}`"))),
        }
    }
}

impl fmt::Display for TrainMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainMode::Signed => "signed",
            TrainMode::Binary => "binary",
            TrainMode::Baseline => "baseline",
        })
    }
}

impl FromStr for MaskInit {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "xavier_uniform" => Ok(MaskInit::XavierUniform),
            "elus_uniform" => Ok(MaskInit::ElusUniform),
            other => Err(Error::Config(format!("unknown mask init `{other}`"))),
        }
    }
}

impl fmt::Display for MaskInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MaskInit::XavierUniform => "xavier_uniform",
            MaskInit::ElusUniform => "elus_uniform",
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(w: Vec<f64>, shape: [usize; 2], mask: Option<Vec<f64>>, act: Activation) -> Layer {
        let weights = Tensor::new(shape, w).unwrap();
        let mask = mask.map(|m| {
            MaskState::symmetric(Tensor::new(shape, m).unwrap(), 0.01, MaskMode::Signed).unwrap()
        });
        Layer::Dense(MaskedDense {
            weights,
            mask,
            activation: act,
        })
    }

    #[test]
    fn table_parameter_counts() {
        let expect = [
            ("fcn", 266_200),
            ("conv2", 4_300_992),
            ("conv4", 2_425_024),
            ("conv6", 2_261_184),
            ("conv8", 5_275_840),
        ];
        for (name, count) in expect {
            assert_eq!(
                Architecture::named(name)
                    .unwrap()
                    .parameter_count()
                    .unwrap(),
                count,
                "{name}"
            );
        }
        assert_eq!(
            Architecture::named("fcn").unwrap().weight_shapes().unwrap(),
            vec![vec![784, 300], vec![300, 100], vec![100, 10]]
        );
        assert!(matches!(
            Architecture::named("vgg"),
            Err(Error::UnknownArchitecture(_))
        ));
    }

    #[test]
    fn single_layer_hand_arithmetic() {
        // W = [[2]], mask score below -tau gives M̄ = -1; input 3 → z = -6.
        let hidden = dense(vec![2.0], [1, 1], Some(vec![-1.0]), Activation::Elu);
        let out = dense(vec![1.0], [1, 1], None, Activation::None);
        let net = Network::new(vec![hidden, out], vec![1], 1.0).unwrap();
        let x = Tensor::new([1, 1], vec![3.0]).unwrap();
        let (logits, _) = net.forward(&x).unwrap();
        assert!((logits.data()[0] - ((-6f64).exp() - 1.0)).abs() < 1e-15);
    }

    #[test]
    fn dead_network_outputs_zero_logits() {
        let cfg = NetworkInit {
            thresholds: ThresholdSpec::Fixed {
                tau_n: -10.0,
                tau_p: 10.0,
            },
            ..NetworkInit::default()
        };
        let net = build_architecture("fcn", &cfg, 1).unwrap();
        assert_eq!(net.remaining_ratio(), 0.0);
        let x = Tensor::full([2, 28, 28, 1], 0.3);
        let logits = net.predict(&x).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let (loss, _) = tensor::softmax_xent(&logits, &[0, 5]).unwrap();
        assert!((loss - 10f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn one_layer_score_grad_by_hand() {
        // Logits layer only: grad_eff = outer(x, upstream), score grad = grad_eff ⊙ W.
        let w = vec![0.5, -1.0, 2.0, 0.25];
        let layer = dense(
            w.clone(),
            [2, 2],
            Some(vec![0.3, 0.3, -0.3, 0.3]),
            Activation::None,
        );
        let net = Network::new(vec![layer], vec![2], 1.0).unwrap();
        let x = Tensor::new([1, 2], vec![3.0, -2.0]).unwrap();
        let (_, cache) = net.forward(&x).unwrap();
        let up = Tensor::new([1, 2], vec![1.5, -4.0]).unwrap();
        let g = net.backward(&cache, &up).unwrap();
        let outer = [3.0 * 1.5, 3.0 * -4.0, -2.0 * 1.5, -2.0 * -4.0];
        assert_eq!(g[0].effective.data(), &outer);
        for i in 0..4 {
            assert_eq!(g[0].param.data()[i], outer[i] * w[i]);
        }
        let zero = net.backward(&cache, &Tensor::zeros([1, 2])).unwrap();
        assert!(zero[0].param.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let mut net = build_network(
            &Architecture::custom("4", "dense:3,dense:2").unwrap(),
            &NetworkInit::default(),
            3,
        )
        .unwrap();
        let x = Tensor::full([1, 4], 1.0);
        let (_, cache) = net.forward(&x).unwrap();
        net.params_mut();
        assert!(matches!(
            net.backward(&cache, &Tensor::zeros([1, 2])),
            Err(Error::StaleCache(_))
        ));
    }

    #[test]
    fn masked_forward_equals_prefolded_network() {
        let arch = Architecture::custom("6x6x2", "conv:3,pool,flatten,dense:5,dense:4").unwrap();
        let net = build_network(&arch, &NetworkInit::default(), 9).unwrap();
        let folded = net.to_unmasked();
        let mut r = SeededRng::new(4);
        let x = Tensor::from_fn([3, 6, 6, 2], |_| r.normal());
        assert_eq!(net.predict(&x).unwrap(), folded.predict(&x).unwrap());
    }

    #[test]
    fn layer_streams_are_independent_of_later_layers() {
        let a = build_network(
            &Architecture::custom("8", "dense:6,dense:3").unwrap(),
            &NetworkInit::default(),
            5,
        )
        .unwrap();
        let b = build_network(
            &Architecture::custom("8", "dense:6,dense:4,dense:3").unwrap(),
            &NetworkInit::default(),
            5,
        )
        .unwrap();
        assert_eq!(a.weights()[0], b.weights()[0]);
    }

    #[test]
    fn shape_mismatch_errors() {
        let net = build_architecture("fcn", &NetworkInit::default(), 0).unwrap();
        assert!(net.forward(&Tensor::zeros([1, 27, 28, 1])).is_err());
        assert!(Architecture::custom("5x5x1", "pool")
            .unwrap()
            .weight_shapes()
            .is_err());
        assert!(Architecture::custom("5", "dense:x").is_err());
    }

    #[test]
    fn baseline_has_no_masks_and_trains_weights() {
        let cfg = NetworkInit {
            mode: TrainMode::Baseline,
            distribution: Distribution::Uniform,
            ..NetworkInit::default()
        };
        let net = build_architecture("fcn", &cfg, 0).unwrap();
        assert!(!net.is_masked());
        assert_eq!(net.remaining_ratio(), 1.0);
    }
}
