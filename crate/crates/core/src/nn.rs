//! Small convolutional encoder plus linear classifier with hand-written
//! backpropagation.
//!
//! Architecture (`tiny-cnn`): conv3x3(3→c1, stride 1) → ReLU →
//! conv3x3(c1→c2, stride 2) → ReLU → global average pool → z ∈ ℝ^c2 →
//! linear(c2→N). Global pooling makes the encoder resolution-agnostic, so
//! global and local crops share weights.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Tensor3;

pub const TINY_CNN: &str = "tiny-cnn";
const WEIGHTS_MAGIC: &[u8; 8] = b"DSCKPT01";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderSpec {
    pub arch: String,
    pub channels: [usize; 2],
}

impl Default for EncoderSpec {
    fn default() -> Self {
        Self {
            arch: TINY_CNN.into(),
            channels: [16, 32],
        }
    }
}

impl EncoderSpec {
    pub fn validate(&self) -> Result<()> {
        if self.arch != TINY_CNN {
            return Err(Error::UnsupportedArch(self.arch.clone()));
        }
        if self.channels.contains(&0) {
            return Err(Error::Contract("encoder channels must be positive".into()));
        }
        Ok(())
    }

    pub fn feature_dim(&self) -> usize {
        self.channels[1]
    }
}

/// 3×3 convolution, padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub in_c: usize,
    pub out_c: usize,
    pub stride: usize,
    /// [out_c][in_c][3][3]
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

fn out_size(n: usize, stride: usize) -> usize {
    (n + 2 - 3) / stride + 1
}

/// Output index range `[lo, hi)` whose input tap `o*stride + k - 1` is in bounds.
#[inline]
fn valid_range(k: usize, stride: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let lo = if k == 0 { 1usize.div_ceil(stride) } else { 0 };
    // o*stride + k - 1 <= n_in - 1  ⇔  o <= (n_in - k) / stride
    let hi = if n_in + 1 > k {
        ((n_in - k) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

impl Conv {
    fn new(in_c: usize, out_c: usize, stride: usize, rng: &mut impl Rng) -> Self {
        let fan_in = (in_c * 9) as f32;
        let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("valid std");
        Self {
            in_c,
            out_c,
            stride,
            weight: (0..out_c * in_c * 9).map(|_| normal.sample(rng)).collect(),
            bias: vec![0.0; out_c],
        }
    }

    pub fn forward(&self, x: &Tensor3) -> Tensor3 {
        debug_assert_eq!(x.channels, self.in_c);
        let (oh, ow) = (
            out_size(x.height, self.stride),
            out_size(x.width, self.stride),
        );
        let mut out = Tensor3::zeros(self.out_c, oh, ow);
        let s = self.stride;
        for o in 0..self.out_c {
            let dst = out.plane_mut(o);
            dst.iter_mut().for_each(|v| *v = self.bias[o]);
            for i in 0..self.in_c {
                let src = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, s, x.height, oh);
                    for kx in 0..3 {
                        let w = self.weight[((o * self.in_c + i) * 3 + ky) * 3 + kx];
                        let (x0, x1) = valid_range(kx, s, x.width, ow);
                        for oy in y0..y1 {
                            let row = &src[(oy * s + ky - 1) * x.width..];
                            let d = &mut dst[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let r = &row[x0 + kx - 1..x1 + kx - 1];
                                for (dv, rv) in d[x0..x1].iter_mut().zip(r) {
                                    *dv += w * rv;
                                }
                            } else {
                                for ox in x0..x1 {
                                    d[ox] += w * row[ox * s + kx - 1];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Accumulates weight/bias gradients into `grad`; returns the input
    /// gradient when `want_input` is set.
    pub fn backward(
        &self,
        x: &Tensor3,
        dout: &Tensor3,
        grad: &mut ConvGrad,
        want_input: bool,
    ) -> Option<Tensor3> {
        let s = self.stride;
        let (oh, ow) = (dout.height, dout.width);
        let mut dx = want_input.then(|| Tensor3::zeros(x.channels, x.height, x.width));
        for o in 0..self.out_c {
            let g = dout.plane(o);
            grad.bias[o] += g.iter().sum::<f32>();
            for i in 0..self.in_c {
                let src = x.plane(i);
                for ky in 0..3 {
                    let (y0, y1) = valid_range(ky, s, x.height, oh);
                    for kx in 0..3 {
                        let widx = ((o * self.in_c + i) * 3 + ky) * 3 + kx;
                        let (x0, x1) = valid_range(kx, s, x.width, ow);
                        let mut acc = 0.0f32;
                        for oy in y0..y1 {
                            let row = &src[(oy * s + ky - 1) * x.width..];
                            let gr = &g[oy * ow..(oy + 1) * ow];
                            if s == 1 {
                                let r = &row[x0 + kx - 1..x1 + kx - 1];
                                acc += gr[x0..x1].iter().zip(r).map(|(a, b)| a * b).sum::<f32>();
                            } else {
                                for ox in x0..x1 {
                                    acc += gr[ox] * row[ox * s + kx - 1];
                                }
                            }
                        }
                        grad.weight[widx] += acc;
                        if let Some(dx) = dx.as_mut() {
                            let w = self.weight[widx];
                            let width = x.width;
                            let dplane = dx.plane_mut(i);
                            for oy in y0..y1 {
                                let base = (oy * s + ky - 1) * width;
                                let gr = &g[oy * ow..(oy + 1) * ow];
                                for ox in x0..x1 {
                                    dplane[base + ox * s + kx - 1] += w * gr[ox];
                                }
                            }
                        }
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrad {
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

/// Encoder f_θ and linear head q.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub spec: EncoderSpec,
    pub num_classes: usize,
    pub conv1: Conv,
    pub conv2: Conv,
    /// [num_classes][feature_dim]
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
}

/// Gradient buffers, laid out like [`Model::params`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub conv1: ConvGrad,
    pub conv2: ConvGrad,
    pub fc_weight: Vec<f32>,
    pub fc_bias: Vec<f32>,
}

impl Grads {
    pub fn zeros_like(m: &Model) -> Self {
        let cg = |c: &Conv| ConvGrad {
            weight: vec![0.0; c.weight.len()],
            bias: vec![0.0; c.bias.len()],
        };
        Self {
            conv1: cg(&m.conv1),
            conv2: cg(&m.conv2),
            fc_weight: vec![0.0; m.fc_weight.len()],
            fc_bias: vec![0.0; m.fc_bias.len()],
        }
    }

    pub fn slices(&self) -> [&[f32]; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }

    fn slices_mut(&mut self) -> [&mut Vec<f32>; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, k: f32) {
        for a in self.slices_mut() {
            a.iter_mut().for_each(|x| *x *= k);
        }
    }
}

/// Activations kept for the backward pass.
struct Trace {
    input: Tensor3,
    a1: Tensor3,
    a2: Tensor3,
    z: Vec<f32>,
}

fn relu(t: &mut Tensor3) {
    t.data.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Numerically stable log-softmax cross-entropy; returns (loss, dlogits).
pub fn cross_entropy(logits: &[f32], label: usize) -> (f32, Vec<f32>) {
    let max = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let exps: Vec<f32> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f32 = exps.iter().sum();
    let loss = sum.ln() + max - logits[label];
    let mut d: Vec<f32> = exps.iter().map(|e| e / sum).collect();
    d[label] -= 1.0;
    (loss, d)
}

impl Model {
    pub fn new(spec: EncoderSpec, num_classes: usize, rng: &mut impl Rng) -> Result<Self> {
        spec.validate()?;
        if num_classes == 0 {
            return Err(Error::Contract("num_classes must be positive".into()));
        }
        let [c1, c2] = spec.channels;
        let conv1 = Conv::new(3, c1, 1, rng);
        let conv2 = Conv::new(c1, c2, 2, rng);
        let bound = 1.0 / (c2 as f32).sqrt();
        let fc_weight = (0..num_classes * c2)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        Ok(Self {
            spec,
            num_classes,
            conv1,
            conv2,
            fc_weight,
            fc_bias: vec![0.0; num_classes],
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim()
    }

    fn params(&self) -> [&[f32]; 6] {
        [
            &self.conv1.weight,
            &self.conv1.bias,
            &self.conv2.weight,
            &self.conv2.bias,
            &self.fc_weight,
            &self.fc_bias,
        ]
    }

    fn params_mut(&mut self) -> [&mut Vec<f32>; 6] {
        [
            &mut self.conv1.weight,
            &mut self.conv1.bias,
            &mut self.conv2.weight,
            &mut self.conv2.bias,
            &mut self.fc_weight,
            &mut self.fc_bias,
        ]
    }

    pub fn all_finite(&self) -> bool {
        self.params()
            .iter()
            .all(|p| p.iter().all(|v| v.is_finite()))
    }

    fn trace(&self, x: &Tensor3) -> Trace {
        let mut a1 = self.conv1.forward(x);
        relu(&mut a1);
        let mut a2 = self.conv2.forward(&a1);
        relu(&mut a2);
        let n = (a2.height * a2.width) as f32;
        let z = (0..a2.channels)
            .map(|c| a2.plane(c).iter().sum::<f32>() / n)
            .collect();
        Trace {
            input: x.clone(),
            a1,
            a2,
            z,
        }
    }

    /// Encoder output z = f_θ(x).
    pub fn encode(&self, x: &Tensor3) -> Vec<f32> {
        self.trace(x).z
    }

    /// Classifier output y = q(z).
    pub fn classify(&self, z: &[f32]) -> Vec<f32> {
        let d = self.feature_dim();
        (0..self.num_classes)
            .map(|k| {
                self.fc_bias[k]
                    + self.fc_weight[k * d..(k + 1) * d]
                        .iter()
                        .zip(z)
                        .map(|(w, v)| w * v)
                        .sum::<f32>()
            })
            .collect()
    }

    pub fn logits(&self, x: &Tensor3) -> Vec<f32> {
        self.classify(&self.encode(x))
    }

    /// Mean cross-entropy over `views` of one image labelled `label`;
    /// gradients of that mean are accumulated into `grads`.
    pub fn loss_and_grad(&self, views: &[Tensor3], label: usize, grads: &mut Grads) -> f32 {
        let inv = 1.0 / views.len() as f32;
        let d = self.feature_dim();
        let mut total = 0.0;
        for v in views {
            let t = self.trace(v);
            let logits = self.classify(&t.z);
            let (loss, mut dlogits) = cross_entropy(&logits, label);
            total += loss * inv;
            dlogits.iter_mut().for_each(|g| *g *= inv);
            let mut dz = vec![0.0f32; d];
            for (k, &g) in dlogits.iter().enumerate() {
                grads.fc_bias[k] += g;
                let row = &self.fc_weight[k * d..(k + 1) * d];
                let grow = &mut grads.fc_weight[k * d..(k + 1) * d];
                for j in 0..d {
                    grow[j] += g * t.z[j];
                    dz[j] += g * row[j];
                }
            }
            // global average pool + ReLU
            let n = (t.a2.height * t.a2.width) as f32;
            let mut da2 = Tensor3::zeros(t.a2.channels, t.a2.height, t.a2.width);
            for c in 0..t.a2.channels {
                let g = dz[c] / n;
                for (dv, &a) in da2.plane_mut(c).iter_mut().zip(t.a2.plane(c)) {
                    *dv = if a > 0.0 { g } else { 0.0 };
                }
            }
            let mut da1 = self
                .conv2
                .backward(&t.a1, &da2, &mut grads.conv2, true)
                .expect("input gradient requested");
            for (g, &a) in da1.data.iter_mut().zip(&t.a1.data) {
                if a <= 0.0 {
                    *g = 0.0;
                }
            }
            self.conv1.backward(&t.input, &da1, &mut grads.conv1, false);
        }
        total
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn header(&self) -> WeightsHeader {
        WeightsHeader {
            spec: self.spec.clone(),
            num_classes: self.num_classes,
            num_params: self.num_params(),
        }
    }

    /// Binary weights file: magic, u32-LE JSON header length, JSON header,
    /// then all parameters as little-endian f32.
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header())?;
        let mut out = Vec::with_capacity(16 + header.len() + 4 * self.num_params());
        out.extend_from_slice(WEIGHTS_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        for p in self.params() {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::InvalidData(format!("weights file: {m}"));
        let mut cur = bytes;
        let mut magic = [0u8; 8];
        cur.read_exact(&mut magic).map_err(|_| bad("truncated"))?;
        if &magic != WEIGHTS_MAGIC {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 4];
        cur.read_exact(&mut len).map_err(|_| bad("truncated"))?;
        let len = u32::from_le_bytes(len) as usize;
        if cur.len() < len {
            return Err(bad("truncated header"));
        }
        let header: WeightsHeader = serde_json::from_slice(&cur[..len])?;
        cur = &cur[len..];
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut model = Model::new(header.spec, header.num_classes, &mut rng)?;
        if model.num_params() != header.num_params || cur.len() != 4 * header.num_params {
            return Err(bad("parameter count mismatch"));
        }
        for p in model.params_mut() {
            for v in p.iter_mut() {
                let (head, rest) = cur.split_at(4);
                *v = f32::from_le_bytes(head.try_into().expect("4 bytes"));
                cur = rest;
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes()?)
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct WeightsHeader {
    spec: EncoderSpec,
    num_classes: usize,
    num_params: usize,
}

/// SGD with momentum (PyTorch convention) and decoupled-from-bias weight decay.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub momentum: f32,
    pub weight_decay: f32,
    velocity: Option<Grads>,
}

impl Sgd {
    pub fn new(momentum: f32, weight_decay: f32) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: None,
        }
    }

    /// v ← μ·v + (g + λ·w);  w ← w − lr·v. Biases are not decayed.
    pub fn step(&mut self, model: &mut Model, grads: &Grads, lr: f32) {
        let vel = self
            .velocity
            .get_or_insert_with(|| Grads::zeros_like(model));
        let decay = [true, false, true, false, true, false];
        for (((p, g), v), &dec) in model
            .params_mut()
            .into_iter()
            .zip(grads.slices())
            .zip(vel.slices_mut())
            .zip(&decay)
        {
            let wd = if dec { self.weight_decay } else { 0.0 };
            for ((pv, gv), vv) in p.iter_mut().zip(g).zip(v.iter_mut()) {
                *vv = self.momentum * *vv + gv + wd * *pv;
                *pv -= lr * *vv;
            }
        }
    }
}
