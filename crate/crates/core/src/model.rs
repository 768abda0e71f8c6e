//! Hypotheses mapping features to [0, 1]: logistic regression and a small MLP.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Features;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative expressed through the pre-activation.
    fn slope(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Logistic {
        inputs: usize,
    },
    Mlp {
        inputs: usize,
        hidden: Vec<usize>,
        activation: Activation,
    },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match self {
            Architecture::Logistic { inputs } | Architecture::Mlp { inputs, .. } => *inputs,
        }
    }

    /// Widths from the input through the single output unit.
    fn widths(&self) -> Vec<usize> {
        match self {
            Architecture::Logistic { inputs } => vec![*inputs, 1],
            Architecture::Mlp { inputs, hidden, .. } => {
                let mut w = vec![*inputs];
                w.extend(hidden);
                w.push(1);
                w
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    /// Two hidden ReLU layers of 64 units.
    pub fn default_mlp(inputs: usize) -> Self {
        Architecture::Mlp {
            inputs,
            hidden: vec![64, 64],
            activation: Activation::Relu,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Reusable buffers for forward and backward passes.
#[derive(Clone, Debug, Default)]
pub struct Scratch {
    pre: Vec<Vec<f64>>,
    post: Vec<Vec<f64>>,
    delta: Vec<f64>,
    next_delta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    arch: Architecture,
    params: Vec<f64>,
}

const MAGIC: &[u8; 4] = b"ATHY";
const VERSION: u32 = 1;

impl Hypothesis {
    pub fn new(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        let expected = arch.param_count();
        if params.len() != expected {
            return Err(Error::Dimension {
                expected,
                got: params.len(),
            });
        }
        if arch.inputs() == 0 || arch.widths().contains(&0) {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        Ok(Self { arch, params })
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        let count = arch.param_count();
        Self::new(arch, vec![0.0; count])
    }

    /// Logistic models start at zero; MLP weights are uniform in +-1/sqrt(fan_in) with zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut h = Self::zeros(arch)?;
        if matches!(h.arch, Architecture::Mlp { .. }) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut offset = 0;
            for w in h.arch.widths().windows(2) {
                let bound = 1.0 / (w[0] as f64).sqrt();
                for p in &mut h.params[offset..offset + w[0] * w[1]] {
                    *p = rng.gen_range(-bound..bound);
                }
                offset += w[0] * w[1] + w[1];
            }
        }
        Ok(h)
    }

    pub fn logistic(inputs: usize) -> Self {
        Self::zeros(Architecture::Logistic { inputs }).expect("positive width")
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.arch.inputs() {
            return Err(Error::Dimension {
                expected: self.arch.inputs(),
                got: x.len(),
            });
        }
        Ok(())
    }

    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        self.check(x)?;
        Ok(self.forward(x, &mut Scratch::default()))
    }

    pub fn grad_predict(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check(x)?;
        let mut grad = vec![0.0; self.params.len()];
        self.accumulate_gradient(x, 1.0, &mut grad, &mut Scratch::default());
        Ok(grad)
    }

    pub fn predict_all(&self, features: &Features) -> Result<Vec<f64>> {
        if features.dim() != self.arch.inputs() {
            return Err(Error::Dimension {
                expected: self.arch.inputs(),
                got: features.dim(),
            });
        }
        let mut scratch = Scratch::default();
        Ok(features.rows().map(|x| self.forward(x, &mut scratch)).collect())
    }

    /// Output logit; fills the scratch activations. Input length is not checked.
    fn logit(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        match &self.arch {
            Architecture::Logistic { inputs } => {
                let (w, b) = self.params.split_at(*inputs);
                dot(w, x) + b[0]
            }
            Architecture::Mlp { activation, .. } => {
                let widths = self.arch.widths();
                let layers = widths.len() - 1;
                scratch.pre.resize(layers - 1, Vec::new());
                scratch.post.resize(layers - 1, Vec::new());
                let mut offset = 0;
                for l in 0..layers - 1 {
                    let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                    let weights = &self.params[offset..offset + fan_in * fan_out];
                    let bias = &self.params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
                    offset += fan_in * fan_out + fan_out;
                    let (done, rest) = scratch.post.split_at_mut(l);
                    let input: &[f64] = if l == 0 { x } else { &done[l - 1] };
                    let pre = &mut scratch.pre[l];
                    pre.clear();
                    pre.extend(weights.chunks_exact(fan_in).zip(bias).map(|(row, b)| dot(row, input) + b));
                    let post = &mut rest[0];
                    post.clear();
                    post.extend(pre.iter().map(|&z| activation.apply(z)));
                }
                let last = &scratch.post[layers - 2];
                let fan_in = widths[layers - 1];
                dot(&self.params[offset..offset + fan_in], last) + self.params[offset + fan_in]
            }
        }
    }

    /// h(x), reusing `scratch`. Input length is not checked.
    pub fn forward(&self, x: &[f64], scratch: &mut Scratch) -> f64 {
        sigmoid(self.logit(x, scratch))
    }

    /// Adds `scale * dh/dtheta` to `grad` and returns h(x). Input length is not checked.
    pub fn accumulate_gradient(&self, x: &[f64], scale: f64, grad: &mut [f64], scratch: &mut Scratch) -> f64 {
        let z = self.logit(x, scratch);
        let h = sigmoid(z);
        // sigma(z) sigma(-z) stays accurate when h rounds to 1.
        let g = scale * h * sigmoid(-z);
        match &self.arch {
            Architecture::Logistic { inputs } => {
                axpy(g, x, &mut grad[..*inputs]);
                grad[*inputs] += g;
            }
            Architecture::Mlp { activation, .. } => {
                let widths = self.arch.widths();
                let layers = widths.len() - 1;
                let offsets: Vec<usize> = widths
                    .windows(2)
                    .scan(0, |acc, w| {
                        let at = *acc;
                        *acc += w[0] * w[1] + w[1];
                        Some(at)
                    })
                    .collect();
                let out_at = offsets[layers - 1];
                let fan_in = widths[layers - 1];
                axpy(g, &scratch.post[layers - 2], &mut grad[out_at..out_at + fan_in]);
                grad[out_at + fan_in] += g;
                scratch.delta.clear();
                scratch.delta.extend(
                    self.params[out_at..out_at + fan_in]
                        .iter()
                        .zip(&scratch.pre[layers - 2])
                        .map(|(&w, &z)| g * w * activation.slope(z)),
                );
                for l in (0..layers - 1).rev() {
                    let (fan_in, fan_out) = (widths[l], widths[l + 1]);
                    let at = offsets[l];
                    let input: &[f64] = if l == 0 { x } else { &scratch.post[l - 1] };
                    for (o, &d) in scratch.delta.iter().enumerate() {
                        if d != 0.0 {
                            axpy(d, input, &mut grad[at + o * fan_in..at + (o + 1) * fan_in]);
                        }
                        grad[at + fan_in * fan_out + o] += d;
                    }
                    if l > 0 {
                        scratch.next_delta.clear();
                        scratch.next_delta.resize(fan_in, 0.0);
                        let weights = &self.params[at..at + fan_in * fan_out];
                        for (o, &d) in scratch.delta.iter().enumerate() {
                            if d != 0.0 {
                                axpy(d, &weights[o * fan_in..(o + 1) * fan_in], &mut scratch.next_delta);
                            }
                        }
                        for (nd, &z) in scratch.next_delta.iter_mut().zip(&scratch.pre[l - 1]) {
                            *nd *= activation.slope(z);
                        }
                        std::mem::swap(&mut scratch.delta, &mut scratch.next_delta);
                    }
                }
            }
        }
        h
    }

    /// Architecture header followed by little-endian f64 parameters.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let (tag, inputs, hidden, act): (u32, usize, &[usize], u32) = match &self.arch {
            Architecture::Logistic { inputs } => (0, *inputs, &[], 0),
            Architecture::Mlp {
                inputs,
                hidden,
                activation,
            } => (1, *inputs, hidden, (*activation == Activation::Tanh) as u32),
        };
        out.extend_from_slice(&tag.to_le_bytes());
        out.extend_from_slice(&(inputs as u32).to_le_bytes());
        out.extend_from_slice(&(hidden.len() as u32).to_le_bytes());
        for &h in hidden {
            out.extend_from_slice(&(h as u32).to_le_bytes());
        }
        out.extend_from_slice(&act.to_le_bytes());
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&p.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = 0usize;
        let err = |at: usize, msg: &str| Error::Parse {
            path: "<checkpoint>".into(),
            offset: at as u64,
            message: msg.into(),
        };
        let mut take = |len: usize| -> Result<&[u8]> {
            let at = cursor;
            if bytes.len() < at + len {
                return Err(err(at, "truncated checkpoint"));
            }
            cursor += len;
            Ok(&bytes[at..at + len])
        };
        if take(4)? != MAGIC {
            return Err(err(0, "bad magic"));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap());
        if u32_at(take(4)?) != VERSION {
            return Err(err(4, "unsupported version"));
        }
        let tag = u32_at(take(4)?);
        let inputs = u32_at(take(4)?) as usize;
        let layers = u32_at(take(4)?) as usize;
        let mut hidden = Vec::with_capacity(layers.min(64));
        for _ in 0..layers {
            hidden.push(u32_at(take(4)?) as usize);
        }
        let act = u32_at(take(4)?);
        let count = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
        let arch = match (tag, act) {
            (0, _) => Architecture::Logistic { inputs },
            (1, 0) => Architecture::Mlp {
                inputs,
                hidden,
                activation: Activation::Relu,
            },
            (1, 1) => Architecture::Mlp {
                inputs,
                hidden,
                activation: Activation::Tanh,
            },
            _ => return Err(err(8, "unknown architecture")),
        };
        let body = take(count.checked_mul(8).ok_or_else(|| err(0, "parameter count overflows"))?)?;
        let params = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        if cursor != bytes.len() {
            return Err(err(cursor, "trailing bytes"));
        }
        Self::new(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Parse { offset, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                offset,
                message,
            },
            other => other,
        })
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn random_point(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn logistic_closed_forms() {
        let h = Hypothesis::logistic(3);
        assert_eq!(h.predict(&[1.0, -4.0, 9.0]).unwrap(), 0.5);
        let h = Hypothesis::new(Architecture::Logistic { inputs: 2 }, vec![0.0, 0.0, 10.0]).unwrap();
        assert_relative_eq!(h.predict(&[3.0, 1.0]).unwrap(), 1.0 / (1.0 + (-10f64).exp()), max_relative = 1e-15);
        let h = Hypothesis::new(Architecture::Logistic { inputs: 2 }, vec![0.3, -0.2, 0.1]).unwrap();
        let x = [0.5, 2.0];
        let v = h.predict(&x).unwrap();
        let g = h.grad_predict(&x).unwrap();
        let s = v * (1.0 - v);
        for (a, b) in g.iter().zip([s * 0.5, s * 2.0, s]) {
            assert_relative_eq!(*a, b, max_relative = 1e-12);
        }
        assert!(h.predict(&[1.0]).is_err());
    }

    #[test]
    fn saturated_gradient_vanishes() {
        let h = Hypothesis::new(Architecture::Logistic { inputs: 2 }, vec![0.0, 0.0, 30.0]).unwrap();
        let g = h.grad_predict(&[0.5, -0.5]).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12);
        let h = Hypothesis::new(Architecture::Logistic { inputs: 2 }, vec![0.0, 0.0, -30.0]).unwrap();
        let g = h.grad_predict(&[0.5, -0.5]).unwrap();
        assert!(g.iter().map(|v| v * v).sum::<f64>().sqrt() <= 1e-12);
    }

    #[test]
    fn mlp_hand_forward() {
        // 2 -> 2 -> 1 with identity-like first layer.
        let arch = Architecture::Mlp { inputs: 2, hidden: vec![2], activation: Activation::Relu };
        let params = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 2.0, -1.0, 0.5];
        let h = Hypothesis::new(arch, params).unwrap();
        let x = [0.3, 0.7];
        assert_relative_eq!(h.predict(&x).unwrap(), sigmoid(2.0 * 0.3 - 0.7 + 0.5), max_relative = 1e-15);
        // negative input is cut by ReLU
        assert_relative_eq!(h.predict(&[-1.0, 0.2]).unwrap(), sigmoid(-0.2 + 0.5), max_relative = 1e-15);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let archs = [
            Architecture::Logistic { inputs: 5 },
            Architecture::Mlp { inputs: 5, hidden: vec![7, 4], activation: Activation::Relu },
            Architecture::Mlp { inputs: 5, hidden: vec![6], activation: Activation::Tanh },
        ];
        for arch in archs {
            for trial in 0..50 {
                let mut h = Hypothesis::init(arch.clone(), trial).unwrap();
                for p in h.params_mut() {
                    *p += rng.gen_range(-0.5..0.5);
                }
                let x = random_point(&mut rng, 5);
                let g = h.grad_predict(&x).unwrap();
                let step = 1e-6;
                for q in 0..g.len() {
                    let mut plus = h.clone();
                    plus.params_mut()[q] += step;
                    let mut minus = h.clone();
                    minus.params_mut()[q] -= step;
                    let fd = (plus.predict(&x).unwrap() - minus.predict(&x).unwrap()) / (2.0 * step);
                    assert!((fd - g[q]).abs() <= 1e-5, "param {q}: {fd} vs {}", g[q]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        for arch in [Architecture::Logistic { inputs: 4 }, Architecture::default_mlp(4)] {
            let mut h = Hypothesis::init(arch, 9).unwrap();
            h.params_mut()[0] = f64::from_bits(0x3ff0_0000_0000_0001);
            let bytes = h.to_bytes();
            let back = Hypothesis::from_bytes(&bytes).unwrap();
            assert_eq!(back, h);
            assert!(back.params().iter().zip(h.params()).all(|(a, b)| a.to_bits() == b.to_bits()));
            assert!(Hypothesis::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        }
    }

    #[test]
    fn predictions_are_deterministic_and_bounded() {
        let h = Hypothesis::init(Architecture::default_mlp(3), 1).unwrap();
        let x = [1e6, -1e6, 3.0];
        let a = h.predict(&x).unwrap();
        assert_eq!(a, h.predict(&x).unwrap());
        assert!((0.0..=1.0).contains(&a));
        assert_eq!(Hypothesis::init(Architecture::default_mlp(3), 1).unwrap(), h);
    }
}
