//! Learnable components: the shared per-patch extractor, the single-layer
//! classifier and the two domain discriminators.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patterns::HardAssignment;
use crate::rng::Rng;
use crate::tensor::{Graph, Tensor, Var};

/// Fully-connected layer `y = x W + b`, `W: [fan_in, fan_out]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            fan_in,
            fan_out,
            weight: vec![0.0; fan_in * fan_out],
            bias: vec![0.0; fan_out],
        }
    }

    /// Uniform in `+-sqrt(6 / (fan_in + fan_out))`, zero bias.
    pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Self {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            fan_in,
            fan_out,
            weight,
            bias: vec![0.0; fan_out],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut l = Self::zeros(n, n);
        for i in 0..n {
            l.weight[i * n + i] = 1.0;
        }
        l
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundLinear {
        let w = Tensor::new(&[self.fan_in, self.fan_out], self.weight.clone()).expect("consistent layer");
        let b = Tensor::new(&[self.fan_out], self.bias.clone()).expect("consistent layer");
        BoundLinear {
            weight: g.input("w", w.with_grad(trainable)),
            bias: g.input("b", b.with_grad(trainable)),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Vec<f64>; 2] {
        [&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> [&Vec<f64>; 2] {
        [&self.weight, &self.bias]
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: Var,
    pub bias: Var,
}

impl BoundLinear {
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let h = g.matmul(x, self.weight)?;
        g.add(h, self.bias)
    }

    pub fn vars(&self) -> [Var; 2] {
        [self.weight, self.bias]
    }
}

/// Stack of linear layers with relu between consecutive layers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Linear>,
}

impl Mlp {
    /// Glorot-initialized layers through `dims[0] -> dims[1] -> ...`.
    pub fn new(dims: &[usize], rng: &mut Rng) -> Self {
        Self {
            layers: dims.windows(2).map(|w| Linear::glorot(w[0], w[1], rng)).collect(),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().map_or(0, |l| l.fan_in)
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map_or(0, |l| l.fan_out)
    }

    /// Binds every layer; the top `trainable_top` layers track gradients.
    pub fn bind(&self, g: &mut Graph, trainable_top: usize) -> BoundMlp {
        let n = self.layers.len();
        BoundMlp {
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.bind(g, i + trainable_top >= n))
                .collect(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&Vec<f64>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub layers: Vec<BoundLinear>,
}

impl BoundMlp {
    /// `x: [rows, in]` to `[rows, out]`; no activation after the last layer.
    pub fn apply(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.apply(g, h)?;
            if i + 1 < self.layers.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.layers.iter().flat_map(|l| l.vars()).collect()
    }
}

/// Applies the shared extractor to every patch: `[B, P, patch_dim]` to
/// `[B, P, d]`.
pub fn extract_features(g: &mut Graph, extractor: &BoundMlp, patches: Var) -> Result<Var> {
    let shape = g.shape(patches).to_vec();
    let [b, p, din] = shape[..] else {
        return Err(Error::Shape {
            op: "extract_features",
            lhs: shape,
            rhs: vec![0, 0, 0],
        });
    };
    let flat = g.reshape(patches, &[b * p, din])?;
    let out = extractor.apply(g, flat)?;
    let d = g.shape(out)[1];
    g.reshape(out, &[b, p, d])
}

/// Inverted-dropout mask: entries are `0` or `1 / (1 - rate)`.
pub fn dropout_mask(shape: &[usize], rate: f64, rng: &mut Rng) -> Result<Tensor> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::Invalid(format!("dropout rate must lie in [0, 1), got {rate}")));
    }
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let vals = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    Tensor::new(shape, vals)
}

/// Class probabilities `softmax(dropout(code) W + b)`. Dropout is applied
/// only when `mask` is given (training mode).
pub fn classify(g: &mut Graph, code: Var, classifier: &BoundLinear, mask: Option<&Tensor>) -> Result<Var> {
    let x = match mask {
        Some(m) => {
            let mv = g.constant(m.clone());
            g.mul(code, mv)?
        }
        None => code,
    };
    let logits = classifier.apply(g, x)?;
    g.softmax(logits)
}

/// Probability that each code row is from the source domain, `[rows, 1]`.
pub fn discriminate_holistic(g: &mut Graph, code: Var, disc: &BoundMlp) -> Result<Var> {
    let z = disc.apply(g, code)?;
    g.sigmoid(z)
}

/// Conditional local discriminator on `residual ++ one_hot(pattern)`,
/// `residual: [rows, d]`, returns `[rows, 1]`.
pub fn discriminate_local(g: &mut Graph, residual: Var, patterns: &HardAssignment, disc: &BoundMlp) -> Result<Var> {
    let onehot = g.constant(patterns.one_hot()?);
    let x = g.concat(&[residual, onehot])?;
    let z = disc.apply(g, x)?;
    g.sigmoid(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn identity_extractor_passes_input_through() {
        let ex = Mlp {
            layers: vec![Linear::identity(3)],
        };
        let mut g = Graph::new();
        let bound = ex.bind(&mut g, 0);
        let vals: Vec<f64> = (0..12).map(|i| i as f64 * 0.25 - 1.0).collect();
        let x = g.constant(Tensor::new(&[2, 2, 3], vals.clone()).unwrap());
        let y = extract_features(&mut g, &bound, x).unwrap();
        assert_eq!(g.values(y), &vals[..]);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero() {
        let mut r = rng::stream(1, 0, 0);
        let ex = Mlp::new(&[4, 8, 3], &mut r);
        let mut g = Graph::new();
        let bound = ex.bind(&mut g, 0);
        let x = g.constant(Tensor::zeros(&[1, 5, 4]));
        let y = extract_features(&mut g, &bound, x).unwrap();
        assert!(g.values(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let cls = Linear::zeros(6, 4);
        let mut g = Graph::new();
        let b = cls.bind(&mut g, false);
        let code = g.constant(Tensor::full(&[2, 6], 0.3));
        let p = classify(&mut g, code, &b, None).unwrap();
        assert!(g.values(p).iter().all(|&v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn zero_discriminators_output_half() {
        let d = Mlp {
            layers: vec![Linear::zeros(5, 3), Linear::zeros(3, 2), Linear::zeros(2, 1)],
        };
        let mut g = Graph::new();
        let b = d.bind(&mut g, 0);
        let code = g.constant(Tensor::full(&[3, 5], 0.7));
        let p = discriminate_holistic(&mut g, code, &b).unwrap();
        assert_eq!(g.values(p), &[0.5, 0.5, 0.5]);

        let dl = Mlp {
            layers: vec![Linear::zeros(4, 3), Linear::zeros(3, 2), Linear::zeros(2, 1)],
        };
        let bl = dl.bind(&mut g, 0);
        let r = g.constant(Tensor::full(&[2, 2], 0.1));
        let a = HardAssignment { k: 2, indices: vec![0, 1] };
        let q = discriminate_local(&mut g, r, &a, &bl).unwrap();
        assert_eq!(g.values(q), &[0.5, 0.5]);
    }

    #[test]
    fn saturated_holistic_discriminator() {
        let mut d = Mlp {
            layers: vec![Linear::zeros(2, 2), Linear::zeros(2, 2), Linear::zeros(2, 1)],
        };
        d.layers[2].bias[0] = 40.0;
        let mut g = Graph::new();
        let b = d.bind(&mut g, 0);
        let code = g.constant(Tensor::full(&[1, 2], 0.5));
        let p = discriminate_holistic(&mut g, code, &b).unwrap();
        assert!((g.values(p)[0] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn local_discriminator_rejects_bad_pattern() {
        let mut r = rng::stream(2, 0, 0);
        let dl = Mlp::new(&[4, 3, 2, 1], &mut r);
        let mut g = Graph::new();
        let b = dl.bind(&mut g, 0);
        let res = g.constant(Tensor::zeros(&[1, 2]));
        let a = HardAssignment { k: 2, indices: vec![5] };
        assert!(matches!(discriminate_local(&mut g, res, &a, &b), Err(Error::Index { .. })));
    }
}
