//! The full network: extractor, optional pattern bank, classifier and the
//! two discriminators, plus the shared encoding pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::synthdata::DomainDataset;
use crate::networks::{self, BoundLinear, BoundMlp, Linear, Mlp};
use crate::patterns::{self, PatternBank, VladNorm};
use crate::rng::{self, tags};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: usize,
    pub feature_dim: usize,
    /// Number of extractor layers.
    pub extractor_depth: usize,
    /// Extractor layers (counted from the top) updated in phases 2 and 3.
    pub trainable_top: Option<usize>,
    /// Pattern count; 0 replaces aggregation with mean pooling.
    pub patterns: usize,
    pub alpha: f64,
    pub alpha_s: f64,
    pub threshold: f64,
    pub vlad_norm: VladNorm,
    pub disc_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            feature_dim: 16,
            extractor_depth: 2,
            trainable_top: None,
            patterns: 32,
            alpha: 1.0,
            alpha_s: 0.005,
            threshold: 0.02,
            vlad_norm: VladNorm::IntraGlobal,
            disc_hidden: vec![64, 128],
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("hidden", self.hidden),
            ("feature_dim", self.feature_dim),
            ("extractor_depth", self.extractor_depth),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if self.trainable_top.is_some_and(|t| t > self.extractor_depth) {
            return Err(Error::Invalid(format!(
                "trainable_top exceeds extractor depth {}",
                self.extractor_depth
            )));
        }
        if self.disc_hidden.contains(&0) {
            return Err(Error::Invalid("disc_hidden widths must be positive".into()));
        }
        if self.patterns > 0 && !(self.alpha > self.alpha_s && self.alpha_s > 0.0) {
            return Err(Error::Invalid(format!(
                "alpha_s must satisfy 0 < alpha_s < alpha (alpha={}, alpha_s={})",
                self.alpha, self.alpha_s
            )));
        }
        Ok(())
    }

    pub fn trainable_top(&self) -> usize {
        self.trainable_top.unwrap_or(self.extractor_depth)
    }

    /// Width of the holistic code.
    pub fn code_dim(&self) -> usize {
        self.feature_dim * self.patterns.max(1)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub classes: usize,
    pub patch_dim: usize,
    pub extractor: Mlp,
    pub bank: Option<PatternBank>,
    pub classifier: Linear,
    pub disc_h: Mlp,
    pub disc_l: Option<Mlp>,
}

/// Which generator-side parts track gradients.
#[derive(Clone, Copy, Debug)]
pub struct Trainable {
    pub extractor_top: usize,
    pub centers: bool,
    pub classifier: bool,
}

impl Trainable {
    pub const NONE: Trainable = Trainable {
        extractor_top: 0,
        centers: false,
        classifier: false,
    };
}

/// Generator-side parameters bound into one graph.
#[derive(Clone, Debug)]
pub struct BoundModel {
    pub extractor: BoundMlp,
    pub centers: Option<Var>,
    pub classifier: BoundLinear,
}

impl BoundModel {
    /// Vars aligned with [`Model::g_params_mut`].
    pub fn vars(&self) -> Vec<Var> {
        let mut v = self.extractor.vars();
        v.extend(self.centers);
        v.extend(self.classifier.vars());
        v
    }
}

/// Graph nodes produced by [`Model::encode`].
#[derive(Clone, Copy, Debug)]
pub struct Encoded {
    /// `[B, P, d]`.
    pub features: Var,
    /// `[B, P, K]`, absent without a pattern bank.
    pub similarity: Option<Var>,
    /// `[B, code_dim]`.
    pub code: Var,
}

impl Model {
    /// Glorot-initialized network; centers start at zero until k-means runs.
    pub fn new(config: &ModelConfig, classes: usize, patch_dim: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if classes == 0 || patch_dim == 0 {
            return Err(Error::Invalid("classes and patch_dim must be positive".into()));
        }
        let mut r = rng::stream(seed, tags::INIT, 0);
        let mut dims = vec![patch_dim];
        dims.extend(std::iter::repeat_n(config.hidden, config.extractor_depth - 1));
        dims.push(config.feature_dim);
        let extractor = Mlp::new(&dims, &mut r);
        let k = config.patterns;
        let bank = if k > 0 {
            Some(PatternBank::new(
                k,
                config.feature_dim,
                vec![0.0; k * config.feature_dim],
                config.alpha,
                config.alpha_s,
                config.threshold,
            )?)
        } else {
            None
        };
        let classifier = Linear::glorot(config.code_dim(), classes, &mut r);
        let mut hd = vec![config.code_dim()];
        hd.extend(&config.disc_hidden);
        hd.push(1);
        let disc_h = Mlp::new(&hd, &mut r);
        let disc_l = (k > 0).then(|| {
            let mut ld = vec![config.feature_dim + k];
            ld.extend(&config.disc_hidden);
            ld.push(1);
            Mlp::new(&ld, &mut r)
        });
        Ok(Self {
            config: config.clone(),
            classes,
            patch_dim,
            extractor,
            bank,
            classifier,
            disc_h,
            disc_l,
        })
    }

    pub fn k(&self) -> usize {
        self.bank.as_ref().map_or(0, |b| b.k)
    }

    /// Extractor layers, centers, then classifier.
    pub fn g_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.extractor.params_mut();
        if let Some(b) = &mut self.bank {
            v.push(&mut b.centers);
        }
        v.extend(self.classifier.params_mut());
        v
    }

    /// Holistic then local discriminator layers.
    pub fn d_params_mut(&mut self) -> Vec<&mut Vec<f64>> {
        let mut v = self.disc_h.params_mut();
        if let Some(d) = &mut self.disc_l {
            v.extend(d.params_mut());
        }
        v
    }

    /// Every parameter array with a stable name.
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, p) in self.extractor.params_mut().into_iter().enumerate() {
            out.push((format!("extractor.{i}"), p));
        }
        if let Some(b) = &mut self.bank {
            out.push(("centers".to_string(), &mut b.centers));
        }
        for (i, p) in self.classifier.params_mut().into_iter().enumerate() {
            out.push((format!("classifier.{i}"), p));
        }
        for (i, p) in self.disc_h.params_mut().into_iter().enumerate() {
            out.push((format!("disc_h.{i}"), p));
        }
        if let Some(d) = &mut self.disc_l {
            for (i, p) in d.params_mut().into_iter().enumerate() {
                out.push((format!("disc_l.{i}"), p));
            }
        }
        out
    }

    pub fn bind(&self, g: &mut Graph, t: Trainable) -> BoundModel {
        BoundModel {
            extractor: self.extractor.bind(g, t.extractor_top),
            centers: self
                .bank
                .as_ref()
                .map(|b| g.input("centers", b.centers_tensor().with_grad(t.centers))),
            classifier: self.classifier.bind(g, t.classifier),
        }
    }

    /// Patches `[B, P, patch_dim]` to local features, soft assignments and
    /// the holistic code.
    pub fn encode(&self, g: &mut Graph, bound: &BoundModel, patches: Var) -> Result<Encoded> {
        let features = networks::extract_features(g, &bound.extractor, patches)?;
        match (&self.bank, bound.centers) {
            (Some(bank), Some(c)) => {
                let s = patterns::soft_assign(g, features, c, bank.alpha)?;
                let code = patterns::vlad_encode(g, features, s, c, self.config.vlad_norm)?;
                Ok(Encoded {
                    features,
                    similarity: Some(s),
                    code: code.holistic,
                })
            }
            _ => Ok(Encoded {
                features,
                similarity: None,
                code: patterns::mean_pool_code(g, features)?,
            }),
        }
    }

    /// Inference forward on a contiguous batch: class probabilities `[B, C]`
    /// and holistic codes `[B, code_dim]`.
    pub fn forward_eval(&self, patches: Vec<f64>, batch: usize, positions: usize) -> Result<EvalForward> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, Trainable::NONE);
        let x = g.constant(Tensor::new(&[batch, positions, self.patch_dim], patches)?);
        let enc = self.encode(&mut g, &bound, x)?;
        let probs = networks::classify(&mut g, enc.code, &bound.classifier, None)?;
        let hard = enc.similarity.map(|s| patterns::hard_assign(g.value(s)));
        let entropy = match (&self.bank, bound.centers) {
            (Some(bank), Some(c)) => {
                let s = patterns::soft_assign(&mut g, enc.features, c, bank.alpha_s)?;
                let h = patterns::entropy(&mut g, s)?;
                Some(g.values(h).to_vec())
            }
            _ => None,
        };
        Ok(EvalForward {
            probs: g.values(probs).to_vec(),
            codes: g.values(enc.code).to_vec(),
            features: g.values(enc.features).to_vec(),
            hard,
            entropy,
        })
    }
}

/// Runs [`Model::forward_eval`] over `ds` in chunks of `chunk` samples.
pub fn forward_dataset(model: &Model, ds: &DomainDataset, chunk: usize, exec: Exec) -> Result<Vec<EvalForward>> {
    let chunk = chunk.max(1);
    let n_chunks = ds.len().div_ceil(chunk);
    par::map_range(exec, n_chunks, |c| {
        let idx: Vec<usize> = (c * chunk..((c + 1) * chunk).min(ds.len())).collect();
        model.forward_eval(ds.gather(&idx), idx.len(), ds.positions())
    })
    .into_iter()
    .collect()
}

/// Detached outputs of [`Model::forward_eval`].
#[derive(Clone, Debug)]
pub struct EvalForward {
    pub probs: Vec<f64>,
    pub codes: Vec<f64>,
    pub features: Vec<f64>,
    pub hard: Option<patterns::HardAssignment>,
    /// Per-position assignment entropy at the sparsity decay.
    pub entropy: Option<Vec<f64>>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_follow_config() {
        let m = Model::new(&ModelConfig::default(), 4, 8, 0).unwrap();
        assert_eq!(m.extractor.in_dim(), 8);
        assert_eq!(m.extractor.out_dim(), 16);
        assert_eq!(m.classifier.fan_in, 32 * 16);
        assert_eq!(m.disc_h.in_dim(), 512);
        assert_eq!(m.disc_l.as_ref().unwrap().in_dim(), 48);

        let pooled = Model::new(
            &ModelConfig {
                patterns: 0,
                ..ModelConfig::default()
            },
            4,
            8,
            0,
        )
        .unwrap();
        assert!(pooled.bank.is_none() && pooled.disc_l.is_none());
        assert_eq!(pooled.classifier.fan_in, 16);
    }

    #[test]
    fn bound_vars_align_with_params() {
        let mut m = Model::new(&ModelConfig::default(), 4, 8, 0).unwrap();
        let mut g = Graph::new();
        let b = m.bind(
            &mut g,
            Trainable {
                extractor_top: 2,
                centers: true,
                classifier: true,
            },
        );
        let vars = b.vars();
        let params = m.g_params_mut();
        assert_eq!(vars.len(), params.len());
        for (v, p) in vars.iter().zip(params) {
            assert_eq!(g.values(*v), &p[..]);
        }
    }

    #[test]
    fn eval_forward_rows_are_distributions() {
        let m = Model::new(&ModelConfig::default(), 4, 8, 3).unwrap();
        let x: Vec<f64> = (0..2 * 9 * 8).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let out = m.forward_eval(x, 2, 9).unwrap();
        for row in out.probs.chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        assert_eq!(out.hard.unwrap().indices.len(), 18);
    }
}
