//! Classification, adversarial and joint objectives.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Floor on class probabilities before the log.
pub const PROB_EPS: f64 = 1e-12;
/// Discriminator outputs are clamped to `[DISC_EPS, 1 - DISC_EPS]`.
pub const DISC_EPS: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_l: f64,
    pub lambda_s: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 0.2,
            lambda_l: 0.1,
            lambda_s: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_h", self.lambda_h), ("lambda_l", self.lambda_l), ("lambda_s", self.lambda_s)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(())
    }
}

/// Scalar loss values for one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_c: f64,
    pub l_dh: f64,
    pub l_gh: f64,
    pub l_dl: f64,
    pub l_gl: f64,
    pub l_s: f64,
    pub l_total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.l_c, self.l_dh, self.l_gh, self.l_dl, self.l_gl, self.l_s, self.l_total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// `L_c + lambda_h L_Gh + lambda_l L_Gl + lambda_s L_s`.
pub fn total_g_loss(r: &LossReport, w: &LossWeights) -> f64 {
    r.l_c + w.lambda_h * r.l_gh + w.lambda_l * r.l_gl + w.lambda_s * r.l_s
}

/// Same combination on graph scalars; absent terms are skipped.
pub fn total_g_loss_var(
    g: &mut Graph,
    l_c: Var,
    l_gh: Option<Var>,
    l_gl: Option<Var>,
    l_s: Option<Var>,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = l_c;
    for (term, lambda) in [(l_gh, w.lambda_h), (l_gl, w.lambda_l), (l_s, w.lambda_s)] {
        if let Some(t) = term {
            let scaled = g.scale(t, lambda)?;
            total = g.add(total, scaled)?;
        }
    }
    Ok(total)
}

/// Validates one-hot label rows of a `[B, C]` tensor.
pub fn check_one_hot(labels: &Tensor) -> Result<()> {
    let c = *labels.shape().last().expect("non-empty");
    for (i, row) in labels.values().chunks_exact(c).enumerate() {
        let ones = row.iter().filter(|&&v| v == 1.0).count();
        let zeros = row.iter().filter(|&&v| v == 0.0).count();
        if ones != 1 || zeros != c - 1 {
            return Err(Error::Invalid(format!("label row {i} is not one-hot: {row:?}")));
        }
    }
    Ok(())
}

pub fn one_hot_labels(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut v = vec![0.0; labels.len() * classes];
    for (i, &y) in labels.iter().enumerate() {
        if y >= classes {
            return Err(Error::Index {
                what: "class labels",
                index: y,
                size: classes,
            });
        }
        v[i * classes + y] = 1.0;
    }
    Tensor::new(&[labels.len(), classes], v)
}

/// Mean over the batch of `-sum_c y log max(p, eps)`.
pub fn classification_loss(g: &mut Graph, probs: Var, labels: &Tensor) -> Result<Var> {
    if g.shape(probs) != labels.shape() {
        return Err(Error::Shape {
            op: "classification_loss",
            lhs: g.shape(probs).to_vec(),
            rhs: labels.shape().to_vec(),
        });
    }
    check_one_hot(labels)?;
    let safe = g.max_const(probs, PROB_EPS)?;
    let logp = g.log(safe)?;
    let y = g.constant(labels.clone());
    let picked = g.mul(logp, y)?;
    let per = g.sum(picked, &[1], false)?;
    let m = g.mean_all(per)?;
    g.neg(m)
}

fn nonempty(g: &Graph, v: Var, what: &str) -> Result<()> {
    if g.shape(v).first().copied().unwrap_or(0) == 0 {
        return Err(Error::Invalid(format!("empty {what} batch")));
    }
    Ok(())
}

/// `-mean(log clamp(p))` over every element.
fn neg_mean_log(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, DISC_EPS, 1.0 - DISC_EPS)?;
    let l = g.log(c)?;
    let m = g.mean_all(l)?;
    g.neg(m)
}

/// `-mean(log(1 - clamp(p)))` over every element.
fn neg_mean_log_complement(g: &mut Graph, p: Var) -> Result<Var> {
    let c = g.clamp(p, DISC_EPS, 1.0 - DISC_EPS)?;
    let n = g.neg(c)?;
    let q = g.add_scalar(n, 1.0)?;
    let l = g.log(q)?;
    let m = g.mean_all(l)?;
    g.neg(m)
}

/// Holistic discriminator loss over per-sample outputs `[n_s, 1]`, `[n_t, 1]`.
pub fn holistic_d_loss(g: &mut Graph, d_source: Var, d_target: Var) -> Result<Var> {
    nonempty(g, d_source, "source")?;
    nonempty(g, d_target, "target")?;
    let a = neg_mean_log(g, d_source)?;
    let b = neg_mean_log_complement(g, d_target)?;
    g.add(a, b)
}

/// Non-saturating holistic generator loss, target term only.
pub fn holistic_g_loss(g: &mut Graph, d_target: Var) -> Result<Var> {
    nonempty(g, d_target, "target")?;
    neg_mean_log(g, d_target)
}

/// Local discriminator loss over per-position outputs shaped `[n, M*N]`
/// (or `[n, M*N, 1]`): per-sample position means, then the batch mean.
pub fn local_d_loss(g: &mut Graph, d_source: Var, d_target: Var) -> Result<Var> {
    nonempty(g, d_source, "source")?;
    nonempty(g, d_target, "target")?;
    // Every sample contributes the same number of positions, so the mean of
    // per-sample means equals the mean over all positions.
    let a = neg_mean_log(g, d_source)?;
    let b = neg_mean_log_complement(g, d_target)?;
    g.add(a, b)
}

/// Local generator loss on target positions.
pub fn local_g_loss(g: &mut Graph, d_target: Var) -> Result<Var> {
    nonempty(g, d_target, "target")?;
    neg_mean_log(g, d_target)
}
