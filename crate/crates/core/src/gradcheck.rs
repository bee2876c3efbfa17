//! Finite-difference checks of every objective and its building blocks at
//! random, non-degenerate points.

use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::Result;
use crate::losses::{self, LossWeights};
use crate::networks::{self, Mlp};
use crate::patterns::{self, VladNorm};
use crate::rng::{self, Rng};
use crate::tensor::{grad_check, GradCheck, Graph, Tensor, Var};

/// Finite-difference step used by [`objective_checks`].
pub const STEP: f64 = 1e-5;

const B: usize = 2;
const P: usize = 4;
const D: usize = 3;
const K: usize = 3;
const C: usize = 3;
const DECAY: f64 = 0.8;

#[derive(Clone, Debug, Serialize)]
pub struct ObjectiveCheck {
    pub name: &'static str,
    pub points: usize,
    pub coords: usize,
    pub max_rel_err: f64,
}

fn normal(rng: &mut Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| { let z: f64 = StandardNormal.sample(rng); scale * z }).collect::<Vec<f64>>();
    Tensor::new(shape, v).expect("shape matches")
}

fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v = (0..n).map(|_| rng.random_range(lo..hi)).collect::<Vec<f64>>();
    Tensor::new(shape, v).expect("shape matches")
}

fn labels(rng: &mut Rng, n: usize) -> Tensor {
    let y: Vec<usize> = (0..n).map(|_| rng.random_range(0..C)).collect();
    losses::one_hot_labels(&y, C).expect("labels in range")
}

/// `sum(x * w)` so that any tensor output becomes a scalar with a
/// non-trivial gradient.
fn weighted_sum(g: &mut Graph, x: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let p = g.mul(x, wv)?;
    g.sum_all(p)
}

/// Smallest gap between the best and second-best similarity over rows.
fn assignment_margin(features: &Tensor, centers: &Tensor) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let c = g.constant(centers.clone());
    let s = patterns::soft_assign(&mut g, f, c, DECAY).expect("valid shapes");
    g.values(s)
        .chunks_exact(K)
        .map(|row| {
            let mut r = row.to_vec();
            r.sort_by(|a, b| b.total_cmp(a));
            r[0] - r[1]
        })
        .fold(f64::INFINITY, f64::min)
}

/// Features and centers whose hard assignment is stable under the step.
fn stable_point(rng: &mut Rng, shape: &[usize]) -> (Tensor, Tensor) {
    loop {
        let f = normal(rng, shape, 1.0);
        let c = normal(rng, &[K, D], 1.0);
        if assignment_margin(&f, &c) > 1e-3 {
            return (f, c);
        }
    }
}

/// Entropy threshold halfway between two neighbouring per-position
/// entropies, so both sides of the hinge are exercised.
fn split_threshold(features: &Tensor, centers: &Tensor, decay: f64) -> f64 {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let c = g.constant(centers.clone());
    let s = patterns::soft_assign(&mut g, f, c, decay).expect("valid shapes");
    let h = patterns::entropy(&mut g, s).expect("valid shapes");
    let mut v = g.values(h).to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    0.5 * (v[mid - 1] + v[mid])
}

fn threshold_is_clear(features: &Tensor, centers: &Tensor, decay: f64, m: f64) -> bool {
    let mut g = Graph::new();
    let f = g.constant(features.clone());
    let c = g.constant(centers.clone());
    let s = patterns::soft_assign(&mut g, f, c, decay).expect("valid shapes");
    let h = patterns::entropy(&mut g, s).expect("valid shapes");
    g.values(h).iter().all(|x| (x - m).abs() > 1e-4)
}

struct Acc {
    name: &'static str,
    points: usize,
    coords: usize,
    worst: f64,
}

impl Acc {
    fn new(name: &'static str) -> Self {
        Self {
            name,
            points: 0,
            coords: 0,
            worst: 0.0,
        }
    }

    fn add(&mut self, r: GradCheck) {
        self.points += 1;
        self.coords += r.coords;
        self.worst = self.worst.max(r.max_rel_err);
    }

    fn finish(self) -> ObjectiveCheck {
        ObjectiveCheck {
            name: self.name,
            points: self.points,
            coords: self.coords,
            max_rel_err: self.worst,
        }
    }
}

/// Runs every check at `points` random points drawn from `seed`.
pub fn objective_checks(seed: u64, points: usize) -> Result<Vec<ObjectiveCheck>> {
    let mut out = Vec::new();
    let stream = |i: u64| rng::stream(seed, rng::tags::GRADCHECK, i);

    // Soft assignment.
    let mut acc = Acc::new("soft_assignment");
    let mut r = stream(0);
    for _ in 0..points {
        let f = normal(&mut r, &[B, P, D], 1.0);
        let c = normal(&mut r, &[K, D], 1.0);
        let w = normal(&mut r, &[B, P, K], 1.0);
        acc.add(grad_check(
            |g, v| {
                let s = patterns::soft_assign(g, v[0], v[1], DECAY)?;
                weighted_sum(g, s, &w)
            },
            &[("features", f), ("centers", c)],
            STEP,
        )?);
    }
    out.push(acc.finish());

    // Residual aggregation under each normalization.
    for (i, (name, norm)) in [
        ("aggregation_raw", VladNorm::None),
        ("aggregation_global", VladNorm::Global),
        ("aggregation_intra_global", VladNorm::IntraGlobal),
    ]
    .into_iter()
    .enumerate()
    {
        let mut acc = Acc::new(name);
        let mut r = stream(1 + i as u64);
        for _ in 0..points {
            let f = normal(&mut r, &[B, P, D], 1.0);
            let c = normal(&mut r, &[K, D], 1.0);
            let w = normal(&mut r, &[B, K * D], 1.0);
            acc.add(grad_check(
                |g, v| {
                    let s = patterns::soft_assign(g, v[0], v[1], DECAY)?;
                    let code = patterns::vlad_encode(g, v[0], s, v[1], norm)?;
                    weighted_sum(g, code.holistic, &w)
                },
                &[("features", f), ("centers", c)],
                STEP,
            )?);
        }
        out.push(acc.finish());
    }

    // Entropy hinge.
    let mut acc = Acc::new("sparsity_hinge");
    let mut r = stream(4);
    let alpha_s = 0.5;
    while acc.points < points {
        let f = normal(&mut r, &[B, P, D], 1.0);
        let c = normal(&mut r, &[K, D], 1.0);
        let m = split_threshold(&f, &c, alpha_s);
        if !threshold_is_clear(&f, &c, alpha_s, m) {
            continue;
        }
        acc.add(grad_check(
            |g, v| patterns::sparsity_loss(g, v[0], v[1], alpha_s, m),
            &[("features", f), ("centers", c)],
            STEP,
        )?);
    }
    out.push(acc.finish());

    // Classification.
    let mut acc = Acc::new("classification");
    let mut r = stream(5);
    for _ in 0..points {
        let z = normal(&mut r, &[B, C], 1.0);
        let y = labels(&mut r, B);
        acc.add(grad_check(
            |g, v| {
                let p = g.softmax(v[0])?;
                losses::classification_loss(g, p, &y)
            },
            &[("logits", z)],
            STEP,
        )?);
    }
    out.push(acc.finish());

    // Adversarial terms on discriminator logits kept away from the clamp.
    type AdvLoss = fn(&mut Graph, Var, Var) -> Result<Var>;
    let adversarial: [(&'static str, usize, AdvLoss); 4] = [
        ("holistic_discriminator", 1, losses::holistic_d_loss),
        ("holistic_generator", 1, |g, _, t| losses::holistic_g_loss(g, t)),
        ("local_discriminator", P, losses::local_d_loss),
        ("local_generator", P, |g, _, t| losses::local_g_loss(g, t)),
    ];
    for (i, (name, width, loss)) in adversarial.into_iter().enumerate() {
        let mut acc = Acc::new(name);
        let mut r = stream(6 + i as u64);
        for _ in 0..points {
            let zs = uniform(&mut r, &[B * width, 1], -2.5, 2.5);
            let zt = uniform(&mut r, &[B * width, 1], -2.5, 2.5);
            acc.add(grad_check(
                |g, v| {
                    let ps = g.sigmoid(v[0])?;
                    let pt = g.sigmoid(v[1])?;
                    loss(g, ps, pt)
                },
                &[("source_logits", zs), ("target_logits", zt)],
                STEP,
            )?);
        }
        out.push(acc.finish());
    }

    // Full generator objective through fixed discriminators.
    let mut acc = Acc::new("joint_objective");
    let mut r = stream(10);
    let weights = LossWeights::default();
    for _ in 0..points {
        let (fs, c) = stable_point(&mut r, &[B, P, D]);
        let ft = loop {
            let ft = normal(&mut r, &[B, P, D], 1.0);
            if assignment_margin(&ft, &c) > 1e-3 {
                break ft;
            }
        };
        let wc = normal(&mut r, &[K * D, C], 0.5);
        let y = labels(&mut r, B);
        let dh = Mlp::new(&[K * D, 4, 1], &mut r);
        let dl = Mlp::new(&[D + K, 4, 1], &mut r);
        let m = 0.02;
        acc.add(grad_check(
            |g, v| {
                let (fs, ft, c, wc) = (v[0], v[1], v[2], v[3]);
                let ss = patterns::soft_assign(g, fs, c, DECAY)?;
                let code_s = patterns::vlad_encode(g, fs, ss, c, VladNorm::IntraGlobal)?;
                let logits = g.matmul(code_s.holistic, wc)?;
                let probs = g.softmax(logits)?;
                let l_c = losses::classification_loss(g, probs, &y)?;

                let st = patterns::soft_assign(g, ft, c, DECAY)?;
                let code_t = patterns::vlad_encode(g, ft, st, c, VladNorm::IntraGlobal)?;
                let bh = dh.bind(g, 0);
                let pt = networks::discriminate_holistic(g, code_t.holistic, &bh)?;
                let l_gh = losses::holistic_g_loss(g, pt)?;

                let hard = patterns::hard_assign(g.value(st));
                let res = patterns::residuals(g, ft, c, &hard)?;
                let res = g.reshape(res, &[B * P, D])?;
                let bl = dl.bind(g, 0);
                let qt = networks::discriminate_local(g, res, &hard, &bl)?;
                let l_gl = losses::local_g_loss(g, qt)?;

                let l_s = patterns::sparsity_loss(g, fs, c, 0.5, m)?;
                losses::total_g_loss_var(g, l_c, Some(l_gh), Some(l_gl), Some(l_s), &weights)
            },
            &[("source_features", fs), ("target_features", ft), ("centers", c), ("classifier", wc)],
            STEP,
        )?);
    }
    out.push(acc.finish());
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_objective_passes_at_a_few_points() {
        let checks = objective_checks(3, 2).unwrap();
        assert_eq!(checks.len(), 11);
        for c in &checks {
            assert!(c.max_rel_err < 1e-5, "{}: {}", c.name, c.max_rel_err);
            assert!(c.coords > 0);
        }
    }
}
