//! Local feature pattern bank: k-means initialization, soft assignment,
//! residual aggregation, hard assignment and the assignment-entropy hinge.
//!
//! Graph-level functions take local features as a `[B, P, d]` variable
//! (`P = M * N` grid positions, row-major over the grid) and centers as a
//! `[K, d]` variable.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng;
use crate::tensor::{Graph, Tensor, Var};

/// Squared-norm floor used by every L2 normalization.
pub const NORM_FLOOR: f64 = 1e-12;
/// Lower clamp on similarities before taking logs.
const LOG_FLOOR: f64 = 1e-300;

/// `B x M x N x d` grid of local features.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub batch: usize,
    pub rows: usize,
    pub cols: usize,
    pub dim: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn new(batch: usize, rows: usize, cols: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        if batch == 0 || rows == 0 || cols == 0 || dim == 0 {
            return Err(Error::Invalid("feature map dimensions must be positive".into()));
        }
        if values.len() != batch * rows * cols * dim {
            return Err(Error::Shape {
                op: "feature_map",
                lhs: vec![batch, rows, cols, dim],
                rhs: vec![values.len()],
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "feature_map" });
        }
        Ok(Self {
            batch,
            rows,
            cols,
            dim,
            values,
        })
    }

    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    /// `[B, M*N, d]` tensor view.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(&[self.batch, self.positions(), self.dim], self.values.clone()).expect("validated")
    }
}

/// K pattern centers plus the aggregation decay, the sparsity decay and the
/// entropy threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatternBank {
    pub k: usize,
    pub dim: usize,
    pub centers: Vec<f64>,
    pub alpha: f64,
    pub alpha_s: f64,
    pub threshold: f64,
}

impl PatternBank {
    pub fn new(k: usize, dim: usize, centers: Vec<f64>, alpha: f64, alpha_s: f64, threshold: f64) -> Result<Self> {
        if k == 0 || dim == 0 {
            return Err(Error::Invalid("pattern bank needs K >= 1 and d >= 1".into()));
        }
        if centers.len() != k * dim {
            return Err(Error::Shape {
                op: "pattern_bank",
                lhs: vec![k, dim],
                rhs: vec![centers.len()],
            });
        }
        if centers.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { op: "pattern_bank" });
        }
        if !(alpha > alpha_s && alpha_s > 0.0) {
            return Err(Error::Invalid(format!(
                "decays must satisfy alpha > alpha_s > 0 (alpha={alpha}, alpha_s={alpha_s})"
            )));
        }
        if !(threshold >= 0.0 && threshold.is_finite()) {
            return Err(Error::Invalid(format!("entropy threshold must be >= 0, got {threshold}")));
        }
        Ok(Self {
            k,
            dim,
            centers,
            alpha,
            alpha_s,
            threshold,
        })
    }

    pub fn centers_tensor(&self) -> Tensor {
        Tensor::new(&[self.k, self.dim], self.centers.clone()).expect("validated")
    }
}

/// Normalization applied to the stacked residual descriptor.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VladNorm {
    None,
    Global,
    #[default]
    IntraGlobal,
}

/// Aggregated residuals: `raw` is `[B, K, d]` (row `k` is column `k` of the
/// `d x K` descriptor) and `holistic` is `[B, K*d]`.
#[derive(Clone, Copy, Debug)]
pub struct VladCode {
    pub raw: Var,
    pub holistic: Var,
}

/// Flattens `[.., d]` into `[rows, d]`.
fn rows_of(g: &mut Graph, x: Var, dim: usize, op: &'static str) -> Result<(Var, Vec<usize>)> {
    let shape = g.shape(x).to_vec();
    if shape.last() != Some(&dim) {
        return Err(Error::Shape {
            op,
            lhs: shape,
            rhs: vec![dim],
        });
    }
    let rows = shape.iter().product::<usize>() / dim;
    Ok((g.reshape(x, &[rows, dim])?, shape))
}

fn center_dims(g: &Graph, centers: Var) -> Result<(usize, usize)> {
    match g.shape(centers) {
        [k, d] => Ok((*k, *d)),
        s => Err(Error::Shape {
            op: "centers",
            lhs: s.to_vec(),
            rhs: vec![0, 0],
        }),
    }
}

/// Squared distances `[rows, K]` between every local feature and every center.
pub fn squared_distances(g: &mut Graph, features: Var, centers: Var) -> Result<(Var, Vec<usize>)> {
    let (k, d) = center_dims(g, centers)?;
    let (f2, shape) = rows_of(g, features, d, "soft_assign")?;
    let cross = g.matmul_t(f2, centers, false, true)?;
    let fsq = g.square(f2)?;
    let fnorm = g.sum(fsq, &[1], true)?;
    let csq = g.square(centers)?;
    let cnorm = g.sum(csq, &[1], false)?;
    let cnorm = g.reshape(cnorm, &[1, k])?;
    let twice = g.scale(cross, -2.0)?;
    let partial = g.add(fnorm, twice)?;
    let d2 = g.add(partial, cnorm)?;
    Ok((d2, shape))
}

/// Soft assignment `S[.., k] = softmax_k(-decay * |F - c_k|^2)`, shaped like
/// `features` with the last axis replaced by K.
pub fn soft_assign(g: &mut Graph, features: Var, centers: Var, decay: f64) -> Result<Var> {
    let (k, _) = center_dims(g, centers)?;
    let (d2, mut shape) = squared_distances(g, features, centers)?;
    let logits = g.scale(d2, -decay)?;
    let s = g.softmax(logits)?;
    *shape.last_mut().expect("non-empty") = k;
    g.reshape(s, &shape)
}

/// Reorders positions of each sample lexicographically by (feature, similarity)
/// rows through a constant permutation matrix, so sums over positions are
/// bitwise independent of how the grid was enumerated.
fn canonical_order(g: &mut Graph, features: Var, similarity: Var) -> Result<(Var, Var)> {
    let (b, p, d) = match g.shape(features) {
        [b, p, d] => (*b, *p, *d),
        _ => unreachable!("checked by caller"),
    };
    let k = g.shape(similarity)[2];
    let fv = g.values(features);
    let sv = g.values(similarity);
    let mut perm = vec![0.0; b * p * p];
    let mut order: Vec<usize> = Vec::with_capacity(p);
    for s in 0..b {
        let row_f = |i: usize| &fv[(s * p + i) * d..(s * p + i + 1) * d];
        let row_s = |i: usize| &sv[(s * p + i) * k..(s * p + i + 1) * k];
        let lex = |x: &[f64], y: &[f64]| {
            x.iter()
                .zip(y)
                .map(|(a, b)| a.total_cmp(b))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        };
        order.clear();
        order.extend(0..p);
        order.sort_by(|&i, &j| lex(row_f(i), row_f(j)).then_with(|| lex(row_s(i), row_s(j))));
        for (dst, &src) in order.iter().enumerate() {
            perm[(s * p + dst) * p + src] = 1.0;
        }
    }
    let perm = g.constant(Tensor::new(&[b, p, p], perm)?);
    let f = g.matmul(perm, features)?;
    let sim = g.matmul(perm, similarity)?;
    Ok((f, sim))
}

/// Residual aggregation `V[b,k,:] = sum_p S[b,p,k] (F[b,p,:] - c_k)` followed by
/// the configured normalization.
pub fn vlad_encode(g: &mut Graph, features: Var, similarity: Var, centers: Var, norm: VladNorm) -> Result<VladCode> {
    let (k, d) = center_dims(g, centers)?;
    let fs = g.shape(features).to_vec();
    let ss = g.shape(similarity).to_vec();
    if fs.len() != 3 || ss.len() != 3 || fs[0] != ss[0] || fs[1] != ss[1] || fs[2] != d || ss[2] != k {
        return Err(Error::Shape {
            op: "vlad_encode",
            lhs: fs,
            rhs: ss,
        });
    }
    let b = fs[0];
    let (features, similarity) = canonical_order(g, features, similarity)?;
    let weighted = g.matmul_t(similarity, features, true, false)?; // [B, K, d]
    let mass = g.sum(similarity, &[1], true)?; // [B, 1, K]
    let mass = g.reshape(mass, &[b, k, 1])?;
    let shift = g.mul(mass, centers)?; // [B, K, d]
    let raw = g.sub(weighted, shift)?;
    let cols = match norm {
        VladNorm::IntraGlobal => g.l2_normalize(raw, &[2], NORM_FLOOR)?,
        _ => raw,
    };
    let flat = g.reshape(cols, &[b, k * d])?;
    let holistic = match norm {
        VladNorm::None => flat,
        _ => g.l2_normalize(flat, &[1], NORM_FLOOR)?,
    };
    Ok(VladCode { raw, holistic })
}

/// Mean over positions of the local features, L2 normalized: the holistic
/// code when no pattern bank is configured. Returns `[B, d]`.
pub fn mean_pool_code(g: &mut Graph, features: Var) -> Result<Var> {
    let m = g.mean(features, &[1], false)?;
    g.l2_normalize(m, &[1], NORM_FLOOR)
}

/// Per-position entropy `H = -sum_k S log S` over the last axis, with that
/// axis removed.
pub fn entropy(g: &mut Graph, similarity: Var) -> Result<Var> {
    let rank = g.shape(similarity).len();
    let safe = g.max_const(similarity, LOG_FLOOR)?;
    let logs = g.log(safe)?;
    let plogp = g.mul(similarity, logs)?;
    let s = g.sum(plogp, &[rank - 1], false)?;
    g.neg(s)
}

/// Sparsity loss: mean over batch and positions of `max(H, m)`, where `H`
/// is the entropy of the soft assignment at decay `alpha_s`.
pub fn sparsity_loss(g: &mut Graph, features: Var, centers: Var, alpha_s: f64, threshold: f64) -> Result<Var> {
    let s = soft_assign(g, features, centers, alpha_s)?;
    let h = entropy(g, s)?;
    let hinge = g.max_const(h, threshold)?;
    g.mean_all(hinge)
}

/// Argmax pattern index per position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HardAssignment {
    pub k: usize,
    pub indices: Vec<usize>,
}

/// Per-row argmax over the last axis; ties go to the smallest index.
pub fn hard_assign(similarity: &Tensor) -> HardAssignment {
    let k = *similarity.shape().last().expect("non-empty shape");
    let indices = similarity
        .values()
        .chunks_exact(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    HardAssignment { k, indices }
}

impl HardAssignment {
    /// `[len, K]` one-hot rows.
    pub fn one_hot(&self) -> Result<Tensor> {
        let mut v = vec![0.0; self.indices.len() * self.k];
        for (r, &i) in self.indices.iter().enumerate() {
            if i >= self.k {
                return Err(Error::Index {
                    what: "pattern bank",
                    index: i,
                    size: self.k,
                });
            }
            v[r * self.k + i] = 1.0;
        }
        Tensor::new(&[self.indices.len(), self.k], v)
    }
}

/// `F - c[a]` per position, shaped like `features`. The assignment is a
/// constant; gradients reach both the features and the centers.
pub fn residuals(g: &mut Graph, features: Var, centers: Var, assignment: &HardAssignment) -> Result<Var> {
    let (k, d) = center_dims(g, centers)?;
    if assignment.k != k {
        return Err(Error::Shape {
            op: "residuals",
            lhs: vec![assignment.k],
            rhs: vec![k],
        });
    }
    let (f2, shape) = rows_of(g, features, d, "residuals")?;
    if g.shape(f2)[0] != assignment.indices.len() {
        return Err(Error::Shape {
            op: "residuals",
            lhs: shape,
            rhs: vec![assignment.indices.len()],
        });
    }
    let onehot = g.constant(assignment.one_hot()?);
    let picked = g.matmul(onehot, centers)?;
    let r = g.sub(f2, picked)?;
    g.reshape(r, &shape)
}

/// Lloyd iterations from k-means++ seeds.
#[derive(Clone, Debug)]
pub struct KMeans {
    pub k: usize,
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centers: Vec<f64>,
    /// Inertia after each assignment step.
    pub inertia: Vec<f64>,
    pub iterations: usize,
}

#[derive(Clone, Copy, Debug)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iters: usize,
    pub tol: f64,
    pub exec: Exec,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            max_iters: 100,
            tol: 1e-6,
            exec: Exec::default(),
        }
    }
}

fn sqdist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centers: &[f64], dim: usize) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.chunks_exact(dim).enumerate() {
        let d = sqdist(point, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Clusters `n = points.len() / dim` points into `k` centers.
///
/// Empty clusters are re-seeded at the point farthest from its own center.
pub fn kmeans(points: &[f64], dim: usize, k: usize, opts: KMeansOptions) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::Invalid(format!("{} values do not form rows of width {dim}", points.len())));
    }
    let n = points.len() / dim;
    if k == 0 || n < k {
        return Err(Error::Invalid(format!("k-means needs at least K={k} points, got {n}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "kmeans" });
    }
    let row = |i: usize| &points[i * dim..(i + 1) * dim];
    let mut rng = rng::stream(opts.seed, rng::tags::KMEANS, 0);

    // k-means++ seeding.
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    centers.extend_from_slice(row(first));
    let mut d2: Vec<f64> = (0..n).map(|i| sqdist(row(i), row(first))).collect();
    for _ in 1..k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    chosen = i;
                    break;
                }
                u -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centers.extend_from_slice(row(pick));
        for (i, d) in d2.iter_mut().enumerate() {
            *d = d.min(sqdist(row(i), row(pick)));
        }
    }

    let mut inertia = Vec::new();
    let mut iterations = 0;
    let mut assign = vec![(0usize, 0.0f64); n];
    for _ in 0..opts.max_iters {
        iterations += 1;
        let cs = &centers;
        let found = par::map_range(opts.exec, n, |i| nearest(row(i), cs, dim));
        assign.copy_from_slice(&found);
        inertia.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            counts[c] += 1;
            for (s, x) in sums[c * dim..(c + 1) * dim].iter_mut().zip(row(i)) {
                *s += x;
            }
        }
        let mut next = sums;
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] == 0 {
                let far = (0..n)
                    .filter(|&i| !taken[i])
                    .max_by(|&a, &b| assign[a].1.total_cmp(&assign[b].1).then(b.cmp(&a)))
                    .expect("n >= k");
                taken[far] = true;
                next[c * dim..(c + 1) * dim].copy_from_slice(row(far));
            } else {
                let cnt = counts[c] as f64;
                next[c * dim..(c + 1) * dim].iter_mut().for_each(|s| *s /= cnt);
            }
        }
        let shift = next
            .chunks_exact(dim)
            .zip(centers.chunks_exact(dim))
            .map(|(a, b)| sqdist(a, b).sqrt())
            .fold(0.0, f64::max);
        centers = next;
        if shift < opts.tol {
            break;
        }
    }
    Ok(KMeans {
        k,
        dim,
        centers,
        inertia,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fm_var(g: &mut Graph, b: usize, p: usize, d: usize, vals: Vec<f64>) -> Var {
        g.constant(Tensor::new(&[b, p, d], vals).unwrap())
    }

    #[test]
    fn soft_assign_two_centers_scalar_feature() {
        // Squared distances 0 and 1 give weights e^0 and e^-1.
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 1, 1, vec![0.0]);
        let c = g.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let s = soft_assign(&mut g, f, c, 1.0).unwrap();
        let expect0 = 1.0 / (1.0 + (-1.0f64).exp());
        assert!((g.values(s)[0] - expect0).abs() < 1e-12);
        assert!((g.values(s)[0] - 0.73106).abs() < 1e-5);
        assert!((g.values(s)[1] - 0.26894).abs() < 1e-5);
    }

    #[test]
    fn equidistant_feature_is_uniform() {
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 1, 2, vec![0.0, 0.0]);
        let c = g.constant(Tensor::new(&[4, 2], vec![1.0, 0.0, -1.0, 0.0, 0.0, 1.0, 0.0, -1.0]).unwrap());
        let s = soft_assign(&mut g, f, c, 3.0).unwrap();
        for &p in g.values(s) {
            assert!((p - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn large_decay_is_one_hot() {
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 1, 2, vec![0.2, 0.1]);
        let c = g.constant(Tensor::new(&[3, 2], vec![0.0, 0.0, 1.0, 1.0, -1.0, 0.5]).unwrap());
        let s = soft_assign(&mut g, f, c, 5000.0).unwrap();
        assert!((g.values(s)[0] - 1.0).abs() < 1e-12);
        assert!(g.values(s)[1] < 1e-12 && g.values(s)[2] < 1e-12);
    }

    #[test]
    fn vlad_single_feature_examples() {
        // F = 0.5, centers [0, 1], decay 1 -> S = [0.5, 0.5], V = [0.25, -0.25].
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 1, 1, vec![0.5]);
        let c = g.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let s = soft_assign(&mut g, f, c, 1.0).unwrap();
        assert!((g.values(s)[0] - 0.5).abs() < 1e-15);
        let v = vlad_encode(&mut g, f, s, c, VladNorm::None).unwrap();
        assert!((g.values(v.raw)[0] - 0.25).abs() < 1e-15);
        assert!((g.values(v.raw)[1] + 0.25).abs() < 1e-15);

        // Feature exactly at c_1 with one-hot similarity -> zero column 1.
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 1, 2, vec![1.0, 2.0]);
        let c = g.constant(Tensor::new(&[2, 2], vec![0.0, 0.0, 1.0, 2.0]).unwrap());
        let s = g.constant(Tensor::new(&[1, 1, 2], vec![0.0, 1.0]).unwrap());
        let v = vlad_encode(&mut g, f, s, c, VladNorm::IntraGlobal).unwrap();
        assert_eq!(g.values(v.raw), &[0.0, 0.0, 0.0, 0.0]);
        assert_eq!(g.values(v.holistic), &[0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn sparsity_loss_examples() {
        // One-hot similarities: entropy 0 clamps to the threshold.
        let mut g = Graph::new();
        let s = g.constant(Tensor::new(&[1, 2, 3], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]).unwrap());
        let h = entropy(&mut g, s).unwrap();
        let hinge = g.max_const(h, 0.02).unwrap();
        let l = g.mean_all(hinge).unwrap();
        assert_eq!(g.values(l)[0], 0.02);

        // Equidistant feature: uniform similarity, entropy ln K.
        for (k, expect) in [(2usize, 0.6931), (32, 3.4657)] {
            let mut g = Graph::new();
            let f = fm_var(&mut g, 1, 1, 1, vec![0.0]);
            let c = g.constant(Tensor::zeros(&[k, 1]));
            let l = sparsity_loss(&mut g, f, c, 0.005, 0.02).unwrap();
            assert!((g.values(l)[0] - (k as f64).ln()).abs() < 1e-12);
            assert!((g.values(l)[0] - expect).abs() < 1e-4);
        }
    }

    #[test]
    fn hard_assign_examples() {
        let s = Tensor::new(&[1, 3], vec![0.1, 0.7, 0.2]).unwrap();
        assert_eq!(hard_assign(&s).indices, vec![1]);
        let s = Tensor::new(&[1, 2], vec![0.5, 0.5]).unwrap();
        assert_eq!(hard_assign(&s).indices, vec![0]);
    }

    #[test]
    fn residual_examples() {
        let mut g = Graph::new();
        let f = fm_var(&mut g, 1, 2, 1, vec![0.5, 1.0]);
        let c = g.constant(Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap());
        let a = HardAssignment {
            k: 2,
            indices: vec![1, 1],
        };
        let r = residuals(&mut g, f, c, &a).unwrap();
        assert_eq!(g.values(r), &[-0.5, 0.0]);

        let bad = HardAssignment {
            k: 2,
            indices: vec![2, 0],
        };
        assert!(matches!(residuals(&mut g, f, c, &bad), Err(Error::Index { .. })));
    }

    #[test]
    fn kmeans_small_cases() {
        let km = kmeans(&[0.0, 1.0], 1, 1, KMeansOptions::default()).unwrap();
        assert_eq!(km.centers, vec![0.5]);

        let pts = [3.0, -1.0, 7.5];
        let km = kmeans(&pts, 1, 3, KMeansOptions::default()).unwrap();
        let mut c = km.centers.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![-1.0, 3.0, 7.5]);
        assert_eq!(*km.inertia.last().unwrap(), 0.0);

        assert!(kmeans(&pts, 1, 4, KMeansOptions::default()).is_err());
    }

    #[test]
    fn pattern_bank_validation() {
        assert!(PatternBank::new(2, 1, vec![0.0, 1.0], 5000.0, 0.005, 0.02).is_ok());
        assert!(PatternBank::new(0, 1, vec![], 5000.0, 0.005, 0.02).is_err());
        assert!(PatternBank::new(2, 1, vec![0.0, 1.0], 0.001, 0.005, 0.02).is_err());
        assert!(PatternBank::new(2, 1, vec![0.0, f64::NAN], 5000.0, 0.005, 0.02).is_err());
    }
}
