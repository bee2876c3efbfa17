//! Seeded synthetic domain-shift tasks over patch grids.
//!
//! Each sample is an `M x N` grid of patches. Every cell draws a prototype
//! index from its class's mixture over `P` shared prototypes and emits that
//! prototype plus isotropic Gaussian noise. Target patches are additionally
//! mapped by `x -> s Q x + t` with `Q` orthogonal.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng as _;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::rng::{self, tags, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    fn code(self) -> u32 {
        match self {
            Domain::Source => 0,
            Domain::Target => 1,
        }
    }

    fn from_code(c: u32) -> Result<Self> {
        match c {
            0 => Ok(Domain::Source),
            1 => Ok(Domain::Target),
            _ => Err(Error::Format(format!("unknown domain tag {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

/// Affine patch-space shift. When `matrix`/`offset` are absent they are
/// drawn from the task seed: `Q` rotates the planes of a random orthonormal
/// basis by angles up to `angle` radians (the largest plane gets exactly
/// `angle`) and `t` has i.i.d. `N(0, translation^2)` entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    pub scale: f64,
    pub angle: f64,
    pub translation: f64,
    pub matrix: Option<Vec<f64>>,
    pub offset: Option<Vec<f64>>,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        Self {
            scale: 1.2,
            angle: 1.0,
            translation: 0.3,
            matrix: None,
            offset: None,
        }
    }
}

impl ShiftSpec {
    pub fn identity() -> Self {
        Self {
            scale: 1.0,
            angle: 0.0,
            translation: 0.0,
            matrix: None,
            offset: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskSpec {
    pub seed: u64,
    pub classes: usize,
    pub prototypes: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    pub noise_sigma: f64,
    /// Standard deviation of prototype coordinates.
    pub prototype_scale: f64,
    /// `C x P` rows on the simplex; drawn from `Dirichlet(mixture_concentration)`
    /// when absent.
    pub class_mixtures: Option<Vec<Vec<f64>>>,
    pub mixture_concentration: f64,
    /// Minimum total-variation distance between drawn class mixtures;
    /// draws are repeated until every pair is this far apart.
    pub min_mixture_separation: f64,
    pub shift: ShiftSpec,
    pub n_source: usize,
    pub n_target: usize,
    /// Held-out source samples for in-domain scoring.
    pub n_source_eval: usize,
}

impl Default for TaskSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            classes: 4,
            prototypes: 6,
            rows: 6,
            cols: 6,
            patch_dim: 8,
            noise_sigma: 0.3,
            prototype_scale: 1.0,
            class_mixtures: None,
            mixture_concentration: 0.5,
            min_mixture_separation: 0.3,
            shift: ShiftSpec::default(),
            n_source: 512,
            n_target: 512,
            n_source_eval: 256,
        }
    }
}

/// Resolved affine map.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineShift {
    pub dim: usize,
    /// Row-major orthogonal `dim x dim` matrix.
    pub q: Vec<f64>,
    pub scale: f64,
    pub offset: Vec<f64>,
}

impl AffineShift {
    pub fn apply(&self, x: &[f64], out: &mut [f64]) {
        for (i, o) in out.iter_mut().enumerate() {
            let row = &self.q[i * self.dim..(i + 1) * self.dim];
            *o = self.scale * row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + self.offset[i];
        }
    }

    /// `Q^T (y - t) / s`.
    pub fn invert(&self, y: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = (0..self.dim).map(|i| self.q[i * self.dim + j] * (y[i] - self.offset[i])).sum::<f64>() / self.scale;
        }
    }

    /// `max |Q^T Q - I|`.
    pub fn orthogonality_error(&self) -> f64 {
        let d = self.dim;
        let mut worst = 0.0f64;
        for a in 0..d {
            for b in 0..d {
                let dot: f64 = (0..d).map(|i| self.q[i * d + a] * self.q[i * d + b]).sum();
                let want = if a == b { 1.0 } else { 0.0 };
                worst = worst.max((dot - want).abs());
            }
        }
        worst
    }
}

/// Patch grids of one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainDataset {
    pub domain: Domain,
    pub classes: usize,
    pub rows: usize,
    pub cols: usize,
    pub patch_dim: usize,
    /// `n x rows x cols x patch_dim`, row-major.
    pub samples: Vec<f64>,
    /// Ground-truth labels. Target labels are only read for scoring.
    pub labels: Vec<usize>,
}

impl DomainDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn positions(&self) -> usize {
        self.rows * self.cols
    }

    pub fn sample_len(&self) -> usize {
        self.positions() * self.patch_dim
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let l = self.sample_len();
        &self.samples[i * l..(i + 1) * l]
    }

    /// Gathers samples `idx` into a contiguous `[len, P, patch_dim]` buffer.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.sample_len());
        for &i in idx {
            out.extend_from_slice(self.sample(i));
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.len() != self.len() * self.sample_len() {
            return Err(Error::Format(format!(
                "dataset holds {} values, expected {}",
                self.samples.len(),
                self.len() * self.sample_len()
            )));
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.classes) {
            return Err(Error::Index {
                what: "class labels",
                index: bad,
                size: self.classes,
            });
        }
        if self.samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { op: "dataset" });
        }
        Ok(())
    }
}

/// A generated task: training source, unlabeled target, held-out source.
#[derive(Clone, Debug)]
pub struct Task {
    pub source: DomainDataset,
    pub target: DomainDataset,
    pub source_eval: DomainDataset,
    /// `P x patch_dim` prototypes.
    pub prototypes: Vec<f64>,
    pub mixtures: Vec<Vec<f64>>,
    pub shift: AffineShift,
}

fn normal(rng: &mut Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Modified Gram-Schmidt on Gaussian columns, retried on (improbable) rank loss.
fn random_orthonormal(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let mut cols: Vec<Vec<f64>> = (0..dim).map(|_| (0..dim).map(|_| normal(rng)).collect()).collect();
        let mut ok = true;
        for j in 0..dim {
            for i in 0..j {
                let (head, tail) = cols.split_at_mut(j);
                let dot: f64 = head[i].iter().zip(&tail[0]).map(|(a, b)| a * b).sum();
                for (x, y) in tail[0].iter_mut().zip(&head[i]) {
                    *x -= dot * y;
                }
            }
            let norm = cols[j].iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-8 {
                ok = false;
                break;
            }
            cols[j].iter_mut().for_each(|x| *x /= norm);
        }
        if ok {
            // Row-major matrix whose columns are the basis vectors.
            let mut m = vec![0.0; dim * dim];
            for (j, c) in cols.iter().enumerate() {
                for (i, &v) in c.iter().enumerate() {
                    m[i * dim + j] = v;
                }
            }
            return m;
        }
    }
}

fn resolve_shift(spec: &ShiftSpec, dim: usize, rng: &mut Rng) -> Result<AffineShift> {
    if !(spec.scale > 0.0 && spec.scale.is_finite()) {
        return Err(Error::Invalid(format!("shift.scale must be > 0, got {}", spec.scale)));
    }
    let q = match &spec.matrix {
        Some(m) => {
            if m.len() != dim * dim {
                return Err(Error::Shape {
                    op: "shift.matrix",
                    lhs: vec![dim, dim],
                    rhs: vec![m.len()],
                });
            }
            m.clone()
        }
        None => {
            let basis = random_orthonormal(dim, rng);
            // B R B^T with R rotating planes (0,1), (2,3), ...
            let u: Vec<f64> = (0..dim / 2).map(|_| rng.random::<f64>()).collect();
            let top = u.iter().copied().fold(0.0f64, f64::max);
            let mut r = vec![0.0; dim * dim];
            for i in 0..dim {
                r[i * dim + i] = 1.0;
            }
            for (p, &w) in u.iter().enumerate() {
                let theta = if top > 0.0 { spec.angle * w / top } else { 0.0 };
                let (c, s) = (theta.cos(), theta.sin());
                let (a, b) = (2 * p, 2 * p + 1);
                r[a * dim + a] = c;
                r[a * dim + b] = -s;
                r[b * dim + a] = s;
                r[b * dim + b] = c;
            }
            let mut br = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    br[i * dim + j] = (0..dim).map(|k| basis[i * dim + k] * r[k * dim + j]).sum();
                }
            }
            let mut q = vec![0.0; dim * dim];
            for i in 0..dim {
                for j in 0..dim {
                    q[i * dim + j] = (0..dim).map(|k| br[i * dim + k] * basis[j * dim + k]).sum();
                }
            }
            q
        }
    };
    let offset = match &spec.offset {
        Some(t) if t.len() == dim => t.clone(),
        Some(t) => {
            return Err(Error::Shape {
                op: "shift.offset",
                lhs: vec![dim],
                rhs: vec![t.len()],
            })
        }
        None => (0..dim).map(|_| normal(rng) * spec.translation).collect(),
    };
    let shift = AffineShift {
        dim,
        q,
        scale: spec.scale,
        offset,
    };
    if shift.orthogonality_error() > 1e-9 {
        return Err(Error::Invalid("shift.matrix is not orthogonal within 1e-9".into()));
    }
    Ok(shift)
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 1 {
            return Err(Error::Invalid("classes must be >= 1".into()));
        }
        if self.prototypes < 2 {
            return Err(Error::Invalid(format!("prototypes must be >= 2, got {}", self.prototypes)));
        }
        for (name, v) in [("rows", self.rows), ("cols", self.cols), ("patch_dim", self.patch_dim)] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite()) {
            return Err(Error::Invalid(format!("shift.scale must be > 0, got {}", self.shift.scale)));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Invalid(format!("noise_sigma must be >= 0, got {}", self.noise_sigma)));
        }
        for (name, v) in [("n_source", self.n_source), ("n_target", self.n_target)] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be positive")));
            }
        }
        if let Some(m) = &self.class_mixtures {
            if m.len() != self.classes || m.iter().any(|r| r.len() != self.prototypes) {
                return Err(Error::Invalid(format!(
                    "class_mixtures must be {} x {}",
                    self.classes, self.prototypes
                )));
            }
            for (i, r) in m.iter().enumerate() {
                if r.iter().any(|&p| !(p >= 0.0)) || (r.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
                    return Err(Error::Invalid(format!("class_mixtures row {i} is not on the simplex")));
                }
            }
        }
        Ok(())
    }
}

const MAX_MIXTURE_DRAWS: usize = 10_000;

/// Smallest pairwise total-variation distance between rows.
pub fn min_separation(mix: &[Vec<f64>]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..mix.len() {
        for j in i + 1..mix.len() {
            let tv = 0.5 * mix[i].iter().zip(&mix[j]).map(|(a, b)| (a - b).abs()).sum::<f64>();
            best = best.min(tv);
        }
    }
    best
}

fn check_distinct(mix: &[Vec<f64>]) -> Result<()> {
    for i in 0..mix.len() {
        for j in i + 1..mix.len() {
            if mix[i] == mix[j] {
                return Err(Error::Invalid(format!(
                    "degenerate class mixtures: rows {i} and {j} are identical"
                )));
            }
        }
    }
    Ok(())
}

/// Draws one sample with label `label` from stream `rng`.
fn draw_sample(
    spec: &TaskSpec,
    prototypes: &[f64],
    mixture: &[f64],
    shift: Option<&AffineShift>,
    rng: &mut Rng,
    out: &mut [f64],
) {
    let d = spec.patch_dim;
    let mut patch = vec![0.0; d];
    for cell in out.chunks_exact_mut(d) {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut proto = mixture.len() - 1;
        for (p, &w) in mixture.iter().enumerate() {
            acc += w;
            if u < acc {
                proto = p;
                break;
            }
        }
        for (j, x) in patch.iter_mut().enumerate() {
            *x = prototypes[proto * d + j] + spec.noise_sigma * normal(rng);
        }
        match shift {
            Some(s) => s.apply(&patch, cell),
            None => cell.copy_from_slice(&patch),
        }
    }
}

fn draw_domain(
    spec: &TaskSpec,
    prototypes: &[f64],
    mixtures: &[Vec<f64>],
    shift: Option<&AffineShift>,
    domain: Domain,
    tag: u64,
    n: usize,
    exec: Exec,
) -> DomainDataset {
    let len = spec.rows * spec.cols * spec.patch_dim;
    let labels: Vec<usize> = (0..n).map(|i| i % spec.classes).collect();
    let mut samples = vec![0.0; n * len];
    par::for_each_chunk(exec, &mut samples, len, |i, out| {
        let mut r = rng::stream(spec.seed, tag, i as u64);
        draw_sample(spec, prototypes, &mixtures[labels[i]], shift, &mut r, out);
    });
    DomainDataset {
        domain,
        classes: spec.classes,
        rows: spec.rows,
        cols: spec.cols,
        patch_dim: spec.patch_dim,
        samples,
        labels,
    }
}

/// Generates the task. Labels cycle through the classes so every class has
/// `floor(n / C)` or `ceil(n / C)` samples; sample `i` uses its own stream.
pub fn generate_task(spec: &TaskSpec, exec: Exec) -> Result<Task> {
    spec.validate()?;
    let mut rng = rng::stream(spec.seed, tags::TASK, 0);
    let d = spec.patch_dim;
    let prototypes: Vec<f64> = (0..spec.prototypes * d)
        .map(|_| normal(&mut rng) * spec.prototype_scale)
        .collect();
    let mixtures = match &spec.class_mixtures {
        Some(m) => m.clone(),
        None => {
            // Dirichlet draw via normalized Gamma variates.
            let gamma = Gamma::new(spec.mixture_concentration, 1.0)
                .map_err(|e| Error::Invalid(format!("mixture concentration: {e}")))?;
            let mut attempts = 0;
            loop {
                let mix: Vec<Vec<f64>> = (0..spec.classes)
                    .map(|_| {
                        let g: Vec<f64> = (0..spec.prototypes).map(|_| gamma.sample(&mut rng)).collect();
                        let total: f64 = g.iter().sum();
                        g.iter().map(|x| x / total).collect()
                    })
                    .collect();
                if min_separation(&mix) >= spec.min_mixture_separation {
                    break mix;
                }
                attempts += 1;
                if attempts == MAX_MIXTURE_DRAWS {
                    return Err(Error::Invalid(format!(
                        "no class mixtures with separation >= {} after {MAX_MIXTURE_DRAWS} draws",
                        spec.min_mixture_separation
                    )));
                }
            }
        }
    };
    check_distinct(&mixtures)?;
    let shift = resolve_shift(&spec.shift, d, &mut rng)?;

    let source = draw_domain(spec, &prototypes, &mixtures, None, Domain::Source, tags::SOURCE, spec.n_source, exec);
    let target = draw_domain(
        spec,
        &prototypes,
        &mixtures,
        Some(&shift),
        Domain::Target,
        tags::TARGET,
        spec.n_target,
        exec,
    );
    let source_eval = draw_domain(
        spec,
        &prototypes,
        &mixtures,
        None,
        Domain::Source,
        tags::EVAL_SOURCE,
        spec.n_source_eval.max(1),
        exec,
    );
    Ok(Task {
        source,
        target,
        source_eval,
        prototypes,
        mixtures,
        shift,
    })
}

/// Keeps the samples whose label is below `keep`.
pub fn subset_target_classes(ds: &DomainDataset, keep: usize) -> Result<DomainDataset> {
    if keep < 1 {
        return Err(Error::Invalid("keep must be at least 1".into()));
    }
    if keep > ds.classes {
        return Err(Error::Invalid(format!("keep={keep} exceeds class count {}", ds.classes)));
    }
    let idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] < keep).collect();
    Ok(DomainDataset {
        samples: ds.gather(&idx),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        ..ds.clone()
    })
}

const MAGIC: &[u8; 4] = b"LFPD";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 5 * 8;

pub fn encode_dataset(ds: &DomainDataset) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + ds.samples.len() * 8 + ds.labels.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&ds.domain.code().to_le_bytes());
    for v in [ds.classes, ds.rows, ds.cols, ds.patch_dim, ds.len()] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in &ds.samples {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &y in &ds.labels {
        out.extend_from_slice(&(y as u64).to_le_bytes());
    }
    out
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < *pos + n {
        return Err(Error::Format(format!(
            "truncated dataset: {what} needs {n} bytes at offset {}, {} missing",
            *pos,
            *pos + n - buf.len()
        )));
    }
    let s = &buf[*pos..*pos + n];
    *pos += n;
    Ok(s)
}

fn u64_at(buf: &[u8], pos: &mut usize, what: &str) -> Result<u64> {
    Ok(u64::from_le_bytes(take(buf, pos, 8, what)?.try_into().expect("8 bytes")))
}

pub fn decode_dataset(buf: &[u8]) -> Result<DomainDataset> {
    let mut pos = 0;
    if take(buf, &mut pos, 4, "magic")? != MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(take(buf, &mut pos, 4, "version")?.try_into().expect("4 bytes"));
    if version != DATASET_VERSION {
        return Err(Error::Format(format!(
            "dataset version mismatch: expected {DATASET_VERSION}, found {version}"
        )));
    }
    let domain = Domain::from_code(u32::from_le_bytes(take(buf, &mut pos, 4, "domain")?.try_into().expect("4 bytes")))?;
    let mut dims = [0usize; 5];
    for (d, name) in dims.iter_mut().zip(["classes", "rows", "cols", "patch_dim", "n"]) {
        *d = usize::try_from(u64_at(buf, &mut pos, name)?).map_err(|_| Error::Format(format!("{name} overflows")))?;
    }
    let [classes, rows, cols, patch_dim, n] = dims;
    let count = n
        .checked_mul(rows * cols * patch_dim)
        .ok_or_else(|| Error::Format("payload size overflows".into()))?;
    let payload = take(buf, &mut pos, count * 8, "sample payload")?;
    let samples = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let labels_raw = take(buf, &mut pos, n * 8, "labels block")?;
    let labels = labels_raw
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    if pos != buf.len() {
        return Err(Error::Format(format!("{} trailing bytes after labels block", buf.len() - pos)));
    }
    let ds = DomainDataset {
        domain,
        classes,
        rows,
        cols,
        patch_dim,
        samples,
        labels,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn save_dataset(ds: &DomainDataset, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: &Path) -> Result<DomainDataset> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    decode_dataset(&buf)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> TaskSpec {
        TaskSpec {
            n_source: 40,
            n_target: 40,
            n_source_eval: 8,
            rows: 3,
            cols: 3,
            ..TaskSpec::default()
        }
    }

    #[test]
    fn generation_is_pure_and_mode_independent() {
        let spec = small_spec();
        let a = generate_task(&spec, Exec::Sequential).unwrap();
        let b = generate_task(&spec, Exec::Parallel).unwrap();
        assert_eq!(encode_dataset(&a.source), encode_dataset(&b.source));
        assert_eq!(encode_dataset(&a.target), encode_dataset(&b.target));
    }

    #[test]
    fn shift_is_orthogonal() {
        let t = generate_task(&small_spec(), Exec::Sequential).unwrap();
        assert!(t.shift.orthogonality_error() < 1e-9);
        let x: Vec<f64> = (0..8).map(|i| i as f64 - 3.0).collect();
        let mut y = vec![0.0; 8];
        let mut z = vec![0.0; 8];
        t.shift.apply(&x, &mut y);
        t.shift.invert(&y, &mut z);
        for (a, b) in x.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_class_mixtures_noise_free() {
        let spec = TaskSpec {
            classes: 3,
            prototypes: 3,
            noise_sigma: 0.0,
            class_mixtures: Some(vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]),
            shift: ShiftSpec::identity(),
            ..small_spec()
        };
        let t = generate_task(&spec, Exec::Sequential).unwrap();
        let d = spec.patch_dim;
        for i in 0..t.source.len() {
            let y = t.source.labels[i];
            for cell in t.source.sample(i).chunks_exact(d) {
                assert_eq!(cell, &t.prototypes[y * d..(y + 1) * d]);
            }
        }
    }

    #[test]
    fn degenerate_mixtures_fail() {
        let spec = TaskSpec {
            classes: 2,
            prototypes: 2,
            class_mixtures: Some(vec![vec![0.5, 0.5], vec![0.5, 0.5]]),
            ..small_spec()
        };
        let err = generate_task(&spec, Exec::Sequential).unwrap_err();
        assert!(err.to_string().contains("identical"));
    }

    #[test]
    fn subset_examples() {
        let t = generate_task(&small_spec(), Exec::Sequential).unwrap();
        let all = subset_target_classes(&t.target, 4).unwrap();
        assert_eq!(all, t.target);
        let two = subset_target_classes(&t.target, 2).unwrap();
        let expect = t.target.labels.iter().filter(|&&y| y < 2).count();
        assert_eq!(two.len(), expect);
        assert_eq!(two.len(), 20);
        let one = subset_target_classes(&t.target, 1).unwrap();
        assert!(one.labels.iter().all(|&y| y == 0));
        assert!(subset_target_classes(&t.target, 0).is_err());
    }

    #[test]
    fn truncated_and_versioned_files_fail() {
        let t = generate_task(&small_spec(), Exec::Sequential).unwrap();
        let bytes = encode_dataset(&t.source);
        assert_eq!(decode_dataset(&bytes).unwrap(), t.source);
        let err = decode_dataset(&bytes[..bytes.len() - 5]).unwrap_err().to_string();
        assert!(err.contains("5 missing"), "{err}");
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_dataset(&v2).unwrap_err().to_string();
        assert!(err.contains("expected 1, found 2"), "{err}");
    }
}
