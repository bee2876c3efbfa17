//! Metrics, experiment suites and embedding exports.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{self, EvalForward, Model};
use crate::par::{self, Exec};
use crate::synthdata::{self, Domain, DomainDataset, TaskSpec};
use crate::trainer::{self, TrainConfig, TrainData};

const EVAL_CHUNK: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub source_accuracy: f64,
    pub target_accuracy: f64,
    /// Per pattern, the (source, target) shares of its hard assignments.
    pub per_pattern_balance: Vec<(f64, f64)>,
    /// Mean per-position assignment entropy at the sparsity decay, over
    /// both domains. Zero without a pattern bank.
    pub mean_assignment_entropy: f64,
    pub discriminator_accuracy_h: f64,
    pub discriminator_accuracy_l: Option<f64>,
}

fn check_dims(model: &Model, ds: &DomainDataset) -> Result<()> {
    if ds.patch_dim != model.patch_dim || ds.classes != model.classes {
        return Err(Error::Invalid(format!(
            "{} data has patch_dim={} classes={}, model expects patch_dim={} classes={}",
            ds.domain.as_str(),
            ds.patch_dim,
            ds.classes,
            model.patch_dim,
            model.classes
        )));
    }
    Ok(())
}

fn accuracy(model: &Model, fw: &[EvalForward], labels: &[usize]) -> f64 {
    let c = model.classes;
    let preds = fw.iter().flat_map(|f| {
        f.probs.chunks_exact(c).map(|row| {
            // First maximum wins ties.
            row.iter()
                .enumerate()
                .fold(0, |best, (j, &p)| if p > row[best] { j } else { best })
        })
    });
    let hits = preds.zip(labels).filter(|(p, y)| p == *y).count();
    hits as f64 / labels.len() as f64
}

/// Scores `model` on labeled source and target data. Dropout is off.
pub fn evaluate(model: &Model, source: &DomainDataset, target: &DomainDataset, exec: Exec) -> Result<EvalReport> {
    check_dims(model, source)?;
    check_dims(model, target)?;
    let fs = model::forward_dataset(model, source, EVAL_CHUNK, exec)?;
    let ft = model::forward_dataset(model, target, EVAL_CHUNK, exec)?;

    let k = model.k();
    let mut counts = vec![[0usize; 2]; k];
    let mut entropy_sum = 0.0;
    let mut entropy_n = 0usize;
    for (dom, fw) in [(0, &fs), (1, &ft)] {
        for f in fw.iter() {
            if let Some(h) = &f.hard {
                for &i in &h.indices {
                    counts[i][dom] += 1;
                }
            }
            if let Some(e) = &f.entropy {
                entropy_sum += e.iter().sum::<f64>();
                entropy_n += e.len();
            }
        }
    }
    let per_pattern_balance = counts
        .iter()
        .map(|&[s, t]| {
            let n = (s + t) as f64;
            if n == 0.0 {
                (0.0, 0.0)
            } else {
                (s as f64 / n, t as f64 / n)
            }
        })
        .collect();

    let (hs, ls) = trainer::discriminator_outputs(model, &fs)?;
    let (ht, lt) = trainer::discriminator_outputs(model, &ft)?;
    Ok(EvalReport {
        source_accuracy: accuracy(model, &fs, &source.labels),
        target_accuracy: accuracy(model, &ft, &target.labels),
        per_pattern_balance,
        mean_assignment_entropy: if entropy_n > 0 { entropy_sum / entropy_n as f64 } else { 0.0 },
        discriminator_accuracy_h: trainer::domain_accuracy(&hs, &ht),
        discriminator_accuracy_l: match (ls, lt) {
            (Some(a), Some(b)) => Some(trainer::domain_accuracy(&a, &b)),
            _ => None,
        },
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Baselines,
    PatternSweep,
    NegativeTransfer,
}

impl Suite {
    pub const NAMES: [&'static str; 3] = ["baselines", "pattern_sweep", "negative_transfer"];
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baselines" => Ok(Suite::Baselines),
            "pattern_sweep" => Ok(Suite::PatternSweep),
            "negative_transfer" => Ok(Suite::NegativeTransfer),
            _ => Err(Error::Invalid(format!(
                "unknown suite `{s}`; valid suites: {}",
                Suite::NAMES.join(", ")
            ))),
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let i = match self {
            Suite::Baselines => 0,
            Suite::PatternSweep => 1,
            Suite::NegativeTransfer => 2,
        };
        f.write_str(Suite::NAMES[i])
    }
}

/// Training variants compared by the suites.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Same schedule with both adversarial weights at zero; discriminators
    /// are not trained.
    SourceOnly,
    Holistic,
    HolisticLocal,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::SourceOnly => "source_only",
            Variant::Holistic => "h",
            Variant::HolisticLocal => "h_l",
        }
    }

    pub fn apply(self, base: &TrainConfig) -> TrainConfig {
        let mut c = base.clone();
        match self {
            Variant::SourceOnly => {
                c.weights.lambda_h = 0.0;
                c.weights.lambda_l = 0.0;
                c.train_discriminators = false;
            }
            Variant::Holistic => c.weights.lambda_l = 0.0,
            Variant::HolisticLocal => {}
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SuiteConfig {
    pub task: TaskSpec,
    pub train: TrainConfig,
    /// Each seed drives both task generation and training.
    pub seeds: Vec<u64>,
    pub pattern_counts: Vec<usize>,
    /// Classes dropped from the end of the target label range in the
    /// negative-transfer suite.
    pub removed_classes: usize,
}

impl Default for SuiteConfig {
    fn default() -> Self {
        Self {
            task: TaskSpec::default(),
            train: TrainConfig::default(),
            seeds: (0..5).collect(),
            pattern_counts: vec![0, 8, 16, 32, 64],
            removed_classes: 2,
        }
    }
}

/// One configuration of a suite before seeds are applied.
#[derive(Clone, Debug)]
pub struct RunSpec {
    pub label: String,
    pub train: TrainConfig,
    pub keep_classes: Option<usize>,
}

pub fn suite_runs(suite: Suite, cfg: &SuiteConfig) -> Result<Vec<RunSpec>> {
    let variants = [Variant::SourceOnly, Variant::Holistic, Variant::HolisticLocal];
    Ok(match suite {
        Suite::Baselines => variants
            .iter()
            .map(|v| RunSpec {
                label: v.name().to_string(),
                train: v.apply(&cfg.train),
                keep_classes: None,
            })
            .collect(),
        Suite::PatternSweep => cfg
            .pattern_counts
            .iter()
            .map(|&k| {
                let mut train = Variant::HolisticLocal.apply(&cfg.train);
                train.model.patterns = k;
                RunSpec {
                    label: format!("k={k}"),
                    train,
                    keep_classes: None,
                }
            })
            .collect(),
        Suite::NegativeTransfer => {
            let c = cfg.task.classes;
            if cfg.removed_classes >= c {
                return Err(Error::Invalid(format!(
                    "cannot remove {} of {c} target classes",
                    cfg.removed_classes
                )));
            }
            variants
                .iter()
                .map(|v| RunSpec {
                    label: v.name().to_string(),
                    train: v.apply(&cfg.train),
                    keep_classes: Some(c - cfg.removed_classes),
                })
                .collect()
        }
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SuiteRow {
    pub suite: Suite,
    pub config: String,
    pub seed: u64,
    /// `ok`, or `aborted: <reason>`.
    pub status: String,
    pub report: Option<EvalReport>,
    /// Held-out holistic discriminator accuracy at the start and end of
    /// phase 3, when discriminators were trained.
    pub d_h_probe_start: Option<f64>,
    pub d_h_probe_end: Option<f64>,
}

impl SuiteRow {
    pub fn ok(&self) -> bool {
        self.status == "ok"
    }
}

/// Generates the task for `seed`, trains and evaluates one run.
pub fn run_one(task: &TaskSpec, run: &RunSpec, seed: u64, exec: Exec) -> Result<(EvalReport, trainer::TrainLog)> {
    let spec = TaskSpec { seed, ..task.clone() };
    let t = synthdata::generate_task(&spec, exec)?;
    let target = match run.keep_classes {
        Some(keep) => synthdata::subset_target_classes(&t.target, keep)?,
        None => t.target,
    };
    let config = TrainConfig {
        seed,
        ..run.train.clone()
    };
    let data = TrainData {
        source: &t.source,
        target: &target,
        probe_source: Some(&t.source_eval),
        exec,
    };
    let (ckpt, log) = trainer::train_full(&config, &data)?;
    let report = evaluate(&ckpt.model, &t.source_eval, &target, exec)?;
    Ok((report, log))
}

/// Runs every configuration of `suite` for every seed. Runs execute in
/// parallel under [`Exec::Parallel`], each single-threaded; a failed run
/// yields a row with an `aborted` status instead of an error.
pub fn run_suite(suite: Suite, cfg: &SuiteConfig, exec: Exec) -> Result<Vec<SuiteRow>> {
    let runs = suite_runs(suite, cfg)?;
    let jobs: Vec<(usize, u64)> = (0..runs.len())
        .flat_map(|r| cfg.seeds.iter().map(move |&s| (r, s)))
        .collect();
    Ok(par::map_range(exec, jobs.len(), |j| {
        let (r, seed) = jobs[j];
        let run = &runs[r];
        let (status, report, start, end) = match run_one(&cfg.task, run, seed, Exec::Sequential) {
            Ok((rep, log)) => (
                "ok".to_string(),
                Some(rep),
                log.probes.first().map(|p| p.acc_h),
                log.probes.last().map(|p| p.acc_h),
            ),
            Err(e) => (format!("aborted: {e}"), None, None, None),
        };
        SuiteRow {
            suite,
            config: run.label.clone(),
            seed,
            status,
            report,
            d_h_probe_start: start,
            d_h_probe_end: end,
        }
    }))
}

pub const SUITE_CSV_HEADER: &str = "suite,config,seed,status,source_accuracy,target_accuracy,mean_assignment_entropy,\
discriminator_accuracy_h,discriminator_accuracy_l,d_h_probe_start,d_h_probe_end,per_pattern_balance";

/// Writes rows under [`SUITE_CSV_HEADER`]. Missing values are empty;
/// the balance column is `source:target` pairs joined by `;`.
pub fn write_suite_csv(rows: &[SuiteRow], mut w: impl std::io::Write) -> Result<()> {
    writeln!(w, "{SUITE_CSV_HEADER}")?;
    let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
    for r in rows {
        let status = r.status.replace([',', '\n'], " ");
        match &r.report {
            Some(e) => {
                let balance: Vec<String> = e.per_pattern_balance.iter().map(|(s, t)| format!("{s}:{t}")).collect();
                writeln!(
                    w,
                    "{},{},{},{},{},{},{},{},{},{},{},{}",
                    r.suite,
                    r.config,
                    r.seed,
                    status,
                    e.source_accuracy,
                    e.target_accuracy,
                    e.mean_assignment_entropy,
                    e.discriminator_accuracy_h,
                    opt(e.discriminator_accuracy_l),
                    opt(r.d_h_probe_start),
                    opt(r.d_h_probe_end),
                    balance.join(";")
                )?;
            }
            None => writeln!(w, "{},{},{},{},,,,,,,,", r.suite, r.config, r.seed, status)?,
        }
    }
    Ok(())
}

/// Per-configuration means over successful rows, in first-seen order.
pub fn config_means(rows: &[SuiteRow], metric: impl Fn(&SuiteRow) -> Option<f64>) -> Vec<(String, f64)> {
    let mut out: Vec<(String, f64, usize)> = Vec::new();
    for r in rows.iter().filter(|r| r.ok()) {
        let Some(v) = metric(r) else { continue };
        match out.iter_mut().find(|(c, _, _)| *c == r.config) {
            Some(e) => {
                e.1 += v;
                e.2 += 1;
            }
            None => out.push((r.config.clone(), v, 1)),
        }
    }
    out.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect()
}

/// Principal axes of row-major `n x dim` data.
#[derive(Clone, Debug)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// Unit-norm components, largest eigenvalue first; the largest-magnitude
    /// loading of each is positive.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

impl Pca {
    pub fn fit(rows: &[f64], dim: usize) -> Result<Self> {
        if dim == 0 || rows.len() % dim != 0 {
            return Err(Error::Invalid("PCA rows must be a whole number of points".into()));
        }
        let n = rows.len() / dim;
        if n < 2 {
            return Err(Error::Invalid(format!("PCA needs at least 2 rows, got {n}")));
        }
        let mut mean = vec![0.0; dim];
        for r in rows.chunks_exact(dim) {
            for (m, x) in mean.iter_mut().zip(r) {
                *m += x / n as f64;
            }
        }
        let mut cov = DMatrix::<f64>::zeros(dim, dim);
        for r in rows.chunks_exact(dim) {
            for i in 0..dim {
                let a = r[i] - mean[i];
                for j in i..dim {
                    cov[(i, j)] += a * (r[j] - mean[j]);
                }
            }
        }
        for i in 0..dim {
            for j in i..dim {
                let v = cov[(i, j)] / (n - 1) as f64;
                cov[(i, j)] = v;
                cov[(j, i)] = v;
            }
        }
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        let mut components = Vec::with_capacity(dim);
        let mut eigenvalues = Vec::with_capacity(dim);
        for &i in &order {
            let mut v: Vec<f64> = eig.eigenvectors.column(i).iter().copied().collect();
            let lead = v
                .iter()
                .enumerate()
                .fold(0, |best, (j, x)| if x.abs() > v[best].abs() { j } else { best });
            if v[lead] < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            components.push(v);
            eigenvalues.push(eig.eigenvalues[i].max(0.0));
        }
        Ok(Self {
            mean,
            components,
            eigenvalues,
        })
    }

    pub fn project(&self, row: &[f64], n_components: usize) -> Vec<f64> {
        self.components[..n_components]
            .iter()
            .map(|c| c.iter().zip(row).zip(&self.mean).map(|((w, x), m)| w * (x - m)).sum())
            .collect()
    }

    /// Fraction of total variance captured by the first `n` components.
    pub fn explained(&self, n: usize) -> f64 {
        let total: f64 = self.eigenvalues.iter().sum();
        if total == 0.0 {
            return 1.0;
        }
        self.eigenvalues[..n].iter().sum::<f64>() / total
    }

    /// Mean squared error of reconstructing the rows from `n` components.
    pub fn reconstruction_error(&self, rows: &[f64], n: usize) -> f64 {
        let dim = self.mean.len();
        let mut err = 0.0;
        for r in rows.chunks_exact(dim) {
            let z = self.project(r, n);
            for j in 0..dim {
                let rec = self.mean[j] + (0..n).map(|c| z[c] * self.components[c][j]).sum::<f64>();
                err += (r[j] - rec).powi(2);
            }
        }
        err / (rows.len() / dim) as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmbedKind {
    Holistic,
    Local,
}

impl FromStr for EmbedKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "holistic" => Ok(EmbedKind::Holistic),
            "local" => Ok(EmbedKind::Local),
            _ => Err(Error::Invalid(format!("unknown embedding kind `{s}`; valid kinds: holistic, local"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EmbedRow {
    pub pc1: f64,
    pub pc2: f64,
    pub domain: Domain,
    /// Class label (holistic) or assigned pattern (local; absent without a
    /// pattern bank).
    pub tag: Option<usize>,
}

/// Projects holistic codes (one row per sample) or local features (one row
/// per grid position) of both domains onto their top two principal axes.
pub fn export_embeddings(
    model: &Model,
    source: &DomainDataset,
    target: &DomainDataset,
    kind: EmbedKind,
    exec: Exec,
) -> Result<Vec<EmbedRow>> {
    check_dims(model, source)?;
    check_dims(model, target)?;
    let mut rows = Vec::new();
    let mut meta = Vec::new();
    let d = match kind {
        EmbedKind::Holistic => model.config.code_dim(),
        EmbedKind::Local => model.config.feature_dim,
    };
    for ds in [source, target] {
        let fw = model::forward_dataset(model, ds, EVAL_CHUNK, exec)?;
        let mut sample = 0;
        for f in fw {
            match kind {
                EmbedKind::Holistic => {
                    for _ in 0..f.codes.len() / d {
                        meta.push((ds.domain, Some(ds.labels[sample])));
                        sample += 1;
                    }
                    rows.extend(f.codes);
                }
                EmbedKind::Local => {
                    let n = f.features.len() / d;
                    for i in 0..n {
                        meta.push((ds.domain, f.hard.as_ref().map(|h| h.indices[i])));
                    }
                    rows.extend(f.features);
                }
            }
        }
    }
    let pca = Pca::fit(&rows, d)?;
    let k = d.min(2);
    Ok(rows
        .chunks_exact(d)
        .zip(meta)
        .map(|(r, (domain, tag))| {
            let z = pca.project(r, k);
            EmbedRow {
                pc1: z[0],
                pc2: z.get(1).copied().unwrap_or(0.0),
                domain,
                tag,
            }
        })
        .collect())
}

pub fn write_embeddings_csv(rows: &[EmbedRow], kind: EmbedKind, mut w: impl std::io::Write) -> Result<()> {
    let tag = match kind {
        EmbedKind::Holistic => "label",
        EmbedKind::Local => "pattern",
    };
    writeln!(w, "pc1,pc2,domain,{tag}")?;
    for r in rows {
        let t = r.tag.map_or(String::new(), |t| t.to_string());
        writeln!(w, "{},{},{},{}", r.pc1, r.pc2, r.domain.as_str(), t)?;
    }
    Ok(())
}
