//! Three-phase training: classifier warm start, fine-tuning, adversarial
//! adaptation.

use std::io::Write as _;
use std::path::Path;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::error::{scoped, Error, Result};
use crate::losses::{self, LossReport, LossWeights};
use crate::model::{self, Model, ModelConfig, Trainable};
use crate::networks;
use crate::par::Exec;
use crate::patterns::{self, KMeansOptions};
use crate::rng::{self, tags, Rng};
use crate::synthdata::DomainDataset;
use crate::tensor::{Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub lr_step1: f64,
    pub lr_step23: f64,
    pub steps_phase1: usize,
    pub steps_phase2: usize,
    pub steps_phase3: usize,
    /// Source samples per minibatch.
    pub batch_source: usize,
    /// Target samples per minibatch (phase 3).
    pub batch_target: usize,
    pub d_steps_per_g_step: usize,
    /// Discriminator-only updates before the first adversarial step.
    pub d_warmup_steps: usize,
    /// When false, phase 3 skips discriminator updates. The generator
    /// trajectory does not depend on this flag because discriminator
    /// batches come from their own stream.
    pub train_discriminators: bool,
    pub adam: AdamConfig,
    pub dropout: f64,
    /// Source features sampled for k-means (0 = all).
    pub kmeans_points: usize,
    pub kmeans_max_iters: usize,
    pub kmeans_tol: f64,
    /// Phase-3 steps between held-out discriminator probes (0 = only at
    /// the start and the end).
    pub probe_every: usize,
    /// Samples per domain used by each probe.
    pub probe_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            weights: LossWeights::default(),
            lr_step1: 0.01,
            lr_step23: 1e-4,
            steps_phase1: 200,
            steps_phase2: 200,
            steps_phase3: 1000,
            batch_source: 32,
            batch_target: 32,
            d_steps_per_g_step: 1,
            d_warmup_steps: 0,
            train_discriminators: true,
            adam: AdamConfig::default(),
            dropout: 0.5,
            kmeans_points: 4096,
            kmeans_max_iters: 100,
            kmeans_tol: 1e-6,
            probe_every: 100,
            probe_size: 256,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        scoped("model", self.model.validate())?;
        scoped("weights", self.weights.validate())?;
        for (name, lr) in [("lr_step1", self.lr_step1), ("lr_step23", self.lr_step23)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(Error::Invalid(format!("{name} must be > 0, got {lr}")));
            }
        }
        for (name, v) in [
            ("batch_source", self.batch_source),
            ("batch_target", self.batch_target),
            ("d_steps_per_g_step", self.d_steps_per_g_step),
        ] {
            if v == 0 {
                return Err(Error::Invalid(format!("{name} must be >= 1")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.eps > 0.0) {
            return Err(Error::Invalid("adam.beta1/beta2 must lie in [0, 1) and adam.eps > 0".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// First and second moment estimates for one parameter group.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: &[usize]) -> Self {
        Self {
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn for_params(params: &[&mut Vec<f64>]) -> Self {
        Self::new(&params.iter().map(|p| p.len()).collect::<Vec<_>>())
    }
}

/// One bias-corrected Adam step. Parameters whose gradient is `None` are
/// left untouched. Nothing is modified when any gradient is non-finite.
pub fn adam_update(
    params: &mut [&mut Vec<f64>],
    grads: &[Option<&[f64]>],
    state: &mut Adam,
    lr: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Shape {
            op: "adam_update",
            lhs: vec![params.len()],
            rhs: vec![grads.len(), state.m.len()],
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if let Some(g) = g {
            if g.len() != p.len() || state.m[i].len() != p.len() {
                return Err(Error::Shape {
                    op: "adam_update",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite { op: "adam_update" });
            }
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let Some(g) = g else { continue };
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            p[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Datasets seen by training. Target labels are never read here.
#[derive(Clone, Copy, Debug)]
pub struct TrainData<'a> {
    pub source: &'a DomainDataset,
    pub target: &'a DomainDataset,
    /// Held-out source samples for discriminator probes; falls back to the
    /// training source.
    pub probe_source: Option<&'a DomainDataset>,
    pub exec: Exec,
}

impl TrainData<'_> {
    fn validate(&self) -> Result<()> {
        let (s, t) = (self.source, self.target);
        if (s.rows, s.cols, s.patch_dim, s.classes) != (t.rows, t.cols, t.patch_dim, t.classes) {
            return Err(Error::Invalid("source and target datasets disagree on grid, patch or class dims".into()));
        }
        if s.is_empty() || t.is_empty() {
            return Err(Error::Invalid("training needs non-empty source and target sets".into()));
        }
        Ok(())
    }
}

/// Model plus optimizer state after a completed phase.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub model: Model,
    /// Last completed phase (1..=3).
    pub phase: u8,
    /// Steps taken in each phase so far.
    pub steps: [usize; 3],
    pub g_opt: Option<Adam>,
    pub d_opt: Option<Adam>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub phase: u8,
    pub step: usize,
    pub losses: LossReport,
    /// Minibatch discriminator accuracies (phase 3 only).
    pub d_acc_h: Option<f64>,
    pub d_acc_l: Option<f64>,
}

/// Held-out discriminator accuracy during phase 3.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub acc_h: f64,
    pub acc_l: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub probes: Vec<ProbeRecord>,
    pub kmeans_inertia: Vec<f64>,
}

impl TrainLog {
    pub fn write_csv(&self, mut w: impl std::io::Write) -> Result<()> {
        writeln!(w, "phase,step,l_c,l_dh,l_gh,l_dl,l_gl,l_s,l_total,d_acc_h,d_acc_l")?;
        let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
        for r in &self.steps {
            let l = &r.losses;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.phase,
                r.step,
                l.l_c,
                l.l_dh,
                l.l_gh,
                l.l_dl,
                l.l_gl,
                l.l_s,
                l.l_total,
                opt(r.d_acc_h),
                opt(r.d_acc_l)
            )?;
        }
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_csv(f)
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.steps.extend(other.steps);
        self.probes.extend(other.probes);
        self.kmeans_inertia.extend(other.kmeans_inertia);
    }
}

fn batch_indices(rng: &mut Rng, n: usize, b: usize) -> Vec<usize> {
    index::sample(rng, n, b.min(n)).into_vec()
}

fn patches(g: &mut Graph, ds: &DomainDataset, idx: &[usize]) -> Result<Var> {
    let t = Tensor::new(&[idx.len(), ds.positions(), ds.patch_dim], ds.gather(idx))?;
    Ok(g.constant(t))
}

fn grads_of<'g>(g: &'g Graph, vars: &[Var]) -> Vec<Option<&'g [f64]>> {
    vars.iter().map(|&v| g.grad(v)).collect()
}

fn diverged(phase: u8, step: usize, e: Error, last_good: &Checkpoint) -> Error {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => Error::Diverged {
            phase,
            step,
            reason: e.to_string(),
            last_good: Some(Box::new(last_good.clone())),
        },
        other => other,
    }
}

fn finite_or(x: f64, what: &'static str) -> Result<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(Error::NonFinite { op: what })
    }
}

/// Phase 1: k-means initialization of the pattern bank on source features,
/// then classifier-only training with the extractor and bank frozen.
pub fn phase1_classifier(config: &TrainConfig, data: &TrainData) -> Result<(Checkpoint, TrainLog)> {
    config.validate()?;
    data.validate()?;
    let src = data.source;
    let mut model = Model::new(&config.model, src.classes, src.patch_dim, config.seed)?;
    let mut log = TrainLog::default();

    if let Some(bank) = &model.bank {
        let d = bank.dim;
        let fw = model::forward_dataset(&model, src, 128, data.exec)?;
        let all: Vec<f64> = fw.into_iter().flat_map(|f| f.features).collect();
        let n = all.len() / d;
        let points = if config.kmeans_points == 0 || config.kmeans_points >= n {
            all
        } else {
            let mut r = rng::stream(config.seed, tags::KMEANS, 1);
            let mut idx = index::sample(&mut r, n, config.kmeans_points).into_vec();
            idx.sort_unstable();
            idx.iter().flat_map(|&i| all[i * d..(i + 1) * d].iter().copied()).collect()
        };
        let km = patterns::kmeans(
            &points,
            d,
            bank.k,
            KMeansOptions {
                seed: config.seed,
                max_iters: config.kmeans_max_iters,
                tol: config.kmeans_tol,
                exec: data.exec,
            },
        )?;
        log.kmeans_inertia = km.inertia;
        model.bank.as_mut().expect("bank present").centers = km.centers;
    }

    // Codes are fixed while the extractor and bank are frozen.
    let codes: Vec<f64> = model::forward_dataset(&model, src, 128, data.exec)?
        .into_iter()
        .flat_map(|f| f.codes)
        .collect();
    let cd = config.model.code_dim();
    let mut opt = Adam::for_params(&model.classifier.params_mut());
    let mut batch_rng = rng::stream(config.seed, tags::BATCH, 10);
    let mut drop_rng = rng::stream(config.seed, tags::DROPOUT, 1);
    for step in 0..config.steps_phase1 {
        let idx = batch_indices(&mut batch_rng, src.len(), config.batch_source);
        let x: Vec<f64> = idx.iter().flat_map(|&i| codes[i * cd..(i + 1) * cd].iter().copied()).collect();
        let labels: Vec<usize> = idx.iter().map(|&i| src.labels[i]).collect();
        let mut g = Graph::new();
        let cls = model.classifier.bind(&mut g, true);
        let code = g.constant(Tensor::new(&[idx.len(), cd], x)?);
        let mask = dropout(config, &[idx.len(), cd], &mut drop_rng)?;
        let probs = networks::classify(&mut g, code, &cls, mask.as_ref())?;
        let lc = losses::classification_loss(&mut g, probs, &losses::one_hot_labels(&labels, src.classes)?)?;
        g.backward(lc)?;
        let l_c = finite_or(g.values(lc)[0], "classification_loss")?;
        let vars = cls.vars();
        adam_update(
            &mut model.classifier.params_mut(),
            &grads_of(&g, &vars),
            &mut opt,
            config.lr_step1,
            &config.adam,
        )?;
        log.steps.push(StepRecord {
            phase: 1,
            step,
            losses: LossReport {
                l_c,
                l_total: l_c,
                ..LossReport::default()
            },
            d_acc_h: None,
            d_acc_l: None,
        });
    }
    Ok((
        Checkpoint {
            config: config.clone(),
            model,
            phase: 1,
            steps: [config.steps_phase1, 0, 0],
            g_opt: Some(opt),
            d_opt: None,
        },
        log,
    ))
}

fn dropout(config: &TrainConfig, shape: &[usize], rng: &mut Rng) -> Result<Option<Tensor>> {
    if config.dropout > 0.0 {
        networks::dropout_mask(shape, config.dropout, rng).map(Some)
    } else {
        Ok(None)
    }
}

fn g_trainable(config: &TrainConfig) -> Trainable {
    Trainable {
        extractor_top: config.model.trainable_top(),
        centers: true,
        classifier: true,
    }
}

/// Builds the source classification and sparsity terms of a generator step.
struct SourceTerms {
    l_c: Var,
    l_s: Option<Var>,
}

fn source_terms(
    g: &mut Graph,
    model: &Model,
    bound: &model::BoundModel,
    config: &TrainConfig,
    src: &DomainDataset,
    idx: &[usize],
    drop_rng: &mut Rng,
) -> Result<SourceTerms> {
    let x = patches(g, src, idx)?;
    let enc = model.encode(g, bound, x)?;
    let mask = dropout(config, &[idx.len(), config.model.code_dim()], drop_rng)?;
    let probs = networks::classify(g, enc.code, &bound.classifier, mask.as_ref())?;
    let labels: Vec<usize> = idx.iter().map(|&i| src.labels[i]).collect();
    let l_c = losses::classification_loss(g, probs, &losses::one_hot_labels(&labels, src.classes)?)?;
    let l_s = match (&model.bank, bound.centers) {
        (Some(bank), Some(c)) => Some(patterns::sparsity_loss(g, enc.features, c, bank.alpha_s, bank.threshold)?),
        _ => None,
    };
    Ok(SourceTerms { l_c, l_s })
}

fn g_update(
    model: &mut Model,
    g: &Graph,
    bound: &model::BoundModel,
    opt: &mut Adam,
    config: &TrainConfig,
) -> Result<()> {
    let vars = bound.vars();
    adam_update(
        &mut model.g_params_mut(),
        &grads_of(g, &vars),
        opt,
        config.lr_step23,
        &config.adam,
    )
}

/// Phase 2: classification plus sparsity on source data, updating the
/// extractor top, the centers and the classifier.
pub fn phase2_finetune(ckpt: &Checkpoint, data: &TrainData) -> Result<(Checkpoint, TrainLog)> {
    data.validate()?;
    let config = &ckpt.config;
    let mut model = ckpt.model.clone();
    let mut opt = Adam::for_params(&model.g_params_mut());
    let mut log = TrainLog::default();
    let mut batch_rng = rng::stream(config.seed, tags::BATCH, 20);
    let mut drop_rng = rng::stream(config.seed, tags::DROPOUT, 2);
    let w = config.weights;
    for step in 0..config.steps_phase2 {
        let idx = batch_indices(&mut batch_rng, data.source.len(), config.batch_source);
        let last_good = || Checkpoint {
            config: config.clone(),
            model: model.clone(),
            phase: 1,
            steps: [ckpt.steps[0], step, 0],
            g_opt: Some(opt.clone()),
            d_opt: None,
        };
        let run = |model: &mut Model, opt: &mut Adam, drop_rng: &mut Rng| -> Result<LossReport> {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, g_trainable(config));
            let t = source_terms(&mut g, model, &bound, config, data.source, &idx, drop_rng)?;
            let total = losses::total_g_loss_var(&mut g, t.l_c, None, None, t.l_s, &w)?;
            g.backward(total)?;
            let report = LossReport {
                l_c: g.values(t.l_c)[0],
                l_s: t.l_s.map_or(0.0, |v| g.values(v)[0]),
                l_total: finite_or(g.values(total)[0], "total_loss")?,
                ..LossReport::default()
            };
            g_update(model, &g, &bound, opt, config)?;
            Ok(report)
        };
        let snapshot = last_good();
        let report = run(&mut model, &mut opt, &mut drop_rng).map_err(|e| diverged(2, step, e, &snapshot))?;
        log.steps.push(StepRecord {
            phase: 2,
            step,
            losses: report,
            d_acc_h: None,
            d_acc_l: None,
        });
    }
    Ok((
        Checkpoint {
            config: config.clone(),
            model,
            phase: 2,
            steps: [ckpt.steps[0], config.steps_phase2, 0],
            g_opt: Some(opt),
            d_opt: None,
        },
        log,
    ))
}

/// Outputs of one discriminator update, measured before the update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DStep {
    pub l_dh: f64,
    pub l_dl: f64,
    /// Generator losses implied by the same discriminator outputs.
    pub l_gh: f64,
    pub l_gl: f64,
    pub acc_h: f64,
    pub acc_l: Option<f64>,
}

fn accuracy(ds: &[f64], dt: &[f64]) -> f64 {
    let hits = ds.iter().filter(|&&p| p > 0.5).count() + dt.iter().filter(|&&p| p < 0.5).count();
    hits as f64 / (ds.len() + dt.len()) as f64
}

fn neg_mean_log(p: &[f64]) -> f64 {
    -p.iter().map(|&x| x.clamp(losses::DISC_EPS, 1.0 - losses::DISC_EPS).ln()).sum::<f64>() / p.len() as f64
}

/// Local residual rows `[B*P, d]` and their hard assignment.
fn local_inputs(
    g: &mut Graph,
    features: Var,
    similarity: Var,
    centers: Var,
) -> Result<(Var, patterns::HardAssignment)> {
    let hard = patterns::hard_assign(g.value(similarity));
    let r = patterns::residuals(g, features, centers, &hard)?;
    let d = *g.shape(features).last().expect("rank 3");
    let r = g.reshape(r, &[hard.indices.len(), d])?;
    Ok((r, hard))
}

/// One update of both discriminators on a fresh source and target batch.
/// Generator-side parameters are read but never written.
pub fn discriminator_step(
    model: &mut Model,
    opt: &mut Adam,
    config: &TrainConfig,
    data: &TrainData,
    rng: &mut Rng,
) -> Result<DStep> {
    let is = batch_indices(rng, data.source.len(), config.batch_source);
    let it = batch_indices(rng, data.target.len(), config.batch_target);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, Trainable::NONE);
    let dh = model.disc_h.bind(&mut g, model.disc_h.layers.len());
    let dl = model.disc_l.as_ref().map(|d| d.bind(&mut g, d.layers.len()));
    let xs = patches(&mut g, data.source, &is)?;
    let xt = patches(&mut g, data.target, &it)?;
    let es = model.encode(&mut g, &bound, xs)?;
    let et = model.encode(&mut g, &bound, xt)?;
    let ps = networks::discriminate_holistic(&mut g, es.code, &dh)?;
    let pt = networks::discriminate_holistic(&mut g, et.code, &dh)?;
    let l_dh = losses::holistic_d_loss(&mut g, ps, pt)?;
    let mut total = l_dh;
    let mut local = None;
    if let (Some(dl), Some(c), Some(ss), Some(st)) = (&dl, bound.centers, es.similarity, et.similarity) {
        let (rs, hs) = local_inputs(&mut g, es.features, ss, c)?;
        let (rt, ht) = local_inputs(&mut g, et.features, st, c)?;
        let qs = networks::discriminate_local(&mut g, rs, &hs, dl)?;
        let qt = networks::discriminate_local(&mut g, rt, &ht, dl)?;
        let l_dl = losses::local_d_loss(&mut g, qs, qt)?;
        total = g.add(total, l_dl)?;
        local = Some((l_dl, qs, qt));
    }
    g.backward(total)?;
    finite_or(g.values(total)[0], "discriminator_loss")?;
    let mut vars = dh.vars();
    if let Some(dl) = &dl {
        vars.extend(dl.vars());
    }
    let out = DStep {
        l_dh: g.values(l_dh)[0],
        l_gh: neg_mean_log(g.values(pt)),
        acc_h: accuracy(g.values(ps), g.values(pt)),
        l_dl: local.map_or(0.0, |(l, _, _)| g.values(l)[0]),
        l_gl: local.map_or(0.0, |(_, _, qt)| neg_mean_log(g.values(qt))),
        acc_l: local.map(|(_, qs, qt)| accuracy(g.values(qs), g.values(qt))),
    };
    adam_update(
        &mut model.d_params_mut(),
        &grads_of(&g, &vars),
        opt,
        config.lr_step23,
        &config.adam,
    )?;
    Ok(out)
}

/// One update of the extractor top, centers and classifier on the joint
/// objective. Discriminator parameters are read but never written.
pub fn generator_step(
    model: &mut Model,
    opt: &mut Adam,
    config: &TrainConfig,
    data: &TrainData,
    src_rng: &mut Rng,
    tgt_rng: &mut Rng,
    drop_rng: &mut Rng,
) -> Result<LossReport> {
    let w = config.weights;
    let is = batch_indices(src_rng, data.source.len(), config.batch_source);
    let it = batch_indices(tgt_rng, data.target.len(), config.batch_target);
    let mut g = Graph::new();
    let bound = model.bind(&mut g, g_trainable(config));
    let t = source_terms(&mut g, model, &bound, config, data.source, &is, drop_rng)?;
    let mut l_gh = None;
    let mut l_gl = None;
    let use_local = w.lambda_l > 0.0 && model.disc_l.is_some();
    if w.lambda_h > 0.0 || use_local {
        let xt = patches(&mut g, data.target, &it)?;
        let et = model.encode(&mut g, &bound, xt)?;
        if w.lambda_h > 0.0 {
            let dh = model.disc_h.bind(&mut g, 0);
            let pt = networks::discriminate_holistic(&mut g, et.code, &dh)?;
            l_gh = Some(losses::holistic_g_loss(&mut g, pt)?);
        }
        if let (true, Some(dl), Some(c), Some(st)) = (use_local, &model.disc_l, bound.centers, et.similarity) {
            let dl = dl.bind(&mut g, 0);
            let (rt, ht) = local_inputs(&mut g, et.features, st, c)?;
            let qt = networks::discriminate_local(&mut g, rt, &ht, &dl)?;
            l_gl = Some(losses::local_g_loss(&mut g, qt)?);
        }
    }
    let total = losses::total_g_loss_var(&mut g, t.l_c, l_gh, l_gl, t.l_s, &w)?;
    g.backward(total)?;
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.values(v)[0]);
    let report = LossReport {
        l_c: g.values(t.l_c)[0],
        l_gh: val(l_gh),
        l_gl: val(l_gl),
        l_s: val(t.l_s),
        l_total: finite_or(g.values(total)[0], "total_loss")?,
        ..LossReport::default()
    };
    g_update(model, &g, &bound, opt, config)?;
    Ok(report)
}

/// Discriminator outputs for precomputed forwards: holistic per sample and,
/// with a pattern bank, local per position.
pub fn discriminator_outputs(model: &Model, forwards: &[model::EvalForward]) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    let mut ph = Vec::new();
    let mut pl: Option<Vec<f64>> = model.disc_l.as_ref().map(|_| Vec::new());
    for f in forwards {
        let n = f.probs.len() / model.classes;
        let mut g = Graph::new();
        let dh = model.disc_h.bind(&mut g, 0);
        let code = g.constant(Tensor::new(&[n, model.config.code_dim()], f.codes.clone())?);
        let p = networks::discriminate_holistic(&mut g, code, &dh)?;
        ph.extend_from_slice(g.values(p));
        if let (Some(dl), Some(bank), Some(hard), Some(out)) = (&model.disc_l, &model.bank, &f.hard, pl.as_mut()) {
            let dl = dl.bind(&mut g, 0);
            let feats = g.constant(Tensor::new(&[hard.indices.len(), bank.dim], f.features.clone())?);
            let c = g.constant(bank.centers_tensor());
            let r = patterns::residuals(&mut g, feats, c, hard)?;
            let q = networks::discriminate_local(&mut g, r, hard, &dl)?;
            out.extend_from_slice(g.values(q));
        }
    }
    Ok((ph, pl))
}

/// Fraction of correct domain calls at threshold 0.5; source is class 1.
pub fn domain_accuracy(source: &[f64], target: &[f64]) -> f64 {
    accuracy(source, target)
}

/// Held-out discriminator accuracies on the first `max_n` samples per domain.
pub fn discriminator_accuracy(
    model: &Model,
    source: &DomainDataset,
    target: &DomainDataset,
    max_n: usize,
    exec: Exec,
) -> Result<(f64, Option<f64>)> {
    let head = |ds: &DomainDataset| -> Result<Vec<model::EvalForward>> {
        let n = ds.len().min(max_n.max(1));
        let idx: Vec<usize> = (0..n).collect();
        let sub = DomainDataset {
            samples: ds.gather(&idx),
            labels: ds.labels[..n].to_vec(),
            ..ds.clone()
        };
        model::forward_dataset(model, &sub, 128, exec)
    };
    let (hs, ls) = discriminator_outputs(model, &head(source)?)?;
    let (ht, lt) = discriminator_outputs(model, &head(target)?)?;
    let acc_l = match (ls, lt) {
        (Some(a), Some(b)) => Some(accuracy(&a, &b)),
        _ => None,
    };
    Ok((accuracy(&hs, &ht), acc_l))
}

/// Phase 3: alternating discriminator and generator updates.
pub fn phase3_adapt(ckpt: &Checkpoint, data: &TrainData) -> Result<(Checkpoint, TrainLog)> {
    data.validate()?;
    let config = &ckpt.config;
    let mut model = ckpt.model.clone();
    let mut g_opt = Adam::for_params(&model.g_params_mut());
    let mut d_opt = Adam::for_params(&model.d_params_mut());
    let mut log = TrainLog::default();
    let mut d_rng = rng::stream(config.seed, tags::BATCH, 30);
    let mut src_rng = rng::stream(config.seed, tags::BATCH, 31);
    let mut tgt_rng = rng::stream(config.seed, tags::BATCH, 32);
    let mut drop_rng = rng::stream(config.seed, tags::DROPOUT, 3);
    let probe_src = data.probe_source.unwrap_or(data.source);
    let train_d = config.train_discriminators;

    let snapshot = |model: &Model, g_opt: &Adam, d_opt: &Adam, phase: u8, step: usize| Checkpoint {
        config: config.clone(),
        model: model.clone(),
        phase,
        steps: [ckpt.steps[0], ckpt.steps[1], step],
        g_opt: Some(g_opt.clone()),
        d_opt: Some(d_opt.clone()),
    };
    let probe = |model: &Model, step: usize| -> Result<ProbeRecord> {
        let (acc_h, acc_l) = discriminator_accuracy(model, probe_src, data.target, config.probe_size, data.exec)?;
        Ok(ProbeRecord { step, acc_h, acc_l })
    };

    if train_d {
        for _ in 0..config.d_warmup_steps {
            discriminator_step(&mut model, &mut d_opt, config, data, &mut d_rng)
                .map_err(|e| diverged(3, 0, e, &snapshot(&model, &g_opt, &d_opt, 2, 0)))?;
        }
        log.probes.push(probe(&model, 0)?);
    }
    for step in 0..config.steps_phase3 {
        let good = snapshot(&model, &g_opt, &d_opt, 2, step);
        let mut last_d = None;
        if train_d {
            for _ in 0..config.d_steps_per_g_step {
                last_d = Some(discriminator_step(&mut model, &mut d_opt, config, data, &mut d_rng).map_err(|e| diverged(3, step, e, &good))?);
            }
        }
        let mut report = generator_step(
            &mut model,
            &mut g_opt,
            config,
            data,
            &mut src_rng,
            &mut tgt_rng,
            &mut drop_rng,
        )
        .map_err(|e| diverged(3, step, e, &good))?;
        if let Some(d) = &last_d {
            report.l_dh = d.l_dh;
            report.l_dl = d.l_dl;
            if config.weights.lambda_h == 0.0 {
                report.l_gh = d.l_gh;
            }
            if config.weights.lambda_l == 0.0 {
                report.l_gl = d.l_gl;
            }
        }
        log.steps.push(StepRecord {
            phase: 3,
            step,
            losses: report,
            d_acc_h: last_d.as_ref().map(|d| d.acc_h),
            d_acc_l: last_d.as_ref().and_then(|d| d.acc_l),
        });
        let done = step + 1;
        if train_d && (done == config.steps_phase3 || (config.probe_every > 0 && done % config.probe_every == 0)) {
            log.probes.push(probe(&model, done)?);
        }
    }
    Ok((snapshot(&model, &g_opt, &d_opt, 3, config.steps_phase3), log))
}

/// Runs all three phases.
pub fn train_full(config: &TrainConfig, data: &TrainData) -> Result<(Checkpoint, TrainLog)> {
    let (c1, mut log) = phase1_classifier(config, data)?;
    let (c2, l2) = phase2_finetune(&c1, data)?;
    log.extend(l2);
    let (c3, l3) = phase3_adapt(&c2, data)?;
    log.extend(l3);
    Ok((c3, log))
}

const CKPT_MAGIC: &[u8; 4] = b"LFPC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    config: TrainConfig,
    config_hash: String,
    classes: usize,
    patch_dim: usize,
    phase: u8,
    steps: [usize; 3],
    g_opt: Option<OptMeta>,
    d_opt: Option<OptMeta>,
}

#[derive(Serialize, Deserialize)]
struct OptMeta {
    t: u64,
    sizes: Vec<usize>,
}

impl OptMeta {
    fn of(o: &Adam) -> Self {
        Self {
            t: o.t,
            sizes: o.m.iter().map(Vec::len).collect(),
        }
    }
}

fn put_array(out: &mut Vec<u8>, name: &str, values: &[f64]) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(values.len() as u64).to_le_bytes());
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    fn opt_arrays(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out = Vec::new();
        for (tag, opt) in [("g", &self.g_opt), ("d", &self.d_opt)] {
            if let Some(o) = opt {
                for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
                    out.push((format!("adam.{tag}.m.{i}"), m));
                    out.push((format!("adam.{tag}.v.{i}"), v));
                }
            }
        }
        out
    }

    /// `magic | version u32 | meta_len u64 | meta JSON | count u64 |
    /// (name_len u32, name, len u64, f64 x len)*`, little-endian.
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = CheckpointMeta {
            config: self.config.clone(),
            config_hash: self.config.hash(),
            classes: self.model.classes,
            patch_dim: self.model.patch_dim,
            phase: self.phase,
            steps: self.steps,
            g_opt: self.g_opt.as_ref().map(OptMeta::of),
            d_opt: self.d_opt.as_ref().map(OptMeta::of),
        };
        let meta = serde_json::to_vec(&meta).expect("meta serializes");
        let mut model = self.model.clone();
        let params = model.named_params_mut();
        let opts = self.opt_arrays();
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&((params.len() + opts.len()) as u64).to_le_bytes());
        for (name, p) in &params {
            put_array(&mut out, name, p);
        }
        for (name, p) in &opts {
            put_array(&mut out, name, p);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4, "magic")? != CKPT_MAGIC {
            return Err(Error::Format("not a checkpoint file (bad magic)".into()));
        }
        let version = u32::from_le_bytes(r.take(4, "version")?.try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint version mismatch: expected {CHECKPOINT_VERSION}, found {version}"
            )));
        }
        let meta_len = r.len("metadata length")?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?)?;
        if meta.config.hash() != meta.config_hash {
            return Err(Error::Format("checkpoint config hash does not match its config".into()));
        }
        let mut model = Model::new(&meta.config.model, meta.classes, meta.patch_dim, meta.config.seed)?;
        let restore = |m: &OptMeta| Adam {
            t: m.t,
            ..Adam::new(&m.sizes)
        };
        let mut g_opt = meta.g_opt.as_ref().map(restore);
        let mut d_opt = meta.d_opt.as_ref().map(restore);
        let count = r.len("array count")?;
        let mut arrays = std::collections::HashMap::new();
        for _ in 0..count {
            let name_len = u32::from_le_bytes(r.take(4, "array name length")?.try_into().expect("4 bytes")) as usize;
            let name = String::from_utf8(r.take(name_len, "array name")?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let n = r.len("array length")?;
            let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Format("array too large".into()))?, &name)?;
            let vals: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            arrays.insert(name, vals);
        }
        if r.pos != buf.len() {
            return Err(Error::Format(format!("{} trailing bytes in checkpoint", buf.len() - r.pos)));
        }
        let mut fill = |name: String, dst: &mut Vec<f64>| -> Result<()> {
            let src = arrays
                .remove(&name)
                .ok_or_else(|| Error::Format(format!("checkpoint is missing array `{name}`")))?;
            if src.len() != dst.len() {
                return Err(Error::Format(format!(
                    "array `{name}` has {} values, expected {}",
                    src.len(),
                    dst.len()
                )));
            }
            *dst = src;
            Ok(())
        };
        for (name, p) in model.named_params_mut() {
            fill(name, p)?;
        }
        for (tag, opt) in [("g", &mut g_opt), ("d", &mut d_opt)] {
            if let Some(o) = opt {
                for (i, (m, v)) in o.m.iter_mut().zip(o.v.iter_mut()).enumerate() {
                    fill(format!("adam.{tag}.m.{i}"), m)?;
                    fill(format!("adam.{tag}.v.{i}"), v)?;
                }
            }
        }
        if let Some(name) = arrays.keys().next() {
            return Err(Error::Format(format!("unexpected array `{name}` in checkpoint")));
        }
        Ok(Checkpoint {
            config: meta.config,
            model,
            phase: meta.phase,
            steps: meta.steps,
            g_opt,
            d_opt,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < self.pos.saturating_add(n) {
            return Err(Error::Format(format!(
                "truncated checkpoint: {what} needs {n} bytes at offset {}, {} missing",
                self.pos,
                self.pos + n - self.buf.len()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes"));
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} overflows")))
    }
}
