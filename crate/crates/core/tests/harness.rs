use lfpa::harness::{self, EmbedKind, Pca, Suite, SuiteConfig, SUITE_CSV_HEADER};
use lfpa::model::{self, ModelConfig};
use lfpa::par::Exec;
use lfpa::synthdata::{self, Domain, Task, TaskSpec};
use lfpa::trainer::{self, TrainConfig, TrainData};
use proptest::prelude::*;

fn spec(seed: u64) -> TaskSpec {
    TaskSpec {
        seed,
        rows: 3,
        cols: 3,
        n_source: 96,
        n_target: 96,
        n_source_eval: 48,
        ..TaskSpec::default()
    }
}

fn train(seed: u64, steps: usize) -> TrainConfig {
    TrainConfig {
        seed,
        model: ModelConfig {
            patterns: 6,
            hidden: 12,
            feature_dim: 6,
            disc_hidden: vec![8],
            ..ModelConfig::default()
        },
        steps_phase1: steps,
        steps_phase2: steps / 2,
        steps_phase3: steps / 2,
        batch_source: 16,
        batch_target: 16,
        probe_every: 0,
        probe_size: 32,
        ..TrainConfig::default()
    }
}

fn initial_model(t: &Task, seed: u64) -> lfpa::model::Model {
    let cfg = train(seed, 0);
    let data = TrainData {
        source: &t.source,
        target: &t.target,
        probe_source: None,
        exec: Exec::Sequential,
    };
    trainer::phase1_classifier(&cfg, &data).unwrap().0.model
}

#[test]
fn constant_classifier_scores_its_class_share() {
    let t = synthdata::generate_task(&spec(1), Exec::Sequential).unwrap();
    let mut m = initial_model(&t, 1);
    m.classifier.weight.iter_mut().for_each(|w| *w = 0.0);
    m.classifier.bias.iter_mut().for_each(|b| *b = 0.0);
    m.classifier.bias[2] = 1.0;
    let rep = harness::evaluate(&m, &t.source_eval, &t.target, Exec::Sequential).unwrap();
    let share = |labels: &[usize]| labels.iter().filter(|&&y| y == 2).count() as f64 / labels.len() as f64;
    assert_eq!(rep.source_accuracy, share(&t.source_eval.labels));
    assert_eq!(rep.target_accuracy, share(&t.target.labels));
}

#[test]
fn pattern_balance_counts_hard_assignments() {
    let t = synthdata::generate_task(&spec(2), Exec::Sequential).unwrap();
    let m = initial_model(&t, 2);
    let rep = harness::evaluate(&m, &t.source, &t.target, Exec::Sequential).unwrap();
    let mut counts = vec![[0usize; 2]; m.k()];
    for (dom, ds) in [(0, &t.source), (1, &t.target)] {
        for f in model::forward_dataset(&m, ds, 7, Exec::Sequential).unwrap() {
            for &i in &f.hard.unwrap().indices {
                counts[i][dom] += 1;
            }
        }
    }
    assert_eq!(rep.per_pattern_balance.len(), m.k());
    for (&(s, tg), [a, b]) in rep.per_pattern_balance.iter().zip(counts) {
        if a + b == 0 {
            assert_eq!((s, tg), (0.0, 0.0));
        } else {
            assert!((s - a as f64 / (a + b) as f64).abs() < 1e-12);
            assert!((s + tg - 1.0).abs() < 1e-12);
        }
    }
    let ln_k = (m.k() as f64).ln();
    assert!((0.0..=ln_k).contains(&rep.mean_assignment_entropy));
}

#[test]
fn untrained_models_score_near_chance() {
    let mut accs = Vec::new();
    for seed in 0..5 {
        let t = synthdata::generate_task(&spec(seed), Exec::Sequential).unwrap();
        let mut m = initial_model(&t, seed);
        // Zero steps leave the random classifier; drop its bias so no class
        // is favoured outright.
        m.classifier.bias.iter_mut().for_each(|b| *b = 0.0);
        accs.push(harness::evaluate(&m, &t.source_eval, &t.target, Exec::Sequential).unwrap().target_accuracy);
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!((mean - 0.25).abs() <= 0.1, "mean {mean}: {accs:?}");
}

#[test]
fn evaluation_rejects_mismatched_data() {
    let t = synthdata::generate_task(&spec(3), Exec::Sequential).unwrap();
    let m = initial_model(&t, 3);
    let other = synthdata::generate_task(
        &TaskSpec {
            patch_dim: 5,
            ..spec(3)
        },
        Exec::Sequential,
    )
    .unwrap();
    let err = harness::evaluate(&m, &other.source, &t.target, Exec::Sequential).unwrap_err().to_string();
    assert!(err.contains("patch_dim=5"), "{err}");
}

#[test]
fn unknown_suites_list_the_valid_names() {
    let err = "tables".parse::<Suite>().unwrap_err().to_string();
    for name in Suite::NAMES {
        assert!(err.contains(name), "{err}");
        assert_eq!(name.parse::<Suite>().unwrap().to_string(), name);
    }
}

#[test]
fn suites_expand_to_the_expected_runs() {
    let cfg = SuiteConfig::default();
    let labels = |s| harness::suite_runs(s, &cfg).unwrap().into_iter().map(|r| r.label).collect::<Vec<_>>();
    assert_eq!(labels(Suite::Baselines), ["source_only", "h", "h_l"]);
    assert_eq!(labels(Suite::PatternSweep), ["k=0", "k=8", "k=16", "k=32", "k=64"]);
    let neg = harness::suite_runs(Suite::NegativeTransfer, &cfg).unwrap();
    assert!(neg.iter().all(|r| r.keep_classes == Some(2)));
    let so = &harness::suite_runs(Suite::Baselines, &cfg).unwrap()[0].train;
    assert_eq!((so.weights.lambda_h, so.weights.lambda_l, so.train_discriminators), (0.0, 0.0, false));
    assert_eq!(so.weights.lambda_s, cfg.train.weights.lambda_s);
}

#[test]
fn baselines_table_has_a_row_per_run_and_records_aborts() {
    let cfg = SuiteConfig {
        task: spec(0),
        train: train(0, 20),
        ..SuiteConfig::default()
    };
    let rows = harness::run_suite(Suite::Baselines, &cfg, Exec::Parallel).unwrap();
    assert_eq!(rows.len(), 15);
    assert!(rows.iter().all(|r| r.ok()));
    for r in &rows {
        let trained_d = r.config != "source_only";
        assert_eq!(r.d_h_probe_start.is_some(), trained_d);
        assert_eq!(r.d_h_probe_end.is_some(), trained_d);
    }
    let seq = harness::run_suite(Suite::Baselines, &cfg, Exec::Sequential).unwrap();
    assert_eq!(rows, seq);

    let broken = SuiteConfig {
        train: TrainConfig {
            lr_step23: 1e300,
            ..cfg.train.clone()
        },
        seeds: vec![0],
        ..cfg.clone()
    };
    let bad = harness::run_suite(Suite::Baselines, &broken, Exec::Sequential).unwrap();
    assert!(bad.iter().all(|r| r.status.starts_with("aborted") && r.report.is_none()));

    let mut csv = Vec::new();
    harness::write_suite_csv(&[rows, bad].concat(), &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], SUITE_CSV_HEADER);
    assert_eq!(lines.len(), 1 + 15 + 3);
    let cols = SUITE_CSV_HEADER.split(',').count();
    assert!(lines.iter().all(|l| l.split(',').count() == cols));
    assert!(lines.last().unwrap().contains(",aborted"));
}

#[test]
fn config_means_skip_failed_rows() {
    let cfg = SuiteConfig {
        task: spec(0),
        train: train(0, 10),
        seeds: vec![0, 1],
        ..SuiteConfig::default()
    };
    let mut rows = harness::run_suite(Suite::Baselines, &cfg, Exec::Sequential).unwrap();
    rows[0].status = "aborted: test".into();
    let means = harness::config_means(&rows, |r| Some(r.seed as f64));
    assert_eq!(means, vec![("source_only".to_string(), 1.0), ("h".into(), 0.5), ("h_l".into(), 0.5)]);
}

/// Closed-form eigenvalues of a symmetric 2x2 matrix, largest first.
fn eig2(a: f64, b: f64, d: f64) -> (f64, f64) {
    let mid = 0.5 * (a + d);
    let r = (0.25 * (a - d).powi(2) + b * b).sqrt();
    (mid + r, mid - r)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn pca_matches_the_closed_form_in_two_dimensions(pts in proptest::collection::vec(-4.0f64..4.0, 2 * 12)) {
        let n = 12.0;
        let mean = |j: usize| pts.iter().skip(j).step_by(2).sum::<f64>() / n;
        let (mx, my) = (mean(0), mean(1));
        let cov = |p: usize, q: usize, mp: f64, mq: f64| {
            pts.chunks_exact(2).map(|r| (r[p] - mp) * (r[q] - mq)).sum::<f64>() / (n - 1.0)
        };
        let (l1, l2) = eig2(cov(0, 0, mx, mx), cov(0, 1, mx, my), cov(1, 1, my, my));
        let pca = Pca::fit(&pts, 2).unwrap();
        prop_assert!((pca.eigenvalues[0] - l1).abs() < 1e-9);
        prop_assert!((pca.eigenvalues[1] - l2.max(0.0)).abs() < 1e-9);
        // Mean squared residual is the dropped variance times (n-1)/n.
        prop_assert!((pca.reconstruction_error(&pts, 1) - l2.max(0.0) * (n - 1.0) / n).abs() < 1e-9);
        prop_assert!(pca.reconstruction_error(&pts, 2) < 1e-18 + 1e-12 * l1);
        let norm: f64 = pca.components[0].iter().map(|x| x * x).sum();
        prop_assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn more_components_never_reconstruct_worse(pts in proptest::collection::vec(-4.0f64..4.0, 4 * 10)) {
        let pca = Pca::fit(&pts, 4).unwrap();
        let errs: Vec<f64> = (0..=4).map(|k| pca.reconstruction_error(&pts, k)).collect();
        for w in errs.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-12);
        }
        for k in 0..4 {
            prop_assert!(pca.explained(k) <= pca.explained(k + 1) + 1e-12);
        }
    }
}

#[test]
fn pca_of_a_line_explains_everything() {
    let pts: Vec<f64> = (0..50).flat_map(|i| [i as f64 * 0.1, i as f64 * 0.1]).collect();
    let pca = Pca::fit(&pts, 2).unwrap();
    assert!(pca.explained(1) >= 0.999);
    let s = 0.5f64.sqrt();
    assert!((pca.components[0][0] - s).abs() < 1e-12 && (pca.components[0][1] - s).abs() < 1e-12);
    assert!(Pca::fit(&pts[..2], 2).is_err());
}

#[test]
fn embeddings_have_one_row_per_sample_or_position() {
    let t = synthdata::generate_task(&spec(4), Exec::Sequential).unwrap();
    let m = initial_model(&t, 4);
    let n = t.source_eval.len() + t.target.len();
    let hol = harness::export_embeddings(&m, &t.source_eval, &t.target, EmbedKind::Holistic, Exec::Sequential).unwrap();
    assert_eq!(hol.len(), n);
    assert_eq!(hol.iter().filter(|r| r.domain == Domain::Target).count(), t.target.len());
    assert!(hol.iter().all(|r| r.tag.unwrap() < t.source.classes));
    let loc = harness::export_embeddings(&m, &t.source_eval, &t.target, EmbedKind::Local, Exec::Sequential).unwrap();
    assert_eq!(loc.len(), n * t.source.rows * t.source.cols);
    assert!(loc.iter().all(|r| r.tag.unwrap() < m.k()));
    // Projections are centered.
    let mean: f64 = hol.iter().map(|r| r.pc1).sum::<f64>() / n as f64;
    assert!(mean.abs() < 1e-9);

    let mut csv = Vec::new();
    harness::write_embeddings_csv(&loc, EmbedKind::Local, &mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    assert!(text.starts_with("pc1,pc2,domain,pattern\n"));
    assert_eq!(text.lines().count(), loc.len() + 1);
    assert!("tsne".parse::<EmbedKind>().unwrap_err().to_string().contains("holistic, local"));
}
