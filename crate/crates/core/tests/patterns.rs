use lfpa::par::Exec;
use lfpa::patterns::{self, kmeans, KMeansOptions, VladNorm};
use lfpa::tensor::{Graph, Tensor};
use proptest::prelude::*;

fn grid(b: usize, p: usize, d: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, b * p * d).prop_map(move |v| Tensor::new(&[b, p, d], v).unwrap())
}

fn centers(k: usize, d: usize) -> impl Strategy<Value = Tensor> {
    proptest::collection::vec(-3.0f64..3.0, k * d).prop_map(move |v| Tensor::new(&[k, d], v).unwrap())
}

fn similarity(f: &Tensor, c: &Tensor, decay: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let cv = g.constant(c.clone());
    let s = patterns::soft_assign(&mut g, fv, cv, decay).unwrap();
    g.values(s).to_vec()
}

fn vlad(f: &Tensor, s: &Tensor, c: &Tensor, norm: VladNorm) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let sv = g.constant(s.clone());
    let cv = g.constant(c.clone());
    let code = patterns::vlad_encode(&mut g, fv, sv, cv, norm).unwrap();
    (g.values(code.raw).to_vec(), g.values(code.holistic).to_vec())
}

fn entropies(f: &Tensor, c: &Tensor, decay: f64) -> Vec<f64> {
    let mut g = Graph::new();
    let fv = g.constant(f.clone());
    let cv = g.constant(c.clone());
    let s = patterns::soft_assign(&mut g, fv, cv, decay).unwrap();
    let h = patterns::entropy(&mut g, s).unwrap();
    g.values(h).to_vec()
}

fn bits(v: &[f64]) -> Vec<u64> {
    v.iter().map(|x| x.to_bits()).collect()
}

const K: usize = 5;
const D: usize = 3;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn similarity_rows_are_distributions(f in grid(2, 6, D), c in centers(K, D)) {
        for decay in [0.005, 1.0, 5000.0] {
            let s = similarity(&f, &c, decay);
            for row in s.chunks_exact(K) {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
                prop_assert!(row.iter().all(|&x| (0.0..=1.0).contains(&x)));
            }
        }
    }

    #[test]
    fn similarity_is_translation_invariant(f in grid(2, 4, D), c in centers(K, D), t in proptest::collection::vec(-3.0f64..3.0, D)) {
        let shift = |x: &Tensor| {
            let v = x.values().iter().enumerate().map(|(i, a)| a + t[i % D]).collect();
            Tensor::new(x.shape(), v).unwrap()
        };
        for decay in [0.005, 1.0] {
            let a = similarity(&f, &c, decay);
            let b = similarity(&shift(&f), &shift(&c), decay);
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn aggregation_ignores_position_order(
        f in grid(2, 9, D),
        c in centers(K, D),
        perm in Just((0..9).collect::<Vec<usize>>()).prop_shuffle(),
    ) {
        let s = Tensor::new(&[2, 9, K], similarity(&f, &c, 1.0)).unwrap();
        let permute = |x: &Tensor, w: usize| {
            let mut v = Vec::with_capacity(x.len());
            for b in 0..2 {
                for &p in &perm {
                    v.extend_from_slice(&x.values()[(b * 9 + p) * w..(b * 9 + p + 1) * w]);
                }
            }
            Tensor::new(x.shape(), v).unwrap()
        };
        for norm in [VladNorm::None, VladNorm::Global, VladNorm::IntraGlobal] {
            let (raw_a, hol_a) = vlad(&f, &s, &c, norm);
            let (raw_b, hol_b) = vlad(&permute(&f, D), &permute(&s, K), &c, norm);
            prop_assert_eq!(bits(&raw_a), bits(&raw_b));
            prop_assert_eq!(bits(&hol_a), bits(&hol_b));
        }
    }

    #[test]
    fn holistic_code_has_unit_norm(f in grid(3, 4, D), c in centers(K, D)) {
        let s = Tensor::new(&[3, 4, K], similarity(&f, &c, 1.0)).unwrap();
        for norm in [VladNorm::Global, VladNorm::IntraGlobal] {
            let (raw, hol) = vlad(&f, &s, &c, norm);
            for (r, h) in raw.chunks_exact(K * D).zip(hol.chunks_exact(K * D)) {
                let n = h.iter().map(|x| x * x).sum::<f64>().sqrt();
                if r.iter().all(|&x| x == 0.0) {
                    prop_assert!(h.iter().all(|&x| x == 0.0));
                } else {
                    prop_assert!((n - 1.0).abs() < 1e-6, "norm {n}");
                }
            }
        }
    }

    #[test]
    fn residual_at_its_center_gives_a_zero_column(c in centers(K, D), k in 0..K) {
        let f = Tensor::new(&[1, 1, D], c.values()[k * D..(k + 1) * D].to_vec()).unwrap();
        let mut onehot = vec![0.0; K];
        onehot[k] = 1.0;
        let s = Tensor::new(&[1, 1, K], onehot).unwrap();
        let (raw, hol) = vlad(&f, &s, &c, VladNorm::IntraGlobal);
        prop_assert!(raw[k * D..(k + 1) * D].iter().all(|&x| x == 0.0));
        prop_assert!(hol[k * D..(k + 1) * D].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn entropy_and_sparsity_loss_are_bounded(f in grid(2, 5, D), c in centers(K, D), m in 0.0f64..0.5) {
        let ln_k = (K as f64).ln();
        for decay in [0.005, 0.5, 1.0, 5000.0] {
            for h in entropies(&f, &c, decay) {
                prop_assert!((-1e-12..=ln_k + 1e-12).contains(&h), "entropy {h}");
            }
            let mut g = Graph::new();
            let fv = g.constant(f.clone());
            let cv = g.constant(c.clone());
            let l = patterns::sparsity_loss(&mut g, fv, cv, decay, m).unwrap();
            let l = g.values(l)[0];
            prop_assert!(l >= m - 1e-12 && l <= ln_k.max(m) + 1e-12, "L_s {l}");
        }
    }

    #[test]
    fn larger_decay_never_raises_mean_entropy(f in grid(1, 8, D), c in centers(K, D), lo in 0.001f64..2.0, factor in 1.0f64..50.0) {
        let mean = |v: Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let a = mean(entropies(&f, &c, lo));
        let b = mean(entropies(&f, &c, lo * factor));
        prop_assert!(b <= a + 1e-12, "{b} > {a}");
    }

    #[test]
    fn sharp_assignment_matches_nearest_center(f in grid(1, 10, D), c in centers(K, D)) {
        let s = Tensor::new(&[1, 10, K], similarity(&f, &c, 5000.0)).unwrap();
        let hard = patterns::hard_assign(&s);
        for (p, &a) in hard.indices.iter().enumerate() {
            let x = &f.values()[p * D..(p + 1) * D];
            let dist = |k: usize| -> f64 { (0..D).map(|j| (x[j] - c.values()[k * D + j]).powi(2)).sum() };
            let best = (0..K).min_by(|&i, &j| dist(i).total_cmp(&dist(j))).unwrap();
            // Skip near ties, where the sharp softmax cannot separate centers.
            if (0..K).filter(|&k| k != best).all(|k| dist(k) - dist(best) > 1e-6) {
                prop_assert_eq!(a, best);
            }
        }
    }

    #[test]
    fn hard_residuals_sum_to_the_raw_columns(f in grid(1, 7, D), c in centers(K, D)) {
        let s = Tensor::new(&[1, 7, K], similarity(&f, &c, 1.0)).unwrap();
        let hard = patterns::hard_assign(&s);
        let onehot = hard.one_hot().unwrap().reshaped(&[1, 7, K]).unwrap();
        let (raw, _) = vlad(&f, &onehot, &c, VladNorm::None);

        let mut g = Graph::new();
        let fv = g.constant(f.clone());
        let cv = g.constant(c.clone());
        let r = patterns::residuals(&mut g, fv, cv, &hard).unwrap();
        let r = g.values(r);
        let mut expect = vec![0.0; K * D];
        for (p, &a) in hard.indices.iter().enumerate() {
            for j in 0..D {
                expect[a * D + j] += r[p * D + j];
            }
        }
        for (x, y) in raw.iter().zip(&expect) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn kmeans_inertia_never_increases(
        pts in proptest::collection::vec(-5.0f64..5.0, 2 * 40),
        k in 1usize..8,
        seed in any::<u64>(),
    ) {
        let opts = KMeansOptions { seed, max_iters: 50, tol: 0.0, exec: Exec::Sequential };
        let km = kmeans(&pts, 2, k, opts).unwrap();
        for w in km.inertia.windows(2) {
            prop_assert!(w[1] <= w[0], "{:?}", km.inertia);
        }
    }
}

#[test]
fn kmeans_two_clusters_match_best_partition() {
    let pts = [0.0, 0.1, 10.0, 10.1];
    // Oracle: every split of four sorted scalars into two contiguous groups.
    let best = (1..4)
        .map(|cut| {
            let (a, b) = pts.split_at(cut);
            let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
            let sse = |s: &[f64]| s.iter().map(|x| (x - mean(s)).powi(2)).sum::<f64>();
            (sse(a) + sse(b), mean(a), mean(b))
        })
        .min_by(|x, y| x.0.total_cmp(&y.0))
        .unwrap();
    for seed in 0..10 {
        let km = kmeans(&pts, 1, 2, KMeansOptions { seed, ..Default::default() }).unwrap();
        let mut c = km.centers.clone();
        c.sort_by(f64::total_cmp);
        assert_eq!(c, vec![best.1, best.2]);
        assert_eq!(c, vec![0.05, 10.05]);
    }
}

#[test]
fn kmeans_with_one_point_per_cluster() {
    let pts = [1.0, 2.0, -4.0, 0.5, 9.0, 9.0, 3.0, 3.5];
    let km = kmeans(&pts, 2, 4, KMeansOptions::default()).unwrap();
    let mut got: Vec<_> = km.centers.chunks(2).map(|c| (c[0], c[1])).collect();
    let mut want: Vec<_> = pts.chunks(2).map(|c| (c[0], c[1])).collect();
    got.sort_by(|a, b| a.partial_cmp(b).unwrap());
    want.sort_by(|a, b| a.partial_cmp(b).unwrap());
    assert_eq!(got, want);
    assert_eq!(*km.inertia.last().unwrap(), 0.0);
}

#[test]
fn kmeans_is_mode_independent() {
    let pts: Vec<f64> = (0..600).map(|i| ((i * 7919) % 1000) as f64 / 100.0).collect();
    let a = kmeans(&pts, 3, 6, KMeansOptions { exec: Exec::Sequential, ..Default::default() }).unwrap();
    let b = kmeans(&pts, 3, 6, KMeansOptions { exec: Exec::Parallel, ..Default::default() }).unwrap();
    assert_eq!(bits(&a.centers), bits(&b.centers));
}

#[test]
fn kmeans_rejects_too_few_points() {
    let err = kmeans(&[1.0, 2.0], 1, 3, KMeansOptions::default()).unwrap_err();
    assert!(err.to_string().contains("K=3"), "{err}");
}
