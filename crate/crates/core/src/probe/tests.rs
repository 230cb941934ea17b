use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::*;
use crate::rng;

fn brute_auc(s: &[f64], y: &[bool]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] && !y[j] {
                den += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    num / den
}

#[test]
fn auc_examples() {
    assert_eq!(roc_auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]).unwrap(), 0.75);
    assert_eq!(roc_auc(&[1.0, 2.0, 3.0], &[false, true, true]).unwrap(), 1.0);
    assert_eq!(roc_auc(&[0.3; 5], &[false, true, true, false, true]).unwrap(), 0.5);
    assert!(roc_auc(&[1.0, 2.0], &[true, true]).is_err());
    assert!(roc_auc(&[1.0, f64::NAN], &[true, false]).is_err());
}

fn labelled_scores() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2usize..=50).prop_flat_map(|n| {
        (
            prop::collection::vec(prop_oneof![(-5i32..5).prop_map(f64::from), -5.0f64..5.0], n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_filter("both classes", |(_, y)| y.iter().any(|v| *v) && y.iter().any(|v| !*v))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2000))]

    #[test]
    fn auc_matches_pair_counting((s, y) in labelled_scores()) {
        prop_assert!((roc_auc(&s, &y).unwrap() - brute_auc(&s, &y)).abs() < 1e-12);
    }

    #[test]
    fn auc_reflection_is_exact((s, y) in labelled_scores()) {
        let neg: Vec<f64> = s.iter().map(|v| -v).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), 1.0 - roc_auc(&neg, &y).unwrap());
    }

    #[test]
    fn auc_ignores_monotone_maps((s, y) in labelled_scores()) {
        let t: Vec<f64> = s.iter().map(|v| v.powi(3) + 2.0 * v).collect();
        prop_assert_eq!(roc_auc(&s, &y).unwrap(), roc_auc(&t, &y).unwrap());
    }
}

fn dataset(seed: u64, n: usize, d: usize) -> (Tensor, Vec<bool>) {
    let mut r = rng::stream(seed, 0);
    let w: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
    let x: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut r)).collect();
    let mut y: Vec<bool> = (0..n)
        .map(|i| {
            let t: f64 = (0..d).map(|j| x[i * d + j] * w[j]).sum::<f64>() + 0.3;
            r.random::<f64>() < 1.0 / (1.0 + (-t).exp())
        })
        .collect();
    y[0] = true;
    y[1] = false;
    (Tensor::new(vec![n, d], x).unwrap(), y)
}

/// Cyclic coordinate descent: each coordinate is minimised exactly by
/// bisection on its subgradient.
fn coordinate_descent(x: &Tensor, y: &[bool], c: f64, l1_share: f64, l2_share: f64) -> f64 {
    let (n, d) = (x.rows(), x.row_len());
    let (lam1, lam2) = (l1_share / c, l2_share / c);
    let mut w = vec![0.0; d + 1]; // last entry is the bias
    let feat = |i: usize, j: usize| if j == d { 1.0 } else { x.at2(i, j) };
    let objective = |w: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            let t: f64 = (0..=d).map(|j| feat(i, j) * w[j]).sum();
            let m = if y[i] { -t } else { t };
            s += m.max(0.0) + (-m.abs()).exp().ln_1p();
        }
        s / n as f64
            + lam1 * w[..d].iter().map(|v| v.abs()).sum::<f64>()
            + 0.5 * lam2 * w[..d].iter().map(|v| v * v).sum::<f64>()
    };
    for _sweep in 0..3000 {
        let before = objective(&w);
        for j in 0..=d {
            let (l1j, l2j) = if j == d { (0.0, 0.0) } else { (lam1, lam2) };
            // derivative of the smooth part along coordinate j at value v
            let deriv = |w: &mut Vec<f64>, v: f64| {
                w[j] = v;
                let mut g = 0.0;
                for i in 0..n {
                    let t: f64 = (0..=d).map(|k| feat(i, k) * w[k]).sum();
                    let p = 1.0 / (1.0 + (-t).exp());
                    g += (p - if y[i] { 1.0 } else { 0.0 }) * feat(i, j);
                }
                g / n as f64 + l2j * v
            };
            let g0 = deriv(&mut w, 0.0);
            let solve = |w: &mut Vec<f64>, shift: f64, lo: f64, hi: f64| {
                let (mut lo, mut hi) = (lo, hi);
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    if deriv(w, mid) + shift > 0.0 {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                0.5 * (lo + hi)
            };
            let v = if j < d && g0.abs() <= l1j {
                0.0
            } else if g0 + l1j < 0.0 {
                solve(&mut w, l1j, 0.0, 1e3)
            } else {
                solve(&mut w, -l1j, -1e3, 0.0)
            };
            w[j] = v;
        }
        if before - objective(&w) < 1e-15 {
            break;
        }
    }
    objective(&w)
}

#[test]
fn ista_matches_coordinate_descent_oracle() {
    let mut rng = rng::stream(99, 0);
    for inst in 0..20u64 {
        let n = rng.random_range(20..=100);
        let d = rng.random_range(1..=10);
        let (x, y) = dataset(inst, n, d);
        let c = 10f64.powf(rng.random_range(-1.0..1.0));
        let (penalty, l1_ratio) = match inst % 3 {
            0 => (Penalty::L1, 0.0),
            1 => (Penalty::L2, 0.0),
            _ => (Penalty::ElasticNet, rng.random_range(0.0..1.0)),
        };
        let cfg = ProbeConfig {
            c,
            penalty,
            l1_ratio,
            max_iter: 200_000,
            tol: 1e-14,
        };
        let (a1, a2) = cfg.mix();
        let fit = fit_logreg(&x, &y, &cfg).unwrap();
        let oracle = coordinate_descent(&x, &y, c, a1, a2);
        let direct = logreg_objective(&x, &y, &fit.weights, fit.bias, &cfg);
        assert!((direct - fit.objective).abs() < 1e-12);
        assert!(fit.objective - oracle < 1e-6, "instance {inst}: {} vs {oracle}", fit.objective);
        assert!(oracle - fit.objective < 1e-6, "oracle worse on {inst}");
    }
}

#[test]
fn objective_trace_never_increases() {
    for seed in 0..10 {
        let (x, y) = dataset(seed, 60, 5);
        for penalty in [Penalty::L1, Penalty::L2, Penalty::ElasticNet] {
            let fit = fit_logreg(&x, &y, &ProbeConfig { c: 0.5, penalty, ..Default::default() }).unwrap();
            assert!(fit.trace.windows(2).all(|p| p[1] <= p[0]), "{penalty:?}");
        }
    }
}

#[test]
fn separable_data_gets_the_right_sign() {
    let x = Tensor::matrix(6, 1, vec![-3.0, -2.0, -1.0, 1.0, 2.0, 3.0]).unwrap();
    let y = [false, false, false, true, true, true];
    let fit = fit_logreg(&x, &y, &ProbeConfig { c: 0.01, ..Default::default() }).unwrap();
    assert!(fit.weights[0] > 0.0);
    let flipped: Vec<bool> = y.iter().map(|v| !v).collect();
    assert!(fit_logreg(&x, &flipped, &ProbeConfig { c: 0.01, ..Default::default() }).unwrap().weights[0] < 0.0);
}

#[test]
fn vanishing_c_gives_base_rate() {
    let (x, y) = dataset(3, 80, 4);
    let fit = fit_logreg(&x, &y, &ProbeConfig { c: 1e-9, ..Default::default() }).unwrap();
    let p = y.iter().filter(|v| **v).count() as f64 / 80.0;
    assert!(fit.weights.iter().all(|w| w.abs() < 1e-6));
    assert!((fit.bias - (p / (1.0 - p)).ln()).abs() < 1e-6);
}

#[test]
fn fit_rejects_bad_inputs() {
    let x = Tensor::matrix(3, 1, vec![1.0, 2.0, 3.0]).unwrap();
    assert!(fit_logreg(&x, &[true, true, true], &ProbeConfig::default()).is_err());
    let bad = Tensor::matrix(2, 1, vec![1.0, f64::INFINITY]).unwrap();
    assert!(matches!(fit_logreg(&bad, &[true, false], &ProbeConfig::default()), Err(Error::NonFinite(_))));
}

#[test]
fn folds_are_stratified() {
    let y: Vec<bool> = (0..103).map(|i| i % 4 == 0).collect();
    let folds = stratified_folds(&y, 5, &mut rng::stream(0, 0)).unwrap();
    let pos_total = y.iter().filter(|v| **v).count() as f64;
    for f in 0..5 {
        let idx: Vec<usize> = (0..103).filter(|&i| folds[i] == f).collect();
        let pos = idx.iter().filter(|&&i| y[i]).count() as f64;
        assert!((pos - pos_total / 5.0).abs() <= 1.0);
        assert!((idx.len() as f64 - 103.0 / 5.0).abs() <= 2.0);
    }
    assert!(stratified_folds(&[true, true, false, false, false], 3, &mut rng::stream(0, 0)).is_err());
}

fn separable(seed: u64) -> (Tensor, Vec<bool>) {
    let mut r = rng::stream(seed, 1);
    let n = 120;
    let y: Vec<bool> = (0..n).map(|i| i % 3 == 0).collect();
    let x: Vec<f64> = (0..n)
        .flat_map(|i| {
            let mut row: Vec<f64> = (0..6).map(|_| StandardNormal.sample(&mut r)).collect();
            row[2] += if y[i] { 4.0 } else { -4.0 };
            row
        })
        .collect();
    (Tensor::new(vec![n, 6], x).unwrap(), y)
}

#[test]
fn search_finds_separable_signal() {
    let (x, y) = separable(0);
    let space = SearchSpace { iterations: 30, ..Default::default() };
    let res = search_hyperparams(&x, &y, &space, 7).unwrap();
    assert!(res.cv_auc >= 0.95, "{}", res.cv_auc);
    assert_eq!(search_hyperparams(&x, &y, &space, 7).unwrap(), res);
}

#[test]
fn collapsed_space_returns_its_point() {
    let (x, y) = separable(1);
    let space = SearchSpace {
        c_min: 0.3,
        c_max: 0.3,
        penalties: vec![Penalty::L2],
        iterations: 4,
        ..Default::default()
    };
    let res = search_hyperparams(&x, &y, &space, 0).unwrap();
    assert_eq!(res.best.c, 0.3);
    assert_eq!(res.best.penalty, Penalty::L2);
    // identical draws tie, and the earliest wins
    assert_eq!(res.draw, 0);
}

#[test]
fn search_winner_independent_of_thread_count() {
    let (x, y) = dataset(5, 90, 4);
    let space = SearchSpace { iterations: 24, ..Default::default() };
    let serial = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let parallel = rayon::ThreadPoolBuilder::new().num_threads(4).build().unwrap();
    let a = serial.install(|| search_hyperparams(&x, &y, &space, 3).unwrap());
    let b = parallel.install(|| search_hyperparams(&x, &y, &space, 3).unwrap());
    assert_eq!(a, b);
}

#[test]
fn one_hot_label_representation_is_perfect() {
    let y: Vec<bool> = (0..60).map(|i| i % 4 == 1).collect();
    let z = Tensor::new(vec![60, 2], y.iter().flat_map(|&v| if v { [0.0, 1.0] } else { [1.0, 0.0] }).collect()).unwrap();
    let space = SearchSpace { iterations: 5, ..Default::default() };
    let res = evaluate_latents(&z, &y, &z, &y, &space, 0).unwrap();
    assert_eq!(res.holdout_auc, 1.0);
}

#[test]
fn random_labels_stay_near_chance() {
    let mut inside = 0;
    for trial in 0..20u64 {
        let mut r = rng::stream(trial, 9);
        let mk = |r: &mut rng::Rng, n: usize| {
            let x = Tensor::new(vec![n, 8], (0..n * 8).map(|_| StandardNormal.sample(r)).collect()).unwrap();
            let mut y: Vec<bool> = (0..n).map(|_| r.random_bool(0.3)).collect();
            y[0] = true;
            y[1] = false;
            (x, y)
        };
        let (xt, yt) = mk(&mut r, 150);
        let (xh, yh) = mk(&mut r, 150);
        let space = SearchSpace { iterations: 6, ..Default::default() };
        let auc = evaluate_latents(&xt, &yt, &xh, &yh, &space, trial).unwrap().holdout_auc;
        if (0.35..=0.65).contains(&auc) {
            inside += 1;
        }
    }
    assert!(inside >= 19, "{inside}/20 inside [0.35, 0.65]");
}

#[test]
fn standardizer_uses_fit_statistics() {
    let a = Tensor::matrix(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
    let s = Standardizer::fit(&a);
    let z = s.apply(&a);
    assert!((z.at2(0, 0) + 1.224744871391589).abs() < 1e-12);
    assert_eq!(z.at2(1, 1), 0.0);
    let b = Tensor::matrix(1, 2, vec![2.0, 9.0]).unwrap();
    assert_eq!(s.apply(&b).data(), &[0.0, 0.0]);
}
