//! Loss and diagnostic values against independent re-computations.
//!
//! The oracles use compensated (Neumaier) summation and the textbook
//! formulas written out element by element, sharing no code with the crate.

mod support;

use proptest::prelude::*;
use sfda_core::diagnostics::{
    entropy, harmonic_mean, kl_divergence, mmd, Bandwidth, Kernel, MmdConfig,
};
use sfda_core::losses::{
    balance_entropy, mutual_information, prode_loss, refinement_ce, smoothed_cross_entropy,
    LossWeights, SynTerm,
};
use sfda_core::proxy::{denoise, DenoiseConfig, DenoiseLevel};
use sfda_core::{softmax_rows, Matrix, ProbBatch};
use support::{labels, normal_matrix, rng};

fn nsum(xs: impl IntoIterator<Item = f64>) -> f64 {
    let (mut s, mut c) = (0.0f64, 0.0f64);
    for x in xs {
        let t = s + x;
        c += if s.abs() >= x.abs() { (s - t) + x } else { (x - t) + s };
        s = t;
    }
    s + c
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn oracle_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|z| (z - m).exp()).collect();
    let s = nsum(e.iter().copied());
    e.iter().map(|v| v / s).collect()
}

fn oracle_smoothed_ce(logits: &Matrix, y: &[usize], sigma: f64) -> f64 {
    let c = logits.cols() as f64;
    let per_row = (0..logits.rows()).map(|i| {
        let p = oracle_softmax(logits.row(i));
        nsum(p.iter().enumerate().map(|(k, &pk)| {
            let t = if k == y[i] { 1.0 - sigma + sigma / c } else { sigma / c };
            -t * pk.ln()
        }))
    });
    nsum(per_row) / logits.rows() as f64
}

/// `Σ_{a,b} J_ab ln(J_ab / (r_a s_b))` with every entry of `J` built by an
/// explicit loop over samples.
fn oracle_mi(p: &ProbBatch, q: &ProbBatch) -> f64 {
    let (n, c) = (p.rows(), p.classes());
    let j = |a: usize, b: usize| nsum((0..n).map(|i| p.get(i, a) * q.get(i, b))) / n as f64;
    let r: Vec<f64> = (0..c).map(|a| nsum((0..c).map(|b| j(a, b)))).collect();
    let s: Vec<f64> = (0..c).map(|b| nsum((0..c).map(|a| j(a, b)))).collect();
    nsum((0..c).flat_map(|a| {
        let r = &r;
        let s = &s;
        (0..c).map(move |b| {
            let v = j(a, b);
            if v > 0.0 {
                v * (v / (r[a] * s[b])).ln()
            } else {
                0.0
            }
        })
    }))
}

fn oracle_mmd_rbf(x: &Matrix, y: &Matrix, sigma: f64) -> f64 {
    let k = |a: &[f64], b: &[f64]| {
        let d2 = nsum(a.iter().zip(b).map(|(u, v)| (u - v) * (u - v)));
        (-d2 / (2.0 * sigma * sigma)).exp()
    };
    let mean = |a: &Matrix, b: &Matrix| {
        nsum((0..a.rows()).flat_map(|i| (0..b.rows()).map(move |j| k(a.row(i), b.row(j)))))
            / (a.rows() * b.rows()) as f64
    };
    (mean(x, x) + mean(y, y) - 2.0 * mean(x, y)).max(0.0).sqrt()
}

#[test]
fn softmax_matches_oracle() {
    for seed in 0..20 {
        let z = normal_matrix(&mut rng(seed), 5, 4, 3.0);
        let p = softmax_rows(&z);
        for i in 0..5 {
            for (a, b) in p.row(i).iter().zip(oracle_softmax(z.row(i))) {
                assert!(close(*a, b, 1e-14), "{a} vs {b}");
            }
        }
    }
}

#[test]
fn smoothed_ce_matches_oracle() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let z = normal_matrix(&mut r, 4, 3, 2.0);
        let y = labels(&mut r, 4, 3);
        let (loss, _) = smoothed_cross_entropy(&z, &y, 0.1).unwrap();
        assert!(close(loss, oracle_smoothed_ce(&z, &y, 0.1), 1e-12));
    }
}

#[test]
fn mi_matches_double_loop() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let p = softmax_rows(&normal_matrix(&mut r, 6, 3, 1.5));
        let q = softmax_rows(&normal_matrix(&mut r, 6, 3, 1.5));
        let v = mutual_information(&p, &q).unwrap().value;
        assert!(close(v, oracle_mi(&p, &q), 1e-12), "{v} vs {}", oracle_mi(&p, &q));
    }
}

#[test]
fn balance_and_refinement_match_direct_sums() {
    for seed in 0..20 {
        let mut r = rng(seed);
        let p = softmax_rows(&normal_matrix(&mut r, 7, 4, 1.5));
        let y = labels(&mut r, 7, 4);
        let qbar: Vec<f64> = (0..4).map(|k| nsum((0..7).map(|i| p.get(i, k))) / 7.0).collect();
        let bal = nsum(qbar.iter().map(|q| q * q.ln()));
        assert!(close(balance_entropy(&p).unwrap().0, bal, 1e-12));
        let refine = nsum((0..7).map(|i| p.get(i, y[i]).ln())) / 7.0;
        assert!(close(refinement_ce(&p, &y).unwrap().0, refine, 1e-12));
    }
}

#[test]
fn objective_is_the_weighted_component_sum() {
    let mut r = rng(99);
    let t = softmax_rows(&normal_matrix(&mut r, 8, 3, 1.5));
    let p = softmax_rows(&normal_matrix(&mut r, 8, 3, 1.5));
    let pseudo = t.matrix().argmax_rows();
    let w = LossWeights { alpha: 1.0, beta: 0.4, gamma: 1.0 };
    let total = prode_loss(&t, &p, &pseudo, &w, SynTerm::MutualInformation)
        .unwrap()
        .value
        .total;
    let qbar: Vec<f64> = (0..3).map(|k| nsum((0..8).map(|i| p.get(i, k))) / 8.0).collect();
    let bal = nsum(qbar.iter().map(|q| q * q.ln()));
    let refine = nsum((0..8).map(|i| p.get(i, pseudo[i]).ln())) / 8.0;
    let expected = (-oracle_mi(&t, &p) + bal) - 0.4 * refine;
    assert!(close(total, expected, 1e-12), "{total} vs {expected}");
}

#[test]
fn kl_closed_form() {
    assert!((kl_divergence(&[1.0, 0.0], &[0.5, 0.5]).unwrap() - 2f64.ln()).abs() <= 1e-12);
}

#[test]
fn mmd_rbf_matches_double_loop() {
    for seed in 0..10 {
        let mut r = rng(seed);
        let x = normal_matrix(&mut r, 7, 3, 1.0);
        let y = normal_matrix(&mut r, 5, 3, 1.5);
        let cfg = MmdConfig { kernel: Kernel::Rbf, bandwidth: Bandwidth::Fixed(1.3) };
        let v = mmd(&x, &y, &cfg).unwrap();
        assert!(close(v, oracle_mmd_rbf(&x, &y, 1.3), 1e-12));
    }
}

#[test]
fn mmd_median_heuristic_on_a_small_set() {
    // pooled pairwise distances {1, 2, 3} have median 2
    let x = Matrix::from_rows(&[[0.0], [1.0]]).unwrap();
    let y = Matrix::from_rows(&[[3.0]]).unwrap();
    let v = mmd(&x, &y, &MmdConfig::default()).unwrap();
    assert!(close(v, oracle_mmd_rbf(&x, &y, 2.0), 1e-12));
}

#[test]
fn mmd_singleton_closed_form() {
    let x = Matrix::from_rows(&[[0.0]]).unwrap();
    let y = Matrix::from_rows(&[[1.0]]).unwrap();
    let v = mmd(&x, &y, &MmdConfig::default()).unwrap();
    let expected = (2.0 - 2.0 * (-0.5f64).exp()).sqrt();
    assert!((v - expected).abs() <= 1e-9);
}

#[test]
fn harmonic_mean_table_arithmetic() {
    let h = harmonic_mean(84.1, 86.2).unwrap();
    assert!((h - 85.1).abs() <= 0.05, "{h}");
}

fn prob_row(c: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-4.0f64..4.0, c).prop_map(|z| oracle_softmax(&z))
}

fn prob_batch(n: usize, c: usize) -> impl Strategy<Value = ProbBatch> {
    prop::collection::vec(prob_row(c), n).prop_map(|rows| ProbBatch::from_rows(&rows).unwrap())
}

fn points(n: usize, d: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(-3.0f64..3.0, d), n)
        .prop_map(|rows| Matrix::from_rows(&rows).unwrap())
}

proptest! {
    #[test]
    fn mi_is_symmetric((p, q) in (prob_batch(6, 3), prob_batch(6, 3))) {
        let a = mutual_information(&p, &q).unwrap().value;
        let b = mutual_information(&q, &p).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn mi_is_nonnegative((p, q) in (prob_batch(5, 4), prob_batch(5, 4))) {
        prop_assert!(mutual_information(&p, &q).unwrap().value >= -1e-12);
    }

    #[test]
    fn balance_entropy_is_smallest_at_uniform(p in prob_batch(8, 3)) {
        let floor = -(3f64).ln();
        prop_assert!(balance_entropy(&p).unwrap().0 >= floor - 1e-12);
    }

    #[test]
    fn entropy_is_largest_at_uniform(p in prob_row(5)) {
        prop_assert!(entropy(&p) <= (5f64).ln() + 1e-12);
    }

    #[test]
    fn mmd_of_a_set_with_itself_vanishes(x in points(6, 2)) {
        for kernel in [Kernel::Rbf, Kernel::Linear] {
            let v = mmd(&x, &x, &MmdConfig { kernel, bandwidth: Bandwidth::MedianHeuristic }).unwrap();
            prop_assert!(v <= 1e-12, "{v}");
        }
    }

    #[test]
    fn mmd_is_symmetric((x, y) in (points(5, 2), points(4, 2))) {
        let cfg = MmdConfig::default();
        let a = mmd(&x, &y, &cfg).unwrap();
        let b = mmd(&y, &x, &cfg).unwrap();
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn harmonic_mean_never_exceeds_arithmetic(a in 0.01f64..100.0, b in 0.01f64..100.0) {
        prop_assert!(harmonic_mean(a, b).unwrap() <= 0.5 * (a + b) + 1e-12);
    }

    #[test]
    fn softmax_ignores_row_shifts(z in prop::collection::vec(-5.0f64..5.0, 4), k in -50.0f64..50.0) {
        let m = Matrix::from_rows(std::slice::from_ref(&z)).unwrap();
        let shifted = m.map(|v| v + k);
        let (a, b) = (softmax_rows(&m), softmax_rows(&shifted));
        for (x, y) in a.row(0).iter().zip(b.row(0)) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn denoising_ignores_common_shifts(
        (v, s, t) in (points(3, 3), points(3, 3), points(3, 3)),
        k in -5.0f64..5.0,
        omega in 0.0f64..2.0,
    ) {
        let cfg = DenoiseConfig { omega, level: DenoiseLevel::Logit, use_source_term: true, use_target_term: true };
        let a = denoise(&v, &s, &t, &cfg).unwrap();
        let b = denoise(&v, &s.map(|x| x + k), &t.map(|x| x + k), &cfg).unwrap();
        for (x, y) in a.l_prime.values().iter().zip(b.l_prime.values()) {
            prop_assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn loss_value_recomposes(
        (t, p) in (prob_batch(6, 3), prob_batch(6, 3)),
        alpha in 0.0f64..2.0, beta in 0.0f64..2.0, gamma in 0.0f64..2.0,
        kl in any::<bool>(),
    ) {
        let w = LossWeights { alpha, beta, gamma };
        let pseudo = t.matrix().argmax_rows();
        let syn = if kl { SynTerm::Kl } else { SynTerm::MutualInformation };
        let v = prode_loss(&t, &p, &pseudo, &w, syn).unwrap().value;
        let expected = alpha * (-v.syn_mi + v.syn_kl + gamma * v.syn_balance) - beta * v.refine;
        prop_assert!((v.total - expected).abs() <= 1e-12);
        prop_assert!((v.recompose(&w) - v.total).abs() <= 1e-12);
    }
}
