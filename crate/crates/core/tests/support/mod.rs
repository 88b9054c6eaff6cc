//! Shared oracles for the integration tests: central finite differences and
//! seeded random instances.

#![allow(dead_code)]

use rand::Rng;
use rand_distr::StandardNormal;
use sfda_core::losses::{
    balance_entropy, kl_teacher_student, mutual_information, prode_loss, refinement_ce,
    smoothed_cross_entropy, LossWeights, SynTerm,
};
use sfda_core::mlp::{Activation, MlpModel};
use sfda_core::proxy::{adapter_gradient, denoise, pseudo_labels, DenoiseConfig, DenoiseLevel, PromptAdapter};
use sfda_core::rng::{stream, Purpose, StreamRng};
use sfda_core::softmax::softmax_backward;
use sfda_core::{softmax_rows, Matrix};

pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-4;
pub const INSTANCES: u64 = 25;

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, Purpose::Experiment, 0xF00D)
}

pub fn normal_matrix(rng: &mut StreamRng, rows: usize, cols: usize, scale: f64) -> Matrix {
    let v = (0..rows * cols)
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Matrix::new(rows, cols, v).unwrap()
}

pub fn labels(rng: &mut StreamRng, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.random_range(0..classes)).collect()
}

/// Central differences of `f` at `x`.
pub fn central_diff(x: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|k| {
            let orig = probe[k];
            probe[k] = orig + FD_STEP;
            let up = f(&probe);
            probe[k] = orig - FD_STEP;
            let down = f(&probe);
            probe[k] = orig;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

fn with_values(m: &Matrix, v: &[f64]) -> Matrix {
    Matrix::new(m.rows(), m.cols(), v.to_vec()).unwrap()
}

fn shape(rng: &mut StreamRng) -> (usize, usize) {
    (rng.random_range(3..9), rng.random_range(2..5))
}

/// Worst relative error over all seeded instances of one gradient family.
pub struct GradientFamily {
    pub name: &'static str,
    pub run: fn(u64) -> f64,
}

pub fn worst(family: &GradientFamily) -> f64 {
    (0..INSTANCES).map(family.run).fold(0.0, f64::max)
}

pub fn smoothed_ce_logits(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let logits = normal_matrix(&mut r, n, c, 2.0);
    let y = labels(&mut r, n, c);
    let (_, grad) = smoothed_cross_entropy(&logits, &y, 0.1).unwrap();
    let fd = central_diff(logits.values(), |v| {
        smoothed_cross_entropy(&with_values(&logits, v), &y, 0.1).unwrap().0
    });
    relative_error(grad.values(), &fd)
}

fn tanh_model(r: &mut StreamRng, d: usize, c: usize) -> MlpModel {
    let seed = r.random::<u64>();
    MlpModel::init(&[d, 5, 4, c], Activation::Tanh, seed).unwrap()
}

fn param_fd(model: &MlpModel, mut loss: impl FnMut(&MlpModel) -> f64) -> Vec<f64> {
    let mut probe = model.clone();
    central_diff(&model.params(), |p| {
        probe.set_params(p).unwrap();
        loss(&probe)
    })
}

pub fn smoothed_ce_mlp(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let x = normal_matrix(&mut r, n, 3, 1.0);
    let y = labels(&mut r, n, c);
    let model = tanh_model(&mut r, 3, c);
    let (logits, cache) = model.forward(&x).unwrap();
    let (_, d_logits) = smoothed_cross_entropy(&logits, &y, 0.1).unwrap();
    let analytic = model.backward(&cache, &d_logits).unwrap().flatten();
    let fd = param_fd(&model, |m| smoothed_cross_entropy(&m.predict(&x).unwrap(), &y, 0.1).unwrap().0);
    relative_error(&analytic, &fd)
}

pub fn mutual_information_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let a = normal_matrix(&mut r, n, c, 1.5);
    let b = normal_matrix(&mut r, n, c, 1.5);
    let (pa, pb) = (softmax_rows(&a), softmax_rows(&b));
    let mi = mutual_information(&pa, &pb).unwrap();
    let mut analytic = softmax_backward(&pa, &mi.d_first).unwrap().into_values();
    analytic.extend(softmax_backward(&pb, &mi.d_second).unwrap().into_values());
    let mut joint = a.values().to_vec();
    joint.extend_from_slice(b.values());
    let fd = central_diff(&joint, |v| {
        let (va, vb) = v.split_at(n * c);
        mutual_information(
            &softmax_rows(&with_values(&a, va)),
            &softmax_rows(&with_values(&b, vb)),
        )
        .unwrap()
        .value
    });
    relative_error(&analytic, &fd)
}

pub fn balance_entropy_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let z = normal_matrix(&mut r, n, c, 1.5);
    let p = softmax_rows(&z);
    let (_, g) = balance_entropy(&p).unwrap();
    let analytic = softmax_backward(&p, &g).unwrap();
    let fd = central_diff(z.values(), |v| balance_entropy(&softmax_rows(&with_values(&z, v))).unwrap().0);
    relative_error(analytic.values(), &fd)
}

pub fn refinement_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let z = normal_matrix(&mut r, n, c, 1.5);
    let y = labels(&mut r, n, c);
    let p = softmax_rows(&z);
    let (_, g) = refinement_ce(&p, &y).unwrap();
    let analytic = softmax_backward(&p, &g).unwrap();
    let fd = central_diff(z.values(), |v| refinement_ce(&softmax_rows(&with_values(&z, v)), &y).unwrap().0);
    relative_error(analytic.values(), &fd)
}

pub fn kl_softmax(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let a = normal_matrix(&mut r, n, c, 1.5);
    let b = normal_matrix(&mut r, n, c, 1.5);
    let (pa, pb) = (softmax_rows(&a), softmax_rows(&b));
    let (_, da, db) = kl_teacher_student(&pa, &pb).unwrap();
    let mut analytic = softmax_backward(&pa, &da).unwrap().into_values();
    analytic.extend(softmax_backward(&pb, &db).unwrap().into_values());
    let mut joint = a.values().to_vec();
    joint.extend_from_slice(b.values());
    let fd = central_diff(&joint, |v| {
        let (va, vb) = v.split_at(n * c);
        kl_teacher_student(
            &softmax_rows(&with_values(&a, va)),
            &softmax_rows(&with_values(&b, vb)),
        )
        .unwrap()
        .0
    });
    relative_error(&analytic, &fd)
}

fn random_weights(r: &mut StreamRng) -> LossWeights {
    LossWeights {
        alpha: r.random_range(0.2..1.5),
        beta: r.random_range(0.0..1.0),
        gamma: r.random_range(0.0..1.5),
    }
}

/// The adaptation objective through a tanh MLP, teacher held fixed.
fn prode_mlp(seed: u64, syn: SynTerm) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let x = normal_matrix(&mut r, n, 3, 1.0);
    let teacher = softmax_rows(&normal_matrix(&mut r, n, c, 1.5));
    let pseudo = pseudo_labels(&teacher);
    let w = random_weights(&mut r);
    let model = tanh_model(&mut r, 3, c);
    let (logits, cache) = model.forward(&x).unwrap();
    let p = softmax_rows(&logits);
    let loss = prode_loss(&teacher, &p, &pseudo, &w, syn).unwrap();
    let d_logits = softmax_backward(&p, &loss.d_target).unwrap();
    let analytic = model.backward(&cache, &d_logits).unwrap().flatten();
    let fd = param_fd(&model, |m| {
        let p = softmax_rows(&m.predict(&x).unwrap());
        prode_loss(&teacher, &p, &pseudo, &w, syn).unwrap().value.total
    });
    relative_error(&analytic, &fd)
}

pub fn prode_mi_mlp(seed: u64) -> f64 {
    prode_mlp(seed, SynTerm::MutualInformation)
}

pub fn prode_kl_mlp(seed: u64) -> f64 {
    prode_mlp(seed, SynTerm::Kl)
}

/// The adaptation objective with respect to teacher logits, student fixed.
pub fn prode_teacher(seed: u64) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let zt = normal_matrix(&mut r, n, c, 1.5);
    let student = softmax_rows(&normal_matrix(&mut r, n, c, 1.5));
    let w = random_weights(&mut r);
    let teacher = softmax_rows(&zt);
    let pseudo = pseudo_labels(&teacher);
    let syn = if seed.is_multiple_of(2) { SynTerm::MutualInformation } else { SynTerm::Kl };
    let loss = prode_loss(&teacher, &student, &pseudo, &w, syn).unwrap();
    let analytic = softmax_backward(&teacher, &loss.d_teacher).unwrap();
    let fd = central_diff(zt.values(), |v| {
        prode_loss(&softmax_rows(&with_values(&zt, v)), &student, &pseudo, &w, syn)
            .unwrap()
            .value
            .total
    });
    relative_error(analytic.values(), &fd)
}

fn adapter_case(seed: u64, level: DenoiseLevel) -> f64 {
    let mut r = rng(seed);
    let (n, c) = shape(&mut r);
    let base = normal_matrix(&mut r, n, c, 1.5);
    let src = normal_matrix(&mut r, n, c, 1.0);
    // Keep the probability-level correction away from its clamp.
    let drift = if level == DenoiseLevel::Probability { 0.05 } else { 1.0 };
    let tgt = src.add(&normal_matrix(&mut r, n, c, drift)).unwrap();
    let student = softmax_rows(&tgt);
    let cfg = DenoiseConfig {
        omega: r.random_range(0.5..1.5),
        level,
        use_source_term: true,
        use_target_term: true,
    };
    let w = random_weights(&mut r);
    let adapter = PromptAdapter {
        scale: (0..c).map(|_| r.random_range(0.5..1.5)).collect(),
        bias: (0..c).map(|_| r.random_range(-0.5..0.5)).collect(),
    };
    let den = denoise(&adapter.apply(&base).unwrap(), &src, &tgt, &cfg).unwrap();
    let pseudo = pseudo_labels(&den.p_prime);
    let loss = prode_loss(&den.p_prime, &student, &pseudo, &w, SynTerm::MutualInformation).unwrap();
    let g = adapter_gradient(&loss.d_teacher, &den, &base).unwrap();
    let mut analytic = g.scale.clone();
    analytic.extend_from_slice(&g.bias);
    let mut x = adapter.scale.clone();
    x.extend_from_slice(&adapter.bias);
    let fd = central_diff(&x, |v| {
        let a = PromptAdapter {
            scale: v[..c].to_vec(),
            bias: v[c..].to_vec(),
        };
        let d = denoise(&a.apply(&base).unwrap(), &src, &tgt, &cfg).unwrap();
        prode_loss(&d.p_prime, &student, &pseudo, &w, SynTerm::MutualInformation)
            .unwrap()
            .value
            .total
    });
    relative_error(&analytic, &fd)
}

pub fn adapter_logit(seed: u64) -> f64 {
    adapter_case(seed, DenoiseLevel::Logit)
}

pub fn adapter_probability(seed: u64) -> f64 {
    adapter_case(seed, DenoiseLevel::Probability)
}

pub const FAMILIES: &[GradientFamily] = &[
    GradientFamily { name: "smoothed cross-entropy (logits)", run: smoothed_ce_logits },
    GradientFamily { name: "smoothed cross-entropy (tanh mlp)", run: smoothed_ce_mlp },
    GradientFamily { name: "mutual information", run: mutual_information_softmax },
    GradientFamily { name: "balance entropy", run: balance_entropy_softmax },
    GradientFamily { name: "refinement cross-entropy", run: refinement_softmax },
    GradientFamily { name: "teacher-student kl", run: kl_softmax },
    GradientFamily { name: "adaptation objective, mi (tanh mlp)", run: prode_mi_mlp },
    GradientFamily { name: "adaptation objective, kl (tanh mlp)", run: prode_kl_mlp },
    GradientFamily { name: "adaptation objective (teacher logits)", run: prode_teacher },
    GradientFamily { name: "adapter (logit level)", run: adapter_logit },
    GradientFamily { name: "adapter (probability level)", run: adapter_probability },
];
