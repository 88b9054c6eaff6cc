//! Browser demo: rotated two moons, a noisy teacher and source-free adaptation.
//!
//! Each exported function takes and returns JSON so the page needs no glue
//! beyond `wasm-bindgen`. The plain Rust functions are tested natively.

use serde::{Deserialize, Serialize};
use wasm_bindgen::prelude::*;

use sfda_core::data::Dataset;
use sfda_core::experiment::{build_proxy, generate_domains, train_models, RunConfig};
use sfda_core::proxy::{denoise, DenoiseConfig, DenoiseLevel};
use sfda_core::training::{adapt, Ablation};
use sfda_core::{Matrix, MlpModel, Result};

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DomainParams {
    pub n: usize,
    pub rotation_degrees: f64,
    pub noise: f64,
    pub seed: u64,
}

impl Default for DomainParams {
    fn default() -> Self {
        let data = RunConfig::recipe().data;
        DomainParams {
            n: data.n,
            rotation_degrees: data.rotation_degrees,
            noise: data.noise,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct AdaptParams {
    #[serde(flatten)]
    pub domain: DomainParams,
    pub epochs: usize,
    pub ablation: Ablation,
    pub noise_scale: f64,
    pub omega: f64,
    pub grid: usize,
}

impl Default for AdaptParams {
    fn default() -> Self {
        let cfg = RunConfig::recipe();
        AdaptParams {
            domain: DomainParams::default(),
            epochs: cfg.adapt.epochs,
            ablation: Ablation::Full,
            noise_scale: cfg.proxy.noise_scale,
            omega: cfg.adapt.denoise.omega,
            grid: 40,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
    pub label: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DomainView {
    pub source: Vec<Point>,
    pub target: Vec<Point>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Grid {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub size: usize,
    /// Row-major from `y_min`, probability of class 1.
    pub before: Vec<f64>,
    pub after: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Curves {
    pub acc_target: Vec<f64>,
    pub acc_proxy_raw: Vec<f64>,
    pub acc_proxy_denoised: Vec<f64>,
    pub d_v_t: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptView {
    pub target: Vec<Point>,
    pub curves: Curves,
    pub grid: Grid,
    pub oracle_accuracy: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiseParams {
    pub vil: Vec<f64>,
    pub src: Vec<f64>,
    pub tgt: Vec<f64>,
    pub omega: f64,
    #[serde(default)]
    pub probability_level: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DenoiseView {
    pub raw: Vec<f64>,
    pub corrected_logits: Vec<f64>,
    pub corrected: Vec<f64>,
}

fn points(ds: &Dataset) -> Vec<Point> {
    (0..ds.len())
        .map(|i| {
            let r = ds.features.row(i);
            Point { x: r[0], y: r[1], label: ds.labels[i] }
        })
        .collect()
}

fn config(p: &DomainParams) -> RunConfig {
    let mut cfg = RunConfig::recipe().reseeded(p.seed);
    cfg.data.n = p.n;
    cfg.data.rotation_degrees = p.rotation_degrees;
    cfg.data.noise = p.noise;
    cfg
}

pub fn domains(p: &DomainParams) -> Result<DomainView> {
    let d = generate_domains(&config(p).data)?;
    Ok(DomainView { source: points(&d.source), target: points(&d.target) })
}

fn class_one_probability(model: &MlpModel, x: &Matrix) -> Result<Vec<f64>> {
    let p = sfda_core::softmax_rows(&model.predict(x)?);
    Ok((0..x.rows()).map(|i| p.row(i)[1]).collect())
}

pub fn adaptation(p: &AdaptParams) -> Result<AdaptView> {
    let mut cfg = config(&p.domain);
    cfg.adapt.epochs = p.epochs;
    cfg.adapt.ablation = p.ablation;
    cfg.adapt.denoise.omega = p.omega;
    cfg.proxy.noise_scale = p.noise_scale;
    cfg.validate()?;
    let d = generate_domains(&cfg.data)?;
    let models = train_models(&cfg, &d)?;
    let proxy = build_proxy(&cfg.proxy, &models.oracle)?;
    let res = adapt(&models.source, &proxy, &d.target, &cfg.adapt)?;

    let all = d.source.concat(&d.target, "all")?;
    let (mut x_min, mut x_max, mut y_min, mut y_max) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for i in 0..all.len() {
        let r = all.features.row(i);
        x_min = x_min.min(r[0]);
        x_max = x_max.max(r[0]);
        y_min = y_min.min(r[1]);
        y_max = y_max.max(r[1]);
    }
    let pad = 0.1 * (x_max - x_min).max(y_max - y_min);
    let (x_min, x_max, y_min, y_max) = (x_min - pad, x_max + pad, y_min - pad, y_max + pad);
    let size = p.grid.max(2);
    let mut cells = Vec::with_capacity(size * size * 2);
    for j in 0..size {
        for i in 0..size {
            let t = |k: usize| (k as f64 + 0.5) / size as f64;
            cells.push(x_min + t(i) * (x_max - x_min));
            cells.push(y_min + t(j) * (y_max - y_min));
        }
    }
    let gx = Matrix::new(size * size, 2, cells)?;
    let r = &res.report.records;
    Ok(AdaptView {
        target: points(&d.target),
        curves: Curves {
            acc_target: r.iter().map(|e| e.acc_target).collect(),
            acc_proxy_raw: r.iter().map(|e| e.acc_proxy_raw).collect(),
            acc_proxy_denoised: r.iter().map(|e| e.acc_proxy_denoised).collect(),
            d_v_t: r.iter().map(|e| e.d_v_t).collect(),
        },
        grid: Grid {
            x_min,
            x_max,
            y_min,
            y_max,
            size,
            before: class_one_probability(&models.source, &gx)?,
            after: class_one_probability(&res.model, &gx)?,
        },
        oracle_accuracy: sfda_core::diagnostics::accuracy(&models.oracle, &d.target)?,
    })
}

pub fn denoise_one(p: &DenoiseParams) -> Result<DenoiseView> {
    let c = p.vil.len();
    let row = |v: &[f64]| Matrix::new(1, v.len(), v.to_vec());
    let cfg = DenoiseConfig {
        omega: p.omega,
        level: if p.probability_level { DenoiseLevel::Probability } else { DenoiseLevel::Logit },
        ..DenoiseConfig::default()
    };
    let vil = row(&p.vil)?;
    let out = denoise(&vil, &row(&p.src)?, &row(&p.tgt)?, &cfg)?;
    Ok(DenoiseView {
        raw: sfda_core::softmax_rows(&vil).row(0).to_vec(),
        corrected_logits: out.l_prime.row(0)[..c].to_vec(),
        corrected: out.p_prime.row(0).to_vec(),
    })
}

fn call<P: for<'de> Deserialize<'de>, R: Serialize>(
    params: &str,
    f: impl Fn(&P) -> Result<R>,
) -> std::result::Result<String, String> {
    let p: P = serde_json::from_str(if params.trim().is_empty() { "{}" } else { params })
        .map_err(|e| format!("bad parameters: {e}"))?;
    let r = f(&p).map_err(|e| e.to_string())?;
    serde_json::to_string(&r).map_err(|e| e.to_string())
}

/// Source and target samples as `{source: [{x, y, label}], target: [...]}`.
#[wasm_bindgen(js_name = generateDomains)]
pub fn generate_domains_json(params: &str) -> std::result::Result<String, JsValue> {
    call(params, domains).map_err(|e| JsValue::from_str(&e))
}

/// Trains, adapts and returns per-epoch curves plus decision grids.
#[wasm_bindgen(js_name = runAdaptation)]
pub fn run_adaptation_json(params: &str) -> std::result::Result<String, JsValue> {
    call(params, adaptation).map_err(|e| JsValue::from_str(&e))
}

/// Corrects one teacher prediction with the given source and target logits.
#[wasm_bindgen(js_name = denoiseExample)]
pub fn denoise_example_json(params: &str) -> std::result::Result<String, JsValue> {
    call(params, denoise_one).map_err(|e| JsValue::from_str(&e))
}
