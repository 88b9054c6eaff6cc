//! Accuracy, information measures, MMD between logit point sets, and run
//! reports.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, UnlabeledView};
use crate::error::{Error, Result};
use crate::io;
use crate::losses::clamped_ln;
use crate::matrix::{argmax, Matrix};
use crate::mlp::MlpModel;
use crate::proxy::ProxyOracle;
use crate::softmax::ProbBatch;

/// Fraction of rows whose argmax (ties to the lowest index) equals the label.
/// Works on logits or probabilities alike.
pub fn accuracy_of_scores(scores: &Matrix, labels: &[usize]) -> Result<f64> {
    if scores.rows() == 0 {
        return Err(Error::InvalidArgument("accuracy of an empty dataset".into()));
    }
    if labels.len() != scores.rows() {
        return Err(Error::shape("accuracy labels", scores.rows(), labels.len()));
    }
    let hits = scores
        .row_iter()
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn accuracy(model: &MlpModel, ds: &Dataset) -> Result<f64> {
    accuracy_of_scores(&model.predict(&ds.features)?, &ds.labels)
}

/// `Σ p ln(p/q)` with `q` clamped at the log floor; zero-probability terms of
/// `p` contribute nothing.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape("kl_divergence", p.len(), q.len()));
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi.ln() - clamped_ln(qi)))
        .sum::<f64>()
        .max(0.0))
}

/// Shannon entropy in nats.
pub fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>()
}

pub fn mean_row_entropy(p: &ProbBatch) -> f64 {
    let n = p.rows().max(1) as f64;
    (0..p.rows()).map(|i| entropy(p.row(i))).sum::<f64>() / n
}

/// Mean row entropy of `target` over that of `source`. A source with zero
/// entropy yields `+∞`.
pub fn entropy_ratio(target: &ProbBatch, source: &ProbBatch) -> f64 {
    let hs = mean_row_entropy(source);
    if hs <= 0.0 {
        return f64::INFINITY;
    }
    mean_row_entropy(target) / hs
}

/// `η = 1 + e_VI / d_V`.
pub fn impact_degree(d_v: f64, e_vi: f64) -> Result<f64> {
    if !(d_v > 0.0) {
        return Err(Error::InvalidArgument(format!("d_V must be positive, got {d_v}")));
    }
    if !(e_vi >= 0.0) {
        return Err(Error::InvalidArgument(format!("e_VI must be nonnegative, got {e_vi}")));
    }
    Ok(1.0 + e_vi / d_v)
}

/// `d_I^t / d_S`: 1 while the target model sits at the source, 0 once it
/// reaches the reference space.
pub fn confidence_estimate(d_i_t: f64, d_s: f64) -> Result<f64> {
    if !(d_s > 0.0) {
        return Err(Error::InvalidArgument(format!("d_S must be positive, got {d_s}")));
    }
    Ok(d_i_t / d_s)
}

/// `2·a·b / (a + b)`.
pub fn harmonic_mean(acc_s: f64, acc_t: f64) -> Result<f64> {
    let sum = acc_s + acc_t;
    if sum == 0.0 {
        return Err(Error::InvalidArgument("harmonic mean of two zeros".into()));
    }
    // ordered so that equal inputs reproduce themselves exactly
    Ok(acc_s * (2.0 * acc_t / sum))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kernel {
    #[default]
    Rbf,
    Linear,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bandwidth {
    #[default]
    MedianHeuristic,
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MmdConfig {
    pub kernel: Kernel,
    pub bandwidth: Bandwidth,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Median Euclidean distance over all unordered pairs of the pooled rows.
pub fn median_pairwise_distance(x: &Matrix, y: &Matrix) -> f64 {
    let pooled: Vec<&[f64]> = x.row_iter().chain(y.row_iter()).collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

type MeanKernel = Box<dyn Fn(&Matrix, &Matrix) -> f64>;

/// Biased (V-statistic) MMD between two point sets, returned as the square
/// root of the squared statistic clamped at zero.
pub fn mmd(x: &Matrix, y: &Matrix, cfg: &MmdConfig) -> Result<f64> {
    if x.rows() == 0 || y.rows() == 0 {
        return Err(Error::InvalidArgument("mmd of an empty point set".into()));
    }
    if x.cols() != y.cols() {
        return Err(Error::shape("mmd point dimension", x.cols(), y.cols()));
    }
    let mean_kernel: MeanKernel = match cfg.kernel {
        Kernel::Linear => Box::new(|a: &Matrix, b: &Matrix| {
            // mean over pairs of <a_i, b_j> equals <mean a, mean b>
            dot(&a.column_means(), &b.column_means())
        }),
        Kernel::Rbf => {
            let sigma = match cfg.bandwidth {
                Bandwidth::Fixed(s) if s > 0.0 && s.is_finite() => s,
                Bandwidth::Fixed(s) => {
                    return Err(Error::InvalidArgument(format!("rbf bandwidth must be positive, got {s}")))
                }
                Bandwidth::MedianHeuristic => {
                    let m = median_pairwise_distance(x, y);
                    if m > 0.0 {
                        m
                    } else {
                        1.0
                    }
                }
            };
            let gamma = 1.0 / (2.0 * sigma * sigma);
            Box::new(move |a: &Matrix, b: &Matrix| {
                let mut s = 0.0;
                for ra in a.row_iter() {
                    for rb in b.row_iter() {
                        let a = -gamma * sq_dist(ra, rb);
                        // below this the kernel is zero to double precision
                        if a > -700.0 {
                            s += a.exp();
                        }
                    }
                }
                s / (a.rows() * b.rows()) as f64
            })
        }
    };
    let sq = mean_kernel(x, x) + mean_kernel(y, y) - 2.0 * mean_kernel(x, y);
    Ok(sq.max(0.0).sqrt())
}

/// MMD from the target model's logits to the source, reference (oracle) and
/// teacher logits over the same inputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceDistances {
    pub d_s_t: f64,
    pub d_o_t: f64,
    pub d_v_t: f64,
}

pub fn space_distances_from_logits(
    target: &Matrix,
    source: &Matrix,
    oracle: &Matrix,
    proxy: &Matrix,
    cfg: &MmdConfig,
) -> Result<SpaceDistances> {
    Ok(SpaceDistances {
        d_s_t: mmd(target, source, cfg)?,
        d_o_t: mmd(target, oracle, cfg)?,
        d_v_t: mmd(target, proxy, cfg)?,
    })
}

pub fn space_distances(
    target_model: &MlpModel,
    source_model: &MlpModel,
    oracle_model: &MlpModel,
    proxy: &ProxyOracle,
    view: UnlabeledView<'_>,
    cfg: &MmdConfig,
) -> Result<SpaceDistances> {
    let x = view.features;
    space_distances_from_logits(
        &target_model.predict(x)?,
        &source_model.predict(x)?,
        &oracle_model.predict(x)?,
        &proxy.logits(x, view.sample_ids)?,
        cfg,
    )
}

/// Column order of the report CSV.
pub const REPORT_COLUMNS: [&str; 13] = [
    "epoch",
    "acc_target",
    "acc_proxy_raw",
    "acc_proxy_denoised",
    "loss_total",
    "loss_mi",
    "loss_balance",
    "loss_ref",
    "d_S_t",
    "d_O_t",
    "d_V_t",
    "entropy_ratio",
    "confidence_estimate",
];

/// Metrics of one adaptation state, measured on the whole target set.
///
/// `loss_mi` holds the synchronization term with the sign of mutual
/// information (for the KL variant it is `−KL`), so that
/// `loss_total = α(−loss_mi + γ·loss_balance) − β·loss_ref`.
/// Ratios that are undefined are stored as `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochRecord {
    pub epoch: usize,
    pub acc_target: f64,
    pub acc_proxy_raw: f64,
    pub acc_proxy_denoised: f64,
    pub loss_total: f64,
    pub loss_mi: f64,
    pub loss_balance: f64,
    pub loss_ref: f64,
    #[serde(rename = "d_S_t")]
    pub d_s_t: f64,
    #[serde(rename = "d_O_t")]
    pub d_o_t: f64,
    #[serde(rename = "d_V_t")]
    pub d_v_t: f64,
    pub entropy_ratio: Option<f64>,
    pub confidence_estimate: Option<f64>,
}

impl EpochRecord {
    fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.acc_target,
            self.acc_proxy_raw,
            self.acc_proxy_denoised,
            self.loss_total,
            self.loss_mi,
            self.loss_balance,
            self.loss_ref,
            self.d_s_t,
            self.d_o_t,
            self.d_v_t,
            opt(self.entropy_ratio),
            opt(self.confidence_estimate),
        )
    }
}

/// Per-epoch metrics of one adaptation run. Record 0 is the state at
/// initialization; record `k` follows the `k`-th epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunReport {
    pub ablation: String,
    pub seed: u64,
    pub config: serde_json::Value,
    pub records: Vec<EpochRecord>,
    pub warnings: Vec<String>,
}

impl RunReport {
    /// Number of trained epochs covered by the records.
    pub fn epochs(&self) -> usize {
        self.records.last().map_or(0, |r| r.epoch)
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.records.last().map(|r| r.acc_target)
    }

    pub fn to_csv_string(&self) -> String {
        records_to_csv(&self.records)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

pub fn records_to_csv(records: &[EpochRecord]) -> String {
    let mut out = REPORT_COLUMNS.join(",");
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Json,
    Csv,
}

pub fn write_report(report: &RunReport, path: &Path, format: ReportFormat) -> Result<()> {
    let text = match format {
        ReportFormat::Json => report.to_json(),
        ReportFormat::Csv => report.to_csv_string(),
    };
    io::write_atomic(path, text.as_bytes())
}
