//! Simulated vision-language teacher, its prompt adapter, and logit-level
//! proxy denoising.
//!
//! The teacher is a classifier trained on every domain with true labels. Its
//! logits are divided by a temperature and perturbed by a fixed Gaussian
//! vector per sample (scale `noise_scale`), which makes the proxy error a
//! known, repeatable dial. A per-class affine adapter plays the role of the
//! learnable prompt context.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::mlp::{Checkpoint, MlpModel};
use crate::rng::{self, Purpose};
use crate::softmax::{softmax_backward, softmax_rows, ProbBatch};

/// Clamp floor for the probability-level correction.
pub const PROB_CLAMP: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PromptAdapter {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl PromptAdapter {
    pub fn identity(classes: usize) -> Self {
        PromptAdapter {
            scale: vec![1.0; classes],
            bias: vec![0.0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.scale.len()
    }

    fn validate(&self) -> Result<()> {
        if self.scale.len() != self.bias.len() {
            return Err(Error::shape("adapter bias", self.scale.len(), self.bias.len()));
        }
        if self.scale.iter().chain(&self.bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("prompt adapter".into()));
        }
        Ok(())
    }

    /// `scale ⊙ base + bias`, row by row.
    pub fn apply(&self, base: &Matrix) -> Result<Matrix> {
        if base.cols() != self.classes() {
            return Err(Error::shape("adapter input", self.classes(), base.cols()));
        }
        let mut out = base.clone();
        for r in 0..out.rows() {
            for ((v, s), b) in out.row_mut(r).iter_mut().zip(&self.scale).zip(&self.bias) {
                *v = s * *v + b;
            }
        }
        Ok(out)
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.scale.as_mut_slice(), self.bias.as_mut_slice()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGradient {
    pub scale: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AdapterGradient {
    pub fn slices(&self) -> Vec<&[f64]> {
        vec![&self.scale, &self.bias]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProxyOracle {
    oracle: MlpModel,
    noise_scale: f64,
    temperature: f64,
    noise_seed: u64,
    pub adapter: PromptAdapter,
}

impl ProxyOracle {
    pub fn new(oracle: MlpModel, noise_scale: f64, temperature: f64, noise_seed: u64) -> Result<Self> {
        let adapter = PromptAdapter::identity(oracle.output_dim());
        ProxyOracle::with_adapter(oracle, noise_scale, temperature, noise_seed, adapter)
    }

    pub fn with_adapter(
        oracle: MlpModel,
        noise_scale: f64,
        temperature: f64,
        noise_seed: u64,
        adapter: PromptAdapter,
    ) -> Result<Self> {
        if !(noise_scale.is_finite() && noise_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "noise scale must be finite and nonnegative, got {noise_scale}"
            )));
        }
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "temperature must be positive, got {temperature}"
            )));
        }
        adapter.validate()?;
        if adapter.classes() != oracle.output_dim() {
            return Err(Error::shape("adapter classes", oracle.output_dim(), adapter.classes()));
        }
        Ok(ProxyOracle {
            oracle,
            noise_scale,
            temperature,
            noise_seed,
            adapter,
        })
    }

    pub fn oracle(&self) -> &MlpModel {
        &self.oracle
    }

    pub fn noise_scale(&self) -> f64 {
        self.noise_scale
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn noise_seed(&self) -> u64 {
        self.noise_seed
    }

    pub fn classes(&self) -> usize {
        self.oracle.output_dim()
    }

    /// Standard-normal perturbation tied to one sample identity.
    pub fn noise_vector(&self, sample_id: u64) -> Vec<f64> {
        let mut rng = rng::stream(self.noise_seed, Purpose::ProxyNoise, sample_id);
        (0..self.classes())
            .map(|_| StandardNormal.sample(&mut rng))
            .collect()
    }

    /// Teacher logits before the adapter: `oracle(x)/T + ν·g(id)`.
    pub fn base_logits(&self, x: &Matrix, sample_ids: &[u64]) -> Result<Matrix> {
        if sample_ids.len() != x.rows() {
            return Err(Error::shape("proxy sample ids", x.rows(), sample_ids.len()));
        }
        let mut logits = self.oracle.predict(x)?.scale(1.0 / self.temperature);
        if self.noise_scale > 0.0 {
            for (r, &id) in sample_ids.iter().enumerate() {
                let g = self.noise_vector(id);
                for (v, gi) in logits.row_mut(r).iter_mut().zip(g) {
                    *v += self.noise_scale * gi;
                }
            }
        }
        Ok(logits)
    }

    /// Teacher logits with the current adapter applied.
    pub fn logits(&self, x: &Matrix, sample_ids: &[u64]) -> Result<Matrix> {
        self.adapter.apply(&self.base_logits(x, sample_ids)?)
    }

    pub fn to_checkpoint(&self) -> ProxyCheckpoint {
        ProxyCheckpoint {
            oracle: self.oracle.to_checkpoint(),
            noise_scale: self.noise_scale,
            temperature: self.temperature,
            noise_seed: self.noise_seed,
            adapter: self.adapter.clone(),
        }
    }

    pub fn from_checkpoint(chk: ProxyCheckpoint) -> Result<Self> {
        ProxyOracle::with_adapter(
            MlpModel::from_checkpoint(chk.oracle)?,
            chk.noise_scale,
            chk.temperature,
            chk.noise_seed,
            chk.adapter,
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_checkpoint()).expect("proxy checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        ProxyOracle::from_checkpoint(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProxyCheckpoint {
    pub oracle: Checkpoint,
    pub noise_scale: f64,
    pub temperature: f64,
    pub noise_seed: u64,
    pub adapter: PromptAdapter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DenoiseLevel {
    #[default]
    Logit,
    Probability,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiseConfig {
    pub omega: f64,
    pub level: DenoiseLevel,
    pub use_source_term: bool,
    pub use_target_term: bool,
}

impl Default for DenoiseConfig {
    fn default() -> Self {
        DenoiseConfig {
            omega: 1.0,
            level: DenoiseLevel::Logit,
            use_source_term: true,
            use_target_term: true,
        }
    }
}

impl DenoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.omega.is_finite() && self.omega >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "omega must be finite and nonnegative, got {}",
                self.omega
            )));
        }
        Ok(())
    }
}

/// Output of [`denoise`] plus what its backward pass needs.
#[derive(Debug, Clone)]
pub struct Denoised {
    pub l_prime: Matrix,
    pub p_prime: ProbBatch,
    level: DenoiseLevel,
    raw_probs: Option<ProbBatch>,
    pre_clamp: Option<Matrix>,
    clamp_sums: Vec<f64>,
}

/// Corrects teacher logits by the drift of the target model away from the
/// source model: `l' = vil − ω·Δ`, `Δ = src − tgt`, `p' = softmax(l')`.
///
/// At probability level the same correction is applied to softmax outputs,
/// then clamped at [`PROB_CLAMP`] and renormalized; `l'` is reported as `ln p'`.
pub fn denoise(vil: &Matrix, src: &Matrix, tgt: &Matrix, cfg: &DenoiseConfig) -> Result<Denoised> {
    cfg.validate()?;
    vil.ensure_same_shape(src, "denoise source logits")?;
    vil.ensure_same_shape(tgt, "denoise target logits")?;
    let (n, c) = vil.shape();
    let s = if cfg.use_source_term { 1.0 } else { 0.0 };
    let t = if cfg.use_target_term { 1.0 } else { 0.0 };

    match cfg.level {
        DenoiseLevel::Logit => {
            let mut l_prime = vil.clone();
            if cfg.omega != 0.0 {
                for ((l, &a), &b) in l_prime
                    .values_mut()
                    .iter_mut()
                    .zip(src.values())
                    .zip(tgt.values())
                {
                    *l -= cfg.omega * (s * a - t * b);
                }
            }
            let p_prime = softmax_rows(&l_prime);
            Ok(Denoised {
                l_prime,
                p_prime,
                level: cfg.level,
                raw_probs: None,
                pre_clamp: None,
                clamp_sums: Vec::new(),
            })
        }
        DenoiseLevel::Probability => {
            let raw = softmax_rows(vil);
            let ps = softmax_rows(src);
            let pt = softmax_rows(tgt);
            let mut pre = Matrix::zeros(n, c);
            let mut p = Matrix::zeros(n, c);
            let mut sums = Vec::with_capacity(n);
            for i in 0..n {
                let mut sum = 0.0;
                for k in 0..c {
                    let u = raw.get(i, k) - cfg.omega * (s * ps.get(i, k) - t * pt.get(i, k));
                    pre.set(i, k, u);
                    let v = u.max(PROB_CLAMP);
                    p.set(i, k, v);
                    sum += v;
                }
                for v in p.row_mut(i) {
                    *v /= sum;
                }
                sums.push(sum);
            }
            let l_prime = p.map(f64::ln);
            Ok(Denoised {
                l_prime,
                p_prime: ProbBatch::from_matrix_unchecked(p),
                level: cfg.level,
                raw_probs: Some(raw),
                pre_clamp: Some(pre),
                clamp_sums: sums,
            })
        }
    }
}

impl Denoised {
    /// Gradient with respect to the teacher logits given a gradient with
    /// respect to `p'`. Source and target logits are treated as constants.
    pub fn backward_to_vil(&self, d_p_prime: &Matrix) -> Result<Matrix> {
        self.p_prime
            .matrix()
            .ensure_same_shape(d_p_prime, "denoise backward")?;
        match self.level {
            DenoiseLevel::Logit => softmax_backward(&self.p_prime, d_p_prime),
            DenoiseLevel::Probability => {
                let raw = self.raw_probs.as_ref().expect("probability-level cache");
                let pre = self.pre_clamp.as_ref().expect("probability-level cache");
                let mut d_raw = Matrix::zeros(d_p_prime.rows(), d_p_prime.cols());
                for i in 0..d_p_prime.rows() {
                    let p = self.p_prime.row(i);
                    let g = d_p_prime.row(i);
                    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
                    let sum = self.clamp_sums[i];
                    for k in 0..d_p_prime.cols() {
                        let gate = if pre.get(i, k) > PROB_CLAMP { 1.0 } else { 0.0 };
                        d_raw.set(i, k, gate * (g[k] - dot) / sum);
                    }
                }
                softmax_backward(raw, &d_raw)
            }
        }
    }
}

/// Hard labels from teacher predictions; ties go to the lowest class.
pub fn pseudo_labels(p_prime: &ProbBatch) -> Vec<usize> {
    p_prime.matrix().argmax_rows()
}

/// Chain rule from a gradient on `p'` through the denoising step and the
/// affine adapter. `base` holds the teacher logits before the adapter.
pub fn adapter_gradient(d_p_prime: &Matrix, denoised: &Denoised, base: &Matrix) -> Result<AdapterGradient> {
    let d_vil = denoised.backward_to_vil(d_p_prime)?;
    adapter_gradient_from_logits(&d_vil, base)
}

/// Adapter gradient from a gradient on the adapted teacher logits.
pub fn adapter_gradient_from_logits(d_vil: &Matrix, base: &Matrix) -> Result<AdapterGradient> {
    d_vil.ensure_same_shape(base, "adapter gradient")?;
    let scale = d_vil.zip_map(base, |g, b| g * b)?.column_sums();
    Ok(AdapterGradient {
        scale,
        bias: d_vil.column_sums(),
    })
}
