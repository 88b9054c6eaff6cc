//! Source pretraining, oracle training and the adaptation loop.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{batch_indices, Dataset, UnlabeledView};
use crate::diagnostics::{
    accuracy_of_scores, confidence_estimate, entropy_ratio, mmd, space_distances_from_logits,
    EpochRecord, MmdConfig, RunReport,
};
use crate::error::{Error, Result};
use crate::losses::{prode_loss, smoothed_cross_entropy, LossValue, LossWeights, ProdeLoss, SynTerm};
use crate::matrix::Matrix;
use crate::mlp::{Activation, MlpModel};
use crate::optim::{sgd_step, OptimizerState};
use crate::proxy::{
    adapter_gradient_from_logits, denoise, pseudo_labels, DenoiseConfig, DenoiseLevel,
    PromptAdapter, ProxyOracle,
};
use crate::softmax::{softmax_backward, softmax_rows, ProbBatch};

/// Hidden widths and activation; input and output widths come from the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchSpec {
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl Default for ArchSpec {
    fn default() -> Self {
        ArchSpec {
            hidden: vec![32, 32],
            activation: Activation::Relu,
        }
    }
}

impl ArchSpec {
    pub fn dims(&self, input: usize, classes: usize) -> Vec<usize> {
        std::iter::once(input)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(classes))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 15,
            batch_size: 64,
            lr: 0.05,
            momentum: 0.9,
            sigma: 0.1,
            seed: 0,
        }
    }
}

/// Mini-batch SGD on label-smoothed cross-entropy from a seeded initialization.
pub fn train_supervised(train: &Dataset, arch: &ArchSpec, cfg: &PretrainConfig) -> Result<MlpModel> {
    if train.is_empty() {
        return Err(Error::InvalidArgument("cannot train on an empty dataset".into()));
    }
    let mut model = MlpModel::init(&arch.dims(train.dim(), train.classes), arch.activation, cfg.seed)?;
    let mut opt = OptimizerState::for_model(&model, cfg.lr, cfg.momentum)?;
    for epoch in 0..cfg.epochs {
        for batch in batch_indices(train.len(), cfg.batch_size, epoch as u64, cfg.seed) {
            let x = train.features.select_rows(&batch);
            let y: Vec<usize> = batch.iter().map(|&i| train.labels[i]).collect();
            let (logits, cache) = model.forward(&x)?;
            let (loss, d_logits) = smoothed_cross_entropy(&logits, &y, cfg.sigma)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("cross-entropy became {loss}"),
                });
            }
            let grads = model.backward(&cache, &d_logits)?;
            sgd_step(&mut model, &grads, &mut opt).map_err(|e| Error::Diverged {
                epoch,
                detail: e.to_string(),
            })?;
        }
    }
    Ok(model)
}

/// Trains the source model and reports its held-out accuracy.
pub fn pretrain_source(
    train: &Dataset,
    test: &Dataset,
    arch: &ArchSpec,
    cfg: &PretrainConfig,
) -> Result<(MlpModel, f64)> {
    if train.dim() != test.dim() || train.classes != test.classes {
        return Err(Error::shape(
            "pretrain train/test",
            format!("d={} C={}", train.dim(), train.classes),
            format!("d={} C={}", test.dim(), test.classes),
        ));
    }
    let model = train_supervised(train, arch, cfg)?;
    let acc = accuracy_of_scores(&model.predict(&test.features)?, &test.labels)?;
    Ok((model, acc))
}

/// Reference classifier trained with true labels on every domain at once.
pub fn train_oracle(union: &Dataset, arch: &ArchSpec, cfg: &PretrainConfig) -> Result<MlpModel> {
    train_supervised(union, arch, cfg)
}

/// Variants of the adaptation method, in report order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    #[default]
    Full,
    /// No correction: `ω = 0`.
    NoPd,
    /// Correction keeps only the target term: `Δ = −θ_t(x)`.
    NoSource,
    /// Correction keeps only the source term: `Δ = θ_s(x)`.
    NoTarget,
    /// Correction applied to probabilities instead of logits.
    ProbLevel,
    /// Synchronization by `KL(p' ‖ p)` instead of mutual information.
    KlSyn,
    /// Synchronization against the raw teacher; pseudo labels still come
    /// from the corrected prediction.
    RawClip,
}

impl Ablation {
    pub const ALL: [Ablation; 7] = [
        Ablation::Full,
        Ablation::NoPd,
        Ablation::NoSource,
        Ablation::NoTarget,
        Ablation::ProbLevel,
        Ablation::KlSyn,
        Ablation::RawClip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Ablation::Full => "full",
            Ablation::NoPd => "no_pd",
            Ablation::NoSource => "no_source",
            Ablation::NoTarget => "no_target",
            Ablation::ProbLevel => "prob_level",
            Ablation::KlSyn => "kl_syn",
            Ablation::RawClip => "raw_clip",
        }
    }

    /// Denoising settings after applying this variant to `base`.
    pub fn denoise_config(self, base: &DenoiseConfig) -> DenoiseConfig {
        let mut cfg = *base;
        match self {
            Ablation::NoPd => cfg.omega = 0.0,
            Ablation::NoSource => cfg.use_source_term = false,
            Ablation::NoTarget => cfg.use_target_term = false,
            Ablation::ProbLevel => cfg.level = DenoiseLevel::Probability,
            Ablation::Full | Ablation::KlSyn | Ablation::RawClip => {}
        }
        cfg
    }

    pub fn syn_term(self) -> SynTerm {
        if self == Ablation::KlSyn {
            SynTerm::Kl
        } else {
            SynTerm::MutualInformation
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weights: LossWeights,
    pub denoise: DenoiseConfig,
    pub ablation: Ablation,
    pub mmd: MmdConfig,
    pub seed: u64,
    pub repeats: usize,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 15,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weights: LossWeights::default(),
            denoise: DenoiseConfig::default(),
            ablation: Ablation::Full,
            mmd: MmdConfig::default(),
            seed: 0,
            repeats: 5,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        self.weights.validate()?;
        self.denoise.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch size must be positive".into()));
        }
        if self.repeats == 0 {
            return Err(Error::InvalidArgument("repeats must be at least 1".into()));
        }
        Ok(())
    }

    pub fn effective_denoise(&self) -> DenoiseConfig {
        self.ablation.denoise_config(&self.denoise)
    }
}

/// Frozen inputs of an adaptation run.
pub struct AdaptInputs<'a> {
    pub source: &'a MlpModel,
    pub proxy: &'a ProxyOracle,
    pub target: &'a Dataset,
}

#[derive(Debug, Clone)]
pub struct AdaptResult {
    pub model: MlpModel,
    pub adapter: PromptAdapter,
    pub report: RunReport,
}

/// Everything the objective needs for one batch, computed from unlabeled
/// inputs only.
struct Forward {
    tgt_logits: Matrix,
    vil: Matrix,
    p_target: ProbBatch,
    pseudo: Vec<usize>,
    p_denoised: ProbBatch,
    loss: ProdeLoss,
    d_vil: Matrix,
}

fn objective(
    cfg: &AdaptConfig,
    base: &Matrix,
    adapter: &PromptAdapter,
    tgt_logits: Matrix,
    src_logits: &Matrix,
) -> Result<Forward> {
    let vil = adapter.apply(base)?;
    let den = denoise(&vil, src_logits, &tgt_logits, &cfg.effective_denoise())?;
    let pseudo = pseudo_labels(&den.p_prime);
    let p_target = softmax_rows(&tgt_logits);
    let raw = (cfg.ablation == Ablation::RawClip).then(|| softmax_rows(&vil));
    let teacher = raw.as_ref().unwrap_or(&den.p_prime);
    let loss = prode_loss(teacher, &p_target, &pseudo, &cfg.weights, cfg.ablation.syn_term())?;
    let d_vil = match &raw {
        Some(r) => softmax_backward(r, &loss.d_teacher)?,
        None => den.backward_to_vil(&loss.d_teacher)?,
    };
    Ok(Forward {
        tgt_logits,
        vil,
        p_target,
        pseudo,
        p_denoised: den.p_prime,
        loss,
        d_vil,
    })
}

/// One optimization step on a batch. Takes no labels.
#[allow(clippy::too_many_arguments)]
fn adapt_step(
    cfg: &AdaptConfig,
    source: &MlpModel,
    base_all: &Matrix,
    batch: &[usize],
    view: UnlabeledView<'_>,
    model: &mut MlpModel,
    adapter: &mut PromptAdapter,
    opt_model: &mut OptimizerState,
    opt_adapter: &mut OptimizerState,
) -> Result<LossValue> {
    let x = view.features.select_rows(batch);
    let base = base_all.select_rows(batch);
    let (tgt_logits, cache) = model.forward(&x)?;
    let src_logits = source.predict(&x)?;
    let fwd = objective(cfg, &base, adapter, tgt_logits, &src_logits)?;
    if !fwd.loss.value.total.is_finite() {
        return Err(Error::NonFinite(format!("adaptation loss {:?}", fwd.loss.value)));
    }
    let d_logits = softmax_backward(&fwd.p_target, &fwd.loss.d_target)?;
    let grads = model.backward(&cache, &d_logits)?;
    let ag = adapter_gradient_from_logits(&fwd.d_vil, &base)?;
    sgd_step(model, &grads, opt_model)?;
    opt_adapter.step(adapter.param_slices_mut(), &ag.slices())?;
    Ok(fwd.loss.value)
}

/// Fixed quantities for evaluating any adaptation state on the target set.
pub struct Evaluator<'a> {
    inputs: AdaptInputs<'a>,
    cfg: AdaptConfig,
    base: Matrix,
    src_logits: Matrix,
    oracle_logits: Matrix,
    d_source_oracle: f64,
}

impl<'a> Evaluator<'a> {
    pub fn new(inputs: AdaptInputs<'a>, cfg: &AdaptConfig) -> Result<Self> {
        let view = inputs.target.unlabeled();
        let base = inputs.proxy.base_logits(view.features, view.sample_ids)?;
        let src_logits = inputs.source.predict(view.features)?;
        let oracle_logits = inputs.proxy.oracle().predict(view.features)?;
        if src_logits.cols() != base.cols() {
            return Err(Error::shape("source vs teacher classes", base.cols(), src_logits.cols()));
        }
        let d_source_oracle = mmd(&src_logits, &oracle_logits, &cfg.mmd)?;
        Ok(Evaluator {
            inputs,
            cfg: cfg.clone(),
            base,
            src_logits,
            oracle_logits,
            d_source_oracle,
        })
    }

    /// Teacher logits before the adapter for every target row.
    pub fn base_logits(&self) -> &Matrix {
        &self.base
    }

    /// Full-set metrics for one `(model, adapter)` state. Labels are read here
    /// and nowhere on the gradient path.
    pub fn record(
        &self,
        epoch: usize,
        model: &MlpModel,
        adapter: &PromptAdapter,
        warnings: &mut Vec<String>,
    ) -> Result<EpochRecord> {
        let labels = &self.inputs.target.labels;
        let tgt_logits = model.predict(&self.inputs.target.features)?;
        let fwd = objective(&self.cfg, &self.base, adapter, tgt_logits, &self.src_logits)?;
        let dist = space_distances_from_logits(
            &fwd.tgt_logits,
            &self.src_logits,
            &self.oracle_logits,
            &fwd.vil,
            &self.cfg.mmd,
        )?;
        let ratio = entropy_ratio(&fwd.p_target, &softmax_rows(&self.src_logits));
        let entropy_ratio = if ratio.is_finite() {
            Some(ratio)
        } else {
            warnings.push(format!("epoch {epoch}: source predictions have zero entropy"));
            None
        };
        let confidence = match confidence_estimate(dist.d_o_t, self.d_source_oracle) {
            Ok(c) => Some(c),
            Err(_) => {
                warnings.push(format!("epoch {epoch}: source and oracle logits coincide"));
                None
            }
        };
        debug_assert_eq!(fwd.pseudo.len(), labels.len());
        let v = fwd.loss.value;
        Ok(EpochRecord {
            epoch,
            acc_target: accuracy_of_scores(&fwd.tgt_logits, labels)?,
            acc_proxy_raw: accuracy_of_scores(&fwd.vil, labels)?,
            acc_proxy_denoised: accuracy_of_scores(fwd.p_denoised.matrix(), labels)?,
            loss_total: v.total,
            loss_mi: v.syn_mi - v.syn_kl,
            loss_balance: v.syn_balance,
            loss_ref: v.refine,
            d_s_t: dist.d_s_t,
            d_o_t: dist.d_o_t,
            d_v_t: dist.d_v_t,
            entropy_ratio,
            confidence_estimate: confidence,
        })
    }
}

/// Adapts a copy of the source model to the target set.
///
/// The target model starts as the source model and the adapter as the
/// proxy's current adapter. Each batch runs teacher → correction →
/// pseudo labels → objective, then one momentum step on the target model and
/// one on the adapter (separate momentum buffers, shared rate). The source
/// model is never modified. `on_epoch` sees the state after initialization
/// (epoch 0) and after every epoch.
pub fn adapt_with_observer(
    inputs: AdaptInputs<'_>,
    cfg: &AdaptConfig,
    mut on_epoch: impl FnMut(usize, &MlpModel, &PromptAdapter) -> Result<()>,
) -> Result<AdaptResult> {
    cfg.validate()?;
    let source = inputs.source;
    let target = inputs.target;
    if source.input_dim() != target.dim() || source.output_dim() != inputs.proxy.classes() {
        return Err(Error::shape(
            "adapt inputs",
            format!("d={} C={}", source.input_dim(), source.output_dim()),
            format!("d={} C={}", target.dim(), inputs.proxy.classes()),
        ));
    }
    let view = target.unlabeled();
    let evaluator = Evaluator::new(
        AdaptInputs {
            source,
            proxy: inputs.proxy,
            target,
        },
        cfg,
    )?;
    let mut model = source.clone();
    let mut adapter = inputs.proxy.adapter.clone();
    let mut opt_model = OptimizerState::for_model(&model, cfg.lr, cfg.momentum)?;
    let mut opt_adapter = OptimizerState::new(cfg.lr, cfg.momentum, &[adapter.classes(); 2])?;

    let mut warnings = Vec::new();
    let mut records = vec![evaluator.record(0, &model, &adapter, &mut warnings)?];
    on_epoch(0, &model, &adapter)?;
    for epoch in 1..=cfg.epochs {
        for batch in batch_indices(view.len(), cfg.batch_size, epoch as u64, cfg.seed) {
            adapt_step(
                cfg,
                source,
                evaluator.base_logits(),
                &batch,
                view,
                &mut model,
                &mut adapter,
                &mut opt_model,
                &mut opt_adapter,
            )
            .map_err(|e| Error::Diverged {
                epoch,
                detail: format!("{e}; config: {}", serde_json::to_string(cfg).unwrap_or_default()),
            })?;
        }
        records.push(evaluator.record(epoch, &model, &adapter, &mut warnings)?);
        on_epoch(epoch, &model, &adapter)?;
    }

    Ok(AdaptResult {
        model,
        adapter,
        report: RunReport {
            ablation: cfg.ablation.name().to_string(),
            seed: cfg.seed,
            config: serde_json::to_value(cfg)?,
            records,
            warnings,
        },
    })
}

pub fn adapt(source: &MlpModel, proxy: &ProxyOracle, target: &Dataset, cfg: &AdaptConfig) -> Result<AdaptResult> {
    adapt_with_observer(AdaptInputs { source, proxy, target }, cfg, |_, _, _| Ok(()))
}

/// One ablation variant over `repeats` adaptation seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub ablation: Ablation,
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub mean_accuracy: f64,
}

/// Runs every variant with shared seeds `base.seed + r`, `r < base.repeats`.
pub fn run_ablation_suite(
    base: &AdaptConfig,
    source: &MlpModel,
    proxy: &ProxyOracle,
    target: &Dataset,
) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let seeds: Vec<u64> = (0..base.repeats as u64).map(|r| base.seed + r).collect();
    Ablation::ALL
        .into_iter()
        .map(|ablation| {
            let accuracies = seeds
                .iter()
                .map(|&seed| {
                    let cfg = AdaptConfig {
                        ablation,
                        seed,
                        ..base.clone()
                    };
                    let res = adapt(source, proxy, target, &cfg)?;
                    Ok(res.report.final_accuracy().unwrap_or(0.0))
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
            Ok(AblationRow {
                ablation,
                seeds: seeds.clone(),
                accuracies,
                mean_accuracy,
            })
        })
        .collect()
}
