//! `sfda`: reproducible source-free adaptation experiments on synthetic domains.
//!
//! Every subcommand reads and writes artifacts in one run directory (`--out`).
//! Scientific outputs are deterministic; wall times go to `meta.json`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use sfda_core::data::{load_csv, save_csv, Dataset, ShiftSpec};
use sfda_core::diagnostics::{accuracy, records_to_csv, write_report, ReportFormat};
use sfda_core::experiment::{build_proxy, fit_oracle, generate_domains, split_source, RunConfig};
use sfda_core::io::{read_to_string, sha256_hex, write_atomic};
use sfda_core::mlp::Checkpoint;
use sfda_core::proxy::{PromptAdapter, ProxyOracle};
use sfda_core::training::{
    adapt_with_observer, pretrain_source, Ablation, AblationRow, AdaptConfig, AdaptInputs, Evaluator,
};
use sfda_core::{Error, MlpModel, Result};

#[derive(Parser)]
#[command(name = "sfda", version, about = "Source-free domain adaptation experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// JSON config file; unknown keys are rejected.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override as dotted.key=value, value parsed as JSON. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Run directory for inputs and outputs.
    #[arg(long, default_value = "run")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate source.csv, target.csv and manifest.json.
    GenData(Common),
    /// Pretrain the source model on the source train split.
    Pretrain(Common),
    /// Train the oracle and write the simulated teacher.
    TrainOracle(Common),
    /// Adapt the source model to the target for every configured seed.
    Adapt {
        #[command(flatten)]
        common: Common,
        /// Keep a checkpoint per epoch (needed by `diagnose`).
        #[arg(long)]
        keep_epochs: bool,
    },
    /// Run every ablation variant with shared seeds.
    Ablate(Common),
    /// Recompute per-epoch diagnostics from kept epoch checkpoints.
    Diagnose {
        #[command(flatten)]
        common: Common,
        /// Adaptation seed to diagnose; defaults to the first configured seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Print a summary of adapt and ablate outputs.
    Report(Common),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Pretrain(_) => "pretrain",
            Command::TrainOracle(_) => "train-oracle",
            Command::Adapt { .. } => "adapt",
            Command::Ablate(_) => "ablate",
            Command::Diagnose { .. } => "diagnose",
            Command::Report(_) => "report",
        }
    }

    fn common(&self) -> &Common {
        match self {
            Command::GenData(c) | Command::Pretrain(c) | Command::TrainOracle(c) | Command::Ablate(c) | Command::Report(c) => c,
            Command::Adapt { common, .. } | Command::Diagnose { common, .. } => common,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    data: sfda_core::experiment::DataConfig,
    shift: ShiftSpec,
    classes: usize,
    source_rows: usize,
    target_rows: usize,
    source_id_base: u64,
    target_id_base: u64,
    source_sha256: String,
    target_sha256: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EpochCheckpoint {
    epoch: usize,
    model: Checkpoint,
    adapter: PromptAdapter,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Summary {
    config_hash: String,
    seeds: Vec<u64>,
    input_hashes: Vec<String>,
    final_accuracies: Vec<f64>,
    mean: f64,
    median: f64,
    min: f64,
    max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AblationTable {
    config_hash: String,
    rows: Vec<AblationEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct AblationEntry {
    #[serde(flatten)]
    row: AblationRow,
    input_hashes: Vec<String>,
}

struct Ctx {
    cfg: RunConfig,
    out: PathBuf,
}

impl Ctx {
    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn write(&self, name: &str, text: &str) -> Result<()> {
        let path = self.path(name);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
        }
        write_atomic(&path, text.as_bytes())
    }

    fn read(&self, name: &str) -> Result<String> {
        read_to_string(&self.path(name))
    }

    fn manifest(&self) -> Result<Manifest> {
        let m: Manifest = serde_json::from_str(&self.read("manifest.json")?)?;
        if m.data != self.cfg.data {
            eprintln!("warning: data config differs from manifest.json; using the manifest");
        }
        Ok(m)
    }

    fn dataset(&self, name: &str, m: &Manifest, id_base: u64) -> Result<Dataset> {
        load_csv(&self.path(name), Some(m.classes), id_base)
    }

    fn source_model(&self) -> Result<MlpModel> {
        MlpModel::from_json(&self.read("source.json")?)
    }

    fn proxy(&self) -> Result<ProxyOracle> {
        ProxyOracle::from_json(&self.read("proxy.json")?)
    }
}

fn pretty<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("serializable");
    s.push('\n');
    s
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn gen_data(ctx: &Ctx) -> Result<()> {
    let domains = generate_domains(&ctx.cfg.data)?;
    save_csv(&domains.source, &ctx.path("source.csv"))?;
    save_csv(&domains.target, &ctx.path("target.csv"))?;
    let manifest = Manifest {
        data: ctx.cfg.data.clone(),
        shift: ctx.cfg.data.shift_spec(),
        classes: domains.source.classes,
        source_rows: domains.source.len(),
        target_rows: domains.target.len(),
        source_id_base: domains.source.sample_ids[0],
        target_id_base: domains.target.sample_ids[0],
        source_sha256: sha256_hex(ctx.read("source.csv")?.as_bytes()),
        target_sha256: sha256_hex(ctx.read("target.csv")?.as_bytes()),
    };
    ctx.write("manifest.json", &pretty(&manifest))?;
    println!("wrote {} source and {} target rows", manifest.source_rows, manifest.target_rows);
    Ok(())
}

fn pretrain(ctx: &Ctx) -> Result<()> {
    let m = ctx.manifest()?;
    let source = ctx.dataset("source.csv", &m, m.source_id_base)?;
    let (train, test) = split_source(&m.data, &source)?;
    let (model, test_acc) = pretrain_source(&train, &test, &ctx.cfg.pretrain.arch, &ctx.cfg.pretrain.source)?;
    ctx.write("source.json", &model.to_json())?;
    ctx.write(
        "source.metrics.json",
        &pretty(&json!({ "held_out_accuracy": test_acc, "digest": model.digest() })),
    )?;
    println!("source model held-out accuracy {test_acc:.4}");
    Ok(())
}

fn train_oracle_cmd(ctx: &Ctx) -> Result<()> {
    let m = ctx.manifest()?;
    let source = ctx.dataset("source.csv", &m, m.source_id_base)?;
    let target = ctx.dataset("target.csv", &m, m.target_id_base)?;
    let (train, _) = split_source(&m.data, &source)?;
    let oracle = fit_oracle(&ctx.cfg, &train, &target)?;
    let proxy = build_proxy(&ctx.cfg.proxy, &oracle)?;
    ctx.write("oracle.json", &oracle.to_json())?;
    ctx.write("proxy.json", &proxy.to_json())?;
    println!("oracle target accuracy {:.4}", accuracy(&oracle, &target)?);
    Ok(())
}

struct AdaptInputsOwned {
    source: MlpModel,
    proxy: ProxyOracle,
    target: Dataset,
    base_hash: String,
}

fn load_adapt_inputs(ctx: &Ctx) -> Result<AdaptInputsOwned> {
    let m = ctx.manifest()?;
    let source = ctx.source_model()?;
    let proxy = ctx.proxy()?;
    let target_text = ctx.read("target.csv")?;
    let target = ctx.dataset("target.csv", &m, m.target_id_base)?;
    let base_hash = sha256_hex(format!("{}\n{}\n{}", source.to_json(), proxy.to_json(), target_text).as_bytes());
    Ok(AdaptInputsOwned { source, proxy, target, base_hash })
}

fn input_hash(base: &str, cfg: &AdaptConfig) -> String {
    sha256_hex(format!("{base}\n{}", serde_json::to_string(cfg).unwrap_or_default()).as_bytes())
}

fn adapt_cmd(ctx: &Ctx, keep_epochs: bool) -> Result<()> {
    let inputs = load_adapt_inputs(ctx)?;
    let seeds = ctx.cfg.adapt_seeds();
    let mut finals = Vec::new();
    let mut hashes = Vec::new();
    for &seed in &seeds {
        let cfg = AdaptConfig { seed, ..ctx.cfg.adapt.clone() };
        let dir = format!("seed_{seed}");
        let res = adapt_with_observer(
            AdaptInputs { source: &inputs.source, proxy: &inputs.proxy, target: &inputs.target },
            &cfg,
            |epoch, model, adapter| {
                if keep_epochs {
                    let chk = EpochCheckpoint { epoch, model: model.to_checkpoint(), adapter: adapter.clone() };
                    ctx.write(&format!("{dir}/epochs/epoch_{epoch}.json"), &pretty(&chk))?;
                }
                Ok(())
            },
        )?;
        ctx.write(&format!("{dir}/model.json"), &res.model.to_json())?;
        ctx.write(&format!("{dir}/adapter.json"), &pretty(&res.adapter))?;
        write_report(&res.report, &ctx.path(&format!("{dir}/report.json")), ReportFormat::Json)?;
        write_report(&res.report, &ctx.path(&format!("{dir}/report.csv")), ReportFormat::Csv)?;
        for w in &res.report.warnings {
            eprintln!("warning (seed {seed}): {w}");
        }
        let acc = res.report.final_accuracy().unwrap_or(0.0);
        println!("seed {seed}: target accuracy {:.4} -> {acc:.4}", res.report.records[0].acc_target);
        finals.push(acc);
        hashes.push(input_hash(&inputs.base_hash, &cfg));
    }
    let summary = Summary {
        config_hash: ctx.cfg.config_hash(),
        seeds,
        input_hashes: hashes,
        mean: finals.iter().sum::<f64>() / finals.len() as f64,
        median: median(&finals),
        min: finals.iter().copied().fold(f64::INFINITY, f64::min),
        max: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        final_accuracies: finals,
    };
    ctx.write("summary.json", &pretty(&summary))?;
    println!("mean {:.4} median {:.4} min {:.4} max {:.4}", summary.mean, summary.median, summary.min, summary.max);
    Ok(())
}

fn ablate_cmd(ctx: &Ctx) -> Result<()> {
    let inputs = load_adapt_inputs(ctx)?;
    let seeds = ctx.cfg.adapt_seeds();
    let mut rows = Vec::new();
    for ablation in Ablation::ALL {
        let mut accuracies = Vec::new();
        let mut hashes = Vec::new();
        for &seed in &seeds {
            let cfg = AdaptConfig { seed, ablation, ..ctx.cfg.adapt.clone() };
            let res = adapt_with_observer(
                AdaptInputs { source: &inputs.source, proxy: &inputs.proxy, target: &inputs.target },
                &cfg,
                |_, _, _| Ok(()),
            )?;
            accuracies.push(res.report.final_accuracy().unwrap_or(0.0));
            hashes.push(input_hash(&inputs.base_hash, &cfg));
        }
        let mean_accuracy = accuracies.iter().sum::<f64>() / accuracies.len() as f64;
        println!("{:<11} {mean_accuracy:.4}", ablation.name());
        rows.push(AblationEntry {
            row: AblationRow { ablation, seeds: seeds.clone(), accuracies, mean_accuracy },
            input_hashes: hashes,
        });
    }
    let mut csv = String::from("ablation,mean_accuracy");
    for s in &seeds {
        csv.push_str(&format!(",seed_{s}"));
    }
    csv.push('\n');
    for e in &rows {
        csv.push_str(&format!("{},{}", e.row.ablation.name(), e.row.mean_accuracy));
        for a in &e.row.accuracies {
            csv.push_str(&format!(",{a}"));
        }
        csv.push('\n');
    }
    ctx.write("ablation.csv", &csv)?;
    ctx.write("ablation.json", &pretty(&AblationTable { config_hash: ctx.cfg.config_hash(), rows }))
}

fn diagnose_cmd(ctx: &Ctx, seed: Option<u64>) -> Result<()> {
    let inputs = load_adapt_inputs(ctx)?;
    let seed = match seed {
        Some(s) => s,
        None => *ctx
            .cfg
            .adapt_seeds()
            .first()
            .ok_or_else(|| Error::Config("no adaptation seeds configured".into()))?,
    };
    let cfg = AdaptConfig { seed, ..ctx.cfg.adapt.clone() };
    let evaluator = Evaluator::new(
        AdaptInputs { source: &inputs.source, proxy: &inputs.proxy, target: &inputs.target },
        &cfg,
    )?;
    let dir = format!("seed_{seed}/epochs");
    let first = ctx.path(&format!("{dir}/epoch_0.json"));
    if !first.exists() {
        return Err(Error::MissingArtifact(first));
    }
    let mut records = Vec::new();
    let mut warnings = Vec::new();
    for epoch in 0.. {
        let path = ctx.path(&format!("{dir}/epoch_{epoch}.json"));
        if !path.exists() {
            break;
        }
        let chk: EpochCheckpoint = serde_json::from_str(&read_to_string(&path)?)?;
        let model = MlpModel::from_checkpoint(chk.model)?;
        records.push(evaluator.record(epoch, &model, &chk.adapter, &mut warnings)?);
    }
    for w in &warnings {
        eprintln!("warning: {w}");
    }
    ctx.write(&format!("seed_{seed}/diagnose.csv"), &records_to_csv(&records))?;
    println!("{} epoch rows for seed {seed}", records.len());
    Ok(())
}

fn report_cmd(ctx: &Ctx) -> Result<()> {
    let summary = ctx.read("summary.json").ok();
    let ablation = ctx.read("ablation.json").ok();
    if summary.is_none() && ablation.is_none() {
        return Err(Error::MissingArtifact(ctx.path("summary.json")));
    }
    let mut text = String::new();
    if let Some(s) = summary {
        let s: Summary = serde_json::from_str(&s)?;
        text.push_str(&format!("adaptation over {} seeds (config {})\n", s.seeds.len(), &s.config_hash[..12]));
        for (seed, acc) in s.seeds.iter().zip(&s.final_accuracies) {
            text.push_str(&format!("  seed {seed:<22} {acc:.4}\n"));
        }
        text.push_str(&format!(
            "  mean {:.4}  median {:.4}  min {:.4}  max {:.4}\n",
            s.mean, s.median, s.min, s.max
        ));
    }
    if let Some(a) = ablation {
        let a: AblationTable = serde_json::from_str(&a)?;
        text.push_str("ablations (mean final target accuracy)\n");
        for e in &a.rows {
            text.push_str(&format!("  {:<11} {:.4}\n", e.row.ablation.name(), e.row.mean_accuracy));
        }
    }
    print!("{text}");
    ctx.write("report.txt", &text)
}

fn record_meta(out: &Path, command: &str, started: SystemTime, wall: f64) -> Result<()> {
    let path = out.join("meta.json");
    let mut meta: Value = std::fs::read_to_string(&path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_else(|| json!({}));
    let started_unix = started.duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0);
    meta[command] = json!({
        "started_unix": started_unix,
        "wall_seconds": wall,
        "version": env!("CARGO_PKG_VERSION"),
        "os": std::env::consts::OS,
        "arch": std::env::consts::ARCH,
    });
    write_atomic(&path, pretty(&meta).as_bytes())
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common().clone();
    let file = match &common.config {
        Some(p) => Some(read_to_string(p).map_err(|e| match e {
            Error::MissingArtifact(p) => Error::Config(format!("config file not found: {}", p.display())),
            other => other,
        })?),
        None => None,
    };
    let cfg = RunConfig::resolve(file.as_deref(), &common.overrides)?;
    std::fs::create_dir_all(&common.out).map_err(|e| Error::Io { path: common.out.clone(), source: e })?;
    let ctx = Ctx { cfg, out: common.out.clone() };
    let name = cli.command.name();
    ctx.write(&format!("{name}.config.json"), &pretty(&ctx.cfg))?;

    let started = SystemTime::now();
    let clock = Instant::now();
    match cli.command {
        Command::GenData(_) => gen_data(&ctx)?,
        Command::Pretrain(_) => pretrain(&ctx)?,
        Command::TrainOracle(_) => train_oracle_cmd(&ctx)?,
        Command::Adapt { keep_epochs, .. } => adapt_cmd(&ctx, keep_epochs)?,
        Command::Ablate(_) => ablate_cmd(&ctx)?,
        Command::Diagnose { seed, .. } => diagnose_cmd(&ctx, seed)?,
        Command::Report(_) => report_cmd(&ctx)?,
    }
    record_meta(&ctx.out, name, started, clock.elapsed().as_secs_f64())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::MissingArtifact(_) => 3,
        Error::Diverged { .. } | Error::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
