//! End-to-end behaviour of data generation, pretraining and adaptation.

use sfda_core::data::{
    from_csv_str, gen_blobs, gen_two_moons, load_csv, save_csv, shift_domain, split, to_csv_string,
    Dataset, ShiftSpec,
};
use sfda_core::diagnostics::{accuracy, RunReport, REPORT_COLUMNS};
use sfda_core::experiment::{build_proxy, generate_domains, train_models, RunConfig};
use sfda_core::proxy::{denoise, DenoiseConfig};
use sfda_core::training::{
    adapt, adapt_with_observer, pretrain_source, run_ablation_suite, train_supervised, Ablation,
    AdaptConfig, AdaptInputs, ArchSpec, PretrainConfig,
};
use sfda_core::{softmax_rows, Matrix};

fn small_recipe(epochs: usize) -> RunConfig {
    let mut cfg = RunConfig::recipe().reseeded(11);
    cfg.adapt.epochs = epochs;
    cfg
}

#[test]
fn csv_round_trip_of_a_thousand_rows() {
    let ds = gen_two_moons(1000, 0.2, 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("moons.csv");
    save_csv(&ds, &path).unwrap();
    let back = load_csv(&path, Some(2), 0).unwrap();
    assert_eq!(back.features, ds.features);
    assert_eq!(back.labels, ds.labels);
    assert_eq!(back.domain_tag, ds.domain_tag);
    assert_eq!(back.sample_ids, ds.sample_ids);
    assert_eq!(to_csv_string(&back), std::fs::read_to_string(&path).unwrap());
}

#[test]
fn csv_rejects_bad_rows_with_location() {
    let text = "f0,f1,label,domain\n0.5,1.0,0,a\n0.5,oops,1,a\n";
    let err = from_csv_str(text, "mem.csv", None, 0).unwrap_err().to_string();
    assert!(err.contains("mem.csv:3"), "{err}");
}

#[test]
fn two_moons_are_learnable() {
    let ds = gen_two_moons(200, 0.1, 3).unwrap();
    let (train, test) = split(&ds, 0.8, 4).unwrap();
    let cfg = PretrainConfig { epochs: 100, ..PretrainConfig::default() };
    let (_, acc) = pretrain_source(&train, &test, &ArchSpec::default(), &cfg).unwrap();
    assert!(acc >= 0.95, "held-out accuracy {acc}");
}

#[test]
fn rotation_hurts_the_source_model_and_not_the_oracle() {
    let cfg = RunConfig::recipe().reseeded(2);
    let mut data = cfg.data.clone();
    data.rotation_degrees = 45.0;
    let domains = generate_domains(&data).unwrap();
    let models = train_models(&cfg, &domains).unwrap();
    let on_source = accuracy(&models.source, &domains.source).unwrap();
    let on_target = accuracy(&models.source, &domains.target).unwrap();
    let oracle_on_target = accuracy(&models.oracle, &domains.target).unwrap();
    assert!(on_target < on_source, "{on_target} vs {on_source}");
    assert!(oracle_on_target >= on_target);
}

#[test]
fn separable_blobs_reach_full_accuracy() {
    let centers = Matrix::from_rows(&[[0.0, 0.0], [10.0, 0.0], [0.0, 10.0]]).unwrap();
    let ds = gen_blobs(300, &centers, 0.3, 8).unwrap();
    let (train, test) = split(&ds, 0.9, 8).unwrap();
    let (_, acc) = pretrain_source(&train, &test, &ArchSpec::default(), &PretrainConfig::default()).unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn zero_epochs_keep_the_initialization() {
    let ds = gen_two_moons(50, 0.1, 1).unwrap();
    let arch = ArchSpec::default();
    let cfg = PretrainConfig { epochs: 0, seed: 42, ..PretrainConfig::default() };
    let model = train_supervised(&ds, &arch, &cfg).unwrap();
    let init = sfda_core::MlpModel::init(&arch.dims(2, 2), arch.activation, 42).unwrap();
    assert_eq!(model, init);
}

struct Fixture {
    domains: sfda_core::experiment::Domains,
    models: sfda_core::experiment::Models,
    proxy: sfda_core::proxy::ProxyOracle,
    cfg: RunConfig,
}

fn fixture(epochs: usize) -> Fixture {
    let cfg = small_recipe(epochs);
    let domains = generate_domains(&cfg.data).unwrap();
    let models = train_models(&cfg, &domains).unwrap();
    let proxy = build_proxy(&cfg.proxy, &models.oracle).unwrap();
    Fixture { domains, models, proxy, cfg }
}

#[test]
fn zero_weights_leave_the_target_model_alone() {
    let f = fixture(3);
    let mut cfg = f.cfg.adapt.clone();
    cfg.weights.alpha = 0.0;
    cfg.weights.beta = 0.0;
    let res = adapt(&f.models.source, &f.proxy, &f.domains.target, &cfg).unwrap();
    assert_eq!(res.model.params(), f.models.source.params());
}

#[test]
fn without_correction_the_teacher_is_the_raw_proxy() {
    let f = fixture(2);
    let cfg = AdaptConfig { ablation: Ablation::NoPd, ..f.cfg.adapt.clone() };
    let target = &f.domains.target;
    let src = f.models.source.predict(&target.features).unwrap();
    adapt_with_observer(
        AdaptInputs { source: &f.models.source, proxy: &f.proxy, target },
        &cfg,
        |_, model, adapter| {
            let mut proxy = f.proxy.clone();
            proxy.adapter = adapter.clone();
            let vil = proxy.logits(&target.features, &target.sample_ids).unwrap();
            let tgt = model.predict(&target.features).unwrap();
            let den = denoise(&vil, &src, &tgt, &cfg.effective_denoise()).unwrap();
            assert_eq!(den.p_prime, softmax_rows(&vil));
            Ok(())
        },
    )
    .unwrap();
}

#[test]
fn identical_inputs_give_identical_bytes() {
    let run = || {
        let f = fixture(3);
        let res = adapt(&f.models.source, &f.proxy, &f.domains.target, &f.cfg.adapt).unwrap();
        (res.model.to_json(), res.report.to_json(), res.report.to_csv_string())
    };
    assert_eq!(run(), run());
}

#[test]
fn adaptation_never_touches_the_source_model() {
    let f = fixture(3);
    let before = f.models.source.digest();
    let res = adapt(&f.models.source, &f.proxy, &f.domains.target, &f.cfg.adapt).unwrap();
    assert_eq!(f.models.source.digest(), before);
    assert_ne!(res.model.digest(), before);
}

#[test]
fn target_labels_do_not_reach_the_gradient_path() {
    let f = fixture(3);
    let t = &f.domains.target;
    // Rotate every label, so each one changes.
    let scrambled = Dataset::new(
        t.features.clone(),
        t.labels.iter().map(|&y| (y + 1) % t.classes).collect(),
        t.classes,
        t.domain_tag.clone(),
        t.sample_ids.clone(),
    )
    .unwrap();
    let a = adapt(&f.models.source, &f.proxy, t, &f.cfg.adapt).unwrap();
    let b = adapt(&f.models.source, &f.proxy, &scrambled, &f.cfg.adapt).unwrap();
    assert_eq!(a.model.digest(), b.model.digest());
    assert_eq!(a.adapter, b.adapter);
    assert_ne!(a.report.records[0].acc_target, b.report.records[0].acc_target);
}

#[test]
fn every_ablation_agrees_at_initialization() {
    let f = fixture(0);
    let mut base = f.cfg.adapt.clone();
    base.repeats = 2;
    let rows = run_ablation_suite(&base, &f.models.source, &f.proxy, &f.domains.target).unwrap();
    assert_eq!(rows.len(), 7);
    let names: Vec<&str> = rows.iter().map(|r| r.ablation.name()).collect();
    assert_eq!(names, ["full", "no_pd", "no_source", "no_target", "prob_level", "kl_syn", "raw_clip"]);
    for r in &rows {
        assert_eq!(r.accuracies, rows[0].accuracies);
    }
}

#[test]
fn report_shape_and_round_trip() {
    let f = fixture(2);
    let res = adapt(&f.models.source, &f.proxy, &f.domains.target, &f.cfg.adapt).unwrap();
    let report = &res.report;
    assert_eq!(report.records.len(), 3);
    assert_eq!(report.epochs(), 2);
    for (k, r) in report.records.iter().enumerate() {
        assert_eq!(r.epoch, k);
        for v in [r.acc_target, r.loss_total, r.loss_mi, r.d_s_t, r.d_o_t, r.d_v_t] {
            assert!(v.is_finite());
        }
    }
    let csv = report.to_csv_string();
    let header = csv.lines().next().unwrap();
    assert_eq!(
        header,
        "epoch,acc_target,acc_proxy_raw,acc_proxy_denoised,loss_total,loss_mi,loss_balance,loss_ref,d_S_t,d_O_t,d_V_t,entropy_ratio,confidence_estimate"
    );
    assert_eq!(header.split(',').count(), REPORT_COLUMNS.len());
    assert_eq!(csv.lines().count(), 4);
    assert_eq!(&RunReport::from_json(&report.to_json()).unwrap(), report);
}

#[test]
fn shifted_domain_ids_do_not_collide() {
    let ds = gen_two_moons(40, 0.1, 0).unwrap();
    let shifted = shift_domain(&ds, &ShiftSpec::identity(2)).unwrap();
    assert!(shifted.sample_ids.iter().all(|id| !ds.sample_ids.contains(id)));
    assert!(ds.concat(&shifted, "both").is_ok());
}

#[test]
fn denoise_degenerate_identities_are_exact() {
    let vil = Matrix::from_rows(&[[0.3, -1.2, 2.0], [1.0, 0.0, -0.5]]).unwrap();
    let src = Matrix::from_rows(&[[4.0, 1.0, -2.0], [0.1, 0.2, 0.3]]).unwrap();
    let tgt = Matrix::from_rows(&[[-1.0, 3.0, 0.5], [2.0, -2.0, 1.0]]).unwrap();
    let raw = softmax_rows(&vil);
    let off = DenoiseConfig { omega: 0.0, ..DenoiseConfig::default() };
    let d = denoise(&vil, &src, &tgt, &off).unwrap();
    assert_eq!(d.l_prime, vil);
    assert_eq!(d.p_prime, raw);
    let same = denoise(&vil, &src, &src, &DenoiseConfig::default()).unwrap();
    assert_eq!(same.l_prime, vil);
    assert_eq!(same.p_prime, raw);
}

#[test]
fn committed_recipe_file_matches_the_code() {
    let text = include_str!("../../../configs/recipe.json");
    assert_eq!(RunConfig::resolve(Some(text), &[]).unwrap(), RunConfig::recipe());
}
