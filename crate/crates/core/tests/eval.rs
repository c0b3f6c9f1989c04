use aple_core::encoders::{init_prompts, EncoderWeights, InitMode, Vocabulary};
use aple_core::eval_harness::{
    emit_report, evaluate, generate_dataset, harmonic_mean, nearest_centroid_accuracy, population_stats, read_report,
    run_pipeline, sweep, write_run, DatasetSpec, ExperimentConfig, PreparedCache, Split, SweepAxis,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Default experiment with one epoch per phase and a one-epoch warmup.
fn quick() -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.warmup.epochs = 1;
    c.train.epochs_stage1_lang = 1;
    c.train.epochs_stage1_vis = 1;
    c.train.epochs_stage2 = 1;
    c
}

fn random_model(spec: &DatasetSpec) -> (ExperimentConfig, EncoderWeights, Vocabulary) {
    let cfg = ExperimentConfig::default();
    let w = EncoderWeights::init(&cfg.model, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
    (cfg, w, Vocabulary::new(spec.class_names().iter().map(String::as_str)))
}

#[test]
fn accuracy_matches_a_recount_of_predictions() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let (cfg, w, vocab) = random_model(&ds.spec);
    for split in [Split::Base, Split::Novel] {
        let r = evaluate(&w, &cfg.model, None, None, &ds, split, &vocab).unwrap();
        let classes = ds.spec.split_classes(split);
        assert_eq!(r.total, ds.eval_split(split).len());
        assert!(r.predictions.iter().all(|p| classes.contains(&p.predicted)));
        let correct = r.predictions.iter().filter(|p| p.predicted == p.label).count();
        assert_eq!(r.correct, correct);
        assert!((r.accuracy - 100.0 * correct as f64 / r.total as f64).abs() < 1e-12);
        for (k, c) in r.per_class.iter().enumerate() {
            let mine: Vec<_> = r.predictions.iter().filter(|p| p.label == classes[k]).collect();
            assert_eq!(c.total, mine.len());
            assert_eq!(c.correct, mine.iter().filter(|p| p.predicted == p.label).count());
        }
    }
}

#[test]
fn zero_length_prompts_reproduce_zero_shot() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let (cfg, w, vocab) = random_model(&ds.spec);
    let empty = init_prompts(&cfg.model, 0, 0, InitMode::RandomGauss, &w.text, &vocab).unwrap();
    let zs = evaluate(&w, &cfg.model, None, None, &ds, Split::Novel, &vocab).unwrap();
    let m0 = evaluate(&w, &cfg.model, Some(&empty), None, &ds, Split::Novel, &vocab).unwrap();
    assert_eq!(zs, m0);
}

#[test]
fn a_single_class_split_is_always_right() {
    let spec = DatasetSpec {
        base: vec![0],
        novel: (1..8).collect(),
        ..DatasetSpec::default()
    };
    let ds = generate_dataset(&spec).unwrap();
    let (cfg, w, vocab) = random_model(&spec);
    let r = evaluate(&w, &cfg.model, None, None, &ds, Split::Base, &vocab).unwrap();
    assert_eq!(r.accuracy, 100.0);
}

#[test]
fn bundled_dataset_is_learnable_from_pixels() {
    let ds = generate_dataset(&DatasetSpec::default()).unwrap();
    let acc = nearest_centroid_accuracy(&ds);
    assert!(acc > 0.6, "{acc}");
}

#[test]
fn report_files_round_trip_and_agree() {
    let out = run_pipeline(&quick(), &mut PreparedCache::new()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_run(&out, dir.path()).unwrap();
    let back = read_report(dir.path().join("report.json")).unwrap();
    assert_eq!(back, out.report);

    let r = &out.report;
    if r.base_accuracy > 0.0 && r.novel_accuracy > 0.0 {
        let hm = harmonic_mean(r.base_accuracy, r.novel_accuracy).unwrap();
        assert!((r.harmonic_mean - hm).abs() <= 1e-9);
    }
    assert!(r.backbone.unchanged);
    assert_eq!(r.steps as usize, out.state.history.len());

    let mut rows = csv::Reader::from_path(dir.path().join("tables.csv")).unwrap();
    let rows: Vec<csv::StringRecord> = rows.records().map(|r| r.unwrap()).collect();
    assert_eq!(rows.len(), 1);
    let num = |i: usize| rows[0][i].parse::<f64>().unwrap();
    assert!((num(2) - r.base_accuracy).abs() < 0.01);
    assert!((num(4) - r.harmonic_mean).abs() < 0.01);

    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), out.state.history.len());
    let meta: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("run_meta.json")).unwrap()).unwrap();
    assert!(meta["runtime_seconds"].as_f64().unwrap() >= 0.0);
    for f in ["config.json", "prompts_init.apnt", "prompts_stage1.apnt", "prompts_stage2.apnt", "backbone.apnt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

#[test]
fn sweeps_are_reproducible_and_share_the_baseline() {
    let base = quick();
    let mut cache = PreparedCache::new();
    let tables: Vec<String> = (0..2)
        .map(|_| {
            let out = sweep(SweepAxis::LambdaD, &[0.0, 0.5], &base, &mut cache).unwrap();
            assert!(out.error.is_none());
            let rows = &out.table.rows;
            assert_eq!(rows.len(), 2);
            assert_eq!(rows[0].zero_shot_base.to_bits(), rows[1].zero_shot_base.to_bits());
            assert_eq!(rows[0].zero_shot_novel.to_bits(), rows[1].zero_shot_novel.to_bits());
            assert_ne!(rows[0].config_fingerprint, rows[1].config_fingerprint);

            let agg = out.table.aggregate.as_ref().unwrap();
            let hm: Vec<f64> = rows.iter().map(|r| r.hm).collect();
            let s = population_stats(&hm).unwrap();
            assert_eq!(agg.n, 2);
            assert_eq!((agg.mean_hm, agg.std_hm), (s.mean, s.std));

            let dir = tempfile::tempdir().unwrap();
            emit_report(&out.report().unwrap(), dir.path()).unwrap();
            let csv = std::fs::read_to_string(dir.path().join("tables.csv")).unwrap();
            assert_eq!(csv.lines().count(), 3);
            csv
        })
        .collect();
    assert_eq!(tables[0], tables[1]);
    // The backbone and dataset were built once for both sweeps.
    assert_eq!(cache.len(), 1);
}

#[test]
fn adaptation_sweep_compares_on_the_same_data() {
    let out = sweep(SweepAxis::AdaptationOnOff, &[0.0, 1.0], &quick(), &mut PreparedCache::new()).unwrap();
    let rows = &out.table.rows;
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0].dataset_fingerprint, rows[1].dataset_fingerprint);
    assert!(out.runs[0].state.history.iter().all(|r| r.stage == 1));
    assert!(out.runs[1].state.history.iter().any(|r| r.stage == 2));
}

#[test]
fn sweep_rejects_single_values_and_bad_axes() {
    let mut cache = PreparedCache::new();
    assert!(sweep(SweepAxis::Sigma, &[0.05], &quick(), &mut cache).is_err());
    assert!(SweepAxis::parse("temperature").is_err());
    let out = sweep(SweepAxis::PromptLength, &[2.0, 2.5], &quick(), &mut cache).unwrap();
    assert_eq!(out.table.rows.len(), 1);
    assert!(out.error.is_some());
}
