use mmg_core::dataeng::{synthesize, Dataset, DatasetSpec, Split};
use mmg_core::model::Model;
use mmg_core::orchestrator::{
    collect_records, csv_bytes, read_records, report, run_pipeline, run_stage, supervised_eval,
    train_pipeline, Checkpoint, PipelineSpec, RunConfig, Setting, StageKind, StageSpec, Task,
    RESULTS_CSV, RESULTS_JSON,
};
use mmg_core::{Modality, ModalityMask};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_data() -> Dataset {
    synthesize(&DatasetSpec {
        num_base_classes: 5,
        num_novel_classes: 4,
        examples_per_class: 12,
        novel_examples_per_class: 8,
        unlabeled_pool_size: 24,
        seed: 3,
        ..DatasetSpec::default()
    })
    .unwrap()
    .dataset
}

fn tiny_config() -> RunConfig {
    let mut c = RunConfig::default();
    c.model.width = 16;
    c.model.encoder_depth = 1;
    c.model.encoder_heads = 2;
    c.model.fusion_depth = 1;
    c.model.fusion_heads = 2;
    c.train.batch_size = 8;
    c.train.unimodal_epochs = 1;
    c.train.multimodal_epochs = 2;
    c.train.unsupervised_epochs = 2;
    c.train.meta_episodes = 3;
    c.train.meta_n_way = 3;
    c.train.meta_k_shot = 2;
    c.train.meta_q_queries = 2;
    c.eval.episodes = 4;
    c.eval.n_way = 3;
    c.eval.k_shot = 2;
    c.eval.q_queries = 2;
    c.eval.finetune.steps = 3;
    c
}

const PAIRS: [(Setting, Task); 6] = [
    (Setting::Supervised, Task::Regular),
    (Setting::Supervised, Task::Missing),
    (Setting::Supervised, Task::Zeroshot),
    (Setting::Fewshot, Task::Regular),
    (Setting::Fewshot, Task::Missing),
    (Setting::Fewshot, Task::Zeroshot),
];

#[test]
fn stage_sequences_follow_the_pipeline_table() {
    let train = RunConfig::default().train;
    let expected: [&[&str]; 6] = [
        &["unimodal-CE", "multimodal-CE+align"],
        &["unimodal-CE", "multimodal-CE+align"],
        &["unsupervised-align", "multimodal-CE"],
        &["unimodal-CE", "multimodal-CE+align", "meta-proto"],
        &["unimodal-CE", "multimodal-CE+align", "meta-proto"],
        &["unimodal-CE", "multimodal-CE+align", "meta-proto"],
    ];
    for ((setting, task), want) in PAIRS.iter().zip(expected) {
        let spec = PipelineSpec::new(*setting, *task, &train).unwrap();
        assert_eq!(spec.labels(), want, "{setting} {task}");
        for st in &spec.stages {
            assert_eq!(st.split, st.kind.split());
        }
        if let Some(meta) = spec
            .stages
            .iter()
            .find(|s| s.kind == StageKind::MultimodalMetaTrain)
        {
            assert_eq!(meta.meta_task, Some(*task));
        }
    }
    let zs = PipelineSpec::new(Setting::Supervised, Task::Zeroshot, &train).unwrap();
    assert_eq!(zs.labeled_mask, train.zeroshot_train_mask);
    assert_eq!(zs.stages[1].mask, train.zeroshot_train_mask);
    assert!(!zs.stages[1].align);
}

#[test]
fn ablation_flags_remove_stages() {
    let mut train = RunConfig::default().train;
    train.use_align = false;
    train.use_proto = false;
    let zs = PipelineSpec::new(Setting::Supervised, Task::Zeroshot, &train).unwrap();
    assert_eq!(zs.labels(), ["multimodal-CE"]);
    let fs = PipelineSpec::new(Setting::Fewshot, Task::Regular, &train).unwrap();
    assert_eq!(fs.labels(), ["unimodal-CE", "multimodal-CE"]);
}

#[test]
fn fewshot_zeroshot_run_logs_three_stages_and_task_rows() {
    let ds = tiny_data();
    let (rec, _) = run_pipeline(Setting::Fewshot, Task::Zeroshot, &ds, &tiny_config(), 1).unwrap();
    let labels: Vec<&str> = rec.stages.iter().map(|s| s.label.as_str()).collect();
    assert_eq!(labels, ["unimodal-CE", "multimodal-CE+align", "meta-proto"]);
    assert_eq!(rec.rows.len(), 6);
    for row in &rec.rows {
        assert!(Task::Zeroshot.allows(row.train_mask, row.test_mask));
        assert!((0.0..=1.0).contains(&row.value));
        assert_eq!(row.n, 4);
    }
    assert_eq!(rec.config_hash, tiny_config().hash());
}

#[test]
fn supervised_zeroshot_never_reads_labeled_heldout_modality() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let (rec, _) = run_pipeline(Setting::Supervised, Task::Zeroshot, &ds, &cfg, 2).unwrap();
    let train_mask = cfg.train.zeroshot_train_mask;
    let [unsup, labeled] = &rec.stages[..] else {
        panic!("expected two stages")
    };
    assert_eq!(unsup.access.splits, [Split::Unlabeled]);
    assert!(unsup.access.labeled_modalities.is_empty());
    assert_eq!(unsup.access.unlabeled_modalities, ModalityMask::ALL);
    assert_eq!(labeled.access.splits, [Split::BaseTrain]);
    assert_eq!(labeled.access.labeled_modalities, train_mask);
    assert!(labeled.access.unlabeled_modalities.is_empty());
    for row in &rec.rows {
        assert_eq!(row.train_mask, train_mask);
        assert!(!row.test_mask.intersects(train_mask));
    }
}

#[test]
fn meta_train_never_touches_novel_examples() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let spec = PipelineSpec::new(Setting::Fewshot, Task::Missing, &cfg.train).unwrap();
    let (_, logs) = train_pipeline(&spec, &ds, &cfg, 4).unwrap();
    for log in &logs {
        assert!(!log.access.splits.contains(&Split::Novel), "{}", log.label);
        assert!(
            !log.access.splits.contains(&Split::BaseTest),
            "{}",
            log.label
        );
    }
    let meta = logs.last().unwrap();
    assert_eq!(meta.kind, StageKind::MultimodalMetaTrain);
    assert_eq!(meta.access.splits, [Split::BaseTrain]);
    assert_eq!(meta.steps, 3);
}

fn fresh_model(ds: &Dataset, cfg: &RunConfig) -> Model {
    let mut m = Model::new(cfg.model.model_config(ds).unwrap(), 7).unwrap();
    m.reset_fusion(8).unwrap();
    m
}

#[test]
fn zero_lambda_reproduces_flag_off_bit_for_bit() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let run = |align: bool, lambda: f64| {
        let mut cfg = cfg;
        cfg.train.lambda_align = lambda;
        let mut model = fresh_model(&ds, &cfg);
        let stage = StageSpec {
            align,
            ..StageSpec::new(StageKind::MultimodalSupervisedTrain, ModalityMask::ALL)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let log = run_stage(&stage, &mut model, &ds, &cfg.train, &mut rng).unwrap();
        (log, model)
    };
    let (on, m_on) = run(true, 0.0);
    let (off, m_off) = run(false, 0.0);
    assert_eq!(on.label, "multimodal-CE+align");
    assert_eq!(off.label, "multimodal-CE");
    let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&on.epoch_losses), bits(&off.epoch_losses));
    assert!(m_on.params.bit_eq(&m_off.params));

    let (weighted, _) = run(true, 0.5);
    assert_ne!(bits(&weighted.epoch_losses), bits(&off.epoch_losses));
}

#[test]
fn unsupervised_alignment_loss_decreases() {
    let ds = tiny_data();
    let mut cfg = tiny_config();
    cfg.train.unsupervised_epochs = 6;
    let mut model = fresh_model(&ds, &cfg);
    let stage = StageSpec::new(StageKind::MultimodalUnsupervisedPretrain, ModalityMask::ALL);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let log = run_stage(&stage, &mut model, &ds, &cfg.train, &mut rng).unwrap();
    assert_eq!(log.epoch_losses.len(), 6);
    assert!(log.final_loss < log.initial_loss, "{:?}", log.epoch_losses);
}

#[test]
fn wrong_split_for_kind_is_an_error() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let mut model = fresh_model(&ds, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for (kind, split) in [
        (StageKind::MultimodalUnsupervisedPretrain, Split::BaseTrain),
        (StageKind::MultimodalSupervisedTrain, Split::Novel),
        (StageKind::UnimodalSupervisedPretrain, Split::Unlabeled),
    ] {
        let stage = StageSpec {
            split,
            ..StageSpec::new(kind, ModalityMask::ALL)
        };
        assert!(run_stage(&stage, &mut model, &ds, &cfg.train, &mut rng).is_err());
    }
    let meta = StageSpec {
        split: Split::Novel,
        meta_task: Some(Task::Regular),
        ..StageSpec::new(StageKind::MultimodalMetaTrain, ModalityMask::ALL)
    };
    assert!(run_stage(&meta, &mut model, &ds, &cfg.train, &mut rng).is_err());
}

#[test]
fn trainable_flags_are_restored_after_a_stage() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let mut model = fresh_model(&ds, &cfg);
    let before = model.clone();
    let stage = StageSpec::new(StageKind::UnimodalSupervisedPretrain, ModalityMask::ALL);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    run_stage(&stage, &mut model, &ds, &cfg.train, &mut rng).unwrap();
    for (a, b) in before.params.entries().iter().zip(model.params.entries()) {
        assert_eq!(a.trainable, b.trainable);
        // unimodal pretraining leaves the fusion module alone
        if a.name.starts_with("fusion.") || a.name.starts_with("mlpfuse.") {
            assert!(a.tensor.bit_eq(&b.tensor), "{}", a.name);
        }
    }
}

#[test]
fn regular_and_missing_share_one_checkpoint() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let (reg, m_reg) = run_pipeline(Setting::Supervised, Task::Regular, &ds, &cfg, 9).unwrap();
    let (mis, m_mis) = run_pipeline(Setting::Supervised, Task::Missing, &ds, &cfg, 9).unwrap();
    assert!(m_reg.params.bit_eq(&m_mis.params));
    assert_eq!(reg.rows.len(), 1);
    assert_eq!(mis.rows.len(), 3);
    for row in reg.rows.iter().chain(&mis.rows) {
        assert_eq!(row.train_mask, ModalityMask::ALL);
        let direct = supervised_eval(&m_reg, &ds, Split::BaseTest, row.test_mask).unwrap();
        assert_eq!(direct.accuracy.to_bits(), row.value.to_bits());
    }
}

#[test]
fn supervised_eval_memorizes_a_separable_toy() {
    let mut spec = DatasetSpec {
        num_base_classes: 3,
        num_novel_classes: 2,
        examples_per_class: 8,
        novel_examples_per_class: 4,
        unlabeled_pool_size: 4,
        class_separation: 3.0,
        class_spread: 0.0,
        clip_noise: 0.0,
        ..DatasetSpec::default()
    };
    for m in Modality::ALL {
        spec.modality_mut(m).noise = 0.0;
    }
    let ds = synthesize(&spec).unwrap().dataset;
    let mut cfg = tiny_config();
    cfg.train.lr = 1e-2;
    cfg.train.multimodal_epochs = 30;
    cfg.train.drop_p = 0.0;
    let mut model = fresh_model(&ds, &cfg);
    let stage = StageSpec::new(StageKind::MultimodalSupervisedTrain, ModalityMask::ALL);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let log = run_stage(&stage, &mut model, &ds, &cfg.train, &mut rng).unwrap();
    let r = supervised_eval(&model, &ds, Split::BaseTrain, ModalityMask::ALL).unwrap();
    assert_eq!(r.accuracy, 1.0, "losses {:?}", log.epoch_losses);
    assert_eq!(r.ci95, 0.0);
}

#[test]
fn supervised_eval_rejects_empty_and_unlabeled_splits() {
    let mut ds = tiny_data();
    let model = fresh_model(&ds, &tiny_config());
    assert!(supervised_eval(&model, &ds, Split::Novel, ModalityMask::ALL).is_err());
    assert!(supervised_eval(&model, &ds, Split::Unlabeled, ModalityMask::ALL).is_err());
    ds.examples.retain(|e| e.split != Split::BaseTest);
    assert!(supervised_eval(&model, &ds, Split::BaseTest, ModalityMask::ALL).is_err());
}

#[test]
fn report_writes_one_csv_row_per_eval_row() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let (r0, _) = run_pipeline(Setting::Supervised, Task::Regular, &ds, &cfg, 0).unwrap();
    let (r1, _) = run_pipeline(Setting::Supervised, Task::Regular, &ds, &cfg, 1).unwrap();

    let one = String::from_utf8(csv_bytes(std::slice::from_ref(&r0)).unwrap()).unwrap();
    let lines: Vec<&str> = one.lines().collect();
    assert_eq!(
        lines[0],
        "setting,task,train_mask,test_mask,metric,value,ci,seed,config_hash"
    );
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("supervised,regular,video+audio+imu,video+audio+imu,top1,"));

    let dir = tempfile::tempdir().unwrap();
    let records = vec![r0.clone(), r1.clone()];
    report(&records, dir.path()).unwrap();
    let csv = std::fs::read_to_string(dir.path().join(RESULTS_CSV)).unwrap();
    let seeds: Vec<&str> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(7).unwrap())
        .collect();
    assert_eq!(seeds, ["0", "1"]);
    assert_eq!(
        read_records(&dir.path().join(RESULTS_JSON)).unwrap(),
        records
    );

    // byte-stable for identical inputs
    let again = tempfile::tempdir().unwrap();
    report(&records, again.path()).unwrap();
    assert_eq!(
        std::fs::read(again.path().join(RESULTS_CSV)).unwrap(),
        csv.as_bytes()
    );
    assert!(report(&[], again.path()).is_err());

    let nested = dir.path().join("a/b");
    report(std::slice::from_ref(&r1), &nested).unwrap();
    let all = collect_records(dir.path()).unwrap();
    assert_eq!(all.len(), 3);
    assert!(all.windows(2).all(|w| w[0].seed <= w[1].seed));
}

#[test]
fn checkpoint_roundtrip_is_bit_exact() {
    let ds = tiny_data();
    let cfg = tiny_config();
    let mut model = fresh_model(&ds, &cfg);
    let id = model.params.ids().last().unwrap();
    model.params.set_trainable(id, false);
    let ck = Checkpoint::new(model, cfg, Setting::Fewshot, Task::Missing, 3, None);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.mmgc");
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert!(back.model.params.bit_eq(&ck.model.params));
    assert_eq!(back.header, ck.header);
    assert!(!back.model.params.is_trainable(id));
    assert_eq!(back.header.config_hash, cfg.hash());

    let bytes = std::fs::read(&path).unwrap();
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad, &path).is_err());
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1], &path).is_err());
    let mut long = bytes.clone();
    long.push(0);
    assert!(Checkpoint::from_bytes(&long, &path).is_err());
}

#[test]
fn identical_config_and_seed_give_identical_csv() {
    let ds = tiny_data();
    let cfg = tiny_config();
    for (setting, task) in [
        (Setting::Fewshot, Task::Missing),
        (Setting::Supervised, Task::Zeroshot),
    ] {
        let a = run_pipeline(setting, task, &ds, &cfg, 11).unwrap().0;
        let b = run_pipeline(setting, task, &ds, &cfg, 11).unwrap().0;
        assert_eq!(
            csv_bytes(std::slice::from_ref(&a)).unwrap(),
            csv_bytes(std::slice::from_ref(&b)).unwrap()
        );
        assert_eq!(a.stages, b.stages);
    }
}

#[test]
fn restricted_modalities_give_a_unimodal_baseline() {
    let ds = tiny_data();
    let mut cfg = tiny_config();
    let audio = ModalityMask::single(Modality::Audio);
    cfg.train.modalities = audio;
    let (rec, _) = run_pipeline(Setting::Fewshot, Task::Regular, &ds, &cfg, 0).unwrap();
    for st in &rec.stages {
        assert_eq!(st.access.labeled_modalities, audio, "{}", st.label);
    }
    assert_eq!(rec.rows.len(), 1);
    assert_eq!(
        (rec.rows[0].train_mask, rec.rows[0].test_mask),
        (audio, audio)
    );
    assert!(PipelineSpec::new(Setting::Fewshot, Task::Missing, &cfg.train).is_err());
}

#[test]
fn frozen_encoders_only_train_in_the_first_stage() {
    let ds = tiny_data();
    let mut cfg = tiny_config();
    cfg.train.freeze_encoders = true;
    let spec = PipelineSpec::new(Setting::Supervised, Task::Zeroshot, &cfg.train).unwrap();
    assert!(spec.stages[0].train_encoders);
    assert!(!spec.stages[1].train_encoders);

    let mut first = spec.clone();
    first.stages.truncate(1);
    let (after_first, _) = train_pipeline(&first, &ds, &cfg, 0).unwrap();
    let (after_all, _) = train_pipeline(&spec, &ds, &cfg, 0).unwrap();
    let fresh = Model::new(cfg.model.model_config(&ds).unwrap(), 0).unwrap();
    let enc = |m: &Model| {
        m.params
            .entries()
            .iter()
            .filter(|e| e.name.starts_with("enc."))
            .map(|e| e.tensor.clone())
            .collect::<Vec<_>>()
    };
    assert_ne!(enc(&fresh), enc(&after_first));
    assert_eq!(enc(&after_first), enc(&after_all));
}
