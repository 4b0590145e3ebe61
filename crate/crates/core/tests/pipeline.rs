use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use paraknow_core::inject::InitStrategy;
use paraknow_core::pipeline::{artifacts, run_pipeline, run_stages, PipelineConfig, Stage, StudentPretrain};
use paraknow_core::tinylm::ModelConfig;
use paraknow_core::train::{Hyperparams, TaskKind, TaskSpec};
use paraknow_core::Error;

fn tiny(dir: &Path) -> PipelineConfig {
    let mut cfg = PipelineConfig::reference(dir);
    cfg.teacher = ModelConfig {
        vocab_size: 21,
        max_seq_len: 10,
        num_layers: 3,
        hidden_dim: 16,
        num_heads: 2,
        ffn_dim: 32,
        seed: 3,
    };
    cfg.student = ModelConfig {
        num_layers: 2,
        hidden_dim: 8,
        ffn_dim: 16,
        seed: 4,
        ..cfg.teacher.clone()
    };
    cfg.teacher_hyperparams = Hyperparams {
        epochs: 2,
        batch_size: 32,
        learning_rate: 3e-3,
        ..Default::default()
    };
    cfg.student_pretrain = Some(StudentPretrain {
        task: TaskSpec::new(TaskKind::SortDigits, 3).unwrap(),
        n_train: 64,
        hyperparams: Hyperparams {
            epochs: 1,
            batch_size: 32,
            learning_rate: 3e-3,
            ..Default::default()
        },
        task_seed: 1,
    });
    cfg.task = TaskSpec::new(TaskKind::Copy, 3).unwrap();
    cfg.n_train = 200;
    cfg.n_finetune = 64;
    cfg.n_eval = 20;
    cfg.k = 5;
    cfg.rank = 2;
    cfg.finetune_hyperparams = Hyperparams {
        epochs: 1,
        batch_size: 16,
        learning_rate: 3e-3,
        ..Default::default()
    };
    cfg.baselines = vec![
        InitStrategy::GaussianZero { seed: 1 },
        InitStrategy::RandomSubmatrix { seed: 2 },
        InitStrategy::LoraResidual,
    ];
    cfg
}

/// Every artifact except those that record wall-clock time.
fn artifact_bytes(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().to_string();
        let timed = name == artifacts::TIMINGS
            || name == artifacts::REPORT
            || name == artifacts::CONFIG
            || (name.ends_with(".json") && fs::read_to_string(&path).unwrap().contains("wall_clock_secs"));
        if !timed {
            out.insert(name, fs::read(&path).unwrap());
        }
    }
    out
}

#[test]
fn identical_configs_give_identical_artifacts() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = run_pipeline(&tiny(a.path())).unwrap();
    let rb = run_pipeline(&tiny(b.path())).unwrap();

    let fa = artifact_bytes(a.path());
    assert!(fa.contains_key(artifacts::TEACHER));
    assert!(fa.contains_key(&artifacts::finetuned("random_submatrix")));
    assert!(fa.contains_key(artifacts::HEATMAP));
    assert_eq!(fa, artifact_bytes(b.path()));

    let mut ra_cmp = ra.clone();
    ra_cmp.config.output_dir = rb.config.output_dir.clone();
    assert_eq!(ra_cmp.deterministic_json(), rb.deterministic_json());
    assert_eq!(ra.timings.len(), 8, "report sees timings of the stages before it");

    // report contract
    assert_eq!(ra.arms.len(), 4);
    assert_eq!(ra.transfer_arm, "paper_default");
    for tag in ["gaussian_zero", "random_submatrix", "lora_residual"] {
        let diff = ra.arms["paper_default"].accuracy - ra.arms[tag].accuracy;
        assert_eq!(ra.accuracy_differences[tag], diff);
    }
    assert_eq!(ra.seed_sample_ids.len(), 5);
    assert_eq!(ra.layer_scores.len(), 3);
    assert_eq!(ra.layer_mapping.len(), 2);
    assert!(ra.extraction_scores.values().all(|s| (0.0..=1.0 + 1e-12).contains(&s.coverage)));
    let pd = &ra.arms["paper_default"];
    let gz = &ra.arms["gaussian_zero"];
    assert_eq!(pd.initial_loss, gz.initial_loss, "both arms start from the base model");
    assert!(!a.path().join(artifacts::PARTIAL).exists());

    let on_disk: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(a.path().join(artifacts::REPORT)).unwrap()).unwrap();
    assert_eq!(on_disk["arms"]["gaussian_zero"]["accuracy"].as_f64().unwrap(), gz.accuracy);
}

#[test]
fn staged_run_equals_single_run() {
    let (one, two) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let single = run_pipeline(&tiny(one.path())).unwrap();
    assert!(run_stages(&tiny(two.path()), Stage::Teacher, Stage::Plan).unwrap().is_none());
    let staged = run_stages(&tiny(two.path()), Stage::Inject, Stage::Report).unwrap().unwrap();
    assert_eq!(artifact_bytes(one.path()), artifact_bytes(two.path()));
    assert_eq!(single.arms, staged.arms);
    assert_eq!(single.extraction_scores, staged.extraction_scores);
}

#[test]
fn pretrained_teacher_checkpoint_is_reused() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = run_pipeline(&tiny(a.path())).unwrap();
    let mut cfg = tiny(b.path());
    cfg.teacher_checkpoint = Some(a.path().join(artifacts::TEACHER));
    let second = run_pipeline(&cfg).unwrap();
    assert_eq!(second.arms, first.arms);
    assert_eq!(
        fs::read(a.path().join(artifacts::finetuned("paper_default"))).unwrap(),
        fs::read(b.path().join(artifacts::finetuned("paper_default"))).unwrap()
    );
    assert!(!b.path().join(artifacts::TEACHER_LOG).exists());
}

#[test]
fn failures_name_the_stage_and_leave_a_marker() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("teacher.bin");
    fs::write(&bogus, b"not a checkpoint").unwrap();
    let mut cfg = tiny(&dir.path().join("out"));
    cfg.teacher_checkpoint = Some(bogus);
    let err = run_pipeline(&cfg).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, source } if stage == "teacher" && matches!(**source, Error::Format { .. })), "{err}");
    let marker: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("out").join(artifacts::PARTIAL)).unwrap()).unwrap();
    assert_eq!(marker["stage"], "teacher");

    // Later stages without their inputs fail as well, naming themselves.
    let fresh = tempfile::tempdir().unwrap();
    let err = run_stages(&tiny(fresh.path()), Stage::Sensitivity, Stage::Report).unwrap_err();
    assert!(matches!(&err, Error::Stage { stage, .. } if stage == "sensitivity"), "{err}");
}

#[test]
fn invalid_configs_are_refused_up_front() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(dir.path());
    cfg.k = 0;
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(dir.path());
    cfg.teacher_checkpoint = Some(dir.path().join("missing.pkt"));
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
    let mut cfg = tiny(dir.path());
    cfg.task = TaskSpec::new(TaskKind::Copy, 5).unwrap();
    assert!(matches!(run_pipeline(&cfg), Err(Error::Config(_))));
}
