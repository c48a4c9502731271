use kdfusion::dataset::{generate, DatasetSplit, Split};
use kdfusion::encoders::EncoderModel;
use kdfusion::evaluation::{evaluate_encoder, evaluate_fusion};
use kdfusion::numerics::Parameters;
use kdfusion::training::{
    distill_students, metrics_csv, run_pipeline, train_fusion, train_teacher, FusionHead,
    PipelineConfig, TrainedEncoder,
};
use kdfusion::{Error, Modality};

fn small(seed: u64) -> (PipelineConfig, DatasetSplit) {
    let mut cfg = PipelineConfig::default().with_seed(seed);
    cfg.data.train_dialogues = 40;
    cfg.data.dev_dialogues = 10;
    cfg.data.test_dialogues = 10;
    cfg.train.teacher_epochs = 4;
    cfg.train.student_epochs = 3;
    cfg.train.fusion_epochs = 3;
    let data = generate(&cfg.data).unwrap();
    (cfg, data)
}

fn dev_max(t: &TrainedEncoder) -> f64 {
    t.history
        .iter()
        .filter(|r| r.split == Split::Dev)
        .map(|r| r.weighted_f1)
        .fold(f64::NEG_INFINITY, f64::max)
}

#[test]
fn zero_epochs_return_initialization() {
    let (mut cfg, data) = small(1);
    cfg.train.teacher_epochs = 0;
    cfg.train.fusion_epochs = 0;
    let a = train_teacher(&data, &cfg).unwrap();
    let b = train_teacher(&data, &cfg).unwrap();
    assert_eq!(a.best_epoch, 0);
    assert_eq!(a.model, b.model);
    assert_eq!(a.history.len(), 2);

    let students = distill_students(&data, &a.model, &cfg).unwrap();
    let refs: Vec<&EncoderModel> = students.iter().map(|s| &s.model).collect();
    let fusion = train_fusion(&data, &a.model, &refs, &cfg).unwrap();
    assert_eq!(fusion.best_epoch, 0);
    match &fusion.model.head {
        FusionHead::Shift(p) => assert_eq!(p.classifier, a.model.head),
        FusionHead::Concat(_) => panic!("default fusion shifts"),
    }
}

#[test]
fn training_is_deterministic() {
    let (cfg, data) = small(2);
    let a = run_pipeline(&data, &cfg).unwrap();
    let b = run_pipeline(&data, &cfg).unwrap();
    assert_eq!(a.teacher.model, b.teacher.model);
    assert_eq!(a.students, b.students);
    assert_eq!(a.fusion, b.fusion);
    assert_eq!(metrics_csv(&a.history()), metrics_csv(&b.history()));
}

#[test]
fn selected_epoch_has_the_best_dev_score() {
    let (cfg, data) = small(3);
    let run = run_pipeline(&data, &cfg).unwrap();
    for t in std::iter::once(&run.teacher).chain(&run.students) {
        assert_eq!(t.best_dev_f1, dev_max(t));
        let dev = evaluate_encoder(&t.model, &data.dev, data.num_classes).unwrap();
        assert!((dev.weighted_f1 - t.best_dev_f1).abs() < 1e-12);
    }
    let fusion_dev = run
        .fusion
        .history
        .iter()
        .filter(|r| r.split == Split::Dev)
        .map(|r| r.weighted_f1)
        .fold(f64::NEG_INFINITY, f64::max);
    assert_eq!(run.fusion.best_dev_f1, fusion_dev);
    let students: Vec<&EncoderModel> = run.students.iter().map(|s| &s.model).collect();
    let report = evaluate_fusion(
        &run.fusion.model,
        &run.teacher.model,
        &students,
        &data.dev,
        4,
    )
    .unwrap();
    assert!((report.weighted_f1 - fusion_dev).abs() < 1e-12);
    assert_eq!(
        report.lambda_histogram.iter().sum::<usize>(),
        data.dev.len()
    );
}

#[test]
fn students_without_distillation_train_like_teachers() {
    let (mut cfg, data) = small(4);
    cfg.kd.alpha = 0.0;
    cfg.kd.beta = 0.0;
    cfg.train.student_epochs = cfg.train.teacher_epochs;
    let teacher = train_teacher(&data, &cfg).unwrap();
    let students = distill_students(&data, &teacher.model, &cfg).unwrap();
    for s in &students {
        let plain = train_teacher(
            &data,
            &PipelineConfig {
                teacher: s.model.modality(),
                ..cfg.clone()
            },
        )
        .unwrap();
        assert_eq!(s.model, plain.model);
    }
}

#[test]
fn distillation_changes_students_but_not_teacher() {
    let (cfg, data) = small(5);
    let teacher = train_teacher(&data, &cfg).unwrap();
    let snapshot = teacher.model.flatten();
    let with_kd = distill_students(&data, &teacher.model, &cfg).unwrap();
    let mut off = cfg.clone();
    off.kd.alpha = 0.0;
    off.kd.beta = 0.0;
    let without = distill_students(&data, &teacher.model, &off).unwrap();
    assert_ne!(with_kd[0].model, without[0].model);
    assert_eq!(teacher.model.flatten(), snapshot);
    assert_eq!(with_kd[0].model.modality(), Modality::Audio);
    assert_eq!(with_kd[1].model.modality(), Modality::Visual);
    assert!(with_kd[0]
        .history
        .iter()
        .all(|r| r.phase == "student_audio"));
}

#[test]
fn fusion_leaves_encoders_untouched() {
    let (cfg, data) = small(6);
    let teacher = train_teacher(&data, &cfg).unwrap();
    let students = distill_students(&data, &teacher.model, &cfg).unwrap();
    let before: Vec<Vec<f64>> = students.iter().map(|s| s.model.flatten()).collect();
    let refs: Vec<&EncoderModel> = students.iter().map(|s| &s.model).collect();
    let fusion = train_fusion(&data, &teacher.model, &refs, &cfg).unwrap();
    assert!(fusion
        .history
        .iter()
        .any(|r| r.epoch == cfg.train.fusion_epochs));
    let after: Vec<Vec<f64>> = students.iter().map(|s| s.model.flatten()).collect();
    assert_eq!(before, after);
}

#[test]
fn concat_head_starts_at_teacher_predictions() {
    let (mut cfg, data) = small(7);
    cfg.fusion.asf = false;
    cfg.train.fusion_epochs = 0;
    let teacher = train_teacher(&data, &cfg).unwrap();
    let students = distill_students(&data, &teacher.model, &cfg).unwrap();
    let refs: Vec<&EncoderModel> = students.iter().map(|s| &s.model).collect();
    let fusion = train_fusion(&data, &teacher.model, &refs, &cfg).unwrap();
    let fused = evaluate_fusion(&fusion.model, &teacher.model, &refs, &data.test, 4).unwrap();
    let alone = evaluate_encoder(&teacher.model, &data.test, 4).unwrap();
    assert_eq!(fused.confusion.counts, alone.confusion.counts);
    assert!(fused.lambda_histogram.is_empty());
}

#[test]
fn configuration_errors() {
    let (cfg, mut data) = small(8);
    let teacher = train_teacher(&data, &cfg).unwrap();
    let wrong = PipelineConfig {
        teacher: Modality::Audio,
        ..cfg.clone()
    };
    assert!(matches!(
        distill_students(&data, &teacher.model, &wrong),
        Err(Error::Config(_))
    ));

    let mut bad = cfg.clone();
    bad.train.batch_size = 1;
    assert!(matches!(train_teacher(&data, &bad), Err(Error::Config(_))));
    bad = cfg.clone();
    bad.fusion.heads = 3;
    assert!(matches!(train_teacher(&data, &bad), Err(Error::Config(_))));

    data.train.clear();
    assert!(matches!(train_teacher(&data, &cfg), Err(Error::Config(_))));
}

#[test]
fn metrics_file_layout() {
    let (cfg, data) = small(9);
    let teacher = train_teacher(&data, &cfg).unwrap();
    let csv = metrics_csv(&teacher.history);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "epoch,phase,split,loss,weighted_f1");
    assert_eq!(lines.len(), 1 + 2 * (cfg.train.teacher_epochs + 1));
    assert!(lines[1].starts_with("0,teacher,train,"));
    assert!(lines[2].starts_with("0,teacher,dev,"));
}

#[test]
fn parameter_counts_are_stable() {
    let (cfg, data) = small(10);
    let t = train_teacher(&data, &cfg).unwrap();
    // text input 16 + 2 speakers → 64 → 32, head 32 → 4
    assert_eq!(
        t.model.parameter_count(),
        18 * 64 + 64 + 64 * 32 + 32 + 32 * 4 + 4
    );
}
