//! Training on the shipped demo configuration.

use std::path::PathBuf;

use loca::calibrate::Policy;
use loca::experiment::ExperimentConfig;
use loca::nn::{distill_student, gen_synthetic, train_teacher};

fn demo() -> ExperimentConfig {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../configs/demo.toml");
    ExperimentConfig::load(&path).unwrap()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Mean loss over the last tenth of epochs is below the first tenth.
fn descends(curve: &[f64]) -> bool {
    let n = (curve.len() / 10).max(1);
    mean(&curve[curve.len() - n..]) < mean(&curve[..n])
}

#[test]
fn losses_descend_under_every_policy() {
    let cfg = demo();
    let data = gen_synthetic(&cfg.dataset).unwrap();
    let (teacher, tm) =
        train_teacher(&data, &cfg.teacher.hidden, &cfg.teacher_train_config()).unwrap();
    assert!(descends(&tm.loss_curve), "{:?}", tm.loss_curve);

    for policy in Policy::ALL {
        let tc = cfg.student_train_config(policy, cfg.calibration.alpha, cfg.seeds[0]);
        let (_, m) = distill_student(&data, &teacher, &cfg.student.hidden, &tc).unwrap();
        assert!(descends(&m.loss_curve), "{policy}: {:?}", m.loss_curve);
        assert_eq!(m.violations, 0);
        assert!(m.test_top1 > 1.0 / cfg.dataset.classes as f64);
    }
}
