mod common;

use std::collections::BTreeMap;

use candle_core::Tensor;
use dida::model::{Checkpoint, Params};
use dida::trainer::{self, checkpoint_path, Trainer, METRICS_FILE};

fn flat(t: &Tensor) -> Vec<f64> {
    t.to_dtype(candle_core::DType::F64).unwrap().flatten_all().unwrap().to_vec1().unwrap()
}

fn student_state(tr: &Trainer) -> BTreeMap<String, Vec<f64>> {
    tr.model().student().iter().map(|(n, v)| (n.clone(), flat(v.as_tensor()))).collect()
}

fn teacher_state(tr: &Trainer) -> BTreeMap<String, Vec<f64>> {
    tr.model().teacher().iter().map(|(n, t)| (n.clone(), flat(t))).collect()
}

#[test]
fn loss_total_recomposes_from_components() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::tiny_config(dir.path());
    let (ld, lr) = (cfg.lambda_d, cfg.lambda_r);
    let (s, t) = common::tiny_data();
    let mut tr = Trainer::new(cfg, s, t).unwrap();
    for _ in 0..5 {
        let r = tr.step(None).unwrap();
        let expected = r.loss_s + r.loss_t + ld * r.loss_d + lr * r.loss_r;
        assert!((r.loss_total - expected).abs() <= 1e-5 * expected.abs().max(1.0), "{r:?}");
        assert!(r.t >= 1 && r.t <= 10);
    }
}

#[test]
fn teacher_receives_no_gradient_and_follows_ema() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.ema_beta = 0.9;
    cfg.dtype = "f64".into();
    let (s, t) = common::tiny_data();
    let mut tr = Trainer::new(cfg, s, t).unwrap();
    let x = common::random_images(2, 16, 16, 5);
    let out = tr.model().forward_teacher(&x).unwrap();
    let grads = out.sum_all().unwrap().backward().unwrap();
    for (name, tensor) in tr.model().teacher().iter() {
        assert!(grads.get(tensor).is_none(), "teacher tensor {name} received a gradient");
    }
    for _ in 0..3 {
        let before = teacher_state(&tr);
        tr.step(None).unwrap();
        let student = student_state(&tr);
        for (name, after) in teacher_state(&tr) {
            let s = &student[&name];
            for ((a, b), s) in after.iter().zip(&before[&name]).zip(s) {
                assert!((a - (0.9 * b + 0.1 * s)).abs() < 1e-12, "{name}");
            }
        }
    }
    // Diffusion encoder and reconstruction head have no teacher copy.
    assert!(tr.model().teacher().iter().all(|(n, _)| n.starts_with("g.") || n.starts_with("h.")));
    assert!(tr.model().teacher().tensor("g.s0.conv.w").is_ok());
}

#[test]
fn resume_matches_uninterrupted_run() {
    let (s, t) = common::tiny_data();
    let full_dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(full_dir.path());
    cfg.iterations = 12;
    cfg.checkpoint_every = 6;
    let full = trainer::train_with(cfg.clone(), s.clone(), t.clone(), None, None).unwrap();
    assert_eq!(full.checkpoints.len(), 2);

    let split_dir = tempfile::tempdir().unwrap();
    let mut first = cfg.clone();
    first.output_dir = split_dir.path().to_path_buf();
    first.iterations = 6;
    trainer::train_with(first, s.clone(), t.clone(), None, None).unwrap();
    let mid = Checkpoint::load(&checkpoint_path(split_dir.path(), 6)).unwrap();
    let mut second = cfg.clone();
    second.output_dir = split_dir.path().to_path_buf();
    trainer::train_with(second, s, t, Some(&mid), None).unwrap();

    let a = std::fs::read(checkpoint_path(full_dir.path(), 12)).unwrap();
    let b = std::fs::read(checkpoint_path(split_dir.path(), 12)).unwrap();
    let (ca, cb) = (Checkpoint::from_bytes(&a).unwrap(), Checkpoint::from_bytes(&b).unwrap());
    assert_eq!(ca.tensors.keys().collect::<Vec<_>>(), cb.tensors.keys().collect::<Vec<_>>());
    for (name, ta) in &ca.tensors {
        assert_eq!(flat(ta), flat(&cb.tensors[name]), "{name}");
    }
    let ma = std::fs::read_to_string(full_dir.path().join(METRICS_FILE)).unwrap();
    let mb = std::fs::read_to_string(split_dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(ma, mb);
}

#[test]
fn resume_refuses_other_architecture() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.iterations = 1;
    cfg.warmup_iters = 1;
    let (s, t) = common::tiny_data();
    let out = trainer::train_with(cfg.clone(), s.clone(), t.clone(), None, None).unwrap();
    let ckpt = Checkpoint::load(&out.final_checkpoint).unwrap();
    let mut other = cfg.clone();
    other.arch.widths = vec![8, 8];
    let err = Trainer::resume(other, &ckpt, s.clone(), t.clone()).err().expect("must refuse");
    assert!(err.to_string().to_lowercase().contains("arch"), "{err}");
    let mut f64_cfg = cfg;
    f64_cfg.dtype = "f64".into();
    assert!(Trainer::resume(f64_cfg, &ckpt, s, t).is_err());
}

#[test]
fn single_iteration_writes_one_checkpoint_and_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.iterations = 1;
    cfg.warmup_iters = 1;
    cfg.checkpoint_every = 1000;
    let (s, t) = common::tiny_data();
    let out = trainer::train_with(cfg, s, t, None, None).unwrap();
    assert_eq!(out.checkpoints, vec![checkpoint_path(dir.path(), 1)]);
    let files: Vec<_> = std::fs::read_dir(dir.path().join("checkpoints")).unwrap().collect();
    assert_eq!(files.len(), 1);
    let metrics = std::fs::read_to_string(&out.metrics).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let rows = dida::evaluation::read_metrics_csv(&metrics).unwrap();
    assert_eq!(rows[0].iteration, 1);
    assert!(dir.path().join("config.json").exists());
}

#[test]
fn baseline_mode_logs_zero_degradation_losses() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.dida = false;
    let (s, t) = common::tiny_data();
    let mut tr = Trainer::new(cfg, s, t).unwrap();
    let r = tr.step(None).unwrap();
    assert_eq!((r.t, r.loss_d, r.loss_r), (0, 0.0, 0.0));
    assert!(!r.csv_row().contains("-0"));
}

#[test]
fn hook_sees_every_batch() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = common::tiny_config(dir.path());
    cfg.iterations = 3;
    let (s, t) = common::tiny_data();
    let mut seen = Vec::new();
    let mut hook = |b: &mut trainer::Batch, it: u64| seen.push((it, b.source_images.len(), b.target_images.len()));
    trainer::train_with(cfg, s, t, None, Some(&mut hook)).unwrap();
    assert_eq!(seen, vec![(1, 2, 2), (2, 2, 2), (3, 2, 2)]);
}
