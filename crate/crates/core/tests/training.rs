mod common;

use gaternet::data::{synthetic_dataset, Dataset};
use gaternet::train::{run_phase, Checkpoint, write_metrics_csv, Phase, PhaseInputs, PhaseOutput, TrainConfig};
use gaternet::Error;

use common::tiny_spec;

fn data() -> (Dataset, Dataset) {
    // the tiny spec takes 8 x 8 inputs with 4 classes
    let crop = |d: Dataset| {
        let mut img = Vec::new();
        for i in 0..d.len() {
            for c in 0..3 {
                for y in 0..8 {
                    let row = (c * d.height + y) * d.width;
                    img.extend_from_slice(&d.image(i)[row..row + 8]);
                }
            }
        }
        Dataset::new(3, 8, 8, 4, img, d.labels().to_vec()).unwrap()
    };
    (crop(synthetic_dataset(5, 40, 4).unwrap()), crop(synthetic_dataset(6, 16, 4).unwrap()))
}

fn config(epochs: usize) -> TrainConfig {
    let mut cfg = TrainConfig::with_epochs(epochs);
    cfg.batch_size = 16;
    cfg.seed = 9;
    cfg.lr_schedule = vec![(0, 0.05), (2, 0.01)];
    cfg
}

fn run(phase: Phase, cfg: &TrainConfig, inputs: PhaseInputs) -> gaternet::Result<PhaseOutput> {
    let (train, eval) = data();
    run_phase(phase, &tiny_spec(), cfg, &train, &eval, inputs)
}

fn scratch() -> PhaseInputs<'static> {
    PhaseInputs {
        from_scratch: true,
        ..Default::default()
    }
}

#[test]
fn fixed_seed_gives_identical_runs() {
    let a = run(Phase::Joint, &config(2), scratch()).unwrap();
    let b = run(Phase::Joint, &config(2), scratch()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.checkpoint, b.checkpoint);
    let mut other = config(2);
    other.seed = 10;
    let c = run(Phase::Joint, &other, scratch()).unwrap();
    assert_ne!(a.metrics[0].train_loss, c.metrics[0].train_loss);
}

#[test]
fn resumed_run_matches_uninterrupted_run() {
    let mut saved = Vec::new();
    let mut keep = |_: &gaternet::train::EpochMetrics, ck: &Checkpoint| {
        saved.push(ck.clone());
        Ok(())
    };
    let full = run(
        Phase::Joint,
        &config(3),
        PhaseInputs {
            from_scratch: true,
            on_epoch: Some(&mut keep),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(saved.len(), 3);
    assert_eq!(saved[2], full.checkpoint);
    // interrupted after the first epoch
    let resumed = run(
        Phase::Joint,
        &config(3),
        PhaseInputs {
            resume: Some(&saved[0]),
            from_scratch: true,
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(resumed.metrics, full.metrics);
    assert_eq!(resumed.checkpoint, full.checkpoint);
}

#[test]
fn resume_rejects_changed_recipe_and_phase() {
    let first = run(Phase::Joint, &config(1), scratch()).unwrap();
    let mut changed = config(2);
    changed.lambda = 0.7;
    let resume = PhaseInputs {
        resume: Some(&first.checkpoint),
        from_scratch: true,
        ..Default::default()
    };
    assert!(matches!(run(Phase::Joint, &changed, resume), Err(Error::Config(_))));
    let resume = PhaseInputs {
        resume: Some(&first.checkpoint),
        ..Default::default()
    };
    assert!(run(Phase::PretrainBackbone, &config(2), resume).is_err());
}

#[test]
fn joint_needs_pretrained_parts() {
    assert!(matches!(
        run(Phase::Joint, &config(1), PhaseInputs::default()),
        Err(Error::MissingPrerequisite(_))
    ));
    let bb = run(Phase::PretrainBackbone, &config(1), PhaseInputs::default()).unwrap();
    let gt = run(Phase::PretrainGater, &config(1), PhaseInputs::default()).unwrap();
    // swapped sources are rejected
    let swapped = PhaseInputs {
        backbone: Some(&gt.checkpoint),
        gater: Some(&bb.checkpoint),
        ..Default::default()
    };
    assert!(run(Phase::Joint, &config(1), swapped).is_err());
    let joint = run(
        Phase::Joint,
        &config(1),
        PhaseInputs {
            backbone: Some(&bb.checkpoint),
            gater: Some(&gt.checkpoint),
            ..Default::default()
        },
    )
    .unwrap();
    // the joint phase starts from the pretrained backbone
    let name = "param/backbone.conv0.weight";
    assert!(bb.checkpoint.tensors.contains_key(name));
    assert_ne!(joint.checkpoint.tensors[name], bb.checkpoint.tensors[name]);
    assert!(!gt.checkpoint.tensors.contains_key(name));
}

#[test]
fn ungated_model_trains_jointly_without_pretraining() {
    let (train, eval) = data();
    let out = run_phase(Phase::Joint, &tiny_spec().ungated(), &config(1), &train, &eval, PhaseInputs::default()).unwrap();
    assert_eq!(out.metrics[0].mean_gate_activation, None);
}

#[test]
fn metrics_rows_and_csv() {
    let out = run(Phase::Joint, &config(2), scratch()).unwrap();
    assert_eq!(out.metrics.len(), 2);
    let m = &out.metrics[0];
    assert_eq!((m.epoch, m.phase), (0, Phase::Joint));
    assert!(m.train_loss.is_finite() && (0.0..=1.0).contains(&m.eval_acc));
    assert!(m.mean_gate_activation.is_some_and(|a| (0.0..=1.0).contains(&a)));
    assert_eq!(out.metrics[1].lr, 0.05);
    assert_eq!(out.checkpoint.meta.epoch, 2);
    assert_eq!(out.checkpoint.meta.step, 6);

    let bb = run(Phase::PretrainBackbone, &config(1), PhaseInputs::default()).unwrap();
    assert_eq!(bb.metrics[0].mean_gate_activation, None);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &[out.metrics.clone(), bb.metrics].concat()).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,phase,train_loss,eval_acc,mean_gate_activation,lr,dropout_rate,train_acc");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("0,joint,"));
    assert_eq!(lines[3].split(',').nth(4), Some(""));
}

#[test]
fn degenerate_configs_are_rejected() {
    let mut cfg = config(1);
    cfg.batch_size = 0;
    assert!(run(Phase::Joint, &cfg, scratch()).is_err());
    let mut cfg = config(1);
    cfg.lr_schedule.clear();
    assert!(run(Phase::Joint, &cfg, scratch()).is_err());
}
