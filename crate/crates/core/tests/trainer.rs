mod common;

use common::{tiny_data, tiny_models};
use emoshield::objectives::LossWeights;
use emoshield::surgery::ProjectionMode;
use emoshield::trainer::{
    fine_tune, lr_schedule, resume, sgd_step, Checkpoint, StepKind, TrainConfig, Trainer,
};
use emoshield::graph::GradientMap;
use emoshield::Error;

fn cfg() -> TrainConfig {
    TrainConfig {
        eta0: 0.02,
        epochs: 3,
        batch: 2,
        period: 3,
        tau: 3,
        seed: 7,
        ..TrainConfig::default()
    }
}

fn bytes(c: &Checkpoint) -> Vec<u8> {
    c.to_file().to_bytes()
}

#[test]
fn lr_schedule_examples() {
    assert_eq!(lr_schedule(1, 0.5).unwrap(), 0.5);
    assert_eq!(lr_schedule(4, 0.5).unwrap(), 0.25);
    assert!((lr_schedule(100, 4e-6).unwrap() - 4e-7).abs() < 1e-20);
    assert!(lr_schedule(0, 0.5).is_err());
}

#[test]
fn sgd_step_examples() {
    let models = tiny_models(0);
    let mut params = models.score.params().clone();
    let before = params.flat();
    let ones = GradientMap::from_layers(
        before.iter().map(|(id, v)| (id.to_string(), vec![1.0; v.len()])).collect(),
    );
    sgd_step(&mut params, &ones, 0.1).unwrap();
    for ((_, a), (_, b)) in before.iter().zip(params.flat().iter()) {
        assert!(a.iter().zip(b).all(|(x, y)| (x - 0.1 - y).abs() < 1e-15));
    }
    let bad = GradientMap::from_layers(
        before.iter().map(|(id, v)| (id.to_string(), vec![f64::NAN; v.len()])).collect(),
    );
    assert!(matches!(sgd_step(&mut params, &bad, 0.1), Err(Error::NonFinite(_))));
}

#[test]
fn runs_are_deterministic() {
    let (models, data, c) = (tiny_models(1), tiny_data(5, 1), cfg());
    let (a, la) = fine_tune(&c, &data, &models).unwrap();
    let (b, lb) = fine_tune(&c, &data, &models).unwrap();
    assert_eq!(bytes(&a), bytes(&b));
    assert_eq!(la.to_csv(), lb.to_csv());
    assert_eq!(a.step, 9);
    assert_eq!(la.rows.len(), 9);
    let kinds: Vec<StepKind> = la.rows.iter().map(|r| r.kind).collect();
    assert_eq!(kinds[2], StepKind::Score);
    assert_eq!(kinds[0], StepKind::Adversarial);
}

#[test]
fn resume_is_bit_exact() {
    let (models, data, c) = (tiny_models(2), tiny_data(5, 2), cfg());
    let (full, full_log) = fine_tune(&c, &data, &models).unwrap();
    let tr = Trainer::new(&c, &data, &models).unwrap();
    let (half, first) = tr.run(tr.initial().unwrap(), Some(4), &mut |_| Ok(())).unwrap();
    assert_eq!(half.step, 4);
    let reloaded = Checkpoint::from_file(
        &emoshield::checkpoint::CheckpointFile::from_bytes(&bytes(&half)).unwrap(),
    )
    .unwrap();
    let (done, rest) = resume(reloaded, &c, &data, &models, None).unwrap();
    assert_eq!(bytes(&done), bytes(&full));
    let mut joined = first;
    joined.extend(rest).unwrap();
    assert_eq!(joined.to_csv(), full_log.to_csv());
}

#[test]
fn resume_rejects_changed_config() {
    let (models, data, c) = (tiny_models(3), tiny_data(4, 3), cfg());
    let tr = Trainer::new(&c, &data, &models).unwrap();
    let (half, _) = tr.run(tr.initial().unwrap(), Some(2), &mut |_| Ok(())).unwrap();
    let mut changed = c.clone();
    changed.weights.angular = 0.7;
    let err = resume(half, &changed, &data, &models, None).err().unwrap();
    assert!(matches!(err, Error::HashMismatch { .. }));
}

#[test]
fn epoch_callback_fires_once_per_epoch() {
    let (models, data, c) = (tiny_models(4), tiny_data(5, 4), cfg());
    let tr = Trainer::new(&c, &data, &models).unwrap();
    assert_eq!(tr.steps_per_epoch(), 3);
    let mut seen = Vec::new();
    tr.run(tr.initial().unwrap(), None, &mut |ck| {
        seen.push(ck.step);
        Ok(())
    })
    .unwrap();
    assert_eq!(seen, vec![3, 6, 9]);
}

#[test]
fn zero_weights_leave_parameters_unchanged() {
    let (models, data) = (tiny_models(5), tiny_data(4, 5));
    let c = TrainConfig {
        weights: LossWeights::zero(),
        ..cfg()
    };
    let (ckpt, _) = fine_tune(&c, &data, &models).unwrap();
    assert_eq!(ckpt.score.params(), models.score.params());
}

#[test]
fn only_the_score_network_changes() {
    let (models, data, c) = (tiny_models(6), tiny_data(4, 6), cfg());
    let before = models.clone();
    let (ckpt, _) = fine_tune(&c, &data, &models).unwrap();
    assert_eq!(models, before);
    assert_ne!(ckpt.score.params(), models.score.params());
    let ids = ckpt.score.layer_ids();
    assert_eq!(ckpt.ledger.a.moments().ids(), ids);
    assert_eq!(ckpt.ledger.e.moments().ids(), ids);
}

#[test]
fn projection_off_and_minibatch_modes_run() {
    let (models, data) = (tiny_models(7), tiny_data(4, 7));
    for mode in [ProjectionMode::Off, ProjectionMode::Minibatch, ProjectionMode::Ema] {
        let c = TrainConfig {
            projection: mode,
            ..cfg()
        };
        let (_, log) = fine_tune(&c, &data, &models).unwrap();
        for r in &log.rows {
            assert!(r.grad_norm_update.is_finite());
            assert!((0.0..=1.0).contains(&r.conflict_rate));
        }
    }
}

#[test]
fn metrics_cover_both_streams_on_every_layer() {
    let (models, data, c) = (tiny_models(8), tiny_data(4, 8), cfg());
    let (ckpt, log) = fine_tune(&c, &data, &models).unwrap();
    let layers = ckpt.score.layer_ids();
    assert_eq!(log.layers, layers);
    for r in log.rows.iter().filter(|r| r.kind == StepKind::Adversarial) {
        assert_eq!(r.layer_conflict.len(), layers.len());
        assert!(r.grad_norm_a > 0.0 && r.grad_norm_e > 0.0);
        let mean = (r.conflict_rate_a + r.conflict_rate_e) / 2.0;
        assert!((mean - r.conflict_rate).abs() < 1e-12);
    }
    let header = log.to_csv().lines().next().unwrap().to_string();
    assert!(header.starts_with("step,kind,lr,angular,emotion,lpips,l1,smooth,score,conflict_rate"));
    assert_eq!(header.split(',').count(), 16 + layers.len());
}

#[test]
fn invalid_configs_are_rejected() {
    let (models, data) = (tiny_models(9), tiny_data(4, 9));
    let bad = [
        TrainConfig { eta0: 0.0, ..cfg() },
        TrainConfig { batch: 0, ..cfg() },
        TrainConfig { lambda: 1.0, ..cfg() },
        TrainConfig { tau: 11, ..cfg() },
    ];
    for c in &bad {
        assert!(Trainer::new(c, &data, &models).is_err());
    }
}

#[test]
fn checkpoint_file_roundtrip() {
    let (models, data, c) = (tiny_models(10), tiny_data(4, 10), cfg());
    let (ckpt, _) = fine_tune(&c, &data, &models).unwrap();
    let dir = std::env::temp_dir().join(format!("emoshield-ckpt-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("c.ckpt");
    ckpt.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(bytes(&back), bytes(&ckpt));
    std::fs::remove_dir_all(&dir).unwrap();
}
