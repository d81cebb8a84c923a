mod common;

use common::setup;
use scaf_core::losses::LossConfig;
use scaf_core::trainer::{Prepared, StepRecord};
use scaf_core::{Checkpoint, TrainConfig, Trainer};

fn run(t: &mut Trainer, data: &[Prepared]) -> Vec<StepRecord> {
    t.run_epoch(data, &mut |_| Ok(())).unwrap()
}

fn params(ckpt: &Checkpoint) -> Vec<(String, Vec<f32>)> {
    ckpt.params
        .iter()
        .map(|(k, v)| (k.clone(), v.flatten_all().unwrap().to_vec1::<f32>().unwrap()))
        .collect()
}

#[test]
fn same_seed_same_trajectory() {
    let (mut a, data) = setup(3, 1);
    let (mut b, _) = setup(3, 1);
    let (mut c, _) = setup(4, 1);
    let ra = run(&mut a, &data);
    assert_eq!(ra, run(&mut b, &data));
    assert_ne!(ra, run(&mut c, &data));
    assert_eq!(params(&a.checkpoint().unwrap()), params(&b.checkpoint().unwrap()));
}

#[test]
fn resume_matches_an_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let (mut whole, data) = setup(5, 2);
    let full = whole.fit(&data, None).unwrap();

    let (mut first, _) = setup(5, 1);
    first.fit(&data, Some(dir.path())).unwrap();
    let ckpt = Checkpoint::load(&dir.path().join("final.ckpt")).unwrap();
    assert_eq!(ckpt.epoch, 1);
    let cfg = TrainConfig {
        epochs: 2,
        ..first.config().clone()
    };
    let mut resumed = Trainer::resume(&ckpt, &cfg, &LossConfig::default(), "test").unwrap();
    let data = resumed.prepare(data.into_iter().map(|p| p.sample).collect()).unwrap();
    let end = resumed.fit(&data, Some(dir.path())).unwrap();

    assert_eq!(end.epoch, 2);
    assert_eq!(end.step, full.step);
    assert_eq!(params(&end), params(&full));
    let log = std::fs::read_to_string(dir.path().join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}

#[test]
fn resume_rejects_a_different_config() {
    let (t, _) = setup(1, 1);
    let ckpt = t.checkpoint().unwrap();
    let err = Trainer::resume(&ckpt, t.config(), &LossConfig::default(), "other").err().unwrap();
    assert!(err.to_string().contains("config"));
}

#[test]
fn loss_descends_and_discriminator_stays_frozen() {
    let (mut t, data) = setup(2, 8);
    let image = data[0].sample.image.clone();
    let before = t.discriminator().prior_map(&image).unwrap();
    let mut means = Vec::new();
    for _ in 0..8 {
        let recs = run(&mut t, &data);
        for r in &recs {
            assert!(r.losses.total.is_finite());
            let mut again = r.losses.clone();
            again.recompute_total();
            assert!((again.total - r.losses.total).abs() < 1e-9);
        }
        means.push(recs.iter().map(|r| r.losses.total).sum::<f64>() / recs.len() as f64);
    }
    assert!(means[7] < means[0], "{means:?}");
    assert_eq!(t.discriminator().prior_map(&image).unwrap(), before);
    assert_eq!(data[0].priors, before);
}
