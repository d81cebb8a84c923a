use scaf_core::backbone::BackboneConfig;
use scaf_core::dataio::fixture::{self, FixtureConfig};
use scaf_core::losses::LossConfig;
use scaf_core::trainer::Prepared;
use scaf_core::{BankConfig, Discriminator, ModelConfig, TrainConfig, Trainer};

/// Four 64 px splices, a narrow backbone and batches of two.
pub fn setup(seed: u64, epochs: u32) -> (Trainer, Vec<Prepared>) {
    let fx = FixtureConfig {
        size: 64,
        n_samples: 4,
        n_authentic: 4,
        ..Default::default()
    };
    let backbone = BackboneConfig {
        widths: [8, 16, 32, 64],
        ..Default::default()
    };
    let auth = fixture::authentic_images(&fx);
    let samples = fixture::manipulated_samples(&fx).unwrap();
    let md = Discriminator::build(
        &backbone,
        &BankConfig::default(),
        &auth.iter().map(|(_, i)| i).collect::<Vec<_>>(),
        &samples.iter().map(|s| &s.image).collect::<Vec<_>>(),
    )
    .unwrap();
    let model = ModelConfig {
        backbone,
        ..Default::default()
    };
    let cfg = TrainConfig {
        image_size: 64,
        batch_size: 2,
        epochs,
        lr_init: 1e-3,
        ..Default::default()
    };
    let t = Trainer::new(&model, &cfg, &LossConfig::default(), md, seed, "test").unwrap();
    let data = t.prepare(samples).unwrap();
    (t, data)
}
