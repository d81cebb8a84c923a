pub mod backbone;
pub mod checkpoint;
pub mod config;
pub mod dataio;
pub mod discriminator;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod modulation;
pub mod nn;
pub mod optim;
pub mod raster;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::RunConfig;
pub use dataio::{Label, Sample, Split, TriStateMask};
pub use discriminator::{BankConfig, Discriminator, PriorPair};
pub use error::{Error, Result};
pub use metrics::{EvalResult, Predictor, RobustnessTable};
pub use model::{ModelConfig, Scaf};
pub use trainer::{TrainConfig, Trainer};
