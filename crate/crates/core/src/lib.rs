pub mod artifact;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod exits;
pub mod model;
pub mod profile;
pub mod run_config;
pub mod train;

pub use artifact::Provenance;
pub use config::{LayerSpec, ModelConfig, ModelId};
pub use data::{Dataset, NormalizationSpec, Split};
pub use error::{Error, Result};
pub use exits::{ExitOutcome, ExitPolicy};
pub use model::{clamp_rates, Phase, PcModel, PcState, Session, UpdateRates};
pub use train::{joint_loss, run_training, TrainConfig, TrainMode, TrainReport, Trainer};
pub use profile::{count_flops, count_params, CostReport, ExitProfile, FlopModel, ParamBreakdown};
pub use checkpoint::{Checkpoint, CheckpointHeader};
pub use run_config::RunConfig;
