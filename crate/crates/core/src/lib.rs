//! Kernel-smoothed POD emulation of spatiotemporal flowfields over a design
//! space.
//!
//! The pipeline is: a sliced Latin hypercube design ([`design`]), one
//! snapshot dataset per design point ([`snapshot`]), a POD per case
//! ([`pod`]), kriging of POD coefficients and of indicator weights
//! ([`kriging`]), and the emulator that combines them ([`emulator`]).
//! [`metrics`] holds the evaluation measures.

mod binio;
pub mod design;
pub mod emulator;
pub mod error;
pub mod kriging;
pub mod metrics;
pub mod pod;
pub mod snapshot;

pub use design::{generate_slhd, Cluster, DesignMatrix, DesignRanges};
pub use emulator::{train, EmulatorModel, TrainOptions, WeightScheme, WeightVector};
pub use error::{Error, ParseError, Result};
pub use kriging::{CorrelationParams, KrigingModel, KrigingOptions};
pub use pod::{decompose, PodBasis, PodOptions, Truncation};
pub use snapshot::{read_dataset, synth_flowfield, write_dataset, SnapshotSet, SynthRecipe};
