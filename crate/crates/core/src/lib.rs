pub mod cph;
pub mod emfit;
pub mod error;
pub mod matfun;
pub mod mixing;
pub mod phasetype;
pub mod quad;
pub mod reference;
pub mod special;
pub mod tails;

#[cfg(test)]
mod testutil;

pub use cph::{CphModel, Moment, Route};
pub use emfit::{EmConfig, EmStats, EstepOptions, FitReport, Observation};
pub use error::{Error, Result};
pub use mixing::{GenericDensity, MixingFamily, MixingStats, QuadratureRule};
pub use phasetype::{PhParams, StructureKind, SubIntensity, TailDominant};
pub use tails::{RvdReport, TailSummary};
