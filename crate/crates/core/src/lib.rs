//! Resource-aware mixed-precision quantization for a single-layer
//! time-series Transformer targeting small FPGAs.
//!
//! The crate is organised along the four-phase workflow:
//!
//! * [`kb`] builds and queries the per-component resource knowledge database.
//! * [`estimate`] sums database entries into a utilization prediction for a
//!   per-component bitwidth assignment.
//! * [`search`] enumerates all assignments, filters by resource thresholds and
//!   ranks the survivors by bitwidth sum.
//! * [`quant`], [`model`], [`train`] and [`data`] validate the selected
//!   assignments with a desk-scale integer-only forecasting model.

pub mod data;
pub mod estimate;
pub mod kb;
pub mod model;
pub mod quant;
pub mod search;
pub mod train;
mod units;

pub use estimate::{estimate, estimate_uniform, BitwidthCombination, EstimateOptions, OverheadRule, ResourceVector};
pub use kb::{ComponentId, KnowledgeDatabase, ResourceKind};
pub use units::{Bitwidth, Tenths};
