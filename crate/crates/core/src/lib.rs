//! Collegial-ensemble design from finite-width NTK statistics.
//!
//! The crate fits the exponent of the NTK variance law
//! `Var(K) ~ exp(α Σ_l 1/fan_in_l) − 1` by Monte Carlo, then searches the
//! (width `n`, multiplicity `m`) plane for ensembles that are smoothest at a
//! fixed parameter or FLOP budget (primal) or smallest at a fixed predicted
//! variance (dual). The [`dynamics`] module checks the ensemble training
//! claims empirically: the ensemble NTK converges to its mean as `m` grows,
//! and its drift under gradient descent shrinks like `1/(m·n)`.

pub mod dataio;
pub mod dynamics;
pub mod error;
pub mod mc;
pub mod ntk;
pub mod search;
pub mod stats;
pub mod topology;

pub use error::{DataError, DynamicsError, McError, NtkError, SearchError, TopologyError};

pub use mc::{EntrySelector, McEstimate, VarianceModel};
pub use ntk::{EnsembleParams, NtkMatrix, ParamSet};
pub use search::{BaselineSpec, CandidatePoint, EfficiencyMetric, SearchResult};

pub use topology::{LayerKind, LayerSpec, Readout, Topology};
