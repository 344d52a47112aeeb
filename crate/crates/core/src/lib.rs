//! Compact allocation plans for guaranteed-delivery display advertising.
//!
//! The crate covers the whole offline/online loop:
//!
//! * [`model`] holds the bipartite supply/demand graph and its feasibility semantics.
//! * [`targeting`] parses boolean targeting expressions and derives eligibility edges.
//! * [`hwm`] generates High Water Mark plans (one serving rate per contract plus an
//!   allocation order) and evaluates them statelessly per impression.
//! * [`dual`] solves the penalized quadratic allocation problem for one dual value per
//!   contract and reconstructs the primal allocation at serving time.
//! * [`feedback`] adjusts reported remaining demand from delivery lag.
//! * [`simulator`] replays impression streams through periodic re-optimization.
//! * [`metrics`] computes underdelivery and smoothness quantiles.
//! * [`io`] reads and writes the line-oriented JSON file formats.

pub mod dual;
pub mod feedback;
pub mod hwm;
pub mod io;
pub mod metrics;
pub mod model;
pub mod serving;
pub mod simulator;
pub mod targeting;

mod count;

pub use model::{
    AllocationGraph, AttributeMap, Contract, FeasibilityReport, FractionalAllocation, ModelError,
    SupplyNode, Violation,
};
pub use serving::ServeDecision;
pub use targeting::TargetingExpr;
