//! Trust management for multi-domain grids: domain admission, feedback
//! verification, demand-aware provider selection, trust evaluation with
//! time decay, manager election and failover, and a deterministic
//! discrete-event simulator that ties them together.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cluster;
pub mod demand_eval;
pub mod feedback_eval;
pub mod model;
pub mod report;
pub mod security_mgmt;
pub mod sim;
pub mod trust_eval;
pub mod upper_level;

pub use model::{
    DomainId, DomainProfile, Feedback, NodeId, QosVector, SecurityAttributes, SimTime, TrustRecord,
};
