//! Deterministic discrete-event simulation of a grid: workload generation,
//! the event loop tying every component together, and the metrics trace.

mod engine;
pub mod scenario;
pub mod trace;
pub mod workload;

pub use engine::{run, Counts, Engine, SimError, SimOutput, Summary, GRID_CERT_ISSUER};
pub use scenario::{
    ArrivalSpec, BehaviorProfile, ClientSpec, CredentialSpec, DemandSpec, DomainSpec, DriftStep,
    EventSpec, ProviderSpec, Scenario, ScenarioError, SecurityConfig, SecuritySpec, WorkloadSpec,
    SCENARIO_VERSION,
};
pub use trace::{
    JoinStatus, MetricsTrace, TraceError, TraceHeader, TraceLine, TraceRecord, VerdictKind,
    CSV_HEADER,
};
pub use workload::{generate_workload, Arrival};
