//! Inputs shared by the benchmarks.

use std::path::PathBuf;

use gridtrust::model::{DemandRequest, PARAM_COUNT};
use gridtrust::sim::Scenario;
use gridtrust::{NodeId, TrustRecord};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `n` providers with random quality estimates and history.
pub fn providers(n: usize, seed: u64) -> Vec<TrustRecord> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| TrustRecord {
            node_id: NodeId(i as u32 + 1),
            trust: rng.gen(),
            n: rng.gen_range(0..50),
            params: std::array::from_fn(|_| rng.gen()),
            updated_at: 0.0,
        })
        .collect()
}

pub fn requests(n: usize, seed: u64) -> Vec<DemandRequest> {
    let mut rng = rng(seed);
    (0..n)
        .map(|i| DemandRequest {
            request_id: i as u64 + 1,
            client_id: "bench".into(),
            dp: std::array::from_fn::<f64, PARAM_COUNT, _>(|_| rng.gen_range(1.0..100.0)),
            service_type: "compute".into(),
        })
        .collect()
}

pub fn fixture(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    let text = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    Scenario::from_toml(&text, &[]).expect("fixture scenario is valid")
}
