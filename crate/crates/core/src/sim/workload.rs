use rand::Rng;
use serde::{Deserialize, Serialize};

use super::scenario::{ArrivalSpec, DemandSpec, WorkloadSpec};
use crate::demand_eval::roulette_index;
use crate::model::{QosVector, SimTime};

/// One service request entering the grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Arrival {
    pub time: SimTime,
    pub request_id: u64,
    pub client: String,
    pub dp: QosVector,
}

/// Draws every arrival of the run up front, in time order. Request ids count
/// from 1.
pub fn generate_workload<R: Rng + ?Sized>(
    spec: &WorkloadSpec,
    duration: f64,
    rng: &mut R,
) -> Vec<Arrival> {
    let mut out = Vec::new();
    if spec.clients.is_empty() {
        return out;
    }
    let weights: Vec<f64> = spec.clients.iter().map(|c| c.weight).collect();
    let limit = spec.max_transactions.unwrap_or(u64::MAX);
    let mut t = spec.start;
    loop {
        t += match spec.arrivals {
            ArrivalSpec::Poisson { rate } => -(1.0 - rng.gen::<f64>()).ln() / rate,
            ArrivalSpec::Fixed { interval } => interval,
        };
        if t > duration || out.len() as u64 >= limit {
            break;
        }
        let client = &spec.clients[roulette_index(&weights, rng)];
        let dp = match &client.demand {
            DemandSpec::Constant { dp } => *dp,
            DemandSpec::Uniform { low, high } => {
                let mut dp = [0.0; 6];
                for i in 0..6 {
                    dp[i] = low[i] + rng.gen::<f64>() * (high[i] - low[i]);
                }
                dp
            }
        };
        out.push(Arrival {
            time: t,
            request_id: out.len() as u64 + 1,
            client: client.id.clone(),
            dp,
        });
    }
    out
}
