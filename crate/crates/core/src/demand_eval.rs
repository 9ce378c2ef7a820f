//! Demand trust evaluation and provider selection.
//!
//! A user request carries one percentage per QoS parameter. Normalised into
//! weights, it scores every eligible provider against the quality estimates
//! held in the trust repository; the best `p` providers become candidates.
//! Separately, a selection table built with uniform weights gives each
//! provider a share of traffic, and a roulette wheel restricted to the
//! candidates picks the provider that serves the request.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DemandRequest, NodeId, QosVector, TrustRecord, PARAM_COUNT};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DemandError {
    #[error("request {0}: every demand percentage is zero")]
    DegenerateDemand(u64),
    #[error("request {request}: demand {index} = {value} is outside [0, 100]")]
    InvalidDemand {
        request: u64,
        index: usize,
        value: f64,
    },
    #[error("no eligible providers")]
    NoProviders,
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("candidate {0} is not in the selection table")]
    UnknownCandidate(NodeId),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemandConfig {
    /// Requests per batch (`k`).
    pub batch_size: usize,
    /// Candidates kept per request (`p`).
    pub candidates: usize,
    /// A partial batch is flushed this long after its first request.
    pub flush_timeout: f64,
}

impl Default for DemandConfig {
    fn default() -> Self {
        Self {
            batch_size: 8,
            candidates: 3,
            flush_timeout: 1.0,
        }
    }
}

impl DemandConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.batch_size < 1 {
            out.push("demand.batch_size must be at least 1".to_string());
        }
        if self.candidates < 1 {
            out.push("demand.candidates must be at least 1".to_string());
        }
        if !(self.flush_timeout > 0.0) {
            out.push("demand.flush_timeout must be positive".to_string());
        }
        out
    }
}

/// Parameter weights derived from a demand; they sum to one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct DemandWeights(pub QosVector);

impl DemandWeights {
    pub fn values(&self) -> &QosVector {
        &self.0
    }
}

pub fn check_demand(req: &DemandRequest) -> Result<(), DemandError> {
    for (index, &value) in req.dp.iter().enumerate() {
        if !(0.0..=100.0).contains(&value) {
            return Err(DemandError::InvalidDemand {
                request: req.request_id,
                index,
                value,
            });
        }
    }
    Ok(())
}

/// `w_i = dp_i / Σ dp`.
pub fn normalize_demand(req: &DemandRequest) -> Result<DemandWeights, DemandError> {
    check_demand(req)?;
    let total: f64 = req.dp.iter().sum();
    if total <= 0.0 {
        return Err(DemandError::DegenerateDemand(req.request_id));
    }
    Ok(DemandWeights(req.dp.map(|d| d / total)))
}

/// Demand trust values, aligned with `providers`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DemandTrustVector {
    pub providers: Vec<NodeId>,
    pub dtv: Vec<f64>,
}

fn weighted(w: &QosVector, params: &QosVector) -> f64 {
    w.iter().zip(params).map(|(w, p)| w * p).sum()
}

/// One weighted sum per provider: `dtv_i = Σ_j w_j · params_i[j]`.
pub fn demand_trust(
    w: &DemandWeights,
    providers: &[TrustRecord],
) -> Result<DemandTrustVector, DemandError> {
    if providers.is_empty() {
        return Err(DemandError::NoProviders);
    }
    Ok(DemandTrustVector {
        providers: providers.iter().map(|r| r.node_id).collect(),
        dtv: providers
            .iter()
            .map(|r| weighted(&w.0, &r.params).clamp(0.0, 1.0))
            .collect(),
    })
}

/// The `p` providers with the highest demand trust, best first; ties go to
/// the smaller node id.
pub fn candidates(dtv: &DemandTrustVector, p: usize) -> Vec<NodeId> {
    let mut idx: Vec<usize> = (0..dtv.dtv.len()).collect();
    idx.sort_by(|&a, &b| {
        dtv.dtv[b]
            .total_cmp(&dtv.dtv[a])
            .then(dtv.providers[a].cmp(&dtv.providers[b]))
    });
    idx.into_iter().take(p).map(|i| dtv.providers[i]).collect()
}

/// A batch of up to `k` requests awaiting evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub requests: Vec<DemandRequest>,
}

impl Batch {
    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    pub fn len(&self) -> usize {
        self.requests.len()
    }
}

/// Evaluates every request of a batch independently. Row `j` is the demand
/// trust vector of request `j`, or the error that request produced.
pub fn batch_evaluate(
    batch: &Batch,
    providers: &[TrustRecord],
) -> Vec<Result<DemandTrustVector, DemandError>> {
    batch
        .requests
        .iter()
        .map(|r| normalize_demand(r).and_then(|w| demand_trust(&w, providers)))
        .collect()
}

/// Global trust values under uniform parameter weights, and the share of
/// requests each provider should receive.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SelectionTable {
    pub providers: Vec<NodeId>,
    pub tv: Vec<f64>,
    pub sp: Vec<f64>,
}

impl SelectionTable {
    pub fn share_of(&self, node: NodeId) -> Option<f64> {
        self.providers
            .iter()
            .position(|&p| p == node)
            .map(|i| self.sp[i])
    }
}

pub fn selection_table(providers: &[TrustRecord]) -> SelectionTable {
    let uniform = [1.0 / PARAM_COUNT as f64; PARAM_COUNT];
    let tv: Vec<f64> = providers
        .iter()
        .map(|r| weighted(&uniform, &r.params).clamp(0.0, 1.0))
        .collect();
    let total: f64 = tv.iter().sum();
    let n = tv.len();
    let sp = if total > 0.0 {
        tv.iter().map(|t| t / total).collect()
    } else {
        vec![1.0 / n as f64; n]
    };
    SelectionTable {
        providers: providers.iter().map(|r| r.node_id).collect(),
        tv,
        sp,
    }
}

/// Fitness-proportionate draw. Zero-weight slots are never returned unless
/// every weight is zero, in which case the draw is uniform.
pub fn roulette_index<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    debug_assert!(!weights.is_empty());
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let spin = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w <= 0.0 {
            continue;
        }
        acc += w;
        last_positive = i;
        if spin < acc {
            return i;
        }
    }
    // Rounding left the spin at the very top of the wheel.
    last_positive
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Allocation {
    pub chosen: NodeId,
    /// Candidate shares after restriction and renormalisation.
    pub slice: Vec<f64>,
}

/// Restricts the selection table to the candidates, renormalises and spins
/// the roulette wheel.
pub fn allocate<R: Rng + ?Sized>(
    cands: &[NodeId],
    table: &SelectionTable,
    rng: &mut R,
) -> Result<Allocation, DemandError> {
    if cands.is_empty() {
        return Err(DemandError::NoCandidates);
    }
    let raw: Vec<f64> = cands
        .iter()
        .map(|&c| table.share_of(c).ok_or(DemandError::UnknownCandidate(c)))
        .collect::<Result<_, _>>()?;
    let total: f64 = raw.iter().sum();
    let slice: Vec<f64> = if total > 0.0 {
        raw.iter().map(|s| s / total).collect()
    } else {
        vec![1.0 / cands.len() as f64; cands.len()]
    };
    let chosen = cands[roulette_index(&slice, rng)];
    Ok(Allocation { chosen, slice })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn req(dp: QosVector) -> DemandRequest {
        DemandRequest {
            request_id: 1,
            client_id: "c".into(),
            dp,
            service_type: "compute".into(),
        }
    }

    fn rec(node: u32, params: QosVector) -> TrustRecord {
        TrustRecord {
            params,
            ..TrustRecord::neutral(NodeId(node), 0.0)
        }
    }

    #[test]
    fn normalisation_examples() {
        let w = normalize_demand(&req([100.0, 50.0, 50.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(w.0, [0.5, 0.25, 0.25, 0.0, 0.0, 0.0]);
        let w = normalize_demand(&req([100.0, 0.0, 0.0, 0.0, 0.0, 0.0])).unwrap();
        assert_eq!(w.0, [1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = normalize_demand(&req([40.0; 6])).unwrap();
        assert!(w.0.iter().all(|&x| (x - 1.0 / 6.0).abs() < 1e-15));
    }

    #[test]
    fn degenerate_and_out_of_range_demands() {
        assert_eq!(
            normalize_demand(&req([0.0; 6])),
            Err(DemandError::DegenerateDemand(1))
        );
        assert!(matches!(
            normalize_demand(&req([120.0, 0.0, 0.0, 0.0, 0.0, 0.0])),
            Err(DemandError::InvalidDemand { index: 0, .. })
        ));
    }

    #[test]
    fn demand_trust_examples() {
        let w = DemandWeights([1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let v = demand_trust(&w, &[rec(1, [0.7, 0.1, 0.1, 0.1, 0.1, 0.1])]).unwrap();
        assert_eq!(v.dtv, vec![0.7]);

        let w = DemandWeights([0.1, 0.2, 0.3, 0.1, 0.2, 0.1]);
        let v = demand_trust(&w, &[rec(1, [0.5; 6]), rec(2, [0.5; 6])]).unwrap();
        assert!(v.dtv.iter().all(|&d| (d - 0.5).abs() < 1e-15));

        let w = DemandWeights([0.5, 0.25, 0.25, 0.0, 0.0, 0.0]);
        let v = demand_trust(&w, &[rec(1, [0.8, 0.4, 0.4, 0.9, 0.9, 0.9])]).unwrap();
        assert!((v.dtv[0] - 0.6).abs() < 1e-15);

        assert_eq!(demand_trust(&w, &[]), Err(DemandError::NoProviders));
    }

    fn dtv(values: &[f64]) -> DemandTrustVector {
        DemandTrustVector {
            providers: (1..=values.len() as u32).map(NodeId).collect(),
            dtv: values.to_vec(),
        }
    }

    #[test]
    fn candidate_selection() {
        assert_eq!(
            candidates(&dtv(&[0.9, 0.1, 0.5]), 2),
            vec![NodeId(1), NodeId(3)]
        );
        assert_eq!(candidates(&dtv(&[0.9, 0.1, 0.5]), 5).len(), 3);
        assert_eq!(
            candidates(&dtv(&[0.3, 0.7, 0.3, 0.3]), 2),
            vec![NodeId(2), NodeId(1)]
        );
    }

    #[test]
    fn batch_rows_are_independent() {
        let providers = [rec(1, [0.9, 0.2, 0.4, 0.6, 0.1, 0.3]), rec(2, [0.3; 6])];
        let a = req([100.0, 0.0, 20.0, 0.0, 0.0, 0.0]);
        let mut bad = req([0.0; 6]);
        bad.request_id = 2;
        let batch = Batch {
            requests: vec![a.clone(), bad, a.clone()],
        };
        let rows = batch_evaluate(&batch, &providers);
        let single = demand_trust(&normalize_demand(&a).unwrap(), &providers).unwrap();
        assert_eq!(rows[0].as_ref().unwrap(), &single);
        assert_eq!(rows[1], Err(DemandError::DegenerateDemand(2)));
        assert_eq!(rows[2].as_ref().unwrap(), &single);
    }

    #[test]
    fn selection_table_examples() {
        // tv = (1, 1, 2) needs params averaging to those values; scale by 1/2.
        let t = selection_table(&[rec(1, [0.25; 6]), rec(2, [0.25; 6]), rec(3, [0.5; 6])]);
        for (s, e) in t.sp.iter().zip([0.25, 0.25, 0.5]) {
            assert!((s - e).abs() < 1e-15);
        }
        let t = selection_table(&[
            rec(1, [0.4; 6]),
            rec(2, [0.4; 6]),
            rec(3, [0.4; 6]),
            rec(4, [0.4; 6]),
        ]);
        assert!(t.sp.iter().all(|&s| (s - 0.25).abs() < 1e-15));
        assert_eq!(selection_table(&[rec(1, [0.3; 6])]).sp, vec![1.0]);
        let zero = selection_table(&[rec(1, [0.0; 6]), rec(2, [0.0; 6])]);
        assert_eq!(zero.sp, vec![0.5, 0.5]);
    }

    #[test]
    fn single_candidate_is_always_chosen() {
        let t = selection_table(&[rec(1, [0.2; 6]), rec(2, [0.9; 6])]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            assert_eq!(
                allocate(&[NodeId(1)], &t, &mut rng).unwrap().chosen,
                NodeId(1)
            );
        }
        assert_eq!(allocate(&[], &t, &mut rng), Err(DemandError::NoCandidates));
        assert_eq!(
            allocate(&[NodeId(9)], &t, &mut rng),
            Err(DemandError::UnknownCandidate(NodeId(9)))
        );
    }

    #[test]
    fn roulette_frequencies_follow_renormalised_shares() {
        // Candidates 1 and 2 hold 0.1 and 0.3 of the table: renormalised 0.25/0.75.
        let t = SelectionTable {
            providers: vec![NodeId(1), NodeId(2), NodeId(3)],
            tv: vec![0.1, 0.3, 0.6],
            sp: vec![0.1, 0.3, 0.6],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let draws = 10_000;
        let mut first = 0;
        for _ in 0..draws {
            let a = allocate(&[NodeId(1), NodeId(2)], &t, &mut rng).unwrap();
            assert!((a.slice[0] - 0.25).abs() < 1e-15);
            if a.chosen == NodeId(1) {
                first += 1;
            }
        }
        let f = first as f64 / draws as f64;
        assert!((f - 0.25).abs() <= 0.02, "{f}");
    }

    #[test]
    fn zero_share_candidate_is_never_drawn() {
        let t = SelectionTable {
            providers: vec![NodeId(1), NodeId(2)],
            tv: vec![0.0, 0.5],
            sp: vec![0.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            assert_eq!(
                allocate(&[NodeId(1), NodeId(2)], &t, &mut rng)
                    .unwrap()
                    .chosen,
                NodeId(2)
            );
        }
    }

    #[test]
    fn all_zero_candidates_draw_uniformly() {
        let t = SelectionTable {
            providers: vec![NodeId(1), NodeId(2), NodeId(3)],
            tv: vec![0.0, 0.0, 1.0],
            sp: vec![0.0, 0.0, 1.0],
        };
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut hits = [0usize; 2];
        for _ in 0..4000 {
            let a = allocate(&[NodeId(1), NodeId(2)], &t, &mut rng).unwrap();
            hits[(a.chosen.0 - 1) as usize] += 1;
        }
        assert!(hits.iter().all(|&h| (h as f64 / 4000.0 - 0.5).abs() < 0.03));
    }

    fn unit6() -> impl Strategy<Value = QosVector> {
        proptest::array::uniform6(0.0f64..=1.0)
    }

    proptest! {
        #[test]
        fn normalisation_is_scale_invariant(dp in proptest::array::uniform6(0.0f64..=50.0), c in 0.01f64..2.0) {
            prop_assume!(dp.iter().sum::<f64>() > 1e-3);
            let a = normalize_demand(&req(dp)).unwrap();
            let b = normalize_demand(&req(dp.map(|x| x * c))).unwrap();
            for i in 0..PARAM_COUNT {
                prop_assert!((a.0[i] - b.0[i]).abs() < 1e-12);
            }
            prop_assert!((a.0.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn demand_trust_is_monotone(dp in proptest::array::uniform6(0.0f64..=100.0), params in unit6(), idx in 0usize..6, bump in 0.0f64..1.0) {
            prop_assume!(dp.iter().sum::<f64>() > 1e-3);
            let w = normalize_demand(&req(dp)).unwrap();
            let mut better = params;
            better[idx] = (better[idx] + bump).min(1.0);
            let lo = demand_trust(&w, &[rec(1, params)]).unwrap().dtv[0];
            let hi = demand_trust(&w, &[rec(1, better)]).unwrap().dtv[0];
            prop_assert!(hi >= lo - 1e-15);
        }

        #[test]
        fn candidates_survive_positive_affine_maps(values in proptest::collection::vec(0.0f64..=1.0, 1..10), scale in 0.1f64..10.0, shift in -5.0f64..5.0, p in 1usize..6) {
            let base = dtv(&values);
            let mapped = DemandTrustVector { providers: base.providers.clone(), dtv: values.iter().map(|v| v * scale + shift).collect() };
            // Exact ties can be broken by rounding after the map; compare on distinct values only.
            let mut sorted = values.clone();
            sorted.sort_by(f64::total_cmp);
            sorted.dedup();
            prop_assume!(sorted.len() == values.len());
            prop_assert_eq!(candidates(&base, p), candidates(&mapped, p));
        }

        #[test]
        fn shares_sum_to_one(params in proptest::collection::vec(unit6(), 1..12)) {
            let recs: Vec<_> = params.iter().enumerate().map(|(i, p)| rec(i as u32, *p)).collect();
            let t = selection_table(&recs);
            prop_assert!((t.sp.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            prop_assert!(t.sp.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }
}
