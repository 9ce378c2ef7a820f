//! Trust evaluation: user satisfaction, recommendation score, self-defense
//! pass-through, their weighted combination, the time-decayed repository
//! update, and the monitoring sweep that pulls stale trust back to neutral.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::demand_eval::{normalize_demand, DemandError, DemandWeights};
use crate::model::{
    DemandRequest, Feedback, FeedbackVerdict, Journal, NodeId, Principal, QosVector, RepoError,
    Repository, SecurityAttributes, SimTime, TrustRecord, TxId, NEUTRAL_TRUST,
};
use crate::security_mgmt::{self_defense, DefenseScore, SecurityWeights};

/// Tolerance on `alpha + beta + delta_w = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrustError {
    #[error("trust weights must be non-negative and sum to 1 (alpha + beta + delta_w = {0})")]
    InvalidWeights(f64),
    #[error("update at {now} precedes last update at {last}")]
    TimeReversal { now: SimTime, last: SimTime },
    #[error("feedback for transaction {0} has not been verified")]
    Unverified(TxId),
    #[error(transparent)]
    Demand(#[from] DemandError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

/// Weights of satisfaction, recommendation and self-defense in the
/// composite trust value.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustWeights {
    pub alpha: f64,
    pub beta: f64,
    pub delta_w: f64,
}

impl TrustWeights {
    pub fn new(alpha: f64, beta: f64, delta_w: f64) -> Result<Self, TrustError> {
        let w = Self {
            alpha,
            beta,
            delta_w,
        };
        w.check()?;
        Ok(w)
    }

    pub fn equal() -> Self {
        Self {
            alpha: 1.0 / 3.0,
            beta: 1.0 / 3.0,
            delta_w: 1.0 / 3.0,
        }
    }

    pub fn sum(&self) -> f64 {
        self.alpha + self.beta + self.delta_w
    }

    pub fn check(&self) -> Result<(), TrustError> {
        let sum = self.sum();
        let non_negative = [self.alpha, self.beta, self.delta_w]
            .iter()
            .all(|w| *w >= 0.0 && w.is_finite());
        if non_negative && (sum - 1.0).abs() <= WEIGHT_SUM_TOLERANCE {
            Ok(())
        } else {
            Err(TrustError::InvalidWeights(sum))
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecommendationTally {
    pub c_s: u64,
    pub c_f: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    /// Exponential discount rate per simulation-time unit.
    pub lambda: f64,
}

/// Every tunable of trust evaluation and monitoring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrustConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta_w: f64,
    pub lambda: f64,
    /// Records untouched for longer than this are re-evaluated by the sweep.
    pub staleness: f64,
    pub sweep_period: f64,
    /// A transaction with satisfaction at or above this counts as a
    /// successful recommendation.
    pub success_threshold: f64,
}

impl Default for TrustConfig {
    fn default() -> Self {
        let w = TrustWeights::equal();
        Self {
            alpha: w.alpha,
            beta: w.beta,
            delta_w: w.delta_w,
            lambda: 0.01,
            staleness: 50.0,
            sweep_period: 10.0,
            success_threshold: 0.5,
        }
    }
}

impl TrustConfig {
    pub fn weights(&self) -> TrustWeights {
        TrustWeights {
            alpha: self.alpha,
            beta: self.beta,
            delta_w: self.delta_w,
        }
    }

    pub fn decay(&self) -> DecayConfig {
        DecayConfig {
            lambda: self.lambda,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.weights().check().is_err() {
            out.push(format!(
                "trust.alpha + trust.beta + trust.delta_w must equal 1 with each weight >= 0 (got {} + {} + {} = {})",
                self.alpha,
                self.beta,
                self.delta_w,
                self.weights().sum()
            ));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            out.push("trust.lambda must be >= 0".to_string());
        }
        if !(self.staleness > 0.0) {
            out.push("trust.staleness must be positive".to_string());
        }
        if !(self.sweep_period > 0.0) {
            out.push("trust.sweep_period must be positive".to_string());
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            out.push("trust.success_threshold must lie in [0, 1]".to_string());
        }
        out
    }
}

/// How well the delivered quality matched the demand, in `[0, 1]`.
///
/// `p_dm` holds the demanded levels (percentages / 100) and `f_prime` the
/// verified ratings. The weighted relative deviation is taken over the
/// parameters the user asked for (`p_dm_i > 0`), with weights renormalised
/// over those; satisfaction is `1 - deviation`, clamped. With no demanded
/// parameter the result is neutral.
pub fn satisfaction(p_dm: &QosVector, f_prime: &QosVector, w: &DemandWeights) -> f64 {
    let mut weight = 0.0;
    let mut deviation = 0.0;
    for i in 0..p_dm.len() {
        if p_dm[i] > 0.0 {
            weight += w.0[i];
            deviation += w.0[i] * (p_dm[i] - f_prime[i]).abs() / p_dm[i];
        }
    }
    if weight <= 0.0 {
        return NEUTRAL_TRUST;
    }
    (1.0 - deviation / weight).clamp(0.0, 1.0)
}

/// `c_s / (c_s + c_f)`, neutral when there is no history.
pub fn recommendation_score(tally: &RecommendationTally) -> f64 {
    let total = tally.c_s + tally.c_f;
    if total == 0 {
        NEUTRAL_TRUST
    } else {
        tally.c_s as f64 / total as f64
    }
}

/// Composite trust value `alpha*S + beta*RE + delta_w*SD`.
pub fn combine(s: f64, re: f64, sd: DefenseScore, w: &TrustWeights) -> Result<f64, TrustError> {
    w.check()?;
    let tv = w.alpha * s + w.beta * re + w.delta_w * sd.value();
    let lo = s.min(re).min(sd.value());
    let hi = s.max(re).max(sd.value());
    Ok(tv.clamp(lo, hi))
}

/// Weight kept by the old trust value: `exp(-lambda*dt) * n / (n + 1)`.
pub fn decay_factor(n: u64, dt: f64, lambda: f64) -> f64 {
    (-lambda * dt).exp() * (n as f64 / (n as f64 + 1.0))
}

fn blend(
    rec: &TrustRecord,
    tv: f64,
    now: SimTime,
    cfg: &DecayConfig,
    count: bool,
) -> Result<TrustRecord, TrustError> {
    if now < rec.updated_at {
        return Err(TrustError::TimeReversal {
            now,
            last: rec.updated_at,
        });
    }
    let c = decay_factor(rec.n, now - rec.updated_at, cfg.lambda);
    let raw = c * rec.trust + (1.0 - c) * tv;
    let mut out = rec.clone();
    out.trust = raw.clamp(rec.trust.min(tv), rec.trust.max(tv));
    if count {
        out.n += 1;
    }
    out.updated_at = now;
    Ok(out)
}

/// Blends a new trust value into the record, discounting the old value by
/// elapsed time and experience, then counts the transaction.
pub fn decay_update(
    rec: &TrustRecord,
    tv: f64,
    now: SimTime,
    cfg: &DecayConfig,
) -> Result<TrustRecord, TrustError> {
    blend(rec, tv, now, cfg, true)
}

/// Everything computed for one transaction, as logged to the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrustComponents {
    pub node: NodeId,
    pub s: f64,
    pub re: f64,
    pub sd: f64,
    pub tv: f64,
    pub t_old: f64,
    pub t_new: f64,
    pub n: u64,
    pub dt: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub record: TrustRecord,
    pub tally: RecommendationTally,
    pub components: TrustComponents,
}

/// Scores one completed transaction and folds it into the provider's
/// record. The recommendation score uses the tally as it stood before this
/// transaction; the returned tally includes it.
pub fn evaluate_transaction(
    feedback: &Feedback,
    demand: &DemandRequest,
    record: &TrustRecord,
    tally: RecommendationTally,
    defense: DefenseScore,
    cfg: &TrustConfig,
    now: SimTime,
) -> Result<Evaluation, TrustError> {
    if feedback.verdict == FeedbackVerdict::Pending {
        return Err(TrustError::Unverified(feedback.tx_id));
    }
    let w = normalize_demand(demand)?;
    let p_dm = demand.dp.map(|d| d / 100.0);
    let s = satisfaction(&p_dm, &feedback.ratings, &w);
    let re = recommendation_score(&tally);
    let tv = combine(s, re, defense, &cfg.weights())?;
    let updated = decay_update(record, tv, now, &cfg.decay())?;
    let mut tally = tally;
    if s >= cfg.success_threshold {
        tally.c_s += 1;
    } else {
        tally.c_f += 1;
    }
    let components = TrustComponents {
        node: record.node_id,
        s,
        re,
        sd: defense.value(),
        tv,
        t_old: record.trust,
        t_new: updated.trust,
        n: updated.n,
        dt: now - record.updated_at,
    };
    Ok(Evaluation {
        record: updated,
        tally,
        components,
    })
}

/// [`evaluate_transaction`] followed by writing the record back and
/// updating the provider's tally.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_and_store(
    feedback: &Feedback,
    demand: &DemandRequest,
    trust: &mut Repository<NodeId, TrustRecord>,
    writer: &Principal,
    tallies: &mut BTreeMap<NodeId, RecommendationTally>,
    defense: DefenseScore,
    cfg: &TrustConfig,
    now: SimTime,
    journal: &mut Journal,
) -> Result<TrustComponents, TrustError> {
    let record = trust.get(writer, &feedback.provider)?.clone();
    let tally = tallies.get(&feedback.provider).copied().unwrap_or_default();
    let eval = evaluate_transaction(feedback, demand, &record, tally, defense, cfg, now)?;
    trust.put(writer, feedback.provider, eval.record, now, journal)?;
    tallies.insert(feedback.provider, eval.tally);
    Ok(eval.components)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepUpdate {
    pub node: NodeId,
    pub t_old: f64,
    pub t_new: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutcome {
    pub reevaluated: Vec<SweepUpdate>,
    /// Self-defense recomputed from the domain's current attributes.
    pub defense: DefenseScore,
}

/// Periodic re-evaluation of one domain: every record idle for longer than
/// `staleness` decays toward neutral trust (its transaction count is left
/// alone), and the domain's self-defense score is recomputed.
#[allow(clippy::too_many_arguments)]
pub fn monitor_sweep(
    trust: &mut Repository<NodeId, TrustRecord>,
    writer: &Principal,
    now: SimTime,
    staleness: f64,
    decay: &DecayConfig,
    security: &SecurityAttributes,
    weights: &SecurityWeights,
    journal: &mut Journal,
) -> Result<SweepOutcome, TrustError> {
    let stale: Vec<TrustRecord> = trust
        .snapshot()
        .values()
        .filter(|r| now - r.updated_at > staleness)
        .cloned()
        .collect();
    let mut reevaluated = Vec::with_capacity(stale.len());
    for rec in stale {
        let updated = blend(&rec, NEUTRAL_TRUST, now, decay, false)?;
        reevaluated.push(SweepUpdate {
            node: rec.node_id,
            t_old: rec.trust,
            t_new: updated.trust,
        });
        trust.put(writer, rec.node_id, updated, now, journal)?;
    }
    Ok(SweepOutcome {
        reevaluated,
        defense: self_defense(security, weights),
    })
}
