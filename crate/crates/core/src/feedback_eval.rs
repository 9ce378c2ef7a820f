//! Feedback pipeline: collection, verification (screening plus the
//! reasonability check against the rolling mean of recent ratings) and
//! repository update of per-parameter quality estimates.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    DomainRepos, Feedback, FeedbackVerdict, Journal, ModelError, NodeId, Principal, QosVector,
    RepoError, SimTime, TxId, NEUTRAL_TRUST, PARAM_COUNT,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FeedbackError {
    #[error("feedback for transaction {0} was already collected")]
    DuplicateFeedback(TxId),
    #[error("feedback for transaction {0} is not pending")]
    NotPending(TxId),
    #[error("feedback for transaction {0} has not been verified")]
    NotVerified(TxId),
    #[error(transparent)]
    InvalidRatings(#[from] ModelError),
    #[error(transparent)]
    Repo(#[from] RepoError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerificationConfig {
    /// Number of most recent verified ratings averaged per parameter.
    pub window: usize,
    /// Reasonability threshold: a rating further than this from the
    /// rolling mean is rectified.
    pub delta: f64,
    /// Optional per-parameter override of `delta`.
    pub per_parameter_delta: Option<[f64; PARAM_COUNT]>,
    /// Feedback older than this (relative to processing time) is discarded.
    pub max_age: f64,
    /// The reasonability check only applies once a parameter has at least
    /// this many buffered ratings.
    pub min_history: usize,
}

impl Default for VerificationConfig {
    fn default() -> Self {
        Self {
            window: 10,
            delta: 0.2,
            per_parameter_delta: None,
            max_age: 50.0,
            min_history: 1,
        }
    }
}

impl VerificationConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.window < 1 {
            out.push("feedback.window must be at least 1".to_string());
        }
        if !(self.delta > 0.0) {
            out.push("feedback.delta must be positive".to_string());
        }
        if let Some(d) = self.per_parameter_delta {
            if d.iter().any(|x| !(*x > 0.0)) {
                out.push("feedback.per_parameter_delta entries must be positive".to_string());
            }
        }
        if !(self.max_age > 0.0) {
            out.push("feedback.max_age must be positive".to_string());
        }
        out
    }

    pub fn delta_for(&self, param: usize) -> f64 {
        self.per_parameter_delta.map_or(self.delta, |d| d[param])
    }
}

/// Per provider, per parameter: the last `window` verified ratings.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamHistory {
    window: usize,
    buffers: BTreeMap<NodeId, [VecDeque<f64>; PARAM_COUNT]>,
}

impl ParamHistory {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            buffers: BTreeMap::new(),
        }
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn ratings(&self, provider: NodeId, param: usize) -> impl Iterator<Item = f64> + '_ {
        self.buffers
            .get(&provider)
            .into_iter()
            .flat_map(move |b| b[param].iter().copied())
    }

    pub fn len(&self, provider: NodeId, param: usize) -> usize {
        self.buffers.get(&provider).map_or(0, |b| b[param].len())
    }

    pub fn push(&mut self, provider: NodeId, ratings: &QosVector) {
        let window = self.window;
        let bufs = self
            .buffers
            .entry(provider)
            .or_insert_with(|| std::array::from_fn(|_| VecDeque::with_capacity(window)));
        for (buf, &r) in bufs.iter_mut().zip(ratings) {
            if buf.len() == window {
                buf.pop_front();
            }
            buf.push_back(r);
        }
    }
}

/// Mean of the buffered ratings; neutral 0.5 when nothing is buffered.
pub fn rolling_mean(history: &ParamHistory, provider: NodeId, param: usize) -> f64 {
    let n = history.len(provider, param);
    if n == 0 {
        return NEUTRAL_TRUST;
    }
    history.ratings(provider, param).sum::<f64>() / n as f64
}

/// Applies the reasonability check parameter by parameter. Ratings that
/// deviate from the rolling mean by more than the threshold are replaced
/// by that mean; the client's originals are kept in the verdict.
pub fn verify(fb: &Feedback, cfg: &VerificationConfig, history: &ParamHistory) -> Feedback {
    let mut out = fb.clone();
    let mut rectified = false;
    for i in 0..PARAM_COUNT {
        if history.len(fb.provider, i) < cfg.min_history {
            continue;
        }
        let a = rolling_mean(history, fb.provider, i);
        if (fb.ratings[i] - a).abs() > cfg.delta_for(i) {
            out.ratings[i] = a;
            rectified = true;
        }
    }
    out.verdict = if rectified {
        FeedbackVerdict::Rectified {
            original: fb.ratings,
        }
    } else {
        FeedbackVerdict::Verified
    };
    out
}

/// What the DTM knows about a completed transaction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TxInfo {
    pub client_id: String,
    pub provider: NodeId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiscardReason {
    /// Identification: no such transaction.
    UnknownTransaction,
    /// Legitimacy: the rater was not the transaction's client, or rates
    /// another provider.
    Illegitimate,
    /// Time: issued too long ago.
    Stale,
    /// Ratings outside `[0, 1]`.
    Malformed,
}

/// Identification, legitimacy and time checks that precede the
/// reasonability check.
pub fn screen(
    fb: &Feedback,
    ledger: &BTreeMap<TxId, TxInfo>,
    now: SimTime,
    cfg: &VerificationConfig,
) -> Result<(), DiscardReason> {
    if fb.check().is_err() {
        return Err(DiscardReason::Malformed);
    }
    let tx = ledger
        .get(&fb.tx_id)
        .ok_or(DiscardReason::UnknownTransaction)?;
    if tx.client_id != fb.client_id || tx.provider != fb.provider {
        return Err(DiscardReason::Illegitimate);
    }
    if now - fb.issued_at > cfg.max_age {
        return Err(DiscardReason::Stale);
    }
    Ok(())
}

/// Writes verified feedback to the feedback repository, appends its ratings
/// to the history and refreshes the provider's quality estimates. Returns
/// the updated estimates.
pub fn update_repository(
    fb: &Feedback,
    repos: &mut DomainRepos,
    writer: &Principal,
    history: &mut ParamHistory,
    now: SimTime,
    journal: &mut Journal,
) -> Result<QosVector, FeedbackError> {
    if matches!(fb.verdict, FeedbackVerdict::Pending) {
        return Err(FeedbackError::NotVerified(fb.tx_id));
    }
    let mut record = repos.trust.get(writer, &fb.provider)?.clone();
    repos
        .feedback
        .put(writer, fb.tx_id, fb.clone(), now, journal)?;
    history.push(fb.provider, &fb.ratings);
    for (i, p) in record.params.iter_mut().enumerate() {
        *p = rolling_mean(history, fb.provider, i);
    }
    let params = record.params;
    repos.trust.put(writer, fb.provider, record, now, journal)?;
    Ok(params)
}

/// FIFO collection queue plus the verification state of one domain.
#[derive(Clone, Debug)]
pub struct FeedbackPipeline {
    pub config: VerificationConfig,
    pub history: ParamHistory,
    queue: VecDeque<Feedback>,
    seen: BTreeSet<TxId>,
}

impl FeedbackPipeline {
    pub fn new(config: VerificationConfig) -> Self {
        Self {
            history: ParamHistory::new(config.window),
            config,
            queue: VecDeque::new(),
            seen: BTreeSet::new(),
        }
    }

    pub fn collect(&mut self, fb: Feedback) -> Result<(), FeedbackError> {
        if fb.verdict != FeedbackVerdict::Pending {
            return Err(FeedbackError::NotPending(fb.tx_id));
        }
        if !self.seen.insert(fb.tx_id) {
            return Err(FeedbackError::DuplicateFeedback(fb.tx_id));
        }
        self.queue.push_back(fb);
        Ok(())
    }

    pub fn queued(&self) -> usize {
        self.queue.len()
    }

    pub fn pop(&mut self) -> Option<Feedback> {
        self.queue.pop_front()
    }

    pub fn verify(&self, fb: &Feedback) -> Feedback {
        verify(fb, &self.config, &self.history)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{DomainId, TrustRecord};
    use proptest::prelude::*;

    const P: NodeId = NodeId(7);

    fn history_with(values: &[f64], window: usize) -> ParamHistory {
        let mut h = ParamHistory::new(window);
        for &v in values {
            h.push(P, &[v; PARAM_COUNT]);
        }
        h
    }

    fn fb(tx: u64, ratings: QosVector) -> Feedback {
        Feedback::pending(TxId(tx), P, "client", ratings, 0.0)
    }

    fn cfg(delta: f64) -> VerificationConfig {
        VerificationConfig {
            delta,
            ..VerificationConfig::default()
        }
    }

    #[test]
    fn rolling_mean_cases() {
        assert_eq!(rolling_mean(&history_with(&[0.5; 4], 4), P, 0), 0.5);
        assert_eq!(rolling_mean(&ParamHistory::new(4), P, 0), 0.5);
        let m = rolling_mean(&history_with(&[0.2, 0.4, 0.6], 4), P, 3);
        assert!((m - 0.4).abs() < 1e-15);
    }

    #[test]
    fn ring_buffer_evicts_oldest() {
        let h = history_with(&[0.1, 0.2, 0.3, 0.4, 0.5], 4);
        assert_eq!(
            h.ratings(P, 0).collect::<Vec<_>>(),
            vec![0.2, 0.3, 0.4, 0.5]
        );
    }

    #[test]
    fn outlier_is_rectified_to_the_mean() {
        let h = history_with(&[0.5; 4], 4);
        let out = verify(&fb(1, [0.9, 0.6, 0.5, 0.5, 0.5, 0.5]), &cfg(0.2), &h);
        assert_eq!(out.ratings[0], 0.5);
        assert_eq!(out.ratings[1], 0.6);
        assert_eq!(
            out.verdict,
            FeedbackVerdict::Rectified {
                original: [0.9, 0.6, 0.5, 0.5, 0.5, 0.5]
            }
        );
    }

    #[test]
    fn close_rating_passes_and_exact_mean_passes() {
        let h = history_with(&[0.5; 4], 4);
        let out = verify(&fb(1, [0.6; 6]), &cfg(0.2), &h);
        assert_eq!(out.verdict, FeedbackVerdict::Verified);
        assert_eq!(out.ratings, [0.6; 6]);
        let out = verify(&fb(2, [0.5; 6]), &cfg(0.2), &h);
        assert_eq!(out.verdict, FeedbackVerdict::Verified);
    }

    #[test]
    fn lowball_ratings_are_rectified_too() {
        let h = history_with(&[0.8; 4], 4);
        let out = verify(&fb(1, [0.0; 6]), &cfg(0.2), &h);
        assert_eq!(out.ratings, [0.8; 6]);
    }

    #[test]
    fn check_waits_for_min_history() {
        let empty = ParamHistory::new(4);
        let out = verify(&fb(1, [0.9; 6]), &cfg(0.2), &empty);
        assert_eq!(out.verdict, FeedbackVerdict::Verified);
        let literal = VerificationConfig {
            min_history: 0,
            ..cfg(0.2)
        };
        // With no warm-up the empty buffer's neutral mean is the reference.
        assert_eq!(verify(&fb(1, [0.9; 6]), &literal, &empty).ratings, [0.5; 6]);
    }

    #[test]
    fn per_parameter_threshold_override() {
        let h = history_with(&[0.5; 4], 4);
        let c = VerificationConfig {
            per_parameter_delta: Some([0.5, 0.1, 0.1, 0.1, 0.1, 0.1]),
            ..cfg(0.2)
        };
        let out = verify(&fb(1, [0.9, 0.65, 0.5, 0.5, 0.5, 0.5]), &c, &h);
        assert_eq!(out.ratings[0], 0.9);
        assert_eq!(out.ratings[1], 0.5);
    }

    #[test]
    fn collect_is_fifo_and_rejects_duplicates() {
        let mut p = FeedbackPipeline::new(VerificationConfig::default());
        p.collect(fb(1, [0.5; 6])).unwrap();
        assert_eq!(p.queued(), 1);
        assert_eq!(
            p.collect(fb(1, [0.5; 6])),
            Err(FeedbackError::DuplicateFeedback(TxId(1)))
        );
        p.collect(fb(2, [0.5; 6])).unwrap();
        p.collect(fb(3, [0.5; 6])).unwrap();
        let order: Vec<_> = std::iter::from_fn(|| p.pop()).map(|f| f.tx_id.0).collect();
        assert_eq!(order, vec![1, 2, 3]);
    }

    #[test]
    fn screening() {
        let ledger: BTreeMap<_, _> = [(
            TxId(1),
            TxInfo {
                client_id: "client".into(),
                provider: P,
            },
        )]
        .into();
        let c = VerificationConfig::default();
        assert_eq!(screen(&fb(1, [0.5; 6]), &ledger, 1.0, &c), Ok(()));
        assert_eq!(
            screen(&fb(2, [0.5; 6]), &ledger, 1.0, &c),
            Err(DiscardReason::UnknownTransaction)
        );
        let mut other = fb(1, [0.5; 6]);
        other.client_id = "mallory".into();
        assert_eq!(
            screen(&other, &ledger, 1.0, &c),
            Err(DiscardReason::Illegitimate)
        );
        assert_eq!(
            screen(&fb(1, [0.5; 6]), &ledger, c.max_age + 1.0, &c),
            Err(DiscardReason::Stale)
        );
        assert_eq!(
            screen(&fb(1, [1.5; 6]), &ledger, 1.0, &c),
            Err(DiscardReason::Malformed)
        );
    }

    fn repos_with_provider() -> (DomainRepos, Principal, Journal) {
        let d = DomainId::new("d1");
        let mut repos = DomainRepos::new(&d);
        let dtm = Principal::Dtm { domain: d };
        let mut journal = Journal::new();
        repos
            .trust
            .put(&dtm, P, TrustRecord::neutral(P, 0.0), 0.0, &mut journal)
            .unwrap();
        (repos, dtm, journal)
    }

    #[test]
    fn params_converge_to_constant_feedback() {
        let (mut repos, dtm, mut journal) = repos_with_provider();
        let c = VerificationConfig {
            window: 4,
            ..VerificationConfig::default()
        };
        let mut h = ParamHistory::new(c.window);
        for tx in 0..4 {
            let v = verify(&fb(tx, [0.8; 6]), &c, &h);
            update_repository(&v, &mut repos, &dtm, &mut h, tx as f64, &mut journal).unwrap();
        }
        let rec = repos.trust.get(&dtm, &P).unwrap();
        assert!(rec.params.iter().all(|&p| (p - 0.8).abs() < 1e-15));
        assert_eq!(repos.feedback.len(), 4);
    }

    #[test]
    fn unverified_feedback_is_refused() {
        let (mut repos, dtm, mut journal) = repos_with_provider();
        let mut h = ParamHistory::new(4);
        assert_eq!(
            update_repository(
                &fb(1, [0.5; 6]),
                &mut repos,
                &dtm,
                &mut h,
                0.0,
                &mut journal
            ),
            Err(FeedbackError::NotVerified(TxId(1)))
        );
    }

    #[test]
    fn foreign_writer_is_denied() {
        let (mut repos, _, mut journal) = repos_with_provider();
        let mut h = ParamHistory::new(4);
        let stranger = Principal::Dtm {
            domain: DomainId::new("d2"),
        };
        let v = verify(&fb(1, [0.5; 6]), &VerificationConfig::default(), &h);
        assert!(matches!(
            update_repository(&v, &mut repos, &stranger, &mut h, 0.0, &mut journal),
            Err(FeedbackError::Repo(RepoError::AccessDenied { .. }))
        ));
    }

    proptest! {
        #[test]
        fn verification_never_widens_deviation(
            past in proptest::collection::vec(0.0f64..=1.0, 1..12),
            new in 0.0f64..=1.0,
            delta in 0.01f64..0.6,
        ) {
            let h = history_with(&past, 8);
            let a = rolling_mean(&h, P, 0);
            let out = verify(&fb(1, [new; 6]), &cfg(delta), &h);
            let dev = (out.ratings[0] - a).abs();
            prop_assert!(dev <= delta.max((new - a).abs()) + 1e-15);
            if out.ratings[0] != new {
                prop_assert_eq!(out.ratings[0], a);
            }
        }

        #[test]
        fn params_track_rolling_means(ratings in proptest::collection::vec(proptest::array::uniform6(0.0f64..=1.0), 1..20)) {
            let (mut repos, dtm, mut journal) = repos_with_provider();
            let c = VerificationConfig { window: 5, ..VerificationConfig::default() };
            let mut h = ParamHistory::new(c.window);
            for (tx, r) in ratings.iter().enumerate() {
                let v = verify(&fb(tx as u64, *r), &c, &h);
                update_repository(&v, &mut repos, &dtm, &mut h, 0.0, &mut journal).unwrap();
                let rec = repos.trust.get(&dtm, &P).unwrap();
                for i in 0..PARAM_COUNT {
                    prop_assert_eq!(rec.params[i], rolling_mean(&h, P, i));
                }
            }
        }

        #[test]
        fn parameters_are_processed_independently(
            past in proptest::collection::vec(proptest::array::uniform6(0.0f64..=1.0), 1..6),
            new in proptest::array::uniform6(0.0f64..=1.0),
            shift in 0usize..6,
        ) {
            let mut h = ParamHistory::new(8);
            let mut h_rot = ParamHistory::new(8);
            for r in &past {
                let mut rot = *r;
                rot.rotate_left(shift);
                h.push(P, r);
                h_rot.push(P, &rot);
            }
            let deltas = [0.05, 0.1, 0.15, 0.2, 0.25, 0.3];
            let mut deltas_rot = deltas;
            deltas_rot.rotate_left(shift);
            let c = VerificationConfig { per_parameter_delta: Some(deltas), ..VerificationConfig::default() };
            let c_rot = VerificationConfig { per_parameter_delta: Some(deltas_rot), ..VerificationConfig::default() };
            let mut new_rot = new;
            new_rot.rotate_left(shift);
            let mut expected = verify(&fb(1, new), &c, &h).ratings;
            expected.rotate_left(shift);
            prop_assert_eq!(verify(&fb(1, new_rot), &c_rot, &h_rot).ratings, expected);
        }
    }
}
