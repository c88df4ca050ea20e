//! Behavior attestation: three history-based reliability checks and the
//! nested gate that decides which workers are aggregated in a round.
//!
//! * AFL1 tracks each worker's Euclidean distance to the global model it
//!   trained from. Non-training workers stay far from the cohort and do not
//!   converge.
//! * AFL2 tracks the cosine similarity of a worker's successive local models.
//!   Training workers produce strongly correlated successive models.
//! * AFL3 tracks each local model's error on the chief's validation set and
//!   flags workers whose error grows over the window.
//!
//! Checks run in the order AFL1, AFL2, AFL3 and stop at the first failure.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use serde::{Deserialize, Serialize};

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, WeightVector};
use crate::WorkerId;

pub fn euclidean_distance(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt())
}

/// `None` when either input has zero norm.
pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<Option<f64>> {
    if a.len() != b.len() {
        return Err(Error::Dimension {
            expected: a.len(),
            actual: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(None);
    }
    Ok(Some((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)))
}

/// Population mean and standard deviation.
fn mean_sd(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Check {
    Afl1,
    Afl2,
    Afl3,
}

impl Check {
    pub const ALL: [Check; 3] = [Check::Afl1, Check::Afl2, Check::Afl3];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DefenseConfig {
    pub enabled: BTreeSet<Check>,
    /// History window length z.
    pub window: usize,
    /// Rounds 1..=grace_rounds trust everyone.
    pub grace_rounds: u64,
    /// AFL1 outlier multiplier on the cohort standard deviation.
    pub kappa: f64,
    /// AFL2 similarity floor.
    pub tau_cos: f64,
    /// AFL3 tolerated relative error growth over the window.
    pub delta_err: f64,
    /// AFL2 on `LM - GM` deltas instead of raw local models.
    pub afl2_on_deltas: bool,
    /// Identities that join after the first round get no grace.
    pub sybil_strict: bool,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        DefenseConfig {
            enabled: BTreeSet::new(),
            window: 5,
            grace_rounds: 10,
            kappa: 1.0,
            tau_cos: 0.5,
            delta_err: 0.15,
            afl2_on_deltas: false,
            sybil_strict: true,
        }
    }
}

impl DefenseConfig {
    pub fn with(checks: &[Check]) -> Self {
        DefenseConfig {
            enabled: checks.iter().copied().collect(),
            ..DefenseConfig::default()
        }
    }

    pub fn is_enabled(&self, check: Check) -> bool {
        self.enabled.contains(&check)
    }

    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::config("defense.window", "must be >= 2"));
        }
        if self.grace_rounds < self.window as u64 {
            return Err(Error::config("defense.grace_rounds", "must be >= window"));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::config("defense.kappa", "must be > 0"));
        }
        if !(-1.0..=1.0).contains(&self.tau_cos) {
            return Err(Error::config("defense.tau_cos", "must lie in [-1, 1]"));
        }
        if !(self.delta_err >= 0.0 && self.delta_err.is_finite()) {
            return Err(Error::config("defense.delta_err", "must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub iteration: u64,
    pub update: WeightVector,
    pub global: WeightVector,
    pub distance: f64,
    /// Similarity to the update submitted just before this one.
    pub similarity: Option<f64>,
    pub error: f64,
}

/// The last `capacity` (local model, global model) pairs of one worker.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryWindow {
    pub worker_id: WorkerId,
    capacity: usize,
    entries: VecDeque<HistoryEntry>,
}

impl HistoryWindow {
    pub fn new(worker_id: WorkerId, capacity: usize) -> Self {
        HistoryWindow {
            worker_id,
            capacity,
            entries: VecDeque::with_capacity(capacity),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.entries.len() >= self.capacity
    }

    pub fn entries(&self) -> impl DoubleEndedIterator<Item = &HistoryEntry> + ExactSizeIterator {
        self.entries.iter()
    }

    pub fn latest(&self) -> Option<&HistoryEntry> {
        self.entries.back()
    }

    pub fn push(&mut self, entry: HistoryEntry) -> Result<()> {
        if let Some(last) = self.entries.back() {
            if entry.iteration <= last.iteration {
                return Err(Error::Protocol(format!(
                    "history for worker {} is at iteration {}, got {}",
                    self.worker_id, last.iteration, entry.iteration
                )));
            }
        }
        if self.entries.len() == self.capacity {
            self.entries.pop_front();
        }
        self.entries.push_back(entry);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CheckStatus {
    Pass,
    Fail,
    /// Not enough history; treated as a pass.
    NotReady,
    /// Inside the grace period; treated as a pass.
    Grace,
    /// An earlier check already failed.
    Skipped,
    Disabled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CheckOutcome {
    pub status: CheckStatus,
    pub statistic: Option<f64>,
}

impl CheckOutcome {
    fn new(status: CheckStatus, statistic: Option<f64>) -> Self {
        CheckOutcome { status, statistic }
    }

    fn verdict(pass: bool, statistic: f64) -> Self {
        let status = if pass { CheckStatus::Pass } else { CheckStatus::Fail };
        CheckOutcome::new(status, Some(statistic))
    }

    pub fn passed(&self) -> bool {
        matches!(
            self.status,
            CheckStatus::Pass | CheckStatus::NotReady | CheckStatus::Grace
        )
    }
}

/// This round's distances to the global model, for AFL1's cohort comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    distances: BTreeMap<WorkerId, f64>,
}

impl Cohort {
    pub fn new(distances: BTreeMap<WorkerId, f64>) -> Self {
        Cohort { distances }
    }

    /// Mean and standard deviation of every distance except `worker`'s.
    pub fn excluding(&self, worker: WorkerId) -> Option<(f64, f64)> {
        let others: Vec<f64> = self
            .distances
            .iter()
            .filter(|(&id, _)| id != worker)
            .map(|(_, &d)| d)
            .collect();
        (!others.is_empty()).then(|| mean_sd(&others))
    }
}

/// Cohort-outlier and non-convergence test on the distance to the global model.
///
/// Fails when the distance exceeds `mean + kappa * sd` of the other workers'
/// distances and the update is farther from the global model than the global
/// model is from the origin, i.e. it is no refinement of the broadcast model.
pub fn check_afl1(
    history: &HistoryWindow,
    worker: WorkerId,
    obs: &Observation,
    cohort: &Cohort,
    cfg: &DefenseConfig,
) -> CheckOutcome {
    let Some((mean, sd)) = cohort.excluding(worker) else {
        return CheckOutcome::new(CheckStatus::NotReady, None);
    };
    let z = if sd > 0.0 { (obs.distance - mean) / sd } else { 0.0 };
    if !history.is_full() {
        return CheckOutcome::new(CheckStatus::NotReady, Some(z));
    }
    let outlier = obs.distance > mean + cfg.kappa * sd;
    let detached = obs.relative_distance >= 1.0;
    CheckOutcome::verdict(!(outlier && detached), z)
}

/// Successive-similarity test. Fails when the latest similarity is below
/// `tau_cos` or the window's similarities strictly decrease throughout.
pub fn check_afl2(history: &HistoryWindow, similarity: Option<f64>, cfg: &DefenseConfig) -> CheckOutcome {
    let Some(current) = similarity else {
        // Zero-norm update: similarity undefined, fail-safe pass.
        return CheckOutcome::new(CheckStatus::NotReady, None);
    };
    if !history.is_full() {
        return CheckOutcome::new(CheckStatus::NotReady, Some(current));
    }
    let series: Option<Vec<f64>> = history
        .entries()
        .skip(1)
        .map(|e| e.similarity)
        .chain([Some(current)])
        .collect();
    let decreasing = series.is_some_and(|s| s.windows(2).all(|p| p[1] < p[0]));
    CheckOutcome::verdict(!(decreasing || current < cfg.tau_cos), current)
}

/// Validation-error growth test: fails when the error now exceeds the error
/// `window` rounds ago by more than `delta_err`. The statistic is the ratio.
pub fn check_afl3(history: &HistoryWindow, error: f64, cfg: &DefenseConfig) -> CheckOutcome {
    let Some(oldest) = history.entries().next().filter(|_| history.is_full()) else {
        return CheckOutcome::new(CheckStatus::NotReady, None);
    };
    let ratio = if oldest.error > 0.0 {
        error / oldest.error
    } else if error > 0.0 {
        f64::INFINITY
    } else {
        1.0
    };
    let pass = error <= oldest.error * (1.0 + cfg.delta_err) && error.is_finite();
    CheckOutcome::verdict(pass, ratio)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub worker_id: WorkerId,
    pub reliable: bool,
    pub afl1: CheckOutcome,
    pub afl2: CheckOutcome,
    pub afl3: CheckOutcome,
}

impl Verdict {
    pub fn outcome(&self, check: Check) -> &CheckOutcome {
        match check {
            Check::Afl1 => &self.afl1,
            Check::Afl2 => &self.afl2,
            Check::Afl3 => &self.afl3,
        }
    }
}

/// Per-worker measurements for one round, computed before gating.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub distance: f64,
    /// `distance` over the norm of the global model.
    pub relative_distance: f64,
    pub similarity: Option<f64>,
    pub validation_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateOutcome {
    pub real: BTreeSet<WorkerId>,
    pub verdicts: Vec<Verdict>,
    pub observations: BTreeMap<WorkerId, Observation>,
}

/// Holds per-worker histories and runs the reliability gate.
#[derive(Debug, Clone)]
pub struct Attestor {
    cfg: DefenseConfig,
    founders: BTreeSet<WorkerId>,
    histories: BTreeMap<WorkerId, HistoryWindow>,
}

impl Attestor {
    /// `founders` are the identities registered before the first round.
    pub fn new(cfg: DefenseConfig, founders: impl IntoIterator<Item = WorkerId>) -> Self {
        Attestor {
            cfg,
            founders: founders.into_iter().collect(),
            histories: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> &DefenseConfig {
        &self.cfg
    }

    pub fn history(&self, worker: WorkerId) -> Option<&HistoryWindow> {
        self.histories.get(&worker)
    }

    /// Distance, similarity and validation error of each update.
    pub fn observe(
        &self,
        global: &WeightVector,
        updates: &[(WorkerId, &WeightVector)],
        spec: &ModelSpec,
        validation: &[Sample],
    ) -> Result<BTreeMap<WorkerId, Observation>> {
        updates
            .iter()
            .map(|&(id, lm)| {
                let distance = euclidean_distance(lm, global)?;
                let norm = global.norm();
                let relative_distance = if norm > 0.0 { distance / norm } else { f64::INFINITY };
                let similarity = match self.histories.get(&id).and_then(HistoryWindow::latest) {
                    None => None,
                    Some(prev) if self.cfg.afl2_on_deltas => {
                        cosine_similarity(&lm.sub(global)?, &prev.update.sub(&prev.global)?)?
                    }
                    Some(prev) => cosine_similarity(lm, &prev.update)?,
                };
                let validation_error = model::mse(spec, lm, validation)?;
                Ok((
                    id,
                    Observation {
                        distance,
                        relative_distance,
                        similarity,
                        validation_error,
                    },
                ))
            })
            .collect()
    }

    /// Judges every update from `observations`; histories are not touched.
    pub fn judge(&self, round: u64, observations: &BTreeMap<WorkerId, Observation>) -> GateOutcome {
        let empty = HistoryWindow::new(0, self.cfg.window);
        let distances: BTreeMap<WorkerId, f64> = observations.iter().map(|(&id, o)| (id, o.distance)).collect();
        let cohort = Cohort::new(distances);
        let in_grace = round <= self.cfg.grace_rounds;
        let any_enabled = !self.cfg.enabled.is_empty();

        let verdicts: Vec<Verdict> = observations
            .iter()
            .map(|(&id, obs)| {
                let history = self.histories.get(&id).unwrap_or(&empty);
                let mut outcomes = [
                    check_afl1(history, id, obs, &cohort, &self.cfg),
                    check_afl2(history, obs.similarity, &self.cfg),
                    check_afl3(history, obs.validation_error, &self.cfg),
                ];
                let untrusted_newcomer = self.cfg.sybil_strict && !self.founders.contains(&id) && !history.is_full();
                let mut failed = false;
                for (check, outcome) in Check::ALL.iter().zip(outcomes.iter_mut()) {
                    outcome.status = if !self.cfg.is_enabled(*check) {
                        CheckStatus::Disabled
                    } else if untrusted_newcomer {
                        CheckStatus::Fail
                    } else if in_grace {
                        CheckStatus::Grace
                    } else if failed {
                        CheckStatus::Skipped
                    } else {
                        outcome.status
                    };
                    failed |= outcome.status == CheckStatus::Fail;
                }
                let reliable = !any_enabled
                    || Check::ALL
                        .iter()
                        .zip(&outcomes)
                        .filter(|(c, _)| self.cfg.is_enabled(**c))
                        .all(|(_, o)| o.passed());
                let [afl1, afl2, afl3] = outcomes;
                Verdict {
                    worker_id: id,
                    reliable,
                    afl1,
                    afl2,
                    afl3,
                }
            })
            .collect();
        GateOutcome {
            real: verdicts.iter().filter(|v| v.reliable).map(|v| v.worker_id).collect(),
            verdicts,
            observations: observations.clone(),
        }
    }

    /// Appends this round's updates to the histories. Transient identities
    /// absent this round are forgotten.
    pub fn record(
        &mut self,
        round: u64,
        global: &WeightVector,
        updates: &[(WorkerId, &WeightVector)],
        observations: &BTreeMap<WorkerId, Observation>,
    ) -> Result<()> {
        let present: BTreeSet<WorkerId> = updates.iter().map(|u| u.0).collect();
        self.histories
            .retain(|id, _| present.contains(id) || self.founders.contains(id));
        for &(id, lm) in updates {
            let obs = observations
                .get(&id)
                .ok_or_else(|| Error::Protocol(format!("no observation for worker {id}")))?;
            self.histories
                .entry(id)
                .or_insert_with(|| HistoryWindow::new(id, self.cfg.window))
                .push(HistoryEntry {
                    iteration: round,
                    update: lm.clone(),
                    global: global.clone(),
                    distance: obs.distance,
                    similarity: obs.similarity,
                    error: obs.validation_error,
                })?;
        }
        Ok(())
    }

    /// Observe, judge, then record.
    pub fn gate(
        &mut self,
        round: u64,
        global: &WeightVector,
        updates: &[(WorkerId, &WeightVector)],
        spec: &ModelSpec,
        validation: &[Sample],
    ) -> Result<GateOutcome> {
        let observations = self.observe(global, updates, spec, validation)?;
        let outcome = self.judge(round, &observations);
        self.record(round, global, updates, &observations)?;
        Ok(outcome)
    }
}
