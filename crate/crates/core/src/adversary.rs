//! Model-poisoning attackers: static noise, pretence (square-wave duty
//! cycle), randomized pretence, and Sybil identity churn.

use std::collections::BTreeSet;

use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::WeightVector;
use crate::rng::{self, tag};
use crate::WorkerId;

/// First identity handed to Sybil workers.
pub const SYBIL_ID_BASE: WorkerId = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    None,
    Static,
    Pretence,
    RandomizedPretence,
    Sybil,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackSchedule {
    pub kind: AttackKind,
    /// Compromised base workers (static and pretence kinds).
    pub attacker_ids: Vec<WorkerId>,
    /// Workers drawn per round (randomized pretence).
    pub attacker_count: usize,
    /// Rounds per benign phase and per malicious phase.
    pub benign_period: u64,
    pub switch_seed: u64,
    /// Fresh Sybil identities per round.
    pub sybil_spawn: usize,
    /// Rounds each Sybil identity stays active.
    pub sybil_lifetime: u64,
    /// Standard deviation of the noise weights.
    pub noise_scale: f64,
}

impl Default for AttackSchedule {
    fn default() -> Self {
        AttackSchedule {
            kind: AttackKind::None,
            attacker_ids: Vec::new(),
            attacker_count: 1,
            benign_period: 5,
            switch_seed: 0,
            sybil_spawn: 3,
            sybil_lifetime: 1,
            noise_scale: 1.0,
        }
    }
}

impl AttackSchedule {
    pub fn none() -> Self {
        AttackSchedule::default()
    }

    pub fn static_attack(attacker_ids: &[WorkerId]) -> Self {
        AttackSchedule {
            kind: AttackKind::Static,
            attacker_ids: attacker_ids.to_vec(),
            ..AttackSchedule::default()
        }
    }

    pub fn pretence(attacker_ids: &[WorkerId]) -> Self {
        AttackSchedule {
            kind: AttackKind::Pretence,
            attacker_ids: attacker_ids.to_vec(),
            ..AttackSchedule::default()
        }
    }

    pub fn randomized_pretence(attacker_count: usize) -> Self {
        AttackSchedule {
            kind: AttackKind::RandomizedPretence,
            attacker_count,
            ..AttackSchedule::default()
        }
    }

    pub fn sybil(spawn: usize) -> Self {
        AttackSchedule {
            kind: AttackKind::Sybil,
            sybil_spawn: spawn,
            ..AttackSchedule::default()
        }
    }

    pub fn validate(&self, worker_count: usize) -> Result<()> {
        if matches!(self.kind, AttackKind::Static | AttackKind::Pretence) {
            if self.attacker_ids.is_empty() {
                return Err(Error::config("attack.attacker_ids", "must name at least one worker"));
            }
            if let Some(bad) = self.attacker_ids.iter().find(|&&id| id as usize >= worker_count) {
                return Err(Error::config(
                    "attack.attacker_ids",
                    format!("worker {bad} does not exist"),
                ));
            }
        }
        if self.kind == AttackKind::RandomizedPretence && self.attacker_count > worker_count {
            return Err(Error::config("attack.attacker_count", "exceeds worker count"));
        }
        if matches!(self.kind, AttackKind::Pretence | AttackKind::RandomizedPretence) && self.benign_period == 0 {
            return Err(Error::config("attack.benign_period", "must be >= 1"));
        }
        if self.kind == AttackKind::Sybil && self.sybil_lifetime == 0 {
            return Err(Error::config("attack.sybil_lifetime", "must be >= 1"));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::config(
                "attack.noise_scale",
                "must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// I.i.d. `N(0, noise_scale^2)` weights, keyed on `(seed, worker, round)` only.
pub fn static_update(len: usize, noise_scale: f64, seed: u64, worker: WorkerId, round: u64) -> WeightVector {
    if noise_scale == 0.0 {
        return WeightVector::zeros(len);
    }
    let normal = Normal::new(0.0, noise_scale).expect("noise scale validated");
    let mut rng = rng::stream(seed, &[tag::ATTACK, worker as u64, round]);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Square wave: `benign_period` honest rounds, then as many malicious ones.
pub fn pretence_is_benign(round: u64, benign_period: u64) -> bool {
    round % (2 * benign_period) < benign_period
}

/// Index of the duty cycle containing `round`.
pub fn pretence_phase(round: u64, benign_period: u64) -> u64 {
    round / (2 * benign_period)
}

/// Falsified weights a pretence attacker replays for a whole malicious phase.
pub fn pretence_update(len: usize, noise_scale: f64, seed: u64, worker: WorkerId, phase: u64) -> WeightVector {
    if noise_scale == 0.0 {
        return WeightVector::zeros(len);
    }
    let normal = Normal::new(0.0, noise_scale).expect("noise scale validated");
    let mut rng = rng::stream(seed, &[tag::ATTACK, worker as u64, u64::MAX, phase]);
    (0..len).map(|_| normal.sample(&mut rng)).collect()
}

/// Seeded per-round draw of exactly `count` workers.
pub fn randomized_pretence_assign(
    workers: &[WorkerId],
    count: usize,
    round: u64,
    switch_seed: u64,
) -> BTreeSet<WorkerId> {
    let count = count.min(workers.len());
    let mut rng = rng::stream(switch_seed, &[tag::SWITCH, round]);
    index::sample(&mut rng, workers.len(), count)
        .into_iter()
        .map(|i| workers[i])
        .collect()
}

/// Sybil identities active in `round`: `spawn` new ones per round, each
/// living `lifetime` rounds.
pub fn sybil_identities(round: u64, spawn: usize, lifetime: u64) -> Vec<WorkerId> {
    let first = round.saturating_sub(lifetime - 1).max(1);
    (first..=round)
        .flat_map(|r| (0..spawn).map(move |k| SYBIL_ID_BASE + ((r - 1) * spawn as u64 + k as u64) as WorkerId))
        .collect()
}

/// What a participant does in a round.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    Honest,
    Noise,
}

/// Attack schedule bound to one run.
#[derive(Debug, Clone)]
pub struct Adversary {
    schedule: AttackSchedule,
    seed: u64,
}

impl Adversary {
    pub fn new(schedule: AttackSchedule, seed: u64) -> Self {
        Adversary { schedule, seed }
    }

    pub fn schedule(&self) -> &AttackSchedule {
        &self.schedule
    }

    /// Behavior of each base worker this round.
    pub fn behavior(&self, worker: WorkerId, base_workers: &[WorkerId], round: u64) -> Behavior {
        let s = &self.schedule;
        let malicious = match s.kind {
            AttackKind::None | AttackKind::Sybil => false,
            AttackKind::Static => s.attacker_ids.contains(&worker),
            AttackKind::Pretence => s.attacker_ids.contains(&worker) && !pretence_is_benign(round, s.benign_period),
            AttackKind::RandomizedPretence => {
                !pretence_is_benign(round, s.benign_period)
                    && randomized_pretence_assign(
                        base_workers,
                        s.attacker_count,
                        round,
                        rng::derive_seed(s.switch_seed, &[self.seed]),
                    )
                    .contains(&worker)
            }
        };
        if malicious {
            Behavior::Noise
        } else {
            Behavior::Honest
        }
    }

    pub fn sybils(&self, round: u64) -> Vec<WorkerId> {
        match self.schedule.kind {
            AttackKind::Sybil => sybil_identities(round, self.schedule.sybil_spawn, self.schedule.sybil_lifetime),
            _ => Vec::new(),
        }
    }

    /// Falsified weights sent by `worker` in a malicious round.
    pub fn noise(&self, len: usize, worker: WorkerId, round: u64) -> WeightVector {
        let s = &self.schedule;
        match s.kind {
            AttackKind::Pretence | AttackKind::RandomizedPretence => pretence_update(
                len,
                s.noise_scale,
                self.seed,
                worker,
                pretence_phase(round, s.benign_period),
            ),
            _ => static_update(len, s.noise_scale, self.seed, worker, round),
        }
    }
}
