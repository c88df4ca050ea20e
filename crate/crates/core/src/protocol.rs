//! Synchronous FL rounds: the chief broadcasts the global model through the
//! RSUs, workers answer with local models, the attestation gate picks the
//! reliable ones, and the chief averages them.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::adversary::{Adversary, AttackSchedule, Behavior};
use crate::attestation::{Attestor, CheckOutcome, DefenseConfig};
use crate::data::{Sample, Sharding};
use crate::error::{Error, Result};
use crate::model::{self, ModelSpec, TrainConfig, WeightVector};
use crate::rng::{self, tag};
use crate::WorkerId;

pub type RsuId = u32;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlobalModel {
    pub iteration: u64,
    pub weights: WeightVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalUpdate {
    pub worker_id: WorkerId,
    pub iteration: u64,
    pub weights: WeightVector,
    /// Ground truth: the submitter sent poisoned weights.
    pub malicious: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub rsu_count: u32,
    /// Reattach workers to a random RSU every round.
    pub mobility: bool,
}

impl Default for TopologyConfig {
    fn default() -> Self {
        TopologyConfig {
            rsu_count: 3,
            mobility: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Topology {
    pub rsus: Vec<RsuId>,
    pub chief: String,
    pub attachment: BTreeMap<WorkerId, RsuId>,
}

impl Topology {
    pub fn new(rsu_count: u32) -> Self {
        Topology {
            rsus: (0..rsu_count).collect(),
            chief: "zonal-chief".to_string(),
            attachment: BTreeMap::new(),
        }
    }

    /// Attachment for `round`. With mobility each worker lands on a seeded
    /// random RSU; without it the attachment is fixed by worker id.
    pub fn reattach(&mut self, round: u64, workers: &[WorkerId], mobility: bool, seed: u64) {
        let n = self.rsus.len() as u64;
        self.attachment = workers
            .iter()
            .map(|&w| {
                let slot = if mobility {
                    rng::derive_seed(seed, &[tag::MOBILITY, w as u64, round]) % n
                } else {
                    w as u64 % n
                };
                (w, self.rsus[slot as usize])
            })
            .collect();
    }
}

/// A global model handed to a worker through an RSU.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivery {
    pub worker_id: WorkerId,
    pub rsu: RsuId,
    pub model: GlobalModel,
}

pub fn broadcast(gm: &GlobalModel, topology: &Topology, workers: &[WorkerId]) -> Result<Vec<Delivery>> {
    workers
        .iter()
        .map(|&w| {
            let rsu = *topology.attachment.get(&w).ok_or(Error::Topology(w))?;
            Ok(Delivery {
                worker_id: w,
                rsu,
                model: gm.clone(),
            })
        })
        .collect()
}

/// Gathers one update per delivery, sorted by worker id.
pub fn collect<F>(round: u64, deliveries: &[Delivery], mut respond: F) -> Result<Vec<LocalUpdate>>
where
    F: FnMut(&Delivery) -> Result<LocalUpdate>,
{
    let mut seen = BTreeSet::new();
    let mut updates = Vec::with_capacity(deliveries.len());
    for d in deliveries {
        let u = respond(d)?;
        if u.worker_id != d.worker_id || u.iteration != round {
            return Err(Error::Protocol(format!(
                "worker {} answered as ({}, iteration {}) in round {round}",
                d.worker_id, u.worker_id, u.iteration
            )));
        }
        if !seen.insert(u.worker_id) {
            return Err(Error::Protocol(format!("duplicate update from worker {}", u.worker_id)));
        }
        updates.push(u);
    }
    updates.sort_by_key(|u| u.worker_id);
    Ok(updates)
}

/// Weighted coordinate-wise mean, summed in ascending worker-id order.
/// `weights`, when given, pairs with `updates` by position.
pub fn fedavg(updates: &[LocalUpdate], weights: Option<&[f64]>) -> Result<WeightVector> {
    if updates.is_empty() {
        return Err(Error::EmptyAggregation);
    }
    if let Some(w) = weights {
        if w.len() != updates.len() {
            return Err(Error::Dimension {
                expected: updates.len(),
                actual: w.len(),
            });
        }
        if w.iter().any(|&x| !(x >= 0.0 && x.is_finite())) || w.iter().sum::<f64>() <= 0.0 {
            return Err(Error::Argument(
                "aggregation weights must be non-negative with a positive sum".into(),
            ));
        }
    }
    let dim = updates[0].weights.len();
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].worker_id);

    let mut acc = vec![0.0; dim];
    let mut total = 0.0;
    for i in order {
        let u = &updates[i];
        u.weights.check_len(dim)?;
        let w = weights.map_or(1.0, |w| w[i]);
        for (a, x) in acc.iter_mut().zip(u.weights.iter()) {
            *a += w * x;
        }
        total += w;
    }
    Ok(acc.into_iter().map(|a| a / total).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    /// Weight by shard sample count; Sybils claim the mean shard size.
    Samples,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProtocolConfig {
    /// Fraction of base workers selected each round.
    pub participation_fraction: f64,
    pub weighting: Weighting,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            participation_fraction: 1.0,
            weighting: Weighting::Uniform,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.participation_fraction > 0.0 && self.participation_fraction <= 1.0) {
            return Err(Error::config("protocol.participation_fraction", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

/// Everything a simulation needs besides the data.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimulationConfig {
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub protocol: ProtocolConfig,
    pub topology: TopologyConfig,
    pub defense: DefenseConfig,
    pub attack: AttackSchedule,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkerRecord {
    pub worker_id: WorkerId,
    pub rsu: RsuId,
    pub malicious: bool,
    pub sybil: bool,
    pub distance: f64,
    pub similarity: Option<f64>,
    pub validation_error: f64,
    pub reliable: bool,
    pub afl1: CheckOutcome,
    pub afl2: CheckOutcome,
    pub afl3: CheckOutcome,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub seed: u64,
    pub iteration: u64,
    pub validation_loss: f64,
    /// No worker passed the gate; the global model was carried over.
    pub stalled: bool,
    pub real: Vec<WorkerId>,
    pub workers: Vec<WorkerRecord>,
}

/// One seeded FL run.
#[derive(Debug, Clone)]
pub struct Simulation {
    cfg: SimulationConfig,
    seed: u64,
    gm: GlobalModel,
    shards: BTreeMap<WorkerId, Vec<Sample>>,
    validation: Vec<Sample>,
    topology: Topology,
    attestor: Attestor,
    adversary: Adversary,
    mean_shard_size: f64,
}

impl Simulation {
    pub fn new(cfg: SimulationConfig, sharding: Sharding, seed: u64) -> Result<Self> {
        cfg.model.validate()?;
        cfg.train.validate()?;
        cfg.protocol.validate()?;
        cfg.defense.validate()?;
        cfg.attack.validate(sharding.shards.len())?;
        if cfg.topology.rsu_count == 0 {
            return Err(Error::config("topology.rsu_count", "must be >= 1"));
        }
        let shards: BTreeMap<WorkerId, Vec<Sample>> =
            sharding.shards.into_iter().map(|s| (s.worker_id, s.samples)).collect();
        let mean_shard_size = shards.values().map(|s| s.len() as f64).sum::<f64>() / shards.len() as f64;
        let gm = GlobalModel {
            iteration: 0,
            weights: model::init_weights(&cfg.model, rng::derive_seed(seed, &[cfg.train.seed])),
        };
        Ok(Simulation {
            topology: Topology::new(cfg.topology.rsu_count),
            attestor: Attestor::new(cfg.defense.clone(), shards.keys().copied()),
            adversary: Adversary::new(cfg.attack.clone(), seed),
            cfg,
            seed,
            gm,
            shards,
            validation: sharding.validation,
            mean_shard_size,
        })
    }

    pub fn global(&self) -> &GlobalModel {
        &self.gm
    }

    pub fn validation(&self) -> &[Sample] {
        &self.validation
    }

    pub fn config(&self) -> &SimulationConfig {
        &self.cfg
    }

    pub fn validation_loss(&self) -> Result<f64> {
        model::mse(&self.cfg.model, &self.gm.weights, &self.validation)
    }

    fn participants(&self, round: u64) -> (Vec<WorkerId>, Vec<WorkerId>) {
        let base: Vec<WorkerId> = self.shards.keys().copied().collect();
        let frac = self.cfg.protocol.participation_fraction;
        let active = if frac >= 1.0 {
            base.clone()
        } else {
            let k = ((base.len() as f64 * frac).ceil() as usize).clamp(1, base.len());
            let mut rng = rng::stream(self.seed, &[tag::PARTICIPATION, round]);
            let mut picked: Vec<WorkerId> = index::sample(&mut rng, base.len(), k)
                .into_iter()
                .map(|i| base[i])
                .collect();
            picked.sort_unstable();
            picked
        };
        (base, active)
    }

    fn respond(&self, d: &Delivery, base: &[WorkerId], round: u64) -> Result<LocalUpdate> {
        let len = self.cfg.model.param_count();
        let (weights, malicious) = match self.shards.get(&d.worker_id) {
            None => (self.adversary.noise(len, d.worker_id, round), true),
            Some(shard) => match self.adversary.behavior(d.worker_id, base, round) {
                Behavior::Noise => (self.adversary.noise(len, d.worker_id, round), true),
                Behavior::Honest => {
                    let cfg = TrainConfig {
                        seed: rng::derive_seed(self.seed, &[self.cfg.train.seed, d.worker_id as u64]),
                        ..self.cfg.train
                    };
                    (
                        model::local_train(&self.cfg.model, &d.model.weights, shard, &cfg, round)?,
                        false,
                    )
                }
            },
        };
        Ok(LocalUpdate {
            worker_id: d.worker_id,
            iteration: round,
            weights,
            malicious,
        })
    }

    /// Broadcast, collect, gate, aggregate, evaluate.
    pub fn run_round(&mut self) -> Result<RoundRecord> {
        let round = self.gm.iteration + 1;
        let (base, mut active) = self.participants(round);
        active.extend(self.adversary.sybils(round));
        self.topology
            .reattach(round, &active, self.cfg.topology.mobility, self.seed);

        let deliveries = broadcast(&self.gm, &self.topology, &active)?;
        let updates = collect(round, &deliveries, |d| self.respond(d, &base, round))?;

        let pairs: Vec<(WorkerId, &WeightVector)> = updates.iter().map(|u| (u.worker_id, &u.weights)).collect();
        let gate = self
            .attestor
            .gate(round, &self.gm.weights, &pairs, &self.cfg.model, &self.validation)?;

        let accepted: Vec<LocalUpdate> = updates
            .iter()
            .filter(|u| gate.real.contains(&u.worker_id))
            .cloned()
            .collect();
        let stalled = accepted.is_empty();
        let weights = if stalled {
            self.gm.weights.clone()
        } else {
            let counts: Option<Vec<f64>> = match self.cfg.protocol.weighting {
                Weighting::Uniform => None,
                Weighting::Samples => Some(
                    accepted
                        .iter()
                        .map(|u| {
                            self.shards
                                .get(&u.worker_id)
                                .map_or(self.mean_shard_size, |s| s.len() as f64)
                        })
                        .collect(),
                ),
            };
            fedavg(&accepted, counts.as_deref())?
        };
        self.gm = GlobalModel {
            iteration: round,
            weights,
        };

        let workers = updates
            .iter()
            .zip(&gate.verdicts)
            .map(|(u, v)| {
                let obs = gate.observations[&u.worker_id];
                WorkerRecord {
                    worker_id: u.worker_id,
                    rsu: self.topology.attachment[&u.worker_id],
                    malicious: u.malicious,
                    sybil: !self.shards.contains_key(&u.worker_id),
                    distance: obs.distance,
                    similarity: obs.similarity,
                    validation_error: obs.validation_error,
                    reliable: v.reliable,
                    afl1: v.afl1,
                    afl2: v.afl2,
                    afl3: v.afl3,
                }
            })
            .collect();
        Ok(RoundRecord {
            seed: self.seed,
            iteration: round,
            validation_loss: self.validation_loss()?,
            stalled,
            real: gate.real.into_iter().collect(),
            workers,
        })
    }

    /// Runs `rounds` rounds, tagging errors with seed and round.
    pub fn run(&mut self, rounds: u64) -> Result<Vec<RoundRecord>> {
        (0..rounds)
            .map(|_| {
                let round = self.gm.iteration + 1;
                self.run_round().map_err(|e| Error::Run {
                    seed: self.seed,
                    round,
                    source: Box::new(e),
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn update(id: WorkerId, values: &[f64]) -> LocalUpdate {
        LocalUpdate {
            worker_id: id,
            iteration: 1,
            weights: values.to_vec().into(),
            malicious: false,
        }
    }

    #[test]
    fn fedavg_examples() {
        let avg = fedavg(&[update(0, &[1.0, 1.0]), update(1, &[3.0, 3.0])], None).unwrap();
        assert_eq!(avg.as_slice(), &[2.0, 2.0]);

        let single = fedavg(&[update(4, &[0.1, -7.25])], None).unwrap();
        assert_eq!(single.as_slice(), &[0.1, -7.25]);

        let ups = [update(0, &[1.0, 0.0]), update(1, &[2.0, 0.0]), update(2, &[3.0, 0.0])];
        let avg = fedavg(&ups, Some(&[1.0, 1.0, 4.0])).unwrap();
        assert_eq!(avg.as_slice(), &[2.5, 0.0]);
    }

    #[test]
    fn fedavg_errors() {
        assert!(matches!(fedavg(&[], None), Err(Error::EmptyAggregation)));
        let ups = [update(0, &[1.0, 0.0]), update(1, &[2.0])];
        assert!(matches!(fedavg(&ups, None), Err(Error::Dimension { .. })));
    }

    #[test]
    fn broadcast_tags_rsu_and_preserves_payload() {
        let gm = GlobalModel {
            iteration: 3,
            weights: vec![0.5, -1.0].into(),
        };
        let workers: Vec<WorkerId> = (0..5).collect();
        let mut topo = Topology::new(2);
        topo.reattach(1, &workers, true, 7);
        let first = broadcast(&gm, &topo, &workers).unwrap();
        assert_eq!(first.len(), 5);
        assert!(first.iter().all(|d| d.model == gm && d.rsu < 2));

        let rsus_before: Vec<RsuId> = first.iter().map(|d| d.rsu).collect();
        let changed = (2..20).any(|round| {
            topo.reattach(round, &workers, true, 7);
            let again = broadcast(&gm, &topo, &workers).unwrap();
            assert!(again.iter().all(|d| d.model == gm));
            again.iter().map(|d| d.rsu).collect::<Vec<_>>() != rsus_before
        });
        assert!(changed, "mobility should move someone");

        assert!(broadcast(&gm, &topo, &[]).unwrap().is_empty());
        assert!(matches!(broadcast(&gm, &topo, &[99]), Err(Error::Topology(99))));
    }

    #[test]
    fn collect_rejects_duplicates() {
        let gm = GlobalModel {
            iteration: 0,
            weights: vec![0.0].into(),
        };
        let mut topo = Topology::new(1);
        topo.reattach(1, &[0, 1], false, 0);
        let mut ds = broadcast(&gm, &topo, &[0, 1]).unwrap();
        ds.push(ds[0].clone());
        let err = collect(1, &ds, |d| Ok(update(d.worker_id, &[1.0]))).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));

        let err = collect(2, &ds[..1], |d| Ok(update(d.worker_id, &[1.0]))).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)), "stale iteration");
    }

    proptest::proptest! {
        #[test]
        fn fedavg_stays_within_coordinate_range(
            rows in proptest::collection::vec(proptest::collection::vec(-50.0f64..50.0, 6), 1..12),
            counts in proptest::collection::vec(1.0f64..100.0, 12),
        ) {
            let ups: Vec<LocalUpdate> = rows.iter().enumerate().map(|(i, r)| update(i as WorkerId, r)).collect();
            let avg = fedavg(&ups, Some(&counts[..ups.len()])).unwrap();
            for (k, &v) in avg.iter().enumerate() {
                let lo = rows.iter().map(|r| r[k]).fold(f64::INFINITY, f64::min);
                let hi = rows.iter().map(|r| r[k]).fold(f64::NEG_INFINITY, f64::max);
                proptest::prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
            }
        }
    }

    #[test]
    fn static_attacker_ignores_global_model() {
        let sim = crate::experiment::preset("static-none").unwrap().build(0).unwrap();
        let base: Vec<WorkerId> = (0..5).collect();
        let delivery = |worker, weights: WeightVector| Delivery {
            worker_id: worker,
            rsu: 0,
            model: GlobalModel { iteration: 0, weights },
        };
        let len = sim.global().weights.len();
        let (a, b) = (WeightVector::zeros(len), sim.global().weights.clone());
        let attacker_a = sim.respond(&delivery(0, a.clone()), &base, 1).unwrap();
        let attacker_b = sim.respond(&delivery(0, b.clone()), &base, 1).unwrap();
        assert!(attacker_a.malicious);
        assert_eq!(attacker_a.weights, attacker_b.weights);
        let honest_a = sim.respond(&delivery(1, a), &base, 1).unwrap();
        let honest_b = sim.respond(&delivery(1, b), &base, 1).unwrap();
        assert!(!honest_a.malicious);
        assert_ne!(honest_a.weights, honest_b.weights);
    }
}
