//! Config-driven experiments: presets, multi-seed runs, metric files and
//! run-to-run comparison.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::adversary::AttackSchedule;
use crate::attestation::{Check, DefenseConfig};
use crate::data::{self, ShardPlan, SpeedSeries, SyntheticParams};
use crate::error::{Error, Result};
use crate::model::{ModelSpec, TrainConfig};
use crate::protocol::{ProtocolConfig, RoundRecord, Simulation, SimulationConfig, TopologyConfig};
use crate::rng;

pub const ROUNDS_FILE: &str = "rounds.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved.json";
pub const COMPARE_FILE: &str = "compare.json";
pub const OUT_ENV: &str = "ATTESTFL_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    /// Generated per seed; the run seed is mixed into `seed`.
    Synthetic(SyntheticParams),
    Csv {
        path: PathBuf,
    },
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Synthetic(SyntheticParams::default())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub name: String,
    pub rounds: u64,
    pub seeds: Vec<u64>,
    pub output_dir: PathBuf,
    pub model: ModelSpec,
    pub train: TrainConfig,
    pub data: DataSource,
    pub shard: ShardPlan,
    pub topology: TopologyConfig,
    pub protocol: ProtocolConfig,
    pub defense: DefenseConfig,
    pub attack: AttackSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            rounds: 100,
            seeds: vec![0, 1, 2, 3, 4],
            output_dir: PathBuf::from("runs/experiment"),
            model: ModelSpec::default(),
            train: TrainConfig::default(),
            data: DataSource::default(),
            shard: ShardPlan::default(),
            topology: TopologyConfig::default(),
            protocol: ProtocolConfig::default(),
            defense: DefenseConfig::default(),
            attack: AttackSchedule::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| {
            let message = e.message().to_string();
            let field = e
                .span()
                .map(|s| {
                    let line = text[..s.start].lines().count().max(1);
                    format!("line {line}")
                })
                .unwrap_or_else(|| "<root>".into());
            Error::Config { field, message }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.rounds == 0 {
            return Err(Error::config("rounds", "must be >= 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        self.model.validate()?;
        self.train.validate()?;
        if let DataSource::Synthetic(p) = &self.data {
            p.validate()?;
        }
        self.shard.validate()?;
        if self.topology.rsu_count == 0 {
            return Err(Error::config("topology.rsu_count", "must be >= 1"));
        }
        self.protocol.validate()?;
        self.defense.validate()?;
        self.attack.validate(self.shard.worker_count)?;
        Ok(())
    }

    pub fn simulation(&self) -> SimulationConfig {
        SimulationConfig {
            model: self.model,
            train: self.train,
            protocol: self.protocol.clone(),
            topology: self.topology,
            defense: self.defense.clone(),
            attack: self.attack.clone(),
        }
    }

    /// `ATTESTFL_OUT`, when set, wins over `output_dir`.
    pub fn resolved_output_dir(&self) -> PathBuf {
        std::env::var_os(OUT_ENV)
            .map(PathBuf::from)
            .unwrap_or_else(|| self.output_dir.clone())
    }

    fn series_for_seed(&self, seed: u64) -> Result<Vec<SpeedSeries>> {
        match &self.data {
            DataSource::Synthetic(p) => data::generate_synthetic(&SyntheticParams {
                seed: rng::derive_seed(p.seed, &[seed]),
                ..*p
            }),
            DataSource::Csv { path } => data::ingest_csv(path),
        }
    }

    /// Builds the simulation for one seed.
    pub fn build(&self, seed: u64) -> Result<Simulation> {
        let series = self.series_for_seed(seed)?;
        let sharding = data::prepare(&series, &self.shard, self.model.input_window, self.model.horizon, seed)?;
        Simulation::new(self.simulation(), sharding, seed)
    }

    pub fn run_seed(&self, seed: u64) -> Result<Vec<RoundRecord>> {
        let mut sim = self.build(seed).map_err(|e| Error::Run {
            seed,
            round: 0,
            source: Box::new(e),
        })?;
        sim.run(self.rounds)
    }
}

/// Detection quality over post-grace rounds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Detection {
    pub malicious_submissions: usize,
    pub malicious_excluded: usize,
    pub benign_submissions: usize,
    pub benign_excluded: usize,
    pub recall: Option<f64>,
    pub precision: Option<f64>,
    pub false_positive_rate: Option<f64>,
}

impl Detection {
    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a RoundRecord>, after_round: u64) -> Self {
        let mut d = Detection::default();
        for r in records.into_iter().filter(|r| r.iteration > after_round) {
            for w in &r.workers {
                match (w.malicious, w.reliable) {
                    (true, reliable) => {
                        d.malicious_submissions += 1;
                        d.malicious_excluded += usize::from(!reliable);
                    }
                    (false, reliable) => {
                        d.benign_submissions += 1;
                        d.benign_excluded += usize::from(!reliable);
                    }
                }
            }
        }
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        d.recall = ratio(d.malicious_excluded, d.malicious_submissions);
        d.false_positive_rate = ratio(d.benign_excluded, d.benign_submissions);
        d.precision = ratio(d.malicious_excluded, d.malicious_excluded + d.benign_excluded);
        d
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub first_round_loss: f64,
    pub final_loss: f64,
    pub stalled_rounds: usize,
    pub detection: Detection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub name: String,
    pub rounds: u64,
    pub grace_rounds: u64,
    pub seeds: Vec<SeedSummary>,
    pub mean_final_loss: f64,
    pub detection: Detection,
}

impl Summary {
    pub fn new(cfg: &ExperimentConfig, runs: &[(u64, Vec<RoundRecord>)]) -> Self {
        let grace = cfg.defense.grace_rounds;
        let seeds: Vec<SeedSummary> = runs
            .iter()
            .map(|(seed, records)| SeedSummary {
                seed: *seed,
                first_round_loss: records.first().map_or(f64::NAN, |r| r.validation_loss),
                final_loss: records.last().map_or(f64::NAN, |r| r.validation_loss),
                stalled_rounds: records.iter().filter(|r| r.stalled).count(),
                detection: Detection::from_records(records, grace),
            })
            .collect();
        let mean_final_loss = seeds.iter().map(|s| s.final_loss).sum::<f64>() / seeds.len().max(1) as f64;
        Summary {
            name: cfg.name.clone(),
            rounds: cfg.rounds,
            grace_rounds: grace,
            mean_final_loss,
            detection: Detection::from_records(runs.iter().flat_map(|(_, r)| r), grace),
            seeds,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub runs: Vec<(u64, Vec<RoundRecord>)>,
    pub summary: Summary,
}

/// Runs every seed in order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let runs = cfg
        .seeds
        .iter()
        .map(|&seed| Ok((seed, cfg.run_seed(seed)?)))
        .collect::<Result<Vec<_>>>()?;
    let summary = Summary::new(cfg, &runs);
    Ok(RunOutput { runs, summary })
}

pub fn rounds_jsonl(runs: &[(u64, Vec<RoundRecord>)]) -> Result<String> {
    let mut out = String::new();
    for (_, records) in runs {
        for r in records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
    }
    Ok(out)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(contents.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Writes `rounds.jsonl`, `summary.json` and `config.resolved.json` to `dir`.
pub fn write_outputs(dir: &Path, cfg: &ExperimentConfig, output: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = ExperimentConfig {
        output_dir: dir.to_path_buf(),
        ..cfg.clone()
    };
    write_file(&dir.join(ROUNDS_FILE), &rounds_jsonl(&output.runs)?)?;
    write_file(&dir.join(SUMMARY_FILE), &serde_json::to_string_pretty(&output.summary)?)?;
    write_file(
        &dir.join(RESOLVED_CONFIG_FILE),
        &serde_json::to_string_pretty(&resolved)?,
    )?;
    Ok(())
}

pub fn read_rounds(path: &Path) -> Result<Vec<RoundRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(file)
        .lines()
        .enumerate()
        .filter(|(_, l)| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|(i, line)| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: i as u64 + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

fn read_resolved(dir: &Path) -> Result<ExperimentConfig> {
    let path = dir.join(RESOLVED_CONFIG_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    Ok(serde_json::from_str(&text)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedRound {
    pub seed: u64,
    pub iteration: u64,
    pub loss_a: f64,
    pub loss_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub run_a: String,
    pub run_b: String,
    pub mean_final_loss_a: f64,
    pub mean_final_loss_b: f64,
    /// `mean_final_loss_b / mean_final_loss_a`.
    pub final_loss_ratio: f64,
    pub rounds: Vec<PairedRound>,
}

/// Fields that must agree for two runs to be comparable.
fn compatibility_key(cfg: &ExperimentConfig) -> Result<Vec<(&'static str, serde_json::Value)>> {
    Ok(vec![
        ("rounds", serde_json::to_value(cfg.rounds)?),
        ("seeds", serde_json::to_value(&cfg.seeds)?),
        ("model", serde_json::to_value(cfg.model)?),
        ("train", serde_json::to_value(cfg.train)?),
        ("data", serde_json::to_value(&cfg.data)?),
        ("shard", serde_json::to_value(&cfg.shard)?),
        ("topology", serde_json::to_value(cfg.topology)?),
        ("protocol", serde_json::to_value(&cfg.protocol)?),
        ("attack", serde_json::to_value(&cfg.attack)?),
    ])
}

/// Pairs two completed runs round by round.
pub fn compare_runs(dir_a: &Path, dir_b: &Path) -> Result<Comparison> {
    let (cfg_a, cfg_b) = (read_resolved(dir_a)?, read_resolved(dir_b)?);
    for ((field, a), (_, b)) in compatibility_key(&cfg_a)?.into_iter().zip(compatibility_key(&cfg_b)?) {
        if a != b {
            return Err(Error::Incompatible(field.into()));
        }
    }
    let rounds_a = read_rounds(&dir_a.join(ROUNDS_FILE))?;
    let rounds_b = read_rounds(&dir_b.join(ROUNDS_FILE))?;
    if rounds_a.len() != rounds_b.len() {
        return Err(Error::Incompatible("rounds".into()));
    }
    let rounds: Vec<PairedRound> = rounds_a
        .iter()
        .zip(&rounds_b)
        .map(|(a, b)| {
            if (a.seed, a.iteration) != (b.seed, b.iteration) {
                return Err(Error::Incompatible("rounds".into()));
            }
            Ok(PairedRound {
                seed: a.seed,
                iteration: a.iteration,
                loss_a: a.validation_loss,
                loss_b: b.validation_loss,
            })
        })
        .collect::<Result<_>>()?;
    let finals = |records: &[RoundRecord]| -> f64 {
        let mut last: BTreeMap<u64, f64> = BTreeMap::new();
        for r in records {
            last.insert(r.seed, r.validation_loss);
        }
        last.values().sum::<f64>() / last.len().max(1) as f64
    };
    let (fa, fb) = (finals(&rounds_a), finals(&rounds_b));
    Ok(Comparison {
        run_a: cfg_a.name,
        run_b: cfg_b.name,
        mean_final_loss_a: fa,
        mean_final_loss_b: fb,
        final_loss_ratio: fb / fa,
        rounds,
    })
}

pub fn write_comparison(path: &Path, cmp: &Comparison) -> Result<()> {
    write_file(path, &serde_json::to_string_pretty(cmp)?)
}

/// Attack scenarios shipped as presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Benign,
    Static,
    Pretence,
    RandomizedPretence,
    Sybil,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Benign,
        Scenario::Static,
        Scenario::Pretence,
        Scenario::RandomizedPretence,
        Scenario::Sybil,
    ];

    pub fn slug(&self) -> &'static str {
        match self {
            Scenario::Benign => "benign",
            Scenario::Static => "static",
            Scenario::Pretence => "pretence",
            Scenario::RandomizedPretence => "randomized",
            Scenario::Sybil => "sybil",
        }
    }

    pub fn attack(&self) -> AttackSchedule {
        match self {
            Scenario::Benign => AttackSchedule::none(),
            Scenario::Static => AttackSchedule::static_attack(&[0]),
            Scenario::Pretence => AttackSchedule::pretence(&[0, 1]),
            Scenario::RandomizedPretence => AttackSchedule::randomized_pretence(1),
            Scenario::Sybil => AttackSchedule::sybil(3),
        }
    }
}

/// Defense settings shipped as presets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DefenseSetting {
    None,
    Afl1,
    Afl2,
    Afl3,
    All,
}

impl DefenseSetting {
    pub const ALL: [DefenseSetting; 5] = [
        DefenseSetting::None,
        DefenseSetting::Afl1,
        DefenseSetting::Afl2,
        DefenseSetting::Afl3,
        DefenseSetting::All,
    ];

    pub fn slug(&self) -> &'static str {
        match self {
            DefenseSetting::None => "none",
            DefenseSetting::Afl1 => "afl1",
            DefenseSetting::Afl2 => "afl2",
            DefenseSetting::Afl3 => "afl3",
            DefenseSetting::All => "all",
        }
    }

    pub fn config(&self) -> DefenseConfig {
        match self {
            DefenseSetting::None => DefenseConfig::default(),
            DefenseSetting::Afl1 => DefenseConfig::with(&[Check::Afl1]),
            DefenseSetting::Afl2 => DefenseConfig::with(&[Check::Afl2]),
            DefenseSetting::Afl3 => DefenseConfig::with(&[Check::Afl3]),
            DefenseSetting::All => DefenseConfig::with(&Check::ALL),
        }
    }
}

pub fn preset_config(scenario: Scenario, defense: DefenseSetting) -> ExperimentConfig {
    let name = format!("{}-{}", scenario.slug(), defense.slug());
    ExperimentConfig {
        output_dir: PathBuf::from("runs").join(&name),
        name,
        defense: defense.config(),
        attack: scenario.attack(),
        ..ExperimentConfig::default()
    }
}

pub fn preset_names() -> Vec<String> {
    Scenario::ALL
        .iter()
        .flat_map(|s| {
            DefenseSetting::ALL
                .iter()
                .map(move |d| format!("{}-{}", s.slug(), d.slug()))
        })
        .collect()
}

pub fn preset(name: &str) -> Option<ExperimentConfig> {
    Scenario::ALL
        .iter()
        .flat_map(|&s| DefenseSetting::ALL.iter().map(move |&d| (s, d)))
        .find(|(s, d)| format!("{}-{}", s.slug(), d.slug()) == name)
        .map(|(s, d)| preset_config(s, d))
}
