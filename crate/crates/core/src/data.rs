//! Link-speed series: synthetic generation, CSV exchange, sliding windows,
//! and sharding across workers with a held-out chief validation set.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, tag};

/// Readings per day at a 5-minute refresh rate.
pub const TICKS_PER_DAY: usize = 288;

/// Uniformly spaced speed readings (km/h) for one road link. Reading `k` is
/// at timestamp index `start + k`, one tick per 5 minutes.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedSeries {
    pub link_id: String,
    pub start: u64,
    pub speeds: Vec<f64>,
}

impl SpeedSeries {
    pub fn len(&self) -> usize {
        self.speeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.speeds.is_empty()
    }

    pub fn readings(&self) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.speeds.iter().enumerate().map(|(k, &s)| (self.start + k as u64, s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticParams {
    pub links: usize,
    pub days: usize,
    pub seed: u64,
    /// Standard deviation of the additive Gaussian noise, km/h.
    pub noise_sd: f64,
}

impl Default for SyntheticParams {
    fn default() -> Self {
        SyntheticParams {
            links: 6,
            days: 7,
            seed: 0,
            noise_sd: 2.0,
        }
    }
}

impl SyntheticParams {
    pub fn validate(&self) -> Result<()> {
        if self.links == 0 {
            return Err(Error::config("data.synthetic.links", "must be >= 1"));
        }
        if self.days == 0 {
            return Err(Error::config("data.synthetic.days", "must be >= 1"));
        }
        if !(self.noise_sd.is_finite() && self.noise_sd >= 0.0) {
            return Err(Error::config(
                "data.synthetic.noise_sd",
                "must be a finite non-negative number",
            ));
        }
        Ok(())
    }
}

/// Raised-cosine dip centred at `centre` hours with half-width `half_width`.
fn rush_dip(hour: f64, centre: f64, half_width: f64) -> f64 {
    let d = (hour - centre).abs();
    if d >= half_width {
        0.0
    } else {
        0.5 * (1.0 + (PI * d / half_width).cos())
    }
}

/// Free-flow speed per link with morning and evening rush-hour dips and
/// Gaussian noise, clamped at zero.
pub fn generate_synthetic(params: &SyntheticParams) -> Result<Vec<SpeedSeries>> {
    params.validate()?;
    let noise = Normal::new(0.0, params.noise_sd).map_err(|e| Error::Argument(e.to_string()))?;
    let len = params.days * TICKS_PER_DAY;
    let series = (0..params.links)
        .map(|link| {
            let mut rng = rng::stream(params.seed, &[tag::DATA, link as u64]);
            let free_flow = rng.random_range(30.0..=60.0);
            let morning_depth = rng.random_range(0.25..=0.55) * free_flow;
            let evening_depth = rng.random_range(0.25..=0.55) * free_flow;
            let speeds = (0..len)
                .map(|t| {
                    let hour = (t % TICKS_PER_DAY) as f64 * 24.0 / TICKS_PER_DAY as f64;
                    let base = free_flow
                        - morning_depth * rush_dip(hour, 8.0, 2.0)
                        - evening_depth * rush_dip(hour, 17.5, 2.5);
                    let eps = if params.noise_sd > 0.0 {
                        noise.sample(&mut rng)
                    } else {
                        0.0
                    };
                    (base + eps).max(0.0)
                })
                .collect();
            SpeedSeries {
                link_id: format!("link-{link:03}"),
                start: 0,
                speeds,
            }
        })
        .collect();
    Ok(series)
}

#[derive(Debug, Serialize, Deserialize)]
struct CsvRow {
    link_id: String,
    timestamp_index: u64,
    speed_kmh: f64,
}

pub fn write_csv(series: &[SpeedSeries], path: &Path) -> Result<()> {
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_io(path, e))?;
    for s in series {
        for (timestamp_index, speed_kmh) in s.readings() {
            writer
                .serialize(CsvRow {
                    link_id: s.link_id.clone(),
                    timestamp_index,
                    speed_kmh,
                })
                .map_err(|e| csv_io(path, e))?;
        }
    }
    writer.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map(|p| p.line()).unwrap_or(0);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            line,
            message: format!("{other:?}"),
        },
    }
}

pub fn ingest_csv(path: &Path) -> Result<Vec<SpeedSeries>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| csv_io(path, e))?;
    let headers = reader.headers().map_err(|e| csv_io(path, e))?.clone();
    let expected = ["link_id", "timestamp_index", "speed_kmh"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::Parse {
            line: 1,
            message: format!("expected header `{}`", expected.join(",")),
        });
    }

    let mut by_link: BTreeMap<String, Vec<(u64, f64)>> = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_io(path, e))?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let row: CsvRow = record.deserialize(Some(&headers)).map_err(|e| Error::Parse {
            line,
            message: e.to_string(),
        })?;
        if !(row.speed_kmh.is_finite() && row.speed_kmh >= 0.0) {
            return Err(Error::Parse {
                line,
                message: format!("speed_kmh must be a non-negative number, got {}", row.speed_kmh),
            });
        }
        by_link
            .entry(row.link_id)
            .or_default()
            .push((row.timestamp_index, row.speed_kmh));
    }

    by_link
        .into_iter()
        .map(|(link_id, mut readings)| {
            readings.sort_by_key(|r| r.0);
            for pair in readings.windows(2) {
                if pair[1].0 != pair[0].0 + 1 {
                    return Err(Error::Schema(format!(
                        "link {link_id}: readings at {} and {} are not one tick apart",
                        pair[0].0, pair[1].0
                    )));
                }
            }
            Ok(SpeedSeries {
                link_id,
                start: readings[0].0,
                speeds: readings.into_iter().map(|r| r.1).collect(),
            })
        })
        .collect()
}

/// Min-max scaling to `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub min: f64,
    pub max: f64,
}

impl Normalizer {
    pub fn identity() -> Self {
        Normalizer { min: 0.0, max: 1.0 }
    }

    pub fn fit<'a>(series: impl IntoIterator<Item = &'a SpeedSeries>) -> Result<Self> {
        let (min, max) = series
            .into_iter()
            .flat_map(|s| s.speeds.iter().copied())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        if !min.is_finite() {
            return Err(Error::Argument("cannot fit normalizer on empty data".into()));
        }
        // Constant data maps to 0.
        let max = if max > min { max } else { min + 1.0 };
        Ok(Normalizer { min, max })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.min) / (self.max - self.min)
    }

    pub fn denormalize(&self, v: f64) -> f64 {
        v * (self.max - self.min) + self.min
    }
}

/// One supervised example: `window` past readings and the reading `H` steps
/// after the window's end.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub window: Vec<f64>,
    pub target: f64,
}

impl Sample {
    pub fn new(window: Vec<f64>, target: f64) -> Self {
        Sample { window, target }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkDataset {
    pub link_id: String,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedDataset {
    pub links: Vec<LinkDataset>,
    pub normalizer: Normalizer,
}

impl WindowedDataset {
    pub fn sample_count(&self) -> usize {
        self.links.iter().map(|l| l.samples.len()).sum()
    }
}

pub fn make_windows(
    series: &[SpeedSeries],
    input_window: usize,
    horizon: usize,
    normalizer: Normalizer,
) -> Result<WindowedDataset> {
    if input_window == 0 || horizon == 0 {
        return Err(Error::Argument("window and horizon must be >= 1".into()));
    }
    let links = series
        .iter()
        .map(|s| {
            if s.len() < input_window + horizon {
                return Err(Error::Argument(format!(
                    "link {} has {} readings, needs at least {}",
                    s.link_id,
                    s.len(),
                    input_window + horizon
                )));
            }
            let scaled: Vec<f64> = s.speeds.iter().map(|&v| normalizer.normalize(v)).collect();
            let samples = (0..=scaled.len() - input_window - horizon)
                .map(|k| {
                    Sample::new(
                        scaled[k..k + input_window].to_vec(),
                        scaled[k + input_window + horizon - 1],
                    )
                })
                .collect();
            Ok(LinkDataset {
                link_id: s.link_id.clone(),
                samples,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(WindowedDataset { links, normalizer })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShardPlan {
    pub worker_count: usize,
    /// Fraction of links held out for the chief; at least one link.
    pub validation_fraction: f64,
    /// Explicit worker -> links mapping. Links not listed go to validation.
    pub assignment: Option<BTreeMap<u32, Vec<String>>>,
}

impl Default for ShardPlan {
    fn default() -> Self {
        ShardPlan {
            worker_count: 5,
            validation_fraction: 0.15,
            assignment: None,
        }
    }
}

/// Which links go where.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkAssignment {
    pub workers: BTreeMap<u32, Vec<String>>,
    pub validation: Vec<String>,
}

impl LinkAssignment {
    pub fn training_links(&self) -> BTreeSet<&str> {
        self.workers.values().flatten().map(String::as_str).collect()
    }
}

impl ShardPlan {
    pub fn validate(&self) -> Result<()> {
        if self.worker_count == 0 {
            return Err(Error::config("shard.worker_count", "must be >= 1"));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return Err(Error::config("shard.validation_fraction", "must lie in (0, 1)"));
        }
        if let Some(map) = &self.assignment {
            if map.len() != self.worker_count {
                return Err(Error::config(
                    "shard.assignment",
                    format!("lists {} workers, worker_count is {}", map.len(), self.worker_count),
                ));
            }
            let mut seen = BTreeSet::new();
            for (w, links) in map {
                if links.is_empty() {
                    return Err(Error::config(format!("shard.assignment.{w}"), "worker has no links"));
                }
                for l in links {
                    if !seen.insert(l) {
                        return Err(Error::config(
                            format!("shard.assignment.{w}"),
                            format!("link {l} assigned twice"),
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    /// Seeded split of `link_ids` into worker shards and validation links.
    pub fn assign(&self, link_ids: &[String], seed: u64) -> Result<LinkAssignment> {
        self.validate()?;
        let all: BTreeSet<&String> = link_ids.iter().collect();
        if all.len() != link_ids.len() {
            return Err(Error::Argument("duplicate link ids".into()));
        }

        if let Some(map) = &self.assignment {
            let assigned: BTreeSet<&String> = map.values().flatten().collect();
            if let Some(missing) = assigned.iter().find(|l| !all.contains(*l)) {
                return Err(Error::config("shard.assignment", format!("unknown link {missing}")));
            }
            let validation: Vec<String> = link_ids.iter().filter(|l| !assigned.contains(l)).cloned().collect();
            if validation.is_empty() {
                return Err(Error::config(
                    "shard.assignment",
                    "no links left for the chief's validation set",
                ));
            }
            return Ok(LinkAssignment {
                workers: map.clone(),
                validation,
            });
        }

        let n_val = ((link_ids.len() as f64 * self.validation_fraction).ceil() as usize).max(1);
        if link_ids.len() < self.worker_count + n_val {
            return Err(Error::config(
                "shard.worker_count",
                format!(
                    "{} links cannot cover {} workers plus {} validation link(s)",
                    link_ids.len(),
                    self.worker_count,
                    n_val
                ),
            ));
        }
        let mut shuffled: Vec<String> = link_ids.to_vec();
        shuffled.sort();
        shuffled.shuffle(&mut rng::stream(seed, &[tag::SHARD]));
        let (validation, training) = shuffled.split_at(n_val);
        let mut workers: BTreeMap<u32, Vec<String>> = (0..self.worker_count as u32).map(|w| (w, Vec::new())).collect();
        for (k, link) in training.iter().enumerate() {
            workers
                .get_mut(&((k % self.worker_count) as u32))
                .unwrap()
                .push(link.clone());
        }
        let mut validation = validation.to_vec();
        validation.sort();
        Ok(LinkAssignment { workers, validation })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: u32,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sharding {
    pub shards: Vec<Shard>,
    pub validation: Vec<Sample>,
    pub assignment: LinkAssignment,
}

/// Splits per-link datasets into disjoint worker shards and the chief's
/// validation set according to `assignment`.
pub fn shard(dataset: &WindowedDataset, assignment: &LinkAssignment) -> Result<Sharding> {
    let by_id: BTreeMap<&str, &LinkDataset> = dataset.links.iter().map(|l| (l.link_id.as_str(), l)).collect();
    let gather = |links: &[String]| -> Result<Vec<Sample>> {
        let mut out = Vec::new();
        for l in links {
            let ds = by_id
                .get(l.as_str())
                .ok_or_else(|| Error::Argument(format!("no windows for link {l}")))?;
            out.extend(ds.samples.iter().cloned());
        }
        Ok(out)
    };
    let shards = assignment
        .workers
        .iter()
        .map(|(&worker_id, links)| {
            let samples = gather(links)?;
            if samples.is_empty() {
                return Err(Error::config(
                    "shard.assignment",
                    format!("worker {worker_id} has no samples"),
                ));
            }
            Ok(Shard { worker_id, samples })
        })
        .collect::<Result<Vec<_>>>()?;
    let validation = gather(&assignment.validation)?;
    if validation.is_empty() {
        return Err(Error::config("shard.validation_fraction", "validation set is empty"));
    }
    Ok(Sharding {
        shards,
        validation,
        assignment: assignment.clone(),
    })
}

/// Full pipeline: split links, fit normalization on the training links only,
/// window every link, and shard.
pub fn prepare(
    series: &[SpeedSeries],
    plan: &ShardPlan,
    input_window: usize,
    horizon: usize,
    seed: u64,
) -> Result<Sharding> {
    let ids: Vec<String> = series.iter().map(|s| s.link_id.clone()).collect();
    let assignment = plan.assign(&ids, seed)?;
    let training = assignment.training_links();
    let normalizer = Normalizer::fit(series.iter().filter(|s| training.contains(s.link_id.as_str())))?;
    let dataset = make_windows(series, input_window, horizon, normalizer)?;
    shard(&dataset, &assignment)
}
