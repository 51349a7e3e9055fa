//! Per-episode CSV rows, run summaries and cross-arm comparison tables.
//!
//! Every summary is a pure function of the CSV rows, so comparison tables
//! can be recomputed offline from the files on disk.

use std::fs::File;
use std::path::{Path, PathBuf};

use serde::{de::DeserializeOwned, Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::tasks::ScorerFitReport;
use crate::error::{Error, Result};
use crate::learner::EpisodeReport;

/// Correctness level used for the convergence comparison.
pub const CONVERGENCE_THRESHOLD: f64 = 0.8;

const CORRECTNESS_PREFIX: &str = "correctness_";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub run_id: String,
    pub seed: u64,
    pub episode: usize,
    /// `(attribute name, correctness)` in scorer order.
    pub correctness: Vec<(String, f64)>,
    pub mean_correctness: f64,
    pub dist: [f64; 3],
    pub ppl_proxy: f64,
    pub mean_kl: f64,
    pub mean_entropy: f64,
    pub mean_raw_reward: f64,
    pub mean_shaped_reward: f64,
    pub pool_size: usize,
    pub evictions: usize,
}

const TAIL_COLUMNS: [&str; 11] = [
    "mean_correctness",
    "dist_1",
    "dist_2",
    "dist_3",
    "ppl_proxy",
    "mean_kl",
    "mean_entropy",
    "mean_raw_reward",
    "mean_shaped_reward",
    "pool_size",
    "evictions",
];

pub fn metric_header(attributes: &[String]) -> Vec<String> {
    ["run_id", "seed", "episode"]
        .iter()
        .map(|s| s.to_string())
        .chain(attributes.iter().map(|a| format!("{CORRECTNESS_PREFIX}{a}")))
        .chain(TAIL_COLUMNS.iter().map(|s| s.to_string()))
        .collect()
}

impl MetricRow {
    pub fn from_report(run_id: &str, seed: u64, attributes: &[String], report: &EpisodeReport) -> Self {
        Self {
            run_id: run_id.to_string(),
            seed,
            episode: report.episode,
            correctness: attributes.iter().cloned().zip(report.correctness.iter().copied()).collect(),
            mean_correctness: report.mean_correctness,
            dist: report.dist,
            ppl_proxy: report.ppl_proxy,
            mean_kl: report.mean_kl,
            mean_entropy: report.mean_entropy,
            mean_raw_reward: report.mean_raw_reward,
            mean_shaped_reward: report.mean_shaped_reward,
            pool_size: report.pool_size,
            evictions: report.evictions,
        }
    }

    pub fn attributes(&self) -> Vec<String> {
        self.correctness.iter().map(|(a, _)| a.clone()).collect()
    }

    pub fn record(&self) -> Vec<String> {
        let mut rec = vec![self.run_id.clone(), self.seed.to_string(), self.episode.to_string()];
        rec.extend(self.correctness.iter().map(|(_, c)| c.to_string()));
        rec.push(self.mean_correctness.to_string());
        rec.extend(self.dist.iter().map(f64::to_string));
        for v in [
            self.ppl_proxy,
            self.mean_kl,
            self.mean_entropy,
            self.mean_raw_reward,
            self.mean_shaped_reward,
        ] {
            rec.push(v.to_string());
        }
        rec.push(self.pool_size.to_string());
        rec.push(self.evictions.to_string());
        rec
    }

    fn parse(header: &csv::StringRecord, rec: &csv::StringRecord) -> Result<Self> {
        let bad = |what: &str| Error::Config(format!("malformed metrics row: {what}"));
        let get = |name: &str| -> Result<&str> {
            header
                .iter()
                .position(|h| h == name)
                .and_then(|i| rec.get(i))
                .ok_or_else(|| bad(name))
        };
        let num = |name: &str| -> Result<f64> { get(name)?.parse::<f64>().map_err(|_| bad(name)) };
        let int = |name: &str| -> Result<usize> { get(name)?.parse::<usize>().map_err(|_| bad(name)) };
        let correctness = header
            .iter()
            .enumerate()
            .filter_map(|(i, h)| h.strip_prefix(CORRECTNESS_PREFIX).map(|a| (i, a)))
            .map(|(i, a)| {
                let v = rec.get(i).and_then(|s| s.parse::<f64>().ok()).ok_or_else(|| bad(a))?;
                Ok((a.to_string(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            run_id: get("run_id")?.to_string(),
            seed: get("seed")?.parse().map_err(|_| bad("seed"))?,
            episode: int("episode")?,
            correctness,
            mean_correctness: num("mean_correctness")?,
            dist: [num("dist_1")?, num("dist_2")?, num("dist_3")?],
            ppl_proxy: num("ppl_proxy")?,
            mean_kl: num("mean_kl")?,
            mean_entropy: num("mean_entropy")?,
            mean_raw_reward: num("mean_raw_reward")?,
            mean_shaped_reward: num("mean_shaped_reward")?,
            pool_size: int("pool_size")?,
            evictions: int("evictions")?,
        })
    }
}

/// Streams rows to a CSV file, flushing after each one.
pub struct MetricWriter {
    writer: csv::Writer<File>,
}

impl MetricWriter {
    pub fn create(path: &Path, attributes: &[String]) -> Result<Self> {
        let mut writer = csv::Writer::from_path(path)?;
        writer.write_record(metric_header(attributes))?;
        writer.flush()?;
        Ok(Self { writer })
    }

    pub fn write(&mut self, row: &MetricRow) -> Result<()> {
        self.writer.write_record(row.record())?;
        self.writer.flush()?;
        Ok(())
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let mut reader = csv::Reader::from_path(path)?;
    let header = reader.headers()?.clone();
    reader
        .records()
        .map(|rec| MetricRow::parse(&header, &rec?))
        .collect()
}

/// Mean of `mean_correctness` over the last `window` episodes.
pub fn final_correctness(rows: &[MetricRow], window: usize) -> f64 {
    tail_mean(rows, window, |r| r.mean_correctness)
}

fn tail_mean(rows: &[MetricRow], window: usize, f: impl Fn(&MetricRow) -> f64) -> f64 {
    let tail = &rows[rows.len().saturating_sub(window.max(1))..];
    if tail.is_empty() {
        return f64::NAN;
    }
    tail.iter().map(f).sum::<f64>() / tail.len() as f64
}

/// Number of episodes run before mean correctness first reached
/// `threshold`, i.e. the first qualifying episode index plus one.
pub fn episodes_to_threshold(rows: &[MetricRow], threshold: f64) -> Option<usize> {
    rows.iter()
        .find(|r| r.mean_correctness >= threshold)
        .map(|r| r.episode + 1)
}

/// Headline numbers for one run, computed from its rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub episodes: usize,
    pub final_correctness: f64,
    pub final_correctness_per_attribute: Vec<(String, f64)>,
    pub episodes_to_threshold: Option<usize>,
    pub final_dist_3: f64,
    pub final_ppl_proxy: f64,
    pub final_kl: f64,
    pub final_entropy: f64,
}

pub fn run_metrics(rows: &[MetricRow], window: usize) -> RunMetrics {
    let attributes = rows.first().map(MetricRow::attributes).unwrap_or_default();
    RunMetrics {
        episodes: rows.len(),
        final_correctness: final_correctness(rows, window),
        final_correctness_per_attribute: attributes
            .iter()
            .enumerate()
            .map(|(k, a)| (a.clone(), tail_mean(rows, window, |r| r.correctness[k].1)))
            .collect(),
        episodes_to_threshold: episodes_to_threshold(rows, CONVERGENCE_THRESHOLD),
        final_dist_3: tail_mean(rows, window, |r| r.dist[2]),
        final_ppl_proxy: tail_mean(rows, window, |r| r.ppl_proxy),
        final_kl: tail_mean(rows, window, |r| r.mean_kl),
        final_entropy: tail_mean(rows, window, |r| r.mean_entropy),
    }
}

/// Written as `summary.json` next to `metrics.csv`.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunSummary {
    pub run_id: String,
    pub seed: u64,
    pub task: String,
    pub attributes: Vec<String>,
    pub metrics: RunMetrics,
    /// Weigher objective before each training step, plus the final value.
    pub weigher_objective: Vec<f64>,
    /// Mean learned weight per scorer over the weigher corpus.
    pub weigher_mean_weights: Vec<f64>,
    pub scorer_fits: Vec<ScorerFitReport>,
    pub wall_clock_ms: f64,
    pub config: ExperimentConfig,
}

/// One row of a sweep's `comparison.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArmSummary {
    pub axis: String,
    pub value: String,
    pub runs: usize,
    pub final_correctness_mean: f64,
    pub final_correctness_median: f64,
    pub final_correctness_min: f64,
    pub final_correctness_max: f64,
    /// Runs that never reached the threshold count as `episodes + 1`.
    pub episodes_to_threshold_median: f64,
    pub reached_threshold: usize,
    pub final_dist_3_mean: f64,
    pub final_ppl_proxy_mean: f64,
    pub final_kl_mean: f64,
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn arm_summary(axis: &str, value: &str, runs: &[Vec<MetricRow>], window: usize) -> ArmSummary {
    let metrics: Vec<RunMetrics> = runs.iter().map(|r| run_metrics(r, window)).collect();
    let finals: Vec<f64> = metrics.iter().map(|m| m.final_correctness).collect();
    let to_threshold: Vec<f64> = metrics
        .iter()
        .map(|m| m.episodes_to_threshold.unwrap_or(m.episodes + 1) as f64)
        .collect();
    let field = |f: fn(&RunMetrics) -> f64| mean(&metrics.iter().map(f).collect::<Vec<_>>());
    ArmSummary {
        axis: axis.to_string(),
        value: value.to_string(),
        runs: runs.len(),
        final_correctness_mean: mean(&finals),
        final_correctness_median: median(&finals),
        final_correctness_min: finals.iter().copied().fold(f64::INFINITY, f64::min),
        final_correctness_max: finals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        episodes_to_threshold_median: median(&to_threshold),
        reached_threshold: metrics.iter().filter(|m| m.episodes_to_threshold.is_some()).count(),
        final_dist_3_mean: field(|m| m.final_dist_3),
        final_ppl_proxy_mean: field(|m| m.final_ppl_proxy),
        final_kl_mean: field(|m| m.final_kl),
    }
}

/// Rebuilds a comparison table from `(value, csv paths)` groups.
pub fn compare_csvs(axis: &str, arms: &[(String, Vec<PathBuf>)], window: usize) -> Result<Vec<ArmSummary>> {
    arms.iter()
        .map(|(value, paths)| {
            let runs = paths.iter().map(|p| read_metrics(p)).collect::<Result<Vec<_>>>()?;
            Ok(arm_summary(axis, value, &runs, window))
        })
        .collect()
}

pub fn write_comparison(path: &Path, arms: &[ArmSummary]) -> Result<()> {
    let mut writer = csv::Writer::from_path(path)?;
    for arm in arms {
        writer.serialize(arm)?;
    }
    writer.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path)?;
    serde_json::to_writer_pretty(std::io::BufWriter::new(file), value)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path)?;
    Ok(serde_json::from_reader(std::io::BufReader::new(file))?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(episode: usize, c: f64) -> MetricRow {
        MetricRow {
            run_id: "r".into(),
            seed: 3,
            episode,
            correctness: vec![("a".into(), c), ("b".into(), c)],
            mean_correctness: c,
            dist: [0.1, 0.2, 0.3],
            ppl_proxy: 7.5,
            mean_kl: 0.01,
            mean_entropy: 1.9,
            mean_raw_reward: 0.5,
            mean_shaped_reward: 0.49,
            pool_size: 100,
            evictions: 0,
        }
    }

    #[test]
    fn csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows: Vec<MetricRow> = (0..4).map(|e| row(e, 0.1 + 0.3 * e as f64)).collect();
        let mut w = MetricWriter::create(&path, &rows[0].attributes()).unwrap();
        for r in &rows {
            w.write(r).unwrap();
        }
        drop(w);
        assert_eq!(read_metrics(&path).unwrap(), rows);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("run_id,seed,episode,correctness_a,correctness_b,mean_correctness,dist_1"));
    }

    #[test]
    fn summaries() {
        let rows: Vec<MetricRow> = [0.1, 0.5, 0.85, 0.7, 0.9].iter().enumerate().map(|(e, &c)| row(e, c)).collect();
        assert!((final_correctness(&rows, 2) - 0.8).abs() < 1e-12);
        assert!((final_correctness(&rows, 100) - 0.61).abs() < 1e-12);
        assert_eq!(episodes_to_threshold(&rows, 0.8), Some(3));
        assert_eq!(episodes_to_threshold(&rows, 0.95), None);
        let arm = arm_summary("q", "5", &[rows.clone(), rows[..2].to_vec()], 1);
        assert_eq!(arm.runs, 2);
        assert_eq!(arm.reached_threshold, 1);
        // never-reached counts as episodes + 1 = 3
        assert_eq!(arm.episodes_to_threshold_median, 3.0);
        assert!((arm.final_correctness_median - 0.7).abs() < 1e-12);
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
