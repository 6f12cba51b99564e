//! Run archives, latency reports and snapshot replay.
//!
//! An archive is a directory holding one file per artifact plus a
//! `manifest.json` listing every file with its SHA-256. Time series are
//! CSV, metrics and the manifest are JSON, message logs and world
//! snapshots are JSONL. Files are written in a fixed order with no
//! wall-clock content, so identical runs produce identical archives.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path as FsPath, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analysis::{analyze, PlatoonMetrics};
use crate::clock::SimTime;
use crate::config::{ConfigError, TwinConfig};
use crate::hub::{DeadLetter, DelayRecord};
use crate::latency::Stage;
use crate::scenario::{Abort, ControllerRow, Counters, ObservationRow, PlatoonRow, RunOutput};
use crate::world::{VehicleId, VehicleKind, WorldSnapshot};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PLATOON_LOG_FILE: &str = "platoon_log.csv";
pub const CONTROLLER_LOG_FILE: &str = "controller_log.csv";
pub const OBSERVATIONS_FILE: &str = "observations.csv";
pub const DELAYS_FILE: &str = "delays.jsonl";
pub const DEAD_LETTERS_FILE: &str = "dead_letters.jsonl";
pub const SNAPSHOTS_FILE: &str = "snapshots.jsonl";
pub const METRICS_FILE: &str = "metrics.json";
pub const FORMAT_VERSION: u32 = 1;

/// Fewest samples a stage needs to appear in a latency report.
pub const MIN_REPORT_SAMPLES: usize = 100;

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Csv { path: PathBuf, source: csv::Error },
    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("archive is missing {0}")]
    Missing(String),
    #[error("{file}: hash mismatch (manifest {expected}, found {actual})")]
    HashMismatch {
        file: String,
        expected: String,
        actual: String,
    },
    #[error("corrupt archive: {0}")]
    Corrupt(String),
    #[error("replay speed factor must be positive and finite, got {0}")]
    SpeedFactor(f64),
}

fn io_err(path: &FsPath) -> impl FnOnce(std::io::Error) -> TelemetryError + '_ {
    move |source| TelemetryError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub files: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn entry(&self, path: &str) -> Option<&ManifestEntry> {
        self.files.iter().find(|e| e.path == path)
    }

    /// Hash over the manifest itself: equal digests mean equal archives.
    pub fn digest(&self) -> String {
        let text = serde_json::to_vec(self).expect("manifest serializes");
        hex::encode(Sha256::digest(&text))
    }
}

/// Run bookkeeping that is not a time series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub kinds: BTreeMap<VehicleId, VehicleKind>,
    pub counters: Counters,
    pub abort: Option<Abort>,
    pub end_time: SimTime,
}

/// Everything persisted about one run. Replay and reporting need nothing
/// else.
#[derive(Debug, Clone, PartialEq)]
pub struct RunArchive {
    pub config: TwinConfig,
    pub summary: Option<RunSummary>,
    pub platoon_log: Vec<PlatoonRow>,
    pub controller_log: Vec<ControllerRow>,
    pub observations: Vec<ObservationRow>,
    pub delays: Vec<DelayRecord>,
    pub dead_letters: Vec<DeadLetter>,
    pub snapshots: Vec<WorldSnapshot>,
    pub metrics: Option<PlatoonMetrics>,
}

impl RunArchive {
    /// An archive holding only a configuration.
    pub fn empty(config: TwinConfig) -> Self {
        Self {
            config,
            summary: None,
            platoon_log: vec![],
            controller_log: vec![],
            observations: vec![],
            delays: vec![],
            dead_letters: vec![],
            snapshots: vec![],
            metrics: None,
        }
    }

    pub fn seed(&self) -> u64 {
        self.config.scenario.seed
    }
}

impl From<RunOutput> for RunArchive {
    fn from(out: RunOutput) -> Self {
        let metrics = analyze(&out);
        Self {
            summary: Some(RunSummary {
                kinds: out.kinds,
                counters: out.counters,
                abort: out.abort,
                end_time: out.end_time,
            }),
            config: out.config,
            platoon_log: out.platoon_log,
            controller_log: out.controller_log,
            observations: out.observations,
            delays: out.delays,
            dead_letters: out.dead_letters,
            snapshots: out.snapshots,
            metrics: Some(metrics),
        }
    }
}

fn csv_bytes<T: Serialize>(rows: &[T], name: &str) -> Result<Vec<u8>, TelemetryError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|source| TelemetryError::Csv {
            path: name.into(),
            source,
        })?;
    }
    w.into_inner()
        .map_err(|e| TelemetryError::Corrupt(format!("{name}: {e}")))
}

fn jsonl_bytes<T: Serialize>(rows: &[T], name: &str) -> Result<Vec<u8>, TelemetryError> {
    let mut buf = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut buf, r).map_err(|source| TelemetryError::Json {
            path: name.into(),
            source,
        })?;
        buf.push(b'\n');
    }
    Ok(buf)
}

fn json_bytes<T: Serialize>(value: &T, name: &str) -> Result<Vec<u8>, TelemetryError> {
    let mut buf = serde_json::to_vec_pretty(value).map_err(|source| TelemetryError::Json {
        path: name.into(),
        source,
    })?;
    buf.push(b'\n');
    Ok(buf)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `archive` into `dir` (created if needed) and returns the
/// manifest. Empty series are omitted.
pub fn write_archive(archive: &RunArchive, dir: &FsPath) -> Result<Manifest, TelemetryError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut files: Vec<(&str, Vec<u8>)> =
        vec![(CONFIG_FILE, archive.config.to_toml()?.into_bytes())];
    if let Some(s) = &archive.summary {
        files.push((SUMMARY_FILE, json_bytes(s, SUMMARY_FILE)?));
    }
    if !archive.platoon_log.is_empty() {
        files.push((
            PLATOON_LOG_FILE,
            csv_bytes(&archive.platoon_log, PLATOON_LOG_FILE)?,
        ));
    }
    if !archive.controller_log.is_empty() {
        files.push((
            CONTROLLER_LOG_FILE,
            csv_bytes(&archive.controller_log, CONTROLLER_LOG_FILE)?,
        ));
    }
    if !archive.observations.is_empty() {
        files.push((
            OBSERVATIONS_FILE,
            csv_bytes(&archive.observations, OBSERVATIONS_FILE)?,
        ));
    }
    if !archive.delays.is_empty() {
        files.push((DELAYS_FILE, jsonl_bytes(&archive.delays, DELAYS_FILE)?));
    }
    if !archive.dead_letters.is_empty() {
        files.push((
            DEAD_LETTERS_FILE,
            jsonl_bytes(&archive.dead_letters, DEAD_LETTERS_FILE)?,
        ));
    }
    if !archive.snapshots.is_empty() {
        files.push((
            SNAPSHOTS_FILE,
            jsonl_bytes(&archive.snapshots, SNAPSHOTS_FILE)?,
        ));
    }
    if let Some(m) = &archive.metrics {
        files.push((METRICS_FILE, json_bytes(m, METRICS_FILE)?));
    }
    let mut entries = Vec::with_capacity(files.len());
    for (name, bytes) in files {
        let path = dir.join(name);
        fs::write(&path, &bytes).map_err(io_err(&path))?;
        entries.push(ManifestEntry {
            path: name.into(),
            bytes: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        seed: archive.seed(),
        files: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json_bytes(&manifest, MANIFEST_FILE)?).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &FsPath) -> Result<Manifest, TelemetryError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.exists() {
        return Err(TelemetryError::Missing(MANIFEST_FILE.into()));
    }
    let text = fs::read(&path).map_err(io_err(&path))?;
    let m: Manifest =
        serde_json::from_slice(&text).map_err(|source| TelemetryError::Json { path, source })?;
    if m.format_version != FORMAT_VERSION {
        return Err(TelemetryError::Corrupt(format!(
            "unsupported format version {}",
            m.format_version
        )));
    }
    Ok(m)
}

/// Checks every listed file against its recorded size and hash.
pub fn verify_archive(dir: &FsPath) -> Result<Manifest, TelemetryError> {
    let m = read_manifest(dir)?;
    if m.entry(CONFIG_FILE).is_none() {
        return Err(TelemetryError::Missing(CONFIG_FILE.into()));
    }
    for e in &m.files {
        let path = dir.join(&e.path);
        if !path.exists() {
            return Err(TelemetryError::Missing(e.path.clone()));
        }
        let bytes = fs::read(&path).map_err(io_err(&path))?;
        let actual = sha256_hex(&bytes);
        if actual != e.sha256 || bytes.len() as u64 != e.bytes {
            return Err(TelemetryError::HashMismatch {
                file: e.path.clone(),
                expected: e.sha256.clone(),
                actual,
            });
        }
    }
    Ok(m)
}

fn read_csv<T: DeserializeOwned>(path: &FsPath) -> Result<Vec<T>, TelemetryError> {
    let mut r = csv::Reader::from_path(path).map_err(|source| TelemetryError::Csv {
        path: path.to_path_buf(),
        source,
    })?;
    r.deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|source| TelemetryError::Csv {
            path: path.to_path_buf(),
            source,
        })
}

fn read_jsonl<T: DeserializeOwned>(path: &FsPath) -> Result<Vec<T>, TelemetryError> {
    let f = fs::File::open(path).map_err(io_err(path))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(io_err(path))?;
        if line.is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line).map_err(|source| TelemetryError::Json {
                path: path.to_path_buf(),
                source,
            })?,
        );
    }
    Ok(out)
}

fn read_json<T: DeserializeOwned>(path: &FsPath) -> Result<T, TelemetryError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    serde_json::from_slice(&bytes).map_err(|source| TelemetryError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Verifies and loads an archive.
pub fn read_archive(dir: &FsPath) -> Result<RunArchive, TelemetryError> {
    let m = verify_archive(dir)?;
    let has = |name: &str| m.entry(name).is_some();
    let p = |name: &str| dir.join(name);
    let config = TwinConfig::load(&p(CONFIG_FILE))?;
    let archive = RunArchive {
        summary: if has(SUMMARY_FILE) {
            Some(read_json(&p(SUMMARY_FILE))?)
        } else {
            None
        },
        platoon_log: if has(PLATOON_LOG_FILE) {
            read_csv(&p(PLATOON_LOG_FILE))?
        } else {
            vec![]
        },
        controller_log: if has(CONTROLLER_LOG_FILE) {
            read_csv(&p(CONTROLLER_LOG_FILE))?
        } else {
            vec![]
        },
        observations: if has(OBSERVATIONS_FILE) {
            read_csv(&p(OBSERVATIONS_FILE))?
        } else {
            vec![]
        },
        delays: if has(DELAYS_FILE) {
            read_jsonl(&p(DELAYS_FILE))?
        } else {
            vec![]
        },
        dead_letters: if has(DEAD_LETTERS_FILE) {
            read_jsonl(&p(DEAD_LETTERS_FILE))?
        } else {
            vec![]
        },
        snapshots: if has(SNAPSHOTS_FILE) {
            read_jsonl(&p(SNAPSHOTS_FILE))?
        } else {
            vec![]
        },
        metrics: if has(METRICS_FILE) {
            Some(read_json(&p(METRICS_FILE))?)
        } else {
            None
        },
        config,
    };
    if archive.seed() != m.seed {
        return Err(TelemetryError::Corrupt(format!(
            "manifest seed {} differs from config seed {}",
            m.seed,
            archive.seed()
        )));
    }
    Ok(archive)
}

/// One row of a latency report, in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyRow {
    pub stage: Stage,
    pub sample_size: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    pub min_ms: f64,
    pub p99_ms: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub rows: Vec<LatencyRow>,
    /// Stages left out, with the reason.
    pub notes: Vec<String>,
}

impl LatencyReport {
    pub fn row(&self, stage: Stage) -> Option<&LatencyRow> {
        self.rows.iter().find(|r| r.stage == stage)
    }

    /// Plain-text table with one line per stage.
    pub fn to_table(&self) -> String {
        let mut s = format!(
            "{:<6} {:>8} {:>9} {:>9} {:>9} {:>9}\n",
            "stage", "samples", "mean_ms", "max_ms", "min_ms", "p99_ms"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:<6} {:>8} {:>9.2} {:>9.2} {:>9.2} {:>9.2}\n",
                r.stage.number(),
                r.sample_size,
                r.mean_ms,
                r.max_ms,
                r.min_ms,
                r.p99_ms
            ));
        }
        for n in &self.notes {
            s.push_str(&format!("note: {n}\n"));
        }
        s
    }
}

/// Nearest-rank percentile of sorted samples.
pub fn percentile(sorted: &[f64], q: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = (q * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

/// Summary statistics in milliseconds of a list of delays.
pub fn stage_row(stage: Stage, samples_ms: &[f64]) -> Option<LatencyRow> {
    let mut sorted = samples_ms.to_vec();
    sorted.sort_by(f64::total_cmp);
    Some(LatencyRow {
        stage,
        sample_size: sorted.len(),
        mean_ms: sorted.iter().sum::<f64>() / sorted.len().max(1) as f64,
        max_ms: *sorted.last()?,
        min_ms: sorted[0],
        p99_ms: percentile(&sorted, 0.99)?,
    })
}

/// Per-stage delay statistics with the same columns as the testbed's
/// published latency table. Stages with fewer than
/// [`MIN_REPORT_SAMPLES`] samples are omitted with a note.
pub fn latency_report(delays: &[DelayRecord]) -> LatencyReport {
    let mut by_stage: BTreeMap<Stage, Vec<f64>> = BTreeMap::new();
    for d in delays {
        by_stage.entry(d.stage).or_default().push(d.delay_ms());
    }
    let mut report = LatencyReport {
        rows: vec![],
        notes: vec![],
    };
    for stage in Stage::ALL {
        let samples = by_stage.remove(&stage).unwrap_or_default();
        if samples.len() < MIN_REPORT_SAMPLES {
            report.notes.push(format!(
                "{stage} omitted: {} samples, need {MIN_REPORT_SAMPLES}",
                samples.len()
            ));
            continue;
        }
        report.rows.extend(stage_row(stage, &samples));
    }
    report
}

/// Waits until a given offset from the start of a replay.
pub trait Pacer {
    fn wait_until(&mut self, offset: Duration);
}

/// Sleeps on the wall clock.
pub struct WallClockPacer {
    start: Option<Instant>,
}

impl WallClockPacer {
    pub fn new() -> Self {
        Self { start: None }
    }
}

impl Default for WallClockPacer {
    fn default() -> Self {
        Self::new()
    }
}

impl Pacer for WallClockPacer {
    fn wait_until(&mut self, offset: Duration) {
        let start = *self.start.get_or_insert_with(Instant::now);
        let target = start + offset;
        let now = Instant::now();
        if target > now {
            std::thread::sleep(target - now);
        }
    }
}

/// Records requested offsets without waiting.
#[derive(Debug, Default)]
pub struct RecordingPacer {
    pub offsets: Vec<Duration>,
}

impl Pacer for RecordingPacer {
    fn wait_until(&mut self, offset: Duration) {
        self.offsets.push(offset);
    }
}

/// Checks that snapshots can be replayed: strictly increasing time.
pub fn validate_replay(snapshots: &[WorldSnapshot]) -> Result<(), TelemetryError> {
    if snapshots.is_empty() {
        return Err(TelemetryError::Missing(SNAPSHOTS_FILE.into()));
    }
    if let Some(w) = snapshots.windows(2).find(|w| w[1].time <= w[0].time) {
        return Err(TelemetryError::Corrupt(format!(
            "snapshot times not increasing: {} then {}",
            w[0].time, w[1].time
        )));
    }
    Ok(())
}

/// Emits every snapshot at its recorded offset divided by `speed_factor`.
/// Validation happens before the first emission. Stops at the first
/// error returned by `emit`.
pub fn replay<P: Pacer, E>(
    snapshots: &[WorldSnapshot],
    speed_factor: f64,
    pacer: &mut P,
    mut emit: impl FnMut(&WorldSnapshot) -> Result<(), E>,
) -> Result<Result<usize, E>, TelemetryError> {
    if !(speed_factor > 0.0 && speed_factor.is_finite()) {
        return Err(TelemetryError::SpeedFactor(speed_factor));
    }
    validate_replay(snapshots)?;
    let t0 = snapshots[0].time;
    for s in snapshots {
        let offset = (s.time.0 - t0.0) as f64 / speed_factor;
        pacer.wait_until(Duration::from_micros(offset.round() as u64));
        if let Err(e) = emit(s) {
            return Ok(Err(e));
        }
    }
    Ok(Ok(snapshots.len()))
}

/// Loads the snapshot stream of an archive after verifying it.
pub fn load_replay(dir: &FsPath) -> Result<Vec<WorldSnapshot>, TelemetryError> {
    let m = verify_archive(dir)?;
    if m.entry(SNAPSHOTS_FILE).is_none() {
        return Err(TelemetryError::Missing(SNAPSHOTS_FILE.into()));
    }
    let snaps: Vec<WorldSnapshot> = read_jsonl(&dir.join(SNAPSHOTS_FILE))?;
    validate_replay(&snaps)?;
    Ok(snaps)
}

/// Writes a latency report as pretty JSON.
pub fn write_report<W: Write>(report: &LatencyReport, mut w: W) -> std::io::Result<()> {
    serde_json::to_writer_pretty(&mut w, report)?;
    w.write_all(b"\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::latency::LatencyModel;
    use crate::world::{RecordKind, VehicleRecord};

    fn short_run(seed: u64, secs: f64) -> RunArchive {
        let mut cfg = TwinConfig::default();
        cfg.scenario.duration_s = secs;
        cfg.scenario.seed = seed;
        crate::scenario::run_experiment(&cfg).unwrap().into()
    }

    #[test]
    fn empty_run_manifest_has_config_only() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = TwinConfig::default();
        cfg.scenario.seed = 42;
        let m = write_archive(&RunArchive::empty(cfg.clone()), dir.path()).unwrap();
        assert_eq!(m.seed, 42);
        assert_eq!(m.files.len(), 1);
        assert_eq!(m.files[0].path, CONFIG_FILE);
        let back = read_archive(dir.path()).unwrap();
        assert_eq!(back, RunArchive::empty(cfg));
    }

    #[test]
    fn archive_round_trips_and_is_deterministic() {
        let a = short_run(3, 6.0);
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = write_archive(&a, d1.path()).unwrap();
        let m2 = write_archive(&short_run(3, 6.0), d2.path()).unwrap();
        assert_eq!(m1, m2);
        assert_eq!(m1.digest(), m2.digest());
        let back = read_archive(d1.path()).unwrap();
        assert_eq!(back, a);
        assert_eq!(latency_report(&back.delays), latency_report(&a.delays));
    }

    #[test]
    fn tampering_is_detected() {
        let a = short_run(1, 3.0);
        let dir = tempfile::tempdir().unwrap();
        write_archive(&a, dir.path()).unwrap();
        let p = dir.path().join(PLATOON_LOG_FILE);
        let mut text = fs::read_to_string(&p).unwrap();
        text = text.replacen("0.", "9.", 1);
        fs::write(&p, text).unwrap();
        assert!(matches!(
            verify_archive(dir.path()),
            Err(TelemetryError::HashMismatch { .. })
        ));
        fs::remove_file(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(matches!(
            read_archive(dir.path()),
            Err(TelemetryError::Missing(_))
        ));
    }

    #[test]
    fn report_omits_thin_stages() {
        let mk = |stage, ms: f64| DelayRecord {
            seq: None,
            stage,
            t1: SimTime::ZERO,
            t2: SimTime::ZERO,
            t3: SimTime::from_millis_f64(ms),
        };
        let mut delays: Vec<DelayRecord> =
            (0..200).map(|k| mk(Stage::HubToCyber, k as f64)).collect();
        delays.push(mk(Stage::CameraToWorkstation, 50.0));
        let r = latency_report(&delays);
        assert_eq!(r.rows.len(), 1);
        assert_eq!(r.notes.len(), 4);
        let row = r.row(Stage::HubToCyber).unwrap();
        assert_eq!((row.sample_size, row.min_ms, row.max_ms), (200, 0.0, 199.0));
        assert!((row.mean_ms - 99.5).abs() < 1e-9);
        assert_eq!(row.p99_ms, 197.0);
        assert!(r.to_table().contains("note:"));
    }

    #[test]
    fn zeroed_latency_reports_zero() {
        let mut cfg = TwinConfig {
            latency: LatencyModel::zero(),
            ..TwinConfig::default()
        };
        cfg.scenario.duration_s = 20.0;
        let out = crate::scenario::run_experiment(&cfg).unwrap();
        let r = latency_report(&out.delays);
        assert_eq!(r.rows.len(), 5, "{:?}", r.notes);
        for row in &r.rows {
            assert_eq!(
                (row.mean_ms, row.max_ms, row.min_ms, row.p99_ms),
                (0.0, 0.0, 0.0, 0.0)
            );
        }
    }

    fn snap(seq: u64, ms: u64) -> WorldSnapshot {
        WorldSnapshot {
            seq,
            time: SimTime(ms * 1000),
            vehicles: vec![VehicleRecord {
                id: VehicleId(1),
                kind: RecordKind::Cloud,
                x_m: 0.0,
                y_m: 0.0,
                heading_rad: 0.0,
                speed_mps: 0.0,
                stamp: SimTime(ms * 1000),
            }],
        }
    }

    #[test]
    fn replay_scales_offsets() {
        let snaps: Vec<_> = (0..5).map(|k| snap(k, 100 * k + 20)).collect();
        for (factor, step_ms) in [(1.0, 100), (2.0, 50), (0.5, 200)] {
            let mut pacer = RecordingPacer::default();
            let mut seen = vec![];
            let n = replay(&snaps, factor, &mut pacer, |s| {
                seen.push(s.seq);
                Ok::<(), ()>(())
            })
            .unwrap()
            .unwrap();
            assert_eq!(n, 5);
            assert_eq!(seen, vec![0, 1, 2, 3, 4]);
            for w in pacer.offsets.windows(2) {
                assert_eq!(w[1] - w[0], Duration::from_millis(step_ms));
            }
        }
    }

    #[test]
    fn replay_rejects_bad_input_before_emitting() {
        let mut pacer = RecordingPacer::default();
        let mut emitted = 0;
        let bad = vec![snap(0, 10), snap(1, 10)];
        assert!(replay(&bad, 1.0, &mut pacer, |_| {
            emitted += 1;
            Ok::<(), ()>(())
        })
        .is_err());
        assert!(replay(&[snap(0, 1)], 0.0, &mut pacer, |_| Ok::<(), ()>(())).is_err());
        assert!(replay(&[], 1.0, &mut pacer, |_| Ok::<(), ()>(())).is_err());
        assert_eq!(emitted, 0);
    }

    #[test]
    fn truncated_snapshot_file_fails_cleanly() {
        let a = short_run(2, 3.0);
        let dir = tempfile::tempdir().unwrap();
        write_archive(&a, dir.path()).unwrap();
        let p = dir.path().join(SNAPSHOTS_FILE);
        let text = fs::read(&p).unwrap();
        fs::write(&p, &text[..text.len() / 2]).unwrap();
        assert!(load_replay(dir.path()).is_err());
    }
}
