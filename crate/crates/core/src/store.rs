//! Append-only line-delimited record logs and the run directory layout.
//!
//! Every line of a log is one JSON object (a [`RecordEnvelope`]) followed by
//! `\n`. Appends write the full line with a single `write` call; a file that
//! does not end in `\n` carries a torn final line, which [`LogWriter::open`]
//! truncates away before appending.
//!
//! Run directory layout:
//!
//! ```text
//! <root>/logs/<unit_id>/day-<NNNN>.jsonl          per-unit telemetry, one file per day
//! <root>/tanks/<tank_id>/manual_counts.jsonl      manual-count ledger
//! <root>/tanks/<tank_id>/alerts.jsonl             alerts and acknowledgements
//! <root>/tanks/<tank_id>/series.json              latest derived-series snapshot
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

const SECONDS_PER_DAY: f64 = 86_400.0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum RecordType {
    Truth,
    Detection,
    Telemetry,
    ManualCount,
    Alert,
    Calibration,
    Annotation,
    /// Written by a newer producer; kept verbatim.
    Other(String),
}

impl RecordType {
    pub fn as_str(&self) -> &str {
        match self {
            RecordType::Truth => "truth",
            RecordType::Detection => "detection",
            RecordType::Telemetry => "telemetry",
            RecordType::ManualCount => "manual_count",
            RecordType::Alert => "alert",
            RecordType::Calibration => "calibration",
            RecordType::Annotation => "annotation",
            RecordType::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> Self {
        match s {
            "truth" => RecordType::Truth,
            "detection" => RecordType::Detection,
            "telemetry" => RecordType::Telemetry,
            "manual_count" => RecordType::ManualCount,
            "alert" => RecordType::Alert,
            "calibration" => RecordType::Calibration,
            "annotation" => RecordType::Annotation,
            other => RecordType::Other(other.to_string()),
        }
    }
}

impl fmt::Display for RecordType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for RecordType {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for RecordType {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(RecordType::parse(&s))
    }
}

/// One line of a record log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecordEnvelope {
    pub schema_version: u32,
    pub record_type: RecordType,
    /// Seconds since the start of the run.
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tank_id: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub unit_id: Option<String>,
    /// Producer of the payload: `truth`, `oracle`, `reference`, `operator`, ...
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Arrival position at the owning tank's ordering point. Replaying a
    /// tank's records in `seq` order reproduces its series exactly.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
    pub payload: Value,
    /// Fields this version does not know about, preserved on round trip.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl RecordEnvelope {
    pub fn new(record_type: RecordType, timestamp: f64, payload: Value) -> Self {
        RecordEnvelope {
            schema_version: SCHEMA_VERSION,
            record_type,
            timestamp,
            tank_id: None,
            unit_id: None,
            source: None,
            seq: None,
            payload,
            extra: Map::new(),
        }
    }

    pub fn from_payload<T: Serialize>(record_type: RecordType, timestamp: f64, payload: &T) -> Result<Self> {
        Ok(Self::new(record_type, timestamp, serde_json::to_value(payload)?))
    }

    pub fn with_tank(mut self, tank_id: impl Into<String>) -> Self {
        self.tank_id = Some(tank_id.into());
        self
    }

    pub fn with_unit(mut self, unit_id: impl Into<String>) -> Self {
        self.unit_id = Some(unit_id.into());
        self
    }

    pub fn with_source(mut self, source: impl Into<String>) -> Self {
        self.source = Some(source.into());
        self
    }

    pub fn with_seq(mut self, seq: u64) -> Self {
        self.seq = Some(seq);
        self
    }

    pub fn payload_as<T: DeserializeOwned>(&self) -> Result<T> {
        Ok(serde_json::from_value(self.payload.clone())?)
    }

    /// The serialized line, without the trailing newline.
    pub fn to_line(&self) -> Result<String> {
        let line = serde_json::to_string(self)?;
        debug_assert!(!line.contains('\n'));
        Ok(line)
    }

    pub fn from_line(line: &str) -> Result<Self> {
        Ok(serde_json::from_str(line)?)
    }
}

/// What [`LogWriter::open`] had to repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Recovery {
    /// Bytes of an unterminated final line that were dropped.
    pub truncated_bytes: u64,
}

/// Single writer for one log file.
#[derive(Debug)]
pub struct LogWriter {
    path: PathBuf,
    file: File,
    end: u64,
}

impl LogWriter {
    /// Opens (creating if needed) the log at `path`, dropping a torn final line.
    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Recovery)> {
        let path = path.as_ref().to_path_buf();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
        }
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .create(true)
            .truncate(false)
            .open(&path)
            .map_err(|e| Error::storage(&path, e))?;
        let len = file.metadata().map_err(|e| Error::storage(&path, e))?.len();
        let keep = complete_prefix_len(&mut file, len).map_err(|e| Error::storage(&path, e))?;
        let recovery = Recovery {
            truncated_bytes: len - keep,
        };
        if keep < len {
            tracing::warn!(path = %path.display(), bytes = len - keep, "dropping torn final record");
            file.set_len(keep).map_err(|e| Error::storage(&path, e))?;
            file.sync_data().map_err(|e| Error::storage(&path, e))?;
        }
        file.seek(SeekFrom::Start(keep)).map_err(|e| Error::storage(&path, e))?;
        Ok((LogWriter { path, file, end: keep }, recovery))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Byte offset where the next record will start.
    pub fn end(&self) -> u64 {
        self.end
    }

    /// Appends one record and returns its position (byte offset of the line).
    pub fn append(&mut self, envelope: &RecordEnvelope) -> Result<u64> {
        let mut line = envelope.to_line()?;
        line.push('\n');
        let pos = self.end;
        if let Err(e) = self.file.write_all(line.as_bytes()) {
            // Leave no partial line behind for the next append to build on.
            let _ = self.file.set_len(pos);
            let _ = self.file.seek(SeekFrom::Start(pos));
            return Err(Error::storage(&self.path, e));
        }
        self.end += line.len() as u64;
        Ok(pos)
    }

    /// Flushes appended records to stable storage.
    pub fn sync(&self) -> Result<()> {
        self.file.sync_data().map_err(|e| Error::storage(&self.path, e))
    }
}

/// Length of the longest prefix of the file that ends in `\n`.
fn complete_prefix_len(file: &mut File, len: u64) -> std::io::Result<u64> {
    const CHUNK: u64 = 64 * 1024;
    let mut end = len;
    let mut buf = vec![0u8; CHUNK as usize];
    while end > 0 {
        let start = end.saturating_sub(CHUNK);
        let n = (end - start) as usize;
        file.seek(SeekFrom::Start(start))?;
        file.read_exact(&mut buf[..n])?;
        if let Some(i) = buf[..n].iter().rposition(|b| *b == b'\n') {
            return Ok(start + i as u64 + 1);
        }
        end = start;
    }
    Ok(0)
}

/// Record selection for [`scan`]. Empty fields match everything; the time
/// range is inclusive.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanFilter {
    pub record_types: Option<Vec<RecordType>>,
    pub time_range: Option<(f64, f64)>,
    pub tank_id: Option<String>,
    pub unit_id: Option<String>,
}

impl ScanFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn of_type(record_type: RecordType) -> Self {
        ScanFilter {
            record_types: Some(vec![record_type]),
            ..Self::default()
        }
    }

    pub fn tank(mut self, tank_id: impl Into<String>) -> Self {
        self.tank_id = Some(tank_id.into());
        self
    }

    pub fn between(mut self, from: f64, to: f64) -> Self {
        self.time_range = Some((from, to));
        self
    }

    pub fn matches(&self, env: &RecordEnvelope) -> bool {
        if let Some(types) = &self.record_types {
            if !types.contains(&env.record_type) {
                return false;
            }
        }
        if let Some((lo, hi)) = self.time_range {
            if !(env.timestamp >= lo && env.timestamp <= hi) {
                return false;
            }
        }
        if let Some(t) = &self.tank_id {
            if env.tank_id.as_ref() != Some(t) {
                return false;
            }
        }
        if let Some(u) = &self.unit_id {
            if env.unit_id.as_ref() != Some(u) {
                return false;
            }
        }
        true
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorruptLine {
    pub path: PathBuf,
    pub position: u64,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScanResult {
    /// `(position, envelope)` in position order.
    pub records: Vec<(u64, RecordEnvelope)>,
    pub corrupt: Vec<CorruptLine>,
}

impl ScanResult {
    pub fn envelopes(self) -> impl Iterator<Item = RecordEnvelope> {
        self.records.into_iter().map(|(_, e)| e)
    }
}

/// Reads every complete line of the log at `path`. Interior lines that do
/// not parse are reported and skipped; an unterminated final line (a write
/// in progress) is ignored.
pub fn scan(path: impl AsRef<Path>, filter: &ScanFilter) -> Result<ScanResult> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::storage(path, e))?;
    let mut reader = BufReader::new(file);
    let mut out = ScanResult::default();
    let mut pos = 0u64;
    let mut buf = Vec::new();
    loop {
        buf.clear();
        let n = reader
            .read_until(b'\n', &mut buf)
            .map_err(|e| Error::storage(path, e))?;
        if n == 0 || buf.last() != Some(&b'\n') {
            break;
        }
        let parsed = std::str::from_utf8(&buf[..n - 1])
            .map_err(|e| e.to_string())
            .and_then(|s| RecordEnvelope::from_line(s).map_err(|e| e.to_string()));
        match parsed {
            Ok(env) if filter.matches(&env) => out.records.push((pos, env)),
            Ok(_) => {}
            Err(reason) => {
                tracing::warn!(path = %path.display(), position = pos, %reason, "corrupt record");
                out.corrupt.push(CorruptLine {
                    path: path.to_path_buf(),
                    position: pos,
                    reason,
                });
            }
        }
        pos += n as u64;
    }
    Ok(out)
}

/// Writes `bytes` to `path` through a temporary file in the same directory
/// and a rename, so readers see either the old or the new contents.
pub fn write_atomic(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    let dir = path
        .parent()
        .filter(|d| !d.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::storage(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::storage(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::storage(path, e))?;
    tmp.as_file().sync_data().map_err(|e| Error::storage(path, e))?;
    tmp.persist(path).map_err(|e| Error::storage(path, e.error))?;
    Ok(())
}

/// Identifiers become path components, so only a conservative alphabet is allowed.
pub fn validate_id(id: &str) -> Result<()> {
    let ok = !id.is_empty()
        && id.len() <= 64
        && !id.starts_with('.')
        && id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.'));
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "identifier {id:?} must match [A-Za-z0-9._-]{{1,64}}"
        )))
    }
}

pub fn day_index(timestamp: f64) -> u64 {
    (timestamp.max(0.0) / SECONDS_PER_DAY).floor() as u64
}

/// A run directory with its per-unit logs, ledgers and snapshots.
#[derive(Debug)]
pub struct RunStore {
    root: PathBuf,
    writers: BTreeMap<PathBuf, LogWriter>,
}

impl RunStore {
    pub fn open(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref().to_path_buf();
        fs::create_dir_all(&root).map_err(|e| Error::storage(&root, e))?;
        Ok(RunStore {
            root,
            writers: BTreeMap::new(),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn unit_log_path(&self, unit_id: &str, day: u64) -> PathBuf {
        self.root.join("logs").join(unit_id).join(format!("day-{day:04}.jsonl"))
    }

    pub fn manual_counts_path(&self, tank_id: &str) -> PathBuf {
        self.root.join("tanks").join(tank_id).join("manual_counts.jsonl")
    }

    pub fn alerts_path(&self, tank_id: &str) -> PathBuf {
        self.root.join("tanks").join(tank_id).join("alerts.jsonl")
    }

    pub fn snapshot_path(&self, tank_id: &str) -> PathBuf {
        self.root.join("tanks").join(tank_id).join("series.json")
    }

    fn writer(&mut self, path: PathBuf) -> Result<&mut LogWriter> {
        if !self.writers.contains_key(&path) {
            let (w, _) = LogWriter::open(&path)?;
            self.writers.insert(path.clone(), w);
        }
        Ok(self.writers.get_mut(&path).expect("inserted above"))
    }

    /// Appends to the unit's log for the envelope's day.
    pub fn append_unit(&mut self, unit_id: &str, envelope: &RecordEnvelope) -> Result<u64> {
        validate_id(unit_id)?;
        let path = self.unit_log_path(unit_id, day_index(envelope.timestamp));
        self.writer(path)?.append(envelope)
    }

    pub fn append_manual_count(&mut self, tank_id: &str, envelope: &RecordEnvelope) -> Result<u64> {
        validate_id(tank_id)?;
        let path = self.manual_counts_path(tank_id);
        self.writer(path)?.append(envelope)
    }

    pub fn append_alert(&mut self, tank_id: &str, envelope: &RecordEnvelope) -> Result<u64> {
        validate_id(tank_id)?;
        let path = self.alerts_path(tank_id);
        self.writer(path)?.append(envelope)
    }

    pub fn sync_all(&self) -> Result<()> {
        self.writers.values().try_for_each(LogWriter::sync)
    }

    pub fn write_snapshot<T: Serialize>(&self, tank_id: &str, snapshot: &T) -> Result<PathBuf> {
        validate_id(tank_id)?;
        let path = self.snapshot_path(tank_id);
        let mut bytes = serde_json::to_vec_pretty(snapshot)?;
        bytes.push(b'\n');
        write_atomic(&path, &bytes)?;
        Ok(path)
    }

    pub fn read_snapshot<T: DeserializeOwned>(&self, tank_id: &str) -> Result<Option<T>> {
        let path = self.snapshot_path(tank_id);
        match fs::read(&path) {
            Ok(bytes) => Ok(Some(serde_json::from_slice(&bytes)?)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(Error::storage(path, e)),
        }
    }

    /// All per-unit log files, sorted by unit then day.
    pub fn unit_logs(&self) -> Result<Vec<PathBuf>> {
        jsonl_files_below(&self.root.join("logs"))
    }

    /// Per-tank ledgers (manual counts, alerts), sorted by path.
    pub fn tank_logs(&self) -> Result<Vec<PathBuf>> {
        jsonl_files_below(&self.root.join("tanks"))
    }

    /// Scans every unit log and tank ledger. Records keep their per-file
    /// position order; files are visited in path order.
    pub fn scan_all(&self, filter: &ScanFilter) -> Result<ScanResult> {
        let mut out = ScanResult::default();
        for f in self.unit_logs()?.into_iter().chain(self.tank_logs()?) {
            let r = scan(&f, filter)?;
            out.records.extend(r.records);
            out.corrupt.extend(r.corrupt);
        }
        Ok(out)
    }
}

/// `*.jsonl` files exactly one directory below `dir`.
fn jsonl_files_below(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let entries = match fs::read_dir(dir) {
        Ok(rd) => rd,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::storage(dir, e)),
    };
    for sub in entries {
        let sub = sub.map_err(|e| Error::storage(dir, e))?.path();
        if !sub.is_dir() {
            continue;
        }
        for f in fs::read_dir(&sub).map_err(|e| Error::storage(&sub, e))? {
            let f = f.map_err(|e| Error::storage(&sub, e))?.path();
            if f.extension().is_some_and(|x| x == "jsonl") {
                out.push(f);
            }
        }
    }
    out.sort();
    Ok(out)
}

/// Bundles a run directory into one tar archive.
pub fn export_archive(run_dir: impl AsRef<Path>, archive: impl AsRef<Path>) -> Result<()> {
    let (run_dir, archive) = (run_dir.as_ref(), archive.as_ref());
    if !run_dir.is_dir() {
        return Err(Error::InvalidArgument(format!(
            "{} is not a directory",
            run_dir.display()
        )));
    }
    let file = File::create(archive).map_err(|e| Error::storage(archive, e))?;
    let mut builder = tar::Builder::new(file);
    builder.follow_symlinks(false);
    builder
        .append_dir_all("run", run_dir)
        .map_err(|e| Error::storage(run_dir, e))?;
    let file = builder.into_inner().map_err(|e| Error::storage(archive, e))?;
    file.sync_all().map_err(|e| Error::storage(archive, e))?;
    Ok(())
}

/// Unpacks an archive made by [`export_archive`]; the run lands in `dest/run`.
pub fn import_archive(archive: impl AsRef<Path>, dest: impl AsRef<Path>) -> Result<PathBuf> {
    let (archive, dest) = (archive.as_ref(), dest.as_ref());
    let file = File::open(archive).map_err(|e| Error::storage(archive, e))?;
    tar::Archive::new(file)
        .unpack(dest)
        .map_err(|e| Error::storage(dest, e))?;
    Ok(dest.join("run"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn env(i: u64) -> RecordEnvelope {
        RecordEnvelope::new(
            RecordType::Telemetry,
            i as f64 * 10.0,
            json!({"i": i, "f": 0.1 * i as f64}),
        )
        .with_tank(format!("tank-{}", i % 3))
        .with_unit("u1")
    }

    #[test]
    fn append_then_read_back() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let (mut w, rec) = LogWriter::open(&path).unwrap();
        assert_eq!(rec.truncated_bytes, 0);
        let e = env(7).with_seq(3).with_source("oracle");
        assert_eq!(w.append(&e).unwrap(), 0);
        let got = scan(&path, &ScanFilter::all()).unwrap();
        assert_eq!(got.records, vec![(0, e)]);
    }

    #[test]
    fn torn_final_line_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.jsonl");
        let (mut w, _) = LogWriter::open(&path).unwrap();
        for i in 0..5 {
            w.append(&env(i)).unwrap();
        }
        let good_len = w.end();
        drop(w);
        let line = env(5).to_line().unwrap();
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(&line.as_bytes()[..line.len() / 2]).unwrap();
        drop(f);

        // Readers ignore the in-flight line; reopening removes it.
        assert_eq!(scan(&path, &ScanFilter::all()).unwrap().records.len(), 5);
        let (mut w, rec) = LogWriter::open(&path).unwrap();
        assert_eq!(rec.truncated_bytes, (line.len() / 2) as u64);
        assert_eq!(w.end(), good_len);
        w.append(&env(6)).unwrap();
        let got: Vec<_> = scan(&path, &ScanFilter::all()).unwrap().envelopes().collect();
        assert_eq!(got.len(), 6);
        assert_eq!(got[5], env(6));
    }

    #[test]
    fn positions_strictly_increase() {
        let dir = tempfile::tempdir().unwrap();
        let (mut w, _) = LogWriter::open(dir.path().join("big.jsonl")).unwrap();
        let e = RecordEnvelope::new(RecordType::Telemetry, 0.0, json!(1));
        let mut last = None;
        for _ in 0..100_000 {
            let p = w.append(&e).unwrap();
            assert!(last.is_none_or(|l| p > l));
            last = Some(p);
        }
    }

    #[test]
    fn corrupt_interior_line_reported_and_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let (mut w, _) = LogWriter::open(&path).unwrap();
        w.append(&env(0)).unwrap();
        drop(w);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{not json\n").unwrap();
        drop(f);
        let (mut w, _) = LogWriter::open(&path).unwrap();
        w.append(&env(1)).unwrap();
        let r = scan(&path, &ScanFilter::all()).unwrap();
        assert_eq!(r.records.len(), 2);
        assert_eq!(r.corrupt.len(), 1);
        assert_eq!(
            r.corrupt[0].position,
            r.records[0].1.to_line().unwrap().len() as u64 + 1
        );
    }

    #[test]
    fn unknown_type_and_fields_survive() {
        let line =
            r#"{"schema_version":2,"record_type":"thermal","timestamp":1.5,"payload":{"c":21.5},"checksum":"ab"}"#;
        let e = RecordEnvelope::from_line(line).unwrap();
        assert_eq!(e.record_type, RecordType::Other("thermal".into()));
        assert_eq!(e.extra["checksum"], json!("ab"));
        let back: Value = serde_json::from_str(&e.to_line().unwrap()).unwrap();
        assert_eq!(back, serde_json::from_str::<Value>(line).unwrap());
    }

    #[test]
    fn filters() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.jsonl");
        let (mut w, _) = LogWriter::open(&path).unwrap();
        for i in 0..30 {
            w.append(&env(i)).unwrap();
        }
        assert_eq!(scan(&path, &ScanFilter::all()).unwrap().records.len(), 30);
        assert!(scan(&path, &ScanFilter::all().between(1e6, 2e6))
            .unwrap()
            .records
            .is_empty());
        assert_eq!(
            scan(&path, &ScanFilter::all().between(0.0, 95.0))
                .unwrap()
                .records
                .len(),
            10
        );
        assert_eq!(
            scan(&path, &ScanFilter::all().tank("tank-1")).unwrap().records.len(),
            10
        );
        assert!(scan(&path, &ScanFilter::of_type(RecordType::Truth))
            .unwrap()
            .records
            .is_empty());
    }

    #[test]
    fn snapshots_are_replaced_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let store = RunStore::open(dir.path()).unwrap();
        assert_eq!(store.read_snapshot::<Value>("t1").unwrap(), None);
        store.write_snapshot("t1", &json!({"v": 1})).unwrap();
        store.write_snapshot("t1", &json!({"v": 2})).unwrap();
        assert_eq!(store.read_snapshot::<Value>("t1").unwrap(), Some(json!({"v": 2})));
        let leftovers = fs::read_dir(store.snapshot_path("t1").parent().unwrap())
            .unwrap()
            .count();
        assert_eq!(leftovers, 1);
        assert!(store.write_snapshot("../evil", &json!(0)).is_err());
    }

    #[test]
    fn unit_logs_split_by_day_and_export_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let run = dir.path().join("run-a");
        let mut store = RunStore::open(&run).unwrap();
        store.append_unit("u1", &env(0)).unwrap();
        store
            .append_unit("u1", &RecordEnvelope::new(RecordType::Telemetry, 90_000.0, json!(null)))
            .unwrap();
        store.append_unit("u2", &env(1)).unwrap();
        store.sync_all().unwrap();
        let logs = store.unit_logs().unwrap();
        assert_eq!(logs.len(), 3);
        assert!(logs[1].ends_with("logs/u1/day-0001.jsonl"));

        let archive = dir.path().join("run.tar");
        export_archive(&run, &archive).unwrap();
        let restored = import_archive(&archive, dir.path().join("restored")).unwrap();
        let a = store.scan_all(&ScanFilter::all()).unwrap();
        let b = RunStore::open(&restored).unwrap().scan_all(&ScanFilter::all()).unwrap();
        assert_eq!(a.records, b.records);
    }

    fn arb_value() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::from),
            any::<i64>().prop_map(Value::from),
            any::<f64>()
                .prop_filter("finite", |f| f.is_finite())
                .prop_map(Value::from),
            "[a-z \\n\"\\\\]{0,12}".prop_map(Value::from),
        ];
        leaf.prop_recursive(3, 24, 4, |inner| {
            prop_oneof![
                proptest::collection::vec(inner.clone(), 0..4).prop_map(Value::from),
                proptest::collection::btree_map("[a-z]{1,6}", inner, 0..4)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    fn arb_type() -> impl Strategy<Value = RecordType> {
        prop_oneof![
            Just(RecordType::Truth),
            Just(RecordType::Detection),
            Just(RecordType::Telemetry),
            Just(RecordType::ManualCount),
            Just(RecordType::Alert),
            Just(RecordType::Calibration),
            Just(RecordType::Annotation),
            "x_[a-z]{1,8}".prop_map(RecordType::Other),
        ]
    }

    proptest! {
        #[test]
        fn envelope_round_trip(
            rt in arb_type(),
            ts in 0.0f64..1e7,
            tank in proptest::option::of("[a-z0-9]{1,6}"),
            seq in proptest::option::of(any::<u64>()),
            payload in arb_value(),
        ) {
            let mut e = RecordEnvelope::new(rt, ts, payload);
            e.tank_id = tank;
            e.seq = seq;
            let line = e.to_line().unwrap();
            prop_assert!(!line.contains('\n'));
            prop_assert_eq!(RecordEnvelope::from_line(&line).unwrap(), e);
        }

        #[test]
        fn filtered_scan_equals_filtering_full_scan(
            times in proptest::collection::vec(0.0f64..1000.0, 0..40),
            lo in 0.0f64..1000.0,
            span in 0.0f64..500.0,
            tank in 0u64..4,
        ) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("p.jsonl");
            let (mut w, _) = LogWriter::open(&path).unwrap();
            for (i, t) in times.iter().enumerate() {
                let rt = if i % 4 == 0 { RecordType::Truth } else { RecordType::Telemetry };
                w.append(&RecordEnvelope::new(rt, *t, json!(i)).with_tank(format!("tank-{}", i % 3))).unwrap();
            }
            let filter = ScanFilter {
                record_types: Some(vec![RecordType::Telemetry]),
                time_range: Some((lo, lo + span)),
                tank_id: Some(format!("tank-{tank}")),
                unit_id: None,
            };
            let direct = scan(&path, &filter).unwrap().records;
            let full: Vec<_> = scan(&path, &ScanFilter::all()).unwrap().records
                .into_iter().filter(|(_, e)| filter.matches(e)).collect();
            prop_assert_eq!(direct, full);
        }
    }
}
