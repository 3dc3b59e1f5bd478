//! Record store backing users, the role catalog, the assignment log,
//! privileges, associations, identity bindings and provider accounts.
//!
//! On disk a store is a directory holding one append-only log per record
//! kind (`<dir>/<kind>.log`) plus an advisory lock file (`<dir>/LOCK`).
//! Every line is one JSON object:
//!
//! ```text
//! {"key":"00000001","version":1,"payload":"{...}"}
//! {"key":"00000001","version":2,"payload":"{...}"}
//! {"key":"00000007","version":3}          <- tombstone (no payload)
//! ```
//!
//! The newest line for a key wins. Any prefix of a log is a valid state, so
//! a torn final line left by a crash is dropped (and truncated away) on open.
//! Logs are rewritten in place once superseded lines dominate.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use parking_lot::Mutex;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lines below this count never trigger compaction.
const COMPACT_MIN_LINES: usize = 64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("store directory {0} is locked by another writer")]
    Locked(PathBuf),
    #[error("unknown record kind `{0}`")]
    UnknownKind(String),
    #[error("corrupt record in {kind}.log at line {line}")]
    Corrupt { kind: RecordKind, line: usize },
    #[error("payload for {kind}/{key} does not round-trip: {source}")]
    Payload {
        kind: RecordKind,
        key: String,
        #[source]
        source: serde_json::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> StoreError + '_ {
    move |source| StoreError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordKind {
    User,
    Role,
    GlobalCatalog,
    Assignment,
    Revocation,
    Privilege,
    Association,
    IdentityBinding,
    OpAccount,
}

impl RecordKind {
    pub const ALL: [RecordKind; 9] = [
        RecordKind::User,
        RecordKind::Role,
        RecordKind::GlobalCatalog,
        RecordKind::Assignment,
        RecordKind::Revocation,
        RecordKind::Privilege,
        RecordKind::Association,
        RecordKind::IdentityBinding,
        RecordKind::OpAccount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RecordKind::User => "user",
            RecordKind::Role => "role",
            RecordKind::GlobalCatalog => "global_catalog",
            RecordKind::Assignment => "assignment",
            RecordKind::Revocation => "revocation",
            RecordKind::Privilege => "privilege",
            RecordKind::Association => "association",
            RecordKind::IdentityBinding => "identity_binding",
            RecordKind::OpAccount => "op_account",
        }
    }
}

impl fmt::Display for RecordKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RecordKind {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RecordKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| StoreError::UnknownKind(s.to_string()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StoreRecord {
    pub kind: RecordKind,
    pub key: String,
    pub payload: String,
    pub version: u64,
}

#[derive(Serialize, Deserialize)]
struct LogLine {
    key: String,
    version: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    payload: Option<String>,
}

#[derive(Default)]
struct Table {
    records: BTreeMap<String, StoreRecord>,
    file: Option<File>,
    lines: usize,
}

struct Inner {
    dir: Option<PathBuf>,
    tables: BTreeMap<RecordKind, Table>,
    // Held for the lifetime of the handle; dropping it releases the lock.
    _lock: Option<File>,
}

/// A store handle. All operations are atomic with respect to each other.
pub struct Store {
    inner: Mutex<Inner>,
}

impl fmt::Debug for Store {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let inner = self.inner.lock();
        f.debug_struct("Store").field("dir", &inner.dir).finish()
    }
}

impl Store {
    pub fn in_memory() -> Store {
        Store {
            inner: Mutex::new(Inner {
                dir: None,
                tables: RecordKind::ALL
                    .into_iter()
                    .map(|k| (k, Table::default()))
                    .collect(),
                _lock: None,
            }),
        }
    }

    /// Opens (creating if needed) a store directory and replays its logs.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store, StoreError> {
        let dir = dir.as_ref().to_path_buf();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;

        let lock_path = dir.join("LOCK");
        let lock = OpenOptions::new()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&lock_path)
            .map_err(io_err(&lock_path))?;
        match lock.try_lock() {
            Ok(()) => {}
            Err(fs::TryLockError::WouldBlock) => return Err(StoreError::Locked(dir)),
            Err(fs::TryLockError::Error(e)) => return Err(io_err(&lock_path)(e)),
        }

        let mut tables = BTreeMap::new();
        for kind in RecordKind::ALL {
            let path = dir.join(format!("{}.log", kind.name()));
            tables.insert(kind, load_table(kind, &path)?);
        }

        Ok(Store {
            inner: Mutex::new(Inner {
                dir: Some(dir),
                tables,
                _lock: Some(lock),
            }),
        })
    }

    pub fn dir(&self) -> Option<PathBuf> {
        self.inner.lock().dir.clone()
    }

    pub fn put(&self, kind: RecordKind, key: &str, payload: String) -> Result<u64, StoreError> {
        let mut inner = self.inner.lock();
        let dir = inner.dir.clone();
        let table = inner.tables.get_mut(&kind).expect("all kinds present");
        let version = table.records.get(key).map_or(1, |r| r.version + 1);
        let line = LogLine {
            key: key.to_string(),
            version,
            payload: Some(payload.clone()),
        };
        append(table, dir.as_deref(), kind, &line)?;
        table.records.insert(
            key.to_string(),
            StoreRecord {
                kind,
                key: key.to_string(),
                payload,
                version,
            },
        );
        maybe_compact(table, dir.as_deref(), kind)?;
        Ok(version)
    }

    /// Removes a key. Returns whether it was present.
    pub fn delete(&self, kind: RecordKind, key: &str) -> Result<bool, StoreError> {
        let mut inner = self.inner.lock();
        let dir = inner.dir.clone();
        let table = inner.tables.get_mut(&kind).expect("all kinds present");
        let Some(prev) = table.records.get(key) else {
            return Ok(false);
        };
        let line = LogLine {
            key: key.to_string(),
            version: prev.version + 1,
            payload: None,
        };
        append(table, dir.as_deref(), kind, &line)?;
        table.records.remove(key);
        maybe_compact(table, dir.as_deref(), kind)?;
        Ok(true)
    }

    pub fn get(&self, kind: RecordKind, key: &str) -> Option<StoreRecord> {
        self.inner.lock().tables[&kind].records.get(key).cloned()
    }

    /// All live records of one kind, in key order.
    pub fn scan(&self, kind: RecordKind) -> Vec<StoreRecord> {
        self.inner.lock().tables[&kind]
            .records
            .values()
            .cloned()
            .collect()
    }

    pub fn len(&self, kind: RecordKind) -> usize {
        self.inner.lock().tables[&kind].records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner
            .lock()
            .tables
            .values()
            .all(|t| t.records.is_empty())
    }

    pub fn put_json<T: Serialize>(
        &self,
        kind: RecordKind,
        key: &str,
        value: &T,
    ) -> Result<u64, StoreError> {
        let payload = serde_json::to_string(value).map_err(|source| StoreError::Payload {
            kind,
            key: key.to_string(),
            source,
        })?;
        self.put(kind, key, payload)
    }

    pub fn get_json<T: DeserializeOwned>(
        &self,
        kind: RecordKind,
        key: &str,
    ) -> Result<Option<T>, StoreError> {
        self.get(kind, key).map(|r| decode(&r)).transpose()
    }

    pub fn scan_json<T: DeserializeOwned>(&self, kind: RecordKind) -> Result<Vec<T>, StoreError> {
        self.scan(kind).iter().map(decode).collect()
    }

    /// Rewrites every log so it holds exactly one line per live key.
    pub fn compact(&self) -> Result<(), StoreError> {
        let mut inner = self.inner.lock();
        let dir = inner.dir.clone();
        for (kind, table) in inner.tables.iter_mut() {
            rewrite(table, dir.as_deref(), *kind)?;
        }
        Ok(())
    }

    /// Number of lines currently in a kind's log (live plus superseded).
    pub fn log_lines(&self, kind: RecordKind) -> usize {
        self.inner.lock().tables[&kind].lines
    }
}

fn decode<T: DeserializeOwned>(r: &StoreRecord) -> Result<T, StoreError> {
    serde_json::from_str(&r.payload).map_err(|source| StoreError::Payload {
        kind: r.kind,
        key: r.key.clone(),
        source,
    })
}

fn log_path(dir: &Path, kind: RecordKind) -> PathBuf {
    dir.join(format!("{}.log", kind.name()))
}

fn load_table(kind: RecordKind, path: &Path) -> Result<Table, StoreError> {
    let mut file = OpenOptions::new()
        .create(true)
        .truncate(false)
        .read(true)
        .append(true)
        .open(path)
        .map_err(io_err(path))?;
    let mut raw = Vec::new();
    file.read_to_end(&mut raw).map_err(io_err(path))?;

    let mut table = Table::default();
    let mut valid_len = 0usize;
    let mut offset = 0usize;
    let mut line_no = 0usize;
    while offset < raw.len() {
        let Some(nl) = raw[offset..].iter().position(|&b| b == b'\n') else {
            // torn tail without a newline
            break;
        };
        line_no += 1;
        let line = &raw[offset..offset + nl];
        let next = offset + nl + 1;
        let parsed = std::str::from_utf8(line)
            .ok()
            .and_then(|s| serde_json::from_str::<LogLine>(s).ok());
        match parsed {
            Some(entry) => {
                table.lines += 1;
                match entry.payload {
                    Some(payload) => {
                        table.records.insert(
                            entry.key.clone(),
                            StoreRecord {
                                kind,
                                key: entry.key,
                                payload,
                                version: entry.version,
                            },
                        );
                    }
                    None => {
                        table.records.remove(&entry.key);
                    }
                }
                valid_len = next;
            }
            None if next == raw.len() => break,
            None => return Err(StoreError::Corrupt { kind, line: line_no }),
        }
        offset = next;
    }

    if valid_len < raw.len() {
        tracing::warn!(
            path = %path.display(),
            dropped = raw.len() - valid_len,
            "truncating partial trailing record"
        );
        file.set_len(valid_len as u64).map_err(io_err(path))?;
        file.seek(SeekFrom::End(0)).map_err(io_err(path))?;
    }
    table.file = Some(file);
    Ok(table)
}

fn append(
    table: &mut Table,
    dir: Option<&Path>,
    kind: RecordKind,
    line: &LogLine,
) -> Result<(), StoreError> {
    if let (Some(file), Some(dir)) = (table.file.as_mut(), dir) {
        let path = log_path(dir, kind);
        let mut buf = serde_json::to_vec(line).expect("log line serializes");
        buf.push(b'\n');
        file.write_all(&buf).map_err(io_err(&path))?;
        file.flush().map_err(io_err(&path))?;
    }
    table.lines += 1;
    Ok(())
}

fn maybe_compact(table: &mut Table, dir: Option<&Path>, kind: RecordKind) -> Result<(), StoreError> {
    if table.lines > COMPACT_MIN_LINES && table.lines > 2 * table.records.len() {
        rewrite(table, dir, kind)?;
    }
    Ok(())
}

fn rewrite(table: &mut Table, dir: Option<&Path>, kind: RecordKind) -> Result<(), StoreError> {
    let Some(dir) = dir else {
        table.lines = table.records.len();
        return Ok(());
    };
    let path = log_path(dir, kind);
    let tmp = dir.join(format!("{}.log.tmp", kind.name()));
    {
        let mut out = File::create(&tmp).map_err(io_err(&tmp))?;
        for r in table.records.values() {
            let line = LogLine {
                key: r.key.clone(),
                version: r.version,
                payload: Some(r.payload.clone()),
            };
            let mut buf = serde_json::to_vec(&line).expect("log line serializes");
            buf.push(b'\n');
            out.write_all(&buf).map_err(io_err(&tmp))?;
        }
        out.sync_all().map_err(io_err(&tmp))?;
    }
    fs::rename(&tmp, &path).map_err(io_err(&path))?;
    table.file = Some(
        OpenOptions::new()
            .append(true)
            .open(&path)
            .map_err(io_err(&path))?,
    );
    table.lines = table.records.len();
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fresh_path_is_empty() {
        let dir = tempfile::tempdir().unwrap();
        let store = Store::open(dir.path().join("s")).unwrap();
        assert!(store.is_empty());
        assert!(dir.path().join("s/LOCK").exists());
    }

    #[test]
    fn put_get_and_absent() {
        let store = Store::in_memory();
        assert_eq!(store.put(RecordKind::User, "a", "1".into()).unwrap(), 1);
        assert_eq!(store.get(RecordKind::User, "a").unwrap().payload, "1");
        assert!(store.get(RecordKind::User, "b").is_none());
        assert_eq!(store.put(RecordKind::User, "a", "2".into()).unwrap(), 2);
    }

    #[test]
    fn scan_is_key_ordered() {
        let store = Store::in_memory();
        for k in ["c", "a", "b"] {
            store.put(RecordKind::Role, k, k.to_string()).unwrap();
        }
        let keys: Vec<_> = store
            .scan(RecordKind::Role)
            .into_iter()
            .map(|r| r.key)
            .collect();
        assert_eq!(keys, ["a", "b", "c"]);
    }

    #[test]
    fn unknown_kind_is_rejected() {
        assert!(matches!(
            "widgets".parse::<RecordKind>(),
            Err(StoreError::UnknownKind(_))
        ));
        assert_eq!(
            "global_catalog".parse::<RecordKind>().unwrap(),
            RecordKind::GlobalCatalog
        );
    }

    #[test]
    fn reopen_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(RecordKind::User, "1", "root".into()).unwrap();
            store.put(RecordKind::User, "2", "x".into()).unwrap();
            store.put(RecordKind::User, "2", "dharmendra".into()).unwrap();
            store.put(RecordKind::Role, "0", "admin".into()).unwrap();
            store.delete(RecordKind::Role, "0").unwrap();
        }
        let store = Store::open(dir.path()).unwrap();
        let users = store.scan(RecordKind::User);
        assert_eq!(users.len(), 2);
        assert_eq!(users[1].payload, "dharmendra");
        assert_eq!(users[1].version, 2);
        assert!(store.get(RecordKind::Role, "0").is_none());
    }

    #[test]
    fn second_writer_is_locked_out() {
        let dir = tempfile::tempdir().unwrap();
        let _first = Store::open(dir.path()).unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::Locked(_))
        ));
    }

    #[test]
    fn truncated_tail_is_dropped() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            store.put(RecordKind::User, "1", "root".into()).unwrap();
            store.put(RecordKind::User, "2", "try".into()).unwrap();
        }
        let path = dir.path().join("user.log");
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(br#"{"key":"3","version":1,"payl"#).unwrap();
        drop(f);

        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.len(RecordKind::User), 2);
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.ends_with('\n'));
        assert_eq!(text.lines().count(), 2);

        // appends after truncation land on a clean line boundary
        store.put(RecordKind::User, "3", "new".into()).unwrap();
        drop(store);
        let store = Store::open(dir.path()).unwrap();
        assert_eq!(store.len(RecordKind::User), 3);
    }

    #[test]
    fn corrupt_middle_line_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(
            dir.path().join("role.log"),
            "{\"key\":\"0\",\"version\":1,\"payload\":\"x\"}\nnot json\n{\"key\":\"1\",\"version\":1,\"payload\":\"y\"}\n",
        )
        .unwrap();
        assert!(matches!(
            Store::open(dir.path()),
            Err(StoreError::Corrupt { line: 2, .. })
        ));
    }

    #[test]
    fn compaction_keeps_latest_versions() {
        let dir = tempfile::tempdir().unwrap();
        {
            let store = Store::open(dir.path()).unwrap();
            for i in 0..200 {
                store
                    .put(RecordKind::Association, &format!("h{}", i % 3), i.to_string())
                    .unwrap();
            }
            assert!(store.log_lines(RecordKind::Association) <= COMPACT_MIN_LINES + 1);
        }
        let store = Store::open(dir.path()).unwrap();
        let recs = store.scan(RecordKind::Association);
        assert_eq!(recs.len(), 3);
        assert_eq!(recs[0].payload, "198");
        assert_eq!(recs[0].version, 67);
    }
}
