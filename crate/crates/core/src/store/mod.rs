//! Dataset ingestion and persistence.
//!
//! Everything lives in one SQLite file per deployment. Datasets are keyed by
//! `dataset_id`; analysis results sit next to them keyed by
//! `(dataset_id, kind, content hash)` so repeated identical jobs overwrite
//! rather than accumulate.

mod ingest;
mod layout;

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;
use std::sync::Mutex;

use rusqlite::{params, Connection, OptionalExtension};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use ingest::{export_records, label_histogram, parse_dataset, DataFormat, IngestOptions, ParsedDataset};
pub use layout::{infer_layout, CanonicalField, ColumnSynonyms, DatasetLayout, LayoutInference};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("no recognizable text column")]
    NoTextColumn,
    #[error("header is empty")]
    EmptyHeader,
    #[error("duplicate column `{0}` (names are compared case-insensitively)")]
    DuplicateColumn(String),
    #[error("column `{0}` not found")]
    MissingColumn(String),
    #[error("parse error at row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("unsupported format `{0}`")]
    UnsupportedFormat(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("dataset `{0}` is not conversation-level")]
    WrongLayout(String),
    #[error("builtin benchmark `{0}` cannot be deleted")]
    BuiltinProtected(String),
    #[error("invalid column configuration: {0}")]
    Config(String),
    #[error("storage backend error: {0}")]
    Backend(String),
}

impl From<rusqlite::Error> for StoreError {
    fn from(e: rusqlite::Error) -> Self {
        StoreError::Backend(e.to_string())
    }
}

impl From<serde_json::Error> for StoreError {
    fn from(e: serde_json::Error) -> Self {
        StoreError::Backend(e.to_string())
    }
}

/// One ingested text unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MessageRecord {
    pub id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub conversation_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub speaker: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_label: Option<String>,
}

impl MessageRecord {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            text: text.into(),
            conversation_key: None,
            speaker: None,
            turn_index: None,
            gold_label: None,
        }
    }

    /// `speaker: text`, or just the text when the speaker is unknown.
    pub fn speaker_prefixed(&self) -> String {
        match &self.speaker {
            Some(s) => format!("{s}: {}", self.text),
            None => self.text.clone(),
        }
    }
}

/// An ordered multi-speaker dialogue.
///
/// Turns are sorted by `turn_index`; equal indices keep file order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConversationRecord {
    pub key: String,
    pub turns: Vec<MessageRecord>,
    pub participants: BTreeSet<String>,
}

impl ConversationRecord {
    /// Assembles a conversation from its rows (in file order).
    pub fn from_turns(key: impl Into<String>, mut turns: Vec<MessageRecord>) -> Self {
        turns.sort_by_key(|t| t.turn_index.unwrap_or(0));
        let participants = turns.iter().filter_map(|t| t.speaker.clone()).collect();
        Self {
            key: key.into(),
            turns,
            participants,
        }
    }

    /// Turns rendered as `speaker: text`, one per line.
    pub fn render(&self) -> String {
        self.turns
            .iter()
            .map(MessageRecord::speaker_prefixed)
            .collect::<Vec<_>>()
            .join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetOrigin {
    BuiltinBenchmark,
    UserUpload,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    pub dataset_id: String,
    pub name: String,
    pub layout: DatasetLayout,
    pub column_map: BTreeMap<String, CanonicalField>,
    pub record_count: usize,
    pub origin: DatasetOrigin,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IngestReport {
    pub descriptor: DatasetDescriptor,
    /// 1-based data rows dropped for having empty text.
    pub dropped_rows: Vec<usize>,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS datasets (
    id TEXT PRIMARY KEY,
    descriptor TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS records (
    dataset_id TEXT NOT NULL,
    seq INTEGER NOT NULL,
    conversation_key TEXT,
    record TEXT NOT NULL,
    PRIMARY KEY (dataset_id, seq)
);
CREATE INDEX IF NOT EXISTS records_by_conversation ON records (dataset_id, conversation_key);
CREATE TABLE IF NOT EXISTS results (
    dataset_id TEXT NOT NULL,
    kind TEXT NOT NULL,
    key TEXT NOT NULL,
    payload TEXT NOT NULL,
    PRIMARY KEY (dataset_id, kind, key)
);
";

pub struct Store {
    conn: Mutex<Connection>,
    synonyms: ColumnSynonyms,
}

impl Store {
    pub fn open(path: impl AsRef<Path>, synonyms: ColumnSynonyms) -> Result<Self, StoreError> {
        let conn = Connection::open(path)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        Self::init(conn, synonyms)
    }

    pub fn open_in_memory() -> Result<Self, StoreError> {
        Self::init(Connection::open_in_memory()?, ColumnSynonyms::default())
    }

    fn init(conn: Connection, synonyms: ColumnSynonyms) -> Result<Self, StoreError> {
        conn.execute_batch(SCHEMA)?;
        Ok(Self {
            conn: Mutex::new(conn),
            synonyms,
        })
    }

    pub fn synonyms(&self) -> &ColumnSynonyms {
        &self.synonyms
    }

    fn conn(&self) -> std::sync::MutexGuard<'_, Connection> {
        self.conn.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// Parses and persists an uploaded dataset.
    pub fn ingest_dataset(
        &self,
        name: &str,
        raw: &[u8],
        format: DataFormat,
    ) -> Result<IngestReport, StoreError> {
        let parsed = parse_dataset(raw, format, &self.synonyms, &IngestOptions::default())?;
        let id = uuid::Uuid::new_v4().to_string();
        self.persist(id, name, parsed, DatasetOrigin::UserUpload)
    }

    /// Registers a benchmark from a local file under a stable id derived from
    /// its name. Re-registering replaces the previous contents.
    pub fn register_builtin(
        &self,
        name: &str,
        path: impl AsRef<Path>,
        format: DataFormat,
        options: &IngestOptions,
    ) -> Result<IngestReport, StoreError> {
        let raw = std::fs::read(path.as_ref()).map_err(|e| {
            StoreError::NotFound(format!("{}: {e}", path.as_ref().display()))
        })?;
        let parsed = parse_dataset(&raw, format, &self.synonyms, options)?;
        self.persist(builtin_id(name), name, parsed, DatasetOrigin::BuiltinBenchmark)
    }

    fn persist(
        &self,
        id: String,
        name: &str,
        parsed: ParsedDataset,
        origin: DatasetOrigin,
    ) -> Result<IngestReport, StoreError> {
        let descriptor = DatasetDescriptor {
            dataset_id: id.clone(),
            name: name.to_string(),
            layout: parsed.inference.layout,
            column_map: parsed.inference.column_map,
            record_count: parsed.records.len(),
            origin,
        };
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute("DELETE FROM records WHERE dataset_id = ?1", params![id])?;
        tx.execute(
            "INSERT OR REPLACE INTO datasets (id, descriptor) VALUES (?1, ?2)",
            params![id, serde_json::to_string(&descriptor)?],
        )?;
        {
            let mut insert = tx.prepare(
                "INSERT INTO records (dataset_id, seq, conversation_key, record) VALUES (?1, ?2, ?3, ?4)",
            )?;
            for (seq, record) in parsed.records.iter().enumerate() {
                insert.execute(params![
                    id,
                    seq as i64,
                    record.conversation_key,
                    serde_json::to_string(record)?
                ])?;
            }
        }
        tx.commit()?;
        tracing::info!(dataset = %id, records = descriptor.record_count, dropped = parsed.dropped_rows.len(), "dataset ingested");
        Ok(IngestReport {
            descriptor,
            dropped_rows: parsed.dropped_rows,
        })
    }

    pub fn descriptor(&self, dataset_id: &str) -> Result<DatasetDescriptor, StoreError> {
        let raw: Option<String> = self
            .conn()
            .query_row(
                "SELECT descriptor FROM datasets WHERE id = ?1",
                params![dataset_id],
                |row| row.get(0),
            )
            .optional()?;
        let raw = raw.ok_or_else(|| StoreError::NotFound(format!("dataset `{dataset_id}`")))?;
        Ok(serde_json::from_str(&raw)?)
    }

    pub fn list_datasets(&self) -> Result<Vec<DatasetDescriptor>, StoreError> {
        let conn = self.conn();
        let mut stmt = conn.prepare("SELECT descriptor FROM datasets ORDER BY id")?;
        let rows = stmt.query_map([], |row| row.get::<_, String>(0))?;
        rows.map(|r| Ok(serde_json::from_str(&r?)?)).collect()
    }

    /// All records of a dataset, in file order.
    pub fn records(&self, dataset_id: &str) -> Result<Vec<MessageRecord>, StoreError> {
        self.descriptor(dataset_id)?;
        let conn = self.conn();
        let mut stmt =
            conn.prepare("SELECT record FROM records WHERE dataset_id = ?1 ORDER BY seq")?;
        let rows = stmt.query_map(params![dataset_id], |row| row.get::<_, String>(0))?;
        rows.map(|r| Ok(serde_json::from_str(&r?)?)).collect()
    }

    pub fn conversation_keys(&self, dataset_id: &str) -> Result<Vec<String>, StoreError> {
        self.require_conversational(dataset_id)?;
        let conn = self.conn();
        let mut stmt = conn.prepare(
            "SELECT conversation_key FROM records WHERE dataset_id = ?1 \
             GROUP BY conversation_key ORDER BY MIN(seq)",
        )?;
        let rows = stmt.query_map(params![dataset_id], |row| row.get::<_, String>(0))?;
        Ok(rows.collect::<Result<_, _>>()?)
    }

    fn require_conversational(&self, dataset_id: &str) -> Result<DatasetDescriptor, StoreError> {
        let descriptor = self.descriptor(dataset_id)?;
        if descriptor.layout != DatasetLayout::ConversationLevel {
            return Err(StoreError::WrongLayout(dataset_id.to_string()));
        }
        Ok(descriptor)
    }

    pub fn get_conversation(
        &self,
        dataset_id: &str,
        conversation_key: &str,
    ) -> Result<ConversationRecord, StoreError> {
        self.require_conversational(dataset_id)?;
        let turns: Vec<MessageRecord> = {
            let conn = self.conn();
            let mut stmt = conn.prepare(
                "SELECT record FROM records WHERE dataset_id = ?1 AND conversation_key = ?2 ORDER BY seq",
            )?;
            let rows = stmt.query_map(params![dataset_id, conversation_key], |row| {
                row.get::<_, String>(0)
            })?;
            rows.map(|r| Ok(serde_json::from_str(&r?)?))
                .collect::<Result<_, StoreError>>()?
        };
        if turns.is_empty() {
            return Err(StoreError::NotFound(format!(
                "conversation `{conversation_key}` in dataset `{dataset_id}`"
            )));
        }
        Ok(ConversationRecord::from_turns(conversation_key, turns))
    }

    /// Removes a user dataset and every result derived from it.
    pub fn delete_dataset(&self, dataset_id: &str) -> Result<(), StoreError> {
        let descriptor = self.descriptor(dataset_id)?;
        if descriptor.origin == DatasetOrigin::BuiltinBenchmark {
            return Err(StoreError::BuiltinProtected(dataset_id.to_string()));
        }
        let mut conn = self.conn();
        let tx = conn.transaction()?;
        tx.execute("DELETE FROM records WHERE dataset_id = ?1", params![dataset_id])?;
        tx.execute("DELETE FROM results WHERE dataset_id = ?1", params![dataset_id])?;
        tx.execute("DELETE FROM datasets WHERE id = ?1", params![dataset_id])?;
        tx.commit()?;
        Ok(())
    }

    pub fn export_dataset(&self, dataset_id: &str, format: DataFormat) -> Result<Vec<u8>, StoreError> {
        let descriptor = self.descriptor(dataset_id)?;
        let records = self.records(dataset_id)?;
        export_records(&records, descriptor.layout, format)
    }

    pub fn put_result(
        &self,
        dataset_id: &str,
        kind: &str,
        key: &str,
        payload: &serde_json::Value,
    ) -> Result<(), StoreError> {
        self.descriptor(dataset_id)?;
        self.conn().execute(
            "INSERT OR REPLACE INTO results (dataset_id, kind, key, payload) VALUES (?1, ?2, ?3, ?4)",
            params![dataset_id, kind, key, serde_json::to_string(payload)?],
        )?;
        Ok(())
    }

    pub fn get_result(
        &self,
        dataset_id: &str,
        kind: &str,
        key: &str,
    ) -> Result<Option<serde_json::Value>, StoreError> {
        let raw: Option<String> = self
            .conn()
            .query_row(
                "SELECT payload FROM results WHERE dataset_id = ?1 AND kind = ?2 AND key = ?3",
                params![dataset_id, kind, key],
                |row| row.get(0),
            )
            .optional()?;
        raw.map(|r| serde_json::from_str(&r).map_err(StoreError::from))
            .transpose()
    }
}

pub fn builtin_id(name: &str) -> String {
    let slug: String = name
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() {
                c.to_ascii_lowercase()
            } else {
                '-'
            }
        })
        .collect();
    format!("builtin-{slug}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> Store {
        Store::open_in_memory().unwrap()
    }

    #[test]
    fn ingest_and_describe() {
        let s = store();
        let report = s
            .ingest_dataset("tiny", b"text,label\nhi,none", DataFormat::Csv)
            .unwrap();
        let d = &report.descriptor;
        assert_eq!(d.layout, DatasetLayout::MessageLevel);
        assert_eq!(d.record_count, 1);
        assert_eq!(d.origin, DatasetOrigin::UserUpload);
        assert_eq!(s.descriptor(&d.dataset_id).unwrap(), *d);
        assert!(matches!(
            s.get_conversation(&d.dataset_id, "x"),
            Err(StoreError::WrongLayout(_))
        ));
    }

    #[test]
    fn conversation_sorted_by_turn_then_file_order() {
        let s = store();
        let raw = "conversation_id,speaker,text,turn_index\nk,a,two,2\nk,b,zero,0\nk,a,one,1\nz,c,other,0\nk,b,one-bis,1\n";
        let id = s
            .ingest_dataset("conv", raw.as_bytes(), DataFormat::Csv)
            .unwrap()
            .descriptor
            .dataset_id;
        let conv = s.get_conversation(&id, "k").unwrap();
        let texts: Vec<_> = conv.turns.iter().map(|t| t.text.as_str()).collect();
        assert_eq!(texts, ["zero", "one", "one-bis", "two"]);
        assert_eq!(
            conv.participants.iter().cloned().collect::<Vec<_>>(),
            ["a", "b"]
        );
        assert!(matches!(
            s.get_conversation(&id, "missing"),
            Err(StoreError::NotFound(_))
        ));
        assert_eq!(s.conversation_keys(&id).unwrap(), ["k", "z"]);
    }

    #[test]
    fn delete_removes_dataset_and_results() {
        let s = store();
        let id = s
            .ingest_dataset("d", b"text\na\n", DataFormat::Csv)
            .unwrap()
            .descriptor
            .dataset_id;
        s.put_result(&id, "ppl_gain", "h", &serde_json::json!({"x": 1}))
            .unwrap();
        s.delete_dataset(&id).unwrap();
        assert!(matches!(s.descriptor(&id), Err(StoreError::NotFound(_))));
        assert!(s.get_result(&id, "ppl_gain", "h").unwrap().is_none());
        assert!(matches!(s.delete_dataset(&id), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn builtin_is_protected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bench.csv");
        std::fs::write(&path, "id,text,label\n1,a,x\n").unwrap();
        let s = store();
        let d = s
            .register_builtin("HatEval", &path, DataFormat::Csv, &IngestOptions::default())
            .unwrap()
            .descriptor;
        assert_eq!(d.dataset_id, "builtin-hateval");
        assert!(matches!(
            s.delete_dataset(&d.dataset_id),
            Err(StoreError::BuiltinProtected(_))
        ));
        // idempotent re-registration
        s.register_builtin("HatEval", &path, DataFormat::Csv, &IngestOptions::default())
            .unwrap();
        assert_eq!(s.records(&d.dataset_id).unwrap().len(), 1);
    }

    #[test]
    fn file_backed_store_persists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("db.sqlite");
        let id = {
            let s = Store::open(&path, ColumnSynonyms::default()).unwrap();
            s.ingest_dataset("d", b"text\na\n", DataFormat::Csv)
                .unwrap()
                .descriptor
                .dataset_id
        };
        let s = Store::open(&path, ColumnSynonyms::default()).unwrap();
        assert_eq!(s.records(&id).unwrap()[0].text, "a");
    }
}
