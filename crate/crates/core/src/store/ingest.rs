use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::layout::{infer_layout, CanonicalField, ColumnSynonyms, DatasetLayout, LayoutInference};
use super::{MessageRecord, StoreError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Jsonl,
}

impl std::str::FromStr for DataFormat {
    type Err = StoreError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(DataFormat::Csv),
            "jsonl" | "ndjson" => Ok(DataFormat::Jsonl),
            other => Err(StoreError::UnsupportedFormat(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct IngestOptions {
    pub label_column: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParsedDataset {
    pub inference: LayoutInference,
    pub records: Vec<MessageRecord>,
    pub dropped_rows: Vec<usize>,
}

/// Raw table: header plus rows of optional cells, each tagged with its
/// 1-based data row number.
struct Table {
    header: Vec<String>,
    rows: Vec<(usize, Vec<Option<String>>)>,
}

pub fn parse_dataset(
    raw: &[u8],
    format: DataFormat,
    synonyms: &ColumnSynonyms,
    options: &IngestOptions,
) -> Result<ParsedDataset, StoreError> {
    let table = match format {
        DataFormat::Csv => read_csv(raw)?,
        DataFormat::Jsonl => read_jsonl(raw)?,
    };
    let inference = infer_layout(&table.header, synonyms, options.label_column.as_deref())?;
    let (records, dropped_rows) = build_records(&table, &inference)?;
    Ok(ParsedDataset {
        inference,
        records,
        dropped_rows,
    })
}

/// True when a quoted field is still open at end of input.
fn has_unterminated_quote(raw: &[u8]) -> bool {
    let mut in_quotes = false;
    let mut at_field_start = true;
    let mut i = 0;
    while i < raw.len() {
        let b = raw[i];
        if in_quotes {
            if b == b'"' {
                if raw.get(i + 1) == Some(&b'"') {
                    i += 1;
                } else {
                    in_quotes = false;
                }
            }
        } else {
            match b {
                b'"' if at_field_start => in_quotes = true,
                b'\n' => {
                    at_field_start = true;
                    i += 1;
                    continue;
                }
                _ => {}
            }
            at_field_start = b == b',';
        }
        i += 1;
    }
    in_quotes
}

fn read_csv(raw: &[u8]) -> Result<Table, StoreError> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(false)
        .from_reader(raw);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| StoreError::Parse {
            row: 0,
            message: e.to_string(),
        })?
        .iter()
        .map(|s| s.trim_start_matches('\u{feff}').to_string())
        .collect();
    let mut rows = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| StoreError::Parse {
            row,
            message: e.to_string(),
        })?;
        let cells = record
            .iter()
            .map(|c| (!c.is_empty()).then(|| c.to_string()))
            .collect();
        rows.push((row, cells));
    }
    // The csv crate reads an unterminated quote as a field running to EOF,
    // so the offending row is the last record produced.
    if has_unterminated_quote(raw) {
        let row = rows.len().max(1);
        return Err(StoreError::Parse {
            row,
            message: "unbalanced quote".into(),
        });
    }
    Ok(Table { header, rows })
}

fn json_cell(value: &serde_json::Value) -> Option<String> {
    match value {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) if s.is_empty() => None,
        serde_json::Value::String(s) => Some(s.clone()),
        other => Some(other.to_string()),
    }
}

fn read_jsonl(raw: &[u8]) -> Result<Table, StoreError> {
    let text = std::str::from_utf8(raw).map_err(|e| StoreError::Parse {
        row: 0,
        message: e.to_string(),
    })?;
    let mut header: Vec<String> = Vec::new();
    let mut seen = HashSet::new();
    let mut objects = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let row = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(line).map_err(|e| StoreError::Parse {
            row,
            message: e.to_string(),
        })?;
        let serde_json::Value::Object(map) = value else {
            return Err(StoreError::Parse {
                row,
                message: "expected a JSON object".into(),
            });
        };
        for key in map.keys() {
            if seen.insert(key.clone()) {
                header.push(key.clone());
            }
        }
        objects.push((row, map));
    }
    let rows = objects
        .into_iter()
        .map(|(row, map)| {
            let cells = header
                .iter()
                .map(|h| map.get(h).and_then(json_cell))
                .collect();
            (row, cells)
        })
        .collect();
    Ok(Table { header, rows })
}

fn build_records(
    table: &Table,
    inference: &LayoutInference,
) -> Result<(Vec<MessageRecord>, Vec<usize>), StoreError> {
    let position = |field: CanonicalField| {
        inference
            .column_for(field)
            .and_then(|col| table.header.iter().position(|h| h == col))
    };
    let text_col = position(CanonicalField::Text).ok_or(StoreError::NoTextColumn)?;
    let id_col = position(CanonicalField::Id);
    let label_col = position(CanonicalField::GoldLabel);
    let speaker_col = position(CanonicalField::Speaker);
    let turn_col = position(CanonicalField::TurnIndex);
    let conversational = inference.layout == DatasetLayout::ConversationLevel;
    let key_col = if conversational {
        position(CanonicalField::ConversationKey)
    } else {
        None
    };

    let mut records = Vec::new();
    let mut dropped = Vec::new();
    let mut ids = HashSet::new();
    let mut next_turn: HashMap<String, u32> = HashMap::new();
    for (row, cells) in &table.rows {
        let cell = |col: Option<usize>| col.and_then(|c| cells.get(c).cloned().flatten());
        let text = cell(Some(text_col)).unwrap_or_default();
        if text.trim().is_empty() {
            dropped.push(*row);
            continue;
        }
        let id = cell(id_col).unwrap_or_else(|| format!("r{row}"));
        if !ids.insert(id.clone()) {
            return Err(StoreError::Parse {
                row: *row,
                message: format!("duplicate id `{id}`"),
            });
        }
        let conversation_key = match key_col {
            Some(_) => Some(cell(key_col).ok_or_else(|| StoreError::Parse {
                row: *row,
                message: "missing conversation key".into(),
            })?),
            None => None,
        };
        let explicit_turn = match cell(turn_col) {
            Some(raw) => Some(raw.trim().parse::<u32>().map_err(|_| StoreError::Parse {
                row: *row,
                message: format!("turn index `{raw}` is not a non-negative integer"),
            })?),
            None => None,
        };
        let turn_index = match &conversation_key {
            Some(key) => {
                let counter = next_turn.entry(key.clone()).or_insert(0);
                let assigned = explicit_turn.unwrap_or(*counter);
                *counter = (*counter).max(assigned.saturating_add(1));
                Some(assigned)
            }
            None => explicit_turn,
        };
        records.push(MessageRecord {
            id,
            text,
            conversation_key,
            speaker: cell(speaker_col),
            turn_index,
            gold_label: cell(label_col),
        });
    }
    Ok((records, dropped))
}

/// Canonical JSONL field names, in export order.
const EXPORT_FIELDS: [&str; 6] = ["id", "text", "conversation_id", "speaker", "turn_index", "label"];

fn export_columns(records: &[MessageRecord], layout: DatasetLayout) -> Vec<&'static str> {
    let conversational = layout == DatasetLayout::ConversationLevel;
    EXPORT_FIELDS
        .into_iter()
        .filter(|field| match *field {
            "id" | "text" => true,
            "conversation_id" => conversational,
            "speaker" => conversational || records.iter().any(|r| r.speaker.is_some()),
            "turn_index" => records.iter().any(|r| r.turn_index.is_some()),
            "label" => records.iter().any(|r| r.gold_label.is_some()),
            _ => false,
        })
        .collect()
}

fn field_value(record: &MessageRecord, field: &str) -> Option<String> {
    match field {
        "id" => Some(record.id.clone()),
        "text" => Some(record.text.clone()),
        "conversation_id" => record.conversation_key.clone(),
        "speaker" => record.speaker.clone(),
        "turn_index" => record.turn_index.map(|t| t.to_string()),
        "label" => record.gold_label.clone(),
        _ => None,
    }
}

/// Serialises records with canonical column names so that re-ingesting the
/// output reproduces them.
pub fn export_records(
    records: &[MessageRecord],
    layout: DatasetLayout,
    format: DataFormat,
) -> Result<Vec<u8>, StoreError> {
    let columns = export_columns(records, layout);
    match format {
        DataFormat::Jsonl => {
            let mut out = Vec::new();
            for record in records {
                let mut obj = serde_json::Map::new();
                for field in &columns {
                    let value = match (*field, field_value(record, field)) {
                        ("turn_index", _) => record
                            .turn_index
                            .map(serde_json::Value::from)
                            .unwrap_or(serde_json::Value::Null),
                        (_, Some(v)) => serde_json::Value::String(v),
                        (_, None) => serde_json::Value::Null,
                    };
                    obj.insert(field.to_string(), value);
                }
                serde_json::to_writer(&mut out, &obj)
                    .map_err(|e| StoreError::Backend(e.to_string()))?;
                out.push(b'\n');
            }
            Ok(out)
        }
        DataFormat::Csv => {
            let mut writer = csv::Writer::from_writer(Vec::new());
            writer
                .write_record(&columns)
                .map_err(|e| StoreError::Backend(e.to_string()))?;
            for record in records {
                let row: Vec<String> = columns
                    .iter()
                    .map(|f| field_value(record, f).unwrap_or_default())
                    .collect();
                writer
                    .write_record(&row)
                    .map_err(|e| StoreError::Backend(e.to_string()))?;
            }
            writer
                .into_inner()
                .map_err(|e| StoreError::Backend(e.to_string()))
        }
    }
}

/// Label counts for a quick dataset summary.
pub fn label_histogram(records: &[MessageRecord]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        if let Some(label) = &r.gold_label {
            *counts.entry(label.clone()).or_insert(0) += 1;
        }
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(raw: &str, format: DataFormat) -> Result<ParsedDataset, StoreError> {
        parse_dataset(
            raw.as_bytes(),
            format,
            &ColumnSynonyms::default(),
            &IngestOptions::default(),
        )
    }

    #[test]
    fn csv_single_row() {
        let p = parse("text,label\nhi,none", DataFormat::Csv).unwrap();
        assert_eq!(p.inference.layout, DatasetLayout::MessageLevel);
        assert_eq!(p.records.len(), 1);
        assert_eq!(p.records[0].gold_label.as_deref(), Some("none"));
        assert_eq!(p.records[0].id, "r1");
    }

    #[test]
    fn jsonl_drops_empty_text() {
        let raw = "{\"text\":\"a\"}\n{\"text\":\"  \"}\n{\"text\":\"c\",\"label\":\"x\"}\n";
        let p = parse(raw, DataFormat::Jsonl).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.dropped_rows, vec![2]);
    }

    #[test]
    fn csv_unbalanced_quote_reports_row() {
        let raw = "text,label\na,x\nb,y\nc,z\n\"d,w\n";
        match parse(raw, DataFormat::Csv) {
            Err(StoreError::Parse { row, .. }) => assert_eq!(row, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
        let raw = "text,label\na,x\nb,y\nc,z\nd,\"w\n";
        match parse(raw, DataFormat::Csv) {
            Err(StoreError::Parse { row, .. }) => assert_eq!(row, 4),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn csv_ragged_row() {
        let raw = "text,label\na,x\nb\n";
        assert!(matches!(
            parse(raw, DataFormat::Csv),
            Err(StoreError::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn quoted_newlines_are_fine() {
        let raw = "text,label\n\"line one\nline two\",x\n\"he said \"\"hi\"\"\",y\n";
        let p = parse(raw, DataFormat::Csv).unwrap();
        assert_eq!(p.records.len(), 2);
        assert_eq!(p.records[1].text, "he said \"hi\"");
    }

    #[test]
    fn jsonl_bad_line() {
        assert!(matches!(
            parse("{\"text\":\"a\"}\n{oops\n", DataFormat::Jsonl),
            Err(StoreError::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn conversation_turns_default_to_file_order() {
        let raw = "conversation_id,speaker,text\nc1,a,hi\nc2,x,yo\nc1,b,hello\n";
        let p = parse(raw, DataFormat::Csv).unwrap();
        let turns: Vec<_> = p.records.iter().map(|r| r.turn_index).collect();
        assert_eq!(turns, vec![Some(0), Some(0), Some(1)]);
    }

    #[test]
    fn duplicate_ids_rejected() {
        let raw = "id,text\n1,a\n1,b\n";
        assert!(matches!(
            parse(raw, DataFormat::Csv),
            Err(StoreError::Parse { row: 2, .. })
        ));
    }

    #[test]
    fn export_roundtrip_both_formats() {
        let raw = "conversation_id,speaker,text,turn,label\nc1,a,\"hi, there\",2,x\nc1,b,yo,0,\nc2,a,ok,1,y\n";
        let p = parse(raw, DataFormat::Csv).unwrap();
        for fmt in [DataFormat::Csv, DataFormat::Jsonl] {
            let bytes = export_records(&p.records, p.inference.layout, fmt).unwrap();
            let again = parse(std::str::from_utf8(&bytes).unwrap(), fmt).unwrap();
            assert_eq!(again.records, p.records);
            assert_eq!(again.inference.layout, DatasetLayout::ConversationLevel);
        }
    }
}
