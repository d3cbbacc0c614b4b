use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use super::StoreError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DatasetLayout {
    MessageLevel,
    ConversationLevel,
}

/// Canonical record field a source column maps onto.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CanonicalField {
    Id,
    Text,
    ConversationKey,
    Speaker,
    TurnIndex,
    GoldLabel,
}

/// Synonym lists per canonical field, loaded from `config/columns.toml`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSynonyms {
    pub text: Vec<String>,
    pub conversation_key: Vec<String>,
    pub speaker: Vec<String>,
    pub label: Vec<String>,
    #[serde(default)]
    pub id: Vec<String>,
    #[serde(default)]
    pub turn_index: Vec<String>,
}

const DEFAULT_COLUMNS: &str = include_str!("../../config/columns.toml");

impl Default for ColumnSynonyms {
    fn default() -> Self {
        Self::from_toml(DEFAULT_COLUMNS).expect("shipped column map parses")
    }
}

impl ColumnSynonyms {
    pub fn from_toml(text: &str) -> Result<Self, StoreError> {
        toml::from_str(text).map_err(|e| StoreError::Config(e.to_string()))
    }

    fn lists(&self) -> [(CanonicalField, &[String]); 6] {
        [
            (CanonicalField::Text, &self.text),
            (CanonicalField::ConversationKey, &self.conversation_key),
            (CanonicalField::Speaker, &self.speaker),
            (CanonicalField::GoldLabel, &self.label),
            (CanonicalField::Id, &self.id),
            (CanonicalField::TurnIndex, &self.turn_index),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutInference {
    pub layout: DatasetLayout,
    /// Source column (as spelled in the header) to canonical field.
    pub column_map: BTreeMap<String, CanonicalField>,
}

impl LayoutInference {
    pub fn column_for(&self, field: CanonicalField) -> Option<&str> {
        self.column_map
            .iter()
            .find(|(_, f)| **f == field)
            .map(|(c, _)| c.as_str())
    }
}

/// Infers message- vs conversation-level layout from header names.
///
/// `label_override` forces a specific column to be the gold label, for
/// benchmark files whose label column is not a generic synonym.
pub fn infer_layout(
    header: &[String],
    synonyms: &ColumnSynonyms,
    label_override: Option<&str>,
) -> Result<LayoutInference, StoreError> {
    if header.is_empty() {
        return Err(StoreError::EmptyHeader);
    }
    let mut lowered: BTreeMap<String, &str> = BTreeMap::new();
    for name in header {
        if lowered.insert(name.to_lowercase(), name.as_str()).is_some() {
            return Err(StoreError::DuplicateColumn(name.clone()));
        }
    }

    let mut column_map = BTreeMap::new();
    let mut claimed: HashSet<&str> = HashSet::new();
    if let Some(label) = label_override {
        let source = lowered
            .get(&label.to_lowercase())
            .ok_or_else(|| StoreError::MissingColumn(label.to_string()))?;
        column_map.insert(source.to_string(), CanonicalField::GoldLabel);
        claimed.insert(*source);
    }
    for (field, names) in synonyms.lists() {
        if label_override.is_some() && field == CanonicalField::GoldLabel {
            continue;
        }
        let hit = names
            .iter()
            .filter_map(|n| lowered.get(&n.to_lowercase()).copied())
            .find(|source| !claimed.contains(source));
        if let Some(source) = hit {
            column_map.insert(source.to_string(), field);
            claimed.insert(source);
        }
    }

    let has = |f: CanonicalField| column_map.values().any(|v| *v == f);
    if !has(CanonicalField::Text) {
        return Err(StoreError::NoTextColumn);
    }
    let layout = if has(CanonicalField::ConversationKey) && has(CanonicalField::Speaker) {
        DatasetLayout::ConversationLevel
    } else {
        DatasetLayout::MessageLevel
    };
    Ok(LayoutInference { layout, column_map })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn h(cols: &[&str]) -> Vec<String> {
        cols.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn message_level_with_label() {
        let inf = infer_layout(&h(&["text", "label"]), &ColumnSynonyms::default(), None).unwrap();
        assert_eq!(inf.layout, DatasetLayout::MessageLevel);
        assert_eq!(inf.column_map["text"], CanonicalField::Text);
        assert_eq!(inf.column_map["label"], CanonicalField::GoldLabel);
    }

    #[test]
    fn conversation_level() {
        let inf = infer_layout(
            &h(&["conversation_id", "speaker", "text", "timestamp"]),
            &ColumnSynonyms::default(),
            None,
        )
        .unwrap();
        assert_eq!(inf.layout, DatasetLayout::ConversationLevel);
        assert!(!inf.column_map.contains_key("timestamp"));
    }

    #[test]
    fn key_without_speaker_is_message_level() {
        let inf = infer_layout(&h(&["conv_id", "content"]), &ColumnSynonyms::default(), None)
            .unwrap();
        assert_eq!(inf.layout, DatasetLayout::MessageLevel);
    }

    #[test]
    fn no_text_column() {
        assert!(matches!(
            infer_layout(&h(&["foo", "bar"]), &ColumnSynonyms::default(), None),
            Err(StoreError::NoTextColumn)
        ));
    }

    #[test]
    fn duplicate_after_lowercasing() {
        assert!(matches!(
            infer_layout(&h(&["Text", "text"]), &ColumnSynonyms::default(), None),
            Err(StoreError::DuplicateColumn(_))
        ));
        assert!(matches!(
            infer_layout(&[], &ColumnSynonyms::default(), None),
            Err(StoreError::EmptyHeader)
        ));
    }

    #[test]
    fn label_override() {
        let inf = infer_layout(
            &h(&["rewire_id", "text", "label_sexist", "label_category"]),
            &ColumnSynonyms::default(),
            Some("label_sexist"),
        )
        .unwrap();
        assert_eq!(inf.column_for(CanonicalField::GoldLabel), Some("label_sexist"));
        assert_eq!(inf.column_for(CanonicalField::Id), Some("rewire_id"));
    }

    fn recase(s: &str, mask: u64) -> String {
        s.chars()
            .enumerate()
            .map(|(i, c)| {
                if mask >> (i % 64) & 1 == 1 {
                    c.to_ascii_uppercase()
                } else {
                    c
                }
            })
            .collect()
    }

    proptest! {
        #[test]
        fn permutation_and_case_invariant(
            pick in proptest::sample::subsequence(
                vec!["text", "message", "conversation_id", "speaker", "label", "turn", "extra", "sender", "dialogue_id"],
                0..=9,
            ),
            seed in any::<u64>(),
            mask in any::<u64>(),
        ) {
            let base: Vec<String> = pick.iter().map(|s| s.to_string()).collect();
            prop_assume!(!base.is_empty());
            let syn = ColumnSynonyms::default();
            let reference = infer_layout(&base, &syn, None).map(|i| i.layout);

            let mut shuffled = base.clone();
            let n = shuffled.len();
            let mut state = seed;
            for i in (1..n).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                shuffled.swap(i, (state >> 33) as usize % (i + 1));
            }
            let recased: Vec<String> = shuffled.iter().map(|c| recase(c, mask)).collect();
            let other = infer_layout(&recased, &syn, None).map(|i| i.layout);
            prop_assert_eq!(reference.ok(), other.ok());
        }
    }
}
