use std::collections::{BTreeMap, BTreeSet};

use futures::future::try_join_all;
use serde::{Deserialize, Serialize};

use super::{classify_batch, ClassifierRegistry, ClassifyError, LabelSchema, Prediction};
use crate::store::MessageRecord;

/// Voting ensemble: strict majority over member argmax labels, otherwise the
/// fallback member decides.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub member_ids: Vec<String>,
    pub fallback_id: String,
}

impl EnsembleConfig {
    pub fn new<S: Into<String>>(
        member_ids: impl IntoIterator<Item = S>,
        fallback_id: impl Into<String>,
    ) -> Result<Self, ClassifyError> {
        let config = Self {
            member_ids: member_ids.into_iter().map(Into::into).collect(),
            fallback_id: fallback_id.into(),
        };
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ClassifyError> {
        if self.member_ids.len() < 2 {
            return Err(ClassifyError::InvalidEnsemble(
                "an ensemble needs at least two members".into(),
            ));
        }
        let unique: BTreeSet<_> = self.member_ids.iter().collect();
        if unique.len() != self.member_ids.len() {
            return Err(ClassifyError::InvalidEnsemble("duplicate member ids".into()));
        }
        if !unique.contains(&self.fallback_id) {
            return Err(ClassifyError::InvalidEnsemble(format!(
                "fallback `{}` is not a member",
                self.fallback_id
            )));
        }
        Ok(())
    }
}

/// Combines one prediction per member into the ensemble prediction.
///
/// The output distribution is the renormalised mean of member distributions;
/// `argmax_label` is the voted label, which can differ from the mean's argmax.
pub fn ensemble_predict(
    per_member: &BTreeMap<String, Prediction>,
    config: &EnsembleConfig,
) -> Result<Prediction, ClassifyError> {
    config.validate()?;
    for id in &config.member_ids {
        if !per_member.contains_key(id) {
            return Err(ClassifyError::MissingMember(id.clone()));
        }
    }
    if let Some(extra) = per_member.keys().find(|k| !config.member_ids.contains(k)) {
        return Err(ClassifyError::UnexpectedMember(extra.clone()));
    }

    let fallback = &per_member[&config.fallback_id];
    let labels: Vec<&str> = fallback.distribution.iter().map(|lp| lp.label.as_str()).collect();
    for prediction in per_member.values() {
        let same_labels = prediction
            .distribution
            .iter()
            .map(|lp| lp.label.as_str())
            .eq(labels.iter().copied());
        if prediction.schema_id != fallback.schema_id || !same_labels {
            return Err(ClassifyError::SchemaMismatch(format!(
                "members disagree on schema (`{}` vs `{}`)",
                prediction.schema_id, fallback.schema_id
            )));
        }
    }

    let n = config.member_ids.len();
    let mut votes: BTreeMap<&str, usize> = BTreeMap::new();
    for prediction in per_member.values() {
        *votes.entry(prediction.argmax_label.as_str()).or_default() += 1;
    }
    let winner = votes
        .iter()
        .find(|(_, count)| **count * 2 > n)
        .map(|(label, _)| label.to_string())
        .unwrap_or_else(|| fallback.argmax_label.clone());

    let mut mass = vec![0.0; labels.len()];
    for prediction in per_member.values() {
        for (slot, lp) in mass.iter_mut().zip(&prediction.distribution) {
            *slot += lp.probability / n as f64;
        }
    }
    let total: f64 = mass.iter().sum();
    let distribution = labels
        .iter()
        .zip(&mass)
        .map(|(label, m)| super::LabelProbability {
            label: label.to_string(),
            probability: m / total,
        })
        .collect();
    Ok(Prediction {
        message_id: fallback.message_id.clone(),
        schema_id: fallback.schema_id.clone(),
        distribution,
        argmax_label: winner,
    })
}

/// Runs every member over `messages` concurrently and combines per message.
pub async fn classify_ensemble(
    registry: &ClassifierRegistry,
    messages: &[MessageRecord],
    config: &EnsembleConfig,
    schema: &LabelSchema,
) -> Result<Vec<Prediction>, ClassifyError> {
    config.validate()?;
    let runs = try_join_all(
        config
            .member_ids
            .iter()
            .map(|id| classify_batch(registry, messages, id, schema)),
    )
    .await?;
    (0..messages.len())
        .map(|i| {
            let per_member: BTreeMap<String, Prediction> = config
                .member_ids
                .iter()
                .zip(&runs)
                .map(|(id, preds)| (id.clone(), preds[i].clone()))
                .collect();
            ensemble_predict(&per_member, config)
        })
        .collect()
}
