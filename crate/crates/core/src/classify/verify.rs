use std::collections::BTreeMap;

use futures::stream::{self, StreamExt, TryStreamExt};
use serde::{Deserialize, Serialize};

use super::{ClassifyError, Prediction};
use crate::lm_gateway::{ChatMessage, ChatParams, LanguageModel};
use crate::store::MessageRecord;
use crate::template::TemplateRegistry;

const VERIFY_CONCURRENCY: usize = 4;

const FORMAT_REMINDER: &str =
    "Your reply must begin with exactly AGREE or DISAGREE, followed by a colon and a short rationale.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VerdictKind {
    Agree,
    Disagree,
}

/// LM judgement of one prediction. Verdicts never change the prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub message_id: String,
    pub verdict: VerdictKind,
    /// The LM reply, verbatim.
    pub rationale: String,
}

/// Reads the leading AGREE/DISAGREE token, ignoring leading whitespace and
/// markup such as `**` or quotes.
pub fn parse_verdict(reply: &str) -> Option<VerdictKind> {
    let start = reply.trim_start_matches(|c: char| !c.is_ascii_alphanumeric());
    let word: String = start
        .chars()
        .take_while(|c| c.is_ascii_alphanumeric())
        .collect();
    match word.to_ascii_uppercase().as_str() {
        "AGREE" => Some(VerdictKind::Agree),
        "DISAGREE" => Some(VerdictKind::Disagree),
        _ => None,
    }
}

/// Asks the LM to verify each prediction, retrying once with a format
/// reminder when the reply lacks the verdict token.
pub async fn llm_verify(
    messages: &[MessageRecord],
    predictions: &[Prediction],
    templates: &TemplateRegistry,
    template_id: &str,
    lm: &dyn LanguageModel,
) -> Result<Vec<Verdict>, ClassifyError> {
    if messages.len() != predictions.len() {
        return Err(ClassifyError::LengthMismatch {
            gold: messages.len(),
            pred: predictions.len(),
        });
    }
    let template = templates.get(template_id)?;
    let prompts = messages
        .iter()
        .zip(predictions)
        .map(|(m, p)| {
            let bindings: BTreeMap<String, String> = [
                ("label", p.argmax_label.clone()),
                ("labels", p.argmax_label.clone()),
                ("message", m.text.clone()),
                ("conversation", m.speaker_prefixed()),
            ]
            .into_iter()
            .map(|(k, v)| (k.to_string(), v))
            .collect();
            Ok((m.id.clone(), template.render(&bindings)?))
        })
        .collect::<Result<Vec<_>, ClassifyError>>()?;

    stream::iter(prompts)
        .map(|(message_id, prompt)| verify_one(lm, message_id, prompt))
        .buffered(VERIFY_CONCURRENCY)
        .try_collect()
        .await
}

async fn verify_one(
    lm: &dyn LanguageModel,
    message_id: String,
    prompt: String,
) -> Result<Verdict, ClassifyError> {
    let params = ChatParams::default();
    let mut conversation = vec![ChatMessage::user(prompt)];
    for attempt in 0..2 {
        let reply = lm.chat(&conversation, &params).await?;
        if let Some(verdict) = parse_verdict(&reply) {
            return Ok(Verdict {
                message_id,
                verdict,
                rationale: reply,
            });
        }
        if attempt == 0 {
            tracing::debug!(%message_id, "verdict token missing, retrying");
            conversation.push(ChatMessage::assistant(reply));
            conversation.push(ChatMessage::user(FORMAT_REMINDER));
        }
    }
    Err(ClassifyError::UnparseableVerdict { message_id })
}
