//! Big-Five persona profiling from a speaker's summaries.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hashing::content_hash;
use crate::lm_gateway::{ChatMessage, ChatParams, LanguageModel, LmError};

pub const PERSONA_TEMPLATE: &str = include_str!("../templates/persona.txt");

pub const DISCLAIMER: &str = "Research use only. Persona profiles are exploratory model outputs \
that may carry biases of the underlying data and models. They are not clinically validated and \
must not be used for diagnosis or operational decisions.";

const FORMAT_REMINDER: &str = "Your reply did not follow the required format. Start with exactly \
five integers from 1 to 10 in square brackets, e.g. [5, 5, 5, 5, 5], then one \
**Trait**: explanation section per trait and an **Overall Persona Analysis**: section.";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PersonaError {
    #[error("summary is empty")]
    EmptySummary,
    #[error("could not parse persona response: {0}")]
    ParseFailure(String),
    #[error(transparent)]
    Lm(#[from] LmError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trait {
    Openness,
    Conscientiousness,
    Extraversion,
    Agreeableness,
    Neuroticism,
}

impl Trait {
    pub const ALL: [Trait; 5] = [
        Trait::Openness,
        Trait::Conscientiousness,
        Trait::Extraversion,
        Trait::Agreeableness,
        Trait::Neuroticism,
    ];

    /// Section heading used in responses.
    pub fn heading(self) -> &'static str {
        match self {
            Trait::Openness => "Openness to Experience",
            Trait::Conscientiousness => "Conscientiousness",
            Trait::Extraversion => "Extraversion",
            Trait::Agreeableness => "Agreeableness",
            Trait::Neuroticism => "Neuroticism",
        }
    }

    fn from_heading(heading: &str) -> Option<Trait> {
        let h = heading.trim().to_ascii_lowercase();
        match h.as_str() {
            "openness to experience" | "openness" => Some(Trait::Openness),
            "conscientiousness" => Some(Trait::Conscientiousness),
            "extraversion" | "extroversion" => Some(Trait::Extraversion),
            "agreeableness" => Some(Trait::Agreeableness),
            "neuroticism" => Some(Trait::Neuroticism),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BigFiveScores {
    pub openness: u8,
    pub conscientiousness: u8,
    pub extraversion: u8,
    pub agreeableness: u8,
    pub neuroticism: u8,
}

impl BigFiveScores {
    pub fn from_array(v: [u8; 5]) -> Self {
        Self {
            openness: v[0],
            conscientiousness: v[1],
            extraversion: v[2],
            agreeableness: v[3],
            neuroticism: v[4],
        }
    }

    pub fn to_array(self) -> [u8; 5] {
        [
            self.openness,
            self.conscientiousness,
            self.extraversion,
            self.agreeableness,
            self.neuroticism,
        ]
    }

    pub fn is_valid(self) -> bool {
        self.to_array().iter().all(|s| (1..=10).contains(s))
    }
}

/// Fields recovered from one LM response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParsedPersona {
    pub scores: BigFiveScores,
    pub explanations: BTreeMap<Trait, String>,
    pub overall: String,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonaProfile {
    pub speaker: String,
    pub scores: BigFiveScores,
    pub explanations: BTreeMap<Trait, String>,
    pub overall: String,
    pub warnings: Vec<String>,
    pub disclaimer: String,
    pub source_summary_hash: String,
    /// Chat calls spent (1, or 2 after a format retry).
    pub attempts: u32,
}

/// Substitutes `[speaker]` and `[summary]` in one left-to-right pass, so
/// substituted text is never re-scanned.
pub fn render_persona_prompt_with(
    template: &str,
    speaker: &str,
    summary: &str,
) -> Result<String, PersonaError> {
    if summary.trim().is_empty() {
        return Err(PersonaError::EmptySummary);
    }
    let mut out = String::with_capacity(template.len() + summary.len());
    let mut rest = template;
    loop {
        let next = [("[speaker]", speaker), ("[summary]", summary)]
            .into_iter()
            .filter_map(|(tag, value)| rest.find(tag).map(|at| (at, tag, value)))
            .min_by_key(|(at, _, _)| *at);
        match next {
            Some((at, tag, value)) => {
                out.push_str(&rest[..at]);
                out.push_str(value);
                rest = &rest[at + tag.len()..];
            }
            None => {
                out.push_str(rest);
                return Ok(out);
            }
        }
    }
}

pub fn render_persona_prompt(speaker: &str, summary: &str) -> Result<String, PersonaError> {
    render_persona_prompt_with(PERSONA_TEMPLATE, speaker, summary)
}

fn score_list() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| {
        let n = r"\s*([+-]?\d+)\s*";
        Regex::new(&format!(r"\[{n},{n},{n},{n},{n}\]")).expect("valid regex")
    })
}

fn heading() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // **Heading**: or **Heading:**
    RE.get_or_init(|| Regex::new(r"\*\*\s*([^*\n:]+?)\s*:?\s*\*\*\s*:?").expect("valid regex"))
}

fn clamp_score(raw: &str, name: &str, warnings: &mut Vec<String>) -> u8 {
    let value: i64 = raw.trim_start_matches('+').parse().unwrap_or_else(|_| {
        if raw.starts_with('-') {
            i64::MIN
        } else {
            i64::MAX
        }
    });
    let clamped = value.clamp(1, 10);
    if clamped != value {
        warnings.push(format!("{name} score {raw} clamped to {clamped}"));
    }
    clamped as u8
}

pub fn parse_persona_response(text: &str) -> Result<ParsedPersona, PersonaError> {
    let caps = score_list().captures(text).ok_or_else(|| {
        PersonaError::ParseFailure("no bracketed list of five integers".into())
    })?;
    let mut warnings = Vec::new();
    let mut values = [0u8; 5];
    for (i, t) in Trait::ALL.iter().enumerate() {
        values[i] = clamp_score(&caps[i + 1], t.heading(), &mut warnings);
    }

    let headings: Vec<(usize, usize, String)> = heading()
        .captures_iter(text)
        .map(|c| {
            let m = c.get(0).expect("whole match");
            (m.start(), m.end(), c[1].to_string())
        })
        .collect();
    let mut explanations = BTreeMap::new();
    let mut overall = None;
    for (k, (_, body_start, name)) in headings.iter().enumerate() {
        let body_end = headings.get(k + 1).map_or(text.len(), |h| h.0);
        let body = text[*body_start..body_end].trim().trim_end_matches('"').trim().to_string();
        if let Some(t) = Trait::from_heading(name) {
            explanations.entry(t).or_insert(body);
        } else if name.trim().to_ascii_lowercase().starts_with("overall") && overall.is_none() {
            overall = Some(body);
        }
    }
    let missing: Vec<&str> = Trait::ALL
        .iter()
        .filter(|t| !explanations.contains_key(t))
        .map(|t| t.heading())
        .collect();
    if !missing.is_empty() {
        return Err(PersonaError::ParseFailure(format!(
            "missing trait sections: {}",
            missing.join(", ")
        )));
    }
    let overall = overall.unwrap_or_else(|| {
        warnings.push("overall persona analysis section missing".into());
        String::new()
    });
    Ok(ParsedPersona {
        scores: BigFiveScores::from_array(values),
        explanations,
        overall,
        warnings,
    })
}

/// Summaries joined by blank lines, in the order given.
pub fn concatenate_summaries(summaries: &[String]) -> String {
    summaries
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join("\n\n")
}

/// One chat call, plus one retry with a format reminder if parsing fails.
pub async fn analyze_persona(
    speaker: &str,
    summaries: &[String],
    lm: &dyn LanguageModel,
    template: Option<&str>,
) -> Result<PersonaProfile, PersonaError> {
    let summary = concatenate_summaries(summaries);
    let prompt = render_persona_prompt_with(template.unwrap_or(PERSONA_TEMPLATE), speaker, &summary)?;
    let params = ChatParams::default();
    let mut conversation = vec![ChatMessage::user(prompt)];
    let mut last_error = None;
    for attempt in 1..=2u32 {
        let reply = lm.chat(&conversation, &params).await?;
        match parse_persona_response(&reply) {
            Ok(parsed) => {
                return Ok(PersonaProfile {
                    speaker: speaker.to_string(),
                    scores: parsed.scores,
                    explanations: parsed.explanations,
                    overall: parsed.overall,
                    warnings: parsed.warnings,
                    disclaimer: DISCLAIMER.to_string(),
                    source_summary_hash: content_hash([speaker, summary.as_str()]),
                    attempts: attempt,
                })
            }
            Err(e) => {
                tracing::debug!(speaker, attempt, error = %e, "persona response unparseable");
                conversation.push(ChatMessage::assistant(reply));
                conversation.push(ChatMessage::user(FORMAT_REMINDER));
                last_error = Some(e);
            }
        }
    }
    Err(last_error.expect("two failed attempts"))
}

/// A response in the requested format, for stubs and tests.
pub fn format_response(scores: [i64; 5], explanations: [&str; 5], overall: &str) -> String {
    let list = scores.map(|s| s.to_string()).join(", ");
    let mut out = format!("[{list}]\n\n");
    for (t, e) in Trait::ALL.iter().zip(explanations) {
        out.push_str(&format!("**{}**: {e}\n\n", t.heading()));
    }
    out.push_str(&format!("**Overall Persona Analysis**: {overall}"));
    out
}
