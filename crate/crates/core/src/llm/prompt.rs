use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use super::{ChatRequest, RankedList};
use crate::catalog::{Interaction, Item, RatingScale, UserHistory};
use crate::critique_loop::FeedbackReport;
use crate::llm::LlmError;

/// Prompt text with `{placeholder}` substitution. Recognized placeholders:
/// `{heading}`, `{history}`, `{n}`, `{item_word}`, `{candidates}`, `{feedback}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplates {
    pub system: String,
    pub heading: String,
    pub initial: String,
    pub refinement: String,
    /// Appended to either prompt in candidate-set mode.
    pub candidates: String,
}

impl Default for PromptTemplates {
    fn default() -> Self {
        Self {
            system: "You are a recommender system. You recommend items that a user is likely to rate highly, \
                     based on the items the user has already rated."
                .into(),
            heading: "Items rated by the user:".into(),
            initial: "{heading}\n{history}\n\n\
                      Recommend exactly {n} {item_word} the user has not rated yet and is likely to enjoy.\
                      {candidates}\n\
                      Answer with a numbered list in the form \"rank. Title (Year)\", one item per line, and nothing else."
                .into(),
            refinement: "{heading}\n{history}\n\n\
                         Your previous recommendations, each followed by the rating this user is estimated to give it:\n\
                         {feedback}\n\n\
                         Recommend exactly {n} {item_word} again. Keep the items with high estimated ratings, \
                         ranked by estimate, and replace the items with low estimated ratings by better ones.\
                         {candidates}\n\
                         Answer with a numbered list in the form \"rank. Title (Year)\", one item per line, and nothing else."
                .into(),
            candidates: "\nChoose only from the following candidate items and recommend nothing outside this list:\n{list}"
                .into(),
        }
    }
}

impl PromptTemplates {
    /// Default templates with the Table-style heading for movie data.
    pub fn movies() -> Self {
        Self { heading: "Movies watched and rated by the user:".into(), ..Self::default() }
    }

    pub fn books() -> Self {
        Self { heading: "Books read and rated by the user:".into(), ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LlmSettings {
    pub model: String,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for LlmSettings {
    fn default() -> Self {
        Self { model: "mock".into(), temperature: 0.0, max_tokens: 1024 }
    }
}

fn fmt_rating(r: f64) -> String {
    if (r * 10.0 - (r * 10.0).round()).abs() < 1e-9 {
        format!("{r:.1}")
    } else {
        format!("{r}")
    }
}

/// One history interaction as a JSON object: title, attributes, rating.
pub fn render_history_record(it: &Interaction) -> String {
    let mut obj = Map::new();
    obj.insert("title".into(), Value::String(it.item.display_title()));
    for (k, v) in &it.item.attributes {
        obj.insert(k.clone(), Value::String(v.clone()));
    }
    obj.insert("rating".into(), Value::String(fmt_rating(it.rating)));
    Value::Object(obj).to_string()
}

/// `Title — estimated rating r/max`
pub fn render_feedback_line(title: &str, estimate: Option<f64>, scale: &RatingScale) -> String {
    match estimate {
        Some(r) => format!("{title} — estimated rating {}/{}", fmt_rating(r), fmt_rating(scale.max())),
        None => format!("{title} — no estimate"),
    }
}

/// Builds chat requests from templates; pure.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PromptBuilder {
    pub templates: PromptTemplates,
    pub settings: LlmSettings,
}

impl PromptBuilder {
    pub fn new(templates: PromptTemplates, settings: LlmSettings) -> Self {
        Self { templates, settings }
    }

    fn fill(&self, template: &str, h: &UserHistory, n: usize, candidates: Option<&[std::sync::Arc<Item>]>) -> String {
        let history = h.interactions.iter().map(render_history_record).collect::<Vec<_>>().join("\n");
        let cands = match candidates {
            Some(c) => {
                let list = c.iter().map(|i| format!("- {}", i.display_title())).collect::<Vec<_>>().join("\n");
                self.templates.candidates.replace("{list}", &list)
            }
            None => String::new(),
        };
        template
            .replace("{heading}", &self.templates.heading)
            .replace("{history}", &history)
            .replace("{n}", &n.to_string())
            .replace("{item_word}", if n == 1 { "item" } else { "items" })
            .replace("{candidates}", &cands)
    }

    fn request(&self, user: String) -> ChatRequest {
        ChatRequest {
            request_id: String::new(),
            system: self.templates.system.clone(),
            user,
            model: self.settings.model.clone(),
            temperature: self.settings.temperature,
            max_tokens: self.settings.max_tokens,
        }
    }

    pub fn initial(&self, h: &UserHistory, n: usize, candidates: Option<&[std::sync::Arc<Item>]>) -> ChatRequest {
        assert!(n >= 1, "at least one recommendation must be requested");
        self.request(self.fill(&self.templates.initial, h, n, candidates))
    }

    pub fn refinement(
        &self,
        h: &UserHistory,
        previous: &RankedList,
        feedback: &FeedbackReport,
        scale: &RatingScale,
        n: usize,
        candidates: Option<&[std::sync::Arc<Item>]>,
    ) -> Result<ChatRequest, LlmError> {
        if previous.is_empty() {
            return Err(LlmError::FeedbackMismatch("previous list is empty".into()));
        }
        if feedback.entries.len() != previous.len() {
            return Err(LlmError::FeedbackMismatch(format!(
                "{} feedback entries for {} recommendations",
                feedback.entries.len(),
                previous.len()
            )));
        }
        let mut lines = Vec::with_capacity(previous.len());
        for (e, f) in previous.entries.iter().zip(&feedback.entries) {
            if e.raw_title != f.raw_title {
                return Err(LlmError::FeedbackMismatch(format!("expected {:?}, got {:?}", e.raw_title, f.raw_title)));
            }
            let est = f.score.as_ref().map(|s| s.estimated_rating);
            lines.push(format!("{}. {}", e.rank, render_feedback_line(&e.raw_title, est, scale)));
        }
        let text = self.fill(&self.templates.refinement, h, n, candidates).replace("{feedback}", &lines.join("\n"));
        Ok(self.request(text))
    }
}
