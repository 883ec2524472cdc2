//! Tabular dataset ingestion, seeded few-shot/eval splitting and prompt
//! serialization.
//!
//! Rows are read from a CSV file according to a [`FeatureSchema`] and turned
//! into [`TabularInstance`]s. A [`PromptTemplate`] renders an instance into
//! English prose (the "candidate profile") and assembles the full
//! classification prompt, optionally preceded by labelled few-shot examples.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TabularError {
    #[error("schema error: {0}")]
    Schema(String),
    #[error("row {row}: {message}")]
    Value { row: u64, message: String },
    #[error("split needs {needed} instances but only {available} are available")]
    Size { needed: usize, available: usize },
    #[error("template error: {0}")]
    Template(String),
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ColumnKind {
    Numeric,
    Categorical,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

/// Describes which CSV columns are features, which one holds the binary
/// target and which one holds the binary sensitive attribute.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureSchema {
    pub columns: Vec<Column>,
    pub label_column: String,
    pub positive_label: String,
    /// When set, label values other than `positive_label` must equal this
    /// value. When unset, every non-empty value other than `positive_label`
    /// is the negative class.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub negative_label: Option<String>,
    pub sensitive_column: String,
    pub group_values: [String; 2],
}

impl FeatureSchema {
    pub fn validate(&self) -> Result<(), TabularError> {
        let mut seen = HashSet::new();
        for c in &self.columns {
            if c.name.is_empty() {
                return Err(TabularError::Schema("empty column name".into()));
            }
            if !seen.insert(c.name.as_str()) {
                return Err(TabularError::Schema(format!(
                    "duplicate column `{}`",
                    c.name
                )));
            }
        }
        if self.label_column.is_empty() || self.sensitive_column.is_empty() {
            return Err(TabularError::Schema(
                "label_column and sensitive_column must be named".into(),
            ));
        }
        if self.label_column == self.sensitive_column {
            return Err(TabularError::Schema(
                "label_column and sensitive_column must differ".into(),
            ));
        }
        if self.group_values[0] == self.group_values[1] {
            return Err(TabularError::Schema(format!(
                "group_values must be distinct, got `{}` twice",
                self.group_values[0]
            )));
        }
        Ok(())
    }

    /// Columns carried in [`TabularInstance::features`]: the declared
    /// columns, plus the sensitive column when it is not declared.
    pub fn feature_columns(&self) -> Vec<Column> {
        let mut cols = self.columns.clone();
        if !cols.iter().any(|c| c.name == self.sensitive_column) {
            cols.push(Column {
                name: self.sensitive_column.clone(),
                kind: ColumnKind::Categorical,
            });
        }
        cols
    }

    pub fn group_index(&self, group: &str) -> Option<usize> {
        self.group_values.iter().position(|g| g == group)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum FeatureValue {
    Number(f64),
    Text(String),
}

impl FeatureValue {
    pub fn as_f64(&self) -> Option<f64> {
        match self {
            FeatureValue::Number(v) => Some(*v),
            FeatureValue::Text(_) => None,
        }
    }
}

impl fmt::Display for FeatureValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FeatureValue::Number(v) => f.write_str(&format_number(*v)),
            FeatureValue::Text(s) => f.write_str(s),
        }
    }
}

/// Minimal decimal rendering: `55` rather than `55.0`, `0.5` rather than
/// `5e-1`.
pub fn format_number(v: f64) -> String {
    if v == 0.0 {
        // folds -0 into 0
        return "0".to_string();
    }
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularInstance {
    pub id: u64,
    pub features: BTreeMap<String, FeatureValue>,
    /// `true` is the positive class.
    pub label: bool,
    pub group: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub few_shot: Vec<TabularInstance>,
    pub eval: Vec<TabularInstance>,
    pub seed: u64,
}

/// Reads a comma-delimited UTF-8 CSV with a header row. Instance ids follow
/// file order starting at 0. Cell values are whitespace-trimmed.
pub fn load_dataset(
    csv_path: impl AsRef<Path>,
    schema: &FeatureSchema,
) -> Result<Vec<TabularInstance>, TabularError> {
    let path = csv_path.as_ref();
    let file = std::fs::File::open(path).map_err(|source| TabularError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_dataset(file, schema)
}

pub fn read_dataset<R: std::io::Read>(
    reader: R,
    schema: &FeatureSchema,
) -> Result<Vec<TabularInstance>, TabularError> {
    schema.validate()?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers()?.clone();
    let position = |name: &str| -> Result<usize, TabularError> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| TabularError::Schema(format!("missing column `{name}` in header")))
    };

    let feature_cols: Vec<(Column, usize)> = schema
        .feature_columns()
        .into_iter()
        .map(|c| position(&c.name).map(|i| (c, i)))
        .collect::<Result<_, _>>()?;
    let label_idx = position(&schema.label_column)?;
    let group_idx = position(&schema.sensitive_column)?;

    let mut out = Vec::new();
    for (row, record) in rdr.records().enumerate() {
        let id = row as u64;
        let record = record?;
        let cell = |i: usize| record.get(i).unwrap_or("");

        let mut features = BTreeMap::new();
        for (col, i) in &feature_cols {
            let raw = cell(*i);
            let value = match col.kind {
                ColumnKind::Numeric => {
                    let v: f64 = raw.parse().map_err(|_| TabularError::Value {
                        row: id,
                        message: format!("column `{}`: `{raw}` is not numeric", col.name),
                    })?;
                    FeatureValue::Number(v)
                }
                ColumnKind::Categorical => FeatureValue::Text(raw.to_string()),
            };
            features.insert(col.name.clone(), value);
        }

        let raw_label = cell(label_idx);
        let label = if raw_label == schema.positive_label {
            true
        } else if raw_label.is_empty()
            || schema
                .negative_label
                .as_ref()
                .is_some_and(|neg| neg != raw_label)
        {
            return Err(TabularError::Value {
                row: id,
                message: format!("unmappable label `{raw_label}`"),
            });
        } else {
            false
        };

        let group = cell(group_idx);
        if schema.group_index(group).is_none() {
            return Err(TabularError::Value {
                row: id,
                message: format!(
                    "group `{group}` is not one of `{}`/`{}`",
                    schema.group_values[0], schema.group_values[1]
                ),
            });
        }

        out.push(TabularInstance {
            id,
            features,
            label,
            group: group.to_string(),
        });
    }
    Ok(out)
}

/// Shuffles with a ChaCha8 stream seeded by `seed`; the first `k` shuffled
/// rows become few-shot examples and the next `eval_count` the eval set.
pub fn split_dataset(
    instances: &[TabularInstance],
    k: usize,
    eval_count: usize,
    seed: u64,
) -> Result<DatasetSplit, TabularError> {
    let needed = k + eval_count;
    if needed > instances.len() {
        return Err(TabularError::Size {
            needed,
            available: instances.len(),
        });
    }
    let mut order: Vec<usize> = (0..instances.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    let pick = |idx: &[usize]| idx.iter().map(|&i| instances[i].clone()).collect();
    Ok(DatasetSplit {
        few_shot: pick(&order[..k]),
        eval: pick(&order[k..needed]),
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pronouns {
    pub subject: String,
    pub possessive: String,
}

impl Pronouns {
    pub fn new(subject: &str, possessive: &str) -> Self {
        Self {
            subject: subject.into(),
            possessive: possessive.into(),
        }
    }
}

/// Sections used when an agent is prompted as a debate participant.
///
/// `task_header` may reference `{preamble}`, which receives the
/// "You are Agent i" sentence of the discussion context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DebateSections {
    pub task_header: String,
    pub format_block: String,
    pub candidate_template: String,
    pub question: String,
}

/// Text template for prompt assembly.
///
/// Placeholders are written `{name}`; `{{` and `}}` produce literal braces.
/// The profile template resolves feature columns, `{pron.subject}` and
/// `{pron.possessive}` (lowercase) and `{Pron.subject}` / `{Pron.possessive}`
/// (first letter capitalised). A few-shot item resolves `{index}`,
/// `{profile}`, `{Profile}`, `{question}` and `{answer}`; a candidate section
/// resolves `{profile}`, `{Profile}` and `{question}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptTemplate {
    pub task_header: String,
    #[serde(default)]
    pub format_block: String,
    pub few_shot_item_template: String,
    pub profile_template: String,
    pub candidate_template: String,
    pub question: String,
    #[serde(default = "default_pronouns")]
    pub pronouns: BTreeMap<String, Pronouns>,
    /// Per-column rendering of raw values (e.g. `own` -> `owns`).
    #[serde(default)]
    pub value_maps: BTreeMap<String, BTreeMap<String, String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub debate: Option<DebateSections>,
}

fn default_pronouns() -> BTreeMap<String, Pronouns> {
    BTreeMap::from([
        ("Male".to_string(), Pronouns::new("he", "his")),
        ("Female".to_string(), Pronouns::new("she", "her")),
    ])
}

impl PromptTemplate {
    pub fn from_json(text: &str) -> Result<Self, TabularError> {
        serde_json::from_str(text).map_err(|e| TabularError::Template(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TabularError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| TabularError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&text)
    }

    /// Adult Income template (single-agent and debate sections).
    pub fn adult() -> Self {
        Self::from_json(include_str!("../templates/adult.json")).expect("bundled adult template")
    }

    /// German Credit Risk template (single-agent and debate sections).
    pub fn german() -> Self {
        Self::from_json(include_str!("../templates/german.json")).expect("bundled german template")
    }
}

/// Replaces `{name}` placeholders via `lookup`. Unknown names are an error.
pub fn render_placeholders<F>(text: &str, mut lookup: F) -> Result<String, TabularError>
where
    F: FnMut(&str) -> Option<String>,
{
    let mut out = String::with_capacity(text.len());
    let mut rest = text;
    while let Some(pos) = rest.find(['{', '}']) {
        out.push_str(&rest[..pos]);
        let tail = &rest[pos..];
        if let Some(after) = tail.strip_prefix("{{") {
            out.push('{');
            rest = after;
        } else if let Some(after) = tail.strip_prefix("}}") {
            out.push('}');
            rest = after;
        } else if let Some(after) = tail.strip_prefix('}') {
            out.push('}');
            rest = after;
        } else {
            let close = tail.find('}').ok_or_else(|| {
                TabularError::Template(format!("unclosed placeholder in `{tail}`"))
            })?;
            let name = &tail[1..close];
            let value = lookup(name).ok_or_else(|| {
                TabularError::Template(format!("unresolved placeholder `{{{name}}}`"))
            })?;
            out.push_str(&value);
            rest = &tail[close + 1..];
        }
    }
    out.push_str(rest);
    Ok(out)
}

fn capitalize(s: &str) -> String {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) => c.to_uppercase().chain(chars).collect(),
        None => String::new(),
    }
}

/// Renders the candidate profile paragraph of `instance`.
pub fn serialize_instance(
    instance: &TabularInstance,
    template: &PromptTemplate,
) -> Result<String, TabularError> {
    let pronouns = template.pronouns.get(&instance.group);
    render_placeholders(&template.profile_template, |name| {
        if let Some(slot) = name.strip_prefix("pron.") {
            let p = pronouns?;
            return match slot {
                "subject" => Some(p.subject.clone()),
                "possessive" => Some(p.possessive.clone()),
                _ => None,
            };
        }
        if let Some(slot) = name.strip_prefix("Pron.") {
            let p = pronouns?;
            return match slot {
                "subject" => Some(capitalize(&p.subject)),
                "possessive" => Some(capitalize(&p.possessive)),
                _ => None,
            };
        }
        let value = instance.features.get(name)?.to_string();
        let mapped = template
            .value_maps
            .get(name)
            .and_then(|m| m.get(&value))
            .cloned();
        Some(mapped.unwrap_or(value))
    })
}

/// Fenced YAML answer block holding only the class.
pub fn answer_block(label: bool) -> String {
    format!(
        "```yaml\nclass: {}\n```",
        if label { "True" } else { "False" }
    )
}

fn render_examples(
    template: &PromptTemplate,
    few_shot: &[TabularInstance],
    question: &str,
) -> Result<String, TabularError> {
    let mut out = String::new();
    for (i, ex) in few_shot.iter().enumerate() {
        let profile = serialize_instance(ex, template)?;
        out.push_str(&render_placeholders(
            &template.few_shot_item_template,
            |name| match name {
                "index" => Some((i + 1).to_string()),
                "profile" => Some(profile.clone()),
                "Profile" => Some(capitalize(&profile)),
                "question" => Some(question.to_string()),
                "answer" => Some(answer_block(ex.label)),
                _ => None,
            },
        )?);
    }
    Ok(out)
}

fn render_candidate(section: &str, profile: &str, question: &str) -> Result<String, TabularError> {
    render_placeholders(section, |name| match name {
        "profile" => Some(profile.to_string()),
        "Profile" => Some(capitalize(profile)),
        "question" => Some(question.to_string()),
        _ => None,
    })
}

/// Single-agent prompt: header, format block, labelled examples (omitted
/// when `few_shot` is empty), candidate profile and question.
pub fn build_task_prompt(
    template: &PromptTemplate,
    few_shot: &[TabularInstance],
    instance: &TabularInstance,
) -> Result<String, TabularError> {
    let mut out = render_placeholders(&template.task_header, |_| None)?;
    out.push_str(&render_placeholders(&template.format_block, |_| None)?);
    out.push_str(&render_examples(template, few_shot, &template.question)?);
    let profile = serialize_instance(instance, template)?;
    out.push_str(&render_candidate(
        &template.candidate_template,
        &profile,
        &template.question,
    )?);
    Ok(out)
}

/// Debate-participant prompt. `preamble` fills `{preamble}` in the debate
/// header and `discussion` is appended verbatim after the candidate section.
pub fn build_debate_prompt(
    template: &PromptTemplate,
    few_shot: &[TabularInstance],
    instance: &TabularInstance,
    preamble: &str,
    discussion: &str,
) -> Result<String, TabularError> {
    let sections = template
        .debate
        .as_ref()
        .ok_or_else(|| TabularError::Template("template has no debate sections".into()))?;
    let mut out = render_placeholders(&sections.task_header, |name| {
        (name == "preamble").then(|| preamble.to_string())
    })?;
    out.push_str(&render_placeholders(&sections.format_block, |_| None)?);
    out.push_str(&render_examples(template, few_shot, &sections.question)?);
    let profile = serialize_instance(instance, template)?;
    out.push_str(&render_candidate(
        &sections.candidate_template,
        &profile,
        &sections.question,
    )?);
    out.push_str(discussion);
    Ok(out)
}
