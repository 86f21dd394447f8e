//! Corpus data model: dialogues, profiles, empathy-chain annotations,
//! loading, and validation.
//!
//! The wire format is the appendix-style JSON schema (array or JSON-lines):
//! `conversation_id`, `speaker_profile`/`listener_profile` (`age`, `gender`,
//! `tone` with `timbre` accepted as a key synonym, optional `id`), `topic`,
//! and `turns` each holding `turn_id`, optional `context`, `dialogue_history`
//! (`index`, `role`, `utterance`), `response`, and an optional
//! `chain_of_empathy` block.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use crate::emotions::{is_coarse, resolve_to_coarse};
use crate::error::EmpatheiaError;

pub const TOPICS: [&str; 10] = [
    "Social Issues and Moral Dilemmas",
    "Achievements and Self-Realization",
    "Support and Comfort",
    "Emotions and Feelings",
    "Disappointments and Expectations",
    "Life Events",
    "Interpersonal Relationships",
    "Health and Well-being",
    "Uncertainty About the Future",
    "Personal Struggles and Challenges",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Age {
    Child,
    Young,
    MiddleAged,
    Elderly,
}

impl Age {
    pub const ALL: [Age; 4] = [Age::Child, Age::Young, Age::MiddleAged, Age::Elderly];

    pub fn as_str(self) -> &'static str {
        match self {
            Age::Child => "child",
            Age::Young => "young",
            Age::MiddleAged => "middle-aged",
            Age::Elderly => "elderly",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Age> {
        match s.trim().to_lowercase().as_str() {
            "child" => Some(Age::Child),
            "young" => Some(Age::Young),
            "middle-aged" | "middle_aged" | "middle aged" => Some(Age::MiddleAged),
            "elderly" => Some(Age::Elderly),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Gender {
    Male,
    Female,
}

impl Gender {
    pub const ALL: [Gender; 2] = [Gender::Male, Gender::Female];

    pub fn as_str(self) -> &'static str {
        match self {
            Gender::Male => "male",
            Gender::Female => "female",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&g| g == self).unwrap()
    }

    pub fn parse(s: &str) -> Option<Gender> {
        match s.trim().to_lowercase().as_str() {
            "male" => Some(Gender::Male),
            "female" => Some(Gender::Female),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Tone {
    Emphatic,
    Mild,
    Gentle,
}

impl Tone {
    pub const ALL: [Tone; 3] = [Tone::Emphatic, Tone::Mild, Tone::Gentle];

    pub fn as_str(self) -> &'static str {
        match self {
            Tone::Emphatic => "emphatic",
            Tone::Mild => "mild",
            Tone::Gentle => "gentle",
        }
    }

    pub fn index(self) -> usize {
        Self::ALL.iter().position(|&t| t == self).unwrap()
    }

    /// Canonical values always parse; the timbre vocabulary {low, mid, high}
    /// maps positionally onto {emphatic, mild, gentle} only when
    /// `timbre_aliases` is enabled.
    pub fn parse(s: &str, timbre_aliases: bool) -> Option<Tone> {
        match s.trim().to_lowercase().as_str() {
            "emphatic" => Some(Tone::Emphatic),
            "mild" => Some(Tone::Mild),
            "gentle" => Some(Tone::Gentle),
            "low" if timbre_aliases => Some(Tone::Emphatic),
            "mid" if timbre_aliases => Some(Tone::Mild),
            "high" if timbre_aliases => Some(Tone::Gentle),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Speaker,
    Listener,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Speaker => "speaker",
            Role::Listener => "listener",
        }
    }

    /// Capitalized label used in rendered prompts.
    pub fn prompt_label(self) -> &'static str {
        match self {
            Role::Speaker => "Speaker",
            Role::Listener => "Listener",
        }
    }

    /// `assistant` is accepted as a listener synonym on input.
    pub fn parse(s: &str) -> Option<Role> {
        match s.trim().to_lowercase().as_str() {
            "speaker" => Some(Role::Speaker),
            "listener" | "assistant" => Some(Role::Listener),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s.trim().to_lowercase().as_str() {
            "train" => Some(Split::Train),
            "valid" | "validation" | "dev" => Some(Split::Valid),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

/// Which dialogues a load should return.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitFilter {
    Train,
    Valid,
    Test,
    All,
}

impl SplitFilter {
    pub fn parse(s: &str) -> Option<SplitFilter> {
        match s.trim().to_lowercase().as_str() {
            "all" => Some(SplitFilter::All),
            other => Split::parse(other).map(|sp| match sp {
                Split::Train => SplitFilter::Train,
                Split::Valid => SplitFilter::Valid,
                Split::Test => SplitFilter::Test,
            }),
        }
    }

    fn admits(self, split: Split) -> bool {
        matches!(
            (self, split),
            (SplitFilter::All, _)
                | (SplitFilter::Train, Split::Train)
                | (SplitFilter::Valid, Split::Valid)
                | (SplitFilter::Test, Split::Test)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Profile {
    pub age: Age,
    pub gender: Gender,
    pub tone: Tone,
    pub avatar_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChainOfEmpathy {
    pub speaker_emotion: String,
    pub event_scenario: String,
    pub emotion_cause: String,
    pub goal_to_response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Utterance {
    pub index: usize,
    pub role: Role,
    pub text: String,
    pub coarse_emotion: Option<String>,
    pub audio_ref: Option<String>,
    pub video_ref: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Turn {
    pub turn_id: String,
    pub context: Option<String>,
    pub dialogue_history: Vec<Utterance>,
    pub response: String,
    pub chain_of_empathy: Option<ChainOfEmpathy>,
}

impl Turn {
    /// Slot index the response occupies in the dialogue's utterance numbering.
    pub fn response_index(&self) -> usize {
        self.dialogue_history.len() + 1
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dialogue {
    pub conversation_id: String,
    pub speaker_profile: Profile,
    pub listener_profile: Profile,
    pub topic: String,
    pub split: Split,
    pub turns: Vec<Turn>,
}

/// One failed validation rule, attributed to a record and field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub conversation_id: String,
    pub field: String,
    pub rule: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: {}: rule {} violated",
            self.conversation_id, self.field, self.rule
        )
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LoadOptions {
    /// Accept {low, mid, high} tone values, mapped positionally.
    pub timbre_aliases: bool,
}

mod raw {
    use serde::{Deserialize, Serialize};
    use serde_json::Value;

    pub fn id_string(v: &Value) -> Option<String> {
        match v {
            Value::String(s) => Some(s.clone()),
            Value::Number(n) => Some(n.to_string()),
            _ => None,
        }
    }

    #[derive(Deserialize, Serialize)]
    pub struct Profile {
        pub age: String,
        pub gender: String,
        #[serde(alias = "timbre")]
        pub tone: String,
        #[serde(default, alias = "avatar_id", skip_serializing_if = "Option::is_none")]
        pub id: Option<Value>,
    }

    #[derive(Deserialize, Serialize)]
    pub struct Utterance {
        pub index: i64,
        pub role: String,
        #[serde(alias = "text")]
        pub utterance: String,
        #[serde(default, alias = "coarse_emotion", skip_serializing_if = "Option::is_none")]
        pub emotion: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub audio_ref: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub video_ref: Option<String>,
    }

    #[derive(Deserialize, Serialize)]
    pub struct ChainOfEmpathy {
        pub speaker_emotion: String,
        pub event_scenario: String,
        pub emotion_cause: String,
        pub goal_to_response: String,
    }

    #[derive(Deserialize, Serialize)]
    pub struct Turn {
        pub turn_id: Value,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub context: Option<String>,
        pub dialogue_history: Vec<Utterance>,
        pub response: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub chain_of_empathy: Option<ChainOfEmpathy>,
    }

    #[derive(Deserialize, Serialize)]
    pub struct Dialogue {
        pub conversation_id: Value,
        pub speaker_profile: Profile,
        pub listener_profile: Profile,
        pub topic: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        pub split: Option<String>,
        pub turns: Vec<Turn>,
    }
}

fn schema_err(conv: &str, field: &str, msg: String) -> EmpatheiaError {
    EmpatheiaError::Schema {
        conversation_id: conv.to_string(),
        field: field.to_string(),
        message: msg,
    }
}

fn convert_profile(
    conv: &str,
    which: &str,
    p: &raw::Profile,
    opts: LoadOptions,
) -> Result<Profile, EmpatheiaError> {
    let age = Age::parse(&p.age)
        .ok_or_else(|| schema_err(conv, &format!("{which}.age"), format!("unknown age {:?}", p.age)))?;
    let gender = Gender::parse(&p.gender).ok_or_else(|| {
        schema_err(conv, &format!("{which}.gender"), format!("unknown gender {:?}", p.gender))
    })?;
    let tone = Tone::parse(&p.tone, opts.timbre_aliases).ok_or_else(|| {
        schema_err(
            conv,
            &format!("{which}.tone"),
            format!(
                "unknown tone {:?}; expected emphatic/mild/gentle{}",
                p.tone,
                if opts.timbre_aliases { " (or low/mid/high)" } else { "" }
            ),
        )
    })?;
    let avatar_id = match &p.id {
        None => None,
        Some(v) => Some(raw::id_string(v).ok_or_else(|| {
            schema_err(conv, &format!("{which}.id"), "id must be a string or number".into())
        })?),
    };
    Ok(Profile {
        age,
        gender,
        tone,
        avatar_id,
    })
}

fn convert_dialogue(
    r: &raw::Dialogue,
    file_split: Option<Split>,
    opts: LoadOptions,
) -> Result<Dialogue, EmpatheiaError> {
    let conv = raw::id_string(&r.conversation_id)
        .ok_or_else(|| schema_err("<unknown>", "conversation_id", "must be a string or number".into()))?;
    let speaker_profile = convert_profile(&conv, "speaker_profile", &r.speaker_profile, opts)?;
    let listener_profile = convert_profile(&conv, "listener_profile", &r.listener_profile, opts)?;
    let topic = TOPICS
        .iter()
        .find(|t| t.eq_ignore_ascii_case(r.topic.trim()))
        .map(|t| t.to_string())
        .ok_or_else(|| schema_err(&conv, "topic", format!("unknown topic {:?}", r.topic)))?;
    let split = match (&r.split, file_split) {
        (Some(s), _) => Split::parse(s)
            .ok_or_else(|| schema_err(&conv, "split", format!("unknown split {:?}", s)))?,
        (None, Some(fs)) => fs,
        (None, None) => Split::Train,
    };
    let mut turns = Vec::with_capacity(r.turns.len());
    for (ti, t) in r.turns.iter().enumerate() {
        let turn_id = raw::id_string(&t.turn_id).ok_or_else(|| {
            schema_err(&conv, &format!("turns[{ti}].turn_id"), "must be a string or number".into())
        })?;
        let mut history = Vec::with_capacity(t.dialogue_history.len());
        for (ui, u) in t.dialogue_history.iter().enumerate() {
            let field = |name: &str| format!("turns[{ti}].dialogue_history[{ui}].{name}");
            if u.index < 1 {
                return Err(schema_err(&conv, &field("index"), format!("index {} < 1", u.index)));
            }
            let role = Role::parse(&u.role)
                .ok_or_else(|| schema_err(&conv, &field("role"), format!("unknown role {:?}", u.role)))?;
            history.push(Utterance {
                index: u.index as usize,
                role,
                text: u.utterance.clone(),
                coarse_emotion: u.emotion.clone(),
                audio_ref: u.audio_ref.clone(),
                video_ref: u.video_ref.clone(),
            });
        }
        turns.push(Turn {
            turn_id,
            context: t.context.clone(),
            dialogue_history: history,
            response: t.response.clone(),
            chain_of_empathy: t.chain_of_empathy.as_ref().map(|c| ChainOfEmpathy {
                speaker_emotion: c.speaker_emotion.clone(),
                event_scenario: c.event_scenario.clone(),
                emotion_cause: c.emotion_cause.clone(),
                goal_to_response: c.goal_to_response.clone(),
            }),
        });
    }
    Ok(Dialogue {
        conversation_id: conv,
        speaker_profile,
        listener_profile,
        topic,
        split,
        turns,
    })
}

fn parse_records(path: &Path, text: &str) -> Result<Vec<raw::Dialogue>, EmpatheiaError> {
    let trimmed = text.trim_start();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    if trimmed.starts_with('[') {
        serde_json::from_str(text)
            .map_err(|e| EmpatheiaError::Parse(format!("{}: {}", path.display(), e)))
    } else {
        let mut out = Vec::new();
        for (ln, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let rec = serde_json::from_str(line).map_err(|e| {
                EmpatheiaError::Parse(format!("{}:{}: {}", path.display(), ln + 1, e))
            })?;
            out.push(rec);
        }
        Ok(out)
    }
}

fn read_sources(path: &Path) -> Result<Vec<(Option<Split>, String)>, EmpatheiaError> {
    if path.is_dir() {
        let mut found = Vec::new();
        for split in [Split::Train, Split::Valid, Split::Test] {
            for ext in ["jsonl", "json"] {
                let candidate = path.join(format!("{}.{}", split.as_str(), ext));
                if candidate.is_file() {
                    let text = fs::read_to_string(&candidate)
                        .map_err(|e| EmpatheiaError::io(&candidate, e))?;
                    found.push((Some(split), text));
                    break;
                }
            }
        }
        if found.is_empty() {
            return Err(EmpatheiaError::io(
                path,
                std::io::Error::new(
                    std::io::ErrorKind::NotFound,
                    "directory holds no train/valid/test .json(l) files",
                ),
            ));
        }
        Ok(found)
    } else {
        let text = fs::read_to_string(path).map_err(|e| EmpatheiaError::io(path, e))?;
        Ok(vec![(None, text)])
    }
}

/// Outcome of a lenient load: parseable dialogues plus every rule violation
/// found, including enum-level ones attributed to their field.
pub struct CorpusLoad {
    pub dialogues: Vec<Dialogue>,
    pub violations: Vec<Violation>,
}

/// Strict load: error on the first violated invariant.
pub fn load_corpus(
    path: &Path,
    split: SplitFilter,
    opts: LoadOptions,
) -> Result<Vec<Dialogue>, EmpatheiaError> {
    let loaded = load_corpus_lenient(path, split, opts)?;
    if let Some(v) = loaded.violations.first() {
        return Err(schema_err(&v.conversation_id, &v.field, format!("rule {} violated", v.rule)));
    }
    Ok(loaded.dialogues)
}

/// Lenient load for the validator: schema/enum problems become [`Violation`]s
/// instead of errors. I/O and JSON syntax problems still fail.
pub fn load_corpus_lenient(
    path: &Path,
    split: SplitFilter,
    opts: LoadOptions,
) -> Result<CorpusLoad, EmpatheiaError> {
    let mut dialogues = Vec::new();
    let mut violations = Vec::new();
    for (file_split, text) in read_sources(path)? {
        for rec in parse_records(path, &text)? {
            match convert_dialogue(&rec, file_split, opts) {
                Ok(d) => {
                    if split.admits(d.split) {
                        dialogues.push(d);
                    }
                }
                Err(EmpatheiaError::Schema {
                    conversation_id,
                    field,
                    message,
                }) => violations.push(Violation {
                    conversation_id,
                    field: field.clone(),
                    rule: format!("{field}: {message}"),
                }),
                Err(other) => return Err(other),
            }
        }
    }
    let mut seen = BTreeSet::new();
    for d in &dialogues {
        if !seen.insert(d.conversation_id.clone()) {
            violations.push(Violation {
                conversation_id: d.conversation_id.clone(),
                field: "conversation_id".into(),
                rule: "conversation_id_unique".into(),
            });
        }
        violations.extend(validate_dialogue(d));
    }
    Ok(CorpusLoad {
        dialogues,
        violations,
    })
}

/// Check every structural invariant of one dialogue; violations are values.
pub fn validate_dialogue(d: &Dialogue) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: &str| {
        out.push(Violation {
            conversation_id: d.conversation_id.clone(),
            field,
            rule: rule.to_string(),
        })
    };

    for (ti, turn) in d.turns.iter().enumerate() {
        let base = format!("turns[{ti}]");
        if turn.dialogue_history.is_empty() {
            push(format!("{base}.dialogue_history"), "history_nonempty");
            continue;
        }
        for (ui, u) in turn.dialogue_history.iter().enumerate() {
            if u.index != ui + 1 {
                push(format!("{base}.dialogue_history[{ui}].index"), "index_sequence");
            }
            let expected = if ui % 2 == 0 { Role::Speaker } else { Role::Listener };
            if u.role != expected {
                push(format!("{base}.dialogue_history[{ui}].role"), "role_alternation");
            }
            if let Some(e) = &u.coarse_emotion {
                if !is_coarse(e.trim().to_lowercase().as_str()) {
                    push(format!("{base}.dialogue_history[{ui}].emotion"), "utterance_emotion_coarse");
                }
            }
        }
        // the listener's response must extend an odd-length (speaker-final) history
        if turn.dialogue_history.len() % 2 == 0 {
            push(format!("{base}.dialogue_history"), "role_alternation");
        }
        if ti > 0 {
            let prev = &d.turns[ti - 1];
            let need = prev.dialogue_history.len() + 1;
            let ok = turn.dialogue_history.len() > need
                && turn.dialogue_history[..prev.dialogue_history.len()]
                    .iter()
                    .zip(&prev.dialogue_history)
                    .all(|(a, b)| a.index == b.index && a.role == b.role && a.text == b.text)
                && turn.dialogue_history[need - 1].role == Role::Listener
                && turn.dialogue_history[need - 1].text == prev.response;
            if !ok {
                push(format!("{base}.dialogue_history"), "history_prefix");
            }
        }
        if let Some(coe) = &turn.chain_of_empathy {
            for (name, value) in [
                ("speaker_emotion", &coe.speaker_emotion),
                ("event_scenario", &coe.event_scenario),
                ("emotion_cause", &coe.emotion_cause),
                ("goal_to_response", &coe.goal_to_response),
            ] {
                if value.trim().is_empty() {
                    push(format!("{base}.chain_of_empathy.{name}"), "coe_fields_nonempty");
                }
            }
            if !coe.speaker_emotion.trim().is_empty()
                && resolve_to_coarse(&coe.speaker_emotion).is_err()
            {
                push(
                    format!("{base}.chain_of_empathy.speaker_emotion"),
                    "speaker_emotion_coarse",
                );
            }
        }
    }
    out
}

/// Serialize back to the wire schema (canonical labels, `tone` key).
pub fn corpus_to_json(dialogues: &[Dialogue]) -> serde_json::Value {
    let raws: Vec<raw::Dialogue> = dialogues.iter().map(to_raw).collect();
    serde_json::to_value(raws).expect("corpus serialization is infallible")
}

/// Write a corpus as JSON lines, one dialogue per line.
pub fn write_corpus_jsonl(path: &Path, dialogues: &[Dialogue]) -> Result<(), EmpatheiaError> {
    let serde_json::Value::Array(rows) = corpus_to_json(dialogues) else {
        unreachable!("corpus serializes to an array");
    };
    let mut out = String::new();
    for row in rows {
        out.push_str(&row.to_string());
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| EmpatheiaError::io(path, e))
}

fn to_raw(d: &Dialogue) -> raw::Dialogue {
    let prof = |p: &Profile| raw::Profile {
        age: p.age.as_str().to_string(),
        gender: p.gender.as_str().to_string(),
        tone: p.tone.as_str().to_string(),
        id: p.avatar_id.clone().map(serde_json::Value::String),
    };
    raw::Dialogue {
        conversation_id: serde_json::Value::String(d.conversation_id.clone()),
        speaker_profile: prof(&d.speaker_profile),
        listener_profile: prof(&d.listener_profile),
        topic: d.topic.clone(),
        split: Some(d.split.as_str().to_string()),
        turns: d
            .turns
            .iter()
            .map(|t| raw::Turn {
                turn_id: serde_json::Value::String(t.turn_id.clone()),
                context: t.context.clone(),
                dialogue_history: t
                    .dialogue_history
                    .iter()
                    .map(|u| raw::Utterance {
                        index: u.index as i64,
                        role: u.role.as_str().to_string(),
                        utterance: u.text.clone(),
                        emotion: u.coarse_emotion.clone(),
                        audio_ref: u.audio_ref.clone(),
                        video_ref: u.video_ref.clone(),
                    })
                    .collect(),
                response: t.response.clone(),
                chain_of_empathy: t.chain_of_empathy.as_ref().map(|c| raw::ChainOfEmpathy {
                    speaker_emotion: c.speaker_emotion.clone(),
                    event_scenario: c.event_scenario.clone(),
                    emotion_cause: c.emotion_cause.clone(),
                    goal_to_response: c.goal_to_response.clone(),
                }),
            })
            .collect(),
    }
}

/// Dialogue-level coarse emotion: the first annotated turn's speaker emotion.
pub fn dialogue_coarse_emotion(d: &Dialogue) -> Option<&'static str> {
    d.turns
        .iter()
        .filter_map(|t| t.chain_of_empathy.as_ref())
        .find_map(|c| resolve_to_coarse(&c.speaker_emotion).ok())
}

/// One utterance position of a dialogue, including the final response slot.
#[derive(Debug, Clone)]
pub struct UttSlot<'a> {
    pub index: usize,
    pub role: Role,
    pub text: &'a str,
    pub profile: &'a Profile,
    pub coarse_emotion: Option<&'static str>,
    pub audio_ref: Option<&'a str>,
    pub video_ref: Option<&'a str>,
    pub is_response: bool,
}

/// All distinct utterances of a dialogue in order: the last turn's history
/// plus the final response as its own slot.
pub fn utterance_slots(d: &Dialogue) -> Vec<UttSlot<'_>> {
    let Some(last) = d.turns.last() else {
        return Vec::new();
    };
    let fallback = dialogue_coarse_emotion(d);
    let mut slots: Vec<UttSlot<'_>> = last
        .dialogue_history
        .iter()
        .map(|u| UttSlot {
            index: u.index,
            role: u.role,
            text: &u.text,
            profile: match u.role {
                Role::Speaker => &d.speaker_profile,
                Role::Listener => &d.listener_profile,
            },
            coarse_emotion: u
                .coarse_emotion
                .as_deref()
                .and_then(|e| resolve_to_coarse(e).ok())
                .or(fallback),
            audio_ref: u.audio_ref.as_deref(),
            video_ref: u.video_ref.as_deref(),
            is_response: false,
        })
        .collect();
    slots.push(UttSlot {
        index: last.dialogue_history.len() + 1,
        role: Role::Listener,
        text: &last.response,
        profile: &d.listener_profile,
        coarse_emotion: fallback,
        audio_ref: None,
        video_ref: None,
        is_response: true,
    });
    slots
}

pub fn n_utterances(d: &Dialogue) -> usize {
    utterance_slots(d).len()
}
