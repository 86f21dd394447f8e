//! Training-prompt assembly and chain-of-empathy target parsing.
//!
//! Templates ship as versioned text resources under `resources/templates_v1`
//! so golden tests can pin the exact bytes.

use std::sync::OnceLock;

use crate::data::{Dialogue, Turn};
use crate::error::EmpatheiaError;
use crate::tokenizer::{SpecialTokenTable, Tokenizer};

const COE_PREAMBLE: &str = include_str!("../resources/templates_v1/coe_preamble.txt");
const STYLE_PREAMBLE: &str = include_str!("../resources/templates_v1/style_preamble.txt");
const OVERALL_PREAMBLE: &str = include_str!("../resources/templates_v1/overall_preamble.txt");
const COE_MARKERS_RAW: &str = include_str!("../resources/templates_v1/coe_markers.txt");

const MARKER_NAMES: [&str; 5] = ["Firstly", "Secondly", "Thirdly", "Fourthly", "Finally"];

/// The five target-line markers, in order. Spacing after the colon is part
/// of the template (the fourth marker has none).
pub fn coe_markers() -> &'static [&'static str; 5] {
    static MARKERS: OnceLock<[&'static str; 5]> = OnceLock::new();
    MARKERS.get_or_init(|| {
        let mut lines = COE_MARKERS_RAW.split('\n');
        let mut out = [""; 5];
        for slot in &mut out {
            *slot = lines.next().expect("five marker lines");
        }
        out
    })
}

pub const MAX_COE_DEPTH: u8 = 5;

/// Which training-stage template to render. `depth` ablates the reasoning
/// chain: 0 keeps only the response line, 5 the full chain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptKind {
    CoeText { depth: u8 },
    StyleMultimodal,
    Overall { depth: u8 },
}

impl PromptKind {
    pub fn coe() -> Self {
        Self::CoeText { depth: MAX_COE_DEPTH }
    }

    pub fn overall() -> Self {
        Self::Overall { depth: MAX_COE_DEPTH }
    }

    pub fn is_multimodal(self) -> bool {
        !matches!(self, Self::CoeText { .. })
    }

    fn depth(self) -> Option<u8> {
        match self {
            Self::CoeText { depth } | Self::Overall { depth } => Some(depth),
            Self::StyleMultimodal => None,
        }
    }

    fn validate(self) -> Result<(), EmpatheiaError> {
        match self.depth() {
            Some(d) if d > MAX_COE_DEPTH => Err(EmpatheiaError::domain(format!(
                "reasoning depth {d} out of range 0..={MAX_COE_DEPTH}"
            ))),
            _ => Ok(()),
        }
    }
}

/// Structured form of a parsed five-line target.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoEOutput {
    pub event_scenario: String,
    pub speaker_emotion: String,
    pub emotion_cause: String,
    pub goal_to_response: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BuiltPrompt {
    pub input: String,
    pub target: String,
}

/// Render the input/target pair for one turn. Pure in (dialogue, turn_idx,
/// kind, table).
pub fn build_prompt(
    d: &Dialogue,
    turn_idx: usize,
    kind: PromptKind,
    table: &SpecialTokenTable,
) -> Result<BuiltPrompt, EmpatheiaError> {
    kind.validate()?;
    let turn = d.turns.get(turn_idx).ok_or_else(|| {
        EmpatheiaError::precondition(format!(
            "{}: turn index {} out of range ({} turns)",
            d.conversation_id,
            turn_idx,
            d.turns.len()
        ))
    })?;

    let preamble = match kind {
        PromptKind::CoeText { .. } => COE_PREAMBLE,
        PromptKind::StyleMultimodal => STYLE_PREAMBLE,
        PromptKind::Overall { .. } => OVERALL_PREAMBLE,
    };
    let placeholders = format!("{} {}.", table.aud_placeholder, table.vid_placeholder);

    let mut input = String::from(preamble);
    input.push_str("Dialogue Context:\n{\n");
    for u in &turn.dialogue_history {
        input.push_str(u.role.prompt_label());
        input.push(':');
        match kind {
            PromptKind::CoeText { .. } => input.push_str(&u.text),
            PromptKind::StyleMultimodal => input.push_str(&placeholders),
            PromptKind::Overall { .. } => {
                input.push_str(&u.text);
                input.push_str(&placeholders);
            }
        }
        input.push('\n');
    }
    input.push_str("}\n");

    let target = match kind {
        PromptKind::StyleMultimodal => table.signal_block(),
        PromptKind::CoeText { depth } => coe_target(d, turn, depth)?,
        PromptKind::Overall { depth } => {
            format!("{}\n{}", coe_target(d, turn, depth)?, table.signal_block())
        }
    };

    Ok(BuiltPrompt { input, target })
}

/// Target lines: the first `min(depth, 4)` reasoning lines, then the
/// response line (always present; the response is the chain's final step).
fn coe_target(d: &Dialogue, turn: &Turn, depth: u8) -> Result<String, EmpatheiaError> {
    let m = coe_markers();
    let mut lines = Vec::new();
    if depth >= 1 {
        let chain = turn.chain_of_empathy.as_ref().ok_or_else(|| {
            EmpatheiaError::precondition(format!(
                "{}: turn {} has no chain-of-empathy annotation required at depth {}",
                d.conversation_id, turn.turn_id, depth
            ))
        })?;
        let fields = [
            &chain.event_scenario,
            &chain.speaker_emotion,
            &chain.emotion_cause,
            &chain.goal_to_response,
        ];
        for i in 0..depth.min(4) as usize {
            lines.push(format!("{}{}", m[i], fields[i]));
        }
    }
    lines.push(format!("{}{}", m[4], turn.response));
    Ok(lines.join("\n"))
}

/// Parse a full five-line target back into fields. Markers must appear in
/// order; values are whitespace-trimmed; the response runs to end of text.
pub fn parse_coe(text: &str) -> Result<CoEOutput, EmpatheiaError> {
    let markers = coe_markers();
    let mut value_start = [0usize; 5];
    let mut marker_at = [0usize; 5];
    let mut pos = 0usize;
    for i in 0..5 {
        let literal = markers[i].trim_end();
        match text[pos..].find(literal) {
            Some(rel) => {
                marker_at[i] = pos + rel;
                value_start[i] = marker_at[i] + literal.len();
                pos = value_start[i];
            }
            None => {
                return Err(EmpatheiaError::Parse(format!(
                    "missing marker \"{}\"",
                    MARKER_NAMES[i]
                )))
            }
        }
    }
    if !text[..marker_at[0]].trim().is_empty() {
        return Err(EmpatheiaError::Parse(format!(
            "text before marker \"{}\"",
            MARKER_NAMES[0]
        )));
    }
    let field = |i: usize| -> String {
        let end = if i + 1 < 5 { marker_at[i + 1] } else { text.len() };
        text[value_start[i]..end].trim().to_string()
    };
    Ok(CoEOutput {
        event_scenario: field(0),
        speaker_emotion: field(1),
        emotion_cause: field(2),
        goal_to_response: field(3),
        response: field(4),
    })
}

/// Token-level view of a built prompt: full sequence plus the positions the
/// model pipeline needs (placeholders to splice, signal tokens to read out).
#[derive(Debug, Clone)]
pub struct TokenizedSample {
    pub tokens: Vec<u32>,
    /// number of input tokens; positions >= this are target positions
    pub prompt_len: usize,
    pub aud_placeholders: Vec<usize>,
    pub vid_placeholders: Vec<usize>,
    pub aud_signal_pos: Vec<usize>,
    pub vid_signal_pos: Vec<usize>,
}

impl TokenizedSample {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// 1.0 on target positions (loss applies), 0.0 on prompt positions.
    pub fn loss_mask(&self) -> Vec<f64> {
        (0..self.tokens.len())
            .map(|p| if p >= self.prompt_len { 1.0 } else { 0.0 })
            .collect()
    }
}

pub fn tokenize_sample(tok: &Tokenizer, built: &BuiltPrompt) -> TokenizedSample {
    let mut tokens = tok.encode(&built.input);
    let prompt_len = tokens.len();
    tokens.extend(tok.encode(&built.target));
    tokens.push(tok.eos_id());

    let aud_id = tok.aud_placeholder_id();
    let vid_id = tok.vid_placeholder_id();
    let aud_sig = tok.aud_signal_ids();
    let vid_sig = tok.vid_signal_ids();

    let mut sample = TokenizedSample {
        tokens: Vec::new(),
        prompt_len,
        aud_placeholders: Vec::new(),
        vid_placeholders: Vec::new(),
        aud_signal_pos: Vec::new(),
        vid_signal_pos: Vec::new(),
    };
    for (p, &t) in tokens.iter().enumerate() {
        if p < prompt_len {
            if t == aud_id {
                sample.aud_placeholders.push(p);
            } else if t == vid_id {
                sample.vid_placeholders.push(p);
            }
        } else if aud_sig.contains(&t) {
            sample.aud_signal_pos.push(p);
        } else if vid_sig.contains(&t) {
            sample.vid_signal_pos.push(p);
        }
    }
    sample.tokens = tokens;
    sample
}
