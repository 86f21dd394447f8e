//! Byte-level tokenizer with reserved atomic special tokens.
//!
//! Ids 0..=255 are raw bytes; special tokens (placeholders, signal tokens,
//! end-of-sequence) follow in table order and are never split, no matter
//! where they appear in text.

use crate::error::EmpatheiaError;

pub const AUD_PLACEHOLDER: &str = "<Aud>";
pub const VID_PLACEHOLDER: &str = "<Vid>";
pub const EOS: &str = "<EOS>";

/// The special-token vocabulary: modality placeholders plus the ordered
/// generation-signal tokens for each modality.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpecialTokenTable {
    pub aud_placeholder: String,
    pub vid_placeholder: String,
    pub aud_signal: Vec<String>,
    pub vid_signal: Vec<String>,
    pub eos: String,
}

impl SpecialTokenTable {
    /// Table with `n_signal` generation tokens per modality (16 by default
    /// elsewhere; sweeps rebuild the table for other sizes).
    pub fn new(n_signal: usize) -> Result<Self, EmpatheiaError> {
        if n_signal == 0 {
            return Err(EmpatheiaError::domain(
                "special token table needs at least one signal token per modality",
            ));
        }
        Ok(Self {
            aud_placeholder: AUD_PLACEHOLDER.to_string(),
            vid_placeholder: VID_PLACEHOLDER.to_string(),
            aud_signal: (1..=n_signal).map(|i| format!("<AUD{i}>")).collect(),
            vid_signal: (1..=n_signal).map(|i| format!("<VID{i}>")).collect(),
            eos: EOS.to_string(),
        })
    }

    pub fn n_signal(&self) -> usize {
        self.aud_signal.len()
    }

    /// Contiguous signal block: all AUD tokens then all VID tokens.
    pub fn signal_block(&self) -> String {
        let mut s = String::new();
        for t in self.aud_signal.iter().chain(&self.vid_signal) {
            s.push_str(t);
        }
        s
    }
}

pub struct Tokenizer {
    table: SpecialTokenTable,
    /// specials in id order (offset 256)
    specials: Vec<String>,
    /// specials sorted longest-first for greedy matching
    match_order: Vec<(usize, String)>,
}

impl Tokenizer {
    pub fn new(table: SpecialTokenTable) -> Self {
        let mut specials = vec![table.aud_placeholder.clone(), table.vid_placeholder.clone()];
        specials.extend(table.aud_signal.iter().cloned());
        specials.extend(table.vid_signal.iter().cloned());
        specials.push(table.eos.clone());
        let mut match_order: Vec<(usize, String)> = specials.iter().cloned().enumerate().collect();
        match_order.sort_by(|a, b| b.1.len().cmp(&a.1.len()).then(a.0.cmp(&b.0)));
        Self {
            table,
            specials,
            match_order,
        }
    }

    pub fn table(&self) -> &SpecialTokenTable {
        &self.table
    }

    pub fn vocab_size(&self) -> usize {
        256 + self.specials.len()
    }

    fn special_id(&self, s: &str) -> u32 {
        256 + self
            .specials
            .iter()
            .position(|t| t == s)
            .expect("token registered in table") as u32
    }

    pub fn aud_placeholder_id(&self) -> u32 {
        self.special_id(&self.table.aud_placeholder)
    }

    pub fn vid_placeholder_id(&self) -> u32 {
        self.special_id(&self.table.vid_placeholder)
    }

    pub fn eos_id(&self) -> u32 {
        self.special_id(&self.table.eos)
    }

    /// Ids of `<AUD1>..<AUDn>` in signal order.
    pub fn aud_signal_ids(&self) -> Vec<u32> {
        self.table.aud_signal.iter().map(|t| self.special_id(t)).collect()
    }

    pub fn vid_signal_ids(&self) -> Vec<u32> {
        self.table.vid_signal.iter().map(|t| self.special_id(t)).collect()
    }

    pub fn is_signal(&self, id: u32) -> bool {
        self.aud_signal_ids().contains(&id) || self.vid_signal_ids().contains(&id)
    }

    /// Greedy left-to-right encoding: at each position the longest special
    /// token match wins; everything else is a single byte.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let bytes = text.as_bytes();
        let mut out = Vec::with_capacity(bytes.len());
        let mut i = 0usize;
        'outer: while i < bytes.len() {
            if bytes[i] == b'<' {
                for (id, tok) in &self.match_order {
                    let t = tok.as_bytes();
                    if bytes[i..].starts_with(t) {
                        out.push(256 + *id as u32);
                        i += t.len();
                        continue 'outer;
                    }
                }
            }
            out.push(bytes[i] as u32);
            i += 1;
        }
        out
    }

    pub fn decode(&self, tokens: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &t in tokens {
            if t < 256 {
                bytes.push(t as u8);
            } else {
                let idx = (t - 256) as usize;
                bytes.extend_from_slice(self.specials[idx].as_bytes());
            }
        }
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::new(SpecialTokenTable::new(16).unwrap())
    }

    #[test]
    fn vocab_counts_bytes_and_specials() {
        let t = tok();
        // 256 bytes + 2 placeholders + 16 + 16 signals + EOS
        assert_eq!(t.vocab_size(), 256 + 2 + 32 + 1);
    }

    #[test]
    fn special_tokens_are_atomic() {
        let t = tok();
        assert_eq!(t.encode("<Aud>").len(), 1);
        assert_eq!(t.encode("<AUD16>").len(), 1);
        assert_eq!(t.encode("<VID3>").len(), 1);
        // <AUD1> must not swallow the prefix of <AUD16>
        let ids = t.encode("<AUD1><AUD16>");
        assert_eq!(ids.len(), 2);
        assert_ne!(ids[0], ids[1]);
    }

    #[test]
    fn encode_decode_round_trips_text_with_specials() {
        let t = tok();
        let text = "Speaker:hums a tune<Aud> <Vid>.\n<AUD1><AUD2><VID16> done";
        assert_eq!(t.decode(&t.encode(text)), text);
    }

    #[test]
    fn unknown_angle_strings_stay_bytes() {
        let t = tok();
        let ids = t.encode("<AUD17>");
        assert!(ids.len() > 1);
        assert_eq!(t.decode(&ids), "<AUD17>");
    }

    #[test]
    fn signal_block_is_contiguous_and_ordered() {
        let table = SpecialTokenTable::new(3).unwrap();
        assert_eq!(table.signal_block(), "<AUD1><AUD2><AUD3><VID1><VID2><VID3>");
        let t = Tokenizer::new(table);
        let ids = t.encode(&t.table().signal_block());
        assert_eq!(ids.len(), 6);
        assert_eq!(ids[..3].to_vec(), t.aud_signal_ids());
        assert_eq!(ids[3..].to_vec(), t.vid_signal_ids());
    }

    #[test]
    fn zero_signal_tokens_rejected() {
        assert!(SpecialTokenTable::new(0).is_err());
    }
}
