//! Corpus statistics with stable JSON/CSV emitters.
//!
//! Word counting is whitespace tokenization after trimming (punctuation is
//! not split off), so averages are reproducible and the rule is documented.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::{dialogue_coarse_emotion, utterance_slots, Dialogue, Profile, Split};

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct SplitCounts {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub n_utterances: usize,
    pub split_counts: SplitCounts,
    pub avg_words_per_utterance: f64,
    pub avg_utterances_per_dialogue: f64,
    /// per-dialogue coarse emotion ("unknown" when unannotated)
    pub emotion_hist: BTreeMap<String, usize>,
    /// per-profile occurrence (two profiles per dialogue)
    pub age_hist: BTreeMap<String, usize>,
    pub gender_hist: BTreeMap<String, usize>,
    pub tone_hist: BTreeMap<String, usize>,
    /// per-dialogue topic
    pub topic_hist: BTreeMap<String, usize>,
}

fn word_count(text: &str) -> usize {
    text.split_whitespace().count()
}

/// Exact, order-independent corpus summary.
pub fn compute_stats(corpus: &[Dialogue]) -> CorpusStats {
    let mut split_counts = SplitCounts {
        train: 0,
        valid: 0,
        test: 0,
    };
    let mut n_utterances = 0usize;
    let mut total_words = 0usize;
    let mut emotion_hist = BTreeMap::new();
    let mut age_hist = BTreeMap::new();
    let mut gender_hist = BTreeMap::new();
    let mut tone_hist = BTreeMap::new();
    let mut topic_hist = BTreeMap::new();

    let bump = |m: &mut BTreeMap<String, usize>, k: &str| {
        *m.entry(k.to_string()).or_insert(0) += 1;
    };
    let profile = |p: &Profile,
                       age: &mut BTreeMap<String, usize>,
                       gen: &mut BTreeMap<String, usize>,
                       tone: &mut BTreeMap<String, usize>| {
        *age.entry(p.age.as_str().to_string()).or_insert(0) += 1;
        *gen.entry(p.gender.as_str().to_string()).or_insert(0) += 1;
        *tone.entry(p.tone.as_str().to_string()).or_insert(0) += 1;
    };

    for d in corpus {
        match d.split {
            Split::Train => split_counts.train += 1,
            Split::Valid => split_counts.valid += 1,
            Split::Test => split_counts.test += 1,
        }
        for slot in utterance_slots(d) {
            n_utterances += 1;
            total_words += word_count(slot.text);
        }
        bump(&mut emotion_hist, dialogue_coarse_emotion(d).unwrap_or("unknown"));
        bump(&mut topic_hist, &d.topic);
        profile(&d.speaker_profile, &mut age_hist, &mut gender_hist, &mut tone_hist);
        profile(&d.listener_profile, &mut age_hist, &mut gender_hist, &mut tone_hist);
    }

    let n_dialogues = corpus.len();
    CorpusStats {
        n_dialogues,
        n_utterances,
        split_counts,
        avg_words_per_utterance: if n_utterances == 0 {
            0.0
        } else {
            total_words as f64 / n_utterances as f64
        },
        avg_utterances_per_dialogue: if n_dialogues == 0 {
            0.0
        } else {
            n_utterances as f64 / n_dialogues as f64
        },
        emotion_hist,
        age_hist,
        gender_hist,
        tone_hist,
        topic_hist,
    }
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    /// Flat `key,value` rows in a pinned order (scalars first, then the
    /// histograms, each prefixed and alphabetical).
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let mut row = |k: &str, v: String| {
            let _ = writeln!(out, "{k},{v}");
        };
        row("n_dialogues", self.n_dialogues.to_string());
        row("n_utterances", self.n_utterances.to_string());
        row("split_train", self.split_counts.train.to_string());
        row("split_valid", self.split_counts.valid.to_string());
        row("split_test", self.split_counts.test.to_string());
        row("avg_words_per_utterance", format!("{}", self.avg_words_per_utterance));
        row(
            "avg_utterances_per_dialogue",
            format!("{}", self.avg_utterances_per_dialogue),
        );
        for (prefix, hist) in [
            ("emotion", &self.emotion_hist),
            ("age", &self.age_hist),
            ("gender", &self.gender_hist),
            ("tone", &self.tone_hist),
            ("topic", &self.topic_hist),
        ] {
            for (k, v) in hist {
                let _ = writeln!(out, "{prefix}.{k},{v}");
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{load_corpus, LoadOptions, SplitFilter};
    use std::io::Write;

    fn fixture_corpus(content: &str) -> Vec<Dialogue> {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(content.as_bytes()).unwrap();
        load_corpus(f.path(), SplitFilter::All, LoadOptions::default()).unwrap()
    }

    fn five_word_dialogue(id: &str) -> serde_json::Value {
        // two turns, four utterances, each exactly five words
        let u = |i: usize, role: &str, text: &str| {
            serde_json::json!({ "index": i, "role": role, "utterance": text })
        };
        let coe = serde_json::json!({
            "speaker_emotion": "joyful",
            "event_scenario": "A small win at home.",
            "emotion_cause": "Things finally went right today.",
            "goal_to_response": "Share in the speaker's joy."
        });
        serde_json::json!({
            "conversation_id": id,
            "speaker_profile": { "age": "young", "gender": "male", "tone": "mild" },
            "listener_profile": { "age": "young", "gender": "female", "tone": "gentle" },
            "topic": "Life Events",
            "turns": [
                {
                    "turn_id": "1",
                    "dialogue_history": [u(1, "speaker", "one two three four five")],
                    "response": "alpha beta gamma delta epsilon",
                    "chain_of_empathy": coe
                },
                {
                    "turn_id": "2",
                    "dialogue_history": [
                        u(1, "speaker", "one two three four five"),
                        u(2, "listener", "alpha beta gamma delta epsilon"),
                        u(3, "speaker", "six seven eight nine ten")
                    ],
                    "response": "zeta eta theta iota kappa",
                    "chain_of_empathy": coe
                }
            ]
        })
    }

    #[test]
    fn two_dialogues_four_utterances_five_words() {
        let corpus = fixture_corpus(
            &serde_json::json!([five_word_dialogue("a"), five_word_dialogue("b")]).to_string(),
        );
        let stats = compute_stats(&corpus);
        assert_eq!(stats.n_dialogues, 2);
        assert_eq!(stats.n_utterances, 8);
        assert_eq!(stats.avg_words_per_utterance, 5.0);
        assert_eq!(stats.avg_utterances_per_dialogue, 4.0);
        assert_eq!(stats.split_counts.train, 2);
        assert_eq!(stats.emotion_hist.get("happy"), Some(&2));
        assert_eq!(stats.topic_hist.get("Life Events"), Some(&2));
        assert_eq!(stats.age_hist.get("young"), Some(&4));
        assert_eq!(stats.gender_hist.get("male"), Some(&2));
        assert_eq!(stats.tone_hist.get("gentle"), Some(&2));
    }

    #[test]
    fn empty_corpus_is_all_zeros() {
        let stats = compute_stats(&[]);
        assert_eq!(stats.n_dialogues, 0);
        assert_eq!(stats.n_utterances, 0);
        assert_eq!(stats.avg_words_per_utterance, 0.0);
        assert_eq!(stats.avg_utterances_per_dialogue, 0.0);
    }

    #[test]
    fn stats_are_permutation_invariant() {
        let a = fixture_corpus(
            &serde_json::json!([five_word_dialogue("a"), five_word_dialogue("b")]).to_string(),
        );
        let mut b = a.clone();
        b.reverse();
        assert_eq!(compute_stats(&a), compute_stats(&b));
    }

    #[test]
    fn topic_counts_sum_to_dialogue_count() {
        let corpus = fixture_corpus(
            &serde_json::json!([five_word_dialogue("a"), five_word_dialogue("b")]).to_string(),
        );
        let stats = compute_stats(&corpus);
        let total: usize = stats.topic_hist.values().sum();
        assert_eq!(total, stats.n_dialogues);
    }

    #[test]
    fn csv_layout_is_stable() {
        let corpus = fixture_corpus(&serde_json::json!([five_word_dialogue("a")]).to_string());
        let csv = compute_stats(&corpus).to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "key,value");
        assert_eq!(lines[1], "n_dialogues,1");
        assert_eq!(lines[2], "n_utterances,4");
        assert_eq!(lines[3], "split_train,1");
        assert_eq!(lines[6], "avg_words_per_utterance,5");
        assert!(lines.iter().any(|l| *l == "emotion.happy,1"));
        assert!(lines.iter().any(|l| *l == "topic.Life Events,1"));
    }

    #[test]
    fn split_counts_sum_to_n_dialogues() {
        let mut a = five_word_dialogue("a");
        a["split"] = "valid".into();
        let mut b = five_word_dialogue("b");
        b["split"] = "test".into();
        let corpus =
            fixture_corpus(&serde_json::json!([a, b, five_word_dialogue("c")]).to_string());
        let stats = compute_stats(&corpus);
        assert_eq!(
            stats.split_counts.train + stats.split_counts.valid + stats.split_counts.test,
            stats.n_dialogues
        );
        assert_eq!(stats.split_counts.valid, 1);
        assert_eq!(stats.split_counts.test, 1);
    }
}
