//! Seeded synthetic corpora and the oracle feature store used by smoke runs:
//! emotion and profile labels are embedded in disjoint linear subspaces of
//! the stored features so probes have ground truth to recover.

use std::path::Path;

use ndarray::Array2;
use rand::Rng;

use crate::data::{
    utterance_slots, Age, ChainOfEmpathy, Dialogue, Gender, Profile, Role, Split, Tone, Turn,
    Utterance,
};
use crate::emotions::{coarse_index, fine_emotions, COARSE_EMOTIONS};
use crate::encoders::FeatureStore;
use crate::error::EmpatheiaError;
use crate::rng::seeded_rng;

/// Dims 0..6 emotion, 7..8 gender, 9..12 age, 13..15 tone.
pub const LABEL_DIMS: usize = 16;

const WORDS: [&str; 24] = [
    "plan", "garden", "quiet", "morning", "letter", "friend", "walk", "coffee", "window",
    "bright", "small", "steady", "river", "music", "warm", "street", "simple", "evening",
    "cloud", "gentle", "paper", "slow", "green", "road",
];

fn sentence(rng: &mut impl Rng, min_words: usize, max_words: usize) -> String {
    let n = rng.gen_range(min_words..=max_words);
    let mut words: Vec<&str> = (0..n)
        .map(|_| WORDS[rng.gen_range(0..WORDS.len())])
        .collect();
    let first = words[0];
    let capitalized = format!("{}{}", first[..1].to_uppercase(), &first[1..]);
    let rest = words.split_off(1).join(" ");
    if rest.is_empty() {
        format!("{capitalized}.")
    } else {
        format!("{capitalized} {rest}.")
    }
}

fn pick_profile(rng: &mut impl Rng) -> Profile {
    Profile {
        age: Age::ALL[rng.gen_range(0..Age::ALL.len())],
        gender: Gender::ALL[rng.gen_range(0..Gender::ALL.len())],
        tone: Tone::ALL[rng.gen_range(0..Tone::ALL.len())],
        avatar_id: None,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthCorpusSpec {
    pub n_dialogues: usize,
    /// longest history to draw (odd lengths only: 1 or 3)
    pub max_history: usize,
    pub seed: u64,
}

impl Default for SynthCorpusSpec {
    fn default() -> Self {
        Self { n_dialogues: 64, max_history: 3, seed: 7 }
    }
}

/// Generate a deterministic corpus. Emotion and listener profile sweep the
/// full label cross product every 168 dialogues; one dialogue in ten goes to
/// validation and one to test.
pub fn generate_corpus(spec: &SynthCorpusSpec) -> Vec<Dialogue> {
    let topics = [
        "Daily Life",
        "Work and Career",
        "Friendship",
        "Health Worries",
        "Personal Struggles and Challenges",
    ];
    let fine = fine_emotions();
    let mut out = Vec::with_capacity(spec.n_dialogues);
    for i in 0..spec.n_dialogues {
        let mut rng = seeded_rng(spec.seed, &format!("dialogue.{i}"));
        let emotion = COARSE_EMOTIONS[i % 7];
        let listener_profile = Profile {
            age: Age::ALL[(i / 14) % 4],
            gender: Gender::ALL[(i / 7) % 2],
            tone: Tone::ALL[(i / 56) % 3],
            avatar_id: None,
        };
        let history_len = if spec.max_history >= 3 && rng.gen_bool(0.5) { 3 } else { 1 };
        let history: Vec<Utterance> = (0..history_len)
            .map(|u| {
                let role = if u % 2 == 0 { Role::Speaker } else { Role::Listener };
                Utterance {
                    index: u + 1,
                    role,
                    text: sentence(&mut rng, 3, 8),
                    coarse_emotion: (role == Role::Speaker).then(|| emotion.to_string()),
                    audio_ref: None,
                    video_ref: None,
                }
            })
            .collect();
        let speaker_emotion = if i % 7 == 3 {
            fine[i % fine.len()].to_string()
        } else {
            emotion.to_string()
        };
        let mut response = sentence(&mut rng, 4, 9);
        if rng.gen_bool(0.3) {
            response = format!("{response} {}", sentence(&mut rng, 3, 6));
        }
        out.push(Dialogue {
            conversation_id: format!("synth-{i:05}"),
            speaker_profile: pick_profile(&mut rng),
            listener_profile,
            topic: topics[i % topics.len()].to_string(),
            split: match i % 10 {
                8 => Split::Valid,
                9 => Split::Test,
                _ => Split::Train,
            },
            turns: vec![Turn {
                turn_id: "t1".to_string(),
                context: None,
                dialogue_history: history,
                response,
                chain_of_empathy: Some(ChainOfEmpathy {
                    speaker_emotion,
                    event_scenario: sentence(&mut rng, 3, 6),
                    emotion_cause: sentence(&mut rng, 3, 6),
                    goal_to_response: sentence(&mut rng, 3, 6),
                }),
            }],
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct StoreSpec {
    /// feature width, at least [`LABEL_DIMS`]
    pub d_enc: usize,
    /// inclusive frame-count range drawn per utterance and modality
    pub frames: (usize, usize),
    /// label signal amplitude
    pub amp: f64,
    /// iid noise standard deviation
    pub noise: f64,
    pub seed: u64,
}

impl Default for StoreSpec {
    fn default() -> Self {
        Self { d_enc: LABEL_DIMS, frames: (4, 8), amp: 1.0, noise: 0.05, seed: 11 }
    }
}

impl StoreSpec {
    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        if self.d_enc < LABEL_DIMS {
            return Err(EmpatheiaError::domain(format!(
                "store feature width {} cannot hold the {LABEL_DIMS} label dims",
                self.d_enc
            )));
        }
        if self.frames.0 == 0 || self.frames.0 > self.frames.1 {
            return Err(EmpatheiaError::domain(format!(
                "frame range {:?} is not a nonempty range",
                self.frames
            )));
        }
        Ok(())
    }
}

/// The noise-free feature row encoding one label combination.
pub fn label_vector(
    d_enc: usize,
    emotion_idx: usize,
    profile: &Profile,
    amp: f64,
) -> Vec<f64> {
    let mut v = vec![0.0; d_enc];
    v[emotion_idx] = amp;
    v[7 + profile.gender.index()] = amp;
    v[9 + profile.age.index()] = amp;
    v[13 + profile.tone.index()] = amp;
    v
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StoreBuildReport {
    pub entries_written: usize,
    /// dialogues with no emotion label anywhere, left without media
    pub skipped_dialogues: Vec<String>,
}

/// Populate `root` with label-coded speech and video features for every
/// utterance slot (responses included) of every dialogue.
pub fn build_synthetic_store(
    corpus: &[Dialogue],
    root: &Path,
    spec: &StoreSpec,
) -> Result<(FeatureStore, StoreBuildReport), EmpatheiaError> {
    spec.validate()?;
    let mut store = FeatureStore::open_or_create(root)?;
    let mut report = StoreBuildReport { entries_written: 0, skipped_dialogues: Vec::new() };
    for d in corpus {
        let slots = utterance_slots(d);
        if slots.iter().any(|s| s.coarse_emotion.is_none()) {
            report.skipped_dialogues.push(d.conversation_id.clone());
            continue;
        }
        for slot in slots {
            let emotion_idx = coarse_index(slot.coarse_emotion.expect("checked above"))?;
            let base = label_vector(spec.d_enc, emotion_idx, slot.profile, spec.amp);
            for kind in ["speech", "video"] {
                let key = FeatureStore::key(&d.conversation_id, slot.index, kind);
                let mut rng = seeded_rng(spec.seed, &format!("store.{key}"));
                let frames = rng.gen_range(spec.frames.0..=spec.frames.1);
                let data = Array2::from_shape_fn((frames, spec.d_enc), |(_, j)| {
                    base[j] + spec.noise * sample_normal(&mut rng)
                });
                if !store.contains(&key) {
                    store.put(&d.conversation_id, slot.index, kind, &data)?;
                    report.entries_written += 1;
                }
            }
        }
    }
    Ok((store, report))
}

fn sample_normal(rng: &mut impl Rng) -> f64 {
    use rand_distr::{Distribution, StandardNormal};
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::validate_dialogue;
    use crate::generators::{extract_gold_style, init_generators, GeneratorConfig};
    use crate::params::ParamStore;

    #[test]
    fn generated_corpus_is_deterministic_and_valid() {
        let spec = SynthCorpusSpec { n_dialogues: 50, ..Default::default() };
        let a = generate_corpus(&spec);
        let b = generate_corpus(&spec);
        assert_eq!(a, b);
        for d in &a {
            let violations = validate_dialogue(d);
            assert!(violations.is_empty(), "{}: {:?}", d.conversation_id, violations);
        }
        let trains = a.iter().filter(|d| d.split == Split::Train).count();
        assert_eq!(trains, 40);
    }

    #[test]
    fn corpus_sweeps_label_combinations() {
        let spec = SynthCorpusSpec { n_dialogues: 168, ..Default::default() };
        let corpus = generate_corpus(&spec);
        let mut seen = std::collections::BTreeSet::new();
        for (i, d) in corpus.iter().enumerate() {
            let p = &d.listener_profile;
            seen.insert((i % 7, p.gender.index(), p.age.index(), p.tone.index()));
        }
        assert_eq!(seen.len(), 168);
    }

    #[test]
    fn store_rebuild_is_bit_identical() {
        let corpus = generate_corpus(&SynthCorpusSpec { n_dialogues: 4, ..Default::default() });
        let spec = StoreSpec::default();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let (store_a, report_a) = build_synthetic_store(&corpus, dir_a.path(), &spec).unwrap();
        let (_, report_b) = build_synthetic_store(&corpus, dir_b.path(), &spec).unwrap();
        assert_eq!(report_a, report_b);
        assert!(report_a.skipped_dialogues.is_empty());
        // slots x two modalities
        let slots: usize = corpus.iter().map(|d| utterance_slots(d).len()).sum();
        assert_eq!(report_a.entries_written, 2 * slots);
        for key in store_a.keys() {
            let rel = format!("{key}.bin");
            let a = std::fs::read(dir_a.path().join(&rel)).unwrap();
            let b = std::fs::read(dir_b.path().join(&rel)).unwrap();
            assert_eq!(a, b, "{rel} differs between rebuilds");
        }
        let ma = std::fs::read(dir_a.path().join("manifest.json")).unwrap();
        let mb = std::fs::read(dir_b.path().join("manifest.json")).unwrap();
        assert_eq!(ma, mb);
    }

    #[test]
    fn stored_features_recover_labels() {
        let corpus = generate_corpus(&SynthCorpusSpec { n_dialogues: 8, ..Default::default() });
        let spec = StoreSpec { frames: (6, 6), ..Default::default() };
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = build_synthetic_store(&corpus, dir.path(), &spec).unwrap();
        for d in &corpus {
            for slot in utterance_slots(d) {
                let data = store.get(&d.conversation_id, slot.index, "speech").unwrap();
                let mean = data.mean_axis(ndarray::Axis(0)).unwrap();
                let emotion_idx = coarse_index(slot.coarse_emotion.unwrap()).unwrap();
                let argmax = (0..7).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
                assert_eq!(argmax, emotion_idx, "{}/{}", d.conversation_id, slot.index);
                let gender_arg = (7..9).max_by(|&a, &b| mean[a].total_cmp(&mean[b])).unwrap();
                assert_eq!(gender_arg - 7, slot.profile.gender.index());
            }
        }
    }

    #[test]
    fn same_avatar_same_emotion_styles_are_closer() {
        // many dialogues share (listener profile, emotion) cells; gold style
        // vectors within a cell should be closer in cosine than across cells
        let corpus = generate_corpus(&SynthCorpusSpec { n_dialogues: 40, max_history: 3, seed: 3 });
        let spec = StoreSpec::default();
        let dir = tempfile::tempdir().unwrap();
        let (store, _) = build_synthetic_store(&corpus, dir.path(), &spec).unwrap();
        let gen_cfg = GeneratorConfig {
            d_enc: spec.d_enc,
            d_text_acoustic: 4,
            d_text_prosodic: 4,
            d_content_v: 6,
            style_s_width: 6,
            style_v_width: 6,
            mel_bins: 5,
            motion_dims: 4,
            seed: 2,
        };
        let mut params = ParamStore::new();
        init_generators(&mut params, &gen_cfg).unwrap();

        // listener-side slots of one dialogue share an avatar and emotion;
        // cells repeat only within a dialogue at this corpus size
        let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
        for (i, d) in corpus.iter().enumerate() {
            for slot in utterance_slots(d) {
                if slot.role != crate::data::Role::Listener {
                    continue;
                }
                let (s_s, _) =
                    extract_gold_style(&params, &gen_cfg, &store, &d.conversation_id, slot.index)
                        .unwrap();
                rows.push((i, s_s.iter().copied().collect()));
            }
        }
        let cosine = |a: &[f64], b: &[f64]| {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            dot / (na * nb)
        };
        let mut same = Vec::new();
        let mut cross = Vec::new();
        for i in 0..rows.len() {
            for j in (i + 1)..rows.len() {
                let c = cosine(&rows[i].1, &rows[j].1);
                if rows[i].0 == rows[j].0 {
                    same.push(c);
                } else {
                    cross.push(c);
                }
            }
        }
        assert!(!same.is_empty(), "corpus too small to form same-cell pairs");
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert!(
            mean(&same) > mean(&cross),
            "same-cell cosine {} not above cross-cell {}",
            mean(&same),
            mean(&cross)
        );
    }

    #[test]
    fn store_spec_guards() {
        assert!(StoreSpec { d_enc: 8, ..Default::default() }.validate().is_err());
        assert!(StoreSpec { frames: (3, 2), ..Default::default() }.validate().is_err());
        assert!(StoreSpec { frames: (0, 2), ..Default::default() }.validate().is_err());
    }
}
