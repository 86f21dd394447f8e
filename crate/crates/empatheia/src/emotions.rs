//! Emotion taxonomies and the fine-to-coarse mapping table.

use std::collections::BTreeMap;
use std::sync::OnceLock;

use serde::Deserialize;

use crate::error::EmpatheiaError;

/// The seven coarse multimodal emotions, in canonical (class-index) order.
pub const COARSE_EMOTIONS: [&str; 7] = [
    "sad",
    "disgusted",
    "surprised",
    "contempt",
    "happy",
    "fear",
    "angry",
];

#[derive(Deserialize)]
struct EmotionMapFile {
    #[allow(dead_code)]
    version: u32,
    coarse: Vec<String>,
    fine_to_coarse: BTreeMap<String, String>,
}

fn map_table() -> &'static EmotionMapFile {
    static TABLE: OnceLock<EmotionMapFile> = OnceLock::new();
    TABLE.get_or_init(|| {
        let raw = include_str!("../resources/emotion_map_v1.json");
        let table: EmotionMapFile =
            serde_json::from_str(raw).expect("bundled emotion map must parse");
        for target in table.fine_to_coarse.values() {
            assert!(
                table.coarse.iter().any(|c| c == target),
                "emotion map targets an undeclared coarse label {target}"
            );
        }
        table
    })
}

/// All 32 fine-grained labels in the bundled mapping, sorted.
pub fn fine_emotions() -> Vec<&'static str> {
    map_table().fine_to_coarse.keys().map(|s| s.as_str()).collect()
}

pub fn is_coarse(label: &str) -> bool {
    COARSE_EMOTIONS.contains(&label)
}

/// Class index of a coarse emotion in [`COARSE_EMOTIONS`] order.
pub fn coarse_index(label: &str) -> Result<usize, EmpatheiaError> {
    COARSE_EMOTIONS
        .iter()
        .position(|&c| c == label)
        .ok_or_else(|| {
            EmpatheiaError::domain(format!(
                "unknown coarse emotion {:?}; expected one of {:?}",
                label, COARSE_EMOTIONS
            ))
        })
}

/// Map a fine-grained emotion label to its coarse class.
pub fn map_fine_to_coarse(fine: &str) -> Result<&'static str, EmpatheiaError> {
    let key = fine.trim().to_lowercase();
    let table = map_table();
    match table.fine_to_coarse.get(&key) {
        Some(c) => {
            let idx = COARSE_EMOTIONS
                .iter()
                .position(|&k| k == c.as_str())
                .expect("bundled map targets are coarse by construction");
            Ok(COARSE_EMOTIONS[idx])
        }
        None => Err(EmpatheiaError::domain(format!(
            "unknown fine emotion {:?}; known fine labels: {}",
            fine,
            fine_emotions().join(", ")
        ))),
    }
}

/// Resolve a label that may be fine or already coarse to its coarse class.
pub fn resolve_to_coarse(label: &str) -> Result<&'static str, EmpatheiaError> {
    let key = label.trim().to_lowercase();
    if let Some(idx) = COARSE_EMOTIONS.iter().position(|&c| c == key) {
        return Ok(COARSE_EMOTIONS[idx]);
    }
    map_fine_to_coarse(&key)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn mapping_is_total_over_32_labels() {
        let fines = fine_emotions();
        assert_eq!(fines.len(), 32);
        for f in fines {
            map_fine_to_coarse(f).unwrap();
        }
    }

    #[test]
    fn mapping_image_is_exactly_the_coarse_set() {
        let mut image = BTreeSet::new();
        for f in fine_emotions() {
            image.insert(map_fine_to_coarse(f).unwrap());
        }
        let coarse: BTreeSet<&str> = COARSE_EMOTIONS.iter().copied().collect();
        assert_eq!(image, coarse);
        let declared: BTreeSet<&str> =
            map_table().coarse.iter().map(|s| s.as_str()).collect();
        assert_eq!(declared, coarse);
    }

    #[test]
    fn pinned_rows() {
        assert_eq!(map_fine_to_coarse("sad").unwrap(), "sad");
        assert_eq!(map_fine_to_coarse("embarrassed").unwrap(), "sad");
        assert_eq!(map_fine_to_coarse("joyful").unwrap(), "happy");
        assert_eq!(map_fine_to_coarse("content").unwrap(), "happy");
    }

    #[test]
    fn unknown_label_lists_known_ones() {
        let err = map_fine_to_coarse("bored").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bored"));
        assert!(msg.contains("afraid"));
    }

    #[test]
    fn resolve_accepts_coarse_and_fine_and_case() {
        assert_eq!(resolve_to_coarse("happy").unwrap(), "happy");
        assert_eq!(resolve_to_coarse("Embarrassed").unwrap(), "sad");
    }

    #[test]
    fn coarse_index_covers_all_seven() {
        for (i, c) in COARSE_EMOTIONS.iter().enumerate() {
            assert_eq!(coarse_index(c).unwrap(), i);
        }
        assert!(coarse_index("bored").is_err());
    }
}
