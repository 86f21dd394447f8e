//! Toy speech/video generator stand-ins: fixed seeded encoders for gold
//! content/style targets, the gold-feature cache, and deterministic
//! (content, style) conditioned synthesis.

use std::path::{Path, PathBuf};

use ndarray::{concatenate, Array2, Axis};

use crate::encoders::FeatureStore;
use crate::error::EmpatheiaError;
use crate::features::strided_indices;
use crate::params::ParamStore;
use crate::rng::{normal_matrix, seeded_rng};

/// Rows in every gold/content/style signal block.
pub const N_SIGNAL_SLOTS: usize = 16;

pub const GOLD_KINDS: [&str; 4] = ["content_s", "content_v", "style_s", "style_v"];

/// Widths shared between the generators and the CS/SD output layers; the
/// single source of truth for cross-module shape validation.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratorConfig {
    /// media feature width in the oracle store
    pub d_enc: usize,
    /// acoustic-text embedding width (h_text)
    pub d_text_acoustic: usize,
    /// prosodic-text embedding width (h_bert)
    pub d_text_prosodic: usize,
    /// video generator's audio-content width
    pub d_content_v: usize,
    pub style_s_width: usize,
    pub style_v_width: usize,
    pub mel_bins: usize,
    pub motion_dims: usize,
    pub seed: u64,
}

impl GeneratorConfig {
    /// Speech generator text-content width: h_text and h_bert concatenated.
    pub fn d_content_s(&self) -> usize {
        self.d_text_acoustic + self.d_text_prosodic
    }

    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        let sizes = [
            self.d_enc,
            self.d_text_acoustic,
            self.d_text_prosodic,
            self.d_content_v,
            self.style_s_width,
            self.style_v_width,
            self.mel_bins,
            self.motion_dims,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(EmpatheiaError::domain(
                "generator contract widths must all be positive",
            ));
        }
        Ok(())
    }
}

/// Register the generators' fixed (never trained) parameters.
pub fn init_generators(store: &mut ParamStore, cfg: &GeneratorConfig) -> Result<(), EmpatheiaError> {
    cfg.validate()?;
    let mut put = |name: &str, rows: usize, cols: usize, std: f64| {
        let mut rng = seeded_rng(cfg.seed, name);
        store.insert(name, normal_matrix(&mut rng, rows, cols, std));
    };
    put("speech_gen.text_emb", 256, cfg.d_text_acoustic, 0.5);
    put("speech_gen.bert_emb", 256, cfg.d_text_prosodic, 0.5);
    put("speech_gen.style_enc", cfg.d_enc, cfg.style_s_width, 0.5);
    put("speech_gen.synth_wc", cfg.d_content_s(), cfg.mel_bins, 0.3);
    put("speech_gen.synth_ws", cfg.style_s_width, cfg.mel_bins, 0.3);
    put("speech_gen.synth_b", 1, cfg.mel_bins, 0.3);
    put("video_gen.aud_enc", cfg.d_enc, cfg.d_content_v, 0.5);
    put("video_gen.style_enc", cfg.d_enc, cfg.style_v_width, 0.5);
    put("video_gen.synth_wc", cfg.d_content_v, cfg.motion_dims, 0.3);
    put("video_gen.synth_ws", cfg.style_v_width, cfg.motion_dims, 0.3);
    put("video_gen.synth_b", 1, cfg.motion_dims, 0.3);
    Ok(())
}

/// Strided row selection down (or up, with repeats) to `target` rows.
pub fn pool_rows(x: &Array2<f64>, target: usize) -> Array2<f64> {
    let idx = strided_indices(x.nrows(), target);
    let rows: Vec<_> = idx.iter().map(|&i| x.row(i)).collect();
    ndarray::stack(Axis(0), &rows).expect("equal widths")
}

fn media_or_err(
    store: &FeatureStore,
    conversation_id: &str,
    utt_index: usize,
    kind: &str,
) -> Result<Array2<f64>, EmpatheiaError> {
    store.get(conversation_id, utt_index, kind).map_err(|_| {
        EmpatheiaError::precondition(format!(
            "utterance {conversation_id}/{utt_index} has no stored {kind} features"
        ))
    })
}

/// Gold content targets for one utterance: text-derived speech content and
/// speech-derived video content, both pooled to 16 rows.
pub fn extract_gold_content(
    params: &ParamStore,
    cfg: &GeneratorConfig,
    store: &FeatureStore,
    conversation_id: &str,
    utt_index: usize,
    text: &str,
) -> Result<(Array2<f64>, Array2<f64>), EmpatheiaError> {
    if text.is_empty() {
        return Err(EmpatheiaError::precondition(format!(
            "utterance {conversation_id}/{utt_index} has no text for content extraction"
        )));
    }
    let bytes: Vec<usize> = text.bytes().map(|b| b as usize).collect();
    let embed = |table: &Array2<f64>| -> Array2<f64> {
        let rows: Vec<_> = bytes.iter().map(|&b| table.row(b)).collect();
        ndarray::stack(Axis(0), &rows).expect("equal widths")
    };
    let h_text = embed(params.get("speech_gen.text_emb"));
    let h_bert = embed(params.get("speech_gen.bert_emb"));
    let joint = concatenate(Axis(1), &[h_text.view(), h_bert.view()]).expect("same row count");
    let c_hat_s = pool_rows(&joint, N_SIGNAL_SLOTS);

    let speech = media_or_err(store, conversation_id, utt_index, "speech")?;
    check_enc_width(cfg, &speech, conversation_id, utt_index, "speech")?;
    let c_hat_v = pool_rows(&speech.dot(params.get("video_gen.aud_enc")), N_SIGNAL_SLOTS);
    Ok((c_hat_s, c_hat_v))
}

fn check_enc_width(
    cfg: &GeneratorConfig,
    data: &Array2<f64>,
    conversation_id: &str,
    utt_index: usize,
    kind: &str,
) -> Result<(), EmpatheiaError> {
    if data.ncols() != cfg.d_enc {
        return Err(EmpatheiaError::dimension(format!(
            "stored {kind} features for {conversation_id}/{utt_index} are {} wide, contract needs {}",
            data.ncols(),
            cfg.d_enc
        )));
    }
    Ok(())
}

/// Gold style targets for one utterance, from its stored speech and video.
pub fn extract_gold_style(
    params: &ParamStore,
    cfg: &GeneratorConfig,
    store: &FeatureStore,
    conversation_id: &str,
    utt_index: usize,
) -> Result<(Array2<f64>, Array2<f64>), EmpatheiaError> {
    let speech = media_or_err(store, conversation_id, utt_index, "speech")?;
    check_enc_width(cfg, &speech, conversation_id, utt_index, "speech")?;
    let video = media_or_err(store, conversation_id, utt_index, "video")?;
    check_enc_width(cfg, &video, conversation_id, utt_index, "video")?;
    let s_hat_s = pool_rows(&speech.dot(params.get("speech_gen.style_enc")), N_SIGNAL_SLOTS);
    let s_hat_v = pool_rows(&video.dot(params.get("video_gen.style_enc")), N_SIGNAL_SLOTS);
    Ok((s_hat_s, s_hat_v))
}

/// The four gold-target stores under `<media store root>/gold/<kind>`.
pub struct GoldCache {
    stores: Vec<(String, FeatureStore)>,
}

impl GoldCache {
    pub fn open_or_create(media_root: &Path) -> Result<Self, EmpatheiaError> {
        let mut stores = Vec::new();
        for kind in GOLD_KINDS {
            let root: PathBuf = media_root.join("gold").join(kind);
            stores.push((kind.to_string(), FeatureStore::open_or_create(&root)?));
        }
        Ok(Self { stores })
    }

    fn store(&self, kind: &str) -> &FeatureStore {
        &self.stores.iter().find(|(k, _)| k == kind).expect("known gold kind").1
    }

    fn store_mut(&mut self, kind: &str) -> &mut FeatureStore {
        &mut self
            .stores
            .iter_mut()
            .find(|(k, _)| k == kind)
            .expect("known gold kind")
            .1
    }

    pub fn put(
        &mut self,
        kind: &str,
        conversation_id: &str,
        utt_index: usize,
        data: &Array2<f64>,
    ) -> Result<(), EmpatheiaError> {
        self.store_mut(kind).put(conversation_id, utt_index, kind, data)
    }

    pub fn get(
        &self,
        kind: &str,
        conversation_id: &str,
        utt_index: usize,
    ) -> Result<Array2<f64>, EmpatheiaError> {
        self.store(kind).get(conversation_id, utt_index, kind)
    }

    pub fn contains(&self, kind: &str, conversation_id: &str, utt_index: usize) -> bool {
        self.store(kind)
            .contains(&FeatureStore::key(conversation_id, utt_index, kind))
    }

    pub fn len(&self) -> usize {
        self.stores.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Toy speech synthesis: per-slot linear mix of content and style rows,
/// squashed, upsampled two frames per slot.
pub fn synth_speech(
    params: &ParamStore,
    cfg: &GeneratorConfig,
    c_s: &Array2<f64>,
    s_s: &Array2<f64>,
) -> Result<Array2<f64>, EmpatheiaError> {
    synth(
        params,
        c_s,
        s_s,
        cfg.d_content_s(),
        cfg.style_s_width,
        "speech_gen",
    )
}

/// Toy talking-head synthesis: motion rows conditioned on (content, style).
pub fn synth_video(
    params: &ParamStore,
    cfg: &GeneratorConfig,
    c_v: &Array2<f64>,
    s_v: &Array2<f64>,
) -> Result<Array2<f64>, EmpatheiaError> {
    synth(
        params,
        c_v,
        s_v,
        cfg.d_content_v,
        cfg.style_v_width,
        "video_gen",
    )
}

fn synth(
    params: &ParamStore,
    content: &Array2<f64>,
    style: &Array2<f64>,
    content_width: usize,
    style_width: usize,
    ns: &str,
) -> Result<Array2<f64>, EmpatheiaError> {
    if content.ncols() != content_width {
        return Err(EmpatheiaError::dimension(format!(
            "{ns}: content width {} does not match contract width {content_width}",
            content.ncols()
        )));
    }
    if style.ncols() != style_width {
        return Err(EmpatheiaError::dimension(format!(
            "{ns}: style width {} does not match contract width {style_width}",
            style.ncols()
        )));
    }
    if content.nrows() != style.nrows() {
        return Err(EmpatheiaError::dimension(format!(
            "{ns}: content has {} rows but style has {}",
            content.nrows(),
            style.nrows()
        )));
    }
    let wc = params.get(&format!("{ns}.synth_wc"));
    let ws = params.get(&format!("{ns}.synth_ws"));
    let b = params.get(&format!("{ns}.synth_b"));
    let mut base = content.dot(wc) + style.dot(ws);
    for mut row in base.rows_mut() {
        row += &b.row(0);
    }
    base.mapv_inplace(f64::tanh);
    // two output frames per conditioning slot
    let mut out = Array2::zeros((base.nrows() * 2, base.ncols()));
    for (i, row) in base.rows().into_iter().enumerate() {
        out.row_mut(2 * i).assign(&row);
        out.row_mut(2 * i + 1).assign(&row);
    }
    Ok(out)
}
