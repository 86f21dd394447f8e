//! Oracle feature store plus toy speech/video encoders and their projections
//! into the language model's embedding space.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::error::EmpatheiaError;
use crate::features::{strided_indices, FeatureSeq, Modality};
use crate::params::{ParamStore, TapeCtx};
use crate::rng::{normal_matrix, seeded_rng};

/// Long media is strided down to at most this many frames.
pub const MAX_MEDIA_FRAMES: usize = 64;
/// Nominal rates; metadata only.
pub const SPEECH_FRAME_RATE: f64 = 50.0;
pub const VIDEO_FRAME_RATE: f64 = 25.0;

const MANIFEST_NAME: &str = "manifest.json";
const DTYPE: &str = "f32le";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct EntryMeta {
    frames: u64,
    width: u64,
    dtype: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    entries: BTreeMap<String, EntryMeta>,
}

/// Directory of per-utterance feature files: `<root>/<conv_id>/<utt>.<kind>.bin`
/// raw little-endian f32 rows, shapes tracked in a JSON manifest.
#[derive(Debug)]
pub struct FeatureStore {
    root: PathBuf,
    manifest: Manifest,
}

impl FeatureStore {
    pub fn create(root: &Path) -> Result<Self, EmpatheiaError> {
        fs::create_dir_all(root).map_err(|e| EmpatheiaError::io(root, e))?;
        let store = Self {
            root: root.to_path_buf(),
            manifest: Manifest {
                version: 1,
                entries: BTreeMap::new(),
            },
        };
        store.write_manifest()?;
        Ok(store)
    }

    pub fn open(root: &Path) -> Result<Self, EmpatheiaError> {
        let path = root.join(MANIFEST_NAME);
        let text = fs::read_to_string(&path).map_err(|e| EmpatheiaError::io(&path, e))?;
        let manifest: Manifest = serde_json::from_str(&text)
            .map_err(|e| EmpatheiaError::Parse(format!("{}: {e}", path.display())))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Open if a manifest exists, otherwise create an empty store.
    pub fn open_or_create(root: &Path) -> Result<Self, EmpatheiaError> {
        if root.join(MANIFEST_NAME).is_file() {
            Self::open(root)
        } else {
            Self::create(root)
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn key(conversation_id: &str, utt_index: usize, kind: &str) -> String {
        format!("{conversation_id}/{utt_index}.{kind}")
    }

    pub fn contains(&self, key: &str) -> bool {
        self.manifest.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.manifest.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.manifest.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.entries.is_empty()
    }

    fn bin_path(&self, key: &str) -> PathBuf {
        self.root.join(format!("{key}.bin"))
    }

    fn write_manifest(&self) -> Result<(), EmpatheiaError> {
        let path = self.root.join(MANIFEST_NAME);
        let tmp = self.root.join(format!("{MANIFEST_NAME}.tmp"));
        let text = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes");
        fs::write(&tmp, text).map_err(|e| EmpatheiaError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| EmpatheiaError::io(&path, e))?;
        Ok(())
    }

    /// Store one feature matrix. Entries are immutable: rewriting identical
    /// bytes is a no-op, rewriting different content is an error.
    pub fn put(
        &mut self,
        conversation_id: &str,
        utt_index: usize,
        kind: &str,
        data: &Array2<f64>,
    ) -> Result<(), EmpatheiaError> {
        for part in [conversation_id, kind] {
            if part.is_empty() || part.contains(['/', '\\']) || part.contains("..") {
                return Err(EmpatheiaError::domain(format!(
                    "store key component {part:?} is not a plain name"
                )));
            }
        }
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(EmpatheiaError::domain(format!(
                "refusing to store empty features under {conversation_id}/{utt_index}.{kind}"
            )));
        }
        let key = Self::key(conversation_id, utt_index, kind);
        let mut bytes = Vec::with_capacity(data.len() * 4);
        for &v in data.iter() {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
        let path = self.bin_path(&key);
        if self.contains(&key) {
            let existing = fs::read(&path).map_err(|e| EmpatheiaError::io(&path, e))?;
            if existing == bytes {
                return Ok(());
            }
            return Err(EmpatheiaError::precondition(format!(
                "store entry {key} already exists with different content"
            )));
        }
        let dir = path.parent().expect("key has a parent dir");
        fs::create_dir_all(dir).map_err(|e| EmpatheiaError::io(dir, e))?;
        let tmp = path.with_extension("bin.tmp");
        fs::write(&tmp, &bytes).map_err(|e| EmpatheiaError::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| EmpatheiaError::io(&path, e))?;
        self.manifest.entries.insert(
            key,
            EntryMeta {
                frames: data.nrows() as u64,
                width: data.ncols() as u64,
                dtype: DTYPE.to_string(),
            },
        );
        self.write_manifest()
    }

    pub fn get(
        &self,
        conversation_id: &str,
        utt_index: usize,
        kind: &str,
    ) -> Result<Array2<f64>, EmpatheiaError> {
        self.get_key(&Self::key(conversation_id, utt_index, kind))
    }

    pub fn get_key(&self, key: &str) -> Result<Array2<f64>, EmpatheiaError> {
        let meta = self.manifest.entries.get(key).ok_or_else(|| {
            EmpatheiaError::precondition(format!(
                "no stored features for {key} under {}",
                self.root.display()
            ))
        })?;
        if meta.dtype != DTYPE {
            return Err(EmpatheiaError::Parse(format!(
                "{key}: unsupported dtype {:?}",
                meta.dtype
            )));
        }
        let path = self.bin_path(key);
        let bytes = fs::read(&path).map_err(|e| EmpatheiaError::io(&path, e))?;
        let frames = meta.frames as usize;
        let width = meta.width as usize;
        if bytes.len() != frames * width * 4 {
            return Err(EmpatheiaError::Parse(format!(
                "{key}: expected {} bytes for {frames}x{width} f32, found {}",
                frames * width * 4,
                bytes.len()
            )));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        Array2::from_shape_vec((frames, width), values)
            .map_err(|e| EmpatheiaError::Parse(format!("{key}: {e}")))
    }
}

/// Encoded media ready for projection into the language model.
#[derive(Debug, Clone)]
pub struct MediaFeatures {
    pub modality: Modality,
    pub features: FeatureSeq,
    pub source_ref: String,
    pub frame_rate: f64,
}

/// Resolves media refs either against the oracle store (`store://conv/utt`)
/// or through the deterministic toy clip encoder (`sine://freq:frames`).
pub struct MediaEncoder<'a> {
    pub store: Option<&'a FeatureStore>,
    pub d_enc: usize,
}

impl<'a> MediaEncoder<'a> {
    pub fn new(store: Option<&'a FeatureStore>, d_enc: usize) -> Self {
        Self { store, d_enc }
    }

    pub fn encode(&self, source_ref: &str, modality: Modality) -> Result<MediaFeatures, EmpatheiaError> {
        if modality == Modality::Text {
            return Err(EmpatheiaError::domain(
                "media encoder handles speech and video refs only",
            ));
        }
        let raw = if let Some(rest) = source_ref.strip_prefix("store://") {
            let store = self.store.ok_or_else(|| {
                EmpatheiaError::precondition(format!(
                    "ref {source_ref} needs a feature store but none is configured"
                ))
            })?;
            let (conv, utt) = rest.split_once('/').ok_or_else(|| {
                EmpatheiaError::Parse(format!(
                    "ref {source_ref}: expected store://<conversation_id>/<utt_index>"
                ))
            })?;
            let utt: usize = utt.parse().map_err(|_| {
                EmpatheiaError::Parse(format!("ref {source_ref}: utterance index not an integer"))
            })?;
            store.get(conv, utt, modality.as_str())?
        } else if let Some(rest) = source_ref.strip_prefix("sine://") {
            let (freq, frames) = rest.split_once(':').ok_or_else(|| {
                EmpatheiaError::Parse(format!("ref {source_ref}: expected sine://<freq>:<frames>"))
            })?;
            let freq: f64 = freq.parse().map_err(|_| {
                EmpatheiaError::Parse(format!("ref {source_ref}: frequency not a number"))
            })?;
            let frames: usize = frames.parse().map_err(|_| {
                EmpatheiaError::Parse(format!("ref {source_ref}: frame count not an integer"))
            })?;
            self.sine_clip(freq, frames, modality)?
        } else {
            return Err(EmpatheiaError::precondition(format!(
                "unknown media ref scheme in {source_ref:?} (expected store:// or sine://)"
            )));
        };

        let nominal = match modality {
            Modality::Speech => SPEECH_FRAME_RATE,
            _ => VIDEO_FRAME_RATE,
        };
        let orig = raw.nrows();
        let (data, frame_rate) = if orig > MAX_MEDIA_FRAMES {
            let idx = strided_indices(orig, MAX_MEDIA_FRAMES);
            let rows: Vec<_> = idx.iter().map(|&i| raw.row(i)).collect();
            let down = ndarray::stack(ndarray::Axis(0), &rows).expect("same widths");
            (down, nominal * MAX_MEDIA_FRAMES as f64 / orig as f64)
        } else {
            (raw, nominal)
        };
        Ok(MediaFeatures {
            modality,
            features: FeatureSeq::new(modality, data)?,
            source_ref: source_ref.to_string(),
            frame_rate,
        })
    }

    /// Toy stand-in for a real encoder: a fixed smooth function of
    /// (frequency, frame, channel, modality).
    fn sine_clip(&self, freq: f64, frames: usize, modality: Modality) -> Result<Array2<f64>, EmpatheiaError> {
        if frames == 0 {
            return Err(EmpatheiaError::domain("sine clip with zero frames"));
        }
        let data = Array2::from_shape_fn((frames, self.d_enc), |(t, j)| {
            let phase = freq * (t + 1) as f64;
            match modality {
                Modality::Speech => (phase * 0.731 + (j + 1) as f64 * 0.389).sin(),
                _ => (phase * 0.577 + (j + 1) as f64 * 0.253).cos(),
            }
        });
        Ok(data)
    }
}

fn proj_names(modality: Modality) -> (String, String) {
    (
        format!("mm_proj.{}.w", modality.as_str()),
        format!("mm_proj.{}.b", modality.as_str()),
    )
}

/// Register the per-modality linear projections encoder-width -> d_model.
pub fn init_media_projections(store: &mut ParamStore, d_enc: usize, d_model: usize, seed: u64) {
    for m in [Modality::Speech, Modality::Video] {
        let (w, b) = proj_names(m);
        let mut rng = seeded_rng(seed, &w);
        store.insert(&w, normal_matrix(&mut rng, d_enc, d_model, 0.02));
        store.insert(&b, Array2::zeros((1, d_model)));
    }
}

/// Per-frame linear map into the language model's embedding space.
pub fn project_to_llm(
    ctx: &mut TapeCtx,
    modality: Modality,
    features: NodeId,
) -> Result<NodeId, EmpatheiaError> {
    let (w_name, b_name) = proj_names(modality);
    let w = ctx.param(&w_name);
    let in_width = ctx.g.value(features).ncols();
    let w_rows = ctx.g.value(w).nrows();
    if in_width != w_rows {
        return Err(EmpatheiaError::dimension(format!(
            "{} features have width {in_width} but the projection expects {w_rows}",
            modality.as_str()
        )));
    }
    let b = ctx.param(&b_name);
    let xw = ctx.g.matmul(features, w);
    Ok(ctx.g.add_row(xw, b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TapeCtx;
    use ndarray::array;

    fn tmp_store() -> (tempfile::TempDir, FeatureStore) {
        let dir = tempfile::tempdir().unwrap();
        let store = FeatureStore::create(dir.path()).unwrap();
        (dir, store)
    }

    #[test]
    fn store_round_trips_f32_exactly() {
        let (dir, mut store) = tmp_store();
        let data = array![[1.0f64, 2.5, -3.25], [0.125, 0.001953125, 7.0]];
        store.put("conv-a", 1, "speech", &data).unwrap();
        let back = store.get("conv-a", 1, "speech").unwrap();
        assert_eq!(back, data); // exactly representable in f32
        // reopening reads the same bytes
        let reopened = FeatureStore::open(dir.path()).unwrap();
        assert_eq!(reopened.get("conv-a", 1, "speech").unwrap(), back);
    }

    #[test]
    fn unknown_key_is_a_lookup_error() {
        let (_dir, store) = tmp_store();
        let err = store.get("nope", 3, "video").unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(err.to_string().contains("nope/3.video"));
    }

    #[test]
    fn entries_are_immutable_but_idempotent() {
        let (_dir, mut store) = tmp_store();
        let data = array![[1.0f64, 2.0]];
        store.put("c", 1, "speech", &data).unwrap();
        store.put("c", 1, "speech", &data).unwrap();
        let other = array![[9.0f64, 2.0]];
        assert!(store.put("c", 1, "speech", &other).is_err());
    }

    #[test]
    fn store_backed_refs_are_bit_exact() {
        let (_dir, mut store) = tmp_store();
        let data = Array2::from_shape_fn((20, 6), |(i, j)| (i * 7 + j) as f64 * 0.5);
        store.put("c1", 2, "speech", &data).unwrap();
        let enc = MediaEncoder::new(Some(&store), 6);
        let a = enc.encode("store://c1/2", Modality::Speech).unwrap();
        let b = enc.encode("store://c1/2", Modality::Speech).unwrap();
        assert_eq!(a.features, b.features);
        assert_eq!(a.features.data, data);
        assert_eq!(a.features.len(), 20);
    }

    #[test]
    fn sine_clips_are_deterministic_and_modality_specific() {
        let enc = MediaEncoder::new(None, 8);
        let a = enc.encode("sine://2.5:12", Modality::Speech).unwrap();
        let b = enc.encode("sine://2.5:12", Modality::Speech).unwrap();
        assert_eq!(a.features, b.features);
        let v = enc.encode("sine://2.5:12", Modality::Video).unwrap();
        assert_ne!(a.features.data, v.features.data);
        assert!(enc.encode("sine://2.5:0", Modality::Speech).is_err());
    }

    #[test]
    fn long_media_is_strided_to_cap() {
        let enc = MediaEncoder::new(None, 4);
        let m = enc.encode("sine://1.0:200", Modality::Video).unwrap();
        assert_eq!(m.features.len(), MAX_MEDIA_FRAMES);
        let full = enc.sine_clip(1.0, 200, Modality::Video).unwrap();
        let idx = strided_indices(200, MAX_MEDIA_FRAMES);
        for (k, &i) in idx.iter().enumerate() {
            assert_eq!(m.features.data.row(k), full.row(i));
        }
        assert!(m.frame_rate < VIDEO_FRAME_RATE);
    }

    #[test]
    fn unknown_scheme_rejected() {
        let enc = MediaEncoder::new(None, 4);
        let err = enc.encode("file:///tmp/x.wav", Modality::Speech).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn projection_maps_width_and_checks_mismatch() {
        let mut params = ParamStore::new();
        init_media_projections(&mut params, 3, 5, 7);
        let mut ctx = TapeCtx::frozen(&params);
        let x = ctx.g.constant(array![[1.0, 2.0, 3.0], [0.0, 0.0, 0.0]]);
        let y = project_to_llm(&mut ctx, Modality::Speech, x).unwrap();
        assert_eq!(ctx.g.value(y).dim(), (2, 5));
        // zero input row -> bias row (zero-initialized here)
        assert!(ctx.g.value(y).row(1).iter().all(|&v| v == 0.0));

        let bad = ctx.g.constant(Array2::zeros((2, 4)));
        assert!(project_to_llm(&mut ctx, Modality::Speech, bad).is_err());
    }

    #[test]
    fn projection_is_linear_with_zero_bias() {
        let mut params = ParamStore::new();
        init_media_projections(&mut params, 4, 3, 11);
        let mut ctx = TapeCtx::frozen(&params);
        let x = Array2::from_shape_fn((2, 4), |(i, j)| (i + j) as f64 * 0.3);
        let y = Array2::from_shape_fn((2, 4), |(i, j)| (i * j) as f64 - 0.7);
        let combo = &x * 2.0 + &y * (-0.5);
        let nx = ctx.g.constant(x);
        let ny = ctx.g.constant(y);
        let ncombo = ctx.g.constant(combo);
        let px = project_to_llm(&mut ctx, Modality::Video, nx).unwrap();
        let py = project_to_llm(&mut ctx, Modality::Video, ny).unwrap();
        let pc = project_to_llm(&mut ctx, Modality::Video, ncombo).unwrap();
        let expect = ctx.g.value(px) * 2.0 + ctx.g.value(py) * (-0.5);
        let got = ctx.g.value(pc);
        for (a, b) in expect.iter().zip(got.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_gradients_match_finite_differences() {
        let mut params = ParamStore::new();
        init_media_projections(&mut params, 6, 6, 3);
        let x_val = Array2::from_shape_fn((3, 6), |(i, j)| ((i + 1) * (j + 2)) as f64 * 0.05);

        let loss_at = |params: &ParamStore| -> f64 {
            let mut ctx = TapeCtx::frozen(params);
            let x = ctx.g.constant(x_val.clone());
            let y = project_to_llm(&mut ctx, Modality::Speech, x).unwrap();
            let sq = ctx.g.mul(y, y);
            let s = ctx.g.sum_all(sq);
            ctx.g.scalar(s)
        };

        let mut ctx = TapeCtx::new(&params, |_| true);
        let x = ctx.g.constant(x_val.clone());
        let y = project_to_llm(&mut ctx, Modality::Speech, x).unwrap();
        let sq = ctx.g.mul(y, y);
        let s = ctx.g.sum_all(sq);
        let grads = ctx.backward_params(s);

        let eps = 1e-5;
        for name in ["mm_proj.speech.w", "mm_proj.speech.b"] {
            let g = grads.get(name).unwrap().clone();
            let shape = params.get(name).dim();
            for i in 0..shape.0 {
                for j in 0..shape.1 {
                    let mut p = params.clone();
                    p.get_mut(name)[(i, j)] += eps;
                    let hi = loss_at(&p);
                    p.get_mut(name)[(i, j)] -= 2.0 * eps;
                    let lo = loss_at(&p);
                    let fd = (hi - lo) / (2.0 * eps);
                    let an = g[(i, j)];
                    assert!(
                        (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                        "{name}[{i},{j}]: fd={fd} an={an}"
                    );
                }
            }
        }
    }
}
