//! Layered system configuration: defaults, then a JSON config file, then
//! command-line overrides; cross-validated before any module is built.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::BackboneConfig;
use crate::content_sync::CSConfig;
use crate::error::EmpatheiaError;
use crate::generators::GeneratorConfig;
use crate::rng::derive_seed;
use crate::style_disentangle::{SDConfig, SdInput};
use crate::tokenizer::{SpecialTokenTable, Tokenizer};

/// Model shapes. Generator contract widths are authoritative; the optional
/// `cs_out_*` / `sd_out_*` fields exist so an explicit (stale) width in a
/// config file is caught at startup instead of deep inside a forward pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    /// signal tokens per modality; also the query count of CS and SD
    pub n_signal_tokens: usize,
    /// raw media feature width expected from the store
    pub d_enc: usize,
    pub cs_latent: usize,
    pub cs_blocks: usize,
    pub cs_heads: usize,
    pub vae_sampling: bool,
    pub sd_style: usize,
    pub sd_blocks: usize,
    pub sd_heads: usize,
    /// "per_modality" or "r_s_only"
    pub sd_input: String,
    pub d_text_acoustic: usize,
    pub d_text_prosodic: usize,
    pub d_content_v: usize,
    pub style_s_width: usize,
    pub style_v_width: usize,
    pub mel_bins: usize,
    pub motion_dims: usize,
    pub cs_out_s: Option<usize>,
    pub cs_out_v: Option<usize>,
    pub sd_out_s: Option<usize>,
    pub sd_out_v: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            d_model: 48,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 1024,
            adapter_rank: 16,
            adapter_scale: 32.0,
            n_signal_tokens: 16,
            d_enc: 16,
            cs_latent: 32,
            cs_blocks: 4,
            cs_heads: 4,
            vae_sampling: false,
            sd_style: 32,
            sd_blocks: 4,
            sd_heads: 4,
            sd_input: "per_modality".to_string(),
            d_text_acoustic: 12,
            d_text_prosodic: 12,
            d_content_v: 16,
            style_s_width: 12,
            style_v_width: 12,
            mel_bins: 20,
            motion_dims: 20,
            cs_out_s: None,
            cs_out_v: None,
            sd_out_s: None,
            sd_out_v: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub alpha: f64,
    pub beta: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub coe_steps: usize,
    pub ccl_steps: usize,
    pub sac_steps: usize,
    pub overall_steps: usize,
    /// extra checkpoint every n steps; 0 = stage end only
    pub checkpoint_interval: usize,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            alpha: 0.2,
            beta: 0.3,
            lr: 5e-5,
            weight_decay: 1e-3,
            batch_size: 4,
            coe_steps: 200,
            ccl_steps: 200,
            sac_steps: 200,
            overall_steps: 100,
            checkpoint_interval: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub sync_tau: f64,
    pub ssim_c1: f64,
    pub ssim_c2: f64,
    pub max_new_tokens: usize,
    pub embedding_samples: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            sync_tau: 0.5,
            ssim_c1: 1e-4,
            ssim_c2: 9e-4,
            max_new_tokens: 448,
            embedding_samples: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct SystemConfig {
    pub seed: u64,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

impl SystemConfig {
    /// defaults <- JSON file (optional) <- dotted-path overrides.
    pub fn layered(file: Option<&Path>, overrides: &[(String, Value)]) -> Result<Self, EmpatheiaError> {
        let mut base = serde_json::to_value(SystemConfig::default())
            .expect("default config serializes");
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).map_err(|e| EmpatheiaError::io(path, e))?;
            let patch: Value = serde_json::from_str(&text).map_err(|e| {
                EmpatheiaError::Parse(format!("config file {}: {e}", path.display()))
            })?;
            merge_value(&mut base, patch);
        }
        for (key, value) in overrides {
            set_path(&mut base, key, value.clone())?;
        }
        let cfg: SystemConfig = serde_json::from_value(base)
            .map_err(|e| EmpatheiaError::Parse(format!("effective config: {e}")))?;
        cfg.cross_validate()?;
        Ok(cfg)
    }

    pub fn special_tokens(&self) -> Result<SpecialTokenTable, EmpatheiaError> {
        SpecialTokenTable::new(self.model.n_signal_tokens)
    }

    pub fn tokenizer(&self) -> Result<Tokenizer, EmpatheiaError> {
        Ok(Tokenizer::new(self.special_tokens()?))
    }

    pub fn backbone(&self) -> Result<BackboneConfig, EmpatheiaError> {
        let vocab_size = self.tokenizer()?.vocab_size();
        Ok(BackboneConfig {
            vocab_size,
            d_model: self.model.d_model,
            n_layers: self.model.n_layers,
            n_heads: self.model.n_heads,
            max_seq_len: self.model.max_seq_len,
            adapter_rank: self.model.adapter_rank,
            adapter_scale: self.model.adapter_scale,
            seed: derive_seed(self.seed, "backbone"),
        })
    }

    pub fn generator(&self) -> GeneratorConfig {
        let m = &self.model;
        GeneratorConfig {
            d_enc: m.d_enc,
            d_text_acoustic: m.d_text_acoustic,
            d_text_prosodic: m.d_text_prosodic,
            d_content_v: m.d_content_v,
            style_s_width: m.style_s_width,
            style_v_width: m.style_v_width,
            mel_bins: m.mel_bins,
            motion_dims: m.motion_dims,
            seed: derive_seed(self.seed, "generators"),
        }
    }

    pub fn content_sync(&self) -> CSConfig {
        let m = &self.model;
        let g = self.generator();
        CSConfig {
            d_model: m.d_model,
            d_latent: m.cs_latent,
            n_blocks: m.cs_blocks,
            n_heads: m.cs_heads,
            n_queries: m.n_signal_tokens,
            d_content_s: g.d_content_s(),
            d_content_v: g.d_content_v,
            vae_sampling: m.vae_sampling,
            seed: derive_seed(self.seed, "content_sync"),
        }
    }

    pub fn style_disentangle(&self) -> Result<SDConfig, EmpatheiaError> {
        let m = &self.model;
        let sd_input = match m.sd_input.as_str() {
            "per_modality" => SdInput::PerModality,
            "r_s_only" => SdInput::RSOnly,
            other => {
                return Err(EmpatheiaError::domain(format!(
                    "sd_input must be per_modality or r_s_only, got {other:?}"
                )))
            }
        };
        Ok(SDConfig {
            d_model: m.d_model,
            d_style: m.sd_style,
            n_blocks: m.sd_blocks,
            n_heads: m.sd_heads,
            n_queries: m.n_signal_tokens,
            style_s_width: m.style_s_width,
            style_v_width: m.style_v_width,
            sd_input,
            seed: derive_seed(self.seed, "style_disentangle"),
        })
    }

    /// Fail-fast startup validation: every module config must be
    /// self-consistent, the tokenizer table must carry exactly the configured
    /// signal tokens, and any explicit CS/SD output width must equal the
    /// generator contract width.
    pub fn cross_validate(&self) -> Result<(), EmpatheiaError> {
        let m = &self.model;
        let gen = self.generator();
        gen.validate()?;
        self.backbone()?.validate()?;
        self.content_sync().validate()?;
        self.style_disentangle()?.validate()?;

        let tok = self.tokenizer()?;
        let per_modality = tok.aud_signal_ids().len();
        if per_modality != m.n_signal_tokens || tok.vid_signal_ids().len() != m.n_signal_tokens {
            return Err(EmpatheiaError::dimension(format!(
                "tokenizer table holds {per_modality} signal tokens per modality but config says {}",
                m.n_signal_tokens
            )));
        }

        let pins = [
            ("cs_out_s", m.cs_out_s, gen.d_content_s()),
            ("cs_out_v", m.cs_out_v, gen.d_content_v),
            ("sd_out_s", m.sd_out_s, gen.style_s_width),
            ("sd_out_v", m.sd_out_v, gen.style_v_width),
        ];
        for (name, pinned, contract) in pins {
            if let Some(w) = pinned {
                if w != contract {
                    return Err(EmpatheiaError::dimension(format!(
                        "{name} pins width {w} but the generator contract requires {contract}"
                    )));
                }
            }
        }

        let t = &self.train;
        if !(t.alpha.is_finite() && t.beta.is_finite()) || t.alpha < 0.0 || t.beta < 0.0 {
            return Err(EmpatheiaError::domain(format!(
                "loss weights must be finite and nonnegative, got alpha={} beta={}",
                t.alpha, t.beta
            )));
        }
        if t.lr <= 0.0 || !t.lr.is_finite() {
            return Err(EmpatheiaError::domain(format!("learning rate {} out of range", t.lr)));
        }
        if t.batch_size == 0 {
            return Err(EmpatheiaError::domain("batch size must be at least 1"));
        }
        let e = &self.eval;
        if e.ssim_c1 <= 0.0 || e.ssim_c2 <= 0.0 {
            return Err(EmpatheiaError::domain(format!(
                "stabilizing constants must be positive, got c1={} c2={}",
                e.ssim_c1, e.ssim_c2
            )));
        }
        if !(0.0..=1.0).contains(&e.sync_tau) {
            return Err(EmpatheiaError::domain(format!(
                "sync threshold {} outside [0, 1]",
                e.sync_tau
            )));
        }
        Ok(())
    }
}

/// Deep-merge: objects merge key-by-key, everything else replaces.
pub fn merge_value(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge_value(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set a dotted path like "train.lr" in a JSON tree, creating objects along
/// the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), EmpatheiaError> {
    if path.is_empty() || path.split('.').any(|seg| seg.is_empty()) {
        return Err(EmpatheiaError::domain(format!("bad override path {path:?}")));
    }
    let mut cursor = root;
    let segments: Vec<&str> = path.split('.').collect();
    for seg in &segments[..segments.len() - 1] {
        if !cursor.is_object() {
            return Err(EmpatheiaError::domain(format!(
                "override path {path:?} descends into a non-object at {seg:?}"
            )));
        }
        cursor = cursor
            .as_object_mut()
            .unwrap()
            .entry(seg.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let leaf = segments[segments.len() - 1];
    match cursor.as_object_mut() {
        Some(obj) => {
            obj.insert(leaf.to_string(), value);
            Ok(())
        }
        None => Err(EmpatheiaError::domain(format!(
            "override path {path:?} descends into a non-object at {leaf:?}"
        ))),
    }
}

/// Parse a `key=value` override; the value is read as JSON when possible and
/// as a bare string otherwise.
pub fn parse_override(arg: &str) -> Result<(String, Value), EmpatheiaError> {
    let (key, raw) = arg.split_once('=').ok_or_else(|| {
        EmpatheiaError::domain(format!("override {arg:?} is not of the form key.path=value"))
    })?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_cross_validate() {
        let cfg = SystemConfig::default();
        cfg.cross_validate().unwrap();
        assert_eq!(cfg.train.alpha, 0.2);
        assert_eq!(cfg.train.beta, 0.3);
        assert_eq!(cfg.train.lr, 5e-5);
        assert_eq!(cfg.train.weight_decay, 1e-3);
        assert_eq!(cfg.model.adapter_rank, 16);
        assert_eq!(cfg.model.adapter_scale, 32.0);
        assert_eq!(cfg.model.n_signal_tokens, 16);
        assert_eq!(cfg.model.cs_blocks, 4);
        // query counts follow the signal-token count
        assert_eq!(cfg.content_sync().n_queries, 16);
        assert_eq!(cfg.style_disentangle().unwrap().n_queries, 16);
    }

    #[test]
    fn layering_defaults_file_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(
            &path,
            r#"{"seed": 9, "train": {"lr": 0.01, "batch_size": 2}}"#,
        )
        .unwrap();
        let overrides = vec![
            parse_override("train.lr=0.02").unwrap(),
            parse_override("model.cs_blocks=2").unwrap(),
        ];
        let cfg = SystemConfig::layered(Some(&path), &overrides).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.train.lr, 0.02); // flag beats file
        assert_eq!(cfg.train.batch_size, 2); // file beats default
        assert_eq!(cfg.train.alpha, 0.2); // untouched default
        assert_eq!(cfg.model.cs_blocks, 2);
    }

    #[test]
    fn width_pin_mismatch_fails_fast() {
        let mut cfg = SystemConfig::default();
        cfg.model.cs_out_s = Some(cfg.generator().d_content_s());
        cfg.cross_validate().unwrap();
        cfg.model.cs_out_s = Some(99);
        let err = cfg.cross_validate().unwrap_err().to_string();
        assert!(err.contains("cs_out_s") && err.contains("99"), "{err}");

        let mut cfg = SystemConfig::default();
        cfg.model.sd_out_v = Some(cfg.model.style_v_width + 1);
        assert!(cfg.cross_validate().is_err());
    }

    #[test]
    fn structural_mismatches_fail_fast() {
        let mut cfg = SystemConfig::default();
        cfg.model.d_model = 50; // not divisible by 4 heads
        assert!(cfg.cross_validate().is_err());

        let mut cfg = SystemConfig::default();
        cfg.model.cs_latent = 30;
        assert!(cfg.cross_validate().is_err());

        let mut cfg = SystemConfig::default();
        cfg.model.sd_input = "both".into();
        assert!(cfg.cross_validate().is_err());

        let mut cfg = SystemConfig::default();
        cfg.model.n_signal_tokens = 0;
        assert!(cfg.cross_validate().is_err());

        let mut cfg = SystemConfig::default();
        cfg.eval.sync_tau = 1.5;
        assert!(cfg.cross_validate().is_err());

        let mut cfg = SystemConfig::default();
        cfg.train.alpha = -0.1;
        assert!(cfg.cross_validate().is_err());
    }

    #[test]
    fn unknown_field_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cfg.json");
        std::fs::write(&path, r#"{"train": {"learning_rate": 0.01}}"#).unwrap();
        let err = SystemConfig::layered(Some(&path), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = SystemConfig::layered(Some(Path::new("/nonexistent/cfg.json")), &[]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn serde_round_trip() {
        let mut cfg = SystemConfig::default();
        cfg.seed = 1234;
        cfg.model.vae_sampling = true;
        let text = serde_json::to_string_pretty(&cfg).unwrap();
        let back: SystemConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn override_parsing() {
        let (k, v) = parse_override("model.sd_input=r_s_only").unwrap();
        assert_eq!(k, "model.sd_input");
        assert_eq!(v, Value::String("r_s_only".into()));
        let (_, v) = parse_override("model.vae_sampling=true").unwrap();
        assert_eq!(v, Value::Bool(true));
        assert!(parse_override("no-equals").is_err());
        let mut root = serde_json::json!({});
        set_path(&mut root, "a.b.c", Value::from(3)).unwrap();
        assert_eq!(root["a"]["b"]["c"], 3);
        assert!(set_path(&mut root, "a.b.c.d", Value::from(4)).is_err());
        assert!(set_path(&mut root, "", Value::Null).is_err());
    }
}
