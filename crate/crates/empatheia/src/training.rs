//! Four-stage training driver: per-stage freezing, loss composition and
//! logging, checkpoints, and freeze audits.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::NodeId;
use crate::backbone::{
    extract_signals, forward, init_backbone, is_adapter_param, lm_nll, BackboneConfig,
};
use crate::config::SystemConfig;
use crate::content_sync::{cs_decode, cs_encode, l_ccl, init_content_sync, CSConfig};
use crate::data::{dialogue_coarse_emotion, Dialogue};
use crate::emotions::coarse_index;
use crate::encoders::{init_media_projections, project_to_llm, FeatureStore};
use crate::error::EmpatheiaError;
use crate::features::Modality;
use crate::generators::{init_generators, pool_rows, GoldCache, GOLD_KINDS};
use crate::manifest::RunManifest;
use crate::optim::AdamW;
use crate::params::{ParamStore, TapeCtx};
use crate::prompt::{build_prompt, tokenize_sample, PromptKind, TokenizedSample};
use crate::rng::{derive_seed, normal_matrix, seeded_rng};
use crate::style_disentangle::{
    fuse_crossmodal, fuse_style, init_style_disentangle, init_style_heads, l_cls, l_sal, l_sac,
    sd_extract, ClsTargets, SDConfig,
};
use crate::tokenizer::Tokenizer;

/// Parameter groups whose checksums are audited around every stage.
pub const FREEZE_GROUPS: [&str; 8] = [
    "backbone.adapter",
    "backbone.base",
    "content_sync",
    "heads",
    "mm_proj",
    "speech_gen",
    "style_disentangle",
    "video_gen",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Coe,
    Ccl,
    Sac,
    Overall,
}

pub const ALL_STAGES: [Stage; 4] = [Stage::Coe, Stage::Ccl, Stage::Sac, Stage::Overall];

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Coe => "coe",
            Stage::Ccl => "ccl",
            Stage::Sac => "sac",
            Stage::Overall => "overall",
        }
    }

    /// 1-based position; stage artifacts live in `stage-<index>`.
    pub fn index(self) -> usize {
        match self {
            Stage::Coe => 1,
            Stage::Ccl => 2,
            Stage::Sac => 3,
            Stage::Overall => 4,
        }
    }

    pub fn parse(s: &str) -> Option<Stage> {
        ALL_STAGES.into_iter().find(|st| st.name() == s)
    }

    /// Stage-specific trainable-parameter predicate; everything else frozen.
    pub fn trains(self, name: &str) -> bool {
        match self {
            Stage::Coe => is_adapter_param(name),
            Stage::Ccl => name.starts_with("content_sync."),
            Stage::Sac => name.starts_with("style_disentangle.") || name.starts_with("heads."),
            Stage::Overall => {
                is_adapter_param(name)
                    || name.starts_with("content_sync.")
                    || name.starts_with("style_disentangle.")
                    || name.starts_with("heads.")
            }
        }
    }

    pub fn steps(self, cfg: &SystemConfig) -> usize {
        match self {
            Stage::Coe => cfg.train.coe_steps,
            Stage::Ccl => cfg.train.ccl_steps,
            Stage::Sac => cfg.train.sac_steps,
            Stage::Overall => cfg.train.overall_steps,
        }
    }

    /// Only the text-reasoning stage can use dialogues without stored media.
    pub fn needs_media(self) -> bool {
        !matches!(self, Stage::Coe)
    }
}

pub fn group_is_trainable(stage: Stage, group: &str) -> bool {
    // every predicate is prefix-based, so a probe name suffices
    stage.trains(&format!("{group}.probe"))
}

/// Register every module's parameters under one store.
pub fn build_model(cfg: &SystemConfig) -> Result<ParamStore, EmpatheiaError> {
    cfg.cross_validate()?;
    let mut store = ParamStore::new();
    init_backbone(&mut store, &cfg.backbone()?)?;
    init_media_projections(
        &mut store,
        cfg.model.d_enc,
        cfg.model.d_model,
        derive_seed(cfg.seed, "mm_proj"),
    );
    init_content_sync(&mut store, &cfg.content_sync())?;
    init_style_disentangle(&mut store, &cfg.style_disentangle()?)?;
    init_style_heads(&mut store, cfg.model.sd_style, derive_seed(cfg.seed, "heads"));
    init_generators(&mut store, &cfg.generator())?;
    Ok(store)
}

/// One logged step. Composed columns are recomputed from the logged terms so
/// the identities hold exactly in the emitted file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub l_emp: f64,
    pub l_ccl: f64,
    pub l_sal: f64,
    pub l_cls: f64,
    pub l_sac: f64,
    pub l_oal: f64,
}

pub const LOSS_CSV_HEADER: &str = "step,l_emp,l_ccl,l_sal,l_cls,l_sac,l_oal";

impl LossRow {
    pub fn compose(
        step: usize,
        l_emp: f64,
        l_ccl: f64,
        l_sal: f64,
        l_cls: f64,
        alpha: f64,
        beta: f64,
    ) -> Result<LossRow, EmpatheiaError> {
        let l_sac = l_sal + l_cls;
        let l_oal = compose_overall_loss(l_emp, l_ccl, l_sac, alpha, beta)?;
        Ok(LossRow { step, l_emp, l_ccl, l_sal, l_cls, l_sac, l_oal })
    }

    pub fn to_csv(&self) -> String {
        format!(
            "{},{:e},{:e},{:e},{:e},{:e},{:e}",
            self.step, self.l_emp, self.l_ccl, self.l_sal, self.l_cls, self.l_sac, self.l_oal
        )
    }

    pub fn from_csv(line: &str) -> Result<LossRow, EmpatheiaError> {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(EmpatheiaError::Parse(format!(
                "loss row has {} columns, expected 7: {line:?}",
                parts.len()
            )));
        }
        let num = |s: &str| -> Result<f64, EmpatheiaError> {
            s.parse().map_err(|_| EmpatheiaError::Parse(format!("bad loss value {s:?}")))
        };
        Ok(LossRow {
            step: parts[0]
                .parse()
                .map_err(|_| EmpatheiaError::Parse(format!("bad step {:?}", parts[0])))?,
            l_emp: num(parts[1])?,
            l_ccl: num(parts[2])?,
            l_sal: num(parts[3])?,
            l_cls: num(parts[4])?,
            l_sac: num(parts[5])?,
            l_oal: num(parts[6])?,
        })
    }
}

/// Weighted total loss. Components are norms or NLL values, so negatives
/// indicate a bug upstream.
pub fn compose_overall_loss(
    l_emp: f64,
    l_ccl: f64,
    l_sac: f64,
    alpha: f64,
    beta: f64,
) -> Result<f64, EmpatheiaError> {
    for (name, v) in [("l_emp", l_emp), ("l_ccl", l_ccl), ("l_sac", l_sac)] {
        if !v.is_finite() {
            return Err(EmpatheiaError::Numerical(format!("{name} is {v}")));
        }
        if v < 0.0 {
            return Err(EmpatheiaError::domain(format!("{name} is negative: {v}")));
        }
    }
    Ok(l_emp + alpha * l_ccl + beta * l_sac)
}

pub fn write_losses_csv(path: &Path, rows: &[LossRow]) -> Result<(), EmpatheiaError> {
    let mut text = String::from(LOSS_CSV_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    std::fs::write(path, text).map_err(|e| EmpatheiaError::io(path, e))
}

pub fn read_losses_csv(path: &Path) -> Result<Vec<LossRow>, EmpatheiaError> {
    let text = std::fs::read_to_string(path).map_err(|e| EmpatheiaError::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == LOSS_CSV_HEADER => {}
        other => {
            return Err(EmpatheiaError::Parse(format!(
                "unexpected losses header {other:?}"
            )))
        }
    }
    lines.map(LossRow::from_csv).collect()
}

/// Per-group checksums around one stage.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeAudit {
    pub stage: String,
    pub groups: BTreeMap<String, FreezeEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FreezeEntry {
    pub trainable: bool,
    pub before: String,
    pub after: String,
    pub changed: bool,
}

fn group_checksums(params: &ParamStore) -> BTreeMap<String, String> {
    FREEZE_GROUPS
        .iter()
        .map(|g| (g.to_string(), params.group_checksum(g)))
        .collect()
}

/// One prepared training sample: a turn of a dialogue.
struct Prepared {
    conversation_id: String,
    /// coe-kind prompt, always present
    coe: TokenizedSample,
    /// overall-kind prompt plus per-placeholder raw media, media stages only
    full: Option<PreparedFull>,
}

struct PreparedFull {
    sample: TokenizedSample,
    /// (token position, modality, raw d_enc features)
    media: Vec<(usize, Modality, Array2<f64>)>,
    gold: GoldTargets,
    targets: ClsTargets,
}

pub struct GoldTargets {
    pub c_s: Array2<f64>,
    pub c_v: Array2<f64>,
    pub s_s: Array2<f64>,
    pub s_v: Array2<f64>,
}

#[derive(Debug)]
pub struct StageRun {
    pub stage: Stage,
    pub rows: Vec<LossRow>,
    pub used_samples: usize,
    pub skipped: usize,
    pub stage_dir: PathBuf,
    pub checkpoint: PathBuf,
}

pub fn media_ready(store: &FeatureStore, d: &Dialogue, turn_idx: usize) -> bool {
    let turn = &d.turns[turn_idx];
    let slot_ok = |idx: usize| {
        ["speech", "video"]
            .iter()
            .all(|k| store.contains(&FeatureStore::key(&d.conversation_id, idx, k)))
    };
    turn.dialogue_history.iter().all(|u| slot_ok(u.index)) && slot_ok(turn.response_index())
}

pub fn gold_targets(
    gold: &GoldCache,
    conversation_id: &str,
    utt_index: usize,
    n_queries: usize,
) -> Result<GoldTargets, EmpatheiaError> {
    for kind in GOLD_KINDS {
        if !gold.contains(kind, conversation_id, utt_index) {
            return Err(EmpatheiaError::precondition(format!(
                "gold cache lacks {kind} for {conversation_id}/{utt_index}; run build-gold first"
            )));
        }
    }
    let fetch = |kind: &str| -> Result<Array2<f64>, EmpatheiaError> {
        let a = gold.get(kind, conversation_id, utt_index)?;
        Ok(if a.nrows() == n_queries { a } else { pool_rows(&a, n_queries) })
    };
    Ok(GoldTargets {
        c_s: fetch("content_s")?,
        c_v: fetch("content_v")?,
        s_s: fetch("style_s")?,
        s_v: fetch("style_v")?,
    })
}

pub fn cls_targets(d: &Dialogue) -> Option<ClsTargets> {
    let emotion = coarse_index(dialogue_coarse_emotion(d)?).ok()?;
    Some(ClsTargets {
        emotion,
        gender: d.listener_profile.gender.index(),
        age: d.listener_profile.age.index(),
        tone: d.listener_profile.tone.index(),
    })
}

/// Tokenize and gather inputs for every usable turn. Turns without the
/// required media, gold entries impossible to label, or chain annotations
/// are counted, not fatal; an inconsistent gold cache is fatal.
fn prepare_samples(
    cfg: &SystemConfig,
    stage: Stage,
    corpus: &[Dialogue],
    store: &FeatureStore,
    gold: Option<&GoldCache>,
    tok: &Tokenizer,
) -> Result<(Vec<Prepared>, usize), EmpatheiaError> {
    let mut out = Vec::new();
    let mut skipped = 0usize;
    for d in corpus {
        for (turn_idx, turn) in d.turns.iter().enumerate() {
            let built = match build_prompt(d, turn_idx, PromptKind::coe(), tok.table()) {
                Ok(b) => b,
                Err(_) => {
                    skipped += 1; // no chain annotation
                    continue;
                }
            };
            let coe = tokenize_sample(tok, &built);
            if !stage.needs_media() {
                out.push(Prepared {
                    conversation_id: d.conversation_id.clone(),
                    coe,
                    full: None,
                });
                continue;
            }
            if !media_ready(store, d, turn_idx) {
                skipped += 1;
                continue;
            }
            let Some(targets) = cls_targets(d) else {
                skipped += 1;
                continue;
            };
            let gold = gold.expect("media stages open the gold cache");
            let gold = gold_targets(
                gold,
                &d.conversation_id,
                turn.response_index(),
                cfg.model.n_signal_tokens,
            )?;
            let built = build_prompt(d, turn_idx, PromptKind::overall(), tok.table())?;
            let sample = tokenize_sample(tok, &built);
            if sample.aud_placeholders.len() != turn.dialogue_history.len() {
                return Err(EmpatheiaError::precondition(format!(
                    "{}: prompt holds {} media slots for {} history utterances",
                    d.conversation_id,
                    sample.aud_placeholders.len(),
                    turn.dialogue_history.len()
                )));
            }
            let mut media = Vec::new();
            for (i, u) in turn.dialogue_history.iter().enumerate() {
                let speech = store.get(&d.conversation_id, u.index, "speech")?;
                let video = store.get(&d.conversation_id, u.index, "video")?;
                media.push((sample.aud_placeholders[i], Modality::Speech, speech));
                media.push((sample.vid_placeholders[i], Modality::Video, video));
            }
            out.push(Prepared {
                conversation_id: d.conversation_id.clone(),
                coe,
                full: Some(PreparedFull { sample, media, gold, targets }),
            });
        }
    }
    Ok((out, skipped))
}

/// Hidden-state bundles captured once per sample while the backbone is
/// frozen (ccl and sac stages never touch backbone parameters, so the rows
/// are constant across steps).
pub struct FrozenBundle {
    pub r_t: Array2<f64>,
    pub r_s: Array2<f64>,
    pub r_v: Array2<f64>,
}

/// Teacher-forced signal bundle for one turn: overall prompt, media injected
/// from the store, backbone frozen. Used by evaluation and embedding export.
pub fn signal_bundle_for_turn(
    params: &ParamStore,
    cfg: &SystemConfig,
    store: &FeatureStore,
    d: &Dialogue,
    turn_idx: usize,
) -> Result<FrozenBundle, EmpatheiaError> {
    let tok = cfg.tokenizer()?;
    let bcfg = cfg.backbone()?;
    let built = build_prompt(d, turn_idx, PromptKind::overall(), tok.table())?;
    let sample = tokenize_sample(&tok, &built);
    let turn = &d.turns[turn_idx];
    let mut media = Vec::new();
    for (i, u) in turn.dialogue_history.iter().enumerate() {
        media.push((
            sample.aud_placeholders[i],
            Modality::Speech,
            store.get(&d.conversation_id, u.index, "speech")?,
        ));
        media.push((
            sample.vid_placeholders[i],
            Modality::Video,
            store.get(&d.conversation_id, u.index, "video")?,
        ));
    }
    let full = PreparedFull {
        sample,
        media,
        gold: GoldTargets {
            c_s: Array2::zeros((0, 0)),
            c_v: Array2::zeros((0, 0)),
            s_s: Array2::zeros((0, 0)),
            s_v: Array2::zeros((0, 0)),
        },
        targets: ClsTargets { emotion: 0, gender: 0, age: 0, tone: 0 },
    };
    capture_bundle(params, cfg, &bcfg, &full)
}

fn forward_full(
    ctx: &mut TapeCtx,
    bcfg: &BackboneConfig,
    full: &PreparedFull,
) -> Result<(crate::backbone::ForwardOut, Vec<u32>), EmpatheiaError> {
    let mut injections: Vec<(usize, NodeId)> = Vec::with_capacity(full.media.len());
    for (pos, modality, raw) in &full.media {
        let node = ctx.g.constant(raw.clone());
        let proj = project_to_llm(ctx, *modality, node)?;
        injections.push((*pos, proj));
    }
    let out = forward(ctx, bcfg, &full.sample.tokens, &injections)?;
    Ok((out, full.sample.tokens.clone()))
}

fn capture_bundle(
    params: &ParamStore,
    cfg: &SystemConfig,
    bcfg: &BackboneConfig,
    full: &PreparedFull,
) -> Result<FrozenBundle, EmpatheiaError> {
    let mut ctx = TapeCtx::frozen(params);
    let (out, _) = forward_full(&mut ctx, bcfg, full)?;
    let signals = extract_signals(&mut ctx, &out, &full.sample, cfg.model.n_signal_tokens)?;
    let need = |n: Option<NodeId>, label: &str| {
        n.ok_or_else(|| {
            EmpatheiaError::precondition(format!("sample produced no {label} rows"))
        })
    };
    let r_t = need(signals.r_t, "target text")?;
    let r_s = need(signals.r_s, "AUD signal")?;
    let r_v = need(signals.r_v, "VID signal")?;
    Ok(FrozenBundle {
        r_t: ctx.g.value(r_t).clone(),
        r_s: ctx.g.value(r_s).clone(),
        r_v: ctx.g.value(r_v).clone(),
    })
}

/// Per-sample loss terms as tape nodes; absent terms stay None.
struct TermNodes {
    emp: Option<NodeId>,
    ccl: Option<NodeId>,
    sal: Option<NodeId>,
    cls: Option<NodeId>,
}

fn cs_losses(
    ctx: &mut TapeCtx,
    cscfg: &CSConfig,
    r_t: NodeId,
    gold: &GoldTargets,
    noise: Option<(&Array2<f64>, &Array2<f64>)>,
) -> Result<NodeId, EmpatheiaError> {
    let z_s = cs_encode(ctx, cscfg, r_t, Modality::Speech, noise.map(|n| n.0))?;
    let c_s = cs_decode(ctx, cscfg, z_s, Modality::Speech)?;
    let z_v = cs_encode(ctx, cscfg, r_t, Modality::Video, noise.map(|n| n.1))?;
    let c_v = cs_decode(ctx, cscfg, z_v, Modality::Video)?;
    let c_hat_s = ctx.g.constant(gold.c_s.clone());
    let c_hat_v = ctx.g.constant(gold.c_v.clone());
    l_ccl(ctx, c_s, c_hat_s, c_v, c_hat_v)
}

fn sd_losses(
    ctx: &mut TapeCtx,
    sdcfg: &SDConfig,
    r_s: NodeId,
    r_v: NodeId,
    gold: &GoldTargets,
    targets: &ClsTargets,
) -> Result<(NodeId, NodeId), EmpatheiaError> {
    let signals = sd_extract(ctx, sdcfg, r_s, Some(r_v))?;
    let (s_s, s_v) = fuse_style(ctx, sdcfg, &signals)?;
    let s_hat_s = ctx.g.constant(gold.s_s.clone());
    let s_hat_v = ctx.g.constant(gold.s_v.clone());
    let sal = l_sal(ctx, s_s, s_hat_s, s_v, s_hat_v)?;
    let e_fused = fuse_crossmodal(ctx, signals.e_s, signals.e_v)?;
    let p_fused = fuse_crossmodal(ctx, signals.p_s, signals.p_v)?;
    let cls = l_cls(ctx, e_fused, p_fused, targets)?;
    Ok((sal, cls))
}

fn vae_noise(
    cfg: &SystemConfig,
    stage: Stage,
    step: usize,
    ordinal: usize,
) -> Option<(Array2<f64>, Array2<f64>)> {
    if !cfg.model.vae_sampling {
        return None;
    }
    let shape = (cfg.model.n_signal_tokens, cfg.model.cs_latent);
    let draw = |m: &str| {
        let label = format!("vae.{}.{step}.{ordinal}.{m}", stage.name());
        normal_matrix(&mut seeded_rng(cfg.seed, &label), shape.0, shape.1, 1.0)
    };
    Some((draw("speech"), draw("video")))
}

/// Run one stage over the prepared samples, mutating `params` in place.
/// Artifacts land in `run_dir/stage-<k>`: checkpoint, losses.csv,
/// freeze_audit.json, and the manifest.
pub fn run_stage(
    cfg: &SystemConfig,
    stage: Stage,
    corpus: &[Dialogue],
    store: &FeatureStore,
    run_dir: &Path,
    params: &mut ParamStore,
    manifest: &RunManifest,
) -> Result<StageRun, EmpatheiaError> {
    let stage_dir = run_dir.join(format!("stage-{}", stage.index()));
    std::fs::create_dir_all(&stage_dir).map_err(|e| EmpatheiaError::io(&stage_dir, e))?;
    let tok = cfg.tokenizer()?;
    let bcfg = cfg.backbone()?;
    let cscfg = cfg.content_sync();
    let sdcfg = cfg.style_disentangle()?;

    let gold = if stage.needs_media() {
        let cache = GoldCache::open_or_create(store.root())?;
        if cache.is_empty() {
            return Err(EmpatheiaError::precondition(format!(
                "stage {} needs the gold feature cache; run build-gold first",
                stage.name()
            )));
        }
        Some(cache)
    } else {
        None
    };

    let (prepared, skipped) =
        prepare_samples(cfg, stage, corpus, store, gold.as_ref(), &tok)?;
    if prepared.is_empty() {
        return Err(EmpatheiaError::precondition(format!(
            "stage {} has no usable samples ({skipped} skipped)",
            stage.name()
        )));
    }

    // ccl/sac keep the backbone frozen, so signal bundles are constants
    let bundles: Vec<Option<FrozenBundle>> = match stage {
        Stage::Ccl | Stage::Sac => prepared
            .iter()
            .map(|p| {
                capture_bundle(params, cfg, &bcfg, p.full.as_ref().expect("media stage"))
                    .map(Some)
            })
            .collect::<Result<_, _>>()?,
        _ => prepared.iter().map(|_| None).collect(),
    };

    let before = group_checksums(params);
    let checkpoint = stage_dir.join("checkpoint");
    params.save(&checkpoint, &[])?; // last-good snapshot before any update

    let mut opt = AdamW::new(cfg.train.lr, cfg.train.weight_decay);
    let steps = stage.steps(cfg);
    let batch = cfg.train.batch_size.min(prepared.len());
    let mut rows = Vec::with_capacity(steps);

    for step in 1..=steps {
        let mut ctx = TapeCtx::new(params, move |name| stage.trains(name));
        let mut sums = (0.0f64, 0.0f64, 0.0f64, 0.0f64); // emp, ccl, sal, cls
        let mut batch_loss: Option<NodeId> = None;

        for b in 0..batch {
            let idx = ((step - 1) * batch + b) % prepared.len();
            let p = &prepared[idx];
            let terms = match stage {
                Stage::Coe => {
                    let out = forward(&mut ctx, &bcfg, &p.coe.tokens, &[])?;
                    let emp = lm_nll(&mut ctx, &out, &p.coe.tokens, p.coe.prompt_len)?;
                    TermNodes { emp: Some(emp), ccl: None, sal: None, cls: None }
                }
                Stage::Ccl => {
                    let full = p.full.as_ref().expect("media stage");
                    let bundle = bundles[idx].as_ref().expect("captured");
                    let r_t = ctx.g.constant(bundle.r_t.clone());
                    let noise = vae_noise(cfg, stage, step, b);
                    let ccl = cs_losses(
                        &mut ctx,
                        &cscfg,
                        r_t,
                        &full.gold,
                        noise.as_ref().map(|(s, v)| (s, v)),
                    )?;
                    TermNodes { emp: None, ccl: Some(ccl), sal: None, cls: None }
                }
                Stage::Sac => {
                    let full = p.full.as_ref().expect("media stage");
                    let bundle = bundles[idx].as_ref().expect("captured");
                    let r_s = ctx.g.constant(bundle.r_s.clone());
                    let r_v = ctx.g.constant(bundle.r_v.clone());
                    let (sal, cls) =
                        sd_losses(&mut ctx, &sdcfg, r_s, r_v, &full.gold, &full.targets)?;
                    TermNodes { emp: None, ccl: None, sal: Some(sal), cls: Some(cls) }
                }
                Stage::Overall => {
                    let full = p.full.as_ref().expect("media stage");
                    let (out, tokens) = forward_full(&mut ctx, &bcfg, full)?;
                    let emp = lm_nll(&mut ctx, &out, &tokens, full.sample.prompt_len)?;
                    let signals =
                        extract_signals(&mut ctx, &out, &full.sample, cfg.model.n_signal_tokens)?;
                    let need = |n: Option<NodeId>, label: &str| {
                        n.ok_or_else(|| {
                            EmpatheiaError::precondition(format!(
                                "{}: no {label} rows in the overall layout",
                                p.conversation_id
                            ))
                        })
                    };
                    let r_t = need(signals.r_t, "target text")?;
                    let r_s = need(signals.r_s, "AUD signal")?;
                    let r_v = need(signals.r_v, "VID signal")?;
                    let noise = vae_noise(cfg, stage, step, b);
                    let ccl = cs_losses(
                        &mut ctx,
                        &cscfg,
                        r_t,
                        &full.gold,
                        noise.as_ref().map(|(s, v)| (s, v)),
                    )?;
                    let (sal, cls) =
                        sd_losses(&mut ctx, &sdcfg, r_s, r_v, &full.gold, &full.targets)?;
                    TermNodes { emp: Some(emp), ccl: Some(ccl), sal: Some(sal), cls: Some(cls) }
                }
            };

            let mut sample_loss: Option<NodeId> = None;
            let mut push = |ctx: &mut TapeCtx, node: NodeId, weight: f64| {
                let w = if weight == 1.0 { node } else { ctx.g.scale(node, weight) };
                sample_loss = Some(match sample_loss {
                    Some(acc) => ctx.g.add(acc, w),
                    None => w,
                });
            };
            if let Some(emp) = terms.emp {
                sums.0 += ctx.g.scalar(emp);
                push(&mut ctx, emp, 1.0);
            }
            if let Some(ccl) = terms.ccl {
                sums.1 += ctx.g.scalar(ccl);
                let w = if stage == Stage::Overall { cfg.train.alpha } else { 1.0 };
                push(&mut ctx, ccl, w);
            }
            if let (Some(sal), Some(cls)) = (terms.sal, terms.cls) {
                sums.2 += ctx.g.scalar(sal);
                sums.3 += ctx.g.scalar(cls);
                let sac = l_sac(&mut ctx, sal, cls);
                let w = if stage == Stage::Overall { cfg.train.beta } else { 1.0 };
                push(&mut ctx, sac, w);
            }
            let sample_loss = sample_loss.expect("every stage produces a loss");
            batch_loss = Some(match batch_loss {
                Some(acc) => ctx.g.add(acc, sample_loss),
                None => sample_loss,
            });
        }

        let n = batch as f64;
        let row = LossRow::compose(
            step,
            sums.0 / n,
            sums.1 / n,
            sums.2 / n,
            sums.3 / n,
            cfg.train.alpha,
            cfg.train.beta,
        );
        let row = match row {
            Ok(r) => r,
            Err(e) => {
                // non-finite batch: dump state, restore last good weights
                drop(ctx);
                let diag = stage_dir.join("diagnostic.json");
                let report = serde_json::json!({
                    "stage": stage.name(),
                    "step": step,
                    "l_emp": sums.0 / n,
                    "l_ccl": sums.1 / n,
                    "l_sal": sums.2 / n,
                    "l_cls": sums.3 / n,
                });
                let _ = std::fs::write(&diag, serde_json::to_string_pretty(&report).unwrap());
                let _ = params.save(&stage_dir.join("diagnostic.params"), &[]);
                params.load_into(&checkpoint)?;
                return Err(e);
            }
        };
        rows.push(row);

        let root = batch_loss.expect("batch is nonempty");
        let mean = ctx.g.scale(root, 1.0 / n);
        let grads = ctx.backward_params(mean);
        drop(ctx);
        opt.step(params, &grads);

        if cfg.train.checkpoint_interval > 0 && step % cfg.train.checkpoint_interval == 0 {
            params.save(&checkpoint, &[])?;
        }
    }

    params.save(&checkpoint, &[])?;
    write_losses_csv(&stage_dir.join("losses.csv"), &rows)?;

    let after = group_checksums(params);
    let mut groups = BTreeMap::new();
    for g in FREEZE_GROUPS {
        let trainable = group_is_trainable(stage, g);
        let changed = before[g] != after[g];
        groups.insert(
            g.to_string(),
            FreezeEntry {
                trainable,
                before: before[g].clone(),
                after: after[g].clone(),
                changed,
            },
        );
        if changed && !trainable {
            return Err(EmpatheiaError::domain(format!(
                "freeze audit: group {g} changed during frozen stage {}",
                stage.name()
            )));
        }
    }
    let audit = FreezeAudit { stage: stage.name().to_string(), groups };
    let audit_path = stage_dir.join("freeze_audit.json");
    std::fs::write(&audit_path, serde_json::to_string_pretty(&audit).unwrap())
        .map_err(|e| EmpatheiaError::io(&audit_path, e))?;

    manifest.clone().write(&stage_dir)?;

    Ok(StageRun {
        stage,
        rows,
        used_samples: prepared.len(),
        skipped,
        stage_dir,
        checkpoint,
    })
}

/// Orchestrate a list of stages with lineage checks: each stage after the
/// first consumes the previous stage's checkpoint; the overall stage refuses
/// to start without all three predecessors unless `from_scratch`.
pub struct TrainRequest<'a> {
    pub cfg: &'a SystemConfig,
    pub corpus: &'a [Dialogue],
    pub store: &'a FeatureStore,
    pub runs_root: &'a Path,
    pub run_name: &'a str,
    pub stages: Vec<Stage>,
    pub from_scratch: bool,
    /// lineage labels recorded in manifests
    pub corpus_label: String,
    pub store_label: String,
}

pub fn train(req: &TrainRequest) -> Result<Vec<StageRun>, EmpatheiaError> {
    let run_dir = req.runs_root.join(req.run_name);
    std::fs::create_dir_all(&run_dir).map_err(|e| EmpatheiaError::io(&run_dir, e))?;
    let mut params = build_model(req.cfg)?;
    let mut runs = Vec::new();
    let mut in_memory: Option<Stage> = None;

    for &stage in &req.stages {
        let mut consumed = String::from("fresh");
        if stage == Stage::Overall && !req.from_scratch {
            for prior in [Stage::Coe, Stage::Ccl, Stage::Sac] {
                let ck = run_dir.join(format!("stage-{}", prior.index())).join("checkpoint");
                if !ck.is_file() {
                    return Err(EmpatheiaError::precondition(format!(
                        "overall stage needs a {} checkpoint at {}; train it first or pass --from-scratch",
                        prior.name(),
                        ck.display()
                    )));
                }
            }
        }
        if stage.index() > 1 && !req.from_scratch {
            let prior_idx = stage.index() - 1;
            let ck = run_dir.join(format!("stage-{prior_idx}")).join("checkpoint");
            let have_in_memory = in_memory.map_or(false, |s| s.index() == prior_idx);
            if have_in_memory {
                consumed = format!("in-memory stage-{prior_idx}");
            } else if ck.is_file() {
                params.load_into(&ck)?;
                consumed = ck.display().to_string();
            } else {
                return Err(EmpatheiaError::precondition(format!(
                    "stage {} needs the stage-{prior_idx} checkpoint at {}; train it first or pass --from-scratch",
                    stage.name(),
                    ck.display()
                )));
            }
        }

        let manifest = RunManifest::new(
            req.run_name,
            &format!("train --stage {}", stage.name()),
            req.cfg,
        )
        .with_input("corpus", req.corpus_label.clone())
        .with_input("store", req.store_label.clone())
        .with_input("consumed_checkpoint", consumed);

        let run = run_stage(
            req.cfg,
            stage,
            req.corpus,
            req.store,
            &run_dir,
            &mut params,
            &manifest,
        )?;
        in_memory = Some(stage);
        runs.push(run);
    }
    Ok(runs)
}

/// Mean of a column over consecutive windows of `steps_per_epoch` rows.
pub fn epoch_means(rows: &[LossRow], steps_per_epoch: usize, col: impl Fn(&LossRow) -> f64) -> Vec<f64> {
    assert!(steps_per_epoch > 0, "epoch must cover at least one step");
    rows.chunks(steps_per_epoch)
        .map(|c| c.iter().map(&col).sum::<f64>() / c.len() as f64)
        .collect()
}
