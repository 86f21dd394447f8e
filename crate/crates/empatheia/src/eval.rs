//! End-to-end evaluation: greedy generation scored for emotion accuracy and
//! distinct n-grams, plus toy synthesis quality (SSIM, CPBD, sync ratio) and
//! fused-embedding export.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::config::SystemConfig;
use crate::content_sync::{cs_decode, cs_encode};
use crate::data::Dialogue;
use crate::emotions::resolve_to_coarse;
use crate::encoders::FeatureStore;
use crate::error::EmpatheiaError;
use crate::features::Modality;
use crate::generators::{synth_speech, synth_video, GoldCache};
use crate::metrics::{
    accuracy_breakdown, distinct_n, edge_probs_from_grid, emotion_accuracy, ssim as ssim_metric,
    sync_confidence, tokenize_response, toy_sync_judge,
};
use crate::params::{ParamStore, TapeCtx};
use crate::prompt::{build_prompt, parse_coe, PromptKind};
use crate::rng::seeded_rng;
use crate::style_disentangle::{fuse_crossmodal, fuse_style, sd_extract};
use crate::training::{
    cls_targets, gold_targets, media_ready, signal_bundle_for_turn,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupAcc {
    pub correct: usize,
    pub total: usize,
    pub acc: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Breakdowns {
    pub emotion: BTreeMap<String, GroupAcc>,
    pub gender: BTreeMap<String, GroupAcc>,
    pub age: BTreeMap<String, GroupAcc>,
}

/// Aggregate metrics over one evaluated corpus. Media metrics are absent
/// when no sample carries stored media. The sync judge is a toy stand-in
/// and is labeled as such.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_samples: usize,
    pub skipped_unlabeled: usize,
    pub parse_failures: usize,
    pub media_samples: usize,
    pub acc: f64,
    pub dist1: f64,
    pub dist2: f64,
    pub ssim: Option<f64>,
    pub cpbd: Option<f64>,
    pub sync_cf: Option<f64>,
    pub sync_judge: String,
    pub breakdowns: Breakdowns,
}

impl EvalReport {
    /// Breakdown denominators recompose the overall sample count and the
    /// pooled correct counts recompose the overall accuracy exactly.
    pub fn check_aggregates(&self) -> Result<(), EmpatheiaError> {
        for (label, map) in [
            ("emotion", &self.breakdowns.emotion),
            ("gender", &self.breakdowns.gender),
            ("age", &self.breakdowns.age),
        ] {
            let total: usize = map.values().map(|g| g.total).sum();
            if total != self.n_samples {
                return Err(EmpatheiaError::domain(format!(
                    "{label} breakdown covers {total} of {} samples",
                    self.n_samples
                )));
            }
            let correct: usize = map.values().map(|g| g.correct).sum();
            if correct as f64 / total as f64 != self.acc {
                return Err(EmpatheiaError::domain(format!(
                    "{label} breakdown recomposes accuracy {} against overall {}",
                    correct as f64 / total as f64,
                    self.acc
                )));
            }
        }
        Ok(())
    }

    /// Stable flat key/value view, one metric per line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("key,value\n");
        let opt = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
        out.push_str(&format!("n_samples,{}\n", self.n_samples));
        out.push_str(&format!("skipped_unlabeled,{}\n", self.skipped_unlabeled));
        out.push_str(&format!("parse_failures,{}\n", self.parse_failures));
        out.push_str(&format!("media_samples,{}\n", self.media_samples));
        out.push_str(&format!("acc,{:e}\n", self.acc));
        out.push_str(&format!("dist1,{:e}\n", self.dist1));
        out.push_str(&format!("dist2,{:e}\n", self.dist2));
        out.push_str(&format!("ssim,{}\n", opt(self.ssim)));
        out.push_str(&format!("cpbd,{}\n", opt(self.cpbd)));
        out.push_str(&format!("sync_cf,{}\n", opt(self.sync_cf)));
        out.push_str(&format!("sync_judge,{}\n", self.sync_judge));
        for (section, map) in [
            ("emotion", &self.breakdowns.emotion),
            ("gender", &self.breakdowns.gender),
            ("age", &self.breakdowns.age),
        ] {
            for (k, g) in map {
                out.push_str(&format!("acc.{section}.{k},{:e}\n", g.acc));
            }
        }
        out
    }

    /// Write `report.json` and `report.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<(), EmpatheiaError> {
        std::fs::create_dir_all(dir).map_err(|e| EmpatheiaError::io(dir, e))?;
        let json_path = dir.join("report.json");
        std::fs::write(&json_path, serde_json::to_string_pretty(self).unwrap())
            .map_err(|e| EmpatheiaError::io(&json_path, e))?;
        let csv_path = dir.join("report.csv");
        std::fs::write(&csv_path, self.to_csv()).map_err(|e| EmpatheiaError::io(&csv_path, e))
    }
}

fn tallies(map: BTreeMap<String, crate::metrics::GroupTally>) -> BTreeMap<String, GroupAcc> {
    map.into_iter()
        .map(|(k, t)| {
            (k, GroupAcc { correct: t.correct, total: t.total, acc: t.accuracy() })
        })
        .collect()
}

/// Raw media rows mapped through the frozen multimodal projection, outside
/// any tape.
fn project_raw(params: &ParamStore, modality: Modality, raw: &Array2<f64>) -> Array2<f64> {
    let w = params.get(&format!("mm_proj.{}.w", modality.as_str()));
    let b = params.get(&format!("mm_proj.{}.b", modality.as_str()));
    raw.dot(w) + b
}

/// Greedy-decode one turn and return the generated text up to the first
/// special token.
fn generate_turn(
    params: &ParamStore,
    cfg: &SystemConfig,
    store: &FeatureStore,
    d: &Dialogue,
    turn_idx: usize,
    multimodal: bool,
) -> Result<String, EmpatheiaError> {
    let tok = cfg.tokenizer()?;
    let bcfg = cfg.backbone()?;
    let kind = if multimodal { PromptKind::overall() } else { PromptKind::coe() };
    let built = build_prompt(d, turn_idx, kind, tok.table())?;
    let prompt_tokens = tok.encode(&built.input);
    let mut injections: Vec<(usize, Array2<f64>)> = Vec::new();
    if multimodal {
        let aud = tok.aud_placeholder_id();
        let vid = tok.vid_placeholder_id();
        let mut history = d.turns[turn_idx].dialogue_history.iter();
        let mut current = None;
        for (pos, &t) in prompt_tokens.iter().enumerate() {
            if t == aud {
                current = history.next();
                let u = current.expect("one history utterance per media pair");
                let raw = store.get(&d.conversation_id, u.index, "speech")?;
                injections.push((pos, project_raw(params, Modality::Speech, &raw)));
            } else if t == vid {
                let u = current.expect("AUD precedes VID");
                let raw = store.get(&d.conversation_id, u.index, "video")?;
                injections.push((pos, project_raw(params, Modality::Video, &raw)));
            }
        }
    }
    let generated = crate::backbone::generate(
        params,
        &bcfg,
        &tok,
        &prompt_tokens,
        &injections,
        cfg.eval.max_new_tokens,
    )?;
    let text_tokens: Vec<u32> = generated.iter().copied().take_while(|&t| t < 256).collect();
    Ok(tok.decode(&text_tokens))
}

struct MediaScores {
    ssim_sum: f64,
    edge_probs: Vec<f64>,
    aligned: usize,
    total: usize,
    samples: usize,
}

/// Synthesis-path metrics for one turn: decode predicted content and style
/// from teacher-forced signal bundles, synthesize, and compare against
/// synthesis from the gold features.
fn media_metrics_for_turn(
    params: &ParamStore,
    cfg: &SystemConfig,
    store: &FeatureStore,
    gold: &GoldCache,
    d: &Dialogue,
    turn_idx: usize,
    scores: &mut MediaScores,
) -> Result<(), EmpatheiaError> {
    let bundle = signal_bundle_for_turn(params, cfg, store, d, turn_idx)?;
    let cscfg = cfg.content_sync();
    let sdcfg = cfg.style_disentangle()?;
    let gcfg = cfg.generator();
    let ridx = d.turns[turn_idx].response_index();
    let targets = gold_targets(gold, &d.conversation_id, ridx, cfg.model.n_signal_tokens)?;

    let mut ctx = TapeCtx::frozen(params);
    let r_t = ctx.g.constant(bundle.r_t);
    let r_s = ctx.g.constant(bundle.r_s);
    let r_v = ctx.g.constant(bundle.r_v);
    let z_s = cs_encode(&mut ctx, &cscfg, r_t, Modality::Speech, None)?;
    let c_s = cs_decode(&mut ctx, &cscfg, z_s, Modality::Speech)?;
    let z_v = cs_encode(&mut ctx, &cscfg, r_t, Modality::Video, None)?;
    let c_v = cs_decode(&mut ctx, &cscfg, z_v, Modality::Video)?;
    let signals = sd_extract(&mut ctx, &sdcfg, r_s, Some(r_v))?;
    let (s_s, s_v) = fuse_style(&mut ctx, &sdcfg, &signals)?;
    let c_s = ctx.g.value(c_s).clone();
    let c_v = ctx.g.value(c_v).clone();
    let s_s = ctx.g.value(s_s).clone();
    let s_v = ctx.g.value(s_v).clone();
    drop(ctx);

    let pred_mel = synth_speech(params, &gcfg, &c_s, &s_s)?;
    let pred_motion = synth_video(params, &gcfg, &c_v, &s_v)?;
    let gold_motion = synth_video(params, &gcfg, &targets.c_v, &targets.s_v)?;

    scores.ssim_sum += ssim_metric(&pred_motion, &gold_motion, cfg.eval.ssim_c1, cfg.eval.ssim_c2)?;
    scores.edge_probs.extend(edge_probs_from_grid(&pred_motion));
    let (aligned, total) = toy_sync_judge(&pred_mel, &pred_motion, cfg.eval.sync_tau)?;
    scores.aligned += aligned;
    scores.total += total;
    scores.samples += 1;
    Ok(())
}

pub struct EvalRequest<'a> {
    pub cfg: &'a SystemConfig,
    pub params: &'a ParamStore,
    pub corpus: &'a [Dialogue],
    pub store: &'a FeatureStore,
}

/// Evaluate every labeled turn: greedy generation scored against gold
/// emotions, pooled distinct n-grams over generated responses, and the toy
/// synthesis metrics wherever media is stored.
pub fn evaluate(req: &EvalRequest) -> Result<EvalReport, EmpatheiaError> {
    evaluate_with(req, &|d, turn_idx, multimodal| {
        generate_turn(req.params, req.cfg, req.store, d, turn_idx, multimodal)
    })
}

type GenerateFn<'a> = dyn Fn(&Dialogue, usize, bool) -> Result<String, EmpatheiaError> + 'a;

fn evaluate_with(req: &EvalRequest, generate: &GenerateFn) -> Result<EvalReport, EmpatheiaError> {
    let mut preds: Vec<String> = Vec::new();
    let mut golds: Vec<String> = Vec::new();
    let mut emo_keys: Vec<String> = Vec::new();
    let mut gender_keys: Vec<String> = Vec::new();
    let mut age_keys: Vec<String> = Vec::new();
    let mut responses: Vec<Vec<String>> = Vec::new();
    let mut skipped_unlabeled = 0usize;
    let mut parse_failures = 0usize;
    let mut scores = MediaScores {
        ssim_sum: 0.0,
        edge_probs: Vec::new(),
        aligned: 0,
        total: 0,
        samples: 0,
    };
    let gold = GoldCache::open_or_create(req.store.root())?;

    for d in req.corpus {
        for turn_idx in 0..d.turns.len() {
            let turn = &d.turns[turn_idx];
            let gold_emotion = turn
                .chain_of_empathy
                .as_ref()
                .and_then(|c| resolve_to_coarse(&c.speaker_emotion).ok())
                .or_else(|| crate::data::dialogue_coarse_emotion(d));
            let Some(gold_emotion) = gold_emotion else {
                skipped_unlabeled += 1;
                continue;
            };
            if cls_targets(d).is_none() {
                skipped_unlabeled += 1;
                continue;
            }
            let has_media = media_ready(req.store, d, turn_idx);

            let text = generate(d, turn_idx, has_media)?;
            let (pred, toks) = match parse_coe(&text) {
                Ok(out) => {
                    let label = resolve_to_coarse(&out.speaker_emotion)
                        .map(|c| c.to_string())
                        .unwrap_or_else(|_| format!("unmapped:{}", out.speaker_emotion));
                    (label, tokenize_response(&out.response))
                }
                Err(_) => {
                    parse_failures += 1;
                    ("<parse-failure>".to_string(), Vec::new())
                }
            };
            preds.push(pred);
            golds.push(gold_emotion.to_string());
            emo_keys.push(gold_emotion.to_string());
            gender_keys.push(d.listener_profile.gender.as_str().to_string());
            age_keys.push(d.listener_profile.age.as_str().to_string());
            responses.push(toks);

            if has_media {
                media_metrics_for_turn(
                    req.params, req.cfg, req.store, &gold, d, turn_idx, &mut scores,
                )?;
            }
        }
    }

    if preds.is_empty() {
        return Err(EmpatheiaError::precondition(format!(
            "no evaluable turns ({skipped_unlabeled} unlabeled skipped)"
        )));
    }
    fn as_refs(v: &[String]) -> Vec<&str> {
        v.iter().map(|s| s.as_str()).collect()
    }
    let p = as_refs(&preds);
    let g = as_refs(&golds);
    let acc = emotion_accuracy(&p, &g)?;
    let breakdowns = Breakdowns {
        emotion: tallies(accuracy_breakdown(&p, &g, &as_refs(&emo_keys))?),
        gender: tallies(accuracy_breakdown(&p, &g, &as_refs(&gender_keys))?),
        age: tallies(accuracy_breakdown(&p, &g, &as_refs(&age_keys))?),
    };
    let dist1 = distinct_n(&responses, 1)?;
    let dist2 = distinct_n(&responses, 2)?;

    let (ssim, cpbd, sync_cf) = if scores.samples > 0 {
        (
            Some(scores.ssim_sum / scores.samples as f64),
            Some(crate::metrics::cpbd(&scores.edge_probs)?),
            Some(sync_confidence(scores.aligned, scores.total)?),
        )
    } else {
        (None, None, None)
    };

    let report = EvalReport {
        n_samples: preds.len(),
        skipped_unlabeled,
        parse_failures,
        media_samples: scores.samples,
        acc,
        dist1,
        dist2,
        ssim,
        cpbd,
        sync_cf,
        sync_judge: format!("toy-cosine(tau={})", req.cfg.eval.sync_tau),
        breakdowns,
    };
    report.check_aggregates()?;
    Ok(report)
}

/// One exported sample: gold labels plus fused emotion/profile vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub id: String,
    pub emotion: String,
    pub gender: String,
    pub age: String,
    pub tone: String,
    pub e: Vec<f64>,
    pub p: Vec<f64>,
}

/// Sample `n` media-backed turns without replacement (seeded) and export
/// their fused style embeddings.
pub fn export_embeddings(
    cfg: &SystemConfig,
    params: &ParamStore,
    corpus: &[Dialogue],
    store: &FeatureStore,
    n: usize,
    seed: u64,
) -> Result<Vec<EmbeddingRow>, EmpatheiaError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut candidates: Vec<(usize, usize)> = Vec::new();
    for (di, d) in corpus.iter().enumerate() {
        for turn_idx in 0..d.turns.len() {
            if media_ready(store, d, turn_idx) && cls_targets(d).is_some() {
                candidates.push((di, turn_idx));
            }
        }
    }
    if candidates.len() < n {
        return Err(EmpatheiaError::precondition(format!(
            "requested {n} embedding samples but only {} media-backed turns exist",
            candidates.len()
        )));
    }
    let mut rng = seeded_rng(seed, "export-embeddings");
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, candidates.len(), n).into_vec();
    picked.sort_unstable();

    let sdcfg = cfg.style_disentangle()?;
    let mut rows = Vec::with_capacity(n);
    for i in picked {
        let (di, turn_idx) = candidates[i];
        let d = &corpus[di];
        let bundle = signal_bundle_for_turn(params, cfg, store, d, turn_idx)?;
        let mut ctx = TapeCtx::frozen(params);
        let r_s = ctx.g.constant(bundle.r_s);
        let r_v = ctx.g.constant(bundle.r_v);
        let signals = sd_extract(&mut ctx, &sdcfg, r_s, Some(r_v))?;
        let e = fuse_crossmodal(&mut ctx, signals.e_s, signals.e_v)?;
        let p = fuse_crossmodal(&mut ctx, signals.p_s, signals.p_v)?;
        let to_vec = |node| ctx.g.value(node).iter().copied().collect::<Vec<f64>>();
        let emotion = crate::data::dialogue_coarse_emotion(d).expect("labeled candidate");
        rows.push(EmbeddingRow {
            id: format!("{}/{}", d.conversation_id, d.turns[turn_idx].turn_id),
            emotion: emotion.to_string(),
            gender: d.listener_profile.gender.as_str().to_string(),
            age: d.listener_profile.age.as_str().to_string(),
            tone: d.listener_profile.tone.as_str().to_string(),
            e: to_vec(e),
            p: to_vec(p),
        });
    }
    Ok(rows)
}

/// CSV with one row per sample; vector widths come from the config.
pub fn embeddings_csv(rows: &[EmbeddingRow], d_style: usize) -> String {
    let mut out = String::from("id,emotion,gender,age,tone");
    for i in 0..d_style {
        out.push_str(&format!(",e_{i}"));
    }
    for i in 0..d_style {
        out.push_str(&format!(",p_{i}"));
    }
    out.push('\n');
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}", r.id, r.emotion, r.gender, r.age, r.tone));
        for v in &r.e {
            out.push_str(&format!(",{v:e}"));
        }
        for v in &r.p {
            out.push_str(&format!(",{v:e}"));
        }
        out.push('\n');
    }
    out
}

/// Write `embeddings.csv` into `dir`.
pub fn write_embeddings(
    dir: &Path,
    rows: &[EmbeddingRow],
    d_style: usize,
) -> Result<PathBuf, EmpatheiaError> {
    std::fs::create_dir_all(dir).map_err(|e| EmpatheiaError::io(dir, e))?;
    let path = dir.join("embeddings.csv");
    std::fs::write(&path, embeddings_csv(rows, d_style)).map_err(|e| EmpatheiaError::io(&path, e))?;
    Ok(path)
}
