//! Decoder-only transformer with low-rank adapters, media-feature injection
//! at placeholder positions, masked next-token loss, and extraction of the
//! text/speech/video signal representations.

use ndarray::Array2;

use crate::autodiff::NodeId;
use crate::error::EmpatheiaError;
use crate::features::SplicePlan;
use crate::params::{ParamStore, TapeCtx};
use crate::prompt::TokenizedSample;
use crate::rng::{normal_matrix, seeded_rng};
use crate::tokenizer::Tokenizer;

#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub adapter_rank: usize,
    pub adapter_scale: f64,
    pub seed: u64,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 {
            return Err(EmpatheiaError::domain(
                "backbone sizes must all be positive",
            ));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(EmpatheiaError::domain(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.adapter_rank == 0 {
            return Err(EmpatheiaError::domain("adapter rank must be >= 1"));
        }
        if self.max_seq_len < 2 {
            return Err(EmpatheiaError::domain("max_seq_len must be >= 2"));
        }
        Ok(())
    }

    fn ffn_hidden(&self) -> usize {
        2 * self.d_model
    }
}

/// Which parameter sets an optimizer step may touch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdapterMode {
    BaseFrozenAdapterTrainable,
    AllFrozen,
    Joint,
}

pub fn is_backbone_param(name: &str) -> bool {
    name.starts_with("backbone.")
}

pub fn is_adapter_param(name: &str) -> bool {
    name.starts_with("backbone.adapter.")
}

/// Trainability of a backbone parameter under the given mode.
pub fn mode_trains(mode: AdapterMode, name: &str) -> bool {
    match mode {
        AdapterMode::AllFrozen => false,
        AdapterMode::BaseFrozenAdapterTrainable => is_adapter_param(name),
        AdapterMode::Joint => is_backbone_param(name),
    }
}

/// Base linear maps that receive low-rank adapters (per layer, plus lm_head).
fn adapted_names(cfg: &BackboneConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("backbone.base.l{l}.attn.{w}"), d, d));
        }
        out.push((format!("backbone.base.l{l}.ffn.w1"), d, cfg.ffn_hidden()));
        out.push((format!("backbone.base.l{l}.ffn.w2"), cfg.ffn_hidden(), d));
    }
    out.push(("backbone.base.lm_head".to_string(), d, cfg.vocab_size));
    out
}

/// Register all backbone parameters. Adapter up-projections start at zero, so
/// the adapted model equals the base model bit-for-bit at init.
pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig) -> Result<(), EmpatheiaError> {
    cfg.validate()?;
    let d = cfg.d_model;
    let init = |name: &str, rows: usize, cols: usize, std: f64| {
        let mut rng = seeded_rng(cfg.seed, name);
        normal_matrix(&mut rng, rows, cols, std)
    };

    store.insert(
        "backbone.base.tok_emb",
        init("backbone.base.tok_emb", cfg.vocab_size, d, 0.02),
    );
    store.insert(
        "backbone.base.pos_emb",
        init("backbone.base.pos_emb", cfg.max_seq_len, d, 0.02),
    );
    for l in 0..cfg.n_layers {
        for ln in ["ln1", "ln2"] {
            store.insert(&format!("backbone.base.l{l}.{ln}.g"), Array2::ones((1, d)));
            store.insert(&format!("backbone.base.l{l}.{ln}.b"), Array2::zeros((1, d)));
        }
        store.insert(
            &format!("backbone.base.l{l}.ffn.b1"),
            Array2::zeros((1, cfg.ffn_hidden())),
        );
        store.insert(&format!("backbone.base.l{l}.ffn.b2"), Array2::zeros((1, d)));
    }
    store.insert("backbone.base.lnf.g", Array2::ones((1, d)));
    store.insert("backbone.base.lnf.b", Array2::zeros((1, d)));

    for (name, rows, cols) in adapted_names(cfg) {
        store.insert(&name, init(&name, rows, cols, 0.02));
        let aname = name.replacen("backbone.base.", "backbone.adapter.", 1);
        store.insert(
            &format!("{aname}.a"),
            init(&format!("{aname}.a"), rows, cfg.adapter_rank, 0.02),
        );
        store.insert(
            &format!("{aname}.b"),
            Array2::zeros((cfg.adapter_rank, cols)),
        );
    }
    Ok(())
}

/// x (W + scale * A B) for an adapted base weight.
fn adapted_linear(ctx: &mut TapeCtx, cfg: &BackboneConfig, x: NodeId, base_name: &str) -> NodeId {
    let w = ctx.param(base_name);
    let y = ctx.g.matmul(x, w);
    let aname = base_name.replacen("backbone.base.", "backbone.adapter.", 1);
    let a = ctx.param(&format!("{aname}.a"));
    let b = ctx.param(&format!("{aname}.b"));
    let xa = ctx.g.matmul(x, a);
    let xab = ctx.g.matmul(xa, b);
    let scaled = ctx
        .g
        .scale(xab, cfg.adapter_scale / cfg.adapter_rank as f64);
    ctx.g.add(y, scaled)
}

fn causal_mask(n: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, n), |(i, j)| if j <= i { 0.0 } else { -1e9 })
}

pub struct ForwardOut {
    /// pre-softmax vocab scores per position
    pub logits: NodeId,
    /// final hidden states per position
    pub hidden: NodeId,
    /// how placeholder positions were replaced (maps token to row positions)
    pub plan: SplicePlan,
}

/// Run the model over `tokens`, replacing each placeholder position in
/// `injections` with the given d_model-wide feature rows.
pub fn forward(
    ctx: &mut TapeCtx,
    cfg: &BackboneConfig,
    tokens: &[u32],
    injections: &[(usize, NodeId)],
) -> Result<ForwardOut, EmpatheiaError> {
    if tokens.is_empty() {
        return Err(EmpatheiaError::domain("forward on an empty token sequence"));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= cfg.vocab_size) {
        return Err(EmpatheiaError::domain(format!(
            "token id {t} outside vocabulary of {}",
            cfg.vocab_size
        )));
    }
    let mut placements = Vec::with_capacity(injections.len());
    for &(pos, node) in injections {
        let shape = ctx.g.value(node).dim();
        if shape.1 != cfg.d_model {
            return Err(EmpatheiaError::dimension(format!(
                "injected features at position {pos} have width {} but d_model is {}",
                shape.1, cfg.d_model
            )));
        }
        placements.push((pos, shape.0));
    }
    let plan = SplicePlan::new(tokens.len(), &placements)?;
    if plan.new_len > cfg.max_seq_len {
        return Err(EmpatheiaError::Length(format!(
            "sequence of {} rows after injection exceeds max_seq_len {}",
            plan.new_len, cfg.max_seq_len
        )));
    }

    let tok_emb = ctx.param("backbone.base.tok_emb");
    let mut parts = Vec::new();
    for seg in &plan.segments {
        match seg {
            crate::features::Segment::Keep(s, e) => {
                let idx: Vec<usize> = tokens[*s..*e].iter().map(|&t| t as usize).collect();
                parts.push(ctx.g.row_select(tok_emb, &idx));
            }
            crate::features::Segment::Insert(i) => parts.push(injections[*i].1),
        }
    }
    let embedded = if parts.len() == 1 {
        parts[0]
    } else {
        ctx.g.concat_rows(&parts)
    };

    let pos_emb = ctx.param("backbone.base.pos_emb");
    let pos_rows: Vec<usize> = (0..plan.new_len).collect();
    let pos = ctx.g.row_select(pos_emb, &pos_rows);
    let mut h = ctx.g.add(embedded, pos);

    let mask = ctx.g.constant(causal_mask(plan.new_len));
    let d_head = cfg.d_model / cfg.n_heads;
    let att_scale = 1.0 / (d_head as f64).sqrt();

    for l in 0..cfg.n_layers {
        let ln1g = ctx.param(&format!("backbone.base.l{l}.ln1.g"));
        let ln1b = ctx.param(&format!("backbone.base.l{l}.ln1.b"));
        let normed = ctx.g.layer_norm(h, ln1g, ln1b);
        let q = adapted_linear(ctx, cfg, normed, &format!("backbone.base.l{l}.attn.wq"));
        let k = adapted_linear(ctx, cfg, normed, &format!("backbone.base.l{l}.attn.wk"));
        let v = adapted_linear(ctx, cfg, normed, &format!("backbone.base.l{l}.attn.wv"));
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for hd in 0..cfg.n_heads {
            let (s, e) = (hd * d_head, (hd + 1) * d_head);
            let qh = ctx.g.slice_cols(q, s, e);
            let kh = ctx.g.slice_cols(k, s, e);
            let vh = ctx.g.slice_cols(v, s, e);
            let scores = ctx.g.matmul_nt(qh, kh);
            let scaled = ctx.g.scale(scores, att_scale);
            let masked = ctx.g.add(scaled, mask);
            let attn = ctx.g.softmax_rows(masked);
            heads.push(ctx.g.matmul(attn, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            ctx.g.concat_cols(&heads)
        };
        let proj = adapted_linear(ctx, cfg, merged, &format!("backbone.base.l{l}.attn.wo"));
        h = ctx.g.add(h, proj);

        let ln2g = ctx.param(&format!("backbone.base.l{l}.ln2.g"));
        let ln2b = ctx.param(&format!("backbone.base.l{l}.ln2.b"));
        let normed = ctx.g.layer_norm(h, ln2g, ln2b);
        let up = adapted_linear(ctx, cfg, normed, &format!("backbone.base.l{l}.ffn.w1"));
        let b1 = ctx.param(&format!("backbone.base.l{l}.ffn.b1"));
        let up_b = ctx.g.add_row(up, b1);
        let act = ctx.g.silu(up_b);
        let down = adapted_linear(ctx, cfg, act, &format!("backbone.base.l{l}.ffn.w2"));
        let b2 = ctx.param(&format!("backbone.base.l{l}.ffn.b2"));
        let down_b = ctx.g.add_row(down, b2);
        h = ctx.g.add(h, down_b);
    }

    let lnfg = ctx.param("backbone.base.lnf.g");
    let lnfb = ctx.param("backbone.base.lnf.b");
    let hidden = ctx.g.layer_norm(h, lnfg, lnfb);
    let logits = adapted_linear(ctx, cfg, hidden, "backbone.base.lm_head");

    Ok(ForwardOut {
        logits,
        hidden,
        plan,
    })
}

/// Mean masked next-token NLL over the target span (prompt positions carry no
/// loss). Row `map(p) - 1` of the logits predicts token `p`.
pub fn lm_nll(
    ctx: &mut TapeCtx,
    out: &ForwardOut,
    tokens: &[u32],
    prompt_len: usize,
) -> Result<NodeId, EmpatheiaError> {
    if prompt_len >= tokens.len() {
        return Err(EmpatheiaError::precondition(
            "loss mask selects no target positions",
        ));
    }
    let rows = out.plan.new_len;
    let mut targets = vec![0usize; rows];
    let mut mask = vec![false; rows];
    for p in prompt_len..tokens.len() {
        let new = out.plan.map_pos(p).ok_or_else(|| {
            EmpatheiaError::precondition(format!(
                "target position {p} was replaced by injected features"
            ))
        })?;
        targets[new - 1] = tokens[p] as usize;
        mask[new - 1] = true;
    }
    Ok(ctx.g.masked_nll(out.logits, &targets, &mask))
}

/// Hidden-state bundles read out of a forward pass.
pub struct Signals {
    /// rows at target text positions (response span), None if the target has
    /// no text tokens
    pub r_t: Option<NodeId>,
    /// rows at the n_signal AUD positions, in signal order
    pub r_s: Option<NodeId>,
    /// rows at the n_signal VID positions, in signal order
    pub r_v: Option<NodeId>,
}

/// Select r^t / r^s / r^v rows from the hidden sequence according to the
/// tokenized layout. Partial signal blocks are an error.
pub fn extract_signals(
    ctx: &mut TapeCtx,
    out: &ForwardOut,
    sample: &TokenizedSample,
    n_signal: usize,
) -> Result<Signals, EmpatheiaError> {
    let map = |positions: &[usize], label: &str| -> Result<Option<Vec<usize>>, EmpatheiaError> {
        if positions.is_empty() {
            return Ok(None);
        }
        if positions.len() != n_signal {
            return Err(EmpatheiaError::precondition(format!(
                "layout holds {} {label} signal tokens, expected {n_signal}",
                positions.len()
            )));
        }
        let mut rows = Vec::with_capacity(positions.len());
        for &p in positions {
            rows.push(out.plan.map_pos(p).ok_or_else(|| {
                EmpatheiaError::precondition(format!("{label} signal position {p} was spliced away"))
            })?);
        }
        Ok(Some(rows))
    };

    let aud_rows = map(&sample.aud_signal_pos, "AUD")?;
    let vid_rows = map(&sample.vid_signal_pos, "VID")?;

    let is_signal: std::collections::BTreeSet<usize> = sample
        .aud_signal_pos
        .iter()
        .chain(&sample.vid_signal_pos)
        .copied()
        .collect();
    let mut text_rows = Vec::new();
    // target text span: target positions minus signal tokens and final EOS
    for p in sample.prompt_len..sample.tokens.len() - 1 {
        if !is_signal.contains(&p) {
            text_rows.push(out.plan.map_pos(p).expect("targets are never spliced"));
        }
    }

    let select = |ctx: &mut TapeCtx, rows: Option<Vec<usize>>| {
        rows.map(|r| ctx.g.row_select(out.hidden, &r))
    };
    Ok(Signals {
        r_t: if text_rows.is_empty() {
            None
        } else {
            Some(ctx.g.row_select(out.hidden, &text_rows))
        },
        r_s: select(ctx, aud_rows),
        r_v: select(ctx, vid_rows),
    })
}

/// Greedy decoding: repeatedly append the argmax token. Stops at EOS (not
/// appended), after the 2*n_signal-th signal token, or at the length cap.
pub fn generate(
    store: &ParamStore,
    cfg: &BackboneConfig,
    tok: &Tokenizer,
    prompt_tokens: &[u32],
    injections: &[(usize, Array2<f64>)],
    max_new: usize,
) -> Result<Vec<u32>, EmpatheiaError> {
    let n_signal_total = 2 * tok.table().n_signal();
    let mut tokens = prompt_tokens.to_vec();
    let mut generated = Vec::new();
    let mut signal_count = 0usize;
    for _ in 0..max_new {
        let mut ctx = TapeCtx::frozen(store);
        let nodes: Vec<(usize, NodeId)> = injections
            .iter()
            .map(|(p, f)| (*p, ctx.g.constant(f.clone())))
            .collect();
        let out = match forward(&mut ctx, cfg, &tokens, &nodes) {
            Ok(o) => o,
            Err(EmpatheiaError::Length(_)) => break,
            Err(e) => return Err(e),
        };
        let logits = ctx.g.value(out.logits);
        let last = logits.row(logits.nrows() - 1);
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for (i, &v) in last.iter().enumerate() {
            if v > best_v {
                best_v = v;
                best = i;
            }
        }
        let next = best as u32;
        if next == tok.eos_id() {
            break;
        }
        tokens.push(next);
        generated.push(next);
        if tok.is_signal(next) {
            signal_count += 1;
            if signal_count >= n_signal_total {
                break;
            }
        }
    }
    Ok(generated)
}
