//! Style disentangler: emotion and profile queries attend to the modality
//! signal bundles, fuse into per-modality style vectors for the generators,
//! and feed linear heads trained with alignment plus classification losses.

use ndarray::Array2;

use crate::autodiff::NodeId;
use crate::emotions::COARSE_EMOTIONS;
use crate::error::EmpatheiaError;
use crate::params::{ParamStore, TapeCtx};
use crate::resampler::{forward_resampler, init_resampler, resampler_scalars, ResamplerConfig};
use crate::rng::{normal_matrix, seeded_rng};

/// Head name and class count for each style classifier.
pub const STYLE_HEADS: [(&str, usize); 4] = [
    ("emotion", COARSE_EMOTIONS.len()),
    ("gender", 2),
    ("age", 4),
    ("tone", 3),
];

/// Which signal bundles feed the style queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SdInput {
    /// every query bank attends to the AUD bundle only
    RSOnly,
    /// speech banks attend to the AUD bundle, video banks to the VID bundle
    PerModality,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SDConfig {
    /// backbone hidden width (input rows)
    pub d_model: usize,
    /// width of extracted emotion/profile rows
    pub d_style: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// rows per extracted signal block
    pub n_queries: usize,
    /// speech generator style width
    pub style_s_width: usize,
    /// video generator style width
    pub style_v_width: usize,
    pub sd_input: SdInput,
    pub seed: u64,
}

impl SDConfig {
    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        if self.n_queries == 0 || self.style_s_width == 0 || self.style_v_width == 0 {
            return Err(EmpatheiaError::domain(
                "style disentangler sizes must all be positive",
            ));
        }
        self.trunk(0).validate()
    }

    fn trunk(&self, salt: u64) -> ResamplerConfig {
        ResamplerConfig {
            d_in: self.d_model,
            d_work: self.d_style,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            seed: self.seed.wrapping_add(salt),
        }
    }
}

/// Extracted style signals, each n_queries x d_style.
#[derive(Debug, Clone, Copy)]
pub struct StyleSignals {
    pub e_s: NodeId,
    pub e_v: NodeId,
    pub p_s: NodeId,
    pub p_v: NodeId,
}

/// Register emotion/profile trunks, query banks, and per-modality style
/// layers under `style_disentangle.`.
pub fn init_style_disentangle(store: &mut ParamStore, cfg: &SDConfig) -> Result<(), EmpatheiaError> {
    cfg.validate()?;
    init_resampler(store, &cfg.trunk(0), "style_disentangle.enc_e")?;
    init_resampler(store, &cfg.trunk(1), "style_disentangle.enc_p")?;
    for q in ["e_s", "e_v", "p_s", "p_v"] {
        let name = format!("style_disentangle.q.{q}");
        let mut rng = seeded_rng(cfg.seed, &name);
        store.insert(&name, normal_matrix(&mut rng, cfg.n_queries, cfg.d_style, 0.5));
    }
    for (m, width) in [("speech", cfg.style_s_width), ("video", cfg.style_v_width)] {
        let w_name = format!("style_disentangle.style.{m}.w");
        let mut rng = seeded_rng(cfg.seed, &w_name);
        store.insert(&w_name, normal_matrix(&mut rng, 2 * cfg.d_style, width, 0.1));
        store.insert(&format!("style_disentangle.style.{m}.b"), Array2::zeros((1, width)));
    }
    Ok(())
}

/// Register the linear classification heads under `heads.`.
pub fn init_style_heads(store: &mut ParamStore, d_style: usize, seed: u64) {
    for (name, classes) in STYLE_HEADS {
        let w_name = format!("heads.{name}.w");
        let mut rng = seeded_rng(seed, &w_name);
        store.insert(&w_name, normal_matrix(&mut rng, d_style, classes, 0.1));
        store.insert(&format!("heads.{name}.b"), Array2::zeros((1, classes)));
    }
}

/// Scalar parameters of the disentangler, for audits and tests.
pub fn sd_scalars(cfg: &SDConfig) -> usize {
    2 * resampler_scalars(&cfg.trunk(0))
        + 4 * cfg.n_queries * cfg.d_style
        + (2 * cfg.d_style + 1) * (cfg.style_s_width + cfg.style_v_width)
}

/// Scalar parameters of the heads group.
pub fn heads_scalars(d_style: usize) -> usize {
    STYLE_HEADS.iter().map(|(_, k)| (d_style + 1) * k).sum()
}

/// Pull emotion and profile signals out of the AUD/VID signal bundles.
pub fn sd_extract(
    ctx: &mut TapeCtx,
    cfg: &SDConfig,
    r_s: NodeId,
    r_v: Option<NodeId>,
) -> Result<StyleSignals, EmpatheiaError> {
    let video_src = match cfg.sd_input {
        SdInput::RSOnly => r_s,
        SdInput::PerModality => r_v.ok_or_else(|| {
            EmpatheiaError::precondition(
                "per-modality style extraction needs the VID signal bundle",
            )
        })?,
    };
    let trunk = cfg.trunk(0);
    let run = |ctx: &mut TapeCtx, enc: &str, bank: &str, src: NodeId| {
        let q = ctx.param(&format!("style_disentangle.q.{bank}"));
        forward_resampler(ctx, &trunk, &format!("style_disentangle.{enc}"), q, src)
    };
    Ok(StyleSignals {
        e_s: run(ctx, "enc_e", "e_s", r_s)?,
        e_v: run(ctx, "enc_e", "e_v", video_src)?,
        p_s: run(ctx, "enc_p", "p_s", r_s)?,
        p_v: run(ctx, "enc_p", "p_v", video_src)?,
    })
}

/// Fuse emotion and profile rows into the per-modality style features the
/// generators consume.
pub fn fuse_style(
    ctx: &mut TapeCtx,
    cfg: &SDConfig,
    signals: &StyleSignals,
) -> Result<(NodeId, NodeId), EmpatheiaError> {
    let want = (cfg.n_queries, cfg.d_style);
    for (label, node) in [
        ("emotion/speech", signals.e_s),
        ("emotion/video", signals.e_v),
        ("profile/speech", signals.p_s),
        ("profile/video", signals.p_v),
    ] {
        let got = ctx.g.value(node).dim();
        if got != want {
            return Err(EmpatheiaError::dimension(format!(
                "{label} signal block is {got:?}, expected {want:?}"
            )));
        }
    }
    let fuse = |ctx: &mut TapeCtx, e: NodeId, p: NodeId, m: &str| {
        let joint = ctx.g.concat_cols(&[e, p]);
        let w = ctx.param(&format!("style_disentangle.style.{m}.w"));
        let b = ctx.param(&format!("style_disentangle.style.{m}.b"));
        let proj = ctx.g.matmul(joint, w);
        ctx.g.add_row(proj, b)
    };
    let s_s = fuse(ctx, signals.e_s, signals.p_s, "speech");
    let s_v = fuse(ctx, signals.e_v, signals.p_v, "video");
    Ok((s_s, s_v))
}

/// Average two signal blocks elementwise, then mean-pool rows to one vector.
pub fn fuse_crossmodal(
    ctx: &mut TapeCtx,
    a: NodeId,
    b: NodeId,
) -> Result<NodeId, EmpatheiaError> {
    let da = ctx.g.value(a).dim();
    let db = ctx.g.value(b).dim();
    if da != db {
        return Err(EmpatheiaError::dimension(format!(
            "cross-modal fusion inputs disagree: {da:?} vs {db:?}"
        )));
    }
    let sum = ctx.g.add(a, b);
    let avg = ctx.g.scale(sum, 0.5);
    Ok(ctx.g.mean_rows(avg))
}

/// Gold class indices for the style classifiers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClsTargets {
    pub emotion: usize,
    pub gender: usize,
    pub age: usize,
    pub tone: usize,
}

/// Logits of one head over a fused 1 x d_style input.
pub fn head_logits(ctx: &mut TapeCtx, input: NodeId, head: &str) -> NodeId {
    let w = ctx.param(&format!("heads.{head}.w"));
    let b = ctx.param(&format!("heads.{head}.b"));
    let proj = ctx.g.matmul(input, w);
    ctx.g.add_row(proj, b)
}

/// Classification loss: summed cross-entropy of the emotion head on fused E
/// and the gender/age/tone heads on fused P.
pub fn l_cls(
    ctx: &mut TapeCtx,
    e_fused: NodeId,
    p_fused: NodeId,
    targets: &ClsTargets,
) -> Result<NodeId, EmpatheiaError> {
    let pairs = [
        ("emotion", e_fused, targets.emotion),
        ("gender", p_fused, targets.gender),
        ("age", p_fused, targets.age),
        ("tone", p_fused, targets.tone),
    ];
    let mut total: Option<NodeId> = None;
    for (head, input, target) in pairs {
        let classes = STYLE_HEADS.iter().find(|(h, _)| *h == head).unwrap().1;
        if target >= classes {
            return Err(EmpatheiaError::domain(format!(
                "{head} target {target} is out of range for {classes} classes"
            )));
        }
        let logits = head_logits(ctx, input, head);
        let nll = ctx.g.masked_nll(logits, &[target], &[true]);
        total = Some(match total {
            None => nll,
            Some(t) => ctx.g.add(t, nll),
        });
    }
    Ok(total.expect("four heads"))
}

fn check_pair(ctx: &TapeCtx, got: NodeId, want: NodeId, label: &str) -> Result<(), EmpatheiaError> {
    let a = ctx.g.value(got).dim();
    let b = ctx.g.value(want).dim();
    if a != b {
        return Err(EmpatheiaError::dimension(format!(
            "{label}: predicted {a:?} vs gold {b:?}"
        )));
    }
    Ok(())
}

/// Style alignment loss: summed squared error of both fused style features
/// against their gold style targets.
pub fn l_sal(
    ctx: &mut TapeCtx,
    s_s: NodeId,
    s_hat_s: NodeId,
    s_v: NodeId,
    s_hat_v: NodeId,
) -> Result<NodeId, EmpatheiaError> {
    check_pair(ctx, s_s, s_hat_s, "speech style")?;
    check_pair(ctx, s_v, s_hat_v, "video style")?;
    let s = ctx.g.sq_diff_sum(s_s, s_hat_s);
    let v = ctx.g.sq_diff_sum(s_v, s_hat_v);
    Ok(ctx.g.add(s, v))
}

/// Style-aware classification loss: alignment plus classification.
pub fn l_sac(ctx: &mut TapeCtx, sal: NodeId, cls: NodeId) -> NodeId {
    ctx.g.add(sal, cls)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SDConfig {
        SDConfig {
            d_model: 12,
            d_style: 8,
            n_blocks: 2,
            n_heads: 2,
            n_queries: 16,
            style_s_width: 4,
            style_v_width: 4,
            sd_input: SdInput::PerModality,
            seed: 59,
        }
    }

    fn store(cfg: &SDConfig) -> ParamStore {
        let mut p = ParamStore::new();
        init_style_disentangle(&mut p, cfg).unwrap();
        init_style_heads(&mut p, cfg.d_style, cfg.seed);
        p
    }

    fn bundle(seed: f64) -> Array2<f64> {
        Array2::from_shape_fn((16, 12), |(i, j)| ((i * 3 + j) as f64 * 0.23 + seed).sin())
    }

    #[test]
    fn uniform_heads_give_log_class_count_loss() {
        let c = cfg();
        let mut p = store(&c);
        for (head, _) in STYLE_HEADS {
            p.get_mut(&format!("heads.{head}.w")).fill(0.0);
        }
        let mut ctx = TapeCtx::frozen(&p);
        let e = ctx.g.constant(Array2::ones((1, 8)));
        let pr = ctx.g.constant(Array2::ones((1, 8)));
        let t = ClsTargets { emotion: 3, gender: 1, age: 2, tone: 0 };
        let loss = l_cls(&mut ctx, e, pr, &t).unwrap();
        let expect = (7f64).ln() + (2f64).ln() + (4f64).ln() + (3f64).ln();
        assert!((ctx.g.scalar(loss) - expect).abs() < 1e-12);
    }

    #[test]
    fn alignment_loss_and_sac_identity_are_exact() {
        let c = cfg();
        let p = store(&c);
        let mut ctx = TapeCtx::frozen(&p);
        let ones = ctx.g.constant(Array2::ones((16, 4)));
        let zeros = ctx.g.constant(Array2::zeros((16, 4)));
        let same = ctx.g.constant(Array2::ones((16, 4)));
        let sal = l_sal(&mut ctx, ones, zeros, same, same).unwrap();
        assert_eq!(ctx.g.scalar(sal), 64.0);

        let e = ctx.g.constant(Array2::ones((1, 8)));
        let pr = ctx.g.constant(Array2::ones((1, 8)));
        let t = ClsTargets { emotion: 0, gender: 0, age: 0, tone: 0 };
        let cls = l_cls(&mut ctx, e, pr, &t).unwrap();
        let sac = l_sac(&mut ctx, sal, cls);
        assert_eq!(ctx.g.scalar(sac), ctx.g.scalar(sal) + ctx.g.scalar(cls));

        let wide = ctx.g.constant(Array2::ones((16, 5)));
        assert!(l_sal(&mut ctx, ones, wide, same, same).is_err());
        assert!(l_cls(&mut ctx, e, pr, &ClsTargets { emotion: 7, gender: 0, age: 0, tone: 0 }).is_err());
    }

    #[test]
    fn extraction_shapes_determinism_and_bank_distinctness() {
        let c = cfg();
        let p = store(&c);
        let run = || {
            let mut ctx = TapeCtx::frozen(&p);
            let rs = ctx.g.constant(bundle(0.0));
            let rv = ctx.g.constant(bundle(1.0));
            let sig = sd_extract(&mut ctx, &c, rs, Some(rv)).unwrap();
            (
                ctx.g.value(sig.e_s).clone(),
                ctx.g.value(sig.e_v).clone(),
                ctx.g.value(sig.p_s).clone(),
                ctx.g.value(sig.p_v).clone(),
            )
        };
        let (e_s, e_v, p_s, p_v) = run();
        let again = run();
        for m in [&e_s, &e_v, &p_s, &p_v] {
            assert_eq!(m.dim(), (16, 8));
        }
        assert_eq!(e_s, again.0);
        assert_eq!(p_v, again.3);
        assert!((&e_s - &p_s).mapv(f64::abs).sum() > 1e-6, "emotion vs profile banks");
        assert!((&e_s - &e_v).mapv(f64::abs).sum() > 1e-6, "speech vs video banks");
    }

    #[test]
    fn input_mode_gates_vid_bundle_requirement() {
        let mut c = cfg();
        let p = store(&c);
        let mut ctx = TapeCtx::frozen(&p);
        let rs = ctx.g.constant(bundle(0.0));
        let err = sd_extract(&mut ctx, &c, rs, None).unwrap_err();
        assert!(err.to_string().contains("VID signal bundle"));

        c.sd_input = SdInput::RSOnly;
        let sig = sd_extract(&mut ctx, &c, rs, None).unwrap();
        let e_v = ctx.g.value(sig.e_v).clone();
        let rv = ctx.g.constant(bundle(1.0));
        let sig2 = sd_extract(&mut ctx, &c, rs, Some(rv)).unwrap();
        assert_eq!(e_v, ctx.g.value(sig2.e_v).clone(), "rs-only must ignore r_v");
    }

    #[test]
    fn fusion_shapes_and_crossmodal_mean() {
        let c = cfg();
        let p = store(&c);
        let mut ctx = TapeCtx::frozen(&p);
        let rs = ctx.g.constant(bundle(0.0));
        let rv = ctx.g.constant(bundle(1.0));
        let sig = sd_extract(&mut ctx, &c, rs, Some(rv)).unwrap();
        let (s_s, s_v) = fuse_style(&mut ctx, &c, &sig).unwrap();
        assert_eq!(ctx.g.value(s_s).dim(), (16, 4));
        assert_eq!(ctx.g.value(s_v).dim(), (16, 4));

        let e = fuse_crossmodal(&mut ctx, sig.e_s, sig.e_v).unwrap();
        assert_eq!(ctx.g.value(e).dim(), (1, 8));
        let brute = {
            let a = ctx.g.value(sig.e_s);
            let b = ctx.g.value(sig.e_v);
            let avg = (a + b) * 0.5;
            avg.mean_axis(ndarray::Axis(0)).unwrap()
        };
        for j in 0..8 {
            assert!((ctx.g.value(e)[(0, j)] - brute[j]).abs() < 1e-12);
        }

        let short = ctx.g.constant(Array2::zeros((4, 8)));
        assert!(fuse_crossmodal(&mut ctx, sig.e_s, short).is_err());
    }

    #[test]
    fn param_inventories_match_formulas() {
        let c = cfg();
        let p = store(&c);
        assert_eq!(p.count_scalars("style_disentangle."), sd_scalars(&c));
        assert_eq!(p.count_scalars("heads."), heads_scalars(c.d_style));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg();
        let mut p = store(&c);
        let kicked: Vec<String> = p
            .names()
            .filter(|n| n.contains(".attn.w") || n.contains(".ffn.w") || n.contains(".in.w"))
            .map(String::from)
            .collect();
        for name in kicked {
            let dim = p.get(&name).dim();
            let mut rng = seeded_rng(7, &name);
            *p.get_mut(&name) = normal_matrix(&mut rng, dim.0, dim.1, 0.3);
        }
        let gold_s = Array2::from_shape_fn((16, 4), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let gold_v = Array2::from_shape_fn((16, 4), |(i, j)| ((2 * i + j) as f64 * 0.17).sin());
        let targets = ClsTargets { emotion: 4, gender: 1, age: 3, tone: 2 };

        let build = |ctx: &mut TapeCtx| -> NodeId {
            let rs = ctx.g.constant(bundle(0.0));
            let rv = ctx.g.constant(bundle(1.0));
            let sig = sd_extract(ctx, &c, rs, Some(rv)).unwrap();
            let (s_s, s_v) = fuse_style(ctx, &c, &sig).unwrap();
            let gs = ctx.g.constant(gold_s.clone());
            let gv = ctx.g.constant(gold_v.clone());
            let sal = l_sal(ctx, s_s, gs, s_v, gv).unwrap();
            let e = fuse_crossmodal(ctx, sig.e_s, sig.e_v).unwrap();
            let pr = fuse_crossmodal(ctx, sig.p_s, sig.p_v).unwrap();
            let cls = l_cls(ctx, e, pr, &targets).unwrap();
            l_sac(ctx, sal, cls)
        };
        let loss_of = |p: &ParamStore| -> f64 {
            let mut ctx = TapeCtx::frozen(p);
            let loss = build(&mut ctx);
            ctx.g.scalar(loss)
        };

        let mut ctx = TapeCtx::new(&p, |n| {
            n.starts_with("style_disentangle.") || n.starts_with("heads.")
        });
        let loss = build(&mut ctx);
        let grads = ctx.backward_params(loss);

        let eps = 1e-5;
        for name in [
            "style_disentangle.q.e_s",
            "style_disentangle.q.p_v",
            "style_disentangle.enc_e.blk0.attn.wv",
            "style_disentangle.enc_p.blk1.ffn.w2",
            "style_disentangle.style.speech.w",
            "heads.emotion.w",
            "heads.tone.b",
        ] {
            let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            let dim = p.get(name).dim();
            let total = dim.0 * dim.1;
            for flat in (0..total).step_by((total / 10).max(1)) {
                let (r, col) = (flat / dim.1, flat % dim.1);
                let mut plus = p.clone();
                plus.get_mut(name)[(r, col)] += eps;
                let mut minus = p.clone();
                minus.get_mut(name)[(r, col)] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = g[(r, col)];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{r},{col}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
