//! Content synchronizer: encode target-text hidden states into a shared
//! latent and decode it into per-modality content features for the
//! generators, trained against gold content with a squared-error loss.

use ndarray::Array2;

use crate::autodiff::NodeId;
use crate::error::EmpatheiaError;
use crate::features::Modality;
use crate::params::{ParamStore, TapeCtx};
use crate::resampler::{forward_resampler, init_resampler, resampler_scalars, ResamplerConfig};
use crate::rng::{normal_matrix, seeded_rng};

/// Scale applied to caller-supplied latent noise when VAE-style sampling is on.
pub const VAE_NOISE_STD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq)]
pub struct CSConfig {
    /// backbone hidden width (input rows)
    pub d_model: usize,
    /// shared latent width
    pub d_latent: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    /// rows per content block
    pub n_queries: usize,
    /// speech generator text-content width
    pub d_content_s: usize,
    /// video generator audio-content width
    pub d_content_v: usize,
    /// optional latent jitter during training; reconstruction loss is
    /// unchanged (no KL term by default)
    pub vae_sampling: bool,
    pub seed: u64,
}

impl CSConfig {
    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        if self.n_queries == 0 || self.d_content_s == 0 || self.d_content_v == 0 {
            return Err(EmpatheiaError::domain(
                "content synchronizer sizes must all be positive",
            ));
        }
        self.enc_trunk().validate()?;
        self.dec_trunk().validate()
    }

    fn enc_trunk(&self) -> ResamplerConfig {
        ResamplerConfig {
            d_in: self.d_model,
            d_work: self.d_latent,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            seed: self.seed,
        }
    }

    fn dec_trunk(&self) -> ResamplerConfig {
        ResamplerConfig {
            d_in: self.d_latent,
            d_work: self.d_latent,
            n_blocks: self.n_blocks,
            n_heads: self.n_heads,
            seed: self.seed.wrapping_add(1),
        }
    }

    pub fn d_content(&self, modality: Modality) -> Result<usize, EmpatheiaError> {
        match modality {
            Modality::Speech => Ok(self.d_content_s),
            Modality::Video => Ok(self.d_content_v),
            Modality::Text => Err(EmpatheiaError::domain(
                "content synchronizer handles speech and video, not text",
            )),
        }
    }
}

fn bank(modality: Modality) -> Result<&'static str, EmpatheiaError> {
    match modality {
        Modality::Speech => Ok("speech"),
        Modality::Video => Ok("video"),
        Modality::Text => Err(EmpatheiaError::domain(
            "content synchronizer handles speech and video, not text",
        )),
    }
}

/// Register encoder/decoder trunks, per-modality query banks, and output
/// projections under `content_sync.`.
pub fn init_content_sync(store: &mut ParamStore, cfg: &CSConfig) -> Result<(), EmpatheiaError> {
    cfg.validate()?;
    init_resampler(store, &cfg.enc_trunk(), "content_sync.enc")?;
    init_resampler(store, &cfg.dec_trunk(), "content_sync.dec")?;
    for (m, width) in [("speech", cfg.d_content_s), ("video", cfg.d_content_v)] {
        let q_name = format!("content_sync.q.{m}");
        let mut rng = seeded_rng(cfg.seed, &q_name);
        store.insert(&q_name, normal_matrix(&mut rng, cfg.n_queries, cfg.d_latent, 0.5));
        let w_name = format!("content_sync.out.{m}.w");
        let mut rng = seeded_rng(cfg.seed, &w_name);
        store.insert(&w_name, normal_matrix(&mut rng, cfg.d_latent, width, 0.1));
        store.insert(&format!("content_sync.out.{m}.b"), Array2::zeros((1, width)));
    }
    Ok(())
}

/// Scalar parameters the module holds, for audits and tests.
pub fn cs_scalars(cfg: &CSConfig) -> usize {
    resampler_scalars(&cfg.enc_trunk())
        + resampler_scalars(&cfg.dec_trunk())
        + 2 * cfg.n_queries * cfg.d_latent
        + (cfg.d_latent + 1) * (cfg.d_content_s + cfg.d_content_v)
}

/// Encode target-text rows into the shared content latent (n_queries x d_latent).
pub fn cs_encode(
    ctx: &mut TapeCtx,
    cfg: &CSConfig,
    r_t: NodeId,
    modality: Modality,
    noise: Option<&Array2<f64>>,
) -> Result<NodeId, EmpatheiaError> {
    let q = ctx.param(&format!("content_sync.q.{}", bank(modality)?));
    let z = forward_resampler(ctx, &cfg.enc_trunk(), "content_sync.enc", q, r_t)?;
    if !cfg.vae_sampling {
        return Ok(z);
    }
    match noise {
        None => Ok(z),
        Some(n) => {
            if n.dim() != (cfg.n_queries, cfg.d_latent) {
                return Err(EmpatheiaError::dimension(format!(
                    "latent noise is {:?}, expected ({}, {})",
                    n.dim(),
                    cfg.n_queries,
                    cfg.d_latent
                )));
            }
            let jitter = ctx.g.constant(n * VAE_NOISE_STD);
            Ok(ctx.g.add(z, jitter))
        }
    }
}

/// Decode the content latent into generator-facing content features
/// (n_queries x d_content for the modality).
pub fn cs_decode(
    ctx: &mut TapeCtx,
    cfg: &CSConfig,
    z_c: NodeId,
    modality: Modality,
) -> Result<NodeId, EmpatheiaError> {
    let m = bank(modality)?;
    let q = ctx.param(&format!("content_sync.q.{m}"));
    let dec = forward_resampler(ctx, &cfg.dec_trunk(), "content_sync.dec", q, z_c)?;
    let w = ctx.param(&format!("content_sync.out.{m}.w"));
    let b = ctx.param(&format!("content_sync.out.{m}.b"));
    let proj = ctx.g.matmul(dec, w);
    Ok(ctx.g.add_row(proj, b))
}

fn check_pair(
    ctx: &TapeCtx,
    got: NodeId,
    want: NodeId,
    label: &str,
) -> Result<(), EmpatheiaError> {
    let a = ctx.g.value(got).dim();
    let b = ctx.g.value(want).dim();
    if a != b {
        return Err(EmpatheiaError::dimension(format!(
            "{label}: predicted {a:?} vs gold {b:?}"
        )));
    }
    Ok(())
}

/// Content synchronization loss: summed squared error of both modality
/// reconstructions against their gold content features.
pub fn l_ccl(
    ctx: &mut TapeCtx,
    c_s: NodeId,
    c_hat_s: NodeId,
    c_v: NodeId,
    c_hat_v: NodeId,
) -> Result<NodeId, EmpatheiaError> {
    check_pair(ctx, c_s, c_hat_s, "speech content")?;
    check_pair(ctx, c_v, c_hat_v, "video content")?;
    let s = ctx.g.sq_diff_sum(c_s, c_hat_s);
    let v = ctx.g.sq_diff_sum(c_v, c_hat_v);
    Ok(ctx.g.add(s, v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> CSConfig {
        CSConfig {
            d_model: 12,
            d_latent: 8,
            n_blocks: 2,
            n_heads: 2,
            n_queries: 16,
            d_content_s: 6,
            d_content_v: 5,
            vae_sampling: false,
            seed: 41,
        }
    }

    fn store(cfg: &CSConfig) -> ParamStore {
        let mut p = ParamStore::new();
        init_content_sync(&mut p, cfg).unwrap();
        p
    }

    fn r_t() -> Array2<f64> {
        Array2::from_shape_fn((9, 12), |(i, j)| ((i * 5 + j) as f64 * 0.19).sin())
    }

    #[test]
    fn loss_of_unit_difference_blocks_is_exact() {
        let c = cfg();
        let p = store(&c);
        let mut ctx = TapeCtx::frozen(&p);
        let ones = ctx.g.constant(Array2::ones((16, 4)));
        let zeros = ctx.g.constant(Array2::zeros((16, 4)));
        let same = ctx.g.constant(Array2::ones((16, 4)));
        let speech_only = l_ccl(&mut ctx, ones, zeros, same, same).unwrap();
        assert_eq!(ctx.g.scalar(speech_only), 64.0);
        let both = l_ccl(&mut ctx, ones, zeros, ones, zeros).unwrap();
        assert_eq!(ctx.g.scalar(both), 128.0);
    }

    #[test]
    fn encode_decode_shapes_and_determinism() {
        let c = cfg();
        let p = store(&c);
        let run = |m: Modality| {
            let mut ctx = TapeCtx::frozen(&p);
            let rt = ctx.g.constant(r_t());
            let z = cs_encode(&mut ctx, &c, rt, m, None).unwrap();
            let out = cs_decode(&mut ctx, &c, z, m).unwrap();
            (ctx.g.value(z).clone(), ctx.g.value(out).clone())
        };
        let (z_s, c_s) = run(Modality::Speech);
        let (z_s2, c_s2) = run(Modality::Speech);
        let (z_v, c_v) = run(Modality::Video);
        assert_eq!(z_s.dim(), (16, 8));
        assert_eq!(c_s.dim(), (16, 6));
        assert_eq!(c_v.dim(), (16, 5));
        assert_eq!(z_s, z_s2);
        assert_eq!(c_s, c_s2);
        let diff = (&z_s - &z_v).mapv(f64::abs).sum();
        assert!(diff > 1e-6, "modality query banks produced identical latents");
    }

    #[test]
    fn rejects_text_modality_and_bad_inputs() {
        let c = cfg();
        let p = store(&c);
        let mut ctx = TapeCtx::frozen(&p);
        let rt = ctx.g.constant(r_t());
        assert!(cs_encode(&mut ctx, &c, rt, Modality::Text, None).is_err());
        let empty = ctx.g.constant(Array2::zeros((0, 12)));
        assert!(cs_encode(&mut ctx, &c, empty, Modality::Speech, None).is_err());
        let narrow = ctx.g.constant(Array2::zeros((4, 7)));
        assert!(cs_encode(&mut ctx, &c, narrow, Modality::Speech, None).is_err());
        let a = ctx.g.constant(Array2::ones((16, 4)));
        let b = ctx.g.constant(Array2::ones((16, 5)));
        assert!(l_ccl(&mut ctx, a, b, a, a).is_err());
    }

    #[test]
    fn vae_flag_gates_latent_jitter() {
        let mut c = cfg();
        let p = store(&c);
        let noise = Array2::from_elem((16, 8), 1.0);
        let run = |c: &CSConfig, n: Option<&Array2<f64>>| {
            let mut ctx = TapeCtx::frozen(&p);
            let rt = ctx.g.constant(r_t());
            let z = cs_encode(&mut ctx, c, rt, Modality::Speech, n).unwrap();
            ctx.g.value(z).clone()
        };
        let plain = run(&c, None);
        assert_eq!(run(&c, Some(&noise)), plain, "flag off must ignore noise");
        c.vae_sampling = true;
        assert_eq!(run(&c, None), plain, "no noise provided, no jitter");
        let jittered = run(&c, Some(&noise));
        let expect = &plain + VAE_NOISE_STD;
        let max = (&jittered - &expect).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(max < 1e-15);
    }

    #[test]
    fn param_inventory_matches_formula() {
        let c = cfg();
        let p = store(&c);
        assert_eq!(p.count_scalars("content_sync."), cs_scalars(&c));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let c = cfg();
        let mut p = store(&c);
        // lift weights off the tame init so gradients clear fd noise
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
        let gold_s = Array2::from_shape_fn((16, 6), |(i, j)| ((i + 2 * j) as f64 * 0.11).cos());
        let gold_v = Array2::from_shape_fn((16, 5), |(i, j)| ((2 * i + j) as f64 * 0.17).sin());
        let loss_of = |p: &ParamStore| -> f64 {
            let mut ctx = TapeCtx::frozen(p);
            let rt = ctx.g.constant(r_t());
            let zs = cs_encode(&mut ctx, &c, rt, Modality::Speech, None).unwrap();
            let cs = cs_decode(&mut ctx, &c, zs, Modality::Speech).unwrap();
            let zv = cs_encode(&mut ctx, &c, rt, Modality::Video, None).unwrap();
            let cv = cs_decode(&mut ctx, &c, zv, Modality::Video).unwrap();
            let gs = ctx.g.constant(gold_s.clone());
            let gv = ctx.g.constant(gold_v.clone());
            let loss = l_ccl(&mut ctx, cs, gs, cv, gv).unwrap();
            ctx.g.scalar(loss)
        };

        let mut ctx = TapeCtx::new(&p, |n| n.starts_with("content_sync."));
        let rt = ctx.g.constant(r_t());
        let zs = cs_encode(&mut ctx, &c, rt, Modality::Speech, None).unwrap();
        let cs = cs_decode(&mut ctx, &c, zs, Modality::Speech).unwrap();
        let zv = cs_encode(&mut ctx, &c, rt, Modality::Video, None).unwrap();
        let cv = cs_decode(&mut ctx, &c, zv, Modality::Video).unwrap();
        let gs = ctx.g.constant(gold_s.clone());
        let gv = ctx.g.constant(gold_v.clone());
        let loss = l_ccl(&mut ctx, cs, gs, cv, gv).unwrap();
        let grads = ctx.backward_params(loss);

        let eps = 1e-5;
        for name in [
            "content_sync.q.speech",
            "content_sync.enc.blk0.attn.wk",
            "content_sync.dec.blk1.ffn.w1",
            "content_sync.out.video.w",
            "content_sync.out.speech.b",
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
