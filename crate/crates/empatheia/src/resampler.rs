//! Fixed-length query resampler: learned query rows cross-attend to a
//! variable-length input sequence through a small pre-norm transformer stack.

use crate::autodiff::NodeId;
use crate::error::EmpatheiaError;
use crate::params::{ParamStore, TapeCtx};
use crate::rng::{normal_matrix, seeded_rng};

use ndarray::Array2;

#[derive(Debug, Clone, PartialEq)]
pub struct ResamplerConfig {
    /// width of the source rows fed to the input transform
    pub d_in: usize,
    /// width the queries (and all block weights) live in
    pub d_work: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub seed: u64,
}

impl ResamplerConfig {
    pub fn validate(&self) -> Result<(), EmpatheiaError> {
        if self.d_in == 0 || self.d_work == 0 || self.n_blocks == 0 || self.n_heads == 0 {
            return Err(EmpatheiaError::domain(
                "resampler sizes must all be positive",
            ));
        }
        if self.d_work % self.n_heads != 0 {
            return Err(EmpatheiaError::domain(format!(
                "resampler work width {} is not divisible by {} heads",
                self.d_work, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Register one resampler trunk under `ns.` prefixed names.
pub fn init_resampler(
    store: &mut ParamStore,
    cfg: &ResamplerConfig,
    ns: &str,
) -> Result<(), EmpatheiaError> {
    cfg.validate()?;
    let mut normal = |name: String, rows: usize, cols: usize| {
        let mut rng = seeded_rng(cfg.seed, &name);
        store.insert(&name, normal_matrix(&mut rng, rows, cols, 0.02));
    };
    normal(format!("{ns}.in.w1"), cfg.d_in, cfg.d_in);
    normal(format!("{ns}.in.w2"), cfg.d_in, cfg.d_work);
    for i in 0..cfg.n_blocks {
        for w in ["wq", "wk", "wv", "wo"] {
            normal(format!("{ns}.blk{i}.attn.{w}"), cfg.d_work, cfg.d_work);
        }
        normal(format!("{ns}.blk{i}.ffn.w1"), cfg.d_work, 2 * cfg.d_work);
        normal(format!("{ns}.blk{i}.ffn.w2"), 2 * cfg.d_work, cfg.d_work);
    }
    fn zeros(store: &mut ParamStore, name: String, cols: usize) {
        store.insert(&name, Array2::zeros((1, cols)));
    }
    fn ones(store: &mut ParamStore, name: String, cols: usize) {
        store.insert(&name, Array2::ones((1, cols)));
    }
    zeros(store, format!("{ns}.in.b1"), cfg.d_in);
    zeros(store, format!("{ns}.in.b2"), cfg.d_work);
    ones(store, format!("{ns}.ln_in.g"), cfg.d_work);
    zeros(store, format!("{ns}.ln_in.b"), cfg.d_work);
    for i in 0..cfg.n_blocks {
        ones(store, format!("{ns}.blk{i}.ln_q.g"), cfg.d_work);
        zeros(store, format!("{ns}.blk{i}.ln_q.b"), cfg.d_work);
        ones(store, format!("{ns}.blk{i}.ln_f.g"), cfg.d_work);
        zeros(store, format!("{ns}.blk{i}.ln_f.b"), cfg.d_work);
        zeros(store, format!("{ns}.blk{i}.ffn.b1"), 2 * cfg.d_work);
        zeros(store, format!("{ns}.blk{i}.ffn.b2"), cfg.d_work);
    }
    ones(store, format!("{ns}.ln_out.g"), cfg.d_work);
    zeros(store, format!("{ns}.ln_out.b"), cfg.d_work);
    Ok(())
}

/// Scalar parameters one trunk holds, for freeze audits and tests.
pub fn resampler_scalars(cfg: &ResamplerConfig) -> usize {
    let d = cfg.d_work;
    let input = cfg.d_in * cfg.d_in + cfg.d_in + cfg.d_in * d + d;
    let per_block = 4 * d * d + (d * 2 * d) + 2 * d + (2 * d * d) + d + 4 * d;
    input + 2 * d + cfg.n_blocks * per_block + 2 * d
}

fn ln(ctx: &mut TapeCtx, x: NodeId, ns: &str, which: &str) -> NodeId {
    let g = ctx.param(&format!("{ns}.{which}.g"));
    let b = ctx.param(&format!("{ns}.{which}.b"));
    ctx.g.layer_norm(x, g, b)
}

fn linear(ctx: &mut TapeCtx, x: NodeId, w: &str, b: &str) -> NodeId {
    let w = ctx.param(w);
    let b = ctx.param(b);
    let xw = ctx.g.matmul(x, w);
    ctx.g.add_row(xw, b)
}

/// Run the trunk: queries (n_q x d_work) attend to source rows (len x d_in).
pub fn forward_resampler(
    ctx: &mut TapeCtx,
    cfg: &ResamplerConfig,
    ns: &str,
    queries: NodeId,
    source: NodeId,
) -> Result<NodeId, EmpatheiaError> {
    cfg.validate()?;
    let (src_rows, src_cols) = ctx.g.value(source).dim();
    if src_rows == 0 {
        return Err(EmpatheiaError::precondition(format!(
            "{ns}: resampler source sequence is empty"
        )));
    }
    if src_cols != cfg.d_in {
        return Err(EmpatheiaError::dimension(format!(
            "{ns}: source rows are {src_cols} wide, trunk expects {}",
            cfg.d_in
        )));
    }
    let q_cols = ctx.g.value(queries).ncols();
    if q_cols != cfg.d_work {
        return Err(EmpatheiaError::dimension(format!(
            "{ns}: query rows are {q_cols} wide, trunk expects {}",
            cfg.d_work
        )));
    }

    let up = linear(ctx, source, &format!("{ns}.in.w1"), &format!("{ns}.in.b1"));
    let act = ctx.g.silu(up);
    let proj = linear(ctx, act, &format!("{ns}.in.w2"), &format!("{ns}.in.b2"));
    let x = ln(ctx, proj, ns, "ln_in");

    let d_head = cfg.d_work / cfg.n_heads;
    let inv_sqrt = 1.0 / (d_head as f64).sqrt();
    let mut q = queries;
    for i in 0..cfg.n_blocks {
        let blk = format!("{ns}.blk{i}");
        let normed = ln(ctx, q, &blk, "ln_q");
        let wq = ctx.param(&format!("{blk}.attn.wq"));
        let wk = ctx.param(&format!("{blk}.attn.wk"));
        let wv = ctx.param(&format!("{blk}.attn.wv"));
        let qp = ctx.g.matmul(normed, wq);
        let kp = ctx.g.matmul(x, wk);
        let vp = ctx.g.matmul(x, wv);
        let mut heads = Vec::with_capacity(cfg.n_heads);
        for h in 0..cfg.n_heads {
            let lo = h * d_head;
            let hi = lo + d_head;
            let qh = ctx.g.slice_cols(qp, lo, hi);
            let kh = ctx.g.slice_cols(kp, lo, hi);
            let vh = ctx.g.slice_cols(vp, lo, hi);
            let scores = ctx.g.matmul_nt(qh, kh);
            let scaled = ctx.g.scale(scores, inv_sqrt);
            let probs = ctx.g.softmax_rows(scaled);
            heads.push(ctx.g.matmul(probs, vh));
        }
        let merged = ctx.g.concat_cols(&heads);
        let wo = ctx.param(&format!("{blk}.attn.wo"));
        let attn_out = ctx.g.matmul(merged, wo);
        q = ctx.g.add(q, attn_out);

        let normed = ln(ctx, q, &blk, "ln_f");
        let up = linear(ctx, normed, &format!("{blk}.ffn.w1"), &format!("{blk}.ffn.b1"));
        let act = ctx.g.silu(up);
        let down = linear(ctx, act, &format!("{blk}.ffn.w2"), &format!("{blk}.ffn.b2"));
        q = ctx.g.add(q, down);
    }
    Ok(ln(ctx, q, ns, "ln_out"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::TapeCtx;

    fn cfg() -> ResamplerConfig {
        ResamplerConfig {
            d_in: 5,
            d_work: 8,
            n_blocks: 2,
            n_heads: 2,
            seed: 23,
        }
    }

    fn store() -> ParamStore {
        let mut p = ParamStore::new();
        init_resampler(&mut p, &cfg(), "trunk").unwrap();
        let mut rng = seeded_rng(23, "trunk.queries");
        p.insert("trunk.queries", normal_matrix(&mut rng, 4, 8, 0.5));
        p
    }

    fn source() -> Array2<f64> {
        Array2::from_shape_fn((3, 5), |(i, j)| ((i * 7 + j) as f64 * 0.13).sin())
    }

    #[test]
    fn config_divisibility_enforced() {
        let mut c = cfg();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        c.n_heads = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn param_inventory_matches_formula() {
        let p = store();
        assert_eq!(
            p.count_scalars("trunk.") - 4 * 8,
            resampler_scalars(&cfg())
        );
    }

    #[test]
    fn forward_shape_and_determinism() {
        let p = store();
        let run = || {
            let mut ctx = TapeCtx::frozen(&p);
            let q = ctx.param("trunk.queries");
            let s = ctx.g.constant(source());
            let out = forward_resampler(&mut ctx, &cfg(), "trunk", q, s).unwrap();
            ctx.g.value(out).clone()
        };
        let a = run();
        let b = run();
        assert_eq!(a.dim(), (4, 8));
        assert_eq!(a, b);
    }

    #[test]
    fn output_ignores_source_row_order() {
        let p = store();
        let run = |src: Array2<f64>| {
            let mut ctx = TapeCtx::frozen(&p);
            let q = ctx.param("trunk.queries");
            let s = ctx.g.constant(src);
            let out = forward_resampler(&mut ctx, &cfg(), "trunk", q, s).unwrap();
            ctx.g.value(out).clone()
        };
        let fwd = run(source());
        let mut flipped = Array2::zeros((3, 5));
        for i in 0..3 {
            flipped.row_mut(i).assign(&source().row(2 - i));
        }
        let rev = run(flipped);
        let max = (&fwd - &rev).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(max < 1e-12, "row order changed output by {max}");
    }

    #[test]
    fn rejects_empty_and_misshapen_source() {
        let p = store();
        let mut ctx = TapeCtx::frozen(&p);
        let q = ctx.param("trunk.queries");
        let empty = ctx.g.constant(Array2::zeros((0, 5)));
        assert!(forward_resampler(&mut ctx, &cfg(), "trunk", q, empty).is_err());
        let wide = ctx.g.constant(Array2::zeros((2, 6)));
        assert!(forward_resampler(&mut ctx, &cfg(), "trunk", q, wide).is_err());
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut p = store();
        // give every weight some signal so gradients are not degenerate
        for name in ["trunk.blk0.attn.wq", "trunk.blk1.ffn.w2", "trunk.in.w2"] {
            let mut rng = seeded_rng(31, name);
            let dim = p.get(name).dim();
            *p.get_mut(name) = normal_matrix(&mut rng, dim.0, dim.1, 0.3);
        }
        let target = Array2::from_shape_fn((4, 8), |(i, j)| ((i + j) as f64 * 0.21).cos());
        let loss_of = |p: &ParamStore| -> f64 {
            let mut ctx = TapeCtx::frozen(p);
            let q = ctx.param("trunk.queries");
            let s = ctx.g.constant(source());
            let out = forward_resampler(&mut ctx, &cfg(), "trunk", q, s).unwrap();
            let t = ctx.g.constant(target.clone());
            let loss = ctx.g.sq_diff_sum(out, t);
            ctx.g.scalar(loss)
        };

        let mut ctx = TapeCtx::new(&p, |_| true);
        let q = ctx.param("trunk.queries");
        let s = ctx.g.constant(source());
        let out = forward_resampler(&mut ctx, &cfg(), "trunk", q, s).unwrap();
        let t = ctx.g.constant(target.clone());
        let loss = ctx.g.sq_diff_sum(out, t);
        let grads = ctx.backward_params(loss);

        let eps = 1e-5;
        for name in [
            "trunk.queries",
            "trunk.in.w2",
            "trunk.blk0.attn.wq",
            "trunk.blk0.attn.wv",
            "trunk.blk1.ffn.w2",
            "trunk.ln_out.g",
        ] {
            let g = grads.get(name).unwrap_or_else(|| panic!("no grad for {name}"));
            let dim = p.get(name).dim();
            let total = dim.0 * dim.1;
            for flat in (0..total).step_by((total / 12).max(1)) {
                let (r, c) = (flat / dim.1, flat % dim.1);
                let mut plus = p.clone();
                plus.get_mut(name)[(r, c)] += eps;
                let mut minus = p.clone();
                minus.get_mut(name)[(r, c)] -= eps;
                let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * eps);
                let an = g[(r, c)];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < 1e-3,
                    "{name}[{r},{c}]: analytic {an} vs fd {fd}"
                );
            }
        }
    }
}
