//! Layer stacks: block-state layers, the sliding-window and recurrent
//! baselines, token embedding and the language-model head.

mod checkpoint;
mod config;

pub use checkpoint::{load_checkpoint, save_checkpoint, MANIFEST_FILE, PARAMS_FILE};
pub use config::{BaselineKind, BlockExec, LayerKind, ModelConfig, PARALLEL_GROUP_TOKENS};

use std::rc::Rc;

use num_complex::Complex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{bst_sublayer, init_norm, init_sublayer, norm, AttentionBlockConfig, PrevBlock};
use crate::context::{add_context_ids, collect_mh, collect_sh, shift_with_init, window_last_states, ContextTensor, Lift, Variant};
use crate::error::{config_err, dim_err, Result};
use crate::params::{Bound, ParamStore};
use crate::real::Real;
use crate::ssm::{
    build_unstructured, conv_op, init_s4d, init_unstructured, structured_kernel, DiagonalSsm, DiagonalVars, KernelFamily,
    KernelSource, UnstructuredFilter, UnstructuredVars,
};
use crate::tensor::{finite_diff_check, FdReport, FdSettings, Tape, Tensor, Var};

pub fn layer_prefix(index: usize) -> String {
    format!("layer{index}")
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f64> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
}

impl<T: Real> Model<T> {
    /// Seeded initialisation of every parameter.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;
        store.init_dense("embed", &[cfg.vocab_size, d], 1, &mut rng);
        for i in 1..=cfg.num_layers {
            init_layer(&mut store, &cfg, i, &mut rng)?;
        }
        init_norm(&mut store, "final_norm", d);
        store.init_dense("head", &[d, cfg.vocab_size], d, &mut rng);
        Ok(Self { cfg, params: store })
    }

    /// Logits (batch, L, vocab) for `tokens` laid out as `batch` rows of
    /// equal length.
    pub fn forward(&self, tape: &Tape<T>, p: &Bound, tokens: &[usize], batch: usize, exec: BlockExec) -> Result<Var> {
        model_forward(tape, p, &self.cfg, tokens, batch, exec)
    }

    /// Forward pass on an inference tape.
    pub fn logits(&self, tokens: &[usize], batch: usize, exec: BlockExec) -> Result<Tensor<T>> {
        let tape = Tape::inference();
        let p = self.params.bind(&tape);
        let y = self.forward(&tape, &p, tokens, batch, exec)?;
        Ok((*tape.value(y)).clone())
    }

    /// Keeps every step size at most 1.
    pub fn project_constraints(&mut self) {
        for (name, t) in self.params.iter_mut() {
            if name.ends_with(".log_delta") {
                t.data_mut().iter_mut().for_each(|x| *x = x.min(T::zero()));
            }
        }
    }

    /// Kernel generator of a block-state layer.
    pub fn kernel_source(&self, index: usize) -> Result<KernelSource<T>> {
        if self.cfg.layer_kind(index) != LayerKind::BlockState {
            return Err(config_err(format!("layer {index} has no SSM")));
        }
        let k = format!("{}.ssm.k", layer_prefix(index));
        let g = |n: &str| -> Result<Tensor<T>> { Ok(self.params.get(&format!("{k}.{n}"))?.clone()) };
        Ok(match self.cfg.kernel_family {
            KernelFamily::Structured => KernelSource::Structured(DiagonalSsm {
                log_neg_re: g("log_neg_re")?,
                lambda_im: g("lambda_im")?,
                b: vec![Complex::new(T::one(), T::zero()); self.cfg.state_size],
                c_re: g("c_re")?,
                c_im: g("c_im")?,
                log_delta: g("log_delta")?,
                d_skip: if self.cfg.ssm_skip { Some(g("d_skip")?) } else { None },
            }),
            KernelFamily::Unstructured => KernelSource::Unstructured(UnstructuredFilter {
                log_alpha: g("log_alpha")?,
                w1: g("w1")?,
                b1: g("b1")?,
                w2: g("w2")?,
                b2: g("b2")?,
                bias: g("bias")?,
            }),
        })
    }
}

fn init_layer<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, index: usize, rng: &mut R) -> Result<()> {
    let pre = layer_prefix(index);
    let acfg = cfg.attention()?;
    let kind = cfg.layer_kind(index);
    init_sublayer(store, &format!("{pre}.blk"), &acfg, kind != LayerKind::Slide, rng);
    match kind {
        LayerKind::Slide => {}
        LayerKind::BlockState => init_ssm(store, cfg, &pre, rng)?,
        LayerKind::BrectLike => init_recurrence(store, &acfg, &format!("{pre}.rec"), rng),
    }
    Ok(())
}

fn init_ssm<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, cfg: &ModelConfig, pre: &str, rng: &mut R) -> Result<()> {
    let (d, ds, ch) = (cfg.d_model, cfg.ssm_width()?, cfg.ssm_channels());
    let s = format!("{pre}.ssm");
    if cfg.ssm_downsample {
        store.init_dense(format!("{s}.down"), &[d, ds], d, rng);
        store.init_dense(format!("{s}.up"), &[ds, d], ds, rng);
    }
    let k = format!("{s}.k");
    match cfg.kernel_family {
        KernelFamily::Structured => {
            let m: DiagonalSsm<T> = init_s4d(cfg.state_size, ch, ds, rng)?;
            store.insert(format!("{k}.log_neg_re"), m.log_neg_re);
            store.insert(format!("{k}.lambda_im"), m.lambda_im);
            store.insert(format!("{k}.c_re"), m.c_re);
            store.insert(format!("{k}.c_im"), m.c_im);
            store.insert(format!("{k}.log_delta"), m.log_delta);
            if cfg.ssm_skip {
                store.init_const(format!("{k}.d_skip"), &[ds], 1.0);
            }
        }
        KernelFamily::Unstructured => {
            let f: UnstructuredFilter<T> = init_unstructured(ch, ds, rng)?;
            store.insert(format!("{k}.log_alpha"), f.log_alpha);
            store.insert(format!("{k}.w1"), f.w1);
            store.insert(format!("{k}.b1"), f.b1);
            store.insert(format!("{k}.w2"), f.w2);
            store.insert(format!("{k}.b2"), f.b2);
            store.insert(format!("{k}.bias"), f.bias);
        }
    }
    let c = format!("{pre}.ctx");
    match cfg.variant {
        Variant::SingleHead => {
            store.init_const(format!("{c}.scale"), &[cfg.heads], 1.0);
            store.init_const(format!("{c}.shift"), &[cfg.heads], 0.0);
        }
        Variant::MultiHead => {}
        Variant::MultiFilter => {
            store.init_const(format!("{c}.init"), &[cfg.mf_states, d], 0.0);
            if cfg.context_ids {
                store.init_dense(format!("{c}.ids"), &[cfg.mf_states, d], d, rng);
            }
        }
    }
    Ok(())
}

fn init_recurrence<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, acfg: &AttentionBlockConfig, pre: &str, rng: &mut R) {
    let d = acfg.d_model;
    init_norm(store, &format!("{pre}.ln_state"), d);
    init_norm(store, &format!("{pre}.ln_block"), d);
    for w in ["wq", "wk", "wv", "wc"] {
        store.init_dense(format!("{pre}.{w}"), &[d, d], d, rng);
    }
    store.init_const(format!("{pre}.wg"), &[d, d], 0.0);
    store.init_const(format!("{pre}.bg"), &[d], 1.0);
}

fn check_len(len: usize, window: usize) -> Result<usize> {
    if window == 0 || len == 0 || !len.is_multiple_of(window) {
        return Err(config_err(format!("sequence length {len} is not a positive multiple of window {window}")));
    }
    Ok(len / window)
}

/// SSM path of a block-state layer on normalised input `a` (batch, L, D):
/// optional down-projection, kernel generation at length L and batched
/// convolution. Returns (batch, L, d_ssm, channels).
pub fn ssm_sublayer<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, prefix: &str, a: Var) -> Result<Var> {
    let s = tape.shape(a);
    let len = s[1];
    let u = if cfg.ssm_downsample { tape.matmul(a, p.var(&format!("{prefix}.ssm.down"))?)? } else { a };
    let k = format!("{prefix}.ssm.k");
    let g = |n: &str| p.var(&format!("{k}.{n}"));
    let (bank, bias) = match cfg.kernel_family {
        KernelFamily::Structured => {
            let v = DiagonalVars {
                log_neg_re: g("log_neg_re")?,
                lambda_im: g("lambda_im")?,
                c_re: g("c_re")?,
                c_im: g("c_im")?,
                log_delta: g("log_delta")?,
            };
            let b = Rc::new(vec![Complex::new(T::one(), T::zero()); cfg.state_size]);
            let bank = structured_kernel(tape, &v, b, len)?;
            let bias = if cfg.ssm_skip {
                let ch = cfg.ssm_channels();
                let ds = tape.shape(g("d_skip")?)[0];
                let z = tape.constant(Tensor::zeros(vec![ch, ds]));
                Some(tape.add(z, tape.reshape(g("d_skip")?, &[1, ds])?)?)
            } else {
                None
            };
            (bank, bias)
        }
        KernelFamily::Unstructured => {
            let v = UnstructuredVars {
                log_alpha: g("log_alpha")?,
                w1: g("w1")?,
                b1: g("b1")?,
                w2: g("w2")?,
                b2: g("b2")?,
                bias: g("bias")?,
            };
            (build_unstructured(tape, &v, len)?, Some(v.bias))
        }
    };
    conv_op(tape, u, bank, bias)
}

/// Context tensor of a block-state layer from the SSM output
/// (batch, L, d_ssm, channels).
pub fn layer_context<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, prefix: &str, y: Var) -> Result<ContextTensor> {
    let s = tape.shape(y);
    let (batch, len, ds, ch) = (s[0], s[1], s[2], s[3]);
    let d = cfg.d_model;
    let up = |x: Var| -> Result<Var> {
        if cfg.ssm_downsample {
            tape.matmul(x, p.var(&format!("{prefix}.ssm.up"))?)
        } else {
            Ok(x)
        }
    };
    let c = format!("{prefix}.ctx");
    match cfg.variant {
        Variant::SingleHead => {
            let y = up(tape.reshape(y, &[batch, len, ds])?)?;
            let lift = Lift::Affine { scale: p.var(&format!("{c}.scale"))?, shift: p.var(&format!("{c}.shift"))? };
            collect_sh(tape, y, cfg.window, cfg.heads, lift)
        }
        Variant::MultiHead => {
            let y = up(tape.permute(y, &[0, 1, 3, 2])?)?;
            let y = tape.permute(y, &[0, 1, 3, 2])?;
            debug_assert_eq!(tape.shape(y), [batch, len, d, ch]);
            collect_mh(tape, y, cfg.window)
        }
        Variant::MultiFilter => {
            let last = up(window_last_states(tape, y, cfg.window)?)?;
            let ctx = shift_with_init(tape, last, p.var(&format!("{c}.init"))?, cfg.heads)?;
            match p.get(&format!("{c}.ids")) {
                Some(ids) => add_context_ids(tape, &ctx, ids),
                None => Ok(ctx),
            }
        }
    }
}

fn blocks_loop<T: Real>(
    tape: &Tape<T>,
    x4: Var,
    mut f: impl FnMut(usize, Var, Option<Var>) -> Result<Var>,
) -> Result<Var> {
    let nb = tape.shape(x4)[1];
    let mut outs = Vec::with_capacity(nb);
    for k in 0..nb {
        let xk = tape.narrow(x4, 1, k, 1)?;
        let prev = if k > 0 { Some(tape.narrow(x4, 1, k - 1, 1)?) } else { None };
        outs.push(f(k, xk, prev)?);
    }
    tape.concat(&outs, 1)
}

/// Runs `f(start, group, prev)` over consecutive groups of `group` blocks
/// and concatenates the results; `prev` carries the block before `start`.
fn block_groups<T: Real>(
    tape: &Tape<T>,
    x4: Var,
    group: usize,
    mut f: impl FnMut(usize, Var, PrevBlock) -> Result<Var>,
) -> Result<Var> {
    let nb = tape.shape(x4)[1];
    if nb <= group {
        return f(0, x4, PrevBlock::Shifted(None));
    }
    let mut outs = Vec::with_capacity(nb.div_ceil(group));
    for start in (0..nb).step_by(group) {
        let n = group.min(nb - start);
        let xg = tape.narrow(x4, 1, start, n)?;
        let prev = if start > 0 { Some(tape.narrow(x4, 1, start - 1, 1)?) } else { None };
        outs.push(f(start, xg, PrevBlock::Shifted(prev))?);
    }
    tape.concat(&outs, 1)
}

/// One block-state layer on `x` (batch, L, D).
pub fn bst_layer_forward<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, index: usize, x: Var, exec: BlockExec) -> Result<Var> {
    let s = tape.shape(x);
    let nb = check_len(s[1], cfg.window)?;
    let pre = layer_prefix(index);
    let blk = format!("{pre}.blk");
    let acfg = cfg.attention()?;
    let a = norm(tape, p, &format!("{blk}.ln1"), x)?;
    let y = ssm_sublayer(tape, p, cfg, &pre, a)?;
    let ctx = layer_context(tape, p, cfg, &pre, y)?;
    let x4 = tape.reshape(x, &[s[0], nb, cfg.window, s[2]])?;
    let out = match exec.group_blocks(cfg.window) {
        Some(group) => block_groups(tape, x4, group, |start, xg, prev| {
            let cg = ctx.select_blocks(tape, start, tape.shape(xg)[1])?;
            bst_sublayer(tape, p, &blk, &acfg, xg, prev, Some(&cg))
        })?,
        None => blocks_loop(tape, x4, |k, xk, prev| {
            let ck = ctx.select_block(tape, k)?;
            bst_sublayer(tape, p, &blk, &acfg, xk, PrevBlock::Explicit(prev), Some(&ck))
        })?,
    };
    tape.reshape(out, &s)
}

/// Block attention with a one-block cache and no context.
pub fn slide_like_layer_forward<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, index: usize, x: Var, exec: BlockExec) -> Result<Var> {
    let s = tape.shape(x);
    let nb = check_len(s[1], cfg.window)?;
    let blk = format!("{}.blk", layer_prefix(index));
    let acfg = cfg.attention()?;
    let x4 = tape.reshape(x, &[s[0], nb, cfg.window, s[2]])?;
    let out = match exec.group_blocks(cfg.window) {
        Some(group) => block_groups(tape, x4, group, |_, xg, prev| bst_sublayer(tape, p, &blk, &acfg, xg, prev, None))?,
        None => blocks_loop(tape, x4, |_, xk, prev| bst_sublayer(tape, p, &blk, &acfg, xk, PrevBlock::Explicit(prev), None))?,
    };
    tape.reshape(out, &s)
}

/// Recurrent baseline: each block cross-attends a (W × D) state, which is
/// then updated from the block through a linear gate
/// `g ⊙ state + (1 − g) ⊙ candidate`. Always sequential.
pub fn brect_like_layer_forward<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, index: usize, x: Var) -> Result<Var> {
    let s = tape.shape(x);
    let (batch, d, w) = (s[0], s[2], cfg.window);
    let nb = check_len(s[1], w)?;
    let pre = layer_prefix(index);
    let blk = format!("{pre}.blk");
    let rec = format!("{pre}.rec");
    let acfg = cfg.attention()?;
    let r = |n: &str| p.var(&format!("{rec}.{n}"));
    let x4 = tape.reshape(x, &[batch, nb, w, d])?;
    let mut state = tape.constant(Tensor::zeros(vec![batch, 1, w, d]));
    let out = blocks_loop(tape, x4, |_, xk, prev| {
        let ctx = ContextTensor {
            base: tape.reshape(state, &[batch, w, d, 1])?,
            lift: Lift::Replicate,
            heads: cfg.heads,
            blocks: 1,
            masking_required: false,
        };
        let out = bst_sublayer(tape, p, &blk, &acfg, xk, PrevBlock::Explicit(prev), Some(&ctx))?;
        let sn = norm(tape, p, &format!("{rec}.ln_state"), state)?;
        let bn = norm(tape, p, &format!("{rec}.ln_block"), xk)?;
        let upd = state_attention(tape, &acfg, tape.matmul(sn, r("wq")?)?, tape.matmul(bn, r("wk")?)?, tape.matmul(bn, r("wv")?)?)?;
        let cand = tape.add(state, tape.matmul(upd, r("wc")?)?)?;
        let g = tape.add(tape.matmul(cand, r("wg")?)?, r("bg")?)?;
        let keep = tape.mul(g, state)?;
        let one_minus = tape.add_scalar(tape.scale(g, -T::one()), T::one());
        state = tape.add(keep, tape.mul(one_minus, cand)?)?;
        Ok(out)
    })?;
    tape.reshape(out, &s)
}

/// Unmasked multi-head attention from state rows to block tokens; all
/// inputs (batch, 1, W, D).
fn state_attention<T: Real>(tape: &Tape<T>, acfg: &AttentionBlockConfig, q: Var, k: Var, v: Var) -> Result<Var> {
    let s = tape.shape(q);
    let (h, e) = (acfg.heads, acfg.head_dim);
    let split = |x: Var| -> Result<Var> {
        let y = tape.reshape(x, &[s[0], s[2], h, e])?;
        tape.permute(y, &[0, 2, 1, 3])
    };
    let (q, k, v) = (split(q)?, split(k)?, split(v)?);
    let logits = tape.scale(tape.bmm(q, k, true)?, T::one() / T::c(e as f64).sqrt());
    let wts = tape.softmax_lastdim(logits)?;
    let o = tape.permute(tape.bmm(wts, v, false)?, &[0, 2, 1, 3])?;
    tape.reshape(o, &s)
}

/// Embedding, layer stack, final norm and output projection. `tokens`
/// holds `batch` rows of equal length; returns logits (batch, L, vocab).
pub fn model_forward<T: Real>(tape: &Tape<T>, p: &Bound, cfg: &ModelConfig, tokens: &[usize], batch: usize, exec: BlockExec) -> Result<Var> {
    if batch == 0 || !tokens.len().is_multiple_of(batch) {
        return Err(dim_err(format!("{} tokens do not split into {batch} rows", tokens.len())));
    }
    let len = tokens.len() / batch;
    check_len(len, cfg.window)?;
    let e = tape.embedding(p.var("embed")?, tokens)?;
    let mut x = tape.reshape(e, &[batch, len, cfg.d_model])?;
    for i in 1..=cfg.num_layers {
        x = match cfg.layer_kind(i) {
            LayerKind::BlockState => bst_layer_forward(tape, p, cfg, i, x, exec)?,
            LayerKind::Slide => slide_like_layer_forward(tape, p, cfg, i, x, exec)?,
            LayerKind::BrectLike => brect_like_layer_forward(tape, p, cfg, i, x)?,
        };
    }
    let x = norm(tape, p, "final_norm", x)?;
    tape.matmul(x, p.var("head")?)
}

/// Mean next-token cross-entropy over positions with a target.
pub fn lm_loss<T: Real>(tape: &Tape<T>, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
    tape.cross_entropy(logits, targets)
}

/// Finite-difference check of the language-model loss with respect to
/// every parameter group of `model`.
pub fn model_gradcheck(
    model: &Model<f64>,
    tokens: &[usize],
    targets: &[Option<usize>],
    batch: usize,
    settings: &FdSettings,
) -> Result<FdReport> {
    let params = model.params.clone().into_map();
    finite_diff_check(
        |tape, vars| {
            let p = Bound::from_vars(vars.clone());
            let logits = model_forward(tape, &p, &model.cfg, tokens, batch, BlockExec::Parallel)?;
            lm_loss(tape, logits, targets)
        },
        &params,
        settings,
    )
}
