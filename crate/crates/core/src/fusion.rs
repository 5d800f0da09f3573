//! Self-adaptive tri-stream aggregation: two cross-attention streams with
//! residual layer norm and feed-forward blocks, an affine balance channel,
//! learned stream weights, and the weighted feature concatenation, plus the
//! simpler concat/sum/gate alternatives used for comparison runs.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Init, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Scalar used to score a stream: mean of all rows, or the first row alone.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Mean,
    First,
}

/// Alternative aggregation strategies swapped in for the adaptive pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionAlternative {
    Concat,
    Sum,
    Gate,
}

pub struct FusionConfig {
    pub d: usize,
    pub cross_heads: usize,
    pub pool: PoolMode,
}

fn layer_norm_block<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    name: &str,
    x: Var<'g>,
    d: usize,
) -> Var<'g> {
    let gain = g.param(store, &format!("{name}.gain"), 1, d, Init::Const(1.0));
    let offset = g.param(store, &format!("{name}.offset"), 1, d, Init::Const(0.0));
    g.layer_norm(x, gain, offset, LAYER_NORM_EPS)
}

/// One cross-attention stream: queries from one representation attend over
/// the other, with residual layer norm and a position-wise feed-forward
/// block. `prefix` isolates the parameter set of each stream.
pub fn cross_stream<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    prefix: &str,
    q_src: Var<'g>,
    kv_src: Var<'g>,
    cfg: &FusionConfig,
) -> Var<'g> {
    let d = cfg.d;
    assert_eq!(
        d % cfg.cross_heads,
        0,
        "feature width must split evenly across heads"
    );
    let dk = d / cfg.cross_heads;
    let scale = 1.0 / (dk as f64).sqrt();

    let mut head_outs = Vec::with_capacity(cfg.cross_heads);
    for h in 0..cfg.cross_heads {
        let base = format!("fusion.{prefix}.att.head{h}");
        let wq = g.param(store, &format!("{base}.wq"), d, dk, Init::Uniform);
        let wk = g.param(store, &format!("{base}.wk"), d, dk, Init::Uniform);
        let wv = g.param(store, &format!("{base}.wv"), d, dk, Init::Uniform);
        let q = g.matmul(q_src, wq);
        let k = g.matmul(kv_src, wk);
        let v = g.matmul(kv_src, wv);
        let attn = g.softmax_rows(g.scale(g.matmul(q, g.transpose(k)), scale));
        head_outs.push(g.matmul(attn, v));
    }
    let mut mh = head_outs[0];
    for h in &head_outs[1..] {
        mh = g.concat_cols(mh, *h);
    }
    let wo = g.param(store, &format!("fusion.{prefix}.att.wo"), d, d, Init::Uniform);
    let mixed = g.matmul(mh, wo);
    let o = layer_norm_block(g, store, &format!("fusion.{prefix}.ln1"), g.add(mixed, q_src), d);

    let w1 = g.param(store, &format!("fusion.{prefix}.ffn.w1"), d, 2 * d, Init::Uniform);
    let b1 = g.param(store, &format!("fusion.{prefix}.ffn.b1"), 1, 2 * d, Init::Uniform);
    let w2 = g.param(store, &format!("fusion.{prefix}.ffn.w2"), 2 * d, d, Init::Uniform);
    let b2 = g.param(store, &format!("fusion.{prefix}.ffn.b2"), 1, d, Init::Uniform);
    let ffn = g.add_row_broadcast(
        g.matmul(g.relu(g.add_row_broadcast(g.matmul(o, w1), b1)), w2),
        b2,
    );
    layer_norm_block(g, store, &format!("fusion.{prefix}.ln2"), g.add(ffn, o), d)
}

/// Affine map of the concatenated streams back to width d, letting the
/// network carry information neither cross stream kept.
pub fn balance_channel<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    h_ses: Var<'g>,
    h_syl: Var<'g>,
    d: usize,
) -> Var<'g> {
    let w = g.param(store, "fusion.balance.w", 2 * d, d, Init::Uniform);
    let b = g.param(store, "fusion.balance.b", 1, d, Init::Uniform);
    g.add_row_broadcast(g.matmul(g.concat_cols(h_ses, h_syl), w), b)
}

/// Scores each stream by a shared linear map of its pooled rows, floors at
/// zero, and normalizes to a distribution over the three streams.
pub fn stream_weights<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    streams: [Var<'g>; 3],
    d: usize,
    pool: PoolMode,
) -> Var<'g> {
    let w = g.param(store, "fusion.stream.w", d, 1, Init::Uniform);
    let b = g.param(store, "fusion.stream.b", 1, 1, Init::Uniform);
    let mut scores = Vec::with_capacity(3);
    for x in streams {
        let n = x.shape().0;
        let rows: Vec<usize> = match pool {
            PoolMode::Mean => (0..n).collect(),
            PoolMode::First => vec![0],
        };
        let pooled = g.mean_rows(x, &rows);
        scores.push(g.relu(g.add(g.matmul(pooled, w), b)));
    }
    let a = g.concat_cols(g.concat_cols(scores[0], scores[1]), scores[2]);
    g.softmax_rows(a)
}

/// Weighted feature concatenation in fixed stream order, width 3d.
pub fn fuse<'g>(g: &'g Graph, streams: [Var<'g>; 3], alphas: Var<'g>) -> Var<'g> {
    assert_eq!(alphas.shape(), (1, 3));
    let mut parts = Vec::with_capacity(3);
    for (i, x) in streams.into_iter().enumerate() {
        parts.push(g.scale_by_scalar(x, g.slice_col(alphas, i)));
    }
    g.concat_cols(g.concat_cols(parts[0], parts[1]), parts[2])
}

pub struct FusionOutput<'g> {
    /// Classifier input; n x 3d in adaptive mode.
    pub h_f: Var<'g>,
    /// Stream weights, 1 x 3.
    pub alphas: Var<'g>,
}

/// The full adaptive pipeline: cross streams in both directions, balance
/// channel, learned weights, weighted concatenation.
pub fn fusion_adaptive<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    h_ses: Var<'g>,
    h_syl: Var<'g>,
    cfg: &FusionConfig,
) -> FusionOutput<'g> {
    let h_sem = cross_stream(g, store, "sem", h_ses, h_syl, cfg);
    let h_syn = cross_stream(g, store, "syn", h_syl, h_ses, cfg);
    let h_com = balance_channel(g, store, h_ses, h_syl, cfg.d);
    let alphas = stream_weights(g, store, [h_sem, h_syn, h_com], cfg.d, cfg.pool);
    let h_f = fuse(g, [h_sem, h_syn, h_com], alphas);
    FusionOutput { h_f, alphas }
}

/// Concat (n x 2d), sum (n x d), or sigmoid-gated blend (n x d) of the two
/// stream outputs.
pub fn fuse_alternative<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    mode: FusionAlternative,
    h_ses: Var<'g>,
    h_syl: Var<'g>,
    d: usize,
) -> Var<'g> {
    match mode {
        FusionAlternative::Concat => g.concat_cols(h_ses, h_syl),
        FusionAlternative::Sum => g.add(h_ses, h_syl),
        FusionAlternative::Gate => {
            let w = g.param(store, "fusion.gate.w", 2 * d, d, Init::Uniform);
            let b = g.param(store, "fusion.gate.b", 1, d, Init::Uniform);
            let gate = g.sigmoid(g.add_row_broadcast(
                g.matmul(g.concat_cols(h_ses, h_syl), w),
                b,
            ));
            let ones = g.constant(Matrix::filled(gate.shape().0, d, 1.0));
            g.add(g.mul(gate, h_ses), g.mul(g.sub(ones, gate), h_syl))
        }
    }
}

impl std::str::FromStr for FusionAlternative {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionAlternative::Concat),
            "sum" => Ok(FusionAlternative::Sum),
            "gate" => Ok(FusionAlternative::Gate),
            other => Err(Error::invalid(format!("unknown fusion mode: {other}"))),
        }
    }
}
