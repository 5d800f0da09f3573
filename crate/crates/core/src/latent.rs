//! Syntax-based latent graph learning: relation-enhanced multi-head edge
//! scores, exact first-order marginals over non-projective dependency
//! structures via Laplacian inversion, a root-identification loss, and a GCN
//! stack over the marginal adjacency.

use crate::autodiff::{graph_conv, Activation, Graph, Var};
use crate::data::RelationMatrix;
use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::params::{Init, ParamStore};
use crate::segment::mean_of;

/// Laplacian assembly used for marginal inference. `FirstRow` replaces the
/// first Laplacian row with the root scores, which makes the determinant sum
/// over single-root structures exactly. `Diagonal` adds the root scores to
/// the diagonal instead; its determinant also counts multi-root forests, so
/// its outputs are not arborescence marginals. Both are kept so the
/// enumeration oracle can arbitrate; `FirstRow` is the default everywhere.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MttVariant {
    FirstRow,
    Diagonal,
}

/// Tolerance for the probability laws checked after inversion.
pub const MARGINAL_LAW_TOL: f64 = 1e-6;

/// Row k of the output embeds the relation id of token pair k = i * n + j.
/// Pairs without a dependency relation keep a frozen all-zero embedding.
pub fn embed_relations<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    rel: &RelationMatrix,
    n_labels: usize,
    d_r: usize,
) -> Result<Var<'g>> {
    let table = g.param(store, "sylg.rel.table", n_labels, d_r, Init::Uniform);
    g.gather(table, rel.flat_ids(), Some(0))
}

/// Per-head edge scores: semantic attention plus a per-head projection of the
/// pair relation embedding, renormalized row-wise.
pub fn enhanced_weights<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    hc: Var<'g>,
    rel_emb: Var<'g>,
    heads: usize,
    d: usize,
    d_r: usize,
) -> Result<Vec<Var<'g>>> {
    let n = hc.shape().0;
    let scale = 1.0 / (d as f64).sqrt();
    let wr = g.param(store, "sylg.rel.wr", d_r, heads, Init::Uniform);
    let br = g.param(store, "sylg.rel.br", 1, heads, Init::Uniform);
    // n^2 x heads: one relation score per pair per head.
    let rel_scores = g.add_row_broadcast(g.matmul(rel_emb, wr), br);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let wq = g.param(store, &format!("sylg.attn.head{h}.wq"), d, d, Init::Uniform);
        let wk = g.param(store, &format!("sylg.attn.head{h}.wk"), d, d, Init::Uniform);
        let q = g.matmul(hc, wq);
        let k = g.matmul(hc, wk);
        let a_sem = g.softmax_rows(g.scale(g.matmul(q, g.transpose(k)), scale));
        let a_rel = g.reshape(g.slice_col(rel_scores, h), n, n);
        out.push(g.softmax_rows(g.add(a_rel, a_sem)));
    }
    Ok(out)
}

/// Positive per-token root scores, clamped in log space to keep the
/// Laplacian solvable.
pub fn root_scores<'g>(g: &'g Graph, store: &mut ParamStore, hc: Var<'g>, d: usize) -> Var<'g> {
    let w = g.param(store, "sylg.root.w", d, 1, Init::Uniform);
    let b = g.param(store, "sylg.root.b", 1, 1, Init::Uniform);
    g.exp(g.clamp(g.add_row_broadcast(g.matmul(hc, w), b), -30.0, 30.0))
}

pub struct TreeMarginals<'g> {
    /// Entry (i, j): probability that j's parent is i.
    pub marginals: Var<'g>,
    /// Column vector: probability that each token is the root.
    pub root_probs: Var<'g>,
}

/// Exact edge and root marginals of the arborescence distribution defined by
/// edge weights `a_bar` (diagonal ignored) and root weights `phi` (n x 1).
pub fn tree_marginals<'g>(
    g: &'g Graph,
    a_bar: Var<'g>,
    phi: Var<'g>,
    variant: MttVariant,
) -> Result<TreeMarginals<'g>> {
    let (n, cols) = a_bar.shape();
    assert_eq!(n, cols, "edge weights must be square");
    assert_eq!(phi.shape(), (n, 1), "one root weight per token");

    let mut hollow = Matrix::filled(n, n, 1.0);
    for i in 0..n {
        hollow.set(i, i, 0.0);
    }
    let a = g.mul(a_bar, g.constant(hollow));

    let ones_row = g.constant(Matrix::filled(1, n, 1.0));
    let degree = g.diag_from_row(g.matmul(ones_row, a));
    let lap = g.sub(degree, a);

    let lap_hat = match variant {
        MttVariant::FirstRow => {
            let mut row0_zero = Matrix::filled(n, n, 1.0);
            for j in 0..n {
                row0_zero.set(0, j, 0.0);
            }
            let mut e0 = Matrix::zeros(n, 1);
            e0.set(0, 0, 1.0);
            g.add(
                g.mul(lap, g.constant(row0_zero)),
                g.matmul(g.constant(e0), g.transpose(phi)),
            )
        }
        MttVariant::Diagonal => g.add(lap, g.diag_from_row(g.transpose(phi))),
    };
    let b = g.inverse(lap_hat)?;

    // marginal(i -> j) = [j > 0] A_ij B_jj - [i > 0] A_ij B_ji
    let b_diag = g.broadcast_row(g.diag_to_row(b), n);
    let mut col0_zero = Matrix::filled(n, n, 1.0);
    let mut row0_zero = Matrix::filled(n, n, 1.0);
    for k in 0..n {
        col0_zero.set(k, 0, 0.0);
        row0_zero.set(0, k, 0.0);
    }
    let term_in = g.mul(g.mul(a, b_diag), g.constant(col0_zero));
    let term_out = g.mul(g.mul(a, g.transpose(b)), g.constant(row0_zero));
    let marginals = g.sub(term_in, term_out);
    let root_probs = g.mul(phi, g.slice_col(b, 0));

    if variant == MttVariant::FirstRow {
        validate_marginals(&marginals.value(), &root_probs.value(), MARGINAL_LAW_TOL)?;
    }
    Ok(TreeMarginals {
        marginals,
        root_probs,
    })
}

/// Checks that the root probabilities sum to one, every value lies in
/// [0, 1], and each token's root probability plus incoming edge mass is one.
pub fn validate_marginals(marginals: &Matrix, root_probs: &Matrix, tol: f64) -> Result<()> {
    let n = root_probs.rows();
    let mut root_sum = 0.0;
    for i in 0..n {
        let p = root_probs.get(i, 0);
        if !(-tol..=1.0 + tol).contains(&p) {
            return Err(Error::numerical(format!(
                "root probability out of range at token {i}: {p}"
            )));
        }
        root_sum += p;
    }
    if (root_sum - 1.0).abs() > tol {
        return Err(Error::numerical(format!(
            "root probabilities sum to {root_sum}, expected 1"
        )));
    }
    for j in 0..n {
        let mut incoming = root_probs.get(j, 0);
        for i in 0..n {
            let p = marginals.get(i, j);
            if !(-tol..=1.0 + tol).contains(&p) {
                return Err(Error::numerical(format!(
                    "edge marginal out of range at ({i}, {j}): {p}"
                )));
            }
            incoming += p;
        }
        if (incoming - 1.0).abs() > tol {
            return Err(Error::numerical(format!(
                "parent mass for token {j} is {incoming}, expected 1"
            )));
        }
    }
    Ok(())
}

/// Binary cross-entropy of the root probabilities against the aspect
/// indicator, summed over tokens.
pub fn root_loss<'g>(g: &'g Graph, root_probs: Var<'g>, indicator: &Matrix) -> Var<'g> {
    g.bce_probs_sum(root_probs, indicator)
}

pub struct SylgConfig {
    pub d: usize,
    pub d_r: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    pub n_labels: usize,
    pub variant: MttVariant,
    pub activation: Activation,
}

pub struct SylgOutput<'g> {
    pub h_syl: Var<'g>,
    pub loss: Var<'g>,
    /// The marginal adjacency the GCN consumed.
    pub a_syl: Var<'g>,
    pub root_probs: Var<'g>,
}

pub fn sylg_forward<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    hc: Var<'g>,
    rel: &RelationMatrix,
    indicator: &Matrix,
    cfg: &SylgConfig,
) -> Result<SylgOutput<'g>> {
    let rel_emb = embed_relations(g, store, rel, cfg.n_labels, cfg.d_r)?;
    let heads = enhanced_weights(g, store, hc, rel_emb, cfg.heads, cfg.d, cfg.d_r)?;
    let a_bar = mean_of(g, &heads);
    let phi = root_scores(g, store, hc, cfg.d);
    let tm = tree_marginals(g, a_bar, phi, cfg.variant)?;
    let loss = root_loss(g, tm.root_probs, indicator);

    let mut h = hc;
    for layer in 0..cfg.gcn_layers {
        let w = g.param(store, &format!("sylg.gcn.layer{layer}.w"), cfg.d, cfg.d, Init::Uniform);
        let b = g.param(store, &format!("sylg.gcn.layer{layer}.b"), 1, cfg.d, Init::Uniform);
        h = graph_conv(g, tm.marginals, h, w, b, cfg.activation);
    }
    Ok(SylgOutput {
        h_syl: h,
        loss,
        a_syl: tm.marginals,
        root_probs: tm.root_probs,
    })
}
