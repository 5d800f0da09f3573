//! Segment-aware semantic graph learning: trainable left/right boundary
//! attention, the composite soft segment mask, segment-masked multi-head
//! attention with per-layer constituency supervision, and a GCN stack.

use crate::autodiff::{graph_conv, Activation, Graph, Var, MASK_KILL};
use crate::data::SegmentSignal;
use crate::error::Result;
use crate::matrix::Matrix;
use crate::params::{Init, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// How the soft mask enters the attention scores: multiply the logits by the
/// mask values (literal form), or kill cells where the mask is near zero.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Multiply,
    Logit,
}

/// Which adjacency each GCN layer consumes: attention head (layer mod heads),
/// or the head average.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdjacencyMode {
    PerLayer,
    HeadMean,
}

/// Boundary admissibility: left boundaries lie at or before the token,
/// right boundaries at or after it.
pub fn causal_mask(n: usize, side: Side) -> Matrix {
    let mut m = Matrix::filled(n, n, MASK_KILL);
    for i in 0..n {
        for j in 0..n {
            let keep = match side {
                Side::Left => j <= i,
                Side::Right => j >= i,
            };
            if keep {
                m.set(i, j, 1.0);
            }
        }
    }
    m
}

/// Row i of the left (right) output is a distribution over token i's
/// admissible left (right) boundary positions.
pub fn boundary_attention<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    hc: Var<'g>,
    d: usize,
) -> Result<(Var<'g>, Var<'g>)> {
    let n = hc.shape().0;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = Vec::with_capacity(2);
    for side in [Side::Left, Side::Right] {
        let tag = match side {
            Side::Left => "left",
            Side::Right => "right",
        };
        let wq = g.param(store, &format!("sesg.boundary.{tag}.wq"), d, d, Init::Uniform);
        let wk = g.param(store, &format!("sesg.boundary.{tag}.wk"), d, d, Init::Uniform);
        let q = g.matmul(hc, wq);
        let k = g.matmul(hc, wk);
        let scores = g.scale(g.matmul(q, g.transpose(k)), scale);
        out.push(g.masked_softmax(scores, &causal_mask(n, side))?);
    }
    Ok((out[0], out[1]))
}

/// Composite mask: entry (i, j) is P(left boundary of i <= j) times
/// P(right boundary of i >= j), built with cumulative-sum matrices.
pub fn segment_mask<'g>(g: &'g Graph, phi_l: Var<'g>, phi_r: Var<'g>) -> Var<'g> {
    let n = phi_l.shape().0;
    let mut upper = Matrix::zeros(n, n);
    let mut lower = Matrix::zeros(n, n);
    for k in 0..n {
        for j in k..n {
            upper.set(k, j, 1.0);
            lower.set(j, k, 1.0);
        }
    }
    let left_cum = g.matmul(phi_l, g.constant(upper));
    let right_cum = g.matmul(phi_r, g.constant(lower));
    g.mul(left_cum, right_cum)
}

pub struct SegmentAttention<'g> {
    /// Row-stochastic attention, one slice per head.
    pub heads: Vec<Var<'g>>,
    /// The masked pre-softmax scores, one slice per head.
    pub logits: Vec<Var<'g>>,
}

/// Per-head scaled dot-product attention gated by the shared segment mask.
pub fn segment_attention<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    hc: Var<'g>,
    m_s: Var<'g>,
    heads: usize,
    d: usize,
    mode: MaskMode,
) -> Result<SegmentAttention<'g>> {
    let n = hc.shape().0;
    let scale = 1.0 / (d as f64).sqrt();
    let mut out = SegmentAttention {
        heads: Vec::with_capacity(heads),
        logits: Vec::with_capacity(heads),
    };
    // In logit mode near-zero mask values kill cells outright; the diagonal
    // always survives because both cumulative factors include the token.
    let logit_mask = if mode == MaskMode::Logit {
        let mv = m_s.value();
        let mut mask = Matrix::filled(n, n, MASK_KILL);
        for i in 0..n {
            for j in 0..n {
                if mv.get(i, j) > 1e-6 {
                    mask.set(i, j, 1.0);
                }
            }
        }
        Some(mask)
    } else {
        None
    };
    for h in 0..heads {
        let wq = g.param(store, &format!("sesg.attn.head{h}.wq"), d, d, Init::Uniform);
        let wk = g.param(store, &format!("sesg.attn.head{h}.wk"), d, d, Init::Uniform);
        let q = g.matmul(hc, wq);
        let k = g.matmul(hc, wk);
        let scores = g.scale(g.matmul(q, g.transpose(k)), scale);
        let (logits, attn) = match mode {
            MaskMode::Multiply => {
                let masked = g.mul(scores, m_s);
                (masked, g.softmax_rows(masked))
            }
            MaskMode::Logit => {
                let mask = logit_mask.as_ref().expect("mask built above");
                (scores, g.masked_softmax(scores, mask)?)
            }
        };
        out.logits.push(logits);
        out.heads.push(attn);
    }
    Ok(out)
}

/// Mean binary cross-entropy of sigmoid(slice) against the same-segment
/// signal, averaged over every head and cell. Head k is supervised by the
/// constituency layer k + 1.
pub fn segment_loss<'g>(g: &'g Graph, slices: &[Var<'g>], signal: &SegmentSignal) -> Var<'g> {
    assert_eq!(
        slices.len(),
        signal.layers.len(),
        "one attention head per supervised layer"
    );
    let mut total: Option<Var<'g>> = None;
    for (slice, target) in slices.iter().zip(&signal.layers) {
        let term = g.bce_logits_mean(*slice, target);
        total = Some(match total {
            Some(t) => g.add(t, term),
            None => term,
        });
    }
    g.scale(total.expect("at least one head"), 1.0 / slices.len() as f64)
}

pub struct SesgOutput<'g> {
    pub h_ses: Var<'g>,
    pub loss: Var<'g>,
    pub attention: SegmentAttention<'g>,
    pub m_s: Var<'g>,
}

pub struct SesgConfig {
    pub d: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    pub mask_mode: MaskMode,
    pub adjacency: AdjacencyMode,
    pub activation: Activation,
    /// Supervise the masked pre-softmax scores instead of the normalized
    /// attention.
    pub supervise_presoftmax: bool,
}

pub fn sesg_forward<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    hc: Var<'g>,
    signal: &SegmentSignal,
    cfg: &SesgConfig,
) -> Result<SesgOutput<'g>> {
    let (phi_l, phi_r) = boundary_attention(g, store, hc, cfg.d)?;
    let m_s = segment_mask(g, phi_l, phi_r);
    let attention = segment_attention(g, store, hc, m_s, cfg.heads, cfg.d, cfg.mask_mode)?;
    let supervised = if cfg.supervise_presoftmax {
        &attention.logits
    } else {
        &attention.heads
    };
    let loss = segment_loss(g, supervised, signal);

    let head_mean = mean_of(g, &attention.heads);
    let mut h = hc;
    for layer in 0..cfg.gcn_layers {
        let adj = match cfg.adjacency {
            AdjacencyMode::PerLayer => attention.heads[layer % cfg.heads],
            AdjacencyMode::HeadMean => head_mean,
        };
        let w = g.param(store, &format!("sesg.gcn.layer{layer}.w"), cfg.d, cfg.d, Init::Uniform);
        let b = g.param(store, &format!("sesg.gcn.layer{layer}.b"), 1, cfg.d, Init::Uniform);
        h = graph_conv(g, adj, h, w, b, cfg.activation);
    }
    Ok(SesgOutput {
        h_ses: h,
        loss,
        attention,
        m_s,
    })
}

pub(crate) fn mean_of<'g>(g: &'g Graph, vars: &[Var<'g>]) -> Var<'g> {
    let mut acc = vars[0];
    for v in &vars[1..] {
        acc = g.add(acc, *v);
    }
    g.scale(acc, 1.0 / vars.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{build_segment_signal, ConstituentTree};
    use crate::gradcheck::grad_check;
    use crate::oracle;

    fn default_cfg(d: usize, heads: usize) -> SesgConfig {
        SesgConfig {
            d,
            heads,
            gcn_layers: 3,
            mask_mode: MaskMode::Multiply,
            adjacency: AdjacencyMode::PerLayer,
            activation: Activation::Relu,
            supervise_presoftmax: false,
        }
    }

    #[test]
    fn causal_masks_are_triangular_and_transposed() {
        let left = causal_mask(3, Side::Left);
        let right = causal_mask(3, Side::Right);
        let mut allowed = 0;
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(left.get(i, j), right.get(j, i));
                if left.get(i, j) == 1.0 {
                    assert!(j <= i);
                    allowed += 1;
                }
            }
        }
        assert_eq!(allowed, 6);
        assert_eq!(causal_mask(1, Side::Left).get(0, 0), 1.0);
    }

    #[test]
    fn zero_encoder_gives_uniform_admissible_boundaries() {
        let g = Graph::new();
        let mut store = ParamStore::new(0);
        let hc = g.constant(Matrix::zeros(4, 8));
        let (phi_l, phi_r) = boundary_attention(&g, &mut store, hc, 8).unwrap();
        let l = phi_l.value();
        let r = phi_r.value();
        for i in 0..4 {
            for j in 0..4 {
                let expect_l = if j <= i { 1.0 / (i + 1) as f64 } else { 0.0 };
                let expect_r = if j >= i { 1.0 / (4 - i) as f64 } else { 0.0 };
                assert!((l.get(i, j) - expect_l).abs() < 1e-12);
                assert!((r.get(i, j) - expect_r).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn boundary_supports_stay_admissible() {
        let g = Graph::new();
        let mut store = ParamStore::new(5);
        let hc = g.param(&mut store, "probe.hc", 5, 4, Init::Uniform);
        let (phi_l, phi_r) = boundary_attention(&g, &mut store, hc, 4).unwrap();
        let (l, r) = (phi_l.value(), phi_r.value());
        for i in 0..5 {
            for j in 0..5 {
                if j > i {
                    assert_eq!(l.get(i, j), 0.0);
                }
                if j < i {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn one_hot_boundaries_reproduce_the_hard_band() {
        let lp = [0usize, 0, 2];
        let rp = [1usize, 2, 2];
        let g = Graph::new();
        let mut l = Matrix::zeros(3, 3);
        let mut r = Matrix::zeros(3, 3);
        for i in 0..3 {
            l.set(i, lp[i], 1.0);
            r.set(i, rp[i], 1.0);
        }
        let m = segment_mask(&g, g.constant(l), g.constant(r));
        let expect = oracle::hard_segment_band(&lp, &rp).unwrap();
        assert_eq!(m.value(), expect);
    }

    #[test]
    fn single_token_mask_is_one() {
        let g = Graph::new();
        let one = Matrix::filled(1, 1, 1.0);
        let m = segment_mask(&g, g.constant(one.clone()), g.constant(one));
        assert_eq!(m.value(), Matrix::filled(1, 1, 1.0));
    }

    #[test]
    fn soft_mask_matches_summation_reference() {
        let g = Graph::new();
        // Uniform admissible boundary rows for n = 4.
        let n = 4;
        let mut l = Matrix::zeros(n, n);
        let mut r = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                l.set(i, j, 1.0 / (i + 1) as f64);
            }
            for j in i..n {
                r.set(i, j, 1.0 / (n - i) as f64);
            }
        }
        let m = segment_mask(&g, g.constant(l.clone()), g.constant(r.clone()));
        let expect = oracle::soft_segment_band(&l, &r);
        assert!(m.value().max_abs_diff(&expect) < 1e-12);
    }

    #[test]
    fn mask_diagonal_is_positive_for_random_boundaries() {
        let g = Graph::new();
        let mut store = ParamStore::new(11);
        let hc = g.param(&mut store, "probe.hc", 6, 4, Init::Uniform);
        let (phi_l, phi_r) = boundary_attention(&g, &mut store, hc, 4).unwrap();
        let m = segment_mask(&g, phi_l, phi_r).value();
        for i in 0..6 {
            assert!(m.get(i, i) > 0.0);
        }
    }

    #[test]
    fn zero_weights_make_every_head_uniform() {
        let g = Graph::new();
        let mut store = ParamStore::new(0);
        for h in 0..2 {
            store.get_or_init(&format!("sesg.attn.head{h}.wq"), 4, 4, Init::Const(0.0));
            store.get_or_init(&format!("sesg.attn.head{h}.wk"), 4, 4, Init::Const(0.0));
        }
        let hc = g.constant(Matrix::filled(3, 4, 0.7));
        let m_s = g.constant(Matrix::filled(3, 3, 0.5));
        let att = segment_attention(&g, &mut store, hc, m_s, 2, 4, MaskMode::Multiply).unwrap();
        for head in &att.heads {
            assert!(head.value().max_abs_diff(&Matrix::filled(3, 3, 1.0 / 3.0)) < 1e-12);
        }
    }

    #[test]
    fn hard_band_attention_mass_stays_in_band_under_logit_masking() {
        let g = Graph::new();
        let mut store = ParamStore::new(3);
        let hc = g.param(&mut store, "probe.hc", 3, 4, Init::Uniform);
        let band = oracle::hard_segment_band(&[0, 0, 2], &[1, 2, 2]).unwrap();
        let m_s = g.constant(band.clone());
        let att = segment_attention(&g, &mut store, hc, m_s, 2, 4, MaskMode::Logit).unwrap();
        for head in &att.heads {
            let v = head.value();
            for i in 0..3 {
                let mut row_sum = 0.0;
                for j in 0..3 {
                    if band.get(i, j) == 0.0 {
                        assert_eq!(v.get(i, j), 0.0);
                    }
                    row_sum += v.get(i, j);
                }
                assert!((row_sum - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn heads_are_row_stochastic() {
        let g = Graph::new();
        let mut store = ParamStore::new(7);
        let hc = g.param(&mut store, "probe.hc", 5, 8, Init::Uniform);
        let (phi_l, phi_r) = boundary_attention(&g, &mut store, hc, 8).unwrap();
        let m_s = segment_mask(&g, phi_l, phi_r);
        let att = segment_attention(&g, &mut store, hc, m_s, 4, 8, MaskMode::Multiply).unwrap();
        assert_eq!(att.heads.len(), 4);
        for head in &att.heads {
            let v = head.value();
            for i in 0..5 {
                let s: f64 = (0..5).map(|j| v.get(i, j)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn segment_loss_hand_values() {
        let g = Graph::new();
        // All-zero scores against all-ones targets: -ln sigmoid(0) = ln 2.
        let zeros = g.constant(Matrix::zeros(2, 2));
        let signal = SegmentSignal {
            layers: vec![Matrix::filled(2, 2, 1.0)],
        };
        let loss = segment_loss(&g, &[zeros], &signal);
        assert!((loss.scalar_value() - 2f64.ln()).abs() < 1e-12);

        // Single cell, score 2, target 1: -ln sigmoid(2).
        let g2 = Graph::new();
        let two = g2.constant(Matrix::filled(1, 1, 2.0));
        let signal2 = SegmentSignal {
            layers: vec![Matrix::filled(1, 1, 1.0)],
        };
        let loss2 = segment_loss(&g2, &[two], &signal2);
        let expect = (1.0 + (-2.0f64).exp()).ln();
        assert!((loss2.scalar_value() - expect).abs() < 1e-12);
        assert!((loss2.scalar_value() - 0.1269).abs() < 1e-4);
    }

    #[test]
    fn identity_adjacency_collapse_keeps_input() {
        // Force every head to the identity via the test hook of feeding an
        // identity mask and huge diagonal scores is roundabout; instead check
        // the GCN collapse directly through graph_conv in autodiff tests and
        // exercise shapes here.
        let g = Graph::new();
        let mut store = ParamStore::new(1);
        let tree = ConstituentTree::parse("(S (CL (NP a) (VP b c)) d (CL (NP e) (VP f g)))").unwrap();
        let signal = build_segment_signal(&tree, 2);
        let hc = g.param(&mut store, "probe.hc", 7, 6, Init::Uniform);
        let out = sesg_forward(&g, &mut store, hc, &signal, &default_cfg(6, 2)).unwrap();
        assert_eq!(out.h_ses.shape(), (7, 6));
        assert_eq!(out.loss.shape(), (1, 1));
        assert!(out.loss.scalar_value() > 0.0);
    }

    #[test]
    fn full_stream_gradients_match_finite_differences() {
        let tree = ConstituentTree::parse("(S (CL (NP a) (VP b c)) (CL (NP d) (VP e)))").unwrap();
        let signal = build_segment_signal(&tree, 2);
        let mut store = ParamStore::new(12);
        let report = grad_check(
            &mut store,
            |s, with_grads| {
                let g = Graph::new();
                let hc = g.param(s, "probe.hc", 5, 8, Init::Uniform);
                let out = sesg_forward(&g, s, hc, &signal, &default_cfg(8, 2))?;
                let probe = g.constant(Matrix::filled(5, 8, 0.3));
                let loss = g.add(out.loss, g.sum(g.mul(out.h_ses, probe)));
                if with_grads {
                    g.backward(loss)?;
                    g.export_grads(s);
                }
                Ok(loss.scalar_value())
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "{}", report.format_table());
    }

    #[test]
    fn training_boundaries_alone_reduces_segment_loss() {
        let tree = ConstituentTree::parse("(S (CL (NP a) (VP b c)) (CL (NP d) (VP e)))").unwrap();
        let signal = build_segment_signal(&tree, 2);
        let mut store = ParamStore::new(0);
        let hc_fixed = {
            let mut probe = ParamStore::new(99);
            probe.get_or_init("hc", 5, 8, Init::Uniform).clone()
        };
        let mut losses = Vec::new();
        for _ in 0..30 {
            let g = Graph::new();
            let hc = g.constant(hc_fixed.clone());
            let (phi_l, phi_r) = boundary_attention(&g, &mut store, hc, 8).unwrap();
            let m_s = segment_mask(&g, phi_l, phi_r);
            let att =
                segment_attention(&g, &mut store, hc, m_s, 2, 8, MaskMode::Multiply).unwrap();
            let loss = segment_loss(&g, &att.heads, &signal);
            losses.push(loss.scalar_value());
            store.zero_grads();
            g.backward(loss).unwrap();
            g.export_grads(&mut store);
            store.adam_step(0.01, 0.0);
        }
        assert!(
            losses[29] < losses[0],
            "loss did not decrease: {:?}",
            losses
        );
        // Strict decrease over the first steps.
        assert!(losses[1] < losses[0] && losses[2] < losses[1]);
    }
}
