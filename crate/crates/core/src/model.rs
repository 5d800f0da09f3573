//! End-to-end per-record assembly: encoder, the two graph streams, fusion,
//! aspect pooling, the three-way classifier, and the composite loss.

use crate::autodiff::{Graph, Var};
use crate::config::{Ablation, Config, FusionMode};
use crate::data::{
    build_relation_matrix, build_segment_signal, ConstituentTree, LabelVocab, Polarity,
    RelationMatrix, SegmentSignal, SentenceRecord, TokenVocab,
};
use crate::encoder::{encode, EncoderConfig};
use crate::error::{Error, Result};
use crate::fusion::{fuse_alternative, fusion_adaptive, FusionConfig};
use crate::latent::{sylg_forward, SylgConfig};
use crate::matrix::Matrix;
use crate::params::{Init, ParamStore};
use crate::segment::{sesg_forward, SegmentAttention, SesgConfig};

/// Static per-record inputs, computed once and reused across epochs.
pub struct RecordInputs {
    pub tokens: Vec<String>,
    pub token_ids: Vec<usize>,
    pub signal: SegmentSignal,
    pub rel: RelationMatrix,
    pub indicator: Matrix,
    pub aspect_rows: Vec<usize>,
    pub label: Polarity,
}

impl RecordInputs {
    pub fn build(
        record: &SentenceRecord,
        vocab: &TokenVocab,
        labels: &LabelVocab,
        l: usize,
    ) -> Result<RecordInputs> {
        record.validate()?;
        let tree = ConstituentTree::parse(&record.constituency)?;
        Ok(RecordInputs {
            tokens: record.tokens.clone(),
            token_ids: vocab.ids(&record.tokens),
            signal: build_segment_signal(&tree, l),
            rel: build_relation_matrix(record, labels),
            indicator: record.aspect_indicator(),
            aspect_rows: record.aspect_rows(),
            label: record.polarity,
        })
    }

    pub fn n(&self) -> usize {
        self.token_ids.len()
    }
}

/// Model dimensions that depend on the training data rather than the config.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: Config,
    pub vocab_size: usize,
    pub n_labels: usize,
}

pub struct Diagnostics<'g> {
    pub h_ses: Var<'g>,
    pub h_syl: Var<'g>,
    pub h_f: Var<'g>,
    pub seg_attention: Option<SegmentAttention<'g>>,
    pub m_s: Option<Var<'g>>,
    pub a_syl: Option<Var<'g>>,
    pub root_probs: Option<Var<'g>>,
    pub alphas: Option<Var<'g>>,
}

pub struct ForwardPass<'g> {
    /// Classifier scores, 1 x 3.
    pub logits: Var<'g>,
    pub l_seg: Option<Var<'g>>,
    pub l_r: Option<Var<'g>>,
    pub diag: Diagnostics<'g>,
}

impl ForwardPass<'_> {
    pub fn probabilities(&self) -> [f64; 3] {
        let v = self.logits.value();
        let m = (0..3).map(|j| v.get(0, j)).fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = (0..3).map(|j| (v.get(0, j) - m).exp()).collect();
        let z: f64 = exps.iter().sum();
        [exps[0] / z, exps[1] / z, exps[2] / z]
    }

    pub fn prediction(&self) -> Polarity {
        let p = self.probabilities();
        let mut best = 0;
        for j in 1..3 {
            if p[j] > p[best] {
                best = j;
            }
        }
        Polarity::from_index(best)
    }
}

pub struct LossBreakdown<'g> {
    pub total: Var<'g>,
    pub ce: f64,
    pub seg: f64,
    pub root: f64,
}

impl Model {
    /// Width of the fused representation feeding the classifier.
    pub fn classifier_width(&self) -> usize {
        let d = self.cfg.d;
        if self.cfg.ablation == Ablation::NoFusion {
            return 2 * d;
        }
        match self.cfg.fusion_mode {
            FusionMode::Adaptive => 3 * d,
            FusionMode::Concat => 2 * d,
            FusionMode::Sum | FusionMode::Gate => d,
        }
    }

    pub fn forward<'g>(
        &self,
        g: &'g Graph,
        store: &mut ParamStore,
        inputs: &RecordInputs,
    ) -> Result<ForwardPass<'g>> {
        let cfg = &self.cfg;
        let hc = encode(
            g,
            store,
            &inputs.token_ids,
            &EncoderConfig {
                d: cfg.d,
                n_max: cfg.n_max,
                vocab_size: self.vocab_size,
                mixing: cfg.encoder_mixing,
            },
        )?;

        let (h_ses, l_seg, seg_attention, m_s) = if cfg.ablation == Ablation::NoSesg {
            (hc, None, None, None)
        } else {
            let out = sesg_forward(
                g,
                store,
                hc,
                &inputs.signal,
                &SesgConfig {
                    d: cfg.d,
                    heads: cfg.l,
                    gcn_layers: cfg.gcn_layers,
                    mask_mode: cfg.segment_mask_mode,
                    adjacency: cfg.adjacency,
                    activation: cfg.gcn_activation,
                    supervise_presoftmax: cfg.supervise_presoftmax,
                },
            )?;
            (out.h_ses, Some(out.loss), Some(out.attention), Some(out.m_s))
        };

        let (h_syl, l_r, a_syl, root_probs) = if cfg.ablation == Ablation::NoSylg {
            (hc, None, None, None)
        } else {
            let out = sylg_forward(
                g,
                store,
                hc,
                &inputs.rel,
                &inputs.indicator,
                &SylgConfig {
                    d: cfg.d,
                    d_r: cfg.d_r,
                    heads: cfg.n_head_sylg,
                    gcn_layers: cfg.gcn_layers,
                    n_labels: self.n_labels,
                    variant: cfg.mtt_variant,
                    activation: cfg.gcn_activation,
                },
            )?;
            (out.h_syl, Some(out.loss), Some(out.a_syl), Some(out.root_probs))
        };

        let (h_f, alphas) = if cfg.ablation == Ablation::NoFusion {
            (g.concat_cols(h_ses, h_syl), None)
        } else {
            match cfg.fusion_mode.alternative() {
                None => {
                    let out = fusion_adaptive(
                        g,
                        store,
                        h_ses,
                        h_syl,
                        &FusionConfig {
                            d: cfg.d,
                            cross_heads: cfg.cross_heads,
                            pool: cfg.pool,
                        },
                    );
                    (out.h_f, Some(out.alphas))
                }
                Some(alt) => (fuse_alternative(g, store, alt, h_ses, h_syl, cfg.d), None),
            }
        };

        let h_a = g.mean_rows(h_f, &inputs.aspect_rows);
        let width = self.classifier_width();
        let wp = g.param(store, "classifier.w", width, 3, Init::Uniform);
        let bp = g.param(store, "classifier.b", 1, 3, Init::Uniform);
        let logits = g.add_row_broadcast(g.matmul(h_a, wp), bp);

        Ok(ForwardPass {
            logits,
            l_seg,
            l_r,
            diag: Diagnostics {
                h_ses,
                h_syl,
                h_f,
                seg_attention,
                m_s,
                a_syl,
                root_probs,
                alphas,
            },
        })
    }

    /// Composite objective: classification plus the weighted auxiliary
    /// losses of whichever streams are active.
    pub fn loss_for<'g>(
        &self,
        g: &'g Graph,
        fwd: &ForwardPass<'g>,
        label: Polarity,
    ) -> Result<LossBreakdown<'g>> {
        let l_c = g.cross_entropy_logits(fwd.logits, label.index());
        let ce = l_c.scalar_value();
        if !ce.is_finite() {
            return Err(Error::numerical(format!(
                "non-finite classification loss: {ce}"
            )));
        }
        let mut total = l_c;
        let mut seg = 0.0;
        if let Some(ls) = fwd.l_seg {
            seg = ls.scalar_value();
            if !seg.is_finite() {
                return Err(Error::numerical(format!("non-finite segment loss: {seg}")));
            }
            total = g.add(total, g.scale(ls, self.cfg.lambda1));
        }
        let mut root = 0.0;
        if let Some(lr) = fwd.l_r {
            root = lr.scalar_value();
            if !root.is_finite() {
                return Err(Error::numerical(format!("non-finite root loss: {root}")));
            }
            total = g.add(total, g.scale(lr, self.cfg.lambda2));
        }
        Ok(LossBreakdown {
            total,
            ce,
            seg,
            root,
        })
    }
}

/// Affine combination of the three loss components, rejecting non-finite
/// inputs with the offending component named.
pub fn total_loss(l_c: f64, l_seg: f64, l_r: f64, lambda1: f64, lambda2: f64) -> Result<f64> {
    for (name, v) in [
        ("classification", l_c),
        ("segment", l_seg),
        ("root", l_r),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(format!("non-finite {name} loss: {v}")));
        }
    }
    Ok(l_c + lambda1 * l_seg + lambda2 * l_r)
}

/// Cross-entropy of a probability row against the gold class, with the
/// picked probability floored at 1e-12.
pub fn cross_entropy(probs: &Matrix, label: Polarity) -> f64 {
    -probs.get(0, label.index()).max(1e-12).ln()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn toy_record() -> SentenceRecord {
        SentenceRecord {
            tokens: vec!["the".into(), "pasta".into(), "dish".into(), "was".into(), "fine".into()],
            aspect_from: 1,
            aspect_to: 2,
            polarity: Polarity::Neutral,
            dep_head: vec![2, 3, 4, 0, 4],
            dep_label: vec![
                "det".into(),
                "compound".into(),
                "nsubj".into(),
                "root".into(),
                "acomp".into(),
            ],
            constituency: "(S (NP the pasta dish) (VP was fine))".into(),
        }
    }

    fn toy_model(d: usize, l: usize) -> (Model, RecordInputs) {
        let record = toy_record();
        let vocab = TokenVocab::from_records(std::slice::from_ref(&record));
        let labels = LabelVocab::from_records(std::slice::from_ref(&record));
        let mut cfg = Config::default();
        cfg.d = d;
        cfg.l = l;
        cfg.gcn_layers = 2;
        cfg.n_head_sylg = 2;
        cfg.d_r = 4;
        cfg.n_max = 8;
        let model = Model {
            cfg,
            vocab_size: vocab.len(),
            n_labels: labels.len(),
        };
        let inputs = RecordInputs::build(&record, &vocab, &labels, l).unwrap();
        (model, inputs)
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let (model, inputs) = toy_model(8, 2);
        let mut store = ParamStore::new(0);
        let width = model.classifier_width();
        store.get_or_init("classifier.w", width, 3, Init::Const(0.0));
        store.get_or_init("classifier.b", 1, 3, Init::Const(0.0));
        let g = Graph::new();
        let fwd = model.forward(&g, &mut store, &inputs).unwrap();
        let p = fwd.probabilities();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
        let loss = model.loss_for(&g, &fwd, Polarity::Neutral).unwrap();
        assert!((loss.ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn single_token_aspect_pools_to_that_row() {
        let mut record = toy_record();
        record.aspect_from = 4;
        record.aspect_to = 4;
        let vocab = TokenVocab::from_records(std::slice::from_ref(&record));
        let labels = LabelVocab::from_records(std::slice::from_ref(&record));
        let mut cfg = Config::default();
        cfg.d = 8;
        cfg.l = 2;
        cfg.gcn_layers = 1;
        cfg.n_head_sylg = 2;
        cfg.d_r = 4;
        cfg.n_max = 8;
        let model = Model {
            cfg,
            vocab_size: vocab.len(),
            n_labels: labels.len(),
        };
        let inputs = RecordInputs::build(&record, &vocab, &labels, 2).unwrap();
        let g = Graph::new();
        let mut store = ParamStore::new(4);
        let fwd = model.forward(&g, &mut store, &inputs).unwrap();
        let hf = fwd.diag.h_f.value();
        let wp = store.get("classifier.w").unwrap().clone();
        let bp = store.get("classifier.b").unwrap().clone();
        let logits = fwd.logits.value();
        for j in 0..3 {
            let mut expect = bp.get(0, j);
            for k in 0..hf.cols() {
                expect += hf.get(4, k) * wp.get(k, j);
            }
            assert!((logits.get(0, j) - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_is_the_documented_affine_combination() {
        assert!((total_loss(1.0, 0.5, 0.2, 0.1, 0.5).unwrap() - 1.15).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 9.0, 9.0, 0.0, 0.0).unwrap(), 0.7);
        let err = total_loss(1.0, f64::NAN, 0.2, 0.1, 0.5).unwrap_err();
        assert!(err.to_string().contains("segment"));
        let err = total_loss(1.0, 0.5, f64::INFINITY, 0.1, 0.5).unwrap_err();
        assert!(err.to_string().contains("root"));
    }

    #[test]
    fn plain_cross_entropy_hand_values() {
        let uniform = Matrix::from_vec(1, 3, vec![1.0 / 3.0; 3]);
        assert!((cross_entropy(&uniform, Polarity::Positive) - 3f64.ln()).abs() < 1e-12);
        let sharp = Matrix::from_vec(1, 3, vec![0.05, 0.9, 0.05]);
        assert!((cross_entropy(&sharp, Polarity::Negative) - 0.1054).abs() < 1e-4);
        let exact = Matrix::from_vec(1, 3, vec![0.0, 0.0, 1.0]);
        assert_eq!(cross_entropy(&exact, Polarity::Neutral), 0.0);
    }

    #[test]
    fn removing_the_latent_stream_leaves_segment_outputs_bit_identical() {
        let (model, inputs) = toy_model(8, 2);
        let g1 = Graph::new();
        let mut s1 = ParamStore::new(3);
        let full = model.forward(&g1, &mut s1, &inputs).unwrap();

        let mut ablated = model.clone();
        ablated.cfg.ablation = Ablation::NoSylg;
        let g2 = Graph::new();
        let mut s2 = ParamStore::new(3);
        let cut = ablated.forward(&g2, &mut s2, &inputs).unwrap();

        assert_eq!(full.diag.h_ses.value(), cut.diag.h_ses.value());
        assert!(cut.l_r.is_none());
        assert!(cut.diag.root_probs.is_none());
    }

    #[test]
    fn ablations_and_modes_set_classifier_width() {
        let (mut model, inputs) = toy_model(8, 2);
        let widths = [
            (FusionMode::Adaptive, Ablation::Full, 24),
            (FusionMode::Concat, Ablation::Full, 16),
            (FusionMode::Sum, Ablation::Full, 8),
            (FusionMode::Gate, Ablation::Full, 8),
            (FusionMode::Adaptive, Ablation::NoFusion, 16),
        ];
        for (mode, ablation, width) in widths {
            model.cfg.fusion_mode = mode;
            model.cfg.ablation = ablation;
            assert_eq!(model.classifier_width(), width);
            let g = Graph::new();
            let mut store = ParamStore::new(1);
            let fwd = model.forward(&g, &mut store, &inputs).unwrap();
            assert_eq!(fwd.logits.shape(), (1, 3));
            assert_eq!(store.get("classifier.w").unwrap().rows(), width);
            let loss = model.loss_for(&g, &fwd, Polarity::Positive).unwrap();
            assert!(loss.total.scalar_value().is_finite());
        }
    }

    #[test]
    fn ablated_streams_drop_their_loss_terms() {
        let (mut model, inputs) = toy_model(8, 2);
        model.cfg.ablation = Ablation::NoSesg;
        let g = Graph::new();
        let mut store = ParamStore::new(2);
        let fwd = model.forward(&g, &mut store, &inputs).unwrap();
        assert!(fwd.l_seg.is_none());
        assert!(fwd.l_r.is_some());
        let loss = model.loss_for(&g, &fwd, Polarity::Neutral).unwrap();
        assert_eq!(loss.seg, 0.0);
        assert!(loss.root > 0.0);
        assert!(store.get("sesg.boundary.left.wq").is_none());
    }

    #[test]
    fn full_model_gradients_match_finite_differences() {
        let (model, inputs) = toy_model(8, 2);
        let mut store = ParamStore::new(17);
        let report = grad_check(
            &mut store,
            |s, with_grads| {
                let g = Graph::new();
                let fwd = model.forward(&g, s, &inputs)?;
                let loss = model.loss_for(&g, &fwd, inputs.label)?;
                if with_grads {
                    g.backward(loss.total)?;
                    g.export_grads(s);
                }
                Ok(loss.total.scalar_value())
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.pass(), "{}", report.format_table());
    }
}
