//! Contextual token representations from learned word and position
//! embeddings, with an optional single self-attention mixing layer.

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};

pub struct EncoderConfig {
    pub d: usize,
    pub n_max: usize,
    pub vocab_size: usize,
    pub mixing: bool,
}

/// Produces the n x d contextual representation for one token-id sequence.
pub fn encode<'g>(
    g: &'g Graph,
    store: &mut ParamStore,
    token_ids: &[usize],
    cfg: &EncoderConfig,
) -> Result<Var<'g>> {
    let n = token_ids.len();
    if n == 0 {
        return Err(Error::invalid("cannot encode an empty sentence"));
    }
    if n > cfg.n_max {
        return Err(Error::invalid(format!(
            "sentence length {n} exceeds the position table size {}",
            cfg.n_max
        )));
    }
    let embed = g.param(store, "encoder.embed", cfg.vocab_size, cfg.d, Init::Uniform);
    let pos = g.param(store, "encoder.pos", cfg.n_max, cfg.d, Init::Uniform);
    let words = g.gather(embed, token_ids, None)?;
    let positions: Vec<usize> = (0..n).collect();
    let pos_rows = g.gather(pos, &positions, None)?;
    let x = g.add(words, pos_rows);
    if !cfg.mixing {
        return Ok(x);
    }
    let wq = g.param(store, "encoder.mix.wq", cfg.d, cfg.d, Init::Uniform);
    let wk = g.param(store, "encoder.mix.wk", cfg.d, cfg.d, Init::Uniform);
    let wv = g.param(store, "encoder.mix.wv", cfg.d, cfg.d, Init::Uniform);
    let q = g.matmul(x, wq);
    let k = g.matmul(x, wk);
    let scores = g.scale(g.matmul(q, g.transpose(k)), 1.0 / (cfg.d as f64).sqrt());
    let attn = g.softmax_rows(scores);
    Ok(g.add(x, g.matmul(attn, g.matmul(x, wv))))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;
    use crate::matrix::Matrix;

    fn cfg(mixing: bool) -> EncoderConfig {
        EncoderConfig {
            d: 4,
            n_max: 8,
            vocab_size: 5,
            mixing,
        }
    }

    #[test]
    fn zero_tables_give_zero_output() {
        let mut store = ParamStore::new(0);
        store.get_or_init("encoder.embed", 5, 4, Init::Const(0.0));
        store.get_or_init("encoder.pos", 8, 4, Init::Const(0.0));
        let g = Graph::new();
        let hc = encode(&g, &mut store, &[1, 2, 3], &cfg(false)).unwrap();
        assert_eq!(hc.value(), Matrix::zeros(3, 4));
    }

    #[test]
    fn without_mixing_rows_differ_only_by_position() {
        let mut store = ParamStore::new(9);
        let g = Graph::new();
        // The same token twice: subtracting position rows leaves equal rows.
        let hc = encode(&g, &mut store, &[2, 2], &cfg(false)).unwrap();
        let v = hc.value();
        let pos = store.get("encoder.pos").unwrap();
        for c in 0..4 {
            let r0 = v.get(0, c) - pos.get(0, c);
            let r1 = v.get(1, c) - pos.get(1, c);
            assert!((r0 - r1).abs() < 1e-15);
        }
    }

    #[test]
    fn overlong_sentence_rejected() {
        let mut store = ParamStore::new(0);
        let g = Graph::new();
        let ids = vec![1usize; 9];
        assert!(encode(&g, &mut store, &ids, &cfg(false)).is_err());
    }

    #[test]
    fn embedding_gradients_match_finite_differences() {
        let mut store = ParamStore::new(4);
        let targets = Matrix::from_rows(&[
            vec![0.3, -0.2, 0.8, 0.1],
            vec![-0.5, 0.4, 0.0, 0.9],
            vec![0.2, 0.2, -0.7, 0.3],
        ]);
        let report = grad_check(
            &mut store,
            |s, with_grads| {
                let g = Graph::new();
                let hc = encode(&g, s, &[1, 4, 1], &cfg(true))?;
                let diff = g.sub(hc, g.constant(targets.clone()));
                let loss = g.sum(g.mul(diff, diff));
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
}
