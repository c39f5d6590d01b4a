//! Scaled dot-product attention blocks: single-head self/cross attention,
//! multi-head cross-modal attention, the position-wise FFN, and the post-norm
//! transformer layer built from them.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{init_projection, ParamSet, Tape, Tensor, Var};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// One attention head's projections, already bound to a tape.
#[derive(Clone, Copy)]
pub struct HeadVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Multi-head attention: per-head projections plus the output projection.
#[derive(Clone)]
pub struct AttnVars {
    pub heads: Vec<HeadVars>,
    pub wo: Var,
}

/// Two-linear ReLU feed-forward block.
#[derive(Clone, Copy)]
pub struct FfnVars {
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

/// Layer-norm affine pair.
#[derive(Clone, Copy)]
pub struct LnVars {
    pub gamma: Var,
    pub beta: Var,
}

/// Full transformer layer: multi-head self-attention, FFN, two layer norms.
#[derive(Clone)]
pub struct LayerVars {
    pub attn: AttnVars,
    pub ffn: FfnVars,
    pub ln1: LnVars,
    pub ln2: LnVars,
}

/// Single-head cross-modal attention returning both the row-stochastic
/// attention matrix and the attended values. Query comes from the target
/// sequence, Key/Value from the source.
pub fn cross_attention_parts(
    tape: &mut Tape,
    x_target: Var,
    x_source: Var,
    head: &HeadVars,
) -> Result<(Var, Var)> {
    let q = tape.matmul(x_target, head.wq)?;
    let k = tape.matmul(x_source, head.wk)?;
    let v = tape.matmul(x_source, head.wv)?;
    let d_k = tape.value(head.wq).shape()[1];
    let scores = tape.matmul_tb(q, k)?;
    let scaled = tape.scale(scores, 1.0 / (d_k as f64).sqrt())?;
    let weights = tape.softmax_rows(scaled)?;
    let out = tape.matmul(weights, v)?;
    Ok((weights, out))
}

/// Single-head cross-modal attention; output keeps the target length.
pub fn cross_attention(
    tape: &mut Tape,
    x_target: Var,
    x_source: Var,
    head: &HeadVars,
) -> Result<Var> {
    Ok(cross_attention_parts(tape, x_target, x_source, head)?.1)
}

/// Single-head self-attention: cross-attention of a sequence with itself.
pub fn self_attention(tape: &mut Tape, x: Var, head: &HeadVars) -> Result<Var> {
    cross_attention(tape, x, x, head)
}

/// Multi-head cross-modal attention: independent heads, concatenated on the
/// feature axis, projected by `wo`.
pub fn multi_head(tape: &mut Tape, x_target: Var, x_source: Var, attn: &AttnVars) -> Result<Var> {
    if attn.heads.is_empty() {
        return Err(Error::Config("multi_head: no heads".into()));
    }
    let mut outs = Vec::with_capacity(attn.heads.len());
    for head in &attn.heads {
        outs.push(cross_attention(tape, x_target, x_source, head)?);
    }
    let cat = tape.concat_last_dim(&outs)?;
    tape.matmul(cat, attn.wo)
}

/// Position-wise feed-forward: `relu(x W1 + b1) W2 + b2`.
pub fn ffn(tape: &mut Tape, x: Var, f: &FfnVars) -> Result<Var> {
    let h = tape.matmul(x, f.w1)?;
    let h = add_bias_any(tape, h, f.b1)?;
    let h = tape.relu(h)?;
    let out = tape.matmul(h, f.w2)?;
    add_bias_any(tape, out, f.b2)
}

/// Bias add that works for both rank-2 activations and rank-1 vectors.
pub fn add_bias_any(tape: &mut Tape, x: Var, bias: Var) -> Result<Var> {
    if tape.value(x).rank() == 1 {
        tape.add(x, bias)
    } else {
        tape.add_bias(x, bias)
    }
}

pub fn layer_norm(tape: &mut Tape, x: Var, ln: &LnVars) -> Result<Var> {
    tape.layer_norm(x, ln.gamma, ln.beta, LAYER_NORM_EPS)
}

/// Post-norm transformer layer:
/// `Z = LN(X + MHSA(X)); out = LN(Z + FFN(Z))`.
pub fn transformer_layer(tape: &mut Tape, x: Var, layer: &LayerVars) -> Result<Var> {
    let sa = multi_head(tape, x, x, &layer.attn)?;
    let res = tape.add(x, sa)?;
    let z = layer_norm(tape, res, &layer.ln1)?;
    let f = ffn(tape, z, &layer.ffn)?;
    let res2 = tape.add(z, f)?;
    layer_norm(tape, res2, &layer.ln2)
}

// ---------------------------------------------------------------------------
// parameter creation / binding
//
// Parameters live in a ParamSet under dotted names; these helpers create and
// re-bind the standard blocks. `d_ff` for the transformer layer follows the
// conventional 4x width.

pub fn init_attn(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    heads: usize,
) -> Result<()> {
    if heads == 0 || d_model % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide model width {d_model}"
        )));
    }
    let d_k = d_model / heads;
    for h in 0..heads {
        set.insert(
            &format!("{prefix}.head{h}.wq"),
            init_projection(rng, d_model, d_k),
            true,
        )?;
        set.insert(
            &format!("{prefix}.head{h}.wk"),
            init_projection(rng, d_model, d_k),
            true,
        )?;
        set.insert(
            &format!("{prefix}.head{h}.wv"),
            init_projection(rng, d_model, d_k),
            true,
        )?;
    }
    set.insert(
        &format!("{prefix}.wo"),
        init_projection(rng, d_model, d_model),
        true,
    )?;
    Ok(())
}

pub fn bind_attn(tape: &mut Tape, set: &ParamSet, prefix: &str, heads: usize) -> Result<AttnVars> {
    let mut hs = Vec::with_capacity(heads);
    for h in 0..heads {
        hs.push(HeadVars {
            wq: tape.param(set.get(&format!("{prefix}.head{h}.wq"))?),
            wk: tape.param(set.get(&format!("{prefix}.head{h}.wk"))?),
            wv: tape.param(set.get(&format!("{prefix}.head{h}.wv"))?),
        });
    }
    Ok(AttnVars {
        heads: hs,
        wo: tape.param(set.get(&format!("{prefix}.wo"))?),
    })
}

pub fn init_ffn(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_in: usize,
    d_hidden: usize,
    d_out: usize,
) -> Result<()> {
    set.insert(
        &format!("{prefix}.w1"),
        init_projection(rng, d_in, d_hidden),
        true,
    )?;
    set.insert(&format!("{prefix}.b1"), Tensor::zeros(&[d_hidden]), true)?;
    set.insert(
        &format!("{prefix}.w2"),
        init_projection(rng, d_hidden, d_out),
        true,
    )?;
    set.insert(&format!("{prefix}.b2"), Tensor::zeros(&[d_out]), true)?;
    Ok(())
}

pub fn bind_ffn(tape: &mut Tape, set: &ParamSet, prefix: &str) -> Result<FfnVars> {
    Ok(FfnVars {
        w1: tape.param(set.get(&format!("{prefix}.w1"))?),
        b1: tape.param(set.get(&format!("{prefix}.b1"))?),
        w2: tape.param(set.get(&format!("{prefix}.w2"))?),
        b2: tape.param(set.get(&format!("{prefix}.b2"))?),
    })
}

pub fn init_ln(set: &mut ParamSet, prefix: &str, d: usize) -> Result<()> {
    set.insert(&format!("{prefix}.gamma"), Tensor::full(&[d], 1.0), true)?;
    set.insert(&format!("{prefix}.beta"), Tensor::zeros(&[d]), true)?;
    Ok(())
}

pub fn bind_ln(tape: &mut Tape, set: &ParamSet, prefix: &str) -> Result<LnVars> {
    Ok(LnVars {
        gamma: tape.param(set.get(&format!("{prefix}.gamma"))?),
        beta: tape.param(set.get(&format!("{prefix}.beta"))?),
    })
}

/// Transformer layer parameters: attention + 4x-wide FFN + two LN pairs.
pub fn init_layer(
    set: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    d_model: usize,
    heads: usize,
) -> Result<()> {
    init_attn(set, rng, &format!("{prefix}.attn"), d_model, heads)?;
    init_ffn(set, rng, &format!("{prefix}.ffn"), d_model, 4 * d_model, d_model)?;
    init_ln(set, &format!("{prefix}.ln1"), d_model)?;
    init_ln(set, &format!("{prefix}.ln2"), d_model)?;
    Ok(())
}

pub fn bind_layer(
    tape: &mut Tape,
    set: &ParamSet,
    prefix: &str,
    heads: usize,
) -> Result<LayerVars> {
    Ok(LayerVars {
        attn: bind_attn(tape, set, &format!("{prefix}.attn"), heads)?,
        ffn: bind_ffn(tape, set, &format!("{prefix}.ffn"))?,
        ln1: bind_ln(tape, set, &format!("{prefix}.ln1"))?,
        ln2: bind_ln(tape, set, &format!("{prefix}.ln2"))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::{assert_close, naive_cross_attention, naive_matmul};
    use rand::SeedableRng;

    fn leaf(tape: &mut Tape, rows: &[Vec<f64>]) -> Var {
        tape.leaf(Tensor::from_rows(rows).unwrap())
    }

    fn random_leaf(tape: &mut Tape, rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Var {
        let t = init_projection(rng, rows, cols);
        tape.leaf(t)
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        // W_Q = W_K = 0 -> scores all zero -> every output row is the mean
        // over time of X W_V.
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]);
        let head = HeadVars {
            wq: tape.leaf(Tensor::zeros(&[2, 2])),
            wk: tape.leaf(Tensor::zeros(&[2, 2])),
            wv: leaf(&mut tape, &[vec![1.0, 0.0], vec![0.0, 1.0]]),
        };
        let out = self_attention(&mut tape, x, &head).unwrap();
        // mean of rows of X (W_V = I)
        let want = [3.0, 4.0];
        for r in 0..3 {
            assert_close(
                &tape.value(out).data()[r * 2..(r + 1) * 2],
                &want,
                1e-12,
                "uniform attention row",
            );
        }
    }

    #[test]
    fn single_token_sequence_is_value_projection() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_leaf(&mut tape, &mut rng, 1, 3);
        let head = HeadVars {
            wq: random_leaf(&mut tape, &mut rng, 3, 2),
            wk: random_leaf(&mut tape, &mut rng, 3, 2),
            wv: random_leaf(&mut tape, &mut rng, 3, 2),
        };
        let out = self_attention(&mut tape, x, &head).unwrap();
        let xv = tape.matmul(x, head.wv).unwrap();
        assert_close(
            tape.value(out).data(),
            tape.value(xv).data(),
            1e-12,
            "T=1 self-attention",
        );
    }

    #[test]
    fn self_attention_matches_direct_evaluation() {
        let mut tape = Tape::new();
        let x = leaf(&mut tape, &[vec![0.2, -0.5], vec![1.0, 0.3]]);
        let wq = leaf(&mut tape, &[vec![0.4, 0.1], vec![-0.2, 0.6]]);
        let wk = leaf(&mut tape, &[vec![0.9, -0.3], vec![0.5, 0.2]]);
        let wv = leaf(&mut tape, &[vec![0.7, 0.8], vec![-0.1, 0.25]]);
        let head = HeadVars { wq, wk, wv };
        let out = self_attention(&mut tape, x, &head).unwrap();
        let want = naive_cross_attention(
            &[0.2, -0.5, 1.0, 0.3],
            &[0.2, -0.5, 1.0, 0.3],
            &[0.4, 0.1, -0.2, 0.6],
            &[0.9, -0.3, 0.5, 0.2],
            &[0.7, 0.8, -0.1, 0.25],
            2,
            2,
            2,
            2,
            2,
        );
        assert_close(tape.value(out).data(), &want, 1e-12, "self-attention");
    }

    #[test]
    fn cross_attention_single_source_token() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x_t = random_leaf(&mut tape, &mut rng, 4, 3);
        let x_s = random_leaf(&mut tape, &mut rng, 1, 3);
        let head = HeadVars {
            wq: random_leaf(&mut tape, &mut rng, 3, 2),
            wk: random_leaf(&mut tape, &mut rng, 3, 2),
            wv: random_leaf(&mut tape, &mut rng, 3, 2),
        };
        let out = cross_attention(&mut tape, x_t, x_s, &head).unwrap();
        let sv = tape.matmul(x_s, head.wv).unwrap();
        let sv_row = tape.value(sv).data().to_vec();
        for r in 0..4 {
            assert_close(
                &tape.value(out).data()[r * 2..(r + 1) * 2],
                &sv_row,
                1e-12,
                "degenerate softmax row",
            );
        }
    }

    #[test]
    fn cross_attention_on_same_input_equals_self_attention() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_leaf(&mut tape, &mut rng, 3, 4);
        let head = HeadVars {
            wq: random_leaf(&mut tape, &mut rng, 4, 2),
            wk: random_leaf(&mut tape, &mut rng, 4, 2),
            wv: random_leaf(&mut tape, &mut rng, 4, 2),
        };
        let a = self_attention(&mut tape, x, &head).unwrap();
        let b = cross_attention(&mut tape, x, x, &head).unwrap();
        assert_eq!(tape.value(a), tape.value(b));
    }

    #[test]
    fn cross_attention_matches_direct_evaluation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let xt = init_projection(&mut rng, 2, 3);
        let xs = init_projection(&mut rng, 3, 3);
        let wq = init_projection(&mut rng, 3, 2);
        let wk = init_projection(&mut rng, 3, 2);
        let wv = init_projection(&mut rng, 3, 2);

        let mut tape = Tape::new();
        let (xt_v, xs_v) = (tape.leaf(xt.clone()), tape.leaf(xs.clone()));
        let head = HeadVars {
            wq: tape.leaf(wq.clone()),
            wk: tape.leaf(wk.clone()),
            wv: tape.leaf(wv.clone()),
        };
        let out = cross_attention(&mut tape, xt_v, xs_v, &head).unwrap();
        let want = naive_cross_attention(
            xt.data(),
            xs.data(),
            wq.data(),
            wk.data(),
            wv.data(),
            2,
            3,
            3,
            2,
            2,
        );
        assert_eq!(tape.value(out).shape(), &[2, 2]);
        assert_close(tape.value(out).data(), &want, 1e-12, "cross-attention");
    }

    #[test]
    fn attention_weights_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let mut tape = Tape::new();
            let xt = random_leaf(&mut tape, &mut rng, 5, 4);
            let xs = random_leaf(&mut tape, &mut rng, 7, 4);
            let head = HeadVars {
                wq: random_leaf(&mut tape, &mut rng, 4, 2),
                wk: random_leaf(&mut tape, &mut rng, 4, 2),
                wv: random_leaf(&mut tape, &mut rng, 4, 2),
            };
            let (weights, _) = cross_attention_parts(&mut tape, xt, xs, &head).unwrap();
            let w = tape.value(weights);
            for r in 0..5 {
                let s: f64 = w.data()[r * 7..(r + 1) * 7].iter().sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn one_head_with_identity_output_equals_single_head() {
        let mut tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let xt = random_leaf(&mut tape, &mut rng, 3, 4);
        let xs = random_leaf(&mut tape, &mut rng, 2, 4);
        let head = HeadVars {
            wq: random_leaf(&mut tape, &mut rng, 4, 4),
            wk: random_leaf(&mut tape, &mut rng, 4, 4),
            wv: random_leaf(&mut tape, &mut rng, 4, 4),
        };
        let attn = AttnVars {
            heads: vec![head],
            wo: tape.leaf(Tensor::eye(4)),
        };
        let mh = multi_head(&mut tape, xt, xs, &attn).unwrap();
        let single = cross_attention(&mut tape, xt, xs, &head).unwrap();
        assert_close(
            tape.value(mh).data(),
            tape.value(single).data(),
            1e-12,
            "h=1 degenerate split",
        );
    }

    #[test]
    fn multi_head_matches_per_head_oracle() {
        // h = 2, d = 4: run each head through the naive oracle, concat,
        // project by W_O.
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let xt = init_projection(&mut rng, 3, 4);
        let xs = init_projection(&mut rng, 2, 4);
        let mut heads_raw = Vec::new();
        for _ in 0..2 {
            heads_raw.push((
                init_projection(&mut rng, 4, 2),
                init_projection(&mut rng, 4, 2),
                init_projection(&mut rng, 4, 2),
            ));
        }
        let wo = init_projection(&mut rng, 4, 4);

        let mut tape = Tape::new();
        let (xt_v, xs_v) = (tape.leaf(xt.clone()), tape.leaf(xs.clone()));
        let attn = AttnVars {
            heads: heads_raw
                .iter()
                .map(|(q, k, v)| HeadVars {
                    wq: tape.leaf(q.clone()),
                    wk: tape.leaf(k.clone()),
                    wv: tape.leaf(v.clone()),
                })
                .collect(),
            wo: tape.leaf(wo.clone()),
        };
        let out = multi_head(&mut tape, xt_v, xs_v, &attn).unwrap();
        assert_eq!(tape.value(out).shape(), &[3, 4]);

        let mut cat = vec![0.0; 3 * 4];
        for (h, (q, k, v)) in heads_raw.iter().enumerate() {
            let head_out = naive_cross_attention(
                xt.data(),
                xs.data(),
                q.data(),
                k.data(),
                v.data(),
                3,
                2,
                4,
                2,
                2,
            );
            for r in 0..3 {
                for c in 0..2 {
                    cat[r * 4 + h * 2 + c] = head_out[r * 2 + c];
                }
            }
        }
        let want = naive_matmul(&cat, wo.data(), 3, 4, 4);
        assert_close(tape.value(out).data(), &want, 1e-12, "multi-head oracle");
    }

    #[test]
    fn transformer_layer_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut set = ParamSet::new();
        init_layer(&mut set, &mut rng, "layer", 4, 2).unwrap();
        let mut tape = Tape::new();
        let layer = bind_layer(&mut tape, &set, "layer", 2).unwrap();
        let x = random_leaf(&mut tape, &mut rng, 6, 4);
        let y = transformer_layer(&mut tape, x, &layer).unwrap();
        assert_eq!(tape.value(y).shape(), &[6, 4]);
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn zero_ffn_reduces_to_attention_sublayer_plus_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut set = ParamSet::new();
        init_layer(&mut set, &mut rng, "l", 4, 1).unwrap();
        for name in ["l.ffn.w1", "l.ffn.w2"] {
            let shape = set.get(name).unwrap().value.shape().to_vec();
            set.set_value(name, Tensor::zeros(&shape)).unwrap();
        }
        let b2 = Tensor::from_vec(vec![4], vec![0.3, -0.1, 0.2, 0.05]).unwrap();
        set.set_value("l.ffn.b2", b2.clone()).unwrap();

        let mut tape = Tape::new();
        let layer = bind_layer(&mut tape, &set, "l", 1).unwrap();
        let x = random_leaf(&mut tape, &mut rng, 3, 4);
        let y = transformer_layer(&mut tape, x, &layer).unwrap();

        // oracle: Z = LN(x + mh(x)); out = LN(Z + b2 broadcast)
        let sa = multi_head(&mut tape, x, x, &layer.attn).unwrap();
        let res = tape.add(x, sa).unwrap();
        let z = layer_norm(&mut tape, res, &layer.ln1).unwrap();
        let b2v = tape.leaf(b2);
        let zb = tape.add_bias(z, b2v).unwrap();
        let want = layer_norm(&mut tape, zb, &layer.ln2).unwrap();
        assert_close(
            tape.value(y).data(),
            tape.value(want).data(),
            1e-12,
            "zero-FFN layer",
        );
    }

    #[test]
    fn transformer_layer_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut set = ParamSet::new();
        init_layer(&mut set, &mut rng, "l", 4, 2).unwrap();
        let x = init_projection(&mut rng, 3, 4);

        let coords: Vec<(String, usize)> = set
            .iter()
            .map(|p| (p.name.clone(), p.value.numel() / 2))
            .collect();
        let report = crate::tensor::grad_check_params(
            &|tape: &mut Tape, params: &ParamSet| {
                let layer = bind_layer(tape, params, "l", 2)?;
                let xv = tape.leaf(x.clone());
                let y = transformer_layer(tape, xv, &layer)?;
                tape.sum(y)
            },
            &set,
            &coords,
            1e-5,
        )
        .unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max_rel_err = {}",
            report.max_rel_err
        );
    }
}
