use super::layers::{LayerNorm, Linear};
use super::{Builder, Ctx};
use crate::analyzer::{kind, CostSink};
use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// Multi-head self-attention with learned Q/K/V projections; no positional encoding.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    pub name: String,
    pub dim: usize,
    pub heads: usize,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            name: b.prefix().to_string(),
            dim,
            heads,
            query: Linear::new(&mut b, "query", dim, dim),
            key: Linear::new(&mut b, "key", dim, dim),
            value: Linear::new(&mut b, "value", dim, dim),
            out: Linear::new(&mut b, "out", dim, dim),
        }
    }

    fn split_heads<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var, perm: &[usize]) -> Result<Var> {
        let s = cx.tape.shape(x).to_vec();
        let y = cx.tape.reshape(x, &[s[0], s[1], self.heads, self.dim / self.heads])?;
        cx.tape.permute(y, perm)
    }

    /// Returns the attention output and the `[B, heads, S, S]` attention weights.
    pub fn forward_with_weights<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<(Var, Var)> {
        let s = cx.tape.shape(x).to_vec();
        if s.len() != 3 || s[2] != self.dim {
            return Err(Error::shape(
                "attention",
                format!("{} expects [B, S, {}], got {s:?}", self.name, self.dim),
            ));
        }
        let q = self.query.forward(cx, x)?;
        let k = self.key.forward(cx, x)?;
        let v = self.value.forward(cx, x)?;
        let q = self.split_heads(cx, q, &[0, 2, 1, 3])?;
        let kt = self.split_heads(cx, k, &[0, 2, 3, 1])?;
        let v = self.split_heads(cx, v, &[0, 2, 1, 3])?;
        let scores = cx.tape.matmul(q, kt)?;
        let scale = 1.0 / ((self.dim / self.heads) as f64).sqrt();
        let scores = cx.tape.scale(scores, scale)?;
        let weights = cx.tape.softmax(scores, 3)?;
        let ctx = cx.tape.matmul(weights, v)?;
        let ctx = cx.tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = cx.tape.reshape(ctx, &s)?;
        Ok((self.out.forward(cx, ctx)?, weights))
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        Ok(self.forward_with_weights(cx, x)?.0)
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        for l in [&self.query, &self.key, &self.value] {
            l.cost(shape, sink)?;
        }
        let (b, seq) = (shape[0], shape[1]);
        let d_head = self.dim / self.heads;
        let per_product = b * self.heads * seq * seq * d_head;
        let softmax = b * self.heads * seq * seq;
        sink.push(&format!("{}.scores", self.name), kind::ATTENTION, 0, 2 * per_product as u64, softmax as u64);
        self.out.cost(shape, sink)
    }
}

/// Pre-norm transformer encoder layer: `x + MHA(LN(x))`, then `x + MLP(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    pub name: String,
    pub norm1: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, dim: usize, heads: usize, hidden: usize) -> Self {
        let mut b = b.sub(name);
        Self {
            name: b.prefix().to_string(),
            norm1: LayerNorm::new(&mut b, "norm1", dim),
            attn: MultiHeadAttention::new(&mut b, "attn", dim, heads),
            norm2: LayerNorm::new(&mut b, "norm2", dim),
            fc1: Linear::new(&mut b, "mlp.fc1", dim, hidden),
            fc2: Linear::new(&mut b, "mlp.fc2", hidden, dim),
        }
    }

    pub fn forward<T: Scalar>(&self, cx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm1.forward(cx, x)?;
        let h = self.attn.forward(cx, h)?;
        let x = cx.tape.add(x, h)?;
        let h = self.norm2.forward(cx, x)?;
        let h = self.fc1.forward(cx, h)?;
        let h = cx.tape.silu(h)?;
        let h = self.fc2.forward(cx, h)?;
        cx.tape.add(x, h)
    }

    pub fn cost(&self, shape: &[usize], sink: &mut CostSink) -> Result<Vec<usize>> {
        self.norm1.cost(shape, sink)?;
        self.attn.cost(shape, sink)?;
        self.norm2.cost(shape, sink)?;
        let hidden = self.fc1.cost(shape, sink)?;
        let numel: usize = shape.iter().product();
        let hidden_numel: usize = hidden.iter().product();
        sink.push(
            &format!("{}.mlp.act", self.name),
            kind::ACTIVATION,
            0,
            0,
            hidden_numel as u64,
        );
        let out = self.fc2.cost(&hidden, sink)?;
        sink.push(&format!("{}.residual", self.name), kind::ELEMENTWISE, 0, 0, 2 * numel as u64);
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::nn::test_util::{block_gradcheck, build, random};
    use crate::tensor::Tensor;

    #[test]
    fn single_token_attention_is_value_projection() {
        let (attn, store) = build(1, |b| MultiHeadAttention::new(b, "a", 8, 2));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[3, 1, 8], 2));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let (y, w) = attn.forward_with_weights(&mut cx, x).unwrap();
        let v = attn.value.forward(&mut cx, x).unwrap();
        let expect = attn.out.forward(&mut cx, v).unwrap();
        assert!(tape.value(w).data().iter().all(|&p| p == 1.0));
        assert!(tape.value(y).max_abs_diff(tape.value(expect)) < 1e-12);
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let (attn, store) = build(1, |b| MultiHeadAttention::new(b, "a", 8, 4));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(random(&[2, 5, 8], 3));
        let mut cx = Ctx::new(&mut tape, &store, false);
        let (_, w) = attn.forward_with_weights(&mut cx, x).unwrap();
        assert_eq!(tape.shape(w), &[2, 4, 5, 5]);
        for row in tape.value(w).data().chunks(5) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let (layer, store) = build(2, |b| TransformerLayer::new(b, "t", 8, 2, 16));
        let xv = random(&[1, 4, 8], 4);
        let perm = [2usize, 0, 3, 1];
        let mut permuted = Vec::new();
        for &p in &perm {
            permuted.extend_from_slice(&xv.data()[p * 8..(p + 1) * 8]);
        }
        let xp = Tensor::new(&[1, 4, 8], permuted).unwrap();

        let mut tape = Tape::<f64>::new();
        let a = tape.constant(xv);
        let b = tape.constant(xp);
        let mut cx = Ctx::new(&mut tape, &store, false);
        let ya = layer.forward(&mut cx, a).unwrap();
        let yb = layer.forward(&mut cx, b).unwrap();
        let (ya, yb) = (tape.value(ya).data(), tape.value(yb).data());
        for (i, &p) in perm.iter().enumerate() {
            for d in 0..8 {
                assert!((yb[i * 8 + d] - ya[p * 8 + d]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dim_mismatch_is_an_error() {
        let (layer, store) = build(2, |b| TransformerLayer::new(b, "t", 8, 2, 16));
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::zeros(&[1, 4, 6]));
        let mut cx = Ctx::new(&mut tape, &store, false);
        assert!(layer.forward(&mut cx, x).is_err());
    }

    #[test]
    fn transformer_layer_gradcheck() {
        let (layer, store) = build(8, |b| TransformerLayer::new(b, "t", 8, 2, 16));
        let r = block_gradcheck(&store, &[random(&[2, 3, 8], 9)], true, |cx, v| layer.forward(cx, v[0]));
        assert!(r.max_rel_err < 1e-3, "{r:?}");
    }
}
