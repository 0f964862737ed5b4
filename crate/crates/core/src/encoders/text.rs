use ndarray::Array2;
use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Var};
use crate::encoders::tokenizer::Tokenized;
use crate::error::{Error, Result};
use crate::nn::{leaf, normal, Grad, LayerNorm, ResidualBlock};

#[derive(Clone, Debug)]
pub struct TextDims {
    pub vocab_size: usize,
    pub context: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

/// Parameter handles of the causal text tower.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub dims: TextDims,
    token_embed: ParamId,
    position_embed: ParamId,
    blocks: Vec<ResidualBlock>,
    ln_final: LayerNorm,
    projection: ParamId,
}

impl TextEncoder {
    pub fn register(store: &mut ParamStore, dims: TextDims, rng: &mut impl Rng) -> Self {
        let w = dims.width;
        let token_embed = store.add(
            "text_model.embeddings.token_embedding.weight",
            normal(rng, (dims.vocab_size, w), 0.02),
        );
        let position_embed = store.add(
            "text_model.embeddings.position_embedding.weight",
            normal(rng, (dims.context, w), 0.01),
        );
        let blocks = (0..dims.layers)
            .map(|i| {
                ResidualBlock::register(
                    store,
                    &format!("text_model.encoder.layers.{i}"),
                    w,
                    dims.heads,
                    rng,
                )
            })
            .collect();
        let ln_final = LayerNorm::register(store, "text_model.final_layer_norm", w);
        let projection = store.add(
            "text_projection.weight",
            normal(rng, (dims.embed_dim, w), (w as f64).powf(-0.5)),
        );
        Self {
            dims,
            token_embed,
            position_embed,
            blocks,
            ln_final,
            projection,
        }
    }

    /// Embeds one tokenized prompt, reading the output at the final (end
    /// marker) position. Under the causal mask, padding past that position
    /// cannot influence it, so the sequence is run unpadded.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        tokens: &Tokenized,
        grad: Grad,
    ) -> Result<Var> {
        let len = tokens.ids.len();
        if len == 0 || len > self.dims.context {
            return Err(Error::Shape(format!(
                "token sequence of length {len} outside context {}",
                self.dims.context
            )));
        }
        if let Some(bad) = tokens.ids.iter().find(|&&t| t >= self.dims.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} outside vocabulary of {}",
                self.dims.vocab_size
            )));
        }
        let table = leaf(g, store, self.token_embed, grad);
        let words = g.gather_rows(table, tokens.ids.clone());
        let pos = leaf(g, store, self.position_embed, grad);
        let pos = g.slice_rows(pos, 0, len);
        let mut x = g.add(words, pos);
        let mask = g.constant(causal_mask(len));
        for block in &self.blocks {
            x = block.forward(g, store, x, Some(mask), grad);
        }
        let x = self.ln_final.forward(g, store, x, grad);
        let last = g.slice_rows(x, len - 1, 1);
        let proj = leaf(g, store, self.projection, grad);
        Ok(g.matmul_bt(last, proj))
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = vec![self.token_embed, self.position_embed];
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_final.params());
        p.push(self.projection);
        p
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position_embed
    }
}

fn causal_mask(len: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, len), |(i, j)| if j > i { f64::NEG_INFINITY } else { 0.0 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mask_blocks_future_positions() {
        let m = causal_mask(3);
        assert_eq!(m[[0, 1]], f64::NEG_INFINITY);
        assert_eq!(m[[2, 1]], 0.0);
        assert_eq!(m[[1, 1]], 0.0);
    }
}
