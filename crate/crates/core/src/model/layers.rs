use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ChunkLayout, Graph, Var};
use crate::mem::attention::{mem_attention, selector_cross_attention, ws_cross_attention};
use crate::model::attention::{attention, AttentionParams};
use crate::model::config::ModelConfig;
use crate::params::ParamStore;
use crate::tensor::{Float, Mask};

/// One forward pass: a fresh graph bound to frozen parameters, with dropout
/// active only when a training RNG is present.
pub struct Forward<'a, F> {
    pub graph: Graph<F>,
    pub params: &'a ParamStore<F>,
    pub config: &'a ModelConfig,
    rng: Option<ChaCha8Rng>,
}

impl<'a, F: Float> Forward<'a, F> {
    pub fn eval(params: &'a ParamStore<F>, config: &'a ModelConfig) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            config,
            rng: None,
        }
    }

    pub fn train(params: &'a ParamStore<F>, config: &'a ModelConfig, seed: u64) -> Self {
        Forward {
            graph: Graph::new(),
            params,
            config,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        self.graph.param(self.params, name)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        match self.rng.as_mut() {
            Some(rng) if self.config.dropout > 0.0 => self.graph.dropout(x, self.config.dropout, rng),
            _ => x,
        }
    }

    pub fn norm(&mut self, x: Var, name: &str) -> Result<Var> {
        let gamma = self.param(name)?;
        self.graph.rms_norm(x, gamma, self.config.norm_eps)
    }

    pub fn attention_params(&mut self, prefix: &str) -> Result<AttentionParams> {
        let q_name = format!("{prefix}.q_mem");
        let q_mem = if self.params.contains(&q_name) {
            Some(self.param(&q_name)?)
        } else {
            None
        };
        Ok(AttentionParams {
            q: self.param(&format!("{prefix}.q"))?,
            q_mem,
            k: self.param(&format!("{prefix}.k"))?,
            v: self.param(&format!("{prefix}.v"))?,
            o: self.param(&format!("{prefix}.o"))?,
        })
    }

    /// `x + dropout(sublayer(norm(x)))`.
    fn residual(
        &mut self,
        x: Var,
        norm: &str,
        sublayer: impl FnOnce(&mut Self, Var) -> Result<Var>,
    ) -> Result<Var> {
        let h = self.norm(x, norm)?;
        let h = sublayer(self, h)?;
        let h = self.dropout(h);
        self.graph.add(x, h)
    }

    /// ReLU feed-forward `wo · dropout(relu(wi · x))`.
    pub fn ffn(&mut self, x: Var, prefix: &str) -> Result<Var> {
        let wi = self.param(&format!("{prefix}.wi"))?;
        let wo = self.param(&format!("{prefix}.wo"))?;
        let h = self.graph.matmul(x, wi)?;
        let h = self.graph.relu(h);
        let h = self.dropout(h);
        self.graph.matmul(h, wo)
    }

    /// Pre-norm encoder block. `layout` selects memory attention.
    pub fn encoder_layer(
        &mut self,
        x: Var,
        layer: usize,
        layout: Option<ChunkLayout>,
        mask: &Mask,
        bias: Var,
    ) -> Result<Var> {
        let prefix = format!("encoder.layer{layer}");
        let p = self.attention_params(&format!("{prefix}.attn"))?;
        let heads = self.config.num_heads;
        let x = self.residual(x, &format!("{prefix}.ln_attn"), |f, h| match layout {
            Some(l) if p.q_mem.is_some() => mem_attention(&mut f.graph, h, &p, l, mask, Some(bias), heads),
            _ => attention(&mut f.graph, h, h, &p, mask, Some(bias), heads),
        })?;
        self.residual(x, &format!("{prefix}.ln_ffn"), |f, h| f.ffn(h, &format!("{prefix}.ffn")))
    }

    /// Pre-norm decoder block: causal self-attention, cross-attention, FFN.
    pub fn decoder_layer(
        &mut self,
        x: Var,
        layer: usize,
        self_mask: &Mask,
        self_bias: Var,
        cross: &CrossSource,
    ) -> Result<Var> {
        let prefix = format!("decoder.layer{layer}");
        let heads = self.config.num_heads;
        let sp = self.attention_params(&format!("{prefix}.self_attn"))?;
        let x = self.residual(x, &format!("{prefix}.ln_self"), |f, h| {
            attention(&mut f.graph, h, h, &sp, self_mask, Some(self_bias), heads)
        })?;
        let cp = self.attention_params(&format!("{prefix}.cross_attn"))?;
        let x = self.residual(x, &format!("{prefix}.ln_cross"), |f, h| match cross {
            CrossSource::Tokens { states, mask } => {
                attention(&mut f.graph, h, *states, &cp, mask, None, heads)
            }
            CrossSource::Selector {
                states,
                layout,
                valid,
            } => selector_cross_attention(&mut f.graph, h, *states, &cp, *layout, valid, heads),
            CrossSource::Memory { states } => ws_cross_attention(&mut f.graph, h, *states, &cp, heads),
        })?;
        self.residual(x, &format!("{prefix}.ln_ffn"), |f, h| f.ffn(h, &format!("{prefix}.ffn")))
    }
}

/// What the decoder cross-attends to.
pub enum CrossSource {
    /// Plain encoder token states `[B, L, d]` with a key-padding mask.
    Tokens { states: Var, mask: Mask },
    /// Full augmented encoder output `[B, n·(M+cl), d]` read through the chunk selector.
    Selector {
        states: Var,
        layout: ChunkLayout,
        valid: Vec<bool>,
    },
    /// Concatenated memory states `[B, n·M, d]`.
    Memory { states: Var },
}
