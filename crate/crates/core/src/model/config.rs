use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{truncated_normal, ParamStore};
use crate::tensor::{Float, Tensor};

/// Architecture variant.
///
/// * `Baseline` – plain T5 encoder-decoder over a single unchunked source.
/// * `Mem` – chunked encoder with per-chunk memory slots, a separate query
///   projection for memory rows, and the chunk selector feeding the decoder.
/// * `MemWs` – as `Mem`, but the decoder cross-attends only to the
///   concatenated memory slots ("without selector").
/// * `MemWsWma` – as `MemWs`, with one shared query projection in the encoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Baseline,
    Mem,
    MemWs,
    MemWsWma,
}

impl Variant {
    pub fn uses_memory(self) -> bool {
        self != Variant::Baseline
    }

    /// Separate `W^Q` for memory rows in the encoder.
    pub fn separate_memory_query(self) -> bool {
        matches!(self, Variant::Mem | Variant::MemWs)
    }

    /// Decoder cross-attends to memory slots only.
    pub fn memory_cross_attention(self) -> bool {
        matches!(self, Variant::MemWs | Variant::MemWsWma)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub d_model: usize,
    pub num_heads: usize,
    pub d_kv: usize,
    pub d_ff: usize,
    pub num_layers: usize,
    pub vocab_size: usize,
    pub dropout: f64,
    pub n_chunks: usize,
    pub chunk_len: usize,
    pub mem_tokens: usize,
    pub rel_buckets: usize,
    pub rel_max_distance: usize,
    pub tie_embeddings: bool,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Baseline,
            d_model: 512,
            num_heads: 8,
            d_kv: 64,
            d_ff: 2048,
            num_layers: 2,
            vocab_size: 32000,
            dropout: 0.1,
            n_chunks: 1,
            chunk_len: 512,
            mem_tokens: 0,
            rel_buckets: 32,
            rel_max_distance: 128,
            tie_embeddings: false,
            norm_eps: 1e-6,
        }
    }
}

/// How a parameter is initialized.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    Normal(f64),
    Ones,
}

impl ModelConfig {
    /// Total source capacity `n_chunks · chunk_len`.
    pub fn source_len(&self) -> usize {
        self.n_chunks * self.chunk_len
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.d_model != self.num_heads * self.d_kv {
            return fail(format!(
                "d_model ({}) must equal num_heads ({}) * d_kv ({})",
                self.d_model, self.num_heads, self.d_kv
            ));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.num_layers == 0 || self.vocab_size == 0 {
            return fail("model sizes must be positive".into());
        }
        if self.n_chunks == 0 || self.chunk_len == 0 {
            return fail("n_chunks and chunk_len must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.rel_buckets < 2 {
            return fail("rel_buckets must be at least 2".into());
        }
        match self.variant {
            Variant::Baseline if self.n_chunks != 1 || self.mem_tokens != 0 => fail(
                "variant baseline requires n_chunks == 1 and mem_tokens == 0".into(),
            ),
            Variant::MemWs | Variant::MemWsWma if self.mem_tokens == 0 => fail(format!(
                "variant {:?} cross-attends to memory slots and needs mem_tokens >= 1",
                self.variant
            )),
            _ => Ok(()),
        }
    }

    /// Name, shape and initializer of every parameter, in a fixed order.
    ///
    /// Projections are stored `[in, out]` so that `y = x · W`.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>, Init)> {
        let d = self.d_model;
        let proj = Init::Normal(1.0 / (d as f64).sqrt());
        let mut specs = vec![("shared.embed".to_string(), vec![self.vocab_size, d], Init::Normal(1.0))];
        if self.variant.uses_memory() && self.mem_tokens > 0 {
            specs.push(("encoder.mem_init".into(), vec![self.mem_tokens, d], Init::Normal(1.0)));
        }
        let enc_buckets = self.rel_buckets + usize::from(self.variant.uses_memory());
        specs.push((
            "encoder.rel_bias".into(),
            vec![enc_buckets, self.num_heads],
            proj,
        ));
        specs.push((
            "decoder.rel_bias".into(),
            vec![self.rel_buckets, self.num_heads],
            proj,
        ));
        let attn = |specs: &mut Vec<_>, prefix: String, q_mem: bool| {
            let mut names = vec!["q", "k", "v", "o"];
            if q_mem {
                names.insert(1, "q_mem");
            }
            for n in names {
                specs.push((format!("{prefix}.{n}"), vec![d, d], proj));
            }
        };
        let ffn = |specs: &mut Vec<_>, prefix: String| {
            specs.push((format!("{prefix}.wi"), vec![d, self.d_ff], proj));
            specs.push((format!("{prefix}.wo"), vec![self.d_ff, d], proj));
        };
        for l in 0..self.num_layers {
            let p = format!("encoder.layer{l}");
            specs.push((format!("{p}.ln_attn"), vec![d], Init::Ones));
            attn(&mut specs, format!("{p}.attn"), self.variant.separate_memory_query());
            specs.push((format!("{p}.ln_ffn"), vec![d], Init::Ones));
            ffn(&mut specs, format!("{p}.ffn"));
        }
        specs.push(("encoder.final_ln".into(), vec![d], Init::Ones));
        for l in 0..self.num_layers {
            let p = format!("decoder.layer{l}");
            specs.push((format!("{p}.ln_self"), vec![d], Init::Ones));
            attn(&mut specs, format!("{p}.self_attn"), false);
            specs.push((format!("{p}.ln_cross"), vec![d], Init::Ones));
            attn(&mut specs, format!("{p}.cross_attn"), false);
            specs.push((format!("{p}.ln_ffn"), vec![d], Init::Ones));
            ffn(&mut specs, format!("{p}.ffn"));
        }
        specs.push(("decoder.final_ln".into(), vec![d], Init::Ones));
        if !self.tie_embeddings {
            specs.push(("lm_head".into(), vec![d, self.vocab_size], proj));
        }
        specs
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// V·d                                   embeddings
    /// + (R + [mem]) · h + R · h              relative-position tables
    /// + [mem] · M · d                        memory-slot initial states
    /// + L · (4d² + [sepQ]·d² + 2·d·d_ff + 2d) encoder layers
    /// + L · (8d² + 2·d·d_ff + 3d)             decoder layers
    /// + 2d                                   final norms
    /// + [untied] · d·V                       output projection
    /// ```
    pub fn expected_param_count(&self) -> usize {
        let (d, v, h, r, l, ff, m) = (
            self.d_model,
            self.vocab_size,
            self.num_heads,
            self.rel_buckets,
            self.num_layers,
            self.d_ff,
            self.mem_tokens,
        );
        let mem = usize::from(self.variant.uses_memory());
        let sep_q = usize::from(self.variant.separate_memory_query());
        v * d
            + (r + mem) * h
            + r * h
            + mem * m * d
            + l * (4 * d * d + sep_q * d * d + 2 * d * ff + 2 * d)
            + l * (8 * d * d + 2 * d * ff + 3 * d)
            + 2 * d
            + usize::from(!self.tie_embeddings) * d * v
    }

    pub fn init_params<F: Float>(&self, seed: u64) -> Result<ParamStore<F>> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        for (name, shape, init) in self.param_specs() {
            let t = match init {
                Init::Normal(std) => truncated_normal(&shape, std, &mut rng),
                Init::Ones => Tensor::full(shape, F::one()),
            };
            store.insert(name, t);
        }
        Ok(store)
    }

    /// Checks that `store` holds exactly the parameters this config expects.
    pub fn check_params<F: Float>(&self, store: &ParamStore<F>) -> Result<()> {
        let specs = self.param_specs();
        for (name, shape, _) in &specs {
            let t = store
                .get(name)
                .map_err(|_| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, config expects {:?}",
                    t.shape(),
                    shape
                )));
            }
        }
        if store.len() != specs.len() {
            let extra = store
                .names()
                .find(|n| !specs.iter().any(|(s, _, _)| s == n))
                .unwrap_or_default()
                .to_string();
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_size_dimensions_are_consistent() {
        let c = ModelConfig::default();
        assert_eq!(c.d_model, c.num_heads * c.d_kv);
        assert_eq!(c.d_kv, 64);
        c.validate().unwrap();
    }

    #[test]
    fn baseline_rejects_chunks_or_memory() {
        let c = ModelConfig {
            n_chunks: 4,
            chunk_len: 128,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = ModelConfig {
            mem_tokens: 2,
            ..Default::default()
        };
        assert!(c.validate().is_err());
    }

    #[test]
    fn ws_requires_memory() {
        let c = ModelConfig {
            variant: Variant::MemWs,
            mem_tokens: 0,
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn closed_form_param_count_matches_allocation() {
        for variant in [
            Variant::Baseline,
            Variant::Mem,
            Variant::MemWs,
            Variant::MemWsWma,
        ] {
            for tie in [false, true] {
                let c = ModelConfig {
                    variant,
                    d_model: 16,
                    num_heads: 2,
                    d_kv: 8,
                    d_ff: 24,
                    vocab_size: 50,
                    n_chunks: if variant.uses_memory() { 2 } else { 1 },
                    chunk_len: 4,
                    mem_tokens: if variant.uses_memory() { 2 } else { 0 },
                    tie_embeddings: tie,
                    ..Default::default()
                };
                let p = c.init_params::<f32>(1).unwrap();
                assert_eq!(p.num_elements(), c.expected_param_count(), "{variant:?} tie={tie}");
            }
        }
        // Full-size baseline: 2 layers, d=512, V=32000, untied.
        let c = ModelConfig::default();
        assert_eq!(c.expected_param_count(), 47_454_720);
    }

    #[test]
    fn wma_has_no_memory_query() {
        let c = ModelConfig {
            variant: Variant::MemWsWma,
            d_model: 8,
            num_heads: 2,
            d_kv: 4,
            d_ff: 8,
            vocab_size: 10,
            n_chunks: 2,
            chunk_len: 3,
            mem_tokens: 1,
            ..Default::default()
        };
        let p = c.init_params::<f64>(0).unwrap();
        assert!(p.names().all(|n| !n.contains("q_mem")));
        let c = ModelConfig {
            variant: Variant::Mem,
            ..c
        };
        let p = c.init_params::<f64>(0).unwrap();
        assert!(p.contains("encoder.layer0.attn.q_mem"));
    }
}
