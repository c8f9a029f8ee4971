use crate::error::{Error, Result};
use crate::graph::{ChunkLayout, Graph, Var};
use crate::mem::chunk::ChunkedBatch;
use crate::mem::mask::{batch_mem_attention_mask, row_kind};
use crate::mem::attention::prefix_memory;
use crate::model::attention::{bucket_grid, causal_mask, key_mask, position_bias};
use crate::model::config::{ModelConfig, Variant};
use crate::model::layers::{CrossSource, Forward};
use crate::params::ParamStore;
use crate::tensor::{Float, Tensor};
use crate::tokenizer::{EOS_ID, PAD_ID};

/// Label value excluded from the loss.
pub const IGNORE_INDEX: i64 = -100;

/// Encoder result bound to a graph.
#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// Every encoder position `[B, T, d]`: `T = L` for the baseline,
    /// `n · (M + chunk_len)` for memory variants.
    pub full: Var,
    /// Token positions only, `[B, n, chunk_len, d]`.
    pub chunk_states: Var,
    /// Memory positions `[B, n · M, d]`, absent when `M = 0`.
    pub memory: Option<Var>,
    pub layout: ChunkLayout,
    pub valid: Vec<bool>,
}

/// Graph-free copy of an [`EncoderOutput`], reusable across decoding steps.
#[derive(Clone, Debug)]
pub struct EncoderValues<F> {
    pub full: Tensor<F>,
    pub layout: ChunkLayout,
    pub valid: Vec<bool>,
}

impl EncoderOutput {
    pub fn values<F: Float>(&self, g: &Graph<F>) -> EncoderValues<F> {
        EncoderValues {
            full: g.value(self.full).clone(),
            layout: self.layout,
            valid: self.valid.clone(),
        }
    }
}

impl<F: Float> EncoderValues<F> {
    pub fn bind(&self, g: &mut Graph<F>) -> Result<EncoderOutput> {
        let full = g.constant(self.full.clone());
        split_output(g, full, self.layout, self.valid.clone())
    }
}

fn split_output<F: Float>(
    g: &mut Graph<F>,
    full: Var,
    layout: ChunkLayout,
    valid: Vec<bool>,
) -> Result<EncoderOutput> {
    let s = g.shape(full).to_vec();
    let (b, d) = (s[0], s[2]);
    let blocks = g.reshape(full, &[b, layout.n_chunks, layout.block(), d])?;
    let chunk_states = g.narrow(blocks, 2, layout.mem, layout.chunk_len)?;
    let memory = if layout.mem > 0 {
        let m = g.narrow(blocks, 2, 0, layout.mem)?;
        Some(g.reshape(m, &[b, layout.n_chunks * layout.mem, d])?)
    } else {
        None
    };
    Ok(EncoderOutput {
        full,
        chunk_states,
        memory,
        layout,
        valid,
    })
}

/// A padded encoder-decoder training batch.
#[derive(Clone, Debug, PartialEq)]
pub struct Seq2SeqBatch {
    pub source: ChunkedBatch,
    /// `[B, target_len]`: pad (the start token) followed by the shifted target.
    pub decoder_input: Vec<u32>,
    /// `[B, target_len]`: target ids, `IGNORE_INDEX` past each target's end.
    pub labels: Vec<i64>,
    pub target_len: usize,
}

impl Seq2SeqBatch {
    pub fn new(source: ChunkedBatch, targets: &[Vec<u32>]) -> Result<Self> {
        if targets.len() != source.batch {
            return Err(Error::shape("batch", &[source.batch], &[targets.len()]));
        }
        let target_len = targets.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut decoder_input = Vec::with_capacity(targets.len() * target_len);
        let mut labels = Vec::with_capacity(targets.len() * target_len);
        for (row, t) in targets.iter().enumerate() {
            decoder_input.push(PAD_ID);
            decoder_input.extend(t.iter().take(t.len().saturating_sub(1)));
            decoder_input.resize((row + 1) * target_len, PAD_ID);
            labels.extend(t.iter().map(|&x| i64::from(x)));
            labels.resize((row + 1) * target_len, IGNORE_INDEX);
        }
        Ok(Seq2SeqBatch {
            source,
            decoder_input,
            labels,
            target_len,
        })
    }
}

/// Encoder-decoder model: configuration plus parameters.
#[derive(Clone, Debug)]
pub struct Model<F> {
    pub config: ModelConfig,
    pub params: ParamStore<F>,
}

impl<F: Float> Forward<'_, F> {
    /// Embeds `batch` and runs the encoder.
    pub fn encode(&mut self, batch: &ChunkedBatch) -> Result<EncoderOutput> {
        self.check_geometry(batch)?;
        let d = self.config.d_model;
        let table = self.param("shared.embed")?;
        let emb = self.graph.embedding(table, &batch.ids)?;
        let emb = self
            .graph
            .reshape(emb, &[batch.batch, batch.n_chunks, batch.chunk_len, d])?;
        self.encode_embedded(emb, &batch.valid)
    }

    fn check_geometry(&self, batch: &ChunkedBatch) -> Result<()> {
        let c = self.config;
        if (batch.n_chunks, batch.chunk_len) != (c.n_chunks, c.chunk_len) {
            return Err(Error::Config(format!(
                "batch chunking {}x{} does not match model {}x{}",
                batch.n_chunks, batch.chunk_len, c.n_chunks, c.chunk_len
            )));
        }
        Ok(())
    }

    /// Runs the encoder on token embeddings `[B, n, chunk_len, d]`.
    pub fn encode_embedded(&mut self, emb: Var, valid: &[bool]) -> Result<EncoderOutput> {
        let c = self.config;
        let s = self.graph.shape(emb).to_vec();
        let (b, d) = (s[0], s[3]);
        let emb = self.dropout(emb);
        if c.variant == Variant::Baseline {
            return self.encode_plain(emb, valid);
        }
        let layout = ChunkLayout {
            n_chunks: c.n_chunks,
            mem: c.mem_tokens,
            chunk_len: c.chunk_len,
        };
        let mem_init = if c.mem_tokens > 0 {
            Some(self.param("encoder.mem_init")?)
        } else {
            None
        };
        let x = prefix_memory(&mut self.graph, emb, mem_init)?;
        let mut x = self.graph.reshape(x, &[b, layout.total(), d])?;
        let mask = batch_mem_attention_mask(layout, valid, b)?;
        let pos: Vec<Option<usize>> = (0..layout.total()).map(|r| row_kind(layout, r).1).collect();
        let ids = bucket_grid(&pos, &pos, true, c.rel_buckets, c.rel_max_distance, c.rel_buckets);
        let table = self.param("encoder.rel_bias")?;
        let bias = position_bias(&mut self.graph, table, &ids, layout.total(), layout.total())?;
        for l in 0..c.num_layers {
            x = self.encoder_layer(x, l, Some(layout), &mask, bias)?;
        }
        let x = self.norm(x, "encoder.final_ln")?;
        let x = self.dropout(x);
        split_output(&mut self.graph, x, layout, valid.to_vec())
    }

    fn encode_plain(&mut self, emb: Var, valid: &[bool]) -> Result<EncoderOutput> {
        let c = self.config;
        let s = self.graph.shape(emb).to_vec();
        let (b, d) = (s[0], s[3]);
        let len = s[1] * s[2];
        let mut x = self.graph.reshape(emb, &[b, len, d])?;
        let mask = key_mask(valid, b);
        let pos: Vec<Option<usize>> = (0..len).map(Some).collect();
        let ids = bucket_grid(&pos, &pos, true, c.rel_buckets, c.rel_max_distance, 0);
        let table = self.param("encoder.rel_bias")?;
        let bias = position_bias(&mut self.graph, table, &ids, len, len)?;
        for l in 0..c.num_layers {
            x = self.encoder_layer(x, l, None, &mask, bias)?;
        }
        let x = self.norm(x, "encoder.final_ln")?;
        let x = self.dropout(x);
        let layout = ChunkLayout {
            n_chunks: 1,
            mem: 0,
            chunk_len: len,
        };
        split_output(&mut self.graph, x, layout, valid.to_vec())
    }

    /// Mean token cross-entropy of `batch`.
    pub fn loss(&mut self, batch: &Seq2SeqBatch) -> Result<Var> {
        let enc = self.encode(&batch.source)?;
        let logits = self.decode(&enc, &batch.decoder_input, batch.target_len)?;
        self.graph.cross_entropy_mean(logits, &batch.labels, IGNORE_INDEX)
    }

    /// Decoder logits `[B · t, V]` for decoder inputs `[B, t]`.
    pub fn decode(&mut self, enc: &EncoderOutput, decoder_input: &[u32], t: usize) -> Result<Var> {
        let c = self.config;
        let b = decoder_input.len() / t;
        let d = c.d_model;
        let table = self.param("shared.embed")?;
        let x = self.graph.embedding(table, decoder_input)?;
        let x = self.graph.reshape(x, &[b, t, d])?;
        let mut x = self.dropout(x);
        let mask = causal_mask(t);
        let pos: Vec<Option<usize>> = (0..t).map(Some).collect();
        let ids = bucket_grid(&pos, &pos, false, c.rel_buckets, c.rel_max_distance, 0);
        let rel = self.param("decoder.rel_bias")?;
        let bias = position_bias(&mut self.graph, rel, &ids, t, t)?;
        let cross = match c.variant {
            Variant::Baseline => CrossSource::Tokens {
                states: enc.full,
                mask: key_mask(&enc.valid, b),
            },
            Variant::Mem => CrossSource::Selector {
                states: enc.full,
                layout: enc.layout,
                valid: enc.valid.clone(),
            },
            Variant::MemWs | Variant::MemWsWma => CrossSource::Memory {
                states: enc.memory.ok_or_else(|| {
                    Error::Config("memory cross-attention needs mem_tokens >= 1".into())
                })?,
            },
        };
        for l in 0..c.num_layers {
            x = self.decoder_layer(x, l, &mask, bias, &cross)?;
        }
        let x = self.norm(x, "decoder.final_ln")?;
        let x = self.dropout(x);
        let x = self.graph.reshape(x, &[b * t, d])?;
        if c.tie_embeddings {
            let et = self.graph.transpose(table)?;
            let logits = self.graph.matmul(x, et)?;
            Ok(self.graph.scale(logits, F::of(1.0 / (d as f64).sqrt())))
        } else {
            let head = self.param("lm_head")?;
            self.graph.matmul(x, head)
        }
    }
}

impl<F: Float> Model<F> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = config.init_params(seed)?;
        Ok(Model { config, params })
    }

    pub fn from_params(config: ModelConfig, params: ParamStore<F>) -> Result<Self> {
        config.validate()?;
        config.check_params(&params)?;
        Ok(Model { config, params })
    }

    pub fn forward_eval(&self) -> Forward<'_, F> {
        Forward::eval(&self.params, &self.config)
    }

    /// Builds the loss graph. Dropout is active when `dropout_seed` is set.
    pub fn loss(&self, batch: &Seq2SeqBatch, dropout_seed: Option<u64>) -> Result<(Forward<'_, F>, Var)> {
        let mut f = match dropout_seed {
            Some(s) => Forward::train(&self.params, &self.config, s),
            None => Forward::eval(&self.params, &self.config),
        };
        let loss = f.loss(batch)?;
        Ok((f, loss))
    }

    /// Greedy decoding without dropout. Each output stops after the first
    /// end-of-sequence token (included) or after `max_len` tokens.
    pub fn greedy_decode(&self, source: &ChunkedBatch, max_len: usize) -> Result<Vec<Vec<u32>>> {
        let b = source.batch;
        let enc = {
            let mut f = self.forward_eval();
            let enc = f.encode(source)?;
            enc.values(&f.graph)
        };
        let mut outputs: Vec<Vec<u32>> = vec![Vec::new(); b];
        let mut done = vec![false; b];
        for step in 0..max_len {
            if done.iter().all(|&x| x) {
                break;
            }
            let t = step + 1;
            let mut input = Vec::with_capacity(b * t);
            for (i, o) in outputs.iter().enumerate() {
                input.push(PAD_ID);
                input.extend(o.iter().copied());
                input.resize((i + 1) * t, PAD_ID);
            }
            let mut f = self.forward_eval();
            let e = enc.bind(&mut f.graph)?;
            let logits = f.decode(&e, &input, t)?;
            let v = self.config.vocab_size;
            let ld = f.graph.value(logits).data();
            for (i, out) in outputs.iter_mut().enumerate() {
                if done[i] {
                    continue;
                }
                let row = &ld[(i * t + t - 1) * v..(i * t + t) * v];
                let next = argmax(row) as u32;
                out.push(next);
                if next == EOS_ID {
                    done[i] = true;
                }
            }
        }
        Ok(outputs)
    }
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax<F: Float>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mem::chunk::chunk_input;

    fn small(variant: Variant) -> ModelConfig {
        let mem = variant.uses_memory();
        ModelConfig {
            variant,
            d_model: 16,
            num_heads: 2,
            d_kv: 8,
            d_ff: 32,
            num_layers: 2,
            vocab_size: 40,
            dropout: 0.1,
            n_chunks: if mem { 2 } else { 1 },
            chunk_len: if mem { 4 } else { 8 },
            mem_tokens: if mem { 2 } else { 0 },
            rel_buckets: 8,
            rel_max_distance: 16,
            ..Default::default()
        }
    }

    fn batch(cfg: &ModelConfig) -> Seq2SeqBatch {
        let a = chunk_input(&[5, 6, 7, 8, 9], cfg.chunk_len, cfg.n_chunks, false).unwrap();
        let b = chunk_input(&[10, 11, 12], cfg.chunk_len, cfg.n_chunks, false).unwrap();
        let src = ChunkedBatch::stack(&[a, b]).unwrap();
        Seq2SeqBatch::new(src, &[vec![3, 4, EOS_ID], vec![7, EOS_ID]]).unwrap()
    }

    #[test]
    fn decoder_inputs_are_shifted_targets() {
        let cfg = small(Variant::Baseline);
        let b = batch(&cfg);
        assert_eq!(b.target_len, 3);
        assert_eq!(b.decoder_input, vec![0, 3, 4, 0, 7, 0]);
        assert_eq!(b.labels, vec![3, 4, 1, 7, 1, IGNORE_INDEX]);
    }

    #[test]
    fn every_variant_produces_finite_loss_and_grads() {
        for v in [Variant::Baseline, Variant::Mem, Variant::MemWs, Variant::MemWsWma] {
            let cfg = small(v);
            let m = Model::<f32>::new(cfg.clone(), 3).unwrap();
            let (mut f, loss) = m.loss(&batch(&cfg), Some(9)).unwrap();
            let l = f.graph.value(loss).item();
            assert!(l.is_finite() && l > 0.0, "{v:?}");
            f.graph.backward(loss).unwrap();
            let grads = f.graph.param_grads();
            assert_eq!(grads.len(), m.params.len(), "{v:?} unused parameter");
            assert!(grads.iter().all(|(_, g)| g.all_finite()));
        }
    }

    #[test]
    fn eval_loss_is_deterministic() {
        let cfg = small(Variant::Mem);
        let m = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let (f1, l1) = m.loss(&batch(&cfg), None).unwrap();
        let (f2, l2) = m.loss(&batch(&cfg), None).unwrap();
        assert_eq!(f1.graph.value(l1).item().to_bits(), f2.graph.value(l2).item().to_bits());
    }

    #[test]
    fn greedy_decode_respects_max_len() {
        let cfg = small(Variant::MemWs);
        let m = Model::<f32>::new(cfg.clone(), 3).unwrap();
        let out = m.greedy_decode(&batch(&cfg).source, 5).unwrap();
        assert_eq!(out.len(), 2);
        for o in &out {
            assert!(o.len() <= 5);
            assert!(o.iter().position(|&t| t == EOS_ID).is_none_or(|p| p == o.len() - 1));
        }
    }

    #[test]
    fn wrong_chunk_geometry_is_rejected() {
        let cfg = small(Variant::Mem);
        let m = Model::<f32>::new(cfg, 3).unwrap();
        let src = chunk_input(&[5, 6], 3, 2, false).unwrap();
        assert!(matches!(m.greedy_decode(&src, 2), Err(Error::Config(_))));
    }
}
