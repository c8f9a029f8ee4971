//! Independent checks of the architecture: loop-based attention oracles,
//! finite-difference gradient checks, reachability probes and cost counts.

pub mod cost;
pub mod gradcheck;
pub mod oracle;
pub mod report;

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ChunkLayout, Graph};
use crate::mem::attention::{mem_attention, selector_cross_attention};
use crate::mem::chunk::{chunk_input, ChunkedBatch};
use crate::mem::mask::{build_mem_attention_mask, row_kind};
use crate::model::attention::AttentionParams;
use crate::model::config::{ModelConfig, Variant};
use crate::model::seq2seq::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub use cost::{count_attention_cost, AttentionCost};
pub use oracle::{dense_attention_oracle, max_diffs, selector_oracle, DenseWeights};
pub use report::{write_reports, OracleReport};

/// Relative-difference floor for forward comparisons.
const FORWARD_FLOOR: f64 = 1e-8;

fn uniform(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Memory attention against the loop oracle for one geometry.
pub fn mem_attention_case(n: usize, chunk_len: usize, mem: usize, seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let (d, heads) = (8, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ChunkLayout {
        n_chunks: n,
        mem,
        chunk_len,
    };
    let t = layout.total();
    let real = rng.random_range(1..=n * chunk_len);
    let valid: Vec<bool> = (0..n * chunk_len).map(|i| i < real).collect();
    let x = uniform(&mut rng, t * d);
    let w: Vec<Vec<f64>> = (0..5).map(|_| uniform(&mut rng, d * d)).collect();
    let bias = uniform(&mut rng, heads * t * t);
    let mask = build_mem_attention_mask(layout, &valid)?;

    let mut g = Graph::<f64>::new();
    let xv = g.constant(Tensor::new(vec![1, t, d], x.clone())?);
    let mut proj = |i: usize| g.constant(Tensor::new(vec![d, d], w[i].clone()).expect("square"));
    let p = AttentionParams {
        q: proj(0),
        q_mem: if mem > 0 { Some(proj(1)) } else { None },
        k: proj(2),
        v: proj(3),
        o: proj(4),
    };
    let bv = g.constant(Tensor::new(vec![heads, t, t], bias.clone())?);
    let out = mem_attention(&mut g, xv, &p, layout, &mask, Some(bv), heads)?;

    let mem_rows: Vec<bool> = (0..t).map(|r| row_kind(layout, r).1.is_none()).collect();
    let weights = DenseWeights {
        q: &w[0],
        q_mem: if mem > 0 { Some(&w[1]) } else { None },
        k: &w[2],
        v: &w[3],
        o: &w[4],
    };
    let expect = dense_attention_oracle(&x, t, d, heads, &weights, &mem_rows, mask.data(), Some(&bias));
    let (abs, rel) = max_diffs(g.value(out).data(), &expect, FORWARD_FLOOR);
    Ok(OracleReport::new(
        format!("mem_attention_n{n}_cl{chunk_len}_m{mem}"),
        abs,
        rel,
        1e-5,
        start.elapsed().as_secs_f64(),
    ))
}

/// Chunk-selector cross-attention against its loop oracle.
pub fn selector_case(n: usize, chunk_len: usize, mem: usize, seed: u64) -> Result<OracleReport> {
    let start = Instant::now();
    let (d, heads, tq) = (8, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layout = ChunkLayout {
        n_chunks: n,
        mem,
        chunk_len,
    };
    let t = layout.total();
    let real = rng.random_range(1..=n * chunk_len);
    let valid: Vec<bool> = (0..n * chunk_len).map(|i| i < real).collect();
    let dec = uniform(&mut rng, tq * d);
    let enc = uniform(&mut rng, t * d);
    let w: Vec<Vec<f64>> = (0..4).map(|_| uniform(&mut rng, d * d)).collect();

    let mut g = Graph::<f64>::new();
    let dv = g.constant(Tensor::new(vec![1, tq, d], dec.clone())?);
    let ev = g.constant(Tensor::new(vec![1, t, d], enc.clone())?);
    let mut proj = |i: usize| g.constant(Tensor::new(vec![d, d], w[i].clone()).expect("square"));
    let p = AttentionParams {
        q: proj(0),
        q_mem: None,
        k: proj(1),
        v: proj(2),
        o: proj(3),
    };
    let out = selector_cross_attention(&mut g, dv, ev, &p, layout, &valid, heads)?;
    let weights = DenseWeights {
        q: &w[0],
        q_mem: None,
        k: &w[1],
        v: &w[2],
        o: &w[3],
    };
    let expect = selector_oracle(&dec, tq, &enc, n, mem, chunk_len, d, heads, &weights, &valid);
    let (abs, rel) = max_diffs(g.value(out).data(), &expect, FORWARD_FLOOR);
    Ok(OracleReport::new(
        format!("selector_n{n}_cl{chunk_len}_m{mem}"),
        abs,
        rel,
        1e-5,
        start.elapsed().as_secs_f64(),
    ))
}

/// Every geometry of n ∈ {1,2,4}, chunk_len ∈ {4,8}, M ∈ {0,1,2}.
pub fn oracle_sweep(seed: u64) -> Result<Vec<OracleReport>> {
    let mut out = Vec::new();
    let mut case = 0;
    for n in [1, 2, 4] {
        for cl in [4, 8] {
            for m in [0, 1, 2] {
                out.push(mem_attention_case(n, cl, m, seed + case)?);
                out.push(selector_case(n, cl, m, seed + case)?);
                case += 1;
            }
        }
    }
    Ok(out)
}

/// Copies baseline weights into a single-chunk memory model without memory
/// tokens. Parameters only the memory model has (the memory query and the
/// memory bias bucket) are drawn from `rng`; with `M = 0` they are unused.
pub fn reduction_pair(
    draw: u64,
    chunk_len: usize,
) -> Result<(Model<f64>, Model<f64>)> {
    let base_cfg = ModelConfig {
        variant: Variant::Baseline,
        d_model: 16,
        num_heads: 2,
        d_kv: 8,
        d_ff: 24,
        num_layers: 2,
        vocab_size: 20,
        dropout: 0.0,
        n_chunks: 1,
        chunk_len,
        mem_tokens: 0,
        rel_buckets: 8,
        rel_max_distance: 16,
        ..Default::default()
    };
    let mem_cfg = ModelConfig {
        variant: Variant::Mem,
        ..base_cfg.clone()
    };
    let base = Model::<f64>::new(base_cfg, draw)?;
    let fresh = Model::<f64>::new(mem_cfg.clone(), draw.wrapping_add(1_000))?;
    let mut params = ParamStore::new();
    for (name, t) in fresh.params.iter() {
        let v = match base.params.get(name) {
            Ok(b) if b.shape() == t.shape() => b.clone(),
            Ok(b) => {
                // Relative-bias table: baseline rows then the memory bucket row.
                let mut data = b.data().to_vec();
                data.extend_from_slice(&t.data()[b.numel()..]);
                Tensor::new(t.shape().to_vec(), data)?
            }
            Err(_) => t.clone(),
        };
        params.insert(name, v);
    }
    let mem = Model::from_params(mem_cfg, params)?;
    Ok((base, mem))
}

/// Largest absolute difference between baseline and reduced memory-model
/// logits on a padded two-example batch.
pub fn reduction_diff(draw: u64) -> Result<f64> {
    let cl = 6;
    let (base, mem) = reduction_pair(draw, cl)?;
    let a = chunk_input(&[3, 4, 5, 6, 7], cl, 1, false)?;
    let b = chunk_input(&[8, 9, 10, 11, 12, 13], cl, 1, false)?;
    let src = ChunkedBatch::stack(&[a, b])?;
    let dec = [0u32, 5, 6, 0, 9, 1];
    let logits = |m: &Model<f64>| -> Result<Tensor<f64>> {
        let mut f = m.forward_eval();
        let enc = f.encode(&src)?;
        let l = f.decode(&enc, &dec, 3)?;
        Ok(f.graph.value(l).clone())
    };
    Ok(logits(&base)?.max_abs_diff(&logits(&mem)?))
}

/// Finite-difference influence of input chunk `c'` (columns) on encoder
/// output chunk `c` (rows): the largest `|Δ output| / eps` over every
/// embedding element of a real token in `c'` and every output element in the
/// augmented block of `c` (its memory rows and token rows).
pub fn reachability_probe(model: &Model<f64>, source: &ChunkedBatch, eps: f64) -> Result<Vec<Vec<f64>>> {
    let cfg = &model.config;
    let (n, cl, d) = (cfg.n_chunks, cfg.chunk_len, cfg.d_model);
    let table = model.params.get("shared.embed")?;
    let mut emb = Vec::with_capacity(n * cl * d);
    for &id in &source.ids[..n * cl] {
        emb.extend_from_slice(&table.data()[id as usize * d..(id as usize + 1) * d]);
    }
    let valid = &source.valid[..n * cl];
    let run = |emb: &[f64]| -> Result<Vec<f64>> {
        let mut f = model.forward_eval();
        let e = f.graph.constant(Tensor::new(vec![1, n, cl, d], emb.to_vec())?);
        let out = f.encode_embedded(e, valid)?;
        Ok(f.graph.value(out.full).data().to_vec())
    };
    let base = run(&emb)?;
    let block = base.len() / n;
    let mut influence = vec![vec![0.0; n]; n];
    for src_chunk in 0..n {
        for tok in 0..cl {
            if !valid[src_chunk * cl + tok] {
                continue;
            }
            for k in 0..d {
                let idx = (src_chunk * cl + tok) * d + k;
                let mut e = emb.clone();
                e[idx] += eps;
                let out = run(&e)?;
                for (dst_chunk, row) in influence.iter_mut().enumerate() {
                    let range = dst_chunk * block..(dst_chunk + 1) * block;
                    let delta = out[range.clone()]
                        .iter()
                        .zip(&base[range])
                        .map(|(a, b)| (a - b).abs())
                        .fold(0.0, f64::max);
                    row[src_chunk] = f64::max(row[src_chunk], delta / eps);
                }
            }
        }
    }
    Ok(influence)
}

/// Largest off-diagonal entry of an influence matrix.
pub fn max_cross_influence(m: &[Vec<f64>]) -> f64 {
    let mut best: f64 = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            if i != j {
                best = best.max(v);
            }
        }
    }
    best
}

/// Probe configuration: two chunks of four tokens.
pub fn probe_model(layers: usize, mem: usize, seed: u64) -> Result<(Model<f64>, ChunkedBatch)> {
    let cfg = ModelConfig {
        variant: Variant::Mem,
        d_model: 8,
        num_heads: 2,
        d_kv: 4,
        d_ff: 16,
        num_layers: layers,
        vocab_size: 16,
        dropout: 0.0,
        n_chunks: 2,
        chunk_len: 4,
        mem_tokens: mem,
        rel_buckets: 8,
        rel_max_distance: 16,
        ..Default::default()
    };
    let model = Model::new(cfg, seed)?;
    let src = chunk_input(&[3, 4, 5, 6, 7, 8, 9, 10], 4, 2, false)?;
    Ok((model, src))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_agrees_on_small_geometry() {
        let r = mem_attention_case(2, 4, 1, 7).unwrap();
        assert!(r.passed, "{r:?}");
        let r = selector_case(2, 4, 1, 7).unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn reduction_holds_for_one_draw() {
        assert!(reduction_diff(0).unwrap() <= 1e-6);
    }

    #[test]
    fn one_layer_blocks_cross_chunk_flow() {
        let (m, src) = probe_model(1, 2, 0).unwrap();
        let inf = reachability_probe(&m, &src, 1e-4).unwrap();
        assert!(max_cross_influence(&inf) < 1e-9);
        assert!(inf[0][0] > 0.0 && inf[1][1] > 0.0);
    }
}
