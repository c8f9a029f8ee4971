use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{ChunkLayout, Graph, Var};
use crate::mem::attention::{mem_attention, prefix_memory, selector_cross_attention, ws_cross_attention};
use crate::mem::chunk::{chunk_input, ChunkedBatch};
use crate::mem::mask::build_mem_attention_mask;
use crate::model::attention::{attention, bucket_grid, causal_mask, position_bias, AttentionParams};
use crate::model::config::{ModelConfig, Variant};
use crate::model::layers::Forward;
use crate::model::seq2seq::Seq2SeqBatch;
use crate::params::ParamStore;
use crate::tensor::{Mask, Tensor};
use crate::tokenizer::EOS_ID;
use crate::verify::report::OracleReport;

/// Builds a scalar loss from a parameter store, returning the graph it lives on.
pub type LossFn<'a> = dyn Fn(&ParamStore<f64>) -> Result<(Graph<f64>, Var)> + 'a;

/// Denominator floor for the relative error of near-zero gradients.
pub const REL_FLOOR: f64 = 1e-3;

/// Central finite differences on every element of every tensor in `store`
/// against reverse-mode gradients. Relative error per element is
/// `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
pub fn gradcheck(case: &str, store: &ParamStore<f64>, loss: &LossFn, eps: f64, tol: f64) -> Result<OracleReport> {
    let start = Instant::now();
    let (mut g, l) = loss(store)?;
    g.backward(l)?;
    let analytic: HashMap<String, Tensor<f64>> = g.param_grads().into_iter().collect();
    let mut work = store.clone();
    let (mut max_abs, mut max_rel) = (0.0f64, 0.0f64);
    let names: Vec<String> = store.names().map(str::to_string).collect();
    for name in &names {
        let n = store.get(name)?.numel();
        for i in 0..n {
            let orig = store.get(name)?.data()[i];
            work.get_mut(name)?.data_mut()[i] = orig + eps;
            let (g1, l1) = loss(&work)?;
            let plus = g1.value(l1).item();
            work.get_mut(name)?.data_mut()[i] = orig - eps;
            let (g2, l2) = loss(&work)?;
            let minus = g2.value(l2).item();
            work.get_mut(name)?.data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic.get(name).map_or(0.0, |t| t.data()[i]);
            let err = (a - numeric).abs();
            max_abs = max_abs.max(err);
            let rel = err / a.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel.is_nan() {
                max_rel = f64::NAN;
            } else if !max_rel.is_nan() {
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(OracleReport::new(
        case,
        max_abs,
        max_rel,
        tol,
        start.elapsed().as_secs_f64(),
    ))
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape")
}

/// `sum(out ⊙ R)` with a fixed random `R`, turning any output into a
/// scalar whose gradient exercises every output element differently.
fn project_out(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = rand_tensor(&mut rng, g.shape(out), 1.0);
    let r = g.constant(r);
    let p = g.mul(out, r)?;
    Ok(g.sum(p))
}

fn attn_params(g: &mut Graph<f64>, s: &ParamStore<f64>, q_mem: bool) -> Result<AttentionParams> {
    Ok(AttentionParams {
        q: g.param(s, "q")?,
        q_mem: if q_mem { Some(g.param(s, "q_mem")?) } else { None },
        k: g.param(s, "k")?,
        v: g.param(s, "v")?,
        o: g.param(s, "o")?,
    })
}

fn attn_store(rng: &mut ChaCha8Rng, d: usize, q_mem: bool) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    for n in ["q", "k", "v", "o"] {
        s.insert(n, rand_tensor(rng, &[d, d], 0.5));
    }
    if q_mem {
        s.insert("q_mem", rand_tensor(rng, &[d, d], 0.5));
    }
    s
}

/// A named layer-level gradient check case.
pub struct Case {
    pub name: &'static str,
    pub store: ParamStore<f64>,
    pub loss: Box<LossFn<'static>>,
}

/// One case per differentiable building block, inputs included as leaves.
pub fn layer_cases(seed: u64) -> Vec<Case> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = 8;
    let heads = 2;
    let mut cases = Vec::new();

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[2, 3, 4], 1.0));
    s.insert("w", rand_tensor(&mut rng, &[4, 5], 1.0));
    s.insert("b", rand_tensor(&mut rng, &[5], 1.0));
    cases.push(Case {
        name: "linear",
        store: s,
        loss: Box::new(|s| {
            let mut g = Graph::new();
            let (x, w, b) = (g.param(s, "x")?, g.param(s, "w")?, g.param(s, "b")?);
            let y = g.matmul(x, w)?;
            let y = g.add(y, b)?;
            let l = project_out(&mut g, y, 1)?;
            Ok((g, l))
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[3, d], 1.0));
    s.insert("gamma", rand_tensor(&mut rng, &[d], 1.0));
    cases.push(Case {
        name: "rms_norm",
        store: s,
        loss: Box::new(|s| {
            let mut g = Graph::new();
            let (x, gm) = (g.param(s, "x")?, g.param(s, "gamma")?);
            let y = g.rms_norm(x, gm, 1e-6)?;
            let l = project_out(&mut g, y, 2)?;
            Ok((g, l))
        }),
    });

    let mut s = ParamStore::new();
    s.insert("x", rand_tensor(&mut rng, &[3, d], 1.0));
    s.insert("wi", rand_tensor(&mut rng, &[d, 12], 0.5));
    s.insert("wo", rand_tensor(&mut rng, &[12, d], 0.5));
    cases.push(Case {
        name: "feed_forward",
        store: s,
        loss: Box::new(|s| {
            let mut g = Graph::new();
            let (x, wi, wo) = (g.param(s, "x")?, g.param(s, "wi")?, g.param(s, "wo")?);
            let h = g.matmul(x, wi)?;
            let h = g.relu(h);
            let y = g.matmul(h, wo)?;
            let l = project_out(&mut g, y, 3)?;
            Ok((g, l))
        }),
    });

    let mut s = ParamStore::new();
    s.insert("embed", rand_tensor(&mut rng, &[7, d], 1.0));
    s.insert("head", rand_tensor(&mut rng, &[d, 7], 1.0));
    cases.push(Case {
        name: "embedding_cross_entropy",
        store: s,
        loss: Box::new(|s| {
            let mut g = Graph::new();
            let (e, h) = (g.param(s, "embed")?, g.param(s, "head")?);
            let x = g.embedding(e, &[1, 4, 4, 6])?;
            let logits = g.matmul(x, h)?;
            let l = g.cross_entropy_mean(logits, &[2, -100, 5, 0], -100)?;
            Ok((g, l))
        }),
    });

    let mut s = attn_store(&mut rng, d, false);
    s.insert("x", rand_tensor(&mut rng, &[2, 4, d], 1.0));
    s.insert("rel", rand_tensor(&mut rng, &[8, heads], 1.0));
    cases.push(Case {
        name: "causal_self_attention_rel_bias",
        store: s,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let p = attn_params(&mut g, s, false)?;
            let x = g.param(s, "x")?;
            let rel = g.param(s, "rel")?;
            let pos: Vec<Option<usize>> = (0..4).map(Some).collect();
            let ids = bucket_grid(&pos, &pos, false, 8, 16, 0);
            let bias = position_bias(&mut g, rel, &ids, 4, 4)?;
            let y = attention(&mut g, x, x, &p, &causal_mask(4), Some(bias), heads)?;
            let l = project_out(&mut g, y, 4)?;
            Ok((g, l))
        }),
    });

    let layout = ChunkLayout {
        n_chunks: 2,
        mem: 1,
        chunk_len: 3,
    };
    let valid = vec![true, true, true, true, false, false];
    for (name, sep) in [("memory_attention", true), ("memory_attention_shared_query", false)] {
        let mut s = attn_store(&mut rng, d, sep);
        s.insert("tok", rand_tensor(&mut rng, &[1, 2, 3, d], 1.0));
        s.insert("mem", rand_tensor(&mut rng, &[1, d], 1.0));
        s.insert("rel", rand_tensor(&mut rng, &[9, heads], 1.0));
        let valid = valid.clone();
        cases.push(Case {
            name,
            store: s,
            loss: Box::new(move |s| {
                let mut g = Graph::new();
                let p = attn_params(&mut g, s, sep)?;
                let tok = g.param(s, "tok")?;
                let mem = g.param(s, "mem")?;
                let rel = g.param(s, "rel")?;
                let x = prefix_memory(&mut g, tok, Some(mem))?;
                let x = g.reshape(x, &[1, layout.total(), d])?;
                let mask = build_mem_attention_mask(layout, &valid)?;
                let pos: Vec<Option<usize>> = (0..layout.total())
                    .map(|r| crate::mem::mask::row_kind(layout, r).1)
                    .collect();
                let ids = bucket_grid(&pos, &pos, true, 8, 16, 8);
                let bias = position_bias(&mut g, rel, &ids, layout.total(), layout.total())?;
                let y = if sep {
                    mem_attention(&mut g, x, &p, layout, &mask, Some(bias), heads)?
                } else {
                    attention(&mut g, x, x, &p, &mask, Some(bias), heads)?
                };
                let l = project_out(&mut g, y, 5)?;
                Ok((g, l))
            }),
        });
    }

    let mut s = attn_store(&mut rng, d, false);
    s.insert("dec", rand_tensor(&mut rng, &[1, 3, d], 1.0));
    s.insert("enc", rand_tensor(&mut rng, &[1, layout.total(), d], 1.0));
    let sel_valid = valid.clone();
    cases.push(Case {
        name: "selector_cross_attention",
        store: s,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let p = attn_params(&mut g, s, false)?;
            let (dec, enc) = (g.param(s, "dec")?, g.param(s, "enc")?);
            let y = selector_cross_attention(&mut g, dec, enc, &p, layout, &sel_valid, heads)?;
            let l = project_out(&mut g, y, 6)?;
            Ok((g, l))
        }),
    });

    let mut s = attn_store(&mut rng, d, false);
    s.insert("dec", rand_tensor(&mut rng, &[1, 3, d], 1.0));
    s.insert("mem", rand_tensor(&mut rng, &[1, 4, d], 1.0));
    cases.push(Case {
        name: "memory_cross_attention",
        store: s,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let p = attn_params(&mut g, s, false)?;
            let (dec, mem) = (g.param(s, "dec")?, g.param(s, "mem")?);
            let y = ws_cross_attention(&mut g, dec, mem, &p, heads)?;
            let l = project_out(&mut g, y, 7)?;
            Ok((g, l))
        }),
    });

    let mut s = attn_store(&mut rng, d, false);
    s.insert("dec", rand_tensor(&mut rng, &[2, 3, d], 1.0));
    s.insert("enc", rand_tensor(&mut rng, &[2, 5, d], 1.0));
    cases.push(Case {
        name: "padded_cross_attention",
        store: s,
        loss: Box::new(move |s| {
            let mut g = Graph::new();
            let p = attn_params(&mut g, s, false)?;
            let (dec, enc) = (g.param(s, "dec")?, g.param(s, "enc")?);
            let keys = vec![true, true, true, false, false, true, true, true, true, true];
            let mask = Mask::new(vec![2, 1, 1, 5], keys)?;
            let y = attention(&mut g, dec, enc, &p, &mask, None, heads)?;
            let l = project_out(&mut g, y, 8)?;
            Ok((g, l))
        }),
    });

    cases
}

/// Small configuration used for whole-model checks.
pub fn small_config(variant: Variant) -> ModelConfig {
    let mem = variant.uses_memory();
    ModelConfig {
        variant,
        d_model: 16,
        num_heads: 2,
        d_kv: 8,
        d_ff: 24,
        num_layers: 2,
        vocab_size: 12,
        dropout: 0.0,
        n_chunks: if mem { 2 } else { 1 },
        chunk_len: if mem { 4 } else { 8 },
        mem_tokens: usize::from(mem),
        rel_buckets: 8,
        rel_max_distance: 16,
        tie_embeddings: false,
        norm_eps: 1e-6,
    }
}

/// Two-example batch with padding in the source and the target.
pub fn small_batch(cfg: &ModelConfig) -> Result<Seq2SeqBatch> {
    let a = chunk_input(&[3, 4, 5, 6, 7, 8], cfg.chunk_len, cfg.n_chunks, false)?;
    let b = chunk_input(&[9, 10, 11], cfg.chunk_len, cfg.n_chunks, false)?;
    let src = ChunkedBatch::stack(&[a, b])?;
    Seq2SeqBatch::new(src, &[vec![5, 6, EOS_ID], vec![11, EOS_ID]])
}

/// Whole-model check over every parameter of `variant` at small scale.
pub fn model_case(variant: Variant, seed: u64) -> Result<Case> {
    let cfg = small_config(variant);
    let store = cfg.init_params::<f64>(seed)?;
    let batch = small_batch(&cfg)?;
    let name = match variant {
        Variant::Baseline => "model_baseline",
        Variant::Mem => "model_mem",
        Variant::MemWs => "model_mem_ws",
        Variant::MemWsWma => "model_mem_ws_wma",
    };
    Ok(Case {
        name,
        store,
        loss: Box::new(move |s| {
            let mut f = Forward::eval(s, &cfg);
            let l = f.loss(&batch)?;
            Ok((f.graph, l))
        }),
    })
}

pub fn run_cases(cases: &[Case], eps: f64, tol: f64) -> Result<Vec<OracleReport>> {
    cases
        .iter()
        .map(|c| gradcheck(c.name, &c.store, c.loss.as_ref(), eps, tol))
        .collect()
}
