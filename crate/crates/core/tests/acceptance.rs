//! Acceptance suite: one pass/fail line per criterion, nonzero exit on any
//! failure. Runs as a plain binary under `cargo test`.

use std::time::Instant;

use memt5::config::{RunConfig, Task};
use memt5::data::span::{sample_spans, span_corrupt, SpanCorruptionConfig};
use memt5::data::synthetic::{synthetic_corpus, synthetic_qa};
use memt5::data::{flatten_context, pack_documents, split_documents};
use memt5::graph::{Graph, Var};
use memt5::mem::admissible_pairs;
use memt5::model::Variant;
use memt5::params::ParamStore;
use memt5::tensor::Tensor;
use memt5::tokenizer::Vocab;
use memt5::train::{perplexity, Dataset, MetricRow, OptimizerKind, ScheduleConfig, TrainState, Trainer};
use memt5::verify::gradcheck::{gradcheck, layer_cases, model_case, run_cases};
use memt5::verify::{
    count_attention_cost, max_cross_influence, oracle_sweep, probe_model, reachability_probe, reduction_diff,
};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn err(e: memt5::Error) -> String {
    format!("error: {e}")
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let reports = oracle_sweep(17).map_err(err)?;
    let worst = reports.iter().map(|r| r.max_rel_diff).fold(0.0, f64::max);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.case.clone()).collect();
    let secs = t.elapsed().as_secs_f64();
    check(
        failed.is_empty() && worst <= 1e-5 && secs < 60.0,
        format!("{} cases, worst rel diff {worst:.2e} (tol 1e-5), {secs:.2}s, failed {failed:?}", reports.len()),
    )
}

fn gradcheck_all() -> Outcome {
    let t = Instant::now();
    let mut reports = run_cases(&layer_cases(5), 1e-5, 1e-4).map_err(err)?;
    for v in [Variant::Baseline, Variant::Mem, Variant::MemWs, Variant::MemWsWma] {
        let c = model_case(v, 5).map_err(err)?;
        reports.push(gradcheck(c.name, &c.store, c.loss.as_ref(), 1e-5, 1e-4).map_err(err)?);
    }
    // A backward pass that hides one factor must be caught.
    let mut s = ParamStore::new();
    s.insert("x", Tensor::from_f64(vec![3], &[0.5, -1.0, 2.0]).map_err(err)?);
    let broken = |s: &ParamStore<f64>| -> memt5::Result<(Graph<f64>, Var)> {
        let mut g = Graph::new();
        let x = g.param(s, "x")?;
        let xd = g.detach(x);
        let p = g.mul(x, xd)?;
        let l = g.sum(p);
        Ok((g, l))
    };
    let control = gradcheck("negative_control", &s, &broken, 1e-5, 1e-4).map_err(err)?;
    let worst = reports.iter().map(|r| r.max_rel_diff).fold(0.0, f64::max);
    let failed: Vec<_> = reports.iter().filter(|r| !r.passed).map(|r| r.case.clone()).collect();
    let secs = t.elapsed().as_secs_f64();
    check(
        failed.is_empty() && !control.passed && secs < 300.0,
        format!(
            "{} layer/model cases, worst rel err {worst:.2e} (tol 1e-4), negative control rel err {:.2e} rejected={}, {secs:.1}s, failed {failed:?}",
            reports.len(),
            control.max_rel_diff,
            !control.passed
        ),
    )
}

fn reduction() -> Outcome {
    let mut worst: f64 = 0.0;
    for draw in 0..20 {
        worst = worst.max(reduction_diff(draw).map_err(err)?);
    }
    check(worst <= 1e-6, format!("20 draws, worst |Mem(n=1,M=0) - Baseline| = {worst:.2e} (tol 1e-6)"))
}

fn complexity() -> Outcome {
    let mut swept = 0;
    for n in [1, 2, 4, 8, 16] {
        for cl in [4, 8, 16, 32] {
            for m in [0, 1, 2, 3] {
                let c = count_attention_cost(n, cl, m).map_err(err)?;
                let closed = n * (m * (cl + n * m) + cl * (cl + m));
                if c.allowed != closed || admissible_pairs(n, cl, m) != closed {
                    return Err(format!("n={n} cl={cl} M={m}: counted {} vs closed form {closed}", c.allowed));
                }
                swept += 1;
            }
        }
    }
    let ratios: Vec<f64> = [1, 2, 4, 8, 16]
        .iter()
        .map(|&n| count_attention_cost(n, 512 / n, 2).map(|c| c.ratio))
        .collect::<memt5::Result<_>>()
        .map_err(err)?;
    let monotone = ratios.windows(2).all(|w| w[1] < w[0]);
    let at4 = count_attention_cost(4, 128, 2).map_err(err)?;
    check(
        monotone && (at4.ratio - 0.2502).abs() < 5e-4 && at4.allowed == 67_648 && at4.dense == 270_400,
        format!(
            "{swept} configs match closed form; L=512 M=2 ratios {:?}; n=4: {}/{} = {:.4}",
            ratios.iter().map(|r| format!("{r:.4}")).collect::<Vec<_>>(),
            at4.allowed,
            at4.dense,
            at4.ratio
        ),
    )
}

fn perplexity_relation() -> Outcome {
    let a = perplexity(4.196);
    let b = perplexity(2.308);
    let ra = (a - 66.394).abs() / 66.394;
    let rb = (b - 10.0595).abs() / 10.0595;
    check(
        ra < 1e-3 && rb < 1e-3 && perplexity(0.0) == 1.0,
        format!("exp(4.196) = {a:.3} vs 66.394 ({:.3}%), exp(2.308) = {b:.4} vs 10.0595 ({:.3}%)", ra * 100.0, rb * 100.0),
    )
}

fn reachability() -> Outcome {
    let probe = |layers, mem| -> Result<f64, String> {
        let (model, src) = probe_model(layers, mem, 9).map_err(err)?;
        Ok(max_cross_influence(&reachability_probe(&model, &src, 1e-4).map_err(err)?))
    };
    let one = probe(1, 2)?;
    let two = probe(2, 2)?;
    let two_m1 = probe(2, 1)?;
    let mut no_mem: f64 = 0.0;
    for layers in 1..=3 {
        no_mem = no_mem.max(probe(layers, 0)?);
    }
    check(
        one < 1e-9 && two > 1e-9 && two_m1 > 1e-9 && no_mem < 1e-9,
        format!("cross-chunk influence: 1 layer M=2 {one:.1e}, 2 layers M=2 {two:.2e}, 2 layers M=1 {two_m1:.2e}, M=0 (1-3 layers) {no_mem:.1e}"),
    )
}

fn mlm_run(variant: Variant, seqs: &[Vec<u32>]) -> Result<(f64, f64, bool), String> {
    let mut c = RunConfig::default();
    c.model.variant = variant;
    c.model.d_model = 64;
    c.model.num_heads = 4;
    c.model.d_kv = 16;
    c.model.d_ff = 256;
    c.model.vocab_size = 300;
    (c.model.n_chunks, c.model.chunk_len, c.model.mem_tokens) = match variant {
        Variant::Baseline => (1, 128, 0),
        _ => (4, 32, 2),
    };
    c.optimizer.kind = OptimizerKind::Adafactor;
    c.schedule = ScheduleConfig {
        warmup_steps: 50,
        total_steps: Some(500),
        ..Default::default()
    };
    c.train.batch_size = 8;
    c.train.epochs = 100;
    c.train.max_steps = Some(500);
    c.train.log_every = 1;
    let mut t = Trainer::new(c).map_err(err)?;
    let rows: Vec<MetricRow> = t.run(&Dataset::Mlm(seqs.to_vec()), None).map_err(err)?.history;
    let steps: Vec<f64> = rows.iter().filter(|r| r.split == "train").map(|r| r.loss).collect();
    let first = steps[..10].iter().sum::<f64>() / 10.0;
    let last = steps[steps.len() - 10..].iter().sum::<f64>() / 10.0;
    Ok((first, last, steps.iter().all(|x| x.is_finite())))
}

fn mlm_smoke() -> Outcome {
    let t = Instant::now();
    let text = synthetic_corpus(100_000, 7);
    let vocab = Vocab::train([text.as_str()], 300).map_err(err)?;
    let seqs = pack_documents(&split_documents(&text), &vocab, 127);
    let (m0, m1, m_ok) = mlm_run(Variant::Mem, &seqs)?;
    let (b0, b1, b_ok) = mlm_run(Variant::Baseline, &seqs)?;
    let mem_cost = count_attention_cost(4, 32, 2).map_err(err)?.allowed;
    let dense = count_attention_cost(1, 128, 0).map_err(err)?.dense;
    let share = mem_cost as f64 / dense as f64;
    let secs = t.elapsed().as_secs_f64();
    check(
        m_ok && b_ok && m1 < 0.5 * m0 && b1 < 0.5 * b0 && share < 0.3 && secs < 600.0,
        format!(
            "{} KB corpus, {} sequences; Mem loss {m0:.3} -> {m1:.3} ({:.0}% drop), Baseline {b0:.3} -> {b1:.3} ({:.0}% drop); encoder scores {mem_cost} vs dense {dense} ({:.1}%); {secs:.0}s",
            text.len() / 1000,
            seqs.len(),
            100.0 * (1.0 - m1 / m0),
            100.0 * (1.0 - b1 / b0),
            100.0 * share
        ),
    )
}

fn qa_run(variant: Variant, data_records: &[memt5::data::QaRecord], vocab: &Vocab) -> Result<f64, String> {
    let mut c = RunConfig::default();
    c.task = Task::Qa;
    c.model.variant = variant;
    c.model.d_model = 64;
    c.model.num_heads = 4;
    c.model.d_kv = 16;
    c.model.d_ff = 256;
    c.model.vocab_size = vocab.len();
    c.model.dropout = 0.0;
    (c.model.n_chunks, c.model.chunk_len, c.model.mem_tokens) = (4, 32, 2);
    c.optimizer.kind = OptimizerKind::Adafactor;
    c.schedule = ScheduleConfig::constant(5e-5);
    c.data.target_len = 8;
    c.train.batch_size = 1;
    c.train.epochs = 30;
    c.train.eval_every_epochs = 30;
    c.train.log_every = u64::MAX;
    let data = Dataset::qa(data_records, vocab, &c).map_err(err)?;
    let mut t = Trainer::new(c).map_err(err)?.with_vocab(vocab.clone()).map_err(err)?;
    let rows = t.run(&data, Some(&data)).map_err(err)?.history;
    rows.iter()
        .rev()
        .find(|r| r.split == "valid")
        .and_then(|r| r.em)
        .ok_or_else(|| "no evaluation row".to_string())
}

fn qa_smoke() -> Outcome {
    let t = Instant::now();
    let records = synthetic_qa(200, 11);
    let extractive = records.iter().all(|r| flatten_context(&r.context).contains(&r.answer));
    let text: String = records
        .iter()
        .map(|r| format!("{} {} {}\n", r.question, flatten_context(&r.context), r.answer))
        .collect();
    let vocab = Vocab::train([text.as_str()], 200).map_err(err)?;
    let selector = qa_run(Variant::Mem, &records, &vocab)?;
    let ws = qa_run(Variant::MemWs, &records, &vocab)?;
    let secs = t.elapsed().as_secs_f64();
    check(
        extractive && selector > 50.0 && ws > 0.0 && secs < 900.0,
        format!("200 records, 30 epochs, constant lr 5e-5: train EM selector {selector:.1}%, WS {ws:.1}%; {secs:.0}s"),
    )
}

fn span_invariants() -> Outcome {
    let cfg = SpanCorruptionConfig::default();
    let vocab_size = 32_000;
    let mut worst_rate: f64 = 0.0;
    for seed in 0..1000u64 {
        let len = 256 + (seed as usize * 37) % 769;
        let tokens: Vec<u32> = (0..len).map(|i| 200 + (i as u32 * 7919 + seed as u32) % 20_000).collect();
        let ex = span_corrupt(&tokens, &cfg, vocab_size, seed).map_err(err)?;
        // Interleave kept input tokens with the spans behind each sentinel.
        let sentinel = |x: u32| x as usize >= vocab_size - cfg.max_sentinels;
        let mut spans: Vec<Vec<u32>> = Vec::new();
        for &x in &ex.target[..ex.target.len() - 1] {
            if sentinel(x) {
                spans.push(Vec::new());
            } else {
                spans.last_mut().ok_or("target starts without a sentinel")?.push(x);
            }
        }
        let mut rebuilt = Vec::with_capacity(len);
        let mut k = 0;
        for &x in &ex.input {
            if sentinel(x) {
                if x as usize != vocab_size - 1 - k {
                    return Err(format!("seed {seed}: sentinel out of order"));
                }
                rebuilt.extend(&spans[k]);
                k += 1;
            } else {
                rebuilt.push(x);
            }
        }
        if rebuilt != tokens || k != spans.len() {
            return Err(format!("seed {seed}: reconstruction failed"));
        }
        let noise: usize = sample_spans(len, &cfg, seed).iter().map(|s| s.1).sum();
        let rate = noise as f64 / len as f64;
        worst_rate = worst_rate.max((rate - cfg.corruption_rate).abs() / cfg.corruption_rate);
    }
    check(
        worst_rate <= 0.2,
        format!("1000 samples (len 256..1024) reconstruct exactly; worst relative rate deviation {:.2}%", worst_rate * 100.0),
    )
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let text = synthetic_corpus(20_000, 2);
    let vocab = Vocab::train([text.as_str()], 220).map_err(err)?;
    let mut c = RunConfig::default();
    c.model.variant = Variant::Mem;
    c.model.d_model = 32;
    c.model.num_heads = 2;
    c.model.d_kv = 16;
    c.model.d_ff = 64;
    c.model.vocab_size = 220;
    (c.model.n_chunks, c.model.chunk_len, c.model.mem_tokens) = (4, 16, 2);
    c.schedule.warmup_steps = 10;
    c.train.batch_size = 8;
    c.train.epochs = 3;
    c.train.log_every = 1;
    let seqs = pack_documents(&split_documents(&text), &vocab, c.model.source_len() - 1);
    let data = Dataset::Mlm(seqs.clone());
    let valid = Dataset::Mlm(seqs[..8].to_vec());
    let run = |name: &str, cfg: &RunConfig, state: Option<TrainState>| -> Result<Trainer, String> {
        let t = match state {
            Some(s) => Trainer::resume(cfg.clone(), s),
            None => Trainer::new(cfg.clone()),
        };
        let mut t = t.map_err(err)?.with_vocab(vocab.clone()).map_err(err)?.with_output_dir(dir.path().join(name));
        t.deterministic = true;
        t.run(&data, Some(&valid)).map_err(err)?;
        Ok(t)
    };
    let a = run("a", &c, None)?;
    let b = run("b", &c, None)?;
    let steps_per_epoch = a.steps_per_epoch(data.len()) as u64;
    let mut stop = c.clone();
    stop.train.max_steps = Some(steps_per_epoch + steps_per_epoch / 2);
    run("r", &stop, None)?;
    let state = TrainState::load(&dir.path().join("r/last.ckpt")).map_err(err)?;
    let r = run("r", &c, Some(state))?;
    let read = |n: &str, f: &str| std::fs::read(dir.path().join(n).join(f)).unwrap_or_default();
    let same_runs = read("a", "metrics.csv") == read("b", "metrics.csv") && a.model.params == b.model.params;
    let resumed = read("a", "metrics.csv") == read("r", "metrics.csv")
        && read("a", "last.ckpt") == read("r", "last.ckpt")
        && a.model.params == r.model.params;
    let ck = TrainState::load(&dir.path().join("a/last.ckpt")).map_err(err)?;
    let idempotent = ck.to_bytes() == read("a", "last.ckpt");
    check(
        same_runs && resumed && idempotent,
        format!(
            "{} steps; repeat run identical: {same_runs}; resumed at step {} identical: {resumed}; save/load/save identical: {idempotent}",
            a.progress.global_step,
            steps_per_epoch + steps_per_epoch / 2
        ),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("oracle equivalence", oracle_equivalence),
        ("gradcheck", gradcheck_all),
        ("baseline reduction", reduction),
        ("attention cost", complexity),
        ("perplexity relation", perplexity_relation),
        ("reachability", reachability),
        ("MLM training smoke", mlm_smoke),
        ("QA training smoke", qa_smoke),
        ("span corruption invariants", span_invariants),
        ("determinism", determinism),
    ];
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !only.is_empty() && !only.contains(&id) {
            continue;
        }
        let t = Instant::now();
        let res = f();
        let secs = t.elapsed().as_secs_f64();
        match res {
            Ok(d) => println!("criterion {id:>2} PASS  {name}: {d} [{secs:.1}s]"),
            Err(d) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {d} [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
