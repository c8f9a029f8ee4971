use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{RunConfig, Task};
use crate::data::corpus::load_text_corpus;
use crate::data::qa::{build_qa_example, load_qa_dataset, QaRecord};
use crate::data::span::span_corrupt;
use crate::error::{Error, Result};
use crate::mem::chunk::{chunk_input, ChunkedBatch};
use crate::model::layers::Forward;
use crate::model::seq2seq::{Model, Seq2SeqBatch, IGNORE_INDEX};
use crate::params::ParamStore;
use crate::tensor::Float;
use crate::tokenizer::{Vocab, EOS_ID};
use crate::train::checkpoint::{Progress, TrainState};
use crate::train::metrics::{perplexity, qa_metrics, token_hits};
use crate::train::optim::Optimizer;
use crate::train::schedule::lr_at;

const TAG_SHUFFLE: u64 = 1;
const TAG_DROPOUT: u64 = 2;
const TAG_CORRUPT: u64 = 3;
const TAG_VALID: u64 = 4;

/// Combines seed material into one well-mixed 64-bit seed (splitmix64 steps).
pub fn mix_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

/// `MEMT5_DETERMINISTIC=1`: reductions are already single-threaded; this
/// additionally zeroes wall-clock columns so metric files compare bitwise.
pub fn deterministic_mode() -> bool {
    std::env::var("MEMT5_DETERMINISTIC").as_deref() == Ok("1")
}

#[derive(Clone, Debug, PartialEq)]
pub struct QaExample {
    pub source: ChunkedBatch,
    pub target: Vec<u32>,
    pub answer: String,
}

/// Training or evaluation data held in memory.
#[derive(Clone, Debug, PartialEq)]
pub enum Dataset {
    /// Token sequences, span-corrupted on the fly.
    Mlm(Vec<Vec<u32>>),
    Qa(Vec<QaExample>),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Mlm(v) => v.len(),
            Dataset::Qa(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Dataset::Mlm(_) => Task::Mlm,
            Dataset::Qa(_) => Task::Qa,
        }
    }

    pub fn qa(records: &[QaRecord], vocab: &Vocab, config: &RunConfig) -> Result<Self> {
        let m = &config.model;
        records
            .iter()
            .map(|r| {
                let (source, target) =
                    build_qa_example(r, vocab, m.source_len(), config.data.target_len, m.n_chunks)?;
                Ok(QaExample {
                    source,
                    target,
                    answer: r.answer.clone(),
                })
            })
            .collect::<Result<Vec<_>>>()
            .map(Dataset::Qa)
    }

    fn truncated(&self, max: Option<usize>) -> Dataset {
        let n = max.unwrap_or(usize::MAX);
        match self {
            Dataset::Mlm(v) => Dataset::Mlm(v.iter().take(n).cloned().collect()),
            Dataset::Qa(v) => Dataset::Qa(v.iter().take(n).cloned().collect()),
        }
    }
}

/// Reads `paths` as the configured task's data: plain text packed into
/// sequences for `mlm`, JSON-lines QA records for `qa`.
pub fn load_dataset(config: &RunConfig, vocab: &Vocab, paths: &[PathBuf]) -> Result<Dataset> {
    match config.task {
        Task::Mlm => Ok(Dataset::Mlm(load_text_corpus(paths, vocab, mlm_sequence_len(config))?)),
        Task::Qa => {
            let mut records = Vec::new();
            for p in paths {
                records.extend(load_qa_dataset(p)?);
            }
            Dataset::qa(&records, vocab, config)
        }
    }
}

/// MLM sequence length that leaves room for the end-of-sequence token.
pub fn mlm_sequence_len(config: &RunConfig) -> usize {
    config.model.source_len() - 1
}

fn mlm_example(config: &RunConfig, tokens: &[u32], seed: u64) -> Result<(ChunkedBatch, Vec<u32>)> {
    let m = &config.model;
    let ex = span_corrupt(tokens, &config.span, m.vocab_size, seed)?;
    let mut input = ex.input;
    input.push(EOS_ID);
    let source = chunk_input(&input, m.chunk_len, m.n_chunks, false)?;
    Ok((source, ex.target))
}

fn make_batch(config: &RunConfig, data: &Dataset, idx: &[usize], seed_of: impl Fn(usize) -> u64) -> Result<(Seq2SeqBatch, Vec<String>)> {
    let mut sources = Vec::with_capacity(idx.len());
    let mut targets = Vec::with_capacity(idx.len());
    let mut answers = Vec::new();
    for &i in idx {
        match data {
            Dataset::Mlm(seqs) => {
                let (s, t) = mlm_example(config, &seqs[i], seed_of(i))?;
                sources.push(s);
                targets.push(t);
            }
            Dataset::Qa(ex) => {
                sources.push(ex[i].source.clone());
                targets.push(ex[i].target.clone());
                answers.push(ex[i].answer.clone());
            }
        }
    }
    Ok((Seq2SeqBatch::new(ChunkedBatch::stack(&sources)?, &targets)?, answers))
}

/// Aggregate evaluation result. QA fields are set for QA data only.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalMetrics {
    pub loss: f64,
    pub accuracy: f64,
    pub perplexity: f64,
    pub qa: Option<crate::train::metrics::QaScores>,
    pub predictions: Vec<String>,
}

/// Teacher-forced loss and token accuracy, plus greedy-decoded answer
/// metrics for QA. MLM examples use a fixed corruption per index.
pub fn evaluate(model: &Model<f32>, config: &RunConfig, data: &Dataset, vocab: Option<&Vocab>) -> Result<EvalMetrics> {
    if data.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let bs = config.train.batch_size;
    let (mut loss_sum, mut hits, mut count) = (0.0, 0usize, 0usize);
    let mut predictions = Vec::new();
    let mut references = Vec::new();
    let all: Vec<usize> = (0..data.len()).collect();
    for idx in all.chunks(bs) {
        let (batch, answers) = make_batch(config, data, idx, |i| mix_seed(&[config.seed, TAG_VALID, i as u64]))?;
        let mut f = model.forward_eval();
        let enc = f.encode(&batch.source)?;
        let logits = f.decode(&enc, &batch.decoder_input, batch.target_len)?;
        let (h, c) = token_hits(f.graph.value(logits), &batch.labels, IGNORE_INDEX)?;
        if c > 0 {
            let l = f.graph.cross_entropy_mean(logits, &batch.labels, IGNORE_INDEX)?;
            loss_sum += f.graph.value(l).item().as_f64() * c as f64;
        }
        hits += h;
        count += c;
        if let Dataset::Qa(_) = data {
            let vocab = vocab.ok_or_else(|| Error::Config("QA evaluation needs a vocabulary".into()))?;
            for out in model.greedy_decode(&batch.source, config.data.target_len)? {
                predictions.push(vocab.decode_until_eos(&out)?);
            }
            references.extend(answers);
        }
    }
    if count == 0 {
        return Err(Error::AllIgnored);
    }
    let loss = loss_sum / count as f64;
    let qa = match data {
        Dataset::Qa(_) => Some(qa_metrics(&predictions, &references)?),
        Dataset::Mlm(_) => None,
    };
    Ok(EvalMetrics {
        loss,
        accuracy: 100.0 * hits as f64 / count as f64,
        perplexity: perplexity(loss),
        qa,
        predictions,
    })
}

pub const METRICS_HEADER: &str = "step,epoch,split,loss,acc,ppl,em,f1,precision,recall,lr,wallclock_s";

/// One line of the metrics CSV. `split` is `train` (logged step),
/// `train_epoch` (epoch mean) or `valid`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: u64,
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub acc: Option<f64>,
    pub ppl: Option<f64>,
    pub em: Option<f64>,
    pub f1: Option<f64>,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
    pub lr: f64,
    pub wallclock_s: f64,
}

impl MetricRow {
    fn bare(step: u64, epoch: usize, split: &str, loss: f64, lr: f64, wallclock_s: f64) -> Self {
        MetricRow {
            step,
            epoch,
            split: split.into(),
            loss,
            acc: None,
            ppl: None,
            em: None,
            f1: None,
            precision: None,
            recall: None,
            lr,
            wallclock_s,
        }
    }

    pub fn csv(&self) -> String {
        let o = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.split,
            self.loss,
            o(self.acc),
            o(self.ppl),
            o(self.em),
            o(self.f1),
            o(self.precision),
            o(self.recall),
            self.lr,
            self.wallclock_s
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    /// `train.max_steps` was reached; `last.ckpt` resumes the run.
    Stopped,
}

#[derive(Clone, Debug)]
pub struct RunReport {
    pub outcome: Outcome,
    pub history: Vec<MetricRow>,
    pub global_step: u64,
}

/// Owns the model, optimizer and loop position of one run.
#[derive(Debug)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: Model<f32>,
    pub optimizer: Optimizer<f32>,
    pub progress: Progress,
    pub vocab: Option<Vocab>,
    /// Where `metrics.csv`, `config.json` and checkpoints go; `None` keeps
    /// everything in memory.
    pub output_dir: Option<PathBuf>,
    pub deterministic: bool,
}

impl Trainer {
    /// Fresh parameters drawn from `config.seed`.
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = Model::new(config.model.clone(), config.seed)?;
        Ok(Self::assemble(config, model))
    }

    /// Starts from given parameters (e.g. a pretrained checkpoint) with a
    /// fresh optimizer and loop position.
    pub fn from_params(config: RunConfig, params: ParamStore<f32>) -> Result<Self> {
        config.validate()?;
        let model = Model::from_params(config.model.clone(), params)?;
        Ok(Self::assemble(config, model))
    }

    /// Continues a saved run. Run-level settings (epochs, max_steps, output)
    /// come from `config`; the model configuration must match the checkpoint.
    pub fn resume(config: RunConfig, state: TrainState) -> Result<Self> {
        config.validate()?;
        config.model.check_params(&state.params)?;
        if config.model != state.config.model {
            return Err(Error::Incompatible("model configuration differs from the checkpoint".into()));
        }
        let mut optimizer = state.optimizer;
        optimizer.config = config.optimizer.clone();
        let mut t = Self::assemble(config, Model::from_params(state.config.model, state.params)?);
        t.optimizer = optimizer;
        t.progress = state.progress;
        Ok(t)
    }

    fn assemble(config: RunConfig, model: Model<f32>) -> Self {
        Trainer {
            optimizer: Optimizer::new(config.optimizer.clone()),
            model,
            config,
            progress: Progress::default(),
            vocab: None,
            output_dir: None,
            deterministic: deterministic_mode(),
        }
    }

    /// Attaches the vocabulary, rejecting one that differs from the run's.
    pub fn with_vocab(mut self, vocab: Vocab) -> Result<Self> {
        check_vocab(&vocab, self.progress.vocab_fingerprint, self.model.config.vocab_size)?;
        self.progress.vocab_fingerprint = Some(vocab.fingerprint());
        self.vocab = Some(vocab);
        Ok(self)
    }

    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.output_dir = Some(dir.into());
        self
    }

    pub fn state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            params: self.model.params.clone(),
            optimizer: self.optimizer.clone(),
            progress: self.progress.clone(),
        }
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.train.batch_size)
    }

    fn save(&self, file: &str) -> Result<()> {
        if let Some(dir) = &self.output_dir {
            self.state().save(&dir.join(file))?;
        }
        Ok(())
    }

    fn emit(&self, rows: &mut Vec<MetricRow>, row: MetricRow) -> Result<()> {
        if let Some(dir) = &self.output_dir {
            append_metrics(&dir.join("metrics.csv"), &row)?;
        }
        rows.push(row);
        Ok(())
    }

    /// One optimizer update on the examples `idx` of `data`.
    fn train_step(&mut self, data: &Dataset, idx: &[usize], lr: f64) -> Result<f64> {
        let c = &self.config;
        let epoch = self.progress.epoch as u64;
        let (batch, _) = make_batch(c, data, idx, |i| mix_seed(&[c.seed, TAG_CORRUPT, epoch, i as u64]))?;
        let dropout_seed = mix_seed(&[c.seed, TAG_DROPOUT, self.progress.global_step]);
        let mut f = Forward::train(&self.model.params, &self.model.config, dropout_seed);
        let loss = f.loss(&batch)?;
        let value = f.graph.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("training loss at step {}", self.progress.global_step + 1)));
        }
        f.graph.backward(loss)?;
        let grads = f.graph.param_grads();
        drop(f);
        self.optimizer.step(&mut self.model.params, &grads, lr)?;
        Ok(value)
    }

    /// Runs (or continues) the epoch loop. A non-finite loss or gradient stops
    /// the run with the error; `last.ckpt` then holds the last good state.
    pub fn run(&mut self, train: &Dataset, valid: Option<&Dataset>) -> Result<RunReport> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if train.task() != self.config.task {
            return Err(Error::Config("training data does not match `task`".into()));
        }
        if let Some(dir) = &self.output_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            self.config.save(&dir.join("config.json"))?;
        }
        let valid = valid.map(|v| v.truncated(self.config.train.eval_max_examples));
        let started = Instant::now();
        let clock = |det: bool| if det { 0.0 } else { started.elapsed().as_secs_f64() };
        let n = train.len();
        let bs = self.config.train.batch_size;
        let spe = self.steps_per_epoch(n);
        let planned = (spe * self.config.train.epochs) as u64;
        let mut rows = Vec::new();
        while self.progress.epoch < self.config.train.epochs {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, TAG_SHUFFLE, self.progress.epoch as u64]));
            order.shuffle(&mut rng);
            while self.progress.batch_in_epoch < spe {
                if self.config.train.max_steps.is_some_and(|m| self.progress.global_step >= m) {
                    self.save("last.ckpt")?;
                    return Ok(RunReport {
                        outcome: Outcome::Stopped,
                        history: rows,
                        global_step: self.progress.global_step,
                    });
                }
                let b = self.progress.batch_in_epoch;
                let idx = &order[b * bs..((b + 1) * bs).min(n)];
                let step = self.progress.global_step + 1;
                let lr = lr_at(step, &self.config.schedule, planned);
                let loss = match self.train_step(train, idx, lr) {
                    Ok(l) => l,
                    Err(e @ Error::NonFinite(_)) => {
                        self.save("last.ckpt")?;
                        return Err(e);
                    }
                    Err(e) => return Err(e),
                };
                self.progress.global_step = step;
                self.progress.batch_in_epoch += 1;
                self.progress.epoch_loss_sum += loss;
                self.progress.epoch_loss_count += 1;
                if step.is_multiple_of(self.config.train.log_every.max(1)) {
                    let row = MetricRow::bare(step, self.progress.epoch, "train", loss, lr, clock(self.deterministic));
                    self.emit(&mut rows, row)?;
                }
            }
            let step = self.progress.global_step;
            let lr = lr_at(step.max(1), &self.config.schedule, planned);
            let mean = self.progress.epoch_loss_sum / self.progress.epoch_loss_count.max(1) as f64;
            let row = MetricRow::bare(step, self.progress.epoch, "train_epoch", mean, lr, clock(self.deterministic));
            self.emit(&mut rows, row)?;
            let every = self.config.train.eval_every_epochs.max(1);
            let mut best = false;
            if let Some(v) = valid.as_ref().filter(|_| (self.progress.epoch + 1).is_multiple_of(every)) {
                let m = evaluate(&self.model, &self.config, v, self.vocab.as_ref())?;
                let mut row = MetricRow::bare(step, self.progress.epoch, "valid", m.loss, lr, clock(self.deterministic));
                row.acc = Some(m.accuracy);
                row.ppl = Some(m.perplexity);
                if let Some(q) = m.qa {
                    row.em = Some(q.exact_match);
                    row.f1 = Some(q.f1);
                    row.precision = Some(q.precision);
                    row.recall = Some(q.recall);
                }
                self.emit(&mut rows, row)?;
                if self.progress.best_valid_loss.is_none_or(|b| m.loss < b) {
                    self.progress.best_valid_loss = Some(m.loss);
                    best = true;
                }
            }
            self.progress.epoch += 1;
            self.progress.batch_in_epoch = 0;
            self.progress.epoch_loss_sum = 0.0;
            self.progress.epoch_loss_count = 0;
            self.save("last.ckpt")?;
            if best {
                self.save("best.ckpt")?;
            }
        }
        Ok(RunReport {
            outcome: Outcome::Completed,
            history: rows,
            global_step: self.progress.global_step,
        })
    }
}

/// Rejects a vocabulary whose size or fingerprint disagrees with a run.
pub fn check_vocab(vocab: &Vocab, fingerprint: Option<u32>, vocab_size: usize) -> Result<()> {
    if vocab.len() != vocab_size {
        return Err(Error::Incompatible(format!(
            "vocabulary has {} entries, model expects {vocab_size}",
            vocab.len()
        )));
    }
    if let Some(fp) = fingerprint {
        if fp != vocab.fingerprint() {
            return Err(Error::Incompatible(format!(
                "vocabulary fingerprint {:08x} differs from the checkpoint's {fp:08x}",
                vocab.fingerprint()
            )));
        }
    }
    Ok(())
}

fn append_metrics(path: &Path, row: &MetricRow) -> Result<()> {
    let fresh = std::fs::metadata(path).map(|m| m.len() == 0).unwrap_or(true);
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    let mut text = String::new();
    if fresh {
        text.push_str(METRICS_HEADER);
        text.push('\n');
    }
    text.push_str(&row.csv());
    text.push('\n');
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
