use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::mem::chunk::{chunk_input, ChunkedBatch};
use crate::tokenizer::{Vocab, EOS_ID};

/// One question-answering record. Paragraphs are lists of sentences.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QaRecord {
    pub id: String,
    pub question: String,
    pub answer: String,
    pub kind: String,
    pub level: String,
    pub context: Vec<Vec<String>>,
}

/// Sentences joined within each paragraph and paragraphs joined, all with
/// single spaces. Empty sentences and paragraphs contribute nothing.
pub fn flatten_context(context: &[Vec<String>]) -> String {
    context
        .iter()
        .flatten()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn schema(record: &str, field: &str, reason: impl Into<String>) -> Error {
    Error::Schema {
        record: record.to_string(),
        field: field.to_string(),
        reason: reason.into(),
    }
}

fn string_field(obj: &serde_json::Map<String, Value>, id: &str, field: &str, required: bool) -> Result<String> {
    match obj.get(field) {
        Some(Value::String(s)) => Ok(s.clone()),
        Some(_) => Err(schema(id, field, "expected a string")),
        None if required => Err(schema(id, field, "missing")),
        None => Ok(String::new()),
    }
}

fn sentences(v: &Value, id: &str) -> Result<Vec<String>> {
    let arr = v
        .as_array()
        .ok_or_else(|| schema(id, "context", "paragraph must be a list of sentences"))?;
    arr.iter()
        .map(|s| {
            s.as_str()
                .map(str::to_string)
                .ok_or_else(|| schema(id, "context", "sentence must be a string"))
        })
        .collect()
}

/// Parses one record. Paragraphs may be plain sentence lists or
/// `[title, [sentences...]]` pairs; titles are dropped.
pub fn parse_qa_record(v: &Value, line: usize) -> Result<QaRecord> {
    let fallback = format!("line {line}");
    let obj = v
        .as_object()
        .ok_or_else(|| schema(&fallback, "<record>", "expected a JSON object"))?;
    let id = match obj.get("id").or_else(|| obj.get("_id")) {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(schema(&fallback, "id", "expected a string")),
        None => return Err(schema(&fallback, "id", "missing")),
    };
    let question = string_field(obj, &id, "question", true)?;
    let answer = string_field(obj, &id, "answer", true)?;
    let kind = string_field(obj, &id, "type", false)?;
    let level = string_field(obj, &id, "level", false)?;
    let ctx = obj
        .get("context")
        .ok_or_else(|| schema(&id, "context", "missing"))?
        .as_array()
        .ok_or_else(|| schema(&id, "context", "expected a list of paragraphs"))?;
    let mut context = Vec::with_capacity(ctx.len());
    for p in ctx {
        let para = match p.as_array().map(Vec::as_slice) {
            Some([Value::String(_), body @ Value::Array(_)]) => sentences(body, &id)?,
            Some(_) => sentences(p, &id)?,
            None => return Err(schema(&id, "context", "paragraph must be a list")),
        };
        context.push(para);
    }
    Ok(QaRecord {
        id,
        question,
        answer,
        kind,
        level,
        context,
    })
}

/// Reads JSON-lines records (a top-level JSON array is also accepted).
pub fn load_qa_dataset(path: &Path) -> Result<Vec<QaRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_qa_text(&text)
}

pub fn parse_qa_text(text: &str) -> Result<Vec<QaRecord>> {
    if text.trim_start().starts_with('[') {
        let all: Value = serde_json::from_str(text)?;
        let arr = all.as_array().expect("checked array");
        return arr.iter().enumerate().map(|(i, v)| parse_qa_record(v, i + 1)).collect();
    }
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let v: Value = serde_json::from_str(l)
                .map_err(|e| schema(&format!("line {}", i + 1), "<record>", e.to_string()))?;
            parse_qa_record(&v, i + 1)
        })
        .collect()
}

/// Encoded source `question </s> context </s>` split into chunks, plus the
/// target `answer </s>`. The context is cut from its tail to fit
/// `source_len`; the answer is cut so the target fits `target_len`.
pub fn build_qa_example(
    record: &QaRecord,
    vocab: &Vocab,
    source_len: usize,
    target_len: usize,
    n_chunks: usize,
) -> Result<(ChunkedBatch, Vec<u32>)> {
    if n_chunks == 0 || !source_len.is_multiple_of(n_chunks) {
        return Err(Error::Config(format!(
            "source_len {source_len} is not divisible into {n_chunks} chunks"
        )));
    }
    if target_len == 0 {
        return Err(Error::Config("target_len must be positive".into()));
    }
    if record.question.trim().is_empty() {
        return Err(schema(&record.id, "question", "empty"));
    }
    let chunk_len = source_len / n_chunks;
    let q = vocab.encode(&record.question);
    if q.len() + 2 > source_len {
        return Err(Error::Overflow {
            len: q.len() + 2,
            capacity: source_len,
        });
    }
    let mut ctx = vocab.encode(&flatten_context(&record.context));
    ctx.truncate(source_len - q.len() - 2);
    let mut src = q;
    src.push(EOS_ID);
    src.extend(ctx);
    src.push(EOS_ID);
    let source = chunk_input(&src, chunk_len, n_chunks, false)?;
    let mut target = vocab.encode(&record.answer);
    target.truncate(target_len - 1);
    target.push(EOS_ID);
    Ok((source, target))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn s(v: &[&str]) -> Vec<String> {
        v.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(flatten_context(&[s(&["a.", "b."]), s(&["c."])]), "a. b. c.");
        assert_eq!(flatten_context(&[vec![]]), "");
        let ten: Vec<Vec<String>> = (0..10).map(|i| vec![format!("p{i}")]).collect();
        assert_eq!(flatten_context(&ten), "p0 p1 p2 p3 p4 p5 p6 p7 p8 p9");
    }

    #[test]
    fn parses_both_paragraph_shapes() {
        let text = r#"{"id":"1","question":"q","answer":"a","type":"t","level":"l","supporting_facts":[],"context":[["x","y"]]}
{"_id":"2","question":"q2","answer":"a2","context":[["Title",["s1","s2"]]]}"#;
        let r = parse_qa_text(text).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r[0].context, vec![s(&["x", "y"])]);
        assert_eq!(r[1].context, vec![s(&["s1", "s2"])]);
    }

    #[test]
    fn missing_answer_names_field_and_record() {
        let err = parse_qa_text(r#"{"id":"r7","question":"q","context":[]}"#).unwrap_err();
        match err {
            Error::Schema { record, field, .. } => {
                assert_eq!(record, "r7");
                assert_eq!(field, "answer");
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    fn vocab() -> Vocab {
        Vocab::train(["question context answer qca"], 200).unwrap()
    }

    fn record(q: &str, ctx: &str, a: &str) -> QaRecord {
        QaRecord {
            id: "x".into(),
            question: q.into(),
            answer: a.into(),
            kind: String::new(),
            level: String::new(),
            context: vec![vec![ctx.into()]],
        }
    }

    #[test]
    fn tiny_example_layout() {
        let v = vocab();
        let (src, tgt) = build_qa_example(&record("q", "c", "a"), &v, 8, 40, 1).unwrap();
        let (q, c, a) = (v.encode("q"), v.encode("c"), v.encode("a"));
        let mut want = q.clone();
        want.push(EOS_ID);
        want.extend(&c);
        want.push(EOS_ID);
        let real: Vec<u32> = src.ids.iter().zip(&src.valid).filter(|(_, &ok)| ok).map(|(&i, _)| i).collect();
        assert_eq!(real, want);
        let mut t = a;
        t.push(EOS_ID);
        assert_eq!(tgt, t);
    }

    #[test]
    fn long_context_keeps_both_markers() {
        let v = vocab();
        let ctx = "context ".repeat(2000);
        let (src, _) = build_qa_example(&record("question", &ctx, "a"), &v, 64, 40, 4).unwrap();
        assert_eq!((src.n_chunks, src.chunk_len), (4, 16));
        assert!(src.valid.iter().all(|&x| x));
        assert_eq!(src.ids.iter().filter(|&&i| i == EOS_ID).count(), 2);
        assert_eq!(*src.ids.last().unwrap(), EOS_ID);
    }

    #[test]
    fn long_answer_is_cut_to_target_len() {
        let v = vocab();
        let (_, tgt) = build_qa_example(&record("q", "c", &"answer ".repeat(100)), &v, 16, 5, 1).unwrap();
        assert_eq!(tgt.len(), 5);
        assert_eq!(tgt[4], EOS_ID);
    }

    #[test]
    fn oversized_question_is_an_error() {
        let v = vocab();
        let q = "question ".repeat(50);
        assert!(matches!(
            build_qa_example(&record(&q, "c", "a"), &v, 8, 40, 1),
            Err(Error::Overflow { .. })
        ));
    }
}
