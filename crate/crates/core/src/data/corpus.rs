use std::path::Path;

use crate::error::{Error, Result};
use crate::tokenizer::{Vocab, EOS_ID};

/// Splits text into documents at blank lines.
pub fn split_documents(text: &str) -> Vec<String> {
    let mut docs = Vec::new();
    let mut cur: Vec<&str> = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            if !cur.is_empty() {
                docs.push(cur.join("\n"));
                cur.clear();
            }
        } else {
            cur.push(line);
        }
    }
    if !cur.is_empty() {
        docs.push(cur.join("\n"));
    }
    docs
}

pub fn read_documents(paths: &[impl AsRef<Path>]) -> Result<Vec<String>> {
    let mut docs = Vec::new();
    for p in paths {
        let p = p.as_ref();
        let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
        docs.extend(split_documents(&text));
    }
    Ok(docs)
}

/// Tokenizes documents, joins them with `</s>`, and cuts the stream into
/// sequences of exactly `seq_len` ids. A short tail is dropped.
pub fn pack_documents(docs: &[String], vocab: &Vocab, seq_len: usize) -> Vec<Vec<u32>> {
    let mut stream = Vec::new();
    for d in docs {
        stream.extend(vocab.encode(d));
        stream.push(EOS_ID);
    }
    stream.chunks_exact(seq_len.max(1)).map(<[u32]>::to_vec).collect()
}

pub fn load_text_corpus(paths: &[impl AsRef<Path>], vocab: &Vocab, seq_len: usize) -> Result<Vec<Vec<u32>>> {
    Ok(pack_documents(&read_documents(paths)?, vocab, seq_len))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn documents_split_on_blank_lines() {
        let d = split_documents("a b\nc\n\n\n  \nd\n");
        assert_eq!(d, vec!["a b\nc".to_string(), "d".to_string()]);
        assert!(split_documents("").is_empty());
    }

    #[test]
    fn packing_drops_the_tail() {
        let v = Vocab::train(["abcdefgh"], 200).unwrap();
        let per_doc = v.encode("a").len() + 1;
        let seqs = pack_documents(&vec!["a".to_string(); 5], &v, per_doc * 2);
        assert_eq!(seqs.len(), 2);
        assert!(seqs.iter().all(|s| s.len() == per_doc * 2));
        assert!(pack_documents(&[], &v, 4).is_empty());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_text_corpus(&["/no/such/file.txt"], &Vocab::train(["abab"], 199).unwrap(), 4).unwrap_err();
        assert!(err.to_string().contains("/no/such/file.txt"));
    }
}
