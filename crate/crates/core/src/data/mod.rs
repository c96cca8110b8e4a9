//! Records, corpora, and the tokenizer.

mod synth;
mod tokenizer;

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{
    all_words, gen_kv_retrieval_qa, gen_lm_corpus, shuffled, Split, FUNCTION_WORDS, KEYS,
    OOD_KEYS, OOD_VALUES, RECALL, VALUES,
};
pub use tokenizer::{Tokenizer, TokenizerMode, TokenizerSpec, Vocab, AE, BOS, EOS, PAD, RESERVED, SEP};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QARecord {
    #[serde(default)]
    pub id: String,
    pub context: String,
    pub question: String,
    pub answer: String,
}

/// Token-level training example.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TrainSample {
    Ae { c: Vec<usize> },
    Lm { c: Vec<usize>, future: Vec<usize> },
    Qa { c: Vec<usize>, q: Vec<usize>, a: Vec<usize> },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawRecord {
    id: Option<serde_json::Value>,
    context: String,
    question: String,
    answer: String,
}

/// One JSON object per line. Blank lines are skipped; a missing id becomes
/// the 1-based line number.
pub fn load_jsonl(path: &Path) -> Result<Vec<QARecord>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord = serde_json::from_str(&line).map_err(|e| Error::Schema {
            line: i + 1,
            msg: e.to_string(),
        })?;
        let id = match raw.id {
            None | Some(serde_json::Value::Null) => (i + 1).to_string(),
            Some(serde_json::Value::String(s)) => s,
            Some(v) => v.to_string(),
        };
        out.push(QARecord {
            id,
            context: raw.context,
            question: raw.question,
            answer: raw.answer,
        });
    }
    if out.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(out)
}

pub fn write_jsonl(path: &Path, records: &[QARecord]) -> Result<()> {
    let mut buf = Vec::new();
    for r in records {
        serde_json::to_writer(&mut buf, r)?;
        buf.push(b'\n');
    }
    crate::io::write_atomic(path, &buf)
}

/// One document per non-empty line.
pub fn load_corpus(path: &Path) -> Result<Vec<String>> {
    let docs: Vec<String> = fs::read_to_string(path)?
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(String::from)
        .collect();
    if docs.is_empty() {
        return Err(Error::EmptyCorpus(path.display().to_string()));
    }
    Ok(docs)
}

pub fn write_corpus(path: &Path, docs: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    for d in docs {
        if d.contains('\n') {
            return Err(Error::Input("documents must be single lines".into()));
        }
        writeln!(buf, "{d}")?;
    }
    crate::io::write_atomic(path, &buf)
}

/// Records whose ids appear in `ids` go to the second half.
pub fn split_by_id(records: &[QARecord], ids: &HashSet<String>) -> (Vec<QARecord>, Vec<QARecord>) {
    records.iter().cloned().partition(|r| !ids.contains(&r.id))
}

/// Splits an LM document into context and continuation at the recall
/// marker, else at the midpoint. The context is non-empty and the
/// continuation keeps at least two tokens.
pub fn lm_sample(tokens: &[usize], recall: Option<usize>) -> Result<TrainSample> {
    if tokens.len() < 3 {
        return Err(Error::Input(format!(
            "LM sample needs at least 3 tokens, got {}",
            tokens.len()
        )));
    }
    let cut = recall
        .and_then(|r| tokens.iter().position(|&t| t == r))
        .filter(|&p| p > 0)
        .unwrap_or(tokens.len() / 2)
        .min(tokens.len() - 2);
    Ok(TrainSample::Lm {
        c: tokens[..cut].to_vec(),
        future: tokens[cut..].to_vec(),
    })
}

pub fn qa_sample(tok: &Tokenizer, r: &QARecord) -> Result<TrainSample> {
    let c = tok.tokenize(&r.context)?;
    let q = tok.tokenize(&r.question)?;
    let a = tok.tokenize(&r.answer)?;
    if c.is_empty() || q.is_empty() {
        return Err(Error::Input(format!("record {} has an empty context or question", r.id)));
    }
    Ok(TrainSample::Qa { c, q, a })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jsonl_round_trip_and_missing_id() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.jsonl");
        let recs = gen_kv_retrieval_qa(5, 2, 1, Split::Id).unwrap();
        write_jsonl(&p, &recs).unwrap();
        assert_eq!(load_jsonl(&p).unwrap(), recs);

        fs::write(&p, "{\"context\":\"a\",\"question\":\"b\",\"answer\":\"c\"}\n\n{\"id\":7,\"context\":\"a\",\"question\":\"b\",\"answer\":\"c\"}\n").unwrap();
        let r = load_jsonl(&p).unwrap();
        assert_eq!(r[0].id, "1");
        assert_eq!(r[1].id, "7");
    }

    #[test]
    fn schema_error_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        fs::write(&p, "{\"context\":\"a\",\"question\":\"b\",\"answer\":\"c\"}\n{\"context\":\"a\"}\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::Schema { line: 2, .. })));
        fs::write(&p, "\n\n").unwrap();
        assert!(matches!(load_jsonl(&p), Err(Error::EmptyCorpus(_))));
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        let docs = gen_lm_corpus(10, (5, 20), 3).unwrap();
        write_corpus(&p, &docs).unwrap();
        assert_eq!(load_corpus(&p).unwrap(), docs);
        fs::write(&p, "\n").unwrap();
        assert!(load_corpus(&p).is_err());
    }

    #[test]
    fn lm_split_at_marker_or_midpoint() {
        match lm_sample(&[5, 6, 9, 7, 8], Some(9)).unwrap() {
            TrainSample::Lm { c, future } => {
                assert_eq!(c, vec![5, 6]);
                assert_eq!(future, vec![9, 7, 8]);
            }
            _ => unreachable!(),
        }
        match lm_sample(&[5, 6, 7, 8], None).unwrap() {
            TrainSample::Lm { c, future } => assert_eq!((c.len(), future.len()), (2, 2)),
            _ => unreachable!(),
        }
        match lm_sample(&[5, 6, 7, 9, 8], Some(9)).unwrap() {
            TrainSample::Lm { future, .. } => assert_eq!(future, vec![9, 8]),
            _ => unreachable!(),
        }
        match lm_sample(&[5, 6, 7, 8, 9], Some(9)).unwrap() {
            TrainSample::Lm { future, .. } => assert_eq!(future, vec![8, 9]),
            _ => unreachable!(),
        }
        assert!(lm_sample(&[5, 6], None).is_err());
    }

    #[test]
    fn split_partitions_by_id() {
        let recs = gen_kv_retrieval_qa(6, 2, 1, Split::Id).unwrap();
        let ids: HashSet<String> = [recs[1].id.clone(), recs[4].id.clone()].into();
        let (a, b) = split_by_id(&recs, &ids);
        assert_eq!((a.len(), b.len()), (4, 2));
    }
}
