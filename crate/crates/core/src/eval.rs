//! Answer metrics, greedy decoding against compressed prefixes, perplexity,
//! and the attention/KV analysis dumps.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::compressor::{
    bind_frozen, compress, decode, encode, Compressed, CompressedRepr, CompressionConfig,
    CompressorParams, ContinuationStart,
};
use crate::data::{lm_sample, QARecord, Tokenizer, TrainSample, BOS, EOS, PAD, SEP};
use crate::error::{Error, Result};
use crate::model::{embed, forward, run, AttentionMask, Input, KvCache, ModelConfig, ModelParams, Pass};
use crate::tensor::{Scalar, Tensor};
use crate::train::loss_lm;

/// Lowercase, drop ASCII punctuation, drop the articles a/an/the, and
/// collapse whitespace.
pub fn normalize_answer(s: &str) -> String {
    let lower = s.to_lowercase();
    let no_punct: String = lower.chars().filter(|c| !c.is_ascii_punctuation()).collect();
    no_punct
        .split_whitespace()
        .filter(|w| !matches!(*w, "a" | "an" | "the"))
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(prediction: &str, reference: &str) -> f64 {
    f64::from(u8::from(normalize_answer(prediction) == normalize_answer(reference)))
}

/// Unigram F1 over normalized words with clipped multiset overlap.
pub fn rouge1_f1(prediction: &str, reference: &str) -> f64 {
    let p = normalize_answer(prediction);
    let r = normalize_answer(reference);
    let pw: Vec<&str> = p.split_whitespace().collect();
    let rw: Vec<&str> = r.split_whitespace().collect();
    match (pw.is_empty(), rw.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for w in &rw {
        *counts.entry(w).or_default() += 1;
    }
    let mut overlap = 0usize;
    for w in &pw {
        if let Some(c) = counts.get_mut(w) {
            if *c > 0 {
                *c -= 1;
                overlap += 1;
            }
        }
    }
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / pw.len() as f64;
    let recall = overlap as f64 / rw.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// What the decoder is conditioned on.
#[derive(Clone, Copy, Debug)]
pub enum Conditioning<'a, T> {
    /// The whole context, uncompressed.
    Full,
    Compressed {
        comp: &'a CompressorParams<T>,
        ccfg: &'a CompressionConfig,
    },
}

impl<T: Scalar> Conditioning<'_, T> {
    pub fn method_tag(&self) -> &'static str {
        match self {
            Conditioning::Full => "full",
            Conditioning::Compressed { comp, .. } => comp.method.tag(),
        }
    }

    pub fn ratio(&self) -> usize {
        match self {
            Conditioning::Full => 1,
            Conditioning::Compressed { ccfg, .. } => ccfg.ratio,
        }
    }

    /// The prefix the decoder sees for `context`.
    pub fn prefix(
        &self,
        cfg: &ModelConfig,
        base: &ModelParams<T>,
        context: &[usize],
    ) -> Result<Compressed<T>> {
        match self {
            Conditioning::Full => Ok(Compressed::Kv(full_kv(cfg, base, context)?)),
            Conditioning::Compressed { comp, ccfg } => compress(cfg, base, comp, context, ccfg),
        }
    }
}

/// The decoder's own causal KV over `context`.
pub fn full_kv<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    context: &[usize],
) -> Result<CompressedRepr<T>> {
    let kv = if context.is_empty() {
        KvCache::empty(cfg.n_layers, cfg.n_heads, cfg.d_head)
    } else {
        let positions: Vec<usize> = (0..context.len()).collect();
        run(cfg, base, None, context, &positions, &AttentionMask::Causal, None)?.1
    };
    Ok(CompressedRepr {
        kv,
        source_len: context.len(),
        ratio: 1,
        chunk_boundaries: vec![0],
        strategy: "full".into(),
    })
}

fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Greedy decoding after `prefix` and `prompt` (or `[BOS]` if the prompt
/// is empty), with an incremental KV cache. Stops before any token in
/// `stop` or after `max_new` tokens.
pub fn generate<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    prefix: &Compressed<T>,
    prompt: &[usize],
    max_new: usize,
    stop: &[usize],
    start: ContinuationStart,
) -> Result<Vec<usize>> {
    let mut out = Vec::new();
    if max_new == 0 {
        return Ok(out);
    }
    let prompt = if prompt.is_empty() { &[BOS][..] } else { prompt };
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let repr = prefix.bind(&mut tape);
    let e = embed(&mut tape, &bm, prompt)?;
    let d = decode(&mut tape, cfg, &bm, &repr, e, start)?;
    let logits = tape.value(d.logits);
    let mut next = argmax(logits.row(logits.rows() - 1));
    let fresh = KvCache::from_tape(&tape, &d.kv, cfg.n_heads);
    let mut cache = match prefix {
        Compressed::Kv(r) if r.kv.slots() > 0 => KvCache::concat_kv(&r.kv, &fresh)?,
        _ => fresh,
    };
    let mut pos = d.next_position;
    drop(tape);
    loop {
        if stop.contains(&next) {
            break;
        }
        out.push(next);
        if out.len() == max_new {
            break;
        }
        let (logits, kv) = run(cfg, base, None, &[next], &[pos], &AttentionMask::Causal, Some(&cache))?;
        cache = KvCache::concat_kv(&cache, &kv)?;
        next = argmax(logits.row(0));
        pos += 1;
    }
    Ok(out)
}

/// Greedy answer to `question` given the conditioned context.
pub fn answer<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    cond: &Conditioning<'_, T>,
    context: &[usize],
    question: &[usize],
    max_new: usize,
    start: ContinuationStart,
) -> Result<Vec<usize>> {
    let prefix = cond.prefix(cfg, base, context)?;
    let mut prompt = question.to_vec();
    prompt.push(SEP);
    generate(cfg, base, &prefix, &prompt, max_new, &[EOS, PAD], start)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub method: String,
    pub ratio: usize,
    pub f1: f64,
    pub em: f64,
    pub ppl: Option<f64>,
    pub n_records: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub id: String,
    pub prediction: String,
    pub answer: String,
    pub f1: f64,
    pub em: f64,
}

/// Per-record predictions and their mean metrics.
pub fn evaluate_qa_detailed<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    tok: &Tokenizer,
    cond: &Conditioning<'_, T>,
    records: &[QARecord],
    max_new: usize,
    start: ContinuationStart,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let mut preds = Vec::with_capacity(records.len());
    for r in records {
        let c = tok.tokenize(&r.context)?;
        let q = tok.tokenize(&r.question)?;
        let ids = answer(cfg, base, cond, &c, &q, max_new, start)?;
        let prediction = tok.detokenize(&ids);
        preds.push(Prediction {
            id: r.id.clone(),
            f1: rouge1_f1(&prediction, &r.answer),
            em: exact_match(&prediction, &r.answer),
            prediction,
            answer: r.answer.clone(),
        });
    }
    let n = preds.len().max(1) as f64;
    let report = MetricReport {
        method: cond.method_tag().to_string(),
        ratio: cond.ratio(),
        f1: preds.iter().map(|p| p.f1).sum::<f64>() / n,
        em: preds.iter().map(|p| p.em).sum::<f64>() / n,
        ppl: None,
        n_records: preds.len(),
    };
    Ok((report, preds))
}

pub fn evaluate_qa<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    tok: &Tokenizer,
    cond: &Conditioning<'_, T>,
    records: &[QARecord],
    max_new: usize,
    start: ContinuationStart,
) -> Result<MetricReport> {
    Ok(evaluate_qa_detailed(cfg, base, tok, cond, records, max_new, start)?.0)
}

/// `exp` of the token-weighted mean continuation NLL, each document split
/// as for LM pretraining.
pub fn perplexity<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    cond: &Conditioning<'_, T>,
    docs: &[Vec<usize>],
    recall: Option<usize>,
    start: ContinuationStart,
) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    for d in docs.iter().filter(|d| d.len() >= 3) {
        let TrainSample::Lm { c, future } = lm_sample(d, recall)? else {
            unreachable!("lm_sample yields LM samples")
        };
        let prefix = cond.prefix(cfg, base, &c)?;
        let mut tape = Tape::new();
        let bm = bind_frozen(base, &mut tape);
        let repr = prefix.bind(&mut tape);
        let l = loss_lm(&mut tape, cfg, &bm, &repr, &future, start)?;
        let n = future.len() - 1;
        total += tape.value(l).item().as_f64() * n as f64;
        count += n;
    }
    if count == 0 {
        return Err(Error::EmptyCorpus("no documents of at least 3 tokens".into()));
    }
    Ok((total / count as f64).exp())
}

/// Head-averaged last-layer attention from compressed slots to context
/// tokens, each row renormalized over the context columns.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionDump {
    pub rows: Vec<String>,
    pub cols: Vec<String>,
    pub matrix: Vec<Vec<f64>>,
}

impl AttentionDump {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("slot");
        for c in &self.cols {
            write!(s, ",{}", csv_field(c)).expect("string write");
        }
        s.push('\n');
        for (label, row) in self.rows.iter().zip(&self.matrix) {
            s.push_str(&csv_field(label));
            for x in row {
                write!(s, ",{x}").expect("string write");
            }
            s.push('\n');
        }
        s
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_csv().as_bytes())
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub fn dump_attention<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: &CompressorParams<T>,
    ccfg: &CompressionConfig,
    tok: &Tokenizer,
    tokens: &[usize],
) -> Result<AttentionDump> {
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let bc = comp.bind(&mut tape, false);
    let enc = encode(&mut tape, cfg, &bm, &bc, tokens, ccfg)?;
    let n = tokens.len();
    let mut ends: Vec<usize> = enc.chunk_boundaries[1..].to_vec();
    ends.push(n);
    let mut rows = Vec::new();
    let mut matrix = Vec::new();
    for ((&(attn, ref slot_rows), &s), &e) in
        enc.attention.iter().zip(&enc.chunk_boundaries).zip(&ends)
    {
        let (probs, heads) = tape
            .attention_probs(attn)
            .ok_or_else(|| Error::Contract("encoder attention node carries no probabilities".into()))?;
        let per_head = probs.len() / heads;
        let q = (per_head as f64).sqrt().round() as usize;
        let t = e - s;
        for &r in slot_rows {
            let mut row = vec![0.0; n];
            for h in 0..heads {
                let base_idx = h * q * q + r * q;
                for j in 0..t {
                    row[s + j] += probs[base_idx + j].as_f64() / heads as f64;
                }
            }
            let mass: f64 = row.iter().sum();
            if mass > 0.0 {
                row.iter_mut().for_each(|x| *x /= mass);
            }
            let label = if r < t {
                format!("anchor{}@{}", rows.len(), s + r)
            } else {
                format!("slot{}@chunk{}", rows.len(), s)
            };
            rows.push(label);
            matrix.push(row);
        }
    }
    let cols = tokens
        .iter()
        .enumerate()
        .map(|(i, &id)| format!("{i}:{}", tok.detokenize(&[id])))
        .collect();
    Ok(AttentionDump { rows, cols, matrix })
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvRow {
    pub sample: usize,
    /// `context` or `compressed`.
    pub label: String,
    pub method: String,
    pub position: usize,
    pub vector: Vec<f64>,
}

/// Last-layer K (or V) vectors of context tokens under the frozen decoder
/// and of compressed slots, flattened over heads.
pub fn dump_kv<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: &CompressorParams<T>,
    ccfg: &CompressionConfig,
    samples: &[Vec<usize>],
    values: bool,
) -> Result<Vec<KvRow>> {
    let last = cfg.n_layers - 1;
    let method = comp.method.tag().to_string();
    let mut out = Vec::new();
    let mut push = |sample: usize, label: &str, kv: &KvCache<T>| {
        let flat = kv.flat_rows(last, values);
        for (i, &p) in kv.positions.iter().enumerate() {
            out.push(KvRow {
                sample,
                label: label.to_string(),
                method: method.clone(),
                position: p,
                vector: flat.row(i).iter().map(|x| x.as_f64()).collect(),
            });
        }
    };
    for (i, s) in samples.iter().enumerate() {
        push(i, "context", &full_kv(cfg, base, s)?.kv);
        let kv = match compress(cfg, base, comp, s, ccfg)? {
            Compressed::Kv(r) => r.kv,
            Compressed::Soft(soft) => soft_kv(cfg, base, &soft.embeddings)?,
        };
        push(i, "compressed", &kv);
    }
    Ok(out)
}

/// The KV a decoder builds over soft-token rows at positions `0..m`.
fn soft_kv<T: Scalar>(cfg: &ModelConfig, base: &ModelParams<T>, soft: &Tensor<T>) -> Result<KvCache<T>> {
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let e = tape.constant(soft.clone());
    let positions: Vec<usize> = (0..soft.rows()).collect();
    let f = forward(
        &mut tape,
        cfg,
        &bm,
        None,
        &Pass {
            input: Input::Embeddings(e),
            positions: &positions,
            mask: &AttentionMask::Causal,
            prefix: None,
            logits: false,
        },
    )?;
    Ok(KvCache::from_tape(&tape, &f.kv, cfg.n_heads))
}

pub fn kv_csv(rows: &[KvRow]) -> String {
    let width = rows.first().map_or(0, |r| r.vector.len());
    let mut s = String::from("sample,label,method,position");
    for j in 0..width {
        write!(s, ",d{j}").expect("string write");
    }
    s.push('\n');
    for r in rows {
        write!(s, "{},{},{},{}", r.sample, r.label, r.method, r.position).expect("string write");
        for x in &r.vector {
            write!(s, ",{x}").expect("string write");
        }
        s.push('\n');
    }
    s
}

/// Fixed-width summary with one row per report.
pub fn report_table(reports: &[MetricReport]) -> String {
    let mut s = format!("{:<8} {:>5} {:>7} {:>7} {:>9} {:>6}\n", "method", "ratio", "F1", "EM", "PPL", "n");
    for r in reports {
        let ppl = r.ppl.map_or_else(|| "-".to_string(), |p| format!("{p:.3}"));
        writeln!(
            s,
            "{:<8} {:>5} {:>7.2} {:>7.2} {:>9} {:>6}",
            r.method,
            r.ratio,
            100.0 * r.f1,
            100.0 * r.em,
            ppl,
            r.n_records
        )
        .expect("string write");
    }
    s
}

pub fn reports_csv(reports: &[MetricReport]) -> String {
    let mut s = String::from("method,ratio,f1,em,ppl,n_records\n");
    for r in reports {
        let ppl = r.ppl.map_or_else(String::new, |p| p.to_string());
        writeln!(s, "{},{},{},{},{},{}", r.method, r.ratio, r.f1, r.em, ppl, r.n_records)
            .expect("string write");
    }
    s
}
