//! Anchor selection, anchor-embedding injection, and the bidirectional
//! encoder that turns a context into per-layer KV at anchor slots.
//!
//! The same encoder entry point also drives the appended-token baselines so
//! that every method shares one forward implementation.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::baselines::{self, CompressionTokenBank};
use crate::error::{Error, Result};
use crate::model::{
    embed, forward, AttentionMask, BoundLora, BoundModel, Input, KvCache, LoraAdapter,
    ModelConfig, ModelParams, Pass, Proj, TapeKv,
};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sac")]
    Sac,
    #[serde(rename = "icae")]
    Icae,
    #[serde(rename = "500x")]
    X500,
    #[serde(rename = "epl")]
    Epl,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Sac, Method::Icae, Method::X500, Method::Epl];

    pub fn tag(self) -> &'static str {
        match self {
            Method::Sac => "sac",
            Method::Icae => "icae",
            Method::X500 => "500x",
            Method::Epl => "epl",
        }
    }

    pub fn is_baseline(self) -> bool {
        self != Method::Sac
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.tag().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Uniform,
    Random { seed: u64 },
    /// One score per context token, by absolute position.
    Scored { scores: Vec<f64> },
}

impl Strategy {
    pub fn tag(&self) -> &'static str {
        match self {
            Strategy::Uniform => "uniform",
            Strategy::Random { .. } => "random",
            Strategy::Scored { .. } => "scored",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMask {
    #[default]
    Bidirectional,
    Causal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    pub ratio: usize,
    pub chunk_len: usize,
    #[serde(default)]
    pub strategy: Strategy,
    /// SAC only; baselines always encode causally.
    #[serde(default)]
    pub encoder_mask: EncoderMask,
}

impl CompressionConfig {
    pub fn new(ratio: usize, chunk_len: usize) -> Self {
        Self {
            ratio,
            chunk_len,
            strategy: Strategy::Uniform,
            encoder_mask: EncoderMask::Bidirectional,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio == 0 {
            return Err(Error::Config("compression ratio must be at least 1".into()));
        }
        if self.chunk_len == 0 {
            return Err(Error::Config("chunk length must be at least 1".into()));
        }
        Ok(())
    }
}

/// `⌊len / r⌋` slots for a chunk of `len` tokens, never fewer than one.
pub fn anchors_per_chunk(len: usize, ratio: usize) -> usize {
    (len / ratio.max(1)).max(1)
}

/// `[start, end)` spans of at most `chunk_len` tokens.
pub fn chunk_spans(n: usize, chunk_len: usize) -> Vec<(usize, usize)> {
    (0..n)
        .step_by(chunk_len.max(1))
        .map(|s| (s, (s + chunk_len).min(n)))
        .collect()
}

/// Sorted, unique indices into one chunk.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorSet {
    indices: Vec<usize>,
}

impl AnchorSet {
    pub fn new(indices: Vec<usize>, chunk_len: usize) -> Result<Self> {
        if indices.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Index(format!(
                "anchor indices must be strictly increasing: {indices:?}"
            )));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= chunk_len) {
            return Err(Error::Index(format!(
                "anchor {bad} outside a chunk of {chunk_len}"
            )));
        }
        Ok(Self { indices })
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

fn check_budget(chunk_len: usize, n: usize) -> Result<()> {
    if n == 0 || n > chunk_len {
        return Err(Error::Config(format!(
            "cannot select {n} anchors from {chunk_len} tokens"
        )));
    }
    Ok(())
}

/// Middle token of each of `n` equal spans.
pub fn select_uniform(chunk_len: usize, n: usize) -> Result<AnchorSet> {
    check_budget(chunk_len, n)?;
    let indices = (0..n)
        .map(|i| {
            let start = i * chunk_len / n;
            let end = (i + 1) * chunk_len / n;
            start + (end - start) / 2
        })
        .collect();
    AnchorSet::new(indices, chunk_len)
}

pub fn select_random(chunk_len: usize, n: usize, seed: u64) -> Result<AnchorSet> {
    check_budget(chunk_len, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices = sample(&mut rng, chunk_len, n).into_vec();
    indices.sort_unstable();
    AnchorSet::new(indices, chunk_len)
}

/// Top `n` by score, ties to the lower index, returned in index order.
pub fn select_scored(chunk_len: usize, n: usize, scores: &[f64]) -> Result<AnchorSet> {
    if scores.len() != chunk_len {
        return Err(Error::Input(format!(
            "{} scores for a chunk of {chunk_len} tokens",
            scores.len()
        )));
    }
    check_budget(chunk_len, n)?;
    let mut order: Vec<usize> = (0..chunk_len).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut indices = order[..n].to_vec();
    indices.sort_unstable();
    AnchorSet::new(indices, chunk_len)
}

/// Reads one score per line.
pub fn load_scores(path: &Path, expected_len: usize) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path)?;
    let mut scores = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let v: f64 = line.parse().map_err(|_| Error::Schema {
            line: i + 1,
            msg: format!("not a number: {line:?}"),
        })?;
        if !v.is_finite() {
            return Err(Error::Schema {
                line: i + 1,
                msg: "score is not finite".into(),
            });
        }
        scores.push(v);
    }
    if scores.len() != expected_len {
        return Err(Error::Input(format!(
            "score file has {} entries for {expected_len} tokens",
            scores.len()
        )));
    }
    Ok(scores)
}

/// Anchors for the chunk starting at absolute position `offset`.
pub fn select_for_chunk(
    strategy: &Strategy,
    offset: usize,
    len: usize,
    n: usize,
) -> Result<AnchorSet> {
    match strategy {
        Strategy::Uniform => select_uniform(len, n),
        Strategy::Random { seed } => select_random(len, n, seed.wrapping_add(offset as u64)),
        Strategy::Scored { scores } => {
            let slice = scores.get(offset..offset + len).ok_or_else(|| {
                Error::Input(format!(
                    "{} scores do not cover tokens {offset}..{}",
                    scores.len(),
                    offset + len
                ))
            })?;
            select_scored(len, n, slice)
        }
    }
}

/// `base_i + e_A` at anchor rows, `base_i` elsewhere.
pub fn inject_anchor_embedding<T: Scalar>(
    base: &Tensor<T>,
    anchors: &AnchorSet,
    e_a: &Tensor<T>,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let b = tape.constant(base.clone());
    let e = tape.constant(e_a.clone());
    let out = tape.add_to_rows(b, e, anchors.indices())?;
    Ok(tape.value(out).clone())
}

/// Everything a compressor trains: adapter, anchor embedding, the
/// appended-token bank for baselines, and the reconstruction trigger.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressorParams<T> {
    pub method: Method,
    pub lora: LoraAdapter<T>,
    /// `[d_model]`
    pub anchor_embedding: Tensor<T>,
    pub bank: Option<CompressionTokenBank<T>>,
    /// `[1, d_model]`, fed where the decoder should start reconstructing.
    pub ae_trigger: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
}

impl Default for LoraSpec {
    fn default() -> Self {
        Self {
            rank: 8,
            alpha: 16.0,
            targets: Proj::ALL.to_vec(),
        }
    }
}

impl<T: Scalar> CompressorParams<T> {
    /// Fresh parameters: zero anchor embedding, zero LoRA `B`, and for
    /// baselines a bank of `⌊chunk_len / ratio⌋` rows.
    pub fn init<R: Rng + ?Sized>(
        method: Method,
        cfg: &ModelConfig,
        base: &ModelParams<T>,
        lora: &LoraSpec,
        ccfg: &CompressionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        ccfg.validate()?;
        let adapter = LoraAdapter::init(cfg, lora.rank, lora.alpha, &lora.targets, rng)?;
        let bank = if method.is_baseline() {
            let m = anchors_per_chunk(ccfg.chunk_len, ccfg.ratio);
            Some(CompressionTokenBank::init(method, m, base, rng)?)
        } else {
            None
        };
        let ae_trigger = Tensor::new(
            vec![1, cfg.d_model],
            base.token_embedding.row(crate::data::AE).to_vec(),
        )?;
        Ok(Self {
            method,
            lora: adapter,
            anchor_embedding: Tensor::zeros(&[cfg.d_model]),
            bank,
            ae_trigger,
        })
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![
            ("e_a".to_string(), &self.anchor_embedding),
            ("ae_trigger".to_string(), &self.ae_trigger),
        ];
        if let Some(bank) = &self.bank {
            out.push(("bank".to_string(), &bank.embeddings));
        }
        out.extend(self.lora.named());
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![
            ("e_a".to_string(), &mut self.anchor_embedding),
            ("ae_trigger".to_string(), &mut self.ae_trigger),
        ];
        if let Some(bank) = &mut self.bank {
            out.push(("bank".to_string(), &mut bank.embeddings));
        }
        out.extend(self.lora.named_mut());
        out
    }

    pub fn cast<U: Scalar>(&self) -> CompressorParams<U> {
        CompressorParams {
            method: self.method,
            lora: self.lora.cast(),
            anchor_embedding: self.anchor_embedding.cast(),
            bank: self.bank.as_ref().map(|b| b.cast()),
            ae_trigger: self.ae_trigger.cast(),
        }
    }

    /// Binds in [`Self::named`] order.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundCompressor<T> {
        let vars: Vec<Var> = self
            .named()
            .into_iter()
            .map(|(_, t)| tape.leaf(t.clone(), trainable))
            .collect();
        self.rebind(&vars).expect("vars follow named() order")
    }

    /// Builds a binding from vars in [`Self::named`] order.
    pub fn rebind<T2: Scalar>(&self, vars: &[Var]) -> Result<BoundCompressor<T2>> {
        let fixed = 2 + usize::from(self.bank.is_some());
        if vars.len() < fixed {
            return Err(Error::Dimension("too few vars for a compressor".into()));
        }
        Ok(BoundCompressor {
            method: self.method,
            anchor_embedding: vars[0],
            ae_trigger: vars[1],
            bank: self.bank.as_ref().map(|_| vars[2]),
            lora: BoundLora::from_vars(
                &vars[fixed..],
                &self.lora.targets,
                self.lora.layers.len(),
                T2::lit(self.lora.scale()),
            )?,
            vars: vars.to_vec(),
        })
    }
}

#[derive(Clone, Debug)]
pub struct BoundCompressor<T> {
    pub method: Method,
    pub anchor_embedding: Var,
    pub ae_trigger: Var,
    pub bank: Option<Var>,
    pub lora: BoundLora<T>,
    /// All vars in named order.
    pub vars: Vec<Var>,
}

/// Per-layer KV at compressed slots, with the anchors' original positions.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedRepr<T> {
    pub kv: KvCache<T>,
    pub source_len: usize,
    pub ratio: usize,
    /// Start offset of every chunk.
    pub chunk_boundaries: Vec<usize>,
    pub strategy: String,
}

/// Last-layer hidden states of appended tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftTokens<T> {
    /// `[m, d_model]`
    pub embeddings: Tensor<T>,
    pub source_len: usize,
    pub ratio: usize,
    pub chunk_boundaries: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Compressed<T> {
    Kv(CompressedRepr<T>),
    Soft(SoftTokens<T>),
}

impl<T: Scalar> Compressed<T> {
    pub fn slots(&self) -> usize {
        match self {
            Compressed::Kv(r) => r.kv.slots(),
            Compressed::Soft(s) => s.embeddings.rows(),
        }
    }

    pub fn source_len(&self) -> usize {
        match self {
            Compressed::Kv(r) => r.source_len,
            Compressed::Soft(s) => s.source_len,
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>) -> TapeRepr {
        match self {
            Compressed::Kv(r) => TapeRepr::Kv {
                kv: r.kv.bind(tape),
                source_len: r.source_len,
            },
            Compressed::Soft(s) => TapeRepr::Soft {
                embeddings: tape.constant(s.embeddings.clone()),
                source_len: s.source_len,
            },
        }
    }
}

/// A compressed representation living on a tape.
#[derive(Clone, Debug)]
pub enum TapeRepr {
    Kv { kv: TapeKv, source_len: usize },
    Soft { embeddings: Var, source_len: usize },
}

impl TapeRepr {
    pub fn slots<T: Scalar>(&self, tape: &Tape<T>) -> usize {
        match self {
            TapeRepr::Kv { kv, .. } => kv.slots(),
            TapeRepr::Soft { embeddings, .. } => tape.value(*embeddings).rows(),
        }
    }
}

/// Encoder output for one chunk, before concatenation.
pub(crate) struct ChunkOut {
    kv: Option<TapeKv>,
    soft: Option<Var>,
    attention: Var,
    /// Slot rows inside the chunk's encoder pass.
    slot_rows: Vec<usize>,
}

/// Everything the encoder produced, plus what analysis needs.
pub struct Encoded {
    pub repr: TapeRepr,
    pub chunk_boundaries: Vec<usize>,
    /// Per chunk: last-layer attention node and the slot rows within it.
    pub attention: Vec<(Var, Vec<usize>)>,
}

fn encode_chunk<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    comp: &BoundCompressor<T>,
    tokens: &[usize],
    offset: usize,
    ccfg: &CompressionConfig,
) -> Result<ChunkOut> {
    let t = tokens.len();
    let n = anchors_per_chunk(t, ccfg.ratio);
    if comp.method.is_baseline() {
        return baselines::encode_appended_chunk(tape, cfg, base, comp, tokens, offset, n);
    }
    let anchors = select_for_chunk(&ccfg.strategy, offset, t, n)?;
    let e = embed(tape, base, tokens)?;
    let e = tape.add_to_rows(e, comp.anchor_embedding, anchors.indices())?;
    let positions: Vec<usize> = (offset..offset + t).collect();
    let mask = match ccfg.encoder_mask {
        EncoderMask::Bidirectional => AttentionMask::Bidirectional,
        EncoderMask::Causal => AttentionMask::Causal,
    };
    let out = forward(
        tape,
        cfg,
        base,
        Some(&comp.lora),
        &Pass {
            input: Input::Embeddings(e),
            positions: &positions,
            mask: &mask,
            prefix: None,
            logits: false,
        },
    )?;
    let kv = out.kv.select(tape, anchors.indices())?;
    Ok(ChunkOut {
        kv: Some(kv),
        soft: None,
        attention: *out.attention.last().expect("at least one layer"),
        slot_rows: anchors.indices().to_vec(),
    })
}

/// Runs the encoder of `comp.method` over `tokens`, chunk by chunk.
pub fn encode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    comp: &BoundCompressor<T>,
    tokens: &[usize],
    ccfg: &CompressionConfig,
) -> Result<Encoded> {
    ccfg.validate()?;
    if tokens.is_empty() {
        return Err(Error::Input("cannot compress an empty context".into()));
    }
    let spans = chunk_spans(tokens.len(), ccfg.chunk_len);
    let mut kvs = Vec::new();
    let mut softs = Vec::new();
    let mut attention = Vec::new();
    for &(s, e) in &spans {
        let out = encode_chunk(tape, cfg, base, comp, &tokens[s..e], s, ccfg)?;
        attention.push((out.attention, out.slot_rows));
        kvs.extend(out.kv);
        softs.extend(out.soft);
    }
    let source_len = tokens.len();
    let repr = if comp.method == Method::Icae {
        TapeRepr::Soft {
            embeddings: tape.concat_rows(&softs)?,
            source_len,
        }
    } else {
        TapeRepr::Kv {
            kv: TapeKv::concat(tape, &kvs)?,
            source_len,
        }
    };
    Ok(Encoded {
        repr,
        chunk_boundaries: spans.iter().map(|&(s, _)| s).collect(),
        attention,
    })
}

impl ChunkOut {
    pub(crate) fn from_kv(kv: TapeKv, attention: Var, slot_rows: Vec<usize>) -> Self {
        Self {
            kv: Some(kv),
            soft: None,
            attention,
            slot_rows,
        }
    }

    pub(crate) fn from_soft(soft: Var, attention: Var, slot_rows: Vec<usize>) -> Self {
        Self {
            kv: None,
            soft: Some(soft),
            attention,
            slot_rows,
        }
    }
}

fn read_out<T: Scalar>(
    tape: &Tape<T>,
    cfg: &ModelConfig,
    encoded: &Encoded,
    ccfg: &CompressionConfig,
) -> Compressed<T> {
    match &encoded.repr {
        TapeRepr::Kv { kv, source_len } => Compressed::Kv(CompressedRepr {
            kv: KvCache::from_tape(tape, kv, cfg.n_heads),
            source_len: *source_len,
            ratio: ccfg.ratio,
            chunk_boundaries: encoded.chunk_boundaries.clone(),
            strategy: ccfg.strategy.tag().to_string(),
        }),
        TapeRepr::Soft {
            embeddings,
            source_len,
        } => Compressed::Soft(SoftTokens {
            embeddings: tape.value(*embeddings).clone(),
            source_len: *source_len,
            ratio: ccfg.ratio,
            chunk_boundaries: encoded.chunk_boundaries.clone(),
        }),
    }
}

/// Gradient-free compression of a whole context.
pub fn compress<T: Scalar>(
    cfg: &ModelConfig,
    base: &ModelParams<T>,
    comp: &CompressorParams<T>,
    tokens: &[usize],
    ccfg: &CompressionConfig,
) -> Result<Compressed<T>> {
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let bc = comp.bind(&mut tape, false);
    let encoded = encode(&mut tape, cfg, &bm, &bc, tokens, ccfg)?;
    Ok(read_out(&tape, cfg, &encoded, ccfg))
}

/// SAC compression of a whole context into anchor KV.
pub fn compress_context<T: Scalar>(
    tokens: &[usize],
    ccfg: &CompressionConfig,
    comp: &CompressorParams<T>,
    cfg: &ModelConfig,
    base: &ModelParams<T>,
) -> Result<CompressedRepr<T>> {
    match compress(cfg, base, comp, tokens, ccfg)? {
        Compressed::Kv(r) => Ok(r),
        Compressed::Soft(_) => Err(Error::Contract(
            "this method produces soft tokens, not KV".into(),
        )),
    }
}

/// Compresses one chunk whose first token sits at `position_offset`.
pub fn compress_chunk<T: Scalar>(
    tokens: &[usize],
    position_offset: usize,
    ccfg: &CompressionConfig,
    comp: &CompressorParams<T>,
    cfg: &ModelConfig,
    base: &ModelParams<T>,
) -> Result<CompressedRepr<T>> {
    ccfg.validate()?;
    if tokens.is_empty() || tokens.len() > ccfg.chunk_len {
        return Err(Error::Input(format!(
            "a chunk holds 1..={} tokens, got {}",
            ccfg.chunk_len,
            tokens.len()
        )));
    }
    let mut tape = Tape::new();
    let bm = bind_frozen(base, &mut tape);
    let bc = comp.bind(&mut tape, false);
    let out = encode_chunk(&mut tape, cfg, &bm, &bc, tokens, position_offset, ccfg)?;
    let kv = out
        .kv
        .ok_or_else(|| Error::Contract("this method produces soft tokens, not KV".into()))?;
    Ok(CompressedRepr {
        kv: KvCache::from_tape(&tape, &kv, cfg.n_heads),
        source_len: position_offset + tokens.len(),
        ratio: ccfg.ratio,
        chunk_boundaries: vec![position_offset],
        strategy: ccfg.strategy.tag().to_string(),
    })
}

pub(crate) fn bind_frozen<T: Scalar>(base: &ModelParams<T>, tape: &mut Tape<T>) -> BoundModel {
    if base.frozen {
        base.bind(tape)
    } else {
        let mut f = base.clone();
        f.frozen = true;
        f.bind(tape)
    }
}

/// Where decoder continuation tokens start after a KV prefix.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContinuationStart {
    /// `max(source_len, last slot + 1)`
    #[default]
    SourceLen,
    AfterLastSlot,
}

/// Decoder pass over `continuation` (a `[n, d_model]` node) conditioned on
/// `repr`. Returns logits for the continuation rows only.
pub fn decode<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    repr: &TapeRepr,
    continuation: Var,
    start: ContinuationStart,
) -> Result<DecodeOut> {
    let n = tape.value(continuation).rows();
    match repr {
        TapeRepr::Kv { kv, source_len } => {
            let first = match (start, kv.positions.last()) {
                (_, None) => *source_len,
                (ContinuationStart::SourceLen, Some(&last)) => (*source_len).max(last + 1),
                (ContinuationStart::AfterLastSlot, Some(&last)) => last + 1,
            };
            let positions: Vec<usize> = (first..first + n).collect();
            let out = forward(
                tape,
                cfg,
                base,
                None,
                &Pass {
                    input: Input::Embeddings(continuation),
                    positions: &positions,
                    mask: &AttentionMask::Causal,
                    prefix: (kv.slots() > 0).then_some(kv),
                    logits: true,
                },
            )?;
            Ok(DecodeOut {
                logits: out.logits.expect("requested"),
                kv: out.kv,
                lead: 0,
                next_position: first + n,
            })
        }
        TapeRepr::Soft { embeddings, .. } => {
            let m = tape.value(*embeddings).rows();
            let input = tape.concat_rows(&[*embeddings, continuation])?;
            let positions: Vec<usize> = (0..m + n).collect();
            let out = forward(
                tape,
                cfg,
                base,
                None,
                &Pass {
                    input: Input::Embeddings(input),
                    positions: &positions,
                    mask: &AttentionMask::Causal,
                    prefix: None,
                    logits: true,
                },
            )?;
            let rows: Vec<usize> = (m..m + n).collect();
            let logits = out.logits.expect("requested");
            let logits = if m == 0 {
                logits
            } else {
                tape.select_rows(logits, &rows)?
            };
            Ok(DecodeOut {
                logits,
                kv: out.kv,
                lead: m,
                next_position: m + n,
            })
        }
    }
}

pub struct DecodeOut {
    /// `[n, vocab]` for the continuation rows.
    pub logits: Var,
    /// K/V of every slot this pass computed (soft rows included).
    pub kv: TapeKv,
    /// Soft rows preceding the continuation in this pass.
    pub lead: usize,
    pub next_position: usize,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Vocab;
    use rand::SeedableRng;

    #[test]
    fn uniform_examples() {
        assert_eq!(select_uniform(10, 2).unwrap().indices(), &[2, 7]);
        assert_eq!(select_uniform(5, 5).unwrap().indices(), &[0, 1, 2, 3, 4]);
        assert_eq!(select_uniform(510, anchors_per_chunk(510, 5)).unwrap().len(), 102);
        assert!(matches!(select_uniform(3, 4), Err(Error::Config(_))));
    }

    #[test]
    fn floor_rule_examples() {
        assert_eq!(anchors_per_chunk(100, 15), 6);
        assert_eq!(anchors_per_chunk(510, 51), 10);
        assert_eq!(anchors_per_chunk(3, 8), 1);
    }

    #[test]
    fn random_examples() {
        assert_eq!(select_random(6, 6, 99).unwrap().indices(), &[0, 1, 2, 3, 4, 5]);
        assert_eq!(select_random(40, 7, 5).unwrap(), select_random(40, 7, 5).unwrap());
    }

    #[test]
    fn random_inclusion_is_uniform() {
        let (len, n, trials) = (20usize, 5usize, 10_000usize);
        let mut hits = vec![0usize; len];
        for seed in 0..trials as u64 {
            for &i in select_random(len, n, seed).unwrap().indices() {
                hits[i] += 1;
            }
        }
        let p = n as f64 / len as f64;
        let sigma = (trials as f64 * p * (1.0 - p)).sqrt();
        for &h in &hits {
            assert!((h as f64 - trials as f64 * p).abs() < 3.0 * sigma + 1.0, "{hits:?}");
        }
    }

    #[test]
    fn scored_examples() {
        let mut one_hot = vec![0.0; 6];
        one_hot[4] = 1.0;
        assert_eq!(select_scored(6, 2, &one_hot).unwrap().indices(), &[0, 4]);
        assert_eq!(select_scored(6, 3, &[0.5; 6]).unwrap().indices(), &[0, 1, 2]);
        assert!(matches!(select_scored(6, 2, &[0.0; 5]), Err(Error::Input(_))));
    }

    proptest::proptest! {
        #[test]
        fn scored_matches_full_sort(scores in proptest::collection::vec(-5i32..5, 1..40), k in 1usize..40) {
            let len = scores.len();
            let n = k.min(len);
            let s: Vec<f64> = scores.iter().map(|&v| v as f64).collect();
            let got = select_scored(len, n, &s).unwrap();
            // Oracle: rank by (-score, index) and keep the first n.
            let mut pairs: Vec<(i32, usize)> = scores.iter().enumerate().map(|(i, &v)| (-v, i)).collect();
            pairs.sort();
            let mut want: Vec<usize> = pairs[..n].iter().map(|&(_, i)| i).collect();
            want.sort();
            proptest::prop_assert_eq!(got.indices(), &want[..]);
        }

        #[test]
        fn uniform_is_sorted_and_sized(len in 1usize..600, r in 1usize..60) {
            let n = anchors_per_chunk(len, r).min(len);
            let a = select_uniform(len, n).unwrap();
            proptest::prop_assert_eq!(a.len(), n);
            proptest::prop_assert!(a.indices().windows(2).all(|w| w[0] < w[1]));
            proptest::prop_assert!(a.indices().iter().all(|&i| i < len));
        }
    }

    #[test]
    fn injection_is_local_and_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = Tensor::<f32>::randn(&[4, 3], 1.0, &mut rng);
        let e = Tensor::<f32>::new(vec![3], vec![0.5, -1.0, 2.0]).unwrap();
        let a = AnchorSet::new(vec![0], 4).unwrap();
        let out = inject_anchor_embedding(&base, &a, &e).unwrap();
        for j in 0..3 {
            assert_eq!(out.row(0)[j], base.row(0)[j] + e.data()[j]);
        }
        for i in 1..4 {
            assert_eq!(out.row(i), base.row(i));
        }
        let zero = Tensor::<f32>::zeros(&[3]);
        assert!(inject_anchor_embedding(&base, &a, &zero).unwrap().bitwise_eq(&base));
        let bad = AnchorSet::new(vec![4], 5).unwrap();
        assert!(matches!(
            inject_anchor_embedding(&base, &bad, &e),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn anchor_gradient_sums_anchor_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let base = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[5, 3], 1.0, &mut rng);
        let mut tape = Tape::new();
        let b = tape.constant(base);
        let e = tape.param(Tensor::zeros(&[3]));
        let wv = tape.constant(w.clone());
        let out = tape.add_to_rows(b, e, &[1, 3]).unwrap();
        let prod = tape.mul(out, wv).unwrap();
        let loss = tape.sum(prod);
        let g = tape.backward(loss).unwrap();
        for j in 0..3 {
            let want = w.row(1)[j] + w.row(3)[j];
            assert!((g.get(e).unwrap().data()[j] - want).abs() < 1e-12);
        }
    }

    fn setup(method: Method, ratio: usize, chunk: usize) -> (ModelConfig, ModelParams<f32>, CompressorParams<f32>, CompressionConfig) {
        let vocab = Vocab::synthetic();
        let cfg = ModelConfig::small(2, 2, 16, 32, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut base = ModelParams::init(&cfg, &mut rng).unwrap();
        base.frozen = true;
        let ccfg = CompressionConfig::new(ratio, chunk);
        let comp = CompressorParams::init(method, &cfg, &base, &LoraSpec::default(), &ccfg, &mut rng).unwrap();
        (cfg, base, comp, ccfg)
    }

    #[test]
    fn slot_count_and_positions() {
        let (cfg, base, comp, ccfg) = setup(Method::Sac, 15, 100);
        let tokens: Vec<usize> = (0..100).map(|i| 5 + i % 40).collect();
        let r = compress_context(&tokens, &ccfg, &comp, &cfg, &base).unwrap();
        assert_eq!(r.kv.slots(), 6);
        assert_eq!(r.kv.positions, select_uniform(100, 6).unwrap().indices());
    }

    #[test]
    fn chunking_matches_manual_concat() {
        let (cfg, base, mut comp, ccfg) = setup(Method::Sac, 4, 8);
        comp.anchor_embedding = Tensor::full(&[16], 0.1);
        let tokens: Vec<usize> = (0..16).map(|i| 5 + (i * 7) % 30).collect();
        let whole = compress_context(&tokens, &ccfg, &comp, &cfg, &base).unwrap();
        let a = compress_chunk(&tokens[..8], 0, &ccfg, &comp, &cfg, &base).unwrap();
        let b = compress_chunk(&tokens[8..], 8, &ccfg, &comp, &cfg, &base).unwrap();
        let manual = KvCache::concat_kv(&a.kv, &b.kv).unwrap();
        assert!(whole.kv.bitwise_eq(&manual));
        assert_eq!(whole.kv.positions, vec![2, 6, 10, 14]);
        assert_eq!(whole.chunk_boundaries, vec![0, 8]);
    }

    #[test]
    fn partial_chunk_uses_minimum_rule() {
        let (cfg, base, comp, ccfg) = setup(Method::Sac, 8, 8);
        let tokens: Vec<usize> = (0..11).map(|i| 5 + i).collect();
        let r = compress_context(&tokens, &ccfg, &comp, &cfg, &base).unwrap();
        assert_eq!(r.kv.slots(), 2);
        assert_eq!(r.kv.positions, vec![4, 9]);
    }

    #[test]
    fn zero_ratio_is_rejected() {
        let (cfg, base, comp, mut ccfg) = setup(Method::Sac, 4, 8);
        ccfg.ratio = 0;
        assert!(matches!(
            compress_context(&[5, 6], &ccfg, &comp, &cfg, &base),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.tag().parse::<Method>().unwrap(), m);
        }
        assert!("gist".parse::<Method>().is_err());
    }
}
