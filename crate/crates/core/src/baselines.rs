//! Appended compression-token baselines.
//!
//! The encoder reads `[context ++ m learned tokens]` causally. The 500x
//! variant keeps per-layer KV at the appended slots with positions after
//! the context, the EPL variant does the same with positions spread over the
//! context, and the ICAE variant hands the last-layer hidden states to the
//! decoder as soft input embeddings.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::compressor::{
    self, select_uniform, BoundCompressor, ChunkOut, Compressed, CompressionConfig,
    CompressorParams, ContinuationStart, Method, SoftTokens,
};
use crate::error::{Error, Result};
use crate::model::{embed, forward, AttentionMask, BoundModel, Input, ModelConfig, ModelParams, Pass};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// `t..t+m-1` after a chunk of `t` tokens.
    Appended,
    /// The indices `select_uniform(t, m)` would pick.
    Uniform,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Carrier {
    LastLayer,
    PerLayerKv,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CompressionTokenBank<T> {
    /// `[m, d_model]`
    pub embeddings: Tensor<T>,
    pub position_mode: PositionMode,
    pub carrier: Carrier,
}

pub fn layout(method: Method) -> Result<(PositionMode, Carrier)> {
    match method {
        Method::Icae => Ok((PositionMode::Appended, Carrier::LastLayer)),
        Method::X500 => Ok((PositionMode::Appended, Carrier::PerLayerKv)),
        Method::Epl => Ok((PositionMode::Uniform, Carrier::PerLayerKv)),
        Method::Sac => Err(Error::Contract("SAC has no compression-token bank".into())),
    }
}

impl<T: Scalar> CompressionTokenBank<T> {
    /// `m` rows of the mean token embedding plus N(0, 0.02) noise.
    pub fn init<R: Rng + ?Sized>(
        method: Method,
        m: usize,
        base: &ModelParams<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let (position_mode, carrier) = layout(method)?;
        let table = &base.token_embedding;
        let (vocab, d) = (table.rows(), table.cols());
        let mut mean = vec![0.0f64; d];
        for i in 0..vocab {
            for (acc, &x) in mean.iter_mut().zip(table.row(i)) {
                *acc += x.as_f64();
            }
        }
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut data = Vec::with_capacity(m * d);
        for _ in 0..m {
            for &mu in &mean {
                data.push(T::lit(mu / vocab as f64 + normal.sample(rng)));
            }
        }
        Ok(Self {
            embeddings: Tensor::new(vec![m, d], data)?,
            position_mode,
            carrier,
        })
    }

    pub fn count(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn cast<U: Scalar>(&self) -> CompressionTokenBank<U> {
        CompressionTokenBank {
            embeddings: self.embeddings.cast(),
            position_mode: self.position_mode,
            carrier: self.carrier,
        }
    }
}

/// Positions of `m` compression tokens appended to a chunk of `t` tokens
/// that starts at `offset`.
pub fn token_positions(mode: PositionMode, offset: usize, t: usize, m: usize) -> Result<Vec<usize>> {
    match mode {
        PositionMode::Appended => Ok((offset + t..offset + t + m).collect()),
        PositionMode::Uniform => Ok(select_uniform(t, m)?
            .indices()
            .iter()
            .map(|&i| offset + i)
            .collect()),
    }
}

pub(crate) fn encode_appended_chunk<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    comp: &BoundCompressor<T>,
    tokens: &[usize],
    offset: usize,
    m: usize,
) -> Result<ChunkOut> {
    let (mode, carrier) = layout(comp.method)?;
    let bank = comp
        .bank
        .ok_or_else(|| Error::Contract("baseline compressor without a bank".into()))?;
    let available = tape.value(bank).rows();
    if m > available {
        return Err(Error::Config(format!(
            "chunk needs {m} compression tokens, the bank holds {available}"
        )));
    }
    let t = tokens.len();
    let ctx = embed(tape, base, tokens)?;
    let rows: Vec<usize> = (0..m).collect();
    let slots = tape.select_rows(bank, &rows)?;
    let input = tape.concat_rows(&[ctx, slots])?;
    let mut positions: Vec<usize> = (offset..offset + t).collect();
    positions.extend(token_positions(mode, offset, t, m)?);
    let mask = AttentionMask::index_causal(t + m);
    let out = forward(
        tape,
        cfg,
        base,
        Some(&comp.lora),
        &Pass {
            input: Input::Embeddings(input),
            positions: &positions,
            mask: &mask,
            prefix: None,
            logits: false,
        },
    )?;
    let slot_rows: Vec<usize> = (t..t + m).collect();
    let attention = *out.attention.last().expect("at least one layer");
    match carrier {
        Carrier::PerLayerKv => {
            let kv = out.kv.select(tape, &slot_rows)?;
            Ok(ChunkOut::from_kv(kv, attention, slot_rows))
        }
        Carrier::LastLayer => {
            let soft = tape.select_rows(out.hidden, &slot_rows)?;
            Ok(ChunkOut::from_soft(soft, attention, slot_rows))
        }
    }
}

/// Gradient-free baseline compression of one chunk of at most `L` tokens.
pub fn compress_appended<T: Scalar>(
    tokens: &[usize],
    ccfg: &CompressionConfig,
    comp: &CompressorParams<T>,
    cfg: &ModelConfig,
    base: &ModelParams<T>,
) -> Result<Compressed<T>> {
    if !comp.method.is_baseline() {
        return Err(Error::Contract("compress_appended needs a baseline method".into()));
    }
    if tokens.len() > ccfg.chunk_len {
        return Err(Error::Input(format!(
            "{} tokens exceed the chunk length {}",
            tokens.len(),
            ccfg.chunk_len
        )));
    }
    compressor::compress(cfg, base, comp, tokens, ccfg)
}

/// Decoder logits over `[soft ++ embed(continuation)]`, continuation rows only.
pub fn decode_with_soft_tokens<T: Scalar>(
    soft: &Tensor<T>,
    continuation: &[usize],
    cfg: &ModelConfig,
    base: &ModelParams<T>,
) -> Result<Tensor<T>> {
    if soft.shape().len() != 2 || soft.cols() != cfg.d_model {
        return Err(Error::Dimension(format!(
            "soft tokens {:?} for width {}",
            soft.shape(),
            cfg.d_model
        )));
    }
    let mut tape = Tape::new();
    let bm = compressor::bind_frozen(base, &mut tape);
    let repr = Compressed::Soft(SoftTokens {
        embeddings: soft.clone(),
        source_len: 0,
        ratio: 1,
        chunk_boundaries: Vec::new(),
    })
    .bind(&mut tape);
    let cont = embed(&mut tape, &bm, continuation)?;
    let out = compressor::decode(&mut tape, cfg, &bm, &repr, cont, ContinuationStart::SourceLen)?;
    Ok(tape.value(out.logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{anchors_per_chunk, compress_context, LoraSpec};
    use crate::data::Vocab;
    use crate::model::run;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(method: Method, ratio: usize, chunk: usize) -> (ModelConfig, ModelParams<f32>, CompressorParams<f32>, CompressionConfig) {
        let vocab = Vocab::synthetic();
        let cfg = ModelConfig::small(2, 2, 16, 32, vocab.len());
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut base = ModelParams::init(&cfg, &mut rng).unwrap();
        base.frozen = true;
        let ccfg = CompressionConfig::new(ratio, chunk);
        let comp = CompressorParams::init(method, &cfg, &base, &LoraSpec::default(), &ccfg, &mut rng).unwrap();
        (cfg, base, comp, ccfg)
    }

    #[test]
    fn exhaustive_uniform_positions() {
        assert_eq!(
            token_positions(PositionMode::Uniform, 0, 6, 6).unwrap(),
            vec![0, 1, 2, 3, 4, 5]
        );
    }

    #[test]
    fn appended_positions_follow_context() {
        let (cfg, base, comp, ccfg) = setup(Method::X500, 4, 8);
        let tokens: Vec<usize> = (10..18).collect();
        let Compressed::Kv(r) = compress_appended(&tokens, &ccfg, &comp, &cfg, &base).unwrap() else {
            panic!("500x carries KV");
        };
        assert_eq!(r.kv.positions, vec![8, 9]);
        assert!(r.kv.layers.iter().all(|l| l.k.is_finite() && l.v.is_finite()));
    }

    #[test]
    fn geometry_and_budget_match_sac() {
        for ratio in [1, 3, 4, 8] {
            let (cfg, base, sac, ccfg) = setup(Method::Sac, ratio, 16);
            let tokens: Vec<usize> = (0..16).map(|i| 6 + i).collect();
            let s = compress_context(&tokens, &ccfg, &sac, &cfg, &base).unwrap();
            let (_, _, x500, _) = setup(Method::X500, ratio, 16);
            let (_, _, epl, _) = setup(Method::Epl, ratio, 16);
            let (_, _, icae, _) = setup(Method::Icae, ratio, 16);
            for comp in [&x500, &epl] {
                let Compressed::Kv(r) = compress_appended(&tokens, &ccfg, comp, &cfg, &base).unwrap() else {
                    panic!("KV carrier");
                };
                assert_eq!(r.kv.slots(), s.kv.slots());
                assert!(r.kv.same_geometry(&s.kv));
                if comp.method == Method::Epl {
                    assert_eq!(r.kv.positions, s.kv.positions);
                }
            }
            let soft = compress_appended(&tokens, &ccfg, &icae, &cfg, &base).unwrap();
            assert_eq!(soft.slots(), anchors_per_chunk(16, ratio));
        }
    }

    #[test]
    fn empty_soft_prefix_is_plain_decoding() {
        let (cfg, base, _, _) = setup(Method::Icae, 4, 8);
        let tokens = [7, 8, 9];
        let soft = Tensor::<f32>::zeros(&[0, cfg.d_model]);
        let a = decode_with_soft_tokens(&soft, &tokens, &cfg, &base).unwrap();
        let (b, _) = run(&cfg, &base, None, &tokens, &[0, 1, 2], &AttentionMask::Causal, None).unwrap();
        assert!(a.bitwise_eq(&b));
    }

    #[test]
    fn embedded_text_as_soft_tokens_matches_plain_decoding() {
        let (cfg, base, _, _) = setup(Method::Icae, 4, 8);
        let text = [11, 12, 13, 14, 15];
        let soft = base.token_embedding.select_rows(&text[..3]);
        let logits = decode_with_soft_tokens(&soft, &text[3..], &cfg, &base).unwrap();
        let (full, _) = run(&cfg, &base, None, &text, &[0, 1, 2, 3, 4], &AttentionMask::Causal, None).unwrap();
        for i in 0..2 {
            for (x, y) in logits.row(i).iter().zip(full.row(3 + i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn bank_starts_near_mean_embedding() {
        let (_, base, comp, _) = setup(Method::Epl, 4, 16);
        let bank = comp.bank.unwrap();
        assert_eq!(bank.count(), 4);
        let vocab = base.token_embedding.rows() as f64;
        for j in 0..base.token_embedding.cols() {
            let mean: f64 = (0..base.token_embedding.rows())
                .map(|i| base.token_embedding.row(i)[j] as f64)
                .sum::<f64>()
                / vocab;
            assert!((bank.embeddings.row(0)[j] as f64 - mean).abs() < 0.1);
        }
    }
}
