//! Teacher-forced objectives over a compressed prefix.

use crate::autograd::{Tape, Var};
use crate::compressor::{decode, encode, BoundCompressor, CompressionConfig, ContinuationStart, TapeRepr};
use crate::data::{TrainSample, EOS, SEP};
use crate::error::{Error, Result};
use crate::model::{embed, forward, AttentionMask, BoundModel, Input, ModelConfig, Pass};
use crate::tensor::Scalar;

/// The decoder's own causal KV over `tokens`, i.e. no compression at all.
pub fn full_context<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    tokens: &[usize],
) -> Result<TapeRepr> {
    if tokens.is_empty() {
        return Ok(TapeRepr::Kv {
            kv: Default::default(),
            source_len: 0,
        });
    }
    let positions: Vec<usize> = (0..tokens.len()).collect();
    let out = forward(
        tape,
        cfg,
        base,
        None,
        &Pass {
            input: Input::Tokens(tokens),
            positions: &positions,
            mask: &AttentionMask::Causal,
            prefix: None,
            logits: false,
        },
    )?;
    Ok(TapeRepr::Kv {
        kv: out.kv,
        source_len: tokens.len(),
    })
}

/// Reconstruction of `c` after the prefix and the trigger row.
pub fn loss_ae<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    repr: &TapeRepr,
    trigger: Var,
    c: &[usize],
    start: ContinuationStart,
) -> Result<Var> {
    if c.is_empty() {
        return Err(Error::Input("autoencoding target is empty".into()));
    }
    let input = if c.len() > 1 {
        let e = embed(tape, base, &c[..c.len() - 1])?;
        tape.concat_rows(&[trigger, e])?
    } else {
        trigger
    };
    let out = decode(tape, cfg, base, repr, input, start)?;
    tape.cross_entropy(out.logits, c, &vec![true; c.len()])
}

/// Next-token loss over `future`, whose first token is read, not predicted.
pub fn loss_lm<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    repr: &TapeRepr,
    future: &[usize],
    start: ContinuationStart,
) -> Result<Var> {
    if future.len() < 2 {
        return Err(Error::Input(format!(
            "LM continuation needs at least 2 tokens, got {}",
            future.len()
        )));
    }
    let n = future.len() - 1;
    let input = embed(tape, base, &future[..n])?;
    let out = decode(tape, cfg, base, repr, input, start)?;
    tape.cross_entropy(out.logits, &future[1..], &vec![true; n])
}

/// `q ++ [SEP] ++ a ++ [EOS]`, scored on `a` and the closing `[EOS]` only.
pub fn qa_sequence(q: &[usize], a: &[usize]) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let mut seq = Vec::with_capacity(q.len() + a.len() + 2);
    seq.extend_from_slice(q);
    seq.push(SEP);
    seq.extend_from_slice(a);
    seq.push(EOS);
    let n = seq.len() - 1;
    let input = seq[..n].to_vec();
    let targets = seq[1..].to_vec();
    let included = (0..n).map(|i| i >= q.len()).collect();
    (input, targets, included)
}

pub fn loss_qa<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    repr: &TapeRepr,
    q: &[usize],
    a: &[usize],
    start: ContinuationStart,
) -> Result<Var> {
    let (input, targets, included) = qa_sequence(q, a);
    let e = embed(tape, base, &input)?;
    let out = decode(tape, cfg, base, repr, e, start)?;
    tape.cross_entropy(out.logits, &targets, &included)
}

/// Compresses the sample's context with `comp` (or keeps it whole when
/// `None`) and applies the matching objective.
pub fn sample_loss<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    base: &BoundModel,
    comp: Option<&BoundCompressor<T>>,
    sample: &TrainSample,
    ccfg: &CompressionConfig,
    start: ContinuationStart,
) -> Result<Var> {
    let c = match sample {
        TrainSample::Ae { c } | TrainSample::Lm { c, .. } | TrainSample::Qa { c, .. } => c,
    };
    let repr = match comp {
        Some(bc) => encode(tape, cfg, base, bc, c, ccfg)?.repr,
        None => full_context(tape, cfg, base, c)?,
    };
    match sample {
        TrainSample::Ae { c } => {
            let bc = comp.ok_or_else(|| {
                Error::Contract("autoencoding needs a compressor's trigger".into())
            })?;
            loss_ae(tape, cfg, base, &repr, bc.ae_trigger, c, start)
        }
        TrainSample::Lm { future, .. } => loss_lm(tape, cfg, base, &repr, future, start),
        TrainSample::Qa { q, a, .. } => loss_qa(tape, cfg, base, &repr, q, a, start),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{CompressorParams, EncoderMask, LoraSpec, Method};
    use crate::model::{ModelParams, Proj};
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn setup(method: Method) -> (ModelConfig, ModelParams<f64>, CompressorParams<f64>, CompressionConfig) {
        let cfg = ModelConfig::small(2, 2, 16, 24, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut base = ModelParams::init(&cfg, &mut rng).unwrap();
        base.frozen = true;
        let ccfg = CompressionConfig::new(2, 8);
        let spec = LoraSpec {
            rank: 2,
            alpha: 4.0,
            targets: Proj::ALL.to_vec(),
        };
        let comp = CompressorParams::init(method, &cfg, &base, &spec, &ccfg, &mut rng).unwrap();
        (cfg, base, comp, ccfg)
    }

    fn eval(
        cfg: &ModelConfig,
        base: &ModelParams<f64>,
        comp: Option<&CompressorParams<f64>>,
        sample: &TrainSample,
        ccfg: &CompressionConfig,
    ) -> f64 {
        let mut tape = Tape::new();
        let bm = base.bind(&mut tape);
        let bc = comp.map(|c| c.bind(&mut tape, true));
        let l = sample_loss(&mut tape, cfg, &bm, bc.as_ref(), sample, ccfg, Default::default()).unwrap();
        tape.value(l).item()
    }

    #[test]
    fn zero_head_gives_log_vocab() {
        let (cfg, mut base, comp, ccfg) = setup(Method::Sac);
        base.head = Tensor::zeros(&[cfg.d_model, cfg.vocab_size]);
        let want = (cfg.vocab_size as f64).ln();
        for s in [
            TrainSample::Ae { c: vec![5, 6, 7] },
            TrainSample::Lm { c: vec![5, 6], future: vec![7, 8, 9] },
            TrainSample::Qa { c: vec![5, 6], q: vec![7], a: vec![8] },
        ] {
            assert!((eval(&cfg, &base, Some(&comp), &s, &ccfg) - want).abs() < 1e-12);
        }
    }

    #[test]
    fn qa_sequence_masks_question() {
        let (input, targets, included) = qa_sequence(&[10, 11], &[12]);
        assert_eq!(input, vec![10, 11, SEP, 12]);
        assert_eq!(targets, vec![11, SEP, 12, EOS]);
        assert_eq!(included, vec![false, false, true, true]);
    }

    #[test]
    fn identity_setup_matches_full_context_lm() {
        let (cfg, base, mut comp, mut ccfg) = setup(Method::Sac);
        comp.lora.zero_deltas();
        ccfg.ratio = 1;
        ccfg.encoder_mask = EncoderMask::Causal;
        let s = TrainSample::Lm { c: vec![5, 6, 7, 8, 9, 10, 11, 12], future: vec![15, 16, 17] };
        let a = eval(&cfg, &base, Some(&comp), &s, &ccfg);
        let b = eval(&cfg, &base, None, &s, &ccfg);
        assert!((a - b).abs() < 1e-12, "{a} {b}");
    }

    #[test]
    fn full_context_equals_one_pass() {
        let (cfg, base, _, ccfg) = setup(Method::Sac);
        let s = TrainSample::Lm { c: vec![5, 6, 7], future: vec![8, 9, 10] };
        let via_prefix = eval(&cfg, &base, None, &s, &ccfg);
        let all = [5, 6, 7, 8, 9];
        let (logits, _) =
            crate::model::run(&cfg, &base, None, &all, &[0, 1, 2, 3, 4], &AttentionMask::Causal, None).unwrap();
        let mut tape = Tape::new();
        let l = tape.constant(logits);
        let ce = tape
            .cross_entropy(l, &[6, 7, 8, 9, 10], &[false, false, false, true, true])
            .unwrap();
        assert!((tape.value(ce).item() - via_prefix).abs() < 1e-12);
    }

    #[test]
    fn gradient_reaches_compressor_not_decoder() {
        let (cfg, base, comp, ccfg) = setup(Method::Sac);
        let mut tape = Tape::new();
        let bm = base.bind(&mut tape);
        let bc = comp.bind(&mut tape, true);
        let s = TrainSample::Qa { c: vec![5, 6, 7, 8], q: vec![9], a: vec![10] };
        let l = sample_loss(&mut tape, &cfg, &bm, Some(&bc), &s, &ccfg, Default::default()).unwrap();
        let g = tape.backward(l).unwrap();
        assert!(bm.vars().iter().all(|&v| g.get(v).is_none()));
        assert!(g.get(bc.anchor_embedding).unwrap().sum_sq() > 0.0);
        // B starts at zero, so only B sees a gradient on the first step.
        let (_, b) = bc.lora.get(0, Proj::Q).unwrap();
        assert!(g.get(b).unwrap().sum_sq() > 0.0);
        assert!(g.get(bc.ae_trigger).is_none());
    }

    #[test]
    fn short_targets_are_rejected() {
        let (cfg, base, comp, ccfg) = setup(Method::Sac);
        let mut tape = Tape::new();
        let bm = base.bind(&mut tape);
        let bc = comp.bind(&mut tape, true);
        let s = TrainSample::Lm { c: vec![5], future: vec![6] };
        assert!(sample_loss(&mut tape, &cfg, &bm, Some(&bc), &s, &ccfg, Default::default()).is_err());
        let s = TrainSample::Ae { c: vec![5] };
        assert!(sample_loss(&mut tape, &cfg, &bm, None, &s, &ccfg, Default::default()).is_err());
    }
}
