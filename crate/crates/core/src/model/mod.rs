//! Decoder-only transformer with rotary positions, configurable masks,
//! LoRA adapters, and KV-cache extraction and injection.

mod config;
mod forward;
mod kv;
mod mask;
mod params;

pub use config::ModelConfig;
pub use forward::{embed, forward, Forward, Input, Pass};
pub use kv::{KvCache, LayerKv, TapeKv};
pub use mask::AttentionMask;
pub use params::{BoundLayer, BoundLora, BoundModel, LayerParams, LoraAdapter, LoraPair, ModelParams, Proj};

use crate::autograd::{RopeTables, Tape};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Rotary embedding on a head-major `[heads, t, d_head]` tensor.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, positions: &[usize], base: f64) -> Result<Tensor<T>> {
    let shape = x.shape();
    if shape.len() != 3 || shape[1] != positions.len() {
        return Err(Error::Dimension(format!(
            "rope_apply on {shape:?} with {} positions",
            positions.len()
        )));
    }
    let (h, t, dh) = (shape[0], shape[1], shape[2]);
    let tables = std::rc::Rc::new(RopeTables::<T>::new(positions, dh, base)?);
    // [heads, t, dh] -> [t, heads*dh], rotate, and back.
    let mut flat = vec![T::zero(); h * t * dh];
    for hi in 0..h {
        for i in 0..t {
            flat[i * h * dh + hi * dh..i * h * dh + (hi + 1) * dh]
                .copy_from_slice(&x.data()[(hi * t + i) * dh..(hi * t + i + 1) * dh]);
        }
    }
    let mut tape = Tape::new();
    let v = tape.constant(Tensor::new(vec![t, h * dh], flat)?);
    let r = tape.rope(v, tables, h)?;
    let rotated = tape.value(r);
    let mut out = vec![T::zero(); h * t * dh];
    for hi in 0..h {
        for i in 0..t {
            out[(hi * t + i) * dh..(hi * t + i + 1) * dh]
                .copy_from_slice(&rotated.row(i)[hi * dh..(hi + 1) * dh]);
        }
    }
    Tensor::new(vec![h, t, dh], out)
}

/// Gradient-free forward over tokens with an optional cached prefix.
pub fn run<T: Scalar>(
    cfg: &ModelConfig,
    params: &ModelParams<T>,
    lora: Option<&LoraAdapter<T>>,
    tokens: &[usize],
    positions: &[usize],
    mask: &AttentionMask,
    prefix: Option<&KvCache<T>>,
) -> Result<(Tensor<T>, KvCache<T>)> {
    let mut tape = Tape::new();
    let mut frozen = params.clone();
    frozen.frozen = true;
    let model = frozen.bind(&mut tape);
    let lora = lora.map(|l| l.bind(&mut tape, false));
    let prefix = prefix.map(|p| p.bind(&mut tape));
    let out = forward(
        &mut tape,
        cfg,
        &model,
        lora.as_ref(),
        &Pass {
            input: Input::Tokens(tokens),
            positions,
            mask,
            prefix: prefix.as_ref(),
            logits: true,
        },
    )?;
    let logits = tape.value(out.logits.expect("requested")).clone();
    Ok((logits, KvCache::from_tape(&tape, &out.kv, cfg.n_heads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny() -> (ModelConfig, ModelParams<f32>) {
        let cfg = ModelConfig::small(2, 2, 16, 32, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let p = ModelParams::init(&cfg, &mut rng).unwrap();
        (cfg, p)
    }

    fn pos(t: usize) -> Vec<usize> {
        (0..t).collect()
    }

    #[test]
    fn rope_position_zero_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::randn(&[2, 3, 8], 1.0, &mut rng);
        assert_eq!(rope_apply(&x, &[0, 0, 0], 10000.0).unwrap(), x);
    }

    #[test]
    fn rope_preserves_pair_norms() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::<f64>::randn(&[1, 4, 8], 1.0, &mut rng);
        let y = rope_apply(&x, &[0, 3, 17, 250], 10000.0).unwrap();
        for (a, b) in x.data().chunks(2).zip(y.data().chunks(2)) {
            let na = (a[0] * a[0] + a[1] * a[1]).sqrt();
            let nb = (b[0] * b[0] + b[1] * b[1]).sqrt();
            assert!((na - nb).abs() < 1e-6);
        }
    }

    #[test]
    fn rope_odd_width_rejected() {
        let x = Tensor::<f64>::zeros(&[1, 2, 3]);
        assert!(matches!(rope_apply(&x, &[0, 1], 10000.0), Err(Error::Config(_))));
    }

    #[test]
    fn rope_dot_depends_on_offset_only() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = Tensor::<f64>::randn(&[1, 1, 16], 1.0, &mut rng);
        let k = Tensor::<f64>::randn(&[1, 1, 16], 1.0, &mut rng);
        let dot_at = |p: usize, r: usize| {
            let a = rope_apply(&q, &[p], 10000.0).unwrap();
            let b = rope_apply(&k, &[r], 10000.0).unwrap();
            a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum::<f64>()
        };
        for (p, r) in [(5, 2), (40, 37), (103, 100)] {
            let reference = dot_at(3, 0);
            let d = dot_at(p, r);
            assert!((d - reference).abs() / reference.abs().max(1e-12) < 1e-5);
        }
    }

    #[test]
    fn single_token_attention_is_value_projection() {
        let (cfg, p) = tiny();
        let mut tape = Tape::<f32>::new();
        let model = p.bind(&mut tape);
        let out = forward(
            &mut tape,
            &cfg,
            &model,
            None,
            &Pass {
                input: Input::Tokens(&[3]),
                positions: &[0],
                mask: &AttentionMask::Bidirectional,
                prefix: None,
                logits: false,
            },
        )
        .unwrap();
        let (_, v) = out.kv.layers[0];
        assert!(tape.value(out.attention[0]).bitwise_eq(tape.value(v)));
    }

    #[test]
    fn causal_invariance_is_bitwise() {
        let (cfg, p) = tiny();
        let mask = AttentionMask::Causal;
        let (a, _) = run(&cfg, &p, None, &[1, 2, 3, 4], &pos(4), &mask, None).unwrap();
        let (b, _) = run(&cfg, &p, None, &[1, 2, 3, 9], &pos(4), &mask, None).unwrap();
        for i in 0..3 {
            let same = a.row(i).iter().zip(b.row(i)).all(|(x, y)| x.to_bits() == y.to_bits());
            assert!(same, "row {i} changed");
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn bidirectional_sees_the_future() {
        let (cfg, p) = tiny();
        let mask = AttentionMask::Bidirectional;
        let (a, _) = run(&cfg, &p, None, &[1, 2, 3, 4], &pos(4), &mask, None).unwrap();
        let (b, _) = run(&cfg, &p, None, &[1, 2, 3, 9], &pos(4), &mask, None).unwrap();
        assert_ne!(a.row(0), b.row(0));
    }

    #[test]
    fn prefix_equivalence() {
        let (cfg, p) = tiny();
        let mask = AttentionMask::Causal;
        let tokens = [5, 1, 7, 7, 2, 19, 0];
        let (full, _) = run(&cfg, &p, None, &tokens, &pos(7), &mask, None).unwrap();
        let (_, kv) = run(&cfg, &p, None, &tokens[..4], &pos(4), &mask, None).unwrap();
        let (tail, _) = run(&cfg, &p, None, &tokens[4..], &[4, 5, 6], &mask, Some(&kv)).unwrap();
        for i in 0..3 {
            for (x, y) in full.row(4 + i).iter().zip(tail.row(i)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn sliced_prefix_changes_logits() {
        let (cfg, p) = tiny();
        let mask = AttentionMask::Causal;
        let (_, kv) = run(&cfg, &p, None, &[3, 4, 5, 6, 7, 8], &pos(6), &mask, None).unwrap();
        let sliced = kv.extract_kv(&[1, 4]).unwrap();
        let (a, _) = run(&cfg, &p, None, &[9], &[6], &mask, Some(&kv)).unwrap();
        let (b, _) = run(&cfg, &p, None, &[9], &[6], &mask, Some(&sliced)).unwrap();
        assert!(a.max_abs_diff(&b) > 0.0);
    }

    #[test]
    fn zero_lora_is_bitwise_identity() {
        let (cfg, p) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let lora = LoraAdapter::init(&cfg, 4, 8.0, &Proj::ALL, &mut rng).unwrap();
        let mask = AttentionMask::Bidirectional;
        let tokens = [1, 2, 3, 4, 5];
        let (a, ka) = run(&cfg, &p, None, &tokens, &pos(5), &mask, None).unwrap();
        let (b, kb) = run(&cfg, &p, Some(&lora), &tokens, &pos(5), &mask, None).unwrap();
        assert!(a.bitwise_eq(&b));
        assert!(ka.bitwise_eq(&kb));
    }

    #[test]
    fn embeddings_input_matches_tokens() {
        let (cfg, p) = tiny();
        let tokens = [4, 4, 11];
        let mut tape = Tape::<f32>::new();
        let model = p.bind(&mut tape);
        let e = embed(&mut tape, &model, &tokens).unwrap();
        assert_eq!(tape.value(e).row(0), tape.value(e).row(1));
        assert_eq!(tape.value(e).row(0), p.token_embedding.row(4));
        let mask = AttentionMask::Causal;
        let via_emb = forward(
            &mut tape,
            &cfg,
            &model,
            None,
            &Pass {
                input: Input::Embeddings(e),
                positions: &pos(3),
                mask: &mask,
                prefix: None,
                logits: true,
            },
        )
        .unwrap();
        let (direct, _) = run(&cfg, &p, None, &tokens, &pos(3), &mask, None).unwrap();
        assert!(tape.value(via_emb.logits.unwrap()).bitwise_eq(&direct));
    }

    #[test]
    fn out_of_vocab_token_is_an_error() {
        let (cfg, p) = tiny();
        let err = run(&cfg, &p, None, &[20], &[0], &AttentionMask::Causal, None).unwrap_err();
        assert!(matches!(err, Error::Vocab { id: 20, vocab: 20 }));
    }

    #[test]
    fn zero_head_gives_uniform_logits() {
        let (cfg, mut p) = tiny();
        p.head = Tensor::zeros(p.head.shape());
        let mut tape = Tape::<f32>::new();
        let model = p.bind(&mut tape);
        let out = forward(
            &mut tape,
            &cfg,
            &model,
            None,
            &Pass {
                input: Input::Tokens(&[1, 2, 3]),
                positions: &pos(3),
                mask: &AttentionMask::Causal,
                prefix: None,
                logits: true,
            },
        )
        .unwrap();
        let loss = tape
            .cross_entropy(out.logits.unwrap(), &[2, 3, 4], &[true; 3])
            .unwrap();
        assert!((tape.value(loss).item() - (20f32).ln()).abs() < 1e-6);
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let (cfg, mut p) = tiny();
        p.frozen = true;
        let mut tape = Tape::<f32>::new();
        let model = p.bind(&mut tape);
        let e = embed(&mut tape, &model, &[1, 2]).unwrap();
        let bias = tape.param(Tensor::zeros(&[16]));
        let e = tape.add_to_rows(e, bias, &[0]).unwrap();
        let out = forward(
            &mut tape,
            &cfg,
            &model,
            None,
            &Pass {
                input: Input::Embeddings(e),
                positions: &pos(2),
                mask: &AttentionMask::Causal,
                prefix: None,
                logits: true,
            },
        )
        .unwrap();
        let loss = tape
            .cross_entropy(out.logits.unwrap(), &[2, 3], &[true; 2])
            .unwrap();
        let g = tape.backward(loss).unwrap();
        for v in model.vars() {
            assert!(g.get(v).is_none());
        }
        assert!(g.get(bias).unwrap().sum_sq() > 0.0);
    }

    /// Whole-model LM loss against central differences, every weight.
    #[test]
    fn whole_model_gradients() {
        let cfg = ModelConfig::small(2, 2, 8, 12, 11);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ModelParams::<f64>::init(&cfg, &mut rng).unwrap();
        let mut lora = LoraAdapter::<f64>::init(&cfg, 2, 4.0, &Proj::ALL, &mut rng).unwrap();
        for (_, b) in lora.named_mut().into_iter().filter(|(n, _)| n.ends_with(".b")) {
            *b = Tensor::randn(b.shape(), 0.3, &mut rng);
        }
        let mut params: Vec<(String, Tensor<f64>)> =
            p.named().into_iter().map(|(n, t)| (n, t.clone())).collect();
        let n_base = params.len();
        params.extend(lora.named().into_iter().map(|(n, t)| (n, t.clone())));
        let tokens = [1usize, 4, 9, 2, 2];
        let report = gradient_check(
            |tape, vars| {
                let model = BoundModel::from_vars(&vars[..n_base], cfg.n_layers)?;
                let bl = BoundLora::from_vars(&vars[n_base..], &lora.targets, cfg.n_layers, 2.0)?;
                let out = forward(
                    tape,
                    &cfg,
                    &model,
                    Some(&bl),
                    &Pass {
                        input: Input::Tokens(&tokens[..4]),
                        positions: &[0, 1, 2, 3],
                        mask: &AttentionMask::Causal,
                        prefix: None,
                        logits: true,
                    },
                )?;
                tape.cross_entropy(out.logits.unwrap(), &tokens[1..], &[true; 4])
            },
            &params,
            1e-4,
            0,
            0,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-3, "{report:?}");
    }
}
