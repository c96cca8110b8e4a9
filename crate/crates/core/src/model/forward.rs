use std::rc::Rc;

use super::config::ModelConfig;
use super::kv::TapeKv;
use super::mask::AttentionMask;
use super::params::{BoundLora, BoundModel, Proj};
use crate::autograd::{RopeTables, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// What the first block consumes.
#[derive(Clone, Copy, Debug)]
pub enum Input<'a> {
    Tokens(&'a [usize]),
    /// `[t, d_model]` node, e.g. anchor-augmented or soft embeddings.
    Embeddings(Var),
}

#[derive(Clone, Debug)]
pub struct Pass<'a> {
    pub input: Input<'a>,
    pub positions: &'a [usize],
    pub mask: &'a AttentionMask,
    pub prefix: Option<&'a TapeKv>,
    pub logits: bool,
}

#[derive(Clone, Debug)]
pub struct Forward {
    /// `[t, vocab]`, when requested.
    pub logits: Option<Var>,
    /// Residual stream after the last block, before the final norm.
    pub hidden: Var,
    /// K/V for the current slots only.
    pub kv: TapeKv,
    /// Per-layer attention nodes (probabilities readable from the tape).
    pub attention: Vec<Var>,
}

pub fn embed<T: Scalar>(tape: &mut Tape<T>, model: &BoundModel, tokens: &[usize]) -> Result<Var> {
    tape.gather(model.token_embedding, tokens)
}

fn linear<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    w: Var,
    lora: Option<(Var, Var)>,
    scale: T,
) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match lora {
        None => Ok(y),
        Some((a, b)) => {
            let xa = tape.matmul(x, a)?;
            let xab = tape.matmul(xa, b)?;
            let delta = tape.scale(xab, scale);
            tape.add(y, delta)
        }
    }
}

pub fn forward<T: Scalar>(
    tape: &mut Tape<T>,
    cfg: &ModelConfig,
    model: &BoundModel,
    lora: Option<&BoundLora<T>>,
    pass: &Pass<'_>,
) -> Result<Forward> {
    let t = pass.positions.len();
    if t == 0 {
        return Err(Error::Input("forward over zero positions".into()));
    }
    if let Some(&bad) = pass.positions.iter().find(|&&p| p >= cfg.max_positions) {
        return Err(Error::Index(format!(
            "position {bad} exceeds max_positions {}",
            cfg.max_positions
        )));
    }
    let mut x = match pass.input {
        Input::Tokens(tokens) => {
            if tokens.len() != t {
                return Err(Error::Dimension(format!(
                    "{} tokens with {t} positions",
                    tokens.len()
                )));
            }
            embed(tape, model, tokens)?
        }
        Input::Embeddings(e) => {
            let shape = tape.value(e).shape();
            if shape != [t, cfg.d_model] {
                return Err(Error::Dimension(format!(
                    "embeddings {shape:?} for {t} positions of width {}",
                    cfg.d_model
                )));
            }
            e
        }
    };
    let empty = TapeKv::default();
    let prefix = pass.prefix.unwrap_or(&empty);
    if !prefix.layers.is_empty() && prefix.layers.len() != cfg.n_layers {
        return Err(Error::Geometry(format!(
            "prefix has {} layers, model has {}",
            prefix.layers.len(),
            cfg.n_layers
        )));
    }
    let allowed = pass.mask.materialize(&prefix.positions, pass.positions)?;
    let tables = Rc::new(RopeTables::new(pass.positions, cfg.d_head, cfg.rope_base)?);
    let eps = T::lit(cfg.norm_eps);
    let scale = lora.map_or(T::zero(), |l| l.scale);
    let ad = |l: usize, p: Proj| lora.and_then(|b| b.get(l, p));

    let mut kv = TapeKv {
        layers: Vec::with_capacity(cfg.n_layers),
        positions: pass.positions.to_vec(),
    };
    let mut attention = Vec::with_capacity(cfg.n_layers);
    for (l, w) in model.layers.iter().enumerate() {
        let h = tape.rms_norm(x, w.attn_norm, eps)?;
        let q = linear(tape, h, w.proj[0], ad(l, Proj::Q), scale)?;
        let k = linear(tape, h, w.proj[1], ad(l, Proj::K), scale)?;
        let v = linear(tape, h, w.proj[2], ad(l, Proj::V), scale)?;
        let q = tape.rope(q, tables.clone(), cfg.n_heads)?;
        let k = tape.rope(k, tables.clone(), cfg.n_heads)?;
        kv.layers.push((k, v));
        let (keys, values) = match prefix.layers.get(l) {
            Some(&(pk, pv)) if prefix.slots() > 0 => {
                (tape.concat_rows(&[pk, k])?, tape.concat_rows(&[pv, v])?)
            }
            _ => (k, v),
        };
        let a = tape.attention(q, keys, values, cfg.n_heads, &allowed)?;
        attention.push(a);
        let o = linear(tape, a, w.proj[3], ad(l, Proj::O), scale)?;
        x = tape.add(x, o)?;
        let h = tape.rms_norm(x, w.mlp_norm, eps)?;
        let g = linear(tape, h, w.proj[4], ad(l, Proj::Gate), scale)?;
        let u = linear(tape, h, w.proj[5], ad(l, Proj::Up), scale)?;
        let g = tape.silu(g);
        let m = tape.mul(g, u)?;
        let d = linear(tape, m, w.proj[6], ad(l, Proj::Down), scale)?;
        x = tape.add(x, d)?;
    }
    let logits = if pass.logits {
        let n = tape.rms_norm(x, model.final_norm, eps)?;
        Some(tape.matmul(n, model.head)?)
    } else {
        None
    };
    Ok(Forward {
        logits,
        hidden: x,
        kv,
        attention,
    })
}
