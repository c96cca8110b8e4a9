//! Base transformer weights, low-rank adapters, and their binding onto a tape.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// A projection inside a block that an adapter may wrap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Proj {
    pub const ALL: [Proj; 7] = [
        Proj::Q,
        Proj::K,
        Proj::V,
        Proj::O,
        Proj::Gate,
        Proj::Up,
        Proj::Down,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Proj::Q => "wq",
            Proj::K => "wk",
            Proj::V => "wv",
            Proj::O => "wo",
            Proj::Gate => "w_gate",
            Proj::Up => "w_up",
            Proj::Down => "w_down",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Proj::ALL
            .into_iter()
            .find(|p| p.name() == s || format!("{p:?}").eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown projection {s:?}")))
    }

    fn index(self) -> usize {
        self as usize
    }

    /// `(d_in, d_out)` for this projection.
    pub fn dims(self, cfg: &ModelConfig) -> (usize, usize) {
        match self {
            Proj::Q | Proj::K | Proj::V | Proj::O => (cfg.d_model, cfg.d_model),
            Proj::Gate | Proj::Up => (cfg.d_model, cfg.d_ff),
            Proj::Down => (cfg.d_ff, cfg.d_model),
        }
    }
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Tensor<T>,
    /// Indexed by [`Proj`].
    pub proj: [Tensor<T>; 7],
    pub mlp_norm: Tensor<T>,
}

impl<T: Scalar> LayerParams<T> {
    pub fn weight(&self, p: Proj) -> &Tensor<T> {
        &self.proj[p.index()]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams<T> {
    pub token_embedding: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub final_norm: Tensor<T>,
    pub head: Tensor<T>,
    /// Frozen weights are bound as constants and never receive gradient.
    pub frozen: bool,
}

impl<T: Scalar> ModelParams<T> {
    pub fn init<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.d_model;
        let resid = 1.0 / (2.0 * cfg.n_layers as f64).sqrt();
        let token_embedding = Tensor::randn(&[cfg.vocab_size, d], 1.0, rng);
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for _ in 0..cfg.n_layers {
            let proj = Proj::ALL.map(|p| {
                let (din, dout) = p.dims(cfg);
                let mut std = 1.0 / (din as f64).sqrt();
                if matches!(p, Proj::O | Proj::Down) {
                    std *= resid;
                }
                Tensor::randn(&[din, dout], std, rng)
            });
            layers.push(LayerParams {
                attn_norm: Tensor::ones(&[d]),
                proj,
                mlp_norm: Tensor::ones(&[d]),
            });
        }
        Ok(Self {
            token_embedding,
            layers,
            final_norm: Tensor::ones(&[d]),
            head: Tensor::randn(&[d, cfg.vocab_size], 1.0 / (d as f64).sqrt(), rng),
            frozen: false,
        })
    }

    /// Stable names in a fixed order, shared by checkpoints and the optimizer.
    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.token_embedding)];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &layer.attn_norm));
            for p in Proj::ALL {
                out.push((format!("layers.{l}.{p}"), &layer.proj[p.index()]));
            }
            out.push((format!("layers.{l}.mlp_norm"), &layer.mlp_norm));
        }
        out.push(("final_norm".to_string(), &self.final_norm));
        out.push(("head".to_string(), &self.head));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &mut self.token_embedding)];
        for (l, layer) in self.layers.iter_mut().enumerate() {
            out.push((format!("layers.{l}.attn_norm"), &mut layer.attn_norm));
            for (p, w) in Proj::ALL.iter().zip(layer.proj.iter_mut()) {
                out.push((format!("layers.{l}.{p}"), w));
            }
            out.push((format!("layers.{l}.mlp_norm"), &mut layer.mlp_norm));
        }
        out.push(("final_norm".to_string(), &mut self.final_norm));
        out.push(("head".to_string(), &mut self.head));
        out
    }

    pub fn cast<U: Scalar>(&self) -> ModelParams<U> {
        ModelParams {
            token_embedding: self.token_embedding.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: l.attn_norm.cast(),
                    proj: l.proj.each_ref().map(|w| w.cast()),
                    mlp_norm: l.mlp_norm.cast(),
                })
                .collect(),
            final_norm: self.final_norm.cast(),
            head: self.head.cast(),
            frozen: self.frozen,
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let (a, b) = (self.named(), other.named());
        a.len() == b.len()
            && a
                .iter()
                .zip(&b)
                .all(|((na, ta), (nb, tb))| na == nb && ta.bitwise_eq(tb))
    }

    /// Binds every weight to a leaf. Frozen models bind constants.
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundModel {
        let rg = !self.frozen;
        BoundModel {
            token_embedding: tape.leaf(self.token_embedding.clone(), rg),
            layers: self
                .layers
                .iter()
                .map(|l| BoundLayer {
                    attn_norm: tape.leaf(l.attn_norm.clone(), rg),
                    proj: l.proj.each_ref().map(|w| tape.leaf(w.clone(), rg)),
                    mlp_norm: tape.leaf(l.mlp_norm.clone(), rg),
                })
                .collect(),
            final_norm: tape.leaf(self.final_norm.clone(), rg),
            head: tape.leaf(self.head.clone(), rg),
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLayer {
    pub attn_norm: Var,
    pub proj: [Var; 7],
    pub mlp_norm: Var,
}

#[derive(Clone, Debug)]
pub struct BoundModel {
    pub token_embedding: Var,
    pub layers: Vec<BoundLayer>,
    pub final_norm: Var,
    pub head: Var,
}

impl BoundModel {
    /// Rebuilds a binding from vars in [`ModelParams::named`] order.
    pub fn from_vars(vars: &[Var], n_layers: usize) -> Result<Self> {
        let want = 3 + 9 * n_layers;
        if vars.len() != want {
            return Err(Error::Dimension(format!(
                "{} vars for a model needing {want}",
                vars.len()
            )));
        }
        let layers = (0..n_layers)
            .map(|l| {
                let s = &vars[1 + 9 * l..1 + 9 * (l + 1)];
                BoundLayer {
                    attn_norm: s[0],
                    proj: [s[1], s[2], s[3], s[4], s[5], s[6], s[7]],
                    mlp_norm: s[8],
                }
            })
            .collect();
        Ok(Self {
            token_embedding: vars[0],
            layers,
            final_norm: vars[want - 2],
            head: vars[want - 1],
        })
    }

    /// Vars in the same order as [`ModelParams::named`].
    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.token_embedding];
        for l in &self.layers {
            out.push(l.attn_norm);
            out.extend(l.proj);
            out.push(l.mlp_norm);
        }
        out.push(self.final_norm);
        out.push(self.head);
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LoraPair<T> {
    /// `[d_in, rank]`
    pub a: Tensor<T>,
    /// `[rank, d_out]`, zero at initialization.
    pub b: Tensor<T>,
}

/// Low-rank deltas `(alpha / rank) · A·B` on a set of projections.
#[derive(Clone, Debug, PartialEq)]
pub struct LoraAdapter<T> {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
    /// `layers[l][k]` wraps `targets[k]` of layer `l`.
    pub layers: Vec<Vec<LoraPair<T>>>,
}

impl<T: Scalar> LoraAdapter<T> {
    pub fn init<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        rank: usize,
        alpha: f64,
        targets: &[Proj],
        rng: &mut R,
    ) -> Result<Self> {
        if rank == 0 {
            return Err(Error::Config("LoRA rank must be at least 1".into()));
        }
        let mut targets = targets.to_vec();
        targets.sort();
        targets.dedup();
        let layers = (0..cfg.n_layers)
            .map(|_| {
                targets
                    .iter()
                    .map(|p| {
                        let (din, dout) = p.dims(cfg);
                        LoraPair {
                            a: Tensor::randn(&[din, rank], 1.0 / (din as f64).sqrt(), rng),
                            b: Tensor::zeros(&[rank, dout]),
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            rank,
            alpha,
            targets,
            layers,
        })
    }

    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    /// True when every `B` is zero, so the adapted model equals the base.
    pub fn is_identity(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|p| p.b.data().iter().all(|&x| x == T::zero()))
    }

    pub fn zero_deltas(&mut self) {
        for p in self.layers.iter_mut().flatten() {
            p.b.data_mut().iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Effective dense delta for one wrapped projection.
    pub fn delta(&self, layer: usize, proj: Proj) -> Option<Tensor<T>> {
        let k = self.targets.iter().position(|&p| p == proj)?;
        let pair = &self.layers[layer][k];
        let mut d = pair.a.matmul(&pair.b).ok()?;
        d.scale_assign(T::lit(self.scale()));
        Some(d)
    }

    pub fn named(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (l, pairs) in self.layers.iter().enumerate() {
            for (p, pair) in self.targets.iter().zip(pairs) {
                out.push((format!("lora.{l}.{p}.a"), &pair.a));
                out.push((format!("lora.{l}.{p}.b"), &pair.b));
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor<T>)> {
        let mut out = Vec::new();
        for (l, pairs) in self.layers.iter_mut().enumerate() {
            for (p, pair) in self.targets.iter().zip(pairs.iter_mut()) {
                out.push((format!("lora.{l}.{p}.a"), &mut pair.a));
                out.push((format!("lora.{l}.{p}.b"), &mut pair.b));
            }
        }
        out
    }

    pub fn cast<U: Scalar>(&self) -> LoraAdapter<U> {
        LoraAdapter {
            rank: self.rank,
            alpha: self.alpha,
            targets: self.targets.clone(),
            layers: self
                .layers
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| LoraPair {
                            a: p.a.cast(),
                            b: p.b.cast(),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundLora<T> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for pairs in &self.layers {
            let mut slots: [Option<(Var, Var)>; 7] = [None; 7];
            for (p, pair) in self.targets.iter().zip(pairs) {
                let a = tape.leaf(pair.a.clone(), trainable);
                let b = tape.leaf(pair.b.clone(), trainable);
                slots[p.index()] = Some((a, b));
            }
            layers.push(slots);
        }
        BoundLora {
            scale: T::lit(self.scale()),
            layers,
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundLora<T> {
    pub scale: T,
    pub layers: Vec<[Option<(Var, Var)>; 7]>,
}

impl<T: Scalar> BoundLora<T> {
    /// Rebuilds a binding from vars in [`LoraAdapter::named`] order.
    pub fn from_vars(vars: &[Var], targets: &[Proj], n_layers: usize, scale: T) -> Result<Self> {
        if vars.len() != 2 * targets.len() * n_layers {
            return Err(Error::Dimension(format!(
                "{} vars for {} adapted projections",
                vars.len(),
                targets.len() * n_layers
            )));
        }
        let mut it = vars.chunks(2);
        let layers = (0..n_layers)
            .map(|_| {
                let mut slots: [Option<(Var, Var)>; 7] = [None; 7];
                for p in targets {
                    let ab = it.next().expect("length checked");
                    slots[p.index()] = Some((ab[0], ab[1]));
                }
                slots
            })
            .collect();
        Ok(Self { scale, layers })
    }

    pub fn get(&self, layer: usize, p: Proj) -> Option<(Var, Var)> {
        self.layers.get(layer).and_then(|l| l[p.index()])
    }

    /// Vars in the same order as [`LoraAdapter::named`].
    pub fn vars(&self, targets: &[Proj]) -> Vec<Var> {
        let mut out = Vec::new();
        for l in &self.layers {
            for p in targets {
                if let Some((a, b)) = l[p.index()] {
                    out.push(a);
                    out.push(b);
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn names_are_unique_and_aligned() {
        let cfg = ModelConfig::small(2, 2, 8, 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut m = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
        let names: Vec<String> = m.named().into_iter().map(|(n, _)| n).collect();
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len());
        let mut_names: Vec<String> = m.named_mut().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names, mut_names);
        let mut tape = Tape::new();
        assert_eq!(m.bind(&mut tape).vars().len(), names.len());
    }

    #[test]
    fn lora_starts_as_identity() {
        let cfg = ModelConfig::small(2, 2, 8, 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let lora = LoraAdapter::<f64>::init(&cfg, 4, 8.0, &Proj::ALL, &mut rng).unwrap();
        assert!(lora.is_identity());
        assert_eq!(lora.scale(), 2.0);
        let d = lora.delta(1, Proj::Up).unwrap();
        assert_eq!(d.shape(), &[8, 16]);
        assert!(d.data().iter().all(|&x| x == 0.0));
        assert!(LoraAdapter::<f64>::init(&cfg, 0, 1.0, &Proj::ALL, &mut rng).is_err());
    }

    #[test]
    fn proj_parse_round_trip() {
        for p in Proj::ALL {
            assert_eq!(Proj::parse(p.name()).unwrap(), p);
        }
        assert!(Proj::parse("nope").is_err());
    }
}
