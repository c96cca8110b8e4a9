//! Key/value caches: the concrete `[heads, slots, d_head]` form and the
//! on-tape `[slots, heads*d_head]` form used inside a forward pass.

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct LayerKv<T> {
    /// `[n_heads, slots, d_head]`, rotary embedding already applied.
    pub k: Tensor<T>,
    /// `[n_heads, slots, d_head]`
    pub v: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache<T> {
    pub n_heads: usize,
    pub d_head: usize,
    pub layers: Vec<LayerKv<T>>,
    pub positions: Vec<usize>,
}

fn check_increasing(positions: &[usize]) -> Result<()> {
    if positions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Ordering(format!(
            "positions must be strictly increasing: {positions:?}"
        )));
    }
    Ok(())
}

fn head_major<T: Scalar>(x: &Tensor<T>, n_heads: usize) -> Tensor<T> {
    let (s, d) = (x.rows(), x.cols());
    let dh = d / n_heads;
    let mut data = Vec::with_capacity(s * d);
    for h in 0..n_heads {
        for j in 0..s {
            data.extend_from_slice(&x.row(j)[h * dh..(h + 1) * dh]);
        }
    }
    Tensor::new(vec![n_heads, s, dh], data).expect("same element count")
}

fn slot_major<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (h, s, dh) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut data = vec![T::zero(); s * h * dh];
    for hi in 0..h {
        for j in 0..s {
            let src = &x.data()[(hi * s + j) * dh..(hi * s + j + 1) * dh];
            data[j * h * dh + hi * dh..j * h * dh + (hi + 1) * dh].copy_from_slice(src);
        }
    }
    Tensor::new(vec![s, h * dh], data).expect("same element count")
}

impl<T: Scalar> KvCache<T> {
    pub fn empty(n_layers: usize, n_heads: usize, d_head: usize) -> Self {
        let layer = LayerKv {
            k: Tensor::zeros(&[n_heads, 0, d_head]),
            v: Tensor::zeros(&[n_heads, 0, d_head]),
        };
        Self {
            n_heads,
            d_head,
            layers: vec![layer; n_layers],
            positions: Vec::new(),
        }
    }

    pub fn slots(&self) -> usize {
        self.positions.len()
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Checks shapes and position ordering.
    pub fn validate(&self) -> Result<()> {
        check_increasing(&self.positions)?;
        let want = [self.n_heads, self.slots(), self.d_head];
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.k.shape() != want || layer.v.shape() != want {
                return Err(Error::Dimension(format!(
                    "layer {l}: K {:?} V {:?}, expected {want:?}",
                    layer.k.shape(),
                    layer.v.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn same_geometry(&self, other: &Self) -> bool {
        self.n_layers() == other.n_layers()
            && self.n_heads == other.n_heads
            && self.d_head == other.d_head
    }

    /// Keeps the slots at `keep`, which must be strictly increasing.
    pub fn extract_kv(&self, keep: &[usize]) -> Result<Self> {
        if keep.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Index(format!(
                "keep indices must be strictly increasing: {keep:?}"
            )));
        }
        if let Some(&bad) = keep.iter().find(|&&i| i >= self.slots()) {
            return Err(Error::Index(format!(
                "slot {bad} out of range for {} slots",
                self.slots()
            )));
        }
        let s = self.slots();
        let dh = self.d_head;
        let pick = |x: &Tensor<T>| {
            let mut data = Vec::with_capacity(self.n_heads * keep.len() * dh);
            for h in 0..self.n_heads {
                for &j in keep {
                    data.extend_from_slice(&x.data()[(h * s + j) * dh..(h * s + j + 1) * dh]);
                }
            }
            Tensor::new(vec![self.n_heads, keep.len(), dh], data).expect("sliced extents")
        };
        Ok(Self {
            n_heads: self.n_heads,
            d_head: dh,
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv {
                    k: pick(&l.k),
                    v: pick(&l.v),
                })
                .collect(),
            positions: keep.iter().map(|&i| self.positions[i]).collect(),
        })
    }

    /// Slot-wise concatenation; every position of `a` must precede `b`'s.
    pub fn concat_kv(a: &Self, b: &Self) -> Result<Self> {
        if !a.same_geometry(b) {
            return Err(Error::Geometry(format!(
                "cannot concatenate {}x{}x{} with {}x{}x{}",
                a.n_layers(),
                a.n_heads,
                a.d_head,
                b.n_layers(),
                b.n_heads,
                b.d_head
            )));
        }
        if let (Some(&last), Some(&first)) = (a.positions.last(), b.positions.first()) {
            if last >= first {
                return Err(Error::Ordering(format!(
                    "position {last} of the first cache is not below {first}"
                )));
            }
        }
        let (sa, sb) = (a.slots(), b.slots());
        let dh = a.d_head;
        let join = |x: &Tensor<T>, y: &Tensor<T>| {
            let mut data = Vec::with_capacity(x.numel() + y.numel());
            for h in 0..a.n_heads {
                data.extend_from_slice(&x.data()[h * sa * dh..(h + 1) * sa * dh]);
                data.extend_from_slice(&y.data()[h * sb * dh..(h + 1) * sb * dh]);
            }
            Tensor::new(vec![a.n_heads, sa + sb, dh], data).expect("joined extents")
        };
        Ok(Self {
            n_heads: a.n_heads,
            d_head: dh,
            layers: a
                .layers
                .iter()
                .zip(&b.layers)
                .map(|(x, y)| LayerKv {
                    k: join(&x.k, &y.k),
                    v: join(&x.v, &y.v),
                })
                .collect(),
            positions: a.positions.iter().chain(&b.positions).copied().collect(),
        })
    }

    /// Reads cache values out of a tape.
    pub fn from_tape(tape: &Tape<T>, kv: &TapeKv, n_heads: usize) -> Self {
        let layers = kv
            .layers
            .iter()
            .map(|&(k, v)| LayerKv {
                k: head_major(tape.value(k), n_heads),
                v: head_major(tape.value(v), n_heads),
            })
            .collect::<Vec<_>>();
        let d = kv
            .layers
            .first()
            .map_or(0, |&(k, _)| tape.value(k).cols());
        Self {
            n_heads,
            d_head: d / n_heads.max(1),
            layers,
            positions: kv.positions.clone(),
        }
    }

    /// Binds the cache as constant leaves.
    pub fn bind(&self, tape: &mut Tape<T>) -> TapeKv {
        TapeKv {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.constant(slot_major(&l.k)), tape.constant(slot_major(&l.v))))
                .collect(),
            positions: self.positions.clone(),
        }
    }

    /// All K (or V) rows of one layer as `[slots, n_heads*d_head]`.
    pub fn flat_rows(&self, layer: usize, values: bool) -> Tensor<T> {
        let l = &self.layers[layer];
        slot_major(if values { &l.v } else { &l.k })
    }

    pub fn cast<U: Scalar>(&self) -> KvCache<U> {
        KvCache {
            n_heads: self.n_heads,
            d_head: self.d_head,
            layers: self
                .layers
                .iter()
                .map(|l| LayerKv {
                    k: l.k.cast(),
                    v: l.v.cast(),
                })
                .collect(),
            positions: self.positions.clone(),
        }
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        self.positions == other.positions
            && self.same_geometry(other)
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.k.bitwise_eq(&b.k) && a.v.bitwise_eq(&b.v))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| a.k.max_abs_diff(&b.k).max(a.v.max_abs_diff(&b.v)))
            .fold(0.0, f64::max)
    }
}

/// Per-layer `(K, V)` nodes, each `[slots, n_heads*d_head]`.
#[derive(Clone, Debug, Default)]
pub struct TapeKv {
    pub layers: Vec<(Var, Var)>,
    pub positions: Vec<usize>,
}

impl TapeKv {
    pub fn slots(&self) -> usize {
        self.positions.len()
    }

    pub fn select<T: Scalar>(&self, tape: &mut Tape<T>, rows: &[usize]) -> Result<TapeKv> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for &(k, v) in &self.layers {
            layers.push((tape.select_rows(k, rows)?, tape.select_rows(v, rows)?));
        }
        Ok(TapeKv {
            layers,
            positions: rows.iter().map(|&r| self.positions[r]).collect(),
        })
    }

    pub fn concat<T: Scalar>(tape: &mut Tape<T>, parts: &[TapeKv]) -> Result<TapeKv> {
        let Some(first) = parts.first() else {
            return Err(Error::Contract("concatenation of zero caches".into()));
        };
        let positions: Vec<usize> = parts.iter().flat_map(|p| p.positions.clone()).collect();
        check_increasing(&positions)?;
        let mut layers = Vec::with_capacity(first.layers.len());
        for l in 0..first.layers.len() {
            let ks: Vec<Var> = parts.iter().map(|p| p.layers[l].0).collect();
            let vs: Vec<Var> = parts.iter().map(|p| p.layers[l].1).collect();
            layers.push((tape.concat_rows(&ks)?, tape.concat_rows(&vs)?));
        }
        Ok(TapeKv { layers, positions })
    }
}
