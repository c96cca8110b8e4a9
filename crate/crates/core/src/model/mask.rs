use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum AttentionMask {
    /// Prefix slots are visible when their position is at most the query's;
    /// current slots are visible up to and including the query's own index.
    Causal,
    Bidirectional,
    /// Row-major `[q_len, kv_len]` where `kv_len` counts prefix slots first.
    Explicit {
        q_len: usize,
        kv_len: usize,
        allowed: Vec<bool>,
    },
}

impl AttentionMask {
    /// Lower-triangular mask by index over `t` slots with no prefix.
    pub fn index_causal(t: usize) -> Self {
        let mut allowed = vec![false; t * t];
        for i in 0..t {
            for j in 0..=i {
                allowed[i * t + j] = true;
            }
        }
        AttentionMask::Explicit {
            q_len: t,
            kv_len: t,
            allowed,
        }
    }

    /// Expands to a `[t, prefix + t]` boolean matrix.
    pub fn materialize(&self, prefix_positions: &[usize], positions: &[usize]) -> Result<Vec<bool>> {
        let (p, t) = (prefix_positions.len(), positions.len());
        let s = p + t;
        match self {
            AttentionMask::Bidirectional => Ok(vec![true; t * s]),
            AttentionMask::Causal => {
                let mut allowed = vec![false; t * s];
                for (i, &qp) in positions.iter().enumerate() {
                    let row = &mut allowed[i * s..(i + 1) * s];
                    for (j, &kp) in prefix_positions.iter().enumerate() {
                        row[j] = kp <= qp;
                    }
                    for j in 0..=i {
                        row[p + j] = true;
                    }
                }
                Ok(allowed)
            }
            AttentionMask::Explicit {
                q_len,
                kv_len,
                allowed,
            } => {
                if *q_len != t || *kv_len != s || allowed.len() != t * s {
                    return Err(Error::Dimension(format!(
                        "explicit mask is {q_len}x{kv_len}, attention needs {t}x{s}"
                    )));
                }
                Ok(allowed.clone())
            }
        }
    }
}
