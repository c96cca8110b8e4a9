//! Binary persistence and atomic file writes.
//!
//! Checkpoint layout, little-endian throughout:
//!
//! ```text
//! "SACL" | u32 version | 64 bytes config digest (hex) | u64 header length
//! | JSON header | tensor bytes in header order
//! ```
//!
//! KV blob layout:
//!
//! ```text
//! "SKVB" | u32 version | u8 dtype | u32 n_layers | u32 n_heads | u32 d_head
//! | u64 slots | u64 source_len | u64 ratio | u32 len + strategy tag
//! | u32 count + u64 chunk boundaries | u64 positions[slots]
//! | per layer: K [n_heads, slots, d_head] then V
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{layout, CompressionTokenBank};
use crate::compressor::{CompressedRepr, CompressionConfig, CompressorParams, Method};
use crate::data::TokenizerSpec;
use crate::error::{Error, Result};
use crate::model::{KvCache, LayerKv, LoraAdapter, ModelConfig, ModelParams, Proj};
use crate::tensor::{DType, Scalar, Tensor};
use crate::train::OptimState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SACL";
pub const BLOB_MAGIC: &[u8; 4] = b"SKVB";
pub const FORMAT_VERSION: u32 = 1;

/// Writes to a sibling temp file, syncs, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, at: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.at)))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }

    /// `n` elements stored as `dtype`, converted to `T`.
    fn scalars<T: Scalar>(&mut self, dtype: DType, n: usize) -> Result<Vec<T>> {
        let size = dtype.size();
        let raw = self.take(n.checked_mul(size).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        Ok(raw
            .chunks_exact(size)
            .map(|c| match dtype {
                d if d == T::DTYPE => T::read_le(c),
                DType::F32 => T::lit(f32::read_le(c) as f64),
                DType::F64 => T::lit(f64::read_le(c)),
            })
            .collect())
    }

    fn finish(&self) -> Result<()> {
        if self.at != self.bytes.len() {
            return Err(Error::Format(format!(
                "{} trailing bytes",
                self.bytes.len() - self.at
            )));
        }
        Ok(())
    }
}

fn magic(r: &mut Reader<'_>, want: &[u8; 4]) -> Result<()> {
    let got = r.take(4)?;
    if got != want {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(got),
            String::from_utf8_lossy(want)
        )));
    }
    let v = r.u32()?;
    if v != FORMAT_VERSION {
        return Err(Error::Format(format!("unsupported format version {v}")));
    }
    Ok(())
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    #[serde(default)]
    pub stage: String,
    #[serde(default)]
    pub tokenizer: Option<TokenizerSpec>,
    #[serde(default)]
    pub compression: Option<CompressionConfig>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub config: ModelConfig,
    pub base: ModelParams<T>,
    pub compressor: Option<CompressorParams<T>>,
    pub optim: Option<OptimState<T>>,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Role {
    Frozen,
    Trainable,
    OptimM,
    OptimV,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: u8,
    shape: Vec<usize>,
    role: Role,
}

#[derive(Serialize, Deserialize)]
struct CompressorHeader {
    method: Method,
    rank: usize,
    alpha: f64,
    targets: Vec<Proj>,
    bank_rows: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    base_frozen: bool,
    compressor: Option<CompressorHeader>,
    optim_step: Option<u64>,
    meta: CheckpointMeta,
    tensors: Vec<TensorEntry>,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig, base: ModelParams<T>) -> Self {
        Self {
            config,
            base,
            compressor: None,
            optim: None,
            meta: CheckpointMeta::default(),
        }
    }

    fn tensors(&self) -> Vec<(String, Role, &Tensor<T>)> {
        let base_role = if self.base.frozen {
            Role::Frozen
        } else {
            Role::Trainable
        };
        let mut out: Vec<(String, Role, &Tensor<T>)> = self
            .base
            .named()
            .into_iter()
            .map(|(n, t)| (format!("base.{n}"), base_role, t))
            .collect();
        if let Some(c) = &self.compressor {
            out.extend(c.named().into_iter().map(|(n, t)| (format!("comp.{n}"), Role::Trainable, t)));
        }
        if let Some(o) = &self.optim {
            out.extend(o.m.iter().enumerate().map(|(i, t)| (format!("optim.m.{i}"), Role::OptimM, t)));
            out.extend(o.v.iter().enumerate().map(|(i, t)| (format!("optim.v.{i}"), Role::OptimV, t)));
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.config.validate()?;
        let tensors = self.tensors();
        let header = Header {
            config: self.config.clone(),
            base_frozen: self.base.frozen,
            compressor: self.compressor.as_ref().map(|c| CompressorHeader {
                method: c.method,
                rank: c.lora.rank,
                alpha: c.lora.alpha,
                targets: c.lora.targets.clone(),
                bank_rows: c.bank.as_ref().map(|b| b.count()),
            }),
            optim_step: self.optim.as_ref().map(|o| o.step),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(name, role, t)| TensorEntry {
                    name: name.clone(),
                    dtype: T::DTYPE.tag(),
                    shape: t.shape().to_vec(),
                    role: *role,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let body: usize = tensors.iter().map(|(_, _, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(80 + json.len() + body * T::DTYPE.size());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(self.config.digest().as_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, t) in tensors {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
        Ok(out)
    }

    /// Parses a checkpoint. With `expected`, a config whose digest differs
    /// is refused unless `force` is set.
    pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>, force: bool) -> Result<Self> {
        let mut r = Reader::new(bytes);
        magic(&mut r, CHECKPOINT_MAGIC)?;
        let stored = String::from_utf8(r.take(64)?.to_vec())
            .map_err(|_| Error::Format("config digest is not ASCII".into()))?;
        let len = r.usize()?;
        let header: Header = serde_json::from_slice(r.take(len)?)
            .map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let cfg = header.config;
        cfg.validate()?;
        if cfg.digest() != stored {
            return Err(Error::Format("stored digest does not match the stored config".into()));
        }
        if let Some(want) = expected {
            let expected = want.digest();
            if expected != stored && !force {
                return Err(Error::DigestMismatch { stored, expected });
            }
        }

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut base = ModelParams::<T>::init(&cfg, &mut rng)?;
        base.frozen = header.base_frozen;
        let mut compressor = match &header.compressor {
            None => None,
            Some(h) => Some(CompressorParams {
                method: h.method,
                lora: LoraAdapter::init(&cfg, h.rank, h.alpha, &h.targets, &mut rng)?,
                anchor_embedding: Tensor::zeros(&[cfg.d_model]),
                bank: match (h.method.is_baseline(), h.bank_rows) {
                    (true, Some(m)) => {
                        let (position_mode, carrier) = layout(h.method)?;
                        Some(CompressionTokenBank {
                            embeddings: Tensor::zeros(&[m, cfg.d_model]),
                            position_mode,
                            carrier,
                        })
                    }
                    (false, None) => None,
                    _ => return Err(Error::Format("compression-token bank does not fit the method".into())),
                },
                ae_trigger: Tensor::zeros(&[1, cfg.d_model]),
            }),
        };
        let mut optim: Option<OptimState<T>> = header.optim_step.map(|step| OptimState {
            m: Vec::new(),
            v: Vec::new(),
            step,
        });

        let mut slots: Vec<(String, &mut Tensor<T>)> = base
            .named_mut()
            .into_iter()
            .map(|(n, t)| (format!("base.{n}"), t))
            .collect();
        if let Some(c) = compressor.as_mut() {
            slots.extend(c.named_mut().into_iter().map(|(n, t)| (format!("comp.{n}"), t)));
        }
        let mut slots = slots.into_iter();
        for e in &header.tensors {
            let dtype = DType::from_tag(e.dtype)
                .ok_or_else(|| Error::Format(format!("unknown dtype tag {}", e.dtype)))?;
            let numel: usize = e.shape.iter().product();
            let data = r.scalars::<T>(dtype, numel)?;
            let tensor = Tensor::new(e.shape.clone(), data)?;
            match e.role {
                Role::OptimM | Role::OptimV => {
                    let o = optim
                        .as_mut()
                        .ok_or_else(|| Error::Format("optimizer tensor without optimizer state".into()))?;
                    if e.role == Role::OptimM {
                        o.m.push(tensor);
                    } else {
                        o.v.push(tensor);
                    }
                }
                Role::Frozen | Role::Trainable => {
                    let (name, slot) = slots
                        .next()
                        .ok_or_else(|| Error::Format(format!("unexpected tensor {}", e.name)))?;
                    if name != e.name || slot.shape() != tensor.shape() {
                        return Err(Error::Format(format!(
                            "tensor {} {:?} does not match expected {name} {:?}",
                            e.name,
                            tensor.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = tensor;
                }
            }
        }
        if let Some((name, _)) = slots.next() {
            return Err(Error::Format(format!("missing tensor {name}")));
        }
        if let Some(o) = &optim {
            if o.m.len() != o.v.len() {
                return Err(Error::Format("optimizer moments are unpaired".into()));
            }
        }
        r.finish()?;
        Ok(Self {
            config: cfg,
            base,
            compressor,
            optim,
            meta: header.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>, force: bool) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, expected, force)
    }

    pub fn bitwise_eq(&self, other: &Self) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        self.config == other.config
            && self.meta == other.meta
            && self.base.frozen == other.base.frozen
            && self.compressor.as_ref().map(|c| (c.method, c.lora.rank, c.lora.alpha.to_bits(), &c.lora.targets))
                == other.compressor.as_ref().map(|c| (c.method, c.lora.rank, c.lora.alpha.to_bits(), &c.lora.targets))
            && self.optim.as_ref().map(|o| o.step) == other.optim.as_ref().map(|o| o.step)
            && a.len() == b.len()
            && a.iter().zip(&b).all(|(x, y)| x.0 == y.0 && x.1 == y.1 && x.2.bitwise_eq(y.2))
    }
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_digest(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let hash = Sha256::digest(fs::read(path)?);
    Ok(hash.iter().map(|b| format!("{b:02x}")).collect())
}

pub fn blob_to_bytes<T: Scalar>(repr: &CompressedRepr<T>) -> Result<Vec<u8>> {
    repr.kv.validate()?;
    let kv = &repr.kv;
    let mut out = Vec::new();
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    for x in [kv.n_layers(), kv.n_heads, kv.d_head] {
        out.extend_from_slice(&(x as u32).to_le_bytes());
    }
    for x in [kv.slots(), repr.source_len, repr.ratio] {
        out.extend_from_slice(&(x as u64).to_le_bytes());
    }
    out.extend_from_slice(&(repr.strategy.len() as u32).to_le_bytes());
    out.extend_from_slice(repr.strategy.as_bytes());
    out.extend_from_slice(&(repr.chunk_boundaries.len() as u32).to_le_bytes());
    for &b in &repr.chunk_boundaries {
        out.extend_from_slice(&(b as u64).to_le_bytes());
    }
    for &p in &kv.positions {
        out.extend_from_slice(&(p as u64).to_le_bytes());
    }
    for l in &kv.layers {
        for t in [&l.k, &l.v] {
            for &x in t.data() {
                x.write_le(&mut out);
            }
        }
    }
    Ok(out)
}

/// Parses a blob; its element type must be `T`.
pub fn blob_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<CompressedRepr<T>> {
    let mut r = Reader::new(bytes);
    magic(&mut r, BLOB_MAGIC)?;
    let dtype = DType::from_tag(r.u8()?).ok_or_else(|| Error::Format("unknown dtype".into()))?;
    if dtype != T::DTYPE {
        return Err(Error::Format(format!("blob holds {dtype:?}, expected {:?}", T::DTYPE)));
    }
    let n_layers = r.u32()? as usize;
    let n_heads = r.u32()? as usize;
    let d_head = r.u32()? as usize;
    let slots = r.usize()?;
    let source_len = r.usize()?;
    let ratio = r.usize()?;
    let n = r.u32()? as usize;
    let strategy = String::from_utf8(r.take(n)?.to_vec())
        .map_err(|_| Error::Format("strategy tag is not UTF-8".into()))?;
    let nb = r.u32()? as usize;
    let chunk_boundaries = (0..nb).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let positions = (0..slots).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
    let per = n_heads
        .checked_mul(slots)
        .and_then(|x| x.checked_mul(d_head))
        .ok_or_else(|| Error::Format("blob geometry overflows".into()))?;
    let mut layers = Vec::with_capacity(n_layers.min(1 << 16));
    for _ in 0..n_layers {
        let k = Tensor::new(vec![n_heads, slots, d_head], r.scalars(dtype, per)?)?;
        let v = Tensor::new(vec![n_heads, slots, d_head], r.scalars(dtype, per)?)?;
        layers.push(LayerKv { k, v });
    }
    r.finish()?;
    let kv = KvCache {
        n_heads,
        d_head,
        layers,
        positions,
    };
    kv.validate()?;
    Ok(CompressedRepr {
        kv,
        source_len,
        ratio,
        chunk_boundaries,
        strategy,
    })
}

pub fn save_blob<T: Scalar>(path: &Path, repr: &CompressedRepr<T>) -> Result<usize> {
    let bytes = blob_to_bytes(repr)?;
    write_atomic(path, &bytes)?;
    Ok(bytes.len())
}

pub fn load_blob<T: Scalar>(path: &Path) -> Result<CompressedRepr<T>> {
    blob_from_bytes(&fs::read(path)?)
}

/// Refuses a KV cache whose geometry does not fit `cfg`.
pub fn check_geometry<T: Scalar>(kv: &KvCache<T>, cfg: &ModelConfig) -> Result<()> {
    if kv.n_layers() != cfg.n_layers || kv.n_heads != cfg.n_heads || kv.d_head != cfg.d_head {
        return Err(Error::Geometry(format!(
            "blob is {}x{}x{} (layers x heads x d_head), model is {}x{}x{}",
            kv.n_layers(),
            kv.n_heads,
            kv.d_head,
            cfg.n_layers,
            cfg.n_heads,
            cfg.d_head
        )));
    }
    if let Some(&p) = kv.positions.iter().max() {
        if p >= cfg.max_positions {
            return Err(Error::Geometry(format!(
                "slot position {p} exceeds max_positions {}",
                cfg.max_positions
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compressor::{compress_context, LoraSpec};
    use crate::train::OptimState;

    fn model() -> (ModelConfig, ModelParams<f32>) {
        let cfg = ModelConfig::small(2, 2, 8, 16, 20);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        (cfg.clone(), ModelParams::init(&cfg, &mut rng).unwrap())
    }

    #[test]
    fn checkpoint_round_trip_with_everything() {
        let (cfg, base) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ccfg = CompressionConfig::new(4, 16);
        let mut comp =
            CompressorParams::init(Method::X500, &cfg, &base, &LoraSpec::default(), &ccfg, &mut rng).unwrap();
        for (_, t) in comp.named_mut() {
            *t = Tensor::randn(t.shape(), 1.0, &mut rng);
        }
        let mut ck = Checkpoint::new(cfg.clone(), base);
        ck.optim = Some(OptimState::new(comp.named().into_iter().map(|(_, t)| t)));
        ck.compressor = Some(comp);
        ck.meta.stage = "pretrain".into();
        ck.meta.compression = Some(ccfg);
        ck.meta.tokenizer = Some(crate::data::Tokenizer::synthetic().spec());
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::<f32>::from_bytes(&bytes, Some(&cfg), false).unwrap();
        assert!(back.bitwise_eq(&ck));
        assert_eq!(back, ck);
    }

    #[test]
    fn digest_mismatch_needs_force() {
        let (cfg, base) = model();
        let bytes = Checkpoint::new(cfg.clone(), base).to_bytes().unwrap();
        let mut other = cfg.clone();
        other.rope_base = 500.0;
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes, Some(&other), false),
            Err(Error::DigestMismatch { .. })
        ));
        assert!(Checkpoint::<f32>::from_bytes(&bytes, Some(&other), true).is_ok());
    }

    #[test]
    fn corrupt_checkpoints_are_refused() {
        let (cfg, base) = model();
        let bytes = Checkpoint::new(cfg, base).to_bytes().unwrap();
        assert!(Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1], None, false).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::<f32>::from_bytes(&extra, None, false).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::<f32>::from_bytes(&bad, None, false), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[10] ^= 1;
        assert!(Checkpoint::<f32>::from_bytes(&bad, None, false).is_err());
    }

    #[test]
    fn checkpoint_casts_across_dtypes() {
        let (cfg, base) = model();
        let bytes = Checkpoint::new(cfg, base.clone()).to_bytes().unwrap();
        let wide = Checkpoint::<f64>::from_bytes(&bytes, None, false).unwrap();
        assert!(wide.base.cast::<f32>().bitwise_eq(&base));
    }

    #[test]
    fn blob_round_trip_and_size() {
        let (cfg, base) = model();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ccfg = CompressionConfig::new(4, 16);
        let comp =
            CompressorParams::init(Method::Sac, &cfg, &base, &LoraSpec::default(), &ccfg, &mut rng).unwrap();
        let tokens: Vec<usize> = (0..20).map(|i| 5 + i % 15).collect();
        let repr = compress_context(&tokens, &ccfg, &comp, &cfg, &base).unwrap();
        let bytes = blob_to_bytes(&repr).unwrap();
        let slots = repr.kv.slots();
        assert_eq!(slots, 5);
        let header = 4 + 4 + 1 + 12 + 24 + 4 + repr.strategy.len() + 4 + 8 * repr.chunk_boundaries.len();
        assert_eq!(bytes.len(), header + 8 * slots + 2 * 2 * 2 * slots * 4 * 4);
        let back: CompressedRepr<f32> = blob_from_bytes(&bytes).unwrap();
        assert!(back.kv.bitwise_eq(&repr.kv));
        assert_eq!(back, repr);
        assert!(blob_from_bytes::<f64>(&bytes).is_err());
        assert!(blob_from_bytes::<f32>(&bytes[..bytes.len() - 2]).is_err());
        check_geometry(&back.kv, &cfg).unwrap();
        let other = ModelConfig::small(3, 2, 8, 16, 20);
        assert!(matches!(check_geometry(&back.kv, &other), Err(Error::Geometry(_))));
    }

    #[test]
    fn atomic_write_replaces_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("f.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
