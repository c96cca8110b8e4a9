use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use sac_core::data::{self, Split, Tokenizer, Vocab};
use sac_core::{
    CompressionConfig, EncoderMask, LoraSpec, Method, ModelConfig, Proj, QARecord, Strategy,
    TrainConfig,
};
use serde::{Deserialize, Serialize};

/// Environment variable that replaces the `--config` path.
pub const CONFIG_ENV: &str = "SAC_CONFIG";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    /// Root of every random stream; see [`Config::sub_seed`].
    pub seed: u64,
    pub method: Method,
    pub model: ModelSection,
    pub compression: CompressionSection,
    pub lora: LoraSection,
    pub train: TrainConfig,
    pub data: DataSection,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            seed: 0,
            method: Method::Sac,
            model: ModelSection::default(),
            compression: CompressionSection::default(),
            lora: LoraSection::default(),
            train: TrainConfig::default(),
            data: DataSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub max_positions: usize,
    pub rope_base: f64,
    pub norm_eps: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk(0);
        Self {
            n_layers: d.n_layers,
            n_heads: d.n_heads,
            d_model: d.d_model,
            d_ff: d.d_ff,
            max_positions: d.max_positions,
            rope_base: d.rope_base,
            norm_eps: d.norm_eps,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionSection {
    pub ratio: usize,
    pub chunk_len: usize,
    pub strategy: Strategy,
    pub encoder_mask: EncoderMask,
}

impl Default for CompressionSection {
    fn default() -> Self {
        let c = CompressionConfig::new(4, 64);
        Self {
            ratio: c.ratio,
            chunk_len: c.chunk_len,
            strategy: c.strategy,
            encoder_mask: c.encoder_mask,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoraSection {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Proj>,
}

impl Default for LoraSection {
    fn default() -> Self {
        let s = LoraSpec::default();
        Self {
            rank: s.rank,
            alpha: s.alpha,
            targets: s.targets,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizerChoice {
    /// Closed vocabulary of the synthetic corpora.
    #[default]
    Synthetic,
    /// Printable ASCII characters.
    Char,
    /// Every whitespace word of the configured corpus files.
    Corpus,
}

/// Corpus files; any that is absent is generated from the seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub tokenizer: TokenizerChoice,
    /// One document per line.
    pub lm_corpus: Option<PathBuf>,
    pub qa_train: Option<PathBuf>,
    pub qa_eval: Option<PathBuf>,
    pub synthetic_docs: usize,
    pub synthetic_doc_len: (usize, usize),
    pub synthetic_facts: usize,
    pub synthetic_train: usize,
    pub synthetic_eval: usize,
    pub eval_split: Split,
    pub max_new: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            tokenizer: TokenizerChoice::Synthetic,
            lm_corpus: None,
            qa_train: None,
            qa_eval: None,
            synthetic_docs: 512,
            synthetic_doc_len: (20, 40),
            synthetic_facts: 4,
            synthetic_train: 4000,
            synthetic_eval: 200,
            eval_split: Split::Id,
            max_new: 8,
        }
    }
}

impl Config {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let cfg: Config = toml::from_str(&text)
            .map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.compression().validate()?;
        self.train.validate()?;
        if self.lora.rank == 0 {
            return Err(ConfigError("lora.rank must be at least 1".into()).into());
        }
        let (lo, hi) = self.data.synthetic_doc_len;
        if lo < 2 || lo > hi {
            return Err(ConfigError(format!("bad synthetic_doc_len ({lo}, {hi})")).into());
        }
        Ok(())
    }

    /// A named, independent stream derived from the root seed.
    pub fn sub_seed(&self, name: &str) -> u64 {
        let mut h = self.seed ^ 0xcbf2_9ce4_8422_2325;
        for b in name.bytes() {
            h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let m = &self.model;
        ModelConfig {
            n_layers: m.n_layers,
            n_heads: m.n_heads,
            d_model: m.d_model,
            d_head: m.d_model / m.n_heads.max(1),
            d_ff: m.d_ff,
            vocab_size,
            max_positions: m.max_positions,
            rope_base: m.rope_base,
            norm_eps: m.norm_eps,
        }
    }

    pub fn compression(&self) -> CompressionConfig {
        let c = &self.compression;
        CompressionConfig {
            ratio: c.ratio,
            chunk_len: c.chunk_len,
            strategy: c.strategy.clone(),
            encoder_mask: c.encoder_mask,
        }
    }

    pub fn lora_spec(&self) -> LoraSpec {
        LoraSpec {
            rank: self.lora.rank,
            alpha: self.lora.alpha,
            targets: self.lora.targets.clone(),
        }
    }

    /// Training settings with the batch-sampling seed fanned out.
    pub fn train_config(&self) -> TrainConfig {
        let mut t = self.train.clone();
        t.seed = self.sub_seed("batch");
        t
    }

    pub fn tokenizer(&self) -> Result<Tokenizer> {
        Ok(match self.data.tokenizer {
            TokenizerChoice::Synthetic => Tokenizer::synthetic(),
            TokenizerChoice::Char => Tokenizer::char(),
            TokenizerChoice::Corpus => {
                let docs = self.lm_docs()?;
                let mut texts: Vec<String> = docs;
                for r in self.qa_train()?.into_iter().chain(self.qa_eval()?) {
                    texts.extend([r.context, r.question, r.answer]);
                }
                Tokenizer::word(Vocab::from_texts(texts.iter().map(String::as_str))?)
            }
        })
    }

    pub fn lm_docs(&self) -> Result<Vec<String>> {
        let d = &self.data;
        Ok(match &d.lm_corpus {
            Some(p) => data::load_corpus(p)?,
            None => data::gen_lm_corpus(d.synthetic_docs, d.synthetic_doc_len, self.sub_seed("data.lm"))?,
        })
    }

    pub fn qa_train(&self) -> Result<Vec<QARecord>> {
        let d = &self.data;
        Ok(match &d.qa_train {
            Some(p) => data::load_jsonl(p)?,
            None => data::gen_kv_retrieval_qa(
                d.synthetic_train,
                d.synthetic_facts,
                self.sub_seed("data.qa_train"),
                Split::Id,
            )?,
        })
    }

    pub fn qa_eval(&self) -> Result<Vec<QARecord>> {
        let d = &self.data;
        Ok(match &d.qa_eval {
            Some(p) => data::load_jsonl(p)?,
            None => data::gen_kv_retrieval_qa(
                d.synthetic_eval,
                d.synthetic_facts,
                self.sub_seed("data.qa_eval"),
                d.eval_split,
            )?,
        })
    }
}

/// A configuration problem detected by the CLI itself.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "invalid configuration: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}
