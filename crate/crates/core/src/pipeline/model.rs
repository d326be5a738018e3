use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AssemblyConfig, Dialog, Vocabulary};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::numerics::{decode_checkpoint, encode_checkpoint, write_atomic, ParamStore};
use crate::scalar::Scalar;
use crate::taskheads::{MtmHead, NspHead, PcrHead, PcrMode};

/// Architecture knobs that do not depend on the corpus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSettings {
    pub n_layers: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    pub max_positions: usize,
    pub pcr_hidden: usize,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            n_layers: 2,
            n_heads: 4,
            model_dim: 32,
            ff_dim: 64,
            max_positions: 256,
            pcr_hidden: 32,
        }
    }
}

impl ModelSettings {
    /// Full configuration for a vocabulary and the visual feature size of `dialogs`.
    pub fn config_for(&self, vocab: &Vocabulary, dialogs: &[Dialog]) -> Result<ModelConfig> {
        let visual_dim = dialogs
            .iter()
            .find_map(|d| d.visual_features.first().map(Vec::len))
            .ok_or_else(|| Error::Config("corpus has no visual features".into()))?;
        let cfg = ModelConfig {
            encoder: EncoderConfig {
                n_layers: self.n_layers,
                n_heads: self.n_heads,
                model_dim: self.model_dim,
                ff_dim: self.ff_dim,
                max_positions: self.max_positions,
                vocab_size: vocab.len(),
                visual_dim,
            },
            pcr_mode: PcrMode::LastLayer,
            pcr_hidden: self.pcr_hidden,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub pcr_mode: PcrMode,
    pub pcr_hidden: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.pcr_mode.validate(&self.encoder)?;
        if self.pcr_hidden == 0 {
            return Err(Error::Config("pcr_hidden must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Serialize, Deserialize)]
struct Meta {
    model: ModelConfig,
    vocab: Vec<String>,
    info: serde_json::Value,
}

/// Encoder plus the three task heads, their parameters and the vocabulary.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar = f64> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub store: ParamStore<S>,
    pub(crate) encoder: Encoder,
    pub(crate) pcr: PcrHead,
    pub(crate) nsp: NspHead,
    pub(crate) mtm: MtmHead,
}

impl<S: Scalar> Model<S> {
    pub fn init(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() != config.encoder.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary has {} entries, encoder expects {}",
                vocab.len(),
                config.encoder.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let e = &config.encoder;
        let encoder = Encoder::init(*e, &mut store, seed)?;
        let pcr = PcrHead::init(
            &mut store,
            config.pcr_mode.width(e),
            config.pcr_hidden,
            seed,
        )?;
        let nsp = NspHead::init(&mut store, e.model_dim, seed)?;
        let mtm = MtmHead::init(&mut store, e.model_dim, e.vocab_size, seed)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            pcr,
            nsp,
            mtm,
        })
    }

    /// Wraps existing parameters, checking every expected name and shape.
    pub fn from_store(
        config: ModelConfig,
        vocab: Vocabulary,
        store: ParamStore<S>,
    ) -> Result<Self> {
        config.validate()?;
        let e = &config.encoder;
        if vocab.len() != e.vocab_size {
            return Err(Error::Checkpoint(
                "vocabulary size does not match the encoder".into(),
            ));
        }
        let encoder = Encoder::bind(*e, &store)?;
        let pcr = PcrHead::bind(&store, config.pcr_mode.width(e), config.pcr_hidden)?;
        let nsp = NspHead::bind(&store, e.model_dim)?;
        let mtm = MtmHead::bind(&store, e.model_dim, e.vocab_size)?;
        Ok(Self {
            config,
            vocab,
            store,
            encoder,
            pcr,
            nsp,
            mtm,
        })
    }

    /// Copy of this model whose coreference head reads `mode` features. The
    /// head is re-initialized when its input width changes; every other
    /// parameter is carried over.
    pub fn with_pcr_mode(&self, mode: PcrMode, seed: u64) -> Result<Self> {
        let config = ModelConfig {
            pcr_mode: mode,
            ..self.config.clone()
        };
        let mut fresh = Self::init(config, self.vocab.clone(), seed)?;
        fresh.store.load_matching(&self.store);
        Ok(fresh)
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    pub fn assembly(&self) -> AssemblyConfig {
        AssemblyConfig {
            max_len: self.config.encoder.max_positions,
        }
    }

    /// Checkpoint bytes; `info` is stored verbatim in the metadata line.
    pub fn to_bytes(&self, info: &serde_json::Value) -> Result<Vec<u8>> {
        let meta = Meta {
            model: self.config.clone(),
            vocab: self.vocab.words().to_vec(),
            info: info.clone(),
        };
        encode_checkpoint(&self.store, &serde_json::to_string(&meta)?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, serde_json::Value)> {
        let (meta, store) = decode_checkpoint::<S>(bytes)?;
        let meta: Meta = serde_json::from_str(&meta)
            .map_err(|e| Error::Checkpoint(format!("bad metadata: {e}")))?;
        let vocab = Vocabulary::from_surfaces(meta.vocab);
        Ok((Self::from_store(meta.model, vocab, store)?, meta.info))
    }

    pub fn save(&self, path: &Path, info: &serde_json::Value) -> Result<()> {
        write_atomic(path, &self.to_bytes(info)?)
    }

    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
