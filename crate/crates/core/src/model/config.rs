use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A feature stream of a trailer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Clip,
    Ocr,
    Asr,
    Audiotag,
    Musicnet,
}

impl Modality {
    pub const ALL: [Modality; 5] = [
        Modality::Clip,
        Modality::Ocr,
        Modality::Asr,
        Modality::Audiotag,
        Modality::Musicnet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Modality::Clip => "clip",
            Modality::Ocr => "ocr",
            Modality::Asr => "asr",
            Modality::Audiotag => "audiotag",
            Modality::Musicnet => "musicnet",
        }
    }

    /// Embedding width produced by the upstream extractor.
    pub fn feature_dim(self) -> usize {
        match self {
            Modality::Clip => 512,
            Modality::Ocr | Modality::Asr => 768,
            Modality::Audiotag => 128,
            Modality::Musicnet => 64,
        }
    }

    /// Training sequence length (upper box-plot whisker of the corpus).
    pub fn default_max_len(self) -> usize {
        match self {
            Modality::Clip => 216,
            Modality::Ocr => 64,
            Modality::Asr => 86,
            Modality::Audiotag => 140,
            Modality::Musicnet => 18,
        }
    }

    pub fn is_textual(self) -> bool {
        matches!(self, Modality::Ocr | Modality::Asr)
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Modality::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Data(format!("unknown modality {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModalitySpec {
    pub name: Modality,
    pub input_dim: usize,
    pub train_max_len: usize,
    #[serde(default)]
    pub temporal_average: bool,
}

impl ModalitySpec {
    pub fn standard(modality: Modality) -> Self {
        ModalitySpec {
            name: modality,
            input_dim: modality.feature_dim(),
            train_max_len: modality.default_max_len(),
            temporal_average: false,
        }
    }

    pub fn averaged(mut self, on: bool) -> Self {
        self.temporal_average = on;
        self
    }

    pub fn with_max_len(mut self, len: usize) -> Self {
        self.train_max_len = len;
        self
    }

    /// Whether this spec uses the extractor's native width and the corpus
    /// sequence length.
    pub fn is_standard(&self) -> bool {
        self.input_dim == self.name.feature_dim() && self.train_max_len == self.name.default_max_len()
    }
}

pub fn standard_modalities() -> Vec<ModalitySpec> {
    Modality::ALL.into_iter().map(ModalitySpec::standard).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    Mlp,
    SingleTransformer,
    MultiTransformer,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::SingleTransformer => "single_transformer",
            Architecture::MultiTransformer => "multi_transformer",
        }
    }

    pub fn is_transformer(self) -> bool {
        !matches!(self, Architecture::Mlp)
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "single_transformer" | "single" => Ok(Architecture::SingleTransformer),
            "multi_transformer" | "multi" => Ok(Architecture::MultiTransformer),
            _ => Err(Error::Config(format!("unknown architecture {s:?}"))),
        }
    }
}

fn default_ffn_mult() -> usize {
    4
}

fn default_ln_eps() -> f64 {
    1e-5
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub architecture: Architecture,
    pub model_dim: usize,
    /// Hidden layers (MLP) or encoder layers per transformer.
    pub layers: usize,
    pub heads: usize,
    pub dropout: f64,
    /// Feed-forward width as a multiple of `model_dim`.
    #[serde(default = "default_ffn_mult")]
    pub ffn_mult: usize,
    /// Pre-norm sublayers when true; post-norm (residual, then norm) otherwise.
    #[serde(default)]
    pub norm_first: bool,
    #[serde(default = "default_ln_eps")]
    pub layer_norm_eps: f64,
    pub modalities: Vec<ModalitySpec>,
    /// Weight of the positive-label term in the loss.
    pub pos_weight: f64,
    pub threshold: f64,
}

impl ModelConfig {
    /// The published configurations: MLP (1 layer, dim 256), single
    /// transformer (2 layers, 8 heads, dim 256), multi transformer
    /// (1 layer each, 8 heads, dim 128, averaged OCR/ASR).
    pub fn preset(architecture: Architecture) -> Self {
        let (model_dim, layers, heads) = match architecture {
            Architecture::Mlp => (256, 1, 1),
            Architecture::SingleTransformer => (256, 2, 8),
            Architecture::MultiTransformer => (128, 1, 8),
        };
        let modalities = standard_modalities()
            .into_iter()
            .map(|m| {
                let avg = architecture == Architecture::MultiTransformer && m.name.is_textual();
                m.averaged(avg)
            })
            .collect();
        ModelConfig {
            architecture,
            model_dim,
            layers,
            heads,
            dropout: 0.5,
            ffn_mult: default_ffn_mult(),
            norm_first: false,
            layer_norm_eps: default_ln_eps(),
            modalities,
            pos_weight: 0.25,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.modalities.is_empty() {
            return err("at least one modality must be enabled".into());
        }
        for (i, m) in self.modalities.iter().enumerate() {
            if self.modalities[..i].iter().any(|o| o.name == m.name) {
                return err(format!("modality {} listed twice", m.name));
            }
            if m.input_dim == 0 {
                return err(format!("modality {} has zero input_dim", m.name));
            }
            if m.train_max_len == 0 && !m.temporal_average && self.architecture.is_transformer() {
                return err(format!("modality {} has zero train_max_len", m.name));
            }
        }
        if self.model_dim == 0 || self.layers == 0 {
            return err("model_dim and layers must be positive".into());
        }
        if self.architecture.is_transformer() && (self.heads == 0 || self.model_dim % self.heads != 0) {
            return err(format!(
                "model_dim {} is not divisible by heads {}",
                self.model_dim, self.heads
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(self.pos_weight > 0.0) || !self.pos_weight.is_finite() {
            return err(format!("pos_weight must be positive, got {}", self.pos_weight));
        }
        if self.ffn_mult == 0 {
            return err("ffn_mult must be positive".into());
        }
        Ok(())
    }

    pub fn modality(&self, m: Modality) -> Option<&ModalitySpec> {
        self.modalities.iter().find(|s| s.name == m)
    }

    /// Keeps only `keep`, in the order given, with the given averaging flags.
    pub fn restricted(&self, keep: &[(Modality, bool)]) -> Result<Self> {
        let mut out = self.clone();
        out.modalities = keep
            .iter()
            .map(|&(m, avg)| {
                self.modality(m)
                    .map(|s| s.averaged(avg))
                    .ok_or_else(|| Error::Config(format!("modality {m} not in base config")))
            })
            .collect::<Result<_>>()?;
        Ok(out)
    }
}
