use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::retrieval::{RetrievalConfig, RetrievalMethod, Similarity};

/// The ablation ladder, from the plain GNN to the full model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AblationVariant {
    /// Base GNN, no hyperedge modules.
    Vanilla,
    /// Hyper-U with an attention-free mean combine.
    HU,
    /// Hyper-U with multi-head attention.
    HUplus,
    /// HUplus + path-based Hyper-I, no distance bias.
    PHI,
    /// HUplus + embedding-based Hyper-I, no distance bias.
    EHI,
    /// EHI + shortest-path distance bias.
    EHIplus,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 6] = [
        AblationVariant::Vanilla,
        AblationVariant::HU,
        AblationVariant::HUplus,
        AblationVariant::PHI,
        AblationVariant::EHI,
        AblationVariant::EHIplus,
    ];

    pub fn has_hyper_u(self) -> bool {
        self != AblationVariant::Vanilla
    }

    pub fn hyper_u_attention(self) -> bool {
        self.has_hyper_u() && self != AblationVariant::HU
    }

    pub fn hyper_i(self) -> Option<RetrievalMethod> {
        match self {
            AblationVariant::PHI => Some(RetrievalMethod::PathBased),
            AblationVariant::EHI | AblationVariant::EHIplus => {
                Some(RetrievalMethod::EmbeddingBased)
            }
            _ => None,
        }
    }

    pub fn distance_bias(self) -> bool {
        self == AblationVariant::EHIplus
    }

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Vanilla => "Vanilla",
            AblationVariant::HU => "HU",
            AblationVariant::HUplus => "HUplus",
            AblationVariant::PHI => "PHI",
            AblationVariant::EHI => "EHI",
            AblationVariant::EHIplus => "EHIplus",
        }
    }
}

impl fmt::Display for AblationVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().replace('+', "plus").to_ascii_lowercase();
        AblationVariant::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Output width of each message-passing layer; the embedding width is
    /// `dims[0]`, and the layer count is `dims.len()`.
    pub dims: Vec<usize>,
    pub heads: usize,
    /// Neighbors sampled per node and hop during training.
    pub neighbors: usize,
    pub tau: f64,
    pub d_max: u8,
    pub variant: AblationVariant,
    pub retrieval: RetrievalConfig,
    /// Score function between user and item representations.
    pub score: Similarity,
    /// Skip the hidden-layer nonlinearity.
    pub linear: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dims: vec![128, 64],
            heads: 4,
            neighbors: 10,
            tau: 0.2,
            d_max: 6,
            variant: AblationVariant::EHIplus,
            retrieval: RetrievalConfig::default(),
            score: Similarity::InnerProduct,
            linear: false,
        }
    }
}

/// Slope of the leaky rectifier between hidden layers.
pub const LEAKY_SLOPE: f64 = 0.01;

impl ModelConfig {
    pub fn with_variant(mut self, variant: AblationVariant) -> Self {
        self.variant = variant;
        if let Some(method) = variant.hyper_i() {
            self.retrieval.method = method;
        }
        self
    }

    pub fn layers(&self) -> usize {
        self.dims.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.dims[0]
    }

    /// Input width of layer `l` (1-based).
    pub fn in_dim(&self, l: usize) -> usize {
        if l == 1 {
            self.dims[0]
        } else {
            self.dims[l - 2]
        }
    }

    /// Output width of layer `l` (1-based).
    pub fn out_dim(&self, l: usize) -> usize {
        self.dims[l - 1]
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.is_empty() || self.dims.contains(&0) {
            return Err(Error::Config(
                "dims must list at least one positive width".into(),
            ));
        }
        if self.heads == 0 {
            return Err(Error::Config("heads must be at least 1".into()));
        }
        if let Some(&bad) = self.dims.iter().find(|&&d| d % self.heads != 0) {
            return Err(Error::Config(format!(
                "heads {} do not divide width {bad}",
                self.heads
            )));
        }
        if self.neighbors == 0 {
            return Err(Error::Config("neighbors must be at least 1".into()));
        }
        if !(self.tau > 0.0) {
            return Err(Error::Config("tau must be positive".into()));
        }
        if self.d_max == 0 || self.d_max > 64 {
            return Err(Error::Config("d_max must be in 1..=64".into()));
        }
        if self.retrieval.k == 0 || self.retrieval.refresh_interval == 0 {
            return Err(Error::Config(
                "k and refresh_interval must be at least 1".into(),
            ));
        }
        if let Some(method) = self.variant.hyper_i() {
            if method != self.retrieval.method {
                return Err(Error::Config(format!(
                    "variant {} needs {method:?} retrieval, config has {:?}",
                    self.variant, self.retrieval.method
                )));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_names_parse_with_plus_sign() {
        assert_eq!(
            "EHI+".parse::<AblationVariant>().unwrap(),
            AblationVariant::EHIplus
        );
        assert_eq!(
            "huplus".parse::<AblationVariant>().unwrap(),
            AblationVariant::HUplus
        );
        assert!("bogus".parse::<AblationVariant>().is_err());
    }

    #[test]
    fn layer_widths_follow_dims() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.layers(), 2);
        assert_eq!((cfg.in_dim(1), cfg.out_dim(1)), (128, 128));
        assert_eq!((cfg.in_dim(2), cfg.out_dim(2)), (128, 64));
    }

    #[test]
    fn heads_must_divide_widths() {
        let cfg = ModelConfig {
            heads: 3,
            ..ModelConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}
