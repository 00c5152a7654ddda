//! Model hyperparameters, read from a checkpoint's JSON config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// GELU variant. The released GPT-2 checkpoints use the tanh approximation
/// (`activation_function: "gelu_new"` in their config); `Erf` is the exact form.
/// Serialized with the published names so written configs re-parse.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    #[serde(rename = "gelu")]
    Erf,
    #[serde(rename = "gelu_new")]
    Tanh,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub d_head: usize,
    pub d_mlp: usize,
    pub n_ctx: usize,
    pub n_vocab: usize,
    pub layernorm_epsilon: f32,
    pub activation: Activation,
}

/// Accepts both this crate's canonical keys and the keys found in published
/// GPT-2 config files (`n_layer`, `n_embd`, `vocab_size`, ...). Derived fields
/// (`d_head`, `d_mlp`) may be omitted.
#[derive(Deserialize)]
struct RawConfig {
    #[serde(alias = "n_layer")]
    n_layers: usize,
    #[serde(alias = "n_head")]
    n_heads: usize,
    #[serde(alias = "n_embd")]
    d_model: usize,
    d_head: Option<usize>,
    #[serde(alias = "n_inner")]
    d_mlp: Option<usize>,
    // published configs carry both of these, so they cannot share an alias
    n_ctx: Option<usize>,
    n_positions: Option<usize>,
    #[serde(alias = "vocab_size")]
    n_vocab: usize,
    #[serde(alias = "layer_norm_epsilon")]
    layernorm_epsilon: Option<f32>,
    #[serde(alias = "activation_function")]
    activation: Option<String>,
}

impl ModelConfig {
    /// The GPT-2 small (124M) configuration.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            n_layers: 12,
            n_heads: 12,
            d_model: 768,
            d_head: 64,
            d_mlp: 3072,
            n_ctx: 1024,
            n_vocab: 50257,
            layernorm_epsilon: 1e-5,
            activation: Activation::Tanh,
        }
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let raw: RawConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let activation = match raw.activation.as_deref() {
            None | Some("gelu") => Activation::Erf,
            Some("gelu_new") | Some("gelu_pytorch_tanh") => Activation::Tanh,
            Some(other) => {
                return Err(Error::Config(format!(
                    "unsupported activation function `{other}`"
                )))
            }
        };
        if raw.n_heads == 0 {
            return Err(Error::Config("n_heads must be nonzero".into()));
        }
        let n_ctx = match (raw.n_ctx, raw.n_positions) {
            (Some(a), Some(b)) if a != b => {
                return Err(Error::Config(format!(
                    "n_ctx ({a}) disagrees with n_positions ({b})"
                )))
            }
            (Some(a), _) | (None, Some(a)) => a,
            (None, None) => return Err(Error::Config("missing n_ctx/n_positions".into())),
        };
        let cfg = ModelConfig {
            n_layers: raw.n_layers,
            n_heads: raw.n_heads,
            d_model: raw.d_model,
            d_head: raw.d_head.unwrap_or(raw.d_model / raw.n_heads),
            d_mlp: raw.d_mlp.unwrap_or(4 * raw.d_model),
            n_ctx,
            n_vocab: raw.n_vocab,
            layernorm_epsilon: raw.layernorm_epsilon.unwrap_or(1e-5),
            activation,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_model", self.d_model),
            ("d_head", self.d_head),
            ("d_mlp", self.d_mlp),
            ("n_ctx", self.n_ctx),
            ("n_vocab", self.n_vocab),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be nonzero")));
            }
        }
        if self.d_head * self.n_heads != self.d_model {
            return Err(Error::Config(format!(
                "d_head ({}) x n_heads ({}) must equal d_model ({})",
                self.d_head, self.n_heads, self.d_model
            )));
        }
        if !(self.layernorm_epsilon > 0.0) {
            return Err(Error::Config("layernorm_epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_published_gpt2_keys() {
        // published files carry n_ctx and n_positions together
        let json = r#"{
            "activation_function": "gelu_new", "n_embd": 768, "n_head": 12,
            "n_layer": 12, "n_ctx": 1024, "n_positions": 1024,
            "vocab_size": 50257, "layer_norm_epsilon": 1e-05, "model_type": "gpt2"
        }"#;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, json).unwrap();
        let cfg = ModelConfig::from_json_file(&path).unwrap();
        assert_eq!(cfg, ModelConfig::gpt2_small());
    }

    #[test]
    fn parses_canonical_keys() {
        let cfg = ModelConfig::gpt2_small();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, cfg.to_json()).unwrap();
        assert_eq!(ModelConfig::from_json_file(&path).unwrap(), cfg);
    }

    #[test]
    fn rejects_inconsistent_head_dims() {
        let mut cfg = ModelConfig::gpt2_small();
        cfg.d_head = 63;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
