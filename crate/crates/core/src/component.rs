//! Identifiers for the residual-stream components of a model: attention
//! heads, MLPs, and the embedding.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};

/// Heads render as `L.H` (head 2 of layer 7 is "7.2"), MLPs as `mlpL`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ComponentId {
    Embed,
    AttnHead { layer: usize, head: usize },
    Mlp { layer: usize },
}

impl ComponentId {
    pub fn head(layer: usize, head: usize) -> Self {
        ComponentId::AttnHead { layer, head }
    }

    pub fn mlp(layer: usize) -> Self {
        ComponentId::Mlp { layer }
    }

    /// Layer the component writes its output at; the embedding acts before
    /// layer 0.
    pub fn layer(&self) -> Option<usize> {
        match self {
            ComponentId::Embed => None,
            ComponentId::AttnHead { layer, .. } | ComponentId::Mlp { layer } => Some(*layer),
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let ok = match self {
            ComponentId::Embed => true,
            ComponentId::AttnHead { layer, head } => {
                *layer < cfg.n_layers && *head < cfg.n_heads
            }
            ComponentId::Mlp { layer } => *layer < cfg.n_layers,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidComponent(format!(
                "{self} out of range for {} layers x {} heads",
                cfg.n_layers, cfg.n_heads
            )))
        }
    }

    pub fn kind_str(&self) -> &'static str {
        match self {
            ComponentId::Embed => "embed",
            ComponentId::AttnHead { .. } => "head",
            ComponentId::Mlp { .. } => "mlp",
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ComponentId::Embed => write!(f, "embed"),
            ComponentId::AttnHead { layer, head } => write!(f, "{layer}.{head}"),
            ComponentId::Mlp { layer } => write!(f, "mlp{layer}"),
        }
    }
}

impl FromStr for ComponentId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidComponent(format!("cannot parse `{s}`"));
        if s == "embed" {
            return Ok(ComponentId::Embed);
        }
        if let Some(rest) = s.strip_prefix("mlp") {
            let rest = rest.strip_prefix('.').unwrap_or(rest);
            return rest.parse().map(ComponentId::mlp).map_err(|_| bad());
        }
        let (l, h) = s.split_once('.').ok_or_else(bad)?;
        Ok(ComponentId::head(
            l.parse().map_err(|_| bad())?,
            h.parse().map_err(|_| bad())?,
        ))
    }
}

/// All heads in layer-major order, then all MLPs.
pub fn all_heads_and_mlps(cfg: &ModelConfig) -> Vec<ComponentId> {
    let mut out = Vec::with_capacity(cfg.n_layers * (cfg.n_heads + 1));
    for layer in 0..cfg.n_layers {
        for head in 0..cfg.n_heads {
            out.push(ComponentId::head(layer, head));
        }
    }
    out.extend((0..cfg.n_layers).map(ComponentId::mlp));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_and_parses() {
        for (id, text) in [
            (ComponentId::head(7, 2), "7.2"),
            (ComponentId::mlp(8), "mlp8"),
            (ComponentId::Embed, "embed"),
        ] {
            assert_eq!(id.to_string(), text);
            assert_eq!(text.parse::<ComponentId>().unwrap(), id);
        }
        assert_eq!("mlp.8".parse::<ComponentId>().unwrap(), ComponentId::mlp(8));
        assert!("7:2".parse::<ComponentId>().is_err());
        assert!("x.y".parse::<ComponentId>().is_err());
    }
}
