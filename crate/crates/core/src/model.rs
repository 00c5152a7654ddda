//! GPT-2-family forward pass (pre-LN, causal attention, GELU MLP) with a
//! full activation cache and replacement hooks at every internal site.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, Array3, ArrayD, ArrayView1, ArrayViewD, ArrayViewMut2, Axis};

use crate::component::ComponentId;
use crate::config::{Activation, ModelConfig};
use crate::error::{Error, Result};
use crate::weights::{CheckpointManifest, LayerNormWeights, ModelWeights};

// ---- hook sites ----

/// Every observable/replaceable tensor in one forward pass. Head-scoped
/// sites carry the head index by construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum HookSite {
    ResidPre(usize),
    Ln1Out(usize),
    AttnScores { layer: usize, head: usize },
    AttnPattern { layer: usize, head: usize },
    HeadZ { layer: usize, head: usize },
    HeadResult { layer: usize, head: usize },
    AttnOut(usize),
    ResidMid(usize),
    MlpPre(usize),
    MlpOut(usize),
    ResidPost(usize),
    FinalLn,
    Logits,
}

impl HookSite {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (layer, head) = match *self {
            HookSite::ResidPre(l)
            | HookSite::Ln1Out(l)
            | HookSite::AttnOut(l)
            | HookSite::ResidMid(l)
            | HookSite::MlpPre(l)
            | HookSite::MlpOut(l)
            | HookSite::ResidPost(l) => (l, 0),
            HookSite::AttnScores { layer, head }
            | HookSite::AttnPattern { layer, head }
            | HookSite::HeadZ { layer, head }
            | HookSite::HeadResult { layer, head } => (layer, head),
            HookSite::FinalLn | HookSite::Logits => (0, 0),
        };
        if layer >= cfg.n_layers || head >= cfg.n_heads {
            return Err(Error::InvalidSite(format!(
                "{self} out of range for {} layers x {} heads",
                cfg.n_layers, cfg.n_heads
            )));
        }
        Ok(())
    }
}

impl fmt::Display for HookSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            HookSite::ResidPre(l) => write!(f, "resid_pre.{l}"),
            HookSite::Ln1Out(l) => write!(f, "ln1_out.{l}"),
            HookSite::AttnScores { layer, head } => write!(f, "attn_scores.{layer}.{head}"),
            HookSite::AttnPattern { layer, head } => write!(f, "attn_pattern.{layer}.{head}"),
            HookSite::HeadZ { layer, head } => write!(f, "head_z.{layer}.{head}"),
            HookSite::HeadResult { layer, head } => write!(f, "head_result.{layer}.{head}"),
            HookSite::AttnOut(l) => write!(f, "attn_out.{l}"),
            HookSite::ResidMid(l) => write!(f, "resid_mid.{l}"),
            HookSite::MlpPre(l) => write!(f, "mlp_pre.{l}"),
            HookSite::MlpOut(l) => write!(f, "mlp_out.{l}"),
            HookSite::ResidPost(l) => write!(f, "resid_post.{l}"),
            HookSite::FinalLn => write!(f, "final_ln"),
            HookSite::Logits => write!(f, "logits"),
        }
    }
}

impl FromStr for HookSite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidSite(format!("cannot parse `{s}`"));
        let mut parts = s.split('.');
        let name = parts.next().ok_or_else(bad)?;
        let mut idx = || -> Result<usize> {
            parts
                .next()
                .ok_or_else(bad)?
                .parse::<usize>()
                .map_err(|_| bad())
        };
        let site = match name {
            "resid_pre" => HookSite::ResidPre(idx()?),
            "ln1_out" => HookSite::Ln1Out(idx()?),
            "attn_scores" => HookSite::AttnScores { layer: idx()?, head: idx()? },
            "attn_pattern" => HookSite::AttnPattern { layer: idx()?, head: idx()? },
            "head_z" => HookSite::HeadZ { layer: idx()?, head: idx()? },
            "head_result" => HookSite::HeadResult { layer: idx()?, head: idx()? },
            "attn_out" => HookSite::AttnOut(idx()?),
            "resid_mid" => HookSite::ResidMid(idx()?),
            "mlp_pre" => HookSite::MlpPre(idx()?),
            "mlp_out" => HookSite::MlpOut(idx()?),
            "resid_post" => HookSite::ResidPost(idx()?),
            "final_ln" => HookSite::FinalLn,
            "logits" => HookSite::Logits,
            _ => return Err(bad()),
        };
        if parts.next().is_some() {
            return Err(bad());
        }
        Ok(site)
    }
}

// ---- replacements ----

/// A value substituted at a hook site before downstream consumption.
#[derive(Debug, Clone)]
pub enum PatchValue {
    /// Replaces the whole site tensor; shape must match.
    Full(ArrayD<f32>),
    /// Replaces one position's row of a positions × dims site.
    AtPosition { position: usize, value: Array1<f32> },
}

#[derive(Debug, Clone, Default)]
pub struct Replacements {
    map: HashMap<HookSite, PatchValue>,
}

impl Replacements {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn set(&mut self, site: HookSite, value: PatchValue) -> &mut Self {
        self.map.insert(site, value);
        self
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn has(&self, site: HookSite) -> bool {
        self.map.contains_key(&site)
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for site in self.map.keys() {
            site.validate(cfg)?;
        }
        Ok(())
    }

    fn apply(&self, site: HookSite, mut target: ArrayViewMut2<f32>) -> Result<()> {
        let Some(value) = self.map.get(&site) else {
            return Ok(());
        };
        match value {
            PatchValue::Full(v) => {
                if v.shape() != target.shape() {
                    return Err(Error::ShapeMismatch {
                        name: site.to_string(),
                        expected: target.shape().to_vec(),
                        got: v.shape().to_vec(),
                    });
                }
                target.assign(v);
            }
            PatchValue::AtPosition { position, value } => {
                if *position >= target.nrows() || value.len() != target.ncols() {
                    return Err(Error::ShapeMismatch {
                        name: site.to_string(),
                        expected: vec![target.nrows(), target.ncols()],
                        got: vec![*position, value.len()],
                    });
                }
                target.row_mut(*position).assign(value);
            }
        }
        Ok(())
    }
}

// ---- activation cache ----

/// Per-layer activations; head-scoped tensors are indexed [head, ...].
#[derive(Debug, Clone)]
pub struct LayerCache {
    pub resid_pre: Array2<f32>,
    pub ln1_out: Array2<f32>,
    /// [n_heads, positions, positions], pre-softmax, causally masked.
    pub attn_scores: Array3<f32>,
    /// [n_heads, positions, positions], row-stochastic.
    pub attn_pattern: Array3<f32>,
    /// [n_heads, positions, d_head].
    pub head_z: Array3<f32>,
    /// [n_heads, positions, d_model]: z_h · W_O[h], excluding the shared
    /// output bias (attributed to no head).
    pub head_result: Array3<f32>,
    pub attn_out: Array2<f32>,
    pub resid_mid: Array2<f32>,
    pub mlp_pre: Array2<f32>,
    pub mlp_out: Array2<f32>,
    pub resid_post: Array2<f32>,
}

/// Every hook site of one forward pass. Complete by construction.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    pub tokens: Vec<u32>,
    /// Token + positional embedding (equals resid_pre of layer 0 pre-patch).
    pub embed: Array2<f32>,
    pub layers: Vec<LayerCache>,
    pub final_ln: Array2<f32>,
    pub logits: Array2<f32>,
}

impl ActivationCache {
    /// Number of positions.
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn final_logits(&self) -> ArrayView1<'_, f32> {
        self.logits.row(self.logits.nrows() - 1)
    }

    /// View of the tensor at a site; None when out of range.
    pub fn get(&self, site: HookSite) -> Option<ArrayViewD<'_, f32>> {
        site_view(&self.layers, &self.final_ln, &self.logits, site)
    }
}

/// Shared site lookup for full caches and mean caches.
pub(crate) fn site_view<'a>(
    layers: &'a [LayerCache],
    final_ln: &'a Array2<f32>,
    logits: &'a Array2<f32>,
    site: HookSite,
) -> Option<ArrayViewD<'a, f32>> {
    let l = |i: usize| layers.get(i);
    Some(match site {
        HookSite::ResidPre(i) => l(i)?.resid_pre.view().into_dyn(),
        HookSite::Ln1Out(i) => l(i)?.ln1_out.view().into_dyn(),
        HookSite::AttnScores { layer, head } => {
            if head >= l(layer)?.attn_scores.len_of(Axis(0)) {
                return None;
            }
            l(layer)?.attn_scores.index_axis(Axis(0), head).into_dyn()
        }
        HookSite::AttnPattern { layer, head } => {
            if head >= l(layer)?.attn_pattern.len_of(Axis(0)) {
                return None;
            }
            l(layer)?.attn_pattern.index_axis(Axis(0), head).into_dyn()
        }
        HookSite::HeadZ { layer, head } => {
            if head >= l(layer)?.head_z.len_of(Axis(0)) {
                return None;
            }
            l(layer)?.head_z.index_axis(Axis(0), head).into_dyn()
        }
        HookSite::HeadResult { layer, head } => {
            if head >= l(layer)?.head_result.len_of(Axis(0)) {
                return None;
            }
            l(layer)?.head_result.index_axis(Axis(0), head).into_dyn()
        }
        HookSite::AttnOut(i) => l(i)?.attn_out.view().into_dyn(),
        HookSite::ResidMid(i) => l(i)?.resid_mid.view().into_dyn(),
        HookSite::MlpPre(i) => l(i)?.mlp_pre.view().into_dyn(),
        HookSite::MlpOut(i) => l(i)?.mlp_out.view().into_dyn(),
        HookSite::ResidPost(i) => l(i)?.resid_post.view().into_dyn(),
        HookSite::FinalLn => final_ln.view().into_dyn(),
        HookSite::Logits => logits.view().into_dyn(),
    })
}

// ---- numeric kernels (shared with the batched evaluator) ----

pub(crate) fn layer_norm(x: &Array2<f32>, w: &LayerNormWeights, eps: f32) -> Array2<f32> {
    let mut out = x.clone();
    layer_norm_inplace(&mut out, w, eps);
    out
}

pub(crate) fn layer_norm_inplace(x: &mut Array2<f32>, w: &LayerNormWeights, eps: f32) {
    let d = x.ncols() as f32;
    let scale = &w.scale;
    let bias = &w.bias;
    for mut row in x.rows_mut() {
        let mean = row.sum() / d;
        let mut var = 0.0;
        for v in row.iter() {
            let c = v - mean;
            var += c * c;
        }
        var /= d;
        let inv = 1.0 / (var + eps).sqrt();
        for (i, v) in row.iter_mut().enumerate() {
            *v = (*v - mean) * inv * scale[i] + bias[i];
        }
    }
}

/// Row-wise LayerNorm of a single vector.
pub(crate) fn layer_norm_vec(x: &ArrayView1<'_, f32>, w: &LayerNormWeights, eps: f32) -> Array1<f32> {
    let d = x.len() as f32;
    let mean = x.sum() / d;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d;
    let inv = 1.0 / (var + eps).sqrt();
    Array1::from_iter(
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * w.scale[i] + w.bias[i]),
    )
}

pub(crate) fn gelu_inplace(x: &mut Array2<f32>, act: Activation) {
    match act {
        Activation::Erf => {
            let inv_sqrt2 = std::f32::consts::FRAC_1_SQRT_2;
            x.mapv_inplace(|v| 0.5 * v * (1.0 + libm::erff(v * inv_sqrt2)));
        }
        Activation::Tanh => {
            let c = (2.0 / std::f32::consts::PI).sqrt();
            x.mapv_inplace(|v| 0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh()));
        }
    }
}

/// Stable softmax over the last axis.
pub(crate) fn softmax_rows_inplace(x: &mut Array2<f32>) {
    for mut row in x.rows_mut() {
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

pub(crate) fn causal_mask_inplace(scores: &mut Array2<f32>) {
    let n = scores.nrows();
    for i in 0..n {
        for j in i + 1..n {
            scores[[i, j]] = f32::NEG_INFINITY;
        }
    }
}

// ---- the model ----

pub struct Model {
    pub config: ModelConfig,
    pub weights: ModelWeights,
}

impl Model {
    /// Validates weight shapes against the config.
    pub fn new(config: ModelConfig, weights: ModelWeights) -> Result<Self> {
        config.validate()?;
        let (d, dh, h, m) = (config.d_model, config.d_head, config.n_heads, config.d_mlp);
        let checks: [(&str, &[usize], Vec<usize>); 3] = [
            (
                "token_embedding",
                weights.token_embedding.shape(),
                vec![config.n_vocab, d],
            ),
            (
                "positional_embedding",
                weights.positional_embedding.shape(),
                vec![config.n_ctx, d],
            ),
            (
                "unembedding",
                weights.unembedding.shape(),
                vec![config.n_vocab, d],
            ),
        ];
        for (name, got, expected) in checks {
            if got != expected.as_slice() {
                return Err(Error::ShapeMismatch {
                    name: name.into(),
                    expected,
                    got: got.to_vec(),
                });
            }
        }
        if weights.layers.len() != config.n_layers {
            return Err(Error::Config(format!(
                "{} layer weights for n_layers = {}",
                weights.layers.len(),
                config.n_layers
            )));
        }
        for (l, lw) in weights.layers.iter().enumerate() {
            let shapes: [(&str, &[usize], Vec<usize>); 6] = [
                ("w_q", lw.w_q.shape(), vec![h, d, dh]),
                ("w_k", lw.w_k.shape(), vec![h, d, dh]),
                ("w_v", lw.w_v.shape(), vec![h, d, dh]),
                ("w_o", lw.w_o.shape(), vec![h, dh, d]),
                ("w_in", lw.w_in.shape(), vec![d, m]),
                ("w_out", lw.w_out.shape(), vec![m, d]),
            ];
            for (name, got, expected) in shapes {
                if got != expected.as_slice() {
                    return Err(Error::ShapeMismatch {
                        name: format!("h.{l}.{name}"),
                        expected,
                        got: got.to_vec(),
                    });
                }
            }
        }
        Ok(Model { config, weights })
    }

    pub fn load(manifest: &CheckpointManifest) -> Result<Self> {
        let (config, weights) = crate::weights::load_model(manifest)?;
        Model::new(config, weights)
    }

    fn validate_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput);
        }
        if tokens.len() > self.config.n_ctx {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                n_ctx: self.config.n_ctx,
            });
        }
        for &t in tokens {
            if t as usize >= self.config.n_vocab {
                return Err(Error::TokenOutOfRange {
                    id: t,
                    n_vocab: self.config.n_vocab,
                });
            }
        }
        Ok(())
    }

    /// Token + positional embeddings for a validated sequence.
    pub(crate) fn embed(&self, tokens: &[u32]) -> Array2<f32> {
        let mut x = Array2::zeros((tokens.len(), self.config.d_model));
        for (i, &t) in tokens.iter().enumerate() {
            let e = self.weights.token_embedding.row(t as usize);
            let p = self.weights.positional_embedding.row(i);
            let mut row = x.row_mut(i);
            row.assign(&e);
            row += &p;
        }
        x
    }

    pub fn forward_with_cache(&self, tokens: &[u32]) -> Result<ActivationCache> {
        self.forward_hooked(tokens, &Replacements::new())
    }

    /// Forward pass keeping only the running residual, returning the final
    /// position's residual stream before the final LayerNorm. Identical math
    /// to `forward_with_cache`, used for bulk evaluation where the cache and
    /// the full-vocabulary unembedding would dominate the cost.
    pub fn forward_final_resid(&self, tokens: &[u32]) -> Result<Array1<f32>> {
        self.validate_tokens(tokens)?;
        let cfg = &self.config;
        let (n, dh) = (tokens.len(), cfg.d_head);
        let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();
        let mut x = self.embed(tokens);
        for lw in &self.weights.layers {
            let ln1_out = layer_norm(&x, &lw.ln1, cfg.layernorm_epsilon);
            let mut attn_out = Array2::zeros((n, cfg.d_model));
            for h in 0..cfg.n_heads {
                let q = ln1_out.dot(&lw.w_q.index_axis(Axis(0), h)) + &lw.b_q.index_axis(Axis(0), h);
                let k = ln1_out.dot(&lw.w_k.index_axis(Axis(0), h)) + &lw.b_k.index_axis(Axis(0), h);
                let v = ln1_out.dot(&lw.w_v.index_axis(Axis(0), h)) + &lw.b_v.index_axis(Axis(0), h);
                let mut scores = q.dot(&k.t());
                scores *= inv_sqrt_dh;
                causal_mask_inplace(&mut scores);
                softmax_rows_inplace(&mut scores);
                let z = scores.dot(&v);
                attn_out += &z.dot(&lw.w_o.index_axis(Axis(0), h));
            }
            attn_out += &lw.b_o;
            x += &attn_out;
            let ln2_out = layer_norm(&x, &lw.ln2, cfg.layernorm_epsilon);
            let mut hidden = ln2_out.dot(&lw.w_in) + &lw.b_in;
            gelu_inplace(&mut hidden, cfg.activation);
            x += &(hidden.dot(&lw.w_out) + &lw.b_out);
        }
        Ok(x.row(n - 1).to_owned())
    }

    /// Final LayerNorm plus unembedding restricted to two token columns.
    pub fn readout_pair(&self, resid_final: &ArrayView1<'_, f32>, ids: (u32, u32)) -> Result<(f32, f32)> {
        for id in [ids.0, ids.1] {
            if id as usize >= self.config.n_vocab {
                return Err(Error::TokenOutOfRange { id, n_vocab: self.config.n_vocab });
            }
        }
        let x = layer_norm_vec(resid_final, &self.weights.final_ln, self.config.layernorm_epsilon);
        Ok((
            x.dot(&self.weights.unembedding.row(ids.0 as usize)),
            x.dot(&self.weights.unembedding.row(ids.1 as usize)),
        ))
    }

    /// Forward pass with each listed site's value replaced before downstream
    /// consumption. The cache records post-replacement values, i.e. exactly
    /// what downstream computation consumed.
    pub fn forward_hooked(&self, tokens: &[u32], reps: &Replacements) -> Result<ActivationCache> {
        self.validate_tokens(tokens)?;
        reps.validate(&self.config)?;
        let cfg = &self.config;
        let (n, d, dh) = (tokens.len(), cfg.d_model, cfg.d_head);
        let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();

        let embed = self.embed(tokens);
        let mut x = embed.clone();
        let mut layers = Vec::with_capacity(cfg.n_layers);

        for (l, lw) in self.weights.layers.iter().enumerate() {
            let mut resid_pre = x;
            reps.apply(HookSite::ResidPre(l), resid_pre.view_mut())?;

            let mut ln1_out = layer_norm(&resid_pre, &lw.ln1, cfg.layernorm_epsilon);
            reps.apply(HookSite::Ln1Out(l), ln1_out.view_mut())?;

            let mut attn_scores = Array3::zeros((cfg.n_heads, n, n));
            let mut attn_pattern = Array3::zeros((cfg.n_heads, n, n));
            let mut head_z = Array3::zeros((cfg.n_heads, n, dh));
            let mut head_result = Array3::zeros((cfg.n_heads, n, d));
            let mut attn_out = Array2::zeros((n, d));

            for h in 0..cfg.n_heads {
                let q = ln1_out.dot(&lw.w_q.index_axis(Axis(0), h)) + &lw.b_q.index_axis(Axis(0), h);
                let k = ln1_out.dot(&lw.w_k.index_axis(Axis(0), h)) + &lw.b_k.index_axis(Axis(0), h);
                let v = ln1_out.dot(&lw.w_v.index_axis(Axis(0), h)) + &lw.b_v.index_axis(Axis(0), h);

                let mut scores = q.dot(&k.t());
                scores *= inv_sqrt_dh;
                causal_mask_inplace(&mut scores);
                reps.apply(HookSite::AttnScores { layer: l, head: h }, scores.view_mut())?;

                let mut pattern = scores.clone();
                softmax_rows_inplace(&mut pattern);
                reps.apply(HookSite::AttnPattern { layer: l, head: h }, pattern.view_mut())?;

                let mut z = pattern.dot(&v);
                reps.apply(HookSite::HeadZ { layer: l, head: h }, z.view_mut())?;

                let mut result = z.dot(&lw.w_o.index_axis(Axis(0), h));
                reps.apply(HookSite::HeadResult { layer: l, head: h }, result.view_mut())?;

                attn_out += &result;
                attn_scores.slice_mut(s![h, .., ..]).assign(&scores);
                attn_pattern.slice_mut(s![h, .., ..]).assign(&pattern);
                head_z.slice_mut(s![h, .., ..]).assign(&z);
                head_result.slice_mut(s![h, .., ..]).assign(&result);
            }

            attn_out += &lw.b_o;
            reps.apply(HookSite::AttnOut(l), attn_out.view_mut())?;

            let mut resid_mid = &resid_pre + &attn_out;
            reps.apply(HookSite::ResidMid(l), resid_mid.view_mut())?;

            let ln2_out = layer_norm(&resid_mid, &lw.ln2, cfg.layernorm_epsilon);
            let mut mlp_pre = ln2_out.dot(&lw.w_in) + &lw.b_in;
            reps.apply(HookSite::MlpPre(l), mlp_pre.view_mut())?;

            let mut hidden = mlp_pre.clone();
            gelu_inplace(&mut hidden, cfg.activation);
            let mut mlp_out = hidden.dot(&lw.w_out) + &lw.b_out;
            reps.apply(HookSite::MlpOut(l), mlp_out.view_mut())?;

            let mut resid_post = &resid_mid + &mlp_out;
            reps.apply(HookSite::ResidPost(l), resid_post.view_mut())?;

            x = resid_post.clone();
            layers.push(LayerCache {
                resid_pre,
                ln1_out,
                attn_scores,
                attn_pattern,
                head_z,
                head_result,
                attn_out,
                resid_mid,
                mlp_pre,
                mlp_out,
                resid_post,
            });
        }

        let mut final_ln = layer_norm(&x, &self.weights.final_ln, cfg.layernorm_epsilon);
        reps.apply(HookSite::FinalLn, final_ln.view_mut())?;

        let mut logits = final_ln.dot(&self.weights.unembedding.t());
        reps.apply(HookSite::Logits, logits.view_mut())?;

        Ok(ActivationCache {
            tokens: tokens.to_vec(),
            embed,
            layers,
            final_ln,
            logits,
        })
    }

    /// `forward_hooked` keeping only the running residual: returns the final
    /// position's residual before the final LayerNorm. Same operation order as
    /// the caching pass, so results agree bitwise. Replacements at `FinalLn`
    /// or `Logits` act after the returned value and are rejected.
    pub fn forward_hooked_final_resid(
        &self,
        tokens: &[u32],
        reps: &Replacements,
    ) -> Result<Array1<f32>> {
        self.validate_tokens(tokens)?;
        reps.validate(&self.config)?;
        if reps.has(HookSite::FinalLn) || reps.has(HookSite::Logits) {
            return Err(Error::InvalidArgument(
                "replacements at final_ln/logits require forward_hooked".into(),
            ));
        }
        let cfg = &self.config;
        let (n, dh) = (tokens.len(), cfg.d_head);
        let inv_sqrt_dh = 1.0 / (dh as f32).sqrt();
        let mut x = self.embed(tokens);
        for (l, lw) in self.weights.layers.iter().enumerate() {
            reps.apply(HookSite::ResidPre(l), x.view_mut())?;
            let mut ln1_out = layer_norm(&x, &lw.ln1, cfg.layernorm_epsilon);
            reps.apply(HookSite::Ln1Out(l), ln1_out.view_mut())?;
            let mut attn_out = Array2::zeros((n, cfg.d_model));
            for h in 0..cfg.n_heads {
                let q = ln1_out.dot(&lw.w_q.index_axis(Axis(0), h)) + &lw.b_q.index_axis(Axis(0), h);
                let k = ln1_out.dot(&lw.w_k.index_axis(Axis(0), h)) + &lw.b_k.index_axis(Axis(0), h);
                let v = ln1_out.dot(&lw.w_v.index_axis(Axis(0), h)) + &lw.b_v.index_axis(Axis(0), h);
                let mut scores = q.dot(&k.t());
                scores *= inv_sqrt_dh;
                causal_mask_inplace(&mut scores);
                reps.apply(HookSite::AttnScores { layer: l, head: h }, scores.view_mut())?;
                softmax_rows_inplace(&mut scores);
                reps.apply(HookSite::AttnPattern { layer: l, head: h }, scores.view_mut())?;
                let mut z = scores.dot(&v);
                reps.apply(HookSite::HeadZ { layer: l, head: h }, z.view_mut())?;
                let mut result = z.dot(&lw.w_o.index_axis(Axis(0), h));
                reps.apply(HookSite::HeadResult { layer: l, head: h }, result.view_mut())?;
                attn_out += &result;
            }
            attn_out += &lw.b_o;
            reps.apply(HookSite::AttnOut(l), attn_out.view_mut())?;
            x += &attn_out;
            reps.apply(HookSite::ResidMid(l), x.view_mut())?;
            let ln2_out = layer_norm(&x, &lw.ln2, cfg.layernorm_epsilon);
            let mut mlp_pre = ln2_out.dot(&lw.w_in) + &lw.b_in;
            reps.apply(HookSite::MlpPre(l), mlp_pre.view_mut())?;
            gelu_inplace(&mut mlp_pre, cfg.activation);
            let mut mlp_out = mlp_pre.dot(&lw.w_out) + &lw.b_out;
            reps.apply(HookSite::MlpOut(l), mlp_out.view_mut())?;
            x += &mlp_out;
            reps.apply(HookSite::ResidPost(l), x.view_mut())?;
        }
        Ok(x.row(n - 1).to_owned())
    }
}

// ---- residual decomposition ----

/// Final-position residual contributions per component. The `Embed` entry
/// carries the token + positional embedding plus every layer's shared
/// attention output bias (which belongs to no head), so the vector sum of all
/// entries reconstructs the final resid_post exactly up to float accumulation.
pub fn decompose_final_residual(cache: &ActivationCache) -> Vec<(ComponentId, Array1<f32>)> {
    decompose_residual_at(&cache.embed, &cache.layers, cache.len() - 1)
}

/// Same decomposition at an arbitrary position, shared with mean caches.
pub(crate) fn decompose_residual_at(
    embed: &Array2<f32>,
    layers: &[LayerCache],
    p: usize,
) -> Vec<(ComponentId, Array1<f32>)> {
    let n_heads = layers
        .first()
        .map(|l| l.head_result.len_of(Axis(0)))
        .unwrap_or(0);

    let mut embed_part = embed.row(p).to_owned();
    for layer in layers {
        embed_part += &layer.attn_out.row(p);
        for h in 0..n_heads {
            embed_part -= &layer.head_result.slice(s![h, p, ..]);
        }
    }

    let mut out = Vec::with_capacity(1 + layers.len() * (n_heads + 1));
    out.push((ComponentId::Embed, embed_part));
    for (l, layer) in layers.iter().enumerate() {
        for h in 0..n_heads {
            out.push((
                ComponentId::head(l, h),
                layer.head_result.slice(s![h, p, ..]).to_owned(),
            ));
        }
        out.push((ComponentId::mlp(l), layer.mlp_out.row(p).to_owned()));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hook_sites_render_and_parse() {
        let sites = [
            HookSite::ResidPre(3),
            HookSite::AttnPattern { layer: 7, head: 2 },
            HookSite::HeadResult { layer: 0, head: 11 },
            HookSite::MlpOut(9),
            HookSite::FinalLn,
            HookSite::Logits,
        ];
        for site in sites {
            assert_eq!(site.to_string().parse::<HookSite>().unwrap(), site);
        }
        assert!("resid_pre".parse::<HookSite>().is_err());
        assert!("attn_pattern.1".parse::<HookSite>().is_err());
        assert!("resid_pre.1.2".parse::<HookSite>().is_err());
    }

    #[test]
    fn softmax_rows_are_stochastic() {
        let mut x = ndarray::array![[0.0, f32::NEG_INFINITY], [3.0, 3.0]];
        softmax_rows_inplace(&mut x);
        assert!((x[[0, 0]] - 1.0).abs() < 1e-6);
        assert_eq!(x[[0, 1]], 0.0);
        assert!((x[[1, 0]] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn gelu_variants_agree_loosely_and_match_known_values() {
        // erf form at x = 1.0: 0.5 * (1 + erf(1/sqrt(2))) = 0.841345
        let mut x = ndarray::array![[1.0f32]];
        gelu_inplace(&mut x, Activation::Erf);
        assert!((x[[0, 0]] - 0.841345).abs() < 1e-5);
        let mut y = ndarray::array![[1.0f32]];
        gelu_inplace(&mut y, Activation::Tanh);
        assert!((y[[0, 0]] - 0.841192).abs() < 1e-5);
    }
}
