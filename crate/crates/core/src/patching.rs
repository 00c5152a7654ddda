//! Mean ablation and path patching: direct component-to-logits effects,
//! query/key/value input patching, and the two MLP effect modes.
//!
//! All sweeps share one readout convention: the patched final-position
//! residual goes through a recomputed final LayerNorm and the answer-pair
//! unembedding columns, so clean and patched logit differences differ only
//! by the patch itself.

use std::collections::HashMap;
use std::fmt;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayViewD, Axis};
use rayon::prelude::*;

use crate::component::ComponentId;
use crate::dataset::SyllogismDataset;
use crate::error::{Error, Result};
use crate::model::{
    decompose_final_residual, decompose_residual_at, layer_norm, layer_norm_vec, site_view,
    ActivationCache, HookSite, LayerCache, Model, PatchValue, Replacements,
};

// ---- mean cache ----

/// Position-wise arithmetic mean of every activation site over a set of
/// equal-length token sequences, f64-accumulated.
#[derive(Debug, Clone)]
pub struct MeanCache {
    pub n_sequences: usize,
    pub seq_len: usize,
    /// Mean token + positional embedding.
    pub embed: Array2<f32>,
    pub layers: Vec<LayerCache>,
    pub final_ln: Array2<f32>,
    pub logits: Array2<f32>,
}

impl MeanCache {
    /// View of the mean tensor at a site; None when out of range.
    pub fn get(&self, site: HookSite) -> Option<ArrayViewD<'_, f32>> {
        site_view(&self.layers, &self.final_ln, &self.logits, site)
    }

    /// Final-position residual contributions of the mean run. Decomposition
    /// is linear, so this equals the mean of per-sequence decompositions.
    pub fn final_contributions(&self) -> Vec<(ComponentId, Array1<f32>)> {
        decompose_residual_at(&self.embed, &self.layers, self.seq_len - 1)
    }
}

struct LayerSums {
    resid_pre: Array2<f64>,
    ln1_out: Array2<f64>,
    attn_scores: Array3<f64>,
    attn_pattern: Array3<f64>,
    head_z: Array3<f64>,
    head_result: Array3<f64>,
    attn_out: Array2<f64>,
    resid_mid: Array2<f64>,
    mlp_pre: Array2<f64>,
    mlp_out: Array2<f64>,
    resid_post: Array2<f64>,
}

fn add2(acc: &mut Array2<f64>, x: &Array2<f32>) {
    acc.zip_mut_with(x, |a, &b| *a += f64::from(b));
}

fn add3(acc: &mut Array3<f64>, x: &Array3<f32>) {
    acc.zip_mut_with(x, |a, &b| *a += f64::from(b));
}

fn mean2(acc: &Array2<f64>, inv: f64) -> Array2<f32> {
    acc.mapv(|v| (v * inv) as f32)
}

fn mean3(acc: &Array3<f64>, inv: f64) -> Array3<f32> {
    acc.mapv(|v| (v * inv) as f32)
}

impl LayerSums {
    fn zeros_like(c: &LayerCache) -> Self {
        LayerSums {
            resid_pre: Array2::zeros(c.resid_pre.raw_dim()),
            ln1_out: Array2::zeros(c.ln1_out.raw_dim()),
            attn_scores: Array3::zeros(c.attn_scores.raw_dim()),
            attn_pattern: Array3::zeros(c.attn_pattern.raw_dim()),
            head_z: Array3::zeros(c.head_z.raw_dim()),
            head_result: Array3::zeros(c.head_result.raw_dim()),
            attn_out: Array2::zeros(c.attn_out.raw_dim()),
            resid_mid: Array2::zeros(c.resid_mid.raw_dim()),
            mlp_pre: Array2::zeros(c.mlp_pre.raw_dim()),
            mlp_out: Array2::zeros(c.mlp_out.raw_dim()),
            resid_post: Array2::zeros(c.resid_post.raw_dim()),
        }
    }

    fn add(&mut self, c: &LayerCache) {
        add2(&mut self.resid_pre, &c.resid_pre);
        add2(&mut self.ln1_out, &c.ln1_out);
        add3(&mut self.attn_scores, &c.attn_scores);
        add3(&mut self.attn_pattern, &c.attn_pattern);
        add3(&mut self.head_z, &c.head_z);
        add3(&mut self.head_result, &c.head_result);
        add2(&mut self.attn_out, &c.attn_out);
        add2(&mut self.resid_mid, &c.resid_mid);
        add2(&mut self.mlp_pre, &c.mlp_pre);
        add2(&mut self.mlp_out, &c.mlp_out);
        add2(&mut self.resid_post, &c.resid_post);
    }

    fn mean(&self, inv: f64) -> LayerCache {
        LayerCache {
            resid_pre: mean2(&self.resid_pre, inv),
            ln1_out: mean2(&self.ln1_out, inv),
            attn_scores: mean3(&self.attn_scores, inv),
            attn_pattern: mean3(&self.attn_pattern, inv),
            head_z: mean3(&self.head_z, inv),
            head_result: mean3(&self.head_result, inv),
            attn_out: mean2(&self.attn_out, inv),
            resid_mid: mean2(&self.resid_mid, inv),
            mlp_pre: mean2(&self.mlp_pre, inv),
            mlp_out: mean2(&self.mlp_out, inv),
            resid_post: mean2(&self.resid_post, inv),
        }
    }
}

struct CacheSums {
    n: usize,
    seq_len: usize,
    embed: Array2<f64>,
    layers: Vec<LayerSums>,
    final_ln: Array2<f64>,
    logits: Array2<f64>,
}

impl CacheSums {
    fn zeros_like(c: &ActivationCache) -> Self {
        CacheSums {
            n: 0,
            seq_len: c.len(),
            embed: Array2::zeros(c.embed.raw_dim()),
            layers: c.layers.iter().map(LayerSums::zeros_like).collect(),
            final_ln: Array2::zeros(c.final_ln.raw_dim()),
            logits: Array2::zeros(c.logits.raw_dim()),
        }
    }

    fn add(&mut self, c: &ActivationCache) -> Result<()> {
        if c.len() != self.seq_len {
            return Err(Error::InvalidArgument(format!(
                "mean cache needs uniform lengths: got {} after {}",
                c.len(),
                self.seq_len
            )));
        }
        add2(&mut self.embed, &c.embed);
        for (acc, lc) in self.layers.iter_mut().zip(&c.layers) {
            acc.add(lc);
        }
        add2(&mut self.final_ln, &c.final_ln);
        add2(&mut self.logits, &c.logits);
        self.n += 1;
        Ok(())
    }

    fn into_mean(self) -> MeanCache {
        let inv = 1.0 / self.n as f64;
        MeanCache {
            n_sequences: self.n,
            seq_len: self.seq_len,
            embed: mean2(&self.embed, inv),
            layers: self.layers.iter().map(|l| l.mean(inv)).collect(),
            final_ln: mean2(&self.final_ln, inv),
            logits: mean2(&self.logits, inv),
        }
    }
}

/// Mean of every site over the given sequences. Sequences run serially so
/// the f64 accumulation order, and hence the result, is deterministic.
pub fn mean_cache_over<'a, I>(model: &Model, sequences: I) -> Result<MeanCache>
where
    I: IntoIterator<Item = &'a [u32]>,
{
    let mut sums: Option<CacheSums> = None;
    for tokens in sequences {
        let cache = model.forward_with_cache(tokens)?;
        let acc = match &mut sums {
            Some(acc) => acc,
            None => sums.insert(CacheSums::zeros_like(&cache)),
        };
        acc.add(&cache)?;
    }
    match sums {
        Some(acc) => Ok(acc.into_mean()),
        None => Err(Error::EmptyInput),
    }
}

/// Mean over a dataset's clean runs.
pub fn mean_cache(model: &Model, dataset: &SyllogismDataset) -> Result<MeanCache> {
    mean_cache_over(
        model,
        dataset.instances.iter().map(|i| i.clean_tokens.as_slice()),
    )
}

/// `mean_cache` plus each instance's clean logit difference, read from the
/// same forward passes; matches the dedicated evaluators bitwise.
pub fn mean_cache_and_logit_diffs(
    model: &Model,
    dataset: &SyllogismDataset,
) -> Result<(MeanCache, Vec<f64>)> {
    let mut sums: Option<CacheSums> = None;
    let mut lds = Vec::with_capacity(dataset.len());
    for inst in &dataset.instances {
        let cache = model.forward_with_cache(&inst.clean_tokens)?;
        let last = cache.layers.last().expect("at least one layer");
        let resid = last.resid_post.row(cache.len() - 1);
        let (c, i) = model.readout_pair(&resid, (inst.correct_id, inst.incorrect_id))?;
        lds.push(f64::from(c - i));
        let acc = match &mut sums {
            Some(acc) => acc,
            None => sums.insert(CacheSums::zeros_like(&cache)),
        };
        acc.add(&cache)?;
    }
    match sums {
        Some(acc) => Ok((acc.into_mean(), lds)),
        None => Err(Error::EmptyInput),
    }
}

// ---- sweep vocabulary ----

/// Where replacement activations come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSource {
    /// The instance's own corrupted prompt (truth values flipped).
    Corrupted,
    /// Position-wise dataset mean of clean runs.
    DatasetMean,
}

impl fmt::Display for PatchSource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PatchSource::Corrupted => "corrupted-prompt",
            PatchSource::DatasetMean => "dataset-mean",
        })
    }
}

/// Which path a sweep measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EffectMode {
    DirectToLogits,
    QInput,
    KInput,
    VInput,
    MlpWithAttn,
    MlpWithoutAttn,
}

impl fmt::Display for EffectMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EffectMode::DirectToLogits => "direct-to-logits",
            EffectMode::QInput => "q-input",
            EffectMode::KInput => "k-input",
            EffectMode::VInput => "v-input",
            EffectMode::MlpWithAttn => "mlp-with-attn",
            EffectMode::MlpWithoutAttn => "mlp-without-attn",
        })
    }
}

/// Query/key/value input of the receiving head.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QkvSite {
    Q,
    K,
    V,
}

impl QkvSite {
    pub fn mode(self) -> EffectMode {
        match self {
            QkvSite::Q => EffectMode::QInput,
            QkvSite::K => EffectMode::KInput,
            QkvSite::V => EffectMode::VInput,
        }
    }
}

impl fmt::Display for QkvSite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            QkvSite::Q => "q",
            QkvSite::K => "k",
            QkvSite::V => "v",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EffectEntry {
    pub component: ComponentId,
    pub ald_patched: f64,
    /// (ALD_patched − ALD_clean) / |ALD_clean|, so effects are comparable
    /// across tasks; the raw difference when ALD_clean is exactly 0.
    pub delta: f64,
}

/// One sweep's outcome per component; ALD_clean recorded once.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectMatrix {
    pub mode: EffectMode,
    pub source: PatchSource,
    pub ald_clean: f64,
    pub entries: Vec<EffectEntry>,
}

fn normalized_delta(ald_patched: f64, ald_clean: f64) -> f64 {
    let scale = ald_clean.abs();
    if scale == 0.0 {
        ald_patched - ald_clean
    } else {
        (ald_patched - ald_clean) / scale
    }
}

impl EffectMatrix {
    fn from_alds(
        mode: EffectMode,
        source: PatchSource,
        ald_clean: f64,
        components: &[ComponentId],
        alds: Vec<f64>,
    ) -> Self {
        let entries = components
            .iter()
            .zip(alds)
            .map(|(&component, ald_patched)| EffectEntry {
                component,
                ald_patched,
                delta: normalized_delta(ald_patched, ald_clean),
            })
            .collect();
        EffectMatrix { mode, source, ald_clean, entries }
    }

    pub fn get(&self, id: ComponentId) -> Option<&EffectEntry> {
        self.entries.iter().find(|e| e.component == id)
    }

    /// Ascending by delta: most harmful patches first.
    pub fn ranked_by_delta(&self) -> Vec<&EffectEntry> {
        let mut v: Vec<&EffectEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| a.delta.total_cmp(&b.delta));
        v
    }

    /// Descending by |delta|: strongest effects first.
    pub fn ranked_by_magnitude(&self) -> Vec<&EffectEntry> {
        let mut v: Vec<&EffectEntry> = self.entries.iter().collect();
        v.sort_by(|a, b| b.delta.abs().total_cmp(&a.delta.abs()));
        v
    }
}

/// Borrows the supplied mean cache or computes one, only when the source
/// needs it.
fn resolve_mean<'a>(
    model: &Model,
    dataset: &SyllogismDataset,
    source: PatchSource,
    supplied: Option<&'a MeanCache>,
    storage: &'a mut Option<MeanCache>,
) -> Result<Option<&'a MeanCache>> {
    let mean = match (source, supplied) {
        (PatchSource::Corrupted, _) => None,
        (PatchSource::DatasetMean, Some(m)) => Some(m),
        (PatchSource::DatasetMean, None) => {
            *storage = Some(mean_cache(model, dataset)?);
            storage.as_ref()
        }
    };
    if let Some(m) = mean {
        if m.seq_len != dataset.seq_len() {
            return Err(Error::InvalidArgument(format!(
                "mean cache length {} does not match dataset length {}",
                m.seq_len,
                dataset.seq_len()
            )));
        }
    }
    Ok(mean)
}

fn final_resid(cache: &ActivationCache) -> Array1<f32> {
    let p = cache.len() - 1;
    match cache.layers.last() {
        Some(l) => l.resid_post.row(p).to_owned(),
        None => cache.embed.row(p).to_owned(),
    }
}

// ---- direct effect sweep ----

/// Replaces each swept component's final-position residual contribution with
/// the source value, keeps every other component clean, and recomputes the
/// final LayerNorm and answer-pair readout. Negative deltas mark components
/// whose corruption hurts the correct answer.
pub fn direct_effect_sweep(
    model: &Model,
    dataset: &SyllogismDataset,
    components: &[ComponentId],
    source: PatchSource,
    mean: Option<&MeanCache>,
) -> Result<EffectMatrix> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    for c in components {
        c.validate(&model.config)?;
    }
    let mut storage = None;
    let mean = resolve_mean(model, dataset, source, mean, &mut storage)?;
    let mean_contribs: Option<HashMap<ComponentId, Array1<f32>>> =
        mean.map(|m| m.final_contributions().into_iter().collect());

    let per_instance: Vec<(f64, Vec<f64>)> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let cache = model.forward_with_cache(&inst.clean_tokens)?;
            let resid = final_resid(&cache);
            let ids = (inst.correct_id, inst.incorrect_id);
            let (c0, i0) = model.readout_pair(&resid.view(), ids)?;
            let ld_clean = f64::from(c0 - i0);

            let clean_contribs = decompose_final_residual(&cache);
            let index: HashMap<ComponentId, usize> = clean_contribs
                .iter()
                .enumerate()
                .map(|(i, (c, _))| (*c, i))
                .collect();
            let corrupted_contribs = match source {
                PatchSource::Corrupted => Some(decompose_final_residual(
                    &model.forward_with_cache(&inst.corrupted_tokens)?,
                )),
                PatchSource::DatasetMean => None,
            };

            let mut lds = Vec::with_capacity(components.len());
            for comp in components {
                let &ci = index.get(comp).ok_or_else(|| {
                    Error::InvalidComponent(format!("{comp} absent from decomposition"))
                })?;
                let src = match (&corrupted_contribs, &mean_contribs) {
                    (Some(cc), _) => &cc[ci].1,
                    (None, Some(mc)) => &mc[comp],
                    (None, None) => unreachable!("one source is always resolved"),
                };
                let patched = &resid - &clean_contribs[ci].1 + src;
                let (c, i) = model.readout_pair(&patched.view(), ids)?;
                lds.push(f64::from(c - i));
            }
            Ok((ld_clean, lds))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_instance.len() as f64;
    let ald_clean = per_instance.iter().map(|(ld, _)| ld).sum::<f64>() / n;
    let mut sums = vec![0.0f64; components.len()];
    for (_, lds) in &per_instance {
        for (acc, ld) in sums.iter_mut().zip(lds) {
            *acc += ld;
        }
    }
    let alds: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    Ok(EffectMatrix::from_alds(
        EffectMode::DirectToLogits,
        source,
        ald_clean,
        components,
        alds,
    ))
}

// ---- q/k/v input path patching ----

fn check_receiver(cfg: &crate::config::ModelConfig, receiver: ComponentId) -> Result<(usize, usize)> {
    receiver.validate(cfg)?;
    match receiver {
        ComponentId::AttnHead { layer, head } => Ok((layer, head)),
        other => Err(Error::InvalidArgument(format!(
            "receiver `{other}` is not an attention head"
        ))),
    }
}

fn check_upstream(sender: ComponentId, receiver: ComponentId, receiver_layer: usize) -> Result<()> {
    match sender.layer() {
        None => Ok(()),
        Some(l) if l < receiver_layer => Ok(()),
        Some(_) => Err(Error::NonCausal {
            sender: sender.to_string(),
            receiver: receiver.to_string(),
        }),
    }
}

/// A component's per-position residual contribution across the sequence.
fn sequence_contribution<'c>(
    embed: &'c Array2<f32>,
    layers: &'c [LayerCache],
    comp: ComponentId,
) -> ArrayView2<'c, f32> {
    match comp {
        ComponentId::Embed => embed.view(),
        ComponentId::AttnHead { layer, head } => layers[layer].head_result.index_axis(Axis(0), head),
        ComponentId::Mlp { layer } => layers[layer].mlp_out.view(),
    }
}

fn softmax_vec_inplace(x: &mut Array1<f32>) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in x.iter_mut() {
        *v /= sum;
    }
}

/// Patches each sender's residual contribution into the receiver head's
/// chosen input, freezing every other path clean: the receiver recomputes
/// only the patched projection, its new final-position output replaces the
/// clean one in the final residual, and the pair is read out. Isolates the
/// sender → receiver-input → logits path.
pub fn head_input_sweep(
    model: &Model,
    dataset: &SyllogismDataset,
    senders: &[ComponentId],
    receiver: ComponentId,
    site: QkvSite,
    source: PatchSource,
    mean: Option<&MeanCache>,
) -> Result<EffectMatrix> {
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let cfg = &model.config;
    let (rl, rh) = check_receiver(cfg, receiver)?;
    for s in senders {
        s.validate(cfg)?;
        check_upstream(*s, receiver, rl)?;
    }
    let mut storage = None;
    let mean = resolve_mean(model, dataset, source, mean, &mut storage)?;

    let lw = &model.weights.layers[rl];
    let w_q = lw.w_q.index_axis(Axis(0), rh);
    let w_k = lw.w_k.index_axis(Axis(0), rh);
    let w_v = lw.w_v.index_axis(Axis(0), rh);
    let w_o = lw.w_o.index_axis(Axis(0), rh);
    let b_q = lw.b_q.index_axis(Axis(0), rh);
    let b_k = lw.b_k.index_axis(Axis(0), rh);
    let b_v = lw.b_v.index_axis(Axis(0), rh);
    let inv_sqrt_dh = 1.0 / (cfg.d_head as f32).sqrt();
    let eps = cfg.layernorm_epsilon;

    let per_instance: Vec<(f64, Vec<f64>)> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let cache = model.forward_with_cache(&inst.clean_tokens)?;
            let p = cache.len() - 1;
            let resid = final_resid(&cache);
            let ids = (inst.correct_id, inst.incorrect_id);
            let (c0, i0) = model.readout_pair(&resid.view(), ids)?;
            let ld_clean = f64::from(c0 - i0);

            let corrupted = match source {
                PatchSource::Corrupted => {
                    Some(model.forward_with_cache(&inst.corrupted_tokens)?)
                }
                PatchSource::DatasetMean => None,
            };

            let layer = &cache.layers[rl];
            let ln1_clean = &layer.ln1_out;
            // Clean projections of the receiver; only the patched one is
            // recomputed per sender.
            let q_clean_row = ln1_clean.row(p).dot(&w_q) + &b_q;
            let k_clean = ln1_clean.dot(&w_k) + &b_k;
            let v_clean = ln1_clean.dot(&w_v) + &b_v;
            let pattern_clean_row = layer.attn_pattern.slice(s![rh, p, ..]);
            let clean_result_row = layer.head_result.slice(s![rh, p, ..]);

            let mut lds = Vec::with_capacity(senders.len());
            for &sender in senders {
                let mut resid_mod = layer.resid_pre.clone();
                resid_mod -= &sequence_contribution(&cache.embed, &cache.layers, sender);
                match (&corrupted, mean) {
                    (Some(cc), _) => {
                        resid_mod += &sequence_contribution(&cc.embed, &cc.layers, sender)
                    }
                    (None, Some(m)) => {
                        resid_mod += &sequence_contribution(&m.embed, &m.layers, sender)
                    }
                    (None, None) => unreachable!("one source is always resolved"),
                }

                let z = match site {
                    QkvSite::Q => {
                        let q_row =
                            layer_norm_vec(&resid_mod.row(p), &lw.ln1, eps).dot(&w_q) + &b_q;
                        let mut scores = k_clean.dot(&q_row);
                        scores *= inv_sqrt_dh;
                        softmax_vec_inplace(&mut scores);
                        v_clean.t().dot(&scores)
                    }
                    QkvSite::K => {
                        let ln1_mod = layer_norm(&resid_mod, &lw.ln1, eps);
                        let k_mod = ln1_mod.dot(&w_k) + &b_k;
                        let mut scores = k_mod.dot(&q_clean_row);
                        scores *= inv_sqrt_dh;
                        softmax_vec_inplace(&mut scores);
                        v_clean.t().dot(&scores)
                    }
                    QkvSite::V => {
                        let ln1_mod = layer_norm(&resid_mod, &lw.ln1, eps);
                        let v_mod = ln1_mod.dot(&w_v) + &b_v;
                        v_mod.t().dot(&pattern_clean_row)
                    }
                };
                let result_row = z.dot(&w_o);
                let patched = &resid - &clean_result_row + &result_row;
                let (c, i) = model.readout_pair(&patched.view(), ids)?;
                lds.push(f64::from(c - i));
            }
            Ok((ld_clean, lds))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_instance.len() as f64;
    let ald_clean = per_instance.iter().map(|(ld, _)| ld).sum::<f64>() / n;
    let mut sums = vec![0.0f64; senders.len()];
    for (_, lds) in &per_instance {
        for (acc, ld) in sums.iter_mut().zip(lds) {
            *acc += ld;
        }
    }
    let alds: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    Ok(EffectMatrix::from_alds(site.mode(), source, ald_clean, senders, alds))
}

/// Single-path variant of `head_input_sweep`; returns the normalized delta.
pub fn head_input_path_patch(
    model: &Model,
    dataset: &SyllogismDataset,
    sender: ComponentId,
    receiver: ComponentId,
    site: QkvSite,
    source: PatchSource,
    mean: Option<&MeanCache>,
) -> Result<f64> {
    let matrix = head_input_sweep(model, dataset, &[sender], receiver, site, source, mean)?;
    Ok(matrix.entries[0].delta)
}

// ---- MLP effect modes ----

/// Sweeps every MLP in one of the two reported modes. With attention
/// restored, only the MLP's direct final-position contribution to the logits
/// is swapped (everything downstream keeps clean values). Without
/// restoration, the MLP's output is replaced at every position and the rest
/// of the network recomputes freely, so the effect also propagates through
/// later attention and MLPs; this is what surfaces layer 0's role as a
/// per-token extended embedding.
pub fn mlp_effect_modes(
    model: &Model,
    dataset: &SyllogismDataset,
    with_attention: bool,
    source: PatchSource,
    mean: Option<&MeanCache>,
) -> Result<EffectMatrix> {
    let n_layers = model.config.n_layers;
    let mlps: Vec<ComponentId> = (0..n_layers).map(ComponentId::mlp).collect();
    if with_attention {
        let mut matrix = direct_effect_sweep(model, dataset, &mlps, source, mean)?;
        matrix.mode = EffectMode::MlpWithAttn;
        return Ok(matrix);
    }
    if dataset.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut storage = None;
    let mean = resolve_mean(model, dataset, source, mean, &mut storage)?;

    let per_instance: Vec<(f64, Vec<f64>)> = dataset
        .instances
        .par_iter()
        .map(|inst| {
            let resid = model.forward_final_resid(&inst.clean_tokens)?;
            let ids = (inst.correct_id, inst.incorrect_id);
            let (c0, i0) = model.readout_pair(&resid.view(), ids)?;
            let ld_clean = f64::from(c0 - i0);

            let corrupted = match source {
                PatchSource::Corrupted => {
                    Some(model.forward_with_cache(&inst.corrupted_tokens)?)
                }
                PatchSource::DatasetMean => None,
            };

            let mut lds = Vec::with_capacity(n_layers);
            for l in 0..n_layers {
                let src = match (&corrupted, mean) {
                    (Some(cc), _) => cc.layers[l].mlp_out.clone(),
                    (None, Some(m)) => m.layers[l].mlp_out.clone(),
                    (None, None) => unreachable!("one source is always resolved"),
                };
                let mut reps = Replacements::new();
                reps.set(HookSite::MlpOut(l), PatchValue::Full(src.into_dyn()));
                let resid_p = model.forward_hooked_final_resid(&inst.clean_tokens, &reps)?;
                let (c, i) = model.readout_pair(&resid_p.view(), ids)?;
                lds.push(f64::from(c - i));
            }
            Ok((ld_clean, lds))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_instance.len() as f64;
    let ald_clean = per_instance.iter().map(|(ld, _)| ld).sum::<f64>() / n;
    let mut sums = vec![0.0f64; n_layers];
    for (_, lds) in &per_instance {
        for (acc, ld) in sums.iter_mut().zip(lds) {
            *acc += ld;
        }
    }
    let alds: Vec<f64> = sums.into_iter().map(|s| s / n).collect();
    Ok(EffectMatrix::from_alds(
        EffectMode::MlpWithoutAttn,
        source,
        ald_clean,
        &mlps,
        alds,
    ))
}
