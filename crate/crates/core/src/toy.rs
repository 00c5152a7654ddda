//! Tiny seeded checkpoints, optionally with hand-planted attention behaviors,
//! plus an independent scalar forward pass used as a cross-check oracle.
//!
//! Planted constructions:
//! * copy head: W_V = I, W_O = I, so W_OV is exactly the identity and the
//!   head writes its source token's embedding back into the residual stream.
//!   Requires `n_heads == 1` (full-rank identity needs d_head == d_model).
//! * suppression head: W_O = -I, the sign-flipped twin.
//! * induction pair: layer 0 head 0 attends to the previous position and
//!   copies its token identity into a marker subspace; layer 1 head 0 matches
//!   its own token against those markers, landing on earlier-duplicate + 1
//!   positions. Embeddings are one-hot over three orthogonal subspaces
//!   (position 0..16, token 16..24, marker 24..32), so `d_model == 32`,
//!   `n_ctx == 16`, `n_vocab == 8`, and the score matrices need rank 15,
//!   hence `n_heads <= 2`.
//!
//! Non-planted weights are small seeded-uniform noise so planted behavior is
//! stable across seeds.

use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, ModelConfig};
use crate::error::{Error, Result};
use crate::safetensors::write_safetensors;
use crate::weights::{write_raw_f32, CheckpointFormat, CheckpointManifest, ModelWeights};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct PlantedBehaviors {
    pub copy_head: bool,
    pub suppression_head: bool,
    pub induction_pair: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct ToySpec {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub seed: u64,
    pub planted: PlantedBehaviors,
}

/// Subspace offsets for the induction construction.
const IND_POS: usize = 0;
const IND_TOK: usize = 16;
const IND_MARK: usize = 24;
const IND_N_CTX: usize = 16;
const IND_N_VOCAB: usize = 8;
/// Query-side gain; saturates softmax even after layer norm distortion.
const IND_BETA: f32 = 8.0;

impl ToySpec {
    pub fn validate(&self) -> Result<()> {
        if !(1..=2).contains(&self.n_layers) {
            return Err(Error::Config("toy n_layers must be 1 or 2".into()));
        }
        if !(1..=4).contains(&self.n_heads) {
            return Err(Error::Config("toy n_heads must be 1..=4".into()));
        }
        if self.d_model == 0 || self.d_model > 32 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(
                "toy d_model must be in 1..=32 and divisible by n_heads".into(),
            ));
        }
        let p = self.planted;
        if (p.copy_head || p.suppression_head) && self.n_heads != 1 {
            return Err(Error::Config(
                "copy/suppression heads need n_heads == 1 (identity W_OV)".into(),
            ));
        }
        if p.copy_head && p.suppression_head && self.n_layers != 2 {
            return Err(Error::Config(
                "copy + suppression together need one head per layer".into(),
            ));
        }
        if p.induction_pair {
            if p.copy_head || p.suppression_head {
                return Err(Error::Config(
                    "induction pair occupies both planted slots".into(),
                ));
            }
            if self.n_layers != 2 || self.d_model != 32 || self.n_heads > 2 {
                return Err(Error::Config(
                    "induction pair needs n_layers == 2, d_model == 32, n_heads <= 2".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> ModelConfig {
        let (n_ctx, n_vocab) = if self.planted.induction_pair {
            (IND_N_CTX, IND_N_VOCAB)
        } else {
            (32, 64)
        };
        ModelConfig {
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            d_model: self.d_model,
            d_head: self.d_model / self.n_heads,
            d_mlp: 4 * self.d_model,
            n_ctx,
            n_vocab,
            layernorm_epsilon: 1e-5,
            activation: Activation::Tanh,
        }
    }

    /// (layer, head) of the planted copy head.
    pub fn copy_slot(&self) -> (usize, usize) {
        (0, 0)
    }

    /// (layer, head) of the planted suppression head.
    pub fn suppression_slot(&self) -> (usize, usize) {
        if self.planted.copy_head {
            (1, 0)
        } else {
            (self.n_layers - 1, 0)
        }
    }

    /// ((prev-token layer, head), (induction layer, head)).
    pub fn induction_slots(&self) -> ((usize, usize), (usize, usize)) {
        ((0, 0), (1, 0))
    }
}

/// Dense tensor buffer addressed as (row, col) into a flat Vec.
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Mat {
    fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    fn noise(rows: usize, cols: usize, scale: f32, rng: &mut ChaCha8Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-scale..=scale)).collect();
        Mat { rows, cols, data }
    }

    fn set(&mut self, r: usize, c: usize, v: f32) {
        self.data[r * self.cols + c] = v;
    }

    fn into_tensor(self, name: &str) -> (String, Vec<usize>, Vec<f32>) {
        (name.to_string(), vec![self.rows, self.cols], self.data)
    }
}

fn vec_tensor(name: &str, data: Vec<f32>) -> (String, Vec<usize>, Vec<f32>) {
    let len = data.len();
    (name.to_string(), vec![len], data)
}

/// Zero a head's Q,K,V columns and output rows so planted values start clean.
fn clear_head(c_attn: &mut Mat, c_proj: &mut Mat, head: usize, cfg: &ModelConfig) {
    let (d, dh) = (cfg.d_model, cfg.d_head);
    for r in 0..d {
        for part in 0..3 {
            for c in 0..dh {
                c_attn.set(r, part * d + head * dh + c, 0.0);
            }
        }
    }
    for r in 0..dh {
        for c in 0..d {
            c_proj.set(head * dh + r, c, 0.0);
        }
    }
}

/// W_V = I, W_O = sign * I for a single full-width head.
fn plant_identity_ov(c_attn: &mut Mat, c_proj: &mut Mat, sign: f32, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for i in 0..d {
        c_attn.set(i, 2 * d + i, 1.0);
        c_proj.set(i, i, sign);
    }
}

/// Layer 0 half of the induction pair: attend to i-1, copy token to marker.
fn plant_prev_token(c_attn: &mut Mat, c_proj: &mut Mat, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for p in 0..IND_N_CTX {
        c_attn.set(IND_POS + p, 0 * d + p, IND_BETA);
        if p + 1 < IND_N_CTX {
            c_attn.set(IND_POS + p, 1 * d + p + 1, 1.0);
        }
    }
    for t in 0..IND_N_VOCAB {
        c_attn.set(IND_TOK + t, 2 * d + t, 1.0);
        c_proj.set(t, IND_MARK + t, 1.0);
    }
}

/// Layer 1 half: match own token against markers, copy the landed token.
fn plant_induction(c_attn: &mut Mat, c_proj: &mut Mat, cfg: &ModelConfig) {
    let d = cfg.d_model;
    for t in 0..IND_N_VOCAB {
        c_attn.set(IND_TOK + t, 0 * d + t, IND_BETA);
        c_attn.set(IND_MARK + t, 1 * d + t, 1.0);
        c_attn.set(IND_TOK + t, 2 * d + t, 1.0);
        c_proj.set(t, IND_TOK + t, 1.0);
    }
}

/// Writes a complete synthetic checkpoint (config, weights, placeholder
/// vocab) to `dir` in the requested on-disk format.
pub fn build_toy(spec: &ToySpec, dir: &Path, format: CheckpointFormat) -> Result<CheckpointManifest> {
    spec.validate()?;
    let cfg = spec.config();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let (d, m) = (cfg.d_model, cfg.d_mlp);
    let induction = spec.planted.induction_pair;

    let mut tensors: Vec<(String, Vec<usize>, Vec<f32>)> = Vec::new();
    let mut wte = Mat::noise(cfg.n_vocab, d, 0.5, &mut rng);
    let mut wpe = Mat::noise(cfg.n_ctx, d, 0.05, &mut rng);
    if induction {
        wte = Mat::zeros(cfg.n_vocab, d);
        wpe = Mat::zeros(cfg.n_ctx, d);
        for t in 0..cfg.n_vocab {
            wte.set(t, IND_TOK + t, 1.0);
        }
        for p in 0..cfg.n_ctx {
            wpe.set(p, IND_POS + p, 1.0);
        }
    }
    tensors.push(wte.into_tensor("wte.weight"));
    tensors.push(wpe.into_tensor("wpe.weight"));

    for l in 0..cfg.n_layers {
        let mut c_attn = Mat::noise(d, 3 * d, 0.02, &mut rng);
        let mut c_proj = Mat::noise(d, d, 0.02, &mut rng);
        if spec.planted.copy_head && spec.copy_slot().0 == l {
            clear_head(&mut c_attn, &mut c_proj, 0, &cfg);
            plant_identity_ov(&mut c_attn, &mut c_proj, 1.0, &cfg);
        }
        if spec.planted.suppression_head && spec.suppression_slot().0 == l {
            clear_head(&mut c_attn, &mut c_proj, 0, &cfg);
            plant_identity_ov(&mut c_attn, &mut c_proj, -1.0, &cfg);
        }
        if induction {
            clear_head(&mut c_attn, &mut c_proj, 0, &cfg);
            if l == 0 {
                plant_prev_token(&mut c_attn, &mut c_proj, &cfg);
            } else {
                plant_induction(&mut c_attn, &mut c_proj, &cfg);
            }
        }
        let p = format!("h.{l}");
        tensors.push(vec_tensor(&format!("{p}.ln_1.weight"), vec![1.0; d]));
        tensors.push(vec_tensor(&format!("{p}.ln_1.bias"), vec![0.0; d]));
        tensors.push(c_attn.into_tensor(&format!("{p}.attn.c_attn.weight")));
        tensors.push(vec_tensor(&format!("{p}.attn.c_attn.bias"), vec![0.0; 3 * d]));
        tensors.push(c_proj.into_tensor(&format!("{p}.attn.c_proj.weight")));
        tensors.push(vec_tensor(&format!("{p}.attn.c_proj.bias"), vec![0.0; d]));
        tensors.push(vec_tensor(&format!("{p}.ln_2.weight"), vec![1.0; d]));
        tensors.push(vec_tensor(&format!("{p}.ln_2.bias"), vec![0.0; d]));
        let mlp_scale = if induction { 0.002 } else { 0.02 };
        tensors.push(Mat::noise(d, m, mlp_scale, &mut rng).into_tensor(&format!("{p}.mlp.c_fc.weight")));
        tensors.push(vec_tensor(&format!("{p}.mlp.c_fc.bias"), vec![0.0; m]));
        tensors.push(Mat::noise(m, d, mlp_scale, &mut rng).into_tensor(&format!("{p}.mlp.c_proj.weight")));
        tensors.push(vec_tensor(&format!("{p}.mlp.c_proj.bias"), vec![0.0; d]));
    }
    tensors.push(vec_tensor("ln_f.weight", vec![1.0; d]));
    tensors.push(vec_tensor("ln_f.bias", vec![0.0; d]));

    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join("config.json");
    std::fs::write(&config_path, cfg.to_json()).map_err(|e| Error::io(&config_path, e))?;
    let weights_path = match format {
        CheckpointFormat::Safetensors => {
            let p = dir.join("model.safetensors");
            write_safetensors(&p, &tensors)?;
            p
        }
        CheckpointFormat::RawF32WithIndex => {
            let p = dir.join("model.bin");
            write_raw_f32(&p, &tensors)?;
            p
        }
    };
    // Placeholder vocab: valid JSON, not a loadable byte-level vocabulary.
    let vocab: std::collections::BTreeMap<String, u32> =
        (0..cfg.n_vocab).map(|t| (format!("t{t}"), t as u32)).collect();
    let vocab_path = dir.join("vocab.json");
    std::fs::write(&vocab_path, serde_json::to_string(&vocab).expect("vocab serializes"))
        .map_err(|e| Error::io(&vocab_path, e))?;
    let merges_path = dir.join("merges.txt");
    std::fs::write(&merges_path, "#version: toy\n").map_err(|e| Error::io(&merges_path, e))?;

    Ok(CheckpointManifest { config_path, weights_path, vocab_path, merges_path, format })
}

/// Straight-line forward pass over plain slices, sharing no kernels with the
/// hooked model. f64 accumulation throughout. Returns [seq, n_vocab] logits.
pub fn brute_force_logits(cfg: &ModelConfig, w: &ModelWeights, tokens: &[u32]) -> Array2<f32> {
    let (s, d, dh, nh) = (tokens.len(), cfg.d_model, cfg.d_head, cfg.n_heads);
    assert!(s >= 1 && s <= cfg.n_ctx, "toy-scale sequence only");

    let ln = |x: &[f64], scale: &[f32], bias: &[f32], eps: f64| -> Vec<f64> {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (var + eps).sqrt();
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) * inv * scale[i] as f64 + bias[i] as f64)
            .collect()
    };
    let eps = cfg.layernorm_epsilon as f64;

    let mut resid: Vec<Vec<f64>> = (0..s)
        .map(|i| {
            let t = tokens[i] as usize;
            (0..d)
                .map(|j| w.token_embedding[[t, j]] as f64 + w.positional_embedding[[i, j]] as f64)
                .collect()
        })
        .collect();

    for layer in &w.layers {
        let normed: Vec<Vec<f64>> =
            resid.iter().map(|r| ln(r, layer.ln1.scale.as_slice().unwrap(), layer.ln1.bias.as_slice().unwrap(), eps)).collect();
        let mut attn_out = vec![vec![0.0f64; d]; s];
        for h in 0..nh {
            let proj = |wmat: &ndarray::Array3<f32>, bvec: &ndarray::Array2<f32>, x: &[f64]| -> Vec<f64> {
                (0..dh)
                    .map(|c| {
                        bvec[[h, c]] as f64
                            + (0..d).map(|r| x[r] * wmat[[h, r, c]] as f64).sum::<f64>()
                    })
                    .collect()
            };
            let q: Vec<Vec<f64>> = normed.iter().map(|x| proj(&layer.w_q, &layer.b_q, x)).collect();
            let k: Vec<Vec<f64>> = normed.iter().map(|x| proj(&layer.w_k, &layer.b_k, x)).collect();
            let v: Vec<Vec<f64>> = normed.iter().map(|x| proj(&layer.w_v, &layer.b_v, x)).collect();
            let scale = 1.0 / (dh as f64).sqrt();
            for i in 0..s {
                let scores: Vec<f64> = (0..=i)
                    .map(|j| (0..dh).map(|c| q[i][c] * k[j][c]).sum::<f64>() * scale)
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                let mut zvec = vec![0.0f64; dh];
                for j in 0..=i {
                    let p = exps[j] / z;
                    for c in 0..dh {
                        zvec[c] += p * v[j][c];
                    }
                }
                for col in 0..d {
                    attn_out[i][col] +=
                        (0..dh).map(|c| zvec[c] * layer.w_o[[h, c, col]] as f64).sum::<f64>();
                }
            }
        }
        for i in 0..s {
            for col in 0..d {
                resid[i][col] += attn_out[i][col] + layer.b_o[col] as f64;
            }
        }
        for i in 0..s {
            let x = ln(&resid[i], layer.ln2.scale.as_slice().unwrap(), layer.ln2.bias.as_slice().unwrap(), eps);
            let m = layer.w_in.ncols();
            let mut hidden: Vec<f64> = (0..m)
                .map(|c| {
                    layer.b_in[c] as f64
                        + (0..d).map(|r| x[r] * layer.w_in[[r, c]] as f64).sum::<f64>()
                })
                .collect();
            for v in hidden.iter_mut() {
                *v = match cfg.activation {
                    Activation::Erf => {
                        0.5 * *v * (1.0 + libm::erf(*v / std::f64::consts::SQRT_2))
                    }
                    Activation::Tanh => {
                        let inner = (2.0 / std::f64::consts::PI).sqrt() * (*v + 0.044715 * v.powi(3));
                        0.5 * *v * (1.0 + inner.tanh())
                    }
                };
            }
            for col in 0..d {
                resid[i][col] += layer.b_out[col] as f64
                    + (0..m).map(|c| hidden[c] * layer.w_out[[c, col]] as f64).sum::<f64>();
            }
        }
    }

    let mut logits = Array2::<f32>::zeros((s, cfg.n_vocab));
    for i in 0..s {
        let x = ln(&resid[i], w.final_ln.scale.as_slice().unwrap(), w.final_ln.bias.as_slice().unwrap(), eps);
        for t in 0..cfg.n_vocab {
            logits[[i, t]] =
                (0..d).map(|j| x[j] * w.unembedding[[t, j]] as f64).sum::<f64>() as f32;
        }
    }
    logits
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Model;

    #[test]
    fn rejects_bad_specs() {
        let base = ToySpec {
            n_layers: 1,
            n_heads: 2,
            d_model: 16,
            seed: 0,
            planted: PlantedBehaviors::default(),
        };
        assert!(base.validate().is_ok());
        let mut s = base;
        s.n_layers = 3;
        assert!(s.validate().is_err());
        let mut s = base;
        s.planted.copy_head = true;
        assert!(s.validate().is_err(), "copy head needs n_heads == 1");
        let mut s = base;
        s.d_model = 15;
        assert!(s.validate().is_err(), "d_model must divide by n_heads");
        let mut s = base;
        s.planted.induction_pair = true;
        assert!(s.validate().is_err(), "induction needs 2 layers, d_model 32");
    }

    #[test]
    fn builds_and_loads_both_formats() {
        let spec = ToySpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 16,
            seed: 7,
            planted: PlantedBehaviors::default(),
        };
        for format in [CheckpointFormat::Safetensors, CheckpointFormat::RawF32WithIndex] {
            let dir = tempfile::tempdir().unwrap();
            let manifest = build_toy(&spec, dir.path(), format).unwrap();
            let model = Model::load(&manifest).unwrap();
            assert_eq!(model.config, spec.config());
            let cache = model.forward_with_cache(&[1, 2, 3]).unwrap();
            assert_eq!(cache.logits.shape(), [3, spec.config().n_vocab]);
        }
    }

    #[test]
    fn formats_agree_bitwise_on_logits() {
        let spec = ToySpec {
            n_layers: 1,
            n_heads: 4,
            d_model: 32,
            seed: 3,
            planted: PlantedBehaviors::default(),
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = Model::load(&build_toy(&spec, d1.path(), CheckpointFormat::Safetensors).unwrap()).unwrap();
        let m2 = Model::load(&build_toy(&spec, d2.path(), CheckpointFormat::RawF32WithIndex).unwrap()).unwrap();
        let c1 = m1.forward_with_cache(&[5, 0, 9]).unwrap();
        let c2 = m2.forward_with_cache(&[5, 0, 9]).unwrap();
        assert_eq!(c1.logits, c2.logits);
    }

    #[test]
    fn brute_force_matches_hooked_forward() {
        for seed in 0..4 {
            let spec = ToySpec {
                n_layers: 2,
                n_heads: 2,
                d_model: 16,
                seed,
                planted: PlantedBehaviors::default(),
            };
            let dir = tempfile::tempdir().unwrap();
            let model =
                Model::load(&build_toy(&spec, dir.path(), CheckpointFormat::Safetensors).unwrap())
                    .unwrap();
            let tokens: Vec<u32> = (0..8).map(|i| (i * 7 + seed as usize) as u32 % 64).collect();
            let cache = model.forward_with_cache(&tokens).unwrap();
            let oracle = brute_force_logits(&model.config, &model.weights, &tokens);
            for (a, b) in cache.logits.iter().zip(oracle.iter()) {
                assert!((a - b).abs() < 1e-5, "hooked {a} vs oracle {b}");
            }
        }
    }

    #[test]
    fn planted_ov_is_signed_identity() {
        let spec = ToySpec {
            n_layers: 2,
            n_heads: 1,
            d_model: 24,
            seed: 11,
            planted: PlantedBehaviors { copy_head: true, suppression_head: true, induction_pair: false },
        };
        let dir = tempfile::tempdir().unwrap();
        let model =
            Model::load(&build_toy(&spec, dir.path(), CheckpointFormat::Safetensors).unwrap())
                .unwrap();
        let d = spec.d_model;
        for (slot, sign) in [(spec.copy_slot(), 1.0f32), (spec.suppression_slot(), -1.0)] {
            let layer = &model.weights.layers[slot.0];
            for r in 0..d {
                for c in 0..d {
                    let ov: f32 = (0..d)
                        .map(|k| layer.w_v[[slot.1, r, k]] * layer.w_o[[slot.1, k, c]])
                        .sum();
                    let want = if r == c { sign } else { 0.0 };
                    assert!((ov - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn induction_pair_attends_as_planted() {
        let spec = ToySpec {
            n_layers: 2,
            n_heads: 2,
            d_model: 32,
            seed: 5,
            planted: PlantedBehaviors { induction_pair: true, ..Default::default() },
        };
        let dir = tempfile::tempdir().unwrap();
        let model =
            Model::load(&build_toy(&spec, dir.path(), CheckpointFormat::Safetensors).unwrap())
                .unwrap();
        // repeated random-ish tokens: second half repeats the first
        let half = [3u32, 1, 4, 1, 5, 2];
        let tokens: Vec<u32> = half.iter().chain(half.iter()).copied().collect();
        let cache = model.forward_with_cache(&tokens).unwrap();
        let s = tokens.len();
        let prev = &cache.layers[0].attn_pattern;
        let mut prev_mass = 0.0;
        for i in 1..s {
            prev_mass += prev[[0, i, i - 1]];
        }
        assert!(prev_mass / (s - 1) as f32 > 0.9, "prev-token head mass {prev_mass}");
        let ind = &cache.layers[1].attn_pattern;
        let mut ind_mass = 0.0;
        let mut n_queries = 0;
        for i in 1..s {
            let dups: Vec<usize> =
                (0..i).filter(|&j| tokens[j] == tokens[i] && j + 1 <= i).collect();
            if dups.is_empty() {
                continue;
            }
            n_queries += 1;
            ind_mass += dups.iter().map(|&j| ind[[0, i, j + 1]]).sum::<f32>();
        }
        assert!(n_queries >= half.len());
        assert!(ind_mass / n_queries as f32 > 0.5, "induction mass {ind_mass} over {n_queries}");
    }
}
