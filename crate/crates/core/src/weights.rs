//! Checkpoint loading: manifest resolution, tensor-name mapping, per-head
//! weight splitting, and shape validation.
//!
//! Tensor names follow the published GPT-2 checkpoint convention:
//!
//! | name                        | shape              | destination            |
//! |-----------------------------|--------------------|------------------------|
//! | `wte.weight`                | n_vocab × d_model  | token embedding        |
//! | `wpe.weight`                | n_ctx × d_model    | positional embedding   |
//! | `h.{L}.ln_1.{weight,bias}`  | d_model            | pre-attention LN       |
//! | `h.{L}.attn.c_attn.weight`  | d_model × 3·d_model| Q,K,V (split per head) |
//! | `h.{L}.attn.c_attn.bias`    | 3·d_model          | Q,K,V biases           |
//! | `h.{L}.attn.c_proj.weight`  | d_model × d_model  | per-head W_O rows      |
//! | `h.{L}.attn.c_proj.bias`    | d_model            | shared attention bias  |
//! | `h.{L}.ln_2.{weight,bias}`  | d_model            | pre-MLP LN             |
//! | `h.{L}.mlp.c_fc.{weight,bias}`   | d_model × d_mlp | MLP input         |
//! | `h.{L}.mlp.c_proj.{weight,bias}` | d_mlp × d_model | MLP output        |
//! | `ln_f.{weight,bias}`        | d_model            | final LN               |
//!
//! Projections use the x·W + b convention, matching the checkpoint layout, so
//! no transposes are applied. `c_attn` columns split as [Q | K | V], each
//! block column-sliced per head. `h.{L}.attn.bias` (a causal-mask buffer) is
//! ignored. When `lm_head.weight` is absent the unembedding is the transposed
//! token embedding (tied).

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2, Array3, ArrayD, Ix1, Ix2, s};
use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::safetensors::SafetensorsFile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CheckpointFormat {
    Safetensors,
    /// Raw little-endian f32 blob plus a `<weights>.index.json` sidecar
    /// mapping tensor names to `{shape, offset}`.
    RawF32WithIndex,
}

#[derive(Debug, Clone)]
pub struct CheckpointManifest {
    pub config_path: PathBuf,
    pub weights_path: PathBuf,
    pub vocab_path: PathBuf,
    pub merges_path: PathBuf,
    pub format: CheckpointFormat,
}

impl CheckpointManifest {
    /// Standard layout: `config.json`, `model.safetensors` (or `model.bin` +
    /// index), `vocab.json`, `merges.txt` in one directory.
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let safetensors = dir.join("model.safetensors");
        let raw = dir.join("model.bin");
        let (weights_path, format) = if safetensors.exists() {
            (safetensors, CheckpointFormat::Safetensors)
        } else if raw.exists() {
            (raw, CheckpointFormat::RawF32WithIndex)
        } else {
            return Err(Error::Checkpoint(format!(
                "no model.safetensors or model.bin under {}",
                dir.display()
            )));
        };
        let manifest = CheckpointManifest {
            config_path: dir.join("config.json"),
            weights_path,
            vocab_path: dir.join("vocab.json"),
            merges_path: dir.join("merges.txt"),
            format,
        };
        manifest.validate_paths()?;
        Ok(manifest)
    }

    pub fn validate_paths(&self) -> Result<()> {
        for path in [
            &self.config_path,
            &self.weights_path,
            &self.vocab_path,
            &self.merges_path,
        ] {
            if !path.is_file() {
                return Err(Error::Checkpoint(format!("missing file {}", path.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNormWeights {
    pub scale: Array1<f32>,
    pub bias: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub ln1: LayerNormWeights,
    pub ln2: LayerNormWeights,
    /// Per-head projections: w_q/w_k/w_v are [n_heads, d_model, d_head],
    /// biases [n_heads, d_head]; w_o is [n_heads, d_head, d_model] with one
    /// shared output bias.
    pub w_q: Array3<f32>,
    pub b_q: Array2<f32>,
    pub w_k: Array3<f32>,
    pub b_k: Array2<f32>,
    pub w_v: Array3<f32>,
    pub b_v: Array2<f32>,
    pub w_o: Array3<f32>,
    pub b_o: Array1<f32>,
    pub w_in: Array2<f32>,
    pub b_in: Array1<f32>,
    pub w_out: Array2<f32>,
    pub b_out: Array1<f32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    /// n_vocab × d_model.
    pub token_embedding: Array2<f32>,
    /// n_ctx × d_model.
    pub positional_embedding: Array2<f32>,
    pub layers: Vec<LayerWeights>,
    pub final_ln: LayerNormWeights,
    /// n_vocab × d_model; logits = x · unembedding^T.
    pub unembedding: Array2<f32>,
}

// ---- tensor sources ----

/// Uniform access over the two checkpoint formats.
trait TensorSource {
    fn fetch(&mut self, name: &str) -> Result<ArrayD<f32>>;
    fn has(&self, name: &str) -> bool;
}

impl TensorSource for SafetensorsFile {
    fn fetch(&mut self, name: &str) -> Result<ArrayD<f32>> {
        self.read_f32(name)
    }
    fn has(&self, name: &str) -> bool {
        self.meta(name).is_some()
    }
}

#[derive(Deserialize, Serialize)]
struct RawIndexEntry {
    shape: Vec<usize>,
    offset: u64,
}

/// Reader for the raw-f32-with-index format.
struct RawF32File {
    path: PathBuf,
    file: File,
    index: HashMap<String, RawIndexEntry>,
}

pub fn raw_index_path(weights_path: &Path) -> PathBuf {
    let mut s = weights_path.as_os_str().to_owned();
    s.push(".index.json");
    PathBuf::from(s)
}

impl RawF32File {
    fn open(path: &Path) -> Result<Self> {
        let index_path = raw_index_path(path);
        let text =
            std::fs::read_to_string(&index_path).map_err(|e| Error::io(&index_path, e))?;
        let index: HashMap<String, RawIndexEntry> = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", index_path.display())))?;
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(RawF32File {
            path: path.to_path_buf(),
            file,
            index,
        })
    }
}

impl TensorSource for RawF32File {
    fn fetch(&mut self, name: &str) -> Result<ArrayD<f32>> {
        let entry = self
            .index
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        let count: usize = entry.shape.iter().product();
        self.file
            .seek(SeekFrom::Start(entry.offset))
            .map_err(|e| Error::io(&self.path, e))?;
        let mut bytes = vec![0u8; count * 4];
        self.file.read_exact(&mut bytes).map_err(|_| {
            Error::Checkpoint(format!(
                "{}: tensor `{name}` truncated",
                self.path.display()
            ))
        })?;
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        ArrayD::from_shape_vec(ndarray::IxDyn(&entry.shape), values)
            .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))
    }
    fn has(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }
}

/// Writes the raw format: tensors concatenated in the given order plus the
/// JSON index sidecar.
pub fn write_raw_f32(path: &Path, tensors: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut index = serde_json::Map::new();
    let mut offset = 0u64;
    for (name, shape, values) in tensors {
        let count: usize = shape.iter().product();
        if count != values.len() {
            return Err(Error::ShapeMismatch {
                name: name.clone(),
                expected: shape.clone(),
                got: vec![values.len()],
            });
        }
        index.insert(
            name.clone(),
            serde_json::json!({ "shape": shape, "offset": offset }),
        );
        for v in values {
            w.write_all(&v.to_le_bytes())
                .map_err(|e| Error::io(path, e))?;
        }
        offset += (values.len() * 4) as u64;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let index_path = raw_index_path(path);
    std::fs::write(
        &index_path,
        serde_json::to_string_pretty(&serde_json::Value::Object(index)).expect("index serializes"),
    )
    .map_err(|e| Error::io(&index_path, e))?;
    Ok(())
}

// ---- loading ----

fn fetch_shaped<S: TensorSource>(
    src: &mut S,
    name: &str,
    shape: &[usize],
) -> Result<ArrayD<f32>> {
    let t = src.fetch(name)?;
    if t.shape() != shape {
        return Err(Error::ShapeMismatch {
            name: name.to_string(),
            expected: shape.to_vec(),
            got: t.shape().to_vec(),
        });
    }
    Ok(t)
}

fn fetch_matrix<S: TensorSource>(src: &mut S, name: &str, shape: [usize; 2]) -> Result<Array2<f32>> {
    Ok(fetch_shaped(src, name, &shape)?
        .into_dimensionality::<Ix2>()
        .expect("shape checked"))
}

fn fetch_vector<S: TensorSource>(src: &mut S, name: &str, len: usize) -> Result<Array1<f32>> {
    Ok(fetch_shaped(src, name, &[len])?
        .into_dimensionality::<Ix1>()
        .expect("shape checked"))
}

fn fetch_ln<S: TensorSource>(src: &mut S, prefix: &str, d: usize) -> Result<LayerNormWeights> {
    Ok(LayerNormWeights {
        scale: fetch_vector(src, &format!("{prefix}.weight"), d)?,
        bias: fetch_vector(src, &format!("{prefix}.bias"), d)?,
    })
}

/// Splits the fused QKV projection into per-head [n_heads, d_model, d_head]
/// blocks. `which` selects the Q (0), K (1) or V (2) column block.
fn split_heads(c_attn: &Array2<f32>, which: usize, cfg: &ModelConfig) -> Array3<f32> {
    let (d, dh, h) = (cfg.d_model, cfg.d_head, cfg.n_heads);
    let mut out = Array3::zeros((h, d, dh));
    for head in 0..h {
        let col = which * d + head * dh;
        out.slice_mut(s![head, .., ..])
            .assign(&c_attn.slice(s![.., col..col + dh]));
    }
    out
}

fn split_head_bias(b_attn: &Array1<f32>, which: usize, cfg: &ModelConfig) -> Array2<f32> {
    let (d, dh, h) = (cfg.d_model, cfg.d_head, cfg.n_heads);
    let mut out = Array2::zeros((h, dh));
    for head in 0..h {
        let col = which * d + head * dh;
        out.slice_mut(s![head, ..])
            .assign(&b_attn.slice(s![col..col + dh]));
    }
    out
}

fn load_from_source<S: TensorSource>(
    src: &mut S,
    cfg: &ModelConfig,
) -> Result<ModelWeights> {
    let (d, dh, h, m) = (cfg.d_model, cfg.d_head, cfg.n_heads, cfg.d_mlp);
    let token_embedding = fetch_matrix(src, "wte.weight", [cfg.n_vocab, d])?;
    let positional_embedding = fetch_matrix(src, "wpe.weight", [cfg.n_ctx, d])?;

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for l in 0..cfg.n_layers {
        let p = format!("h.{l}");
        let c_attn_w = fetch_matrix(src, &format!("{p}.attn.c_attn.weight"), [d, 3 * d])?;
        let c_attn_b = fetch_vector(src, &format!("{p}.attn.c_attn.bias"), 3 * d)?;
        let c_proj_w = fetch_matrix(src, &format!("{p}.attn.c_proj.weight"), [d, d])?;

        let mut w_o = Array3::zeros((h, dh, d));
        for head in 0..h {
            w_o.slice_mut(s![head, .., ..])
                .assign(&c_proj_w.slice(s![head * dh..(head + 1) * dh, ..]));
        }

        layers.push(LayerWeights {
            ln1: fetch_ln(src, &format!("{p}.ln_1"), d)?,
            ln2: fetch_ln(src, &format!("{p}.ln_2"), d)?,
            w_q: split_heads(&c_attn_w, 0, cfg),
            b_q: split_head_bias(&c_attn_b, 0, cfg),
            w_k: split_heads(&c_attn_w, 1, cfg),
            b_k: split_head_bias(&c_attn_b, 1, cfg),
            w_v: split_heads(&c_attn_w, 2, cfg),
            b_v: split_head_bias(&c_attn_b, 2, cfg),
            w_o,
            b_o: fetch_vector(src, &format!("{p}.attn.c_proj.bias"), d)?,
            w_in: fetch_matrix(src, &format!("{p}.mlp.c_fc.weight"), [d, m])?,
            b_in: fetch_vector(src, &format!("{p}.mlp.c_fc.bias"), m)?,
            w_out: fetch_matrix(src, &format!("{p}.mlp.c_proj.weight"), [m, d])?,
            b_out: fetch_vector(src, &format!("{p}.mlp.c_proj.bias"), d)?,
        });
    }

    let final_ln = fetch_ln(src, "ln_f", d)?;
    let unembedding = if src.has("lm_head.weight") {
        let lm = fetch_matrix(src, "lm_head.weight", [cfg.n_vocab, d])?;
        let diff = (&lm - &token_embedding)
            .iter()
            .fold(0f32, |acc, v| acc.max(v.abs()));
        if diff > 1e-6 {
            return Err(Error::Checkpoint(format!(
                "unembedding differs from tied token embedding by {diff}"
            )));
        }
        lm
    } else {
        token_embedding.clone()
    };

    Ok(ModelWeights {
        token_embedding,
        positional_embedding,
        layers,
        final_ln,
        unembedding,
    })
}

pub fn load_model(manifest: &CheckpointManifest) -> Result<(ModelConfig, ModelWeights)> {
    manifest.validate_paths()?;
    let cfg = ModelConfig::from_json_file(&manifest.config_path)?;
    let weights = match manifest.format {
        CheckpointFormat::Safetensors => {
            let mut f = SafetensorsFile::open(&manifest.weights_path)?;
            load_from_source(&mut f, &cfg)?
        }
        CheckpointFormat::RawF32WithIndex => {
            let mut f = RawF32File::open(&manifest.weights_path)?;
            load_from_source(&mut f, &cfg)?
        }
    };
    Ok((cfg, weights))
}
