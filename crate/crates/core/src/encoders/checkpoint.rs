//! Weight I/O.
//!
//! Two formats are handled, both stored as safetensors:
//!
//! * the published ViT-B/16 dual-encoder checkpoint (`vision_model.*`,
//!   `text_model.*`, `visual_projection.weight`, `text_projection.weight`,
//!   `logit_scale`), read by [`load_pretrained`];
//! * finetuned archives written by [`save_archive`]: every parameter as
//!   little-endian `f64` under `param/<name>`, optional extra tensors (the
//!   optimizer moments), and a JSON manifest plus the tokenizer merge list in
//!   the header metadata.

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use safetensors::tensor::{Dtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::encoders::tokenizer::Tokenizer;
use crate::encoders::{FasModel, ModelConfig};
use crate::error::{Error, Result};

const PARAM_PREFIX: &str = "param/";
const ARCHIVE_FORMAT: u32 = 1;

/// Describes how a finetuned archive was produced.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: u32,
    /// Training strategy tag, absent for an untrained model.
    pub strategy: Option<String>,
    pub iteration: usize,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
    pub model: ModelConfig,
}

impl Manifest {
    pub fn new(model: &ModelConfig, strategy: Option<String>, iteration: usize, seed: u64, config_hash: String) -> Self {
        Self {
            format: ARCHIVE_FORMAT,
            strategy,
            iteration,
            seed,
            config_hash,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            model: model.clone(),
        }
    }
}

/// Settings for weights that the published checkpoint does not contain.
#[derive(Clone, Debug)]
pub struct PretrainedOptions {
    /// Seed for the freshly initialized classifier head and projector.
    pub seed: u64,
    pub head_hidden: usize,
    pub projector_dims: [usize; 3],
    /// Merge list for the tokenizer; defaults to `merges.txt` next to the
    /// checkpoint. Not needed for a 514-symbol byte-level vocabulary.
    pub merges: Option<PathBuf>,
}

impl Default for PretrainedOptions {
    fn default() -> Self {
        let base = ModelConfig::vit_b16();
        Self {
            seed: 0,
            head_hidden: base.head_hidden,
            projector_dims: base.projector_dims,
            merges: None,
        }
    }
}

/// What [`load_pretrained`] did with each tensor.
#[derive(Clone, Debug, Default)]
pub struct LoadReport {
    pub mapped: usize,
    /// Parameters left at their random initialization (heads only).
    pub initialized: Vec<String>,
    /// Tensors in the file that are buffers with no trainable counterpart.
    pub skipped: Vec<String>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn to_f64(path: &Path, name: &str, view: &TensorView<'_>) -> Result<Vec<f64>> {
    let bytes = view.data();
    let out = match view.dtype() {
        Dtype::F64 => bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
        Dtype::F32 => bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F16 => bytes
            .chunks_exact(2)
            .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
            .collect(),
        Dtype::BF16 => bytes
            .chunks_exact(2)
            .map(|c| f32::from_bits((u16::from_le_bytes([c[0], c[1]]) as u32) << 16) as f64)
            .collect(),
        other => {
            return Err(Error::checkpoint(
                path,
                format!("tensor {name} has unsupported dtype {other:?}"),
            ))
        }
    };
    Ok(out)
}

fn f16_to_f64(bits: u16) -> f64 {
    let sign = if bits & 0x8000 != 0 { -1.0 } else { 1.0 };
    let exp = ((bits >> 10) & 0x1f) as i32;
    let frac = (bits & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        e => sign * (1.0 + frac / 1024.0) * 2f64.powi(e - 15),
    }
}

fn layer_count(names: &[&str], prefix: &str) -> usize {
    names
        .iter()
        .filter_map(|n| n.strip_prefix(prefix))
        .filter_map(|rest| rest.split('.').next()?.parse::<usize>().ok())
        .map(|i| i + 1)
        .max()
        .unwrap_or(0)
}

fn shape_of(st: &SafeTensors<'_>, path: &Path, name: &str) -> Result<Vec<usize>> {
    st.tensor(name)
        .map(|t| t.shape().to_vec())
        .map_err(|_| Error::checkpoint(path, format!("missing tensor {name}")))
}

/// Reads the published dual-encoder checkpoint. Every tower tensor must map
/// onto exactly one model parameter with a matching shape; missing or
/// unexpected names fail the load and are listed in the error. Only the
/// classifier head and the projector keep their random initialization.
pub fn load_pretrained(path: &Path, opts: &PretrainedOptions) -> Result<(FasModel, LoadReport)> {
    let bytes = read_file(path)?;
    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("not a readable checkpoint: {e}")))?;
    let names: Vec<&str> = st.names().into_iter().map(String::as_str).collect();

    let class = shape_of(&st, path, "vision_model.embeddings.class_embedding")?;
    let patch = shape_of(&st, path, "vision_model.embeddings.patch_embedding.weight")?;
    let vpos = shape_of(&st, path, "vision_model.embeddings.position_embedding.weight")?;
    let vproj = shape_of(&st, path, "visual_projection.weight")?;
    let tok = shape_of(&st, path, "text_model.embeddings.token_embedding.weight")?;
    let tpos = shape_of(&st, path, "text_model.embeddings.position_embedding.weight")?;
    if patch.len() != 4 || vpos.len() != 2 || vproj.len() != 2 || tok.len() != 2 || tpos.len() != 2 {
        return Err(Error::checkpoint(path, "unexpected embedding tensor ranks"));
    }
    let vision_width = class.iter().product::<usize>();
    let patch_size = patch[3];
    let grid = ((vpos[0] - 1) as f64).sqrt().round() as usize;
    if grid * grid + 1 != vpos[0] {
        return Err(Error::checkpoint(path, "vision positions do not form a square grid"));
    }
    let text_width = tok[1];
    let config = ModelConfig {
        image_size: grid * patch_size,
        patch_size,
        vision_width,
        vision_layers: layer_count(&names, "vision_model.encoder.layers."),
        vision_heads: (vision_width / 64).max(1),
        text_width,
        text_layers: layer_count(&names, "text_model.encoder.layers."),
        text_heads: (text_width / 64).max(1),
        vocab_size: tok[0],
        context_length: tpos[0],
        embed_dim: vproj[0],
        head_hidden: opts.head_hidden,
        projector_dims: opts.projector_dims,
    };

    let merges_path = opts
        .merges
        .clone()
        .unwrap_or_else(|| path.with_file_name("merges.txt"));
    let tokenizer = if config.vocab_size == Tokenizer::byte_level(config.context_length).vocab_size() {
        Tokenizer::byte_level(config.context_length)
    } else {
        Tokenizer::from_merges_file(&merges_path, config.context_length)?
    };
    let mut model = FasModel::with_tokenizer(config, tokenizer, opts.seed)?;

    let mut report = LoadReport::default();
    let mut loaded = BTreeSet::new();
    let mut unexpected = Vec::new();
    for name in &names {
        if name.ends_with("position_ids") {
            report.skipped.push(name.to_string());
            continue;
        }
        let Some(id) = model.store.lookup(name) else {
            unexpected.push(name.to_string());
            continue;
        };
        let view = st.tensor(name).expect("listed name");
        let values = to_f64(path, name, &view)?;
        let target = model.store.get(id).dim();
        if values.len() != target.0 * target.1 {
            return Err(Error::checkpoint(
                path,
                format!(
                    "tensor {name} has shape {:?}, model expects {}×{}",
                    view.shape(),
                    target.0,
                    target.1
                ),
            ));
        }
        model
            .store
            .set(id, Array2::from_shape_vec(target, values).expect("checked length"));
        loaded.insert(id);
        report.mapped += 1;
    }

    let fresh = |n: &str| n.starts_with("head.") || n.starts_with("projector.");
    let mut missing = Vec::new();
    for id in model.store.ids() {
        let n = model.store.name(id);
        if loaded.contains(&id) {
            continue;
        }
        if fresh(n) {
            report.initialized.push(n.to_string());
        } else {
            missing.push(n.to_string());
        }
    }
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::checkpoint(
            path,
            format!(
                "layout mismatch; missing: [{}]; unexpected: [{}]",
                missing.join(", "),
                unexpected.join(", ")
            ),
        ));
    }
    Ok((model, report))
}

fn le_bytes(t: &Tensor) -> Vec<u8> {
    t.iter().flat_map(|v| v.to_le_bytes()).collect()
}

/// Writes every parameter and buffer of `model` plus `extra` tensors.
pub fn save_archive(
    path: &Path,
    model: &FasModel,
    manifest: &Manifest,
    extra: &[(String, Tensor)],
) -> Result<()> {
    let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
    for id in model.store.ids() {
        let t = model.store.get(id);
        buffers.push((
            format!("{PARAM_PREFIX}{}", model.store.name(id)),
            vec![t.nrows(), t.ncols()],
            le_bytes(t),
        ));
    }
    for (name, t) in extra {
        if name.starts_with(PARAM_PREFIX) {
            return Err(Error::checkpoint(path, format!("extra tensor {name} uses the reserved prefix")));
        }
        buffers.push((name.clone(), vec![t.nrows(), t.ncols()], le_bytes(t)));
    }
    let views = buffers
        .iter()
        .map(|(n, shape, data)| {
            TensorView::new(Dtype::F64, shape.clone(), data)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::checkpoint(path, e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("manifest".to_string(), serde_json::to_string(manifest)?);
    meta.insert("merges".to_string(), model.tokenizer.merges_text());
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    safetensors::tensor::serialize_to_file(views, &Some(meta), path)
        .map_err(|e| Error::checkpoint(path, format!("write failed: {e}")))
}

/// A finetuned model read back from disk.
#[derive(Debug)]
pub struct Archive {
    pub model: FasModel,
    pub manifest: Manifest,
    pub extra: HashMap<String, Tensor>,
}

pub fn load_archive(path: &Path) -> Result<Archive> {
    let bytes = read_file(path)?;
    let (_, meta) = SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("not a readable archive: {e}")))?;
    let info = meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::checkpoint(path, "archive has no manifest"))?;
    let manifest: Manifest = serde_json::from_str(
        info.get("manifest")
            .ok_or_else(|| Error::checkpoint(path, "archive has no manifest"))?,
    )
    .map_err(|e| Error::checkpoint(path, format!("bad manifest: {e}")))?;
    if manifest.format != ARCHIVE_FORMAT {
        return Err(Error::checkpoint(path, format!("unsupported archive format {}", manifest.format)));
    }
    let merges = Tokenizer::parse_merges(info.get("merges").map(String::as_str).unwrap_or(""))
        .map_err(|e| Error::checkpoint(path, e))?;
    let tokenizer = Tokenizer::from_merges(merges, manifest.model.context_length);
    let mut model = FasModel::with_tokenizer(manifest.model.clone(), tokenizer, manifest.seed)?;

    let st = SafeTensors::deserialize(&bytes)
        .map_err(|e| Error::checkpoint(path, format!("not a readable archive: {e}")))?;
    let mut seen = BTreeSet::new();
    let mut extra = HashMap::new();
    let mut unexpected = Vec::new();
    for (name, view) in st.tensors() {
        let values = to_f64(path, &name, &view)?;
        let shape = view.shape();
        if shape.len() != 2 {
            return Err(Error::checkpoint(path, format!("tensor {name} is not 2-D")));
        }
        let t = Array2::from_shape_vec((shape[0], shape[1]), values)
            .map_err(|e| Error::checkpoint(path, e.to_string()))?;
        match name.strip_prefix(PARAM_PREFIX) {
            Some(pname) => match model.store.lookup(pname) {
                Some(id) => {
                    if model.store.get(id).dim() != t.dim() {
                        return Err(Error::checkpoint(
                            path,
                            format!("tensor {pname} has shape {:?}, model expects {:?}", t.dim(), model.store.get(id).dim()),
                        ));
                    }
                    model.store.set(id, t);
                    seen.insert(id);
                }
                None => unexpected.push(pname.to_string()),
            },
            None => {
                extra.insert(name, t);
            }
        }
    }
    let missing: Vec<_> = model
        .store
        .ids()
        .filter(|id| !seen.contains(id))
        .map(|id| model.store.name(id).to_string())
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() {
        return Err(Error::checkpoint(
            path,
            format!(
                "layout mismatch; missing: [{}]; unexpected: [{}]",
                missing.join(", "),
                unexpected.join(", ")
            ),
        ));
    }
    Ok(Archive {
        model,
        manifest,
        extra,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_precision_decoding() {
        assert_eq!(f16_to_f64(0x3c00), 1.0);
        assert_eq!(f16_to_f64(0xc000), -2.0);
        assert_eq!(f16_to_f64(0x0001), 2f64.powi(-24));
        assert!(f16_to_f64(0x7c00).is_infinite());
    }

    #[test]
    fn layer_indices_are_counted() {
        let names = ["a.layers.0.x", "a.layers.3.y", "a.layers.1.z", "b.layers.7.w"];
        assert_eq!(layer_count(&names, "a.layers."), 4);
        assert_eq!(layer_count(&names, "c.layers."), 0);
    }
}
