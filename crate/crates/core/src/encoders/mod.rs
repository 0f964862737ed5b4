//! The dual encoder: a vision transformer and a causal text transformer that
//! both project into one shared embedding space, plus the two trainable heads.

pub mod checkpoint;
pub mod heads;
pub mod image;
pub mod text;
pub mod tokenizer;

use std::sync::atomic::{AtomicUsize, Ordering};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};
use crate::nn::Grad;

pub use checkpoint::{load_archive, load_pretrained, save_archive, Manifest, PretrainedOptions};
pub use heads::{MlpHead, NormMode, ProjectorH, RunningStatUpdate};
pub use image::{FaceImage, ImageEncoder, ImageForward, VisionDims};
pub use text::{TextDims, TextEncoder};
pub use tokenizer::{Tokenized, Tokenizer};

/// Architecture hyper-parameters of the whole model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub vision_width: usize,
    pub vision_layers: usize,
    pub vision_heads: usize,
    pub text_width: usize,
    pub text_layers: usize,
    pub text_heads: usize,
    pub vocab_size: usize,
    pub context_length: usize,
    pub embed_dim: usize,
    pub head_hidden: usize,
    pub projector_dims: [usize; 3],
}

impl ModelConfig {
    /// ViT-B/16 dual encoder at 224×224.
    pub fn vit_b16() -> Self {
        Self {
            image_size: 224,
            patch_size: 16,
            vision_width: 768,
            vision_layers: 12,
            vision_heads: 12,
            text_width: 512,
            text_layers: 12,
            text_heads: 8,
            vocab_size: 49408,
            context_length: 77,
            embed_dim: 512,
            head_hidden: 512,
            projector_dims: [512, 4096, 256],
        }
    }

    /// Miniature model for desk-scale experiments and tests: two blocks per
    /// tower, width 32, 32×32 images in 8×8 patches, a 16-dimensional shared
    /// space and a byte-level text vocabulary.
    pub fn toy() -> Self {
        Self {
            image_size: 32,
            patch_size: 8,
            vision_width: 32,
            vision_layers: 2,
            vision_heads: 2,
            text_width: 32,
            text_layers: 2,
            text_heads: 2,
            vocab_size: 514,
            context_length: 77,
            embed_dim: 16,
            head_hidden: 512,
            projector_dims: [64, 128, 32],
        }
    }

    pub fn patch_count(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image size {} is not a multiple of patch size {}",
                self.image_size, self.patch_size
            ));
        }
        if self.vision_heads == 0 || self.vision_width % self.vision_heads != 0 {
            return bad("vision width must divide evenly into heads".into());
        }
        if self.text_heads == 0 || self.text_width % self.text_heads != 0 {
            return bad("text width must divide evenly into heads".into());
        }
        if self.context_length < 2 {
            return bad("context length must hold the start and end markers".into());
        }
        Ok(())
    }
}

/// A point in the shared vision-language space.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingVec(pub Vec<f64>);

impl EmbeddingVec {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub(crate) fn from_row(t: &Tensor) -> Self {
        Self(t.iter().copied().collect())
    }

    pub fn to_row(&self) -> Tensor {
        Array2::from_shape_vec((1, self.0.len()), self.0.clone()).expect("row shape")
    }
}

/// Identifies which groups of parameters a training strategy may change.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    ImageBackbone,
    ImageProjection,
    Text,
    LogitScale,
    Head,
    Projector,
}

/// All weights of the dual encoder and its heads, in one parameter store.
#[derive(Debug)]
pub struct FasModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub image: ImageEncoder,
    pub text: TextEncoder,
    pub tokenizer: Tokenizer,
    pub head: MlpHead,
    pub projector: ProjectorH,
    pub logit_scale: ParamId,
    truncations: AtomicUsize,
}

impl Clone for FasModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            image: self.image.clone(),
            text: self.text.clone(),
            tokenizer: self.tokenizer.clone(),
            head: self.head.clone(),
            projector: self.projector.clone(),
            logit_scale: self.logit_scale,
            truncations: AtomicUsize::new(self.truncations.load(Ordering::Relaxed)),
        }
    }
}

impl FasModel {
    /// Randomly initialized model. Uses the byte-level tokenizer unless the
    /// configured vocabulary requires a merge list (see
    /// [`FasModel::with_tokenizer`]).
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let tokenizer = Tokenizer::byte_level(config.context_length);
        Self::with_tokenizer(config, tokenizer, seed)
    }

    pub fn with_tokenizer(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(Error::Config(format!(
                "tokenizer has {} symbols but the model expects {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let image = ImageEncoder::register(
            &mut store,
            VisionDims {
                image_size: config.image_size,
                patch_size: config.patch_size,
                width: config.vision_width,
                layers: config.vision_layers,
                heads: config.vision_heads,
                embed_dim: config.embed_dim,
            },
            &mut rng,
        );
        let text = TextEncoder::register(
            &mut store,
            TextDims {
                vocab_size: config.vocab_size,
                context: config.context_length,
                width: config.text_width,
                layers: config.text_layers,
                heads: config.text_heads,
                embed_dim: config.embed_dim,
            },
            &mut rng,
        );
        let logit_scale = store.add("logit_scale", Array2::from_elem((1, 1), (1.0f64 / 0.07).ln()));
        let head = MlpHead::register(&mut store, config.vision_width, config.head_hidden, &mut rng);
        let projector =
            ProjectorH::register(&mut store, config.embed_dim, config.projector_dims, &mut rng);
        Ok(Self {
            config,
            store,
            image,
            text,
            tokenizer,
            head,
            projector,
            logit_scale,
            truncations: AtomicUsize::new(0),
        })
    }

    pub fn group(&self, group: ParamGroup) -> Vec<ParamId> {
        match group {
            ParamGroup::ImageBackbone => self.image.backbone_params(),
            ParamGroup::ImageProjection => {
                let all = self.image.params();
                vec![*all.last().expect("projection registered")]
            }
            ParamGroup::Text => self.text.params(),
            ParamGroup::LogitScale => vec![self.logit_scale],
            ParamGroup::Head => self.head.params(),
            ParamGroup::Projector => self.projector.params(),
        }
    }

    /// `exp` of the stored log-scale: the inverse temperature `1/τ`.
    pub fn logit_scale(&self) -> f64 {
        self.store.get(self.logit_scale)[[0, 0]].exp()
    }

    /// Number of prompts that had to be truncated to fit the context.
    pub fn truncation_warnings(&self) -> usize {
        self.truncations.load(Ordering::Relaxed)
    }

    /// Tokenizes a prompt; over-long prompts are truncated and counted.
    pub fn tokenize(&self, prompt: &str) -> Result<Tokenized> {
        if prompt.trim().is_empty() {
            return Err(Error::InvalidInput("prompt is empty".into()));
        }
        let tokens = self.tokenizer.encode(prompt);
        if tokens.truncated {
            self.truncations.fetch_add(1, Ordering::Relaxed);
            log::warn!(
                "prompt truncated to {} tokens: {prompt:?}",
                self.tokenizer.context()
            );
        }
        Ok(tokens)
    }

    /// Eval-mode image encoding: the final class token and its projection.
    pub fn encode_image(&self, img: &FaceImage) -> Result<(Vec<f64>, EmbeddingVec)> {
        let mut g = Graph::new();
        let out = self.image.forward(&mut g, &self.store, img, Grad::Frozen)?;
        Ok((
            g.value(out.class_token).iter().copied().collect(),
            EmbeddingVec::from_row(g.value(out.embedding)),
        ))
    }

    pub fn encode_text(&self, prompt: &str) -> Result<EmbeddingVec> {
        let tokens = self.tokenize(prompt)?;
        let mut g = Graph::new();
        let z = self.text.forward(&mut g, &self.store, &tokens, Grad::Frozen)?;
        Ok(EmbeddingVec::from_row(g.value(z)))
    }

    /// Two class logits (real, spoof) for one class token.
    pub fn mlp_forward(&self, class_token: &[f64]) -> Result<[f64; 2]> {
        if class_token.len() != self.config.vision_width {
            return Err(Error::Shape(format!(
                "class token has {} entries, head expects {}",
                class_token.len(),
                self.config.vision_width
            )));
        }
        if class_token.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("class token is not finite".into()));
        }
        let mut g = Graph::new();
        let x = g.constant(Array2::from_shape_vec((1, class_token.len()), class_token.to_vec()).expect("row"));
        let y = self.head.forward(&mut g, &self.store, x, Grad::Frozen);
        let v = g.value(y);
        Ok([v[[0, 0]], v[[0, 1]]])
    }

    /// Projects a batch of shared-space embeddings (`n × embed_dim`).
    pub fn project_h(&self, batch: &Tensor, mode: NormMode) -> Result<Tensor> {
        if batch.ncols() != self.config.embed_dim {
            return Err(Error::Shape(format!(
                "projector expects {} columns, got {}",
                self.config.embed_dim,
                batch.ncols()
            )));
        }
        let mut g = Graph::new();
        let x = g.constant(batch.clone());
        let (h, _) = self.projector.forward(&mut g, &self.store, x, mode, Grad::Frozen)?;
        Ok(g.value(h).clone())
    }
}
