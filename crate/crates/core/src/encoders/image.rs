//! Face images and the vision transformer tower.

use std::path::Path;

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::autograd::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{leaf, normal, Grad, LayerNorm, ResidualBlock};

/// Per-channel mean of the pretrained model's input preprocessing.
pub const PIXEL_MEAN: [f32; 3] = [0.481_454_66, 0.457_827_5, 0.408_210_73];
/// Per-channel standard deviation of the pretrained model's input
/// preprocessing.
pub const PIXEL_STD: [f32; 3] = [0.268_629_54, 0.261_302_6, 0.275_777_1];

/// An RGB face crop, normalized with [`PIXEL_MEAN`] / [`PIXEL_STD`],
/// stored as `height × width × 3`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pixels: Array3<f32>,
}

impl FaceImage {
    /// Wraps already-normalized pixels.
    pub fn from_normalized(pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                pixels.dim().2
            )));
        }
        if pixels.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("image contains non-finite pixels".into()));
        }
        Ok(Self { pixels })
    }

    /// Normalizes RGB values in `[0, 1]`.
    pub fn from_unit_rgb(mut pixels: Array3<f32>) -> Result<Self> {
        if pixels.dim().2 != 3 {
            return Err(Error::Shape(format!(
                "expected 3 channels, got {}",
                pixels.dim().2
            )));
        }
        for ((_, _, c), v) in pixels.indexed_iter_mut() {
            *v = (*v - PIXEL_MEAN[c]) / PIXEL_STD[c];
        }
        Self::from_normalized(pixels)
    }

    /// Image whose normalized pixels are all zero.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            pixels: Array3::zeros((height, width, 3)),
        }
    }

    /// Inverse of the normalization, back to (approximately) `[0, 1]`.
    pub fn to_unit_rgb(&self) -> Array3<f32> {
        let mut out = self.pixels.clone();
        for ((_, _, c), v) in out.indexed_iter_mut() {
            *v = *v * PIXEL_STD[c] + PIXEL_MEAN[c];
        }
        out
    }

    /// Decodes an image file and resizes it to `size × size`.
    pub fn load(path: &Path, size: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
        let rgb = img
            .resize_exact(size as u32, size as u32, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let pixels = Array3::from_shape_fn((size, size, 3), |(y, x, c)| {
            rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
        });
        Self::from_unit_rgb(pixels)
    }

    /// Writes the image as 8-bit RGB (format from the file extension).
    pub fn save(&self, path: &Path) -> Result<()> {
        let unit = self.to_unit_rgb();
        let (h, w, _) = unit.dim();
        let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c| (unit[[y as usize, x as usize, c]].clamp(0.0, 1.0) * 255.0).round() as u8;
            image::Rgb([px(0), px(1), px(2)])
        });
        buf.save(path).map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn height(&self) -> usize {
        self.pixels.dim().0
    }

    pub fn width(&self) -> usize {
        self.pixels.dim().1
    }

    pub fn pixels(&self) -> &Array3<f32> {
        &self.pixels
    }

    /// Number of `patch × patch` tiles, or a shape error when the image does
    /// not tile exactly.
    pub fn patch_count(&self, patch: usize) -> Result<usize> {
        let (h, w) = (self.height(), self.width());
        if patch == 0 || h % patch != 0 || w % patch != 0 {
            return Err(Error::Shape(format!(
                "{h}×{w} image does not split into {patch}×{patch} patches"
            )));
        }
        Ok((h / patch) * (w / patch))
    }

    /// Flattens the image into one row per patch, in raster order. Each row
    /// is laid out channel-major (`c, y, x`) to match a convolutional patch
    /// embedding reshaped to `[width, 3·p·p]`.
    pub fn patchify(&self, patch: usize) -> Result<Tensor> {
        let count = self.patch_count(patch)?;
        let cols = self.width() / patch;
        let mut out = Array2::zeros((count, 3 * patch * patch));
        for (i, mut row) in out.rows_mut().into_iter().enumerate() {
            let (py, px) = (i / cols, i % cols);
            let mut k = 0;
            for c in 0..3 {
                for y in 0..patch {
                    for x in 0..patch {
                        row[k] = self.pixels[[py * patch + y, px * patch + x, c]] as f64;
                        k += 1;
                    }
                }
            }
        }
        Ok(out)
    }
}

#[derive(Clone, Debug)]
pub struct VisionDims {
    pub image_size: usize,
    pub patch_size: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub embed_dim: usize,
}

/// Parameter handles of the vision tower.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub dims: VisionDims,
    patch_embed: ParamId,
    class_embed: ParamId,
    position_embed: ParamId,
    ln_pre: LayerNorm,
    blocks: Vec<ResidualBlock>,
    ln_post: LayerNorm,
    projection: ParamId,
}

/// Graph nodes produced by one image forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ImageForward {
    /// Final-layer class token (after the post layer norm), `1 × width`.
    pub class_token: Var,
    /// Projection into the shared space, `1 × embed_dim`.
    pub embedding: Var,
}

impl ImageEncoder {
    pub fn register(store: &mut ParamStore, dims: VisionDims, rng: &mut impl Rng) -> Self {
        let w = dims.width;
        let patches = (dims.image_size / dims.patch_size).pow(2);
        let patch_in = 3 * dims.patch_size * dims.patch_size;
        let scale = (w as f64).powf(-0.5);
        let patch_embed = store.add(
            "vision_model.embeddings.patch_embedding.weight",
            normal(rng, (w, patch_in), scale),
        );
        let class_embed = store.add(
            "vision_model.embeddings.class_embedding",
            normal(rng, (1, w), scale),
        );
        let position_embed = store.add(
            "vision_model.embeddings.position_embedding.weight",
            normal(rng, (patches + 1, w), scale),
        );
        let ln_pre = LayerNorm::register(store, "vision_model.pre_layrnorm", w);
        let blocks = (0..dims.layers)
            .map(|i| {
                ResidualBlock::register(
                    store,
                    &format!("vision_model.encoder.layers.{i}"),
                    w,
                    dims.heads,
                    rng,
                )
            })
            .collect();
        let ln_post = LayerNorm::register(store, "vision_model.post_layernorm", w);
        let projection = store.add(
            "visual_projection.weight",
            normal(rng, (dims.embed_dim, w), scale),
        );
        Self {
            dims,
            patch_embed,
            class_embed,
            position_embed,
            ln_pre,
            blocks,
            ln_post,
            projection,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        img: &FaceImage,
        grad: Grad,
    ) -> Result<ImageForward> {
        let d = &self.dims;
        if img.height() != d.image_size || img.width() != d.image_size {
            return Err(Error::Shape(format!(
                "encoder expects {0}×{0} images, got {1}×{2}",
                d.image_size,
                img.height(),
                img.width()
            )));
        }
        let patches = g.constant(img.patchify(d.patch_size)?);
        let w_patch = leaf(g, store, self.patch_embed, grad);
        let tokens = g.matmul_bt(patches, w_patch);
        let cls = leaf(g, store, self.class_embed, grad);
        let seq = g.concat_rows(&[cls, tokens]);
        let pos = leaf(g, store, self.position_embed, grad);
        let mut x = g.add(seq, pos);
        x = self.ln_pre.forward(g, store, x, grad);
        for block in &self.blocks {
            x = block.forward(g, store, x, None, grad);
        }
        let first = g.slice_rows(x, 0, 1);
        let class_token = self.ln_post.forward(g, store, first, grad);
        let proj = leaf(g, store, self.projection, grad);
        let embedding = g.matmul_bt(class_token, proj);
        Ok(ImageForward {
            class_token,
            embedding,
        })
    }

    pub fn position_embedding(&self) -> ParamId {
        self.position_embed
    }

    /// Parameters that feed the class token (everything but the projection).
    pub fn backbone_params(&self) -> Vec<ParamId> {
        let mut p = vec![self.patch_embed, self.class_embed, self.position_embed];
        p.extend(self.ln_pre.params());
        for b in &self.blocks {
            p.extend(b.params());
        }
        p.extend(self.ln_post.params());
        p
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.backbone_params();
        p.push(self.projection);
        p
    }
}
