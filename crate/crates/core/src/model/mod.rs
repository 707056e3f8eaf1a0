//! Single-stream transformer mapping N images to N pixel-aligned Gaussian maps.
//!
//! Images are cut into `p × p` patches, linearly embedded, tagged with a
//! shared position table and a reference or source view embedding, passed
//! through `L` pre-norm self-attention blocks attending over every token of
//! every view, and decoded by a linear head into `p²` Gaussians per token.

mod layers;
mod optim;
mod params;
mod train;

pub use layers::{
    add_embeddings, add_embeddings_backward, block_backward, block_forward, gelu, gelu_grad,
    layer_norm, layer_norm_backward, patchify, unpatchify, BlockCache, BlockGrads, BlockWeights,
    LnCache, LN_EPS,
};
pub use optim::{learning_rate, AdamW, AdamWConfig};
pub use params::{
    load_checkpoint, payload_path, save_checkpoint, Manifest, Params, Tensor, TensorEntry, INIT_STD,
};
pub use train::{
    sample_objective, train, LogEntry, SampleObjective, TrainConfig, TrainReport,
};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gsmap::{GaussianMap, Q};
use crate::metrics::ColorImage;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub patch: usize,
    pub width: usize,
    pub height: usize,
    pub max_views: usize,
    pub mlp_ratio: usize,
    /// Depth of the Gaussians decoded from a zero network output.
    pub init_depth: f64,
    /// Scale of the Gaussians decoded from a zero network output.
    pub init_scale: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            heads: 4,
            patch: 4,
            width: 32,
            height: 32,
            max_views: 8,
            mlp_ratio: 4,
            init_depth: 2.0,
            init_scale: 0.035,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.patch == 0 || self.width % self.patch != 0 || self.height % self.patch != 0 || self.width == 0 || self.height == 0 {
            return bad(format!(
                "image {}x{} is not divisible into {}x{} patches",
                self.width, self.height, self.patch, self.patch
            ));
        }
        if self.heads == 0 || self.d_model == 0 || self.d_model % self.heads != 0 {
            return bad(format!("width {} is not divisible by {} heads", self.d_model, self.heads));
        }
        if self.max_views == 0 || self.mlp_ratio == 0 {
            return bad("max views and MLP ratio must be positive".into());
        }
        if !(self.init_scale > 0.0) || !self.init_depth.is_finite() {
            return bad("initial Gaussian scale must be positive".into());
        }
        Ok(())
    }

    /// Tokens per view, `M = HW / p²`.
    pub fn tokens_per_view(&self) -> usize {
        (self.width / self.patch) * (self.height / self.patch)
    }

    /// Raw token length, `p²·3`.
    pub fn token_len(&self) -> usize {
        self.patch * self.patch * 3
    }

    /// Head output per token, `p²·q`.
    pub fn head_len(&self) -> usize {
        self.patch * self.patch * Q
    }
}

/// What the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub views: usize,
    patches: Array2<f64>,
    blocks: Vec<BlockCache>,
    last: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Params,
}

fn flatten(img: &ColorImage) -> Vec<f64> {
    img.data.iter().flat_map(|c| c.iter().copied()).collect()
}

/// Linear head and unpatchify: final tokens to raw Gaussian maps.
pub fn decode_head(tokens: &Array2<f64>, params: &Params, cfg: &ModelConfig, views: usize) -> Result<Vec<GaussianMap>> {
    let out = tokens.dot(params.head_weight()) + params.head_bias();
    unpatchify(&out, views, cfg.width, cfg.height, Q, cfg.patch)?
        .into_iter()
        .map(|raw| GaussianMap::new(cfg.width, cfg.height, raw))
        .collect()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        Ok(Model {
            params: Params::init(&config, seed),
            config,
        })
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Model> {
        let (config, params) = load_checkpoint(path)?;
        Ok(Model { config, params })
    }

    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        save_checkpoint(path, &self.config, &self.params)
    }

    fn check_images(&self, images: &[ColorImage]) -> Result<()> {
        let cfg = &self.config;
        if images.is_empty() || images.len() > cfg.max_views {
            return Err(Error::InvalidArgument(format!(
                "model takes 1 to {} views, got {}",
                cfg.max_views,
                images.len()
            )));
        }
        for (n, img) in images.iter().enumerate() {
            if img.width != cfg.width || img.height != cfg.height {
                return Err(Error::ShapeMismatch(format!(
                    "view {n} is {}x{}, model expects {}x{}",
                    img.width, img.height, cfg.width, cfg.height
                )));
            }
        }
        Ok(())
    }

    /// Gaussian maps for `images`, all expressed in the first view's camera frame.
    pub fn forward(&self, images: &[ColorImage]) -> Result<Vec<GaussianMap>> {
        self.forward_cached(images).map(|(maps, _)| maps)
    }

    pub fn forward_cached(&self, images: &[ColorImage]) -> Result<(Vec<GaussianMap>, ForwardCache)> {
        self.check_images(images)?;
        let cfg = &self.config;
        let flat: Vec<Vec<f64>> = images.iter().map(flatten).collect();
        let patches = patchify(&flat, cfg.width, cfg.height, 3, cfg.patch)?;
        let mut x = patches.dot(self.params.patch_embed());
        add_embeddings(&mut x, self.params.pos_embed(), self.params.e_ref(), self.params.e_src());
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let (y, c) = block_forward(&x, &self.params.block(l), cfg.heads);
            blocks.push(c);
            x = y;
        }
        let maps = decode_head(&x, &self.params, cfg, images.len())?;
        Ok((
            maps,
            ForwardCache {
                views: images.len(),
                patches,
                blocks,
                last: x,
            },
        ))
    }

    /// Parameter gradients given the gradient w.r.t. every raw map channel
    /// (`height × width × 14` per view, row-major).
    pub fn backward(&self, cache: &ForwardCache, d_raw: &[Vec<f64>]) -> Result<Params> {
        let cfg = &self.config;
        if d_raw.len() != cache.views {
            return Err(Error::ShapeMismatch(format!(
                "{} gradient maps for {} views",
                d_raw.len(),
                cache.views
            )));
        }
        let d_out = patchify(d_raw, cfg.width, cfg.height, Q, cfg.patch)?;
        let mut g = self.params.zeros_like();
        let n = g.tensors.len();
        g.tensors[n - 2].value = cache.last.t().dot(&d_out);
        g.tensors[n - 1].value = d_out.sum_axis(ndarray::Axis(0)).insert_axis(ndarray::Axis(0));
        let mut dx = d_out.dot(&self.params.head_weight().t());
        for l in (0..cfg.layers).rev() {
            let (d_in, bg) = block_backward(&dx, &self.params.block(l), &cache.blocks[l], cfg.heads);
            g.set_block(l, bg);
            dx = d_in;
        }
        let (d_pos, d_ref, d_src) = add_embeddings_backward(&dx, cfg.tokens_per_view());
        g.tensors[0].value = cache.patches.t().dot(&dx);
        g.tensors[1].value = d_pos;
        g.tensors[2].value = d_ref;
        g.tensors[3].value = d_src;
        Ok(g)
    }
}
