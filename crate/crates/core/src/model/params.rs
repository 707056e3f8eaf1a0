//! Named parameter tensors, initialization, and checkpoint files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::layers::{BlockGrads, BlockWeights};
use super::ModelConfig;
use crate::error::{Error, Result};
use crate::gsmap::{channel, inverse_softplus, Q};

pub const INIT_STD: f64 = 0.02;
const BLOCK_TENSORS: usize = 8;
const HEAD: usize = 4;

/// One learnable matrix. Vectors are stored as `1 × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
    /// Whether decoupled weight decay applies.
    pub decay: bool,
}

/// Every learnable tensor of the model, in a fixed order: patch embedding,
/// position embeddings, `e_ref`, `e_src`, eight tensors per block, head
/// weight, head bias. Gradients use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

fn truncated_normal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    let dist = Normal::new(0.0, INIT_STD).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || loop {
        let v: f64 = dist.sample(rng);
        if v.abs() <= 2.0 * INIT_STD {
            break v;
        }
    })
}

impl Params {
    /// Shapes and names for `cfg`, all zero.
    pub fn zeros(cfg: &ModelConfig) -> Params {
        let d = cfg.d_model;
        let hidden = cfg.mlp_ratio * d;
        let mut tensors = Vec::new();
        let mut push = |name: String, shape: (usize, usize), decay: bool| {
            tensors.push(Tensor {
                name,
                value: Array2::zeros(shape),
                decay,
            })
        };
        push("patch_embed".into(), (cfg.token_len(), d), true);
        push("pos_embed".into(), (cfg.tokens_per_view(), d), true);
        push("e_ref".into(), (1, d), true);
        push("e_src".into(), (1, d), true);
        for l in 0..cfg.layers {
            push(format!("blocks.{l}.ln1"), (1, d), false);
            push(format!("blocks.{l}.wq"), (d, d), true);
            push(format!("blocks.{l}.wk"), (d, d), true);
            push(format!("blocks.{l}.wv"), (d, d), true);
            push(format!("blocks.{l}.wo"), (d, d), true);
            push(format!("blocks.{l}.ln2"), (1, d), false);
            push(format!("blocks.{l}.w1"), (d, hidden), true);
            push(format!("blocks.{l}.w2"), (hidden, d), true);
        }
        push("head.weight".into(), (d, cfg.head_len()), true);
        push("head.bias".into(), (1, cfg.head_len()), false);
        Params { tensors }
    }

    /// Truncated-normal matrices and embeddings, unit LayerNorm gains, and a
    /// head bias that decodes to Gaussians at `(0, 0, init_depth)` with
    /// scale `init_scale`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Params {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Params::zeros(cfg);
        let n = p.tensors.len();
        for (i, t) in p.tensors.iter_mut().enumerate() {
            let (r, c) = t.value.dim();
            if i == n - 1 {
                continue;
            }
            if t.name.ends_with(".ln1") || t.name.ends_with(".ln2") {
                t.value.fill(1.0);
            } else {
                t.value = truncated_normal(&mut rng, r, c);
            }
        }
        let raw_scale = inverse_softplus(cfg.init_scale);
        let bias = &mut p.tensors[n - 1].value;
        for px in 0..cfg.patch * cfg.patch {
            let base = px * Q;
            bias[(0, base + channel::POSITION.start + 2)] = cfg.init_depth;
            bias[(0, base + channel::ROTATION.start)] = 1.0;
            for c in channel::SCALE {
                bias[(0, base + c)] = raw_scale;
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Params {
        Params {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    value: Array2::zeros(t.value.raw_dim()),
                    decay: t.decay,
                })
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn layers(&self) -> usize {
        (self.tensors.len() - HEAD - 2) / BLOCK_TENSORS
    }

    pub fn patch_embed(&self) -> &Array2<f64> {
        &self.tensors[0].value
    }

    pub fn pos_embed(&self) -> &Array2<f64> {
        &self.tensors[1].value
    }

    pub fn e_ref(&self) -> &Array2<f64> {
        &self.tensors[2].value
    }

    pub fn e_src(&self) -> &Array2<f64> {
        &self.tensors[3].value
    }

    fn block_base(l: usize) -> usize {
        HEAD + l * BLOCK_TENSORS
    }

    pub fn block(&self, l: usize) -> BlockWeights<'_> {
        let t = &self.tensors[Self::block_base(l)..Self::block_base(l + 1)];
        BlockWeights {
            ln1: &t[0].value,
            wq: &t[1].value,
            wk: &t[2].value,
            wv: &t[3].value,
            wo: &t[4].value,
            ln2: &t[5].value,
            w1: &t[6].value,
            w2: &t[7].value,
        }
    }

    pub fn set_block(&mut self, l: usize, g: BlockGrads) {
        let b = Self::block_base(l);
        for (i, v) in [g.ln1, g.wq, g.wk, g.wv, g.wo, g.ln2, g.w1, g.w2].into_iter().enumerate() {
            self.tensors[b + i].value = v;
        }
    }

    pub fn head_weight(&self) -> &Array2<f64> {
        &self.tensors[self.tensors.len() - 2].value
    }

    pub fn head_bias(&self) -> &Array2<f64> {
        &self.tensors[self.tensors.len() - 1].value
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.iter_mut().find(|t| t.name == name)
    }

    /// `self += other`, tensor by tensor.
    pub fn add_assign(&mut self, other: &Params) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value += &b.value;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            t.value *= s;
        }
    }

    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.value.iter().map(|v| v * v).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|v| v.is_finite()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Offset into the payload, in elements.
    pub offset: usize,
}

/// JSON half of a checkpoint; the payload is a sibling `.bin` of little-endian f64.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub config: ModelConfig,
    pub dtype: String,
    pub tensors: Vec<TensorEntry>,
}

/// Payload path for a manifest path: `model.json` → `model.bin`.
pub fn payload_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("bin")
}

pub fn save_checkpoint(path: impl AsRef<Path>, cfg: &ModelConfig, params: &Params) -> Result<()> {
    let path = path.as_ref();
    let mut entries = Vec::with_capacity(params.tensors.len());
    let mut payload = Vec::with_capacity(params.len() * 8);
    let mut offset = 0;
    for t in &params.tensors {
        let (r, c) = t.value.dim();
        entries.push(TensorEntry {
            name: t.name.clone(),
            shape: [r, c],
            offset,
        });
        for v in t.value.iter() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        offset += r * c;
    }
    let manifest = Manifest {
        config: *cfg,
        dtype: "f64".into(),
        tensors: entries,
    };
    let bin = payload_path(path);
    let mut f = fs::File::create(&bin).map_err(|e| Error::io(&bin, e))?;
    f.write_all(&payload).map_err(|e| Error::io(&bin, e))?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelConfig, Params)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.dtype != "f64" {
        return Err(Error::format("checkpoint", format!("unsupported dtype '{}'", manifest.dtype)));
    }
    manifest.config.validate()?;
    let bin = payload_path(path);
    let bytes = fs::read(&bin).map_err(|e| Error::io(&bin, e))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::format("checkpoint", "payload length is not a multiple of 8"));
    }
    let values: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let mut params = Params::zeros(&manifest.config);
    if manifest.tensors.len() != params.tensors.len() {
        return Err(Error::format(
            "checkpoint",
            format!("{} tensors, config needs {}", manifest.tensors.len(), params.tensors.len()),
        ));
    }
    for (entry, t) in manifest.tensors.iter().zip(&mut params.tensors) {
        let (r, c) = t.value.dim();
        if entry.name != t.name || entry.shape != [r, c] {
            return Err(Error::format(
                "checkpoint",
                format!("tensor '{}' {:?} does not match '{}' {:?}", entry.name, entry.shape, t.name, [r, c]),
            ));
        }
        let end = entry.offset + r * c;
        let slice = values
            .get(entry.offset..end)
            .ok_or_else(|| Error::format("checkpoint", format!("tensor '{}' runs past the payload", entry.name)))?;
        t.value = Array2::from_shape_vec((r, c), slice.to_vec()).expect("shape checked");
    }
    Ok((manifest.config, params))
}
