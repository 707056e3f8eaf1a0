//! Forward and backward passes of the transformer building blocks.
//!
//! Activations are row-major `tokens × features` matrices. Every forward
//! function returns a cache holding what its backward pass needs.

use ndarray::{s, Array1, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Splits `n` row-major `height × width × channels` maps into `p × p`
/// patches, one token per patch. Patches are ordered row-major within a
/// view; entries within a patch are ordered `(dy, dx, channel)`.
pub fn patchify(
    maps: &[Vec<f64>],
    width: usize,
    height: usize,
    channels: usize,
    p: usize,
) -> Result<Array2<f64>> {
    if p == 0 || width % p != 0 || height % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} maps are not divisible into {p}x{p} patches"
        )));
    }
    let (gw, gh) = (width / p, height / p);
    let m = gw * gh;
    let mut out = Array2::zeros((maps.len() * m, p * p * channels));
    for (n, map) in maps.iter().enumerate() {
        if map.len() != width * height * channels {
            return Err(Error::BadLength {
                expected: width * height * channels,
                got: map.len(),
            });
        }
        for py in 0..gh {
            for px in 0..gw {
                let mut row = out.row_mut(n * m + py * gw + px);
                for dy in 0..p {
                    let src = ((py * p + dy) * width + px * p) * channels;
                    let dst = dy * p * channels;
                    for k in 0..p * channels {
                        row[dst + k] = map[src + k];
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`] for `views` maps.
pub fn unpatchify(
    tokens: &Array2<f64>,
    views: usize,
    width: usize,
    height: usize,
    channels: usize,
    p: usize,
) -> Result<Vec<Vec<f64>>> {
    if p == 0 || width % p != 0 || height % p != 0 {
        return Err(Error::InvalidArgument(format!(
            "{width}x{height} maps are not divisible into {p}x{p} patches"
        )));
    }
    let (gw, gh) = (width / p, height / p);
    let m = gw * gh;
    if tokens.dim() != (views * m, p * p * channels) {
        return Err(Error::ShapeMismatch(format!(
            "token matrix {:?} does not hold {views} views of {m} patches with {} entries",
            tokens.dim(),
            p * p * channels
        )));
    }
    let mut maps = vec![vec![0.0; width * height * channels]; views];
    for (n, map) in maps.iter_mut().enumerate() {
        for py in 0..gh {
            for px in 0..gw {
                let row = tokens.row(n * m + py * gw + px);
                for dy in 0..p {
                    let dst = ((py * p + dy) * width + px * p) * channels;
                    let src = dy * p * channels;
                    for k in 0..p * channels {
                        map[dst + k] = row[src + k];
                    }
                }
            }
        }
    }
    Ok(maps)
}

/// `tokens[n·M + m] += pos[m] + (e_ref if n = 0 else e_src)`.
pub fn add_embeddings(
    tokens: &mut Array2<f64>,
    pos: &Array2<f64>,
    e_ref: &Array2<f64>,
    e_src: &Array2<f64>,
) {
    let m = pos.nrows();
    for (t, mut row) in tokens.axis_iter_mut(Axis(0)).enumerate() {
        let view = if t < m { e_ref } else { e_src };
        row += &pos.row(t % m);
        row += &view.row(0);
    }
}

/// Gradients of [`add_embeddings`]: `(d_pos, d_e_ref, d_e_src)`.
pub fn add_embeddings_backward(
    d_tokens: &Array2<f64>,
    m: usize,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let d = d_tokens.ncols();
    let mut d_pos = Array2::zeros((m, d));
    let mut d_ref = Array2::zeros((1, d));
    let mut d_src = Array2::zeros((1, d));
    for (t, row) in d_tokens.axis_iter(Axis(0)).enumerate() {
        let mut p = d_pos.row_mut(t % m);
        p += &row;
        let mut v = if t < m { d_ref.row_mut(0) } else { d_src.row_mut(0) };
        v += &row;
    }
    (d_pos, d_ref, d_src)
}

#[derive(Debug, Clone)]
pub struct LnCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

/// Row-wise layer normalization with a gain and no offset.
pub fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>) -> (Array2<f64>, LnCache) {
    let d = x.ncols() as f64;
    let mean = x.sum_axis(Axis(1)) / d;
    let mut xhat = x - &mean.view().insert_axis(Axis(1));
    let var = xhat.mapv(|v| v * v).sum_axis(Axis(1)) / d;
    let inv_std = var.mapv(|v| 1.0 / (v + LN_EPS).sqrt());
    xhat *= &inv_std.view().insert_axis(Axis(1));
    let y = &xhat * &gain.row(0);
    (y, LnCache { xhat, inv_std })
}

/// Returns `(dx, d_gain)`.
pub fn layer_norm_backward(dy: &Array2<f64>, gain: &Array2<f64>, c: &LnCache) -> (Array2<f64>, Array2<f64>) {
    let d = dy.ncols() as f64;
    let d_gain = (dy * &c.xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
    let dxhat = dy * &gain.row(0);
    let mean_d = dxhat.sum_axis(Axis(1)) / d;
    let mean_dx = (&dxhat * &c.xhat).sum_axis(Axis(1)) / d;
    let mut dx = dxhat - &mean_d.insert_axis(Axis(1));
    dx -= &(&c.xhat * &mean_dx.insert_axis(Axis(1)));
    dx *= &c.inv_std.view().insert_axis(Axis(1));
    (dx, d_gain)
}

/// Tanh approximation of GELU.
pub fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + GELU_A * u * u * u)).tanh())
}

pub fn gelu_grad(u: f64) -> f64 {
    let t = (GELU_C * (u + GELU_A * u * u * u)).tanh();
    0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * u * u)
}

/// Weights of one pre-norm block.
pub struct BlockWeights<'a> {
    pub ln1: &'a Array2<f64>,
    pub wq: &'a Array2<f64>,
    pub wk: &'a Array2<f64>,
    pub wv: &'a Array2<f64>,
    pub wo: &'a Array2<f64>,
    pub ln2: &'a Array2<f64>,
    pub w1: &'a Array2<f64>,
    pub w2: &'a Array2<f64>,
}

/// Gradients of one block, in [`BlockWeights`] order.
pub struct BlockGrads {
    pub ln1: Array2<f64>,
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
    pub ln2: Array2<f64>,
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockCache {
    ln1: LnCache,
    h1: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    /// Softmax probabilities per head.
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    ln2: LnCache,
    h2: Array2<f64>,
    u: Array2<f64>,
    a: Array2<f64>,
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.axis_iter_mut(Axis(0)) {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// `e_attn = SelfAttn(LN(e)) + e; e_out = MLP(LN(e_attn)) + e_attn`, with full
/// multi-head attention over every token.
pub fn block_forward(x: &Array2<f64>, w: &BlockWeights, heads: usize) -> (Array2<f64>, BlockCache) {
    let d = x.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let (h1, ln1) = layer_norm(x, w.ln1);
    let q = h1.dot(w.wq);
    let k = h1.dot(w.wk);
    let v = h1.dot(w.wv);
    let mut attn = Array2::zeros(x.raw_dim());
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let mut sc = q.slice(cols).dot(&k.slice(cols).t()) * scale;
        softmax_rows(&mut sc);
        attn.slice_mut(cols).assign(&sc.dot(&v.slice(cols)));
        probs.push(sc);
    }
    let mid = x + &attn.dot(w.wo);
    let (h2, ln2) = layer_norm(&mid, w.ln2);
    let u = h2.dot(w.w1);
    let a = u.mapv(gelu);
    let out = &mid + &a.dot(w.w2);
    let cache = BlockCache {
        ln1,
        h1,
        q,
        k,
        v,
        probs,
        attn,
        ln2,
        h2,
        u,
        a,
    };
    (out, cache)
}

fn matmul_tn(a: &ArrayView2<f64>, b: &ArrayView2<f64>) -> Array2<f64> {
    a.t().dot(b)
}

/// Returns the gradient w.r.t. the block input and all block weights.
pub fn block_backward(
    dout: &Array2<f64>,
    w: &BlockWeights,
    c: &BlockCache,
    heads: usize,
) -> (Array2<f64>, BlockGrads) {
    let d = dout.ncols();
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    // MLP branch.
    let g_w2 = matmul_tn(&c.a.view(), &dout.view());
    let mut du = dout.dot(&w.w2.t());
    Zip::from(&mut du).and(&c.u).for_each(|g, &u| *g *= gelu_grad(u));
    let g_w1 = matmul_tn(&c.h2.view(), &du.view());
    let dh2 = du.dot(&w.w1.t());
    let (dmid_ln, g_ln2) = layer_norm_backward(&dh2, w.ln2, &c.ln2);
    let dmid = dout + &dmid_ln;

    // Attention branch.
    let g_wo = matmul_tn(&c.attn.view(), &dmid.view());
    let dattn = dmid.dot(&w.wo.t());
    let mut dq = Array2::zeros(c.q.raw_dim());
    let mut dk = Array2::zeros(c.k.raw_dim());
    let mut dv = Array2::zeros(c.v.raw_dim());
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let p = &c.probs[h];
        let dout_h = dattn.slice(cols);
        let dp = dout_h.dot(&c.v.slice(cols).t());
        dv.slice_mut(cols).assign(&p.t().dot(&dout_h));
        let row_dot = (&dp * p).sum_axis(Axis(1));
        let ds = (dp - &row_dot.insert_axis(Axis(1))) * p * scale;
        dq.slice_mut(cols).assign(&ds.dot(&c.k.slice(cols)));
        dk.slice_mut(cols).assign(&ds.t().dot(&c.q.slice(cols)));
    }
    let g_wq = matmul_tn(&c.h1.view(), &dq.view());
    let g_wk = matmul_tn(&c.h1.view(), &dk.view());
    let g_wv = matmul_tn(&c.h1.view(), &dv.view());
    let dh1 = dq.dot(&w.wq.t()) + dk.dot(&w.wk.t()) + dv.dot(&w.wv.t());
    let (dx_ln, g_ln1) = layer_norm_backward(&dh1, w.ln1, &c.ln1);
    let dx = dmid + dx_ln;
    (
        dx,
        BlockGrads {
            ln1: g_ln1,
            wq: g_wq,
            wk: g_wk,
            wv: g_wv,
            wo: g_wo,
            ln2: g_ln2,
            w1: g_w1,
            w2: g_w2,
        },
    )
}
