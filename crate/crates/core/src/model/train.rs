//! Staged training on position and ray-alignment supervision.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::optim::{learning_rate, AdamW, AdamWConfig};
use super::params::Params;
use super::Model;
use crate::error::{Error, Result};
use crate::geometry::{PointMap, SE3Pose};
use crate::gsmap::{channel, mean_masked_distance, rescale_gaussians, sigmoid, PrimitiveMap, Q};
use crate::losses::{alignment_loss, position_loss, render_loss, total_loss, LossComponents, LossWeights};
use crate::renderer::render;
use crate::synth::DatasetSample;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup: usize,
    pub optimizer: AdamWConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weights: LossWeights,
    /// Weight of the color regression on foreground pixels.
    pub color_weight: f64,
    /// Weight of the opacity-versus-mask regression on all pixels.
    pub opacity_weight: f64,
    /// Fraction of batch items fed as a single view.
    pub mono_fraction: f64,
    /// Pick a random reference view, keeping the cyclic view order.
    pub rotate_reference: bool,
    /// Log (and evaluate the render loss) every this many steps.
    pub log_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 8,
            lr: 3e-3,
            min_lr: 1e-5,
            warmup: 100,
            optimizer: AdamWConfig::default(),
            grad_clip: 1.0,
            weights: LossWeights::default(),
            color_weight: 1.0,
            opacity_weight: 1.0,
            mono_fraction: 0.25,
            rotate_reference: true,
            log_every: 50,
            seed: 0,
        }
    }
}

/// One JSON-lines record of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub l_pos: f64,
    pub l_align: f64,
    pub l_render: f64,
    pub total: f64,
    pub l_attr: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainReport {
    pub log: Vec<LogEntry>,
    /// Batch-mean position loss of every step.
    pub pos_history: Vec<f64>,
}

/// Loss value, components and parameter gradient of one sample.
#[derive(Debug, Clone)]
pub struct SampleObjective {
    /// The optimized objective: `λp·1[t ≤ T_max]·L_pos + λa·L_align + L_attr`.
    pub value: f64,
    pub pos: f64,
    pub align: f64,
    pub attr: f64,
    pub grads: Params,
    /// Predicted primitives rescaled to unit mean masked distance.
    pub rescaled: Vec<PrimitiveMap>,
}

/// Forward, scale alignment, losses and backward for one sample.
///
/// Predictions are divided by their masked mean distance and the ground
/// truth (points and camera centers) by its own, so both live at unit scale
/// before the geometric losses are taken.
pub fn sample_objective(model: &Model, s: &DatasetSample, cfg: &TrainConfig, step: usize) -> Result<SampleObjective> {
    let (maps, cache) = model.forward_cached(&s.images)?;
    let pred: Vec<PointMap> = maps.iter().map(|m| m.positions()).collect();
    let d_hat = mean_masked_distance(&pred, &s.masks)?;
    if !(d_hat > 1e-12) {
        return Err(Error::Degenerate("predicted foreground collapsed onto the origin".into()));
    }
    let scaled: Vec<PointMap> = pred.iter().map(|m| m.map(|x| x / d_hat)).collect();
    let s_gt = 1.0 / mean_masked_distance(&s.points, &s.masks)?;
    let gt: Vec<PointMap> = s.points.iter().map(|m| m.map(|x| x * s_gt)).collect();
    let poses: Vec<SE3Pose> = s.poses.iter().map(|p| p.scaled(s_gt)).collect();

    let w = &cfg.weights;
    let (pos, g_pos) = position_loss(&scaled, &gt, &s.masks)?;
    let (align, g_align) = alignment_loss(&scaled, &poses, &gt, Some(&s.masks))?;
    let lp = if w.position_active(step) { w.lambda_p } else { 0.0 };

    // Combined gradient w.r.t. the scaled points, then through the division by d̂.
    let count = s.masks.iter().map(|m| m.count()).sum::<usize>() as f64;
    let mut g_scaled: Vec<Vec<Vector3<f64>>> = Vec::with_capacity(maps.len());
    let mut dot = 0.0;
    for n in 0..maps.len() {
        let g: Vec<Vector3<f64>> = g_pos[n]
            .data
            .iter()
            .zip(&g_align[n].data)
            .map(|(a, b)| a * lp + b * w.lambda_a)
            .collect();
        dot += g.iter().zip(&pred[n].data).map(|(g, x)| g.dot(x)).sum::<f64>();
        g_scaled.push(g);
    }
    let k = dot / (d_hat * d_hat * count);

    let total_px = (maps.len() * maps[0].width * maps[0].height) as f64;
    let mut attr = 0.0;
    let mut d_raw: Vec<Vec<f64>> = Vec::with_capacity(maps.len());
    for n in 0..maps.len() {
        let mut d = vec![0.0; maps[n].raw.len()];
        for i in 0..pred[n].len() {
            let raw = &maps[n].raw[i * Q..(i + 1) * Q];
            let out = &mut d[i * Q..(i + 1) * Q];
            let inside = s.masks[n].data[i];
            let mut g = g_scaled[n][i] / d_hat;
            if inside {
                let x = pred[n].data[i];
                let r = x.norm();
                if r > 0.0 {
                    g -= x * (k / r);
                }
            }
            out[channel::POSITION].copy_from_slice(g.as_slice());

            let o = sigmoid(raw[channel::OPACITY]);
            let target = if inside { 1.0 } else { 0.0 };
            attr += cfg.opacity_weight * (o - target).powi(2) / total_px;
            out[channel::OPACITY] = cfg.opacity_weight * 2.0 * (o - target) / total_px * o * (1.0 - o);
            if inside {
                let img = s.images[n].data[i];
                for (c, ch) in channel::COLOR.enumerate() {
                    let v = sigmoid(raw[ch]);
                    let e = v - img[c];
                    attr += cfg.color_weight * e * e / (3.0 * count);
                    out[ch] = cfg.color_weight * 2.0 * e / (3.0 * count) * v * (1.0 - v);
                }
            }
        }
        d_raw.push(d);
    }

    let grads = model.backward(&cache, &d_raw)?;
    let prims: Vec<PrimitiveMap> = maps.iter().map(|m| m.decode()).collect::<Result<_>>()?;
    let (rescaled, _) = rescale_gaussians(&prims, &s.masks)?;
    Ok(SampleObjective {
        value: lp * pos + w.lambda_a * align + attr,
        pos,
        align,
        attr,
        grads,
        rescaled,
    })
}

/// Render loss of the rescaled reference-view prediction against view 1,
/// rendered at the identity pose.
fn reference_render_loss(s: &DatasetSample, rescaled: &[PrimitiveMap]) -> Result<f64> {
    let prims: Vec<_> = rescaled.iter().flat_map(|m| m.data.iter().copied()).collect();
    let out = render(&prims, &SE3Pose::identity(), &s.intrinsics, s.mode.background());
    render_loss(&out, &s.images[0])
}

fn draw_item(rng: &mut ChaCha8Rng, data: &[DatasetSample], cfg: &TrainConfig) -> Result<DatasetSample> {
    let s = &data[rng.random_range(0..data.len())];
    let v = s.views();
    let mono = rng.random::<f64>() < cfg.mono_fraction;
    let r = rng.random_range(0..v);
    if mono {
        return s.subset(&[r]);
    }
    let first = if cfg.rotate_reference { r } else { 0 };
    let order: Vec<usize> = (0..v).map(|k| (first + k) % v).collect();
    s.subset(&order)
}

/// Optimizes `model` on `data`; `on_log` sees every log record as it is produced.
///
/// Batch items are evaluated in parallel and reduced in batch order, so a
/// fixed seed gives bitwise-identical parameters.
pub fn train(
    model: &mut Model,
    data: &[DatasetSample],
    cfg: &TrainConfig,
    mut on_log: impl FnMut(&LogEntry),
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    if cfg.steps == 0 {
        return Ok(report);
    }
    if data.is_empty() || cfg.batch_size == 0 {
        return Err(Error::InvalidArgument("training needs data and a positive batch size".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(cfg.optimizer, &model.params);
    for step in 1..=cfg.steps {
        let batch: Vec<DatasetSample> = (0..cfg.batch_size)
            .map(|_| draw_item(&mut rng, data, cfg))
            .collect::<Result<_>>()?;
        let results: Vec<Result<SampleObjective>> = batch
            .par_iter()
            .map(|s| sample_objective(model, s, cfg, step))
            .collect();
        let mut grads = model.params.zeros_like();
        let (mut pos, mut align, mut attr) = (0.0, 0.0, 0.0);
        let mut first = None;
        for r in results {
            let o = r.map_err(|e| Error::Diverged {
                step,
                what: e.to_string(),
            })?;
            if !(o.value.is_finite() && o.grads.all_finite()) {
                return Err(Error::Diverged {
                    step,
                    what: format!("non-finite loss {} (l_pos {}, l_align {})", o.value, o.pos, o.align),
                });
            }
            pos += o.pos;
            align += o.align;
            attr += o.attr;
            grads.add_assign(&o.grads);
            if first.is_none() {
                first = Some(o.rescaled);
            }
        }
        let b = cfg.batch_size as f64;
        grads.scale(1.0 / b);
        let (pos, align, attr) = (pos / b, align / b, attr / b);
        report.pos_history.push(pos);
        if cfg.grad_clip > 0.0 {
            let norm = grads.norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
        }
        let lr = learning_rate(step, cfg.steps, cfg.warmup, cfg.lr, cfg.min_lr);
        opt.update(&mut model.params, &grads, lr);

        if step % cfg.log_every.max(1) == 0 || step == 1 || step == cfg.steps {
            let l_render = reference_render_loss(&batch[0], first.as_ref().unwrap())?;
            let c = LossComponents {
                render: l_render,
                align,
                pos,
            };
            let entry = LogEntry {
                step,
                l_pos: pos,
                l_align: align,
                l_render,
                total: total_loss(step, &c, &cfg.weights),
                l_attr: attr,
                lr,
            };
            on_log(&entry);
            report.log.push(entry);
        }
    }
    Ok(report)
}
