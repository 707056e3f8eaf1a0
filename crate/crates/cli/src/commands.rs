use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use posefree::calib::pose_errors;
use posefree::geometry::{Intrinsics, SE3Pose};
use posefree::gsmap::{read_ply, write_ply};
use posefree::io::{
    list_scenes, read_cameras, read_mask_png, read_png, read_sample, scene_dir, write_cameras,
    write_json, write_pfm, write_png, write_sample,
};
use posefree::metrics::{psnr, ssim, ColorImage};
use posefree::model::{train as run_training, Model};
use posefree::pipeline::{reconstruct as run_reconstruct, ReconstructOptions};
use posefree::renderer::render as rasterize;
use posefree::synth::{sample_scene, scene_seed};
use posefree::geometry::Grid;
use rayon::prelude::*;
use serde_json::{json, Value};

use crate::config::{self, ReconstructRun, SynthRun, TrainRun};
use crate::{EvalNvsArgs, EvalPoseArgs, ReconstructArgs, RenderArgs, SolverFailure, SynthArgs, TrainArgs, UsageError};

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn dir_is_empty(path: &Path) -> Result<bool> {
    if !path.exists() {
        return Ok(true);
    }
    Ok(fs::read_dir(path)
        .with_context(|| format!("reading {}", path.display()))?
        .next()
        .is_none())
}

/// JSON number, or the string `"inf"` for infinities.
pub fn json_number(v: f64) -> Value {
    if v.is_infinite() && v > 0.0 {
        Value::String("inf".into())
    } else {
        json!(v)
    }
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let mut run: SynthRun = config::load(a.config.as_deref())?;
    if let Some(v) = a.scenes {
        run.scenes = v;
    }
    if let Some(v) = a.views {
        run.synth.views = v;
    }
    if let Some(v) = a.seed {
        run.seed = v;
    }
    if let Some(v) = a.mode {
        run.synth.mode = v;
    }
    if let Some(v) = a.resolution {
        run.synth.resolution = v;
    }
    if a.random_azimuths {
        run.synth.random_azimuths = true;
    }
    if run.scenes == 0 {
        return Err(usage("--scenes must be at least 1"));
    }
    if !a.force && !dir_is_empty(&a.out)? {
        return Err(usage(format!(
            "{} exists and is not empty; pass --force to write into it",
            a.out.display()
        )));
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let samples = (0..run.scenes as u64)
        .into_par_iter()
        .map(|i| sample_scene(scene_seed(run.seed, i), &run.synth))
        .collect::<posefree::Result<Vec<_>>>()?;
    for (i, (sample, scene)) in samples.iter().enumerate() {
        write_sample(scene_dir(&a.out, i), sample, scene.seed)?;
    }
    fs::write(a.out.join("config.toml"), config::to_toml(&run)?)?;
    println!("wrote {} scenes to {}", run.scenes, a.out.display());
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut run: TrainRun = config::load(a.config.as_deref())?;
    let t = &mut run.train;
    if let Some(v) = a.steps {
        t.steps = v;
    }
    if let Some(v) = a.batch_size {
        t.batch_size = v;
    }
    if let Some(v) = a.lr {
        t.lr = v;
    }
    if let Some(v) = a.seed {
        t.seed = v;
        run.init_seed = v;
    }
    if let Some(v) = a.lambda_a {
        t.weights.lambda_a = v;
    }
    if let Some(v) = a.lambda_p {
        t.weights.lambda_p = v;
    }
    if let Some(v) = a.t_max {
        t.weights.t_max = v;
    }
    let m = &mut run.model;
    if let Some(v) = a.layers {
        m.layers = v;
    }
    if let Some(v) = a.d_model {
        m.d_model = v;
    }
    if let Some(v) = a.heads {
        m.heads = v;
    }
    if let Some(v) = a.patch {
        m.patch = v;
    }

    let dirs = list_scenes(&a.data)?;
    if dirs.is_empty() {
        bail!(posefree::Error::format("dataset", format!("no scene_* directories in {}", a.data.display())));
    }
    let data = dirs
        .par_iter()
        .map(|d| read_sample(d).map(|(s, _)| s))
        .collect::<posefree::Result<Vec<_>>>()?;
    let k = data[0].intrinsics;
    run.model.width = k.width;
    run.model.height = k.height;
    run.model.max_views = run.model.max_views.max(data.iter().map(|s| s.views()).max().unwrap_or(1));
    let mut model = Model::new(run.model, run.init_seed)?;

    let log_path = a.log.clone().unwrap_or_else(|| {
        let mut p = a.out.clone().into_os_string();
        p.push(".log.jsonl");
        PathBuf::from(p)
    });
    let mut log = std::io::BufWriter::new(
        fs::File::create(&log_path).with_context(|| format!("creating {}", log_path.display()))?,
    );
    let mut write_err = None;
    let report = run_training(&mut model, &data, &run.train, |e| {
        let line = json!({
            "step": e.step,
            "l_pos": e.l_pos,
            "l_align": e.l_align,
            "l_render": e.l_render,
            "total": e.total,
            "l_attr": e.l_attr,
            "lr": e.lr,
        });
        if let Err(err) = writeln!(log, "{line}").and_then(|_| log.flush()) {
            write_err.get_or_insert(err);
        }
        eprintln!("step {:>6}  l_pos {:.5}  l_align {:.5}  l_render {:.5}", e.step, e.l_pos, e.l_align, e.l_render);
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", log_path.display()));
    }
    model.save(&a.out)?;
    println!(
        "trained {} steps; checkpoint {}; log {}",
        report.pos_history.len(),
        a.out.display(),
        log_path.display()
    );
    Ok(())
}

pub fn reconstruct(a: ReconstructArgs) -> Result<()> {
    let mut run: ReconstructRun = config::load(a.config.as_deref())?;
    if let Some(v) = a.mode {
        run.mode = v;
    }
    if let Some(v) = a.seed {
        run.ransac.seed = v;
    }
    if let Some(v) = a.threshold {
        run.ransac.threshold_px = Some(v);
    }
    if let Some(v) = a.iterations {
        run.ransac.iterations = v;
    }
    if let Some(v) = a.tau {
        run.tau = v;
    }
    if !a.masks.is_empty() && a.masks.len() != a.images.len() {
        return Err(usage(format!("{} masks for {} images", a.masks.len(), a.images.len())));
    }
    let images = a.images.iter().map(read_png).collect::<posefree::Result<Vec<_>>>()?;
    for (p, img) in a.images.iter().zip(&images) {
        if !img.same_shape(&images[0]) {
            bail!(posefree::Error::ShapeMismatch(format!(
                "{} is {}x{} but {} is {}x{}",
                p.display(),
                img.width,
                img.height,
                a.images[0].display(),
                images[0].width,
                images[0].height
            )));
        }
    }
    let masks = a.masks.iter().map(read_mask_png).collect::<posefree::Result<Vec<_>>>()?;
    let model = Model::load(&a.checkpoint)?;
    let opts = ReconstructOptions {
        mode: run.mode,
        ransac: run.ransac,
        tau: run.tau,
    };
    let rec = run_reconstruct(&model, &images, (!masks.is_empty()).then_some(&masks[..]), &opts)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_ply(a.out.join("gaussians.ply"), &rec.all_primitives())?;
    write_cameras(a.out.join("cameras.json"), &rec.intrinsics, &rec.poses_or_identity())?;
    write_json(
        a.out.join("report.json"),
        &json!({
            "focal": rec.intrinsics.focal,
            "per_view_focals": rec.per_view_focals,
            "inliers": rec.inlier_counts,
            "failures": rec.failures,
        }),
    )?;
    if !rec.failures.is_empty() {
        let views: Vec<String> = rec.failures.iter().map(|f| format!("view {}: {}", f.view, f.error)).collect();
        return Err(SolverFailure(format!("pose recovery failed ({})", views.join("; "))).into());
    }
    println!("focal {:.4}; outputs in {}", rec.intrinsics.focal, a.out.display());
    Ok(())
}

pub fn render(a: RenderArgs) -> Result<()> {
    let (k, pose) = match (&a.cameras, &a.pose) {
        (Some(path), _) => {
            let (k, poses) = read_cameras(path)?;
            let pose = *poses
                .get(a.view)
                .ok_or_else(|| usage(format!("--view {} but the camera file has {} poses", a.view, poses.len())))?;
            (k, pose)
        }
        (None, Some(m)) => {
            let (Some(f), Some(w), Some(h)) = (a.focal, a.width, a.height) else {
                return Err(usage("--pose needs --focal, --width and --height"));
            };
            if m.len() != 16 {
                return Err(usage(format!("--pose takes 16 comma-separated values, got {}", m.len())));
            }
            (Intrinsics::new(f, w, h)?, SE3Pose::from_row_major(m)?)
        }
        (None, None) => return Err(usage("give either --cameras or --pose")),
    };
    let prims = read_ply(&a.ply)?;
    let out = rasterize(&prims, &pose, &k, a.background.background());
    write_png(&a.out, &Grid::from_vec(k.width, k.height, out.color)?)?;
    if let Some(p) = &a.depth {
        write_pfm(p, &Grid::from_vec(k.width, k.height, out.depth)?)?;
    }
    Ok(())
}

fn emit(value: &Value, out: Option<&Path>) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    if let Some(p) = out {
        write_json(p, value)?;
    }
    Ok(())
}

pub fn eval_pose(a: EvalPoseArgs) -> Result<()> {
    let (_, pred) = read_cameras(&a.pred)?;
    let (_, gt) = read_cameras(&a.gt)?;
    let e = pose_errors(&pred, &gt)?;
    emit(&serde_json::to_value(e)?, a.out.as_deref())
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

pub fn eval_nvs(a: EvalNvsArgs) -> Result<()> {
    let names = png_names(&a.rendered)?;
    if names.is_empty() {
        bail!(posefree::Error::format("image directory", format!("no PNG files in {}", a.rendered.display())));
    }
    let mut psnrs = Vec::new();
    let mut ssims = Vec::new();
    for n in &names {
        let gt_path = a.gt.join(n);
        if !gt_path.exists() {
            bail!(posefree::Error::format("image directory", format!("{} has no counterpart {}", n, gt_path.display())));
        }
        let r: ColorImage = read_png(a.rendered.join(n))?;
        let g: ColorImage = read_png(&gt_path)?;
        psnrs.push(psnr(&r, &g)?);
        ssims.push(ssim(&r, &g)?);
    }
    let count = names.len() as f64;
    let value = json!({
        "psnr": json_number(psnrs.iter().sum::<f64>() / count),
        "ssim": ssims.iter().sum::<f64>() / count,
        "images": names.len(),
    });
    emit(&value, a.out.as_deref())
}
