use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::record::RunRecord;
use super::{parse_frames, AblateArgs, ConvertArgs, EditArgs, EvalArgs, Preset, RenderArgs, RunContext, SynthArgs, TrainArgs, TrainFlags};
use crate::appearance::{Appearance, TimeStamp};
use crate::edit::{EditScript, PoseSample};
use crate::error::{Error, Result};
use crate::geom::{CameraModel, Pose};
use crate::image::{DepthMap, RgbImage};
use crate::ingest::kitti::{convert_kitti, ConvertReport, KittiSequence};
use crate::ingest::{build_scene, write_synth, Dataset, SceneManifest, SynthSpec};
use crate::io::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::optim::{psnr, split_frames, ssim, MetricRecord, ObjectAppearance, TrainConfig, TrainData, TrainEvent, Trainer};
use crate::rasterizer::RenderSettings;
use crate::render::render;
use crate::scenegraph::{GaussianSet, SceneGraph};

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn cmd_convert(ctx: &RunContext, a: &ConvertArgs) -> Result<ConvertReport> {
    let seq = KittiSequence::locate(&a.kitti, a.sequence.as_deref())?;
    create_dir(&a.out)?;
    let (ds, report) = convert_kitti(&seq, &a.out)?;
    log::info!(
        "converted {} frames with {} boxes into {}",
        report.frames,
        report.boxes_per_frame.iter().sum::<usize>(),
        a.out.display()
    );
    let mut rec = RunRecord::new(ctx, "convert").input("kitti", &a.kitti);
    rec.outputs.push(a.out.join("manifest.json"));
    rec.config = Some(json!({ "sequence": a.sequence, "frames": ds.manifest.frames.len(), "warnings": report.warnings }));
    rec.write(&a.out)?;
    Ok(report)
}

pub fn cmd_synth(ctx: &RunContext, a: &SynthArgs) -> Result<Dataset> {
    let mut spec = match &a.spec {
        Some(p) => {
            let text = String::from_utf8(crate::io::read_file(p)?).map_err(|_| Error::format(p, "not UTF-8"))?;
            serde_json::from_str::<SynthSpec>(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => match a.preset {
            Preset::Fixture => SynthSpec::fixture(),
            Preset::Small => SynthSpec::small(),
        },
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    create_dir(&a.out)?;
    let ds = write_synth(&a.out, &spec)?;
    log::info!("wrote {} synthetic frames to {}", ds.manifest.frames.len(), a.out.display());
    let mut rec = RunRecord::new(ctx, "synth");
    rec.seed = Some(spec.seed);
    rec.config = Some(serde_json::to_value(&spec).expect("spec serializes"));
    rec.outputs.push(a.out.join("manifest.json"));
    rec.write(&a.out)?;
    Ok(ds)
}

/// Config file (or defaults) with command-line overrides applied.
pub fn resolve_config(flags: &TrainFlags) -> Result<TrainConfig> {
    let mut cfg = match &flags.config {
        Some(p) => {
            let text = String::from_utf8(crate::io::read_file(p)?).map_err(|_| Error::format(p, "not UTF-8"))?;
            TrainConfig::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = flags.seed {
        cfg.seed = s;
    }
    if let Some(s) = flags.split {
        cfg.split = s;
    }
    if let Some(n) = flags.iterations {
        cfg.iterations = n;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Manifest facts a checkpoint must agree with.
pub fn manifest_fingerprint(m: &SceneManifest) -> serde_json::Value {
    let t = m.time_normalization();
    json!({
        "frames": m.frames.len(),
        "t_first": t.t_first,
        "t_last": t.t_last,
        "tracks": m.track_ids(),
        "width": m.camera.width,
        "height": m.camera.height,
    })
}

/// Fails unless the scene's clock and tracks match the manifest.
pub fn check_compatible(scene: &SceneGraph, m: &SceneManifest) -> Result<()> {
    let t = m.time_normalization();
    let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * a.abs().max(b.abs()).max(1.0);
    if !close(scene.time.t_first, t.t_first) || !close(scene.time.t_last, t.t_last) {
        return Err(Error::Mismatch(format!(
            "checkpoint spans {}..{} s, manifest spans {}..{} s",
            scene.time.t_first, scene.time.t_last, t.t_first, t.t_last
        )));
    }
    let ours: std::collections::BTreeSet<u32> = scene.objects.iter().map(|o| o.track_id).collect();
    let theirs = m.track_ids();
    if ours != theirs {
        return Err(Error::Mismatch(format!("checkpoint tracks {ours:?}, manifest tracks {theirs:?}")));
    }
    Ok(())
}

fn checkpoint_config(ckpt: &Checkpoint) -> Option<TrainConfig> {
    serde_json::from_value(ckpt.metadata.get("config")?.clone()).ok()
}

fn render_settings(cfg: &TrainConfig) -> RenderSettings {
    RenderSettings {
        tile_size: cfg.tile_size,
        background: cfg.background,
        ..RenderSettings::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub final_checkpoint: PathBuf,
    pub metrics: Vec<MetricRecord>,
    pub train_frames: Vec<usize>,
    pub test_frames: Vec<usize>,
}

impl TrainSummary {
    pub fn last(&self) -> &MetricRecord {
        self.metrics.last().expect("training records at least the final iteration")
    }
}

/// Trains `scene` and writes `metrics.jsonl`, periodic checkpoints under
/// `checkpoints/`, `final.ckpt` and `config.toml` to `out`.
pub fn run_training(ds: &Dataset, scene: SceneGraph, data: &TrainData, cfg: &TrainConfig, out: &Path) -> Result<TrainSummary> {
    create_dir(out)?;
    crate::io::atomic_write(&out.join("config.toml"), cfg.to_toml().as_bytes())?;
    let metrics_path = out.join("metrics.jsonl");
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?);
    let trainer = Trainer::new(scene, data, cfg.clone())?;
    let frames_of = |idx: &[usize]| -> Vec<usize> { idx.iter().map(|&i| data.views[i].frame).collect() };
    let (train_frames, test_frames) = (frames_of(trainer.train_frames()), frames_of(trainer.test_frames()));
    let fingerprint = manifest_fingerprint(&ds.manifest);
    let final_path = out.join("final.ckpt");
    let outcome = trainer.run(|event| {
        match event {
            TrainEvent::Metric(r) => {
                let line = serde_json::to_string(r).expect("metric record serializes");
                writeln!(metrics, "{line}")
                    .and_then(|_| metrics.flush())
                    .map_err(|e| Error::io(&metrics_path, e))?;
            }
            TrainEvent::Checkpoint { iteration, scene } => {
                let meta = json!({
                    "kind": "train",
                    "version": env!("CARGO_PKG_VERSION"),
                    "iteration": iteration,
                    "seed": cfg.seed,
                    "config": cfg,
                    "manifest": fingerprint,
                    "train_frames": train_frames,
                    "test_frames": test_frames,
                });
                let path = if iteration == cfg.iterations {
                    final_path.clone()
                } else {
                    out.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
                };
                save_checkpoint(&path, scene, &meta)?;
            }
        }
        Ok(())
    })?;
    Ok(TrainSummary {
        final_checkpoint: final_path,
        metrics: outcome.log,
        train_frames,
        test_frames,
    })
}

pub fn cmd_train(ctx: &RunContext, a: &TrainArgs) -> Result<TrainSummary> {
    let mut cfg = resolve_config(&a.flags)?;
    if let Some(d) = a.dims {
        cfg.wavelet_dim = d;
    }
    if a.static_sh {
        cfg.object_appearance = ObjectAppearance::Static;
    }
    cfg.validate()?;
    let ds = Dataset::load(&a.flags.manifest)?;
    let scene = match &a.checkpoint {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            check_compatible(&ck.scene, &ds.manifest)?;
            ck.scene
        }
        None => build_scene(&ds, &cfg)?,
    };
    let data = TrainData::from_dataset(&ds)?;
    let summary = run_training(&ds, scene, &data, &cfg, &a.flags.out)?;
    let last = summary.last();
    log::info!(
        "done: {} iterations, held-out PSNR {:?} SSIM {:?}",
        last.iteration,
        last.test_psnr,
        last.test_ssim
    );
    let mut rec = RunRecord::new(ctx, "train").input("manifest", &a.flags.manifest);
    if let Some(p) = &a.checkpoint {
        rec = rec.input("checkpoint", p);
    }
    if let Some(p) = &a.flags.config {
        rec = rec.input("config", p);
    }
    rec.seed = Some(cfg.seed);
    rec.config = Some(serde_json::to_value(&cfg).expect("config serializes"));
    rec.outputs = vec![summary.final_checkpoint.clone(), a.flags.out.join("metrics.jsonl")];
    rec.write(&a.flags.out)?;
    Ok(summary)
}

/// A named camera to render.
#[derive(Clone, Debug)]
pub struct RenderView {
    pub name: String,
    pub time: TimeStamp,
    pub camera_to_world: Pose,
}

pub fn frame_views(m: &SceneManifest, frames: Option<&[usize]>) -> Result<Vec<RenderView>> {
    let positions: Vec<usize> = match frames {
        Some(f) => f.iter().map(|&i| m.position(i)).collect::<Result<_>>()?,
        None => (0..m.frames.len()).collect(),
    };
    Ok(positions
        .into_iter()
        .map(|k| RenderView {
            name: format!("frame_{:06}", m.frames[k].index),
            time: m.frame_time(k),
            camera_to_world: m.camera_to_world(k),
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraPath {
    /// Camera-to-world poses with times in scene seconds.
    pub poses: Vec<PoseSample>,
}

fn path_views(path: &Path, scene: &SceneGraph) -> Result<Vec<RenderView>> {
    let text = String::from_utf8(crate::io::read_file(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let cp: CameraPath = serde_json::from_str(&text).map_err(|e| Error::format(path, e.to_string()))?;
    if cp.poses.is_empty() {
        return Err(Error::format(path, "camera path has no poses"));
    }
    cp.poses
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(RenderView {
                name: format!("path_{i:04}"),
                time: scene.time.normalize(s.time),
                camera_to_world: Pose::from_wxyz(s.rotation, s.translation).map_err(|e| Error::format(path, e.to_string()))?,
            })
        })
        .collect()
}

/// Background only (objects hidden) and objects only (background emptied).
pub fn decompose(scene: &SceneGraph) -> (SceneGraph, SceneGraph) {
    let mut bg = scene.clone();
    bg.objects.iter_mut().for_each(|o| o.hidden = true);
    let mut objects = scene.clone();
    let empty = match &scene.background.appearance {
        Appearance::Static(s) => Appearance::Static(crate::appearance::ShCoefficients::zeros(s.degree, 0)),
        Appearance::Wavelet(w) => Appearance::Wavelet(
            crate::appearance::WaveletBank::new(w.degree, w.dim, 0).expect("existing bank has a valid dimension"),
        ),
    };
    objects.background = GaussianSet::empty(empty);
    (bg, objects)
}

fn write_render(scene: &SceneGraph, v: &RenderView, cam: &CameraModel, settings: &RenderSettings, stem: &Path) -> Result<Vec<PathBuf>> {
    let r = render(scene, v.time, &v.camera_to_world, cam, settings)?.output;
    let png = stem.with_extension("png");
    crate::io::png::write_png(&png, &RgbImage::new(cam.width, cam.height, r.color)?)?;
    let npy = PathBuf::from(format!("{}_depth.npy", stem.display()));
    let depth = DepthMap {
        width: cam.width,
        height: cam.height,
        mask: r.depth.iter().map(|d| *d > 0.0).collect(),
        depth: r.depth,
    };
    crate::io::npy::write_depth(&npy, &depth)?;
    Ok(vec![png, npy])
}

/// Writes `<name>.png` and `<name>_depth.npy` per view, plus
/// `<name>_background.*` and `<name>_objects.*` with `decomposed`.
pub fn render_views(
    scene: &SceneGraph,
    views: &[RenderView],
    cam: &CameraModel,
    settings: &RenderSettings,
    out: &Path,
    decomposed: bool,
) -> Result<Vec<PathBuf>> {
    create_dir(out)?;
    let parts = decomposed.then(|| decompose(scene));
    let mut files = vec![];
    for v in views {
        files.extend(write_render(scene, v, cam, settings, &out.join(&v.name))?);
        if let Some((bg, obj)) = &parts {
            files.extend(write_render(bg, v, cam, settings, &out.join(format!("{}_background", v.name)))?);
            files.extend(write_render(obj, v, cam, settings, &out.join(format!("{}_objects", v.name)))?);
        }
    }
    Ok(files)
}

pub fn cmd_render(ctx: &RunContext, a: &RenderArgs) -> Result<Vec<PathBuf>> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    check_compatible(&ck.scene, &ds.manifest)?;
    let scene = match &a.edit_script {
        Some(p) => EditScript::load(p)?.apply(&ck.scene, ds.manifest.motion_plane_normal)?,
        None => ck.scene.clone(),
    };
    let cfg = checkpoint_config(&ck).unwrap_or_default();
    let views = match (&a.camera_path, &a.frames) {
        (Some(p), _) => path_views(p, &scene)?,
        (None, Some(f)) => frame_views(&ds.manifest, Some(&parse_frames(f)?))?,
        (None, None) => frame_views(&ds.manifest, None)?,
    };
    let files = render_views(&scene, &views, &ds.manifest.camera, &render_settings(&cfg), &a.out, a.decompose)?;
    log::info!("rendered {} views to {}", views.len(), a.out.display());
    let mut rec = RunRecord::new(ctx, "render")
        .input("checkpoint", &a.checkpoint)
        .input("manifest", &a.manifest);
    if let Some(p) = &a.edit_script {
        rec = rec.input("edit_script", p);
    }
    rec.seed = ck.metadata.get("seed").and_then(|s| s.as_u64());
    rec.outputs = files.clone();
    rec.write(&a.out)?;
    Ok(files)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub frame: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: f64,
    pub frames: Vec<EvalRow>,
    /// Arithmetic means over `frames`.
    pub psnr: f64,
    pub ssim: f64,
}

/// PSNR and SSIM of `scene` on the held-out frames of `split`.
pub fn evaluate_split(scene: &SceneGraph, ds: &Dataset, split: f64, settings: &RenderSettings) -> Result<EvalReport> {
    check_compatible(scene, &ds.manifest)?;
    let m = &ds.manifest;
    let (_, test) = split_frames(m.frames.len(), split)?;
    if test.is_empty() {
        return Err(Error::invalid("the split holds out no frames"));
    }
    let mut rows = vec![];
    for k in test {
        let r = render(scene, m.frame_time(k), &m.camera_to_world(k), &m.camera, settings)?.output;
        let pred = RgbImage::new(m.camera.width, m.camera.height, r.color)?;
        let gt = ds.image(k)?;
        rows.push(EvalRow {
            frame: m.frames[k].index,
            psnr: psnr(&pred, &gt)?,
            ssim: ssim(&pred, &gt)?,
        });
    }
    let n = rows.len() as f64;
    Ok(EvalReport {
        split,
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        frames: rows,
    })
}

pub fn cmd_eval(ctx: &RunContext, a: &EvalArgs) -> Result<EvalReport> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let ds = Dataset::load(&a.manifest)?;
    let cfg = checkpoint_config(&ck).unwrap_or_default();
    let split = a.split.unwrap_or(cfg.split);
    let report = evaluate_split(&ck.scene, &ds, split, &render_settings(&cfg))?;
    log::info!("{} held-out frames: PSNR {:.3} SSIM {:.4}", report.frames.len(), report.psnr, report.ssim);
    create_dir(&a.out)?;
    let path = a.out.join("eval.json");
    crate::io::atomic_write(&path, serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    let mut rec = RunRecord::new(ctx, "eval")
        .input("checkpoint", &a.checkpoint)
        .input("manifest", &a.manifest);
    rec.seed = ck.metadata.get("seed").and_then(|s| s.as_u64());
    rec.config = Some(json!({ "split": split }));
    rec.outputs.push(path);
    rec.write(&a.out)?;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub dim: usize,
    pub test_psnr: f64,
    pub test_ssim: f64,
    pub train_psnr: f64,
    pub gaussians: usize,
    /// Wavelet weights, scales and translations over all objects.
    pub wavelet_parameters: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seed: u64,
    pub iterations: u32,
    pub split: f64,
    pub rows: Vec<AblationRow>,
    /// Dimension with the highest held-out PSNR.
    pub best_dim: usize,
    /// Whether held-out PSNR never decreases as the dimension grows.
    pub psnr_monotone: bool,
    pub ssim_monotone: bool,
}

fn wavelet_parameters(scene: &SceneGraph) -> usize {
    scene
        .objects
        .iter()
        .map(|o| match &o.gaussians.appearance {
            Appearance::Wavelet(w) => w.weights.len() + w.log_scales.len() + w.translations.len(),
            Appearance::Static(_) => 0,
        })
        .sum()
}

pub fn cmd_ablate(ctx: &RunContext, a: &AblateArgs) -> Result<AblationReport> {
    let mut dims = a.dims.clone();
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::invalid("--dims needs one or more positive dimensions"));
    }
    dims.sort_unstable();
    dims.dedup();
    let base = resolve_config(&a.flags)?;
    let ds = Dataset::load(&a.flags.manifest)?;
    let data = TrainData::from_dataset(&ds)?;
    let out = &a.flags.out;
    let mut rows = vec![];
    for &d in &dims {
        let cfg = TrainConfig {
            wavelet_dim: d,
            object_appearance: ObjectAppearance::Wavelet,
            ..base.clone()
        };
        log::info!("ablation: training with {d} wavelets");
        let scene = build_scene(&ds, &cfg)?;
        let summary = run_training(&ds, scene, &data, &cfg, &out.join(format!("d{d}")))?;
        let last = summary.last();
        let ck = load_checkpoint(&summary.final_checkpoint)?;
        rows.push(AblationRow {
            dim: d,
            test_psnr: last.test_psnr.unwrap_or(f64::NAN),
            test_ssim: last.test_ssim.unwrap_or(f64::NAN),
            train_psnr: last.train_psnr,
            gaussians: last.gaussians,
            wavelet_parameters: wavelet_parameters(&ck.scene),
        });
    }
    let best = rows
        .iter()
        .max_by(|x, y| x.test_psnr.total_cmp(&y.test_psnr))
        .expect("at least one dimension");
    let report = AblationReport {
        seed: base.seed,
        iterations: base.iterations,
        split: base.split,
        best_dim: best.dim,
        psnr_monotone: rows.windows(2).all(|w| w[1].test_psnr >= w[0].test_psnr),
        ssim_monotone: rows.windows(2).all(|w| w[1].test_ssim >= w[0].test_ssim),
        rows,
    };
    create_dir(out)?;
    crate::io::atomic_write(&out.join("ablation.json"), serde_json::to_string_pretty(&report).expect("report serializes").as_bytes())?;
    let mut csv = String::from("dim,test_psnr,test_ssim,train_psnr,gaussians,wavelet_parameters\n");
    for r in &report.rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.dim, r.test_psnr, r.test_ssim, r.train_psnr, r.gaussians, r.wavelet_parameters
        ));
    }
    crate::io::atomic_write(&out.join("ablation.csv"), csv.as_bytes())?;
    for r in &report.rows {
        log::info!("d={}: PSNR {:.3} SSIM {:.4}", r.dim, r.test_psnr, r.test_ssim);
    }
    let mut rec = RunRecord::new(ctx, "ablate").input("manifest", &a.flags.manifest);
    if let Some(p) = &a.flags.config {
        rec = rec.input("config", p);
    }
    rec.seed = Some(base.seed);
    rec.config = Some(json!({ "base": base, "dims": dims }));
    rec.outputs = vec![out.join("ablation.json"), out.join("ablation.csv")];
    rec.write(out)?;
    Ok(report)
}

pub fn cmd_edit(ctx: &RunContext, a: &EditArgs) -> Result<PathBuf> {
    let ck = load_checkpoint(&a.checkpoint)?;
    let script = EditScript::load(&a.edit_script)?;
    let ds = a.manifest.as_deref().map(Dataset::load).transpose()?;
    if let Some(ds) = &ds {
        check_compatible(&ck.scene, &ds.manifest)?;
    }
    let normal = ds.as_ref().map(|d| d.manifest.motion_plane_normal).unwrap_or([0.0, 0.0, 1.0]);
    let edited = script.apply(&ck.scene, normal)?;
    create_dir(&a.out)?;
    let path = a.out.join("edited.ckpt");
    let same = |p: &Path, q: &Path| match (p.canonicalize(), q.canonicalize()) {
        (Ok(x), Ok(y)) => x == y,
        _ => false,
    };
    if same(&path, &a.checkpoint) {
        return Err(Error::invalid("the edited checkpoint would overwrite its source"));
    }
    let mut meta = ck.metadata.clone();
    if let Some(obj) = meta.as_object_mut() {
        obj.insert("edit".into(), serde_json::to_value(&script).expect("script serializes"));
        obj.insert("kind".into(), json!("edit"));
    }
    save_checkpoint(&path, &edited, &meta)?;
    let mut outputs = vec![path.clone()];
    if let (Some(ds), Some(f)) = (&ds, &a.frames) {
        let cfg = checkpoint_config(&ck).unwrap_or_default();
        let views = frame_views(&ds.manifest, Some(&parse_frames(f)?))?;
        outputs.extend(render_views(&edited, &views, &ds.manifest.camera, &render_settings(&cfg), &a.out, false)?);
    }
    log::info!("applied {} edit operations; wrote {}", script.operations.len(), path.display());
    let mut rec = RunRecord::new(ctx, "edit")
        .input("checkpoint", &a.checkpoint)
        .input("edit_script", &a.edit_script);
    rec.seed = ck.metadata.get("seed").and_then(|s| s.as_u64());
    rec.config = Some(serde_json::to_value(&script).expect("script serializes"));
    rec.outputs = outputs;
    rec.write(&a.out)?;
    Ok(path)
}
