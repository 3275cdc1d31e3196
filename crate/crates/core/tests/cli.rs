//! End-to-end runs of the command line on the small synthetic fixture.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::OnceLock;

use common::{camera, random_scene, SceneShape};
use wavesplat::appearance::TimeStamp;
use wavesplat::cli::{decompose, run, AblationReport, EvalReport};
use wavesplat::geom::Pose;
use wavesplat::io::checkpoint::load_checkpoint;
use wavesplat::optim::split_frames;
use wavesplat::render::render;
use wavesplat::rasterizer::RenderSettings;

fn small_manifest() -> String {
    common::fixture("synth_small/manifest.json").display().to_string()
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

fn ok(args: &[&str]) {
    let mut argv = vec!["wavesplat", "--threads", "1", "--quiet"];
    argv.extend_from_slice(args);
    assert_eq!(run(argv.clone()), 0, "{argv:?}");
}

/// A 20-iteration single-thread run shared by the tests below.
fn trained() -> &'static Path {
    static DIR: OnceLock<PathBuf> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap().keep();
        let out = dir.join("train");
        ok(&["train", "--manifest", &small_manifest(), "--iterations", "20", "--split", "0.5", "--out", &s(&out)]);
        out
    })
}

fn ckpt() -> String {
    s(&trained().join("final.ckpt"))
}

fn read_json<T: serde::de::DeserializeOwned>(p: &Path) -> T {
    serde_json::from_slice(&std::fs::read(p).unwrap()).unwrap()
}

#[test]
fn training_writes_its_outputs() {
    let out = trained();
    for f in ["config.toml", "metrics.jsonl", "final.ckpt", "run.json"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let lines = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
    let last: serde_json::Value = serde_json::from_str(lines.lines().last().unwrap()).unwrap();
    assert_eq!(last["iteration"], 20);
    let ck = load_checkpoint(&out.join("final.ckpt")).unwrap();
    assert_eq!(ck.metadata["iteration"], 20);
    assert_eq!(ck.metadata["test_frames"], serde_json::json!([1, 3]));
    let rec: serde_json::Value = read_json(&out.join("run.json"));
    assert_eq!(rec["command"], "train");
    assert_eq!(rec["threads"], 1);
}

#[test]
fn eval_scores_exactly_the_held_out_frames() {
    let out = tempfile::tempdir().unwrap();
    ok(&["eval", "--checkpoint", &ckpt(), "--manifest", &small_manifest(), "--out", &s(out.path())]);
    let report: EvalReport = read_json(&out.path().join("eval.json"));
    assert_eq!(report.split, 0.5);
    let frames: Vec<usize> = report.frames.iter().map(|r| r.frame).collect();
    assert_eq!(frames, vec![1, 3]);
    let mean = report.frames.iter().map(|r| r.psnr).sum::<f64>() / 2.0;
    assert!((report.psnr - mean).abs() < 1e-12);
    let mean = report.frames.iter().map(|r| r.ssim).sum::<f64>() / 2.0;
    assert!((report.ssim - mean).abs() < 1e-12);
    assert!(out.path().join("run.json").is_file());
    // Split 1.0 trains on everything and scores every frame.
    ok(&["eval", "--checkpoint", &ckpt(), "--manifest", &small_manifest(), "--split", "1.0", "--out", &s(out.path())]);
    let report: EvalReport = read_json(&out.path().join("eval.json"));
    assert_eq!(report.frames.len(), 5);
}

#[test]
fn repeated_single_thread_renders_are_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for dir in [a.path(), b.path()] {
        ok(&["render", "--checkpoint", &ckpt(), "--manifest", &small_manifest(), "--frames", "0,2-3", "--decompose", "--out", &s(dir)]);
    }
    let mut names: Vec<String> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n != "run.json")
        .collect();
    names.sort();
    // Three frames, three layers, an image and a depth map each.
    assert_eq!(names.len(), 18, "{names:?}");
    for part in ["frame_000002.png", "frame_000002_depth.npy", "frame_000003_background.png", "frame_000000_objects_depth.npy"] {
        assert!(names.iter().any(|n| n == part), "missing {part}");
    }
    for n in &names {
        assert_eq!(std::fs::read(a.path().join(n)).unwrap(), std::fs::read(b.path().join(n)).unwrap(), "{n} differs");
    }
    assert!(a.path().join("run.json").is_file());
}

#[test]
fn camera_paths_and_edits_render() {
    let dir = tempfile::tempdir().unwrap();
    let ck = load_checkpoint(&PathBuf::from(ckpt())).unwrap();
    let id = ck.scene.objects[0].track_id;
    let script = dir.path().join("edit.json");
    std::fs::write(&script, format!(r#"{{"version": 1, "operations": [{{"op": "remove", "track_id": {id}}}]}}"#)).unwrap();
    let edited = dir.path().join("edited");
    ok(&["edit", "--checkpoint", &ckpt(), "--edit-script", &s(&script), "--manifest", &small_manifest(), "--frames", "0", "--out", &s(&edited)]);
    let out = load_checkpoint(&edited.join("edited.ckpt")).unwrap();
    assert!(out.scene.objects[0].hidden);
    assert_eq!(out.metadata["kind"], "edit");
    assert!(edited.join("frame_000000.png").is_file());
    assert!(edited.join("run.json").is_file());

    let path = dir.path().join("path.json");
    std::fs::write(
        &path,
        r#"{"poses": [
            {"time": 0.0, "translation": [0, 0, 1.5], "rotation": [0.5, -0.5, 0.5, -0.5]},
            {"time": 0.1, "translation": [1, 0, 1.5], "rotation": [0.5, -0.5, 0.5, -0.5]}
        ]}"#,
    )
    .unwrap();
    let renders = dir.path().join("path");
    ok(&["render", "--checkpoint", &ckpt(), "--manifest", &small_manifest(), "--camera-path", &s(&path), "--edit-script", &s(&script), "--out", &s(&renders)]);
    for f in ["path_0000.png", "path_0001_depth.npy", "run.json"] {
        assert!(renders.join(f).is_file(), "missing {f}");
    }
}

fn stderr_of(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_wavesplat")).args(args).output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn errors_are_reported_by_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let (code, err) = stderr_of(&["--quiet", "render", "--checkpoint", &ckpt(), "--manifest", &small_manifest(), "--frames", "99", "--out", &out]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[unknown-frame]:"), "{err}");

    // A checkpoint trained on another sequence does not fit this one.
    let other = common::fixture("synth/manifest.json");
    let (code, err) = stderr_of(&["--quiet", "render", "--checkpoint", &ckpt(), "--manifest", &s(&other), "--frames", "0", "--out", &out]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[mismatch]:"), "{err}");

    let (code, err) = stderr_of(&["eval", "--checkpoint", "/nonexistent.ckpt", "--manifest", &small_manifest(), "--out", &out]);
    assert_eq!(code, 1);
    assert!(err.starts_with("error[io]:"), "{err}");

    let (code, err) = stderr_of(&["render", "--out", &out]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[usage]:"), "{err}");

    // Editing in place is refused.
    let script = dir.path().join("noop.json");
    std::fs::write(&script, r#"{"version": 1, "operations": []}"#).unwrap();
    let src = dir.path().join("edited.ckpt");
    std::fs::copy(ckpt(), &src).unwrap();
    let (code, _) = stderr_of(&["--quiet", "edit", "--checkpoint", &s(&src), "--edit-script", &s(&script), "--out", &out]);
    assert_eq!(code, 1);
}

#[test]
fn resuming_rejects_a_different_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let other = common::fixture("synth/manifest.json");
    let argv = ["wavesplat", "--quiet", "train", "--manifest", &s(&other), "--checkpoint", &ckpt(), "--iterations", "1", "--out", &s(dir.path())];
    assert_eq!(run(argv), 1);
}

#[test]
fn objects_only_render_of_an_empty_scene_is_the_background_color() {
    let cam = camera(24, 20);
    let settings = RenderSettings::default();
    let scene = random_scene(3, SceneShape::default());
    let (_, objects) = decompose(&scene);
    let mut none = objects.clone();
    none.objects.iter_mut().for_each(|o| o.hidden = true);
    // Hidden objects, and visible objects outside their window.
    for (s, t) in [(&none, 0.5), (&objects, 1.5), (&objects, -0.5)] {
        let r = render(s, TimeStamp(t), &Pose::identity(), &cam, &settings).unwrap().output;
        for px in r.color.chunks(3) {
            assert_eq!(px, settings.background);
        }
        assert!(r.depth.iter().chain(&r.accum).all(|v| *v == 0.0));
    }
}

#[test]
fn ablation_reports_one_row_per_dimension() {
    let dir = tempfile::tempdir().unwrap();
    ok(&["ablate", "--manifest", &small_manifest(), "--iterations", "2", "--split", "0.5", "--dims", "9,1,3,7,5,3", "--out", &s(dir.path())]);
    let report: AblationReport = read_json(&dir.path().join("ablation.json"));
    let dims: Vec<usize> = report.rows.iter().map(|r| r.dim).collect();
    assert_eq!(dims, vec![1, 3, 5, 7, 9]);
    assert!(report.rows.iter().all(|r| r.test_psnr.is_finite() && r.test_ssim.is_finite()));
    // Parameter count grows linearly in the dimension.
    let per_dim = report.rows[0].wavelet_parameters;
    for r in &report.rows {
        assert_eq!(r.wavelet_parameters, per_dim * r.dim);
    }
    let best = report.rows.iter().max_by(|a, b| a.test_psnr.total_cmp(&b.test_psnr)).unwrap();
    assert_eq!(report.best_dim, best.dim);
    let csv = std::fs::read_to_string(dir.path().join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 6);
    for d in dims {
        assert!(dir.path().join(format!("d{d}/final.ckpt")).is_file());
    }
    assert!(dir.path().join("run.json").is_file());
    assert_eq!(run(["wavesplat", "--quiet", "ablate", "--manifest", &small_manifest(), "--dims", "0,1", "--out", &s(dir.path())]), 1);
}

#[test]
fn split_patterns() {
    let (train, test) = split_frames(8, 0.75).unwrap();
    assert_eq!(test, vec![3, 7]);
    assert_eq!(train, vec![0, 1, 2, 4, 5, 6]);
    assert_eq!(split_frames(8, 0.5).unwrap().1, vec![1, 3, 5, 7]);
    assert_eq!(split_frames(8, 0.25).unwrap().0, vec![0, 4]);
    let (train, test) = split_frames(8, 1.0).unwrap();
    assert_eq!(train, (0..8).collect::<Vec<_>>());
    assert_eq!(test, train);
    assert!(split_frames(8, 0.6).is_err());
}

#[test]
fn synth_presets_are_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [a.path(), b.path()] {
        ok(&["synth", "--preset", "small", "--seed", "4", "--out", &s(d)]);
    }
    for f in ["manifest.json", "images/000002.png"] {
        assert_eq!(std::fs::read(a.path().join(f)).unwrap(), std::fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
