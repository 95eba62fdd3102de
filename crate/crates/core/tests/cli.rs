use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use opn_core::frame::RgbFrame;
use opn_core::io::{load_frame, load_mask, save_frame, save_mask};
use opn_core::mask::MaskPlane;
use serde_json::Value;

fn opn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_opn")).args(args).env("OPN_THREADS", "1").output().expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn frame(seed: usize, h: usize, w: usize) -> RgbFrame {
    RgbFrame::from_fn(h, w, |c, y, x| ((y * 7 + x * 3 + c * 11 + seed * 5) % 23) as f32 / 22.0).quantized()
}

/// Four frames with the given holes under `root/frames` and `root/masks`.
fn write_clip(root: &Path, holes: &[MaskPlane]) {
    fs::create_dir_all(root.join("frames")).unwrap();
    fs::create_dir_all(root.join("masks")).unwrap();
    let (h, w) = holes[0].dims();
    for (i, hole) in holes.iter().enumerate() {
        save_frame(&root.join(format!("frames/f{i:03}.png")), &frame(i, h, w)).unwrap();
        save_mask(&root.join(format!("masks/f{i:03}.png")), hole).unwrap();
    }
}

fn manifest(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

fn error_json(out: &Output) -> Value {
    let err = String::from_utf8_lossy(&out.stderr);
    let line = err.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("{line:?}: {e}"))
}

#[test]
fn empty_masks_reproduce_frames_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_clip(root, &vec![MaskPlane::empty(20, 24); 4]);
    let out = root.join("out");
    let res = opn(&["complete", "--frames", p(&root.join("frames")), "--masks", p(&root.join("masks")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    for i in 0..4 {
        let name = format!("f{i:03}.png");
        assert_eq!(fs::read(root.join("frames").join(&name)).unwrap(), fs::read(out.join(&name)).unwrap());
    }
    let m = manifest(&out);
    assert_eq!(m["config"]["peel_width"], 8);
    assert_eq!(m["config"]["ref_stride"], 5);
    assert_eq!(m["frames"].as_array().unwrap().len(), 4);
    assert!(m["error"].is_null());
}

#[test]
fn video_completion_only_writes_hole_pixels() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let holes: Vec<MaskPlane> = (0..4).map(|i| MaskPlane::from_fn(24, 28, |y, x| (6..14).contains(&y) && (4 + i..16 + i).contains(&x))).collect();
    write_clip(root, &holes);
    let out = root.join("out");
    let res = opn(&[
        "complete", "--frames", p(&root.join("frames")), "--masks", p(&root.join("masks")), "--out", p(&out), "--peel-width", "2",
        "--ref-stride", "2",
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&out);
    assert_eq!(m["reference_frames"], serde_json::json!(["f000", "f002"]));
    for (i, hole) in holes.iter().enumerate() {
        let input = load_frame(&root.join(format!("frames/f{i:03}.png"))).unwrap();
        let output = load_frame(&out.join(format!("f{i:03}.png"))).unwrap();
        for y in 0..24 {
            for x in 0..28 {
                if !hole.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(input.get(c, y, x).to_bits(), output.get(c, y, x).to_bits());
                    }
                }
            }
        }
        // Hole half-width 4, p = 2 → 2 recursions.
        assert_eq!(m["frames"][i]["recursions"], 2);
    }
}

#[test]
fn image_mode_with_references() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    fs::create_dir_all(root.join("refs")).unwrap();
    let target = root.join("target.png");
    let mask = root.join("mask.png");
    save_frame(&target, &frame(0, 16, 16)).unwrap();
    save_mask(&mask, &MaskPlane::from_fn(16, 16, |y, x| (4..12).contains(&y) && (5..11).contains(&x))).unwrap();
    for k in 1..=4 {
        save_frame(&root.join(format!("refs/r{k}.png")), &frame(k, 16, 16)).unwrap();
    }
    let out = root.join("out");
    let res = opn(&["complete", "--frames", p(&target), "--masks", p(&mask), "--refs", p(&root.join("refs")), "--out", p(&out), "--one-shot"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let m = manifest(&out);
    assert_eq!(m["reference_frames"].as_array().unwrap().len(), 4);
    assert_eq!(m["frames"][0]["recursions"], 1);
    assert!(out.join("target.png").is_file());
}

#[test]
fn attn_dump_writes_scores() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let holes = vec![MaskPlane::from_fn(16, 16, |y, x| (5..11).contains(&y) && (5..11).contains(&x)); 3];
    write_clip(root, &holes);
    let out = root.join("out");
    let res = opn(&["attn-dump", "--frames", p(&root.join("frames")), "--masks", p(&root.join("masks")), "--out", p(&out), "--ref-stride", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let files: Vec<_> = walk(&out.join("scores"));
    assert!(files.iter().any(|f| f.ends_with(".opnt")), "{files:?}");
    assert!(files.iter().any(|f| f.ends_with(".idx")), "{files:?}");
}

fn walk(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let path = e.unwrap().path();
        if path.is_dir() {
            out.extend(walk(&path));
        } else {
            out.push(path.to_string_lossy().into_owned());
        }
    }
    out
}

#[test]
fn eval_on_identical_directories() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_clip(root, &vec![MaskPlane::empty(16, 20); 3]);
    let out = root.join("eval");
    let res = opn(&["eval", "--pred", p(&root.join("frames")), "--gt", p(&root.join("frames")), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(0));
    let stdout = String::from_utf8_lossy(&res.stdout);
    let mean = stdout.lines().find(|l| l.starts_with("mean")).unwrap();
    assert!(mean.contains("99.00") && mean.contains("1.0000") && mean.contains("n/a"), "{mean}");
    let m = manifest(&out);
    let rows = m["metrics"].as_array().unwrap();
    assert_eq!(rows.len(), 4);
    for r in rows {
        assert_eq!(r["psnr"], 99.0);
        assert!((r["ssim"].as_f64().unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let res = opn(&["gradcheck", "--out", p(dir.path())]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stdout));
    let stdout = String::from_utf8_lossy(&res.stdout);
    assert_eq!(stdout.lines().filter(|l| l.ends_with("pass")).count(), 10, "{stdout}");
    assert_eq!(manifest(dir.path())["gradcheck"].as_array().unwrap().len(), 10);
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let res = opn(&["complete", "--frames", "x", "--unknown-flag"]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_json(&res)["error"], "usage");

    let out = dir.path().join("out");
    let missing = dir.path().join("nope");
    let res = opn(&["complete", "--frames", p(&missing), "--masks", p(&missing), "--out", p(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert_eq!(error_json(&res)["exit_code"], 2);
    // The manifest is still written, with the error recorded.
    let m = manifest(&out);
    assert_eq!(m["error"]["kind"], "io");

    let junk = dir.path().join("junk.png");
    fs::write(&junk, b"not an image").unwrap();
    let res = opn(&["eval", "--pred", p(dir.path()), "--gt", p(dir.path())]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_one_with_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    write_clip(root, &vec![MaskPlane::full(16, 16); 2]);
    let out = root.join("out");
    let res = opn(&["complete", "--frames", p(&root.join("frames")), "--masks", p(&root.join("masks")), "--out", p(&out), "--strict", "--ref-stride", "1"]);
    assert_eq!(res.status.code(), Some(1));
    let e = error_json(&res);
    assert_eq!(e["error"], "degenerate_mask");
    assert_eq!(manifest(&out)["error"]["kind"], "degenerate_mask");
}

#[test]
fn synth_and_train_write_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples");
    let res = opn(&["synth", "--out", p(&samples), "--count", "2", "--seed", "3"]);
    assert_eq!(res.status.code(), Some(0));
    for k in 0..2 {
        for v in 0..5 {
            let view = load_frame(&samples.join(format!("sample_{k:05}/view_{v}.png"))).unwrap();
            assert_eq!(view.dims(), (64, 64));
            assert!(load_mask(&samples.join(format!("sample_{k:05}/hole_{v}.png"))).unwrap().area() > 0);
        }
    }

    let run = dir.path().join("run");
    let res = opn(&["train", "--out", p(&run), "--preset", "overfit", "--steps", "2", "--seed", "1"]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    let log = fs::read_to_string(run.join("loss_log.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    assert!(run.join("checkpoint/manifest.txt").is_file());
    assert_eq!(manifest(&run)["training"]["steps_run"], 2);

    // Resuming from that checkpoint works, and the result completes frames.
    let res = opn(&["train", "--out", p(&run), "--preset", "overfit", "--steps", "1", "--checkpoint", p(&run.join("checkpoint"))]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
    assert_eq!(fs::read_to_string(run.join("loss_log.csv")).unwrap().lines().count(), 4);

    let clip = dir.path().join("clip");
    write_clip(&clip, &vec![MaskPlane::from_fn(16, 16, |y, x| (4..9).contains(&y) && (6..12).contains(&x)); 3]);
    let res = opn(&[
        "complete", "--frames", p(&clip.join("frames")), "--masks", p(&clip.join("masks")), "--out", p(&clip.join("out")), "--checkpoint",
        p(&run.join("checkpoint")), "--strict", "--ref-stride", "1",
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", String::from_utf8_lossy(&res.stderr));
}

#[test]
fn png_roundtrip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let f = RgbFrame::from_fn(9, 13, |c, y, x| ((c * 97 + y * 31 + x * 7) % 256) as f32 / 255.0);
    let path = dir.path().join("f.png");
    save_frame(&path, &f).unwrap();
    let back = load_frame(&path).unwrap();
    assert_eq!(back, f);
    // Quantisation happens once: saving again gives identical bytes.
    let bytes = fs::read(&path).unwrap();
    save_frame(&path, &back).unwrap();
    assert_eq!(fs::read(&path).unwrap(), bytes);

    let unq = RgbFrame::from_fn(4, 4, |c, y, x| (c + y + x) as f32 * 0.0123);
    save_frame(&path, &unq).unwrap();
    assert_eq!(load_frame(&path).unwrap(), unq.quantized());

    let m = MaskPlane::from_fn(7, 5, |y, x| (y * x) % 3 == 1);
    let mp = dir.path().join("m.png");
    save_mask(&mp, &m).unwrap();
    assert_eq!(load_mask(&mp).unwrap(), m);
}
