use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use disco::formats::{load_instances, read_kp3, save_keypoints};
use disco::frameio::save_frame;
use disco::ply::{instance_color, LANDMARK_COLOR, UNASSIGNED_COLOR};
use disco_core::frame::{CameraIntrinsics, Keypoint3D, RgbdFrame};
use disco_core::Vec3;
use ply_rs::parser::Parser;
use ply_rs::ply::{DefaultElement, Property};
use tempfile::TempDir;

fn disco(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_disco"))
        .args(args)
        .output()
        .expect("run disco")
}

fn ok(args: &[&str]) -> String {
    let out = disco(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Synthetic scene directory written by `disco synth`.
fn synth(dir: &Path, seed: u64, extra: &[&str]) -> PathBuf {
    let out = dir.join(format!("synth{seed}"));
    let seed = seed.to_string();
    let mut args = vec!["--seed", &seed, "synth", "-o", s(&out)];
    args.extend_from_slice(extra);
    ok(&args);
    out
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_is_byte_identical_for_one_seed() {
    let tmp = TempDir::new().unwrap();
    let a = synth(&tmp.path().join("a"), 7, &[]);
    let b = synth(&tmp.path().join("b"), 7, &[]);
    assert_eq!(files(&a), files(&b));
    let c = synth(&tmp.path().join("c"), 8, &[]);
    assert_ne!(files(&a), files(&c));
}

#[test]
fn thread_count_never_changes_outputs() {
    let tmp = TempDir::new().unwrap();
    let scene = synth(tmp.path(), 4, &[]).join("scene.kp3");
    let mut outs = Vec::new();
    for threads in ["1", "4"] {
        let out = tmp.path().join(format!("t{threads}"));
        ok(&[
            "--seed",
            "4",
            "--threads",
            threads,
            "discover",
            s(&scene),
            "-o",
            s(&out),
        ]);
        let mut f = files(&out);
        f.retain(|(name, _)| name != "timings.txt");
        outs.push(f);
    }
    assert!(outs[0].iter().any(|(n, _)| n == "model_0.objm"));
    assert_eq!(outs[0], outs[1]);
}

#[test]
fn two_instance_scene_gives_one_model_and_two_rows() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), 11, &["--instances", "2"]);
    let out = tmp.path().join("found");
    ok(&["--seed", "11", "discover", s(&dir.join("scene.kp3")), "-o", s(&out)]);
    assert!(out.join("model_0.objm").exists());
    assert!(!out.join("model_1.objm").exists());
    let rows = load_instances(&out.join("instances.txt")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.model == 0));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(
        report.contains("models=1\n") && report.contains("ppf_angle_tol=35\n"),
        "{report}"
    );
    let timings = std::fs::read_to_string(out.join("timings.txt")).unwrap();
    assert!(timings.lines().any(|l| l.starts_with("total=")));

    let pr = ok(&[
        "eval",
        s(&out.join("instances.txt")),
        s(&dir.join("annotations.txt")),
        "--models",
        s(&out),
        "--scene",
        s(&dir.join("scene.kp3")),
    ]);
    assert_eq!(pr, "P=1.000 R=1.000 F1=1.000\n");
}

#[test]
fn clutter_only_scene_reports_no_pattern() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), 2, &["--instances", "0", "--clutter", "200"]);
    let out = tmp.path().join("found");
    let stdout = ok(&["discover", s(&dir.join("scene.kp3")), "-o", s(&out)]);
    assert!(stdout.contains("no recurrent pattern"));
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(report.contains("models=0\n") && report.contains("no recurrent pattern"));
    assert!(load_instances(&out.join("instances.txt")).unwrap().is_empty());
}

#[test]
fn malformed_inputs_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("missing.kp3");
    let out = disco(&["discover", s(&missing), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.kp3"));

    let bad = tmp.path().join("bad.kp3");
    std::fs::write(
        &bad,
        "KP3 1 2 3\n1 2 0 0 900 0 0 -1 0.1 0.2 0.3\n1 2 0 0 900 0 0 -1 0.1 0.2\n",
    )
    .unwrap();
    let out = disco(&["discover", s(&bad), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.kp3:3:"));

    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "cluster_eps=abc\n").unwrap();
    let out = disco(&["--config", s(&cfg), "discover", s(&bad), "-o", s(&tmp.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cfg.txt:1:"));
}

#[test]
fn config_file_and_flags_are_echoed() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), 5, &["--instances", "2"]);
    let cfg = tmp.path().join("cfg.txt");
    std::fs::write(&cfg, "# overrides\nmin_cluster_size=12\nppf_angle_tol=30\n").unwrap();
    let out = tmp.path().join("found");
    ok(&[
        "--config",
        s(&cfg),
        "--ppf-angle-tol",
        "33",
        "--seed",
        "9",
        "discover",
        s(&dir.join("scene.kp3")),
        "-o",
        s(&out),
    ]);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    for line in ["min_cluster_size=12", "ppf_angle_tol=33", "seed=9", "cluster_eps=35"] {
        assert!(report.lines().any(|l| l == line), "{line} missing from\n{report}");
    }
}

#[test]
fn detect_finds_a_planted_model_and_checks_dimensions() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), 6, &["--instances", "2"]);
    let found = tmp.path().join("found");
    ok(&["--seed", "6", "discover", s(&dir.join("scene.kp3")), "-o", s(&found)]);
    let model = found.join("model_0.objm");

    let single = synth(tmp.path(), 21, &["--instances", "1"]);
    let rows_path = tmp.path().join("rows.txt");
    let stdout = ok(&["detect", s(&model), s(&single.join("scene.kp3")), "-o", s(&rows_path)]);
    assert_eq!(
        stdout, "0 instances\n",
        "descriptors of an unrelated object must not match"
    );

    let scene = read_kp3(&dir.join("scene.kp3")).unwrap();
    let ann = disco::formats::load_annotations(&dir.join("annotations.txt")).unwrap();
    let planted: Vec<Keypoint3D> = scene
        .keypoints
        .into_iter()
        .filter(|k| !ann[1].bbox.contains(&k.position))
        .collect();
    let planted_path = tmp.path().join("planted.kp3");
    save_keypoints(&planted_path, &planted).unwrap();
    ok(&["detect", s(&model), s(&planted_path), "-o", s(&rows_path)]);
    let rows = load_instances(&rows_path).unwrap();
    assert_eq!(rows.len(), 1);
    let placed = disco::formats::read_objm(&model).unwrap().model;
    let inside = placed
        .landmarks
        .iter()
        .filter(|l| ann[0].bbox.contains(&rows[0].pose.apply(&l.position)))
        .count();
    assert!(
        inside as f64 >= 0.9 * placed.landmarks.len() as f64,
        "{inside}/{}",
        placed.landmarks.len()
    );

    let empty = tmp.path().join("empty.kp3");
    std::fs::write(&empty, "KP3 1 0 32\n").unwrap();
    assert_eq!(
        ok(&["detect", s(&model), s(&empty), "-o", s(&rows_path)]),
        "0 instances\n"
    );

    let wide = synth(tmp.path(), 3, &["--dim", "16"]);
    let out = disco(&[
        "detect",
        s(&found.join("model_0.objm")),
        s(&wide.join("scene.kp3")),
        "-o",
        s(&rows_path),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn exported_ply_reparses_with_instance_and_landmark_colors() {
    let tmp = TempDir::new().unwrap();
    let dir = synth(tmp.path(), 11, &["--instances", "2"]);
    let found = tmp.path().join("found");
    ok(&["--seed", "11", "discover", s(&dir.join("scene.kp3")), "-o", s(&found)]);
    let ply = tmp.path().join("out.ply");
    ok(&[
        "export-ply",
        "--scene",
        s(&dir.join("scene.kp3")),
        "--models",
        s(&found),
        "-o",
        s(&ply),
    ]);

    let mut f = std::fs::File::open(&ply).unwrap();
    let parsed = Parser::<DefaultElement>::new().read_ply(&mut f).unwrap();
    let vertices = &parsed.payload["vertex"];
    let byte = |v: &DefaultElement, key: &str| match v[key] {
        Property::UChar(c) => c,
        ref other => panic!("{key}: {other:?}"),
    };
    let colors: Vec<[u8; 3]> = vertices
        .iter()
        .map(|v| [byte(v, "red"), byte(v, "green"), byte(v, "blue")])
        .collect();
    let scene_n = read_kp3(&dir.join("scene.kp3")).unwrap().keypoints.len();
    let model = disco::formats::read_objm(&found.join("model_0.objm")).unwrap().model;
    assert_eq!(colors.len(), scene_n + 2 * model.landmarks.len());
    assert!(colors[scene_n..].iter().all(|&c| c == LANDMARK_COLOR));
    for k in 0..2 {
        assert!(colors[..scene_n].contains(&instance_color(k)));
    }
    assert!(!colors[..scene_n].contains(&instance_color(2)));
    assert!(colors[..scene_n].contains(&UNASSIGNED_COLOR));
}

#[test]
fn frame_input_relifts_keypoints() {
    let tmp = TempDir::new().unwrap();
    let intr = CameraIntrinsics::vga();
    let frame = RgbdFrame::new(vec![[90; 3]; 640 * 480], vec![800.0; 640 * 480], intr).unwrap();
    let fdir = tmp.path().join("frame");
    save_frame(&fdir, &frame).unwrap();
    let kps: Vec<Keypoint3D> = (0..12)
        .map(|i| {
            let (u, v) = (50.0 + 40.0 * i as f64, 100.0 + 20.0 * i as f64);
            Keypoint3D {
                pixel: [u, v],
                position: Vec3::new(0.0, 0.0, 1.0),
                normal: Vec3::z(),
                descriptor: vec![i as f64; 4],
            }
        })
        .collect();
    let path = tmp.path().join("k.kp3");
    save_keypoints(&path, &kps).unwrap();
    let out = tmp.path().join("found");
    ok(&["discover", s(&path), "--frame", s(&fdir), "-o", s(&out)]);
    let report = std::fs::read_to_string(out.join("report.txt")).unwrap();
    assert!(
        report.contains("keypoints=12\n") && report.contains("dropped_keypoints=0\n"),
        "{report}"
    );
}
