use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use vidtta_core::container::{read_pgm, read_tensors};
use vidtta_core::flow::write_flow_file;
use vidtta_core::masking::MaskPlan;
use vidtta_core::models::ParamStore;
use vidtta_core::scene::{generate_scene, SceneSpec};

const SPEC: &str = r#"{"width":64,"height":64,"num_frames":4,"shape_kind":"rectangle","shape_size":[24,24],
"start_position":[4,8],"velocity":[6,2],"background_value":0.1,"foreground_value":0.9}"#;

fn vidtta(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vidtta")).args(args).output().unwrap()
}

fn setup(dir: &Path, config: &str) -> (String, String) {
    fs::write(dir.join("spec.json"), SPEC).unwrap();
    fs::write(dir.join("config.json"), config).unwrap();
    (
        format!("synthetic:{}", dir.join("spec.json").display()),
        dir.join("config.json").display().to_string(),
    )
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn adapt_writes_artifacts_and_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, config) = setup(dir.path(), r#"{"adaptation":{"steps":3,"seed":4,"eval_draws":1}}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&vidtta(&[
            "adapt",
            "--scene",
            &scene,
            "--prompt",
            "a man is surfing",
            "--config",
            &config,
            "--out",
            out.to_str().unwrap(),
        ]));
    }
    let report_a = fs::read(a.join("report.json")).unwrap();
    assert_eq!(report_a, fs::read(b.join("report.json")).unwrap());
    let report: serde_json::Value = serde_json::from_slice(&report_a).unwrap();
    assert_eq!(report["steps"].as_array().unwrap().len(), 3);
    assert!(a.join("timing.json").exists());

    for t in 0..4 {
        let (w, h, plane) = read_pgm(&a.join(format!("masks/frame_{t:04}.pgm"))).unwrap();
        assert_eq!((w, h), (64, 64));
        assert!(plane.iter().all(|&v| v == 0.0 || v == 1.0));
    }
    let before = read_tensors(&a.join("latents/before.bin")).unwrap();
    let names: Vec<&str> = before.iter().map(|t| t.name.as_str()).collect();
    assert_eq!(names, ["latent", "masked", "reconstruction", "noise_prediction"]);
    assert_eq!(before[0].shape, vec![4, 1, 8, 8]);
    assert!(a.join("latents/after.bin").exists());

    let base = ParamStore::from_named_tensors(&read_tensors(&a.join("checkpoints/base.bin")).unwrap());
    let adapted = ParamStore::from_named_tensors(&read_tensors(&a.join("checkpoints/adapted.bin")).unwrap());
    assert!(base.same_topology(&adapted));
    assert_ne!(base, adapted);
}

#[test]
fn masks_match_first_adaptation_step() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, config) = setup(dir.path(), r#"{"adaptation":{"steps":1,"seed":9,"eval_draws":1}}"#);
    let adapt_out = dir.path().join("adapt");
    let masks_out = dir.path().join("masks");
    ok(&vidtta(&[
        "adapt", "--scene", &scene, "--prompt", "a dog", "--config", &config, "--out",
        adapt_out.to_str().unwrap(),
    ]));
    ok(&vidtta(&["masks", "--scene", &scene, "--config", &config, "--out", masks_out.to_str().unwrap()]));
    let history: Vec<Vec<MaskPlan>> =
        serde_json::from_str(&fs::read_to_string(adapt_out.join("masks/plans.json")).unwrap()).unwrap();
    let direct: Vec<MaskPlan> =
        serde_json::from_str(&fs::read_to_string(masks_out.join("plans.json")).unwrap()).unwrap();
    assert_eq!(history[0], direct);
}

#[test]
fn exported_scene_with_file_plugins_gives_same_masks() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("spec.json"), SPEC).unwrap();
    let scene_dir = d.join("scene");
    ok(&vidtta(&[
        "export-scene",
        "--spec",
        d.join("spec.json").to_str().unwrap(),
        "--out",
        scene_dir.to_str().unwrap(),
    ]));

    // flows and boxes supplied as files
    let scene = generate_scene(&serde_json::from_str::<SceneSpec>(SPEC).unwrap()).unwrap();
    let flo_dir = d.join("flo");
    fs::create_dir_all(&flo_dir).unwrap();
    for (t, f) in scene.flows.iter().enumerate() {
        write_flow_file(f, &flo_dir.join(format!("flow_{t:04}.flo"))).unwrap();
    }
    vidtta_core::flow::write_box_stream(&scene.boxes, &d.join("boxes.jsonl")).unwrap();
    fs::write(
        d.join("files.json"),
        r#"{"detector":"box_stream","box_stream":"boxes.jsonl","flow_estimator":"flo_dir","flo_dir":"flo"}"#,
    )
    .unwrap();

    let manifest = scene_dir.join("manifest.json");
    let (m1, m2) = (d.join("m1"), d.join("m2"));
    ok(&vidtta(&["masks", "--scene", manifest.to_str().unwrap(), "--out", m1.to_str().unwrap()]));
    ok(&vidtta(&[
        "masks",
        "--scene",
        manifest.to_str().unwrap(),
        "--config",
        d.join("files.json").to_str().unwrap(),
        "--out",
        m2.to_str().unwrap(),
    ]));
    assert_eq!(
        fs::read(m1.join("plans.json")).unwrap(),
        fs::read(m2.join("plans.json")).unwrap()
    );
}

#[test]
fn selfcheck_passes() {
    let out = vidtta(&["selfcheck"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.lines().count() >= 5);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
}

#[test]
fn invalid_inputs_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let (scene, config) = setup(dir.path(), r#"{"adaptation":{"steps":0}}"#);
    let out_dir = dir.path().join("o");
    let out = vidtta(&[
        "adapt", "--scene", &scene, "--prompt", "a man", "--config", &config, "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("steps"));

    fs::write(dir.path().join("config.json"), r#"{"adaptation":{"steps":1}}"#).unwrap();
    let out = vidtta(&[
        "adapt", "--scene", &scene, "--prompt", "   ", "--config", &config, "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(!out.status.success());

    fs::write(dir.path().join("config.json"), r#"{"detector":"nope"}"#).unwrap();
    let out = vidtta(&["masks", "--scene", &scene, "--config", &config, "--out", out_dir.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nope"));
}
