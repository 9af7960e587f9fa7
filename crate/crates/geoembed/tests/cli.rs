//! End-to-end checks of the installed binary: exit codes, fixture round
//! trips, config merging, and output layout.

use std::path::Path;
use std::process::{Command, Output};

fn geoembed() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_geoembed"));
    cmd.env_remove("RS_EMBED_OUT");
    cmd
}

fn run(args: &[&str]) -> Output {
    geoembed().args(args).output().expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn assert_code(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        stdout(out),
        stderr(out)
    );
}

fn read_f32s(path: &Path) -> Vec<f32> {
    std::fs::read(path)
        .unwrap()
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect()
}

const WINDOW: [&str; 4] = ["--start", "2022-06-01", "--end", "2022-09-01"];

#[test]
fn describe_lists_models_and_rejects_unknown() {
    let out = run(&["describe", "--all"]);
    assert_code(&out, 0);
    let text = stdout(&out);
    for id in ["ref-d64", "ref-d32", "ref-d16-alt", "ref-pooled-only", "ref-annual-d8"] {
        assert!(text.contains(id), "describe --all missing {id}");
    }

    let out = run(&["describe", "ref-d32", "--json"]);
    assert_code(&out, 0);
    let v: serde_json::Value = serde_json::from_str(&stdout(&out)).unwrap();
    assert_eq!(v["model_id"], "ref-d32");
    assert_eq!(v["backend"], "on_the_fly");
    assert_eq!(v["embed_dim"], 32);

    assert_code(&run(&["describe", "no-such-model"]), 2);
    assert_code(&run(&["describe"]), 2);
    // Unknown flags are usage errors too.
    assert_code(&run(&["describe", "--all", "--bogus"]), 2);
}

#[test]
fn local_fixture_backend_matches_mock() {
    let tmp = tempfile::tempdir().unwrap();
    let rasters = tmp.path().join("rasters");
    let out = run(&[
        "make-fixtures", "--kind", "raster_store",
        "--out", rasters.to_str().unwrap(),
        "--collection", "mock-a",
        "--lon", "121.5", "--lat", "31.2", "--buffer-m", "300",
        "--start", "2022-06-01", "--end", "2022-09-01",
        "--margin-px", "4",
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("19 scenes"));

    let embed = |dir: &Path, backend_args: &[&str]| {
        let mut args = vec![
            "embed", "--model", "ref-d32",
            "--lon", "121.5", "--lat", "31.2", "--buffer-m", "250",
            "--mode", "grid",
            "--out", dir.to_str().unwrap(),
        ];
        args.extend_from_slice(&WINDOW);
        args.extend_from_slice(backend_args);
        let out = run(&args);
        assert_code(&out, 0);
        assert!(stdout(&out).contains("shape [32, 8, 8]"));
    };
    let mock_dir = tmp.path().join("mock");
    let local_dir = tmp.path().join("local");
    embed(&mock_dir, &[]);
    embed(&local_dir, &["--backend", "local", "--raster-root", rasters.to_str().unwrap()]);

    let a = read_f32s(&mock_dir.join("00000/ref-d32/data.f32"));
    let b = read_f32s(&local_dir.join("00000/ref-d32/data.f32"));
    assert_eq!(a.len(), b.len());
    let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0.0f32, f32::max);
    assert!(max_diff <= 1e-5, "backends disagree by {max_diff}");

    // local backend without a root is a usage error.
    let out = run(&["embed", "--model", "ref-d32", "--lon", "0", "--lat", "0",
        "--buffer-m", "100", "--year", "2022", "--backend", "local"]);
    assert_code(&out, 2);
}

#[test]
fn export_batch_exit_codes_follow_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let store = tmp.path().join("store");
    let out = run(&[
        "make-fixtures", "--kind", "precomputed_store",
        "--out", store.to_str().unwrap(),
        "--model-id", "pre-cli-d8", "--embed-dim", "8", "--tile-px", "32",
        "--years", "2022",
        "--lon", "10.0", "--lat", "50.0", "--buffer-m", "2000",
    ]);
    assert_code(&out, 0);

    // One point inside store coverage, one far outside.
    let near_far = tmp.path().join("near_far.csv");
    std::fs::write(&near_far, "lon,lat,buffer_m\n10.0,50.0,200\n-70.6,-33.4,200\n").unwrap();
    let near_only = tmp.path().join("near.csv");
    std::fs::write(&near_only, "lon,lat,buffer_m\n10.0,50.0,200\n10.002,50.001,200\n").unwrap();

    let base = |points: &Path, dir: &str| -> Vec<String> {
        [
            "export-batch",
            "--points-file", points.to_str().unwrap(),
            "--models", "ref-d32,pre-cli-d8",
            "--store-root", store.to_str().unwrap(),
            "--year", "2022",
            "--out",
        ]
        .iter()
        .map(|s| s.to_string())
        .chain([tmp.path().join(dir).to_str().unwrap().to_string()])
        .collect()
    };

    // All models succeed on covered points: exit 0.
    let args = base(&near_only, "all-ok");
    let out = geoembed().args(&args).output().unwrap();
    assert_code(&out, 0);
    assert!(stdout(&out).contains("ok=2 partial=0 failed=0"));

    // Store miss on the far point degrades that item: exit 3.
    let mut args = base(&near_far, "partial");
    args.push("--continue-on-error".into());
    let out = geoembed().args(&args).output().unwrap();
    assert_code(&out, 3);
    assert!(stdout(&out).contains("partial=1"));
    let manifest: serde_json::Value = serde_json::from_str(
        &std::fs::read_to_string(tmp.path().join("partial/manifest.json")).unwrap(),
    )
    .unwrap();
    assert_eq!(manifest["summary"]["ok"], 1);
    assert_eq!(manifest["summary"]["partial"], 1);

    // Same failure without continue-on-error aborts the run: exit 1.
    let out = geoembed().args(base(&near_far, "abort")).output().unwrap();
    assert_code(&out, 1);
    assert!(stderr(&out).contains("aborted"));

    // A fully-failing model marks items failed: exit 1 beats partial.
    let far_only = tmp.path().join("far.csv");
    std::fs::write(&far_only, "lon,lat,buffer_m\n-70.6,-33.4,200\n").unwrap();
    let mut args = base(&far_only, "failed");
    args[4] = "pre-cli-d8".into(); // only the store model; every item fails
    args.push("--continue-on-error".into());
    let out = geoembed().args(&args).output().unwrap();
    assert_code(&out, 1);
    assert!(stdout(&out).contains("failed=1"));
}

#[test]
fn malformed_inputs_are_usage_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let bad = tmp.path().join("bad.csv");
    std::fs::write(&bad, "lon,lat,buffer_m\n1,2,300\nnot-a-row\n4,5\n6,7,xyz\n").unwrap();
    let out = run(&[
        "export-batch", "--points-file", bad.to_str().unwrap(),
        "--models", "ref-d32", "--year", "2022",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    let err = stderr(&out);
    assert!(err.contains("lines [3, 4, 5]"), "stderr must list bad lines: {err}");

    let wrong_header = tmp.path().join("hdr.csv");
    std::fs::write(&wrong_header, "x,y,r\n1,2,300\n").unwrap();
    let out = run(&[
        "export-batch", "--points-file", wrong_header.to_str().unwrap(),
        "--models", "ref-d32", "--year", "2022",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("lon,lat,buffer_m"));

    // Reversed temporal range.
    let out = run(&[
        "embed", "--model", "ref-d32", "--lon", "0", "--lat", "0", "--buffer-m", "100",
        "--start", "2022-09-01", "--end", "2022-06-01",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("reversed range"));

    // Bad sensor JSON.
    let out = run(&[
        "embed", "--model", "ref-d32", "--lon", "0", "--lat", "0", "--buffer-m", "100",
        "--year", "2022", "--sensor-json", "{not json",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);

    // Unknown layout.
    let pts = tmp.path().join("p.csv");
    std::fs::write(&pts, "lon,lat,buffer_m\n1,2,300\n").unwrap();
    let out = run(&[
        "export-batch", "--points-file", pts.to_str().unwrap(),
        "--models", "ref-d32", "--year", "2022", "--layout", "flat",
        "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("per_item"));
}

#[test]
fn config_file_merges_under_flags() {
    let tmp = tempfile::tempdir().unwrap();
    let pts = tmp.path().join("pts.csv");
    std::fs::write(&pts, "lon,lat,buffer_m\n8.5,47.4,200\n").unwrap();
    let cfg_out = tmp.path().join("from-config");
    let cfg = tmp.path().join("cfg.json");
    std::fs::write(
        &cfg,
        serde_json::json!({
            "points_file": pts,
            "models": ["ref-d16-alt"],
            "year": 2022,
            "chunk_size": 2,
            "out": cfg_out,
        })
        .to_string(),
    )
    .unwrap();

    // Config alone drives the run.
    let out = run(&["export-batch", "--config", cfg.to_str().unwrap()]);
    assert_code(&out, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(cfg_out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["request"]["models"], serde_json::json!(["ref-d16-alt"]));

    // Explicit flags beat config values.
    let flag_out = tmp.path().join("from-flags");
    let out = run(&[
        "export-batch", "--config", cfg.to_str().unwrap(),
        "--models", "ref-d32",
        "--out", flag_out.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(flag_out.join("manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["request"]["models"], serde_json::json!(["ref-d32"]));

    // Unknown config keys are rejected, not silently ignored.
    let bad_cfg = tmp.path().join("bad.json");
    std::fs::write(&bad_cfg, r#"{"modles": ["ref-d32"]}"#).unwrap();
    let out = run(&["export-batch", "--config", bad_cfg.to_str().unwrap()]);
    assert_code(&out, 2);
}

#[test]
fn out_dir_falls_back_to_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let pts = tmp.path().join("pts.csv");
    std::fs::write(&pts, "lon,lat,buffer_m\n8.5,47.4,200\n").unwrap();
    let env_out = tmp.path().join("env-out");

    let out = geoembed()
        .env("RS_EMBED_OUT", &env_out)
        .args([
            "export-batch", "--points-file", pts.to_str().unwrap(),
            "--models", "ref-d32", "--year", "2022",
        ])
        .output()
        .unwrap();
    assert_code(&out, 0);
    assert!(env_out.join("manifest.json").exists());
    assert!(env_out.join("00000/ref-d32/data.f32").exists());

    // Without the env var and without --out the request is rejected.
    let out = run(&[
        "export-batch", "--points-file", pts.to_str().unwrap(),
        "--models", "ref-d32", "--year", "2022",
    ]);
    assert_code(&out, 2);
}

#[test]
fn visualize_renders_grids_and_rejects_pooled() {
    let tmp = tempfile::tempdir().unwrap();
    let grid_dir = tmp.path().join("grid");
    let out = run(&[
        "embed", "--model", "ref-d32",
        "--lon", "8.5", "--lat", "47.4", "--buffer-m", "320",
        "--year", "2022", "--mode", "grid",
        "--out", grid_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);

    let emb_dir = grid_dir.join("00000/ref-d32");
    let ppm_path = tmp.path().join("view.ppm");
    let out = run(&["visualize", emb_dir.to_str().unwrap(), "--out", ppm_path.to_str().unwrap()]);
    assert_code(&out, 0);
    let ppm = std::fs::read(&ppm_path).unwrap();
    assert!(ppm.starts_with(b"P6\n8 8\n255\n"));
    assert_eq!(ppm.len(), b"P6\n8 8\n255\n".len() + 3 * 64);

    // Default output lands next to the embedding.
    assert_code(&run(&["visualize", emb_dir.to_str().unwrap()]), 0);
    assert!(emb_dir.join("viz.ppm").exists());

    let pooled_dir = tmp.path().join("pooled");
    let out = run(&[
        "embed", "--model", "ref-d32",
        "--lon", "8.5", "--lat", "47.4", "--buffer-m", "320",
        "--year", "2022",
        "--out", pooled_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    let out = run(&["visualize", pooled_dir.join("00000/ref-d32").to_str().unwrap()]);
    assert_code(&out, 2);
    assert!(stderr(&out).contains("grid"));
}

#[test]
fn embed_accepts_bbox_and_json_points() {
    let tmp = tempfile::tempdir().unwrap();
    let out_dir = tmp.path().join("bbox");
    let out = run(&[
        "embed", "--model", "ref-d32",
        "--bbox", "8.50,47.40,8.52,47.41",
        "--year", "2022", "--mode", "grid",
        "--out", out_dir.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(out_dir.join("00000/ref-d32/data.f32").exists());

    // bbox and point flags are mutually exclusive.
    let out = run(&[
        "embed", "--model", "ref-d32",
        "--bbox", "8.50,47.40,8.52,47.41", "--lon", "8.5", "--lat", "47.4", "--buffer-m", "100",
        "--year", "2022", "--out", tmp.path().join("x").to_str().unwrap(),
    ]);
    assert_code(&out, 2);

    // JSON points files carry tagged spatial specs, bboxes included.
    let pts = tmp.path().join("pts.json");
    std::fs::write(
        &pts,
        r#"[
            {"type": "point_buffer", "lon": 8.5, "lat": 47.4, "buffer_m": 200},
            {"type": "bbox", "minlon": 8.50, "minlat": 47.40, "maxlon": 8.52, "maxlat": 47.41}
        ]"#,
    )
    .unwrap();
    let batch_out = tmp.path().join("json-batch");
    let out = run(&[
        "export-batch", "--points-file", pts.to_str().unwrap(),
        "--models", "ref-d32", "--year", "2022",
        "--out", batch_out.to_str().unwrap(),
    ]);
    assert_code(&out, 0);
    assert!(stdout(&out).contains("ok=2"));
}
