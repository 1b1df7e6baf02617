use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pgrefine::geodata::synth::{random_city, CityConfig};
use pgrefine::geodata::write_elevation;
use pgrefine::sounder::{
    read_trace, synthesize_capture, write_capture, write_gps, CalibrationParams, CaptureMeta,
    GpsFix, SounderConfig, SyntheticChannel,
};

fn pgrefine(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pgrefine"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = pgrefine(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if p.is_dir() {
            for (sub, bytes) in tree(&p) {
                out.push((format!("{name}/{sub}"), bytes));
            }
        } else {
            out.push((name, fs::read(&p).unwrap()));
        }
    }
    out.sort();
    out
}

fn gen_small(dir: &Path, name: &str, seed: &str) -> std::path::PathBuf {
    let out = dir.join(name);
    ok(&[
        "gen", "--random-scenarios", "3", "--augment", "2", "--tile-px", "24", "--seed", seed, "--out", s(&out),
    ]);
    out
}

#[test]
fn gen_is_deterministic_and_writes_a_manifest() {
    let t = tempfile::tempdir().unwrap();
    let a = gen_small(t.path(), "a", "5");
    let b = gen_small(t.path(), "b", "5");
    let c = gen_small(t.path(), "c", "6");
    assert_eq!(tree(&a), tree(&b));
    assert_ne!(tree(&a), tree(&c));
    // Six samples plus the dataset manifest.
    assert_eq!(fs::read_dir(&a).unwrap().count(), 7);

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("a.run.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "gen");
    assert_eq!(manifest["seed"], 5);
}

#[test]
fn missing_map_exits_with_usage_code() {
    let t = tempfile::tempdir().unwrap();
    let tx = t.path().join("tx.csv");
    fs::write(&tx, "x_m,y_m\n10,10\n").unwrap();
    let out = pgrefine(&["gen", "--map", "/nonexistent/map.asc", "--tx-file", s(&tx), "--out", s(&t.path().join("o"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/map.asc"));
}

#[test]
fn zero_threads_is_rejected() {
    let out = pgrefine(&["--threads", "0", "gen", "--random-scenarios", "1", "--out", "/tmp/unused"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn zero_epoch_training_writes_the_initial_model() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_small(t.path(), "d", "1");
    let model = t.path().join("m.unet");
    ok(&[
        "train", "--samples", s(&data), "--epochs", "0", "--width-divisor", "8", "--out", s(&model),
    ]);
    assert!(model.exists());
    let history = fs::read_to_string(t.path().join("m.unet.history.csv")).unwrap();
    assert_eq!(history.trim(), "epoch,train_loss,val_loss");
    assert!(t.path().join("m.unet.run.json").exists());

    // The saved model drives eval and predict.
    let rep = t.path().join("rep");
    ok(&["eval", "--samples", s(&data), "--model", s(&model), "--out", s(&rep)]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(rep.join("report.json")).unwrap()).unwrap();
    assert!(report["baseline"]["nrmse"].as_f64().unwrap() > 0.0);
    assert!(rep.join("ecdf_model.csv").exists());

    let pred = t.path().join("pred");
    ok(&["predict", "--model", s(&model), "--samples", s(&data), "--out", s(&pred)]);
    assert!(pred.join("s000000_a0000_pred.png").exists());
    assert!(pred.join("s000000_a0000_target.png").exists());
    assert!(pred.join("s000000_a0000_diff.png").exists());
}

#[test]
fn eval_of_identical_directories_is_exact() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_small(t.path(), "d", "2");
    let rep = t.path().join("rep");
    ok(&["eval", "--samples", s(&data), "--pred", s(&data), "--out", s(&rep)]);
    let report: serde_json::Value =
        serde_json::from_slice(&fs::read(rep.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["nrmse"].as_f64(), Some(0.0));
    assert_eq!(report["median_abs_error_db"].as_f64(), Some(0.0));
    let ecdf = fs::read_to_string(rep.join("ecdf.csv")).unwrap();
    assert!(ecdf.starts_with("normalized_abs_error,cumulative_fraction\n"));
}

#[test]
fn predict_on_a_map_reports_latency() {
    let t = tempfile::tempdir().unwrap();
    let city = random_city(&CityConfig { size_px: 80, buildings: 10, ..CityConfig::default() }, 4);
    let map = t.path().join("city.asc");
    write_elevation(&city.map, &map).unwrap();
    let data = gen_small(t.path(), "d", "3");
    let model = t.path().join("m.unet");
    ok(&["train", "--samples", s(&data), "--epochs", "0", "--width-divisor", "8", "--out", s(&model)]);
    let tx = city.rooftop_sites[0];
    let out = t.path().join("p");
    let stdout = ok(&[
        "predict", "--model", s(&model), "--map", s(&map), "--tx", &format!("{},{}", tx.x, tx.y),
        "--tile-px", "24", "--time", "--out", s(&out),
    ]);
    assert!(stdout.contains("rough_estimate:") && stdout.contains("predict:"), "{stdout}");
    assert!(out.join("pred.png").exists() && out.join("rough.png").exists());
}

#[test]
fn sound_recovers_an_injected_path_gain() {
    let t = tempfile::tempdir().unwrap();
    let cal = CalibrationParams {
        p_tx_dbm: 0.0,
        g_amp_db: 38.0,
        g_ant_db: 16.0,
        l_cable_db: 2.0,
        l_att_db: 60.0,
        p_rx_otc_dbm: 0.0,
    }
    .with_nominal_reference();
    let meta = CaptureMeta { sample_rate_hz: 2.0 * 16_383.0, center_freq_hz: 910e6, start_unix_s: 1000.0 };
    let cfg = SounderConfig::new(16_383.0, cal);
    let channel = SyntheticChannel { taps: vec![(3, 1.0, 0.0), (40, 0.3, 0.2)], path_gain_db: -97.0, snr_db: Some(20.0) };
    let iq = synthesize_capture(&meta, &cfg, &channel, 3, 9).unwrap();
    let iq32: Vec<_> = iq.iter().map(|c| num_complex::Complex32::new(c.re as f32, c.im as f32)).collect();
    let iq_path = t.path().join("cap.iq");
    write_capture(&iq_path, &meta, &iq32).unwrap();
    let gps: Vec<GpsFix> = (0..3)
        .map(|k| GpsFix { t_unix_s: 1000.0 + k as f64, lat_deg: 40.0 + k as f64 * 1e-4, lon_deg: -74.0 })
        .collect();
    let gps_path = t.path().join("gps.csv");
    write_gps(&gps_path, &gps).unwrap();
    let cal_path = t.path().join("cal.json");
    fs::write(&cal_path, serde_json::to_vec(&cal).unwrap()).unwrap();

    let out = t.path().join("trace.csv");
    ok(&["sound", "--iq", s(&iq_path), "--gps", s(&gps_path), "--cal", s(&cal_path), "--out", s(&out)]);
    let trace = read_trace(&out).unwrap();
    assert_eq!(trace.points.len(), 3);
    for p in &trace.points {
        assert!((p.pg_db + 97.0).abs() < 0.5, "{}", p.pg_db);
    }
}

#[test]
fn map_mode_gen_writes_augment_samples_per_transmitter() {
    let t = tempfile::tempdir().unwrap();
    let city = random_city(&CityConfig { size_px: 80, buildings: 10, ..CityConfig::default() }, 2);
    let map = t.path().join("city.asc");
    write_elevation(&city.map, &map).unwrap();
    let tx = t.path().join("tx.csv");
    let rows: Vec<String> = city.rooftop_sites[..2].iter().map(|p| format!("{},{}", p.x, p.y)).collect();
    fs::write(&tx, format!("x_m,y_m\n{}\n", rows.join("\n"))).unwrap();
    let out = t.path().join("d");
    ok(&[
        "gen", "--map", s(&map), "--tx-file", s(&tx), "--augment", "3", "--tile-px", "24", "--out", s(&out),
    ]);
    let samples = pgrefine::dataset::read_samples(&out).unwrap();
    assert_eq!(samples.len(), 6);
    assert_eq!(pgrefine::dataset::scenario_ids(&samples), vec![0, 1]);
}

#[test]
fn training_reruns_give_identical_model_bytes() {
    let t = tempfile::tempdir().unwrap();
    let data = gen_small(t.path(), "d", "4");
    let run = |name: &str| {
        let model = t.path().join(name);
        ok(&[
            "train", "--samples", s(&data), "--ratio", "0.6", "--seed", "1", "--epochs", "2", "--batch-size", "2",
            "--width-divisor", "8", "--out", s(&model),
        ]);
        fs::read(model).unwrap()
    };
    assert_eq!(run("a.unet"), run("b.unet"));
}
