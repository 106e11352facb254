use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn eitlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_eitlab"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn files(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = match fs::read_dir(dir) {
        Ok(entries) => entries
            .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
            .collect(),
        Err(_) => Vec::new(),
    };
    names.sort();
    names
}

fn manifest(dir: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(dir.join("manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(eitlab(&["--help"]).status.code(), Some(0));
    assert_eq!(eitlab(&["--version"]).status.code(), Some(0));
}

#[test]
fn unknown_flag_is_rejected_by_name() {
    let o = eitlab(&["coil", "--turns-per-cm", "3"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--turns-per-cm"));
}

#[test]
fn missing_config_leaves_no_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let o = eitlab(&[
        "lineshape",
        "--config",
        tmp.path().join("absent.json").to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("absent.json"));
    assert!(files(&out).is_empty());
}

#[test]
fn unknown_config_key_is_named() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config: serde_json::Value =
        serde_json::from_str(&eitlab::physics::Preset::Ne5Torr.config().to_json()).unwrap();
    config["beam"]["wasit_radius_cm"] = 0.04.into();
    let path = tmp.path().join("c.json");
    fs::write(&path, config.to_string()).unwrap();
    let out = tmp.path().join("out");
    let o = eitlab(&["lineshape", "--config", path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("wasit_radius_cm"), "{}", stderr(&o));
    assert!(files(&out).is_empty());
}

#[test]
fn out_of_range_config_names_field() {
    let tmp = tempfile::tempdir().unwrap();
    let mut config = eitlab::physics::Preset::Ne5Torr.config();
    config.beam.waist_radius_cm = -0.04;
    let path = tmp.path().join("c.json");
    fs::write(&path, config.to_json()).unwrap();
    let o = eitlab(&["lineshape", "--config", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("waist"), "{}", stderr(&o));
}

#[test]
fn bad_grid_and_gradients_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = eitlab(&["lineshape", "--grid", "5,1,10", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = eitlab(&["mc-spectrum", "--gradients", "1,x", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(files(&out).is_empty());
}

#[test]
fn non_converged_fit_exits_three_without_outputs() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("flat.csv");
    let mut text = String::from("delta_hz,transmission\n");
    for i in 0..40 {
        text.push_str(&format!("{},0.5\n", -2000 + 100 * i));
    }
    fs::write(&input, text).unwrap();
    let out = tmp.path().join("o");
    let o = eitlab(&[
        "fit",
        "--input",
        input.to_str().unwrap(),
        "--model",
        "lorentzian",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(files(&out).is_empty());
}

#[test]
fn csv_carries_header_then_manifest_hash() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = eitlab(&["lineshape", "--model", "lorentzian", "--grid", "-1000,1000,11", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(files(&out), ["lineshape.csv", "lineshape.json", "manifest.json"]);
    let m = manifest(&out);
    let csv = fs::read_to_string(out.join("lineshape.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("delta_hz,transmission"));
    assert_eq!(
        lines.next().map(str::to_owned),
        Some(format!("# manifest-sha256: {}", m["sha256"].as_str().unwrap()))
    );
    assert_eq!(lines.count(), 11);
    assert_eq!(m["subcommand"], "lineshape");
    assert_eq!(m["outputs"], serde_json::json!(["lineshape.csv", "lineshape.json"]));
    let spectrum = eitlab::io::read_spectrum_csv(&out.join("lineshape.csv")).unwrap();
    assert_eq!(spectrum.len(), 11);
}

#[test]
fn fit_round_trips_a_lineshape() {
    let tmp = tempfile::tempdir().unwrap();
    let shape = tmp.path().join("shape");
    let o = eitlab(&["lineshape", "--model", "ty", "--out", shape.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let out = tmp.path().join("fit");
    let input = shape.join("lineshape.csv");
    let o = eitlab(&["fit", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("fit_results.json")).unwrap()).unwrap();
    let results = doc["result"].as_array().unwrap();
    assert_eq!(results.len(), 3);
    let ty = results.iter().find(|r| r["model"] == "ty").unwrap();
    assert!(ty["rms"].as_f64().unwrap() < 1e-9);
}

#[test]
fn manifest_replay_is_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let first = tmp.path().join("a");
    let o = eitlab(&[
        "mc-spectrum",
        "--preset",
        "ne100torr",
        "--ntraj",
        "300",
        "--seed",
        "9",
        "--gradients",
        "0,3",
        "--grid",
        "-3000,3000,31",
        "--out",
        first.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let second = tmp.path().join("b");
    let o = eitlab(&[
        "--from-manifest",
        first.join("manifest.json").to_str().unwrap(),
        "--out",
        second.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(files(&first), files(&second));
    for name in files(&first) {
        if name != "manifest.json" {
            assert_eq!(fs::read(first.join(&name)).unwrap(), fs::read(second.join(&name)).unwrap(), "{name}");
        }
    }
    let (a, b) = (manifest(&first), manifest(&second));
    assert_eq!(a["sha256"], b["sha256"]);
    assert_eq!(a["job"], b["job"]);
    assert_eq!(a["seed"], 9);
}

#[test]
fn from_manifest_requires_out() {
    let o = eitlab(&["--from-manifest", "x.json"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn store_rejects_unknown_protocol_key() {
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("p.json");
    fs::write(&path, r#"{"protocol": {"write_power_w": 5e-5, "storage_time": 1}}"#).unwrap();
    let o = eitlab(&["store", "--protocol", path.to_str().unwrap(), "--out", tmp.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("storage_time"), "{}", stderr(&o));
}

#[test]
fn coil_writes_field_map_and_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("o");
    let o = eitlab(&["coil", "--turns", "2", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("field_map.csv")).unwrap();
    assert!(csv.starts_with("x,y,z,Bx,By,Bz\n# manifest-sha256: "));
    let doc: serde_json::Value = serde_json::from_slice(&fs::read(out.join("coil_report.json")).unwrap()).unwrap();
    let ratio = doc["result"]["distortion"]["check"]["ratio"].as_f64().unwrap();
    assert!((ratio - 0.075).abs() < 1e-3);
    assert_eq!(doc["result"]["geometry"]["turns"], 2);
}
