//! Replays the checked-in fuzz seeds through the same parsers and
//! properties as the fuzz targets.

use std::fs;
use std::path::PathBuf;

use eitlab::cli::Job;
use eitlab::io::{parse_grid, parse_list, parse_manifest, parse_spectrum_csv, parse_store_request, spectrum_table};
use eitlab::physics::ExperimentConfig;
use eitlab::storage::validate_schedule;

fn seeds(target: &str) -> Vec<(String, String)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out: Vec<(String, String)> = fs::read_dir(&dir)
        .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
        .map(|e| {
            let path = e.unwrap().path();
            (path.display().to_string(), fs::read_to_string(&path).unwrap())
        })
        .collect();
    out.sort();
    assert!(!out.is_empty(), "no seeds for {target}");
    out
}

#[test]
fn config_seeds() {
    let mut accepted = 0;
    for (name, text) in seeds("config_json") {
        if let Ok(config) = ExperimentConfig::from_json(&text) {
            config.validate().unwrap();
            assert_eq!(ExperimentConfig::from_json(&config.to_json()).unwrap(), config, "{name}");
            accepted += 1;
        }
    }
    assert!(accepted >= 3);
}

#[test]
fn spectrum_seeds() {
    let mut accepted = 0;
    for (name, text) in seeds("spectrum_csv") {
        if let Ok(s) = parse_spectrum_csv(&text) {
            let csv = spectrum_table(&s).to_csv("seed");
            let again = parse_spectrum_csv(std::str::from_utf8(&csv).unwrap()).unwrap();
            assert_eq!(again, s, "{name}");
            accepted += 1;
        }
    }
    assert_eq!(accepted, 2);
}

#[test]
fn protocol_seeds() {
    let mut accepted = 0;
    for (_, text) in seeds("protocol_json") {
        if let Ok(request) = parse_store_request(&text) {
            validate_schedule(&request.protocol.schedule()).unwrap();
            accepted += 1;
        }
    }
    assert!(accepted >= 2);
}

#[test]
fn grid_and_list_seeds() {
    for (name, text) in seeds("grid_list") {
        let grid = parse_grid(&text);
        let list = parse_list(&text);
        if let Ok(g) = grid {
            assert_eq!(g.detunings().len(), g.points);
        }
        if name.ends_with("nonfinite") {
            assert!(list.is_err());
        } else {
            assert!(list.unwrap().iter().all(|v| v.is_finite()));
        }
    }
}

#[test]
fn manifest_seeds() {
    for (name, text) in seeds("manifest_json") {
        let manifest = parse_manifest(&text).unwrap_or_else(|e| panic!("{name}: {e}"));
        let job: Job = serde_json::from_value(manifest.job).unwrap();
        assert_eq!(job.subcommand(), manifest.subcommand);
    }
}
