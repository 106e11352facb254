//! File formats and persistence: spectrum CSV, curve CSV, protocol and
//! configuration JSON, list parsing and the run manifest.
//!
//! Every CSV the tool writes starts with the header row followed by one
//! comment line `# manifest-sha256: <hex>`. The hash covers the
//! reproducible part of the manifest (subcommand, resolved job, seed, tool
//! version), so re-running the same manifest yields byte-identical files.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::physics::{hz_to_rad, rad_to_hz, ExperimentConfig, Preset, Spectrum, SpectrumSource};
use crate::storage::{DelayCalibration, StorageProtocol, DEFAULT_GRID_POINTS};

pub const SPECTRUM_HEADER: [&str; 2] = ["delta_hz", "transmission"];
pub const HASH_PREFIX: &str = "# manifest-sha256: ";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const MAX_GRID_POINTS: usize = 1_000_000;
/// Largest transverse grid of the storage solver per axis.
pub const MAX_STORAGE_GRID_POINTS: usize = 1024;

/// Reads and validates a configuration document.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    ExperimentConfig::from_json(&text)
}

/// A config file wins over a preset; with neither, `fallback` is used.
pub fn resolve_config(
    config: Option<&Path>,
    preset: Option<&str>,
    fallback: Preset,
) -> Result<ExperimentConfig> {
    match (config, preset) {
        (Some(path), _) => load_config(path),
        (None, Some(name)) => Ok(Preset::from_name(name)?.config()),
        (None, None) => Ok(fallback.config()),
    }
}

/// Linear detuning grid in Hz, given on the command line as `MIN,MAX,N`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub min_hz: f64,
    pub max_hz: f64,
    pub points: usize,
}

impl GridSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_hz.is_finite() && self.max_hz.is_finite() && self.min_hz < self.max_hz) {
            return Err(Error::config(
                "grid",
                format!("need finite MIN < MAX (got {}, {})", self.min_hz, self.max_hz),
            ));
        }
        if !hz_to_rad(self.max_hz - self.min_hz).is_finite() {
            return Err(Error::config("grid", "span overflows"));
        }
        if !(2..=MAX_GRID_POINTS).contains(&self.points) {
            return Err(Error::config(
                "grid",
                format!("need 2 <= N <= {MAX_GRID_POINTS} points (got {})", self.points),
            ));
        }
        Ok(())
    }

    /// Grid points in rad/s.
    pub fn detunings(&self) -> Vec<f64> {
        let n = self.points - 1;
        (0..self.points)
            .map(|i| hz_to_rad(self.min_hz + (self.max_hz - self.min_hz) * i as f64 / n as f64))
            .collect()
    }
}

pub fn parse_grid(text: &str) -> Result<GridSpec> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        return Err(Error::parse(format!("grid `{text}` is not MIN,MAX,N")));
    }
    let number = |s: &str| {
        s.parse::<f64>()
            .map_err(|_| Error::parse(format!("grid bound `{s}` is not a number")))
    };
    let points = parts[2]
        .parse::<usize>()
        .map_err(|_| Error::parse(format!("grid size `{}` is not a non-negative integer", parts[2])))?;
    let grid = GridSpec {
        min_hz: number(parts[0])?,
        max_hz: number(parts[1])?,
        points,
    };
    grid.validate()?;
    Ok(grid)
}

/// Comma-separated list of finite numbers, e.g. gradients in mG/cm.
pub fn parse_list(text: &str) -> Result<Vec<f64>> {
    let out = text
        .split(',')
        .map(str::trim)
        .map(|s| match s.parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(Error::parse(format!("list entry `{s}` is not a finite number"))),
        })
        .collect::<Result<Vec<f64>>>()?;
    if out.is_empty() {
        return Err(Error::parse("list is empty"));
    }
    Ok(out)
}

/// Numeric table with a fixed header, written as CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(header: &[&str]) -> Self {
        Self {
            header: header.iter().map(|s| s.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }

    /// Header, hash comment, then rows. Floats use the shortest
    /// representation that round-trips.
    pub fn to_csv(&self, manifest_hash: &str) -> Vec<u8> {
        let mut header = csv::Writer::from_writer(Vec::new());
        header
            .write_record(&self.header)
            .expect("writing to memory cannot fail");
        let mut out = header.into_inner().expect("writing to memory cannot fail");
        out.extend_from_slice(format!("{HASH_PREFIX}{manifest_hash}\n").as_bytes());
        let mut writer = csv::Writer::from_writer(&mut out);
        for row in &self.rows {
            writer
                .write_record(row.iter().map(|v| format!("{v:?}")))
                .expect("writing to memory cannot fail");
        }
        writer.flush().expect("writing to memory cannot fail");
        drop(writer);
        out
    }
}

pub fn spectrum_table(spectrum: &Spectrum) -> Table {
    let mut table = Table::new(&SPECTRUM_HEADER);
    for (d, t) in spectrum.iter() {
        table.push(vec![rad_to_hz(d), t]);
    }
    table
}

/// Parses `delta_hz,transmission` rows. Lines starting with `#` are
/// comments; the header row is required.
pub fn parse_spectrum_csv(text: &str) -> Result<Spectrum> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| Error::parse(format!("spectrum CSV header: {e}")))?
        .clone();
    if header.iter().collect::<Vec<_>>() != SPECTRUM_HEADER {
        return Err(Error::parse(format!(
            "spectrum CSV header must be `delta_hz,transmission` (got `{}`)",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    let (mut detunings, mut transmissions) = (Vec::new(), Vec::new());
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::parse(format!("spectrum CSV row {}: {e}", i + 1)))?;
        let value = |k: usize| -> Result<f64> {
            let s = &record[k];
            match s.parse::<f64>() {
                Ok(v) if v.is_finite() => Ok(v),
                _ => Err(Error::parse(format!(
                    "spectrum CSV row {}: `{s}` is not a finite number",
                    i + 1
                ))),
            }
        };
        detunings.push(hz_to_rad(value(0)?));
        transmissions.push(value(1)?);
    }
    Spectrum::new(detunings, transmissions, SpectrumSource::File)
        .map_err(|e| Error::parse(format!("spectrum CSV: {e}")))
}

pub fn read_spectrum_csv(path: &Path) -> Result<Spectrum> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_spectrum_csv(&text)
}

fn default_taus() -> Vec<f64> {
    vec![0.0, 50e-6, 100e-6, 200e-6, 400e-6, 700e-6, 1e-3, 1.5e-3, 2e-3]
}

fn default_gaps() -> Vec<f64> {
    vec![10e-6, 30e-6, 100e-6, 300e-6, 1e-3, 2e-3, 4e-3]
}

fn default_grid_points() -> usize {
    DEFAULT_GRID_POINTS
}

/// Input document of the `store` subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StoreRequest {
    #[serde(default)]
    pub protocol: StorageProtocol,
    /// Storage intervals of the decay curve, s.
    #[serde(default = "default_taus")]
    pub taus_s: Vec<f64>,
    /// Gaps T of the double-readout sweep, s.
    #[serde(default = "default_gaps")]
    pub gaps_s: Vec<f64>,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
    #[serde(default)]
    pub calibration: DelayCalibration,
    /// When set, γ_bc and D are replaced so the effective linewidth is this
    /// many Hz, with `diffusion_share` of it from diffusion.
    #[serde(default)]
    pub linewidth_hz: Option<f64>,
    #[serde(default)]
    pub diffusion_share: Option<f64>,
}

impl Default for StoreRequest {
    fn default() -> Self {
        Self {
            protocol: StorageProtocol::default(),
            taus_s: default_taus(),
            gaps_s: default_gaps(),
            grid_points: default_grid_points(),
            calibration: DelayCalibration::default(),
            linewidth_hz: None,
            diffusion_share: None,
        }
    }
}

impl StoreRequest {
    pub fn validate(&self) -> Result<()> {
        self.protocol.validate()?;
        self.calibration.validate()?;
        if !(8..=MAX_STORAGE_GRID_POINTS).contains(&self.grid_points) {
            return Err(Error::config(
                "grid_points",
                format!("must lie in [8, {MAX_STORAGE_GRID_POINTS}]"),
            ));
        }
        if self.gaps_s.is_empty() {
            return Err(Error::config("gaps_s", "need at least one gap"));
        }
        for (field, list, zero_ok) in [("taus_s", &self.taus_s, true), ("gaps_s", &self.gaps_s, false)] {
            if let Some(v) = list.iter().find(|v| !(v.is_finite() && (**v > 0.0 || (zero_ok && **v == 0.0)))) {
                return Err(Error::config(field, format!("entry {v} is out of range")));
            }
        }
        if self.taus_s.len() < 2 {
            return Err(Error::config("taus_s", "need at least two storage intervals"));
        }
        Ok(())
    }
}

pub fn parse_store_request(text: &str) -> Result<StoreRequest> {
    let request: StoreRequest =
        serde_json::from_str(text).map_err(|e| Error::parse(format!("protocol JSON: {e}")))?;
    request.validate()?;
    Ok(request)
}

/// Record of one invocation, written next to its outputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub subcommand: String,
    pub tool_version: String,
    pub seed: Option<u64>,
    /// Fully resolved job; replaying it reproduces the outputs.
    pub job: serde_json::Value,
    pub outputs: Vec<String>,
    pub wall_clock_s: f64,
    /// Hash of subcommand, version, seed and job.
    pub sha256: String,
}

/// SHA-256 over the canonical JSON of the reproducible manifest fields.
pub fn reproducible_hash(subcommand: &str, tool_version: &str, seed: Option<u64>, job: &serde_json::Value) -> String {
    let canonical = serde_json::json!({
        "job": job,
        "seed": seed,
        "subcommand": subcommand,
        "tool_version": tool_version,
    });
    let bytes = serde_json::to_vec(&canonical).expect("JSON values always serialize");
    hex::encode(Sha256::digest(&bytes))
}

pub fn parse_manifest(text: &str) -> Result<RunManifest> {
    serde_json::from_str(text).map_err(|e| Error::parse(format!("manifest JSON: {e}")))
}

pub fn read_manifest(path: &Path) -> Result<RunManifest> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_manifest(&text)
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io_error(path, e))?;
    tmp.write_all(bytes).map_err(|e| io_error(path, e))?;
    tmp.as_file().sync_all().map_err(|e| io_error(path, e))?;
    tmp.persist(path).map_err(|e| io_error(path, e.error))?;
    Ok(())
}

/// Writes every output, then the manifest. If any write fails, files
/// already written by this call are removed.
pub fn commit_outputs(dir: &Path, outputs: &[(String, Vec<u8>)], manifest: &RunManifest) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    let mut written = Vec::new();
    let manifest_bytes = serde_json::to_vec_pretty(manifest).expect("manifest serializes");
    let all = outputs
        .iter()
        .map(|(n, b)| (n.as_str(), b.as_slice()))
        .chain(std::iter::once((MANIFEST_FILE, manifest_bytes.as_slice())));
    for (name, bytes) in all {
        let path = dir.join(name);
        if let Err(e) = write_atomic(&path, bytes) {
            for p in &written {
                let _ = fs::remove_file(p);
            }
            return Err(e);
        }
        written.push(path);
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn grid_parsing() {
        let g = parse_grid("-20000, 20000,401").unwrap();
        assert_eq!(g.points, 401);
        let d = g.detunings();
        assert_eq!(d.len(), 401);
        assert!((rad_to_hz(d[200])).abs() < 1e-9);
        for bad in ["1,2", "2,1,10", "0,1,1", "a,1,3", "0,1,-3", "0,inf,3", ""] {
            assert!(parse_grid(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_list("0, 1,2,4").unwrap(), vec![0.0, 1.0, 2.0, 4.0]);
        for bad in ["", "1,,2", "x", "nan", "1,inf"] {
            assert!(parse_list(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn spectrum_csv_round_trip_is_exact() {
        let d: Vec<f64> = (0..50).map(|i| hz_to_rad(-1234.5 + 51.3 * i as f64)).collect();
        let t: Vec<f64> = d.iter().map(|x| 1.0 / (1.0 + x * x * 1e-7)).collect();
        let s = Spectrum::new(d, t, SpectrumSource::ClosedForm).unwrap();
        let bytes = spectrum_table(&s).to_csv("abc");
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("delta_hz,transmission\n# manifest-sha256: abc\n"));
        let back = parse_spectrum_csv(&text).unwrap();
        assert_eq!(back.transmissions(), s.transmissions());
        for (a, b) in back.detunings().iter().zip(s.detunings()) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1.0));
        }
    }

    #[test]
    fn spectrum_csv_rejects_bad_input() {
        for bad in [
            "",
            "x,y\n1,2\n",
            "delta_hz,transmission\n1,nan\n",
            "delta_hz,transmission\n2,1\n1,1\n",
            "delta_hz,transmission\n1\n",
            "delta_hz,transmission\n",
        ] {
            assert!(parse_spectrum_csv(bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn store_request_defaults_and_unknown_keys() {
        let r = parse_store_request("{}").unwrap();
        assert_eq!(r, StoreRequest::default());
        let r = parse_store_request(r#"{"protocol": {"read_power_w": 1e-3}, "taus_s": [0, 1e-3]}"#).unwrap();
        assert_eq!(r.protocol.read_power_w, 1e-3);
        assert_eq!(r.protocol.write_power_w, 50e-6);
        let err = parse_store_request(r#"{"protocol": {"bogus": 1}}"#).unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
        assert!(parse_store_request(r#"{"gaps_s": [0]}"#).is_err());
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let job = serde_json::json!({"b": 1, "a": [1.5, 2]});
        let h1 = reproducible_hash("fit", "0.1.0", Some(3), &job);
        assert_eq!(h1, reproducible_hash("fit", "0.1.0", Some(3), &job));
        assert_eq!(h1.len(), 64);
        assert_ne!(h1, reproducible_hash("fit", "0.1.0", Some(4), &job));
    }

    #[test]
    fn commit_writes_everything_atomically() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = RunManifest {
            subcommand: "fit".into(),
            tool_version: "0".into(),
            seed: None,
            job: serde_json::json!({}),
            outputs: vec!["a.csv".into()],
            wall_clock_s: 0.0,
            sha256: "00".into(),
        };
        let out = dir.path().join("run");
        commit_outputs(&out, &[("a.csv".into(), b"x\n".to_vec())], &manifest).unwrap();
        assert_eq!(fs::read(out.join("a.csv")).unwrap(), b"x\n");
        let back = read_manifest(&out.join(MANIFEST_FILE)).unwrap();
        assert_eq!(back, manifest);
        let leftovers: Vec<_> = fs::read_dir(&out).unwrap().collect();
        assert_eq!(leftovers.len(), 2);
    }

    #[test]
    fn presets_resolve() {
        let c = resolve_config(None, Some("ne100torr"), Preset::Ne5Torr).unwrap();
        assert_eq!(c.gas.diffusion_cm2_per_s, 1.78);
        assert!(resolve_config(None, Some("argon"), Preset::Ne5Torr).is_err());
        assert!(resolve_config(Some(Path::new("/nonexistent/cfg.json")), None, Preset::Ne5Torr).is_err());
    }

    proptest! {
        #[test]
        fn parsers_never_panic(s in ".{0,64}") {
            let _ = parse_grid(&s);
            let _ = parse_list(&s);
            let _ = parse_spectrum_csv(&s);
            let _ = parse_store_request(&s);
            let _ = parse_manifest(&s);
        }

        #[test]
        fn list_round_trip(v in proptest::collection::vec(-1e6..1e6f64, 1..10)) {
            let text = v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
            prop_assert_eq!(parse_list(&text).unwrap(), v);
        }
    }
}
