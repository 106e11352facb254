//! Command-line front end. Arguments are resolved into a [`Job`] that holds
//! every input by value, so a manifest can replay it without the original
//! files.

use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::coil::{
    build_golay_set, central_field_map, curl_and_linearity_report, distortion_check, gradient_report, CoilGeometry,
};
use crate::diffusion::{gradient_scan, McSpectrum};
use crate::error::{Error, Result};
use crate::fit::{central_peak_width, fit, CentralPeak, FitResult};
use crate::io::{
    commit_outputs, parse_grid, parse_list, parse_store_request, read_manifest, read_spectrum_csv, reproducible_hash,
    resolve_config, spectrum_table, GridSpec, RunManifest, StoreRequest, Table, MAX_STORAGE_GRID_POINTS,
};
use crate::lineshapes::{transit_time, Lineshape, ModelTag};
use crate::physics::{rad_to_hz, ExperimentConfig, Preset, Spectrum, SpectrumSource};
use crate::repro::{self, Figure, GradientPoint, DEFAULT_SEED, DEFAULT_TRAJECTORIES};
use crate::storage::{
    decay_curve, double_readout, DoubleReadoutPoint, IntermediateRead, RetrievalRecord, StorageMedium, StorageProtocol,
    TransverseGrid, DEFAULT_GRID_POINTS, INTERMEDIATE_OFF_S, INTERMEDIATE_ON_S, STORAGE_DIFFUSION_SHARE,
};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Exit status for success.
pub const EXIT_OK: i32 = 0;
/// Exit status for bad input, configuration or I/O.
pub const EXIT_INPUT: i32 = 2;
/// Exit status when a numerical method fails to converge.
pub const EXIT_NUMERICAL: i32 = 3;

const DEFAULT_LINESHAPE_GRID: &str = "-20000,20000,401";

#[derive(Debug, Parser)]
#[command(name = "eitlab", version, about = "EIT lineshape, diffusion, coil and stored-light simulator")]
#[command(args_conflicts_with_subcommands = true, subcommand_required = false)]
pub struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    /// Replay the job recorded in a manifest.
    #[arg(long, value_name = "PATH", requires = "out")]
    from_manifest: Option<PathBuf>,
    /// Output directory for --from-manifest.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Experiment configuration JSON; overrides --preset.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// ne5torr, ne100torr or storage.
    #[arg(long, value_name = "NAME")]
    preset: Option<String>,
}

#[derive(Debug, Args)]
struct OutArgs {
    #[arg(long, value_name = "DIR", default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct McArgs {
    #[arg(long, value_name = "U64", default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Trajectories per spectrum.
    #[arg(long, value_name = "N", default_value_t = DEFAULT_TRAJECTORIES)]
    ntraj: usize,
    /// Transverse gradients, mG/cm, comma separated.
    #[arg(long, value_name = "LIST", allow_hyphen_values = true)]
    gradients: Option<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form lineshape over a detuning grid.
    Lineshape {
        #[command(flatten)]
        config: ConfigArgs,
        /// lorentzian, ty or transit-exponential.
        #[arg(long, default_value = "ty")]
        model: String,
        /// Detuning grid MIN,MAX,N in Hz.
        #[arg(long, value_name = "MIN,MAX,N", default_value = DEFAULT_LINESHAPE_GRID, allow_hyphen_values = true)]
        grid: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Monte-Carlo spectrum, one per gradient.
    McSpectrum {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        mc: McArgs,
        /// Detuning grid MIN,MAX,N in Hz; default is the sinh peak grid.
        #[arg(long, value_name = "MIN,MAX,N", allow_hyphen_values = true)]
        grid: Option<String>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Gradient-coil field map and reports.
    Coil {
        #[arg(long, value_name = "CM")]
        inner_z: Option<f64>,
        #[arg(long, value_name = "CM")]
        outer_z: Option<f64>,
        #[arg(long, value_name = "CM")]
        radius: Option<f64>,
        #[arg(long, value_name = "DEG")]
        arc_angle: Option<f64>,
        #[arg(long)]
        turns: Option<u32>,
        #[arg(long, value_name = "A")]
        current: Option<f64>,
        /// Bias field of the distortion check, mG.
        #[arg(long, value_name = "MG", default_value_t = 132.0)]
        bias_mg: f64,
        /// Gradient of the distortion check, mG/cm.
        #[arg(long, value_name = "MG_PER_CM", default_value_t = 4.0)]
        gradient_mg: f64,
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Stored-light decay curve and double readout.
    Store {
        #[command(flatten)]
        config: ConfigArgs,
        /// Storage request JSON (protocol, storage times, gaps, grid).
        #[arg(long, value_name = "PATH")]
        protocol: Option<PathBuf>,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Fit lineshape models to a spectrum CSV.
    Fit {
        /// Spectrum CSV with header delta_hz,transmission.
        #[arg(long, value_name = "PATH")]
        input: PathBuf,
        /// Comma-separated models, or `all`.
        #[arg(long, default_value = "all")]
        model: String,
        #[command(flatten)]
        out: OutArgs,
    },
    /// Regenerate the data behind a figure.
    Repro {
        #[arg(value_enum)]
        figure: Figure,
        #[command(flatten)]
        mc: McArgs,
        /// Transverse grid points of the storage solver.
        #[arg(long, value_name = "N", default_value_t = DEFAULT_GRID_POINTS)]
        grid_points: usize,
        #[command(flatten)]
        out: OutArgs,
    },
}

/// A fully resolved unit of work.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Job {
    Lineshape {
        model: ModelTag,
        config: ExperimentConfig,
        grid: GridSpec,
    },
    McSpectrum {
        config: ExperimentConfig,
        /// Detunings, rad/s.
        detunings: Vec<f64>,
        gradients_mg_per_cm: Vec<f64>,
        trajectories: usize,
        seed: u64,
    },
    Coil {
        geometry: CoilGeometry,
        cell_length_cm: f64,
        bias_mg: f64,
        gradient_mg_per_cm: f64,
    },
    Store {
        config: ExperimentConfig,
        request: StoreRequest,
    },
    Fit {
        models: Vec<ModelTag>,
        /// Detunings, rad/s.
        detunings: Vec<f64>,
        transmissions: Vec<f64>,
    },
    Repro {
        figure: Figure,
        gradients_mg_per_cm: Vec<f64>,
        trajectories: usize,
        seed: u64,
        grid_points: usize,
    },
}

impl Job {
    pub fn subcommand(&self) -> &'static str {
        match self {
            Job::Lineshape { .. } => "lineshape",
            Job::McSpectrum { .. } => "mc-spectrum",
            Job::Coil { .. } => "coil",
            Job::Store { .. } => "store",
            Job::Fit { .. } => "fit",
            Job::Repro { .. } => "repro",
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Job::McSpectrum { seed, .. } | Job::Repro { seed, .. } => Some(*seed),
            _ => None,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Job::Lineshape { config, grid, .. } => {
                config.validate()?;
                grid.validate()
            }
            Job::McSpectrum {
                config,
                detunings,
                gradients_mg_per_cm,
                ..
            } => {
                config.validate()?;
                Spectrum::new(detunings.clone(), vec![0.0; detunings.len()], SpectrumSource::File)?;
                finite_list("gradients", gradients_mg_per_cm)
            }
            Job::Coil {
                geometry,
                cell_length_cm,
                bias_mg,
                gradient_mg_per_cm,
            } => {
                geometry.validate()?;
                distortion_check(gradient_mg_per_cm * 1e-3, *cell_length_cm, bias_mg * 1e-3).map(|_| ())
            }
            Job::Store { config, request } => {
                config.validate()?;
                request.validate()
            }
            Job::Fit {
                models,
                detunings,
                transmissions,
            } => {
                if models.is_empty() {
                    return Err(Error::config("model", "no model given"));
                }
                Spectrum::new(detunings.clone(), transmissions.clone(), SpectrumSource::File).map(|_| ())
            }
            Job::Repro {
                gradients_mg_per_cm,
                grid_points,
                ..
            } => {
                if !(8..=MAX_STORAGE_GRID_POINTS).contains(grid_points) {
                    return Err(Error::config(
                        "grid_points",
                        format!("must lie in [8, {MAX_STORAGE_GRID_POINTS}]"),
                    ));
                }
                finite_list("gradients", gradients_mg_per_cm)
            }
        }
    }
}

fn finite_list(field: &str, values: &[f64]) -> Result<()> {
    if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
        return Err(Error::config(field, "must be a non-empty list of finite numbers"));
    }
    Ok(())
}

pub fn exit_code(error: &Error) -> i32 {
    match error {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Parses `argv` (program name first), runs the job and writes its outputs.
/// Returns the process exit status.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli) {
        Ok(paths) => {
            for p in paths {
                println!("{}", p.display());
            }
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cli: Cli) -> Result<Vec<PathBuf>> {
    let (job, out) = match (cli.command, cli.from_manifest) {
        (Some(command), _) => resolve(command)?,
        (None, Some(path)) => {
            let manifest = read_manifest(&path)?;
            if manifest.tool_version != TOOL_VERSION {
                eprintln!(
                    "warning: manifest written by version {}, replaying with {TOOL_VERSION}",
                    manifest.tool_version
                );
            }
            let job: Job = serde_json::from_value(manifest.job)
                .map_err(|e| Error::parse(format!("manifest job: {e}")))?;
            let out = cli.out.expect("clap requires --out with --from-manifest");
            (job, out)
        }
        (None, None) => return Err(Error::config("subcommand", "none given (try --help)")),
    };
    execute_to(&job, &out)
}

/// Runs `job` and commits its outputs and manifest to `out`. Nothing is
/// written unless the whole job succeeds.
pub fn execute_to(job: &Job, out: &Path) -> Result<Vec<PathBuf>> {
    job.validate()?;
    let value = serde_json::to_value(job).expect("jobs serialize");
    let hash = reproducible_hash(job.subcommand(), TOOL_VERSION, job.seed(), &value);
    let start = Instant::now();
    let outputs = execute(job, &hash)?;
    let manifest = RunManifest {
        subcommand: job.subcommand().to_string(),
        tool_version: TOOL_VERSION.to_string(),
        seed: job.seed(),
        job: value,
        outputs: outputs.iter().map(|(n, _)| n.clone()).collect(),
        wall_clock_s: start.elapsed().as_secs_f64(),
        sha256: hash,
    };
    commit_outputs(out, &outputs, &manifest)
}

fn resolve(command: Command) -> Result<(Job, PathBuf)> {
    let config_of = |c: &ConfigArgs, fallback| resolve_config(c.config.as_deref(), c.preset.as_deref(), fallback);
    Ok(match command {
        Command::Lineshape {
            config,
            model,
            grid,
            out,
        } => (
            Job::Lineshape {
                model: ModelTag::from_name(&model)?,
                config: config_of(&config, Preset::Ne5Torr)?,
                grid: parse_grid(&grid)?,
            },
            out.out,
        ),
        Command::McSpectrum { config, mc, grid, out } => {
            let config = config_of(&config, Preset::Ne5Torr)?;
            let gradients = match &mc.gradients {
                Some(list) => parse_list(list)?,
                None => vec![config.magnetics.gradient_gauss_per_cm * 1e3],
            };
            let detunings = match grid {
                Some(g) => parse_grid(&g)?.detunings(),
                None => repro::default_peak_grid(),
            };
            (
                Job::McSpectrum {
                    config,
                    detunings,
                    gradients_mg_per_cm: gradients,
                    trajectories: mc.ntraj,
                    seed: mc.seed,
                },
                out.out,
            )
        }
        Command::Coil {
            inner_z,
            outer_z,
            radius,
            arc_angle,
            turns,
            current,
            bias_mg,
            gradient_mg,
            config,
            out,
        } => {
            let d = CoilGeometry::default();
            let geometry = CoilGeometry {
                inner_z_cm: inner_z.unwrap_or(d.inner_z_cm),
                outer_z_cm: outer_z.unwrap_or(d.outer_z_cm),
                radius_cm: radius.unwrap_or(d.radius_cm),
                arc_angle_deg: arc_angle.unwrap_or(d.arc_angle_deg),
                turns: turns.unwrap_or(d.turns),
                current_a: current.unwrap_or(d.current_a),
            };
            let cell = config_of(&config, Preset::Ne5Torr)?.cell;
            (
                Job::Coil {
                    geometry,
                    cell_length_cm: cell.length_cm,
                    bias_mg,
                    gradient_mg_per_cm: gradient_mg,
                },
                out.out,
            )
        }
        Command::Store { config, protocol, out } => {
            let request = match protocol {
                Some(path) => {
                    let text = std::fs::read_to_string(&path).map_err(|source| Error::Io {
                        path: path.display().to_string(),
                        source,
                    })?;
                    parse_store_request(&text)?
                }
                None => StoreRequest::default(),
            };
            (
                Job::Store {
                    config: config_of(&config, Preset::Storage)?,
                    request,
                },
                out.out,
            )
        }
        Command::Fit { input, model, out } => {
            let spectrum = read_spectrum_csv(&input)?;
            let models = if model.trim() == "all" {
                ModelTag::ALL.to_vec()
            } else {
                model
                    .split(',')
                    .map(|m| ModelTag::from_name(m.trim()))
                    .collect::<Result<Vec<_>>>()?
            };
            (
                Job::Fit {
                    models,
                    detunings: spectrum.detunings().to_vec(),
                    transmissions: spectrum.transmissions().to_vec(),
                },
                out.out,
            )
        }
        Command::Repro {
            figure,
            mc,
            grid_points,
            out,
        } => {
            let gradients = match &mc.gradients {
                Some(list) => parse_list(list)?,
                None => repro::SCAN_GRADIENTS_MG_PER_CM.to_vec(),
            };
            (
                Job::Repro {
                    figure,
                    gradients_mg_per_cm: gradients,
                    trajectories: mc.ntraj,
                    seed: mc.seed,
                    grid_points,
                },
                out.out,
            )
        }
    })
}

type Outputs = Vec<(String, Vec<u8>)>;

fn json_output<T: Serialize>(hash: &str, value: &T) -> Vec<u8> {
    let doc = serde_json::json!({ "manifest_sha256": hash, "result": value });
    let mut bytes = serde_json::to_vec_pretty(&doc).expect("reports serialize");
    bytes.push(b'\n');
    bytes
}

/// Runs a job in memory and returns the output files by name.
pub fn execute(job: &Job, hash: &str) -> Result<Outputs> {
    match job {
        Job::Lineshape { model, config, grid } => run_lineshape(*model, config, grid, hash),
        Job::McSpectrum {
            config,
            detunings,
            gradients_mg_per_cm,
            trajectories,
            seed,
        } => run_mc(config, detunings, gradients_mg_per_cm, *trajectories, *seed, hash),
        Job::Coil {
            geometry,
            cell_length_cm,
            bias_mg,
            gradient_mg_per_cm,
        } => run_coil(geometry, *cell_length_cm, *bias_mg, *gradient_mg_per_cm, "", hash),
        Job::Store { config, request } => run_store(config, request, hash),
        Job::Fit {
            models,
            detunings,
            transmissions,
        } => {
            let spectrum = Spectrum::new(detunings.clone(), transmissions.clone(), SpectrumSource::File)?;
            run_fit(&spectrum, models, hash)
        }
        Job::Repro {
            figure,
            gradients_mg_per_cm,
            trajectories,
            seed,
            grid_points,
        } => run_repro(*figure, gradients_mg_per_cm, *trajectories, *seed, *grid_points, hash),
    }
}

fn closed_form(model: ModelTag, config: &ExperimentConfig) -> Result<Lineshape> {
    let o = &config.optics;
    let shape = match model {
        ModelTag::Lorentzian => Lineshape::Lorentzian {
            control_rabi: o.control_rabi_rad_s,
            excited_decay: o.excited_decay_rad_s,
            coherence_decay: o.coherence_decay_rad_s,
        },
        ModelTag::Ty => Lineshape::Ty {
            control_rabi: o.control_rabi_rad_s,
            excited_decay: o.excited_decay_rad_s,
        },
        ModelTag::TransitExponential => Lineshape::TransitExponential {
            transit_time: transit_time(&config.beam, &config.gas)?,
        },
    };
    shape.validate()?;
    Ok(shape)
}

fn run_lineshape(model: ModelTag, config: &ExperimentConfig, grid: &GridSpec, hash: &str) -> Result<Outputs> {
    let shape = closed_form(model, config)?;
    let detunings = grid.detunings();
    let values = detunings.iter().map(|&d| shape.eval(d)).collect();
    let spectrum = Spectrum::new(detunings, values, SpectrumSource::ClosedForm)?;
    let report = serde_json::json!({
        "lineshape": shape,
        "fwhm_hz": rad_to_hz(shape.fwhm()?),
        "warnings": config.warnings(),
    });
    Ok(vec![
        ("lineshape.csv".into(), spectrum_table(&spectrum).to_csv(hash)),
        ("lineshape.json".into(), json_output(hash, &report)),
    ])
}

#[derive(Serialize)]
struct McSummary {
    gradient_mg_per_cm: f64,
    file: String,
    trajectories: usize,
    time_step_s: f64,
    max_std_error: Option<f64>,
    narrow_peak: CentralPeak,
    distortion: crate::coil::DistortionCheck,
    warnings: Vec<String>,
}

fn mc_table(mc: &McSpectrum) -> Table {
    let mut table = Table::new(&["delta_hz", "transmission", "std_error"]);
    let se = mc.ensemble.std_error.as_deref();
    for (i, (d, t)) in mc.spectrum.iter().enumerate() {
        table.push(vec![rad_to_hz(d), t, se.map_or(f64::NAN, |s| s[i])]);
    }
    table
}

fn run_mc(
    config: &ExperimentConfig,
    detunings: &[f64],
    gradients_mg: &[f64],
    trajectories: usize,
    seed: u64,
    hash: &str,
) -> Result<Outputs> {
    let gradients: Vec<f64> = gradients_mg.iter().map(|g| g * 1e-3).collect();
    let scan = gradient_scan(config, &gradients, detunings, trajectories, seed)?;
    let mut outputs = Vec::new();
    let mut summary = Vec::new();
    for (i, point) in scan.iter().enumerate() {
        let file = format!("mc_spectrum_{i:02}.csv");
        outputs.push((file.clone(), mc_table(&point.result).to_csv(hash)));
        summary.push(McSummary {
            gradient_mg_per_cm: gradients_mg[i],
            file,
            trajectories: point.result.ensemble.trajectories,
            time_step_s: point.result.params.time_step,
            max_std_error: point
                .result
                .ensemble
                .std_error
                .as_ref()
                .and_then(|s| s.iter().copied().reduce(f64::max)),
            narrow_peak: central_peak_width(&point.result.spectrum)?,
            distortion: point.distortion,
            warnings: point.result.warnings.clone(),
        });
    }
    outputs.push(("mc_summary.json".into(), json_output(hash, &summary)));
    Ok(outputs)
}

fn run_coil(
    geometry: &CoilGeometry,
    cell_length_cm: f64,
    bias_mg: f64,
    gradient_mg: f64,
    prefix: &str,
    hash: &str,
) -> Result<Outputs> {
    let coil = build_golay_set(geometry)?;
    let map = central_field_map(&coil, geometry.current_a)?;
    let mut table = Table::new(&["x", "y", "z", "Bx", "By", "Bz"]);
    for (p, b) in map.samples() {
        table.push(vec![p.x, p.y, p.z, b.x, b.y, b.z]);
    }
    let report = serde_json::json!({
        "geometry": geometry,
        "gradient": gradient_report(&coil),
        "field_map": curl_and_linearity_report(&map)?,
        "closure_gap_cm": coil.max_closure_gap(),
        "distortion": {
            "bias_mg": bias_mg,
            "gradient_mg_per_cm": gradient_mg,
            "cell_length_cm": cell_length_cm,
            "check": distortion_check(gradient_mg * 1e-3, cell_length_cm, bias_mg * 1e-3)?,
        },
    });
    Ok(vec![
        (format!("{prefix}field_map.csv"), table.to_csv(hash)),
        (format!("{prefix}coil_report.json"), json_output(hash, &report)),
    ])
}

/// One CSV per retrieved pulse set, with the given column per record.
fn waveform_table(columns: &[&str], records: &[(usize, &RetrievalRecord)]) -> Table {
    let mut header = vec!["t_s"];
    header.extend_from_slice(columns);
    let mut table = Table::new(&header);
    for &(col, record) in records {
        for (&t, &a) in record.times_s.iter().zip(&record.amplitudes) {
            let mut row = vec![t];
            row.extend((0..columns.len()).map(|c| if c == col { a } else { 0.0 }));
            table.push(row);
        }
    }
    table
}

fn double_readout_outputs(prefix: &str, points: &[DoubleReadoutPoint], hash: &str) -> Outputs {
    let mut table = Table::new(&["T_s", "area_with", "area_without", "ratio"]);
    let mut outputs = Vec::new();
    for (i, p) in points.iter().enumerate() {
        table.push(vec![p.gap_s, p.area_with, p.area_without, p.ratio]);
        let mut records: Vec<(usize, &RetrievalRecord)> = p.reads_with.iter().map(|r| (0, r)).collect();
        records.push((1, &p.read_without));
        let waves = waveform_table(&["amplitude_with", "amplitude_without"], &records);
        outputs.push((format!("{prefix}waveform_T_{i:02}.csv"), waves.to_csv(hash)));
    }
    outputs.insert(0, (format!("{prefix}double_readout.csv"), table.to_csv(hash)));
    outputs
}

fn decay_outputs(prefix: &str, curve: &crate::storage::DecayCurve, hash: &str) -> Outputs {
    let mut table = Table::new(&["tau_s", "area"]);
    let mut outputs = Vec::new();
    for (i, (&tau, &area)) in curve.taus_s.iter().zip(&curve.areas).enumerate() {
        table.push(vec![tau, area]);
        let waves = waveform_table(&["amplitude"], &[(0, &curve.reads[i])]);
        outputs.push((format!("{prefix}waveform_tau_{i:02}.csv"), waves.to_csv(hash)));
    }
    outputs.insert(0, (format!("{prefix}decay.csv"), table.to_csv(hash)));
    outputs
}

#[derive(Serialize)]
struct DoubleReadoutSummary {
    gap_s: f64,
    area_with: f64,
    area_without: f64,
    ratio: f64,
}

fn summarize_double_readout(points: &[DoubleReadoutPoint]) -> Vec<DoubleReadoutSummary> {
    points
        .iter()
        .map(|p| DoubleReadoutSummary {
            gap_s: p.gap_s,
            area_with: p.area_with,
            area_without: p.area_without,
            ratio: p.ratio,
        })
        .collect()
}

fn run_store(config: &ExperimentConfig, request: &StoreRequest, hash: &str) -> Result<Outputs> {
    let mut medium = StorageMedium::from_config(config);
    if let Some(lw) = request.linewidth_hz {
        medium = medium.with_effective_linewidth(lw, request.diffusion_share.unwrap_or(STORAGE_DIFFUSION_SHARE))?;
    }
    medium.validate()?;
    let grid = TransverseGrid::for_medium(&medium, request.grid_points)?;
    let base = StorageProtocol {
        intermediate: None,
        ..request.protocol
    };
    let curve = decay_curve(&base, &request.taus_s, &medium, grid, &request.calibration)?;
    // Without an intermediate read in the request, the double readout uses
    // the standard dark interval before it.
    let dr_base = match request.protocol.intermediate {
        Some(_) => request.protocol,
        None => StorageProtocol {
            storage_interval_s: INTERMEDIATE_OFF_S,
            intermediate: Some(IntermediateRead {
                on_s: INTERMEDIATE_ON_S,
                gap_s: request.gaps_s[0],
            }),
            ..request.protocol
        },
    };
    let points = double_readout(&dr_base, &request.gaps_s, &medium, grid, &request.calibration)?;
    let delay = crate::storage::group_delay(base.write_power_w, &request.calibration)?;
    let report = serde_json::json!({
        "medium": medium,
        "effective_linewidth_hz": medium.effective_linewidth_hz(),
        "stored_fraction": crate::storage::stored_fraction(delay, base.pulse_full_width_s),
        "group_delay_s": delay,
        "decay_fit": curve.fit,
        "decay_linewidth_hz": curve.fit.linewidth_hz(),
        "double_readout": summarize_double_readout(&points),
    });
    let mut outputs = decay_outputs("", &curve, hash);
    outputs.extend(double_readout_outputs("", &points, hash));
    outputs.push(("store.json".into(), json_output(hash, &report)));
    Ok(outputs)
}

fn run_fit(spectrum: &Spectrum, models: &[ModelTag], hash: &str) -> Result<Outputs> {
    let results = models
        .iter()
        .map(|&m| {
            let r = fit(spectrum, m, None, None)?;
            if !r.converged {
                return Err(Error::Numerical(format!(
                    "{} fit did not converge: {}",
                    m.name(),
                    r.message.as_deref().unwrap_or("no message")
                )));
            }
            Ok(r)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(vec![
        ("residuals.csv".into(), fit_table(spectrum, &results).to_csv(hash)),
        ("fit_results.json".into(), json_output(hash, &results)),
    ])
}

/// Data, each model and each residual, one row per detuning.
fn fit_table(spectrum: &Spectrum, results: &[FitResult]) -> Table {
    let mut header = vec!["delta_hz".to_string(), "transmission".to_string()];
    for r in results {
        header.push(format!("model_{}", r.model.name()));
        header.push(format!("residual_{}", r.model.name()));
    }
    let refs: Vec<&str> = header.iter().map(String::as_str).collect();
    let mut table = Table::new(&refs);
    for (i, (d, t)) in spectrum.iter().enumerate() {
        let mut row = vec![rad_to_hz(d), t];
        for r in results {
            row.push(r.eval(d));
            row.push(r.residuals[i]);
        }
        table.push(row);
    }
    table
}

fn gradient_outputs(prefix: &str, preset: Preset, points: &[GradientPoint], hash: &str) -> Outputs {
    points
        .iter()
        .enumerate()
        .filter_map(|(i, p)| {
            let spectrum = p.spectrum.as_ref()?;
            let ty = p.ty_fit.as_ref()?;
            Some((
                format!("{prefix}_{}_g{i:02}.csv", preset.name()),
                fit_table(spectrum, std::slice::from_ref(ty)).to_csv(hash),
            ))
        })
        .collect()
}

fn run_repro(
    figure: Figure,
    gradients_mg: &[f64],
    trajectories: usize,
    seed: u64,
    grid_points: usize,
    hash: &str,
) -> Result<Outputs> {
    match figure {
        Figure::Fig2 => {
            let cell = Preset::Ne5Torr.config().cell;
            run_coil(&CoilGeometry::default(), cell.length_cm, 132.0, 4.0, "fig2_", hash)
        }
        Figure::Fig3 => {
            let config = Preset::Ne5Torr.config();
            let fits = repro::lineshape_fits(&config, trajectories, seed)?;
            let results = [fits.lorentzian.clone(), fits.ty.clone()];
            let report = serde_json::json!({
                "preset": Preset::Ne5Torr.name(),
                "total_power_w": config.beam.total_power_w,
                "fits": results,
                "narrow_peak": fits.peak,
                "single_pass_linewidth_hz": crate::physics::single_pass_diffusion_linewidth(&config),
                "warnings": fits.mc.warnings,
            });
            Ok(vec![
                ("fig3_spectrum.csv".into(), mc_table(&fits.mc).to_csv(hash)),
                ("fig3_fits.csv".into(), fit_table(&fits.mc.spectrum, &results).to_csv(hash)),
                ("fig3.json".into(), json_output(hash, &report)),
            ])
        }
        Figure::Fig5 => {
            let mut outputs = Vec::new();
            let mut report = serde_json::Map::new();
            for preset in [Preset::Ne5Torr, Preset::Ne100Torr] {
                let points = repro::spectra_scan(preset, gradients_mg, trajectories, seed)?;
                outputs.extend(gradient_outputs("fig5", preset, &points, hash));
                report.insert(preset.name().into(), serde_json::to_value(&points).expect("serializes"));
            }
            outputs.push(("fig5.json".into(), json_output(hash, &report)));
            Ok(outputs)
        }
        Figure::Fig6 => {
            let mut table = Table::new(&["gradient_mg_per_cm", "width_ne5torr_hz", "width_ne100torr_hz"]);
            let mut report = serde_json::Map::new();
            let mut widths = Vec::new();
            for preset in [Preset::Ne5Torr, Preset::Ne100Torr] {
                let points = repro::width_scan(preset, gradients_mg, trajectories, seed)?;
                let slope = repro::width_slope(&points).ok();
                report.insert(
                    preset.name().into(),
                    serde_json::json!({ "slope_hz_per_mg_per_cm": slope, "points": points }),
                );
                widths.push(points);
            }
            for (i, g) in gradients_mg.iter().enumerate() {
                let w = |k: usize| widths[k][i].narrow_peak_fwhm_hz.unwrap_or(f64::NAN);
                table.push(vec![*g, w(0), w(1)]);
            }
            Ok(vec![
                ("fig6_widths.csv".into(), table.to_csv(hash)),
                ("fig6.json".into(), json_output(hash, &report)),
            ])
        }
        Figure::Fig7 => {
            let medium = repro::decay_medium()?;
            let curve = repro::storage_decay(&medium, grid_points, &repro::DECAY_TAUS_S)?;
            let peak = repro::matched_narrow_peak(&medium, trajectories, seed)?;
            let consistency = match (peak.fwhm_hz(), curve.fit.decay_time_s) {
                (Some(w), Some(t)) => Some(w * std::f64::consts::PI * t),
                _ => None,
            };
            let report = serde_json::json!({
                "medium": medium,
                "effective_linewidth_hz": medium.effective_linewidth_hz(),
                "decay_fit": curve.fit,
                "matched_narrow_peak": peak,
                "fwhm_times_pi_t": consistency,
            });
            let mut outputs = decay_outputs("fig7_", &curve, hash);
            outputs.push(("fig7.json".into(), json_output(hash, &report)));
            Ok(outputs)
        }
        Figure::Fig8 => {
            let medium = repro::replenishment_medium();
            let points = repro::storage_double_readout(&medium, grid_points, &repro::DOUBLE_READOUT_GAPS_S)?;
            let mut outputs = double_readout_outputs("fig8_", &points, hash);
            let report = serde_json::json!({
                "medium": medium,
                "double_readout": summarize_double_readout(&points),
            });
            outputs.push(("fig8.json".into(), json_output(hash, &report)));
            Ok(outputs)
        }
    }
}
