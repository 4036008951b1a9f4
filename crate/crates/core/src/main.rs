use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde::Serialize;
use sha2::{Digest, Sha256};

use tubepinn::config::{Preset, RunConfig};
use tubepinn::experiment::{self, outlet_prediction, Setup};
use tubepinn::fdm::{relative_l2, sensitivity_study, FieldDump, Grid};
use tubepinn::physics::LossConstants;
use tubepinn::resonet::ResoNetModel;
use tubepinn::trainer::EpochRecord;
use tubepinn::{gradcheck, Error, Result};

/// Acoustic tube resonance: finite-difference reference solutions and
/// physics-informed network training and identification.
#[derive(Debug, Parser)]
#[command(name = "tubepinn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML file overriding the preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Run seed, overriding the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, value_enum, default_value_t = Preset::Desk)]
    preset: Preset,
    /// Suppress progress output.
    #[arg(long, global = true)]
    quiet: bool,
    /// Print errors as JSON on stderr.
    #[arg(long, global = true)]
    error_json: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write one period of the inlet particle velocity.
    GenExcitation,
    /// Run the finite-difference solver to steady state.
    FdmForward {
        /// Probe position for the waveform CSV (m); defaults to the outlet.
        #[arg(long)]
        x: Option<f64>,
    },
    /// Train the network on the forward problem.
    PinnForward {
        /// Output directory of an earlier fdm-forward run to compare against.
        #[arg(long)]
        reference: Option<PathBuf>,
    },
    /// Identify the wall-loss constants from simulated outlet pressure.
    Identify {
        /// Measurement noise as a fraction of the signal standard deviation.
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Outlet pressure sensitivity to doubling each loss constant.
    Sensitivity,
    /// Compare analytic gradients with finite differences.
    Gradcheck,
}

struct Run {
    dir: PathBuf,
    files: Vec<String>,
    quiet: bool,
}

impl Run {
    fn create(dir: &Path, quiet: bool) -> Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            quiet,
        })
    }

    fn writer(&mut self, name: &str) -> Result<BufWriter<File>> {
        if let Some(parent) = Path::new(name).parent() {
            fs::create_dir_all(self.dir.join(parent))?;
        }
        self.files.push(name.to_string());
        Ok(BufWriter::new(File::create(self.dir.join(name))?))
    }

    fn json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut w = self.writer(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }

    fn text(&mut self, name: &str, text: &str) -> Result<()> {
        let mut w = self.writer(name)?;
        w.write_all(text.as_bytes())?;
        w.flush()?;
        Ok(())
    }

    fn progress(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// List every output with its SHA-256.
    fn finish(mut self, command: &str, seed: u64) -> Result<()> {
        self.files.sort();
        self.files.dedup();
        let mut entries = Vec::new();
        for name in &self.files {
            let bytes = fs::read(self.dir.join(name))?;
            entries.push(ManifestEntry {
                file: name.clone(),
                bytes: bytes.len(),
                sha256: hex::encode(Sha256::digest(&bytes)),
            });
        }
        let manifest = Manifest {
            command: command.to_string(),
            version: env!("CARGO_PKG_VERSION").to_string(),
            seed,
            outputs: entries,
        };
        let mut w = BufWriter::new(File::create(self.dir.join("manifest.json"))?);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        writeln!(w)?;
        w.flush()?;
        Ok(())
    }
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    version: String,
    seed: u64,
    outputs: Vec<ManifestEntry>,
}

#[derive(Serialize)]
struct ManifestEntry {
    file: String,
    bytes: usize,
    sha256: String,
}

#[derive(Serialize)]
struct FdmSummary {
    nodes: usize,
    dx: f64,
    dt: f64,
    steps_per_period: usize,
    cfl: f64,
    periods: usize,
    residual: f64,
    converged: bool,
    probe_x: f64,
    outlet_pressure_max: f64,
}

#[derive(Serialize)]
struct ForwardSummary {
    epochs: usize,
    final_loss: tubepinn::loss::LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    comparison: Option<Comparison>,
}

#[derive(Serialize)]
struct Comparison {
    reference: String,
    outlet_relative_l2: f64,
}

#[derive(Serialize)]
struct SensitivitySummary {
    factor: f64,
    deviation_gc: f64,
    deviation_rc: f64,
    ratio: f64,
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_file(path, cli.preset)?,
        None => RunConfig::preset(cli.preset),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Command::Identify { noise: Some(n) } = cli.command {
        cfg.identification.noise = n;
    }
    if let Command::PinnForward { reference: Some(r) } = &cli.command {
        cfg.paths.reference = Some(r.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(run: &mut Run, name: &str, history: &[EpochRecord], truth: &LossConstants) -> Result<()> {
    let mut w = run.writer(name)?;
    writeln!(w, "{}", EpochRecord::CSV_HEADER)?;
    for r in history {
        r.write_csv(&mut w, truth)?;
    }
    w.flush()?;
    Ok(())
}

fn write_checkpoint(run: &mut Run, name: &str, model: &ResoNetModel, epoch: usize) -> Result<()> {
    let mut w = run.writer(name)?;
    model.write_checkpoint(&mut w, epoch)?;
    w.flush()?;
    Ok(())
}

/// Observer that reports progress and writes periodic checkpoints.
fn training_observer<'a>(
    dir: &'a Path,
    interval: usize,
    quiet: bool,
    written: &'a mut Vec<String>,
) -> impl FnMut(&EpochRecord, &ResoNetModel) -> Result<()> + 'a {
    let start = Instant::now();
    move |r, model| {
        if !quiet && (r.epoch == 1 || r.epoch % 500 == 0) {
            eprintln!(
                "epoch {:6}  loss {:.4e}  gc {:.4e}  rc {:.4e}  ({:.0} s)",
                r.epoch,
                r.loss.total,
                r.gc,
                r.rc,
                start.elapsed().as_secs_f64()
            );
        }
        if interval > 0 && r.epoch % interval == 0 {
            let name = format!("checkpoints/epoch_{:07}.ckpt", r.epoch);
            fs::create_dir_all(dir.join("checkpoints"))?;
            let mut w = BufWriter::new(File::create(dir.join(&name))?);
            model.write_checkpoint(&mut w, r.epoch)?;
            w.flush()?;
            written.push(name);
        }
        Ok(())
    }
}

fn execute(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    let setup = Setup::new(&cfg)?;
    let mut run = Run::create(&cli.out, cli.quiet)?;
    run.text("config.toml", &cfg.to_toml_string()?)?;
    let started = Instant::now();

    let command = match &cli.command {
        Command::GenExcitation => {
            let mut w = run.writer("excitation.csv")?;
            writeln!(w, "t_s,v_m_per_s")?;
            for (t, v) in setup.excitation.times().zip(setup.excitation.samples()) {
                writeln!(w, "{t:e},{v:e}")?;
            }
            w.flush()?;
            "gen-excitation"
        }
        Command::FdmForward { x } => {
            let solution = setup.reference(&setup.truth)?;
            let probe = x.unwrap_or(setup.profile.length());
            let p = solution.pressure_at(probe)?;
            let u = solution.flow_at(probe)?;
            let mut w = run.writer("waveforms.csv")?;
            writeln!(w, "t_s,p_Pa,U_m3_per_s")?;
            for ((t, p), u) in solution.times().zip(&p).zip(&u) {
                writeln!(w, "{t:e},{p:e},{u:e}")?;
            }
            w.flush()?;
            let mut w = run.writer("fields.bin")?;
            solution.write_field_dump(&mut w)?;
            w.flush()?;
            let outlet = solution.outlet_pressure();
            run.json(
                "summary.json",
                &FdmSummary {
                    nodes: solution.grid.nodes(),
                    dx: solution.grid.dx,
                    dt: solution.grid.dt,
                    steps_per_period: solution.grid.steps_per_period,
                    cfl: solution.grid.cfl(cfg.constants.c),
                    periods: solution.periods,
                    residual: solution.residual,
                    converged: solution.converged,
                    probe_x: probe,
                    outlet_pressure_max: outlet.iter().fold(0.0f64, |m, v| m.max(v.abs())),
                },
            )?;
            "fdm-forward"
        }
        Command::PinnForward { .. } => {
            let reference = match &cfg.paths.reference {
                Some(dir) => {
                    let path = dir.join("fields.bin");
                    let file = File::open(&path)
                        .map_err(|e| Error::Config(format!("cannot open reference {}: {e}", path.display())))?;
                    let dump = FieldDump::read(std::io::BufReader::new(file))?;
                    if (dump.period() - setup.period()).abs() > 1e-9 * setup.period()
                        || (dump.length() - setup.profile.length()).abs() > 1e-9 * setup.profile.length()
                    {
                        return Err(Error::Config("reference run has a different period or tube length".into()));
                    }
                    Some((dir.display().to_string(), dump))
                }
                None => None,
            };
            let mut written = Vec::new();
            let outcome = {
                let mut obs = training_observer(&run.dir, cfg.training.checkpoint_interval, cli.quiet, &mut written);
                experiment::run_forward(&cfg, &setup, &mut obs)?
            };
            run.files.extend(written);
            write_log(&mut run, "training_log.csv", &outcome.history, &setup.truth)?;
            write_checkpoint(&mut run, "model.ckpt", &outcome.model, outcome.history.len())?;

            let times = match &reference {
                Some((_, dump)) => dump.times(),
                None => {
                    let grid = Grid::new(&cfg.fdm, setup.profile.length(), setup.period())?;
                    (0..grid.steps_per_period).map(|j| j as f64 * grid.dt).collect()
                }
            };
            let predicted = outlet_prediction(&outcome.model, &times)?;
            let reference_p = reference.as_ref().map(|(_, d)| d.outlet_pressure());
            let mut w = run.writer("outlet_pressure.csv")?;
            match &reference_p {
                Some(r) => {
                    writeln!(w, "t_s,p_pinn_Pa,p_fdm_Pa")?;
                    for ((t, p), q) in times.iter().zip(&predicted).zip(r) {
                        writeln!(w, "{t:e},{p:e},{q:e}")?;
                    }
                }
                None => {
                    writeln!(w, "t_s,p_pinn_Pa")?;
                    for (t, p) in times.iter().zip(&predicted) {
                        writeln!(w, "{t:e},{p:e}")?;
                    }
                }
            }
            w.flush()?;
            let comparison = reference.as_ref().zip(reference_p.as_ref()).map(|((dir, _), r)| Comparison {
                reference: dir.clone(),
                outlet_relative_l2: relative_l2(&predicted, r),
            });
            if let Some(c) = &comparison {
                run.progress(format!("outlet pressure relative L2 error {:.4}", c.outlet_relative_l2));
            }
            run.json(
                "summary.json",
                &ForwardSummary {
                    epochs: outcome.history.len(),
                    final_loss: outcome.final_loss,
                    comparison,
                },
            )?;
            "pinn-forward"
        }
        Command::Identify { .. } => {
            run.progress("generating the finite-difference target");
            let reference = setup.reference(&setup.truth)?;
            let measured = experiment::measurement(&cfg, &reference)?;
            let mut w = run.writer("measurement.csv")?;
            writeln!(w, "t_s,p_clean_Pa,p_measured_Pa")?;
            for ((t, c), m) in reference.times().zip(reference.outlet_pressure()).zip(measured.samples()) {
                writeln!(w, "{t:e},{c:e},{m:e}")?;
            }
            w.flush()?;
            let mut written = Vec::new();
            let (result, model) = {
                let mut obs = training_observer(&run.dir, cfg.training.checkpoint_interval, cli.quiet, &mut written);
                experiment::run_identification(&cfg, &setup, &reference, &mut obs)?
            };
            run.files.extend(written);
            write_log(&mut run, "training_log.csv", &result.history, &setup.truth)?;
            let mut w = run.writer("error_history.csv")?;
            result.write_error_history(&mut w)?;
            w.flush()?;
            write_checkpoint(&mut run, "model.ckpt", &model, result.epochs)?;
            run.json("identification.json", &result)?;
            run.progress(format!(
                "gc {:.4e} ({:+.2}%)  rc {:.4e} ({:+.2}%)",
                result.gc, result.gc_error_percent, result.rc, result.rc_error_percent
            ));
            "identify"
        }
        Command::Sensitivity => {
            let report = sensitivity_study(
                &cfg.fdm,
                &setup.profile,
                &setup.consts,
                &setup.truth,
                &setup.excitation,
                cfg.sensitivity.factor,
            )?;
            let grid = Grid::new(&cfg.fdm, setup.profile.length(), setup.period())?;
            let mut w = run.writer("sensitivity.csv")?;
            writeln!(w, "t_s,p_baseline_Pa,p_scaled_gc_Pa,p_scaled_rc_Pa")?;
            for j in 0..report.baseline.len() {
                writeln!(
                    w,
                    "{:e},{:e},{:e},{:e}",
                    j as f64 * grid.dt,
                    report.baseline[j],
                    report.double_gc[j],
                    report.double_rc[j]
                )?;
            }
            w.flush()?;
            run.json(
                "sensitivity.json",
                &SensitivitySummary {
                    factor: cfg.sensitivity.factor,
                    deviation_gc: report.deviation_gc,
                    deviation_rc: report.deviation_rc,
                    ratio: report.ratio,
                },
            )?;
            run.progress(format!("deviation ratio {:.2}", report.ratio));
            "sensitivity"
        }
        Command::Gradcheck => {
            let summary = gradcheck::run(&cfg, &setup)?;
            run.json("gradcheck.json", &summary)?;
            for c in &summary.checks {
                run.progress(format!(
                    "{:18} max relative error {:.2e}  {}",
                    c.name,
                    c.max_relative_error,
                    if c.passed { "ok" } else { "FAILED" }
                ));
            }
            if !summary.passed {
                run.finish("gradcheck", cfg.seed)?;
                return Err(Error::Instability("gradient check failed".into()));
            }
            "gradcheck"
        }
    };
    run.progress(format!("{command} finished in {:.1} s", started.elapsed().as_secs_f64()));
    run.finish(command, cfg.seed)
}

#[derive(Serialize)]
struct ErrorReport<'a> {
    error: &'a str,
    message: String,
    exit_code: i32,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e.exit_code();
            if cli.error_json {
                let report = ErrorReport {
                    error: e.kind(),
                    message: e.to_string(),
                    exit_code: code,
                };
                eprintln!("{}", serde_json::to_string(&report).unwrap_or_default());
            } else {
                eprintln!("error: {e}");
            }
            ExitCode::from(code as u8)
        }
    }
}
