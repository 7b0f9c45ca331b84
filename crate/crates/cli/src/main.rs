//! Batch driver: simulate, reconstruct and probe pseudo-chains from JSON specs.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use pseudochain::dynamics::{
    correlator_series_pair, end_pair_moments, mixed_correlators, return_probability, survival_amplitude, TimeSeries,
};
use pseudochain::hilbert::{Pauli, RationalGauge};
use pseudochain::inference::{iterate_structure, two_excitation_value, InferenceOptions, InferenceReport, DEFAULT_SIZE_BOUND};
use pseudochain::scalar::Scalar;
use pseudochain::tomography::{run_tomography, TomographyOptions};
use pseudochain::traps::{find_discrimination_time, flush_protocol, TrapScenario};
use pseudochain::{BlackBoxChain, Error, ExactPseudoChain, Mode, PseudoChain};

#[derive(Parser)]
#[command(name = "pseudochain", version, about = "Simulate and infer xx spin pseudo-chains")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time series of survival amplitude, return probability and correlators (CSV).
    Simulate(Flags),
    /// Model chain reconstructed from the survival amplitude (JSON).
    Tomography(Flags),
    /// Block structure inferred from end-site queries (JSON).
    Infer(Flags),
    /// Trap flush protocol: outcome and posterior per round (CSV).
    Flush(Flags),
    /// Exact rational series coefficients and moments (JSON).
    Oracle(Flags),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ModeArg {
    Exact,
    Sampled,
}

/// Every option may also come from the run file given by `--config`;
/// flags win on conflict.
#[derive(Args, Debug, Default, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct Flags {
    /// JSON run file with any of the options below.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Chain spec: {"blocks":[{"n":..,"B":..,"K":..}],"J":[..]}, optionally with a "trap" object.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long)]
    shots: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output file; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    tmax: Option<f64>,
    #[arg(long)]
    points: Option<usize>,
    #[arg(long)]
    order: Option<usize>,
    #[arg(long)]
    size_bound: Option<usize>,
    /// Flush rounds.
    #[arg(long)]
    rounds: Option<usize>,
    /// Zero-based index of the trap block.
    #[arg(long)]
    block: Option<usize>,
    /// Prior probability that the trap holds an excitation.
    #[arg(long)]
    occupancy: Option<f64>,
    /// Whether the hidden trap is actually occupied.
    #[arg(long)]
    occupied: Option<bool>,
    /// Upper bound on the trapped-branch transfer probability at t*.
    #[arg(long)]
    eps: Option<f64>,
    /// Lower bound on the untrapped-branch transfer probability at t*.
    #[arg(long)]
    theta: Option<f64>,
}

impl Flags {
    fn or(self, file: Flags) -> Flags {
        Flags {
            config: self.config,
            spec: self.spec.or(file.spec),
            mode: self.mode.or(file.mode),
            shots: self.shots.or(file.shots),
            seed: self.seed.or(file.seed),
            out: self.out.or(file.out),
            tmax: self.tmax.or(file.tmax),
            points: self.points.or(file.points),
            order: self.order.or(file.order),
            size_bound: self.size_bound.or(file.size_bound),
            rounds: self.rounds.or(file.rounds),
            block: self.block.or(file.block),
            occupancy: self.occupancy.or(file.occupancy),
            occupied: self.occupied.or(file.occupied),
            eps: self.eps.or(file.eps),
            theta: self.theta.or(file.theta),
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrapFields {
    block: Option<usize>,
    occupancy: Option<f64>,
    occupied: Option<bool>,
    rounds: Option<usize>,
    eps: Option<f64>,
    theta: Option<f64>,
    /// Random dark state from this seed; the first Helmert state otherwise.
    dark_seed: Option<u64>,
}

#[derive(Debug, Deserialize)]
struct SpecFile {
    #[serde(flatten)]
    chain: PseudoChain,
    #[serde(default)]
    trap: Option<TrapFields>,
}

#[derive(Debug, Clone, Serialize)]
struct TrapConfig {
    block: usize,
    occupancy: f64,
    occupied: bool,
    rounds: usize,
    eps: f64,
    theta: f64,
    dark_seed: Option<u64>,
}

/// Fully resolved run; its JSON form (without paths) is hashed.
#[derive(Debug, Clone, Serialize)]
struct RunConfig {
    command: &'static str,
    spec: PseudoChain,
    mode: Mode,
    tmax: f64,
    points: usize,
    order: usize,
    size_bound: usize,
    trap: Option<TrapConfig>,
    #[serde(skip)]
    out: Option<PathBuf>,
}

impl RunConfig {
    fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        Sha256::digest(&json).iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

enum Failure {
    Validation(String),
    Cap(String),
    Numerical(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 2,
            Failure::Cap(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Validation(m) | Failure::Cap(m) | Failure::Numerical(m) => m,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let m = e.to_string();
        match e {
            Error::CapExceeded { .. } => Failure::Cap(m),
            Error::EndBlockNotSingleton { .. }
            | Error::LengthMismatch { .. }
            | Error::NonFiniteParameter(_)
            | Error::OutOfRange(_)
            | Error::DimensionMismatch { .. }
            | Error::NotABlock(_)
            | Error::InvalidArgument(_)
            | Error::ModeUnsupported(_) => Failure::Validation(m),
            _ => Failure::Numerical(m),
        }
    }
}

type Outcome<T> = std::result::Result<T, Failure>;

fn invalid(m: impl Into<String>) -> Failure {
    Failure::Validation(m.into())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path, what: &str) -> Outcome<T> {
    let text = std::fs::read_to_string(path).map_err(|e| invalid(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("cannot parse {what} {}: {e}", path.display())))
}

fn resolve(command: &'static str, flags: Flags) -> Outcome<RunConfig> {
    let flags = match &flags.config {
        Some(path) => {
            let file: Flags = read_json(path, "run file")?;
            flags.or(file)
        }
        None => flags,
    };
    let spec_path = flags.spec.clone().ok_or_else(|| invalid("--spec is required"))?;
    let spec_file: SpecFile = read_json(&spec_path, "spec")?;
    let spec = spec_file.chain;
    // a single spin is a valid register for tomography only
    if command == "tomography" {
        spec.validate_structure()?;
    } else {
        spec.validate()?;
    }

    let mode = match flags.mode.unwrap_or(ModeArg::Exact) {
        ModeArg::Exact => Mode::Exact,
        ModeArg::Sampled => Mode::Sampled { shots: flags.shots.unwrap_or(1_000_000), seed: flags.seed.unwrap_or(0) },
    };
    if let Mode::Sampled { shots: 0, .. } = mode {
        return Err(invalid("--shots must be positive"));
    }
    let tmax = flags.tmax.unwrap_or(if command == "flush" { 30.0 } else { 10.0 });
    if !(tmax.is_finite() && tmax > 0.0) {
        return Err(invalid(format!("--tmax must be positive and finite, got {tmax}")));
    }
    let points = flags.points.unwrap_or(201);
    if points < 2 {
        return Err(invalid("--points must be at least 2"));
    }
    let order = flags.order.unwrap_or(12);
    let size_bound = flags.size_bound.unwrap_or(DEFAULT_SIZE_BOUND);

    let trap = if command == "flush" {
        let t = spec_file.trap.unwrap_or_default();
        let default_block = spec.first_oversized_block();
        let block = flags.block.or(t.block).or(default_block).ok_or_else(|| invalid("no trap block: the chain has no block"))?;
        let trap = TrapConfig {
            block,
            occupancy: flags.occupancy.or(t.occupancy).unwrap_or(0.5),
            occupied: flags.occupied.or(t.occupied).unwrap_or(false),
            rounds: flags.rounds.or(t.rounds).unwrap_or(20),
            eps: flags.eps.or(t.eps).unwrap_or(1e-3),
            theta: flags.theta.or(t.theta).unwrap_or(0.2),
            dark_seed: t.dark_seed,
        };
        if !(0.0..=1.0).contains(&trap.occupancy) {
            return Err(invalid(format!("occupancy must lie in [0, 1], got {}", trap.occupancy)));
        }
        Some(trap)
    } else {
        None
    };
    Ok(RunConfig { command, spec, mode, tmax, points, order, size_bound, trap, out: flags.out })
}

fn grid(cfg: &RunConfig) -> Vec<f64> {
    let n = cfg.points - 1;
    (0..=n).map(|k| cfg.tmax * k as f64 / n as f64).collect()
}

fn simulate(cfg: &RunConfig) -> Outcome<String> {
    let times = grid(cfg);
    let model = cfg.spec.effective_model()?;
    let (f, p, gx, gy) = match cfg.mode {
        Mode::Exact => {
            let (gx, gy) = mixed_correlators(&cfg.spec, &times)?;
            (survival_amplitude(&cfg.spec, &times)?, return_probability(&cfg.spec, &times)?, gx, gy)
        }
        Mode::Sampled { .. } => {
            let mut bb = BlackBoxChain::new(cfg.spec.clone(), cfg.mode)?;
            (
                bb.query_survival(&times)?,
                bb.query_two_excitation_return(&times)?,
                bb.query_mixed_correlator(Pauli::X, &times)?,
                bb.query_mixed_correlator(Pauli::Y, &times)?,
            )
        }
    };
    let mf: TimeSeries<Complex64> = survival_amplitude(&model, &times)?;
    let mp = return_probability(&model, &times)?;
    let (mgx, mgy) = mixed_correlators(&model, &times)?;
    let mut s = format!("# config_hash={}\n", cfg.hash());
    s.push_str("t,survival_re,survival_im,model_survival_re,model_survival_im,return_probability,model_return_probability,g_x,g_y,model_g_x,model_g_y\n");
    for k in 0..times.len() {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{}",
            times[k],
            f.values[k].re,
            f.values[k].im,
            mf.values[k].re,
            mf.values[k].im,
            p.values[k],
            mp.values[k],
            gx.values[k],
            gy.values[k],
            mgx.values[k],
            mgy.values[k]
        );
    }
    Ok(s)
}

#[derive(Serialize)]
struct Hashed<'a, T: Serialize> {
    config_hash: String,
    #[serde(flatten)]
    body: &'a T,
}

fn hashed_json<T: Serialize>(cfg: &RunConfig, body: &T) -> String {
    let mut s = serde_json::to_string_pretty(&Hashed { config_hash: cfg.hash(), body }).expect("report serializes");
    s.push('\n');
    s
}

fn tomography(cfg: &RunConfig) -> Outcome<String> {
    let mut bb = BlackBoxChain::new(cfg.spec.clone(), cfg.mode)?;
    let report = run_tomography(&mut bb, &TomographyOptions::for_mode(cfg.mode))?;
    Ok(hashed_json(cfg, &report))
}

fn summary(report: &InferenceReport) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "status: {:?}", report.status);
    let _ = writeln!(s, "{:>5} {:>4} {:>12} {:>12} {:>12}", "block", "n", "B", "K", "J_right");
    for (b, block) in report.estimate.blocks.iter().enumerate() {
        let j = report.estimate.inter_couplings.get(b).map_or(String::from("-"), |j| format!("{j:.6}"));
        let _ = writeln!(s, "{b:>5} {:>4} {:>12.6} {:>12.6} {j:>12}", block.size, block.field, block.intra_coupling);
    }
    if let Some(v) = &report.verification {
        let _ = writeln!(
            s,
            "two-excitation check: measured {:.6e} +- {:.1e}, predicted {:.6e}, confirmed {}",
            v.measured_difference, v.uncertainty, v.predicted_difference, v.confirmed
        );
    }
    for note in &report.notes {
        let _ = writeln!(s, "note: {note}");
    }
    s
}

fn infer(cfg: &RunConfig) -> Outcome<(String, String)> {
    let mut bb = BlackBoxChain::new(cfg.spec.clone(), cfg.mode)?;
    let report = iterate_structure(&mut bb, &InferenceOptions::for_mode(cfg.mode, cfg.size_bound))?;
    Ok((hashed_json(cfg, &report), summary(&report)))
}

fn flush(cfg: &RunConfig) -> Outcome<String> {
    let trap = cfg.trap.as_ref().expect("flush config has trap fields");
    let scenario = match trap.dark_seed {
        Some(seed) => TrapScenario::random_dark(cfg.spec.clone(), trap.block, trap.occupancy, seed)?,
        None => TrapScenario::first_dark(cfg.spec.clone(), trap.block, trap.occupancy)?,
    };
    let d = find_discrimination_time(&scenario, (0.0, cfg.tmax), trap.eps, trap.theta)?.ok_or_else(|| {
        Failure::Numerical(format!(
            "no time in [0, {}] with trapped transfer <= {} and untrapped transfer >= {}",
            cfg.tmax, trap.eps, trap.theta
        ))
    })?;
    let seed = match cfg.mode {
        Mode::Exact => 0,
        Mode::Sampled { seed, .. } => seed,
    };
    let mut bb = BlackBoxChain::new(cfg.spec.clone(), cfg.mode)?.with_measurement_seed(seed);
    let report = flush_protocol(&mut bb, &scenario, trap.occupied, d, trap.rounds, trap.eps)?;
    let mut s = format!("# config_hash={}\n", cfg.hash());
    let _ = writeln!(s, "# t_star={},p_trapped={},p_untrapped={}", d.time, d.p_trapped, d.p_untrapped);
    s.push_str(&report.to_csv());
    Ok(s)
}

#[derive(Serialize)]
struct SeriesDump {
    pseudo: Vec<String>,
    model: Vec<String>,
    difference: Vec<String>,
}

impl SeriesDump {
    fn new<T: Scalar + std::fmt::Display>(pseudo: &[T], model: &[T]) -> Self {
        Self {
            pseudo: pseudo.iter().map(ToString::to_string).collect(),
            model: model.iter().map(ToString::to_string).collect(),
            difference: pseudo.iter().zip(model).map(|(a, b)| (a.clone() - b.clone()).to_string()).collect(),
        }
    }
}

#[derive(Serialize)]
struct OracleDump {
    order: usize,
    sizes: Vec<usize>,
    #[serde(rename = "J")]
    couplings: Vec<String>,
    #[serde(rename = "B_eff")]
    effective_fields: Vec<String>,
    g_x: SeriesDump,
    g_y: SeriesDump,
    return_moments: SeriesDump,
    /// Table value of the order `2N - 2` return-moment difference.
    two_excitation_value: String,
}

fn oracle(cfg: &RunConfig) -> Outcome<String> {
    let exact: ExactPseudoChain = cfg.spec.map(|x| Scalar::from_f64(*x).expect("validated finite"));
    let model = exact.effective_model()?;
    let (px, py) = correlator_series_pair(&RationalGauge(&exact), cfg.order)?;
    let (mx, my) = correlator_series_pair(&model, cfg.order)?;
    let pm = end_pair_moments(&RationalGauge(&exact), cfg.order)?;
    let mm = end_pair_moments(&model, cfg.order)?;
    let dump = OracleDump {
        order: cfg.order,
        sizes: exact.sizes(),
        couplings: model.couplings.iter().map(ToString::to_string).collect(),
        effective_fields: model.effective_fields.iter().map(ToString::to_string).collect(),
        g_x: SeriesDump::new(&px.coefficients, &mx.coefficients),
        g_y: SeriesDump::new(&py.coefficients, &my.coefficients),
        return_moments: SeriesDump::new(&pm, &mm),
        two_excitation_value: two_excitation_value(&model.couplings, &exact.sizes()).to_string(),
    };
    Ok(hashed_json(cfg, &dump))
}

fn run(command: Command) -> Outcome<()> {
    let (name, flags) = match command {
        Command::Simulate(f) => ("simulate", f),
        Command::Tomography(f) => ("tomography", f),
        Command::Infer(f) => ("infer", f),
        Command::Flush(f) => ("flush", f),
        Command::Oracle(f) => ("oracle", f),
    };
    let cfg = resolve(name, flags)?;
    let (output, table) = match name {
        "simulate" => (simulate(&cfg)?, None),
        "tomography" => (tomography(&cfg)?, None),
        "infer" => {
            let (json, table) = infer(&cfg)?;
            (json, Some(table))
        }
        "flush" => (flush(&cfg)?, None),
        _ => (oracle(&cfg)?, None),
    };
    // everything is computed before the output file is touched
    match &cfg.out {
        Some(path) => {
            std::fs::write(path, output).map_err(|e| invalid(format!("cannot write {}: {e}", path.display())))?;
            if let Some(table) = table {
                print!("{table}");
            }
        }
        None => {
            print!("{output}");
            if let Some(table) = table {
                eprint!("{table}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
