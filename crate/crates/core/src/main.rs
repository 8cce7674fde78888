use std::io::Write;
use std::ops::Range;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rpp_pam::allocation::{
    allocate, evaluate_properties, BalancePriceRule, CoreCheckMode, PamConfig, PayoffAllocation,
    DEFAULT_EXHAUSTIVE_LIMIT, DEFAULT_SAMPLED_DRAWS,
};
use rpp_pam::contracts::{critical_quantile, optimal_contract, Bounds, GenerationDistribution};
use rpp_pam::equilibrium::{best_response_set, solve_competitive_equilibrium, ProductionFunction};
use rpp_pam::market::{approx_eq, PriceTriple};
use rpp_pam::simulator::io::{
    load_contracts, load_payoffs, load_prices, load_snapshot, load_timeseries, write_allocation,
    write_timeseries,
};
use rpp_pam::simulator::synthetic::{generate, SyntheticSpec};
use rpp_pam::simulator::{
    emit_report, run_simulation, ContractMode, PriceSource, SimulationConfig,
};
use rpp_pam::Error;

const EXIT_INPUT: u8 = 1;
const EXIT_VIOLATION: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "rpp-pam",
    version,
    about = "Ex-post stable payoff allocation for renewable aggregators"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the hourly two-settlement simulation and write CSV reports.
    Simulate(SimulateArgs),
    /// Allocate one hour's aggregator payoff from a snapshot CSV.
    Allocate {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value = "midpoint")]
        pstar: BalancePriceRule,
    },
    /// Audit a payoff vector against the five ex-post properties.
    CheckCore {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long)]
        payoffs: PathBuf,
        /// Random coalitions drawn when the economy is too large to enumerate.
        #[arg(long, default_value_t = DEFAULT_SAMPLED_DRAWS)]
        draws: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Competitive equilibrium of one hour and its agreement with the allocation.
    Equilibrium {
        #[arg(long)]
        snapshot: PathBuf,
        #[arg(long, default_value = "midpoint")]
        pstar: BalancePriceRule,
    },
    /// News-vendor optimal day-ahead contract for a normal generation model.
    Contract(ContractArgs),
    /// Write a synthetic generation CSV.
    Synth {
        #[arg(long, default_value_t = 10)]
        producers: usize,
        #[arg(long, default_value_t = 1416)]
        hours: usize,
        #[arg(long, default_value_t = 2004)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct PriceArgs {
    /// Per-hour price CSV (`hour,p_f,p_rb,p_rs`).
    #[arg(long, conflicts_with_all = ["pf", "prb", "prs"])]
    prices: Option<PathBuf>,
    #[arg(long, allow_hyphen_values = true)]
    pf: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    prb: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    prs: Option<f64>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    prices: PriceArgs,
    /// Training hours as `start..end` positions on the hour axis.
    #[arg(long, value_parser = parse_range)]
    train: Range<usize>,
    /// Simulated hours as `start..end` positions on the hour axis.
    #[arg(long, value_parser = parse_range)]
    sim: Range<usize>,
    #[arg(long, default_value = "midpoint")]
    pstar: BalancePriceRule,
    #[arg(long)]
    check_core: bool,
    #[arg(long, default_value_t = DEFAULT_EXHAUSTIVE_LIMIT)]
    exhaustive_limit: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Contract CSV (`hour,producer_id,contract_mwh`) instead of news-vendor contracts.
    #[arg(long, conflicts_with = "fixed_contract")]
    contracts: Option<PathBuf>,
    /// Same contract for every producer and hour.
    #[arg(long)]
    fixed_contract: Option<f64>,
    /// Capacity cap of every producer's generation model.
    #[arg(long)]
    capacity: Option<f64>,
    /// Use plain normals, allowing negative generation in the model.
    #[arg(long)]
    no_truncate: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ContractArgs {
    #[arg(long, allow_hyphen_values = true)]
    mean: f64,
    #[arg(long)]
    std: f64,
    #[arg(long, allow_hyphen_values = true)]
    pf: f64,
    #[arg(long, allow_hyphen_values = true)]
    prb: f64,
    #[arg(long, allow_hyphen_values = true)]
    prs: f64,
    /// Capacity; required when the day-ahead price is at or above the buy price.
    #[arg(long)]
    upper: Option<f64>,
    #[arg(long)]
    no_truncate: bool,
}

fn parse_range(s: &str) -> Result<Range<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected start..end, got {s:?}"))?;
    let start = a
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("{a:?}: {e}"))?;
    let end = b
        .trim()
        .parse::<usize>()
        .map_err(|e| format!("{b:?}: {e}"))?;
    if start > end {
        return Err(format!("empty range {s:?}"));
    }
    Ok(start..end)
}

enum Failure {
    Input(Error),
    Violation(String),
    Internal(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Input(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Internal(e.to_string())
    }
}

fn price_source(args: &PriceArgs) -> Result<PriceSource, Failure> {
    if let Some(path) = &args.prices {
        return Ok(PriceSource::PerHour(load_prices(path)?));
    }
    match (args.pf, args.prb, args.prs) {
        (Some(f), Some(b), Some(s)) => Ok(PriceSource::Constant(PriceTriple::new(f, b, s)?)),
        _ => Err(Failure::Input(Error::Config(
            "give --prices <file> or all of --pf, --prb, --prs".into(),
        ))),
    }
}

fn simulate(args: SimulateArgs) -> Result<(), Failure> {
    let data = load_timeseries(&args.data)?;
    let mut config = SimulationConfig::new(price_source(&args.prices)?, args.train, args.sim);
    config.pam = PamConfig::with_rule(args.pstar);
    config.check_core = args.check_core;
    config.exhaustive_limit = args.exhaustive_limit;
    config.rng_seed = args.seed;
    config.truncate = !args.no_truncate;
    config.capacity = args.capacity;
    if let Some(path) = &args.contracts {
        config.contract_mode = ContractMode::FromFile(load_contracts(path)?);
    } else if let Some(c) = args.fixed_contract {
        config.contract_mode = ContractMode::Fixed(c);
    }

    let report = run_simulation(&config, &data)?;
    let written = emit_report(&report, &args.out).map_err(|e| match e {
        Error::Io(io) => Failure::Internal(io.to_string()),
        other => Failure::Internal(other.to_string()),
    })?;

    let mut out = std::io::stdout().lock();
    writeln!(out, "hours simulated: {}", report.records.len())?;
    writeln!(out, "hours skipped: {}", report.skipped_hours.len())?;
    writeln!(
        out,
        "total payoff proposed: {}",
        report.grand_total_proposed
    )?;
    writeln!(
        out,
        "total payoff separate: {}",
        report.grand_total_separate
    )?;
    writeln!(out, "total excess profit: {}", report.total_excess_profit)?;
    writeln!(out, "property violations: {}", report.violations.total())?;
    for path in &written {
        writeln!(out, "wrote {}", path.display())?;
    }
    if report.violations.total() > 0 {
        return Err(Failure::Violation(format!(
            "{} property violations",
            report.violations.total()
        )));
    }
    Ok(())
}

fn allocate_cmd(snapshot: PathBuf, pstar: BalancePriceRule) -> Result<(), Failure> {
    let snapshot = load_snapshot(&snapshot)?;
    let alloc = allocate(&snapshot, &PamConfig::with_rule(pstar))?;
    write_allocation(&snapshot, &alloc, std::io::stdout().lock())?;
    Ok(())
}

fn check_core_cmd(
    snapshot: PathBuf,
    payoffs: PathBuf,
    draws: usize,
    seed: u64,
) -> Result<(), Failure> {
    let snapshot = load_snapshot(&snapshot)?;
    let payoffs = load_payoffs(&payoffs, &snapshot)?;
    let alloc = PayoffAllocation::external(&snapshot, payoffs);
    let mode = CoreCheckMode::Auto {
        limit: DEFAULT_EXHAUSTIVE_LIMIT,
        draws,
        seed,
    };
    let report = evaluate_properties(&alloc, &snapshot, mode)?;
    let mut out = std::io::stdout().lock();
    let verdict = |b: bool| if b { "pass" } else { "FAIL" };
    writeln!(
        out,
        "budget_balance: {} (residual {})",
        verdict(report.budget_balance.passed),
        report.budget_balance.residual
    )?;
    let ir = &report.individual_rationality;
    let worst = ir
        .worst_index
        .map_or_else(|| "-".to_string(), |i| snapshot.producer_ids()[i].clone());
    writeln!(
        out,
        "individual_rationality: {} (worst margin {} at producer {worst})",
        verdict(ir.passed),
        ir.worst_margin
    )?;
    writeln!(out, "fairness: {}", verdict(report.fairness.passed))?;
    writeln!(
        out,
        "no_exploitation: {}",
        verdict(report.no_exploitation.passed)
    )?;
    if let Some(core) = &report.in_core {
        let members: Vec<&str> = core
            .worst_coalition
            .members()
            .iter()
            .map(|&i| snapshot.producer_ids()[i].as_str())
            .collect();
        writeln!(
            out,
            "in_core: {} ({} {} coalitions, max violation {} by {{{}}})",
            verdict(core.passed),
            if core.exhaustive { "all" } else { "sampled" },
            core.coalitions_checked,
            core.max_violation,
            members.join(",")
        )?;
    }
    if report.all_passed() {
        Ok(())
    } else {
        Err(Failure::Violation(
            "payoffs violate an ex-post property".into(),
        ))
    }
}

fn equilibrium_cmd(snapshot: PathBuf, pstar: BalancePriceRule) -> Result<(), Failure> {
    let snapshot = load_snapshot(&snapshot)?;
    let config = PamConfig::with_rule(pstar);
    let ce = solve_competitive_equilibrium(&snapshot, &config)?;
    let alloc = allocate(&snapshot, &config)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "case: {:?}", ce.case)?;
    writeln!(out, "price: {}", ce.price)?;
    writeln!(
        out,
        "producer_id,contract_mwh,actual_mwh,z,payoff_equilibrium,payoff_allocation,best_response"
    )?;
    let mut matches = true;
    for i in 0..snapshot.len() {
        let z = ce.redistribution.quantities[i];
        let f = ProductionFunction::new(snapshot.contracts()[i], *snapshot.prices());
        let in_br = best_response_set(&f, ce.price).contains(z);
        matches &= approx_eq(ce.payoffs[i], alloc.payoffs[i]) && in_br;
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            snapshot.producer_ids()[i],
            snapshot.contracts()[i],
            snapshot.realizations()[i],
            z,
            ce.payoffs[i],
            alloc.payoffs[i],
            in_br
        )?;
    }
    let cleared = approx_eq(ce.redistribution.total(), snapshot.total_realization());
    writeln!(out, "market_clears: {cleared}")?;
    writeln!(out, "matches_allocation: {matches}")?;
    if matches && cleared {
        Ok(())
    } else {
        Err(Failure::Internal(
            "equilibrium disagrees with the allocation".into(),
        ))
    }
}

fn contract_cmd(args: ContractArgs) -> Result<(), Failure> {
    let prices = PriceTriple::new(args.pf, args.prb, args.prs)?;
    let bounds = Bounds {
        lower: if args.no_truncate {
            f64::NEG_INFINITY
        } else {
            0.0
        },
        upper: args.upper,
    };
    let dist = GenerationDistribution::new(args.mean, args.std, bounds)?;
    let contract = optimal_contract(&dist, &prices)?;
    let mut out = std::io::stdout().lock();
    writeln!(out, "critical_quantile: {}", critical_quantile(&prices))?;
    writeln!(out, "contract_mwh: {contract}")?;
    Ok(())
}

fn synth_cmd(producers: usize, hours: usize, seed: u64, out: PathBuf) -> Result<(), Failure> {
    let data = generate(&SyntheticSpec::new(producers, hours, seed));
    let file = std::fs::File::create(&out)?;
    write_timeseries(&data, file).map_err(|e| Failure::Internal(e.to_string()))?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => simulate(args),
        Command::Allocate { snapshot, pstar } => allocate_cmd(snapshot, pstar),
        Command::CheckCore {
            snapshot,
            payoffs,
            draws,
            seed,
        } => check_core_cmd(snapshot, payoffs, draws, seed),
        Command::Equilibrium { snapshot, pstar } => equilibrium_cmd(snapshot, pstar),
        Command::Contract(args) => contract_cmd(args),
        Command::Synth {
            producers,
            hours,
            seed,
            out,
        } => synth_cmd(producers, hours, seed, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Input(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(EXIT_INPUT)
        }
        Err(Failure::Violation(msg)) => {
            eprintln!("violation: {msg}");
            ExitCode::from(EXIT_VIOLATION)
        }
        Err(Failure::Internal(msg)) => {
            eprintln!("internal error: {msg}");
            ExitCode::from(EXIT_INTERNAL)
        }
    }
}
