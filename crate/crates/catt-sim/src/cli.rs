//! Command-line front end: `scan`, `blacklist`, `alloc-sim`, `attack` and
//! `report`, with machine-readable JSON outputs wrapped in a run manifest.
//!
//! Exit codes: 0 success, 2 parse/IO error, 3 semantic mismatch (digests,
//! out-of-range inputs, invalid configurations).

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attack::{self, AttackError, AttackResult, ExploitConfig, HammerMode, ScanConfig};
use crate::bcatt::{self, Blacklist, MemoryMap};
use crate::dram::Mapper;
use crate::fault::{FaultError, VulnerabilityProfile};
use crate::gcatt::{self, AllocError, AllocRequest, Allocator, PartitionPolicy};
use crate::scenario::{self, DefenseKind, Scenario, ScenarioError};

pub const EXIT_OK: u8 = 0;
pub const EXIT_PARSE: u8 = 2;
pub const EXIT_SEMANTIC: u8 = 3;

#[derive(Debug)]
pub enum CliError {
    /// Unreadable or unparsable input (exit 2).
    Parse(String),
    /// Inputs parse but do not fit together (exit 3).
    Semantic(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Parse(_) => EXIT_PARSE,
            CliError::Semantic(_) => EXIT_SEMANTIC,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            CliError::Parse(m) | CliError::Semantic(m) => m,
        }
    }
}

impl From<ScenarioError> for CliError {
    fn from(e: ScenarioError) -> Self {
        match e {
            ScenarioError::Parse { .. } | ScenarioError::Io { .. } => {
                CliError::Parse(e.to_string())
            }
            ScenarioError::Fault(e @ (FaultError::Io(_) | FaultError::Parse(_))) => {
                CliError::Parse(e.to_string())
            }
            other => CliError::Semantic(other.to_string()),
        }
    }
}

impl From<crate::bcatt::BcattError> for CliError {
    fn from(e: crate::bcatt::BcattError) -> Self {
        ScenarioError::from(e).into()
    }
}

impl From<FaultError> for CliError {
    fn from(e: FaultError) -> Self {
        match e {
            FaultError::Io(_) | FaultError::Parse(_) => CliError::Parse(e.to_string()),
            other => CliError::Semantic(other.to_string()),
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        CliError::Semantic(e.to_string())
    }
}

impl From<AllocError> for CliError {
    fn from(e: AllocError) -> Self {
        CliError::Semantic(e.to_string())
    }
}

fn io_parse(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Parse(format!("{}: {e}", path.display()))
}

/// Reproducibility envelope attached to every result file. `created_unix`
/// is the only field excluded from determinism comparisons.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub geometry_digest: String,
    pub profile_digest: String,
    pub seed: u64,
    pub defense: String,
    pub created_unix: u64,
}

impl RunManifest {
    pub fn new(mapper: &Mapper, profile: &VulnerabilityProfile, seed: u64, defense: &str) -> Self {
        RunManifest {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            geometry_digest: mapper.digest(),
            profile_digest: profile.digest(),
            seed,
            defense: defense.to_string(),
            created_unix: SystemTime::now()
                .duration_since(UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScanOutput {
    pub manifest: RunManifest,
    pub victim_pfns: Vec<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AttackOutput {
    pub manifest: RunManifest,
    pub scenario: String,
    pub overhead_percent: String,
    pub result: AttackResult,
}

#[derive(Debug, Parser)]
#[command(
    name = "catt-sim",
    version,
    about = "Deterministic rowhammer fault and defense simulator"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Double-sided scan for vulnerable frames.
    Scan(ScanArgs),
    /// Turn a scan output into a blacklist and an extended memory map.
    Blacklist(BlacklistArgs),
    /// Random alloc/free workload with post-hoc allocator audits.
    AllocSim(AllocSimArgs),
    /// Run an exploit campaign described by a scenario file.
    Attack(AttackArgs),
    /// Merge attack result files into one comparison table.
    Report(ReportArgs),
    /// Regenerate the shipped scenario fixtures.
    #[command(hide = true)]
    GenScenarios(GenScenariosArgs),
}

#[derive(Debug, Args)]
pub struct ScanArgs {
    #[arg(long)]
    pub geometry: PathBuf,
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub defense: DefenseKind,
    #[arg(long, default_value_t = 1)]
    pub guard_rows: u64,
    #[arg(long, default_value_t = 1000)]
    pub hammer_count: u64,
    #[arg(long, default_value_t = 0xFF)]
    pub pattern: u8,
    #[arg(long, default_value_t = 1)]
    pub coverage_runs: u32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct BlacklistArgs {
    #[arg(long)]
    pub geometry: PathBuf,
    /// JSON produced by `scan`.
    #[arg(long)]
    pub scan_output: PathBuf,
    #[arg(long)]
    pub base_map: PathBuf,
    #[arg(long)]
    pub out_map: PathBuf,
}

#[derive(Debug, Args)]
pub struct AllocSimArgs {
    #[arg(long)]
    pub geometry: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    pub defense: DefenseKind,
    #[arg(long, default_value_t = 1)]
    pub guard_rows: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 10_000)]
    pub ops: u64,
    /// Write the allocation trace here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Override the scenario's campaign seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Hammer only one aggressor row per victim.
    #[arg(long, default_value_t = false)]
    pub single_sided: bool,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Attack result files.
    #[arg(required = true)]
    pub results: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenScenariosArgs {
    #[arg(long)]
    pub out: PathBuf,
}

/// Overhead column for the result table: B-CATT reports the blacklisted
/// fraction, G-CATT the guard-row fraction, `both` shows the two combined.
fn overhead_string(scenario: &Scenario, mapper: &Mapper) -> Result<String, CliError> {
    let bcatt_part = || -> Result<String, CliError> {
        let bl = bcatt::derive_blacklist(&scenario.profile, mapper)?;
        Ok(bcatt::overhead_report(&bl, mapper).percent_string())
    };
    let gcatt_part = || {
        gcatt::overhead_percent_string(gcatt::gcatt_overhead(
            &scenario.policy(),
            mapper.geometry().rows_per_bank,
        ))
    };
    Ok(match scenario.defense {
        DefenseKind::None => "0.0000%".to_string(),
        DefenseKind::Bcatt => bcatt_part()?,
        DefenseKind::GcattSplit | DefenseKind::GcattDynamic => gcatt_part(),
        DefenseKind::Both => format!("{}+{}", bcatt_part()?, gcatt_part()),
    })
}

const TABLE_HEADER: &str =
    "defense            flips  cross-domain  successes/attempts         overhead";

fn table_row(defense: &str, result: &AttackResult, overhead: &str) -> String {
    format!(
        "{:<16}{:>8}{:>14}{:>20}{:>17}",
        defense,
        result.flips_total,
        result.cross_domain_flips,
        format!("{}/{}", result.successes, result.attempts),
        overhead
    )
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("result serializes");
    fs::write(path, text + "\n").map_err(|e| io_parse(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_parse(path, e))?;
    serde_json::from_str(&text).map_err(|e| io_parse(path, e))
}

pub fn cmd_scan(args: &ScanArgs) -> Result<(), CliError> {
    let geometry = scenario::load_geometry(&args.geometry)?;
    let profile = crate::fault::load_profile(&args.profile)?;
    let scan_cfg = ScanConfig {
        hammer_count: args.hammer_count,
        pattern: args.pattern,
        coverage_runs: args.coverage_runs,
    };
    let scenario = Scenario {
        name: "scan".to_string(),
        geometry,
        profile,
        defense: args.defense,
        guard_rows: args.guard_rows,
        kernel_base: 1 << 20,
        split_row: None,
        blast_radius: 1,
        scan: scan_cfg,
        exploit: ExploitConfig {
            spray_fraction: 0.5,
            attempts: 1,
            seed: args.seed,
        },
    };
    let mapper = scenario.mapper()?;
    let mut machine = scenario.build_machine()?;
    let victim_pfns = attack::scan(&mut machine, &scan_cfg, args.seed)?;
    let output = ScanOutput {
        manifest: RunManifest::new(
            &mapper,
            &scenario.profile,
            args.seed,
            scenario.defense.as_str(),
        ),
        victim_pfns,
    };
    write_json(&output, &args.out)?;
    println!(
        "scan: {} victim frame(s), written to {}",
        output.victim_pfns.len(),
        args.out.display()
    );
    Ok(())
}

pub fn cmd_blacklist(args: &BlacklistArgs) -> Result<(), CliError> {
    let geometry = scenario::load_geometry(&args.geometry)?;
    let mapper = geometry.mapper().map_err(ScenarioError::from)?;
    let scan: ScanOutput = read_json(&args.scan_output)?;
    if scan.manifest.geometry_digest != mapper.digest() {
        return Err(CliError::Semantic(format!(
            "scan output was produced for geometry {}, not {}",
            scan.manifest.geometry_digest,
            mapper.digest()
        )));
    }
    let total = mapper.geometry().total_frames();
    if let Some(&pfn) = scan.victim_pfns.iter().find(|&&p| p >= total) {
        return Err(CliError::Semantic(format!(
            "victim pfn {pfn} outside geometry ({total} frames)"
        )));
    }
    let bl = Blacklist::new(scan.victim_pfns.iter().copied());
    let base = MemoryMap::load(&args.base_map).map_err(ScenarioError::from)?;
    let extended = bcatt::extend_map(&base, &bl, &mapper).map_err(ScenarioError::from)?;
    extended.store(&args.out_map).map_err(ScenarioError::from)?;
    let report = bcatt::overhead_report(&bl, &mapper);
    println!("blacklisted        total   overhead");
    println!(
        "{:>11}{:>13}{:>11}",
        report.blacklisted,
        report.total_frames,
        report.percent_string()
    );
    Ok(())
}

pub fn cmd_alloc_sim(args: &AllocSimArgs) -> Result<(), CliError> {
    let geometry = scenario::load_geometry(&args.geometry)?;
    let mapper = geometry.mapper().map_err(ScenarioError::from)?;
    let policy = match args.defense {
        DefenseKind::None | DefenseKind::Bcatt => PartitionPolicy::None,
        DefenseKind::GcattSplit | DefenseKind::Both => PartitionPolicy::KernelUserSplit {
            guard_rows: args.guard_rows,
            kernel_base: 1 << 20,
            split_row: None,
        },
        DefenseKind::GcattDynamic => PartitionPolicy::DynamicAdjacency {
            guard_rows: args.guard_rows,
        },
    };
    let avail =
        crate::bcatt::FrameAvailability::all_available(mapper.geometry().total_frames());
    let mut allocator = Allocator::init(&avail, mapper, policy.clone())?;
    if args.out.is_some() {
        allocator.enable_trace();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut live: Vec<u64> = Vec::new();
    let pid = 1;
    allocator.register_process(pid);
    let (mut allocs, mut frees, mut denials) = (0u64, 0u64, 0u64);
    for _ in 0..args.ops {
        let do_alloc = live.is_empty() || rng.gen_bool(0.55);
        if do_alloc {
            let order = rng.gen_range(0..=3);
            let req = match rng.gen_range(0..3) {
                0 => AllocRequest::kernel(order),
                1 => AllocRequest::user(order),
                _ => AllocRequest::process(order, pid),
            };
            match allocator.alloc(req) {
                Ok(block) => {
                    live.push(block.pfn);
                    allocs += 1;
                }
                Err(AllocError::OutOfMemory) => denials += 1,
                Err(e) => return Err(e.into()),
            }
        } else {
            let idx = rng.gen_range(0..live.len());
            let pfn = live.swap_remove(idx);
            allocator.free(pfn)?;
            frees += 1;
        }
    }
    allocator.audit_buddy().map_err(CliError::Semantic)?;
    allocator
        .audit_isolation(policy.guard_rows())
        .map_err(CliError::Semantic)?;
    if let Some(out) = &args.out {
        let trace = allocator.take_trace().join("\n");
        fs::write(out, trace + "\n").map_err(|e| io_parse(out, e))?;
    }
    println!(
        "alloc-sim: {} allocs, {} frees, {} denials over {} ops; audits passed",
        allocs, frees, denials, args.ops
    );
    Ok(())
}

pub fn run_attack(scenario: &Scenario, seed: u64, mode: HammerMode) -> Result<AttackOutput, CliError> {
    let mapper = scenario.mapper()?;
    let exploit = ExploitConfig {
        seed,
        ..scenario.exploit
    };
    let factory = || {
        scenario
            .build_machine()
            .map_err(|e| AttackError::InvalidConfig(e.to_string()))
    };
    let result = attack::run_campaign(factory, &exploit, scenario.scan.hammer_count, mode)?;
    Ok(AttackOutput {
        manifest: RunManifest::new(&mapper, &scenario.profile, seed, scenario.defense.as_str()),
        scenario: scenario.name.clone(),
        overhead_percent: overhead_string(scenario, &mapper)?,
        result,
    })
}

pub fn cmd_attack(args: &AttackArgs) -> Result<(), CliError> {
    let scenario = Scenario::load(&args.scenario)?;
    let seed = args.seed.unwrap_or(scenario.exploit.seed);
    let mode = if args.single_sided {
        HammerMode::SingleSided
    } else {
        HammerMode::DoubleSided
    };
    let output = run_attack(&scenario, seed, mode)?;
    write_json(&output, &args.out)?;
    println!("{TABLE_HEADER}");
    println!(
        "{}",
        table_row(
            &output.manifest.defense,
            &output.result,
            &output.overhead_percent
        )
    );
    Ok(())
}

pub fn cmd_report(args: &ReportArgs) -> Result<(), CliError> {
    let outputs: Vec<AttackOutput> = args
        .results
        .iter()
        .map(|p| read_json(p))
        .collect::<Result<_, _>>()?;
    let digest = &outputs[0].manifest.geometry_digest;
    if let Some(other) = outputs
        .iter()
        .find(|o| &o.manifest.geometry_digest != digest)
    {
        return Err(CliError::Semantic(format!(
            "mixed geometry digests: {} vs {}",
            digest, other.manifest.geometry_digest
        )));
    }
    println!("{TABLE_HEADER}");
    for output in &outputs {
        println!(
            "{}",
            table_row(
                &output.manifest.defense,
                &output.result,
                &output.overhead_percent
            )
        );
    }
    Ok(())
}

pub fn cmd_gen_scenarios(args: &GenScenariosArgs) -> Result<(), CliError> {
    scenario::builtin::write_all(&args.out)?;
    println!("wrote scenario fixtures to {}", args.out.display());
    Ok(())
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Scan(args) => cmd_scan(args),
        Command::Blacklist(args) => cmd_blacklist(args),
        Command::AllocSim(args) => cmd_alloc_sim(args),
        Command::Attack(args) => cmd_attack(args),
        Command::Report(args) => cmd_report(args),
        Command::GenScenarios(args) => cmd_gen_scenarios(args),
    }
}
