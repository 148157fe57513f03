//! Attack harness: the double-sided scan procedure and a page-table-spray
//! privilege-escalation exploit, replayed against the simulated machine with
//! and without defenses.
//!
//! Victim placement goes through the real allocator (kernel-domain requests
//! against whatever partition policy the machine runs), so the isolation
//! results are a consequence of the allocator, not an assumption of the
//! harness.

use std::collections::{BTreeSet, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bcatt::FrameAvailability;
use crate::dram::{BankCoords, DramError, Mapper};
use crate::fault::{DramState, FaultError, VulnerabilityProfile};
use crate::gcatt::{AllocError, AllocRequest, Allocator, Block, PartitionPolicy, SecurityDomain};

#[derive(Debug, Error)]
pub enum AttackError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Alloc(#[from] AllocError),
    #[error("invalid config: {0}")]
    InvalidConfig(String),
}

/// Scan parameters: activations per aggressor side, fill pattern, and how
/// many full passes to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanConfig {
    pub hammer_count: u64,
    pub pattern: u8,
    pub coverage_runs: u32,
}

impl Default for ScanConfig {
    fn default() -> Self {
        ScanConfig {
            hammer_count: 1_000_000,
            pattern: 0xFF,
            coverage_runs: 1,
        }
    }
}

impl ScanConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if self.hammer_count < 1 {
            return Err(AttackError::InvalidConfig("hammer_count must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExploitConfig {
    /// Fraction of available memory the attacker sprays.
    pub spray_fraction: f64,
    pub attempts: u64,
    pub seed: u64,
}

impl ExploitConfig {
    pub fn validate(&self) -> Result<(), AttackError> {
        if !(self.spray_fraction > 0.0 && self.spray_fraction <= 1.0) {
            return Err(AttackError::InvalidConfig(format!(
                "spray_fraction {} outside (0, 1]",
                self.spray_fraction
            )));
        }
        if self.attempts < 1 {
            return Err(AttackError::InvalidConfig("attempts must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HammerMode {
    DoubleSided,
    SingleSided,
}

/// One simulated machine: fault state plus allocator, built from a geometry,
/// a vulnerability profile and the selected defenses.
pub struct Machine {
    pub state: DramState,
    pub allocator: Allocator,
    pub profile: VulnerabilityProfile,
    pub availability: FrameAvailability,
}

impl Machine {
    pub fn new(
        mapper: Mapper,
        profile: VulnerabilityProfile,
        availability: FrameAvailability,
        policy: PartitionPolicy,
        blast_radius: u64,
    ) -> Result<Self, AttackError> {
        profile.validate(&mapper)?;
        if !matches!(policy, PartitionPolicy::None) && policy.guard_rows() < blast_radius {
            return Err(AttackError::InvalidConfig(format!(
                "guard_rows {} < blast radius {blast_radius}",
                policy.guard_rows()
            )));
        }
        let allocator = Allocator::init(&availability, mapper.clone(), policy)?;
        Ok(Machine {
            state: DramState::with_blast_radius(mapper, blast_radius),
            allocator,
            profile,
            availability,
        })
    }

    fn mapper(&self) -> &Mapper {
        self.state.mapper()
    }
}

/// Frames the scanner (a user-space tool) could actually obtain: free and
/// policy-compliant for a user-domain order-0 allocation.
fn scanner_can_allocate(machine: &Machine, pfn: u64) -> bool {
    machine.allocator.is_free(pfn)
        && machine
            .allocator
            .policy_check(Block { pfn, order: 0 }, SecurityDomain::USER)
}

/// Double-sided scan over all reachable aggressor/victim triples. Fills each
/// testable victim frame with the pattern, hammers both enclosing rows
/// within one epoch, refreshes, and reports frames with at least one flip.
pub fn scan(machine: &mut Machine, cfg: &ScanConfig, seed: u64) -> Result<Vec<u64>, AttackError> {
    cfg.validate()?;
    let mapper = machine.mapper().clone();
    let g = *mapper.geometry();
    let rows = g.rows_per_bank;
    let mut victims = BTreeSet::new();
    for _run in 0..cfg.coverage_runs {
        for bank in mapper.banks() {
            for row in 1..rows.saturating_sub(1) {
                let vframes: Vec<u64> = mapper
                    .frames_in_row(bank, row)?
                    .into_iter()
                    .filter(|&f| scanner_can_allocate(machine, f))
                    .collect();
                if vframes.is_empty() {
                    continue;
                }
                let side_ok = |r: u64| -> Result<bool, AttackError> {
                    Ok(mapper
                        .frames_in_row(bank, r)?
                        .into_iter()
                        .any(|f| scanner_can_allocate(machine, f)))
                };
                if !side_ok(row - 1)? || !side_ok(row + 1)? {
                    continue;
                }
                for &f in &vframes {
                    machine.state.fill_frame(f, cfg.pattern);
                }
                machine.state.hammer(bank, row - 1, cfg.hammer_count)?;
                machine.state.hammer(bank, row + 1, cfg.hammer_count)?;
                machine.state.evaluate_flips(&machine.profile, seed)?;
                for &f in &vframes {
                    let flipped = machine
                        .state
                        .frame_bytes(f)
                        .map(|bytes| bytes.iter().any(|&b| b != cfg.pattern))
                        .unwrap_or(false);
                    if flipped {
                        victims.insert(f);
                    }
                }
                machine.state.refresh();
            }
        }
    }
    Ok(victims.into_iter().collect())
}

/// Bits of a simulated 8-byte page-table entry whose corruption counts as a
/// successful privilege escalation: the writable bit and the frame-number
/// field.
fn pte_bit_designated(byte_in_record: u64, bit: u8) -> bool {
    let idx = byte_in_record * 8 + bit as u64;
    idx == 1 || (12..=51).contains(&idx)
}

/// Fill value for simulated PTE frames (present | writable | accessed).
const PTE_RECORD: [u8; 8] = [0x67, 0, 0, 0, 0, 0, 0, 0];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttemptLog {
    pub attempt: u64,
    pub seed: u64,
    pub success: bool,
    pub flips: u64,
    pub cross_domain_flips: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttackResult {
    pub attempts: u64,
    pub successes: u64,
    pub flips_total: u64,
    pub cross_domain_flips: u64,
    pub per_attempt: Vec<AttemptLog>,
}

impl AttackResult {
    fn from_attempts(per_attempt: Vec<AttemptLog>) -> Self {
        AttackResult {
            attempts: per_attempt.len() as u64,
            successes: per_attempt.iter().filter(|a| a.success).count() as u64,
            flips_total: per_attempt.iter().map(|a| a.flips).sum(),
            cross_domain_flips: per_attempt.iter().map(|a| a.cross_domain_flips).sum(),
            per_attempt,
        }
    }

    pub fn success_rate(&self) -> f64 {
        self.successes as f64 / self.attempts as f64
    }
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^ (x >> 31)
}

/// Per-attempt seed derivation; order-independent so attempts can run in
/// parallel.
pub fn attempt_seed(campaign_seed: u64, attempt: u64) -> u64 {
    splitmix64(campaign_seed ^ splitmix64(attempt.wrapping_add(1)))
}

/// One exploit attempt on a fresh machine:
/// 1. the attacker sprays `spray_fraction` of available memory,
/// 2. frees everything except the rows sandwiching candidate victim rows,
/// 3. the kernel sprays simulated page-table frames into the holes,
/// 4. the attacker hammers; success is a flip in a designated PTE bit of a
///    kernel-domain frame.
///
/// Allocation failures count as a failed attempt, never as an error.
pub fn run_exploit(
    machine: &mut Machine,
    cfg: &ExploitConfig,
    hammer_count: u64,
    attempt: u64,
    mode: HammerMode,
) -> Result<AttemptLog, AttackError> {
    cfg.validate()?;
    let seed = attempt_seed(cfg.seed, attempt);
    let mapper = machine.mapper().clone();
    let g = *mapper.geometry();
    let attacker = machine.allocator.register_process(1);

    // 1. spray
    let target = (cfg.spray_fraction * machine.allocator.free_frame_count() as f64) as u64;
    let mut owned: Vec<u64> = Vec::with_capacity(target as usize);
    for _ in 0..target {
        match machine.allocator.alloc(AllocRequest::process(0, 1)) {
            Ok(b) => owned.push(b.pfn),
            Err(AllocError::OutOfMemory) => break,
            Err(e) => return Err(e.into()),
        }
    }

    // rows fully owned by the attacker
    let mut row_counts: HashMap<(BankCoords, u64), u64> = HashMap::new();
    for &pfn in &owned {
        let loc = mapper.frame_location(pfn)?;
        *row_counts.entry((loc.bank_coords(), loc.row)).or_insert(0) += 1;
    }
    let full =
        |bank: BankCoords, row: u64| row_counts.get(&(bank, row)) == Some(&g.pages_per_row);

    // 2. pick candidate victim rows of one parity so candidates and their
    // aggressors never overlap, then free everything but the aggressor rows
    let phase = splitmix64(seed) & 1;
    let mut candidates: Vec<(BankCoords, u64)> = Vec::new();
    let mut keep: BTreeSet<(BankCoords, u64)> = BTreeSet::new();
    for &(bank, row) in row_counts.keys() {
        if !full(bank, row) || row % 2 != phase || row == 0 {
            continue;
        }
        let sandwich_ok = match mode {
            HammerMode::DoubleSided => {
                row + 1 < g.rows_per_bank && full(bank, row - 1) && full(bank, row + 1)
            }
            HammerMode::SingleSided => full(bank, row - 1),
        };
        if !sandwich_ok {
            continue;
        }
        candidates.push((bank, row));
        keep.insert((bank, row - 1));
        if mode == HammerMode::DoubleSided {
            keep.insert((bank, row + 1));
        }
    }
    candidates.sort_unstable();
    let mut freed = 0u64;
    owned.sort_unstable();
    for &pfn in &owned {
        let loc = mapper.frame_location(pfn)?;
        if !keep.contains(&(loc.bank_coords(), loc.row)) {
            machine.allocator.free(pfn)?;
            freed += 1;
        }
    }

    // 3. kernel victim spray: fill the holes with PTE frames
    let mut pte_pattern = vec![0u8; g.page_size as usize];
    for chunk in pte_pattern.chunks_exact_mut(8) {
        chunk.copy_from_slice(&PTE_RECORD);
    }
    let pte_pattern = std::sync::Arc::new(pte_pattern);
    for _ in 0..freed {
        match machine.allocator.alloc(AllocRequest::kernel(0)) {
            Ok(b) => machine.state.write_frame(b.pfn, &pte_pattern),
            Err(AllocError::OutOfMemory) => break,
            Err(e) => return Err(e.into()),
        }
    }

    // 4. hammer all candidate rows in one epoch
    for &(bank, row) in &candidates {
        machine.state.hammer(bank, row - 1, hammer_count)?;
        if mode == HammerMode::DoubleSided {
            machine.state.hammer(bank, row + 1, hammer_count)?;
        }
    }
    let flips = machine.state.evaluate_flips(&machine.profile, seed)?;
    machine.state.refresh();

    let mut observed = 0u64;
    let mut cross = 0u64;
    let mut success = false;
    for flip in flips {
        let pfn = flip.pa / g.page_size;
        if !machine.availability.is_available(pfn) {
            // blacklisted memory is unused; flips there are unobservable
            continue;
        }
        observed += 1;
        let domain = machine.allocator.frame_domain(pfn);
        if domain.is_some() && domain != Some(attacker) {
            cross += 1;
        }
        if domain == Some(SecurityDomain::KERNEL)
            && pte_bit_designated(flip.pa % 8, flip.bit)
        {
            success = true;
        }
    }
    Ok(AttemptLog {
        attempt,
        seed,
        success,
        flips: observed,
        cross_domain_flips: cross,
    })
}

/// Runs `cfg.attempts` independent exploit attempts, each on a fresh machine
/// from `factory`, and aggregates by attempt index. Deterministic for a
/// fixed `cfg.seed`.
pub fn run_campaign<F>(
    factory: F,
    cfg: &ExploitConfig,
    hammer_count: u64,
    mode: HammerMode,
) -> Result<AttackResult, AttackError>
where
    F: Fn() -> Result<Machine, AttackError> + Sync,
{
    cfg.validate()?;
    let mut per_attempt: Vec<AttemptLog> = (0..cfg.attempts)
        .into_par_iter()
        .map(|attempt| {
            let mut machine = factory()?;
            run_exploit(&mut machine, cfg, hammer_count, attempt, mode)
        })
        .collect::<Result<Vec<_>, _>>()?;
    per_attempt.sort_by_key(|a| a.attempt);
    Ok(AttackResult::from_attempts(per_attempt))
}

/// Single-sided coverage: the campaign with only one aggressor row hammered
/// per victim row.
pub fn single_sided_check<F>(
    factory: F,
    cfg: &ExploitConfig,
    hammer_count: u64,
) -> Result<AttackResult, AttackError>
where
    F: Fn() -> Result<Machine, AttackError> + Sync,
{
    run_campaign(factory, cfg, hammer_count, HammerMode::SingleSided)
}
