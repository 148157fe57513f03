//! Vulnerable-cell modeling and activation dynamics.
//!
//! A row activation is the hammer primitive; per-row activation counters
//! accumulate within a refresh epoch and reset at every refresh. A vulnerable
//! cell flips when its aggressor rows reach the activation threshold within a
//! single epoch, realized with probability `reliability` from a seeded
//! deterministic generator. Reliability 1.0 models the reliably flipping
//! cells that matter for practical attacks.

use std::collections::{HashMap, HashSet};
use std::sync::Arc;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{BankCoords, DramError, DramLocation, Mapper};

#[derive(Debug, Error)]
pub enum FaultError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error("profile parse error: {0}")]
    Parse(String),
    #[error("profile geometry digest {profile} does not match geometry {geometry}")]
    DigestMismatch { profile: String, geometry: String },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Sidedness {
    /// Both enclosing aggressor rows must reach the threshold.
    DoubleRequired,
    /// A single adjacent aggressor row suffices.
    SingleSufficient,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnerableCell {
    pub dimm: u64,
    pub rank: u64,
    pub bank: u64,
    pub row: u64,
    /// Byte offset within the row.
    pub byte_offset: u64,
    pub bit: u8,
    /// Activations per aggressor row needed within one epoch.
    pub threshold: u64,
    /// Probability that a qualifying epoch actually flips the bit.
    pub reliability: f64,
    pub sidedness: Sidedness,
}

impl VulnerableCell {
    pub fn bank_coords(&self) -> BankCoords {
        BankCoords {
            dimm: self.dimm,
            rank: self.rank,
            bank: self.bank,
        }
    }

    fn key(&self) -> (u64, u64, u64, u64, u64, u8) {
        (
            self.dimm,
            self.rank,
            self.bank,
            self.row,
            self.byte_offset,
            self.bit,
        )
    }

    /// Physical address of the byte holding this cell.
    pub fn pa(&self, mapper: &Mapper) -> Result<u64, DramError> {
        mapper.encode(DramLocation {
            dimm: self.dimm,
            rank: self.rank,
            bank: self.bank,
            row: self.row,
            offset: self.byte_offset,
        })
    }

    fn validate(&self, mapper: &Mapper) -> Result<(), FaultError> {
        if self.threshold < 1 {
            return Err(FaultError::Parse("threshold must be >= 1".into()));
        }
        if !(self.reliability > 0.0 && self.reliability <= 1.0) {
            return Err(FaultError::Parse(format!(
                "reliability {} outside (0, 1]",
                self.reliability
            )));
        }
        if self.bit > 7 {
            return Err(FaultError::Parse(format!("bit {} > 7", self.bit)));
        }
        self.pa(mapper)?;
        Ok(())
    }
}

/// Set of vulnerable cells bound to a geometry via its digest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VulnerabilityProfile {
    pub geometry_digest: String,
    pub cells: Vec<VulnerableCell>,
}

impl VulnerabilityProfile {
    pub fn new(mapper: &Mapper, cells: Vec<VulnerableCell>) -> Result<Self, FaultError> {
        let p = VulnerabilityProfile {
            geometry_digest: mapper.digest(),
            cells,
        };
        p.validate(mapper)?;
        Ok(p)
    }

    pub fn empty(mapper: &Mapper) -> Self {
        VulnerabilityProfile {
            geometry_digest: mapper.digest(),
            cells: Vec::new(),
        }
    }

    pub fn check_digest(&self, mapper: &Mapper) -> Result<(), FaultError> {
        if self.geometry_digest != mapper.digest() {
            return Err(FaultError::DigestMismatch {
                profile: self.geometry_digest.clone(),
                geometry: mapper.digest(),
            });
        }
        Ok(())
    }

    pub fn validate(&self, mapper: &Mapper) -> Result<(), FaultError> {
        self.check_digest(mapper)?;
        let mut seen = HashSet::new();
        for cell in &self.cells {
            cell.validate(mapper)?;
            if !seen.insert(cell.key()) {
                return Err(FaultError::Parse(format!(
                    "duplicate cell at {:?}",
                    cell.key()
                )));
            }
        }
        Ok(())
    }

    /// Checks structure only (uniqueness, field ranges are deferred until a
    /// geometry is available).
    fn validate_standalone(&self) -> Result<(), FaultError> {
        let mut seen = HashSet::new();
        for cell in &self.cells {
            if !seen.insert(cell.key()) {
                return Err(FaultError::Parse(format!(
                    "duplicate cell at {:?}",
                    cell.key()
                )));
            }
        }
        Ok(())
    }

    /// Page frames containing at least one vulnerable cell.
    pub fn victim_frames(&self, mapper: &Mapper) -> Result<Vec<u64>, FaultError> {
        let page = mapper.geometry().page_size;
        let mut frames: Vec<u64> = self
            .cells
            .iter()
            .map(|c| c.pa(mapper).map(|pa| pa / page))
            .collect::<Result<HashSet<_>, _>>()?
            .into_iter()
            .collect();
        frames.sort_unstable();
        Ok(frames)
    }

    pub fn digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(serde_json::to_string(self).expect("profile serializes"));
        hex::encode(&h.finalize()[..16])
    }
}

pub fn load_profile(path: &Path) -> Result<VulnerabilityProfile, FaultError> {
    let text = fs::read_to_string(path)?;
    let profile: VulnerabilityProfile =
        serde_json::from_str(&text).map_err(|e| FaultError::Parse(e.to_string()))?;
    profile.validate_standalone()?;
    Ok(profile)
}

pub fn store_profile(profile: &VulnerabilityProfile, path: &Path) -> Result<(), FaultError> {
    let text = serde_json::to_string_pretty(profile).map_err(|e| FaultError::Parse(e.to_string()))?;
    fs::write(path, text + "\n")?;
    Ok(())
}

/// A bit flip realized in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlipEvent {
    pub pa: u64,
    pub bit: u8,
    pub epoch: u64,
}

/// Mutable world: byte store, per-row activation counters, epoch counter.
///
/// Frames are materialized lazily (absent frames read as zero) and shared
/// copy-on-write, so bulk sprays of one pattern cost one buffer. All flips go
/// through `evaluate_flips`, so an empty profile can never change memory.
pub struct DramState {
    mapper: Mapper,
    frames: HashMap<u64, Arc<Vec<u8>>>,
    counters: HashMap<(BankCoords, u64), u64>,
    epoch: u64,
    /// Cells already decided (flip drawn or skipped) this epoch, by index
    /// into the profile handed to `evaluate_flips`.
    decided: HashSet<usize>,
    flip_log: Vec<FlipEvent>,
    blast_radius: u64,
}

impl DramState {
    pub fn new(mapper: Mapper) -> Self {
        Self::with_blast_radius(mapper, 1)
    }

    pub fn with_blast_radius(mapper: Mapper, blast_radius: u64) -> Self {
        assert!(blast_radius >= 1 && blast_radius <= 2);
        DramState {
            mapper,
            frames: HashMap::new(),
            counters: HashMap::new(),
            epoch: 0,
            decided: HashSet::new(),
            flip_log: Vec::new(),
            blast_radius,
        }
    }

    pub fn mapper(&self) -> &Mapper {
        &self.mapper
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn blast_radius(&self) -> u64 {
        self.blast_radius
    }

    pub fn flip_log(&self) -> &[FlipEvent] {
        &self.flip_log
    }

    pub fn activation_count(&self, bank: BankCoords, row: u64) -> u64 {
        self.counters.get(&(bank, row)).copied().unwrap_or(0)
    }

    /// One row activation (the hammer primitive).
    pub fn activate(&mut self, bank: BankCoords, row: u64) -> Result<(), FaultError> {
        self.hammer(bank, row, 1)
    }

    /// `count` consecutive activations of one row within the current epoch.
    pub fn hammer(&mut self, bank: BankCoords, row: u64, count: u64) -> Result<(), FaultError> {
        let g = self.mapper.geometry();
        if bank.dimm >= g.dimms
            || bank.rank >= g.ranks_per_dimm
            || bank.bank >= g.banks_per_rank
            || row >= g.rows_per_bank
        {
            return Err(FaultError::Dram(DramError::LocationOutOfRange(
                DramLocation {
                    dimm: bank.dimm,
                    rank: bank.rank,
                    bank: bank.bank,
                    row,
                    offset: 0,
                },
            )));
        }
        *self.counters.entry((bank, row)).or_insert(0) += count;
        Ok(())
    }

    /// Zeroes all activation counters and advances the epoch; memory
    /// contents are unchanged.
    pub fn refresh(&mut self) {
        self.counters.clear();
        self.decided.clear();
        self.epoch += 1;
    }

    fn frame_of(&mut self, pfn: u64) -> &mut Vec<u8> {
        let page = self.mapper.geometry().page_size as usize;
        Arc::make_mut(
            self.frames
                .entry(pfn)
                .or_insert_with(|| Arc::new(vec![0u8; page])),
        )
    }

    pub fn read_byte(&self, pa: u64) -> u8 {
        let page = self.mapper.geometry().page_size;
        match self.frames.get(&(pa / page)) {
            Some(bytes) => bytes[(pa % page) as usize],
            None => 0,
        }
    }

    pub fn write_byte(&mut self, pa: u64, value: u8) {
        let page = self.mapper.geometry().page_size;
        let off = (pa % page) as usize;
        self.frame_of(pa / page)[off] = value;
    }

    pub fn fill_frame(&mut self, pfn: u64, pattern: u8) {
        self.frame_of(pfn).fill(pattern);
    }

    /// Overwrites a whole frame at once; `bytes` must be page-sized.
    pub fn write_frame(&mut self, pfn: u64, bytes: &Arc<Vec<u8>>) {
        assert_eq!(bytes.len() as u64, self.mapper.geometry().page_size);
        self.frames.insert(pfn, Arc::clone(bytes));
    }

    pub fn frame_bytes(&self, pfn: u64) -> Option<&[u8]> {
        self.frames.get(&pfn).map(|v| v.as_slice().as_ref())
    }

    fn cell_qualifies(&self, cell: &VulnerableCell) -> bool {
        let bank = cell.bank_coords();
        let at_threshold = |row: Option<u64>| -> bool {
            row.map(|r| self.activation_count(bank, r) >= cell.threshold)
                .unwrap_or(false)
        };
        let rows = self.mapper.geometry().rows_per_bank;
        for d in 1..=self.blast_radius {
            let below = cell.row.checked_sub(d);
            let above = (cell.row + d < rows).then_some(cell.row + d);
            match cell.sidedness {
                Sidedness::DoubleRequired => {
                    if at_threshold(below) && at_threshold(above) {
                        return true;
                    }
                }
                Sidedness::SingleSufficient => {
                    if at_threshold(below) || at_threshold(above) {
                        return true;
                    }
                }
            }
        }
        false
    }

    /// Applies the flip rule to every not-yet-decided cell of the current
    /// epoch and returns the flips realized by this call.
    ///
    /// A cell flips at most once per epoch; calling this repeatedly within
    /// one epoch neither re-draws nor re-flips.
    pub fn evaluate_flips(
        &mut self,
        profile: &VulnerabilityProfile,
        seed: u64,
    ) -> Result<Vec<FlipEvent>, FaultError> {
        profile.check_digest(&self.mapper)?;
        let mut events = Vec::new();
        for (idx, cell) in profile.cells.iter().enumerate() {
            if self.decided.contains(&idx) || !self.cell_qualifies(cell) {
                continue;
            }
            self.decided.insert(idx);
            let realized = cell.reliability >= 1.0
                || bernoulli_draw(seed, self.epoch, idx as u64) < cell.reliability;
            if !realized {
                continue;
            }
            let pa = cell.pa(&self.mapper)?;
            let byte = self.read_byte(pa);
            self.write_byte(pa, byte ^ (1 << cell.bit));
            let event = FlipEvent {
                pa,
                bit: cell.bit,
                epoch: self.epoch,
            };
            self.flip_log.push(event);
            events.push(event);
        }
        Ok(events)
    }
}

/// Deterministic uniform draw in [0, 1) keyed by (seed, epoch, cell).
fn bernoulli_draw(seed: u64, epoch: u64, cell: u64) -> f64 {
    let mut x = seed ^ epoch.wrapping_mul(0x9E3779B97F4A7C15) ^ cell.wrapping_mul(0xD1B54A32D192ED03);
    // splitmix64 finalizer
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D049BB133111EB);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}
