//! Blacklisting defense pipeline: scan output -> blacklist -> extended
//! memory map -> frame availability.
//!
//! The memory map is the simulator's analog of the firmware e820 map: an
//! ordered, coalesced list of (base, length, kind) regions. Unlike the
//! original e820 format there is no 128-entry ceiling; maps produced from
//! large blacklists simply grow.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dram::{DramError, Mapper};
use crate::fault::{FaultError, VulnerabilityProfile};

#[derive(Debug, Error)]
pub enum BcattError {
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error("memory map parse error: {0}")]
    Parse(String),
    #[error("invalid memory map: {0}")]
    InvalidMap(String),
    #[error("pfn {pfn} out of range (total {total} frames)")]
    PfnOutOfRange { pfn: u64, total: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionKind {
    Usable,
    Reserved,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MemoryRegion {
    pub base: u64,
    pub length: u64,
    pub kind: RegionKind,
}

impl MemoryRegion {
    pub fn end(&self) -> u64 {
        self.base + self.length
    }
}

// File format uses hex strings for base and length so the maps read like
// firmware dumps and stay byte-stable for golden tests.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegionRecord {
    base: String,
    length: String,
    kind: RegionKind,
}

fn parse_hex(s: &str) -> Result<u64, BcattError> {
    let trimmed = s
        .strip_prefix("0x")
        .or_else(|| s.strip_prefix("0X"))
        .ok_or_else(|| BcattError::Parse(format!("expected 0x-prefixed hex, got {s:?}")))?;
    u64::from_str_radix(trimmed, 16)
        .map_err(|e| BcattError::Parse(format!("bad hex value {s:?}: {e}")))
}

/// Ordered, non-overlapping, fully coalesced list of memory regions covering
/// `[0, total_bytes)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MemoryMap {
    regions: Vec<MemoryRegion>,
}

impl MemoryMap {
    pub fn new(regions: Vec<MemoryRegion>) -> Result<Self, BcattError> {
        let map = MemoryMap {
            regions: coalesce(regions),
        };
        map.validate()?;
        Ok(map)
    }

    pub fn all_usable(total_bytes: u64) -> Self {
        MemoryMap {
            regions: vec![MemoryRegion {
                base: 0,
                length: total_bytes,
                kind: RegionKind::Usable,
            }],
        }
    }

    pub fn regions(&self) -> &[MemoryRegion] {
        &self.regions
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn total_bytes(&self) -> u64 {
        self.regions.iter().map(|r| r.length).sum()
    }

    pub fn usable_bytes(&self) -> u64 {
        self.regions
            .iter()
            .filter(|r| r.kind == RegionKind::Usable)
            .map(|r| r.length)
            .sum()
    }

    fn validate(&self) -> Result<(), BcattError> {
        let mut prev: Option<&MemoryRegion> = None;
        for r in &self.regions {
            if r.length == 0 {
                return Err(BcattError::InvalidMap(format!(
                    "zero-length region at {:#x}",
                    r.base
                )));
            }
            r.base
                .checked_add(r.length)
                .ok_or_else(|| BcattError::InvalidMap("region end overflows".into()))?;
            if let Some(p) = prev {
                if r.base < p.end() {
                    return Err(BcattError::InvalidMap(format!(
                        "regions overlap at {:#x}",
                        r.base
                    )));
                }
                if r.base == p.end() && r.kind == p.kind {
                    return Err(BcattError::InvalidMap(format!(
                        "uncoalesced adjacent {:?} regions at {:#x}",
                        r.kind, r.base
                    )));
                }
            }
            prev = Some(r);
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        let records: Vec<RegionRecord> = self
            .regions
            .iter()
            .map(|r| RegionRecord {
                base: format!("{:#x}", r.base),
                length: format!("{:#x}", r.length),
                kind: r.kind,
            })
            .collect();
        serde_json::to_string_pretty(&records).expect("map serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, BcattError> {
        let records: Vec<RegionRecord> =
            serde_json::from_str(text).map_err(|e| BcattError::Parse(e.to_string()))?;
        let regions = records
            .iter()
            .map(|r| {
                Ok(MemoryRegion {
                    base: parse_hex(&r.base)?,
                    length: parse_hex(&r.length)?,
                    kind: r.kind,
                })
            })
            .collect::<Result<Vec<_>, BcattError>>()?;
        let map = MemoryMap { regions };
        map.validate()?;
        Ok(map)
    }

    pub fn load(path: &Path) -> Result<Self, BcattError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn store(&self, path: &Path) -> Result<(), BcattError> {
        fs::write(path, self.to_json() + "\n")?;
        Ok(())
    }
}

fn coalesce(mut regions: Vec<MemoryRegion>) -> Vec<MemoryRegion> {
    regions.sort_by_key(|r| r.base);
    let mut out: Vec<MemoryRegion> = Vec::with_capacity(regions.len());
    for r in regions {
        if r.length == 0 {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.kind == r.kind && last.end() == r.base => {
                last.length += r.length;
            }
            _ => out.push(r),
        }
    }
    out
}

/// Sorted set of blacklisted page frame numbers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Blacklist {
    pfns: BTreeSet<u64>,
}

impl Blacklist {
    pub fn new(pfns: impl IntoIterator<Item = u64>) -> Self {
        Blacklist {
            pfns: pfns.into_iter().collect(),
        }
    }

    pub fn pfns(&self) -> impl Iterator<Item = u64> + '_ {
        self.pfns.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.pfns.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pfns.is_empty()
    }

    pub fn contains(&self, pfn: u64) -> bool {
        self.pfns.contains(&pfn)
    }

    /// Union with another blacklist (scan runs are merged, duplicates
    /// collapse).
    pub fn merge(&mut self, other: &Blacklist) {
        self.pfns.extend(other.pfns.iter().copied());
    }

    /// One decimal PFN per line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for pfn in &self.pfns {
            out.push_str(&pfn.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, BcattError> {
        let mut pfns = BTreeSet::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let pfn: u64 = line
                .parse()
                .map_err(|e| BcattError::Parse(format!("bad pfn {line:?}: {e}")))?;
            pfns.insert(pfn);
        }
        Ok(Blacklist { pfns })
    }

    pub fn load(path: &Path) -> Result<Self, BcattError> {
        Self::from_text(&fs::read_to_string(path)?)
    }

    pub fn store(&self, path: &Path) -> Result<(), BcattError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Options for deriving a blacklist from a scan result.
#[derive(Debug, Clone, Copy, Default)]
pub struct BlacklistOptions {
    /// Blacklist every frame of a victim row instead of just the victim
    /// frame. Conservative; off by default.
    pub whole_rows: bool,
}

/// Frames containing at least one vulnerable cell. Frames that only ever act
/// as aggressors stay usable.
pub fn derive_blacklist(
    profile: &VulnerabilityProfile,
    mapper: &Mapper,
) -> Result<Blacklist, BcattError> {
    derive_blacklist_with(profile, mapper, BlacklistOptions::default())
}

pub fn derive_blacklist_with(
    profile: &VulnerabilityProfile,
    mapper: &Mapper,
    opts: BlacklistOptions,
) -> Result<Blacklist, BcattError> {
    profile.check_digest(mapper)?;
    let mut pfns = BTreeSet::new();
    for cell in &profile.cells {
        if opts.whole_rows {
            pfns.extend(mapper.frames_in_row(cell.bank_coords(), cell.row)?);
        } else {
            let pa = cell.pa(mapper)?;
            pfns.insert(pa / mapper.geometry().page_size);
        }
    }
    Ok(Blacklist { pfns })
}

/// Marks every blacklisted frame reserved in the map. Frames already inside
/// reserved regions are left alone; the entry count is unbounded.
pub fn extend_map(map: &MemoryMap, bl: &Blacklist, mapper: &Mapper) -> Result<MemoryMap, BcattError> {
    let g = mapper.geometry();
    let total = g.total_frames();
    for pfn in bl.pfns() {
        if pfn >= total {
            return Err(BcattError::PfnOutOfRange { pfn, total });
        }
    }
    let page = g.page_size;
    let mut out: Vec<MemoryRegion> = Vec::new();
    for region in map.regions() {
        match region.kind {
            RegionKind::Reserved => out.push(*region),
            RegionKind::Usable => {
                let mut cursor = region.base;
                let first = region.base / page;
                let last = (region.end() + page - 1) / page;
                for pfn in bl.pfns.range(first..last) {
                    let rbase = (pfn * page).max(region.base);
                    let rend = ((pfn + 1) * page).min(region.end());
                    if rend <= cursor {
                        continue;
                    }
                    if rbase > cursor {
                        out.push(MemoryRegion {
                            base: cursor,
                            length: rbase - cursor,
                            kind: RegionKind::Usable,
                        });
                    }
                    out.push(MemoryRegion {
                        base: rbase,
                        length: rend - rbase,
                        kind: RegionKind::Reserved,
                    });
                    cursor = rend;
                }
                if cursor < region.end() {
                    out.push(MemoryRegion {
                        base: cursor,
                        length: region.end() - cursor,
                        kind: RegionKind::Usable,
                    });
                }
            }
        }
    }
    MemoryMap::new(out)
}

/// Per-frame availability bitmap consumed by the allocator. A frame is
/// available only if it lies entirely inside usable regions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameAvailability {
    available: Vec<bool>,
}

impl FrameAvailability {
    pub fn all_available(total_frames: u64) -> Self {
        FrameAvailability {
            available: vec![true; total_frames as usize],
        }
    }

    pub fn none_available(total_frames: u64) -> Self {
        FrameAvailability {
            available: vec![false; total_frames as usize],
        }
    }

    pub fn is_available(&self, pfn: u64) -> bool {
        self.available.get(pfn as usize).copied().unwrap_or(false)
    }

    pub fn total_frames(&self) -> u64 {
        self.available.len() as u64
    }

    pub fn available_count(&self) -> u64 {
        self.available.iter().filter(|a| **a).count() as u64
    }

    pub fn iter_available(&self) -> impl Iterator<Item = u64> + '_ {
        self.available
            .iter()
            .enumerate()
            .filter_map(|(i, a)| a.then_some(i as u64))
    }
}

pub fn apply_map(map: &MemoryMap, mapper: &Mapper) -> FrameAvailability {
    let g = mapper.geometry();
    let page = g.page_size;
    let mut avail = FrameAvailability::none_available(g.total_frames());
    for region in map.regions() {
        if region.kind != RegionKind::Usable {
            continue;
        }
        // only frames fully contained in the usable region
        let first = (region.base + page - 1) / page;
        let last = region.end() / page;
        for pfn in first..last.min(g.total_frames()) {
            avail.available[pfn as usize] = true;
        }
    }
    avail
}

/// Blacklisting memory overhead, Table-IV style.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OverheadReport {
    pub blacklisted: u64,
    pub total_frames: u64,
    pub fraction: f64,
}

impl OverheadReport {
    pub fn new(blacklisted: u64, total_frames: u64) -> Self {
        OverheadReport {
            blacklisted,
            total_frames,
            fraction: blacklisted as f64 / total_frames as f64,
        }
    }

    /// Percentage with four decimal places, e.g. "0.0063%".
    pub fn percent_string(&self) -> String {
        format!("{:.4}%", self.fraction * 100.0)
    }
}

pub fn overhead_report(bl: &Blacklist, mapper: &Mapper) -> OverheadReport {
    OverheadReport::new(bl.len() as u64, mapper.geometry().total_frames())
}

impl fmt::Display for OverheadReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:>12} {:>12} {:>10}",
            self.blacklisted,
            self.total_frames,
            self.percent_string()
        )
    }
}
