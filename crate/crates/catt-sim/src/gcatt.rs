//! Buddy-style physical page allocator with per-frame security-domain
//! metadata and pluggable partitioning policies.
//!
//! Domain 0 is the kernel, domain 1 plain user space, and ids >= 2 are
//! per-process domains. The allocator refuses to return a block that fails
//! the partition policy even when compliant memory is exhausted: denial over
//! violation is what constrains flips to a single security domain.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bcatt::FrameAvailability;
use crate::dram::{BankCoords, DramError, Mapper};

/// Buddy depth; mirrors the order range of commodity kernel allocators.
pub const MAX_ORDER: u32 = 11;

#[derive(Debug, Error)]
pub enum AllocError {
    #[error("out of memory")]
    OutOfMemory,
    #[error("double free of pfn {pfn}")]
    DoubleFree { pfn: u64 },
    #[error("pfn {pfn} is not the start of an allocated block")]
    RangeNotAllocated { pfn: u64 },
    #[error("process {pid} is not registered")]
    ProcessNotRegistered { pid: u32 },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error(transparent)]
    Dram(#[from] DramError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SecurityDomain(pub u32);

impl SecurityDomain {
    pub const KERNEL: SecurityDomain = SecurityDomain(0);
    pub const USER: SecurityDomain = SecurityDomain(1);

    pub fn is_kernel(&self) -> bool {
        self.0 == 0
    }
}

impl fmt::Display for SecurityDomain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            0 => write!(f, "kernel"),
            1 => write!(f, "user"),
            n => write!(f, "proc{n}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameState {
    Free,
    Allocated,
}

/// Per-frame metadata (the vmemmap analog), indexed by PFN.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameMeta {
    pub state: FrameState,
    /// None for free frames; the domain is reset on free.
    pub domain: Option<SecurityDomain>,
}

pub type ProcessId = u32;

/// Requester descriptor from which the security domain is derived.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AllocFlags {
    KernelAlloc,
    UserFault { process: Option<ProcessId> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AllocRequest {
    pub order: u32,
    pub flags: AllocFlags,
}

impl AllocRequest {
    pub fn kernel(order: u32) -> Self {
        AllocRequest {
            order,
            flags: AllocFlags::KernelAlloc,
        }
    }

    pub fn user(order: u32) -> Self {
        AllocRequest {
            order,
            flags: AllocFlags::UserFault { process: None },
        }
    }

    pub fn process(order: u32, pid: ProcessId) -> Self {
        AllocRequest {
            order,
            flags: AllocFlags::UserFault { process: Some(pid) },
        }
    }
}

/// A returned block: `2^order` frames starting at `pfn`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Block {
    pub pfn: u64,
    pub order: u32,
}

impl Block {
    pub fn frames(&self) -> impl Iterator<Item = u64> {
        self.pfn..self.pfn + (1u64 << self.order)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PartitionPolicy {
    None,
    /// Each bank is split into a kernel part and a user part separated by
    /// `guard_rows` rows owned by no one. The kernel part is the side
    /// containing `kernel_base` (physical address, usually 1 MiB).
    KernelUserSplit {
        guard_rows: u64,
        kernel_base: u64,
        /// Defaults to rows_per_bank / 2 when None.
        split_row: Option<u64>,
    },
    /// No frame within `guard_rows` rows (same bank) of a frame allocated to
    /// a different domain may be handed out.
    DynamicAdjacency { guard_rows: u64 },
}

impl PartitionPolicy {
    pub fn split_default(guard_rows: u64) -> Self {
        PartitionPolicy::KernelUserSplit {
            guard_rows,
            kernel_base: 1 << 20,
            split_row: None,
        }
    }

    pub fn guard_rows(&self) -> u64 {
        match self {
            PartitionPolicy::None => 0,
            PartitionPolicy::KernelUserSplit { guard_rows, .. } => *guard_rows,
            PartitionPolicy::DynamicAdjacency { guard_rows } => *guard_rows,
        }
    }
}

/// Memory overhead of the partition policy: `guard_rows / rows_per_bank` for
/// the kernel-user split, 0 otherwise.
pub fn gcatt_overhead(policy: &PartitionPolicy, rows_per_bank: u64) -> f64 {
    match policy {
        PartitionPolicy::KernelUserSplit { guard_rows, .. } => {
            *guard_rows as f64 / rows_per_bank as f64
        }
        _ => 0.0,
    }
}

/// Overhead as a percentage with three decimal places, e.g. "0.003%".
pub fn overhead_percent_string(fraction: f64) -> String {
    format!("{:.3}%", fraction * 100.0)
}

struct SplitLayout {
    split_row: u64,
    guard_rows: u64,
    kernel_lower: bool,
}

pub struct Allocator {
    mapper: Mapper,
    policy: PartitionPolicy,
    split: Option<SplitLayout>,
    meta: Vec<FrameMeta>,
    available: Vec<bool>,
    free_lists: Vec<BTreeSet<u64>>,
    /// Block starts of live allocations.
    allocated: HashMap<u64, (u32, SecurityDomain)>,
    processes: HashMap<ProcessId, SecurityDomain>,
    next_domain: u32,
    /// Simulated per-process page tables: (pid, virtual page) -> pfn.
    page_tables: HashMap<(ProcessId, u64), u64>,
    /// Live allocation counts per (bank, row, domain); the index behind the
    /// adjacency policy check.
    row_domains: HashMap<(BankCoords, u64), Vec<(SecurityDomain, u64)>>,
    /// Search resume points: for a request (order, domain), free blocks of
    /// host order `ho` below `cursor[ho]` hold no compliant sub-block.
    /// Allocations only ever add conflicts, so the cursors stay valid until
    /// the next free (which clears them) or a split inserts a new block
    /// (which lower-bounds them).
    cursors: HashMap<(u32, SecurityDomain), [u64; (MAX_ORDER + 1) as usize]>,
    trace_enabled: bool,
    trace: Vec<String>,
}

impl Allocator {
    pub fn init(
        availability: &FrameAvailability,
        mapper: Mapper,
        policy: PartitionPolicy,
    ) -> Result<Self, AllocError> {
        let total = mapper.geometry().total_frames();
        if availability.total_frames() != total {
            return Err(AllocError::InvalidRequest(format!(
                "availability covers {} frames, geometry has {}",
                availability.total_frames(),
                total
            )));
        }
        let split = match policy {
            PartitionPolicy::KernelUserSplit {
                guard_rows,
                kernel_base,
                split_row,
            } => {
                let rows = mapper.geometry().rows_per_bank;
                let split_row = split_row.unwrap_or(rows / 2);
                if guard_rows < 1 {
                    return Err(AllocError::InvalidRequest("guard_rows must be >= 1".into()));
                }
                if split_row + guard_rows >= rows {
                    return Err(AllocError::InvalidRequest(format!(
                        "split_row {split_row} + guard {guard_rows} leaves no upper part"
                    )));
                }
                let kernel_row = mapper.decode(kernel_base)?.row;
                if kernel_row >= split_row && kernel_row < split_row + guard_rows {
                    return Err(AllocError::InvalidRequest(format!(
                        "kernel_base maps into the guard band at row {kernel_row}"
                    )));
                }
                Some(SplitLayout {
                    split_row,
                    guard_rows,
                    kernel_lower: kernel_row < split_row,
                })
            }
            PartitionPolicy::DynamicAdjacency { guard_rows } => {
                if guard_rows < 1 {
                    return Err(AllocError::InvalidRequest("guard_rows must be >= 1".into()));
                }
                None
            }
            PartitionPolicy::None => None,
        };

        let available: Vec<bool> = (0..total).map(|p| availability.is_available(p)).collect();
        let meta = available
            .iter()
            .map(|_| FrameMeta {
                state: FrameState::Free,
                domain: None,
            })
            .collect();
        let mut alloc = Allocator {
            mapper,
            policy,
            split,
            meta,
            available,
            free_lists: vec![BTreeSet::new(); (MAX_ORDER + 1) as usize],
            allocated: HashMap::new(),
            processes: HashMap::new(),
            next_domain: 2,
            page_tables: HashMap::new(),
            row_domains: HashMap::new(),
            cursors: HashMap::new(),
            trace_enabled: false,
            trace: Vec::new(),
        };
        alloc.populate_free_lists();
        Ok(alloc)
    }

    fn populate_free_lists(&mut self) {
        let total = self.available.len() as u64;
        let mut pfn = 0u64;
        while pfn < total {
            if !self.available[pfn as usize] {
                pfn += 1;
                continue;
            }
            let mut end = pfn;
            while end < total && self.available[end as usize] {
                end += 1;
            }
            // carve the run [pfn, end) into maximal aligned blocks
            let mut cur = pfn;
            while cur < end {
                let align = if cur == 0 {
                    MAX_ORDER
                } else {
                    cur.trailing_zeros().min(MAX_ORDER)
                };
                let mut order = align;
                while order > 0 && cur + (1u64 << order) > end {
                    order -= 1;
                }
                self.free_lists[order as usize].insert(cur);
                cur += 1u64 << order;
            }
            pfn = end;
        }
    }

    pub fn mapper(&self) -> &Mapper {
        &self.mapper
    }

    pub fn policy(&self) -> &PartitionPolicy {
        &self.policy
    }

    pub fn frame_meta(&self, pfn: u64) -> Option<&FrameMeta> {
        self.meta.get(pfn as usize)
    }

    pub fn frame_domain(&self, pfn: u64) -> Option<SecurityDomain> {
        self.meta.get(pfn as usize).and_then(|m| m.domain)
    }

    pub fn is_available(&self, pfn: u64) -> bool {
        self.available.get(pfn as usize).copied().unwrap_or(false)
    }

    pub fn free_frame_count(&self) -> u64 {
        self.free_lists
            .iter()
            .enumerate()
            .map(|(order, set)| set.len() as u64 * (1u64 << order))
            .sum()
    }

    /// A frame is free exactly when some free-list block covers it; kept in
    /// sync with `meta` (audited by `audit_buddy`).
    pub fn is_free(&self, pfn: u64) -> bool {
        self.meta
            .get(pfn as usize)
            .map(|m| m.state == FrameState::Free && self.available[pfn as usize])
            .unwrap_or(false)
    }

    pub fn register_process(&mut self, pid: ProcessId) -> SecurityDomain {
        if let Some(d) = self.processes.get(&pid) {
            return *d;
        }
        let domain = SecurityDomain(self.next_domain);
        self.next_domain += 1;
        self.processes.insert(pid, domain);
        domain
    }

    pub fn process_domain(&self, pid: ProcessId) -> Option<SecurityDomain> {
        self.processes.get(&pid).copied()
    }

    fn domain_for(&self, flags: AllocFlags) -> Result<SecurityDomain, AllocError> {
        match flags {
            AllocFlags::KernelAlloc => Ok(SecurityDomain::KERNEL),
            AllocFlags::UserFault { process: None } => Ok(SecurityDomain::USER),
            AllocFlags::UserFault { process: Some(pid) } => self
                .processes
                .get(&pid)
                .copied()
                .ok_or(AllocError::ProcessNotRegistered { pid }),
        }
    }

    fn note_alloc(&mut self, pfn: u64, domain: SecurityDomain) -> Result<(), AllocError> {
        if !matches!(self.policy, PartitionPolicy::DynamicAdjacency { .. }) {
            return Ok(());
        }
        let loc = self.mapper.frame_location(pfn)?;
        let counts = self
            .row_domains
            .entry((loc.bank_coords(), loc.row))
            .or_default();
        match counts.iter_mut().find(|(d, _)| *d == domain) {
            Some((_, n)) => *n += 1,
            None => counts.push((domain, 1)),
        }
        Ok(())
    }

    fn note_free(&mut self, pfn: u64, domain: SecurityDomain) -> Result<(), AllocError> {
        if !matches!(self.policy, PartitionPolicy::DynamicAdjacency { .. }) {
            return Ok(());
        }
        let loc = self.mapper.frame_location(pfn)?;
        let key = (loc.bank_coords(), loc.row);
        let counts = self.row_domains.get_mut(&key).expect("row was occupied");
        let i = counts
            .iter()
            .position(|(d, _)| *d == domain)
            .expect("domain was counted");
        counts[i].1 -= 1;
        if counts[i].1 == 0 {
            counts.swap_remove(i);
        }
        if counts.is_empty() {
            self.row_domains.remove(&key);
        }
        Ok(())
    }

    /// Pure partition-policy predicate on a candidate block.
    pub fn policy_check(&self, block: Block, domain: SecurityDomain) -> bool {
        match &self.policy {
            PartitionPolicy::None => true,
            PartitionPolicy::KernelUserSplit { .. } => {
                let layout = self.split.as_ref().expect("split layout initialized");
                block.frames().all(|pfn| {
                    let row = match self.mapper.frame_location(pfn) {
                        Ok(loc) => loc.row,
                        Err(_) => return false,
                    };
                    if row >= layout.split_row && row < layout.split_row + layout.guard_rows {
                        return false; // guard rows belong to no one
                    }
                    let lower = row < layout.split_row;
                    let wants_lower = domain.is_kernel() == layout.kernel_lower;
                    lower == wants_lower
                })
            }
            PartitionPolicy::DynamicAdjacency { guard_rows } => {
                let rows = self.mapper.geometry().rows_per_bank;
                // Only allocated frames occupy `row_domains`, so a block's
                // own (free) frames never conflict with themselves.
                block.frames().all(|pfn| {
                    let loc = match self.mapper.frame_location(pfn) {
                        Ok(loc) => loc,
                        Err(_) => return false,
                    };
                    let bank = loc.bank_coords();
                    let low = loc.row.saturating_sub(*guard_rows);
                    let high = (loc.row + guard_rows).min(rows - 1);
                    (low..=high).all(|row| {
                        self.row_domains
                            .get(&(bank, row))
                            .is_none_or(|v| v.iter().all(|&(d, _)| d == domain))
                    })
                })
            }
        }
    }

    /// Allocates a policy-compliant block of `2^order` frames, searching
    /// lowest-address-first within the smallest sufficient order before
    /// moving to larger orders. Returns out-of-memory when no compliant
    /// block exists, even if non-compliant free memory remains.
    pub fn alloc(&mut self, req: AllocRequest) -> Result<Block, AllocError> {
        if req.order > MAX_ORDER {
            return Err(AllocError::InvalidRequest(format!(
                "order {} exceeds max {MAX_ORDER}",
                req.order
            )));
        }
        let domain = self.domain_for(req.flags)?;
        let found = self.find_block(req.order, domain);
        let Some((host, host_order, target)) = found else {
            if self.trace_enabled {
                self.trace.push(format!("alloc {} {} -> OOM", req.order, domain));
            }
            return Err(AllocError::OutOfMemory);
        };
        self.free_lists[host_order as usize].remove(&host);
        // split the host block down until only the target block remains
        let mut cur = host;
        let mut cur_order = host_order;
        while cur_order > req.order {
            cur_order -= 1;
            let half = 1u64 << cur_order;
            let (keep, give_back) = if target < cur + half {
                (cur, cur + half)
            } else {
                (cur + half, cur)
            };
            self.free_lists[cur_order as usize].insert(give_back);
            for c in self.cursors.values_mut() {
                c[cur_order as usize] = c[cur_order as usize].min(give_back);
            }
            cur = keep;
        }
        debug_assert_eq!(cur, target);
        let block = Block {
            pfn: target,
            order: req.order,
        };
        for pfn in block.frames() {
            self.meta[pfn as usize] = FrameMeta {
                state: FrameState::Allocated,
                domain: Some(domain),
            };
            self.note_alloc(pfn, domain)?;
        }
        self.allocated.insert(target, (req.order, domain));
        if self.trace_enabled {
            self.trace
                .push(format!("alloc {} {} -> {}", req.order, domain, target));
        }
        Ok(block)
    }

    /// Finds (host block, host order, target sub-block) for the first
    /// policy-compliant placement.
    fn find_block(&mut self, order: u32, domain: SecurityDomain) -> Option<(u64, u32, u64)> {
        let mut cursor = *self
            .cursors
            .entry((order, domain))
            .or_insert([0; (MAX_ORDER + 1) as usize]);
        let mut result = None;
        'search: for host_order in order..=MAX_ORDER {
            let ho = host_order as usize;
            for &host in self.free_lists[ho].range(cursor[ho]..) {
                let step = 1u64 << order;
                let count = 1u64 << (host_order - order);
                for i in 0..count {
                    let sub = host + i * step;
                    if self.policy_check(Block { pfn: sub, order }, domain) {
                        cursor[ho] = host;
                        result = Some((host, host_order, sub));
                        break 'search;
                    }
                }
            }
            cursor[ho] = u64::MAX;
        }
        self.cursors.insert((order, domain), cursor);
        result
    }

    /// Frees the block starting at `pfn`, resets its domain and coalesces
    /// buddies greedily to maximal order.
    pub fn free(&mut self, pfn: u64) -> Result<(), AllocError> {
        let Some((order, domain)) = self.allocated.remove(&pfn) else {
            if self
                .meta
                .get(pfn as usize)
                .map(|m| m.state == FrameState::Free)
                .unwrap_or(false)
            {
                return Err(AllocError::DoubleFree { pfn });
            }
            return Err(AllocError::RangeNotAllocated { pfn });
        };
        self.cursors.clear();
        for f in (Block { pfn, order }).frames() {
            self.meta[f as usize] = FrameMeta {
                state: FrameState::Free,
                domain: None,
            };
            self.note_free(f, domain)?;
        }
        let mut cur = pfn;
        let mut cur_order = order;
        while cur_order < MAX_ORDER {
            let buddy = cur ^ (1u64 << cur_order);
            if self.free_lists[cur_order as usize].remove(&buddy) {
                cur = cur.min(buddy);
                cur_order += 1;
            } else {
                break;
            }
        }
        self.free_lists[cur_order as usize].insert(cur);
        if self.trace_enabled {
            self.trace.push(format!("free {pfn} {order}"));
        }
        Ok(())
    }

    /// Page-fault path: order-0 allocation in the process' domain, recorded
    /// in its simulated page table.
    pub fn fault_in(&mut self, pid: ProcessId, virtual_page: u64) -> Result<u64, AllocError> {
        if !self.processes.contains_key(&pid) {
            return Err(AllocError::ProcessNotRegistered { pid });
        }
        let block = self.alloc(AllocRequest::process(0, pid))?;
        self.page_tables.insert((pid, virtual_page), block.pfn);
        Ok(block.pfn)
    }

    pub fn mapping(&self, pid: ProcessId, virtual_page: u64) -> Option<u64> {
        self.page_tables.get(&(pid, virtual_page)).copied()
    }

    pub fn allocations(&self) -> impl Iterator<Item = (Block, SecurityDomain)> + '_ {
        self.allocated
            .iter()
            .map(|(&pfn, &(order, domain))| (Block { pfn, order }, domain))
    }

    /// Enables the append-only allocation trace log.
    pub fn enable_trace(&mut self) {
        self.trace_enabled = true;
    }

    pub fn trace(&self) -> &[String] {
        &self.trace
    }

    pub fn take_trace(&mut self) -> Vec<String> {
        std::mem::take(&mut self.trace)
    }

    /// Verifies the buddy invariants: free lists partition exactly the free
    /// available frames, blocks are order-aligned and within range, no free
    /// block has a free buddy at the same order, and domain hygiene holds.
    pub fn audit_buddy(&self) -> Result<(), String> {
        let total = self.available.len() as u64;
        let mut covered = vec![0u32; total as usize];
        for (order, set) in self.free_lists.iter().enumerate() {
            for &pfn in set {
                if pfn % (1u64 << order) != 0 {
                    return Err(format!("free block {pfn} misaligned for order {order}"));
                }
                if pfn + (1u64 << order) > total {
                    return Err(format!("free block {pfn} order {order} exceeds range"));
                }
                if (order as u32) < MAX_ORDER && set.contains(&(pfn ^ (1u64 << order))) {
                    return Err(format!(
                        "free buddies {pfn} and {} not coalesced at order {order}",
                        pfn ^ (1u64 << order)
                    ));
                }
                for f in pfn..pfn + (1u64 << order) {
                    covered[f as usize] += 1;
                }
            }
        }
        let mut allocated = vec![false; total as usize];
        for (&pfn, &(order, _)) in &self.allocated {
            for f in pfn..pfn + (1u64 << order) {
                allocated[f as usize] = true;
            }
        }
        for pfn in 0..total {
            let idx = pfn as usize;
            let meta = &self.meta[idx];
            if !self.available[idx] {
                if covered[idx] != 0 || allocated[idx] {
                    return Err(format!("unavailable frame {pfn} is in use"));
                }
                continue;
            }
            match meta.state {
                FrameState::Free => {
                    if covered[idx] != 1 {
                        return Err(format!(
                            "free frame {pfn} covered by {} free blocks",
                            covered[idx]
                        ));
                    }
                    if allocated[idx] {
                        return Err(format!("frame {pfn} both free and allocated"));
                    }
                    if meta.domain.is_some() {
                        return Err(format!("free frame {pfn} carries a domain"));
                    }
                }
                FrameState::Allocated => {
                    if covered[idx] != 0 {
                        return Err(format!("allocated frame {pfn} also in a free list"));
                    }
                    if !allocated[idx] {
                        return Err(format!("allocated frame {pfn} not in any block"));
                    }
                    if meta.domain.is_none() {
                        return Err(format!("allocated frame {pfn} has no domain"));
                    }
                }
            }
        }
        Ok(())
    }

    /// Verifies that no two frames with distinct domains sit within
    /// `guard_rows` rows of each other in the same bank.
    pub fn audit_isolation(&self, guard_rows: u64) -> Result<(), String> {
        // Isolation is only promised between domains the policy separates:
        // everything pairwise under dynamic adjacency, kernel vs user side
        // under the split, nothing without a policy.
        let effective = |d: SecurityDomain| -> SecurityDomain {
            match self.policy {
                PartitionPolicy::KernelUserSplit { .. } if !d.is_kernel() => SecurityDomain::USER,
                _ => d,
            }
        };
        if matches!(self.policy, PartitionPolicy::None) {
            return Ok(());
        }
        let mut per_bank: HashMap<crate::dram::BankCoords, Vec<(u64, SecurityDomain, u64)>> =
            HashMap::new();
        for (pfn, meta) in self.meta.iter().enumerate() {
            if let Some(domain) = meta.domain.map(effective) {
                let loc = self
                    .mapper
                    .frame_location(pfn as u64)
                    .map_err(|e| e.to_string())?;
                per_bank
                    .entry(loc.bank_coords())
                    .or_default()
                    .push((loc.row, domain, pfn as u64));
            }
        }
        for entries in per_bank.values_mut() {
            entries.sort_unstable();
            for i in 0..entries.len() {
                for j in i + 1..entries.len() {
                    let (r1, d1, p1) = entries[i];
                    let (r2, d2, p2) = entries[j];
                    if r2 - r1 > guard_rows {
                        break;
                    }
                    if d1 != d2 {
                        return Err(format!(
                            "frames {p1} ({d1}, row {r1}) and {p2} ({d2}, row {r2}) \
                             violate guard distance {guard_rows}"
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}
