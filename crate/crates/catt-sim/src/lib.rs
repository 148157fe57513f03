//! Deterministic desk-scale simulator of DRAM rowhammer faults and two
//! software defenses: memory-map blacklisting (B-CATT) and security-domain
//! partitioned physical allocation (G-CATT).
//!
//! The crate models DRAM geometry and address mapping, vulnerable-cell
//! activation dynamics, the blacklisting pipeline, a buddy-style page
//! allocator with partitioning policies, and an attack harness replaying the
//! double-sided scan procedure and a page-table-spray privilege-escalation
//! exploit against the simulated machine.

pub mod attack;
pub mod bcatt;
pub mod cli;
pub mod dram;
pub mod fault;
pub mod gcatt;
pub mod scenario;
