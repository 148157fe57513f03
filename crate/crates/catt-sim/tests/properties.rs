//! Randomized invariant checks for the mapper, the blacklisting pipeline,
//! the allocator and the fault model.

use proptest::prelude::*;

use catt_sim::bcatt::{
    self, Blacklist, FrameAvailability, MemoryMap, MemoryRegion, RegionKind,
};
use catt_sim::dram::{BitSwizzle, DramGeometry, Mapper, MappingScheme};
use catt_sim::fault::{DramState, Sidedness, VulnerabilityProfile, VulnerableCell};
use catt_sim::gcatt::{AllocError, AllocRequest, Allocator, PartitionPolicy};

fn arb_geometry() -> impl Strategy<Value = DramGeometry> {
    (
        prop_oneof![Just(512u64), Just(1024), Just(4096)],
        1u64..=4,
        1u64..=8,
        1u64..=2,
        1u64..=2,
        2u64..=64,
    )
        .prop_map(
            |(page_size, pages_per_row, banks_per_rank, ranks_per_dimm, dimms, rows_per_bank)| {
                DramGeometry {
                    page_size,
                    pages_per_row,
                    banks_per_rank,
                    ranks_per_dimm,
                    dimms,
                    rows_per_bank,
                    channels: 1,
                }
            },
        )
}

/// Power-of-two field sizes, as the bit-swizzle schemes require.
fn arb_pow2_geometry() -> impl Strategy<Value = DramGeometry> {
    (0u32..=2, 0u32..=3, 0u32..=1, 0u32..=1, 2u32..=6).prop_map(
        |(pages, banks, ranks, dimms, rows)| DramGeometry {
            page_size: 4096,
            pages_per_row: 1 << pages,
            banks_per_rank: 1 << banks,
            ranks_per_dimm: 1 << ranks,
            dimms: 1 << dimms,
            rows_per_bank: 1 << rows,
            channels: 1,
        },
    )
}

proptest! {
    #[test]
    fn decode_encode_roundtrip_linear(g in arb_geometry(), frac in 0.0f64..1.0) {
        let mapper = Mapper::linear(g).unwrap();
        let pa = (frac * g.total_bytes() as f64) as u64;
        let loc = mapper.decode(pa).unwrap();
        prop_assert_eq!(mapper.encode(loc).unwrap(), pa);
        prop_assert_eq!(loc.row, g.row_index(pa).unwrap());
    }

    #[test]
    fn decode_encode_roundtrip_swizzle(g in arb_pow2_geometry(), frac in 0.0f64..1.0) {
        let swizzle = BitSwizzle::linear(&g).unwrap();
        let mapper = Mapper::new(g, MappingScheme::CustomBitSwizzle(swizzle)).unwrap();
        let pa = (frac * g.total_bytes() as f64) as u64;
        let loc = mapper.decode(pa).unwrap();
        prop_assert_eq!(mapper.encode(loc).unwrap(), pa);
    }

    /// The identity swizzle agrees with the arithmetic mapping everywhere.
    #[test]
    fn linear_swizzle_matches_linear(g in arb_pow2_geometry(), frac in 0.0f64..1.0) {
        let swizzle = BitSwizzle::linear(&g).unwrap();
        let sw = Mapper::new(g, MappingScheme::CustomBitSwizzle(swizzle)).unwrap();
        let lin = Mapper::linear(g).unwrap();
        let pa = (frac * g.total_bytes() as f64) as u64;
        prop_assert_eq!(sw.decode(pa).unwrap(), lin.decode(pa).unwrap());
    }

    #[test]
    fn geometry_digest_is_stable_and_discriminating(g in arb_geometry()) {
        let a = Mapper::linear(g).unwrap();
        let b = Mapper::linear(g).unwrap();
        prop_assert_eq!(a.digest(), b.digest());
        let bigger = DramGeometry { rows_per_bank: g.rows_per_bank + 1, ..g };
        prop_assert_ne!(a.digest(), Mapper::linear(bigger).unwrap().digest());
    }

    #[test]
    fn blacklist_text_roundtrip(pfns in proptest::collection::btree_set(0u64..100_000, 0..200)) {
        let bl = Blacklist::new(pfns.iter().copied());
        let back = Blacklist::from_text(&bl.to_text()).unwrap();
        prop_assert_eq!(bl.pfns().collect::<Vec<_>>(), back.pfns().collect::<Vec<_>>());
    }

    #[test]
    fn memory_map_json_roundtrip(lengths in proptest::collection::vec(1u64..0x10000, 1..20)) {
        // adjacent regions with alternating kinds are already coalesced
        let mut base = 0u64;
        let mut regions = Vec::new();
        for (i, len) in lengths.iter().enumerate() {
            let kind = if i % 2 == 0 { RegionKind::Usable } else { RegionKind::Reserved };
            regions.push(MemoryRegion { base, length: *len, kind });
            base += len;
        }
        let map = MemoryMap::new(regions).unwrap();
        let back = MemoryMap::from_json(&map.to_json()).unwrap();
        prop_assert_eq!(map.regions(), back.regions());
        prop_assert_eq!(map.usable_bytes() + 0, back.usable_bytes());
    }
}

fn small_mapper() -> Mapper {
    Mapper::linear(DramGeometry {
        page_size: 4096,
        pages_per_row: 2,
        banks_per_rank: 2,
        ranks_per_dimm: 1,
        dimms: 1,
        rows_per_bank: 32,
        channels: 1,
    })
    .unwrap()
}

proptest! {
    /// Extending a map removes exactly the blacklisted frames from the
    /// usable area, and doing it twice changes nothing.
    #[test]
    fn extend_map_is_exact_and_idempotent(
        pfns in proptest::collection::btree_set(0u64..128, 0..40),
    ) {
        let mapper = small_mapper();
        let bl = Blacklist::new(pfns.iter().copied());
        let base = MemoryMap::all_usable(mapper.geometry().total_bytes());
        let once = bcatt::extend_map(&base, &bl, &mapper).unwrap();
        let twice = bcatt::extend_map(&once, &bl, &mapper).unwrap();
        prop_assert_eq!(once.regions(), twice.regions());
        prop_assert_eq!(
            base.usable_bytes() - once.usable_bytes(),
            pfns.len() as u64 * mapper.geometry().page_size
        );
        let avail = bcatt::apply_map(&once, &mapper);
        for pfn in 0..mapper.geometry().total_frames() {
            prop_assert_eq!(avail.is_available(pfn), !pfns.contains(&pfn));
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Alloc { order: u32, kind: u8 },
    Free { slot: usize },
}

fn arb_ops(len: usize) -> impl Strategy<Value = Vec<Op>> {
    proptest::collection::vec(
        prop_oneof![
            (0u32..=3, 0u8..4).prop_map(|(order, kind)| Op::Alloc { order, kind }),
            (0usize..1usize << 16).prop_map(|slot| Op::Free { slot }),
        ],
        0..len,
    )
}

fn arb_policy() -> impl Strategy<Value = PartitionPolicy> {
    prop_oneof![
        Just(PartitionPolicy::None),
        (1u64..=2).prop_map(|guard_rows| PartitionPolicy::KernelUserSplit {
            guard_rows,
            kernel_base: 0,
            split_row: None,
        }),
        (1u64..=2).prop_map(|guard_rows| PartitionPolicy::DynamicAdjacency { guard_rows }),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Buddy and isolation audits hold after arbitrary alloc/free traces,
    /// and every live allocation can be freed exactly once.
    #[test]
    fn allocator_survives_random_traces(ops in arb_ops(300), policy in arb_policy()) {
        let mapper = small_mapper();
        let guard = policy.guard_rows();
        let avail = FrameAvailability::all_available(mapper.geometry().total_frames());
        let mut allocator = Allocator::init(&avail, mapper, policy).unwrap();
        allocator.register_process(1);
        allocator.register_process(2);
        let mut live: Vec<u64> = Vec::new();
        for op in ops {
            match op {
                Op::Alloc { order, kind } => {
                    let req = match kind {
                        0 => AllocRequest::kernel(order),
                        1 => AllocRequest::user(order),
                        2 => AllocRequest::process(order, 1),
                        _ => AllocRequest::process(order, 2),
                    };
                    match allocator.alloc(req) {
                        Ok(block) => live.push(block.pfn),
                        Err(AllocError::OutOfMemory) => {}
                        Err(e) => return Err(TestCaseError::fail(e.to_string())),
                    }
                }
                Op::Free { slot } => {
                    if !live.is_empty() {
                        let pfn = live.swap_remove(slot % live.len());
                        allocator.free(pfn).unwrap();
                    }
                }
            }
        }
        allocator.audit_buddy().map_err(TestCaseError::fail)?;
        allocator.audit_isolation(guard).map_err(TestCaseError::fail)?;
        for pfn in live.clone() {
            allocator.free(pfn).unwrap();
            let double = matches!(allocator.free(pfn), Err(AllocError::DoubleFree { .. }));
            prop_assert!(double, "freeing pfn {} twice did not error", pfn);
        }
        allocator.audit_buddy().map_err(TestCaseError::fail)?;
    }
}

fn arb_cells(mapper: &Mapper, max: usize) -> impl Strategy<Value = Vec<VulnerableCell>> {
    let g = *mapper.geometry();
    proptest::collection::btree_set(
        (
            0..g.banks_per_rank,
            1..g.rows_per_bank - 1,
            0..g.row_bytes(),
            0u8..8,
            prop::bool::ANY,
        ),
        0..max,
    )
    .prop_map(move |set| {
        set.into_iter()
            .map(|(bank, row, byte_offset, bit, double)| VulnerableCell {
                dimm: 0,
                rank: 0,
                bank,
                row,
                byte_offset,
                bit,
                threshold: 100,
                reliability: 0.5,
                sidedness: if double {
                    Sidedness::DoubleRequired
                } else {
                    Sidedness::SingleSufficient
                },
            })
            .collect()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Without reaching any threshold, memory never changes.
    #[test]
    fn no_spontaneous_flips(seed in any::<u64>()) {
        let mapper = small_mapper();
        let cells = vec![VulnerableCell {
            dimm: 0, rank: 0, bank: 0, row: 5,
            byte_offset: 0, bit: 3, threshold: 100, reliability: 1.0,
            sidedness: Sidedness::SingleSufficient,
        }];
        let profile = VulnerabilityProfile::new(&mapper, cells).unwrap();
        let mut state = DramState::new(mapper.clone());
        for bank in mapper.banks() {
            state.hammer(bank, 4, 99).unwrap();
            state.hammer(bank, 6, 99).unwrap();
        }
        let events = state.evaluate_flips(&profile, seed).unwrap();
        prop_assert!(events.is_empty());
        prop_assert!(state.flip_log().is_empty());
    }

    /// Identical seeds and activation sequences give identical flip logs;
    /// each cell flips at most once per epoch.
    #[test]
    fn fault_model_is_deterministic(
        seed in any::<u64>(),
        cells in arb_cells(&small_mapper(), 24),
        rows in proptest::collection::vec(0u64..32, 1..12),
    ) {
        let mapper = small_mapper();
        let profile = VulnerabilityProfile::new(&mapper, cells).unwrap();
        let run = || {
            let mut state = DramState::new(mapper.clone());
            for bank in mapper.banks() {
                for &row in &rows {
                    state.hammer(bank, row, 100).unwrap();
                }
            }
            let events = state.evaluate_flips(&profile, seed).unwrap();
            // a second evaluation in the same epoch must be a no-op
            let again = state.evaluate_flips(&profile, seed).unwrap();
            (events, again)
        };
        let (first, once_more) = run();
        let (second, _) = run();
        prop_assert_eq!(&first, &second);
        prop_assert!(once_more.is_empty());
        prop_assert!(first.len() <= profile.cells.len());
    }
}
