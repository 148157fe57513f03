//! Simulated DRAM geometry and physical-address <-> DRAM coordinate translation.
//!
//! Physical memory is modeled as `dimms * ranks_per_dimm * banks_per_rank` banks,
//! each holding `rows_per_bank` rows of `pages_per_row` page frames. The default
//! mapping (`linear-rowgroup`) lays rows out major, with bank/rank/dimm
//! interleaved beneath, which is the unique simple scheme consistent with
//! `Row(PA) = PA / (PageSize * PagesPerDIMM * DIMMs)`. Vendor-specific layouts
//! can be expressed with a custom bit-swizzle table instead.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DramError {
    #[error("physical address {pa:#x} out of range (total {total:#x} bytes)")]
    AddressOutOfRange { pa: u64, total: u64 },
    #[error("location {0:?} out of range for geometry")]
    LocationOutOfRange(DramLocation),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("invalid mapping scheme: {0}")]
    InvalidScheme(String),
}

/// Channel/DIMM/rank/bank/row/page parameters of the simulated machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DramGeometry {
    pub page_size: u64,
    pub pages_per_row: u64,
    pub banks_per_rank: u64,
    pub ranks_per_dimm: u64,
    pub dimms: u64,
    pub rows_per_bank: u64,
    /// Fixed to 1 in v1; field reserved.
    pub channels: u64,
}

impl DramGeometry {
    /// DDR3 x86 defaults: 4 KiB pages, 2 pages per row, 8 banks per rank,
    /// 2 ranks per DIMM, 2^15 rows per bank.
    pub fn ddr3_default(dimms: u64) -> Self {
        DramGeometry {
            page_size: 4096,
            pages_per_row: 2,
            banks_per_rank: 8,
            ranks_per_dimm: 2,
            dimms,
            rows_per_bank: 1 << 15,
            channels: 1,
        }
    }

    /// DDR4 preset: banks per rank doubled relative to DDR3.
    pub fn ddr4_default(dimms: u64) -> Self {
        DramGeometry {
            banks_per_rank: 16,
            ..Self::ddr3_default(dimms)
        }
    }

    pub fn validate(&self) -> Result<(), DramError> {
        let fields = [
            ("page_size", self.page_size),
            ("pages_per_row", self.pages_per_row),
            ("banks_per_rank", self.banks_per_rank),
            ("ranks_per_dimm", self.ranks_per_dimm),
            ("dimms", self.dimms),
            ("rows_per_bank", self.rows_per_bank),
            ("channels", self.channels),
        ];
        for (name, v) in fields {
            if v < 1 {
                return Err(DramError::InvalidGeometry(format!("{name} must be >= 1")));
            }
        }
        if !self.page_size.is_power_of_two() {
            return Err(DramError::InvalidGeometry(
                "page_size must be a power of two".into(),
            ));
        }
        if self.channels != 1 {
            return Err(DramError::InvalidGeometry(
                "channels is fixed to 1 in v1".into(),
            ));
        }
        self.checked_total_bytes().ok_or_else(|| {
            DramError::InvalidGeometry("total_bytes overflows 64 bits".into())
        })?;
        Ok(())
    }

    fn checked_total_bytes(&self) -> Option<u64> {
        self.page_size
            .checked_mul(self.pages_per_row)?
            .checked_mul(self.banks_per_rank)?
            .checked_mul(self.ranks_per_dimm)?
            .checked_mul(self.dimms)?
            .checked_mul(self.rows_per_bank)
    }

    pub fn pages_per_dimm(&self) -> u64 {
        self.pages_per_row * self.banks_per_rank * self.ranks_per_dimm
    }

    /// Bytes covered by one row of one bank.
    pub fn row_bytes(&self) -> u64 {
        self.page_size * self.pages_per_row
    }

    /// Bytes covered by one row index across all banks, ranks and DIMMs.
    pub fn rowgroup_bytes(&self) -> u64 {
        self.row_bytes() * self.banks_per_rank * self.ranks_per_dimm * self.dimms
    }

    pub fn total_bytes(&self) -> u64 {
        self.rowgroup_bytes() * self.rows_per_bank
    }

    pub fn total_frames(&self) -> u64 {
        self.total_bytes() / self.page_size
    }

    /// Row index of a physical address:
    /// `Row(PA) = PA / (PageSize * PagesPerDIMM * DIMMs)`.
    pub fn row_index(&self, pa: u64) -> Result<u64, DramError> {
        if pa >= self.total_bytes() {
            return Err(DramError::AddressOutOfRange {
                pa,
                total: self.total_bytes(),
            });
        }
        Ok(pa / (self.page_size * self.pages_per_dimm() * self.dimms))
    }
}

/// Decoded coordinates of a physical address.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DramLocation {
    pub dimm: u64,
    pub rank: u64,
    pub bank: u64,
    pub row: u64,
    /// Byte offset within the row (0..row_bytes).
    pub offset: u64,
}

/// (dimm, rank, bank) triple identifying one bank; rows are adjacent only
/// within the same bank.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct BankCoords {
    pub dimm: u64,
    pub rank: u64,
    pub bank: u64,
}

impl DramLocation {
    pub fn bank_coords(&self) -> BankCoords {
        BankCoords {
            dimm: self.dimm,
            rank: self.rank,
            bank: self.bank,
        }
    }
}

/// Per-field physical-address bit assignment. Bits are listed LSB-first and
/// must form a permutation of `[0, log2(total_bytes))`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BitSwizzle {
    pub offset_bits: Vec<u32>,
    pub bank_bits: Vec<u32>,
    pub rank_bits: Vec<u32>,
    pub dimm_bits: Vec<u32>,
    pub row_bits: Vec<u32>,
}

impl BitSwizzle {
    /// The bit layout equivalent to linear-rowgroup (valid for power-of-two
    /// geometries).
    pub fn linear(g: &DramGeometry) -> Result<Self, DramError> {
        let widths = field_widths(g)?;
        let mut next = 0u32;
        let mut take = |n: u32| {
            let bits: Vec<u32> = (next..next + n).collect();
            next += n;
            bits
        };
        Ok(BitSwizzle {
            offset_bits: take(widths.offset),
            bank_bits: take(widths.bank),
            rank_bits: take(widths.rank),
            dimm_bits: take(widths.dimm),
            row_bits: take(widths.row),
        })
    }

    /// Linear layout with the (single) rank bit relocated to `rank_bit`, as
    /// observed on Ivy Bridge where physical-address bit 20 selects the rank.
    pub fn with_rank_bit(g: &DramGeometry, rank_bit: u32) -> Result<Self, DramError> {
        let widths = field_widths(g)?;
        if widths.rank != 1 {
            return Err(DramError::InvalidScheme(
                "rank-bit preset requires exactly 2 ranks".into(),
            ));
        }
        let address_bits = widths.total();
        if rank_bit >= address_bits {
            return Err(DramError::InvalidScheme(format!(
                "rank bit {rank_bit} outside address width {address_bits}"
            )));
        }
        let mut pool: Vec<u32> = (0..address_bits).filter(|b| *b != rank_bit).collect();
        let mut take = |n: u32| pool.drain(..n as usize).collect::<Vec<u32>>();
        Ok(BitSwizzle {
            offset_bits: take(widths.offset),
            bank_bits: take(widths.bank),
            rank_bits: vec![rank_bit],
            dimm_bits: take(widths.dimm),
            row_bits: take(widths.row),
        })
    }

    fn validate(&self, g: &DramGeometry) -> Result<(), DramError> {
        let widths = field_widths(g)?;
        let checks = [
            ("offset", &self.offset_bits, widths.offset),
            ("bank", &self.bank_bits, widths.bank),
            ("rank", &self.rank_bits, widths.rank),
            ("dimm", &self.dimm_bits, widths.dimm),
            ("row", &self.row_bits, widths.row),
        ];
        let mut seen = vec![false; widths.total() as usize];
        for (name, bits, want) in checks {
            if bits.len() as u32 != want {
                return Err(DramError::InvalidScheme(format!(
                    "{name} needs {want} bits, got {}",
                    bits.len()
                )));
            }
            for &b in bits {
                let slot = seen
                    .get_mut(b as usize)
                    .ok_or_else(|| DramError::InvalidScheme(format!("bit {b} out of range")))?;
                if *slot {
                    return Err(DramError::InvalidScheme(format!("bit {b} assigned twice")));
                }
                *slot = true;
            }
        }
        Ok(())
    }
}

struct FieldWidths {
    offset: u32,
    bank: u32,
    rank: u32,
    dimm: u32,
    row: u32,
}

impl FieldWidths {
    fn total(&self) -> u32 {
        self.offset + self.bank + self.rank + self.dimm + self.row
    }
}

fn field_widths(g: &DramGeometry) -> Result<FieldWidths, DramError> {
    let log2 = |name: &str, v: u64| -> Result<u32, DramError> {
        if v.is_power_of_two() {
            Ok(v.trailing_zeros())
        } else {
            Err(DramError::InvalidScheme(format!(
                "bit-swizzle requires power-of-two {name}, got {v}"
            )))
        }
    };
    Ok(FieldWidths {
        offset: log2("row_bytes", g.row_bytes())?,
        bank: log2("banks_per_rank", g.banks_per_rank)?,
        rank: log2("ranks_per_dimm", g.ranks_per_dimm)?,
        dimm: log2("dimms", g.dimms)?,
        row: log2("rows_per_bank", g.rows_per_bank)?,
    })
}

fn gather_bits(pa: u64, bits: &[u32]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | (((pa >> b) & 1) << i))
}

fn scatter_bits(value: u64, bits: &[u32]) -> u64 {
    bits.iter()
        .enumerate()
        .fold(0, |acc, (i, &b)| acc | (((value >> i) & 1) << b))
}

/// Address-to-coordinate mapping scheme. Real chipsets use undocumented,
/// reverse-engineered layouts; the swizzle variant lets those be plugged in
/// as configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MappingScheme {
    LinearRowgroup,
    CustomBitSwizzle(BitSwizzle),
}

impl Default for MappingScheme {
    fn default() -> Self {
        MappingScheme::LinearRowgroup
    }
}

/// Validated geometry + scheme pair providing bidirectional translation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mapper {
    geometry: DramGeometry,
    scheme: MappingScheme,
}

impl Mapper {
    pub fn new(geometry: DramGeometry, scheme: MappingScheme) -> Result<Self, DramError> {
        geometry.validate()?;
        if let MappingScheme::CustomBitSwizzle(sw) = &scheme {
            sw.validate(&geometry)?;
        }
        Ok(Mapper { geometry, scheme })
    }

    pub fn linear(geometry: DramGeometry) -> Result<Self, DramError> {
        Self::new(geometry, MappingScheme::LinearRowgroup)
    }

    pub fn geometry(&self) -> &DramGeometry {
        &self.geometry
    }

    pub fn scheme(&self) -> &MappingScheme {
        &self.scheme
    }

    /// Digest binding vulnerability profiles and result files to this
    /// geometry + scheme.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        let g = &self.geometry;
        h.update(format!(
            "geometry:{}:{}:{}:{}:{}:{}:{}",
            g.page_size,
            g.pages_per_row,
            g.banks_per_rank,
            g.ranks_per_dimm,
            g.dimms,
            g.rows_per_bank,
            g.channels
        ));
        match &self.scheme {
            MappingScheme::LinearRowgroup => h.update(";scheme:linear-rowgroup"),
            MappingScheme::CustomBitSwizzle(sw) => {
                h.update(format!(
                    ";scheme:custom-bit-swizzle:{:?}:{:?}:{:?}:{:?}:{:?}",
                    sw.offset_bits, sw.bank_bits, sw.rank_bits, sw.dimm_bits, sw.row_bits
                ));
            }
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn decode(&self, pa: u64) -> Result<DramLocation, DramError> {
        let g = &self.geometry;
        if pa >= g.total_bytes() {
            return Err(DramError::AddressOutOfRange {
                pa,
                total: g.total_bytes(),
            });
        }
        match &self.scheme {
            MappingScheme::LinearRowgroup => {
                let row = pa / g.rowgroup_bytes();
                let rem = pa % g.rowgroup_bytes();
                let bank_linear = rem / g.row_bytes();
                let offset = rem % g.row_bytes();
                Ok(DramLocation {
                    dimm: bank_linear / (g.banks_per_rank * g.ranks_per_dimm),
                    rank: (bank_linear / g.banks_per_rank) % g.ranks_per_dimm,
                    bank: bank_linear % g.banks_per_rank,
                    row,
                    offset,
                })
            }
            MappingScheme::CustomBitSwizzle(sw) => Ok(DramLocation {
                dimm: gather_bits(pa, &sw.dimm_bits),
                rank: gather_bits(pa, &sw.rank_bits),
                bank: gather_bits(pa, &sw.bank_bits),
                row: gather_bits(pa, &sw.row_bits),
                offset: gather_bits(pa, &sw.offset_bits),
            }),
        }
    }

    pub fn encode(&self, loc: DramLocation) -> Result<u64, DramError> {
        let g = &self.geometry;
        if loc.dimm >= g.dimms
            || loc.rank >= g.ranks_per_dimm
            || loc.bank >= g.banks_per_rank
            || loc.row >= g.rows_per_bank
            || loc.offset >= g.row_bytes()
        {
            return Err(DramError::LocationOutOfRange(loc));
        }
        match &self.scheme {
            MappingScheme::LinearRowgroup => {
                let bank_linear =
                    loc.bank + g.banks_per_rank * (loc.rank + g.ranks_per_dimm * loc.dimm);
                Ok(loc.row * g.rowgroup_bytes() + bank_linear * g.row_bytes() + loc.offset)
            }
            MappingScheme::CustomBitSwizzle(sw) => Ok(scatter_bits(loc.dimm, &sw.dimm_bits)
                | scatter_bits(loc.rank, &sw.rank_bits)
                | scatter_bits(loc.bank, &sw.bank_bits)
                | scatter_bits(loc.row, &sw.row_bits)
                | scatter_bits(loc.offset, &sw.offset_bits)),
        }
    }

    /// Page frame numbers backing one row of one bank, sorted ascending.
    pub fn frames_in_row(&self, bank: BankCoords, row: u64) -> Result<Vec<u64>, DramError> {
        let g = &self.geometry;
        let mut pfns = Vec::with_capacity(g.pages_per_row as usize);
        for page in 0..g.pages_per_row {
            let pa = self.encode(DramLocation {
                dimm: bank.dimm,
                rank: bank.rank,
                bank: bank.bank,
                row,
                offset: page * g.page_size,
            })?;
            pfns.push(pa / g.page_size);
        }
        pfns.sort_unstable();
        Ok(pfns)
    }

    /// Coordinates of the first byte of a page frame.
    pub fn frame_location(&self, pfn: u64) -> Result<DramLocation, DramError> {
        self.decode(pfn * self.geometry.page_size)
    }

    /// Iterator over all (dimm, rank, bank) triples.
    pub fn banks(&self) -> impl Iterator<Item = BankCoords> + '_ {
        let g = self.geometry;
        (0..g.dimms).flat_map(move |dimm| {
            (0..g.ranks_per_dimm).flat_map(move |rank| {
                (0..g.banks_per_rank).map(move |bank| BankCoords { dimm, rank, bank })
            })
        })
    }
}

/// On-disk geometry configuration: the seven geometry fields plus the
/// mapping scheme. Unknown fields are rejected.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    pub page_size: u64,
    pub pages_per_row: u64,
    pub banks_per_rank: u64,
    pub ranks_per_dimm: u64,
    pub dimms: u64,
    pub rows_per_bank: u64,
    pub channels: u64,
    #[serde(default)]
    pub scheme_id: MappingScheme,
}

impl GeometryConfig {
    pub fn new(geometry: DramGeometry, scheme: MappingScheme) -> Self {
        GeometryConfig {
            page_size: geometry.page_size,
            pages_per_row: geometry.pages_per_row,
            banks_per_rank: geometry.banks_per_rank,
            ranks_per_dimm: geometry.ranks_per_dimm,
            dimms: geometry.dimms,
            rows_per_bank: geometry.rows_per_bank,
            channels: geometry.channels,
            scheme_id: scheme,
        }
    }

    pub fn geometry(&self) -> DramGeometry {
        DramGeometry {
            page_size: self.page_size,
            pages_per_row: self.pages_per_row,
            banks_per_rank: self.banks_per_rank,
            ranks_per_dimm: self.ranks_per_dimm,
            dimms: self.dimms,
            rows_per_bank: self.rows_per_bank,
            channels: self.channels,
        }
    }

    pub fn mapper(&self) -> Result<Mapper, DramError> {
        Mapper::new(self.geometry(), self.scheme_id.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g0() -> DramGeometry {
        DramGeometry::ddr3_default(1)
    }

    fn mapper() -> Mapper {
        Mapper::linear(g0()).unwrap()
    }

    #[test]
    fn row_index_spot_values() {
        let g = g0();
        assert_eq!(g.row_index(0).unwrap(), 0);
        // 3145728 / (4096 * 32 * 1) = 24
        assert_eq!(g.row_index(0x300000).unwrap(), 24);
        // 3145727 / 131072 floors to 23
        assert_eq!(g.row_index(0x2FFFFF).unwrap(), 23);
    }

    #[test]
    fn row_index_out_of_range() {
        let g = g0();
        assert!(matches!(
            g.row_index(g.total_bytes()),
            Err(DramError::AddressOutOfRange { .. })
        ));
    }

    #[test]
    fn decode_examples() {
        let m = mapper();
        assert_eq!(
            m.decode(0).unwrap(),
            DramLocation {
                dimm: 0,
                rank: 0,
                bank: 0,
                row: 0,
                offset: 0
            }
        );
        // row_bytes = 8192, so pa 8192 is bank-linear 1
        assert_eq!(
            m.decode(8192).unwrap(),
            DramLocation {
                dimm: 0,
                rank: 0,
                bank: 1,
                row: 0,
                offset: 0
            }
        );
        // rowgroup_bytes = 131072
        assert_eq!(
            m.decode(131072).unwrap(),
            DramLocation {
                dimm: 0,
                rank: 0,
                bank: 0,
                row: 1,
                offset: 0
            }
        );
    }

    #[test]
    fn encode_examples() {
        let m = mapper();
        let loc = |dimm, rank, bank, row, offset| DramLocation {
            dimm,
            rank,
            bank,
            row,
            offset,
        };
        assert_eq!(m.encode(loc(0, 0, 0, 0, 0)).unwrap(), 0);
        assert_eq!(m.encode(loc(0, 0, 1, 0, 0)).unwrap(), 8192);
        // rank 1 is bank-linear 8, so 8 * 8192
        assert_eq!(m.encode(loc(0, 1, 0, 0, 0)).unwrap(), 65536);
        assert!(m.encode(loc(1, 0, 0, 0, 0)).is_err());
    }

    #[test]
    fn frames_in_row_examples() {
        let m = mapper();
        let bank0 = BankCoords {
            dimm: 0,
            rank: 0,
            bank: 0,
        };
        let bank1 = BankCoords {
            dimm: 0,
            rank: 0,
            bank: 1,
        };
        assert_eq!(m.frames_in_row(bank0, 0).unwrap(), vec![0, 1]);
        assert_eq!(m.frames_in_row(bank0, 1).unwrap(), vec![32, 33]);
        assert_eq!(m.frames_in_row(bank1, 0).unwrap(), vec![2, 3]);
        assert!(m.frames_in_row(bank0, g0().rows_per_bank).is_err());
    }

    #[test]
    fn row_formula_matches_decode_under_linear() {
        let m = mapper();
        for pa in [0u64, 1, 4095, 8192, 131071, 131072, 0x2FFFFF, 0x300000] {
            assert_eq!(m.decode(pa).unwrap().row, g0().row_index(pa).unwrap());
        }
    }

    #[test]
    fn linear_swizzle_agrees_with_linear_rowgroup() {
        let g = g0();
        let lin = Mapper::linear(g).unwrap();
        let sw = Mapper::new(
            g,
            MappingScheme::CustomBitSwizzle(BitSwizzle::linear(&g).unwrap()),
        )
        .unwrap();
        for pa in (0..g.total_bytes()).step_by(4096 * 977) {
            assert_eq!(lin.decode(pa).unwrap(), sw.decode(pa).unwrap());
        }
    }

    #[test]
    fn ivy_bridge_rank_bit_20() {
        // Bit 20 of the physical address selects the rank, so the addresses
        // 0x2FFFFF and 0x300000 land on different ranks.
        let g = g0();
        let m = Mapper::new(
            g,
            MappingScheme::CustomBitSwizzle(BitSwizzle::with_rank_bit(&g, 20).unwrap()),
        )
        .unwrap();
        let front = m.decode(0x2FFFFF).unwrap();
        let back = m.decode(0x300000).unwrap();
        assert_ne!(front.rank, back.rank);
    }

    #[test]
    fn swizzle_rejects_bad_tables() {
        let g = g0();
        let mut sw = BitSwizzle::linear(&g).unwrap();
        sw.rank_bits[0] = sw.offset_bits[0]; // duplicate bit
        assert!(Mapper::new(g, MappingScheme::CustomBitSwizzle(sw)).is_err());
    }

    #[test]
    fn geometry_config_rejects_unknown_fields() {
        let json = r#"{"page_size":4096,"pages_per_row":2,"banks_per_rank":8,
            "ranks_per_dimm":2,"dimms":1,"rows_per_bank":32768,"channels":1,
            "bogus":7}"#;
        assert!(serde_json::from_str::<GeometryConfig>(json).is_err());
    }

    #[test]
    fn pages_per_dimm_matches_product() {
        let g = g0();
        assert_eq!(g.pages_per_dimm(), 2 * 8 * 2);
        assert_eq!(g.total_frames(), 1 << 20);
    }

    #[test]
    fn digest_distinguishes_schemes() {
        let g = g0();
        let a = Mapper::linear(g).unwrap().digest();
        let b = Mapper::new(
            g,
            MappingScheme::CustomBitSwizzle(BitSwizzle::with_rank_bit(&g, 20).unwrap()),
        )
        .unwrap()
        .digest();
        assert_ne!(a, b);
    }
}
