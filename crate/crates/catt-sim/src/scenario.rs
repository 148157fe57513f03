//! Scenario files tie a geometry, a vulnerability profile, a defense
//! selection and the scan/exploit parameters into one reproducible run
//! description. The shipped scenarios under `scenarios/` are generated from
//! [`builtin`] and act as golden configurations.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attack::{AttackError, ExploitConfig, Machine, ScanConfig};
use crate::bcatt::{self, BcattError, FrameAvailability, MemoryMap};
use crate::dram::{DramError, GeometryConfig, Mapper};
use crate::fault::{self, FaultError, VulnerabilityProfile};
use crate::gcatt::PartitionPolicy;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("parse error in {path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Dram(#[from] DramError),
    #[error(transparent)]
    Fault(#[from] FaultError),
    #[error(transparent)]
    Bcatt(#[from] BcattError),
    #[error(transparent)]
    Attack(#[from] AttackError),
    #[error("i/o error on {path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "kebab-case")]
#[clap(rename_all = "kebab-case")]
pub enum DefenseKind {
    None,
    Bcatt,
    GcattSplit,
    GcattDynamic,
    /// B-CATT blacklisting combined with the G-CATT kernel-user split.
    Both,
}

impl DefenseKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            DefenseKind::None => "none",
            DefenseKind::Bcatt => "bcatt",
            DefenseKind::GcattSplit => "gcatt-split",
            DefenseKind::GcattDynamic => "gcatt-dynamic",
            DefenseKind::Both => "both",
        }
    }

    pub fn uses_bcatt(&self) -> bool {
        matches!(self, DefenseKind::Bcatt | DefenseKind::Both)
    }

    pub fn uses_gcatt(&self) -> bool {
        matches!(
            self,
            DefenseKind::GcattSplit | DefenseKind::GcattDynamic | DefenseKind::Both
        )
    }
}

fn default_guard_rows() -> u64 {
    1
}

fn default_kernel_base() -> u64 {
    1 << 20
}

fn default_blast_radius() -> u64 {
    1
}

/// On-disk scenario: geometry and profile are paths relative to the
/// scenario file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub name: String,
    pub geometry: PathBuf,
    pub profile: PathBuf,
    pub defense: DefenseKind,
    #[serde(default = "default_guard_rows")]
    pub guard_rows: u64,
    #[serde(default = "default_kernel_base")]
    pub kernel_base: u64,
    #[serde(default)]
    pub split_row: Option<u64>,
    #[serde(default = "default_blast_radius")]
    pub blast_radius: u64,
    pub scan: ScanConfig,
    pub exploit: ExploitConfig,
}

/// Fully resolved scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    pub geometry: GeometryConfig,
    pub profile: VulnerabilityProfile,
    pub defense: DefenseKind,
    pub guard_rows: u64,
    pub kernel_base: u64,
    pub split_row: Option<u64>,
    pub blast_radius: u64,
    pub scan: ScanConfig,
    pub exploit: ExploitConfig,
}

fn read_to_string(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn load_geometry(path: &Path) -> Result<GeometryConfig, ScenarioError> {
    let text = read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn store_geometry(config: &GeometryConfig, path: &Path) -> Result<(), ScenarioError> {
    let text = serde_json::to_string_pretty(config).expect("geometry serializes");
    fs::write(path, text + "\n").map_err(|e| ScenarioError::Io {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

impl Scenario {
    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        let text = read_to_string(path)?;
        let file: ScenarioFile = serde_json::from_str(&text).map_err(|e| ScenarioError::Parse {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        let dir = path.parent().unwrap_or_else(|| Path::new("."));
        let geometry = load_geometry(&dir.join(&file.geometry))?;
        let profile = fault::load_profile(&dir.join(&file.profile))?;
        Ok(Scenario {
            name: file.name,
            geometry,
            profile,
            defense: file.defense,
            guard_rows: file.guard_rows,
            kernel_base: file.kernel_base,
            split_row: file.split_row,
            blast_radius: file.blast_radius,
            scan: file.scan,
            exploit: file.exploit,
        })
    }

    pub fn mapper(&self) -> Result<Mapper, ScenarioError> {
        Ok(self.geometry.mapper()?)
    }

    pub fn policy(&self) -> PartitionPolicy {
        match self.defense {
            DefenseKind::None | DefenseKind::Bcatt => PartitionPolicy::None,
            DefenseKind::GcattSplit | DefenseKind::Both => PartitionPolicy::KernelUserSplit {
                guard_rows: self.guard_rows,
                kernel_base: self.kernel_base,
                split_row: self.split_row,
            },
            DefenseKind::GcattDynamic => PartitionPolicy::DynamicAdjacency {
                guard_rows: self.guard_rows,
            },
        }
    }

    /// Frame availability after applying (or not applying) the blacklisting
    /// pipeline to an all-usable base map.
    pub fn availability(&self, mapper: &Mapper) -> Result<FrameAvailability, ScenarioError> {
        let total = mapper.geometry().total_frames();
        if !self.defense.uses_bcatt() {
            return Ok(FrameAvailability::all_available(total));
        }
        let base = MemoryMap::all_usable(mapper.geometry().total_bytes());
        let bl = bcatt::derive_blacklist(&self.profile, mapper)?;
        let map = bcatt::extend_map(&base, &bl, mapper)?;
        Ok(bcatt::apply_map(&map, mapper))
    }

    pub fn build_machine(&self) -> Result<Machine, ScenarioError> {
        let mapper = self.mapper()?;
        self.profile.validate(&mapper)?;
        let availability = self.availability(&mapper)?;
        Ok(Machine::new(
            mapper,
            self.profile.clone(),
            availability,
            self.policy(),
            self.blast_radius,
        )?)
    }
}

/// The shipped golden configurations.
pub mod builtin {
    use super::*;
    use crate::dram::{DramGeometry, MappingScheme};
    use crate::fault::{Sidedness, VulnerableCell};

    /// S1-like machine: 8 banks x 2 ranks, 512 rows per bank, 64 MiB.
    pub fn s1_geometry() -> GeometryConfig {
        GeometryConfig::new(
            DramGeometry {
                page_size: 4096,
                pages_per_row: 2,
                banks_per_rank: 8,
                ranks_per_dimm: 2,
                dimms: 1,
                rows_per_bank: 512,
                channels: 1,
            },
            MappingScheme::LinearRowgroup,
        )
    }

    /// 133 reliable double-sided victim frames spread over all banks and
    /// both halves of each bank, all hitting designated PTE bits.
    pub fn s1_profile() -> VulnerabilityProfile {
        let mapper = s1_geometry().mapper().expect("builtin geometry is valid");
        let cells = (0..133u64)
            .map(|i| {
                let bank_linear = i % 16;
                VulnerableCell {
                    dimm: 0,
                    rank: bank_linear / 8,
                    bank: bank_linear % 8,
                    row: 8 + (i / 16) * 56,
                    byte_offset: (i * 8) % 4096,
                    bit: 1,
                    threshold: 1000,
                    reliability: 1.0,
                    sidedness: Sidedness::DoubleRequired,
                }
            })
            .collect();
        VulnerabilityProfile::new(&mapper, cells).expect("builtin profile is valid")
    }

    /// Small single-bank machine for exploit calibration: 256 rows, 2 MiB.
    pub fn calib_geometry() -> GeometryConfig {
        GeometryConfig::new(
            DramGeometry {
                page_size: 4096,
                pages_per_row: 2,
                banks_per_rank: 1,
                ranks_per_dimm: 1,
                dimms: 1,
                rows_per_bank: 256,
                channels: 1,
            },
            MappingScheme::LinearRowgroup,
        )
    }

    /// Two cells, one per row parity, each flipping a designated PTE bit
    /// with probability 0.05: exactly one is reachable per attempt, so the
    /// per-attempt exploit success rate is 5%.
    pub fn calib_profile() -> VulnerabilityProfile {
        let mapper = calib_geometry().mapper().expect("builtin geometry is valid");
        let cell = |row| VulnerableCell {
            dimm: 0,
            rank: 0,
            bank: 0,
            row,
            byte_offset: 0,
            bit: 1,
            threshold: 1000,
            reliability: 0.05,
            sidedness: Sidedness::DoubleRequired,
        };
        VulnerabilityProfile::new(&mapper, vec![cell(10), cell(21)])
            .expect("builtin profile is valid")
    }

    /// Single-sufficient variant of the calibration profile, reliability 1.
    pub fn single_sided_profile() -> VulnerabilityProfile {
        let mapper = calib_geometry().mapper().expect("builtin geometry is valid");
        let cell = |row| VulnerableCell {
            dimm: 0,
            rank: 0,
            bank: 0,
            row,
            byte_offset: 0,
            bit: 1,
            threshold: 1000,
            reliability: 1.0,
            sidedness: Sidedness::SingleSufficient,
        };
        VulnerabilityProfile::new(&mapper, vec![cell(10), cell(21)])
            .expect("builtin profile is valid")
    }

    fn s1_scenario(name: &str, defense: DefenseKind) -> Scenario {
        Scenario {
            name: name.to_string(),
            geometry: s1_geometry(),
            profile: s1_profile(),
            defense,
            guard_rows: 1,
            kernel_base: 1 << 20,
            split_row: None,
            blast_radius: 1,
            scan: ScanConfig {
                hammer_count: 1000,
                pattern: 0xFF,
                coverage_runs: 1,
            },
            exploit: ExploitConfig {
                spray_fraction: 0.8,
                attempts: 100,
                seed: 1,
            },
        }
    }

    pub fn s1_unprotected() -> Scenario {
        s1_scenario("s1-unprotected", DefenseKind::None)
    }

    pub fn s1_bcatt() -> Scenario {
        s1_scenario("s1-bcatt", DefenseKind::Bcatt)
    }

    pub fn s1_gcatt_split() -> Scenario {
        s1_scenario("s1-gcatt-split", DefenseKind::GcattSplit)
    }

    pub fn s1_gcatt_dynamic() -> Scenario {
        s1_scenario("s1-gcatt-dynamic", DefenseKind::GcattDynamic)
    }

    pub fn s1_both() -> Scenario {
        s1_scenario("s1-both", DefenseKind::Both)
    }

    /// The 5% exploit baseline.
    pub fn calib_unprotected() -> Scenario {
        Scenario {
            name: "calib-unprotected".to_string(),
            geometry: calib_geometry(),
            profile: calib_profile(),
            defense: DefenseKind::None,
            guard_rows: 1,
            kernel_base: 0,
            split_row: None,
            blast_radius: 1,
            scan: ScanConfig {
                hammer_count: 1000,
                pattern: 0xFF,
                coverage_runs: 1,
            },
            exploit: ExploitConfig {
                spray_fraction: 0.8,
                attempts: 10_000,
                seed: 20090,
            },
        }
    }

    pub fn all() -> Vec<Scenario> {
        vec![
            s1_unprotected(),
            s1_bcatt(),
            s1_gcatt_split(),
            s1_gcatt_dynamic(),
            s1_both(),
            calib_unprotected(),
        ]
    }

    /// Writes the builtin geometries, profiles and scenarios under `dir`.
    pub fn write_all(dir: &Path) -> Result<(), ScenarioError> {
        let io_err = |path: &Path, e: std::io::Error| ScenarioError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        for sub in ["geometries", "profiles"] {
            let p = dir.join(sub);
            fs::create_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
        store_geometry(&s1_geometry(), &dir.join("geometries/s1.json"))?;
        store_geometry(&calib_geometry(), &dir.join("geometries/calib.json"))?;
        fault::store_profile(&s1_profile(), &dir.join("profiles/s1.json"))?;
        fault::store_profile(&calib_profile(), &dir.join("profiles/calib.json"))?;
        fault::store_profile(
            &single_sided_profile(),
            &dir.join("profiles/calib-single-sided.json"),
        )?;
        for scenario in all() {
            let which = if scenario.name.starts_with("calib") {
                "calib"
            } else {
                "s1"
            };
            let file = ScenarioFile {
                name: scenario.name.clone(),
                geometry: PathBuf::from(format!("geometries/{which}.json")),
                profile: PathBuf::from(format!("profiles/{which}.json")),
                defense: scenario.defense,
                guard_rows: scenario.guard_rows,
                kernel_base: scenario.kernel_base,
                split_row: scenario.split_row,
                blast_radius: scenario.blast_radius,
                scan: scenario.scan,
                exploit: scenario.exploit,
            };
            let path = dir.join(format!("{}.json", scenario.name));
            let text = serde_json::to_string_pretty(&file).expect("scenario serializes");
            fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        }
        Ok(())
    }
}
