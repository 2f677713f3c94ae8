//! Knowledge database of per-component FPGA resource utilization.
//!
//! Entries are keyed by `(seq_len, component, resource, bitwidth)` and hold a
//! utilization percentage in exact tenths. A database is built by median
//! aggregation of synthesis reports ([`aggregate`]) or loaded from the
//! versioned JSON format ([`load`]); the database transcribed from the
//! published profiling campaign ships with the crate ([`bundled`]).

mod aggregate;
mod io;
mod report;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::units::{Bitwidth, Tenths};

pub use aggregate::{aggregate, median};
pub use io::{bundled, from_json_str, load, save, to_json_string, FORMAT_VERSION};
pub use report::{parse_report, SynthesisReport};

/// FPGA resource classes, in serialization order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResourceKind {
    Luts,
    Dram,
    Bram,
    Dsps,
}

impl ResourceKind {
    pub const ALL: [ResourceKind; 4] = [ResourceKind::Luts, ResourceKind::Dram, ResourceKind::Bram, ResourceKind::Dsps];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            ResourceKind::Luts => "luts",
            ResourceKind::Dram => "dram",
            ResourceKind::Bram => "bram",
            ResourceKind::Dsps => "dsps",
        }
    }
}

impl fmt::Display for ResourceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ResourceKind {
    type Err = KbError;
    fn from_str(s: &str) -> Result<Self, KbError> {
        ResourceKind::ALL
            .into_iter()
            .find(|r| r.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| KbError::Schema(format!("unknown resource `{s}`")))
    }
}

/// Profiled model components: the ten key components in pipeline order,
/// followed by the three interconnect overhead pseudo-components.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ComponentId {
    LInput,
    AddPe,
    Mha,
    AddMha,
    BnMha,
    Ffn,
    AddFfn,
    BnFfn,
    Gap,
    LOutput,
    OModel,
    OEncoderLayer,
    OMiddleware,
}

impl ComponentId {
    pub const ALL: [ComponentId; 13] = [
        ComponentId::LInput,
        ComponentId::AddPe,
        ComponentId::Mha,
        ComponentId::AddMha,
        ComponentId::BnMha,
        ComponentId::Ffn,
        ComponentId::AddFfn,
        ComponentId::BnFfn,
        ComponentId::Gap,
        ComponentId::LOutput,
        ComponentId::OModel,
        ComponentId::OEncoderLayer,
        ComponentId::OMiddleware,
    ];

    /// The ten components that receive a user-chosen bitwidth.
    pub const KEY: [ComponentId; 10] = [
        ComponentId::LInput,
        ComponentId::AddPe,
        ComponentId::Mha,
        ComponentId::AddMha,
        ComponentId::BnMha,
        ComponentId::Ffn,
        ComponentId::AddFfn,
        ComponentId::BnFfn,
        ComponentId::Gap,
        ComponentId::LOutput,
    ];

    pub const OVERHEAD: [ComponentId; 3] = [ComponentId::OModel, ComponentId::OEncoderLayer, ComponentId::OMiddleware];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn is_overhead(self) -> bool {
        self.index() >= 10
    }

    pub fn name(self) -> &'static str {
        match self {
            ComponentId::LInput => "L_INPUT",
            ComponentId::AddPe => "ADD_PE",
            ComponentId::Mha => "MHA",
            ComponentId::AddMha => "ADD_MHA",
            ComponentId::BnMha => "BN_MHA",
            ComponentId::Ffn => "FFN",
            ComponentId::AddFfn => "ADD_FFN",
            ComponentId::BnFfn => "BN_FFN",
            ComponentId::Gap => "GAP",
            ComponentId::LOutput => "L_OUTPUT",
            ComponentId::OModel => "O_MODEL",
            ComponentId::OEncoderLayer => "O_ENCODER_LAYER",
            ComponentId::OMiddleware => "O_MIDDLEWARE",
        }
    }
}

impl fmt::Display for ComponentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ComponentId {
    type Err = KbError;
    fn from_str(s: &str) -> Result<Self, KbError> {
        ComponentId::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| KbError::Schema(format!("unknown component `{}`", s.trim())))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum KbError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("validation error: {0}")]
    Validation(String),
    #[error("no reports to aggregate")]
    Empty,
    #[error("incomplete report coverage, missing cells: {}", .missing.join(", "))]
    Incomplete { missing: Vec<String> },
    #[error("sequence length {requested} not covered (covered: {covered:?})")]
    Coverage { requested: u32, covered: Vec<u32> },
    #[error("unsupported database version {found} (expected {expected})")]
    Version { found: u64, expected: u64 },
    #[error("at `{path}`: {message}")]
    Field { path: String, message: String },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Per sequence length: component x resource x bitwidth.
pub type SeqTable = [[[Tenths; 3]; 4]; 13];

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub source: String,
    /// Report counts per `seq_len` and bitwidth, when built by aggregation.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub report_counts: BTreeMap<u32, BTreeMap<u8, usize>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub notes: Vec<String>,
}

/// Immutable lookup table of median utilization per component.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnowledgeDatabase {
    tables: BTreeMap<u32, SeqTable>,
    pub metadata: Metadata,
}

impl KnowledgeDatabase {
    /// Builds a database from complete per-`seq_len` tables, rejecting
    /// negative entries.
    pub fn from_tables(tables: BTreeMap<u32, SeqTable>, metadata: Metadata) -> Result<Self, KbError> {
        if tables.is_empty() {
            return Err(KbError::Empty);
        }
        for (n, table) in &tables {
            if *n == 0 {
                return Err(KbError::Validation("sequence length must be positive".into()));
            }
            for c in ComponentId::ALL {
                for r in ResourceKind::ALL {
                    for b in Bitwidth::ALL {
                        let v = table[c.index()][r.index()][b.index()];
                        if v < Tenths::ZERO {
                            return Err(KbError::Validation(format!("n={n} {c} {r} {b}-bit is negative ({v})")));
                        }
                    }
                }
            }
        }
        Ok(Self { tables, metadata })
    }

    pub fn seq_lens(&self) -> Vec<u32> {
        self.tables.keys().copied().collect()
    }

    pub fn covers(&self, seq_len: u32) -> bool {
        self.tables.contains_key(&seq_len)
    }

    pub fn table(&self, seq_len: u32) -> Result<&SeqTable, KbError> {
        self.tables.get(&seq_len).ok_or_else(|| KbError::Coverage { requested: seq_len, covered: self.seq_lens() })
    }

    pub fn lookup(&self, seq_len: u32, component: ComponentId, resource: ResourceKind, bitwidth: Bitwidth) -> Result<Tenths, KbError> {
        Ok(self.table(seq_len)?[component.index()][resource.index()][bitwidth.index()])
    }

    /// Number of stored entries (156 per covered sequence length).
    pub fn len(&self) -> usize {
        self.tables.len() * 13 * 4 * 3
    }

    pub fn is_empty(&self) -> bool {
        self.tables.is_empty()
    }

    pub(crate) fn tables(&self) -> &BTreeMap<u32, SeqTable> {
        &self.tables
    }

    /// Iterates all entries in canonical order.
    pub fn entries(&self) -> impl Iterator<Item = ((u32, ComponentId, ResourceKind, Bitwidth), Tenths)> + '_ {
        self.tables.iter().flat_map(|(&n, t)| {
            ComponentId::ALL.into_iter().flat_map(move |c| {
                ResourceKind::ALL.into_iter().flat_map(move |r| {
                    Bitwidth::ALL.into_iter().map(move |b| ((n, c, r, b), t[c.index()][r.index()][b.index()]))
                })
            })
        })
    }

    /// Sequence lengths with at least one entry, as a set.
    pub fn coverage(&self) -> BTreeSet<u32> {
        self.tables.keys().copied().collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn component_order_and_names() {
        for (i, c) in ComponentId::ALL.iter().enumerate() {
            assert_eq!(c.index(), i);
            assert_eq!(c.name().parse::<ComponentId>().unwrap(), *c);
        }
        assert!(ComponentId::OVERHEAD.iter().all(|c| c.is_overhead()));
        assert!(ComponentId::KEY.iter().all(|c| !c.is_overhead()));
        assert!("gap".parse::<ComponentId>().is_ok());
        assert!("ATTN".parse::<ComponentId>().is_err());
    }

    #[test]
    fn bundled_lookups() {
        let db = bundled();
        assert_eq!(db.lookup(12, ComponentId::Mha, ResourceKind::Luts, Bitwidth::B6).unwrap(), Tenths(356));
        assert_eq!(db.lookup(24, ComponentId::Ffn, ResourceKind::Bram, Bitwidth::B8).unwrap(), Tenths(1000));
        assert_eq!(db.lookup(18, ComponentId::OModel, ResourceKind::Dsps, Bitwidth::B4).unwrap(), Tenths(0));
        assert_eq!(db.lookup(12, ComponentId::Ffn, ResourceKind::Bram, Bitwidth::B4).unwrap(), Tenths(550));
        // kept as published
        assert_eq!(db.lookup(12, ComponentId::OMiddleware, ResourceKind::Dram, Bitwidth::B8).unwrap(), Tenths(0));
        assert_eq!(db.lookup(12, ComponentId::OMiddleware, ResourceKind::Dram, Bitwidth::B6).unwrap(), Tenths(7));
    }

    #[test]
    fn uncovered_seq_len_lists_coverage() {
        let db = bundled();
        match db.lookup(6, ComponentId::Mha, ResourceKind::Luts, Bitwidth::B4) {
            Err(KbError::Coverage { requested, covered }) => {
                assert_eq!(requested, 6);
                assert_eq!(covered, vec![12, 18, 24]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bundled_is_complete() {
        let db = bundled();
        assert_eq!(db.seq_lens(), vec![12, 18, 24]);
        assert_eq!(db.len(), 3 * 156);
        assert_eq!(db.entries().count(), 3 * 156);
    }
}
