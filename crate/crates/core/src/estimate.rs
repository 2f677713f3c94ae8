//! Resource estimation for a per-component bitwidth assignment.
//!
//! The estimate for each resource is the sum of the ten key components'
//! database entries at their assigned bitwidths, optionally plus the three
//! overhead entries. All arithmetic is exact in tenths of a percent.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::kb::{ComponentId, KbError, KnowledgeDatabase, ResourceKind, SeqTable};
use crate::units::{Bitwidth, Tenths};

/// Bitwidths for the ten key components in pipeline order
/// (`L_INPUT` .. `L_OUTPUT`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BitwidthCombination(pub [Bitwidth; 10]);

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid bitwidth combination `{input}`: {reason}")]
pub struct ComboParseError {
    pub input: String,
    pub reason: String,
}

impl BitwidthCombination {
    pub fn uniform(b: Bitwidth) -> Self {
        BitwidthCombination([b; 10])
    }

    pub fn get(&self, component: ComponentId) -> Bitwidth {
        assert!(!component.is_overhead(), "overhead components carry no bitwidth");
        self.0[component.index()]
    }

    /// Sum of the ten bitwidths, the ranking score.
    pub fn score(&self) -> u32 {
        self.0.iter().map(|b| b.bits() as u32).sum()
    }

    pub fn max(&self) -> Bitwidth {
        *self.0.iter().max().expect("ten elements")
    }

    pub fn bits(&self) -> [u8; 10] {
        self.0.map(Bitwidth::bits)
    }

    pub fn from_bits(bits: &[u32]) -> Result<Self, ComboParseError> {
        let input = bits.iter().map(u32::to_string).collect::<Vec<_>>().join(",");
        if bits.len() != 10 {
            return Err(ComboParseError { input, reason: format!("expected 10 bitwidths, found {}", bits.len()) });
        }
        let mut out = [Bitwidth::B4; 10];
        for (slot, &b) in out.iter_mut().zip(bits) {
            *slot = Bitwidth::from_bits(b).ok_or_else(|| ComboParseError { input: input.clone(), reason: format!("{b} is not one of 4, 6, 8") })?;
        }
        Ok(BitwidthCombination(out))
    }
}

impl fmt::Display for BitwidthCombination {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, b) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str(",")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

impl FromStr for BitwidthCombination {
    type Err = ComboParseError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bits: Result<Vec<u32>, _> = s.split(',').map(|t| t.trim().parse::<u32>()).collect();
        let bits = bits.map_err(|e| ComboParseError { input: s.to_string(), reason: e.to_string() })?;
        BitwidthCombination::from_bits(&bits).map_err(|e| ComboParseError { input: s.to_string(), reason: e.reason })
    }
}

/// Predicted utilization, one exact percentage per resource kind. Values
/// above 100 signal infeasibility.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct ResourceVector {
    pub luts: Tenths,
    pub dram: Tenths,
    pub bram: Tenths,
    pub dsps: Tenths,
}

impl ResourceVector {
    pub fn get(&self, r: ResourceKind) -> Tenths {
        match r {
            ResourceKind::Luts => self.luts,
            ResourceKind::Dram => self.dram,
            ResourceKind::Bram => self.bram,
            ResourceKind::Dsps => self.dsps,
        }
    }

    fn slot(&mut self, r: ResourceKind) -> &mut Tenths {
        match r {
            ResourceKind::Luts => &mut self.luts,
            ResourceKind::Dram => &mut self.dram,
            ResourceKind::Bram => &mut self.bram,
            ResourceKind::Dsps => &mut self.dsps,
        }
    }

    pub fn to_array(self) -> [Tenths; 4] {
        [self.luts, self.dram, self.bram, self.dsps]
    }
}

impl std::ops::Add for ResourceVector {
    type Output = ResourceVector;
    fn add(self, o: ResourceVector) -> ResourceVector {
        ResourceVector { luts: self.luts + o.luts, dram: self.dram + o.dram, bram: self.bram + o.bram, dsps: self.dsps + o.dsps }
    }
}

impl std::ops::Sub for ResourceVector {
    type Output = ResourceVector;
    fn sub(self, o: ResourceVector) -> ResourceVector {
        ResourceVector { luts: self.luts - o.luts, dram: self.dram - o.dram, bram: self.bram - o.bram, dsps: self.dsps - o.dsps }
    }
}

/// JSON form: `{ "luts": 80.0, ... }` with one-decimal numbers.
impl Serialize for ResourceVector {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut m = s.serialize_map(Some(4))?;
        for r in ResourceKind::ALL {
            m.serialize_entry(r.name(), &self.get(r).as_percent())?;
        }
        m.end()
    }
}

impl fmt::Display for ResourceVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "LUTs {} DRAM {} BRAM {} DSPs {}", self.luts, self.dram, self.bram, self.dsps)
    }
}

/// Which bitwidth column the overhead pseudo-components are read from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum OverheadRule {
    /// Largest bitwidth present in the combination.
    #[default]
    MaxBitwidth,
    /// Most frequent bitwidth; ties go to the larger width.
    Mode,
    /// Per overhead entry, the largest value over the three bitwidth columns.
    PerResourceMax,
    Fixed(Bitwidth),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct EstimateOptions {
    pub include_overhead: bool,
    pub overhead_rule: OverheadRule,
}

impl EstimateOptions {
    pub fn with_overhead() -> Self {
        EstimateOptions { include_overhead: true, overhead_rule: OverheadRule::MaxBitwidth }
    }
}

/// Precomputed per-component contributions for one sequence length, so a
/// sweep does no map lookups.
#[derive(Debug, Clone)]
pub struct Estimator<'a> {
    table: &'a SeqTable,
    opts: EstimateOptions,
}

impl<'a> Estimator<'a> {
    pub fn new(db: &'a KnowledgeDatabase, seq_len: u32, opts: EstimateOptions) -> Result<Self, KbError> {
        Ok(Estimator { table: db.table(seq_len)?, opts })
    }

    fn entry(&self, c: ComponentId, r: ResourceKind, b: Bitwidth) -> Tenths {
        self.table[c.index()][r.index()][b.index()]
    }

    pub fn key_components(&self, combo: &BitwidthCombination) -> ResourceVector {
        let mut out = ResourceVector::default();
        for r in ResourceKind::ALL {
            *out.slot(r) = ComponentId::KEY.iter().zip(combo.0).map(|(&c, b)| self.entry(c, r, b)).sum();
        }
        out
    }

    pub fn overhead(&self, combo: &BitwidthCombination) -> ResourceVector {
        let mut out = ResourceVector::default();
        for r in ResourceKind::ALL {
            *out.slot(r) = ComponentId::OVERHEAD
                .iter()
                .map(|&c| match self.opts.overhead_rule {
                    OverheadRule::MaxBitwidth => self.entry(c, r, combo.max()),
                    OverheadRule::Mode => self.entry(c, r, mode(combo)),
                    OverheadRule::Fixed(b) => self.entry(c, r, b),
                    OverheadRule::PerResourceMax => Bitwidth::ALL.iter().map(|&b| self.entry(c, r, b)).max().unwrap(),
                })
                .sum();
        }
        out
    }

    pub fn estimate(&self, combo: &BitwidthCombination) -> ResourceVector {
        let key = self.key_components(combo);
        if self.opts.include_overhead {
            key + self.overhead(combo)
        } else {
            key
        }
    }
}

fn mode(combo: &BitwidthCombination) -> Bitwidth {
    let mut counts = [0usize; 3];
    for b in combo.0 {
        counts[b.index()] += 1;
    }
    // later (wider) bitwidths win ties
    Bitwidth::ALL.into_iter().rev().max_by_key(|b| counts[b.index()]).unwrap()
}

pub fn estimate(
    db: &KnowledgeDatabase,
    seq_len: u32,
    combo: &BitwidthCombination,
    opts: EstimateOptions,
) -> Result<ResourceVector, KbError> {
    Ok(Estimator::new(db, seq_len, opts)?.estimate(combo))
}

pub fn estimate_uniform(db: &KnowledgeDatabase, seq_len: u32, bitwidth: Bitwidth, opts: EstimateOptions) -> Result<ResourceVector, KbError> {
    estimate(db, seq_len, &BitwidthCombination::uniform(bitwidth), opts)
}
