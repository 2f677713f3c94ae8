use std::collections::BTreeMap;

use crate::units::{Bitwidth, Tenths};

use super::{ComponentId, KbError, KnowledgeDatabase, Metadata, ResourceKind, SeqTable, SynthesisReport};

/// Median of a non-empty multiset. Even counts take the mean of the two
/// central values, rounded half away from zero to tenths.
pub fn median(values: &mut [Tenths]) -> Option<Tenths> {
    if values.is_empty() {
        return None;
    }
    values.sort_unstable();
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 { values[mid] } else { Tenths::midpoint(values[mid - 1], values[mid]) })
}

/// Builds a database whose entries are the medians of the matching report
/// values. Every covered sequence length needs reports at all three
/// bitwidths.
pub fn aggregate(reports: &[SynthesisReport]) -> Result<KnowledgeDatabase, KbError> {
    if reports.is_empty() {
        return Err(KbError::Empty);
    }
    let mut cells: BTreeMap<u32, [Vec<&SynthesisReport>; 3]> = BTreeMap::new();
    for r in reports {
        cells.entry(r.seq_len).or_default()[r.bitwidth.index()].push(r);
    }

    let missing: Vec<String> = cells
        .iter()
        .flat_map(|(n, by_bits)| {
            Bitwidth::ALL.into_iter().filter(|b| by_bits[b.index()].is_empty()).map(move |b| format!("(n={n}, b={b})"))
        })
        .collect();
    if !missing.is_empty() {
        return Err(KbError::Incomplete { missing });
    }

    let mut tables = BTreeMap::new();
    let mut counts = BTreeMap::new();
    let mut scratch = Vec::new();
    for (&n, by_bits) in &cells {
        let mut table: SeqTable = [[[Tenths::ZERO; 3]; 4]; 13];
        for b in Bitwidth::ALL {
            let group = &by_bits[b.index()];
            for c in ComponentId::ALL {
                for r in ResourceKind::ALL {
                    scratch.clear();
                    scratch.extend(group.iter().map(|rep| rep.get(c, r)));
                    table[c.index()][r.index()][b.index()] = median(&mut scratch).expect("non-empty group");
                }
            }
        }
        tables.insert(n, table);
        counts.insert(n, Bitwidth::ALL.iter().map(|b| (b.bits(), by_bits[b.index()].len())).collect());
    }
    let metadata = Metadata { source: format!("median of {} synthesis reports", reports.len()), report_counts: counts, notes: Vec::new() };
    KnowledgeDatabase::from_tables(tables, metadata)
}
