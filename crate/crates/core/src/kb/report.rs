use crate::units::{Bitwidth, Tenths};

use super::{ComponentId, KbError, ResourceKind};

/// Entries above this are treated as a corrupt report.
const SANITY_BOUND: Tenths = Tenths(2000);

/// Per-component utilization from one synthesis run.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthesisReport {
    pub seq_len: u32,
    pub bitwidth: Bitwidth,
    /// Indexed by [`ComponentId::index`] then [`ResourceKind::index`].
    pub entries: [[Tenths; 4]; 13],
}

impl SynthesisReport {
    pub fn get(&self, component: ComponentId, resource: ResourceKind) -> Tenths {
        self.entries[component.index()][resource.index()]
    }
}

fn parse_metadata(line: &str) -> Result<(u32, Bitwidth), KbError> {
    let bad = |m: String| KbError::Parse { line: 1, message: m };
    let body = line
        .trim()
        .strip_prefix('#')
        .ok_or_else(|| bad("expected metadata line `# n=<int> b=<4|6|8>`".into()))?;
    let mut seq_len = None;
    let mut bits = None;
    for tok in body.split_whitespace() {
        match tok.split_once('=') {
            Some(("n", v)) => seq_len = Some(v.parse::<u32>().map_err(|_| bad(format!("bad sequence length `{v}`")))?),
            Some(("b", v)) => {
                let b = v.parse::<u32>().ok().and_then(Bitwidth::from_bits);
                bits = Some(b.ok_or_else(|| bad(format!("bad bitwidth `{v}`, expected 4, 6 or 8")))?);
            }
            _ => return Err(bad(format!("unexpected metadata token `{tok}`"))),
        }
    }
    match (seq_len, bits) {
        (Some(0), _) => Err(bad("sequence length must be positive".into())),
        (Some(n), Some(b)) => Ok((n, b)),
        _ => Err(bad("metadata must carry both n= and b=".into())),
    }
}

/// Parses one report file: a `# n=<int> b=<4|6|8>` line, the header
/// `component,luts,dram,bram,dsps`, then one row per component.
pub fn parse_report(text: &str) -> Result<SynthesisReport, KbError> {
    let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
    let (seq_len, bitwidth) = parse_metadata(first)?;

    let mut reader = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).flexible(true).from_reader(rest.as_bytes());
    let header = reader.headers().map_err(|e| KbError::Parse { line: 2, message: e.to_string() })?.clone();
    let expected = ["component", "luts", "dram", "bram", "dsps"];
    if header.len() != expected.len() || header.iter().zip(expected).any(|(h, e)| !h.eq_ignore_ascii_case(e)) {
        return Err(KbError::Parse { line: 2, message: format!("expected header `{}`", expected.join(",")) });
    }

    let mut entries: [Option<[Tenths; 4]>; 13] = [None; 13];
    for rec in reader.records() {
        let rec = rec.map_err(|e| KbError::Parse { line: e.position().map(|p| p.line() as usize + 1).unwrap_or(0), message: e.to_string() })?;
        // csv lines are relative to the text after the metadata line
        let line = rec.position().map(|p| p.line() as usize + 1).unwrap_or(0);
        if rec.len() != 5 {
            return Err(KbError::Parse { line, message: format!("expected 5 fields, found {}", rec.len()) });
        }
        let comp: ComponentId = rec[0].parse()?;
        if entries[comp.index()].is_some() {
            return Err(KbError::Schema(format!("duplicate component {comp}")));
        }
        let mut row = [Tenths::ZERO; 4];
        for r in ResourceKind::ALL {
            let cell = &rec[r.index() + 1];
            let v: Tenths = cell.parse().map_err(|_| KbError::Parse { line, message: format!("{r} value `{cell}` is not a decimal") })?;
            if v < Tenths::ZERO {
                return Err(KbError::Validation(format!("line {line}: {comp} {r} is negative ({v})")));
            }
            if v >= SANITY_BOUND {
                return Err(KbError::Validation(format!("line {line}: {comp} {r} = {v} exceeds the sanity bound {SANITY_BOUND}")));
            }
            row[r.index()] = v;
        }
        entries[comp.index()] = Some(row);
    }

    let missing: Vec<&str> = ComponentId::ALL.iter().filter(|c| entries[c.index()].is_none()).map(|c| c.name()).collect();
    if !missing.is_empty() {
        return Err(KbError::Schema(format!("missing components: {}", missing.join(", "))));
    }
    Ok(SynthesisReport { seq_len, bitwidth, entries: entries.map(|e| e.unwrap()) })
}
