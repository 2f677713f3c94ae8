use std::collections::BTreeMap;
use std::path::Path;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::units::Tenths;

use super::{ComponentId, KbError, KnowledgeDatabase, Metadata, ResourceKind, SeqTable};

pub const FORMAT_VERSION: u64 = 1;

const BUNDLED_TABLE2: &str = include_str!("../../assets/table2.json");

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BitCells {
    #[serde(rename = "4")]
    b4: Tenths,
    #[serde(rename = "6")]
    b6: Tenths,
    #[serde(rename = "8")]
    b8: Tenths,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResourceCells {
    luts: BitCells,
    dram: BitCells,
    bram: BitCells,
    dsps: BitCells,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DbFile<K: Ord> {
    version: u64,
    metadata: Metadata,
    seq_lens: Vec<u32>,
    entries: BTreeMap<u32, BTreeMap<K, ResourceCells>>,
}

impl BitCells {
    fn from_row(row: &[Tenths; 3]) -> Self {
        BitCells { b4: row[0], b6: row[1], b8: row[2] }
    }
    fn to_row(&self) -> [Tenths; 3] {
        [self.b4, self.b6, self.b8]
    }
}

/// The knowledge database transcribed from the published profiling campaign
/// (`d_model = 64`, `n` in {12, 18, 24}).
pub fn bundled() -> &'static KnowledgeDatabase {
    static DB: OnceLock<KnowledgeDatabase> = OnceLock::new();
    DB.get_or_init(|| from_json_str(BUNDLED_TABLE2).expect("bundled table2.json is valid"))
}

pub fn to_json_string(db: &KnowledgeDatabase) -> String {
    let entries = db
        .tables()
        .iter()
        .map(|(&n, t)| {
            let comps = ComponentId::ALL
                .into_iter()
                .map(|c| {
                    let row = &t[c.index()];
                    let cells = ResourceCells {
                        luts: BitCells::from_row(&row[ResourceKind::Luts.index()]),
                        dram: BitCells::from_row(&row[ResourceKind::Dram.index()]),
                        bram: BitCells::from_row(&row[ResourceKind::Bram.index()]),
                        dsps: BitCells::from_row(&row[ResourceKind::Dsps.index()]),
                    };
                    (c, cells)
                })
                .collect();
            (n, comps)
        })
        .collect();
    let file: DbFile<ComponentId> = DbFile { version: FORMAT_VERSION, metadata: db.metadata.clone(), seq_lens: db.seq_lens(), entries };
    let mut s = serde_json::to_string_pretty(&file).expect("database serializes");
    s.push('\n');
    s
}

pub fn from_json_str(text: &str) -> Result<KnowledgeDatabase, KbError> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| KbError::Parse { line: e.line(), message: e.to_string() })?;
    match value.get("version") {
        None => return Err(KbError::Field { path: "version".into(), message: "missing field".into() }),
        Some(v) => match v.as_u64() {
            Some(FORMAT_VERSION) => {}
            Some(found) => return Err(KbError::Version { found, expected: FORMAT_VERSION }),
            None => return Err(KbError::Field { path: "version".into(), message: format!("expected an integer, found {v}") }),
        },
    }
    // component keys stay strings here so error paths keep their names
    let file: DbFile<String> = serde_path_to_error::deserialize(value).map_err(|e| KbError::Field {
        path: e.path().to_string(),
        message: e.inner().to_string(),
    })?;

    let keys: Vec<u32> = file.entries.keys().copied().collect();
    let mut listed = file.seq_lens.clone();
    listed.sort_unstable();
    listed.dedup();
    if listed.len() != file.seq_lens.len() || listed != keys {
        return Err(KbError::Field {
            path: "seq_lens".into(),
            message: format!("{:?} does not match the sequence lengths in `entries` {keys:?}", file.seq_lens),
        });
    }

    let mut tables = BTreeMap::new();
    let mut missing = Vec::new();
    for (n, comps) in &file.entries {
        if let Some(unknown) = comps.keys().find(|k| k.parse::<ComponentId>().is_err()) {
            return Err(KbError::Field { path: format!("entries.{n}.{unknown}"), message: "unknown component".into() });
        }
        let mut table: SeqTable = [[[Tenths::ZERO; 3]; 4]; 13];
        for c in ComponentId::ALL {
            match comps.get(c.name()) {
                Some(cells) => {
                    table[c.index()] = [cells.luts.to_row(), cells.dram.to_row(), cells.bram.to_row(), cells.dsps.to_row()];
                }
                None => missing.push(format!("entries.{n}.{c}")),
            }
        }
        tables.insert(*n, table);
    }
    if !missing.is_empty() {
        return Err(KbError::Incomplete { missing });
    }
    KnowledgeDatabase::from_tables(tables, file.metadata)
}

pub fn load(path: impl AsRef<Path>) -> Result<KnowledgeDatabase, KbError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| KbError::Io { path: path.display().to_string(), source })?;
    from_json_str(&text)
}

/// Writes the canonical serialization; the file is replaced atomically.
pub fn save(db: &KnowledgeDatabase, path: impl AsRef<Path>) -> Result<(), KbError> {
    let path = path.as_ref();
    let io_err = |source| KbError::Io { path: path.display().to_string(), source };
    let tmp = path.with_extension("json.tmp");
    std::fs::write(&tmp, to_json_string(db)).map_err(io_err)?;
    std::fs::rename(&tmp, path).map_err(io_err)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bundled_asset_is_canonical() {
        assert_eq!(to_json_string(bundled()), BUNDLED_TABLE2);
    }

    #[test]
    fn save_load_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("db.json");
        save(bundled(), &p).unwrap();
        let back = load(&p).unwrap();
        assert_eq!(&back, bundled());
        let first = std::fs::read_to_string(&p).unwrap();
        save(&back, &p).unwrap();
        assert_eq!(std::fs::read_to_string(&p).unwrap(), first);
    }

    #[test]
    fn truncated_file_fails() {
        let cut = &BUNDLED_TABLE2[..BUNDLED_TABLE2.len() / 2];
        assert!(matches!(from_json_str(cut), Err(KbError::Parse { .. })));
    }

    #[test]
    fn version_mismatch() {
        let t = BUNDLED_TABLE2.replacen("\"version\": 1", "\"version\": 2", 1);
        assert!(matches!(from_json_str(&t), Err(KbError::Version { found: 2, expected: 1 })));
    }

    #[test]
    fn schema_violation_has_path() {
        let t = BUNDLED_TABLE2.replacen("\"30.8\"", "\"x\"", 1);
        match from_json_str(&t) {
            Err(KbError::Field { path, .. }) => assert!(path.starts_with("entries.12.MHA.luts"), "{path}"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_component_detected() {
        let mut v: serde_json::Value = serde_json::from_str(BUNDLED_TABLE2).unwrap();
        v["entries"]["18"].as_object_mut().unwrap().remove("GAP");
        match from_json_str(&v.to_string()) {
            Err(KbError::Incomplete { missing }) => assert_eq!(missing, vec!["entries.18.GAP".to_string()]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn negative_entry_rejected() {
        let t = BUNDLED_TABLE2.replacen("\"30.8\"", "\"-30.8\"", 1);
        assert!(matches!(from_json_str(&t), Err(KbError::Validation(_))));
    }
}
