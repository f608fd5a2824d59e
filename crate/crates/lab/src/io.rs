//! On-disk formats: item embeddings (f32 blob + JSON sidecar), interaction
//! and attribute JSON lines, and the SID table.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use seqrec_core::datasets::{InteractionLog, ItemAttributes, ItemCatalog, ItemId, UserSequence};
use seqrec_core::sid::SidTable;
use seqrec_core::Tensor;
use sha2::{Digest, Sha256};

use crate::error::{LabError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| LabError::io(path, e))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| LabError::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| LabError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| LabError::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = read_bytes(path)?;
    serde_json::from_slice(&bytes).map_err(|e| LabError::format(path, e.to_string()))
}

pub fn to_json_pretty<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("serializable value");
    out.push(b'\n');
    out
}

pub fn to_jsonl<T: Serialize>(rows: impl IntoIterator<Item = T>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in rows {
        serde_json::to_writer(&mut out, &r).expect("serializable row");
        out.push(b'\n');
    }
    out
}

/// Parses non-empty lines; errors carry the 1-based line number.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|_| LabError::format(path, "not UTF-8"))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| LabError::format(path, format!("line {}: {e}", i + 1))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbeddingSidecar {
    pub n_items: usize,
    pub dim: usize,
    pub item_ids: Vec<String>,
    /// SHA-256 of the blob.
    pub checksum: String,
}

/// `items.f32` → `items.json`.
pub fn sidecar_path(blob: &Path) -> PathBuf {
    blob.with_extension("json")
}

pub fn encode_embeddings(keys: &[String], text: &Tensor) -> (Vec<u8>, EmbeddingSidecar) {
    let mut blob = Vec::with_capacity(text.len() * 4);
    for &v in text.data() {
        blob.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let sidecar =
        EmbeddingSidecar { n_items: keys.len(), dim: text.cols(), item_ids: keys.to_vec(), checksum: sha256_hex(&blob) };
    (blob, sidecar)
}

pub fn write_embeddings(blob_path: &Path, keys: &[String], text: &Tensor) -> Result<()> {
    let (blob, sidecar) = encode_embeddings(keys, text);
    write_atomic(blob_path, &blob)?;
    write_atomic(&sidecar_path(blob_path), &to_json_pretty(&sidecar))
}

/// Loads the blob named by a sidecar, widening to f64. `expected_dim`
/// guards against pairing a dataset with the wrong quantizer or model.
pub fn read_embeddings(blob_path: &Path, expected_dim: Option<usize>) -> Result<ItemCatalog> {
    let side_path = sidecar_path(blob_path);
    let side: EmbeddingSidecar = read_json(&side_path)?;
    if side.item_ids.len() != side.n_items {
        return Err(LabError::format(&side_path, format!("{} item ids for n_items {}", side.item_ids.len(), side.n_items)));
    }
    if let Some(d) = expected_dim {
        if d != side.dim {
            return Err(LabError::format(&side_path, format!("embedding dim {} does not match expected {d}", side.dim)));
        }
    }
    let blob = read_bytes(blob_path)?;
    if blob.len() != side.n_items * side.dim * 4 {
        return Err(LabError::format(
            blob_path,
            format!("{} bytes, expected {} items × {} dims × 4", blob.len(), side.n_items, side.dim),
        ));
    }
    if sha256_hex(&blob) != side.checksum {
        return Err(LabError::format(blob_path, "checksum mismatch"));
    }
    let data = blob.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let text = Tensor::matrix(side.n_items, side.dim, data)?;
    Ok(ItemCatalog::new(side.item_ids, text)?)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub user: String,
    pub items: Vec<String>,
}

pub fn encode_interactions(log: &InteractionLog, catalog: &ItemCatalog) -> Vec<u8> {
    to_jsonl(log.sequences.iter().map(|s| InteractionRecord {
        user: s.user.clone(),
        items: s.items.iter().map(|&i| catalog.key(i).to_string()).collect(),
    }))
}

/// Items are resolved against the catalog; unknown keys are an error.
pub fn read_interactions(path: &Path, catalog: &ItemCatalog) -> Result<InteractionLog> {
    let records: Vec<InteractionRecord> = read_jsonl(path)?;
    let mut sequences = Vec::with_capacity(records.len());
    for (n, r) in records.into_iter().enumerate() {
        let items = r
            .items
            .iter()
            .map(|k| {
                catalog
                    .lookup(k)
                    .ok_or_else(|| LabError::format(path, format!("record {}: item {k:?} has no embedding", n + 1)))
            })
            .collect::<Result<Vec<ItemId>>>()?;
        sequences.push(UserSequence { user: r.user, items });
    }
    Ok(InteractionLog::new(sequences))
}

/// Attribute values may be strings or numbers in the source data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeRecord {
    pub item: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub title: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub brand: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub price: Option<serde_json::Value>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<serde_json::Value>,
}

fn text_value(v: Option<serde_json::Value>) -> Option<String> {
    match v? {
        serde_json::Value::Null => None,
        serde_json::Value::String(s) => Some(s),
        other => Some(other.to_string()),
    }
}

/// Attaches attributes to catalog items; returns how many were attached.
pub fn read_attributes(path: &Path, catalog: &mut ItemCatalog) -> Result<usize> {
    let records: Vec<AttributeRecord> = read_jsonl(path)?;
    let n = records.len();
    for r in records {
        let item = catalog
            .lookup(&r.item)
            .ok_or_else(|| LabError::format(path, format!("attributes for unknown item {:?}", r.item)))?;
        let attrs = ItemAttributes {
            title: text_value(r.title),
            brand: text_value(r.brand),
            price: text_value(r.price),
            category: text_value(r.category),
        };
        catalog.set_attributes(item, attrs);
    }
    Ok(n)
}

pub fn encode_attributes(catalog: &ItemCatalog) -> Vec<u8> {
    let s = |v: &Option<String>| v.clone().map(serde_json::Value::String);
    to_jsonl((0..catalog.len()).filter_map(|i| {
        let item = ItemId::from(i);
        catalog.attributes(item).map(|a| AttributeRecord {
            item: catalog.key(item).to_string(),
            title: s(&a.title),
            brand: s(&a.brand),
            price: s(&a.price),
            category: s(&a.category),
        })
    }))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SidRecord {
    pub item: String,
    /// Codes followed by the dedup index.
    pub sid: Vec<usize>,
}

/// One line per item in catalog order.
pub fn encode_sid_table(table: &SidTable, catalog: &ItemCatalog) -> Vec<u8> {
    to_jsonl(
        table
            .ids
            .iter()
            .enumerate()
            .map(|(i, sid)| SidRecord { item: catalog.key(ItemId::from(i)).to_string(), sid: sid.as_tuple() }),
    )
}

/// Rebuilds the table from stored codes and checks that the stored dedup
/// indices are the ones the codes imply.
pub fn read_sid_table(path: &Path, catalog: &ItemCatalog, codebook_size: usize) -> Result<SidTable> {
    let records: Vec<SidRecord> = read_jsonl(path)?;
    let mut by_item: BTreeMap<ItemId, Vec<usize>> = BTreeMap::new();
    for r in records {
        let item = catalog
            .lookup(&r.item)
            .ok_or_else(|| LabError::format(path, format!("SID for unknown item {:?}", r.item)))?;
        if r.sid.len() < 2 {
            return Err(LabError::format(path, format!("SID of {:?} has fewer than two entries", r.item)));
        }
        if by_item.insert(item, r.sid).is_some() {
            return Err(LabError::format(path, format!("item {:?} listed twice", r.item)));
        }
    }
    if by_item.len() != catalog.len() {
        return Err(LabError::format(path, format!("{} SIDs for {} catalog items", by_item.len(), catalog.len())));
    }
    let levels = by_item.values().next().map_or(0, |s| s.len() - 1);
    if by_item.values().any(|s| s.len() != levels + 1) {
        return Err(LabError::format(path, "SIDs have different lengths"));
    }
    let codes: Vec<Vec<usize>> = by_item.values().map(|s| s[..levels].to_vec()).collect();
    let table = SidTable::from_codes(codes, levels, codebook_size)?;
    for (i, stored) in by_item.values().enumerate() {
        if table.ids[i].dedup != stored[levels] {
            return Err(LabError::format(path, format!("dedup index of {:?} is inconsistent", catalog.key(ItemId::from(i)))));
        }
    }
    Ok(table)
}
