//! JSON manifests tying EMB1 files together into databases and query sets.
//! Relative paths inside a manifest resolve against the manifest's directory.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    assemble_database, read_embedding_set, read_label_names, write_embedding_set,
    write_label_names, DualSpaceDatabase, EmbeddingSet, QueryBundle,
};
use crate::error::{Error, Result};
use crate::fsutil::{self, resolve_relative};

pub const DATABASE_FORMAT: &str = "hybridrank-database";
pub const QUERIES_FORMAT: &str = "hybridrank-queries";
const MANIFEST_VERSION: u32 = 1;

/// Label written into the text EMB1 record of an unlabeled query.
const NO_LABEL: u32 = u32::MAX;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatabaseManifest {
    pub format: String,
    pub version: u32,
    pub vlm: String,
    pub vm: String,
    pub labels: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryImageRef {
    pub id: u64,
    pub generator: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryEntry {
    pub query_id: u64,
    pub label: Option<u32>,
    pub images: Vec<QueryImageRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryManifest {
    pub format: String,
    pub version: u32,
    pub text: String,
    pub images: String,
    pub bundles: Vec<QueryEntry>,
}

pub(crate) fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fsutil::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

pub(crate) fn check_format(path: &Path, format: &str, expected: &str, version: u32) -> Result<()> {
    if format != expected {
        return Err(Error::Malformed {
            path: path.to_path_buf(),
            detail: format!("format {format:?}, expected {expected:?}"),
        });
    }
    if version != MANIFEST_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    Ok(())
}

pub(crate) fn sibling_name(manifest: &Path, suffix: &str) -> String {
    let stem = manifest
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "data".into());
    format!("{stem}_{suffix}")
}

/// Writes `<stem>_vlm.emb`, `<stem>_vm.emb`, `<stem>_labels.json` next to
/// the manifest, then the manifest itself.
pub fn save_database(db: &DualSpaceDatabase, manifest_path: &Path) -> Result<()> {
    let m = DatabaseManifest {
        format: DATABASE_FORMAT.into(),
        version: MANIFEST_VERSION,
        vlm: sibling_name(manifest_path, "vlm.emb"),
        vm: sibling_name(manifest_path, "vm.emb"),
        labels: sibling_name(manifest_path, "labels.json"),
    };
    write_embedding_set(db.vlm(), &resolve_relative(manifest_path, &m.vlm))?;
    write_embedding_set(db.vm(), &resolve_relative(manifest_path, &m.vm))?;
    write_label_names(db.label_names(), &resolve_relative(manifest_path, &m.labels))?;
    write_json(&m, manifest_path)
}

pub fn load_database(manifest_path: &Path, renormalize: bool) -> Result<DualSpaceDatabase> {
    let m: DatabaseManifest = read_json(manifest_path)?;
    check_format(manifest_path, &m.format, DATABASE_FORMAT, m.version)?;
    let vlm = read_embedding_set(&resolve_relative(manifest_path, &m.vlm), renormalize)?;
    let vm = read_embedding_set(&resolve_relative(manifest_path, &m.vm), renormalize)?;
    let names = read_label_names(&resolve_relative(manifest_path, &m.labels))?;
    assemble_database(vlm, vm, names)
}

/// Writes the text and image-query EMB1 files plus the bundle manifest.
/// Image ids are assigned sequentially in bundle order.
pub fn save_query_bundles(bundles: &[QueryBundle], manifest_path: &Path) -> Result<()> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::Empty("no query bundles to write".into()))?;
    let text_dim = first.text_embedding.len();
    let image_dim = bundles
        .iter()
        .flat_map(|b| b.image_queries.first())
        .map(Vec::len)
        .next()
        .unwrap_or(1);
    for b in bundles {
        b.check_dims(text_dim, image_dim)?;
    }

    let text = EmbeddingSet::from_rows(
        text_dim,
        bundles
            .iter()
            .map(|b| (b.query_id, b.label.unwrap_or(NO_LABEL), b.text_embedding.clone())),
    )?;

    let mut next_id = 0u64;
    let mut rows = Vec::new();
    let mut entries = Vec::with_capacity(bundles.len());
    for b in bundles {
        let mut images = Vec::with_capacity(b.k());
        for (img, &generator) in b.image_queries.iter().zip(&b.generator_tags) {
            rows.push((next_id, b.label.unwrap_or(NO_LABEL), img.clone()));
            images.push(QueryImageRef { id: next_id, generator });
            next_id += 1;
        }
        entries.push(QueryEntry {
            query_id: b.query_id,
            label: b.label,
            images,
        });
    }
    let image_set = EmbeddingSet::from_rows(image_dim, rows)?;

    let m = QueryManifest {
        format: QUERIES_FORMAT.into(),
        version: MANIFEST_VERSION,
        text: sibling_name(manifest_path, "text.emb"),
        images: sibling_name(manifest_path, "images.emb"),
        bundles: entries,
    };
    write_embedding_set(&text, &resolve_relative(manifest_path, &m.text))?;
    write_embedding_set(&image_set, &resolve_relative(manifest_path, &m.images))?;
    write_json(&m, manifest_path)
}

pub fn load_query_bundles(manifest_path: &Path, renormalize: bool) -> Result<Vec<QueryBundle>> {
    let m: QueryManifest = read_json(manifest_path)?;
    check_format(manifest_path, &m.format, QUERIES_FORMAT, m.version)?;
    let text = read_embedding_set(&resolve_relative(manifest_path, &m.text), renormalize)?;
    let images = read_embedding_set(&resolve_relative(manifest_path, &m.images), renormalize)?;
    let text_index: HashMap<u64, usize> =
        text.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let image_index: HashMap<u64, usize> =
        images.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();

    let malformed = |detail: String| Error::Malformed {
        path: manifest_path.to_path_buf(),
        detail,
    };
    m.bundles
        .iter()
        .map(|e| {
            let ti = *text_index
                .get(&e.query_id)
                .ok_or_else(|| malformed(format!("query {} has no text embedding", e.query_id)))?;
            let mut image_queries = Vec::with_capacity(e.images.len());
            let mut generator_tags = Vec::with_capacity(e.images.len());
            for r in &e.images {
                let ii = *image_index
                    .get(&r.id)
                    .ok_or_else(|| malformed(format!("image {} not in image file", r.id)))?;
                image_queries.push(images.vector(ii).to_vec());
                generator_tags.push(r.generator);
            }
            Ok(QueryBundle {
                query_id: e.query_id,
                text_embedding: text.vector(ti).to_vec(),
                image_queries,
                generator_tags,
                label: e.label,
            })
        })
        .collect()
}
