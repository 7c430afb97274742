//! Embedding sets, dual-space databases and query bundles.
//!
//! Every set that enters through [`read_embedding_set`] with renormalization
//! on holds unit vectors, so all downstream dot products are cosines.

mod emb1;
pub(crate) mod manifest;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::fsutil;
use crate::linalg;

pub use emb1::{decode, encode, read_embedding_set, write_embedding_set, HEADER_LEN, MAGIC};
pub use manifest::{
    load_database, load_query_bundles, save_database, save_query_bundles, DatabaseManifest,
    QueryManifest,
};

/// Vectors within this distance of unit norm are left untouched on ingestion,
/// which keeps already-normalized f32 data bit-exact across a round trip.
const UNIT_SLACK: f64 = 2.0 * f32::EPSILON as f64;

/// Maximum tolerated deviation from unit norm after ingestion.
pub const UNIT_NORM_TOL: f64 = 1e-5;

pub type LabelNames = BTreeMap<u32, String>;

/// A block of `count` vectors of one dimensionality with ids and labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    ids: Vec<u64>,
    labels: Vec<u32>,
    vectors: Vec<f32>,
}

impl EmbeddingSet {
    /// Validates shape, id uniqueness and finiteness. Does not normalize.
    pub fn new(dim: usize, ids: Vec<u64>, labels: Vec<u32>, vectors: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument("dim must be positive".into()));
        }
        if labels.len() != ids.len() {
            return Err(Error::dim("label count", ids.len(), labels.len()));
        }
        if vectors.len() != ids.len() * dim {
            return Err(Error::dim("vector payload", ids.len() * dim, vectors.len()));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in &ids {
            if !seen.insert(id) {
                return Err(Error::DuplicateId(id));
            }
        }
        for (i, row) in vectors.chunks_exact(dim).enumerate() {
            if row.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFiniteVector(ids[i]));
            }
        }
        Ok(Self {
            dim,
            ids,
            labels,
            vectors,
        })
    }

    /// Builds a set from `(id, label, vector)` rows.
    pub fn from_rows<I>(dim: usize, rows: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u32, Vec<f32>)>,
    {
        let mut ids = Vec::new();
        let mut labels = Vec::new();
        let mut vectors = Vec::new();
        for (id, label, v) in rows {
            if v.len() != dim {
                return Err(Error::dim(format!("vector for id {id}"), dim, v.len()));
            }
            ids.push(id);
            labels.push(label);
            vectors.extend_from_slice(&v);
        }
        Self::new(dim, ids, labels, vectors)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// All vectors, row-major and contiguous.
    pub fn as_flat(&self) -> &[f32] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, u32, &[f32])> + '_ {
        self.ids
            .iter()
            .zip(&self.labels)
            .zip(self.vectors.chunks_exact(self.dim))
            .map(|((&id, &label), v)| (id, label, v))
    }

    /// Scales every vector to unit norm. Rejects zero vectors.
    pub fn normalize(&mut self) -> Result<()> {
        let dim = self.dim;
        for (i, row) in self.vectors.chunks_exact_mut(dim).enumerate() {
            let n = linalg::norm_f32(row);
            if n == 0.0 {
                return Err(Error::ZeroNorm(self.ids[i]));
            }
            if (n - 1.0).abs() <= UNIT_SLACK {
                continue;
            }
            for x in row.iter_mut() {
                *x = (f64::from(*x) / n) as f32;
            }
        }
        Ok(())
    }

    /// Largest `|‖v‖₂ − 1|` over the set.
    pub fn max_norm_deviation(&self) -> f64 {
        self.vectors
            .chunks_exact(self.dim)
            .map(|r| (linalg::norm_f32(r) - 1.0).abs())
            .fold(0.0, f64::max)
    }

    fn reordered(&self, order: &[usize]) -> Self {
        let mut ids = Vec::with_capacity(order.len());
        let mut labels = Vec::with_capacity(order.len());
        let mut vectors = Vec::with_capacity(order.len() * self.dim);
        for &i in order {
            ids.push(self.ids[i]);
            labels.push(self.labels[i]);
            vectors.extend_from_slice(self.vector(i));
        }
        Self {
            dim: self.dim,
            ids,
            labels,
            vectors,
        }
    }
}

/// The retrieval corpus: the same items embedded in the vision-language
/// space (`vlm`) and the vision-only space (`vm`), aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSpaceDatabase {
    vlm: EmbeddingSet,
    vm: EmbeddingSet,
    label_names: LabelNames,
}

impl DualSpaceDatabase {
    pub fn vlm(&self) -> &EmbeddingSet {
        &self.vlm
    }

    pub fn vm(&self) -> &EmbeddingSet {
        &self.vm
    }

    pub fn label_names(&self) -> &LabelNames {
        &self.label_names
    }

    pub fn len(&self) -> usize {
        self.vlm.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vlm.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        self.vlm.ids()
    }

    pub fn labels(&self) -> &[u32] {
        self.vlm.labels()
    }

    pub fn text_dim(&self) -> usize {
        self.vlm.dim()
    }

    pub fn image_dim(&self) -> usize {
        self.vm.dim()
    }

    /// Indices of items carrying `label`, ascending.
    pub fn indices_with_label(&self, label: u32) -> Vec<usize> {
        self.labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == label)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Aligns the two spaces by id (vlm order wins) and checks labels and names.
pub fn assemble_database(
    vlm: EmbeddingSet,
    vm: EmbeddingSet,
    names: LabelNames,
) -> Result<DualSpaceDatabase> {
    if vlm.len() != vm.len() {
        return Err(Error::IdMismatch(format!(
            "vlm has {} items, vm has {}",
            vlm.len(),
            vm.len()
        )));
    }
    let vm_index: HashMap<u64, usize> = vm.ids().iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut order = Vec::with_capacity(vlm.len());
    for (i, &id) in vlm.ids().iter().enumerate() {
        let j = *vm_index
            .get(&id)
            .ok_or_else(|| Error::IdMismatch(format!("id {id} missing from vm space")))?;
        let (a, b) = (vlm.labels()[i], vm.labels()[j]);
        if a != b {
            return Err(Error::LabelDisagreement { id, vlm: a, vm: b });
        }
        order.push(j);
    }
    for label in vlm.labels() {
        if !names.contains_key(label) {
            return Err(Error::MissingLabelName(*label));
        }
    }
    let vm = if order.iter().enumerate().all(|(i, &j)| i == j) {
        vm
    } else {
        vm.reordered(&order)
    };
    Ok(DualSpaceDatabase {
        vlm,
        vm,
        label_names: names,
    })
}

pub fn write_label_names(names: &LabelNames, path: &Path) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(names)?;
    bytes.push(b'\n');
    fsutil::write_atomic(path, &bytes)
}

pub fn read_label_names(path: &Path) -> Result<LabelNames> {
    let bytes = fsutil::read_file(path)?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Malformed {
        path: path.to_path_buf(),
        detail: e.to_string(),
    })
}

/// One text query plus its generated image queries.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryBundle {
    pub query_id: u64,
    pub text_embedding: Vec<f32>,
    pub image_queries: Vec<Vec<f32>>,
    pub generator_tags: Vec<u8>,
    pub label: Option<u32>,
}

/// Which image queries of a bundle to use.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct QuerySelection {
    /// Generators to draw from, in this order. `None` keeps every generator
    /// in order of first appearance.
    pub generators: Option<Vec<u8>>,
    /// Images taken per generator, first-come. `None` keeps all.
    pub per_generator: Option<usize>,
    /// Images skipped per generator before taking.
    pub start: usize,
}

impl QueryBundle {
    pub fn k(&self) -> usize {
        self.image_queries.len()
    }

    /// Distinct generator tags in order of first appearance.
    pub fn generators(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for &g in &self.generator_tags {
            if !out.contains(&g) {
                out.push(g);
            }
        }
        out
    }

    pub fn select(&self, selection: &QuerySelection) -> QueryBundle {
        let gens = selection.generators.clone().unwrap_or_else(|| self.generators());
        let mut image_queries = Vec::new();
        let mut generator_tags = Vec::new();
        for g in gens {
            let take = selection.per_generator.unwrap_or(usize::MAX);
            for (img, _) in self
                .image_queries
                .iter()
                .zip(&self.generator_tags)
                .filter(|(_, &t)| t == g)
                .skip(selection.start)
                .take(take)
            {
                image_queries.push(img.clone());
                generator_tags.push(g);
            }
        }
        QueryBundle {
            query_id: self.query_id,
            text_embedding: self.text_embedding.clone(),
            image_queries,
            generator_tags,
            label: self.label,
        }
    }

    /// Pools the image queries of several bundles for the same text query.
    pub fn concat(parts: &[QueryBundle]) -> Result<QueryBundle> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Empty("no bundles to concatenate".into()))?;
        let mut out = first.clone();
        for p in &parts[1..] {
            if p.query_id != first.query_id || p.text_embedding != first.text_embedding {
                return Err(Error::InvalidArgument(
                    "concatenated bundles must share the text query".into(),
                ));
            }
            out.image_queries.extend(p.image_queries.iter().cloned());
            out.generator_tags.extend_from_slice(&p.generator_tags);
        }
        Ok(out)
    }

    pub fn check_dims(&self, text_dim: usize, image_dim: usize) -> Result<()> {
        if self.text_embedding.len() != text_dim {
            return Err(Error::dim(
                format!("text embedding of query {}", self.query_id),
                text_dim,
                self.text_embedding.len(),
            ));
        }
        if self.generator_tags.len() != self.image_queries.len() {
            return Err(Error::dim(
                format!("generator tags of query {}", self.query_id),
                self.image_queries.len(),
                self.generator_tags.len(),
            ));
        }
        for img in &self.image_queries {
            if img.len() != image_dim {
                return Err(Error::dim(
                    format!("image query of query {}", self.query_id),
                    image_dim,
                    img.len(),
                ));
            }
        }
        Ok(())
    }
}
