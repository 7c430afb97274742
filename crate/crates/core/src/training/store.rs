//! Labeled training corpus: per-class text embedding plus a pool of generated
//! images, each embedded in both spaces.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::resolve_relative;
use crate::store::manifest::{check_format, read_json, sibling_name, write_json};
use crate::store::{read_embedding_set, write_embedding_set, EmbeddingSet};

pub const TRAIN_FORMAT: &str = "hybridrank-train";

#[derive(Debug, Clone, PartialEq)]
pub struct TrainImage {
    pub vm: Vec<f32>,
    pub vlm: Vec<f32>,
    pub generator: u8,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainClass {
    pub class_id: u32,
    pub text_embedding: Vec<f32>,
    pub images: Vec<TrainImage>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainStore {
    pub classes: Vec<TrainClass>,
}

impl TrainStore {
    /// `(text dim, image dim)`, checked to be consistent across the store.
    pub fn dims(&self) -> Result<(usize, usize)> {
        let first = self
            .classes
            .first()
            .ok_or_else(|| Error::Empty("training store has no classes".into()))?;
        let dc = first.text_embedding.len();
        let di = first
            .images
            .first()
            .map(|i| i.vm.len())
            .ok_or_else(|| Error::Empty(format!("class {} has no images", first.class_id)))?;
        for c in &self.classes {
            if c.text_embedding.len() != dc {
                return Err(Error::dim(format!("text of class {}", c.class_id), dc, c.text_embedding.len()));
            }
            for img in &c.images {
                if img.vm.len() != di {
                    return Err(Error::dim(format!("vm image of class {}", c.class_id), di, img.vm.len()));
                }
                if img.vlm.len() != dc {
                    return Err(Error::dim(format!("vlm image of class {}", c.class_id), dc, img.vlm.len()));
                }
            }
        }
        Ok((dc, di))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainManifest {
    pub format: String,
    pub version: u32,
    pub text: String,
    pub images_vm: String,
    pub images_vlm: String,
    /// Generator tag per image record, in file order.
    pub generators: Vec<u8>,
}

/// Writes the three EMB1 files and the manifest. Image ids are sequential.
pub fn save_train_store(store: &TrainStore, manifest_path: &Path) -> Result<()> {
    let (dc, di) = store.dims()?;
    let text = EmbeddingSet::from_rows(
        dc,
        store
            .classes
            .iter()
            .map(|c| (u64::from(c.class_id), c.class_id, c.text_embedding.clone())),
    )?;
    let mut vm_rows = Vec::new();
    let mut vlm_rows = Vec::new();
    let mut generators = Vec::new();
    let mut next = 0u64;
    for c in &store.classes {
        for img in &c.images {
            vm_rows.push((next, c.class_id, img.vm.clone()));
            vlm_rows.push((next, c.class_id, img.vlm.clone()));
            generators.push(img.generator);
            next += 1;
        }
    }
    let m = TrainManifest {
        format: TRAIN_FORMAT.into(),
        version: 1,
        text: sibling_name(manifest_path, "text.emb"),
        images_vm: sibling_name(manifest_path, "vm.emb"),
        images_vlm: sibling_name(manifest_path, "vlm.emb"),
        generators,
    };
    write_embedding_set(&text, &resolve_relative(manifest_path, &m.text))?;
    write_embedding_set(&EmbeddingSet::from_rows(di, vm_rows)?, &resolve_relative(manifest_path, &m.images_vm))?;
    write_embedding_set(&EmbeddingSet::from_rows(dc, vlm_rows)?, &resolve_relative(manifest_path, &m.images_vlm))?;
    write_json(&m, manifest_path)
}

pub fn load_train_store(manifest_path: &Path, renormalize: bool) -> Result<TrainStore> {
    let m: TrainManifest = read_json(manifest_path)?;
    check_format(manifest_path, &m.format, TRAIN_FORMAT, m.version)?;
    let text = read_embedding_set(&resolve_relative(manifest_path, &m.text), renormalize)?;
    let vm = read_embedding_set(&resolve_relative(manifest_path, &m.images_vm), renormalize)?;
    let vlm = read_embedding_set(&resolve_relative(manifest_path, &m.images_vlm), renormalize)?;
    if vm.ids() != vlm.ids() || vm.labels() != vlm.labels() {
        return Err(Error::IdMismatch("training vm and vlm image files are not aligned".into()));
    }
    if m.generators.len() != vm.len() {
        return Err(Error::dim("generator tags", vm.len(), m.generators.len()));
    }

    let mut classes: Vec<TrainClass> = text
        .iter()
        .map(|(_, label, v)| TrainClass {
            class_id: label,
            text_embedding: v.to_vec(),
            images: Vec::new(),
        })
        .collect();
    let slot: HashMap<u32, usize> = classes.iter().enumerate().map(|(i, c)| (c.class_id, i)).collect();
    for (i, (_, label, v)) in vm.iter().enumerate() {
        let s = *slot.get(&label).ok_or_else(|| Error::Malformed {
            path: manifest_path.to_path_buf(),
            detail: format!("image of class {label} has no text embedding"),
        })?;
        classes[s].images.push(TrainImage {
            vm: v.to_vec(),
            vlm: vlm.vector(i).to_vec(),
            generator: m.generators[i],
        });
    }
    Ok(TrainStore { classes })
}
