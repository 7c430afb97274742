//! Seeded synthetic dual-space worlds.
//!
//! Each class has a unit prototype in VM space and a linear map into VLM
//! space that sends the prototype to a class anchor. Anchors lean toward one
//! shared axis, so classes sit closer together in VLM space than in VM space.
//! Real database images are noisy copies of the prototype; generated images
//! additionally carry a per-generator bias. Text embeddings are the VLM
//! prototype shifted along one direction shared by every class, which plays
//! the role of the modality gap.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, normalize_in_place, norm, to_f64, Matrix};
use crate::store::{
    assemble_database, save_database, save_query_bundles, DualSpaceDatabase, EmbeddingSet, LabelNames,
    QueryBundle,
};
use crate::training::{save_train_store, TrainClass, TrainImage, TrainStore};

const MAP_SPREAD: f64 = 0.0;
const NOISE_VLM: f64 = 0.01;
const VLM_CONE: f64 = 0.8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub num_classes: usize,
    pub d_c: usize,
    pub d_i: usize,
    pub db_items_per_class: usize,
    pub images_per_class_per_generator: usize,
    pub num_generators: usize,
    /// Per-coordinate std of the real-image perturbation.
    pub noise_real: f64,
    /// Per-coordinate std of the generated-image perturbation.
    pub noise_syn: f64,
    pub gap_strength: f64,
    pub gen_bias_strength: f64,
    pub train_fraction: f64,
    /// Held-out real images per evaluation class, used as "perfect" queries.
    pub real_queries_per_class: usize,
    /// Gain of each class map off its prototype direction.
    pub map_spread: f64,
    /// Per-coordinate std of the noise added after mapping into VLM space.
    pub noise_vlm: f64,
    /// Squared weight of the direction shared by every class's VLM anchor;
    /// higher values crowd the classes into a narrower cone.
    pub vlm_cone: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_classes: 60,
            d_c: 32,
            d_i: 32,
            db_items_per_class: 40,
            images_per_class_per_generator: 10,
            num_generators: 3,
            noise_real: 0.35,
            noise_syn: 0.35,
            gap_strength: 0.8,
            gen_bias_strength: 0.4,
            train_fraction: 0.7,
            real_queries_per_class: 10,
            map_spread: MAP_SPREAD,
            noise_vlm: NOISE_VLM,
            vlm_cone: VLM_CONE,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        for (name, v) in [
            ("noise_real", self.noise_real),
            ("noise_syn", self.noise_syn),
            ("gap_strength", self.gap_strength),
            ("gen_bias_strength", self.gen_bias_strength),
            ("map_spread", self.map_spread),
            ("noise_vlm", self.noise_vlm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(&format!("{name} must be a finite non-negative number"));
            }
        }
        if !(0.0..1.0).contains(&self.vlm_cone) {
            return bad("vlm_cone must lie in [0, 1)");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie strictly between 0 and 1");
        }
        if self.d_c < 2 || self.d_i < 2 {
            return bad("dimensions must be >= 2");
        }
        if self.num_generators == 0 || self.num_generators > usize::from(u8::MAX) {
            return bad("num_generators must be in 1..=255");
        }
        let (train, eval) = self.split_sizes();
        if train == 0 || eval == 0 {
            return bad("class split leaves one side empty");
        }
        if self.db_items_per_class == 0 {
            return bad("db_items_per_class must be >= 1");
        }
        Ok(())
    }

    /// `(train classes, eval classes)`.
    pub fn split_sizes(&self) -> (usize, usize) {
        let train = ((self.num_classes as f64) * self.train_fraction).round() as usize;
        let train = train.min(self.num_classes);
        (train, self.num_classes - train)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub train_classes: Vec<u32>,
    pub eval_classes: Vec<u32>,
    pub train: TrainStore,
    /// Real images of the evaluation classes only.
    pub database: DualSpaceDatabase,
    /// One bundle per evaluation class with every generated image.
    pub queries: Vec<QueryBundle>,
    /// Same text queries, with held-out real images in place of generated ones.
    pub real_queries: Vec<QueryBundle>,
}

struct Sampler {
    rng: ChaCha8Rng,
}

impl Sampler {
    fn gaussian(&mut self, d: usize, std: f64) -> Vec<f64> {
        let normal = Normal::new(0.0, std).expect("std validated");
        (0..d).map(|_| normal.sample(&mut self.rng)).collect()
    }

    fn unit(&mut self, d: usize) -> Vec<f64> {
        loop {
            let mut v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut self.rng)).collect();
            if normalize_in_place(&mut v) > 0.0 {
                return v;
            }
        }
    }

    fn perturbed(&mut self, base: &[f64], std: f64) -> Vec<f64> {
        let noise = self.gaussian(base.len(), std);
        base.iter().zip(noise).map(|(b, e)| b + e).collect()
    }
}

fn unit_f32(mut v: Vec<f64>) -> Vec<f32> {
    if normalize_in_place(&mut v) == 0.0 {
        // astronomically unlikely; keep the output a valid unit vector
        v[0] = 1.0;
    }
    v.iter().map(|&x| x as f32).collect()
}

struct ClassModel {
    prototype: Vec<f64>,
    noise_vlm: f64,
    map: Matrix,
    text: Vec<f32>,
}

impl ClassModel {
    /// VM vector and its VLM counterpart (the class map applied to the VM
    /// vector, plus noise).
    fn image(&self, s: &mut Sampler, bias: Option<&[f64]>, std: f64) -> (Vec<f32>, Vec<f32>) {
        let mut base = self.prototype.clone();
        if let Some(b) = bias {
            base.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        let vm = unit_f32(s.perturbed(&base, std));
        let mapped = self.map.mul_vec(&to_f64(&vm));
        let vlm = unit_f32(s.perturbed(&mapped, self.noise_vlm));
        (vm, vlm)
    }
}

pub fn generate_world(config: &SynthConfig) -> Result<SynthWorld> {
    config.validate()?;
    let mut s = Sampler {
        rng: ChaCha8Rng::seed_from_u64(config.seed),
    };
    let (dc, di) = (config.d_c, config.d_i);

    let gap_dir = s.unit(dc);
    let cone_axis = s.unit(dc);
    let (shared, own) = (config.vlm_cone.sqrt(), (1.0 - config.vlm_cone).sqrt());
    let biases: Vec<Vec<f64>> = (0..config.num_generators)
        .map(|_| s.unit(di).iter().map(|x| x * config.gen_bias_strength).collect())
        .collect();
    let spread_std = config.map_spread / (di as f64).sqrt();
    let classes: Vec<ClassModel> = (0..config.num_classes)
        .map(|_| {
            let prototype = s.unit(di);
            let mut anchor: Vec<f64> = s
                .unit(dc)
                .iter()
                .zip(&cone_axis)
                .map(|(r, m)| own * r + shared * m)
                .collect();
            normalize_in_place(&mut anchor);
            // anchor·prototypeᵀ plus an isotropic random part
            let mut map = Matrix::from_vec(dc, di, s.gaussian(dc * di, spread_std));
            map.add_outer(&anchor, &prototype);
            let mut vlm_proto = map.mul_vec(&prototype);
            normalize_in_place(&mut vlm_proto);
            let text = unit_f32(
                vlm_proto
                    .iter()
                    .zip(&gap_dir)
                    .map(|(p, o)| p + config.gap_strength * o)
                    .collect(),
            );
            ClassModel {
                prototype,
                noise_vlm: config.noise_vlm,
                map,
                text,
            }
        })
        .collect();

    let mut order: Vec<u32> = (0..config.num_classes as u32).collect();
    order.shuffle(&mut s.rng);
    let (n_train, _) = config.split_sizes();
    let mut train_classes = order[..n_train].to_vec();
    let mut eval_classes = order[n_train..].to_vec();
    train_classes.sort_unstable();
    eval_classes.sort_unstable();

    let generated = |s: &mut Sampler, c: &ClassModel| -> Vec<TrainImage> {
        let mut out = Vec::new();
        for (g, bias) in biases.iter().enumerate() {
            for _ in 0..config.images_per_class_per_generator {
                let (vm, vlm) = c.image(s, Some(bias), config.noise_syn);
                out.push(TrainImage {
                    vm,
                    vlm,
                    generator: g as u8,
                });
            }
        }
        out
    };

    let train = TrainStore {
        classes: train_classes
            .iter()
            .map(|&c| {
                let model = &classes[c as usize];
                TrainClass {
                    class_id: c,
                    text_embedding: model.text.clone(),
                    images: generated(&mut s, model),
                }
            })
            .collect(),
    };

    let mut vlm_rows = Vec::new();
    let mut vm_rows = Vec::new();
    let mut queries = Vec::new();
    let mut real_queries = Vec::new();
    let mut next_id = 0u64;
    for &c in &eval_classes {
        let model = &classes[c as usize];
        for _ in 0..config.db_items_per_class {
            let (vm, vlm) = model.image(&mut s, None, config.noise_real);
            vm_rows.push((next_id, c, vm));
            vlm_rows.push((next_id, c, vlm));
            next_id += 1;
        }
        let images = generated(&mut s, model);
        queries.push(QueryBundle {
            query_id: u64::from(c),
            text_embedding: model.text.clone(),
            generator_tags: images.iter().map(|i| i.generator).collect(),
            image_queries: images.into_iter().map(|i| i.vm).collect(),
            label: Some(c),
        });
        let real: Vec<Vec<f32>> = (0..config.real_queries_per_class)
            .map(|_| model.image(&mut s, None, config.noise_real).0)
            .collect();
        real_queries.push(QueryBundle {
            query_id: u64::from(c),
            text_embedding: model.text.clone(),
            generator_tags: vec![0; real.len()],
            image_queries: real,
            label: Some(c),
        });
    }
    let names: LabelNames = eval_classes.iter().map(|&c| (c, format!("class_{c:03}"))).collect();
    let database = assemble_database(
        EmbeddingSet::from_rows(dc, vlm_rows)?,
        EmbeddingSet::from_rows(di, vm_rows)?,
        names,
    )?;

    Ok(SynthWorld {
        config: config.clone(),
        train_classes,
        eval_classes,
        train,
        database,
        queries,
        real_queries,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
}

impl Histogram {
    fn from_values(values: &[f64], lo: f64, hi: f64, bins: usize) -> Self {
        let mut counts = vec![0u64; bins];
        let width = (hi - lo) / bins as f64;
        for &v in values {
            let b = ((v - lo) / width).floor();
            let b = if b.is_nan() { 0 } else { (b.max(0.0) as usize).min(bins - 1) };
            counts[b] += 1;
        }
        let mean = if values.is_empty() {
            0.0
        } else {
            values.iter().sum::<f64>() / values.len() as f64
        };
        Self {
            lo,
            hi,
            counts,
            total: values.len() as u64,
            mean,
        }
    }

    pub fn bin_edges(&self, b: usize) -> (f64, f64) {
        let width = (self.hi - self.lo) / self.counts.len() as f64;
        (self.lo + b as f64 * width, self.lo + (b + 1) as f64 * width)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimilarityDistributions {
    /// Same-class cosines between generated query images and real database images.
    pub syn_to_real: Histogram,
    /// Same-class cosines between distinct generated images of the same generator.
    pub syn_to_syn: Histogram,
}

pub const HISTOGRAM_BINS: usize = 40;

/// VM-space cosines over the evaluation classes: every generated query image
/// against every real database image of its class, and every unordered pair
/// of same-generator generated images of a class.
pub fn measure_similarity_distributions(world: &SynthWorld) -> SimilarityDistributions {
    let db = &world.database;
    let mut syn_real = Vec::new();
    let mut syn_syn = Vec::new();
    for q in &world.queries {
        let label = q.label.expect("world queries are labeled");
        let real: Vec<Vec<f64>> = db.indices_with_label(label).iter().map(|&i| to_f64(db.vm().vector(i))).collect();
        let imgs: Vec<Vec<f64>> = q.image_queries.iter().map(|v| to_f64(v)).collect();
        for a in &imgs {
            for r in &real {
                syn_real.push(dot(a, r));
            }
        }
        for i in 0..imgs.len() {
            for j in i + 1..imgs.len() {
                if q.generator_tags[i] == q.generator_tags[j] {
                    syn_syn.push(dot(&imgs[i], &imgs[j]));
                }
            }
        }
    }
    SimilarityDistributions {
        syn_to_real: Histogram::from_values(&syn_real, -1.0, 1.0, HISTOGRAM_BINS),
        syn_to_syn: Histogram::from_values(&syn_syn, -1.0, 1.0, HISTOGRAM_BINS),
    }
}

/// `bin_lo,bin_hi,syn_to_real,syn_to_syn` rows.
pub fn distributions_csv(d: &SimilarityDistributions) -> String {
    let mut out = String::from("bin_lo,bin_hi,syn_to_real,syn_to_syn\n");
    for b in 0..d.syn_to_real.counts.len() {
        let (lo, hi) = d.syn_to_real.bin_edges(b);
        let _ = writeln!(out, "{lo:?},{hi:?},{},{}", d.syn_to_real.counts[b], d.syn_to_syn.counts[b]);
    }
    out
}

/// File locations written by [`save_world`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldPaths {
    pub train: PathBuf,
    pub database: PathBuf,
    pub queries: PathBuf,
    pub real_queries: PathBuf,
}

impl WorldPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            train: dir.join("train.json"),
            database: dir.join("db.json"),
            queries: dir.join("queries.json"),
            real_queries: dir.join("real_queries.json"),
        }
    }
}

pub fn save_world(world: &SynthWorld, dir: &Path) -> Result<WorldPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = WorldPaths::in_dir(dir);
    save_train_store(&world.train, &paths.train)?;
    save_database(&world.database, &paths.database)?;
    save_query_bundles(&world.queries, &paths.queries)?;
    save_query_bundles(&world.real_queries, &paths.real_queries)?;
    Ok(paths)
}

/// Largest `|‖v‖ − 1|` over `vectors`.
pub fn max_unit_deviation(vectors: &[Vec<f32>]) -> f64 {
    vectors
        .iter()
        .map(|v| (norm(&to_f64(v)) - 1.0).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::similarity::QueryMode;
    use crate::store::load_database;

    fn small() -> SynthConfig {
        SynthConfig {
            num_classes: 10,
            d_c: 8,
            d_i: 8,
            db_items_per_class: 5,
            images_per_class_per_generator: 4,
            num_generators: 2,
            real_queries_per_class: 3,
            ..Default::default()
        }
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_world(&small()).unwrap(), generate_world(&small()).unwrap());
        let other = SynthConfig { seed: 1, ..small() };
        assert_ne!(generate_world(&small()).unwrap(), generate_world(&other).unwrap());
    }

    #[test]
    fn split_is_disjoint_and_complete() {
        let w = generate_world(&small()).unwrap();
        assert_eq!(w.train_classes.len(), 7);
        assert_eq!(w.eval_classes.len(), 3);
        let mut all: Vec<u32> = w.train_classes.iter().chain(&w.eval_classes).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        for c in &w.train.classes {
            assert!(!w.eval_classes.contains(&c.class_id));
            assert_eq!(c.images.len(), 8);
        }
        assert!(w.database.labels().iter().all(|l| w.eval_classes.contains(l)));
        assert_eq!(w.database.len(), 15);
    }

    #[test]
    fn vectors_are_unit() {
        let w = generate_world(&small()).unwrap();
        assert!(w.database.vlm().max_norm_deviation() <= 1e-5);
        assert!(w.database.vm().max_norm_deviation() <= 1e-5);
        for c in &w.train.classes {
            let vms: Vec<_> = c.images.iter().map(|i| i.vm.clone()).collect();
            let vlms: Vec<_> = c.images.iter().map(|i| i.vlm.clone()).collect();
            assert!(max_unit_deviation(&vms) <= 1e-5);
            assert!(max_unit_deviation(&vlms) <= 1e-5);
            assert!(max_unit_deviation(std::slice::from_ref(&c.text_embedding)) <= 1e-5);
        }
    }

    #[test]
    fn zero_noise_world_is_degenerate() {
        let cfg = SynthConfig {
            noise_real: 0.0,
            noise_syn: 0.0,
            gap_strength: 0.0,
            gen_bias_strength: 0.0,
            ..small()
        };
        let w = generate_world(&cfg).unwrap();
        for q in &w.queries {
            let rows = w.database.indices_with_label(q.label.unwrap());
            for &r in &rows {
                assert_eq!(w.database.vm().vector(r), q.image_queries[0].as_slice());
            }
        }
        let report = crate::evaluation::evaluate(
            &w.database,
            &w.queries,
            None,
            &Default::default(),
            &[QueryMode::TextOnly, QueryMode::ImageOnlyMean, QueryMode::HybridMean],
            &[5],
        )
        .unwrap();
        for m in &report.modes {
            assert_eq!(m.map, 1.0, "{}", m.mode);
        }
        let d = measure_similarity_distributions(&w);
        let last = HISTOGRAM_BINS - 1;
        assert_eq!(d.syn_to_real.counts[last], d.syn_to_real.total);
        assert_eq!(d.syn_to_syn.counts[last], d.syn_to_syn.total);
    }

    #[test]
    fn histogram_mass_and_bias_effect() {
        let w = generate_world(&SynthConfig::default()).unwrap();
        let d = measure_similarity_distributions(&w);
        // 18 eval classes, 30 images x 40 db items; 3 generators x C(10,2) pairs
        assert_eq!(d.syn_to_real.total, 18 * 30 * 40);
        assert_eq!(d.syn_to_syn.total, 18 * 3 * 45);
        assert_eq!(d.syn_to_real.counts.iter().sum::<u64>(), d.syn_to_real.total);
        assert_eq!(d.syn_to_syn.counts.iter().sum::<u64>(), d.syn_to_syn.total);
        assert!(d.syn_to_syn.mean > d.syn_to_real.mean);
        assert_eq!(distributions_csv(&d).lines().count(), HISTOGRAM_BINS + 1);
    }

    #[test]
    fn invalid_configs() {
        for cfg in [
            SynthConfig { noise_real: -0.1, ..small() },
            SynthConfig { train_fraction: 1.0, ..small() },
            SynthConfig { d_i: 1, ..small() },
            SynthConfig { num_classes: 1, ..small() },
        ] {
            assert!(generate_world(&cfg).is_err());
        }
    }

    #[test]
    fn saved_world_loads() {
        let w = generate_world(&small()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = save_world(&w, dir.path()).unwrap();
        assert_eq!(load_database(&paths.database, true).unwrap(), w.database);
        assert_eq!(crate::training::load_train_store(&paths.train, true).unwrap(), w.train);
        assert_eq!(crate::store::load_query_bundles(&paths.queries, true).unwrap(), w.queries);
    }
}
