//! Seeded synthetic instances with a known hierarchy.
//!
//! Subclass text embeddings are distinct standard basis vectors, so every
//! subclass is exactly separable at zero noise. Each superclass text
//! embedding blends the mean of its subclass directions with a private
//! orthogonal direction that no image is drawn towards; `coarse_gap` sets
//! the blend. Images are their subclass direction plus isotropic Gaussian
//! noise, re-normalized.
//!
//! Randomness comes from `ChaCha8Rng` seeded with `seed` and Gaussian draws
//! from `rand_distr::StandardNormal`, consumed in a fixed order
//! (superclass, subclass, image, coordinate).

use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::hierarchy::{DagNodeFile, HierarchyDag, HierarchyError, LabelMap};
use crate::tensorio::{save_bundle, EmbeddingBundle, TensorIoError};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("dimension {d} too small: need at least {needed}")]
    DimensionTooSmall { d: usize, needed: usize },
    #[error("invalid spec: {0}")]
    Invalid(String),
    #[error(transparent)]
    Bundle(#[from] TensorIoError),
    #[error(transparent)]
    Hierarchy(#[from] HierarchyError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    /// Superclass count.
    pub k: usize,
    /// Subclasses per superclass.
    pub m: usize,
    /// Embedding dimension.
    pub d: usize,
    pub images_per_subclass: usize,
    /// Standard deviation of the isotropic Gaussian noise added to every
    /// coordinate of an image before re-normalization.
    pub image_noise: f64,
    /// 0 puts the superclass text at its subclass mean, 1 makes it
    /// orthogonal to every subclass direction.
    pub coarse_gap: f64,
    pub seed: u64,
    /// Extra leaves per superclass in the generated taxonomy whose text
    /// directions no image is drawn towards.
    #[serde(default)]
    pub distractors_per_superclass: usize,
}

impl SyntheticSpec {
    /// Smallest dimension that fits every orthogonal direction the spec needs.
    pub fn required_dim(&self) -> usize {
        let displaced = if self.coarse_gap > 0.0 { self.k } else { 0 };
        self.k * (self.m + self.distractors_per_superclass) + displaced
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        if self.k < 2 {
            return Err(SynthError::Invalid("k must be at least 2".into()));
        }
        if self.m < 1 {
            return Err(SynthError::Invalid("m must be at least 1".into()));
        }
        if self.images_per_subclass < 1 {
            return Err(SynthError::Invalid("images_per_subclass must be at least 1".into()));
        }
        if !(self.image_noise >= 0.0 && self.image_noise.is_finite()) {
            return Err(SynthError::Invalid("image_noise must be finite and non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.coarse_gap) {
            return Err(SynthError::Invalid("coarse_gap must lie in [0, 1]".into()));
        }
        let needed = self.required_dim();
        if self.d < needed {
            return Err(SynthError::DimensionTooSmall { d: self.d, needed });
        }
        Ok(())
    }

    pub fn superclass_name(i: usize) -> String {
        format!("c{i}")
    }

    pub fn subclass_name(i: usize, j: usize) -> String {
        format!("c{i}_s{j}")
    }

    pub fn distractor_name(i: usize, j: usize) -> String {
        format!("c{i}_x{j}")
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticInstance {
    pub spec: SyntheticSpec,
    pub images: EmbeddingBundle,
    /// One row per subclass text, distractors included.
    pub sub_text: EmbeddingBundle,
    pub sup_text: EmbeddingBundle,
    /// True map (no distractors).
    pub map: LabelMap,
    /// root → superclasses → subclass and distractor leaves.
    pub dag: HierarchyDag,
    /// True superclass index per image row.
    pub labels: Vec<usize>,
}

fn basis(d: usize, i: usize) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[i] = 1.0;
    v
}

fn unit_f32(v: &[f64]) -> Vec<f32> {
    let mut norm = 0.0f64;
    for x in v {
        norm += x * x;
    }
    let norm = norm.sqrt();
    v.iter().map(|x| (x / norm) as f32).collect()
}

pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticInstance, SynthError> {
    spec.validate()?;
    let SyntheticSpec { k, m, d, .. } = *spec;
    let x = spec.distractors_per_superclass;
    let sub_dir = |i: usize, j: usize| i * m + j;
    let distractor_dir = |i: usize, j: usize| k * m + i * x + j;
    let displaced_dir = |i: usize| k * m + k * x + i;

    let mut sub_names = Vec::with_capacity(k * (m + x));
    let mut sub_data = Vec::with_capacity(k * (m + x) * d);
    let mut sup_data = Vec::with_capacity(k * d);
    let mut tree = Vec::with_capacity(k);
    for i in 0..k {
        let mut leaves = Vec::with_capacity(m + x);
        for j in 0..m {
            sub_names.push(SyntheticSpec::subclass_name(i, j));
            sub_data.extend(unit_f32(&basis(d, sub_dir(i, j))));
            leaves.push(SyntheticSpec::subclass_name(i, j));
        }
        for j in 0..x {
            sub_names.push(SyntheticSpec::distractor_name(i, j));
            sub_data.extend(unit_f32(&basis(d, distractor_dir(i, j))));
            leaves.push(SyntheticSpec::distractor_name(i, j));
        }
        let mut sup = vec![0.0f64; d];
        let w = (1.0 - spec.coarse_gap) / m as f64;
        for j in 0..m {
            sup[sub_dir(i, j)] += w;
        }
        if spec.coarse_gap > 0.0 {
            sup[displaced_dir(i)] += spec.coarse_gap;
        }
        sup_data.extend(unit_f32(&sup));
        tree.push(DagNodeFile {
            name: SyntheticSpec::superclass_name(i),
            children: leaves
                .into_iter()
                .map(|name| DagNodeFile {
                    name,
                    children: vec![],
                })
                .collect(),
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_images = k * m * spec.images_per_subclass;
    let mut image_data = Vec::with_capacity(n_images * d);
    let mut labels = Vec::with_capacity(n_images);
    let mut v = vec![0.0f64; d];
    for i in 0..k {
        for j in 0..m {
            for _ in 0..spec.images_per_subclass {
                for (c, slot) in v.iter_mut().enumerate() {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    *slot = spec.image_noise * z + if c == sub_dir(i, j) { 1.0 } else { 0.0 };
                }
                image_data.extend(unit_f32(&v));
                labels.push(i);
            }
        }
    }

    let images = EmbeddingBundle::new(
        d,
        (0..n_images).map(|n| format!("img{n}")).collect(),
        image_data,
        true,
    )?;
    let sub_text = EmbeddingBundle::new(d, sub_names, sub_data, true)?;
    let sup_text = EmbeddingBundle::new(d, (0..k).map(SyntheticSpec::superclass_name).collect(), sup_data, true)?;
    let map = LabelMap::new(
        (0..k).map(|i| (SyntheticSpec::superclass_name(i), (0..m).map(|j| SyntheticSpec::subclass_name(i, j)).collect::<Vec<_>>())),
    )?;
    let dag = HierarchyDag::from_tree(&DagNodeFile {
        name: "root".into(),
        children: tree,
    })?;
    Ok(SyntheticInstance {
        spec: spec.clone(),
        images,
        sub_text,
        sup_text,
        map,
        dag,
        labels,
    })
}

fn write_text(path: &Path, text: String) -> Result<(), SynthError> {
    fs::write(path, text).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })
}

impl SyntheticInstance {
    /// Writes `images/`, `sub_text/`, `sup_text/` bundles plus `map.json`,
    /// `dag.json`, `labels.json` and `spec.json` under `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|source| SynthError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        save_bundle(&self.images, dir.join("images"))?;
        save_bundle(&self.sub_text, dir.join("sub_text"))?;
        save_bundle(&self.sup_text, dir.join("sup_text"))?;
        write_text(&dir.join("map.json"), self.map.to_json())?;
        write_text(&dir.join("dag.json"), self.dag.to_json())?;
        write_text(&dir.join("labels.json"), labels_json(&self.labels))?;
        let mut spec = serde_json::to_string_pretty(&self.spec).expect("spec serializes");
        spec.push('\n');
        write_text(&dir.join("spec.json"), spec)
    }
}

/// `labels.json` body: a JSON array of superclass indices.
pub fn labels_json(labels: &[usize]) -> String {
    let mut s = serde_json::to_string(labels).expect("labels serialize");
    s.push('\n');
    s
}

pub fn load_spec(path: impl AsRef<Path>) -> Result<SyntheticSpec, SynthError> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|source| SynthError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|e| SynthError::Invalid(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::{dot_f64, norm_f64};

    fn spec(noise: f64, gap: f64) -> SyntheticSpec {
        SyntheticSpec {
            k: 3,
            m: 2,
            d: 12,
            images_per_subclass: 4,
            image_noise: noise,
            coarse_gap: gap,
            seed: 7,
            distractors_per_superclass: 0,
        }
    }

    #[test]
    fn shapes_and_labels() {
        let inst = generate(&spec(0.5, 0.5)).unwrap();
        assert_eq!(inst.images.count(), 24);
        assert_eq!(inst.sub_text.count(), 6);
        assert_eq!(inst.sup_text.count(), 3);
        assert_eq!(inst.labels, [0, 0, 0, 0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 2, 2, 2]);
        assert!(inst.images.is_normalized() && inst.sub_text.is_normalized() && inst.sup_text.is_normalized());
    }

    #[test]
    fn deterministic_per_seed() {
        let a = generate(&spec(0.9, 0.3)).unwrap();
        let b = generate(&spec(0.9, 0.3)).unwrap();
        assert_eq!(a.images.to_le_bytes(), b.images.to_le_bytes());
        let mut other = spec(0.9, 0.3);
        other.seed = 8;
        assert_ne!(generate(&other).unwrap().images, a.images);
    }

    #[test]
    fn full_gap_is_orthogonal_to_noiseless_images() {
        let inst = generate(&spec(0.0, 1.0)).unwrap();
        for img in inst.images.rows() {
            for sup in inst.sup_text.rows() {
                assert_eq!(dot_f64(img, sup), 0.0);
            }
        }
    }

    #[test]
    fn zero_gap_is_subclass_mean() {
        let inst = generate(&spec(0.0, 0.0)).unwrap();
        let h = 0.5f64.sqrt() as f32;
        let mut expected = vec![0.0f32; 12];
        expected[0] = h;
        expected[1] = h;
        assert_eq!(inst.sup_text.row(0), expected.as_slice());
    }

    #[test]
    fn dimension_checks() {
        let mut s = spec(0.1, 0.5);
        s.d = 8;
        assert!(matches!(generate(&s), Err(SynthError::DimensionTooSmall { needed: 9, .. })));
        s.coarse_gap = 0.0;
        s.d = 6;
        assert!(generate(&s).is_ok());
        s.k = 1;
        assert!(matches!(generate(&s), Err(SynthError::Invalid(_))));
    }

    #[test]
    fn distractors_extend_the_taxonomy() {
        let mut s = spec(0.2, 0.5);
        s.distractors_per_superclass = 2;
        s.d = 3 * 4 + 3;
        let inst = generate(&s).unwrap();
        assert_eq!(inst.sub_text.count(), 12);
        let noisy = inst.dag.expand_noisy(inst.map.superclasses()).unwrap();
        assert_eq!(noisy.set_sizes(), vec![4, 4, 4]);
        for i in 0..3 {
            for t in inst.map.set(i) {
                assert!(noisy.set(i).contains(t));
            }
        }
        for row in inst.sub_text.rows() {
            assert!((norm_f64(row) - 1.0).abs() < 1e-7);
        }
    }

    #[test]
    fn writes_instance_directory() {
        let dir = tempfile::tempdir().unwrap();
        let inst = generate(&spec(0.3, 0.2)).unwrap();
        inst.write(dir.path()).unwrap();
        let back = crate::hierarchy::load_label_map(dir.path().join("map.json")).unwrap();
        assert_eq!(back, inst.map);
        assert_eq!(load_spec(dir.path().join("spec.json")).unwrap(), inst.spec);
        let images = crate::tensorio::load_bundle(dir.path().join("images")).unwrap();
        assert_eq!(images, inst.images);
        let labels: Vec<usize> =
            serde_json::from_str(&fs::read_to_string(dir.path().join("labels.json")).unwrap()).unwrap();
        assert_eq!(labels, inst.labels);
    }
}
