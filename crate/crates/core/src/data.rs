//! Synthetic multi-dataset video suite.
//!
//! Each latent concept is a set of Gaussian blobs translating together in a
//! fixed direction on a wrap-around canvas. A dataset class renders one of its concepts, chosen
//! per sample, through that dataset's bias profile (background level, noise,
//! frame decimation, blob scale). Start positions are random, so a single
//! frame never reveals the class. Classes of two datasets are aliased when
//! one class's concept set is contained in the other's.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{mix, Rng};
use crate::tensor::{Real, Tensor};

const DIRECTION_NAMES: [&str; 8] = [
    "right",
    "up-right",
    "up",
    "up-left",
    "left",
    "down-left",
    "down",
    "down-right",
];

/// A latent motion motif.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    /// Radians; image `y` grows downwards, so "up" is `−y`.
    pub direction: f64,
    /// Pixels per source frame.
    pub speed: f64,
    /// Blob standard deviation in pixels before the dataset's scale.
    pub width: f64,
}

/// Per-dataset rendering bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BiasProfile {
    pub background: f64,
    pub noise: f64,
    /// Source frames advanced per rendered frame.
    pub decimation: usize,
    pub blob_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub id: usize,
    pub name: String,
    pub class_names: Vec<String>,
    /// Concepts rendered by each class.
    pub class_concepts: Vec<Vec<usize>>,
    pub bias: BiasProfile,
    pub train: usize,
    pub test: usize,
}

impl DatasetSpec {
    pub fn classes(&self) -> usize {
        self.class_names.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// `src_class` of dataset `src` is a sub-concept of `dst_class` of `dst`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasEntry {
    pub src: usize,
    pub dst: usize,
    pub src_class: usize,
    pub dst_class: usize,
    /// Both classes render exactly the same concepts.
    pub mutual: bool,
}

/// Directed, partial class correspondences between datasets.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasMap {
    pub entries: Vec<AliasEntry>,
}

impl AliasMap {
    pub fn from_specs(specs: &[DatasetSpec]) -> Self {
        let mut entries = Vec::new();
        for a in specs {
            for b in specs {
                if a.id == b.id {
                    continue;
                }
                for (ca, sa) in a.class_concepts.iter().enumerate() {
                    let supersets: Vec<usize> = b
                        .class_concepts
                        .iter()
                        .enumerate()
                        .filter(|(_, sb)| sa.iter().all(|g| sb.contains(g)))
                        .map(|(cb, _)| cb)
                        .collect();
                    if let [cb] = supersets[..] {
                        let sb = &b.class_concepts[cb];
                        entries.push(AliasEntry {
                            src: a.id,
                            dst: b.id,
                            src_class: ca,
                            dst_class: cb,
                            mutual: sb.len() == sa.len(),
                        });
                    }
                }
            }
        }
        Self { entries }
    }

    /// `m_{src,dst}(class)`, if mapped.
    pub fn target(&self, src: usize, dst: usize, class: usize) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.src == src && e.dst == dst && e.src_class == class)
            .map(|e| e.dst_class)
    }

    pub fn pair(&self, src: usize, dst: usize) -> impl Iterator<Item = &AliasEntry> {
        self.entries.iter().filter(move |e| e.src == src && e.dst == dst)
    }
}

/// How the sampler picks a dataset for each batch slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mixing {
    #[default]
    Proportional,
    Uniform,
}

/// A rendered clip `(T, H, W, C)` with values in `[0, 1]`.
#[derive(Clone, Debug)]
pub struct VideoClip<F> {
    pub tensor: Tensor<F>,
    pub dataset: usize,
    pub label: usize,
    pub sample: usize,
    pub concept: usize,
}

/// A stacked batch `(B, T, H, W, C)` with per-slot dataset ids and labels.
#[derive(Clone, Debug)]
pub struct MixedBatch<F> {
    pub clips: Tensor<F>,
    pub datasets: Vec<usize>,
    pub labels: Vec<usize>,
    pub samples: Vec<usize>,
}

impl<F: Real> MixedBatch<F> {
    pub fn len(&self) -> usize {
        self.datasets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.datasets.is_empty()
    }

    /// Batch positions belonging to dataset `k`.
    pub fn rows_of(&self, k: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.datasets[i] == k).collect()
    }

    pub fn labels_of(&self, k: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.datasets[i] == k)
            .map(|i| self.labels[i])
            .collect()
    }
}

/// Lookup of dataset specs by id and name.
#[derive(Clone, Debug)]
pub struct DatasetRegistry {
    specs: Vec<DatasetSpec>,
    by_name: HashMap<String, usize>,
}

impl DatasetRegistry {
    pub fn new(mut specs: Vec<DatasetSpec>) -> Result<Self> {
        specs.sort_by_key(|s| s.id);
        let mut by_name = HashMap::new();
        for (pos, s) in specs.iter().enumerate() {
            if s.id != pos {
                return Err(Error::Registration(format!(
                    "dataset ids must be unique and contiguous from 0; found id {} at position {pos}",
                    s.id
                )));
            }
            if by_name.insert(s.name.clone(), pos).is_some() {
                return Err(Error::Registration(format!("duplicate dataset name `{}`", s.name)));
            }
        }
        Ok(Self { specs, by_name })
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn get(&self, id: usize) -> Result<&DatasetSpec> {
        self.specs
            .get(id)
            .ok_or_else(|| Error::Lookup(format!("no dataset with id {id}")))
    }

    pub fn by_name(&self, name: &str) -> Result<&DatasetSpec> {
        self.by_name
            .get(name)
            .map(|&i| &self.specs[i])
            .ok_or_else(|| Error::Lookup(format!("no dataset named `{name}`")))
    }

    /// Datasets in ascending id order.
    pub fn iter(&self) -> impl Iterator<Item = &DatasetSpec> {
        self.specs.iter()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        self.specs.iter().map(|s| s.classes()).collect()
    }
}

/// Everything needed to render any clip of any dataset.
#[derive(Clone, Debug)]
pub struct Suite {
    pub seed: u64,
    pub clip_shape: [usize; 4],
    /// Blobs per clip, all moving with the clip's concept.
    pub blobs: usize,
    pub concepts: Vec<Concept>,
    pub registry: DatasetRegistry,
    pub alias: AliasMap,
    pub mixing: Mixing,
}

/// Parameters of [`generate_synthetic_suite`].
#[derive(Clone, Debug)]
pub struct SuiteSpec {
    pub seed: u64,
    pub concepts: usize,
    pub clip_shape: [usize; 4],
    pub concept_speed: f64,
    pub concept_width: f64,
    pub blobs: usize,
    pub mixing: Mixing,
    pub datasets: Vec<DatasetSpec>,
}

/// Evenly spaced motion directions; optional `names` override.
pub fn motion_concepts(count: usize, speed: f64, width: f64) -> Vec<Concept> {
    (0..count)
        .map(|g| Concept {
            name: if count == DIRECTION_NAMES.len() {
                DIRECTION_NAMES[g].to_string()
            } else {
                format!("motion{g}")
            },
            direction: std::f64::consts::TAU * g as f64 / count as f64,
            speed,
            width,
        })
        .collect()
}

/// Builds the suite, its alias map and its registry.
pub fn generate_synthetic_suite(spec: SuiteSpec) -> Result<Suite> {
    if spec.datasets.len() < 2 {
        return Err(Error::Config(format!(
            "need at least 2 datasets, got {}",
            spec.datasets.len()
        )));
    }
    let max_classes = spec.datasets.iter().map(|d| d.classes()).max().unwrap_or(0);
    if spec.concepts < max_classes {
        return Err(Error::Config(format!(
            "{} concepts cannot cover {max_classes} classes",
            spec.concepts
        )));
    }
    for d in &spec.datasets {
        if d.classes() < 2 {
            return Err(Error::Config(format!("dataset `{}` needs >= 2 classes", d.name)));
        }
        if d.class_concepts.len() != d.classes() {
            return Err(Error::Config(format!(
                "dataset `{}`: {} class names but {} concept lists",
                d.name,
                d.classes(),
                d.class_concepts.len()
            )));
        }
        for (c, set) in d.class_concepts.iter().enumerate() {
            if set.is_empty() || set.iter().any(|&g| g >= spec.concepts) {
                return Err(Error::Config(format!(
                    "dataset `{}` class {c}: concepts {set:?} invalid for {} concepts",
                    d.name, spec.concepts
                )));
            }
        }
        if d.bias.decimation == 0 || d.bias.blob_scale <= 0.0 || d.bias.noise < 0.0 {
            return Err(Error::Config(format!("dataset `{}`: invalid bias profile", d.name)));
        }
    }
    if spec.blobs == 0 {
        return Err(Error::Config("need at least one blob per clip".into()));
    }
    let alias = AliasMap::from_specs(&spec.datasets);
    Ok(Suite {
        seed: spec.seed,
        clip_shape: spec.clip_shape,
        blobs: spec.blobs,
        concepts: motion_concepts(spec.concepts, spec.concept_speed, spec.concept_width),
        registry: DatasetRegistry::new(spec.datasets)?,
        alias,
        mixing: spec.mixing,
    })
}

const CLIP_STREAM: u64 = 0xC11B;

impl Suite {
    pub fn datasets(&self) -> usize {
        self.registry.len()
    }

    pub fn split_range(&self, k: usize, split: Split) -> Result<std::ops::Range<usize>> {
        let d = self.registry.get(k)?;
        Ok(match split {
            Split::Train => 0..d.train,
            Split::Test => d.train..d.train + d.test,
        })
    }

    /// Class label of `(dataset, sample)`; classes cycle through sample ids.
    pub fn label_of(&self, k: usize, sample: usize) -> Result<usize> {
        Ok(sample % self.registry.get(k)?.classes())
    }

    /// Renders sample `sample` of dataset `k`. A pure function of
    /// `(seed, k, sample)`.
    pub fn clip<F: Real>(&self, k: usize, sample: usize) -> Result<VideoClip<F>> {
        let d = self.registry.get(k)?;
        if sample >= d.train + d.test {
            return Err(Error::Lookup(format!("dataset `{}` has no sample {sample}", d.name)));
        }
        let label = self.label_of(k, sample)?;
        let mut rng = Rng::derive(self.seed, &[CLIP_STREAM, k as u64, sample as u64]);
        let set = &d.class_concepts[label];
        let concept = set[rng.below(set.len())];
        let tensor = render(&self.concepts[concept], &d.bias, self.clip_shape, self.blobs, &mut rng);
        Ok(VideoClip {
            tensor,
            dataset: k,
            label,
            sample,
            concept,
        })
    }

    /// Stacks the given `(dataset, sample)` clips into one batch tensor.
    pub fn batch<F: Real>(&self, items: &[(usize, usize)]) -> Result<MixedBatch<F>> {
        let per: usize = self.clip_shape.iter().product();
        let mut data = Vec::with_capacity(per * items.len());
        let mut batch = MixedBatch {
            clips: Tensor::scalar(F::zero()),
            datasets: Vec::with_capacity(items.len()),
            labels: Vec::with_capacity(items.len()),
            samples: Vec::with_capacity(items.len()),
        };
        for &(k, s) in items {
            let clip = self.clip::<F>(k, s)?;
            data.extend_from_slice(clip.tensor.data());
            batch.datasets.push(k);
            batch.labels.push(clip.label);
            batch.samples.push(s);
        }
        let mut shape = vec![items.len()];
        shape.extend(self.clip_shape);
        batch.clips = Tensor::new(shape, data)?;
        Ok(batch)
    }
}

/// Draws a with-replacement mixed batch: a dataset per slot (by `mixing`),
/// then a uniform training sample of it.
pub fn sample_mixed_batch<F: Real>(rng: &mut Rng, batch_size: usize, suite: &Suite) -> Result<MixedBatch<F>> {
    let items = sample_slots(rng, batch_size, suite)?;
    suite.batch(&items)
}

/// The `(dataset, sample)` draws behind [`sample_mixed_batch`].
pub fn sample_slots(rng: &mut Rng, batch_size: usize, suite: &Suite) -> Result<Vec<(usize, usize)>> {
    if batch_size < 2 {
        return Err(Error::BatchSize {
            need: 2,
            got: batch_size,
        });
    }
    let sizes: Vec<usize> = suite.registry.iter().map(|d| d.train).collect();
    if let Some(d) = suite.registry.iter().find(|d| d.train == 0) {
        return Err(Error::Config(format!("dataset `{}` has an empty train split", d.name)));
    }
    let weights: Vec<f64> = match suite.mixing {
        Mixing::Proportional => sizes.iter().map(|&s| s as f64).collect(),
        Mixing::Uniform => vec![1.0; sizes.len()],
    };
    let total: f64 = weights.iter().sum();
    (0..batch_size)
        .map(|_| {
            let u = rng.uniform() * total;
            let mut acc = 0.0;
            let mut k = weights.len() - 1;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if u < acc {
                    k = i;
                    break;
                }
            }
            Ok((k, rng.below(sizes[k])))
        })
        .collect()
}

fn render<F: Real>(concept: &Concept, bias: &BiasProfile, shape: [usize; 4], blobs: usize, rng: &mut Rng) -> Tensor<F> {
    let [t_len, h, w, c] = shape;
    let (hf, wf) = (h as f64, w as f64);
    let starts: Vec<(f64, f64)> = (0..blobs).map(|_| (rng.uniform() * hf, rng.uniform() * wf)).collect();
    let step = concept.speed * bias.decimation as f64;
    let (vx, vy) = (concept.direction.cos() * step, -concept.direction.sin() * step);
    let sigma = concept.width * bias.blob_scale;
    let inv = 1.0 / (2.0 * sigma * sigma);
    let wrap = |d: f64, n: f64| {
        let d = d.rem_euclid(n);
        d.min(n - d)
    };
    let mut data = Vec::with_capacity(t_len * h * w * c);
    for t in 0..t_len {
        let centres: Vec<(f64, f64)> = starts
            .iter()
            .map(|&(y0, x0)| (y0 + vy * t as f64, x0 + vx * t as f64))
            .collect();
        for yy in 0..h {
            for xx in 0..w {
                // overlapping blobs take the brighter value rather than adding
                let bump = centres
                    .iter()
                    .map(|&(cy, cx)| {
                        let dy = wrap(yy as f64 - cy, hf);
                        let dx = wrap(xx as f64 - cx, wf);
                        (-(dx * dx + dy * dy) * inv).exp()
                    })
                    .fold(0.0, f64::max);
                for _ in 0..c {
                    let v = bias.background + 0.8 * bump + bias.noise * rng.normal();
                    data.push(F::of(v.clamp(0.0, 1.0)));
                }
            }
        }
    }
    Tensor::new(shape.to_vec(), data).expect("clip shape")
}

/// Stable 64-bit digest of the suite definition.
pub fn suite_fingerprint(suite: &Suite) -> u64 {
    let text = serde_json::to_string(&(
        suite.seed,
        suite.clip_shape,
        suite.blobs,
        &suite.concepts,
        suite.registry.iter().collect::<Vec<_>>(),
        suite.mixing,
    ))
    .expect("serializable");
    let words: Vec<u64> = text.bytes().map(u64::from).collect();
    mix(&words)
}
