//! Synthetic image-text worlds with known alignment.
//!
//! Each image holds a few distinct object classes spread over its RoIs. RoI
//! features are a class prototype plus Gaussian noise; the caption names every
//! class present, wrapped in a template and distractor words. Two caption
//! dialects and a class-frequency skew separate "out-of-domain" data from
//! "in-domain" data.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRecord, Dataset, DatasetMeta};
use crate::error::{Error, Result};
use crate::rng::Rng;

pub const DEFAULT_CLASS_NAMES: [&str; 24] = [
    "cat", "dog", "bird", "horse", "car", "tree", "boat", "chair", "cup", "clock", "book", "lamp", "kite", "ball",
    "bike", "bus", "phone", "bench", "apple", "bottle", "flower", "sheep", "train", "umbrella",
];

const ADJECTIVES: [&str; 7] = ["small", "large", "red", "blue", "green", "old", "new"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub num_classes: usize,
    /// Token name per class; defaults to the first `num_classes` built-in names.
    pub class_names: Vec<String>,
    pub rois_per_image: usize,
    /// Distinct classes per image.
    pub objects_per_image: usize,
    pub visual_dim: usize,
    /// Per-entry standard deviation of RoI feature noise.
    pub noise: f64,
    /// Probability that a class name gets an adjective in front of it.
    pub adjective_rate: f64,
    pub global_feature: bool,
    /// In-domain training images.
    pub images: usize,
    /// Out-of-domain images per in-domain image.
    pub size_ratio: usize,
    pub pool_images: usize,
    pub pool_captions_per_image: usize,
    /// Probability that an out-of-domain caption describes a different,
    /// freshly drawn class set (weak supervision).
    pub ood_caption_noise: f64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_classes: 12,
            class_names: Vec::new(),
            rois_per_image: 6,
            objects_per_image: 3,
            visual_dim: 32,
            noise: 0.1,
            adjective_rate: 0.3,
            global_feature: true,
            images: 400,
            size_ratio: 5,
            pool_images: 100,
            pool_captions_per_image: 1,
            ood_caption_noise: 0.0,
        }
    }
}

impl WorldSpec {
    pub fn names(&self) -> Vec<String> {
        if self.class_names.is_empty() {
            DEFAULT_CLASS_NAMES
                .iter()
                .take(self.num_classes)
                .map(|s| s.to_string())
                .collect()
        } else {
            self.class_names.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config("a world needs at least two classes".into()));
        }
        if self.names().len() != self.num_classes {
            return Err(Error::Config(format!(
                "{} class names for {} classes",
                self.names().len(),
                self.num_classes
            )));
        }
        if self.objects_per_image == 0
            || self.objects_per_image > self.num_classes
            || self.objects_per_image > self.rois_per_image
        {
            return Err(Error::Config(format!(
                "objects_per_image {} must be in 1..=min(classes {}, rois {})",
                self.objects_per_image, self.num_classes, self.rois_per_image
            )));
        }
        if self.visual_dim == 0
            || self.noise < 0.0
            || !(0.0..=1.0).contains(&self.adjective_rate)
            || !(0.0..=1.0).contains(&self.ood_caption_noise)
        {
            return Err(Error::Config(
                "visual_dim, noise, adjective_rate or ood_caption_noise out of range".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dialect {
    /// "a photo of a cat , a dog and a tree"
    Plain,
    /// "picture showing cat with dog with tree"
    Terse,
}

/// Class prototypes and caption machinery for one seed.
#[derive(Clone, Debug)]
pub struct World {
    spec: WorldSpec,
    names: Vec<String>,
    prototypes: Vec<Vec<f64>>,
    seed: u64,
}

const PROTOTYPE_STREAM: u64 = 1;

impl World {
    pub fn new(spec: WorldSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = Rng::derive(seed, PROTOTYPE_STREAM);
        let d = spec.visual_dim;
        let mut protos: Vec<Vec<f64>> = Vec::with_capacity(spec.num_classes);
        for _ in 0..spec.num_classes {
            let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
            // Gram-Schmidt against earlier prototypes while there is room.
            if protos.len() < d {
                for p in &protos {
                    let dot: f64 = v.iter().zip(p).map(|(a, b)| a * b).sum();
                    v.iter_mut().zip(p).for_each(|(a, b)| *a -= dot * b);
                }
            }
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= norm);
            protos.push(v);
        }
        Ok(Self {
            names: spec.names(),
            spec,
            prototypes: protos,
            seed,
        })
    }

    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn prototype(&self, class: usize) -> &[f64] {
        &self.prototypes[class]
    }

    pub fn class_names(&self) -> &[String] {
        &self.names
    }

    /// Sampling weight per class: uniform at `shift = 0`, increasingly skewed
    /// towards low class ids as `shift` grows.
    pub fn class_weights(&self, shift: f64) -> Vec<f64> {
        let k = self.spec.num_classes as f64;
        (0..self.spec.num_classes)
            .map(|c| (-2.0 * shift * c as f64 / (k - 1.0)).exp())
            .collect()
    }

    fn draw_classes(&self, weights: &[f64], rng: &mut Rng) -> Vec<usize> {
        let mut w = weights.to_vec();
        let mut out = Vec::with_capacity(self.spec.objects_per_image);
        for _ in 0..self.spec.objects_per_image {
            let total: f64 = w.iter().sum();
            let mut u = rng.uniform() * total;
            let mut pick = w.len() - 1;
            for (c, &wc) in w.iter().enumerate() {
                if wc <= 0.0 {
                    continue;
                }
                if u < wc {
                    pick = c;
                    break;
                }
                u -= wc;
            }
            while w[pick] <= 0.0 {
                pick -= 1;
            }
            w[pick] = 0.0;
            out.push(pick);
        }
        out
    }

    fn caption(&self, classes: &[usize], dialect: Dialect, rng: &mut Rng) -> String {
        let mut order = classes.to_vec();
        rng.shuffle(&mut order);
        let mut named: Vec<String> = order
            .iter()
            .map(|&c| {
                if rng.uniform() < self.spec.adjective_rate {
                    format!("{} {}", ADJECTIVES[rng.below(ADJECTIVES.len())], self.names[c])
                } else {
                    self.names[c].clone()
                }
            })
            .collect();
        match dialect {
            Dialect::Plain => {
                named.iter_mut().for_each(|n| *n = format!("a {n}"));
                let list = match named.len() {
                    1 => named[0].clone(),
                    n => format!("{} and {}", named[..n - 1].join(" , "), named[n - 1]),
                };
                match rng.below(3) {
                    0 => format!("a photo of {list}"),
                    1 => format!("there is {list} in the picture"),
                    _ => format!("{list} together"),
                }
            }
            Dialect::Terse => match rng.below(3) {
                0 => format!("picture showing {}", named.join(" with ")),
                1 => format!("snapshot : {}", named.join(" , ")),
                _ => format!("view of some {} here", named.join(" ")),
            },
        }
    }

    fn boxes(&self, w: f64, h: f64, n: usize, rng: &mut Rng) -> Vec<[f64; 4]> {
        (0..n)
            .map(|_| {
                let x0 = rng.range_f64(0.0, w - 16.0).floor();
                let y0 = rng.range_f64(0.0, h - 16.0).floor();
                let x1 = (x0 + rng.range_f64(16.0, w - x0)).floor().clamp(x0 + 1.0, w);
                let y1 = (y0 + rng.range_f64(16.0, h - y0)).floor().clamp(y0 + 1.0, h);
                [x0, y0, x1, y1]
            })
            .collect()
    }

    /// Draws `n_images` images from the distribution at `shift`.
    /// `stream` selects an independent random stream; `unique_sets` rejects
    /// images whose class set was already used (for unambiguous eval pools).
    pub fn dataset(
        &self,
        name: &str,
        n_images: usize,
        captions_per_image: usize,
        shift: f64,
        stream: u64,
        unique_sets: bool,
    ) -> Result<Dataset> {
        self.draw(name, n_images, captions_per_image, shift, stream, unique_sets, 0.0)
    }

    fn draw(
        &self,
        name: &str,
        n_images: usize,
        captions_per_image: usize,
        shift: f64,
        stream: u64,
        unique_sets: bool,
        caption_noise: f64,
    ) -> Result<Dataset> {
        if shift < 0.0 {
            return Err(Error::Config(format!("domain shift {shift} must be non-negative")));
        }
        if captions_per_image == 0 {
            return Err(Error::Config("captions_per_image must be positive".into()));
        }
        let s = &self.spec;
        if unique_sets {
            let available = binomial(s.num_classes, s.objects_per_image);
            if (n_images as f64) > available {
                return Err(Error::Config(format!(
                    "{n_images} images cannot have distinct class sets (only {available} exist)"
                )));
            }
        }
        let mut rng = Rng::derive(self.seed, 100 + stream);
        let weights = self.class_weights(shift);
        let terse_rate = shift.min(1.0);
        let d = s.visual_dim;
        let mut seen = HashSet::new();
        let mut records = Vec::with_capacity(n_images);
        let mut features = Vec::new();
        let mut attempts = 0usize;
        while records.len() < n_images {
            attempts += 1;
            if attempts > 1000 * n_images.max(1) {
                return Err(Error::Config("could not draw enough distinct images".into()));
            }
            let classes = self.draw_classes(&weights, &mut rng);
            if unique_sets {
                let mut key = classes.clone();
                key.sort_unstable();
                if !seen.insert(key) {
                    continue;
                }
            }
            let idx = records.len();
            let mut labels = classes.clone();
            while labels.len() < s.rois_per_image {
                labels.push(classes[rng.below(classes.len())]);
            }
            rng.shuffle(&mut labels);
            let w = (320 + rng.below(705)) as f64;
            let h = (320 + rng.below(705)) as f64;
            let boxes = self.boxes(w, h, labels.len(), &mut rng);
            let feature_row = features.len() / d;
            for &c in &labels {
                for j in 0..d {
                    features.push(self.prototypes[c][j] + s.noise * rng.normal());
                }
            }
            let global_row = if s.global_feature {
                let row = features.len() / d;
                for j in 0..d {
                    let m = classes.iter().map(|&c| self.prototypes[c][j]).sum::<f64>() / classes.len() as f64;
                    features.push(m + s.noise * rng.normal());
                }
                Some(row)
            } else {
                None
            };
            let captions = (0..captions_per_image)
                .map(|_| {
                    let dialect = if rng.uniform() < terse_rate {
                        Dialect::Terse
                    } else {
                        Dialect::Plain
                    };
                    if caption_noise > 0.0 && rng.uniform() < caption_noise {
                        let other = self.draw_classes(&weights, &mut rng);
                        self.caption(&other, dialect, &mut rng)
                    } else {
                        self.caption(&classes, dialect, &mut rng)
                    }
                })
                .collect();
            records.push(CorpusRecord {
                image_id: format!("{name}-{idx:06}"),
                captions,
                width: w,
                height: h,
                boxes,
                labels,
                feature_row,
                global_row,
            });
        }
        Ok(Dataset {
            meta: DatasetMeta {
                name: name.to_string(),
                visual_dim: d,
                num_classes: s.num_classes,
                class_names: self.names.clone(),
            },
            records,
            features,
        })
    }

    /// `(out_of_domain, in_domain)`; the out-of-domain set is `size_ratio`
    /// times larger, skewed by `shift` in class frequency and dialect.
    pub fn domain_pair(&self, shift: f64) -> Result<(Dataset, Dataset)> {
        let s = &self.spec;
        let ood = self.draw("ood", s.images * s.size_ratio, 1, shift, 1, false, s.ood_caption_noise)?;
        let id = self.dataset("id", s.images, 1, 0.0, 2, false)?;
        Ok((ood, id))
    }

    /// In-domain evaluation pool with distinct class sets per image.
    pub fn pool(&self) -> Result<Dataset> {
        let s = &self.spec;
        self.dataset("pool", s.pool_images, s.pool_captions_per_image, 0.0, 3, true)
    }
}

fn binomial(n: usize, k: usize) -> f64 {
    (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
}

/// In-domain dataset of `spec.images` images.
pub fn generate(spec: &WorldSpec, seed: u64) -> Result<Dataset> {
    let world = World::new(spec.clone(), seed)?;
    world.dataset("id", spec.images, 1, 0.0, 2, false)
}

pub fn make_domain_pair(spec: &WorldSpec, shift: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    World::new(spec.clone(), seed)?.domain_pair(shift)
}

/// Empirical class frequencies over all RoI labels of a dataset.
pub fn class_frequencies(ds: &Dataset) -> Vec<f64> {
    let mut counts = vec![0.0; ds.meta.num_classes];
    let mut total: f64 = 0.0;
    for r in &ds.records {
        let distinct: HashSet<usize> = r.labels.iter().copied().collect();
        for c in distinct {
            counts[c] += 1.0;
            total += 1.0;
        }
    }
    counts.iter_mut().for_each(|c| *c /= total.max(1.0));
    counts
}
