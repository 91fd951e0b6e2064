//! Dataset ingestion, preprocessing, augmentation and batching.

pub mod augment;
pub mod preprocess;
pub mod sample;

use std::path::{Path, PathBuf};

use mobilex_tensor::{Mask, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

pub use augment::{AugmentConfig, AugmentParams};
pub use preprocess::{preprocess, Recipe};
pub use sample::{load_pair, DepthSample};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub rgb: PathBuf,
    pub depth: PathBuf,
    /// Raw depth units per meter.
    pub divisor: f64,
}

/// Ordered list of RGB/depth pairs plus the preprocessing recipe.
///
/// Text form: an optional `#recipe <name> <h> <w>` header, then one
/// `rgb<TAB>depth<TAB>divisor` line per pair. Other `#` lines and blank
/// lines are ignored. Relative paths resolve against the manifest's folder.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Manifest {
    pub recipe: Recipe,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut m = Manifest::default();
        for (n, line) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix("#recipe") {
                m.recipe = rest
                    .trim()
                    .parse()
                    .map_err(|e| Error::InvalidData(format!("manifest line {line_no}: {e}")))?;
                continue;
            }
            if line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let [rgb, depth, divisor] = fields[..] else {
                return Err(Error::InvalidData(format!(
                    "manifest line {line_no}: expected 3 tab-separated fields, got {}",
                    fields.len()
                )));
            };
            let divisor: f64 = divisor
                .trim()
                .parse()
                .ok()
                .filter(|d: &f64| *d > 0.0 && d.is_finite())
                .ok_or_else(|| Error::InvalidData(format!("manifest line {line_no}: bad divisor `{divisor}`")))?;
            m.entries.push(ManifestEntry {
                rgb: base.join(rgb),
                depth: base.join(depth),
                divisor,
            });
        }
        Ok(m)
    }

    /// Reads a manifest and checks that every referenced file exists.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::data(path, e.to_string()))?;
        let m = Manifest::parse(&text, path.parent().unwrap_or(Path::new("")))
            .map_err(|e| Error::data(path, e.to_string()))?;
        if m.entries.is_empty() {
            return Err(Error::EmptyManifest);
        }
        for e in &m.entries {
            for p in [&e.rgb, &e.depth] {
                if !p.is_file() {
                    return Err(Error::data(p, "file not found"));
                }
            }
        }
        Ok(m)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("#recipe {}\n", self.recipe);
        for e in &self.entries {
            s.push_str(&format!("{}\t{}\t{}\n", e.rgb.display(), e.depth.display(), e.divisor));
        }
        s
    }

    pub fn load_sample(&self, index: usize) -> Result<DepthSample> {
        let e = &self.entries[index];
        let s = load_pair(&e.rgb, &e.depth, e.divisor)?;
        preprocess(&s, self.recipe).map_err(|err| Error::data(&e.rgb, err.to_string()))
    }
}

/// Random access to preprocessed samples.
pub trait SampleSource: Sync {
    fn len(&self) -> usize;
    fn get(&self, index: usize) -> Result<DepthSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for Manifest {
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn get(&self, index: usize) -> Result<DepthSample> {
        self.load_sample(index)
    }
}

impl SampleSource for [DepthSample] {
    fn len(&self) -> usize {
        <[DepthSample]>::len(self)
    }
    fn get(&self, index: usize) -> Result<DepthSample> {
        Ok(self[index].clone())
    }
}

impl SampleSource for Vec<DepthSample> {
    fn len(&self) -> usize {
        self.as_slice().len()
    }
    fn get(&self, index: usize) -> Result<DepthSample> {
        SampleSource::get(self.as_slice(), index)
    }
}

/// One batch in NCHW layout.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    /// `[B, 3, H, W]`, RGB scaled to [0, 1].
    pub rgb: Tensor<f32>,
    /// `[B, 1, H, W]`, meters.
    pub depth: Tensor<f32>,
    pub mask: Mask,
    /// Source indices of the samples.
    pub indices: Vec<usize>,
}

impl Batch {
    pub fn from_samples(samples: &[DepthSample], indices: Vec<usize>) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyManifest)?;
        let (h, w) = (first.height, first.width);
        if let Some(s) = samples.iter().find(|s| (s.height, s.width) != (h, w)) {
            return Err(Error::InvalidData(format!(
                "samples in one batch differ in size: {h}x{w} vs {}x{}",
                s.height, s.width
            )));
        }
        let plane = h * w;
        let b = samples.len();
        let mut rgb = vec![0f32; b * 3 * plane];
        let mut depth = Vec::with_capacity(b * plane);
        let mut valid = Vec::with_capacity(b * plane);
        for (k, s) in samples.iter().enumerate() {
            for (p, px) in s.rgb.chunks_exact(3).enumerate() {
                for c in 0..3 {
                    rgb[(k * 3 + c) * plane + p] = px[c] as f32 / 255.0;
                }
            }
            depth.extend_from_slice(&s.depth_m);
            valid.extend_from_slice(&s.valid);
        }
        Ok(Batch {
            rgb: Tensor::from_vec([b, 3, h, w], rgb)?,
            depth: Tensor::from_vec([b, 1, h, w], depth)?,
            mask: Mask::new([b, 1, h, w], valid)?,
            indices,
        })
    }
}

/// Seed material unique to `(seed, epoch, index)`.
fn stream(seed: u64, epoch: u64, index: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&epoch.to_le_bytes());
    key[16..24].copy_from_slice(&index.to_le_bytes());
    ChaCha8Rng::from_seed(key)
}

/// Sample order for one epoch: identity, or a permutation fixed by
/// `(seed, epoch)`.
pub fn epoch_order(len: usize, shuffle_seed: Option<u64>, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    if let Some(seed) = shuffle_seed {
        order.shuffle(&mut stream(seed, epoch as u64, u64::MAX));
    }
    order
}

/// Loads (and optionally augments) one sample. The augmentation stream
/// depends only on the config seed, the epoch and the sample index.
pub fn fetch<S: SampleSource + ?Sized>(
    source: &S,
    index: usize,
    epoch: usize,
    augment: Option<&AugmentConfig>,
) -> Result<DepthSample> {
    let s = source.get(index)?;
    Ok(match augment {
        None => s,
        Some(cfg) => augment::augment(&s, cfg, &mut stream(cfg.seed, epoch as u64, index as u64)),
    })
}

/// Iterator over the batches of one epoch. The last batch may be short.
pub struct BatchIter<'a, S: SampleSource + ?Sized> {
    source: &'a S,
    order: Vec<usize>,
    batch_size: usize,
    epoch: usize,
    augment: Option<&'a AugmentConfig>,
    pos: usize,
}

impl<S: SampleSource + ?Sized> BatchIter<'_, S> {
    pub fn num_batches(&self) -> usize {
        self.order.len().div_ceil(self.batch_size)
    }
}

impl<S: SampleSource + ?Sized> Iterator for BatchIter<'_, S> {
    type Item = Result<Batch>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        let samples: Result<Vec<DepthSample>> = indices
            .par_iter()
            .map(|&i| fetch(self.source, i, self.epoch, self.augment))
            .collect();
        Some(samples.and_then(|s| Batch::from_samples(&s, indices)))
    }
}

pub fn batch_iter<'a, S: SampleSource + ?Sized>(
    source: &'a S,
    batch_size: usize,
    shuffle_seed: Option<u64>,
    epoch: usize,
    augment: Option<&'a AugmentConfig>,
) -> Result<BatchIter<'a, S>> {
    if source.is_empty() {
        return Err(Error::EmptyManifest);
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if let Some(cfg) = augment {
        cfg.validate()?;
    }
    Ok(BatchIter {
        source,
        order: epoch_order(source.len(), shuffle_seed, epoch),
        batch_size,
        epoch,
        augment,
        pos: 0,
    })
}
