//! In-memory dataset of preprocessed images and deterministic batching.
//!
//! Images are decoded and resized once. Augmentation for sample `i` in epoch
//! `e` draws from an RNG seeded by `(seed, e, i)`, so a batch depends only on
//! its indices and never on load or completion order.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::image::{load_image, normalize, resize_bicubic, AugmentParams, ImageTensor, IMAGENET_MEAN, IMAGENET_STD};
use super::manifest::ManifestRecord;
use super::synth::derive_seed;
use crate::autodiff::DiffArray;
use crate::error::{Error, Result};

/// Seed material for training-time augmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentSeed {
    pub seed: u64,
    pub epoch: u64,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    size: usize,
    records: Vec<ManifestRecord>,
    /// Resized, un-normalised images aligned with `records`.
    images: Vec<ImageTensor>,
    skipped: Vec<String>,
}

impl Dataset {
    /// Decodes and resizes every record's image. Records whose image fails
    /// to load are dropped with a warning.
    pub fn load<'a>(records: impl IntoIterator<Item = &'a ManifestRecord>, size: usize) -> Result<Self> {
        let mut ds = Dataset { size, records: Vec::new(), images: Vec::new(), skipped: Vec::new() };
        for r in records {
            match load_image(&r.image_path).and_then(|img| resize_bicubic(&img, size, size)) {
                Ok(img) => {
                    ds.records.push(r.clone());
                    ds.images.push(img);
                }
                Err(Error::Data(msg)) => {
                    log::warn!("skipping sample {}: {msg}", r.abnormality_id);
                    ds.skipped.push(format!("{}: {msg}", r.image_path.display()));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(ds)
    }

    /// Builds a dataset from already decoded images.
    pub fn from_images(records: Vec<ManifestRecord>, images: Vec<ImageTensor>, size: usize) -> Result<Self> {
        if records.len() != images.len() {
            return Err(Error::shape(format!("{} records for {} images", records.len(), images.len())));
        }
        let images = images
            .iter()
            .map(|img| {
                if img.height == size && img.width == size {
                    Ok(img.clone())
                } else {
                    resize_bicubic(img, size, size)
                }
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { size, records, images, skipped: Vec::new() })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image_size(&self) -> usize {
        self.size
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn labels(&self) -> Vec<u8> {
        self.records.iter().map(|r| r.label).collect()
    }

    pub fn skipped(&self) -> &[String] {
        &self.skipped
    }

    /// Fully preprocessed sample: augmentation (if seeded) then
    /// normalisation.
    pub fn sample(&self, index: usize, aug: Option<AugmentSeed>) -> Result<ImageTensor> {
        let base = &self.images[index];
        let img = match aug {
            Some(a) => {
                let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[a.seed, a.epoch, index as u64]));
                AugmentParams::sample(&mut rng).apply(base)
            }
            None => base.clone(),
        };
        normalize(&img, &IMAGENET_MEAN, &IMAGENET_STD)
    }

    /// Stacks samples into `[B, 3, S, S]` plus float labels.
    pub fn batch(&self, indices: &[usize], aug: Option<AugmentSeed>) -> Result<(DiffArray<f32>, Vec<f32>)> {
        if indices.is_empty() {
            return Err(Error::Data("empty batch".into()));
        }
        let per = 3 * self.size * self.size;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&self.sample(i, aug)?.data);
            labels.push(self.records[i].label as f32);
        }
        let arr = DiffArray::new(vec![indices.len(), 3, self.size, self.size], data)?;
        Ok((arr, labels))
    }
}

/// Shuffled visiting order for one training epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, epoch, u64::MAX - 1])));
    order
}
