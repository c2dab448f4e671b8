//! Synthetic ROI-like dataset: a bright blob on a dark noisy background.
//! Positive blobs have star-shaped borders and coarse internal texture;
//! negative blobs are smooth ellipses.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image::ImageTensor;
use super::manifest::{write_manifest, ManifestRecord, ManifestRow};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Difficulty {
    #[default]
    Easy,
    Medium,
    Hard,
}

impl std::str::FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "medium" => Ok(Difficulty::Medium),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Config(format!("unknown difficulty `{other}`"))),
        }
    }
}

/// Per-class rendering knobs, `[negative, positive]`.
struct Style {
    star_amplitude: [f64; 2],
    texture_std: [f64; 2],
    intensity: [f64; 2],
    edge_softness: [f64; 2],
}

impl Difficulty {
    fn style(self) -> Style {
        match self {
            Difficulty::Easy => Style {
                star_amplitude: [0.0, 0.40],
                texture_std: [0.02, 0.06],
                intensity: [0.45, 0.90],
                edge_softness: [0.06, 0.015],
            },
            Difficulty::Medium => Style {
                star_amplitude: [0.0, 0.22],
                texture_std: [0.03, 0.08],
                intensity: [0.62, 0.74],
                edge_softness: [0.05, 0.025],
            },
            Difficulty::Hard => Style {
                star_amplitude: [0.0, 0.10],
                texture_std: [0.04, 0.06],
                intensity: [0.68, 0.71],
                edge_softness: [0.04, 0.035],
            },
        }
    }
}

/// Generated samples, aligned by index.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub size: usize,
    pub records: Vec<ManifestRecord>,
    /// Row-major 8-bit grayscale pixels, `size × size` each.
    pub pixels: Vec<Vec<u8>>,
}

fn mix(seed: u64, index: u64) -> u64 {
    // SplitMix64 finaliser over the pair.
    let mut z = seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub(crate) fn derive_seed(parts: &[u64]) -> u64 {
    parts.iter().fold(0x5EED_u64, |acc, &p| mix(acc, p))
}

/// Patient layout: `(patient index, label)` for every image, with labels
/// balanced to within one and 1–3 images per patient.
fn layout(n: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, u8)> {
    let mut quota = [n - n / 2, n / 2];
    let mut out = Vec::with_capacity(n);
    let mut patient = 0;
    let mut class = 0usize;
    while out.len() < n {
        if quota[class] == 0 {
            class = 1 - class;
        }
        let k = rng.random_range(1..=3usize).min(quota[class]);
        for _ in 0..k {
            out.push((patient, class as u8));
        }
        quota[class] -= k;
        patient += 1;
        class = 1 - class;
    }
    out
}

fn render(size: usize, label: u8, style: &Style, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let c = label as usize;
    let s = size as f64;
    let cx = s / 2.0 + rng.random_range(-s / 24.0..=s / 24.0);
    let cy = s / 2.0 + rng.random_range(-s / 24.0..=s / 24.0);
    let r0 = s * rng.random_range(0.20..0.26);
    let ellipse = rng.random_range(0.0..0.08);
    let tilt = rng.random_range(0.0..PI);
    let spikes = rng.random_range(5..=9) as f64;
    let phase = rng.random_range(0.0..2.0 * PI);
    let amp = style.star_amplitude[c];
    let soft = style.edge_softness[c] * s;
    let bg = Normal::new(0.0, 0.03).expect("valid std");
    let tex = Normal::new(0.0, style.texture_std[c]).expect("valid std");
    let mut out = Vec::with_capacity(size * size);
    for y in 0..size {
        for x in 0..size {
            let (dx, dy) = (x as f64 + 0.5 - cx, y as f64 + 0.5 - cy);
            let theta = dy.atan2(dx);
            let radius = r0 * (1.0 + ellipse * (2.0 * (theta - tilt)).cos() + amp * (spikes * theta + phase).sin());
            let inside = 1.0 / (1.0 + ((dx.hypot(dy) - radius) / soft).exp());
            let blob = inside * (style.intensity[c] + tex.sample(rng));
            let v = 0.12 + bg.sample(rng) + blob;
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

/// Deterministic synthetic dataset of `n` images of `size × size`.
pub fn synth_dataset(n: usize, size: usize, seed: u64, difficulty: Difficulty) -> Result<SynthDataset> {
    if n < 4 {
        return Err(Error::Config(format!("synthetic dataset needs n ≥ 4, got {n}")));
    }
    if size < 8 {
        return Err(Error::Config(format!("synthetic image size {size} is below 8")));
    }
    let style = difficulty.style();
    let plan = layout(n, &mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, u64::MAX])));
    let mut records = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n);
    for (i, &(patient, label)) in plan.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[seed, i as u64]));
        pixels.push(render(size, label, &style, &mut rng));
        let id = format!("S{i:05}");
        records.push(ManifestRecord {
            patient_id: format!("SP{patient:04}"),
            image_path: PathBuf::from(format!("images/{id}.png")),
            abnormality_id: id,
            pathology: if label == 1 { "MALIGNANT" } else { "BENIGN" }.into(),
            label,
        });
    }
    Ok(SynthDataset { size, records, pixels })
}

impl SynthDataset {
    pub fn image(&self, i: usize) -> Result<ImageTensor> {
        ImageTensor::from_gray_u8(self.size, self.size, &self.pixels[i])
    }

    /// Writes `images/<id>.png` plus `manifest.csv` under `dir`. Record paths
    /// are relative to `dir`.
    pub fn write(&self, dir: &Path) -> Result<PathBuf> {
        let img_dir = dir.join("images");
        std::fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
        for (r, px) in self.records.iter().zip(&self.pixels) {
            let path = dir.join(&r.image_path);
            let side = self.size as u32;
            image::GrayImage::from_raw(side, side, px.clone())
                .expect("pixel buffer matches size")
                .save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::io(&path, std::io::Error::other(e.to_string())))?;
        }
        let rows: Vec<ManifestRow> = self
            .records
            .iter()
            .map(|r| ManifestRow {
                patient_id: r.patient_id.clone(),
                abnormality_id: r.abnormality_id.clone(),
                image_path: r.image_path.to_string_lossy().into_owned(),
                pathology: r.pathology.clone(),
            })
            .collect();
        let manifest = dir.join("manifest.csv");
        write_manifest(&manifest, &rows)?;
        Ok(manifest)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::manifest::{match_manifest, read_manifest, scan_images, MatchKey};

    #[test]
    fn regeneration_is_bitwise_identical() {
        let a = synth_dataset(100, 32, 7, Difficulty::Easy).unwrap();
        let b = synth_dataset(100, 32, 7, Difficulty::Easy).unwrap();
        assert_eq!(a, b);
        let c = synth_dataset(100, 32, 8, Difficulty::Easy).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn labels_are_balanced_and_patients_hold_one_to_three_images() {
        for n in [4, 5, 17, 100, 201] {
            let d = synth_dataset(n, 16, n as u64, Difficulty::Medium).unwrap();
            let pos = d.records.iter().filter(|r| r.label == 1).count();
            assert!((2 * pos as i64 - n as i64).abs() <= 1, "n={n}");
            let labels = crate::data::split::patient_labels(&d.records);
            assert!(labels.values().all(|&(_, k)| (1..=3).contains(&k)));
            for r in &d.records {
                assert_eq!(labels[&r.patient_id].0, r.label, "patients are single-label");
            }
        }
    }

    #[test]
    fn rejects_tiny_requests() {
        assert!(synth_dataset(3, 32, 0, Difficulty::Easy).is_err());
    }

    fn knn_accuracy(train: &SynthDataset, test: &SynthDataset, k: usize) -> f64 {
        let mut correct = 0;
        for (px, rec) in test.pixels.iter().zip(&test.records) {
            let mut d: Vec<(u64, u8)> = train
                .pixels
                .iter()
                .zip(&train.records)
                .map(|(q, r)| {
                    let dist = px.iter().zip(q).map(|(&a, &b)| (a as i64 - b as i64).pow(2) as u64).sum();
                    (dist, r.label)
                })
                .collect();
            d.sort();
            let votes: usize = d[..k].iter().map(|&(_, l)| l as usize).sum();
            if u8::from(2 * votes > k) == rec.label {
                correct += 1;
            }
        }
        correct as f64 / test.records.len() as f64
    }

    #[test]
    fn easy_data_is_separable_by_three_nearest_neighbours() {
        let train = synth_dataset(200, 32, 1, Difficulty::Easy).unwrap();
        let test = synth_dataset(100, 32, 2, Difficulty::Easy).unwrap();
        let acc = knn_accuracy(&train, &test, 3);
        assert!(acc > 0.8, "3-NN accuracy {acc}");
    }

    #[test]
    fn written_dataset_matches_with_no_exclusions() {
        let dir = tempfile::tempdir().unwrap();
        let d = synth_dataset(12, 16, 3, Difficulty::Hard).unwrap();
        let manifest = d.write(dir.path()).unwrap();
        let rows = read_manifest(&manifest).unwrap();
        assert_eq!(rows.len(), 12);
        let scan = scan_images(dir.path()).unwrap();
        let m = match_manifest(&rows, &scan.files, MatchKey::FileStem).unwrap();
        assert_eq!(m.records.len(), 12);
        assert_eq!(m.excluded_count(), 0);
        let back = crate::data::image::load_image(&m.records[5].image_path).unwrap();
        assert_eq!(back, d.image(5).unwrap());
    }
}
