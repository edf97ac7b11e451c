//! Synthetic data: a labelled blob dataset for training smoke runs and a
//! metadata table with known per-label totals.

use std::path::{Path, PathBuf};

use anyhow::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vdsnet_core::data::{Gender, Record, ViewPosition, DISEASE_LABELS, NO_FINDING};
use vdsnet_core::Tensor;

use crate::image_io::encode_gray_png;
use crate::metadata::write_metadata_csv;

/// Per-label image totals of the 5,606-image sample release.
pub const SAMPLE_LABEL_COUNTS: [(&str, usize); 15] = [
    ("Atelectasis", 508),
    ("Cardiomegaly", 141),
    ("Effusion", 644),
    ("Infiltration", 967),
    ("Mass", 284),
    ("Nodule", 313),
    ("Pneumonia", 62),
    ("Pneumothorax", 271),
    ("Consolidation", 226),
    ("Edema", 118),
    ("Emphysema", 127),
    ("Fibrosis", 84),
    ("Pleural_Thickening", 176),
    ("Hernia", 13),
    (NO_FINDING, 3044),
];

pub const SAMPLE_IMAGES: usize = 5606;

/// Set this to a real sample-release CSV to check the totals against it.
pub const SAMPLE_CSV_ENV: &str = "VDSNET_SAMPLE_CSV";

/// A 5,606-row table whose label totals equal [`SAMPLE_LABEL_COUNTS`].
/// Disease rows carry one or two findings.
pub fn sample_count_records() -> Vec<Record> {
    let diseased = SAMPLE_IMAGES - SAMPLE_LABEL_COUNTS[14].1;
    let mut occurrences: Vec<&str> = Vec::new();
    for (label, n) in &SAMPLE_LABEL_COUNTS[..14] {
        debug_assert!(DISEASE_LABELS.contains(label));
        occurrences.extend(std::iter::repeat_n(*label, *n));
    }
    // Each label's run is shorter than `diseased`, so positions k and
    // k + diseased never repeat a label within a row.
    let mut rows: Vec<Vec<String>> = vec![Vec::new(); diseased];
    for (k, label) in occurrences.iter().enumerate() {
        rows[k % diseased].push((*label).to_string());
    }
    rows.extend(std::iter::repeat_n(vec![NO_FINDING.to_string()], SAMPLE_LABEL_COUNTS[14].1));
    rows.into_iter()
        .enumerate()
        .map(|(i, labels)| fixture_record(i, labels))
        .collect()
}

fn fixture_record(i: usize, finding_labels: Vec<String>) -> Record {
    Record {
        image_index: format!("{:08}_{:03}.png", i / 3, i % 3),
        finding_labels,
        follow_up: (i % 3) as u32,
        patient_id: format!("{:05}", i / 3),
        age_years: (18 + (i * 7) % 70) as f64,
        gender: if (i / 3).is_multiple_of(2) { Gender::M } else { Gender::F },
        view_position: if i % 5 < 3 { ViewPosition::PA } else { ViewPosition::AP },
        orig_width: 2048,
        orig_height: 2500,
        pixel_spacing_x: 0.143,
        pixel_spacing_y: 0.143,
    }
}

/// Noise image in `[0.3, 0.5]`; positives get a bright Gaussian spot at a
/// random location. Returns `[C, extent, extent]`.
pub fn blob_image(label: u8, channels: usize, extent: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let lo = extent as f32 * 0.3;
    let hi = extent as f32 * 0.7;
    let (cy, cx) = (rng.gen_range(lo..hi), rng.gen_range(lo..hi));
    let spread = 50.0 * (extent as f32 / 64.0).powi(2);
    let mut out = vec![0.0f32; channels * extent * extent];
    for c in 0..channels {
        for r in 0..extent {
            for q in 0..extent {
                let mut v = 0.3 + 0.2 * rng.gen::<f32>();
                if label == 1 {
                    let d2 = (r as f32 - cy).powi(2) + (q as f32 - cx).powi(2);
                    v += 0.5 * (-d2 / spread).exp();
                }
                out[(c * extent + r) * extent + q] = v.min(1.0);
            }
        }
    }
    out
}

/// In-memory labelled images with metadata rows.
#[derive(Clone, Debug, PartialEq)]
pub struct InMemorySet {
    /// `[N, C, H, W]`.
    pub images: Tensor<f32>,
    /// `[N, 5]`.
    pub meta: Tensor<f32>,
    pub labels: Vec<u8>,
}

impl InMemorySet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Rows `idx` gathered into a new set.
    pub fn select(&self, idx: &[usize]) -> InMemorySet {
        let s = self.images.shape();
        let plane = s[1] * s[2] * s[3];
        let mut images = Vec::with_capacity(idx.len() * plane);
        let mut meta = Vec::with_capacity(idx.len() * 5);
        for &i in idx {
            images.extend_from_slice(&self.images.data()[i * plane..(i + 1) * plane]);
            meta.extend_from_slice(&self.meta.data()[i * 5..(i + 1) * 5]);
        }
        InMemorySet {
            images: Tensor::new(&[idx.len(), s[1], s[2], s[3]], images).expect("gathered rows fill the shape"),
            meta: Tensor::new(&[idx.len(), 5], meta).expect("gathered rows fill the shape"),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Alternating labels, blob positives, metadata unrelated to the label.
pub fn synthetic_set(n: usize, channels: usize, extent: usize, seed: u64) -> InMemorySet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(n * channels * extent * extent);
    let mut meta = Vec::with_capacity(n * 5);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = (i % 2) as u8;
        images.extend(blob_image(y, channels, extent, &mut rng));
        let female = (i % 3 == 0) as u8 as f32;
        meta.extend([female, 1.0 - female, 0.5, 1.0, 0.0]);
        labels.push(y);
    }
    InMemorySet {
        images: Tensor::new(&[n, channels, extent, extent], images).expect("sizes agree"),
        meta: Tensor::new(&[n, 5], meta).expect("sizes agree"),
        labels,
    }
}

/// Writes `patients` patients with one to three grayscale PNGs each plus a
/// metadata CSV. Roughly 40% of patients are positive. Returns the CSV
/// path and the image directory.
pub fn write_synthetic_dataset(dir: &Path, patients: usize, png_extent: u32, seed: u64) -> Result<(PathBuf, PathBuf)> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for p in 0..patients {
        let positive = p % 5 < 2;
        let count = 1 + p % 3;
        for k in 0..count {
            let name = format!("{p:05}_{k:03}.png");
            let label = u8::from(positive);
            let img = blob_image(label, 1, png_extent as usize, &mut rng);
            let bytes: Vec<u8> = img.iter().map(|v| (v * 255.0).round() as u8).collect();
            std::fs::write(images.join(&name), encode_gray_png(&bytes, png_extent, png_extent)?)?;
            let findings = if positive { vec!["Effusion".to_string()] } else { vec![NO_FINDING.to_string()] };
            let mut r = fixture_record(p, findings);
            r.image_index = name;
            r.patient_id = format!("P{p:05}");
            r.follow_up = k as u32;
            records.push(r);
        }
    }
    let csv = dir.join("metadata.csv");
    write_metadata_csv(&csv, &records)?;
    Ok((csv, images))
}
