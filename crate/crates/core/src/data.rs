//! Pure parts of the data pipeline: record types, label and age parsing,
//! metadata encoding, the patient-grouped split, dataset statistics, image
//! resampling and augmentation.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use core::str::FromStr;

#[cfg_attr(feature = "std", allow(unused_imports))]
use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NO_FINDING: &str = "No Finding";

/// The fourteen disease findings, in the order they are reported.
pub const DISEASE_LABELS: [&str; 14] = [
    "Atelectasis",
    "Cardiomegaly",
    "Effusion",
    "Infiltration",
    "Mass",
    "Nodule",
    "Pneumonia",
    "Pneumothorax",
    "Consolidation",
    "Edema",
    "Emphysema",
    "Fibrosis",
    "Pleural_Thickening",
    "Hernia",
];

/// Ages above this are treated as data-entry outliers.
pub const MAX_AGE_YEARS: f64 = 100.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum ViewPosition {
    AP,
    PA,
}

impl FromStr for Gender {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "M" | "m" => Ok(Gender::M),
            "F" | "f" => Ok(Gender::F),
            other => Err(Error::Invalid(alloc::format!("unknown gender {other:?}"))),
        }
    }
}

impl FromStr for ViewPosition {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "AP" | "ap" => Ok(ViewPosition::AP),
            "PA" | "pa" => Ok(ViewPosition::PA),
            other => Err(Error::Invalid(alloc::format!("unknown view position {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub image_index: String,
    pub finding_labels: Vec<String>,
    pub follow_up: u32,
    pub patient_id: String,
    pub age_years: f64,
    pub gender: Gender,
    pub view_position: ViewPosition,
    pub orig_width: u32,
    pub orig_height: u32,
    pub pixel_spacing_x: f64,
    pub pixel_spacing_y: f64,
}

impl Record {
    /// 0 for "No Finding", 1 for any disease.
    pub fn binary_label(&self) -> u8 {
        u8::from(!(self.finding_labels.len() == 1 && self.finding_labels[0] == NO_FINDING))
    }

    pub fn metadata(&self) -> Result<[f64; 5]> {
        encode_metadata(self.gender, self.age_years, self.view_position)
    }
}

/// Splits a `|`-separated finding list. Empty input yields an error.
pub fn parse_labels(field: &str) -> Result<Vec<String>> {
    let labels: Vec<String> = field
        .split('|')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(ToString::to_string)
        .collect();
    if labels.is_empty() {
        return Err(Error::Invalid("empty finding labels".into()));
    }
    if labels.len() > 1 && labels.iter().any(|l| l == NO_FINDING) {
        return Err(Error::Invalid(alloc::format!("{NO_FINDING:?} combined with diseases")));
    }
    Ok(labels)
}

/// Age in years from plain numbers or `Y`/`M`/`W`/`D` suffixed forms such
/// as `058Y` or `3M`.
pub fn parse_age(field: &str) -> Option<f64> {
    let s = field.trim();
    let (digits, per_year) = match s.chars().last()? {
        'Y' | 'y' => (&s[..s.len() - 1], 1.0),
        'M' | 'm' => (&s[..s.len() - 1], 12.0),
        'W' | 'w' => (&s[..s.len() - 1], 52.1775),
        'D' | 'd' => (&s[..s.len() - 1], 365.25),
        _ => (s, 1.0),
    };
    let v: f64 = digits.trim().parse().ok()?;
    (v.is_finite() && v >= 0.0).then_some(v / per_year)
}

/// `[female, male, age / 100, pa, ap]`.
pub fn encode_metadata(gender: Gender, age_years: f64, view: ViewPosition) -> Result<[f64; 5]> {
    if !(age_years > 0.0 && age_years <= MAX_AGE_YEARS) {
        return Err(Error::out_of_range("age", age_years, "(0, 100] years"));
    }
    let (f, m) = match gender {
        Gender::F => (1.0, 0.0),
        Gender::M => (0.0, 1.0),
    };
    let (pa, ap) = match view {
        ViewPosition::PA => (1.0, 0.0),
        ViewPosition::AP => (0.0, 1.0),
    };
    Ok([f, m, age_years / MAX_AGE_YEARS, pa, ap])
}

/// A preprocessed training example.
#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Vec<f32>,
    pub meta: [f32; 5],
    pub label: u8,
}

// ----- split ----------------------------------------------------------

/// Largest class-ratio gap allowed between either side and the whole set.
pub const SPLIT_RATIO_TOLERANCE: f64 = 0.05;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

/// Patient-grouped, label-stratified split of record indices. Every image
/// of a patient lands on the same side. Deterministic for a given seed.
pub fn split(records: &[Record], val_fraction: f64, seed: u64) -> Result<Split> {
    let items: Vec<(&str, u8)> = records
        .iter()
        .map(|r| (r.patient_id.as_str(), r.binary_label()))
        .collect();
    split_groups(&items, val_fraction, seed)
}

/// [`split`] over bare `(patient, label)` pairs.
pub fn split_groups(items: &[(&str, u8)], val_fraction: f64, seed: u64) -> Result<Split> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::out_of_range("validation fraction", val_fraction, "(0, 1)"));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, &(patient, _)) in items.iter().enumerate() {
        groups.entry(patient).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Invalid("a split needs at least two patients".into()));
    }
    let mut strata: [Vec<&Vec<usize>>; 2] = [Vec::new(), Vec::new()];
    for members in groups.values() {
        let positive = members.iter().any(|&i| items[i].1 == 1);
        strata[usize::from(positive)].push(members);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for s in strata.iter_mut() {
        s.shuffle(&mut rng);
    }

    let total = items.len();
    let target = ((val_fraction * total as f64).round() as usize).clamp(1, total - 1);
    let sizes: [usize; 2] = [
        strata[0].iter().map(|g| g.len()).sum(),
        strata[1].iter().map(|g| g.len()).sum(),
    ];
    let quotas = apportion(target, &sizes);

    let mut out = Split::default();
    for (stratum, quota) in strata.iter().zip(quotas) {
        let mut taken = 0;
        for group in stratum {
            if taken + group.len() <= quota {
                taken += group.len();
                out.val.extend_from_slice(group);
            } else {
                out.train.extend_from_slice(group);
            }
        }
    }
    out.train.sort_unstable();
    out.val.sort_unstable();

    if out.train.is_empty() || out.val.is_empty() {
        return Err(Error::Invalid("too few patients to fill both sides of the split".into()));
    }
    let ratio = |idx: &[usize]| idx.iter().filter(|&&i| items[i].1 == 1).count() as f64 / idx.len() as f64;
    let global = items.iter().filter(|x| x.1 == 1).count() as f64 / total as f64;
    for side in [&out.train, &out.val] {
        if (ratio(side) - global).abs() > SPLIT_RATIO_TOLERANCE {
            return Err(Error::Invalid(alloc::format!(
                "cannot keep the positive ratio within {SPLIT_RATIO_TOLERANCE} of {global:.3} with these patient groups"
            )));
        }
    }
    Ok(out)
}

/// Largest-remainder apportionment of `total` across buckets of `sizes`.
fn apportion(total: usize, sizes: &[usize]) -> Vec<usize> {
    let all: usize = sizes.iter().sum();
    if all == 0 {
        return vec![0; sizes.len()];
    }
    let mut shares: Vec<usize> = sizes.iter().map(|&s| total * s / all).collect();
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| core::cmp::Reverse((total * sizes[i]) % all));
    let mut left = total - shares.iter().sum::<usize>();
    for i in order {
        if left == 0 {
            break;
        }
        shares[i] += 1;
        left -= 1;
    }
    shares
}

// ----- statistics -----------------------------------------------------

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenderCounts {
    pub female: usize,
    pub male: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassStats {
    pub images: usize,
    pub patients: usize,
    /// Images carrying each finding; a multi-label image counts once per
    /// finding. Known findings come first in reporting order.
    pub labels: Vec<(String, usize)>,
    pub gender_images: GenderCounts,
    pub gender_patients: GenderCounts,
    pub view_ap: usize,
    pub view_pa: usize,
    pub no_finding: usize,
    pub disease: usize,
}

impl ClassStats {
    pub fn label_count(&self, label: &str) -> usize {
        self.labels.iter().find(|(l, _)| l == label).map_or(0, |(_, c)| *c)
    }

    /// `(category, key, count)` rows for tabular output.
    pub fn rows(&self) -> Vec<(&'static str, String, usize)> {
        let mut rows = vec![("total", "images".into(), self.images), ("total", "patients".into(), self.patients)];
        rows.extend(self.labels.iter().map(|(l, c)| ("finding", l.clone(), *c)));
        rows.extend([
            ("gender_images", "F".into(), self.gender_images.female),
            ("gender_images", "M".into(), self.gender_images.male),
            ("gender_patients", "F".into(), self.gender_patients.female),
            ("gender_patients", "M".into(), self.gender_patients.male),
            ("view", "AP".into(), self.view_ap),
            ("view", "PA".into(), self.view_pa),
            ("binary", "no".into(), self.no_finding),
            ("binary", "yes".into(), self.disease),
        ]);
        rows
    }
}

pub fn class_stats(records: &[Record]) -> ClassStats {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    let mut patients: BTreeMap<&str, Gender> = BTreeMap::new();
    let mut s = ClassStats {
        images: records.len(),
        ..ClassStats::default()
    };
    for r in records {
        for l in &r.finding_labels {
            *counts.entry(l.as_str()).or_default() += 1;
        }
        patients.entry(r.patient_id.as_str()).or_insert(r.gender);
        match r.gender {
            Gender::F => s.gender_images.female += 1,
            Gender::M => s.gender_images.male += 1,
        }
        match r.view_position {
            ViewPosition::AP => s.view_ap += 1,
            ViewPosition::PA => s.view_pa += 1,
        }
        if r.binary_label() == 1 {
            s.disease += 1;
        } else {
            s.no_finding += 1;
        }
    }
    s.patients = patients.len();
    for g in patients.values() {
        match g {
            Gender::F => s.gender_patients.female += 1,
            Gender::M => s.gender_patients.male += 1,
        }
    }
    for name in DISEASE_LABELS.iter().chain([&NO_FINDING]) {
        s.labels.push((name.to_string(), counts.remove(name).unwrap_or(0)));
    }
    s.labels.extend(counts.into_iter().map(|(k, v)| (k.to_string(), v)));
    s
}

// ----- resampling and augmentation -----------------------------------

/// Bilinear resize of `[C, H, W]` planes with half-pixel centers and
/// clamped edges.
pub fn resize_bilinear(src: &[f32], channels: usize, h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f32> {
    assert_eq!(src.len(), channels * h * w, "source buffer does not match its extents");
    let axis = |o: usize, n_in: usize, n_out: usize| -> Vec<(usize, usize, f32)> {
        let scale = n_in as f64 / n_out as f64;
        (0..o)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(out_h, h, out_h);
    let xs = axis(out_w, w, out_w);
    let mut out = Vec::with_capacity(channels * out_h * out_w);
    for c in 0..channels {
        let plane = &src[c * h * w..(c + 1) * h * w];
        for &(y0, y1, wy) in &ys {
            for &(x0, x1, wx) in &xs {
                let lerp = |a: f32, b: f32, t: f32| a + (b - a) * t;
                let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], wx);
                let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], wx);
                out.push(lerp(top, bottom, wy));
            }
        }
    }
    out
}

pub const MAX_SHIFT_FRACTION: f64 = 0.05;
pub const MAX_ROTATION_DEG: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub flip: bool,
    /// Translation as a fraction of width / height.
    pub shift_x: f64,
    pub shift_y: f64,
    pub angle_deg: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        flip: false,
        shift_x: 0.0,
        shift_y: 0.0,
        angle_deg: 0.0,
    };

    pub fn sample(rng: &mut dyn RngCore) -> Self {
        Self {
            flip: rng.gen_bool(0.5),
            shift_x: rng.gen_range(-MAX_SHIFT_FRACTION..=MAX_SHIFT_FRACTION),
            shift_y: rng.gen_range(-MAX_SHIFT_FRACTION..=MAX_SHIFT_FRACTION),
            angle_deg: rng.gen_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG),
        }
    }
}

/// Horizontal flip, then rotation about the center, then translation.
/// Pixels mapped from outside the source are zero.
pub fn augment_image(image: &[f32], channels: usize, h: usize, w: usize, p: &AugmentParams) -> Vec<f32> {
    assert_eq!(image.len(), channels * h * w, "image buffer does not match its extents");
    let (sin, cos) = p.angle_deg.to_radians().sin_cos();
    let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
    let (tx, ty) = (p.shift_x * w as f64, p.shift_y * h as f64);
    let mut out = vec![0.0f32; image.len()];
    for y in 0..h {
        for x in 0..w {
            let dx = x as f64 - tx - cx;
            let dy = y as f64 - ty - cy;
            let mut qx = cos * dx + sin * dy + cx;
            let qy = -sin * dx + cos * dy + cy;
            if p.flip {
                qx = (w as f64 - 1.0) - qx;
            }
            for c in 0..channels {
                let plane = &image[c * h * w..(c + 1) * h * w];
                out[c * h * w + y * w + x] = sample_zero_padded(plane, h, w, qy, qx);
            }
        }
    }
    out
}

fn sample_zero_padded(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let (fy, fx) = (y.floor(), x.floor());
    let (wy, wx) = (y - fy, x - fx);
    let mut acc = 0.0f64;
    for (oy, ky) in [(0isize, 1.0 - wy), (1, wy)] {
        for (ox, kx) in [(0isize, 1.0 - wx), (1, wx)] {
            let k = ky * kx;
            if k == 0.0 {
                continue;
            }
            let (py, px) = (fy as isize + oy, fx as isize + ox);
            if py >= 0 && px >= 0 && (py as usize) < h && (px as usize) < w {
                acc += k * plane[py as usize * w + px as usize] as f64;
            }
        }
    }
    acc as f32
}
