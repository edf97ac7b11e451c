//! Metadata CSV ingestion.

use std::collections::HashMap;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};
use vdsnet_core::data::{parse_age, parse_labels, Gender, Record, ViewPosition, MAX_AGE_YEARS};

/// Column names for each record field. Defaults follow the Kaggle release.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeaderMap {
    pub image_index: String,
    pub finding_labels: String,
    pub follow_up: String,
    pub patient_id: String,
    pub age: String,
    pub gender: String,
    pub view_position: String,
    pub orig_width: String,
    pub orig_height: String,
    pub pixel_spacing_x: String,
    pub pixel_spacing_y: String,
}

impl Default for HeaderMap {
    fn default() -> Self {
        Self {
            image_index: "Image Index".into(),
            finding_labels: "Finding Labels".into(),
            follow_up: "Follow-up #".into(),
            patient_id: "Patient ID".into(),
            age: "Patient Age".into(),
            gender: "Patient Gender".into(),
            view_position: "View Position".into(),
            orig_width: "OriginalImage[Width".into(),
            orig_height: "Height]".into(),
            pixel_spacing_x: "OriginalImagePixelSpacing[x".into(),
            pixel_spacing_y: "y]".into(),
        }
    }
}

impl HeaderMap {
    fn columns(&self) -> [(&'static str, &str); 11] {
        [
            ("image_index", &self.image_index),
            ("finding_labels", &self.finding_labels),
            ("follow_up", &self.follow_up),
            ("patient_id", &self.patient_id),
            ("age", &self.age),
            ("gender", &self.gender),
            ("view_position", &self.view_position),
            ("orig_width", &self.orig_width),
            ("orig_height", &self.orig_height),
            ("pixel_spacing_x", &self.pixel_spacing_x),
            ("pixel_spacing_y", &self.pixel_spacing_y),
        ]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedCsv {
    pub records: Vec<Record>,
    /// Rows dropped because the age exceeded the outlier cut.
    pub age_outliers: usize,
    /// Rows that could not be parsed, with a reason each.
    pub skipped: Vec<(usize, String)>,
}

pub fn parse_metadata_csv(path: &Path, headers: &HeaderMap) -> Result<ParsedCsv> {
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    parse_metadata_reader(file, headers).with_context(|| format!("reading {}", path.display()))
}

pub fn parse_metadata_reader<R: std::io::Read>(reader: R, headers: &HeaderMap) -> Result<ParsedCsv> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(reader);
    let header_row = rdr.headers().context("missing header row")?.clone();
    let position: HashMap<&str, usize> = header_row.iter().enumerate().map(|(i, h)| (h.trim(), i)).collect();
    let mut idx = HashMap::new();
    for (field, name) in headers.columns() {
        let col = position
            .get(name)
            .ok_or_else(|| anyhow!("missing mandatory column {name:?} (for {field})"))?;
        idx.insert(field, *col);
    }

    let mut out = ParsedCsv::default();
    for (row, result) in rdr.records().enumerate() {
        let line = row + 2;
        let rec = match result {
            Ok(r) => r,
            Err(e) => {
                out.skipped.push((line, e.to_string()));
                continue;
            }
        };
        let rec = &rec;
        let idx = &idx;
        let get = move |f: &str| -> &str { rec.get(idx[f]).unwrap_or("").trim() };
        match parse_row(&get) {
            Ok(r) if r.age_years > MAX_AGE_YEARS => out.age_outliers += 1,
            Ok(r) => out.records.push(r),
            Err(e) => out.skipped.push((line, e.to_string())),
        }
    }
    Ok(out)
}

fn parse_row<'a>(get: &dyn Fn(&str) -> &'a str) -> Result<Record> {
    let image_index = get("image_index");
    if image_index.is_empty() {
        bail!("empty image index");
    }
    let age_years = parse_age(get("age")).ok_or_else(|| anyhow!("bad age {:?}", get("age")))?;
    if age_years <= 0.0 {
        bail!("non-positive age");
    }
    let num = |f: &str| -> Result<f64> {
        let s = get(f);
        s.parse().map_err(|_| anyhow!("bad {f} {s:?}"))
    };
    Ok(Record {
        image_index: image_index.to_string(),
        finding_labels: parse_labels(get("finding_labels"))?,
        follow_up: num("follow_up")? as u32,
        patient_id: get("patient_id").to_string(),
        age_years,
        gender: get("gender").parse::<Gender>()?,
        view_position: get("view_position").parse::<ViewPosition>()?,
        orig_width: num("orig_width")? as u32,
        orig_height: num("orig_height")? as u32,
        pixel_spacing_x: num("pixel_spacing_x")?,
        pixel_spacing_y: num("pixel_spacing_y")?,
    })
}

/// Writes records with the default Kaggle headers.
pub fn write_metadata_csv(path: &Path, records: &[Record]) -> Result<()> {
    let h = HeaderMap::default();
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    w.write_record(h.columns().iter().map(|(_, n)| *n))?;
    for r in records {
        let gender = match r.gender {
            Gender::M => "M",
            Gender::F => "F",
        };
        let view = match r.view_position {
            ViewPosition::AP => "AP",
            ViewPosition::PA => "PA",
        };
        w.write_record([
            r.image_index.clone(),
            r.finding_labels.join("|"),
            r.follow_up.to_string(),
            r.patient_id.clone(),
            format!("{:03}Y", r.age_years.round() as u32),
            gender.into(),
            view.into(),
            r.orig_width.to_string(),
            r.orig_height.to_string(),
            r.pixel_spacing_x.to_string(),
            r.pixel_spacing_y.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
