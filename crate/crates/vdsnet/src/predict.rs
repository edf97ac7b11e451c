//! Single-image scoring.

use std::path::Path;

use anyhow::{Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use vdsnet_core::data::{encode_metadata, Gender, ViewPosition};
use vdsnet_core::layers::Mode;
use vdsnet_core::loss::positive_scores;
use vdsnet_core::metrics::check_threshold;
use vdsnet_core::zoo::{Network, INPUT_EXTENT};
use vdsnet_core::{Tape, Tensor};

use crate::image_io::{load_image, Color};

/// Scores within this distance of the threshold are flagged.
pub const BORDERLINE_MARGIN: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub confidence: f64,
    pub threshold: f64,
    pub positive: bool,
    pub borderline: bool,
}

impl Prediction {
    pub fn new(confidence: f64, threshold: f64) -> Result<Self> {
        check_threshold(threshold)?;
        Ok(Self {
            confidence,
            threshold,
            positive: confidence >= threshold,
            borderline: (confidence - threshold).abs() < BORDERLINE_MARGIN,
        })
    }

    pub fn line(&self) -> String {
        let verdict = if self.positive { "disease" } else { "no finding" };
        let flag = if self.borderline { " (borderline)" } else { "" };
        format!("confidence {} verdict {verdict}{flag}", format_confidence(self.confidence))
    }
}

/// `0.585842` becomes `58.5842%`.
pub fn format_confidence(score: f64) -> String {
    format!("{:.4}%", score * 100.0)
}

pub fn predict_image(
    net: &Network<f32>,
    image: &Path,
    age_years: f64,
    gender: Gender,
    view: ViewPosition,
    threshold: f64,
) -> Result<Prediction> {
    let channels = net.spec().input_shape[0];
    let name = image.file_name().map_or_else(String::new, |n| n.to_string_lossy().into_owned());
    let pixels = load_image(image, Color::for_channels(channels), &name)?;
    let meta = encode_metadata(gender, age_years, view)?;
    let mut tape = Tape::<f32>::new();
    let x = tape.constant(Tensor::new(&[1, channels, INPUT_EXTENT, INPUT_EXTENT], pixels)?);
    let m = (net.spec().metadata_width > 0).then(|| tape.constant(Tensor::from_f64(&[1, 5], &meta).expect("five values")));
    let pass = net
        .forward(&mut tape, x, m, Mode::Infer, &mut ChaCha8Rng::seed_from_u64(0))
        .context("scoring image")?;
    let score = positive_scores(tape.value(pass.output), net.spec().output_kind)?[0];
    Prediction::new(score, threshold)
}
