//! Run reports, comparison tables and the loss-curve plot.

use std::io::Write;
use std::path::Path;

use anyhow::Result;
use serde::{Deserialize, Serialize};
use vdsnet_core::metrics::MetricRow;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub loss: f64,
    pub val_loss: Option<f64>,
    pub acc: f64,
    pub val_acc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub model: String,
    pub epochs: Vec<EpochRow>,
    pub best_epoch: Option<usize>,
    pub train_seconds: f64,
    pub param_count: usize,
    pub metrics: Option<MetricRow>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

impl RunReport {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "loss", "val_loss", "acc", "val_acc"])?;
        for r in &self.epochs {
            w.write_record([r.epoch.to_string(), r.loss.to_string(), opt(r.val_loss), r.acc.to_string(), opt(r.val_acc)])?;
        }
        w.flush()?;
        Ok(())
    }

    /// Training and validation loss against epoch as a standalone SVG.
    pub fn loss_svg(&self) -> String {
        let (w, h, pad) = (640.0, 400.0, 48.0);
        let series: [(&str, &str, Vec<(f64, f64)>); 2] = [
            ("loss", "#1f77b4", self.epochs.iter().map(|r| (r.epoch as f64, r.loss)).collect()),
            (
                "val_loss",
                "#d62728",
                self.epochs.iter().filter_map(|r| r.val_loss.map(|v| (r.epoch as f64, v))).collect(),
            ),
        ];
        let pts: Vec<(f64, f64)> = series.iter().flat_map(|s| s.2.iter().copied()).collect();
        let (x0, x1) = pts.iter().fold((f64::MAX, f64::MIN), |(a, b), p| (a.min(p.0), b.max(p.0)));
        let (y0, y1) = pts.iter().fold((0.0f64, f64::MIN), |(a, b), p| (a.min(p.1), b.max(p.1)));
        let sx = |x: f64| pad + (x - x0) / (x1 - x0).max(1e-12) * (w - 2.0 * pad);
        let sy = |y: f64| h - pad - (y - y0) / (y1 - y0).max(1e-12) * (h - 2.0 * pad);
        let mut svg = format!(
            "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
             <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
             <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n\
             <text x=\"{cx}\" y=\"{ty}\" font-size=\"12\" text-anchor=\"middle\">epoch</text>\n\
             <text x=\"{pad}\" y=\"{ly}\" font-size=\"12\">{y1:.3}</text>\n",
            b = h - pad,
            r = w - pad,
            cx = w / 2.0,
            ty = h - 12.0,
            ly = pad - 6.0,
        );
        for (k, (name, color, s)) in series.iter().enumerate() {
            if s.is_empty() {
                continue;
            }
            let path: Vec<String> = s.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
            svg += &format!(
                "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n\
                 <text x=\"{}\" y=\"{}\" font-size=\"12\" fill=\"{color}\">{name}</text>\n",
                path.join(" "),
                w - pad - 70.0,
                pad + 16.0 * k as f64,
            );
        }
        svg + "</svg>\n"
    }

    pub fn write_files(&self, dir: &Path) -> Result<()> {
        self.write_csv(std::fs::File::create(dir.join("report.csv"))?)?;
        std::fs::write(dir.join("loss.svg"), self.loss_svg())?;
        std::fs::write(dir.join("report.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// One row of a model comparison. Failed runs keep only the model name.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareRow {
    pub model: String,
    pub result: std::result::Result<(MetricRow, usize, f64), String>,
}

pub const COMPARE_COLUMNS: [&str; 7] = ["model", "recall", "precision", "f05", "accuracy", "param_count", "train_seconds"];

pub fn write_compare_csv<W: Write>(rows: &[CompareRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COMPARE_COLUMNS)?;
    for row in rows {
        match &row.result {
            Ok((m, params, secs)) => w.write_record([
                row.model.clone(),
                format!("{:.4}", m.recall),
                format!("{:.4}", m.precision),
                format!("{:.4}", m.f_beta),
                format!("{:.4}", m.accuracy),
                params.to_string(),
                format!("{secs:.2}"),
            ])?,
            Err(_) => w.write_record([row.model.as_str(), "", "", "", "", "", ""])?,
        }
    }
    w.flush()?;
    Ok(())
}
