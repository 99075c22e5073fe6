//! Depth metrics, grouped reports and their text/CSV/plot renderings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const CSV_HEADER: &str = "modality,condition,abs_rel,sq_rel,rmse,rmse_log,d1,d2,d3,n_pixels";
pub const AVG_LABEL: &str = "avg";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub min_depth: f64,
    pub depth_cap: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            min_depth: 1.0,
            depth_cap: 80.0,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_depth > 0.0 && self.min_depth < self.depth_cap) {
            return Err(Error::Config(format!(
                "need 0 < min_depth < depth_cap, got {} and {}",
                self.min_depth, self.depth_cap
            )));
        }
        Ok(())
    }
}

/// One row of an evaluation table. Field order is the CSV column order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// `rgb`, `nir`, `thr` or `fused`.
    pub modality: String,
    /// `day`, `night`, `rain` or `avg`.
    pub condition: String,
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub d1: f64,
    pub d2: f64,
    pub d3: f64,
    pub n_pixels: usize,
}

impl MetricReport {
    fn column(&self, i: usize) -> f64 {
        [
            self.abs_rel,
            self.sq_rel,
            self.rmse,
            self.rmse_log,
            self.d1,
            self.d2,
            self.d3,
        ][i]
    }
}

const COLUMNS: [&str; 7] = ["AbsRel", "SqRel", "RMSE", "RMSElog", "d1", "d2", "d3"];
const LOWER_IS_BETTER: [bool; 7] = [true, true, true, true, false, false, false];

/// Pixel-pooled running sums.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricAccumulator {
    n: usize,
    abs_rel: f64,
    sq_rel: f64,
    sq: f64,
    sq_log: f64,
    hits: [usize; 3],
}

impl MetricAccumulator {
    /// Adds pixels whose ground truth lies inside the configured range.
    pub fn add(&mut self, pred: &[f32], gt: &[f32], valid: &[bool], cfg: &EvalConfig) -> Result<()> {
        if pred.len() != gt.len() || gt.len() != valid.len() {
            return Err(Error::Interface("metric inputs differ in length".into()));
        }
        for i in 0..pred.len() {
            let (p, g) = (pred[i] as f64, gt[i] as f64);
            if !valid[i] || !(g >= cfg.min_depth && g <= cfg.depth_cap) {
                continue;
            }
            if !(p > 0.0) {
                return Err(Error::Domain(format!("non-positive prediction {p}")));
            }
            let d = p - g;
            self.n += 1;
            self.abs_rel += d.abs() / g;
            self.sq_rel += d * d / g;
            self.sq += d * d;
            self.sq_log += (p.ln() - g.ln()).powi(2);
            let ratio = (p / g).max(g / p);
            for (k, hit) in self.hits.iter_mut().enumerate() {
                if ratio < 1.25f64.powi(k as i32 + 1) {
                    *hit += 1;
                }
            }
        }
        Ok(())
    }

    pub fn pixels(&self) -> usize {
        self.n
    }

    pub fn report(&self, modality: &str, condition: &str) -> Result<MetricReport> {
        if self.n == 0 {
            return Err(Error::Domain("no valid pixels to evaluate".into()));
        }
        let n = self.n as f64;
        Ok(MetricReport {
            modality: modality.to_string(),
            condition: condition.to_string(),
            abs_rel: self.abs_rel / n,
            sq_rel: self.sq_rel / n,
            rmse: (self.sq / n).sqrt(),
            rmse_log: (self.sq_log / n).sqrt(),
            d1: self.hits[0] as f64 / n,
            d2: self.hits[1] as f64 / n,
            d3: self.hits[2] as f64 / n,
            n_pixels: self.n,
        })
    }
}

/// Metrics of one prediction against ground truth over valid pixels.
pub fn compute_metrics(
    pred: &[f32],
    gt: &[f32],
    valid: &[bool],
    cfg: &EvalConfig,
    modality: &str,
    condition: &str,
) -> Result<MetricReport> {
    let mut acc = MetricAccumulator::default();
    acc.add(pred, gt, valid, cfg)?;
    acc.report(modality, condition)
}

/// Unweighted mean of the condition rows of one modality.
pub fn average_row(rows: &[&MetricReport], modality: &str) -> Option<MetricReport> {
    if rows.is_empty() {
        return None;
    }
    let k = rows.len() as f64;
    let mean = |f: fn(&MetricReport) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / k;
    Some(MetricReport {
        modality: modality.to_string(),
        condition: AVG_LABEL.to_string(),
        abs_rel: mean(|r| r.abs_rel),
        sq_rel: mean(|r| r.sq_rel),
        rmse: mean(|r| r.rmse),
        rmse_log: mean(|r| r.rmse_log),
        d1: mean(|r| r.d1),
        d2: mean(|r| r.d2),
        d3: mean(|r| r.d3),
        n_pixels: rows.iter().map(|r| r.n_pixels).sum(),
    })
}

/// Rows sharing a condition, in first-appearance order of conditions.
fn by_condition(reports: &[MetricReport]) -> Vec<(String, Vec<&MetricReport>)> {
    let mut groups: Vec<(String, Vec<&MetricReport>)> = Vec::new();
    for r in reports {
        match groups.iter_mut().find(|(c, _)| *c == r.condition) {
            Some((_, g)) => g.push(r),
            None => groups.push((r.condition.clone(), vec![r])),
        }
    }
    groups
}

/// Which cells hold the best value of their column within a condition.
/// Nothing is marked when every row ties.
fn best_marks(group: &[&MetricReport]) -> Vec<[bool; 7]> {
    let mut marks = vec![[false; 7]; group.len()];
    for col in 0..7 {
        let vals: Vec<f64> = group.iter().map(|r| r.column(col)).collect();
        let best = if LOWER_IS_BETTER[col] {
            vals.iter().cloned().fold(f64::INFINITY, f64::min)
        } else {
            vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        };
        if vals.iter().all(|v| *v == best) {
            continue;
        }
        for (i, v) in vals.iter().enumerate() {
            marks[i][col] = *v == best;
        }
    }
    marks
}

/// Aligned plain-text table; the best cell per column and condition is
/// wrapped in asterisks.
pub fn render_table(reports: &[MetricReport]) -> String {
    let mut rows: Vec<Vec<String>> = vec![["modality", "condition"]
        .iter()
        .map(|s| s.to_string())
        .chain(COLUMNS.iter().map(|s| s.to_string()))
        .collect()];
    for (_, group) in by_condition(reports) {
        let marks = best_marks(&group);
        for (r, m) in group.iter().zip(marks) {
            let mut row = vec![r.modality.clone(), r.condition.clone()];
            for col in 0..7 {
                let v = format!("{:.3}", r.column(col));
                row.push(if m[col] { format!("*{v}*") } else { format!(" {v} ") });
            }
            rows.push(row);
        }
    }
    let widths: Vec<usize> = (0..rows[0].len())
        .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
        .collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .zip(&widths)
            .enumerate()
            .map(|(c, (s, w))| if c < 2 { format!("{s:<w$}") } else { format!("{s:>w$}") })
            .collect();
        out.push_str(cells.join("  ").trim_end());
        out.push('\n');
        if i == 0 {
            out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 2 * (widths.len() - 1)));
            out.push('\n');
        }
    }
    out
}

/// Fused rows annotated with signed deltas against the best single spectrum
/// of the same condition, e.g. `3.120 (-0.234)`.
pub fn render_delta_table(single: &[MetricReport], fused: &[MetricReport]) -> String {
    let mut out = String::from("condition  ");
    out.push_str(&COLUMNS.map(|c| format!("{c:>18}")).join(""));
    out.push('\n');
    for f in fused {
        let peers: Vec<&MetricReport> = single.iter().filter(|s| s.condition == f.condition).collect();
        if peers.is_empty() {
            continue;
        }
        out.push_str(&format!("{:<11}", f.condition));
        for col in 0..7 {
            let vals = peers.iter().map(|p| p.column(col));
            let best = if LOWER_IS_BETTER[col] {
                vals.fold(f64::INFINITY, f64::min)
            } else {
                vals.fold(f64::NEG_INFINITY, f64::max)
            };
            let delta = f.column(col) - best;
            out.push_str(&format!("{:>18}", format!("{:.3} ({delta:+.3})", f.column(col))));
        }
        out.push('\n');
    }
    out
}

pub fn write_csv(path: &Path, reports: &[MetricReport]) -> Result<()> {
    fs::write(path, to_csv(reports)?).map_err(|e| Error::io(path, e))
}

pub fn to_csv(reports: &[MetricReport]) -> Result<String> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    for r in reports {
        w.serialize(r).map_err(|e| Error::Interface(e.to_string()))?;
    }
    let body = w.into_inner().map_err(|e| Error::Interface(e.to_string()))?;
    Ok(format!(
        "{CSV_HEADER}\n{}",
        String::from_utf8(body).expect("csv output is utf-8")
    ))
}

pub fn from_csv(text: &str) -> Result<Vec<MetricReport>> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let header: Vec<String> = r
        .headers()
        .map_err(|e| Error::Corruption(e.to_string()))?
        .iter()
        .map(str::to_string)
        .collect();
    if header.join(",") != CSV_HEADER {
        return Err(Error::Corruption(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize()
        .map(|row| row.map_err(|e| Error::Corruption(e.to_string())))
        .collect()
}

pub fn read_csv(path: &Path) -> Result<Vec<MetricReport>> {
    from_csv(&fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

const PALETTE: [[u8; 3]; 6] = [
    [214, 69, 65],
    [88, 160, 80],
    [70, 110, 200],
    [230, 160, 40],
    [140, 90, 170],
    [60, 60, 60],
];

/// Vertical bars on a white canvas, one per value, scaled to the maximum.
fn bar_chart(values: &[f64]) -> RgbImage {
    let (w, h, pad) = (40 + 60 * values.len() as u32, 200u32, 20u32);
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let top = values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    for (i, v) in values.iter().enumerate() {
        let bar = ((v / top) * (h - 2 * pad) as f64).round() as u32;
        let x0 = pad + 60 * i as u32;
        for x in x0..x0 + 40 {
            for y in (h - pad - bar)..(h - pad) {
                img.put_pixel(x, y, Rgb(PALETTE[i % PALETTE.len()]));
            }
        }
    }
    for x in 0..w {
        img.put_pixel(x, h - pad, Rgb([0, 0, 0]));
    }
    img
}

/// `rmse_<condition>.png` and `d1_<condition>.png`, one bar per modality
/// in row order.
pub fn write_plots(dir: &Path, reports: &[MetricReport]) -> Result<Vec<String>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (cond, group) in by_condition(reports) {
        for (name, f) in [("rmse", (|r: &MetricReport| r.rmse) as fn(&MetricReport) -> f64), ("d1", |r| r.d1)] {
            let vals: Vec<f64> = group.iter().map(|r| f(r)).collect();
            let file = format!("{name}_{cond}.png");
            let path = dir.join(&file);
            bar_chart(&vals)
                .save(&path)
                .map_err(|e| Error::io(&path, std::io::Error::other(e)))?;
            written.push(file);
        }
    }
    Ok(written)
}

/// `report.txt`, `metrics.csv` and `plots/` under `out`.
pub fn render_report(out: &Path, reports: &[MetricReport], extra: Option<&str>) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut text = render_table(reports);
    if let Some(extra) = extra {
        text.push('\n');
        text.push_str(extra);
    }
    let report = out.join("report.txt");
    fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
    write_csv(&out.join("metrics.csv"), reports)?;
    write_plots(&out.join("plots"), reports)?;
    Ok(())
}

/// Groups finished rows by modality, appending each modality's `avg` row.
pub fn with_averages(rows: Vec<MetricReport>) -> Vec<MetricReport> {
    let mut by_mod: BTreeMap<String, Vec<MetricReport>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in rows {
        if !by_mod.contains_key(&r.modality) {
            order.push(r.modality.clone());
        }
        by_mod.entry(r.modality.clone()).or_default().push(r);
    }
    let mut out = Vec::new();
    for m in order {
        let group = &by_mod[&m];
        out.extend(group.iter().cloned());
        let refs: Vec<&MetricReport> = group.iter().collect();
        out.extend(average_row(&refs, &m));
    }
    out
}
