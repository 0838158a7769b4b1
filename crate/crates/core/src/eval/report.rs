use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{assemble, attack_success_rate, embed_captions, embed_images, recall_from_ranks, Direction};
use crate::data::Dataset;
use crate::encoders::ModelPair;
use crate::error::{Error, Result};
use crate::uap::Uap;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub struct ModelEntry {
    pub name: String,
    pub pair: ModelPair,
}

pub struct DatasetEntry {
    pub name: String,
    pub dataset: Dataset,
}

/// One (target model, dataset, direction, K) entry of the transfer grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub target_model: String,
    pub arch: String,
    pub dataset: String,
    pub direction: Direction,
    pub k: usize,
    /// The target is the surrogate the UAP was crafted on.
    pub white_box: bool,
    pub clean_recall: f64,
    pub adv_recall: f64,
    pub asr: Option<f64>,
    pub queries: usize,
    pub clean_hits: usize,
    pub flips: usize,
    pub new_hits: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub schema_version: u32,
    pub uap_digest: String,
    pub variant: String,
    pub source_model: String,
    pub epsilon: String,
    pub ks: Vec<usize>,
    /// Target model name → parameter fingerprint.
    pub models: BTreeMap<String, String>,
    /// Dataset name → content digest.
    pub datasets: BTreeMap<String, String>,
    pub cells: Vec<Cell>,
    pub created_unix: u64,
}

impl EvalReport {
    pub fn empty(ks: Vec<usize>) -> Self {
        Self {
            schema_version: REPORT_SCHEMA_VERSION,
            uap_digest: String::new(),
            variant: String::new(),
            source_model: String::new(),
            epsilon: String::new(),
            ks,
            models: BTreeMap::new(),
            datasets: BTreeMap::new(),
            cells: Vec::new(),
            created_unix: 0,
        }
    }

    pub fn cell(&self, model: &str, dataset: &str, direction: Direction, k: usize) -> Option<&Cell> {
        self.cells.iter().find(|c| c.target_model == model && c.dataset == dataset && c.direction == direction && c.k == k)
    }

    /// Mean ASR over cells matching the filter, skipping undefined cells.
    pub fn mean_asr(&self, filter: impl Fn(&Cell) -> bool) -> Option<f64> {
        let v: Vec<f64> = self.cells.iter().filter(|c| filter(c)).filter_map(|c| c.asr).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Evaluates one UAP against every (model, dataset) pair. Perturbations are
/// resized to each model's input resolution before being applied.
pub fn transfer_matrix(uap: &Uap, models: &[ModelEntry], datasets: &[DatasetEntry], ks: &[usize]) -> Result<EvalReport> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(Error::Config(format!("invalid K list {ks:?}")));
    }
    let mut report = EvalReport::empty(ks.to_vec());
    report.uap_digest = uap.digest();
    report.variant = uap.provenance.variant.clone();
    report.source_model = uap.provenance.source_model.clone();
    report.epsilon = uap.epsilon.to_string();
    report.created_unix = std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    for d in datasets {
        report.datasets.insert(d.name.clone(), d.dataset.digest());
    }
    for m in models {
        let fingerprint = m.pair.fingerprint();
        report.models.insert(m.name.clone(), fingerprint.clone());
        let white_box = fingerprint == uap.provenance.source_model;
        for d in datasets {
            let clean_img = embed_images(&m.pair, &d.dataset, None)?;
            let adv_img = embed_images(&m.pair, &d.dataset, Some(uap))?;
            let captions = embed_captions(&m.pair, &d.dataset)?;
            for direction in Direction::BOTH {
                let clean = assemble(&d.dataset, direction, clean_img.clone(), captions.clone()).ranks()?;
                let adv = assemble(&d.dataset, direction, adv_img.clone(), captions.clone()).ranks()?;
                for &k in ks {
                    let stat = attack_success_rate(&clean, &adv, k)?;
                    report.cells.push(Cell {
                        target_model: m.name.clone(),
                        arch: m.pair.arch().tag().to_string(),
                        dataset: d.name.clone(),
                        direction,
                        k,
                        white_box,
                        clean_recall: recall_from_ranks(&clean, k),
                        adv_recall: recall_from_ranks(&adv, k),
                        asr: stat.asr,
                        queries: stat.queries,
                        clean_hits: stat.clean_hits,
                        flips: stat.flips,
                        new_hits: stat.new_hits,
                    });
                }
            }
        }
    }
    Ok(report)
}

fn csv_header(ks: &[usize]) -> Vec<String> {
    let mut h = vec!["target_model".to_string(), "dataset".into(), "white_box".into()];
    for d in Direction::BOTH {
        for k in ks {
            h.push(format!("{}_asr@{k}", d.tag()));
        }
    }
    h
}

fn fmt_rate(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x}"))
}

/// Writes `report.csv` (rows: target model × dataset; columns: direction × K
/// ASR, `NA` where undefined) and `report.json`.
pub fn emit_report(report: &EvalReport, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let dir = out_dir.as_ref();
    fs::create_dir_all(dir)?;
    let csv_path = dir.join("report.csv");
    let mut w = csv::Writer::from_path(&csv_path)?;
    w.write_record(csv_header(&report.ks))?;
    let mut rows: Vec<(&str, &str)> = Vec::new();
    for c in &report.cells {
        if !rows.contains(&(c.target_model.as_str(), c.dataset.as_str())) {
            rows.push((&c.target_model, &c.dataset));
        }
    }
    for (model, dataset) in rows {
        let white_box = report.cells.iter().any(|c| c.target_model == model && c.dataset == dataset && c.white_box);
        let mut rec = vec![model.to_string(), dataset.to_string(), white_box.to_string()];
        for d in Direction::BOTH {
            for &k in &report.ks {
                rec.push(report.cell(model, dataset, d, k).map_or_else(|| "NA".to_string(), |c| fmt_rate(c.asr)));
            }
        }
        w.write_record(rec)?;
    }
    w.flush()?;
    let json_path = dir.join("report.json");
    fs::write(&json_path, serde_json::to_vec_pretty(report)?)?;
    Ok(vec![csv_path, json_path])
}

/// Parsed `report.csv` row.
#[derive(Debug, Clone, PartialEq)]
pub struct CsvRow {
    pub target_model: String,
    pub dataset: String,
    pub white_box: bool,
    /// Column name (e.g. `i2t_asr@5`) → value.
    pub asr: BTreeMap<String, Option<f64>>,
}

pub fn read_csv_cells(path: impl AsRef<Path>) -> Result<Vec<CsvRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.clone();
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| Error::Format(format!("bad CSV rate {s:?}")))
            }
        };
        let mut asr = BTreeMap::new();
        for (h, v) in headers.iter().zip(rec.iter()).skip(3) {
            asr.insert(h.to_string(), parse(v)?);
        }
        rows.push(CsvRow {
            target_model: rec[0].to_string(),
            dataset: rec[1].to_string(),
            white_box: rec[2].parse().map_err(|_| Error::Format("bad white_box flag".into()))?,
            asr,
        });
    }
    Ok(rows)
}

/// Minimal SVG bar chart of values in `[0, 1]`.
pub fn write_bar_svg(path: impl AsRef<Path>, title: &str, labels: &[String], values: &[f64]) -> Result<()> {
    let (w, h, pad) = (90 * labels.len().max(1) + 80, 320usize, 40usize);
    let plot_h = (h - 2 * pad) as f64;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="12">"#);
    let _ = writeln!(s, r#"<text x="{}" y="20" text-anchor="middle">{title}</text>"#, w / 2);
    let _ = writeln!(s, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - 20, h - pad);
    for (i, (l, &v)) in labels.iter().zip(values).enumerate() {
        let bh = v.clamp(0.0, 1.0) * plot_h;
        let x = pad + 20 + i * 90;
        let _ = writeln!(s, r#"<rect x="{x}" y="{:.1}" width="60" height="{bh:.1}" fill="steelblue"/>"#, (h - pad) as f64 - bh);
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{l}</text>"#, x + 30, h - pad + 15);
        let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="middle">{:.1}%</text>"#, x + 30, (h - pad) as f64 - bh - 4.0, v * 100.0);
    }
    s.push_str("</svg>\n");
    fs::write(path, s)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_report_is_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&EvalReport::empty(vec![1, 5, 10]), dir.path()).unwrap();
        let text = fs::read_to_string(&files[0]).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert_eq!(text.trim_end(), "target_model,dataset,white_box,i2t_asr@1,i2t_asr@5,i2t_asr@10,t2i_asr@1,t2i_asr@5,t2i_asr@10");
    }

    #[test]
    fn csv_round_trips_json_values() {
        let mut r = EvalReport::empty(vec![1, 5]);
        let mut n = 0;
        for model in ["m1", "m2"] {
            for d in Direction::BOTH {
                for k in [1, 5] {
                    n += 1;
                    r.cells.push(Cell {
                        target_model: model.into(),
                        arch: "conv-small".into(),
                        dataset: "A".into(),
                        direction: d,
                        k,
                        white_box: model == "m1",
                        clean_recall: 0.9,
                        adv_recall: 0.1,
                        asr: if n == 3 { None } else { Some(1.0 / n as f64) },
                        queries: 10,
                        clean_hits: 9,
                        flips: 8,
                        new_hits: 0,
                    });
                }
            }
        }
        let dir = tempfile::tempdir().unwrap();
        emit_report(&r, dir.path()).unwrap();
        let rows = read_csv_cells(dir.path().join("report.csv")).unwrap();
        let json: EvalReport = serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
        assert_eq!(json, r);
        assert_eq!(rows.len(), 2);
        for row in rows {
            assert_eq!(row.white_box, row.target_model == "m1");
            for c in json.cells.iter().filter(|c| c.target_model == row.target_model) {
                assert_eq!(row.asr[&format!("{}_asr@{}", c.direction.tag(), c.k)], c.asr);
            }
        }
    }
}
