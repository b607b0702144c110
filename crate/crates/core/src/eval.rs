//! Confusion-matrix IoU evaluation and the per-class / gap tables.
//!
//! Classes that appear in neither prediction nor ground truth have no IoU
//! and are left out of the mean.

use serde::{Deserialize, Serialize};

use crate::autograd::IGNORE_LABEL;
use crate::error::{Error, Result};
use crate::scene::{resize_sample, Sample, CLASS_NAMES, NUM_CLASSES};
use crate::segmenter::Segmenter;

/// Recorded in every report so readers know how the mean was formed.
pub const UNDEFINED_CLASS_POLICY: &str = "classes absent from prediction and ground truth are excluded from the mean";

/// `counts[g][p]`: pixels with ground truth `g` predicted as `p`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self {
            counts: [[0; NUM_CLASSES]; NUM_CLASSES],
        }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn update(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::invalid(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some(&bad) = pred.iter().find(|&&p| usize::from(p) >= NUM_CLASSES) {
            return Err(Error::invalid(format!("predicted class {bad} outside 0..19")));
        }
        if let Some(&bad) = gt
            .iter()
            .find(|&&g| g != IGNORE_LABEL && usize::from(g) >= NUM_CLASSES)
        {
            return Err(Error::invalid(format!("ground-truth label {bad} is not a class or ignore")));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            if g != IGNORE_LABEL {
                self.counts[usize::from(g)][usize::from(p)] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (row, orow) in self.counts.iter_mut().zip(&other.counts) {
            for (c, o) in row.iter_mut().zip(orow) {
                *c += o;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the denominator is 0.
    pub fn per_class_iou(&self) -> [Option<f64>; NUM_CLASSES] {
        std::array::from_fn(|c| {
            let tp = self.counts[c][c];
            let fn_: u64 = self.counts[c].iter().sum::<u64>() - tp;
            let fp: u64 = self.counts.iter().map(|row| row[c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
    }

    pub fn miou(&self) -> Result<f64> {
        mean_defined(&self.per_class_iou())
    }
}

fn mean_defined(ious: &[Option<f64>]) -> Result<f64> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(Error::invalid("no class has a defined IoU; mIoU is undefined"));
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub dataset: String,
    pub class_names: Vec<String>,
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub pixels: u64,
    pub undefined_class_policy: String,
}

impl EvalReport {
    pub fn from_confusion(model: &str, dataset: &str, cm: &ConfusionMatrix) -> Result<Self> {
        Ok(Self {
            model: model.to_string(),
            dataset: dataset.to_string(),
            class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
            per_class_iou: cm.per_class_iou().to_vec(),
            miou: cm.miou()?,
            pixels: cm.total(),
            undefined_class_policy: UNDEFINED_CLASS_POLICY.to_string(),
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("reports serialize")
    }
}

/// Single-scale evaluation: every sample is resized to `[width, height]`
/// (nearest labels), predicted by argmax, and accumulated.
pub fn evaluate_model(
    model: &Segmenter,
    dataset: &[Sample],
    [w, h]: [usize; 2],
    model_tag: &str,
    dataset_tag: &str,
) -> Result<EvalReport> {
    if dataset.is_empty() {
        return Err(Error::invalid("evaluation dataset is empty"));
    }
    let mut cm = ConfusionMatrix::new();
    for s in dataset {
        let s = resize_sample(s, w, h)?;
        let gt = s
            .labels
            .as_ref()
            .ok_or_else(|| Error::invalid("evaluation requires labeled samples"))?;
        cm.update(&model.predict(&s.image)?, gt)?;
    }
    EvalReport::from_confusion(model_tag, dataset_tag, &cm)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.2}", 100.0 * x))
}

/// Per-class IoU table (percent), one row per report, classes in trainID
/// order.
pub fn format_class_table(reports: &[EvalReport]) -> String {
    let mut header = vec!["Model".to_string(), "Dataset".to_string(), "mIoU".to_string()];
    header.extend(CLASS_NAMES.iter().map(|s| s.to_string()));
    let rows: Vec<Vec<String>> = reports
        .iter()
        .map(|r| {
            let mut row = vec![r.model.clone(), r.dataset.clone(), pct(Some(r.miou))];
            row.extend(r.per_class_iou.iter().map(|&v| pct(v)));
            row
        })
        .collect();
    align(&header, &rows, 2)
}

/// Columns left-aligned up to `left_cols`, right-aligned after.
fn align(header: &[String], rows: &[Vec<String>], left_cols: usize) -> String {
    let widths: Vec<usize> = (0..header.len())
        .map(|i| {
            rows.iter()
                .map(|r| r[i].chars().count())
                .chain([header[i].chars().count()])
                .max()
                .unwrap_or(0)
        })
        .collect();
    let line = |cells: &[String]| {
        let parts: Vec<String> = cells
            .iter()
            .enumerate()
            .map(|(i, c)| {
                if i < left_cols {
                    format!("{c:<w$}", w = widths[i])
                } else {
                    format!("{c:>w$}", w = widths[i])
                }
            })
            .collect();
        parts.join("  ").trim_end().to_string()
    };
    let mut out = line(header);
    out.push('\n');
    let rule: usize = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
    out.push_str(&"-".repeat(rule));
    out.push('\n');
    for r in rows {
        out.push_str(&line(r));
        out.push('\n');
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapRow {
    pub name: String,
    pub backbone: String,
    pub miou_src: f64,
    pub miou_tgt: f64,
    /// `miou_tgt − miou_src`; negative means the target is worse.
    pub gap: f64,
}

pub fn gap_row(name: &str, backbone: &str, miou_src: f64, miou_tgt: f64) -> GapRow {
    GapRow {
        name: name.to_string(),
        backbone: backbone.to_string(),
        miou_src,
        miou_tgt,
        gap: miou_tgt - miou_src,
    }
}

/// Pairs a source-domain and a target-domain report of the same model.
pub fn gap_report(src: &EvalReport, tgt: &EvalReport, backbone: &str) -> Result<GapRow> {
    if src.model != tgt.model {
        return Err(Error::invalid(format!(
            "gap rows need one model, got `{}` and `{}`",
            src.model, tgt.model
        )));
    }
    Ok(gap_row(&src.model, backbone, src.miou, tgt.miou))
}

/// Percent with one decimal; negative zero prints as `0.0`.
fn pct1(v: f64) -> String {
    let s = format!("{:.1}", 100.0 * v);
    if s == "-0.0" {
        "0.0".to_string()
    } else {
        s
    }
}

/// The domain-gap table: network, backbone, mIoU on each domain and the gap,
/// all in percent with one decimal.
pub fn format_gap_table(rows: &[GapRow], source_label: &str, target_label: &str) -> String {
    let header: Vec<String> = ["Network", "Backbone", source_label, target_label, "mIoU Gap"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.name.clone(),
                r.backbone.clone(),
                pct1(r.miou_src),
                pct1(r.miou_tgt),
                pct1(r.gap),
            ]
        })
        .collect();
    align(&header, &body, 2)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_two_by_two_example() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[0, 0, 1, 1], &[0, 1, 1, 1]).unwrap();
        assert_eq!(cm.counts[0][0], 1);
        assert_eq!(cm.counts[1][0], 1);
        assert_eq!(cm.counts[1][1], 2);
        let iou = cm.per_class_iou();
        assert_eq!(iou[0], Some(0.5));
        assert_eq!(iou[1], Some(2.0 / 3.0));
        assert!(iou[2..].iter().all(Option::is_none));
        assert!((cm.miou().unwrap() - 7.0 / 12.0).abs() < 1e-15);
    }

    #[test]
    fn ignore_and_empty() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[3, 4], &[255, 255]).unwrap();
        assert_eq!(cm, ConfusionMatrix::new());
        assert!(cm.miou().is_err());
        assert!(cm.update(&[0], &[0, 1]).is_err());
        assert!(cm.update(&[19], &[0]).is_err());
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let labels: Vec<u8> = (0..40).map(|i| (i % 7) as u8).collect();
        let mut cm = ConfusionMatrix::new();
        cm.update(&labels, &labels).unwrap();
        for g in 0..NUM_CLASSES {
            for p in 0..NUM_CLASSES {
                assert!(g == p || cm.counts[g][p] == 0);
            }
        }
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn gap_rows() {
        let r = gap_row("FANet", "ResNet-34", 0.713, 0.269);
        assert_eq!(pct1(r.gap), "-44.4");
        let r = gap_row("DANet-P2PDA", "ResNet-50", 0.793, 0.398);
        assert_eq!(pct1(r.gap), "-39.5");
        assert_eq!(pct1(gap_row("x", "y", 0.5, 0.5).gap), "0.0");
    }

    #[test]
    fn gap_report_requires_same_model() {
        let mut cm = ConfusionMatrix::new();
        cm.update(&[0], &[0]).unwrap();
        let a = EvalReport::from_confusion("m1", "src", &cm).unwrap();
        let b = EvalReport::from_confusion("m2", "tgt", &cm).unwrap();
        assert!(gap_report(&a, &b, "bb").is_err());
        assert_eq!(gap_report(&a, &a, "bb").unwrap().gap, 0.0);
    }
}
