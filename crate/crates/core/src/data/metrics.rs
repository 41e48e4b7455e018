use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean IoU over the classes present in either map; `per_class[c]` is `None`
/// for classes absent from both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiouReport {
    pub mean: f64,
    pub per_class: Vec<Option<f64>>,
}

pub fn miou(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<MiouReport> {
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "miou: {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let mut tp = vec![0u64; num_classes];
    let mut fp = vec![0u64; num_classes];
    let mut fneg = vec![0u64; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        if p >= num_classes || t >= num_classes {
            return Err(Error::Shape(format!("miou: label {} out of {num_classes}", p.max(t))));
        }
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fneg[t] += 1;
        }
    }
    let per_class: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let denom = tp[c] + fp[c] + fneg[c];
            (denom > 0).then(|| tp[c] as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Ok(MiouReport { mean, per_class })
}

/// `class,iou` rows followed by a `mean` row; absent classes get an empty IoU.
pub fn write_miou_csv<W: Write>(report: &MiouReport, names: &[String], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Config(format!("csv: {e}"));
    w.write_record(["class", "iou"]).map_err(csv_err)?;
    for (c, iou) in report.per_class.iter().enumerate() {
        let name = names.get(c).cloned().unwrap_or_else(|| format!("class_{c}"));
        let v = iou.map(|v| format!("{v:.6}")).unwrap_or_default();
        w.write_record([name, v]).map_err(csv_err)?;
    }
    w.write_record(["mean".to_string(), format!("{:.6}", report.mean)])
        .map_err(csv_err)?;
    w.flush()?;
    Ok(())
}
