use crate::error::{Error, Result};

use super::EvalReport;

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Serialize(e.to_string())
}

/// One row per category x threshold x size band.
pub fn report_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "category_id",
        "category_name",
        "iou_threshold",
        "band",
        "num_gt",
        "ap",
        "max_recall",
    ])
    .map_err(csv_err)?;
    for c in &report.pr_curves {
        let name = report
            .per_category
            .get(&c.category_id)
            .map(|r| r.name.as_str())
            .unwrap_or("");
        w.write_record([
            c.category_id.to_string(),
            name.to_string(),
            c.iou_threshold.to_string(),
            c.band.to_string(),
            c.num_gt.to_string(),
            c.ap.to_string(),
            c.max_recall.to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.into_inner().map_err(csv_err)
}

/// Long-form PR curves: one row per curve and recall sample.
pub fn pr_curves_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "category_id",
        "iou_threshold",
        "band",
        "recall",
        "precision",
    ])
    .map_err(csv_err)?;
    for c in &report.pr_curves {
        for (r, p) in report.recall_grid.iter().zip(&c.precision) {
            w.write_record([
                c.category_id.to_string(),
                c.iou_threshold.to_string(),
                c.band.to_string(),
                r.to_string(),
                p.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.into_inner().map_err(csv_err)
}
