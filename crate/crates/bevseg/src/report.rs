//! Text renderings of metrics and evaluation reports.

use std::fmt::Write as _;

use bevseg_core::eval::EvalReport;
use bevseg_core::synthworld::CLASS_NAMES;
use bevseg_core::trainer::EpochRecord;

/// Shown for an IoU that was not evaluated or is undefined (empty union).
pub const MISSING: &str = "NA";

pub fn fmt_iou(v: Option<f64>) -> String {
    v.map_or_else(|| MISSING.to_string(), |v| format!("{v:.6}"))
}

fn class_name(c: usize) -> String {
    CLASS_NAMES.get(c).map_or_else(|| format!("class{c}"), |s| s.to_string())
}

pub fn metrics_header(classes: usize) -> String {
    let mut h = String::from("epoch\tL_sup\tL_sc\tL_fc");
    for c in 0..classes {
        write!(h, "\tiou_{}", class_name(c)).unwrap();
    }
    h.push_str("\tmIoU\n");
    h
}

pub fn metrics_row(r: &EpochRecord, classes: usize) -> String {
    let mut row = format!("{}\t{:.8}\t{:.8}\t{:.8}", r.epoch, r.losses.sup, r.losses.sc, r.losses.fc);
    let ious = r.eval.as_ref().map_or_else(|| vec![None; classes], EvalReport::per_class_iou);
    for v in ious {
        write!(row, "\t{}", fmt_iou(v)).unwrap();
    }
    write!(row, "\t{}\n", fmt_iou(r.eval.as_ref().and_then(EvalReport::miou))).unwrap();
    row
}

pub fn report_tsv(r: &EvalReport) -> String {
    let mut out = String::from("class\tintersection\tunion\tiou\n");
    for c in 0..r.classes() {
        writeln!(out, "{}\t{}\t{}\t{}", class_name(c), r.intersection[c], r.union[c], fmt_iou(r.iou(c))).unwrap();
    }
    writeln!(out, "mIoU\t\t\t{}", fmt_iou(r.miou())).unwrap();
    out
}

pub fn report_table(r: &EvalReport) -> String {
    let mut out = format!("{:<12} {:>12} {:>12} {:>9}\n", "class", "intersection", "union", "IoU");
    for c in 0..r.classes() {
        writeln!(out, "{:<12} {:>12} {:>12} {:>9}", class_name(c), r.intersection[c], r.union[c], fmt_iou(r.iou(c))).unwrap();
    }
    writeln!(out, "{:<12} {:>12} {:>12} {:>9}", "mIoU", "", "", fmt_iou(r.miou())).unwrap();
    write!(out, "{} samples\n", r.n_samples).unwrap();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use bevseg_core::losses::LossBreakdown;

    #[test]
    fn rows_line_up_with_header() {
        let r = EpochRecord {
            epoch: 3,
            lr: 1e-4,
            losses: LossBreakdown::default(),
            eval: Some(EvalReport {
                intersection: vec![1, 0, 0, 2],
                union: vec![2, 0, 1, 2],
                n_samples: 1,
            }),
        };
        let header = metrics_header(4);
        let row = metrics_row(&r, 4);
        assert_eq!(header.split('\t').count(), row.split('\t').count());
        assert!(row.contains("\t0.500000\tNA\t0.000000\t1.000000\t0.500000\n"));
        let none = EpochRecord { eval: None, ..r };
        assert!(metrics_row(&none, 4).ends_with("\tNA\tNA\tNA\tNA\tNA\n"));
    }
}
