//! CSV outputs.
//!
//! Evaluation report, one row per class then summary rows:
//!
//! ```text
//! kind,class_id,group,ap,num_gt
//! class,0,base,0.93,41
//! summary,,base,0.88,
//! top1,,novel,0.71,
//! ```
//!
//! `ap` is empty for classes without ground truth. Training logs have
//! `epoch,lr,rpn,reg,cls,l1,irm,pms,total,wall_s`. Floats use shortest
//! round-trip formatting.

use std::path::Path;

use ovdet_core::evalkit::EvalReport;
use ovdet_core::train::EpochLog;

use crate::error::{format_err, Result};

fn writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish(w: csv::Writer<Vec<u8>>) -> Vec<u8> {
    w.into_inner().expect("in-memory writer")
}

pub fn eval_csv(report: &EvalReport) -> Result<Vec<u8>> {
    let mut w = writer();
    w.write_record(["kind", "class_id", "group", "ap", "num_gt"])?;
    for c in &report.per_class {
        let ap = c.ap.map(|v| v.to_string()).unwrap_or_default();
        w.write_record(["class", &c.class_id.to_string(), c.group.name(), &ap, &c.num_gt.to_string()])?;
    }
    for (group, v) in [("base", report.ap_base), ("novel", report.ap_novel), ("all", report.ap_all)] {
        w.write_record(["summary", "", group, &v.to_string(), ""])?;
    }
    if let Some(t) = report.top1 {
        for (group, v) in [("base", t.base), ("novel", t.novel), ("overall", t.overall)] {
            w.write_record(["top1", "", group, &v.to_string(), ""])?;
        }
    }
    Ok(finish(w))
}

/// Training log; `wall_s[i]` is the elapsed time at the end of epoch `i`.
pub fn log_csv(log: &[EpochLog], wall_s: &[f64]) -> Result<Vec<u8>> {
    let mut w = writer();
    w.write_record(["epoch", "lr", "rpn", "reg", "cls", "l1", "irm", "pms", "total", "wall_s"])?;
    for (i, e) in log.iter().enumerate() {
        let t = &e.terms;
        let wall = wall_s.get(i).map(|v| format!("{v:.3}")).unwrap_or_default();
        let cells = [e.epoch as f64, e.lr, t.rpn, t.reg, t.cls, t.l1, t.irm, t.pms, e.total];
        let mut row: Vec<String> = cells.iter().map(|v| v.to_string()).collect();
        row.push(wall);
        w.write_record(&row)?;
    }
    Ok(finish(w))
}

/// A parsed CSV: header plus string rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn parse(path: &Path, bytes: &[u8]) -> Result<Self> {
        let mut r = csv::Reader::from_reader(bytes);
        let header = r.headers()?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            rows.push(rec?.iter().map(String::from).collect());
        }
        if rows.is_empty() {
            return Err(format_err(path, "no data rows"));
        }
        Ok(Self { header, rows })
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = writer();
        w.write_record(&self.header)?;
        for row in &self.rows {
            w.write_record(row)?;
        }
        Ok(finish(w))
    }
}

/// Stacks tables with one header, prefixing each row with its source name.
pub fn merge(tables: &[(String, Table)]) -> Result<Table> {
    let Some((_, first)) = tables.first() else { return Err(format_err("report", "nothing to merge")) };
    let mut header = vec!["source".to_string()];
    header.extend(first.header.iter().cloned());
    let mut rows = Vec::new();
    for (name, t) in tables {
        if t.header != first.header {
            return Err(format_err(name, "columns differ from the first input"));
        }
        for r in &t.rows {
            let mut row = vec![name.clone()];
            row.extend(r.iter().cloned());
            rows.push(row);
        }
    }
    Ok(Table { header, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ovdet_core::evalkit::{ClassAp, ClassGroup, Top1};

    fn report() -> EvalReport {
        EvalReport {
            per_class: vec![
                ClassAp { class_id: 0, group: ClassGroup::Base, ap: Some(0.5), num_gt: 2 },
                ClassAp { class_id: 1, group: ClassGroup::Novel, ap: None, num_gt: 0 },
            ],
            ap_base: 0.5,
            ap_novel: 0.0,
            ap_all: 0.5,
            top1: Some(Top1 { base: 1.0, novel: 0.0, overall: 0.75 }),
        }
    }

    #[test]
    fn eval_layout() {
        let text = String::from_utf8(eval_csv(&report()).unwrap()).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "kind,class_id,group,ap,num_gt");
        assert_eq!(lines[1], "class,0,base,0.5,2");
        assert_eq!(lines[2], "class,1,novel,,0");
        assert_eq!(lines[5], "summary,,all,0.5,");
        assert_eq!(lines[8], "top1,,overall,0.75,");
        assert_eq!(lines.len(), 9);
    }

    #[test]
    fn merge_prefixes_sources_and_checks_columns() {
        let p = Path::new("a.csv");
        let a = Table::parse(p, &eval_csv(&report()).unwrap()).unwrap();
        let merged = merge(&[("a".into(), a.clone()), ("b".into(), a.clone())]).unwrap();
        assert_eq!(merged.header[0], "source");
        assert_eq!(merged.rows.len(), 2 * a.rows.len());
        assert_eq!(merged.rows[a.rows.len()][0], "b");
        let other = Table { header: vec!["x".into()], rows: vec![vec!["1".into()]] };
        assert!(merge(&[("a".into(), a), ("o".into(), other)]).is_err());
    }
}
