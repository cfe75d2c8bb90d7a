//! Renderers: generator × judge grids, confusion-matrix data files and sample
//! sheets.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;
use serde_json::json;

use crate::corpus::Dialogue;
use crate::expand::ExpansionRecord;
use crate::metrics::MetricsReport;
use crate::relations::RelationId;
use crate::seeded::SeededRng;

/// Marker for an absent cell or value.
pub const ABSENT: &str = "–";

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    /// Never assigned; rendered like an absent cell.
    Unset,
    Absent,
    Report(Box<MetricsReport>),
}

/// A table of reports: rows are generators, columns are judges.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossGrid {
    pub rows: Vec<String>,
    pub columns: Vec<String>,
    pub ks: Vec<usize>,
    cells: Vec<Vec<Cell>>,
}

impl CrossGrid {
    pub fn new(rows: Vec<String>, columns: Vec<String>, ks: Vec<usize>) -> Self {
        let cells = vec![vec![Cell::Unset; columns.len()]; rows.len()];
        Self { rows, columns, ks, cells }
    }

    fn slot(&mut self, row: &str, col: &str) -> Option<&mut Cell> {
        let r = self.rows.iter().position(|x| x == row)?;
        let c = self.columns.iter().position(|x| x == col)?;
        Some(&mut self.cells[r][c])
    }

    /// Places `report` by its labels. Returns false if either label is not
    /// part of the grid.
    pub fn set(&mut self, report: MetricsReport) -> bool {
        let (row, col) = (report.generator_label.clone(), report.judge_label.clone());
        match self.slot(&row, &col) {
            Some(cell) => {
                *cell = Cell::Report(Box::new(report));
                true
            }
            None => false,
        }
    }

    pub fn mark_absent(&mut self, row: &str, col: &str) -> bool {
        match self.slot(row, col) {
            Some(cell) => {
                *cell = Cell::Absent;
                true
            }
            None => false,
        }
    }

    pub fn cell(&self, row: usize, col: usize) -> &Cell {
        &self.cells[row][col]
    }

    /// Labels of cells that were neither filled nor marked absent.
    pub fn unset_cells(&self) -> Vec<(String, String)> {
        let mut out = Vec::new();
        for (r, row) in self.cells.iter().enumerate() {
            for (c, cell) in row.iter().enumerate() {
                if *cell == Cell::Unset {
                    out.push((self.rows[r].clone(), self.columns[c].clone()));
                }
            }
        }
        out
    }

    fn report(&self, r: usize, c: usize) -> Option<&MetricsReport> {
        match &self.cells[r][c] {
            Cell::Report(rep) => Some(rep),
            _ => None,
        }
    }

    /// The four (or `ks.len() + 1`) rendered values of a cell.
    fn values(&self, r: usize, c: usize) -> Vec<String> {
        match self.report(r, c) {
            Some(rep) => {
                let mut v: Vec<String> = self
                    .ks
                    .iter()
                    .map(|k| rep.top_k.get(k).map_or(ABSENT.to_string(), |x| format!("{x:.2}")))
                    .collect();
                v.push(format!("{:.3}", rep.mrr));
                v
            }
            None => vec![ABSENT.to_string(); self.ks.len() + 1],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridFormat {
    Text,
    Csv,
    Json,
}

fn pad(s: &str, width: usize) -> String {
    let n = s.chars().count();
    format!("{s}{}", " ".repeat(width.saturating_sub(n)))
}

fn metric_headers(ks: &[usize]) -> Vec<String> {
    let mut h: Vec<String> = ks.iter().map(|k| format!("Top-{k}")).collect();
    h.push("MRR".into());
    h
}

fn render_text(grid: &CrossGrid) -> String {
    let headers = metric_headers(&grid.ks);
    let row_w = grid.rows.iter().map(|r| r.chars().count()).max().unwrap_or(0).max(10);
    let val_w = headers.iter().map(|h| h.len()).max().unwrap_or(5).max(5) + 2;
    let group_w = (val_w * headers.len()).max(grid.columns.iter().map(|c| c.chars().count() + 2).max().unwrap_or(0));
    let mut out = String::new();
    let mut line = pad("", row_w);
    for col in &grid.columns {
        line.push_str(" | ");
        line.push_str(&pad(col, group_w));
    }
    out.push_str(line.trim_end());
    out.push('\n');
    let mut line = pad("", row_w);
    for _ in &grid.columns {
        line.push_str(" | ");
        let hs: String = headers.iter().map(|h| pad(h, val_w)).collect();
        line.push_str(&pad(&hs, group_w));
    }
    out.push_str(line.trim_end());
    out.push('\n');
    let rule_len = row_w + grid.columns.len() * (group_w + 3);
    out.push_str(&"-".repeat(rule_len));
    out.push('\n');
    for (r, row) in grid.rows.iter().enumerate() {
        let mut line = pad(row, row_w);
        for c in 0..grid.columns.len() {
            line.push_str(" | ");
            let vs: String = grid.values(r, c).iter().map(|v| pad(v, val_w)).collect();
            line.push_str(&pad(&vs, group_w));
        }
        out.push_str(line.trim_end());
        out.push('\n');
    }
    out
}

fn render_csv(grid: &CrossGrid) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["generator".to_string(), "judge".to_string()];
    header.extend(grid.ks.iter().map(|k| format!("top_{k}")));
    header.extend(["mrr", "n_records", "n_excluded"].map(String::from));
    w.write_record(&header).expect("in-memory csv");
    for (r, row) in grid.rows.iter().enumerate() {
        for (c, col) in grid.columns.iter().enumerate() {
            let mut rec = vec![row.clone(), col.clone()];
            rec.extend(grid.values(r, c));
            match grid.report(r, c) {
                Some(rep) => rec.extend([rep.n_records.to_string(), rep.n_excluded.to_string()]),
                None => rec.extend([ABSENT.to_string(), ABSENT.to_string()]),
            }
            w.write_record(&rec).expect("in-memory csv");
        }
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

fn render_json(grid: &CrossGrid) -> String {
    let mut cells = Vec::new();
    for (r, row) in grid.rows.iter().enumerate() {
        for (c, col) in grid.columns.iter().enumerate() {
            let value = match grid.report(r, c) {
                Some(rep) => {
                    let mut v = serde_json::to_value(rep).expect("report serializes");
                    let obj = v.as_object_mut().expect("object");
                    obj.remove("confusion");
                    obj.insert("absent".into(), json!(false));
                    v
                }
                None => json!({"generator_label": row, "judge_label": col, "absent": true}),
            };
            cells.push(value);
        }
    }
    let doc = json!({
        "rows": grid.rows,
        "columns": grid.columns,
        "ks": grid.ks,
        "cells": cells,
    });
    let mut s = serde_json::to_string_pretty(&doc).expect("grid serializes");
    s.push('\n');
    s
}

/// Renders Top-k and MRR for every cell; absent cells show [`ABSENT`].
pub fn render_grid(grid: &CrossGrid, format: GridFormat) -> String {
    match format {
        GridFormat::Text => render_text(grid),
        GridFormat::Csv => render_csv(grid),
        GridFormat::Json => render_json(grid),
    }
}

/// Length-ratio annotation lines for the text report.
pub fn render_length_notes(grid: &CrossGrid) -> String {
    let mut seen = BTreeMap::new();
    for r in 0..grid.rows.len() {
        for c in 0..grid.columns.len() {
            if let Some(rep) = grid.report(r, c) {
                if let Some(ratio) = rep.mean_length_ratio {
                    seen.entry(rep.generator_label.clone()).or_insert((ratio, rep.reference_length_ratio));
                }
            }
        }
    }
    let mut out = String::new();
    for (label, (ratio, reference)) in seen {
        let _ = writeln!(out, "mean length ratio, {label}: {ratio:.3} (reference {reference:.2})");
    }
    out
}

/// Plot-ready confusion data for one report.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionFiles {
    pub counts_csv: String,
    pub normalized_csv: String,
    pub json: String,
}

fn matrix_csv<T: ToString>(labels: &[RelationId], rows: &[Vec<T>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["true\\predicted".to_string()];
    header.extend(labels.iter().map(|l| l.to_string()));
    w.write_record(&header).expect("in-memory csv");
    for (label, row) in labels.iter().zip(rows) {
        let mut rec = vec![label.to_string()];
        rec.extend(row.iter().map(ToString::to_string));
        w.write_record(&rec).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("flush")).expect("utf-8")
}

#[derive(Serialize)]
struct ConfusionJson<'a> {
    generator_label: &'a str,
    judge_label: &'a str,
    labels: &'a [RelationId],
    counts: &'a [Vec<u64>],
    row_normalized: Vec<Vec<f64>>,
}

/// Counts and row-normalized proportions (4 decimals) as CSV, plus both in
/// one JSON document.
pub fn render_confusion(report: &MetricsReport) -> ConfusionFiles {
    let m = &report.confusion;
    let norm: Vec<Vec<f64>> = m
        .row_normalized()
        .into_iter()
        .map(|row| row.into_iter().map(|x| (x * 10_000.0).round() / 10_000.0).collect())
        .collect();
    let norm_text: Vec<Vec<String>> = norm.iter().map(|row| row.iter().map(|x| format!("{x:.4}")).collect()).collect();
    let mut json = serde_json::to_string_pretty(&ConfusionJson {
        generator_label: &report.generator_label,
        judge_label: &report.judge_label,
        labels: &m.labels,
        counts: &m.counts,
        row_normalized: norm,
    })
    .expect("confusion serializes");
    json.push('\n');
    ConfusionFiles {
        counts_csv: matrix_csv(&m.labels, &m.counts),
        normalized_csv: matrix_csv(&m.labels, &norm_text),
        json,
    }
}

/// The tag appended to each sample, e.g. `[ cs: IsAfter ]`.
pub fn cs_tag(relation: RelationId) -> String {
    format!("[ cs: {relation} ]")
}

/// A seeded sample of `n_per_relation` expansions per relation, each shown
/// with up to `context_turns` preceding turns (when the dialogue is known),
/// the generated response and its relation tag.
pub fn render_samples(
    expansions: &[ExpansionRecord],
    dialogues: &[Dialogue],
    n_per_relation: usize,
    seed: u64,
    context_turns: usize,
) -> String {
    let mut by_rel: BTreeMap<RelationId, Vec<&ExpansionRecord>> = BTreeMap::new();
    for e in expansions {
        by_rel.entry(e.relation).or_default().push(e);
    }
    let mut out = String::new();
    for (relation, mut recs) in by_rel {
        recs.sort_by(|a, b| (&a.run_id, &a.dialogue_id, a.turn_index).cmp(&(&b.run_id, &b.dialogue_id, b.turn_index)));
        let mut rng = SeededRng::derived(seed, relation.name());
        let mut picks = rng.choose_indices(recs.len(), n_per_relation.min(recs.len()));
        picks.sort_unstable();
        for i in picks {
            let e = recs[i];
            let _ = writeln!(out, "# {} / {} / turn {}", relation, e.dialogue_id, e.turn_index);
            if let Some(d) = dialogues.iter().find(|d| d.id == e.dialogue_id) {
                let end = e.turn_index.min(d.turns.len());
                let start = end.saturating_sub(context_turns);
                for t in &d.turns[start..end] {
                    let _ = writeln!(out, "{}: {}", t.speaker.display_name(), t.text);
                }
            }
            let _ = writeln!(out, "{}: {} {}", e.generator_model, e.text, cs_tag(relation));
            out.push('\n');
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::{report, ConfusionMatrix, ReportLabels, REFERENCE_LENGTH_RATIO};
    use crate::relations::catalog_default;

    fn rep(generator: &str, judge: &str, top: [f64; 3], mrr: f64) -> MetricsReport {
        MetricsReport {
            generator_label: generator.into(),
            judge_label: judge.into(),
            n_records: 100,
            n_excluded: 2,
            n_completed: 0,
            top_k: [(1, top[0]), (5, top[1]), (10, top[2])].into_iter().collect(),
            mrr,
            confusion: ConfusionMatrix::zeros(RelationId::ALL.to_vec()),
            mean_length_ratio: Some(1.3512),
            per_relation_length_ratio: BTreeMap::new(),
            reference_length_ratio: REFERENCE_LENGTH_RATIO,
        }
    }

    fn fixture_grid() -> CrossGrid {
        let rows = vec!["Zero-Shot GPT-3.5".to_string(), "One-Shot GPT-3.5".to_string()];
        let cols = vec!["GPT-3.5".to_string(), "GPT-4".to_string()];
        let mut g = CrossGrid::new(rows, cols, vec![1, 5, 10]);
        assert!(g.set(rep("Zero-Shot GPT-3.5", "GPT-3.5", [0.121, 0.4649, 0.8], 0.31049)));
        assert!(g.set(rep("Zero-Shot GPT-3.5", "GPT-4", [0.5, 0.875, 0.99], 0.64444)));
        assert!(g.set(rep("One-Shot GPT-3.5", "GPT-3.5", [0.1, 0.45, 0.795], 0.2996)));
        assert!(g.mark_absent("One-Shot GPT-3.5", "GPT-4"));
        g
    }

    #[test]
    fn one_by_one() {
        let mut g = CrossGrid::new(vec!["g".into()], vec!["j".into()], vec![1, 5, 10]);
        g.set(rep("g", "j", [0.126, 0.5, 1.0], 0.2586));
        let csv = render_grid(&g, GridFormat::Csv);
        assert_eq!(csv.lines().nth(1).unwrap(), "g,j,0.13,0.50,1.00,0.259,100,2");
    }

    #[test]
    fn golden_text() {
        let expected = concat!(
            "                  | GPT-3.5                          | GPT-4\n",
            "                  | Top-1   Top-5   Top-10  MRR      | Top-1   Top-5   Top-10  MRR\n",
            "---------------------------------------------------------------------------------------\n",
            "Zero-Shot GPT-3.5 | 0.12    0.46    0.80    0.310    | 0.50    0.88    0.99    0.644\n",
            "One-Shot GPT-3.5  | 0.10    0.45    0.80    0.300    | –       –       –       –\n",
        );
        assert_eq!(render_grid(&fixture_grid(), GridFormat::Text), expected);
    }

    #[test]
    fn golden_csv_and_roundtrip() {
        let csv_text = render_grid(&fixture_grid(), GridFormat::Csv);
        let expected = "\
generator,judge,top_1,top_5,top_10,mrr,n_records,n_excluded
Zero-Shot GPT-3.5,GPT-3.5,0.12,0.46,0.80,0.310,100,2
Zero-Shot GPT-3.5,GPT-4,0.50,0.88,0.99,0.644,100,2
One-Shot GPT-3.5,GPT-3.5,0.10,0.45,0.80,0.300,100,2
One-Shot GPT-3.5,GPT-4,–,–,–,–,–,–
";
        assert_eq!(csv_text, expected);
        let mut rdr = csv::Reader::from_reader(csv_text.as_bytes());
        let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
        let g = fixture_grid();
        let rep = g.report(0, 1).unwrap();
        let top5: f64 = rows[1][3].parse().unwrap();
        assert_eq!(top5, (rep.top_k[&5] * 100.0).round() / 100.0);
        let mrr: f64 = rows[1][5].parse().unwrap();
        assert_eq!(mrr, (rep.mrr * 1000.0).round() / 1000.0);
    }

    #[test]
    fn json_marks_absent() {
        let v: serde_json::Value = serde_json::from_str(&render_grid(&fixture_grid(), GridFormat::Json)).unwrap();
        let cells = v["cells"].as_array().unwrap();
        assert_eq!(cells.len(), 4);
        assert_eq!(cells[3]["absent"], true);
        assert_eq!(cells[1]["mrr"], 0.644);
        assert_eq!(cells[1]["top_k"]["5"], 0.88);
    }

    #[test]
    fn unset_cells_listed() {
        let g = CrossGrid::new(vec!["a".into()], vec!["b".into(), "c".into()], vec![1]);
        assert_eq!(g.unset_cells().len(), 2);
        assert!(render_grid(&g, GridFormat::Text).contains(ABSENT));
    }

    #[test]
    fn length_notes() {
        let notes = render_length_notes(&fixture_grid());
        assert!(notes.contains("Zero-Shot GPT-3.5: 1.351 (reference 1.35)"), "{notes}");
    }

    fn oracle_report() -> MetricsReport {
        use crate::evaluate::RankingRecord;
        let cat = catalog_default();
        let recs: Vec<RankingRecord> = RelationId::ALL
            .iter()
            .map(|t| {
                let mut ranking = vec![*t];
                ranking.extend(RelationId::ALL.iter().filter(|r| *r != t));
                RankingRecord {
                    run_id: "r".into(),
                    dialogue_id: format!("d-{t}"),
                    turn_index: 1,
                    true_relation: *t,
                    ranking,
                    true_rank: 1,
                    judge_model: "oracle".into(),
                    completion_applied: false,
                    templates_sha: String::new(),
                }
            })
            .collect();
        let labels = ReportLabels { generator: "g".into(), judge: "oracle".into() };
        report(&recs, &[], &labels, &[1, 5, 10], &cat).unwrap()
    }

    #[test]
    fn confusion_identity() {
        let files = render_confusion(&oracle_report());
        let lines: Vec<&str> = files.counts_csv.lines().collect();
        assert_eq!(lines.len(), 13);
        assert!(lines[0].starts_with("true\\predicted,xAttr,xWant"));
        assert_eq!(lines[1], "xAttr,1,0,0,0,0,0,0,0,0,0,0,0");
        assert_eq!(lines[12], "HasSubEvent,0,0,0,0,0,0,0,0,0,0,0,1");
        assert_eq!(files.normalized_csv.lines().nth(2).unwrap(), "xWant,0.0000,1.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000,0.0000");
        let v: serde_json::Value = serde_json::from_str(&files.json).unwrap();
        assert_eq!(v["labels"][10], "IsAfter");
        assert_eq!(v["counts"][3][3], 1);
    }

    #[test]
    fn confusion_zero() {
        let r = rep("g", "j", [0.0; 3], 0.1);
        let files = render_confusion(&r);
        for line in files.counts_csv.lines().skip(1) {
            assert!(line.split(',').skip(1).all(|c| c == "0"));
        }
    }

    fn sample_records() -> Vec<ExpansionRecord> {
        RelationId::ALL
            .iter()
            .map(|r| ExpansionRecord {
                run_id: "r".into(),
                dialogue_id: "d1".into(),
                turn_index: 1,
                relation: *r,
                text: format!("text for {r}"),
                generator_model: "GPT-4".into(),
                mode: crate::expand::Mode::ZeroShot,
                prompt_sha: String::new(),
                templates_sha: String::new(),
                reask_of: Vec::new(),
                original_text: "orig".into(),
                char_len: 12,
                original_char_len: 4,
            })
            .collect()
    }

    #[test]
    fn samples_one_per_relation() {
        let d = Dialogue::from_labeled(
            "d1",
            crate::corpus::Source::DailyDialog,
            vec![("a".into(), "Well, what's the matter with you?".into()), ("b".into(), "orig".into())],
        )
        .unwrap();
        let sheet = render_samples(&sample_records(), std::slice::from_ref(&d), 1, 7, 3);
        assert_eq!(sheet.matches("[ cs: ").count(), 12);
        assert!(sheet.contains("User 1: Well, what's the matter with you?\nGPT-4: text for IsAfter [ cs: IsAfter ]\n"));
        assert_eq!(sheet, render_samples(&sample_records(), &[d], 1, 7, 3));
        assert_eq!(cs_tag(RelationId::IsAfter), "[ cs: IsAfter ]");
    }
}
