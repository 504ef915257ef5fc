use serde::{Deserialize, Serialize};

use crate::prompting::PromptMode;

use super::experiment::EvalReport;
use super::HarnessError;

pub const COLUMNS: [&str; 9] = [
    "task",
    "mode",
    "k",
    "s",
    "E",
    "method",
    "strategy",
    "accuracy",
    "parse_failures",
];

/// One table row. Proxy-specific columns are empty for baseline modes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub task: String,
    pub mode: String,
    pub k: Option<usize>,
    pub s: usize,
    #[serde(rename = "E")]
    pub epochs: Option<usize>,
    pub method: Option<String>,
    pub strategy: Option<String>,
    /// Rounded to one decimal.
    pub accuracy: f64,
    pub parse_failures: usize,
}

fn round1(x: f64) -> f64 {
    (x * 10.0).round() / 10.0
}

impl From<&EvalReport> for ReportRow {
    fn from(r: &EvalReport) -> Self {
        let amplify = r.mode == PromptMode::Amplify;
        ReportRow {
            task: r.task.clone(),
            mode: r.mode.to_string(),
            k: amplify.then_some(r.k),
            s: r.s,
            epochs: amplify.then_some(r.epochs),
            method: amplify.then(|| r.method.to_string()),
            strategy: amplify.then(|| r.strategy.short_name().to_string()),
            accuracy: round1(r.accuracy),
            parse_failures: r.parse_failures,
        }
    }
}

impl ReportRow {
    fn cells(&self, none: &str) -> Vec<String> {
        let opt = |v: &Option<String>| v.clone().unwrap_or_else(|| none.to_string());
        vec![
            self.task.clone(),
            self.mode.clone(),
            opt(&self.k.map(|v| v.to_string())),
            self.s.to_string(),
            opt(&self.epochs.map(|v| v.to_string())),
            opt(&self.method),
            opt(&self.strategy),
            format!("{:.1}", self.accuracy),
            self.parse_failures.to_string(),
        ]
    }
}

/// Aligned plain-text table.
pub fn render_text(rows: &[ReportRow]) -> String {
    let body: Vec<Vec<String>> = rows.iter().map(|r| r.cells("-")).collect();
    let mut widths: Vec<usize> = COLUMNS.iter().map(|c| c.len()).collect();
    for cells in &body {
        for (w, c) in widths.iter_mut().zip(cells) {
            *w = (*w).max(c.len());
        }
    }
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:<w$}"))
            .collect::<Vec<_>>()
            .join("  ")
            .trim_end()
            .to_string()
    };
    let header: Vec<String> = COLUMNS.iter().map(|c| c.to_string()).collect();
    let mut out = vec![line(&header)];
    out.push(widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("  "));
    out.extend(body.iter().map(|c| line(c)));
    out.push(String::new());
    out.join("\n")
}

pub fn render_csv(rows: &[ReportRow]) -> Result<String, HarnessError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(COLUMNS)?;
    for r in rows {
        w.write_record(r.cells(""))?;
    }
    let bytes = w.into_inner().map_err(|e| HarnessError::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

pub fn parse_csv(text: &str) -> Result<Vec<ReportRow>, HarnessError> {
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let headers = r.headers()?.clone();
    if headers.iter().ne(COLUMNS) {
        return Err(HarnessError::Config(format!("unexpected csv header {headers:?}")));
    }
    r.deserialize().map(|row| Ok(row?)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Csv,
}

pub fn render_report(reports: &[EvalReport], format: ReportFormat) -> Result<String, HarnessError> {
    let rows: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
    match format {
        ReportFormat::Text => Ok(render_text(&rows)),
        ReportFormat::Csv => render_csv(&rows),
    }
}

/// Proxy accuracy before and after fine-tuning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProxyEvalRow {
    pub task: String,
    /// Fine-tuning epochs, when known.
    #[serde(rename = "E")]
    pub epochs: Option<usize>,
    pub train: Option<f64>,
    pub validation: Option<f64>,
    pub test: Option<f64>,
}

pub fn render_proxy_table(rows: &[ProxyEvalRow]) -> String {
    let fmt = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{:.1}", round1(x)));
    let mut out = format!("{:<20}  {:>5}  {:>6}  {:>10}  {:>6}\n", "task", "E", "train", "validation", "test");
    for r in rows {
        out.push_str(&format!(
            "{:<20}  {:>5}  {:>6}  {:>10}  {:>6}\n",
            r.task,
            r.epochs.map_or("-".to_string(), |e| e.to_string()),
            fmt(r.train),
            fmt(r.validation),
            fmt(r.test)
        ));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attribution::AttributionMethod;
    use crate::harness::experiment::RunStats;
    use crate::selection::SelectionStrategy;
    use proptest::prelude::*;

    fn report(mode: PromptMode, accuracy: f64) -> EvalReport {
        EvalReport {
            task: "snarks, mini".into(),
            mode,
            k: 5,
            s: 10,
            epochs: 10,
            method: AttributionMethod::GradXInput,
            strategy: SelectionStrategy::HighMcs,
            template: "standard".into(),
            llm: "mock:echo-gold".into(),
            config_digest: "d".into(),
            total: 12,
            correct: 11,
            incorrect: 1,
            parse_failures: 0,
            accuracy,
            proxy_validation_accuracy: None,
            selected_shot_ids: vec![],
            shortfall: 0,
            probe: None,
            run: RunStats::default(),
        }
    }

    #[test]
    fn single_report_single_row() {
        let text = render_report(&[report(PromptMode::Amplify, 91.63)], ReportFormat::Text).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("task"));
        assert!(lines[2].contains("91.6"), "{}", lines[2]);
        assert!(lines[2].contains("H-MCS"));
    }

    #[test]
    fn csv_round_trip() {
        let reports = [report(PromptMode::Amplify, 91.63), report(PromptMode::AnswerOnly, 50.0)];
        let csv = render_report(&reports, ReportFormat::Csv).unwrap();
        assert!(csv.starts_with("task,mode,k,s,E,method,strategy,accuracy,parse_failures\n"));
        let rows = parse_csv(&csv).unwrap();
        let expected: Vec<ReportRow> = reports.iter().map(ReportRow::from).collect();
        assert_eq!(rows, expected);
        assert_eq!(rows[0].accuracy, 91.6);
        assert_eq!(rows[1].k, None);
    }

    #[test]
    fn baseline_rows_blank_proxy_columns() {
        let row = ReportRow::from(&report(PromptMode::ChainOfThought, 40.0));
        assert_eq!((row.k, row.epochs, row.method, row.strategy), (None, None, None, None));
    }

    #[test]
    fn wrong_header_rejected() {
        assert!(parse_csv("a,b\n1,2\n").is_err());
    }

    proptest! {
        #[test]
        fn csv_reloads_equal(acc in 0.0f64..=100.0, pf in 0usize..50, k in 1usize..9, task in "[a-z ,\"]{1,12}") {
            let mut r = report(PromptMode::Amplify, acc);
            r.parse_failures = pf;
            r.k = k;
            r.task = task;
            let rows = parse_csv(&render_report(&[r.clone()], ReportFormat::Csv).unwrap()).unwrap();
            prop_assert_eq!(rows, vec![ReportRow::from(&r)]);
        }
    }
}
