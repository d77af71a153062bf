use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{Benchmark, BenchmarkTask, EvalError, FailureKind, Prediction, ProGroup};
use crate::corpus::{ElementType, Platform};
use crate::{digest_json, Accuracy};

/// Column order of the ScreenSpot tables.
pub const PLATFORM_COLUMNS: [Platform; 3] = [Platform::Mobile, Platform::Desktop, Platform::Web];
const TYPES: [ElementType; 2] = [ElementType::Text, ElementType::Icon];

/// Identifies one report cell. Unset fields mean "all": a Pro cell with no
/// element type is the group average, one with no group is the overall
/// text or icon column.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CellKey {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub platform: Option<Platform>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub group: Option<ProGroup>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub element_type: Option<ElementType>,
}

impl CellKey {
    pub fn platform(p: Platform) -> Self {
        Self {
            platform: Some(p),
            group: None,
            element_type: None,
        }
    }

    pub fn pro(group: Option<ProGroup>, element_type: Option<ElementType>) -> Self {
        Self {
            platform: None,
            group,
            element_type,
        }
    }

    fn matches(&self, task: &BenchmarkTask) -> bool {
        self.platform.is_none_or(|p| task.example.platform == p)
            && self.group.is_none_or(|g| task.group == Some(g))
            && self.element_type.is_none_or(|t| task.example.element_type == Some(t))
    }

    /// (group, label) heading of this cell's column.
    pub(crate) fn column(&self) -> (String, String) {
        if let Some(p) = self.platform {
            return (String::new(), platform_title(p).into());
        }
        let group = self.group.map_or("Avg.", ProGroup::title).to_string();
        let label = match self.element_type {
            Some(ElementType::Text) => "Text",
            Some(ElementType::Icon) => "Icon",
            None => "Avg.",
        };
        (group, label.into())
    }
}

fn platform_title(p: Platform) -> &'static str {
    match p {
        Platform::Mobile => "Mobile",
        Platform::Desktop => "Desktop",
        Platform::Web => "Web",
    }
}

/// Hits over attempts for one cell.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CellStat {
    pub key: CellKey,
    pub hits: u64,
    pub total: u64,
    /// One-decimal percentage, or `--` for an empty cell.
    pub percent: String,
}

impl CellStat {
    fn new(key: CellKey, hits: u64, total: u64) -> Self {
        Self {
            key,
            hits,
            total,
            percent: format_percent(hits, total),
        }
    }

    /// Exact accuracy, `None` for an empty cell.
    pub fn accuracy(&self) -> Option<Accuracy> {
        (self.total > 0).then(|| Accuracy::new(self.hits, self.total))
    }
}

/// Render `hits / total` as a percentage with one decimal, rounding half up,
/// using integer arithmetic only.
pub fn format_percent(hits: u64, total: u64) -> String {
    if total == 0 {
        return "--".into();
    }
    let tenths = (u128::from(hits) * 2000 + u128::from(total)) / (2 * u128::from(total));
    format!("{}.{}", tenths / 10, tenths % 10)
}

/// Signed difference of two cells in tenths of a percentage point, rendered
/// as `+x.x` / `-x.x`. Each side is rounded to tenths first so the delta
/// agrees with the printed cells.
pub fn format_delta(a: &CellStat, baseline: &CellStat) -> String {
    let tenths = |c: &CellStat| -> Option<i128> {
        (c.total > 0).then(|| ((u128::from(c.hits) * 2000 + u128::from(c.total)) / (2 * u128::from(c.total))) as i128)
    };
    match (tenths(a), tenths(baseline)) {
        (Some(x), Some(y)) => {
            let d = x - y;
            let sign = if d < 0 { '-' } else { '+' };
            format!("{sign}{}.{}", d.abs() / 10, d.abs() % 10)
        }
        _ => "--".into(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FailureEntry {
    pub kind: FailureKind,
    pub count: u64,
    pub task_ids: Vec<String>,
}

/// Accuracy aggregate for one benchmark run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvalReport {
    pub benchmark: Benchmark,
    pub model_label: String,
    /// Digest of the task ids and predictions, in task order.
    pub run_digest: String,
    /// Table cells in column order, excluding the overall average.
    pub cells: Vec<CellStat>,
    /// Micro-average over all tasks.
    pub overall: CellStat,
    pub failures: Vec<FailureEntry>,
}

impl EvalReport {
    pub fn with_model_label(mut self, label: impl Into<String>) -> Self {
        self.model_label = label.into();
        self
    }

    pub fn cell(&self, key: CellKey) -> Option<&CellStat> {
        self.cells.iter().find(|c| c.key == key)
    }

    /// Cells followed by the overall average, as displayed.
    pub fn columns(&self) -> impl Iterator<Item = &CellStat> {
        self.cells.iter().chain(std::iter::once(&self.overall))
    }

    pub fn failure_count(&self, kind: FailureKind) -> u64 {
        self.failures.iter().find(|f| f.kind == kind).map_or(0, |f| f.count)
    }
}

/// Aggregate predictions into per-cell and overall accuracy. Each task must
/// have exactly one prediction; prediction order does not matter.
pub fn aggregate(predictions: &[Prediction], tasks: &[BenchmarkTask]) -> Result<EvalReport, EvalError> {
    let first = tasks.first().ok_or(EvalError::EmptyBenchmark)?;
    let benchmark = first.benchmark;
    if tasks.iter().any(|t| t.benchmark != benchmark) {
        return Err(EvalError::MixedBenchmarks);
    }
    let mut by_id: HashMap<&str, &Prediction> = HashMap::with_capacity(predictions.len());
    for p in predictions {
        if by_id.insert(p.task_id.as_str(), p).is_some() {
            return Err(EvalError::UnexpectedPrediction(p.task_id.clone()));
        }
    }
    let mut ordered = Vec::with_capacity(tasks.len());
    for t in tasks {
        let p = by_id
            .remove(t.id())
            .ok_or_else(|| EvalError::MissingPrediction(t.id().to_string()))?;
        ordered.push((t, p));
    }
    if let Some(extra) = by_id.keys().min() {
        return Err(EvalError::UnexpectedPrediction(extra.to_string()));
    }

    let keys: Vec<CellKey> = if benchmark == Benchmark::ScreenspotPro {
        ProGroup::ALL
            .iter()
            .flat_map(|&g| [Some(ElementType::Text), Some(ElementType::Icon), None].map(|t| CellKey::pro(Some(g), t)))
            .chain(TYPES.map(|t| CellKey::pro(None, Some(t))))
            .collect()
    } else {
        PLATFORM_COLUMNS.iter().map(|&p| CellKey::platform(p)).collect()
    };
    let count = |key: &CellKey| {
        ordered
            .iter()
            .filter(|(t, _)| key.matches(t))
            .fold((0u64, 0u64), |(h, n), (_, p)| (h + u64::from(p.hit), n + 1))
    };
    let cells = keys
        .iter()
        .map(|k| {
            let (h, n) = count(k);
            CellStat::new(*k, h, n)
        })
        .collect();
    let hits = ordered.iter().filter(|(_, p)| p.hit).count() as u64;
    let overall = CellStat::new(CellKey::default(), hits, tasks.len() as u64);

    let mut failures: BTreeMap<FailureKind, Vec<String>> = BTreeMap::new();
    for (t, p) in &ordered {
        if let Some(kind) = p.failure_kind {
            failures.entry(kind).or_default().push(t.id().to_string());
        }
    }
    let failures = failures
        .into_iter()
        .map(|(kind, task_ids)| FailureEntry {
            kind,
            count: task_ids.len() as u64,
            task_ids,
        })
        .collect();

    let in_order: Vec<&Prediction> = ordered.iter().map(|(_, p)| *p).collect();
    Ok(EvalReport {
        benchmark,
        model_label: "model".into(),
        run_digest: digest_json(&in_order),
        cells,
        overall,
        failures,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    /// Aligned plain-text table.
    #[default]
    Text,
    Csv,
    /// Pretty-printed JSON record.
    Json,
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "text" | "txt" => Ok(ReportFormat::Text),
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(format!("unknown report format `{other}`")),
        }
    }
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Text => "txt",
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
        }
    }
}

/// A labelled grid: optional column groups over column labels, and rows of
/// string cells. Shared by evaluation and ablation reports.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Table {
    pub groups: Vec<String>,
    pub columns: Vec<String>,
    pub rows: Vec<(String, Vec<String>)>,
}

impl Table {
    fn has_groups(&self) -> bool {
        self.groups.iter().any(|g| !g.is_empty())
    }

    pub fn to_text(&self) -> String {
        let label_w = self.rows.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
        let mut widths: Vec<usize> = self.columns.iter().map(String::len).collect();
        for (_, cells) in &self.rows {
            for (w, c) in widths.iter_mut().zip(cells) {
                *w = (*w).max(c.len());
            }
        }
        // Widen the last column of each group so its label fits the span.
        let mut start = 0;
        while start < self.groups.len() {
            let end = (start..self.groups.len())
                .find(|&i| self.groups[i] != self.groups[start])
                .unwrap_or(self.groups.len());
            let span: usize = widths[start..end].iter().sum::<usize>() + 2 * (end - start - 1);
            if self.groups[start].len() > span {
                widths[end - 1] += self.groups[start].len() - span;
            }
            start = end;
        }
        let mut out = String::new();
        if self.has_groups() {
            let mut line = " ".repeat(label_w);
            let mut i = 0;
            while i < self.groups.len() {
                let end = (i..self.groups.len())
                    .find(|&j| self.groups[j] != self.groups[i])
                    .unwrap_or(self.groups.len());
                let span: usize = widths[i..end].iter().sum::<usize>() + 2 * (end - i - 1);
                let _ = write!(line, "  {:<span$}", self.groups[i]);
                i = end;
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        let mut header = " ".repeat(label_w);
        for (c, w) in self.columns.iter().zip(&widths) {
            let _ = write!(header, "  {c:>w$}");
        }
        out.push_str(header.trim_end());
        out.push('\n');
        for (label, cells) in &self.rows {
            let mut line = format!("{label:<label_w$}");
            for (c, w) in cells.iter().zip(&widths) {
                let _ = write!(line, "  {c:>w$}");
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }

    pub fn to_csv(&self, corner: &str) -> String {
        let mut out = String::from(corner);
        for (i, c) in self.columns.iter().enumerate() {
            let g = self.groups.get(i).map(String::as_str).unwrap_or("");
            out.push(',');
            out.push_str(&csv_field(&if g.is_empty() { c.clone() } else { format!("{g} {c}") }));
        }
        out.push('\n');
        for (label, cells) in &self.rows {
            out.push_str(&csv_field(label));
            for c in cells {
                out.push(',');
                out.push_str(&csv_field(c));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn report_table(report: &EvalReport) -> Table {
    let mut table = Table::default();
    let mut acc = Vec::new();
    let mut hits = Vec::new();
    let mut tasks = Vec::new();
    for c in report.columns() {
        let (g, l) = if c.key == CellKey::default() {
            let g = if report.benchmark == Benchmark::ScreenspotPro {
                "Avg."
            } else {
                ""
            };
            (g.to_string(), "Avg.".to_string())
        } else {
            c.key.column()
        };
        table.groups.push(g);
        table.columns.push(l);
        acc.push(c.percent.clone());
        hits.push(c.hits.to_string());
        tasks.push(c.total.to_string());
    }
    // The overall Pro average sits under the same "Avg." group as the
    // overall text and icon columns.
    table.rows = vec![
        ("Accuracy (%)".into(), acc),
        ("Hits".into(), hits),
        ("Tasks".into(), tasks),
    ];
    table
}

fn failure_lines(report: &EvalReport) -> String {
    let mut out = String::new();
    if report.failures.is_empty() {
        out.push_str("Failures: none\n");
    } else {
        out.push_str("Failures:\n");
        for f in &report.failures {
            let _ = writeln!(out, "  {}: {} ({})", f.kind.as_str(), f.count, f.task_ids.join(", "));
        }
    }
    out
}

/// Render a report as an aligned table, CSV, or JSON record.
pub fn render_report(report: &EvalReport, format: ReportFormat) -> String {
    let table = report_table(report);
    match format {
        ReportFormat::Text => {
            let mut out = format!(
                "{} | model: {} | run: {}\n\n",
                report.benchmark.title(),
                report.model_label,
                report.run_digest
            );
            out.push_str(&table.to_text());
            out.push('\n');
            out.push_str(&failure_lines(report));
            out
        }
        ReportFormat::Csv => {
            let mut out = table.to_csv(report.benchmark.as_str());
            for kind in FailureKind::ALL {
                let _ = writeln!(out, "failures {},{}", kind.as_str(), report.failure_count(kind));
            }
            out
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::tests::example;
    use crate::eval::tasks_from_examples;

    fn platform_tasks(per: &[(Platform, usize)]) -> Vec<BenchmarkTask> {
        let mut exs = Vec::new();
        for &(p, n) in per {
            for i in 0..n {
                let mut e = example(&format!("{}-{i}", p.as_str()), 100, 100, [10, 10, 20, 20]);
                e.platform = p;
                exs.push(e);
            }
        }
        tasks_from_examples(&exs, Benchmark::Screenspot)
    }

    fn preds(tasks: &[BenchmarkTask], hit: impl Fn(usize, &BenchmarkTask) -> bool) -> Vec<Prediction> {
        tasks
            .iter()
            .enumerate()
            .map(|(i, t)| {
                let h = hit(i, t);
                Prediction {
                    task_id: t.id().to_string(),
                    raw_text: if h { "(15, 15)".into() } else { "(50, 50)".into() },
                    parsed_point: Some(crate::ClickPoint::new(if h { 15.0 } else { 50.0 }, 15.0)),
                    hit: h,
                    failure_kind: None,
                    error: None,
                }
            })
            .collect()
    }

    #[test]
    fn percent_rounding() {
        assert_eq!(format_percent(3, 4), "75.0");
        assert_eq!(format_percent(1, 3), "33.3");
        assert_eq!(format_percent(2, 3), "66.7");
        assert_eq!(format_percent(1, 8), "12.5");
        assert_eq!(format_percent(1, 16), "6.3");
        assert_eq!(format_percent(0, 5), "0.0");
        assert_eq!(format_percent(5, 5), "100.0");
        assert_eq!(format_percent(0, 0), "--");
    }

    #[test]
    fn per_platform_cells_and_micro_average() {
        let tasks = platform_tasks(&[(Platform::Mobile, 4), (Platform::Desktop, 4), (Platform::Web, 4)]);
        // mobile 3/4, desktop 2/4, web 4/4
        let p = preds(&tasks, |i, _| !matches!(i, 3 | 6 | 7));
        let r = aggregate(&p, &tasks).unwrap();
        let pct: Vec<_> = r.columns().map(|c| c.percent.as_str()).collect();
        assert_eq!(pct, ["75.0", "50.0", "100.0", "75.0"]);
        assert_eq!(r.overall.accuracy(), Some(Accuracy::new(9, 12)));
    }

    #[test]
    fn all_miss_is_zero() {
        let tasks = platform_tasks(&[(Platform::Mobile, 2), (Platform::Desktop, 2), (Platform::Web, 2)]);
        let r = aggregate(&preds(&tasks, |_, _| false), &tasks).unwrap();
        assert!(r.columns().all(|c| c.percent == "0.0"));
    }

    #[test]
    fn unequal_cells_micro_is_weighted_mean() {
        let tasks = platform_tasks(&[(Platform::Mobile, 5), (Platform::Desktop, 2), (Platform::Web, 9)]);
        let p = preds(&tasks, |i, _| i % 3 == 0);
        let r = aggregate(&p, &tasks).unwrap();
        let weighted = r
            .cells
            .iter()
            .map(|c| c.accuracy().unwrap() * Accuracy::from_integer(c.total))
            .fold(Accuracy::from_integer(0), |a, b| a + b)
            / Accuracy::from_integer(16);
        assert_eq!(r.overall.accuracy().unwrap(), weighted);
    }

    #[test]
    fn id_mismatch_is_error() {
        let tasks = platform_tasks(&[(Platform::Web, 3)]);
        let mut p = preds(&tasks, |_, _| true);
        p.pop();
        assert!(matches!(aggregate(&p, &tasks), Err(EvalError::MissingPrediction(_))));
        let mut p = preds(&tasks, |_, _| true);
        p[0].task_id = "stranger".into();
        assert!(aggregate(&p, &tasks).is_err());
        let mut p = preds(&tasks, |_, _| true);
        p.push(p[0].clone());
        assert!(matches!(aggregate(&p, &tasks), Err(EvalError::UnexpectedPrediction(_))));
    }

    #[test]
    fn permutation_invariant() {
        let tasks = platform_tasks(&[(Platform::Mobile, 3), (Platform::Web, 3)]);
        let p = preds(&tasks, |i, _| i % 2 == 0);
        let mut rev = p.clone();
        rev.reverse();
        assert_eq!(aggregate(&p, &tasks).unwrap(), aggregate(&rev, &tasks).unwrap());
    }

    #[test]
    fn delta_signs() {
        let a = CellStat::new(CellKey::default(), 3, 4);
        let b = CellStat::new(CellKey::default(), 1, 2);
        assert_eq!(format_delta(&a, &b), "+25.0");
        assert_eq!(format_delta(&b, &a), "-25.0");
        assert_eq!(format_delta(&a, &a), "+0.0");
    }

    #[test]
    fn csv_and_json_render() {
        let tasks = platform_tasks(&[(Platform::Mobile, 1), (Platform::Desktop, 1), (Platform::Web, 2)]);
        let r = aggregate(&preds(&tasks, |i, _| i != 0), &tasks).unwrap();
        let csv = render_report(&r, ReportFormat::Csv);
        assert!(
            csv.starts_with("screenspot,Mobile,Desktop,Web,Avg.\nAccuracy (%),0.0,100.0,100.0,75.0\n"),
            "{csv}"
        );
        let back: EvalReport = serde_json::from_str(&render_report(&r, ReportFormat::Json)).unwrap();
        assert_eq!(back, r);
    }
}
