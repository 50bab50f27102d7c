//! Learning analytics over stored records: answer distributions,
//! expected-versus-actual grade comparisons, Spearman rank correlations and
//! the report document the dashboard renders.
//!
//! Percentages are rounded half-up to one decimal using integer arithmetic,
//! so `2/3` is exactly `66.7` and `1/8` is exactly `12.5`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::course::CourseData;
use crate::model::{grade_band_of, ActivityKind, DifficultyRating, GradeBand, ModelError};
use crate::scheduler::expand_activities;
use crate::store::{AttendanceRow, DataStore, RecordType, StoreError, SurveyAnswerRow};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("no responses to summarize")]
    EmptyResponses,
    #[error(transparent)]
    OutOfRange(#[from] ModelError),
    #[error("series lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("at least two paired samples are needed, got {0}")]
    TooFewSamples(usize),
    #[error("a series is constant, so the rank correlation is undefined")]
    Degenerate,
    #[error("series contains a non-finite value")]
    NonFinite,
    #[error("no cohort size up to {0} reproduces every reported percentage")]
    NoConsistentN(u32),
    #[error("percentage {0} outside [0, 100]")]
    BadPercentage(f64),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("writing report to {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl AnalyticsError {
    pub fn code(&self) -> &'static str {
        match self {
            AnalyticsError::EmptyResponses => "EMPTY_RESPONSES",
            AnalyticsError::OutOfRange(_) => "OUT_OF_RANGE",
            AnalyticsError::LengthMismatch(..) => "LENGTH_MISMATCH",
            AnalyticsError::TooFewSamples(_) => "TOO_FEW_SAMPLES",
            AnalyticsError::Degenerate => "DEGENERATE",
            AnalyticsError::NonFinite => "NON_FINITE",
            AnalyticsError::NoConsistentN(_) => "NO_CONSISTENT_N",
            AnalyticsError::BadPercentage(_) => "OUT_OF_RANGE",
            AnalyticsError::Store(e) => e.code(),
            AnalyticsError::Io { .. } => "IO_FAILURE",
        }
    }
}

/// `100 * count / total` in tenths of a percent, rounded half-up.
pub fn percent_tenths(count: u64, total: u64) -> u64 {
    if total == 0 {
        return 0;
    }
    (2000 * count + total) / (2 * total)
}

pub fn format_tenths(tenths: u64) -> String {
    format!("{}.{}", tenths / 10, tenths % 10)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionEntry {
    pub option: String,
    pub count: u64,
    pub percentage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub entries: Vec<DistributionEntry>,
    pub total: u64,
}

impl Distribution {
    /// Build from ordered `(option, count)` pairs.
    pub fn from_counts(counts: impl IntoIterator<Item = (String, u64)>) -> Self {
        let counts: Vec<(String, u64)> = counts.into_iter().collect();
        let total = counts.iter().map(|(_, c)| c).sum();
        let entries = counts
            .into_iter()
            .map(|(option, count)| DistributionEntry {
                option,
                count,
                percentage: percent_tenths(count, total) as f64 / 10.0,
            })
            .collect();
        Self { entries, total }
    }

    pub fn count_of(&self, option: &str) -> u64 {
        self.entries.iter().find(|e| e.option == option).map_or(0, |e| e.count)
    }

    pub fn percentage_of(&self, option: &str) -> f64 {
        self.entries.iter().find(|e| e.option == option).map_or(0.0, |e| e.percentage)
    }

    /// Mean difficulty ordinal, for distributions over the difficulty scale.
    pub fn mean_ordinal(&self) -> Option<f64> {
        if self.total == 0 {
            return None;
        }
        let mut sum = 0u64;
        for e in &self.entries {
            let rating: DifficultyRating = e.option.parse().ok()?;
            sum += u64::from(rating.ordinal()) * e.count;
        }
        Some(sum as f64 / self.total as f64)
    }
}

fn difficulty_counts(responses: &[DifficultyRating]) -> Vec<(String, u64)> {
    DifficultyRating::ALL
        .iter()
        .map(|d| (d.code().to_string(), responses.iter().filter(|r| *r == d).count() as u64))
        .collect()
}

/// Counts and percentages per difficulty level, in scale order.
pub fn difficulty_distribution(responses: &[DifficultyRating]) -> Result<Distribution, AnalyticsError> {
    if responses.is_empty() {
        return Err(AnalyticsError::EmptyResponses);
    }
    Ok(Distribution::from_counts(difficulty_counts(responses)))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedRow {
    pub band: GradeBand,
    pub expected: u64,
    pub actual: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairedComparison {
    pub rows: Vec<PairedRow>,
    pub expected_total: u64,
    pub actual_total: u64,
}

impl PairedComparison {
    pub fn row(&self, band: GradeBand) -> &PairedRow {
        &self.rows[band.index()]
    }
}

/// Expected grade bands next to actual grades bucketed into the same bands.
pub fn expected_vs_actual(expected: &[GradeBand], actual: &[f64]) -> Result<PairedComparison, AnalyticsError> {
    let mut actual_counts = [0u64; 5];
    for &grade in actual {
        actual_counts[grade_band_of(grade)?.index()] += 1;
    }
    let rows = GradeBand::ALL
        .iter()
        .map(|&band| PairedRow {
            band,
            expected: expected.iter().filter(|b| **b == band).count() as u64,
            actual: actual_counts[band.index()],
        })
        .collect();
    Ok(PairedComparison {
        rows,
        expected_total: expected.len() as u64,
        actual_total: actual.len() as u64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub rho: f64,
    pub n: usize,
    pub question_pair: String,
}

impl CorrelationReport {
    pub fn labelled(mut self, question_pair: impl Into<String>) -> Self {
        self.question_pair = question_pair.into();
        self
    }
}

/// Average ranks, doubled so that ties stay integral: a value tied across
/// sorted positions `i..=j` (0-based) gets `i + j + 2`.
fn doubled_ranks(values: &[f64]) -> Vec<i64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0i64; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        for &idx in &order[i..=j] {
            ranks[idx] = (i + j + 2) as i64;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman's rho with average-rank tie handling.
pub fn rank_correlation(x: &[f64], y: &[f64]) -> Result<CorrelationReport, AnalyticsError> {
    if x.len() != y.len() {
        return Err(AnalyticsError::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(AnalyticsError::TooFewSamples(x.len()));
    }
    if x.iter().chain(y).any(|v| !v.is_finite()) {
        return Err(AnalyticsError::NonFinite);
    }
    let n = x.len();
    let mean = (n as i64) + 1;
    let rx = doubled_ranks(x);
    let ry = doubled_ranks(y);
    let (mut sxx, mut syy, mut sxy) = (0i128, 0i128, 0i128);
    for (a, b) in rx.iter().zip(&ry) {
        let dx = i128::from(a - mean);
        let dy = i128::from(b - mean);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    if sxx == 0 || syy == 0 {
        return Err(AnalyticsError::Degenerate);
    }
    let rho = if sxy * sxy == sxx * syy {
        sxy.signum() as f64
    } else {
        (sxy as f64 / ((sxx as f64) * (syy as f64)).sqrt()).clamp(-1.0, 1.0)
    };
    Ok(CorrelationReport {
        rho,
        n,
        question_pair: String::new(),
    })
}

/// Correlate weekly mean lecture difficulty with weekly mean quiz difficulty.
/// Only weeks present in both series with at least one response count.
pub fn lecture_quiz_alignment(
    lecture: &[(u32, Distribution)],
    quiz: &[(u32, Distribution)],
) -> Result<CorrelationReport, AnalyticsError> {
    let quiz_by_week: BTreeMap<u32, &Distribution> = quiz.iter().map(|(w, d)| (*w, d)).collect();
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    let mut weeks: Vec<&(u32, Distribution)> = lecture.iter().collect();
    weeks.sort_by_key(|(w, _)| *w);
    for (week, lecture_dist) in weeks {
        let Some(quiz_dist) = quiz_by_week.get(week) else { continue };
        if let (Some(l), Some(q)) = (lecture_dist.mean_ordinal(), quiz_dist.mean_ordinal()) {
            xs.push(l);
            ys.push(q);
        }
    }
    Ok(rank_correlation(&xs, &ys)?.labelled("weekly mean lecture difficulty vs weekly mean quiz difficulty"))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CohortReconstruction {
    pub n: u32,
    /// For each reported percentage, the count `k` with `round1(100 k / n)` equal to it.
    pub witnesses: Vec<u32>,
}

/// Smallest cohort size `n <= max_n` for which every reported one-decimal
/// percentage is `round_half_up(100 k / n)` for some integer `k <= n`.
pub fn reconstruct_min_cohort(reported: &[f64], max_n: u32) -> Result<CohortReconstruction, AnalyticsError> {
    let mut targets = Vec::with_capacity(reported.len());
    for &p in reported {
        if !(0.0..=100.0).contains(&p) {
            return Err(AnalyticsError::BadPercentage(p));
        }
        targets.push((p * 10.0).round() as u64);
    }
    'sizes: for n in 1..=max_n {
        let total = u64::from(n);
        let mut witnesses = Vec::with_capacity(targets.len());
        for &target in &targets {
            // percent_tenths is monotone in k, so start near the estimate.
            let guess = (target * total) / 1000;
            let found = (guess.saturating_sub(1)..=(guess + 1).min(total))
                .find(|&k| percent_tenths(k, total) == target);
            match found {
                Some(k) => witnesses.push(k as u32),
                None => continue 'sizes,
            }
        }
        return Ok(CohortReconstruction { n, witnesses });
    }
    Err(AnalyticsError::NoConsistentN(max_n))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistributionFigure {
    pub figure_id: String,
    pub activity_kind: Option<ActivityKind>,
    pub activity_id: Option<String>,
    pub week: Option<u32>,
    pub question_id: String,
    pub distribution: Distribution,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedFigure {
    pub figure_id: String,
    pub activity_id: String,
    pub question_id: Option<String>,
    pub comparison: PairedComparison,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationEntry {
    pub id: String,
    pub question_pair: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub result: Option<CorrelationReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl CorrelationEntry {
    fn from_result(id: String, question_pair: String, result: Result<CorrelationReport, AnalyticsError>) -> Self {
        match result {
            Ok(r) => Self {
                id,
                result: Some(r.labelled(question_pair.clone())),
                question_pair,
                error: None,
            },
            Err(e) => Self {
                id,
                question_pair,
                result: None,
                error: Some(e.code().to_string()),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttendanceSummary {
    pub activity_id: String,
    pub sessions: u64,
    pub records: u64,
    pub distinct_students: u64,
}

/// Everything the dashboard charts, in one deterministic document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub course_id: Option<String>,
    pub distributions: Vec<DistributionFigure>,
    pub paired_comparisons: Vec<PairedFigure>,
    pub correlations: Vec<CorrelationEntry>,
    pub attendance: Vec<AttendanceSummary>,
    pub caveats: Vec<String>,
}

impl ReportDocument {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn distribution(&self, figure_id: &str) -> Option<&DistributionFigure> {
        self.distributions.iter().find(|d| d.figure_id == figure_id)
    }
}

fn option_order(codes: &BTreeSet<String>) -> Vec<String> {
    if codes.iter().all(|c| c.parse::<DifficultyRating>().is_ok()) {
        DifficultyRating::ALL.iter().map(|d| d.code().to_string()).collect()
    } else if codes.iter().all(|c| c.parse::<GradeBand>().is_ok()) {
        GradeBand::ALL.iter().map(|b| b.code().to_string()).collect()
    } else {
        codes.iter().cloned().collect()
    }
}

fn counted(order: &[String], answers: &[String]) -> Distribution {
    Distribution::from_counts(
        order
            .iter()
            .map(|o| (o.clone(), answers.iter().filter(|a| *a == o).count() as u64)),
    )
}

const RESPONSE_BIAS_CAVEAT: &str = "Students who rated an activity as very hard may skip the expected-grade \
question; expected-grade counts can under-represent low bands. This bias is not corrected for.";
const DESCRIPTIVE_CAVEAT: &str =
    "Rank correlations are descriptive; no significance testing is performed.";

/// Build the report from everything under the data root.
pub fn export_report(store: &DataStore, course: Option<&CourseData>) -> Result<ReportDocument, AnalyticsError> {
    let weeks: BTreeMap<String, u32> = course
        .map(|c| expand_activities(c).into_iter().map(|a| (a.id, a.week)).collect())
        .unwrap_or_default();

    // answers[(kind, activity)][question] = [(student, code)]
    let mut answers: BTreeMap<(ActivityKind, String), BTreeMap<String, Vec<(String, String)>>> = BTreeMap::new();
    let mut attendance = Vec::new();
    for category in store.categories()? {
        let rows = store.load_records(&category)?;
        match category.record_type {
            RecordType::SurveyAnswer => {
                let per_question = answers.entry((category.kind, category.activity_id.clone())).or_default();
                for row in &rows {
                    let r = SurveyAnswerRow::from_row(row)?;
                    per_question.entry(r.question_id).or_default().push((r.student_id, r.answer_code));
                }
            }
            RecordType::Attendance => {
                let parsed: Vec<AttendanceRow> = rows.iter().map(AttendanceRow::from_row).collect::<Result<_, _>>()?;
                attendance.push(AttendanceSummary {
                    activity_id: category.activity_id.clone(),
                    sessions: parsed.iter().map(|r| &r.session_id).collect::<BTreeSet<_>>().len() as u64,
                    records: parsed.len() as u64,
                    distinct_students: parsed.iter().map(|r| &r.student_id).collect::<BTreeSet<_>>().len() as u64,
                });
            }
        }
    }
    let grades = store.load_grades()?;
    let mut grades_by_activity: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for g in &grades {
        grades_by_activity
            .entry(g.activity_id.clone())
            .or_default()
            .insert(g.student_id.clone(), g.grade);
    }

    let mut distributions = Vec::new();
    let mut pooled: BTreeMap<ActivityKind, Vec<String>> = BTreeMap::new();
    let mut weekly: BTreeMap<ActivityKind, BTreeMap<u32, Vec<String>>> = BTreeMap::new();
    let mut paired = Vec::new();
    let mut correlations = Vec::new();

    for ((kind, activity_id), questions) in &answers {
        for (question_id, rows) in questions {
            let codes: Vec<String> = rows.iter().map(|(_, c)| c.clone()).collect();
            let order = option_order(&codes.iter().cloned().collect());
            distributions.push(DistributionFigure {
                figure_id: format!("{}-{}-{}", kind.dir_name(), activity_id, question_id),
                activity_kind: Some(*kind),
                activity_id: Some(activity_id.clone()),
                week: weeks.get(activity_id).copied(),
                question_id: question_id.clone(),
                distribution: counted(&order, &codes),
            });
            let is_difficulty = codes.iter().all(|c| c.parse::<DifficultyRating>().is_ok());
            if is_difficulty {
                pooled.entry(*kind).or_default().extend(codes.iter().cloned());
                if let Some(week) = weeks.get(activity_id) {
                    weekly
                        .entry(*kind)
                        .or_default()
                        .entry(*week)
                        .or_default()
                        .extend(codes.iter().cloned());
                }
            }
            let graded = grades_by_activity.get(activity_id);
            if is_difficulty {
                if let Some(graded) = graded {
                    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                        .iter()
                        .filter_map(|(student, code)| {
                            let grade = graded.get(student)?;
                            let rating: DifficultyRating = code.parse().ok()?;
                            Some((f64::from(rating.ordinal()), *grade))
                        })
                        .unzip();
                    correlations.push(CorrelationEntry::from_result(
                        format!("difficulty-vs-grade-{activity_id}"),
                        format!("perceived difficulty of {activity_id} ({question_id}) vs actual grade"),
                        rank_correlation(&xs, &ys),
                    ));
                }
            } else if codes.iter().all(|c| c.parse::<GradeBand>().is_ok()) {
                let expected: Vec<GradeBand> = codes.iter().filter_map(|c| c.parse().ok()).collect();
                let actual: Vec<f64> = graded.map(|g| g.values().copied().collect()).unwrap_or_default();
                paired.push(PairedFigure {
                    figure_id: format!("grades-{activity_id}"),
                    activity_id: activity_id.clone(),
                    question_id: Some(question_id.clone()),
                    comparison: expected_vs_actual(&expected, &actual)?,
                });
                if let Some(graded) = graded {
                    let (xs, ys): (Vec<f64>, Vec<f64>) = rows
                        .iter()
                        .filter_map(|(student, code)| {
                            let grade = graded.get(student)?;
                            let band: GradeBand = code.parse().ok()?;
                            Some((band.midpoint(), *grade))
                        })
                        .unzip();
                    correlations.push(CorrelationEntry::from_result(
                        format!("expected-vs-grade-{activity_id}"),
                        format!("expected grade band of {activity_id} ({question_id}) vs actual grade"),
                        rank_correlation(&xs, &ys),
                    ));
                }
            }
        }
    }

    let surveyed_grade_activities: BTreeSet<&str> = paired.iter().map(|p| p.activity_id.as_str()).collect();
    let mut grade_only = Vec::new();
    for (activity_id, graded) in &grades_by_activity {
        if !surveyed_grade_activities.contains(activity_id.as_str()) {
            let actual: Vec<f64> = graded.values().copied().collect();
            grade_only.push(PairedFigure {
                figure_id: format!("grades-{activity_id}"),
                activity_id: activity_id.clone(),
                question_id: None,
                comparison: expected_vs_actual(&[], &actual)?,
            });
        }
    }
    paired.extend(grade_only);
    paired.sort_by(|a, b| a.figure_id.cmp(&b.figure_id));

    for (kind, codes) in &pooled {
        let order: Vec<String> = DifficultyRating::ALL.iter().map(|d| d.code().to_string()).collect();
        distributions.push(DistributionFigure {
            figure_id: format!("all-{}-difficulty", kind.dir_name()),
            activity_kind: Some(*kind),
            activity_id: None,
            week: None,
            question_id: crate::survey::DIFFICULTY_QUESTION.to_string(),
            distribution: counted(&order, codes),
        });
    }

    let mut caveats = vec![DESCRIPTIVE_CAVEAT.to_string(), RESPONSE_BIAS_CAVEAT.to_string()];
    if course.is_some() {
        let order: Vec<String> = DifficultyRating::ALL.iter().map(|d| d.code().to_string()).collect();
        let series = |kind: ActivityKind| -> Vec<(u32, Distribution)> {
            weekly
                .get(&kind)
                .map(|m| m.iter().map(|(w, codes)| (*w, counted(&order, codes))).collect())
                .unwrap_or_default()
        };
        let lecture = series(ActivityKind::Lecture);
        let quiz = series(ActivityKind::Quiz);
        if !lecture.is_empty() || !quiz.is_empty() {
            correlations.push(CorrelationEntry::from_result(
                "lecture-vs-quiz-weekly".into(),
                "weekly mean lecture difficulty vs weekly mean quiz difficulty".into(),
                lecture_quiz_alignment(&lecture, &quiz),
            ));
        }
    } else {
        caveats.push("No course data found; weekly lecture/quiz alignment was not computed.".into());
    }
    correlations.sort_by(|a, b| a.id.cmp(&b.id));

    Ok(ReportDocument {
        course_id: course.map(|c| c.course_id.clone()),
        distributions,
        paired_comparisons: paired,
        correlations,
        attendance,
        caveats,
    })
}

fn chart_line(figure: &str, option: &str, count: u64, percentage: f64) -> String {
    format!("{figure},{option},{count},{percentage:.1}\n")
}

/// Write `report.json` and one chart-data CSV per figure under `out_dir`.
pub fn write_report(report: &ReportDocument, out_dir: &Path) -> Result<Vec<PathBuf>, AnalyticsError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| AnalyticsError::Io { path, source }
    };
    let charts = out_dir.join("charts");
    fs::create_dir_all(&charts).map_err(io_err(&charts))?;
    let mut written = Vec::new();

    let json_path = out_dir.join("report.json");
    fs::write(&json_path, report.to_json()).map_err(io_err(&json_path))?;
    written.push(json_path);

    let header = "figure_id,option,count,percentage\n";
    for fig in &report.distributions {
        let mut text = String::from(header);
        for e in &fig.distribution.entries {
            text.push_str(&chart_line(&fig.figure_id, &e.option, e.count, e.percentage));
        }
        let path = charts.join(format!("{}.csv", fig.figure_id));
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    for fig in &report.paired_comparisons {
        let mut text = String::from(header);
        let c = &fig.comparison;
        for (series, total, pick) in [
            ("expected", c.expected_total, (|r: &PairedRow| r.expected) as fn(&PairedRow) -> u64),
            ("actual", c.actual_total, |r: &PairedRow| r.actual),
        ] {
            for row in &c.rows {
                let count = pick(row);
                let pct = percent_tenths(count, total) as f64 / 10.0;
                text.push_str(&chart_line(&format!("{}-{series}", fig.figure_id), row.band.code(), count, pct));
            }
        }
        let path = charts.join(format!("{}.csv", fig.figure_id));
        fs::write(&path, text).map_err(io_err(&path))?;
        written.push(path);
    }
    Ok(written)
}
