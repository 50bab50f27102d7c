//! Independent recount of a data directory. Reads the raw CSV files with the
//! `csv` crate (not through `DataStore`), recomputes every figure of the
//! report with plain floating point, and compares.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use coursebot_core::analytics::ReportDocument;

/// Tolerance on Spearman's rho between the report and the naive recount.
pub const RHO_TOL: f64 = 1e-9;
/// Percentages are compared after the same half-up rounding to one decimal.
pub const PCT_TOL: f64 = 1e-9;

const KINDS: [&str; 5] = ["lecture", "quiz", "exercise", "exam", "tutorial_session"];
const DIFFICULTY: [&str; 5] = ["VERY_EASY", "EASY", "MEDIUM", "HARD", "VERY_HARD"];
const BANDS: [&str; 5] = ["B0", "B20", "B40", "B60", "B80"];

#[derive(Debug, Default, Clone, Copy)]
pub struct OracleStats {
    pub distributions: usize,
    pub paired: usize,
    pub correlations: usize,
    pub attendance: usize,
    pub answers: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Rho {
    Value(f64, usize),
    Error(&'static str),
}

fn read_csv(path: &Path) -> Vec<BTreeMap<String, String>> {
    if !path.exists() {
        return Vec::new();
    }
    let mut reader = csv::Reader::from_path(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    let headers = reader.headers().unwrap().clone();
    reader
        .records()
        .map(|r| {
            let r = r.unwrap();
            headers.iter().map(String::from).zip(r.iter().map(String::from)).collect()
        })
        .collect()
}

fn percent(count: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1000.0 * count as f64 / total as f64 + 0.5).floor() / 10.0
}

fn band(grade: f64) -> usize {
    ((grade / 20.0).floor() as usize).min(4)
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut ranks = vec![0.0; v.len()];
    for (i, x) in v.iter().enumerate() {
        let below = v.iter().filter(|y| *y < x).count() as f64;
        let equal = v.iter().filter(|y| *y == x).count() as f64;
        ranks[i] = below + (equal + 1.0) / 2.0;
    }
    ranks
}

/// Pearson correlation of average ranks, computed the long way.
pub fn spearman(x: &[f64], y: &[f64]) -> Rho {
    if x.len() < 2 {
        return Rho::Error("TOO_FEW_SAMPLES");
    }
    let (rx, ry) = (average_ranks(x), average_ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let sxx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let syy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    let sxy: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    if sxx == 0.0 || syy == 0.0 {
        return Rho::Error("DEGENERATE");
    }
    Rho::Value(sxy / (sxx * syy).sqrt(), x.len())
}

struct Expected {
    /// figure id -> [(option, count)]
    distributions: BTreeMap<String, Vec<(String, usize)>>,
    /// figure id -> per band (expected, actual)
    paired: BTreeMap<String, [(usize, usize); 5]>,
    correlations: BTreeMap<String, Rho>,
    /// activity -> (sessions, records, distinct students)
    attendance: BTreeMap<String, (usize, usize, usize)>,
    answers: usize,
}

fn week_of(activity: &str) -> Option<u32> {
    activity.strip_prefix('w')?.get(..2)?.parse().ok()
}

fn ordinal(code: &str) -> Option<f64> {
    DIFFICULTY.iter().position(|d| *d == code).map(|i| i as f64 + 1.0)
}

fn midpoint(code: &str) -> Option<f64> {
    BANDS.iter().position(|b| *b == code).map(|i| 20.0 * i as f64 + 10.0)
}

fn distribution(codes: &[&str]) -> Vec<(String, usize)> {
    let order: Vec<String> = if codes.iter().all(|c| ordinal(c).is_some()) {
        DIFFICULTY.iter().map(|s| s.to_string()).collect()
    } else if codes.iter().all(|c| midpoint(c).is_some()) {
        BANDS.iter().map(|s| s.to_string()).collect()
    } else {
        codes.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>().into_iter().collect()
    };
    order
        .into_iter()
        .map(|o| {
            let n = codes.iter().filter(|c| **c == o).count();
            (o, n)
        })
        .collect()
}

fn recount(dir: &Path) -> Expected {
    let mut grades: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for row in read_csv(&dir.join("grades.csv")) {
        grades
            .entry(row["activity_id"].clone())
            .or_default()
            .insert(row["student_id"].clone(), row["grade"].parse().unwrap());
    }

    let mut e = Expected {
        distributions: BTreeMap::new(),
        paired: BTreeMap::new(),
        correlations: BTreeMap::new(),
        attendance: BTreeMap::new(),
        answers: 0,
    };
    let mut pooled: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut weekly: BTreeMap<(&str, u32), Vec<f64>> = BTreeMap::new();

    for kind in KINDS {
        let Ok(entries) = fs::read_dir(dir.join(kind)) else { continue };
        let mut activities: Vec<String> = entries.map(|d| d.unwrap().file_name().into_string().unwrap()).collect();
        activities.sort();
        for activity in activities {
            let base = dir.join(kind).join(&activity);

            let att = read_csv(&base.join("attendance.csv"));
            if base.join("attendance.csv").exists() {
                let sessions: BTreeSet<&String> = att.iter().map(|r| &r["session_id"]).collect();
                let students: BTreeSet<&String> = att.iter().map(|r| &r["student_id"]).collect();
                e.attendance.insert(activity.clone(), (sessions.len(), att.len(), students.len()));
            }

            let rows = read_csv(&base.join("survey_answer.csv"));
            e.answers += rows.len();
            let mut by_question: BTreeMap<&str, Vec<(&str, &str)>> = BTreeMap::new();
            for r in &rows {
                by_question
                    .entry(&r["question_id"])
                    .or_default()
                    .push((&r["student_id"], &r["answer_code"]));
            }
            let graded = grades.get(&activity);
            for (question, answers) in by_question {
                let codes: Vec<&str> = answers.iter().map(|(_, c)| *c).collect();
                e.distributions
                    .insert(format!("{kind}-{activity}-{question}"), distribution(&codes));
                if codes.iter().all(|c| ordinal(c).is_some()) {
                    pooled.entry(kind).or_default().extend(codes.iter().map(|c| c.to_string()));
                    if let Some(w) = week_of(&activity) {
                        weekly.entry((kind, w)).or_default().extend(codes.iter().filter_map(|c| ordinal(c)));
                    }
                    if let Some(g) = graded {
                        let (xs, ys): (Vec<f64>, Vec<f64>) =
                            answers.iter().filter_map(|(s, c)| Some((ordinal(c)?, *g.get(*s)?))).unzip();
                        e.correlations.insert(format!("difficulty-vs-grade-{activity}"), spearman(&xs, &ys));
                    }
                } else if codes.iter().all(|c| midpoint(c).is_some()) {
                    let mut rows = [(0, 0); 5];
                    for c in &codes {
                        rows[BANDS.iter().position(|b| b == c).unwrap()].0 += 1;
                    }
                    for grade in graded.into_iter().flat_map(|g| g.values()) {
                        rows[band(*grade)].1 += 1;
                    }
                    e.paired.insert(format!("grades-{activity}"), rows);
                    if let Some(g) = graded {
                        let (xs, ys): (Vec<f64>, Vec<f64>) =
                            answers.iter().filter_map(|(s, c)| Some((midpoint(c)?, *g.get(*s)?))).unzip();
                        e.correlations.insert(format!("expected-vs-grade-{activity}"), spearman(&xs, &ys));
                    }
                }
            }
        }
    }

    for (activity, g) in &grades {
        e.paired.entry(format!("grades-{activity}")).or_insert_with(|| {
            let mut rows = [(0, 0); 5];
            for grade in g.values() {
                rows[band(*grade)].1 += 1;
            }
            rows
        });
    }
    for (kind, codes) in &pooled {
        let codes: Vec<&str> = codes.iter().map(String::as_str).collect();
        e.distributions.insert(format!("all-{kind}-difficulty"), distribution(&codes));
    }
    if dir.join("course.json").exists() && weekly.keys().any(|(k, _)| *k == "lecture" || *k == "quiz") {
        let mean = |v: &Vec<f64>| v.iter().sum::<f64>() / v.len() as f64;
        let (mut xs, mut ys) = (Vec::new(), Vec::new());
        for ((kind, week), lecture) in &weekly {
            if *kind != "lecture" {
                continue;
            }
            if let Some(quiz) = weekly.get(&("quiz", *week)) {
                xs.push(mean(lecture));
                ys.push(mean(quiz));
            }
        }
        e.correlations.insert("lecture-vs-quiz-weekly".into(), spearman(&xs, &ys));
    }
    e
}

fn same_keys<A, B>(what: &str, ours: &BTreeMap<String, A>, theirs: impl Iterator<Item = B>) -> Result<(), String>
where
    B: AsRef<str>,
{
    let theirs: BTreeSet<String> = theirs.map(|s| s.as_ref().to_string()).collect();
    let ours: BTreeSet<String> = ours.keys().cloned().collect();
    if ours != theirs {
        let missing: Vec<_> = ours.difference(&theirs).collect();
        let extra: Vec<_> = theirs.difference(&ours).collect();
        return Err(format!("{what}: report lacks {missing:?}, has unexpected {extra:?}"));
    }
    Ok(())
}

/// Compare `report` against a recount of `dir`.
pub fn check_report(report: &ReportDocument, dir: &Path) -> Result<OracleStats, String> {
    let e = recount(dir);

    same_keys("distributions", &e.distributions, report.distributions.iter().map(|d| &d.figure_id))?;
    for fig in &report.distributions {
        let want = &e.distributions[&fig.figure_id];
        let got = &fig.distribution;
        let total: usize = want.iter().map(|(_, n)| n).sum();
        if got.total as usize != total || got.entries.len() != want.len() {
            return Err(format!("{}: total {} vs {total}", fig.figure_id, got.total));
        }
        for (entry, (option, count)) in got.entries.iter().zip(want) {
            if entry.option != *option || entry.count as usize != *count {
                return Err(format!("{}: {}={} vs {option}={count}", fig.figure_id, entry.option, entry.count));
            }
            if (entry.percentage - percent(*count, total)).abs() > PCT_TOL {
                return Err(format!("{} {option}: {}% vs {}%", fig.figure_id, entry.percentage, percent(*count, total)));
            }
        }
    }

    same_keys("paired comparisons", &e.paired, report.paired_comparisons.iter().map(|p| &p.figure_id))?;
    for fig in &report.paired_comparisons {
        let want = &e.paired[&fig.figure_id];
        for (i, row) in fig.comparison.rows.iter().enumerate() {
            if (row.expected as usize, row.actual as usize) != want[i] || row.band.code() != BANDS[i] {
                return Err(format!("{} {}: ({}, {}) vs {:?}", fig.figure_id, BANDS[i], row.expected, row.actual, want[i]));
            }
        }
        let (exp, act) = want.iter().fold((0, 0), |(a, b), (x, y)| (a + x, b + y));
        if (fig.comparison.expected_total as usize, fig.comparison.actual_total as usize) != (exp, act) {
            return Err(format!("{}: totals differ", fig.figure_id));
        }
    }

    same_keys("correlations", &e.correlations, report.correlations.iter().map(|c| &c.id))?;
    for c in &report.correlations {
        match (&e.correlations[&c.id], &c.result, &c.error) {
            (Rho::Value(rho, n), Some(r), None) => {
                if (r.rho - rho).abs() > RHO_TOL || r.n != *n {
                    return Err(format!("{}: rho {} (n={}) vs {rho} (n={n})", c.id, r.rho, r.n));
                }
            }
            (Rho::Error(code), None, Some(got)) if got == code => {}
            (want, _, _) => return Err(format!("{}: report {:?}/{:?}, recount {want:?}", c.id, c.result, c.error)),
        }
    }

    same_keys("attendance", &e.attendance, report.attendance.iter().map(|a| &a.activity_id))?;
    for a in &report.attendance {
        let got = (a.sessions as usize, a.records as usize, a.distinct_students as usize);
        if got != e.attendance[&a.activity_id] {
            return Err(format!("attendance {}: {got:?} vs {:?}", a.activity_id, e.attendance[&a.activity_id]));
        }
    }

    Ok(OracleStats {
        distributions: e.distributions.len(),
        paired: e.paired.len(),
        correlations: e.correlations.len(),
        attendance: e.attendance.len(),
        answers: e.answers,
    })
}

/// Smallest `n <= max_n` such that every reported percentage is some `k / n`
/// rounded half-up to one decimal, found by trying every `k`.
pub fn brute_force_cohort(reported: &[f64], max_n: u32) -> Option<(u32, Vec<u32>)> {
    (1..=max_n).find_map(|n| {
        let witnesses: Option<Vec<u32>> = reported
            .iter()
            .map(|p| (0..=n).find(|&k| (percent(k as usize, n as usize) - p).abs() < 1e-9))
            .collect();
        witnesses.map(|w| (n, w))
    })
}

/// Strictly increasing x against strictly increasing and strictly decreasing
/// transforms of it, plus constant series on either side.
pub fn monotone_cases(rng: &mut impl rand::Rng) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = rng.random_range(2..200);
    let mut x = Vec::with_capacity(n);
    let mut acc = rng.random_range(-1e3..1e3);
    for _ in 0..n {
        acc += rng.random_range(1e-3..50.0);
        x.push(acc);
    }
    let up: Vec<f64> = x.iter().map(|v: &f64| v.powi(3) + 7.0).collect();
    let down: Vec<f64> = x.iter().map(|v: &f64| -v.powi(3) - 2.0 * v).collect();
    let flat = vec![rng.random_range(0.0..5.0); n];
    (x, up, down, flat)
}
