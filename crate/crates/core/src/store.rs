//! CSV record persistence in per-activity folders.
//!
//! Layout under the data root:
//!
//! ```text
//! {kind}/{activity_id}/attendance.csv
//! {kind}/{activity_id}/survey_answer.csv
//! state/fired_triggers.csv
//! grades.csv                      (instructor grade import, optional)
//! course.json                     (course data, optional)
//! ```
//!
//! Files use RFC 4180 quoting, UTF-8 and LF line endings, always with a
//! header row. Each append writes one whole line with a single `write_all`,
//! and readers ignore a trailing line without its newline, so a concurrent
//! reader only ever sees a prefix of complete rows.

use std::collections::BTreeMap;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use chrono::SecondsFormat;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ActivityKind, Timestamp};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("row has {found} fields, schema `{schema}` expects {expected}")]
    SchemaMismatch {
        schema: &'static str,
        expected: usize,
        found: usize,
    },
    #[error("invalid field `{field}`: {reason}")]
    InvalidField { field: &'static str, reason: String },
    #[error("{path}: parse failure on line {line}: {reason}")]
    ParseFailure {
        path: PathBuf,
        line: u64,
        reason: String,
    },
    #[error("i/o failure on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
}

impl StoreError {
    pub fn code(&self) -> &'static str {
        match self {
            StoreError::SchemaMismatch { .. } | StoreError::InvalidField { .. } => "SCHEMA_MISMATCH",
            StoreError::ParseFailure { .. } => "PARSE_FAILURE",
            StoreError::Io { .. } => "IO_FAILURE",
        }
    }

    fn io(path: &Path, source: io::Error) -> Self {
        StoreError::Io {
            path: path.to_path_buf(),
            source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum RecordType {
    Attendance,
    SurveyAnswer,
}

impl RecordType {
    pub const ALL: [RecordType; 2] = [RecordType::Attendance, RecordType::SurveyAnswer];

    pub fn file_stem(self) -> &'static str {
        match self {
            RecordType::Attendance => "attendance",
            RecordType::SurveyAnswer => "survey_answer",
        }
    }

    pub fn schema(self) -> &'static Schema {
        match self {
            RecordType::Attendance => &ATTENDANCE_SCHEMA,
            RecordType::SurveyAnswer => &SURVEY_SCHEMA,
        }
    }
}

/// Column layout of one record type.
#[derive(Debug, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
    timestamp_column: usize,
}

impl Schema {
    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }
}

pub static ATTENDANCE_SCHEMA: Schema = Schema {
    name: "attendance",
    columns: &[
        "session_id",
        "course_id",
        "activity_id",
        "timestamp",
        "student_id",
        "display_name",
    ],
    timestamp_column: 3,
};

pub static SURVEY_SCHEMA: Schema = Schema {
    name: "survey_answer",
    columns: &[
        "survey_id",
        "activity_kind",
        "activity_id",
        "question_id",
        "student_id",
        "answer_code",
        "timestamp",
    ],
    timestamp_column: 6,
};

static FIRED_SCHEMA: Schema = Schema {
    name: "fired_trigger",
    columns: &["trigger_id", "timestamp"],
    timestamp_column: 1,
};

/// Where a record lives: activity kind, activity id and record type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct RecordCategory {
    pub kind: ActivityKind,
    pub activity_id: String,
    pub record_type: RecordType,
}

impl RecordCategory {
    pub fn new(kind: ActivityKind, activity_id: impl Into<String>, record_type: RecordType) -> Self {
        Self {
            kind,
            activity_id: activity_id.into(),
            record_type,
        }
    }

    /// Path relative to the data root.
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(self.kind.dir_name())
            .join(&self.activity_id)
            .join(format!("{}.csv", self.record_type.file_stem()))
    }

    pub fn schema(&self) -> &'static Schema {
        self.record_type.schema()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CsvRow(pub Vec<String>);

impl CsvRow {
    pub fn get(&self, idx: usize) -> &str {
        self.0.get(idx).map(String::as_str).unwrap_or("")
    }
}

pub fn format_timestamp(at: Timestamp) -> String {
    at.to_rfc3339_opts(SecondsFormat::Millis, true)
}

pub fn parse_timestamp(text: &str) -> Result<Timestamp, String> {
    if !text.ends_with('Z') {
        return Err(format!("timestamp `{text}` is not UTC"));
    }
    chrono::DateTime::parse_from_rfc3339(text)
        .map(|t| t.to_utc())
        .map_err(|e| format!("timestamp `{text}`: {e}"))
}

fn check_row(schema: &'static Schema, row: &CsvRow) -> Result<(), StoreError> {
    if row.0.len() != schema.columns.len() {
        return Err(StoreError::SchemaMismatch {
            schema: schema.name,
            expected: schema.columns.len(),
            found: row.0.len(),
        });
    }
    parse_timestamp(row.get(schema.timestamp_column)).map_err(|reason| StoreError::InvalidField {
        field: "timestamp",
        reason,
    })?;
    Ok(())
}

fn encode_line(fields: &[String]) -> Vec<u8> {
    let mut writer = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    writer
        .write_record(fields)
        .expect("writing to memory cannot fail");
    writer.into_inner().expect("flushing to memory cannot fail")
}

fn append_line(path: &Path, schema: &'static Schema, row: &CsvRow) -> Result<(), StoreError> {
    check_row(schema, row)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| StoreError::io(parent, e))?;
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(|e| StoreError::io(path, e))?;
    let is_new = file.metadata().map_err(|e| StoreError::io(path, e))?.len() == 0;
    let mut buf = Vec::new();
    if is_new {
        let header: Vec<String> = schema.columns.iter().map(|c| c.to_string()).collect();
        buf.extend(encode_line(&header));
    }
    buf.extend(encode_line(&row.0));
    file.write_all(&buf).map_err(|e| StoreError::io(path, e))?;
    file.flush().map_err(|e| StoreError::io(path, e))
}

fn load_lines(path: &Path, schema: &'static Schema) -> Result<Vec<CsvRow>, StoreError> {
    let mut bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    // A line still being written has no terminator yet.
    match bytes.iter().rposition(|&b| b == b'\n') {
        Some(last) => bytes.truncate(last + 1),
        None => bytes.clear(),
    }
    let failure = |line: u64, reason: String| StoreError::ParseFailure {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(bytes.as_slice());
    let mut rows = Vec::new();
    let mut saw_header = false;
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            failure(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let fields: Vec<String> = record.iter().map(str::to_string).collect();
        if !saw_header {
            saw_header = true;
            if fields.iter().map(String::as_str).ne(schema.columns.iter().copied()) {
                return Err(failure(line, format!("header does not match `{}` schema", schema.name)));
            }
            continue;
        }
        let row = CsvRow(fields);
        check_row(schema, &row).map_err(|e| failure(line, e.to_string()))?;
        rows.push(row);
    }
    Ok(rows)
}

/// Destination for interaction records.
pub trait RecordSink: Send + Sync {
    fn append_record(&self, category: &RecordCategory, row: &CsvRow) -> Result<(), StoreError>;

    /// Persist that a scheduler trigger fired.
    fn record_fired(&self, trigger_id: &str, at: Timestamp) -> Result<(), StoreError>;
}

/// File-backed store rooted at a data directory.
#[derive(Debug, Clone)]
pub struct DataStore {
    root: PathBuf,
}

impl DataStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path_of(&self, category: &RecordCategory) -> PathBuf {
        self.root.join(category.relative_path())
    }

    pub fn fired_path(&self) -> PathBuf {
        self.root.join("state").join("fired_triggers.csv")
    }

    pub fn grades_path(&self) -> PathBuf {
        self.root.join("grades.csv")
    }

    pub fn course_path(&self) -> PathBuf {
        self.root.join("course.json")
    }

    /// Rows in file order; a missing file is an empty category.
    pub fn load_records(&self, category: &RecordCategory) -> Result<Vec<CsvRow>, StoreError> {
        load_lines(&self.path_of(category), category.schema())
    }

    pub fn load_fired(&self) -> Result<Vec<(String, Timestamp)>, StoreError> {
        let rows = load_lines(&self.fired_path(), &FIRED_SCHEMA)?;
        Ok(rows
            .into_iter()
            .map(|r| {
                let at = parse_timestamp(r.get(1)).expect("validated on load");
                (r.0[0].clone(), at)
            })
            .collect())
    }

    /// Every category with a record file on disk, in sorted order.
    pub fn categories(&self) -> Result<Vec<RecordCategory>, StoreError> {
        let mut out = Vec::new();
        for kind in ActivityKind::ALL {
            let dir = self.root.join(kind.dir_name());
            let entries = match fs::read_dir(&dir) {
                Ok(e) => e,
                Err(e) if e.kind() == io::ErrorKind::NotFound => continue,
                Err(e) => return Err(StoreError::io(&dir, e)),
            };
            for entry in entries {
                let entry = entry.map_err(|e| StoreError::io(&dir, e))?;
                if !entry.path().is_dir() {
                    continue;
                }
                let activity_id = entry.file_name().to_string_lossy().into_owned();
                for record_type in RecordType::ALL {
                    let category = RecordCategory::new(kind, activity_id.clone(), record_type);
                    if self.path_of(&category).is_file() {
                        out.push(category);
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Rows with student ids and display names replaced by stable pseudonyms
    /// (`P001`, `P002`, ... in order of first appearance).
    pub fn export_pseudonymized(&self, category: &RecordCategory) -> Result<Vec<CsvRow>, StoreError> {
        Ok(pseudonymize(category.schema(), self.load_records(category)?))
    }

    pub fn load_grades(&self) -> Result<Vec<GradeRecord>, StoreError> {
        load_grades(&self.grades_path())
    }

    pub fn write_grades(&self, grades: &[GradeRecord]) -> Result<(), StoreError> {
        let path = self.grades_path();
        fs::create_dir_all(&self.root).map_err(|e| StoreError::io(&self.root, e))?;
        let mut buf = encode_line(&GRADE_COLUMNS.map(String::from));
        for g in grades {
            buf.extend(encode_line(&[
                g.student_id.clone(),
                g.activity_id.clone(),
                format_grade(g.grade),
            ]));
        }
        fs::write(&path, buf).map_err(|e| StoreError::io(&path, e))
    }
}

impl RecordSink for DataStore {
    fn append_record(&self, category: &RecordCategory, row: &CsvRow) -> Result<(), StoreError> {
        append_line(&self.path_of(category), category.schema(), row)
    }

    fn record_fired(&self, trigger_id: &str, at: Timestamp) -> Result<(), StoreError> {
        append_line(
            &self.fired_path(),
            &FIRED_SCHEMA,
            &CsvRow(vec![trigger_id.to_string(), format_timestamp(at)]),
        )
    }
}

/// In-memory sink, used where persistence is not under test.
#[derive(Debug, Default)]
pub struct MemorySink {
    records: Mutex<Vec<(RecordCategory, CsvRow)>>,
    fired: Mutex<Vec<String>>,
}

impl MemorySink {
    pub fn records(&self) -> Vec<(RecordCategory, CsvRow)> {
        self.records.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn rows(&self, category: &RecordCategory) -> Vec<CsvRow> {
        self.records()
            .into_iter()
            .filter(|(c, _)| c == category)
            .map(|(_, r)| r)
            .collect()
    }

    pub fn fired(&self) -> Vec<String> {
        self.fired.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl RecordSink for MemorySink {
    fn append_record(&self, category: &RecordCategory, row: &CsvRow) -> Result<(), StoreError> {
        check_row(category.schema(), row)?;
        self.records
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push((category.clone(), row.clone()));
        Ok(())
    }

    fn record_fired(&self, trigger_id: &str, _at: Timestamp) -> Result<(), StoreError> {
        self.fired
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .push(trigger_id.to_string());
        Ok(())
    }
}

pub fn pseudonymize(schema: &'static Schema, rows: Vec<CsvRow>) -> Vec<CsvRow> {
    let id_col = schema.column("student_id");
    let name_col = schema.column("display_name");
    let mut aliases: BTreeMap<String, String> = BTreeMap::new();
    rows.into_iter()
        .map(|mut row| {
            if let Some(id_col) = id_col {
                let next = aliases.len() + 1;
                let alias = aliases
                    .entry(row.0[id_col].clone())
                    .or_insert_with(|| format!("P{next:03}"))
                    .clone();
                if let Some(name_col) = name_col {
                    row.0[name_col] = alias.clone();
                }
                row.0[id_col] = alias;
            }
            row
        })
        .collect()
}

/// One attendance CSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttendanceRow {
    pub session_id: String,
    pub course_id: String,
    pub activity_id: String,
    pub timestamp: Timestamp,
    pub student_id: String,
    pub display_name: String,
}

impl AttendanceRow {
    pub fn to_row(&self) -> CsvRow {
        CsvRow(vec![
            self.session_id.clone(),
            self.course_id.clone(),
            self.activity_id.clone(),
            format_timestamp(self.timestamp),
            self.student_id.clone(),
            self.display_name.clone(),
        ])
    }

    pub fn from_row(row: &CsvRow) -> Result<Self, StoreError> {
        check_row(&ATTENDANCE_SCHEMA, row)?;
        Ok(Self {
            session_id: row.0[0].clone(),
            course_id: row.0[1].clone(),
            activity_id: row.0[2].clone(),
            timestamp: parse_timestamp(&row.0[3]).expect("checked"),
            student_id: row.0[4].clone(),
            display_name: row.0[5].clone(),
        })
    }
}

/// One survey-answer CSV row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SurveyAnswerRow {
    pub survey_id: String,
    pub activity_kind: ActivityKind,
    pub activity_id: String,
    pub question_id: String,
    pub student_id: String,
    pub answer_code: String,
    pub timestamp: Timestamp,
}

impl SurveyAnswerRow {
    pub fn to_row(&self) -> CsvRow {
        CsvRow(vec![
            self.survey_id.clone(),
            self.activity_kind.code().to_string(),
            self.activity_id.clone(),
            self.question_id.clone(),
            self.student_id.clone(),
            self.answer_code.clone(),
            format_timestamp(self.timestamp),
        ])
    }

    pub fn from_row(row: &CsvRow) -> Result<Self, StoreError> {
        check_row(&SURVEY_SCHEMA, row)?;
        let activity_kind = row.0[1].parse().map_err(|e: crate::model::ModelError| {
            StoreError::InvalidField {
                field: "activity_kind",
                reason: e.to_string(),
            }
        })?;
        Ok(Self {
            survey_id: row.0[0].clone(),
            activity_kind,
            activity_id: row.0[2].clone(),
            question_id: row.0[3].clone(),
            student_id: row.0[4].clone(),
            answer_code: row.0[5].clone(),
            timestamp: parse_timestamp(&row.0[6]).expect("checked"),
        })
    }
}

const GRADE_COLUMNS: [&str; 3] = ["student_id", "activity_id", "grade"];

/// Instructor-supplied actual grade.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradeRecord {
    pub student_id: String,
    pub activity_id: String,
    pub grade: f64,
}

fn format_grade(grade: f64) -> String {
    let text = format!("{grade:.2}");
    text.trim_end_matches('0').trim_end_matches('.').to_string()
}

pub fn load_grades(path: &Path) -> Result<Vec<GradeRecord>, StoreError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(StoreError::io(path, e)),
    };
    let failure = |line: u64, reason: String| StoreError::ParseFailure {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(bytes.as_slice());
    let headers = reader.headers().map_err(|e| failure(1, e.to_string()))?;
    if headers.iter().ne(GRADE_COLUMNS) {
        return Err(failure(1, "header must be student_id,activity_id,grade".into()));
    }
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| failure(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        let grade: f64 = record[2]
            .trim()
            .parse()
            .map_err(|_| failure(line, format!("grade `{}` is not a number", &record[2])))?;
        if !(0.0..=100.0).contains(&grade) {
            return Err(failure(line, format!("grade {grade} outside [0, 100]")));
        }
        out.push(GradeRecord {
            student_id: record[0].to_string(),
            activity_id: record[1].to_string(),
            grade,
        });
    }
    Ok(out)
}
