//! Survey state machine driven by arbitrary clicks, with a per-student
//! reference model and a recount of the CSV rows written.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{TimeDelta, TimeZone, Utc};
use coursebot_core::model::{ActivityKind, ActivityRef, MessageId, UserRef};
use coursebot_core::store::{DataStore, SurveyAnswerRow};
use coursebot_core::survey::{
    accept_component, answer_component, OptionCount, OptionSet, QuestionResult, QuestionSpec, SessionState,
    SurveyDefinition, SurveyEngine, SurveyResults, DEFAULT_EXPIRY_DAYS,
};
use coursebot_core::Timestamp;

pub const SURVEY: &str = "w03-exercise";

pub fn launched_at() -> Timestamp {
    Utc.with_ymd_and_hms(2024, 10, 29, 12, 0, 0).unwrap()
}

pub fn definition() -> SurveyDefinition {
    let activity = ActivityRef::new(
        ActivityKind::Exercise,
        SURVEY,
        "Exercise 3",
        3,
        launched_at(),
        launched_at() + TimeDelta::days(6),
    )
    .unwrap();
    let q = |id: &str, options| QuestionSpec {
        question_id: id.into(),
        prompt: format!("{id}?"),
        options,
    };
    SurveyDefinition::new(
        SURVEY,
        activity,
        vec![
            q("difficulty", OptionSet::DifficultyScale),
            q("expected_grade", OptionSet::GradeBands),
            q("pace", OptionSet::Custom(vec!["slow".into(), "ok".into(), "fast".into()])),
        ],
    )
    .unwrap()
}

/// A click as a student could produce it, valid or not.
#[derive(Debug, Clone)]
pub enum Press {
    Accept,
    Answer { question: usize, option: usize },
    Garbage,
}

#[derive(Debug, Clone)]
pub struct Click {
    pub student: usize,
    pub press: Press,
    pub dt_minutes: i64,
}

pub fn component(def: &SurveyDefinition, press: &Press) -> String {
    match press {
        Press::Accept => accept_component(SURVEY),
        Press::Answer { question, option } => {
            let q = &def.questions[*question];
            let codes = q.options.codes();
            // One past the end stands for a code the question does not offer.
            let code = codes.get(*option).cloned().unwrap_or_else(|| "nope".into());
            answer_component(SURVEY, &q.question_id, &code)
        }
        Press::Garbage => "survey/".into(),
    }
}

/// Reference model: what one click should do to one student's session.
#[derive(Debug, Clone, Default)]
pub struct Model {
    accepted: bool,
    next: usize,
    invited_at: Option<Timestamp>,
}

pub fn expect(model: &mut Model, def: &SurveyDefinition, press: &Press, now: Timestamp) -> Option<(String, String)> {
    let expired = !model.accepted && now >= model.invited_at.unwrap() + TimeDelta::days(DEFAULT_EXPIRY_DAYS);
    match press {
        _ if expired => None,
        Press::Accept if !model.accepted => {
            model.accepted = true;
            None
        }
        Press::Answer { question, option } if model.accepted && *question == model.next => {
            let q = &def.questions[*question];
            let code = q.options.codes().get(*option).cloned()?;
            model.next += 1;
            Some((q.question_id.clone(), code))
        }
        _ => None,
    }
}

pub fn recount(def: &SurveyDefinition, rows: &[SurveyAnswerRow]) -> SurveyResults {
    let mut questions = Vec::new();
    for q in &def.questions {
        let counts = q
            .options
            .codes()
            .into_iter()
            .map(|code| {
                let count = rows
                    .iter()
                    .filter(|r| r.question_id == q.question_id && r.answer_code == code)
                    .count() as u64;
                OptionCount { code, count }
            })
            .collect();
        questions.push(QuestionResult {
            question_id: q.question_id.clone(),
            prompt: q.prompt.clone(),
            counts,
        });
    }
    let mut per_student: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for r in rows {
        per_student.entry(&r.student_id).or_default().insert(&r.question_id);
    }
    let respondents = per_student.values().filter(|qs| qs.len() == def.questions.len()).count() as u64;
    SurveyResults {
        survey_id: def.survey_id.clone(),
        questions,
        respondents,
    }
}

/// Drive `clicks` for `n` students and compare every step with the model,
/// then the final sessions, the CSV and both aggregates.
pub fn check_clicks(n: usize, clicks: &[Click]) -> Result<usize, String> {
    let dir = tempfile::tempdir().unwrap();
    let store = DataStore::new(dir.path());
    let def = definition();
    let roster: Vec<UserRef> = (0..n).map(|i| UserRef::student(format!("s{i:02}"), format!("S{i}"))).collect();
    let mut engine = SurveyEngine::default();
    let mut now = launched_at();
    engine.launch(def.clone(), &roster, now).map_err(|e| e.to_string())?;
    let mut models: Vec<Model> = vec![Model { invited_at: Some(now), ..Model::default() }; n];

    for (i, c) in clicks.iter().enumerate() {
        now += TimeDelta::minutes(c.dt_minutes);
        engine.expire_stale(now);
        let expected = expect(&mut models[c.student], &def, &c.press, now);
        let outcome = engine.on_button(&roster[c.student], MessageId(i as u64 + 1), &component(&def, &c.press), now, &store);
        let recorded = outcome.ok().and_then(|o| o.recorded);
        if recorded != expected {
            return Err(format!("click {i} {c:?}: recorded {recorded:?}, model says {expected:?}"));
        }
    }

    let raw = if store.path_of(&def.category()).exists() {
        store.load_records(&def.category()).map_err(|e| e.to_string())?
    } else {
        Vec::new()
    };
    let rows: Vec<SurveyAnswerRow> = raw.iter().map(|r| SurveyAnswerRow::from_row(r).unwrap()).collect();
    let pairs: BTreeSet<(&str, &str)> = rows.iter().map(|r| (r.student_id.as_str(), r.question_id.as_str())).collect();
    if pairs.len() != rows.len() {
        return Err("more than one answer per (student, question)".into());
    }

    for (s, model) in roster.iter().zip(&models) {
        let session = engine.session(SURVEY, &s.user_id).ok_or("session missing")?;
        let answered = rows.iter().filter(|r| r.student_id == s.user_id).count();
        if session.answers.len() != answered || model.next != answered {
            return Err(format!(
                "{}: session {} answers, CSV {answered}, model {}",
                s.user_id,
                session.answers.len(),
                model.next
            ));
        }
        if (session.state == SessionState::Completed) != (answered == def.questions.len()) {
            return Err(format!("{} is {:?} with {answered} answers", s.user_id, session.state));
        }
    }

    let live = engine.aggregate(SURVEY).map_err(|e| e.to_string())?;
    if live != recount(&def, &rows) {
        return Err("live aggregate differs from the recount".into());
    }
    if SurveyResults::from_rows(&def, &raw).map_err(|e| e.to_string())? != live {
        return Err("aggregate from CSV differs from the live one".into());
    }
    Ok(rows.len())
}

/// Mostly answers, some accepts and junk; one gap in twenty is days long so
/// that invitations expire.
pub fn random_clicks(rng: &mut impl rand::Rng) -> (usize, Vec<Click>) {
    let n = rng.random_range(1..12);
    let len = rng.random_range(0..200);
    let clicks = (0..len)
        .map(|_| {
            let press = match rng.random_range(0..11) {
                0 | 1 => Press::Accept,
                10 => Press::Garbage,
                _ => Press::Answer { question: rng.random_range(0..3), option: rng.random_range(0..6) },
            };
            let dt_minutes = if rng.random_bool(0.05) { rng.random_range(0..4 * 24 * 60) } else { rng.random_range(0..30) };
            Click { student: rng.random_range(0..n), press, dt_minutes }
        })
        .collect();
    (n, clicks)
}
