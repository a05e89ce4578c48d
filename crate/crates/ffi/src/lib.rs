//! C ABI over the ct-harness core.
//!
//! Every fallible function returns a [`CtStatus`]; on failure the message is
//! available from [`ct_last_error`] on the same thread. Strings returned to
//! the caller are owned by the caller and released with [`ct_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use ct_harness::corpus::Message;
use ct_harness::eval::{self, ConfusionCounts, EvalError, Objective};
use ct_harness::parsers::{self, ParseStatus, Verdict};
use ct_harness::prompt_kit::{self, DefinitionVariant, Dialect, PromptSpec, Task};
use ct_harness::stats::{self, PairedOutcomes, StatsError, TestMethod, TestResult};
use ct_harness::Label;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    SingleClass = 4,
    NonFinite = 5,
    TooFewValues = 6,
    Prompt = 7,
    Panic = 99,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtTask {
    ZeroShotBinary = 0,
    ZeroShotProbabilistic = 1,
    FewShotBinary = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtDefinition {
    Custom = 0,
    LoremIpsum = 1,
    None = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtDialect {
    Gpt = 0,
    Llama = 1,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtObjective {
    F1Positive = 0,
    MacroF1 = 1,
    Youden = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtParseStatus {
    Clean = 0,
    Recovered = 1,
    Failed = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CtTestMethod {
    McnemarExact = 0,
    McnemarChi2 = 1,
    WelchT = 2,
    PairedT = 3,
}

/// Parsed model output. `label` is 1 (positive), 0 (negative) or -1 when
/// the verdict is a score or missing; `score` is NaN unless the verdict is
/// a score.
#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CtVerdict {
    pub status: CtParseStatus,
    pub has_verdict: bool,
    pub label: i32,
    pub score: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CtConfusion {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtMetrics {
    pub precision_0: f64,
    pub recall_0: f64,
    pub f1_0: f64,
    pub precision_1: f64,
    pub recall_1: f64,
    pub f1_1: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    /// Number of metrics whose denominator was zero (reported as 0).
    pub n_degenerate: u32,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default)]
pub struct CtThreshold {
    pub threshold: f64,
    pub objective_value: f64,
    pub f1_at_threshold: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy)]
pub struct CtTestResult {
    pub method: CtTestMethod,
    pub statistic: f64,
    pub p_value: f64,
    /// NaN for McNemar.
    pub df: f64,
    pub significant: bool,
    pub degenerate: bool,
}

/// Opaque collection of (score, label) pairs for threshold calibration.
pub struct CtScoreSet {
    items: Vec<(f64, Label)>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

type Failure = (CtStatus, String);

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CtStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CtStatus::Ok
        }
        Ok(Err((status, message))) => {
            set_error(&message);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CtStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    (CtStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|e| (CtStatus::InvalidUtf8, format!("{what}: {e}")))
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, n: usize, what: &str) -> Result<&'a [T], Failure> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, n))
}

fn into_c_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| (CtStatus::InvalidArgument, "string contains NUL".into()))
}

fn label_from(v: u8, what: &str) -> Result<Label, Failure> {
    match v {
        0 => Ok(Label::Negative),
        1 => Ok(Label::Positive),
        _ => Err((CtStatus::InvalidArgument, format!("{what}: label must be 0 or 1, got {v}"))),
    }
}

fn eval_failure(e: EvalError) -> Failure {
    let status = match e {
        EvalError::SingleClass => CtStatus::SingleClass,
        EvalError::NonFinite(_) => CtStatus::NonFinite,
        _ => CtStatus::InvalidArgument,
    };
    (status, e.to_string())
}

fn stats_failure(e: StatsError) -> Failure {
    let status = match e {
        StatsError::TooFewValues { .. } => CtStatus::TooFewValues,
        StatsError::NonFinite(..) => CtStatus::NonFinite,
        _ => CtStatus::InvalidArgument,
    };
    (status, e.to_string())
}

impl From<CtTask> for Task {
    fn from(t: CtTask) -> Self {
        match t {
            CtTask::ZeroShotBinary => Task::ZeroShotBinary,
            CtTask::ZeroShotProbabilistic => Task::ZeroShotProbabilistic,
            CtTask::FewShotBinary => Task::FewShotBinary,
        }
    }
}

impl From<&TestResult> for CtTestResult {
    fn from(r: &TestResult) -> Self {
        CtTestResult {
            method: match r.method {
                TestMethod::McnemarExact => CtTestMethod::McnemarExact,
                TestMethod::McnemarChi2 => CtTestMethod::McnemarChi2,
                TestMethod::WelchT => CtTestMethod::WelchT,
                TestMethod::PairedT => CtTestMethod::PairedT,
            },
            statistic: r.statistic,
            p_value: r.p_value,
            df: r.df.unwrap_or(f64::NAN),
            significant: r.significant,
            degenerate: r.degenerate,
        }
    }
}

/// Message for the most recent failure on this thread; empty after a
/// successful call. Valid until the next call into this library.
#[no_mangle]
pub extern "C" fn ct_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ct_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Releases a string returned by this library. NULL is ignored.
///
/// # Safety
/// `s` must come from this library and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ct_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Parses a raw model output with the parser for `task`.
///
/// # Safety
/// `raw` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_parse_output(task: CtTask, raw: *const c_char, out: *mut CtVerdict) -> CtStatus {
    guard(|| {
        let raw = str_arg(raw, "raw")?;
        let out = out_ref(out, "out")?;
        let p = parsers::parse_for_task(task.into(), raw);
        let (label, score) = match p.verdict {
            Some(Verdict::Binary(l)) => (l.index() as i32, f64::NAN),
            Some(Verdict::Score(s)) => (-1, s),
            None => (-1, f64::NAN),
        };
        *out = CtVerdict {
            status: match p.status {
                ParseStatus::Clean => CtParseStatus::Clean,
                ParseStatus::Failed => CtParseStatus::Failed,
                ParseStatus::Recovered | ParseStatus::Imported => CtParseStatus::Recovered,
            },
            has_verdict: p.verdict.is_some(),
            label,
            score,
        };
        Ok(())
    })
}

/// Confusion counts for aligned 0/1 label arrays of length `n`.
///
/// # Safety
/// `gold` and `pred` must point to `n` readable bytes; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_confusion(gold: *const u8, pred: *const u8, n: usize, out: *mut CtConfusion) -> CtStatus {
    guard(|| {
        let gold = slice_arg(gold, n, "gold")?;
        let pred = slice_arg(pred, n, "pred")?;
        let out = out_ref(out, "out")?;
        let g: Vec<Label> = gold.iter().map(|&v| label_from(v, "gold")).collect::<Result<_, _>>()?;
        let p: Vec<Label> = pred.iter().map(|&v| label_from(v, "pred")).collect::<Result<_, _>>()?;
        let c = eval::confusion(&g, &p).map_err(eval_failure)?;
        *out = CtConfusion {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        };
        Ok(())
    })
}

/// Per-class precision/recall/F1, macro F1 and accuracy.
///
/// # Safety
/// `confusion` must be readable and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ct_metrics(confusion: *const CtConfusion, out: *mut CtMetrics) -> CtStatus {
    guard(|| {
        let c = confusion.as_ref().ok_or_else(|| null("confusion"))?;
        let out = out_ref(out, "out")?;
        let m = eval::metrics(&ConfusionCounts {
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            tn: c.tn,
        });
        *out = CtMetrics {
            precision_0: m.negative.precision,
            recall_0: m.negative.recall,
            f1_0: m.negative.f1,
            precision_1: m.positive.precision,
            recall_1: m.positive.recall,
            f1_1: m.positive.f1,
            macro_f1: m.macro_f1,
            accuracy: m.accuracy,
            n_degenerate: m.degenerate.len() as u32,
        };
        Ok(())
    })
}

#[no_mangle]
pub extern "C" fn ct_score_set_new() -> *mut CtScoreSet {
    Box::into_raw(Box::new(CtScoreSet { items: Vec::new() }))
}

/// # Safety
/// `set` must come from [`ct_score_set_new`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn ct_score_set_push(set: *mut CtScoreSet, score: f64, label: u8) -> CtStatus {
    guard(|| {
        let set = out_ref(set, "set")?;
        if !score.is_finite() {
            return Err((CtStatus::NonFinite, format!("score {score}")));
        }
        set.items.push((score, label_from(label, "label")?));
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ct_score_set_len(set: *const CtScoreSet) -> usize {
    set.as_ref().map_or(0, |s| s.items.len())
}

/// Threshold maximising `objective` over the pushed pairs.
///
/// # Safety
/// `set` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ct_score_set_optimize(
    set: *const CtScoreSet,
    objective: CtObjective,
    out: *mut CtThreshold,
) -> CtStatus {
    guard(|| {
        let set = set.as_ref().ok_or_else(|| null("set"))?;
        let out = out_ref(out, "out")?;
        let objective = match objective {
            CtObjective::F1Positive => Objective::F1Positive,
            CtObjective::MacroF1 => Objective::MacroF1,
            CtObjective::Youden => Objective::Youden,
        };
        let r = eval::optimize_threshold(&set.items, objective).map_err(eval_failure)?;
        *out = CtThreshold {
            threshold: r.threshold,
            objective_value: r.objective_value,
            f1_at_threshold: r.f1_at_threshold,
        };
        Ok(())
    })
}

/// # Safety
/// `set` must be NULL or a handle from [`ct_score_set_new`], freed once.
#[no_mangle]
pub unsafe extern "C" fn ct_score_set_free(set: *mut CtScoreSet) {
    if !set.is_null() {
        drop(Box::from_raw(set));
    }
}

/// McNemar's test from the discordant counts: `b` items only model A got
/// right, `c` items only model B got right.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_mcnemar(b: u64, c: u64, alpha: f64, out: *mut CtTestResult) -> CtStatus {
    guard(|| {
        let out = out_ref(out, "out")?;
        let pairs = PairedOutcomes {
            n10: b,
            n01: c,
            ..PairedOutcomes::default()
        };
        *out = (&stats::mcnemar(&pairs, alpha).map_err(stats_failure)?).into();
        Ok(())
    })
}

/// Welch's unequal-variance t test, two-sided.
///
/// # Safety
/// `a` and `b` must point to `na` and `nb` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_welch_t(
    a: *const f64,
    na: usize,
    b: *const f64,
    nb: usize,
    alpha: f64,
    out: *mut CtTestResult,
) -> CtStatus {
    guard(|| {
        let a = slice_arg(a, na, "a")?;
        let b = slice_arg(b, nb, "b")?;
        let out = out_ref(out, "out")?;
        *out = (&stats::welch_t(a, b, alpha).map_err(stats_failure)?).into();
        Ok(())
    })
}

/// Renders a zero-shot prompt for `text`. On success `*system` and `*user`
/// receive owned strings.
///
/// # Safety
/// `text` must be NUL-terminated; `system` and `user` must be writable.
#[no_mangle]
pub unsafe extern "C" fn ct_prompt_render(
    task: CtTask,
    definition: CtDefinition,
    dialect: CtDialect,
    text: *const c_char,
    system: *mut *mut c_char,
    user: *mut *mut c_char,
) -> CtStatus {
    guard(|| {
        let text = str_arg(text, "text")?;
        let system = out_ref(system, "system")?;
        let user = out_ref(user, "user")?;
        let spec = PromptSpec::new(
            task.into(),
            match definition {
                CtDefinition::Custom => DefinitionVariant::Custom,
                CtDefinition::LoremIpsum => DefinitionVariant::LoremIpsum,
                CtDefinition::None => DefinitionVariant::None,
            },
            match dialect {
                CtDialect::Gpt => Dialect::Gpt,
                CtDialect::Llama => Dialect::Llama,
            },
        );
        if spec.task == Task::FewShotBinary {
            return Err((CtStatus::InvalidArgument, "few-shot prompts need an example set".into()));
        }
        let message = Message::new("ffi", "ffi", chrono::DateTime::UNIX_EPOCH, text);
        let prompt = prompt_kit::render(&message, &spec, None).map_err(|e| (CtStatus::Prompt, e.to_string()))?;
        let s = into_c_string(prompt.system)?;
        let u = match into_c_string(prompt.user) {
            Ok(u) => u,
            Err(e) => {
                drop(CString::from_raw(s));
                return Err(e);
            }
        };
        *system = s;
        *user = u;
        Ok(())
    })
}

/// Hex SHA-256 digest identifying a rendered prompt; NULL on failure.
///
/// # Safety
/// `system` and `user` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn ct_prompt_digest(system: *const c_char, user: *const c_char) -> *mut c_char {
    let mut out = ptr::null_mut();
    guard(|| {
        let s = str_arg(system, "system")?;
        let u = str_arg(user, "user")?;
        out = into_c_string(prompt_kit::prompt_digest(s, u))?;
        Ok(())
    });
    out
}
