//! The extended language front end and the bundled corpus.
//!
//! Naturals, arrays and records are primitive runtime forms with their own
//! evaluation clauses, so lowering is the identity on well-typed terms. The
//! corpus lives next to this crate in `corpus/`, described by `corpus/manifest.txt`.
//!
//! Manifest lines:
//!
//! ```text
//! program <name> <file> steps=<N> [width=<W>] [dynamic] <check>=<outcome> ...
//! pair <name1> <name2> steps=<N> [dynamic] pmto=<outcome>
//! ```
//!
//! Checks are `typecheck`, `progress`, `preserve`, `uniform` and `sim`; outcomes are
//! `pass`, `fail` or `inapplicable`, and `typecheck=fail:RULE` also pins the rule.

use std::fmt;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::ast::{parse_program, Program, RegionPoset, SExpr, Type};
use crate::harness::{self, Opts, Status, Verdict};
use crate::typecheck::{check_mode, Mode, TypeEnv, TypeError};

/// The extended typing judgment.
pub fn typecheck_ext(p: &RegionPoset, env: &TypeEnv, e: &SExpr) -> Result<(Type, TypeEnv), TypeError> {
    check_mode(Mode::Ext, p, env, e)
}

/// Typechecks a whole program in the extended mode with an empty context.
pub fn check_program(p: &Program) -> Result<Type, TypeError> {
    typecheck_ext(&p.poset, &TypeEnv::new(), &p.expr).map(|(t, _)| t)
}

/// Lowers an extended expression to the forms the semantics evaluates.
///
/// Every extended construct has a direct evaluation clause, so this is the
/// identity; it exists so callers do not depend on that.
pub fn desugar(e: &SExpr) -> SExpr {
    e.clone()
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("manifest line {line}: {msg}")]
    Manifest { line: usize, msg: String },
    #[error("{name}: {msg}")]
    Program { name: String, msg: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Check {
    Typecheck,
    Progress,
    Preserve,
    Uniform,
    Sim,
    Pmto,
}

impl Check {
    fn parse(s: &str) -> Option<Check> {
        Some(match s {
            "typecheck" => Check::Typecheck,
            "progress" => Check::Progress,
            "preserve" => Check::Preserve,
            "uniform" => Check::Uniform,
            "sim" => Check::Sim,
            "pmto" => Check::Pmto,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Check::Typecheck => "typecheck",
            Check::Progress => "progress",
            Check::Preserve => "preserve",
            Check::Uniform => "uniform",
            Check::Sim => "sim",
            Check::Pmto => "pmto",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// An expected outcome; `rule` pins the failing rule of a typecheck.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Expect {
    pub status: Status,
    pub rule: Option<String>,
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.status.to_string().to_lowercase())?;
        if let Some(r) = &self.rule {
            write!(f, ":{r}")?;
        }
        Ok(())
    }
}

fn parse_expect(s: &str) -> Option<Expect> {
    let (st, rule) = match s.split_once(':') {
        Some((a, b)) => (a, Some(b.to_string())),
        None => (s, None),
    };
    let status = match st {
        "pass" => Status::Pass,
        "fail" => Status::Fail,
        "inapplicable" => Status::Inapplicable,
        _ => return None,
    };
    Some(Expect { status, rule })
}

#[derive(Clone, Debug)]
pub struct Entry {
    pub name: String,
    pub path: PathBuf,
    pub width: Option<u32>,
    pub steps: u32,
    pub dynamic: bool,
    pub expect: Vec<(Check, Expect)>,
}

impl Entry {
    pub fn source(&self) -> Result<String, CorpusError> {
        std::fs::read_to_string(&self.path).map_err(|source| CorpusError::Io { path: self.path.clone(), source })
    }

    /// Parses the program; a manifest width must agree with the file's header.
    pub fn load(&self) -> Result<Program, CorpusError> {
        let src = self.source()?;
        let mut p = parse_program(&src)
            .map_err(|e| CorpusError::Program { name: self.name.clone(), msg: e.to_string() })?;
        match (p.width, self.width) {
            (Some(a), Some(b)) if a != b => {
                return Err(CorpusError::Program {
                    name: self.name.clone(),
                    msg: format!("manifest width {b} disagrees with the header's {a}"),
                })
            }
            (None, w) => p.width = w,
            _ => {}
        }
        Ok(p)
    }

    pub fn opts(&self) -> Opts {
        Opts { dynamic: self.dynamic }
    }
}

#[derive(Clone, Debug)]
pub struct PairEntry {
    pub left: String,
    pub right: String,
    pub steps: u32,
    pub dynamic: bool,
    pub expect: Expect,
}

#[derive(Clone, Debug, Default)]
pub struct Corpus {
    pub programs: Vec<Entry>,
    pub pairs: Vec<PairEntry>,
}

/// The directory holding the bundled corpus.
pub fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus")
}

/// The bundled corpus.
pub fn corpus() -> Result<Corpus, CorpusError> {
    load_manifest(&corpus_dir().join("manifest.txt"))
}

pub fn load_manifest(path: &Path) -> Result<Corpus, CorpusError> {
    let text =
        std::fs::read_to_string(path).map_err(|source| CorpusError::Io { path: path.to_path_buf(), source })?;
    let dir = path.parent().unwrap_or(Path::new("."));
    parse_manifest(&text, dir)
}

pub fn parse_manifest(text: &str, dir: &Path) -> Result<Corpus, CorpusError> {
    let mut c = Corpus::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let bad = |msg: String| CorpusError::Manifest { line, msg };
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let words: Vec<&str> = body.split_whitespace().collect();
        let (kind, a, b, rest) = match words.as_slice() {
            [k, a, b, rest @ ..] => (*k, *a, *b, rest),
            _ => return Err(bad("expected `program` or `pair` followed by two names".into())),
        };
        let mut steps = None;
        let mut width = None;
        let mut dynamic = false;
        let mut expect = Vec::new();
        for w in rest {
            if *w == "dynamic" {
                dynamic = true;
                continue;
            }
            let (k, v) = w.split_once('=').ok_or_else(|| bad(format!("malformed field `{w}`")))?;
            let num = || v.parse::<u32>().map_err(|_| bad(format!("`{k}` needs a number, found `{v}`")));
            match k {
                "steps" => steps = Some(num()?),
                "width" => width = Some(num()?),
                _ => {
                    let check = Check::parse(k).ok_or_else(|| bad(format!("unknown check `{k}`")))?;
                    let e = parse_expect(v).ok_or_else(|| bad(format!("unknown outcome `{v}`")))?;
                    expect.push((check, e));
                }
            }
        }
        let steps = steps.ok_or_else(|| bad("missing steps=N".into()))?;
        match kind {
            "program" => {
                if expect.iter().any(|(k, _)| *k == Check::Pmto) {
                    return Err(bad("pmto is a pair check".into()));
                }
                c.programs.push(Entry { name: a.into(), path: dir.join(b), width, steps, dynamic, expect });
            }
            "pair" => {
                let e = match expect.as_slice() {
                    [(Check::Pmto, e)] => e.clone(),
                    _ => return Err(bad("a pair carries exactly one pmto expectation".into())),
                };
                for n in [a, b] {
                    if !c.programs.iter().any(|p| p.name == n) {
                        return Err(bad(format!("unknown program `{n}`")));
                    }
                }
                c.pairs.push(PairEntry { left: a.into(), right: b.into(), steps, dynamic, expect: e });
            }
            _ => return Err(bad(format!("unknown record kind `{kind}`"))),
        }
    }
    Ok(c)
}

/// The result of one expectation.
#[derive(Clone, Debug)]
pub struct Outcome {
    pub subject: String,
    pub check: Check,
    pub expected: Expect,
    pub status: Status,
    /// The failing rule of a typecheck.
    pub rule: Option<String>,
    pub detail: Option<String>,
    pub matched: bool,
    pub steps_used: u32,
    pub coins_used: u32,
}

impl Outcome {
    fn of_verdict(subject: &str, check: Check, expected: &Expect, v: Verdict) -> Outcome {
        Outcome {
            subject: subject.into(),
            check,
            expected: expected.clone(),
            status: v.status,
            rule: None,
            matched: v.status == expected.status,
            detail: v.witness.map(|w| w.text),
            steps_used: v.steps_used,
            coins_used: v.coins_used,
        }
    }
}

/// Runs one program check at the entry's step bound.
pub fn run_check(p: &Program, check: Check, steps: u32, opts: Opts) -> Verdict {
    match check {
        Check::Progress => harness::check_progress(p, steps, opts),
        Check::Preserve => harness::check_preservation(p, steps, opts),
        Check::Uniform => harness::check_reveal_uniformity(p, steps, opts),
        Check::Sim => harness::check_simulation(p, steps, opts),
        Check::Typecheck | Check::Pmto => unreachable!("not a single-program harness check"),
    }
}

/// Runs every expectation of one program.
pub fn run_entry(e: &Entry) -> Result<Vec<Outcome>, CorpusError> {
    let p = e.load()?;
    let mut out = Vec::new();
    for (check, exp) in &e.expect {
        if *check == Check::Typecheck {
            let (status, rule, detail) = match check_program(&p) {
                Ok(t) => (Status::Pass, None, Some(format!("type {t}"))),
                Err(err) => (Status::Fail, Some(err.rule.clone()), Some(err.to_string())),
            };
            let matched = status == exp.status && (exp.rule.is_none() || exp.rule == rule);
            out.push(Outcome {
                subject: e.name.clone(),
                check: *check,
                expected: exp.clone(),
                status,
                rule,
                detail,
                matched,
                steps_used: 0,
                coins_used: 0,
            });
            continue;
        }
        let v = run_check(&p, *check, e.steps, e.opts());
        out.push(Outcome::of_verdict(&e.name, *check, exp, v));
    }
    Ok(out)
}

/// Runs the PMTO expectation of a pair.
pub fn run_pair(c: &Corpus, pair: &PairEntry) -> Result<Outcome, CorpusError> {
    let find = |n: &str| {
        c.programs.iter().find(|p| p.name == n).ok_or_else(|| CorpusError::Program {
            name: n.into(),
            msg: "not in the manifest".into(),
        })
    };
    let (a, b) = (find(&pair.left)?.load()?, find(&pair.right)?.load()?);
    let v = harness::check_pmto(&a, &b, pair.steps, Opts { dynamic: pair.dynamic });
    let subject = format!("{} ~ {}", pair.left, pair.right);
    Ok(Outcome::of_verdict(&subject, Check::Pmto, &pair.expect, v))
}
