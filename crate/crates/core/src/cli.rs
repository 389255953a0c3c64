//! Command-line front end: single-file checks, oracle runs and corpus
//! scoring.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use crate::absint::POS_INF;
use crate::frontend::{build_cfg, parse_program, FrontendError, MachineModel, Program};
use crate::mem_access::AccessKind;
use crate::oracle::{oracle_check, Bounds, OracleResult, Witness};
use crate::race_detect::{analyze, Level, Mode, RaceReport, Verdict, VerdictKind, DEFAULT_K};

pub const EXIT_NO_RACE: i32 = 0;
pub const EXIT_RACE: i32 = 1;
pub const EXIT_UNKNOWN: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser)]
#[command(
    name = "minirace",
    version,
    about = "Static data-race detector for pthread C programs",
    args_conflicts_with_subcommands = true
)]
struct Cli {
    #[command(subcommand)]
    command: Option<Command>,
    #[command(flatten)]
    check: CheckArgs,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Analyze every .c file of a directory and score against the oracle.
    Corpus(CorpusArgs),
}

#[derive(Debug, Clone, Args)]
struct Common {
    /// Data model: ilp32 or lp64.
    #[arg(long, default_value = "lp64")]
    machdep: MachineModel,
    /// under, over or combined.
    #[arg(long, default_value = "combined")]
    strategy: Mode,
    /// Call-string length bound.
    #[arg(long = "call-depth", default_value_t = DEFAULT_K)]
    call_depth: usize,
    /// Oracle bounds as loop iterations, threads, states.
    #[arg(long = "oracle-bounds", default_value = "8,4,1000000")]
    oracle_bounds: Bounds,
    /// Write the JSON report to this path.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Report zero timings so output is byte-stable.
    #[arg(long)]
    reproducible: bool,
}

#[derive(Debug, Args)]
struct CheckArgs {
    /// Run the interleaving oracle instead of the analyzer.
    #[arg(long)]
    oracle: bool,
    #[command(flatten)]
    common: Common,
    file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CorpusArgs {
    #[command(flatten)]
    common: Common,
    dir: PathBuf,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct AccessJson {
    pub file: String,
    pub line: u32,
    pub thread: String,
    pub kind: AccessKind,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct RaceJson {
    pub level: Level,
    pub base: String,
    pub offsets: [i64; 2],
    pub access1: AccessJson,
    pub access2: AccessJson,
    pub locksets1: Vec<Vec<String>>,
    pub locksets2: Vec<Vec<String>>,
    pub trace1: Vec<u32>,
    pub trace2: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Serialize, PartialEq, Eq)]
pub struct StatsJson {
    pub threads: usize,
    pub contexts: usize,
    pub time_ms: u64,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct Report {
    pub verdict: VerdictKind,
    pub unsupported: Option<String>,
    pub races: Vec<RaceJson>,
    pub stats: StatsJson,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub witness: Option<Witness>,
}

fn race_json(file: &str, r: &RaceReport) -> RaceJson {
    let acc = |a: &crate::mem_access::Access, thread: &str| AccessJson {
        file: file.to_string(),
        line: a.loc.line,
        thread: thread.to_string(),
        kind: a.kind,
    };
    let off = r.offsets();
    RaceJson {
        level: r.level,
        base: r.a1.base.to_string(),
        offsets: [off.lo, if off.hi == POS_INF { i64::MAX } else { off.hi }],
        access1: acc(&r.a1, &r.threads[0]),
        access2: acc(&r.a2, &r.threads[1]),
        locksets1: r.locksets[0].clone(),
        locksets2: r.locksets[1].clone(),
        trace1: r.trace_hint[0].clone(),
        trace2: r.trace_hint[1].clone(),
    }
}

impl Report {
    pub fn from_verdict(file: &str, v: &Verdict, time_ms: u64) -> Report {
        Report {
            verdict: v.kind,
            unsupported: v.unsupported_reason.clone(),
            races: v.reports.iter().map(|r| race_json(file, r)).collect(),
            stats: StatsJson {
                threads: v.stats.threads,
                contexts: v.stats.contexts,
                time_ms,
            },
            witness: None,
        }
    }
}

pub fn exit_code(v: VerdictKind) -> i32 {
    match v {
        VerdictKind::NoRace => EXIT_NO_RACE,
        VerdictKind::Race => EXIT_RACE,
        VerdictKind::Unknown => EXIT_UNKNOWN,
    }
}

fn oracle_verdict(r: &OracleResult) -> VerdictKind {
    match r {
        OracleResult::Race(_) => VerdictKind::Race,
        OracleResult::NoRace => VerdictKind::NoRace,
        OracleResult::BoundExceeded => VerdictKind::Unknown,
    }
}

fn elapsed_ms(start: Instant, reproducible: bool) -> u64 {
    if reproducible {
        0
    } else {
        start.elapsed().as_millis() as u64
    }
}

fn load(path: &Path, mm: MachineModel) -> Result<Program, String> {
    let src = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    parse_program(&src, &path.display().to_string(), mm).map_err(|e| diagnostic(path, &e))
}

fn diagnostic(path: &Path, e: &FrontendError) -> String {
    format!("{}: {e}", path.display())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<(), String> {
    let text = serde_json::to_string_pretty(value).map_err(|e| e.to_string())?;
    std::fs::write(path, text + "\n").map_err(|e| format!("{}: {e}", path.display()))
}

fn check_file(args: &CheckArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let c = &args.common;
    let Some(path) = &args.file else {
        let _ = writeln!(err, "minirace: no input file");
        return EXIT_USAGE;
    };
    let start = Instant::now();
    let p = match load(path, c.machdep) {
        Ok(p) => p,
        Err(msg) => {
            let _ = writeln!(err, "minirace: {msg}");
            return EXIT_USAGE;
        }
    };
    let report = if args.oracle {
        let cfgs = build_cfg(&p);
        let r = oracle_check(&p, &cfgs, c.oracle_bounds);
        Report {
            verdict: oracle_verdict(&r),
            unsupported: None,
            races: Vec::new(),
            stats: StatsJson {
                threads: 0,
                contexts: 0,
                time_ms: elapsed_ms(start, c.reproducible),
            },
            witness: match r {
                OracleResult::Race(w) => Some(w),
                _ => None,
            },
        }
    } else {
        let v = analyze(&p, c.strategy, c.call_depth);
        Report::from_verdict(&p.file, &v, elapsed_ms(start, c.reproducible))
    };
    let _ = writeln!(out, "verdict: {}", report.verdict);
    if let Some(reason) = &report.unsupported {
        let _ = writeln!(err, "minirace: {reason}");
    }
    if let Some(j) = &c.json {
        if let Err(msg) = write_json(j, &report) {
            let _ = writeln!(err, "minirace: {msg}");
            return EXIT_USAGE;
        }
    }
    exit_code(report.verdict)
}

/// Score of one file against the oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Category {
    /// Claimed race-free, and it is.
    CorrectTrue,
    /// Claimed a race, and there is one.
    CorrectFalse,
    WrongTrue,
    WrongFalse,
    Unknown,
    /// Decisive verdict the oracle could not confirm within its bounds.
    Unverified,
    Unsupported,
}

impl Category {
    pub const ALL: [Category; 7] = [
        Category::CorrectTrue,
        Category::CorrectFalse,
        Category::WrongTrue,
        Category::WrongFalse,
        Category::Unknown,
        Category::Unverified,
        Category::Unsupported,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Category::CorrectTrue => "correct-true",
            Category::CorrectFalse => "correct-false",
            Category::WrongTrue => "wrong-true",
            Category::WrongFalse => "wrong-false",
            Category::Unknown => "unknown",
            Category::Unverified => "unverified",
            Category::Unsupported => "unsupported",
        }
    }
}

pub fn categorize(verdict: VerdictKind, oracle: &OracleResult) -> Category {
    match (verdict, oracle) {
        (VerdictKind::Unknown, _) => Category::Unknown,
        (_, OracleResult::BoundExceeded) => Category::Unverified,
        (VerdictKind::NoRace, OracleResult::NoRace) => Category::CorrectTrue,
        (VerdictKind::NoRace, OracleResult::Race(_)) => Category::WrongTrue,
        (VerdictKind::Race, OracleResult::Race(_)) => Category::CorrectFalse,
        (VerdictKind::Race, OracleResult::NoRace) => Category::WrongFalse,
    }
}

/// Value of a `// expect: ...` header line.
pub fn expectation(source: &str) -> Option<VerdictKind> {
    source.lines().find_map(|l| {
        let v = l.trim().strip_prefix("//")?.trim().strip_prefix("expect:")?.trim();
        match v {
            "race" => Some(VerdictKind::Race),
            "no-race" => Some(VerdictKind::NoRace),
            "unknown" => Some(VerdictKind::Unknown),
            _ => None,
        }
    })
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct FileScore {
    pub file: String,
    pub expect: Option<VerdictKind>,
    pub category: Category,
    /// Analyzer report; absent when the frontend rejected the file.
    pub report: Option<Report>,
    pub oracle: Option<String>,
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, Serialize, PartialEq, Eq)]
pub struct CorpusReport {
    pub files: Vec<FileScore>,
    pub counts: std::collections::BTreeMap<Category, usize>,
    pub total: usize,
    pub time_ms: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct CorpusOptions {
    pub machdep: MachineModel,
    pub mode: Mode,
    pub k: usize,
    pub bounds: Bounds,
    pub reproducible: bool,
}

impl Default for CorpusOptions {
    fn default() -> Self {
        CorpusOptions {
            machdep: MachineModel::Lp64,
            mode: Mode::Combined,
            k: DEFAULT_K,
            bounds: Bounds::default(),
            reproducible: false,
        }
    }
}

fn score_file(path: &Path, opts: &CorpusOptions) -> FileScore {
    let name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let src = std::fs::read_to_string(path).unwrap_or_default();
    let expect = expectation(&src);
    let start = Instant::now();
    let p = match parse_program(&src, &name, opts.machdep) {
        Ok(p) => p,
        Err(e) => {
            return FileScore {
                file: name,
                expect,
                category: Category::Unsupported,
                report: None,
                oracle: None,
                diagnostic: Some(e.to_string()),
            }
        }
    };
    let v = analyze(&p, opts.mode, opts.k);
    let report = Report::from_verdict(&name, &v, elapsed_ms(start, opts.reproducible));
    let oracle = oracle_check(&p, &build_cfg(&p), opts.bounds);
    FileScore {
        file: name,
        expect,
        category: categorize(v.kind, &oracle),
        report: Some(report),
        oracle: Some(oracle.to_string()),
        diagnostic: None,
    }
}

/// Every `.c` file of `dir`, sorted by name.
pub fn corpus_files(dir: &Path) -> std::io::Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "c"))
        .collect();
    files.sort();
    Ok(files)
}

pub fn run_corpus(dir: &Path, opts: &CorpusOptions) -> std::io::Result<CorpusReport> {
    let start = Instant::now();
    let files = corpus_files(dir)?;
    let scores: Vec<FileScore> = files.par_iter().map(|f| score_file(f, opts)).collect();
    let mut counts: std::collections::BTreeMap<Category, usize> =
        Category::ALL.iter().map(|c| (*c, 0)).collect();
    for s in &scores {
        *counts.get_mut(&s.category).unwrap() += 1;
    }
    Ok(CorpusReport {
        total: scores.len(),
        files: scores,
        counts,
        time_ms: elapsed_ms(start, opts.reproducible),
    })
}

fn corpus(args: &CorpusArgs, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let c = &args.common;
    let opts = CorpusOptions {
        machdep: c.machdep,
        mode: c.strategy,
        k: c.call_depth,
        bounds: c.oracle_bounds,
        reproducible: c.reproducible,
    };
    let report = match run_corpus(&args.dir, &opts) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "minirace: {}: {e}", args.dir.display());
            return EXIT_USAGE;
        }
    };
    for f in &report.files {
        let verdict = f
            .report
            .as_ref()
            .map(|r| r.verdict.to_string())
            .unwrap_or_else(|| "-".into());
        let _ = writeln!(
            out,
            "{:<40} {:<8} {:<15} {}",
            f.file,
            verdict,
            f.oracle.as_deref().unwrap_or("-"),
            f.category.name()
        );
    }
    let _ = writeln!(out);
    for (cat, n) in &report.counts {
        let _ = writeln!(out, "{:<14} {n}", cat.name());
    }
    let _ = writeln!(out, "{:<14} {}", "total", report.total);
    let _ = writeln!(out, "{:<14} {} ms", "time", report.time_ms);
    if let Some(j) = &c.json {
        if let Err(msg) = write_json(j, &report) {
            let _ = writeln!(err, "minirace: {msg}");
            return EXIT_USAGE;
        }
    }
    let wrong = report.counts[&Category::WrongTrue] + report.counts[&Category::WrongFalse];
    if wrong == 0 {
        0
    } else {
        1
    }
}

/// Run the command line; returns the process exit status.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { 0 };
            let text = e.render().to_string();
            if e.use_stderr() {
                let _ = write!(err, "{text}");
            } else {
                let _ = write!(out, "{text}");
            }
            return code;
        }
    };
    match &cli.command {
        Some(Command::Corpus(c)) => corpus(c, out, err),
        None => check_file(&cli.check, out, err),
    }
}
