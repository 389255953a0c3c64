//! Race pairing, active-waiting detection and verdict combination.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::Serialize;

use crate::absint::{AnalysisError, Base, CallString, Context, Itv};
use crate::active_threads::{compute_lifecycle, may_parallel, must_parallel, LifecycleFacts};
use crate::frontend::{build_cfg, CfgSet, Expr, Program, Stmt, StmtId, StmtKind};
use crate::lockset::{compute_locksets, LocksetSummary};
use crate::mem_access::{
    candidate_bases, classify_bases, collect_accesses, Access, AccessKind, Accesses, BaseState,
};
use crate::thread_system::{solve, Strategy, ThreadTable};

/// Default call-string bound.
pub const DEFAULT_K: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    May,
    Must,
}

/// Outcome of the four may-level conditions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Reason {
    pub write: bool,
    pub parallel: bool,
    pub unguarded: bool,
    pub overlap: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RaceReport {
    pub level: Level,
    pub a1: Access,
    pub a2: Access,
    pub reason: Reason,
    /// Statement path from the thread entry to each access.
    pub trace_hint: [Vec<StmtId>; 2],
    /// Entry function of each accessing class.
    pub threads: [String; 2],
    pub locksets: [Vec<Vec<String>>; 2],
}

impl RaceReport {
    /// Bytes both accesses may touch.
    pub fn offsets(&self) -> Itv {
        let (a, b) = (self.a1.offset, self.a2.offset);
        Itv {
            lo: a.lo.max(b.lo),
            hi: a.hi.min(b.hi),
        }
    }
}

fn locksets_of(ls: &LocksetSummary, ctx: &Context) -> Vec<Vec<String>> {
    ls.locksets(ctx)
        .into_iter()
        .map(|s| s.iter().map(|l| l.to_string()).collect())
        .collect()
}

/// Statement path from the entry of the context's thread, through its
/// call sites, to the statement itself.
pub fn trace_hint(cfgs: &CfgSet, ctx: &Context) -> Vec<StmtId> {
    let mut path = Vec::new();
    let sites = ctx.cs.0.iter().map(|(s, _)| *s).chain([ctx.stmt]);
    for site in sites {
        path.extend(cfgs.get(cfgs.func_of(site)).path_to(site));
        path.push(site);
    }
    path
}

/// Frame variables of a class that runs several times.
fn per_instance_frame(b: &Base, table: &ThreadTable) -> bool {
    match b {
        Base::Local { thread, .. } | Base::Formal { thread, .. } => table.is_multi(*thread),
        _ => false,
    }
}

fn is_must(
    a1: &Access,
    a2: &Access,
    locksets: &LocksetSummary,
    facts: &LifecycleFacts,
    table: &ThreadTable,
) -> bool {
    let overflow = |c: &Context| locksets.per_context.get(c).is_some_and(|s| s.overflowed);
    must_parallel(facts, table, &a1.context, &a2.context)
        && !locksets.may_guarded(&a1.context, &a2.context)
        && a1.is_exact()
        && a2.is_exact()
        && a1.offset == a2.offset
        && !a1.base.is_weak()
        && !per_instance_frame(&a1.base, table)
        && table.reachable(&a1.context)
        && table.reachable(&a2.context)
        && !overflow(&a1.context)
        && !overflow(&a2.context)
}

/// Pair accesses on candidate bases into may- and must-level reports.
pub fn detect_races(
    cfgs: &CfgSet,
    accesses: &[Access],
    locksets: &LocksetSummary,
    facts: &LifecycleFacts,
    table: &ThreadTable,
    candidates: &BTreeSet<Base>,
) -> Vec<RaceReport> {
    let mut by_base: BTreeMap<&Base, Vec<&Access>> = BTreeMap::new();
    for a in accesses {
        if candidates.contains(&a.base) && !a.atomic {
            by_base.entry(&a.base).or_default().push(a);
        }
    }
    let mut out = Vec::new();
    for group in by_base.values() {
        for (i, a1) in group.iter().enumerate() {
            for a2 in &group[i..] {
                let reason = Reason {
                    write: a1.kind == AccessKind::Write || a2.kind == AccessKind::Write,
                    parallel: may_parallel(facts, table, &a1.context, &a2.context),
                    unguarded: !locksets.must_guarded(&a1.context, &a2.context),
                    overlap: a1.overlaps(a2),
                };
                if !(reason.write && reason.parallel && reason.unguarded && reason.overlap) {
                    continue;
                }
                let level = if is_must(a1, a2, locksets, facts, table) {
                    Level::Must
                } else {
                    Level::May
                };
                out.push(RaceReport {
                    level,
                    a1: (*a1).clone(),
                    a2: (*a2).clone(),
                    reason,
                    trace_hint: [trace_hint(cfgs, &a1.context), trace_hint(cfgs, &a2.context)],
                    threads: [
                        table.class(a1.context.thread).entry.clone(),
                        table.class(a2.context.thread).entry.clone(),
                    ],
                    locksets: [
                        locksets_of(locksets, &a1.context),
                        locksets_of(locksets, &a2.context),
                    ],
                });
            }
        }
    }
    dedup(out)
}

fn without_calls(b: &Base) -> Base {
    match b.clone() {
        Base::Local {
            thread, func, name, ..
        } => Base::Local {
            thread,
            func,
            name,
            cs: CallString::default(),
        },
        Base::Formal {
            thread, func, name, ..
        } => Base::Formal {
            thread,
            func,
            name,
            cs: CallString::default(),
        },
        b => b,
    }
}

/// Merge reports that agree on base, offsets and statement pair,
/// keeping the strongest one.
pub fn dedup(reports: Vec<RaceReport>) -> Vec<RaceReport> {
    type Key = (Base, (Itv, StmtId), (Itv, StmtId));
    let mut merged: BTreeMap<Key, RaceReport> = BTreeMap::new();
    for mut r in reports {
        let mut k1 = (r.a1.offset, r.a1.context.stmt);
        let mut k2 = (r.a2.offset, r.a2.context.stmt);
        if k2 < k1 {
            std::mem::swap(&mut k1, &mut k2);
            std::mem::swap(&mut r.a1, &mut r.a2);
            r.trace_hint.swap(0, 1);
            r.threads.swap(0, 1);
            r.locksets.swap(0, 1);
        }
        let strength = |r: &RaceReport| {
            let writes = [&r.a1, &r.a2]
                .iter()
                .filter(|a| a.kind == AccessKind::Write)
                .count();
            (r.level, writes)
        };
        let key = (without_calls(&r.a1.base), k1, k2);
        match merged.get(&key) {
            Some(old) if strength(old) >= strength(&r) => {}
            _ => {
                merged.insert(key, r);
            }
        }
    }
    merged.into_values().collect()
}

fn spin_read(e: &Expr, allowed: &BTreeSet<String>) -> bool {
    let plain = matches!(e, Expr::Var(..) | Expr::Deref(_) | Expr::Field(..) | Expr::Index(..));
    let mut vars = Vec::new();
    e.variables(&mut vars);
    plain && vars.iter().all(|(n, _)| allowed.contains(n))
}

fn cond_vars(e: &Expr) -> BTreeSet<String> {
    let mut vars = Vec::new();
    e.variables(&mut vars);
    vars.into_iter().map(|(n, _)| n).collect()
}

/// Body consisting of tests, breaks and copies of condition variables.
fn spin_body(body: &[Stmt], cond: &BTreeSet<String>) -> bool {
    body.iter().all(|s| match &s.kind {
        StmtKind::Break => true,
        StmtKind::If {
            then_branch,
            else_branch,
            ..
        } => spin_body(then_branch, cond) && spin_body(else_branch, cond),
        StmtKind::While { cond: c, body } => spin_body(body, &(cond | &cond_vars(c))),
        StmtKind::Assign(Expr::Var(n, _), rhs) => !cond.contains(n) && spin_read(rhs, cond),
        _ => false,
    })
}

/// Does some loop wait by spinning on its condition?
pub fn detect_active_waiting(p: &Program) -> bool {
    p.statements().into_iter().any(|(_, s)| match &s.kind {
        StmtKind::While { cond, body } => spin_body(body, &cond_vars(cond)),
        _ => false,
    })
}

/// Everything one strategy computes for a program.
#[derive(Debug, Clone)]
pub struct StrategyRun {
    pub table: ThreadTable,
    pub locksets: LocksetSummary,
    pub facts: LifecycleFacts,
    pub accesses: Accesses,
    pub states: BTreeMap<Base, BaseState>,
    pub reports: Vec<RaceReport>,
}

impl StrategyRun {
    pub fn has_must(&self) -> bool {
        self.reports.iter().any(|r| r.level == Level::Must)
    }

    /// No may race and every dereference resolved.
    pub fn race_free(&self) -> bool {
        self.reports.is_empty() && self.accesses.unresolved.is_empty()
    }

    pub fn stats(&self) -> Stats {
        Stats {
            threads: self.table.classes.len(),
            contexts: self.table.contexts().count(),
        }
    }
}

pub fn run_strategy(
    p: &Program,
    cfgs: &CfgSet,
    strategy: Strategy,
    k: usize,
) -> Result<StrategyRun, AnalysisError> {
    let table = solve(p, cfgs, strategy, k)?;
    let locksets = compute_locksets(p, cfgs, &table);
    let mut facts = compute_lifecycle(p, cfgs, &table);
    facts.flat_locking = locksets.flat(cfgs);
    let accesses = collect_accesses(p, cfgs, &table);
    let states = classify_bases(&accesses.list, &facts, &table);
    let candidates = candidate_bases(&states);
    let reports = detect_races(cfgs, &accesses.list, &locksets, &facts, &table, &candidates);
    Ok(StrategyRun {
        table,
        locksets,
        facts,
        accesses,
        states,
        reports,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub enum VerdictKind {
    #[serde(rename = "race")]
    Race,
    #[serde(rename = "no-race")]
    NoRace,
    #[serde(rename = "unknown")]
    Unknown,
}

impl fmt::Display for VerdictKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VerdictKind::Race => "race",
            VerdictKind::NoRace => "no-race",
            VerdictKind::Unknown => "unknown",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct Stats {
    pub threads: usize,
    pub contexts: usize,
}

pub const ACTIVE_WAITING: &str = "active waiting";

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Verdict {
    pub kind: VerdictKind,
    pub reports: Vec<RaceReport>,
    /// Why no claim was possible, when a specific construct prevents it.
    pub unsupported_reason: Option<String>,
    pub stats: Stats,
}

impl Verdict {
    fn unknown(reason: impl Into<String>) -> Verdict {
        Verdict {
            kind: VerdictKind::Unknown,
            reports: Vec::new(),
            unsupported_reason: Some(reason.into()),
            stats: Stats::default(),
        }
    }

    fn from_run(kind: VerdictKind, run: &StrategyRun, only_must: bool) -> Verdict {
        Verdict {
            kind,
            reports: run
                .reports
                .iter()
                .filter(|r| !only_must || r.level == Level::Must)
                .cloned()
                .collect(),
            unsupported_reason: None,
            stats: run.stats(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Under,
    Over,
    Combined,
}

impl std::str::FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "under" => Ok(Mode::Under),
            "over" => Ok(Mode::Over),
            "combined" => Ok(Mode::Combined),
            other => Err(format!("unknown strategy `{other}`")),
        }
    }
}

/// Over first; if inconclusive, under decides whether a race is certain.
pub fn combined_verdict(p: &Program, cfgs: &CfgSet, k: usize) -> Verdict {
    if detect_active_waiting(p) {
        return Verdict::unknown(ACTIVE_WAITING);
    }
    let over = match run_strategy(p, cfgs, Strategy::Over, k) {
        Ok(r) => r,
        Err(e) => return Verdict::unknown(e.feature()),
    };
    if over.race_free() {
        return Verdict::from_run(VerdictKind::NoRace, &over, false);
    }
    match run_strategy(p, cfgs, Strategy::Under, k) {
        Ok(under) if under.has_must() => Verdict::from_run(VerdictKind::Race, &under, true),
        Ok(_) => Verdict::from_run(VerdictKind::Unknown, &over, false),
        Err(e) => Verdict {
            unsupported_reason: Some(e.feature()),
            ..Verdict::from_run(VerdictKind::Unknown, &over, false)
        },
    }
}

/// Verdict of one strategy alone, limited to the claims it may make.
pub fn single_strategy_verdict(p: &Program, cfgs: &CfgSet, strategy: Strategy, k: usize) -> Verdict {
    if detect_active_waiting(p) {
        return Verdict::unknown(ACTIVE_WAITING);
    }
    let run = match run_strategy(p, cfgs, strategy, k) {
        Ok(r) => r,
        Err(e) => return Verdict::unknown(e.feature()),
    };
    match strategy {
        Strategy::Under if run.has_must() => Verdict::from_run(VerdictKind::Race, &run, true),
        Strategy::Over if run.race_free() => Verdict::from_run(VerdictKind::NoRace, &run, false),
        _ => Verdict::from_run(VerdictKind::Unknown, &run, false),
    }
}

/// Analyze a parsed program in the given mode.
pub fn analyze(p: &Program, mode: Mode, k: usize) -> Verdict {
    let cfgs = build_cfg(p);
    match mode {
        Mode::Combined => combined_verdict(p, &cfgs, k),
        Mode::Under => single_strategy_verdict(p, &cfgs, Strategy::Under, k),
        Mode::Over => single_strategy_verdict(p, &cfgs, Strategy::Over, k),
    }
}
