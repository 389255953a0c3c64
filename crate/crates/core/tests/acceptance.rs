//! Acceptance criteria over the shipped corpus. Each test prints one
//! PASS/FAIL line and then asserts.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use minirace::absint::{AbsVal, Base, Context, Itv};
use minirace::cli::{corpus_files, run_corpus, CorpusOptions};
use minirace::frontend::{
    build_cfg, parse_program, pretty, CType, Expr, GlobalDecl, Initializer, MachineModel, Program,
    Scope, Stmt, StmtId, StmtKind,
};
use minirace::lockset::{Flavor, LockId};
use minirace::oracle::{
    concrete_trace, explore, oracle_check, Bounds, ExploreOptions, ObsVal, OracleResult,
};
use minirace::race_detect::{
    analyze, run_strategy, single_strategy_verdict, Level, Mode, Verdict, VerdictKind,
    ACTIVE_WAITING, DEFAULT_K,
};
use minirace::active_threads::{may_parallel, must_parallel};
use minirace::thread_system::Strategy;
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

fn corpus_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/corpus")
}

struct Entry {
    name: String,
    program: Option<Program>,
    verdict: Option<Verdict>,
    analysis_time: Duration,
    oracle: Option<OracleResult>,
}

impl Entry {
    fn bounded(&self) -> bool {
        matches!(self.oracle, Some(OracleResult::Race(_) | OracleResult::NoRace))
    }
}

fn corpus() -> &'static [Entry] {
    static CORPUS: OnceLock<Vec<Entry>> = OnceLock::new();
    CORPUS.get_or_init(|| {
        corpus_files(&corpus_dir())
            .expect("corpus directory")
            .into_iter()
            .map(|path| {
                let name = path.file_name().unwrap().to_string_lossy().into_owned();
                let src = std::fs::read_to_string(&path).unwrap();
                let program = parse_program(&src, &name, MachineModel::Lp64).ok();
                let (verdict, analysis_time, oracle) = match &program {
                    Some(p) => {
                        let start = Instant::now();
                        let v = analyze(p, Mode::Combined, DEFAULT_K);
                        let t = start.elapsed();
                        let o = oracle_check(p, &build_cfg(p), Bounds::default());
                        (Some(v), t, Some(o))
                    }
                    None => (None, Duration::ZERO, None),
                };
                Entry {
                    name,
                    program,
                    verdict,
                    analysis_time,
                    oracle,
                }
            })
            .collect()
    })
}

fn report(criterion: &str, ok: bool, detail: &str) {
    let mut out = std::io::stdout().lock();
    let tag = if ok { "PASS" } else { "FAIL" };
    let _ = writeln!(out, "{tag} {criterion}: {detail}");
}

#[test]
fn corpus_soundness_against_oracle() {
    let files = corpus();
    let mut violations = Vec::new();
    let mut checked = 0;
    for e in files {
        let (Some(v), Some(o)) = (&e.verdict, &e.oracle) else {
            continue;
        };
        if !e.bounded() {
            continue;
        }
        checked += 1;
        let bad = match v.kind {
            VerdictKind::Race => !matches!(o, OracleResult::Race(_)),
            VerdictKind::NoRace => !matches!(o, OracleResult::NoRace),
            VerdictKind::Unknown => false,
        };
        if bad {
            violations.push(format!("{} ({} vs {o})", e.name, v.kind));
        }
    }
    let ok = files.len() >= 30 && violations.is_empty();
    report(
        "corpus soundness",
        ok,
        &format!(
            "{} files, {checked} oracle-bounded, violations {:?}",
            files.len(),
            violations
        ),
    );
    assert!(ok);
}

#[test]
fn decisiveness() {
    let files = corpus();
    let decided = files
        .iter()
        .filter(|e| {
            e.verdict
                .as_ref()
                .is_some_and(|v| v.kind != VerdictKind::Unknown)
        })
        .count();
    let ratio = decided as f64 / files.len() as f64;
    let busy: Vec<_> = files.iter().filter(|e| e.name.starts_with("busywait_")).collect();
    let busy_ok = !busy.is_empty()
        && busy.iter().all(|e| {
            e.verdict.as_ref().is_some_and(|v| {
                v.kind == VerdictKind::Unknown
                    && v.unsupported_reason.as_deref() == Some(ACTIVE_WAITING)
            })
        });
    let ok = ratio >= 0.70 && busy_ok;
    report(
        "decisiveness",
        ok,
        &format!(
            "{decided}/{} decided ({:.1}%), {} busy-wait files unknown with active waiting: {busy_ok}",
            files.len(),
            ratio * 100.0,
            busy.len()
        ),
    );
    assert!(ok);
}

#[test]
fn strategy_asymmetry() {
    let mut problems = Vec::new();
    for e in corpus() {
        let (Some(p), Some(combined)) = (&e.program, &e.verdict) else {
            continue;
        };
        let cfgs = build_cfg(p);
        let under = single_strategy_verdict(p, &cfgs, Strategy::Under, DEFAULT_K).kind;
        let over = single_strategy_verdict(p, &cfgs, Strategy::Over, DEFAULT_K).kind;
        if under == VerdictKind::NoRace {
            problems.push(format!("{}: under claimed no-race", e.name));
        }
        if over == VerdictKind::Race {
            problems.push(format!("{}: over claimed race", e.name));
        }
        let contradicts = |a: VerdictKind, b: VerdictKind| {
            matches!(
                (a, b),
                (VerdictKind::Race, VerdictKind::NoRace) | (VerdictKind::NoRace, VerdictKind::Race)
            )
        };
        if contradicts(combined.kind, under) || contradicts(combined.kind, over) {
            problems.push(format!(
                "{}: combined {} against under {under} / over {over}",
                e.name, combined.kind
            ));
        }
    }
    let ok = problems.is_empty();
    report("strategy asymmetry", ok, &format!("problems {problems:?}"));
    assert!(ok);
}

/// Wrap every statement in `ids` between a lock and an unlock of a fresh
/// global mutex. Nested targets are wrapped once, at the outermost level.
fn wrap_statements(p: &Program, ids: &BTreeSet<StmtId>, mutex: &str) -> Program {
    fn lock_stmt(s: &Stmt, mutex: &str, unlock: bool) -> Stmt {
        let arg = Expr::AddrOf(Box::new(Expr::Var(mutex.to_string(), Scope::Global)));
        Stmt {
            id: s.id,
            loc: s.loc,
            kind: if unlock {
                StmtKind::Unlock(arg)
            } else {
                StmtKind::Lock(arg)
            },
        }
    }
    fn walk(body: &[Stmt], ids: &BTreeSet<StmtId>, mutex: &str) -> Vec<Stmt> {
        let mut out = Vec::new();
        for s in body {
            if ids.contains(&s.id) {
                out.push(lock_stmt(s, mutex, false));
                out.push(s.clone());
                out.push(lock_stmt(s, mutex, true));
                continue;
            }
            let mut s = s.clone();
            match &mut s.kind {
                StmtKind::If {
                    then_branch,
                    else_branch,
                    ..
                } => {
                    *then_branch = walk(then_branch, ids, mutex);
                    *else_branch = walk(else_branch, ids, mutex);
                }
                StmtKind::While { body, .. } => *body = walk(body, ids, mutex),
                _ => {}
            }
            out.push(s);
        }
        out
    }
    let mut q = p.clone();
    q.globals.push(GlobalDecl {
        name: mutex.to_string(),
        ty: CType::Mutex,
        init: Some(Initializer::LockInit),
        loc: Default::default(),
    });
    for f in q.functions.values_mut() {
        f.body = walk(&f.body, ids, mutex);
    }
    q
}

#[test]
fn lockset_properties() {
    let mut rng = StdRng::seed_from_u64(0x5eed);
    let mut runs = Vec::new();
    for e in corpus() {
        let Some(p) = &e.program else { continue };
        let cfgs = build_cfg(p);
        for strategy in [Strategy::Under, Strategy::Over] {
            if let Ok(run) = run_strategy(p, &cfgs, strategy, DEFAULT_K) {
                runs.push((e, run));
            }
        }
    }

    // must_guarded implies may_guarded
    let mut implication_failures = 0;
    let mut sampled = 0;
    let pool: Vec<(usize, Vec<Context>)> = runs
        .iter()
        .enumerate()
        .map(|(i, (_, r))| (i, r.table.contexts().map(|(c, _)| c.clone()).collect::<Vec<_>>()))
        .filter(|(_, cs)| !cs.is_empty())
        .collect();
    while sampled < 1000 {
        let (i, cs) = &pool[rng.gen_range(0..pool.len())];
        let c1 = &cs[rng.gen_range(0..cs.len())];
        let c2 = &cs[rng.gen_range(0..cs.len())];
        let ls = &runs[*i].1.locksets;
        if ls.must_guarded(c1, c2) && !ls.may_guarded(c1, c2) {
            implication_failures += 1;
        }
        sampled += 1;
    }

    // wrapping must pairs in a fresh mutex removes the definite race
    let mut wrapped = 0;
    let mut still_racy = Vec::new();
    for e in corpus() {
        let (Some(p), Some(v)) = (&e.program, &e.verdict) else {
            continue;
        };
        if v.kind != VerdictKind::Race {
            continue;
        }
        let ids: BTreeSet<StmtId> = v
            .reports
            .iter()
            .filter(|r| r.level == Level::Must)
            .flat_map(|r| [r.a1.context.stmt, r.a2.context.stmt])
            .collect();
        let q = wrap_statements(p, &ids, "wrap_guard");
        let src = pretty::program(&q);
        let q = parse_program(&src, &e.name, p.machine).expect("wrapped program parses");
        wrapped += 1;
        let w = analyze(&q, Mode::Combined, DEFAULT_K);
        if w.kind == VerdictKind::Race {
            still_racy.push(e.name.clone());
        }
    }

    // read-side rwlock holders never exclude each other
    let read = |exact| LockId {
        base: Some(Base::Global("rw".into())),
        offset: Itv::single(0),
        flavor: Flavor::RwlockRead,
        exact,
    };
    let mut read_guarding = 0;
    for exact in [true, false] {
        if read(exact).may_exclude(&read(exact)) || read(exact).must_exclude(&read(exact)) {
            read_guarding += 1;
        }
    }
    for (_, run) in &runs {
        let only_reads = |c: &Context| {
            let sets = run.locksets.locksets(c);
            !sets.is_empty()
                && sets
                    .iter()
                    .all(|s| s.iter().all(|l| l.flavor == Flavor::RwlockRead))
        };
        let contexts: Vec<_> = run
            .accesses
            .list
            .iter()
            .map(|a| a.context.clone())
            .filter(|c| only_reads(c))
            .collect();
        for c1 in &contexts {
            for c2 in &contexts {
                if run.locksets.may_guarded(c1, c2) {
                    read_guarding += 1;
                }
            }
        }
    }

    let ok = implication_failures == 0 && still_racy.is_empty() && wrapped > 0 && read_guarding == 0;
    report(
        "lockset properties",
        ok,
        &format!(
            "{sampled} pairs, {implication_failures} implication failures; {wrapped} wrapped programs, still racy {still_racy:?}; read-read guarding {read_guarding}"
        ),
    );
    assert!(ok);
}

fn covers(p: &Program, abs: &AbsVal, obs: &ObsVal) -> bool {
    let _ = p;
    match obs {
        ObsVal::Int(v) => abs.itv.is_some_and(|i| i.contains(*v)),
        ObsVal::Addr(base, off) => abs.pts.iter().any(|(b, itv)| {
            let same = match (b, base) {
                (Base::Dynamic { site: a, .. }, Base::Dynamic { site: c, .. }) => a == c,
                _ => b == base,
            };
            same && itv.contains(*off)
        }),
        ObsVal::Func(name) => abs.pts.contains_key(&Base::Function(name.clone())),
        ObsVal::Dangling => true,
    }
}

#[test]
fn abstract_interpretation_soundness() {
    let mut files = 0;
    let mut observations = 0;
    let mut escapes = Vec::new();
    let mut loop_violations = Vec::new();
    for e in corpus().iter().filter(|e| e.name.starts_with("seq_")) {
        let Some(p) = &e.program else { continue };
        let cfgs = build_cfg(p);
        let trace = match concrete_trace(p, &cfgs, DEFAULT_K, 100_000) {
            Ok(t) if t.complete => t,
            other => {
                escapes.push(format!("{}: no complete trace ({:?})", e.name, other.err()));
                continue;
            }
        };
        let run = match run_strategy(p, &cfgs, Strategy::Under, DEFAULT_K) {
            Ok(r) => r,
            Err(err) => {
                escapes.push(format!("{}: analysis failed: {err}", e.name));
                continue;
            }
        };
        files += 1;
        for obs in &trace.observations {
            let state = run.table.state(&obs.context);
            if !state.reachable {
                escapes.push(format!("{}: stmt {} unreachable", e.name, obs.context.stmt));
                continue;
            }
            for (cell, val) in &obs.cells {
                observations += 1;
                let abs = state.get(p, cell);
                if !covers(p, &abs, val) {
                    escapes.push(format!(
                        "{}: stmt {} cell {:?} value {val:?} outside {abs:?}",
                        e.name, obs.context.stmt, cell
                    ));
                }
            }
        }
        for s in run.table.summaries.values() {
            for (key, stat) in &s.loops {
                if stat.join_visits > 3 || stat.descending > 1 {
                    loop_violations.push(format!("{}: {key:?} {stat:?}", e.name));
                }
            }
        }
    }
    let ok = files >= 20 && escapes.is_empty() && loop_violations.is_empty();
    report(
        "abstract interpretation soundness",
        ok,
        &format!(
            "{files} programs, {observations} concrete values checked, escapes {escapes:?}, loop violations {loop_violations:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn mhp_oracle_agreement() {
    let mut files = 0;
    let mut must_checked = 0;
    let mut coenabled_checked = 0;
    let mut problems = Vec::new();
    for e in corpus().iter().filter(|e| e.bounded()) {
        let Some(p) = &e.program else { continue };
        let cfgs = build_cfg(p);
        let opts = ExploreOptions {
            coenabled: true,
            exhaustive: true,
            ..ExploreOptions::default()
        };
        let ex = explore(p, &cfgs, &opts);
        if matches!(ex.result, Some(OracleResult::BoundExceeded) | None) {
            continue;
        }
        files += 1;
        for strategy in [Strategy::Under, Strategy::Over] {
            let Ok(run) = run_strategy(p, &cfgs, strategy, DEFAULT_K) else {
                continue;
            };
            let to_ctx = |entry: &str, cs, stmt| {
                run.table.class_of_entry(entry).map(|thread| Context { thread, cs, stmt })
            };
            let mut pairs = BTreeSet::new();
            for (a, b) in &ex.coenabled {
                let (Some(c1), Some(c2)) = (
                    to_ctx(&a.entry, a.cs.clone(), a.stmt),
                    to_ctx(&b.entry, b.cs.clone(), b.stmt),
                ) else {
                    problems.push(format!("{}: unknown class for {a:?} / {b:?}", e.name));
                    continue;
                };
                // Only the over-approximating run claims to cover every
                // reachable context.
                if strategy == Strategy::Over {
                    coenabled_checked += 1;
                }
                if strategy == Strategy::Over && !may_parallel(&run.facts, &run.table, &c1, &c2) {
                    problems.push(format!("{} {strategy:?}: co-enabled {c1:?} {c2:?} not may-parallel", e.name));
                }
                pairs.insert((c1.clone(), c2.clone()));
                pairs.insert((c2, c1));
            }
            let contexts: BTreeMap<_, _> = run
                .accesses
                .list
                .iter()
                .map(|a| (a.context.clone(), ()))
                .collect();
            for c1 in contexts.keys() {
                for c2 in contexts.keys() {
                    // Mutual exclusion by a common lock is the lockset
                    // analysis' business, not the lifecycle relation's.
                    if must_parallel(&run.facts, &run.table, c1, c2)
                        && !run.locksets.may_guarded(c1, c2)
                    {
                        must_checked += 1;
                        if !pairs.contains(&(c1.clone(), c2.clone())) {
                            problems.push(format!(
                                "{} {strategy:?}: must-parallel {c1:?} {c2:?} never co-enabled",
                                e.name
                            ));
                        }
                    }
                }
            }
        }
    }
    let ok = files > 0 && problems.is_empty();
    report(
        "MHP oracle agreement",
        ok,
        &format!(
            "{files} files, {must_checked} must-parallel pairs, {coenabled_checked} co-enabled pairs, problems {problems:?}"
        ),
    );
    assert!(ok);
}

#[test]
fn performance_envelope() {
    let slow: Vec<_> = corpus()
        .iter()
        .filter(|e| e.analysis_time >= Duration::from_secs(1))
        .map(|e| format!("{} {:?}", e.name, e.analysis_time))
        .collect();
    let start = Instant::now();
    let r = run_corpus(&corpus_dir(), &CorpusOptions::default()).unwrap();
    let total = start.elapsed();
    let slowest = corpus().iter().map(|e| e.analysis_time).max().unwrap_or_default();
    let ok = slow.is_empty() && total < Duration::from_secs(60);
    report(
        "performance",
        ok,
        &format!(
            "slowest file {slowest:?}, over 1 s {slow:?}, corpus of {} with oracle in {total:?}",
            r.total
        ),
    );
    assert!(ok);
}

#[test]
fn determinism() {
    let opts = CorpusOptions {
        reproducible: true,
        ..CorpusOptions::default()
    };
    let a = serde_json::to_string_pretty(&run_corpus(&corpus_dir(), &opts).unwrap()).unwrap();
    let b = serde_json::to_string_pretty(&run_corpus(&corpus_dir(), &opts).unwrap()).unwrap();
    let ok = a == b;
    report(
        "determinism",
        ok,
        &format!("two reproducible corpus runs, {} bytes, identical: {ok}", a.len()),
    );
    assert!(ok);
}
