//! Thread classes and their initial states.
//!
//! Threads are identified by entry function. The under strategy seeds each
//! class with the states at its create sites; the over strategy seeds every
//! class with everything any thread may have stored to shared memory.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::absint::{
    analyze_thread, check_recursion, is_shared_base, AbsState, AbsVal, AnalysisError, Base,
    CallString, Context, Evaluator, ThreadConfig, ThreadId, ThreadSummary, UpdateMode,
};
use crate::frontend::typeck::escaped_locals;
use crate::frontend::{CfgSet, EdgeLabel, Expr, Program, StmtId, StmtKind};

pub const MAIN: ThreadId = 0;

/// Rounds allowed for cyclic thread creation under the under strategy.
pub const MAX_UNDER_ROUNDS: usize = 16;

const MAX_OVER_ROUNDS: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Under,
    Over,
}

impl Strategy {
    pub fn mode(self) -> UpdateMode {
        match self {
            Strategy::Under => UpdateMode::Strong,
            Strategy::Over => UpdateMode::Weak,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ThreadClass {
    pub id: ThreadId,
    pub entry: String,
    /// (creating class, create statement) pairs.
    pub creators: BTreeSet<(ThreadId, StmtId)>,
    pub multi_instance: bool,
}

#[derive(Debug, Clone)]
pub struct ThreadTable {
    pub strategy: Strategy,
    pub k: usize,
    pub classes: BTreeMap<ThreadId, ThreadClass>,
    pub init_states: BTreeMap<ThreadId, AbsState>,
    pub summaries: BTreeMap<ThreadId, ThreadSummary>,
    /// Classes each reachable create context may start.
    pub creates: BTreeMap<Context, BTreeSet<ThreadId>>,
    pub weak_allocs: BTreeSet<StmtId>,
    pub escaped: BTreeSet<(String, String)>,
    /// Number of single-thread analyses performed.
    pub analyses: usize,
}

impl ThreadTable {
    pub fn class(&self, t: ThreadId) -> &ThreadClass {
        &self.classes[&t]
    }

    pub fn class_of_entry(&self, entry: &str) -> Option<ThreadId> {
        self.classes.values().find(|c| c.entry == entry).map(|c| c.id)
    }

    pub fn summary(&self, t: ThreadId) -> &ThreadSummary {
        &self.summaries[&t]
    }

    pub fn state(&self, ctx: &Context) -> AbsState {
        self.summaries
            .get(&ctx.thread)
            .map(|s| s.state(ctx))
            .unwrap_or_default()
    }

    pub fn reachable(&self, ctx: &Context) -> bool {
        self.summaries
            .get(&ctx.thread)
            .is_some_and(|s| s.reachable(ctx))
    }

    /// Every reachable context of every class, ordered by class.
    pub fn contexts(&self) -> impl Iterator<Item = (&Context, &AbsState)> {
        self.summaries.values().flat_map(|s| s.reachable_contexts())
    }

    pub fn is_multi(&self, t: ThreadId) -> bool {
        self.classes.get(&t).is_some_and(|c| c.multi_instance)
    }

    /// Entry functions each create statement may start, over all contexts.
    pub fn create_entries(&self) -> BTreeMap<StmtId, BTreeSet<String>> {
        let mut out: BTreeMap<StmtId, BTreeSet<String>> = BTreeMap::new();
        for (ctx, ts) in &self.creates {
            let e = out.entry(ctx.stmt).or_default();
            e.extend(ts.iter().map(|t| self.classes[t].entry.clone()));
        }
        out
    }
}

/// Thread entry functions named by `entry` in state `s`.
pub fn resolve_entry(
    p: &Program,
    cfgs: &CfgSet,
    ctx: &Context,
    s: &AbsState,
    entry: &Expr,
) -> Result<BTreeSet<String>, AnalysisError> {
    let unresolved = || AnalysisError::EntryUnresolved {
        stmt: ctx.stmt,
        loc: cfgs.loc(ctx.stmt),
    };
    let v = Evaluator::at(p, cfgs, ctx).eval(s, entry);
    if v.pts.is_empty() {
        return Err(unresolved());
    }
    let mut names = BTreeSet::new();
    for b in v.pts.keys() {
        match b {
            Base::Function(f) => match p.function(f) {
                Some(func) if func.formals.len() <= 1 => {
                    names.insert(f.clone());
                }
                Some(_) => {
                    return Err(AnalysisError::Unsupported(
                        "thread entry with several parameters".into(),
                    ))
                }
                None => return Err(unresolved()),
            },
            _ => return Err(unresolved()),
        }
    }
    Ok(names)
}

/// Cell holding the parameter of `entry` when it runs as thread `t`.
pub fn entry_formal(p: &Program, t: ThreadId, entry: &str) -> Option<Base> {
    let f = p.function(entry)?.formals.first()?;
    Some(Base::Formal {
        thread: t,
        func: entry.to_string(),
        name: f.name.clone(),
        cs: CallString::default(),
    })
}

/// Value the entry parameter receives at one create site.
pub fn thread_argument_binding(
    p: &Program,
    cfgs: &CfgSet,
    ctx: &Context,
    state: &AbsState,
) -> AbsVal {
    match &cfgs.stmt(ctx.stmt).kind {
        StmtKind::Create { arg, .. } => Evaluator::at(p, cfgs, ctx).eval(state, arg),
        _ => AbsVal::bottom(),
    }
}

/// Bind the parameter of `t` to the join of its arguments over the
/// create contexts `sites`.
fn bind_argument(
    p: &Program,
    cfgs: &CfgSet,
    summaries: &BTreeMap<ThreadId, ThreadSummary>,
    sites: &[&Context],
    t: ThreadId,
    entry: &str,
    s: &mut AbsState,
) {
    let Some(formal) = entry_formal(p, t, entry) else {
        return;
    };
    let mut v = AbsVal::bottom();
    for ctx in sites {
        v = v.join(&thread_argument_binding(
            p,
            cfgs,
            ctx,
            &summaries[&ctx.thread].state(ctx),
        ));
    }
    s.env.insert((formal, 0), v);
}

/// Most times (capped at 2) one run of `func` may execute an event
/// statement, following calls.
fn count_events(
    cfgs: &CfgSet,
    func: &str,
    event: &dyn Fn(StmtId) -> bool,
    memo: &mut BTreeMap<String, u8>,
    stack: &mut Vec<String>,
) -> u8 {
    if let Some(c) = memo.get(func) {
        return *c;
    }
    if stack.iter().any(|f| f == func) {
        return 2;
    }
    stack.push(func.to_string());
    let cfg = cfgs.get(func);
    let mut weights = Vec::with_capacity(cfg.edges.len());
    for e in &cfg.edges {
        let w = match &e.label {
            EdgeLabel::Stmt(id) => match &cfgs.stmt(*id).kind {
                StmtKind::Call { func: callee, .. } => {
                    count_events(cfgs, callee, event, memo, stack)
                }
                _ => u8::from(event(*id)),
            },
            EdgeLabel::Guard { .. } => 0,
        };
        weights.push(w);
    }
    let mut dist: Vec<Option<u8>> = vec![None; cfg.num_nodes];
    dist[cfg.entry] = Some(0);
    let mut changed = true;
    while changed {
        changed = false;
        for (e, w) in cfg.edges.iter().zip(&weights) {
            if let Some(d) = dist[e.src] {
                let nd = (d + w).min(2);
                if dist[e.dst].is_none_or(|old| old < nd) {
                    dist[e.dst] = Some(nd);
                    changed = true;
                }
            }
        }
    }
    stack.pop();
    let c = dist.iter().flatten().copied().max().unwrap_or(0);
    memo.insert(func.to_string(), c);
    c
}

fn count(cfgs: &CfgSet, func: &str, event: &dyn Fn(StmtId) -> bool) -> u8 {
    count_events(cfgs, func, event, &mut BTreeMap::new(), &mut Vec::new())
}

/// Instances (capped at 2) of each entry function given which entries each
/// create statement starts.
pub fn instance_counts(
    p: &Program,
    cfgs: &CfgSet,
    creates: &BTreeMap<StmtId, BTreeSet<String>>,
) -> BTreeMap<String, u8> {
    let mut entries: BTreeSet<String> = creates.values().flatten().cloned().collect();
    entries.insert(p.entry.clone());
    let mut per_pair: BTreeMap<(String, String), u8> = BTreeMap::new();
    for creator in &entries {
        for t in &entries {
            let c = count(cfgs, creator, &|s| {
                creates.get(&s).is_some_and(|ts| ts.contains(t))
            });
            per_pair.insert((creator.clone(), t.clone()), c);
        }
    }
    let mut inst: BTreeMap<String, u8> = entries
        .iter()
        .map(|e| (e.clone(), u8::from(*e == p.entry)))
        .collect();
    loop {
        let mut next = BTreeMap::new();
        for t in &entries {
            let mut total = u32::from(*t == p.entry);
            for (creator, n) in &inst {
                total += u32::from(*n) * u32::from(per_pair[&(creator.clone(), t.clone())]);
            }
            next.insert(t.clone(), total.min(2) as u8);
        }
        if next == inst {
            return inst;
        }
        inst = next;
    }
}

/// Allocation sites that may execute more than once in a run.
pub fn weak_allocations(
    p: &Program,
    cfgs: &CfgSet,
    creates: &BTreeMap<StmtId, BTreeSet<String>>,
) -> BTreeSet<StmtId> {
    let inst = instance_counts(p, cfgs, creates);
    let mut out = BTreeSet::new();
    for (_, s) in p.statements() {
        if !matches!(s.kind, StmtKind::Alloc { .. }) {
            continue;
        }
        let mut total = 0u32;
        for (entry, n) in &inst {
            total += u32::from(*n) * u32::from(count(cfgs, entry, &|x| x == s.id));
        }
        if total >= 2 {
            out.insert(s.id);
        }
    }
    out
}

/// Create statements whose entry is written as a function name.
fn syntactic_creates(p: &Program) -> BTreeMap<StmtId, BTreeSet<String>> {
    p.statements()
        .into_iter()
        .filter_map(|(_, s)| match &s.kind {
            StmtKind::Create {
                entry: Expr::Func(f),
                ..
            } => Some((s.id, BTreeSet::from([f.clone()]))),
            _ => None,
        })
        .collect()
}

struct Solver<'a> {
    p: &'a Program,
    cfgs: &'a CfgSet,
    strategy: Strategy,
    k: usize,
    weak_allocs: BTreeSet<StmtId>,
    escaped: BTreeSet<(String, String)>,
    classes: BTreeMap<ThreadId, ThreadClass>,
    init: BTreeMap<ThreadId, AbsState>,
    summaries: BTreeMap<ThreadId, ThreadSummary>,
    creates: BTreeMap<Context, BTreeSet<ThreadId>>,
    analyses: usize,
}

impl<'a> Solver<'a> {
    fn new(
        p: &'a Program,
        cfgs: &'a CfgSet,
        strategy: Strategy,
        k: usize,
        weak_allocs: BTreeSet<StmtId>,
        escaped: BTreeSet<(String, String)>,
    ) -> Self {
        let main = ThreadClass {
            id: MAIN,
            entry: p.entry.clone(),
            creators: BTreeSet::new(),
            multi_instance: false,
        };
        Solver {
            p,
            cfgs,
            strategy,
            k,
            weak_allocs,
            escaped,
            classes: BTreeMap::from([(MAIN, main)]),
            init: BTreeMap::from([(MAIN, AbsState::static_init(p))]),
            summaries: BTreeMap::new(),
            creates: BTreeMap::new(),
            analyses: 0,
        }
    }

    fn analyze(&self, t: ThreadId) -> Result<ThreadSummary, AnalysisError> {
        let config = ThreadConfig {
            thread: t,
            entry: &self.classes[&t].entry,
            mode: self.strategy.mode(),
            k: self.k,
            weak_allocs: &self.weak_allocs,
            escaped: &self.escaped,
        };
        analyze_thread(self.p, self.cfgs, &config, self.init[&t].clone())
    }

    /// Recompute create targets from the current summaries, adding classes
    /// for newly seen entries. Returns whether a class was added.
    fn discover(&mut self) -> Result<bool, AnalysisError> {
        let mut creates: BTreeMap<Context, BTreeSet<ThreadId>> = BTreeMap::new();
        let mut creators: BTreeMap<ThreadId, BTreeSet<(ThreadId, StmtId)>> = BTreeMap::new();
        let mut added = false;
        for sum in self.summaries.values() {
            for (ctx, s) in sum.reachable_contexts() {
                let StmtKind::Create { entry, .. } = &self.cfgs.stmt(ctx.stmt).kind else {
                    continue;
                };
                for name in resolve_entry(self.p, self.cfgs, ctx, s, entry)? {
                    let id = match self.classes.values().find(|c| c.entry == name) {
                        Some(c) => c.id,
                        None => {
                            let id = self.classes.keys().max().map_or(0, |m| m + 1);
                            self.classes.insert(
                                id,
                                ThreadClass {
                                    id,
                                    entry: name.clone(),
                                    creators: BTreeSet::new(),
                                    multi_instance: false,
                                },
                            );
                            added = true;
                            id
                        }
                    };
                    creates.entry(ctx.clone()).or_default().insert(id);
                    creators.entry(id).or_default().insert((ctx.thread, ctx.stmt));
                }
            }
        }
        for (id, c) in self.classes.iter_mut() {
            c.creators = creators.remove(id).unwrap_or_default();
        }
        self.creates = creates;
        Ok(added)
    }

    fn sites_of(&self, t: ThreadId) -> Vec<&Context> {
        self.creates
            .iter()
            .filter(|(_, ts)| ts.contains(&t))
            .map(|(c, _)| c)
            .collect()
    }

    /// Join of the creators' states at the create sites of `t`.
    fn under_init(&self, t: ThreadId) -> AbsState {
        let entry = &self.classes[&t].entry;
        let mut out = AbsState::unreachable();
        for ctx in self.sites_of(t) {
            let mut s = self.summaries[&ctx.thread]
                .state(ctx)
                .restrict(|b| !matches!(b, Base::Local { thread, .. } | Base::Formal { thread, .. } if *thread == t));
            bind_argument(self.p, self.cfgs, &self.summaries, &[ctx], t, entry, &mut s);
            s.ret = None;
            out = out.join(self.p, &s);
        }
        out
    }

    /// Creator classes of `t` other than itself.
    fn ancestors(&self, t: ThreadId) -> BTreeSet<ThreadId> {
        let mut seen = BTreeSet::new();
        let mut todo = vec![t];
        while let Some(u) = todo.pop() {
            for (c, _) in &self.classes[&u].creators {
                if seen.insert(*c) {
                    todo.push(*c);
                }
            }
        }
        seen.remove(&t);
        seen
    }

    fn solve_under(&mut self) -> Result<(), AnalysisError> {
        let mut dirty = BTreeSet::from([MAIN]);
        let mut runs: BTreeMap<ThreadId, usize> = BTreeMap::new();
        while !dirty.is_empty() {
            let t = dirty
                .iter()
                .copied()
                .find(|t| self.ancestors(*t).is_disjoint(&dirty))
                .unwrap_or_else(|| *dirty.iter().next().unwrap());
            dirty.remove(&t);
            let n = runs.entry(t).or_default();
            *n += 1;
            if *n > MAX_UNDER_ROUNDS {
                return Err(AnalysisError::Unsupported("cyclic thread creation".into()));
            }
            let sum = self.analyze(t)?;
            self.analyses += 1;
            self.summaries.insert(t, sum);
            self.discover()?;
            let ids: Vec<ThreadId> = self.classes.keys().copied().filter(|u| *u != MAIN).collect();
            for u in ids {
                let s = self.under_init(u);
                if self.init.get(&u) != Some(&s) {
                    self.init.insert(u, s);
                    dirty.insert(u);
                }
            }
        }
        Ok(())
    }

    /// Join of every reachable pre-state and exit state, on shared cells.
    fn encountered(&self) -> AbsState {
        let mut out = AbsState::unreachable();
        for sum in self.summaries.values() {
            let states = sum
                .reachable_contexts()
                .map(|(_, s)| s)
                .chain(sum.exit.reachable.then_some(&sum.exit));
            for s in states {
                let mut r = s.restrict(|b| is_shared_base(b, &self.escaped));
                r.ret = None;
                out = out.join(self.p, &r);
            }
        }
        out
    }

    /// One update of every class's initial state; true if anything moved.
    fn over_round(&mut self) -> Result<bool, AnalysisError> {
        let ids: Vec<ThreadId> = self.classes.keys().copied().collect();
        let results: Vec<(ThreadId, Result<ThreadSummary, AnalysisError>)> =
            ids.par_iter().map(|t| (*t, self.analyze(*t))).collect();
        for (t, r) in results {
            self.summaries.insert(t, r?);
            self.analyses += 1;
        }
        let added = self.discover()?;
        let shared = AbsState::static_init(self.p).join(self.p, &self.encountered());
        let mut changed = false;
        let mut updates = Vec::new();
        for (t, class) in &self.classes {
            let mut target = shared.clone();
            if *t != MAIN {
                let sites = self.sites_of(*t);
                bind_argument(
                    self.p,
                    self.cfgs,
                    &self.summaries,
                    &sites,
                    *t,
                    &class.entry,
                    &mut target,
                );
            }
            let next = match self.init.get(t) {
                Some(old) => old.widen(self.p, &old.join(self.p, &target)),
                None => target,
            };
            if self.init.get(t) != Some(&next) {
                changed = true;
                updates.push((*t, next));
            }
        }
        self.init.extend(updates);
        Ok(changed || added)
    }

    fn solve_over(&mut self) -> Result<(), AnalysisError> {
        for _ in 0..MAX_OVER_ROUNDS {
            if !self.over_round()? {
                return Ok(());
            }
        }
        Err(AnalysisError::Unsupported(
            "thread initial states do not stabilise".into(),
        ))
    }

    fn finish(mut self) -> ThreadTable {
        self.classes
            .retain(|id, c| *id == MAIN || !c.creators.is_empty());
        let keep: BTreeSet<ThreadId> = self.classes.keys().copied().collect();
        self.init.retain(|t, _| keep.contains(t));
        self.summaries.retain(|t, _| keep.contains(t));
        ThreadTable {
            strategy: self.strategy,
            k: self.k,
            classes: self.classes,
            init_states: self.init,
            summaries: self.summaries,
            creates: self.creates,
            weak_allocs: self.weak_allocs,
            escaped: self.escaped,
            analyses: self.analyses,
        }
    }
}

/// Set `multi_instance` on every class that may run more than once.
pub fn mark_multi_instance(p: &Program, cfgs: &CfgSet, mut table: ThreadTable) -> ThreadTable {
    let inst = instance_counts(p, cfgs, &table.create_entries());
    for c in table.classes.values_mut() {
        c.multi_instance = c.id != MAIN && inst.get(&c.entry).copied().unwrap_or(0) >= 2;
    }
    table
}

/// Discover thread classes and solve for their initial states.
pub fn solve(
    p: &Program,
    cfgs: &CfgSet,
    strategy: Strategy,
    k: usize,
) -> Result<ThreadTable, AnalysisError> {
    check_recursion(cfgs, &p.entry)?;
    let escaped = escaped_locals(p);
    let mut weak = weak_allocations(p, cfgs, &syntactic_creates(p));
    for attempt in 0.. {
        let mut solver = Solver::new(p, cfgs, strategy, k, weak.clone(), escaped.clone());
        match strategy {
            Strategy::Under => solver.solve_under()?,
            Strategy::Over => solver.solve_over()?,
        }
        let table = solver.finish();
        let actual = weak_allocations(p, cfgs, &table.create_entries());
        let settled = if attempt < 2 {
            actual == weak
        } else {
            actual.is_subset(&weak)
        };
        if settled {
            return Ok(mark_multi_instance(p, cfgs, table));
        }
        weak = if attempt < 2 { actual } else { &weak | &actual };
    }
    unreachable!()
}
