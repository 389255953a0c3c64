//! Which thread classes may or must run in parallel at given contexts,
//! from the placement of create and join statements.

use std::collections::{BTreeMap, BTreeSet};

use rayon::prelude::*;
use serde::Serialize;

use crate::absint::{
    AbsState, Analysis, CallString, Context, Engine, Evaluator, ThreadId, ThreadSummary,
};
use crate::frontend::{CfgSet, EdgeLabel, Expr, Program, StmtId, StmtKind};
use crate::thread_system::{ThreadTable, MAIN};

/// Widest handle interval still resolved against create statements.
const MAX_HANDLE_SPAN: i64 = 4096;

#[derive(Debug, Clone, Default, PartialEq, Eq, Hash, Serialize)]
pub struct LcState {
    pub reachable: bool,
    pub created_may: BTreeSet<ThreadId>,
    pub created_must: BTreeSet<ThreadId>,
    pub joined_may: BTreeSet<ThreadId>,
    pub joined_must: BTreeSet<ThreadId>,
    /// Some path from the thread entry passes a join.
    pub blocked_may: bool,
    /// Some path from the thread entry acquires a lock.
    pub locked_may: bool,
}

impl LcState {
    fn entry() -> LcState {
        LcState {
            reachable: true,
            ..LcState::default()
        }
    }

    fn join(&self, o: &LcState) -> LcState {
        if !self.reachable {
            return o.clone();
        }
        if !o.reachable {
            return self.clone();
        }
        LcState {
            reachable: true,
            created_may: &self.created_may | &o.created_may,
            created_must: &self.created_must & &o.created_must,
            joined_may: &self.joined_may | &o.joined_may,
            joined_must: &self.joined_must & &o.joined_must,
            blocked_may: self.blocked_may || o.blocked_may,
            locked_may: self.locked_may || o.locked_may,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LifecycleFacts {
    pub per_context: BTreeMap<Context, LcState>,
    pub exits: BTreeMap<ThreadId, LcState>,
    /// No lock is ever held at a lock, join or thread exit, so every
    /// acquisition eventually succeeds and does not count as blocking.
    pub flat_locking: bool,
    /// Classes each reachable join context may wait for.
    pub joins: BTreeMap<Context, BTreeSet<ThreadId>>,
}

impl LifecycleFacts {
    pub fn at(&self, ctx: &Context) -> Option<&LcState> {
        self.per_context.get(ctx).filter(|s| s.reachable)
    }
}

/// Classes a join handle may name, and whether it names exactly one
/// single-instance class.
pub fn join_targets(
    p: &Program,
    cfgs: &CfgSet,
    table: &ThreadTable,
    ctx: &Context,
    s: &AbsState,
    handle: &Expr,
) -> (BTreeSet<ThreadId>, bool) {
    let by_stmt = create_classes(table);
    let all: BTreeSet<ThreadId> = table.classes.keys().copied().collect();
    let v = Evaluator::at(p, cfgs, ctx).eval(s, handle);
    let Some(itv) = v.as_int() else {
        return (all, false);
    };
    if itv.lo == i64::MIN || itv.hi == i64::MAX || itv.hi - itv.lo > MAX_HANDLE_SPAN {
        return (all, false);
    }
    let mut classes = BTreeSet::new();
    for (_, ts) in by_stmt.range(itv.lo.max(0) as StmtId..=itv.hi.max(0) as StmtId) {
        classes.extend(ts.iter().copied());
    }
    let unique = classes.len() == 1 && classes.iter().all(|t| !table.is_multi(*t));
    (classes, unique)
}

fn create_classes(table: &ThreadTable) -> BTreeMap<StmtId, BTreeSet<ThreadId>> {
    let mut out: BTreeMap<StmtId, BTreeSet<ThreadId>> = BTreeMap::new();
    for (ctx, ts) in &table.creates {
        out.entry(ctx.stmt).or_default().extend(ts.iter().copied());
    }
    out
}

struct Lifecycle<'a> {
    p: &'a Program,
    cfgs: &'a CfgSet,
    table: &'a ThreadTable,
    summary: &'a ThreadSummary,
}

impl<'a> Analysis for Lifecycle<'a> {
    type State = LcState;

    fn bottom(&self) -> LcState {
        LcState::default()
    }

    fn is_bottom(&self, s: &LcState) -> bool {
        !s.reachable
    }

    fn join(&self, a: &LcState, b: &LcState) -> LcState {
        a.join(b)
    }

    fn transfer(&self, ctx: &Context, label: &EdgeLabel, s: &LcState) -> LcState {
        if !s.reachable || !self.summary.reachable(ctx) {
            return self.bottom();
        }
        let id = match label {
            EdgeLabel::Guard { polarity, .. } => {
                return if self.summary.edge_feasible(ctx, Some(*polarity)) {
                    s.clone()
                } else {
                    self.bottom()
                };
            }
            EdgeLabel::Stmt(id) => *id,
        };
        let mut out = s.clone();
        match &self.cfgs.stmt(id).kind {
            StmtKind::Create { .. } => {
                let ts = self.table.creates.get(ctx).cloned().unwrap_or_default();
                out.created_may.extend(ts.iter().copied());
                if ts.len() == 1 {
                    out.created_must.extend(ts.iter().copied());
                }
            }
            StmtKind::Join(h) => {
                let abs = self.summary.state(ctx);
                let (ts, unique) = join_targets(self.p, self.cfgs, self.table, ctx, &abs, h);
                if unique {
                    out.joined_must
                        .extend(ts.intersection(&s.created_must).copied());
                }
                out.joined_may.extend(ts);
                out.blocked_may = true;
            }
            StmtKind::Lock(_) | StmtKind::RdLock(_) | StmtKind::WrLock(_) => {
                out.locked_may = true;
            }
            _ => {}
        }
        out
    }

    fn call_entry(
        &self,
        ctx: &Context,
        _callee_cs: &CallString,
        _callee: &str,
        _args: &[Expr],
        s: &LcState,
    ) -> LcState {
        if self.summary.reachable(ctx) {
            s.clone()
        } else {
            self.bottom()
        }
    }

    fn call_return(
        &self,
        _ctx: &Context,
        _callee_cs: &CallString,
        _callee: &str,
        _result: Option<&Expr>,
        _pre: &LcState,
        exit: &LcState,
    ) -> LcState {
        exit.clone()
    }
}

pub fn compute_lifecycle(p: &Program, cfgs: &CfgSet, table: &ThreadTable) -> LifecycleFacts {
    let per_class: Vec<_> = table
        .summaries
        .par_iter()
        .map(|(t, summary)| {
            let a = Lifecycle {
                p,
                cfgs,
                table,
                summary,
            };
            let rec = Engine::new(&a, cfgs, *t, table.k).run(&summary.entry, LcState::entry());
            (*t, rec)
        })
        .collect();
    let mut out = LifecycleFacts::default();
    for (t, rec) in per_class {
        out.per_context.extend(rec.pre);
        out.exits.insert(t, rec.exit);
    }
    for (ctx, abs) in table.contexts() {
        if let StmtKind::Join(h) = &cfgs.stmt(ctx.stmt).kind {
            let (ts, _) = join_targets(p, cfgs, table, ctx, abs, h);
            out.joins.insert(ctx.clone(), ts);
        }
    }
    out
}

/// `c1` is a join that may wait for the thread of `c2`.
fn waits_for(facts: &LifecycleFacts, c1: &Context, c2: &Context) -> bool {
    facts.joins.get(c1).is_some_and(|ts| ts.contains(&c2.thread))
}

fn creator_classes(table: &ThreadTable, t: ThreadId) -> BTreeSet<ThreadId> {
    table
        .classes
        .get(&t)
        .map(|c| c.creators.iter().map(|(u, _)| *u).collect())
        .unwrap_or_default()
}

/// The class created directly by `t1` through which every instance of
/// `t2` comes into existence, if `t1` is the only creator chain of `t2`.
fn gate(table: &ThreadTable, t1: ThreadId, t2: ThreadId) -> Option<ThreadId> {
    let mut x = t2;
    for _ in 0..=table.classes.len() {
        let cr = creator_classes(table, x);
        if cr.len() != 1 {
            return None;
        }
        let u = *cr.iter().next().unwrap();
        if u == t1 {
            return Some(x);
        }
        if u == x || u == MAIN {
            return None;
        }
        x = u;
    }
    None
}

/// `c1` is ordered before every instance of `c2`'s class is created, or
/// after it is surely joined.
fn ordered_out(facts: &LifecycleFacts, table: &ThreadTable, c1: &Context, c2: &Context) -> bool {
    let (t1, t2) = (c1.thread, c2.thread);
    let Some(f1) = facts.at(c1) else {
        return true;
    };
    if f1.joined_must.contains(&t2) {
        return true;
    }
    if !table.is_multi(t1) {
        if let Some(x) = gate(table, t1, t2) {
            if !f1.created_may.contains(&x) {
                return true;
            }
        }
    }
    false
}

/// Both classes have one single-instance creator, which surely joins one
/// before it may create the other.
fn siblings_ordered(facts: &LifecycleFacts, table: &ThreadTable, t1: ThreadId, t2: ThreadId) -> bool {
    let (cr1, cr2) = (creator_classes(table, t1), creator_classes(table, t2));
    if cr1.len() != 1 || cr1 != cr2 || table.is_multi(*cr1.iter().next().unwrap()) {
        return false;
    }
    let sites: Vec<&Context> = table
        .creates
        .iter()
        .filter(|(_, ts)| ts.contains(&t2))
        .map(|(c, _)| c)
        .collect();
    !sites.is_empty()
        && sites
            .iter()
            .all(|c| facts.at(c).is_some_and(|f| f.joined_must.contains(&t1)))
}

pub fn may_parallel(facts: &LifecycleFacts, table: &ThreadTable, c1: &Context, c2: &Context) -> bool {
    if facts.at(c1).is_none() || facts.at(c2).is_none() {
        return false;
    }
    if c1.thread == c2.thread {
        return table.is_multi(c1.thread);
    }
    if ordered_out(facts, table, c1, c2) || ordered_out(facts, table, c2, c1) {
        return false;
    }
    if siblings_ordered(facts, table, c1.thread, c2.thread)
        || siblings_ordered(facts, table, c2.thread, c1.thread)
    {
        return false;
    }
    true
}

/// `ctx` is executed on every run of its thread, reached without blocking.
fn runs_freely(facts: &LifecycleFacts, table: &ThreadTable, ctx: &Context) -> bool {
    facts
        .at(ctx)
        .is_some_and(|f| !f.blocked_may && (!f.locked_may || facts.flat_locking))
        && table
            .summaries
            .get(&ctx.thread)
            .is_some_and(|s| s.must_exec.contains(ctx))
}

/// Every run starts class `t`.
fn surely_runs(facts: &LifecycleFacts, table: &ThreadTable, t: ThreadId, depth: usize) -> bool {
    if t == MAIN {
        return true;
    }
    if depth > table.classes.len() {
        return false;
    }
    table.creates.iter().any(|(c, ts)| {
        ts.len() == 1
            && ts.contains(&t)
            && runs_freely(facts, table, c)
            && surely_runs(facts, table, c.thread, depth + 1)
    })
}

fn creator_must_parallel(
    facts: &LifecycleFacts,
    table: &ThreadTable,
    c1: &Context,
    c2: &Context,
) -> bool {
    let Some(f1) = facts.at(c1) else {
        return false;
    };
    f1.created_must.contains(&c2.thread)
        && !f1.joined_may.contains(&c2.thread)
        && runs_freely(facts, table, c1)
        && surely_runs(facts, table, c1.thread, 0)
        && runs_freely(facts, table, c2)
}

fn siblings_must_parallel(
    facts: &LifecycleFacts,
    table: &ThreadTable,
    c1: &Context,
    c2: &Context,
) -> bool {
    let pair = [c1.thread, c2.thread];
    runs_freely(facts, table, c1)
        && runs_freely(facts, table, c2)
        && facts.per_context.iter().any(|(m, f)| {
            f.reachable
                && !pair.contains(&m.thread)
                && !table.is_multi(m.thread)
                && pair.iter().all(|t| f.created_must.contains(t) && !f.joined_may.contains(t))
                && runs_freely(facts, table, m)
                && surely_runs(facts, table, m.thread, 0)
        })
}

pub fn must_parallel(facts: &LifecycleFacts, table: &ThreadTable, c1: &Context, c2: &Context) -> bool {
    if c1 == c2 || c1.thread == c2.thread {
        return false;
    }
    if waits_for(facts, c1, c2) || waits_for(facts, c2, c1) {
        return false;
    }
    let must = creator_must_parallel(facts, table, c1, c2)
        || creator_must_parallel(facts, table, c2, c1)
        || siblings_must_parallel(facts, table, c1, c2);
    must && may_parallel(facts, table, c1, c2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frontend::{build_cfg, parse_program, MachineModel};
    use crate::thread_system::{solve, Strategy};

    struct Fixture {
        p: Program,
        table: ThreadTable,
        facts: LifecycleFacts,
    }

    fn fixture(src: &str) -> Fixture {
        let p = parse_program(src, "t.c", MachineModel::Lp64).unwrap();
        let cfgs = build_cfg(&p);
        let table = solve(&p, &cfgs, Strategy::Over, 2).unwrap();
        let facts = compute_lifecycle(&p, &cfgs, &table);
        Fixture { p, table, facts }
    }

    impl Fixture {
        /// Context of the assignment `var = value` in `func`.
        fn at(&self, func: &str, var: &str, value: i64) -> Context {
            let id = self
                .p
                .statements()
                .into_iter()
                .find(|(f, s)| {
                    *f == func
                        && matches!(&s.kind, StmtKind::Assign(Expr::Var(n, _), Expr::Int(v)) if n == var && *v == value)
                })
                .unwrap_or_else(|| panic!("no {var} = {value} in {func}"))
                .1
                .id;
            self.table
                .contexts()
                .map(|(c, _)| c)
                .find(|c| c.stmt == id)
                .cloned()
                .unwrap()
        }

        fn fact(&self, c: &Context) -> &LcState {
            self.facts.at(c).unwrap()
        }

        fn class(&self, entry: &str) -> ThreadId {
            self.table.class_of_entry(entry).unwrap()
        }

        fn may(&self, a: &Context, b: &Context) -> bool {
            may_parallel(&self.facts, &self.table, a, b)
        }

        fn must(&self, a: &Context, b: &Context) -> bool {
            must_parallel(&self.facts, &self.table, a, b)
        }
    }

    const LIFECYCLE: &str = "int x; int g;
        void *f(void *a) { g = 1; return 0; }
        int main() { pthread_t t; x = 1; pthread_create(&t, 0, f, 0); x = 2; pthread_join(t, 0); x = 3; return 0; }";

    #[test]
    fn straight_line_facts() {
        let fx = fixture(LIFECYCLE);
        let f = fx.class("f");
        let (c1, c2, c3) = (fx.at("main", "x", 1), fx.at("main", "x", 2), fx.at("main", "x", 3));
        assert!(fx.fact(&c1).created_may.is_empty());
        assert_eq!(fx.fact(&c2).created_must, BTreeSet::from([f]));
        assert!(fx.fact(&c2).joined_must.is_empty());
        assert_eq!(fx.fact(&c3).joined_must, BTreeSet::from([f]));
    }

    #[test]
    fn create_and_join_order_parallelism() {
        let fx = fixture(LIFECYCLE);
        let w = fx.at("f", "g", 1);
        let (c1, c2, c3) = (fx.at("main", "x", 1), fx.at("main", "x", 2), fx.at("main", "x", 3));
        assert!(!fx.may(&c1, &w));
        assert!(!fx.may(&w, &c1));
        assert!(!fx.may(&c3, &w));
        assert!(fx.may(&c2, &w));
        assert!(fx.must(&c2, &w));
        assert!(fx.must(&w, &c2));
        assert!(!fx.must(&w, &w));
    }

    #[test]
    fn conditional_create() {
        let fx = fixture(
            "int x; int g;
             void *f(void *a) { g = 1; return 0; }
             int main() { pthread_t t; int c; if (c) { pthread_create(&t, 0, f, 0); } x = 1; return 0; }",
        );
        let c = fx.at("main", "x", 1);
        assert_eq!(fx.fact(&c).created_may, BTreeSet::from([fx.class("f")]));
        assert!(fx.fact(&c).created_must.is_empty());
        assert!(!fx.must(&c, &fx.at("f", "g", 1)));
        assert!(fx.may(&c, &fx.at("f", "g", 1)));
    }

    #[test]
    fn loop_create() {
        let fx = fixture(
            "int x; int g;
             void *f(void *a) { g = 1; return 0; }
             int main() { pthread_t t; int n; int i; i = 0; while (i < n) { pthread_create(&t, 0, f, 0); i = i + 1; } x = 1; return 0; }",
        );
        let c = fx.at("main", "x", 1);
        assert_eq!(fx.fact(&c).created_may, BTreeSet::from([fx.class("f")]));
        assert!(fx.fact(&c).created_must.is_empty());
        let w = fx.at("f", "g", 1);
        assert!(fx.may(&w, &w));
        assert!(!fx.must(&w, &w));
    }

    #[test]
    fn single_instance_not_self_parallel() {
        let fx = fixture(LIFECYCLE);
        let w = fx.at("f", "g", 1);
        assert!(!fx.may(&w, &w));
    }

    #[test]
    fn multi_instance_join_is_not_must() {
        let fx = fixture(
            "int x; int g;
             void *f(void *a) { g = 1; return 0; }
             int main() { pthread_t t[2]; int i; i = 0;
               while (i < 2) { pthread_create(&t[i], 0, f, 0); i = i + 1; }
               i = 0; while (i < 2) { pthread_join(t[i], 0); i = i + 1; }
               x = 1; return 0; }",
        );
        let c = fx.at("main", "x", 1);
        assert!(fx.fact(&c).joined_must.is_empty());
        assert!(fx.may(&c, &fx.at("f", "g", 1)));
    }

    #[test]
    fn nested_creation_before_creator_exists() {
        let fx = fixture(
            "int x; int g;
             void *f(void *a) { g = 1; return 0; }
             void *h(void *a) { pthread_t u; pthread_create(&u, 0, f, 0); return 0; }
             int main() { pthread_t t; x = 1; pthread_create(&t, 0, h, 0); x = 2; return 0; }",
        );
        let w = fx.at("f", "g", 1);
        assert!(!fx.may(&fx.at("main", "x", 1), &w));
        assert!(fx.may(&fx.at("main", "x", 2), &w));
    }

    #[test]
    fn siblings_ordered_by_join() {
        let fx = fixture(
            "int g;
             void *f(void *a) { g = 1; return 0; }
             void *h(void *a) { g = 2; return 0; }
             int main() { pthread_t t; pthread_t u; pthread_create(&t, 0, f, 0); pthread_join(t, 0);
               pthread_create(&u, 0, h, 0); pthread_join(u, 0); return 0; }",
        );
        assert!(!fx.may(&fx.at("f", "g", 1), &fx.at("h", "g", 2)));
    }

    #[test]
    fn siblings_must_run_together() {
        let fx = fixture(
            "int g;
             void *f(void *a) { g = 1; return 0; }
             void *h(void *a) { g = 2; return 0; }
             int main() { pthread_t t; pthread_t u; pthread_create(&t, 0, f, 0);
               pthread_create(&u, 0, h, 0); pthread_join(t, 0); pthread_join(u, 0); return 0; }",
        );
        let (a, b) = (fx.at("f", "g", 1), fx.at("h", "g", 2));
        assert!(fx.must(&a, &b));
        assert!(fx.must(&b, &a));
    }

    #[test]
    fn blocking_prefix_defeats_must() {
        let fx = fixture(
            "int x; int g; pthread_mutex_t m;
             void *f(void *a) { pthread_mutex_lock(&m); pthread_mutex_unlock(&m); g = 1; return 0; }
             int main() { pthread_t t; pthread_create(&t, 0, f, 0); x = 2; pthread_join(t, 0); return 0; }",
        );
        let (c, w) = (fx.at("main", "x", 2), fx.at("f", "g", 1));
        assert!(fx.may(&c, &w));
        assert!(!fx.must(&c, &w));
    }

    #[test]
    fn invariants_hold_on_all_pairs() {
        for src in [LIFECYCLE, "int g; int x;
             void *f(void *a) { g = 1; return 0; }
             void *h(void *a) { pthread_t u; g = 3; pthread_create(&u, 0, f, 0); pthread_join(u, 0); return 0; }
             int main() { pthread_t t; int c; x = 1; if (c) { pthread_create(&t, 0, h, 0); } pthread_create(&t, 0, f, 0); x = 2; return 0; }"]
        {
            let fx = fixture(src);
            let ctxs: Vec<Context> = fx.table.contexts().map(|(c, _)| c.clone()).collect();
            for a in &ctxs {
                let fa = fx.fact(a);
                assert!(fa.created_must.is_subset(&fa.created_may));
                assert!(fa.joined_must.is_subset(&fa.created_must));
                for b in &ctxs {
                    assert_eq!(fx.may(a, b), fx.may(b, a));
                    assert_eq!(fx.must(a, b), fx.must(b, a));
                    assert!(!fx.must(a, b) || fx.may(a, b));
                }
            }
        }
    }
}
